use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use latentdif::{ModelParams, ResponseMatrix};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Reads a responses CSV: header `item_1..item_J`, then one row of `0`/`1` per respondent.
pub fn read_responses(path: &Path) -> Result<ResponseMatrix, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(CliError::Usage)?;
    let headers = reader.headers().map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))?.clone();
    for (j, h) in headers.iter().enumerate() {
        if h != format!("item_{}", j + 1) {
            return Err(CliError::Usage(anyhow!(
                "{}: column {} is named {h:?}, expected item_{}",
                path.display(),
                j + 1,
                j + 1
            )));
        }
    }
    let n_items = headers.len();
    if n_items == 0 {
        return Err(CliError::Usage(anyhow!("{}: no item columns", path.display())));
    }
    let mut entries = Vec::new();
    let mut n = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))?;
        for (j, field) in record.iter().enumerate() {
            entries.push(match field {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(CliError::Usage(anyhow!(
                        "{}: row {}, item_{}: {other:?} is not 0 or 1",
                        path.display(),
                        row + 1,
                        j + 1
                    )))
                }
            });
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Usage(anyhow!("{}: no respondents", path.display())));
    }
    ResponseMatrix::new(n, n_items, entries).map_err(CliError::from)
}

pub fn responses_csv(data: &ResponseMatrix) -> String {
    let mut out = (1..=data.n_items()).map(|j| format!("item_{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in data.rows() {
        let line: Vec<&str> = row.iter().map(|&y| if y == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(CliError::Usage)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))
}

pub fn read_params(path: &Path) -> Result<ModelParams, CliError> {
    let params: ModelParams = read_json(path)?;
    if !params.is_valid() {
        return Err(CliError::Usage(anyhow!("{}: invalid parameters: {:?}", path.display(), params.validate())));
    }
    Ok(params)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Output directory, created up front so a bad path fails before any fitting.
pub struct OutputDir(PathBuf);

impl OutputDir {
    pub fn prepare(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path)
            .with_context(|| format!("cannot create output directory {}", path.display()))
            .map_err(CliError::Usage)?;
        let probe = path.join(".latentdif-write-test");
        fs::write(&probe, b"")
            .with_context(|| format!("output directory {} is not writable", path.display()))
            .map_err(CliError::Usage)?;
        let _ = fs::remove_file(probe);
        Ok(Self(path.to_path_buf()))
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.0.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display())).map_err(CliError::Usage)
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| anyhow!("{v:?}: {e}")))
        .collect::<anyhow::Result<Vec<T>>>()
        .and_then(|v| if v.is_empty() { bail!("empty list") } else { Ok(v) })
}
