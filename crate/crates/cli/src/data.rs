//! Dataset CSV input and posterior-mean CSV output.

use std::collections::HashSet;
use std::path::Path;

use gmle_mix::models::CountObservation;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Deserialize)]
struct Row {
    stratum_id: String,
    x: u32,
    k: u32,
}

/// Strata ids and observations, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub observations: Vec<CountObservation>,
}

/// Reads `stratum_id,x,k` rows. Errors name the offending line.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    for required in ["stratum_id", "x", "k"] {
        if !headers.iter().any(|h| h == required) {
            return Err(CliError::Input(format!(
                "{}: header must contain stratum_id,x,k (missing {required})",
                path.display()
            )));
        }
    }
    let mut ids = Vec::new();
    let mut observations = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = record.map_err(|e| {
            let line = e.position().map_or(line as u64, |p| p.line());
            CliError::Input(format!(
                "{} line {line}: {}",
                path.display(),
                e.kind_message()
            ))
        })?;
        if row.x > row.k {
            return Err(CliError::Input(format!(
                "{} line {line}: x = {} exceeds k = {} for stratum {}",
                path.display(),
                row.x,
                row.k,
                row.stratum_id
            )));
        }
        if !seen.insert(row.stratum_id.clone()) {
            return Err(CliError::Input(format!(
                "{} line {line}: duplicate stratum_id {}",
                path.display(),
                row.stratum_id
            )));
        }
        ids.push(row.stratum_id);
        observations.push(CountObservation { x: row.x, k: row.k });
    }
    if observations.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    Ok(Dataset { ids, observations })
}

trait KindMessage {
    fn kind_message(&self) -> String;
}

impl KindMessage for csv::Error {
    fn kind_message(&self) -> String {
        match self.kind() {
            csv::ErrorKind::Deserialize { err, .. } => match err.field() {
                Some(field) => format!("field {}: {}", field + 1, err.kind()),
                None => err.kind().to_string(),
            },
            _ => self.to_string(),
        }
    }
}

#[derive(Serialize)]
struct PosteriorRow<'a> {
    stratum_id: &'a str,
    x: u32,
    k: u32,
    posterior_mean: f64,
}

pub fn write_posterior_means(
    path: &Path,
    data: &Dataset,
    observations: &[CountObservation],
    means: &[f64],
) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    for ((id, o), m) in data.ids.iter().zip(observations).zip(means) {
        writer
            .serialize(PosteriorRow {
                stratum_id: id,
                x: o.x,
                k: o.k,
                posterior_mean: *m,
            })
            .map_err(io)?;
    }
    writer
        .flush()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
