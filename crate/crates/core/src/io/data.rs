//! CSV ingestion and export of samples.

use std::path::Path;

use log::info;

use crate::error::{Error, Result};
use crate::model::{CovariateLayout, Observation, Sample};

/// Which CSV columns hold the outcome, the response indicator and the covariates.
///
/// Covariates are stored as `x = (u columns, z columns)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    pub y: String,
    /// Explicit 0/1 indicator; when absent, an empty or `NA` outcome means nonresponse.
    pub r: Option<String>,
    pub u: Vec<String>,
    pub z: Vec<String>,
}

impl ColumnMapping {
    pub fn new(y: impl Into<String>, r: Option<String>, u: Vec<String>, z: Vec<String>) -> Result<Self> {
        let m = ColumnMapping { y: y.into(), r, u, z };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.is_empty() {
            return Err(Error::key("ucols", "at least one u column is required"));
        }
        if self.z.is_empty() {
            return Err(Error::key("zcols", "at least one instrument column is required"));
        }
        let mut all: Vec<&str> = vec![self.y.as_str()];
        all.extend(self.r.as_deref());
        all.extend(self.u.iter().map(String::as_str));
        all.extend(self.z.iter().map(String::as_str));
        let mut sorted = all.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::key("columns", format!("column `{}` is used more than once", w[0])));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<CovariateLayout> {
        CovariateLayout::leading(self.u.len(), self.u.len() + self.z.len())
    }
}

/// Loaded sample with row counts.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: Sample,
    pub n_rows: usize,
    pub n_missing: usize,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<f64> {
    let c = cell.trim();
    c.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::DataRow {
            line,
            column: column.to_string(),
            message: format!("not a finite number: `{c}`"),
        })
}

/// Reads a headed CSV file into a [`Sample`].
pub fn load_csv(path: &Path, mapping: &ColumnMapping) -> Result<LoadedSample> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open `{}`: {e}", path.display())))?;
    load_csv_from(file, mapping)
}

pub fn load_csv_from<R: std::io::Read>(reader: R, mapping: &ColumnMapping) -> Result<LoadedSample> {
    mapping.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in header")))
    };
    let y_idx = find(&mapping.y)?;
    let r_idx = mapping.r.as_deref().map(find).transpose()?;
    let cov: Vec<(usize, &str)> = mapping
        .u
        .iter()
        .chain(&mapping.z)
        .map(|c| find(c).map(|i| (i, c.as_str())))
        .collect::<Result<_>>()?;

    let mut obs = Vec::new();
    let mut n_missing = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let mut x = Vec::with_capacity(cov.len());
        for &(i, name) in &cov {
            if is_missing(cell(i)) {
                return Err(Error::DataRow {
                    line,
                    column: name.to_string(),
                    message: "covariates must be fully observed".into(),
                });
            }
            x.push(parse_cell(cell(i), line, name)?);
        }
        let responded = match r_idx {
            Some(ri) => match cell(ri).trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::DataRow {
                        line,
                        column: mapping.r.clone().unwrap_or_default(),
                        message: format!("response indicator must be 0 or 1, got `{other}`"),
                    })
                }
            },
            None => !is_missing(cell(y_idx)),
        };
        if responded {
            if is_missing(cell(y_idx)) {
                return Err(Error::DataRow {
                    line,
                    column: mapping.y.clone(),
                    message: "respondent row has no outcome".into(),
                });
            }
            obs.push(Observation::respondent(x, parse_cell(cell(y_idx), line, &mapping.y)?));
        } else {
            n_missing += 1;
            obs.push(Observation::nonrespondent(x));
        }
    }
    let n_rows = obs.len();
    info!("loaded {n_rows} rows, {n_missing} nonrespondents, 0 rejected");
    let sample = Sample::new(mapping.layout()?, obs)?;
    Ok(LoadedSample { sample, n_rows, n_missing })
}

/// Writes `sample` with header `names..., y`; nonrespondent outcomes are left empty.
///
/// `names` labels the covariates in `x` order.
pub fn write_sample_csv(sample: &Sample, names: &[String], y_name: &str, path: &Path) -> Result<()> {
    if names.len() != sample.p() {
        return Err(Error::Config(format!(
            "{} column names for {} covariates",
            names.len(),
            sample.p()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push(y_name);
    w.write_record(&header)?;
    for o in sample.observations() {
        let mut row: Vec<String> = o.x().iter().map(|v| v.to_string()).collect();
        row.push(o.y_opt().map(|y| y.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
