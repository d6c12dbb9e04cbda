//! Study-level data: raw event counts, the derived log-rate observations with
//! their known within-study covariance, and CSV ingestion.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat2;

/// Value substituted for a zero event count (and added to that arm's
/// person-years).
pub const ZERO_EVENT_CORRECTION: f64 = 0.5;

/// Datasets below this size are accepted with a warning.
pub const SMALL_DATASET: usize = 5;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("person-years must be positive and finite, got {0}")]
    NonPositivePersonYears(f64),
    #[error("event counts must be nonnegative and finite, got {0}")]
    InvalidCount(f64),
    #[error("within-study covariance is invalid: {0}")]
    InvalidCovariance(String),
    #[error("observation is not finite: {0}")]
    NonFiniteObservation(String),
    #[error("a dataset needs at least 2 studies, got {0}")]
    TooFewStudies(usize),
    #[error("row {row}, column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },
    #[error("unrecognized header {0:?}; expected `{COUNTS_HEADER}` or `{OBSERVATIONS_HEADER}`")]
    UnknownHeader(Vec<String>),
    #[error("input contains no data rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header of the raw-count CSV schema.
pub const COUNTS_HEADER: &str = "deaths_treated,py_treated,deaths_control,py_control";
/// Header of the precomputed-observation CSV schema.
pub const OBSERVATIONS_HEADER: &str = "eta_obs,xi_obs,var_eta,cov_etaxi1,cov_etaxi2,var_xi";

/// Event counts and exposure for the two arms of one study.
///
/// Counts are stored as reals because a corrected zero count is 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyCounts {
    pub deaths_treated: f64,
    pub person_years_treated: f64,
    pub deaths_control: f64,
    pub person_years_control: f64,
}

impl StudyCounts {
    pub fn new(
        deaths_treated: f64,
        person_years_treated: f64,
        deaths_control: f64,
        person_years_control: f64,
    ) -> Self {
        StudyCounts {
            deaths_treated,
            person_years_treated,
            deaths_control,
            person_years_control,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for py in [self.person_years_treated, self.person_years_control] {
            if !(py.is_finite() && py > 0.0) {
                return Err(DataError::NonPositivePersonYears(py));
            }
        }
        for d in [self.deaths_treated, self.deaths_control] {
            if !(d.is_finite() && d >= 0.0) {
                return Err(DataError::InvalidCount(d));
            }
        }
        Ok(())
    }

    /// Applies the zero-event correction to each arm independently.
    pub fn corrected(&self) -> StudyCounts {
        let fix = |deaths: f64, py: f64| {
            if deaths == 0.0 {
                (ZERO_EVENT_CORRECTION, py + ZERO_EVENT_CORRECTION)
            } else {
                (deaths, py)
            }
        };
        let (dt, pt) = fix(self.deaths_treated, self.person_years_treated);
        let (dc, pc) = fix(self.deaths_control, self.person_years_control);
        StudyCounts::new(dt, pt, dc, pc)
    }
}

/// Observed log event rates `(η̂, ξ̂)` of one study with their known
/// within-study covariance `Γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyObservation {
    /// Log event rate in the treated arm.
    pub eta_hat: f64,
    /// Log event rate in the control arm.
    pub xi_hat: f64,
    pub gamma: Mat2,
}

impl StudyObservation {
    pub fn new(eta_hat: f64, xi_hat: f64, gamma: Mat2) -> Result<Self, DataError> {
        if !eta_hat.is_finite() || !xi_hat.is_finite() {
            return Err(DataError::NonFiniteObservation(format!(
                "eta_hat={eta_hat}, xi_hat={xi_hat}"
            )));
        }
        if !gamma.is_finite() {
            return Err(DataError::InvalidCovariance("non-finite entry".into()));
        }
        let scale = gamma.m[0][1].abs().max(gamma.m[1][0].abs()).max(1.0);
        if !gamma.is_symmetric(SYMMETRY_TOL * scale) {
            return Err(DataError::InvalidCovariance(format!(
                "off-diagonal entries differ: {} vs {}",
                gamma.m[0][1], gamma.m[1][0]
            )));
        }
        if gamma.m[0][0] < 0.0 || gamma.m[1][1] < 0.0 {
            return Err(DataError::InvalidCovariance(
                "negative diagonal entry".into(),
            ));
        }
        let gamma = Mat2::sym(gamma.m[0][0], gamma.m[0][1], gamma.m[1][1]);
        if gamma.det() < -SYMMETRY_TOL * gamma.m[0][0].max(gamma.m[1][1]).max(1.0) {
            return Err(DataError::InvalidCovariance(
                "matrix is not positive semidefinite".into(),
            ));
        }
        Ok(StudyObservation {
            eta_hat,
            xi_hat,
            gamma,
        })
    }

    /// `(η̂, ξ̂)` as a vector.
    #[inline]
    pub fn y(&self) -> [f64; 2] {
        [self.eta_hat, self.xi_hat]
    }
}

/// Converts counts to log event rates, correcting zero-event arms first.
///
/// Variances of the log rates are the reciprocal (corrected) counts and the
/// two arms are independent, so `Γ` is diagonal.
pub fn build_observation(counts: &StudyCounts) -> Result<StudyObservation, DataError> {
    counts.validate()?;
    let c = counts.corrected();
    let eta = (c.deaths_treated / c.person_years_treated).ln();
    let xi = (c.deaths_control / c.person_years_control).ln();
    StudyObservation::new(
        eta,
        xi,
        Mat2::diag(1.0 / c.deaths_treated, 1.0 / c.deaths_control),
    )
}

/// An ordered collection of independent studies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    studies: Vec<StudyObservation>,
}

impl Dataset {
    pub fn new(studies: Vec<StudyObservation>) -> Result<Self, DataError> {
        if studies.len() < 2 {
            return Err(DataError::TooFewStudies(studies.len()));
        }
        if studies.len() < SMALL_DATASET {
            log::warn!(
                "only {} studies; likelihood asymptotics are unreliable below {SMALL_DATASET}",
                studies.len()
            );
        }
        Ok(Dataset { studies })
    }

    pub fn from_counts(counts: &[StudyCounts]) -> Result<Self, DataError> {
        let studies = counts
            .iter()
            .map(build_observation)
            .collect::<Result<Vec<_>, _>>()?;
        Dataset::new(studies)
    }

    pub fn studies(&self) -> &[StudyObservation] {
        &self.studies
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, StudyObservation> {
        self.studies.iter()
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a StudyObservation;
    type IntoIter = std::slice::Iter<'a, StudyObservation>;
    fn into_iter(self) -> Self::IntoIter {
        self.studies.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schema {
    Counts,
    Observations,
}

fn detect_schema(header: &csv::StringRecord) -> Result<Schema, DataError> {
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let joined = names.join(",");
    if joined == COUNTS_HEADER {
        Ok(Schema::Counts)
    } else if joined == OBSERVATIONS_HEADER {
        Ok(Schema::Observations)
    } else {
        Err(DataError::UnknownHeader(names))
    }
}

fn parse_row(
    record: &csv::StringRecord,
    header: &csv::StringRecord,
    row: usize,
) -> Result<Vec<f64>, DataError> {
    if record.len() != header.len() {
        return Err(DataError::Row {
            row,
            column: header.get(record.len().min(header.len() - 1)).unwrap_or("").trim().into(),
            message: format!("expected {} fields, found {}", header.len(), record.len()),
        });
    }
    record
        .iter()
        .zip(header.iter())
        .map(|(field, column)| {
            field.trim().parse::<f64>().map_err(|e| DataError::Row {
                row,
                column: column.trim().into(),
                message: format!("cannot parse {field:?} as a number ({e})"),
            })
        })
        .collect()
}

/// Reads either CSV schema from any reader. Rows are numbered from 1 (the
/// first data row after the header).
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Empty);
    }
    let schema = detect_schema(&header)?;
    let mut studies = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let values = parse_row(&record, &header, row)?;
        let wrap = |e: DataError, column: &str| DataError::Row {
            row,
            column: column.into(),
            message: e.to_string(),
        };
        let obs = match schema {
            Schema::Counts => {
                let counts = StudyCounts::new(values[0], values[1], values[2], values[3]);
                let column = if !(values[1] > 0.0) {
                    "py_treated"
                } else if !(values[3] > 0.0) {
                    "py_control"
                } else if !(values[0] >= 0.0) {
                    "deaths_treated"
                } else {
                    "deaths_control"
                };
                build_observation(&counts).map_err(|e| wrap(e, column))?
            }
            Schema::Observations => {
                let gamma = Mat2::new(values[2], values[3], values[4], values[5]);
                let column = if !values[0].is_finite() {
                    "eta_obs"
                } else if !values[1].is_finite() {
                    "xi_obs"
                } else {
                    "cov_etaxi2"
                };
                StudyObservation::new(values[0], values[1], gamma).map_err(|e| wrap(e, column))?
            }
        };
        studies.push(obs);
    }
    if studies.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new(studies)
}

/// Loads a dataset from a CSV file in either supported schema.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let file = File::open(path.as_ref())?;
    read_csv(file)
}

/// Writes a dataset in the observation schema.
pub fn write_observations_csv<W: std::io::Write>(
    data: &Dataset,
    writer: W,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(OBSERVATIONS_HEADER.split(','))?;
    for s in data {
        w.write_record([
            format!("{:e}", s.eta_hat),
            format!("{:e}", s.xi_hat),
            format!("{:e}", s.gamma.m[0][0]),
            format!("{:e}", s.gamma.m[0][1]),
            format!("{:e}", s.gamma.m[1][0]),
            format!("{:e}", s.gamma.m[1][1]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mortality data from twelve hypertension trials (deaths and person-years
/// per arm). Study 2 has no control deaths and is corrected on ingestion.
pub fn hoes_counts() -> Vec<StudyCounts> {
    const ROWS: [[f64; 4]; 12] = [
        [10.0, 595.2, 21.0, 640.2],
        [2.0, 762.0, 0.0, 756.0],
        [54.0, 5635.0, 70.0, 5600.0],
        [47.0, 5135.0, 63.0, 4960.0],
        [53.0, 3760.0, 62.0, 4210.0],
        [10.0, 2233.0, 9.0, 2084.5],
        [25.0, 7056.1, 35.0, 6824.0],
        [47.0, 8099.0, 31.0, 8267.0],
        [43.0, 5810.0, 39.0, 5922.0],
        [25.0, 5397.0, 45.0, 5173.0],
        [157.0, 22162.7, 182.0, 22172.5],
        [92.0, 20885.0, 72.0, 20645.0],
    ];
    ROWS.iter()
        .map(|r| StudyCounts::new(r[0], r[1], r[2], r[3]))
        .collect()
}

/// The twelve-study hypertension dataset as observations.
pub fn hoes_dataset() -> Dataset {
    Dataset::from_counts(&hoes_counts()).expect("built-in dataset is valid")
}
