//! Longitudinal datasets: subjects, observations, regressors and covariates.
//!
//! The CSV layout is long format: `id, time, y`, then any regressor columns
//! (per-observation design variables such as `dose`, `tinf`, `tD`), then
//! subject-level covariate columns. Which extra columns are regressors is
//! decided by the caller (usually from the structural model).

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    /// Values aligned with [`Dataset::regressor_names`].
    pub regressors: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub observations: Vec<Observation>,
    /// Values aligned with [`Dataset::covariate_names`].
    pub covariates: Vec<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }
}

/// A validated, canonically ordered collection of subjects.
///
/// Subjects are sorted by id and observations by time, so every likelihood
/// sum runs in the same order regardless of how the input was arranged.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    regressor_names: Vec<String>,
    covariate_names: Vec<String>,
    subjects: Vec<Subject>,
    n_total: usize,
}

impl Dataset {
    pub fn new(
        regressor_names: Vec<String>,
        covariate_names: Vec<String>,
        mut subjects: Vec<Subject>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in regressor_names.iter().chain(&covariate_names) {
            if !seen.insert(name.as_str()) {
                return Err(Error::input(format!("column `{name}` declared twice")));
            }
        }
        if subjects.is_empty() {
            return Err(Error::input("dataset has no subjects"));
        }
        let mut ids = HashSet::new();
        for s in &subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::input(format!("duplicate subject id `{}`", s.id)));
            }
            if s.observations.is_empty() {
                return Err(Error::input(format!("subject `{}` has no observations", s.id)));
            }
            if s.covariates.len() != covariate_names.len() {
                return Err(Error::input(format!(
                    "subject `{}` has {} covariate values, header declares {}",
                    s.id,
                    s.covariates.len(),
                    covariate_names.len()
                )));
            }
            for (name, v) in covariate_names.iter().zip(&s.covariates) {
                if !v.is_finite() {
                    return Err(Error::input(format!(
                        "subject `{}` has a missing or non-finite value for covariate `{name}`",
                        s.id
                    )));
                }
            }
            for (j, o) in s.observations.iter().enumerate() {
                if !o.time.is_finite() || !o.y.is_finite() {
                    return Err(Error::input(format!(
                        "subject `{}` observation {j} has a non-finite time or response",
                        s.id
                    )));
                }
                if o.regressors.len() != regressor_names.len()
                    || o.regressors.iter().any(|r| !r.is_finite())
                {
                    return Err(Error::input(format!(
                        "subject `{}` observation {j} has missing regressor values",
                        s.id
                    )));
                }
            }
        }
        drop(ids);
        subjects.sort_by(|a, b| a.id.cmp(&b.id));
        for s in &mut subjects {
            s.observations.sort_by(|a, b| {
                a.time
                    .total_cmp(&b.time)
                    .then(a.y.total_cmp(&b.y))
                    .then_with(|| {
                        a.regressors
                            .iter()
                            .zip(&b.regressors)
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
            });
        }
        let n_total = subjects.iter().map(Subject::n_obs).sum();
        Ok(Self {
            regressor_names,
            covariate_names,
            subjects,
            n_total,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn regressor_names(&self) -> &[String] {
        &self.regressor_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn regressor_index(&self, name: &str) -> Option<usize> {
        self.regressor_names.iter().position(|c| c == name)
    }

    /// Column of one covariate across subjects, in subject order.
    pub fn covariate_column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.covariate_index(name)?;
        Some(self.subjects.iter().map(|s| s.covariates[k]).collect())
    }

    /// Same dataset with a subset of subjects (by position).
    pub fn select_subjects(&self, idx: &[usize]) -> Result<Self> {
        let subjects = idx.iter().map(|&i| self.subjects[i].clone()).collect();
        Self::new(
            self.regressor_names.clone(),
            self.covariate_names.clone(),
            subjects,
        )
    }

    /// Read the long-format CSV. Columns named in `regressors` are treated as
    /// per-observation design variables; every other extra column is a
    /// subject-level covariate and must be constant within each subject.
    pub fn read_csv<R: Read>(reader: R, regressors: &[String]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let id_col = find("id").ok_or_else(|| Error::input("missing column `id`"))?;
        let time_col = find("time").ok_or_else(|| Error::input("missing column `time`"))?;
        let y_col = find("y").ok_or_else(|| Error::input("missing column `y`"))?;

        let mut reg_cols = Vec::with_capacity(regressors.len());
        for r in regressors {
            reg_cols.push(find(r).ok_or_else(|| Error::MissingRegressor(r.clone()))?);
        }
        let cov_cols: Vec<usize> = (0..header.len())
            .filter(|c| ![id_col, time_col, y_col].contains(c) && !reg_cols.contains(c))
            .collect();
        let covariate_names: Vec<String> = cov_cols.iter().map(|&c| header[c].clone()).collect();

        let mut subjects: Vec<Subject> = Vec::new();
        let mut index: std::collections::HashMap<String, usize> = Default::default();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let line = row + 2;
            let parse = |col: usize| -> Result<f64> {
                let raw = record.get(col).unwrap_or("");
                if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                    return Err(Error::input(format!(
                        "line {line}: missing value in column `{}`",
                        header[col]
                    )));
                }
                raw.parse::<f64>().map_err(|_| {
                    Error::input(format!(
                        "line {line}: cannot parse `{raw}` in column `{}`",
                        header[col]
                    ))
                })
            };
            let id = record.get(id_col).unwrap_or("").to_string();
            if id.is_empty() {
                return Err(Error::input(format!("line {line}: empty subject id")));
            }
            let obs = Observation {
                time: parse(time_col)?,
                regressors: reg_cols.iter().map(|&c| parse(c)).collect::<Result<_>>()?,
                y: parse(y_col)?,
            };
            let covs: Vec<f64> = cov_cols.iter().map(|&c| parse(c)).collect::<Result<_>>()?;
            match index.get(&id) {
                Some(&i) => {
                    let s = &mut subjects[i];
                    if let Some(k) = s.covariates.iter().zip(&covs).position(|(a, b)| a != b) {
                        return Err(Error::input(format!(
                            "line {line}: covariate `{}` changes within subject `{id}`",
                            covariate_names[k]
                        )));
                    }
                    s.observations.push(obs);
                }
                None => {
                    index.insert(id.clone(), subjects.len());
                    subjects.push(Subject {
                        id,
                        observations: vec![obs],
                        covariates: covs,
                    });
                }
            }
        }
        Self::new(regressors.to_vec(), covariate_names, subjects)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, regressors: &[String]) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_csv(f, regressors)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "time".into(), "y".into()];
        header.extend(self.regressor_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.subjects {
            for o in &s.observations {
                let mut rec = vec![s.id.clone(), fmt_num(o.time), fmt_num(o.y)];
                rec.extend(o.regressors.iter().map(|v| fmt_num(*v)));
                rec.extend(s.covariates.iter().map(|v| fmt_num(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips exactly.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}
