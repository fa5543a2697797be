//! Longitudinal datasets: in-memory layout, CSV ingestion and emission,
//! patient-level splitting and covariate standardization.
//!
//! Layout: rows are observations, grouped by patient and sorted by time
//! within each patient. `y` and `m` are `N x K`, `x` is `N x Q` with
//! categorical columns stored as integer level codes. Where `m == 0` the
//! matching entry of `y` is stored as `0.0` and never read.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const TIME: &str = "time";
pub const ID: &str = "id";
/// Column appended to `x` by the point-process model.
pub const INTENSITY: &str = "intensity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    /// `levels` lists the admissible labels; for the `id` column it may be
    /// left empty and is then discovered from the data.
    Categorical {
        #[serde(default)]
        levels: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<ColumnSpec>,
}

impl CovariateSchema {
    pub fn validate(&self) -> Result<()> {
        let count = |n: &str| self.columns.iter().filter(|c| c.name == n).count();
        if count(TIME) != 1 {
            return Err(Error::Schema("schema needs exactly one column named \"time\"".into()));
        }
        if count(ID) != 1 {
            return Err(Error::Schema("schema needs exactly one column named \"id\"".into()));
        }
        for c in &self.columns {
            if count(&c.name) != 1 {
                return Err(Error::Schema(format!("duplicate column \"{}\"", c.name)));
            }
            match (&c.kind, c.name.as_str()) {
                (ColumnKind::Continuous, ID) => {
                    return Err(Error::Schema("column \"id\" must be categorical".into()))
                }
                (ColumnKind::Categorical { .. }, TIME) => {
                    return Err(Error::Schema("column \"time\" must be continuous".into()))
                }
                (ColumnKind::Categorical { levels }, name) if name != ID && levels.is_empty() => {
                    return Err(Error::Schema(format!("categorical column \"{name}\" lists no levels")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn is_categorical(&self, name: &str) -> bool {
        self.columns
            .iter()
            .any(|c| c.name == name && matches!(c.kind, ColumnKind::Categorical { .. }))
    }

    pub fn levels(&self, j: usize) -> Option<&[String]> {
        match &self.columns[j].kind {
            ColumnKind::Categorical { levels } => Some(levels),
            ColumnKind::Continuous => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalDataset {
    pub schema: CovariateSchema,
    /// Observations, `N x K`.
    pub y: Mat,
    /// Observation mask, `N x K`, 1 = observed.
    pub m: Mat,
    /// Covariates, `N x Q` in schema order. The `id` column holds the
    /// patient index into `patient_ids`.
    pub x: Mat,
    pub t: Vec<f64>,
    pub patient_ids: Vec<String>,
    /// `P + 1` row boundaries.
    pub patient_offsets: Vec<usize>,
    /// Observation window `[start, end]` per patient.
    pub windows: Vec<(f64, f64)>,
}

impl LongitudinalDataset {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn k(&self) -> usize {
        self.y.cols
    }

    pub fn num_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn patient_rows(&self, p: usize) -> Range<usize> {
        self.patient_offsets[p]..self.patient_offsets[p + 1]
    }

    pub fn patient_of_row(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n());
        for p in 0..self.num_patients() {
            out.extend(std::iter::repeat(p).take(self.patient_rows(p).len()));
        }
        out
    }

    pub fn patient_times(&self, p: usize) -> &[f64] {
        &self.t[self.patient_rows(p)]
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.schema.index_of(name).map(|j| self.x.column(j))
    }

    /// Static value of a covariate for patient `p` (its first row).
    pub fn static_value(&self, p: usize, name: &str) -> Option<f64> {
        let j = self.schema.index_of(name)?;
        Some(self.x[(self.patient_offsets[p], j)])
    }

    pub fn observed_count(&self) -> usize {
        self.m.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Structural checks: shapes, sorting, time column, mask values.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let p = self.num_patients();
        if self.y.shape() != self.m.shape() || self.y.rows != n || self.x.rows != n {
            return Err(Error::Shape("y, m, x and t disagree on the number of rows".into()));
        }
        if self.x.cols != self.schema.columns.len() {
            return Err(Error::Shape("x has a different number of columns than the schema".into()));
        }
        if self.patient_offsets.len() != p + 1 || self.patient_offsets[0] != 0 || self.patient_offsets[p] != n {
            return Err(Error::Shape("patient offsets do not partition the rows".into()));
        }
        if self.windows.len() != p {
            return Err(Error::Shape("one observation window per patient is required".into()));
        }
        let jt = self.schema.index_of(TIME).ok_or_else(|| Error::Schema("no time column".into()))?;
        for pi in 0..p {
            let rows = self.patient_rows(pi);
            for i in rows.clone() {
                if self.x[(i, jt)] != self.t[i] {
                    return Err(Error::Data(format!("row {i}: time column differs from t")));
                }
                if i > rows.start && self.t[i] <= self.t[i - 1] {
                    return Err(Error::Data(format!(
                        "patient {}: timestamps not strictly increasing at row {i}",
                        self.patient_ids[pi]
                    )));
                }
            }
        }
        if self.m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Dataset restricted to the given patients, in the given order.
    pub fn subset(&self, patients: &[usize]) -> LongitudinalDataset {
        let rows: Vec<usize> = patients.iter().flat_map(|&p| self.patient_rows(p)).collect();
        let mut offsets = vec![0];
        for &p in patients {
            offsets.push(offsets.last().unwrap() + self.patient_rows(p).len());
        }
        let mut out = LongitudinalDataset {
            schema: self.schema.clone(),
            y: self.y.select_rows(&rows),
            m: self.m.select_rows(&rows),
            x: self.x.select_rows(&rows),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            patient_ids: patients.iter().map(|&p| self.patient_ids[p].clone()).collect(),
            patient_offsets: offsets,
            windows: patients.iter().map(|&p| self.windows[p]).collect(),
        };
        out.recode_ids();
        out
    }

    /// Patients of `self` followed by those of `other`; patient ids must be
    /// distinct and the schemas equal.
    pub fn concat(&self, other: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        if self.schema != other.schema {
            return Err(Error::Schema("cannot concatenate datasets with different schemas".into()));
        }
        if self.k() != other.k() {
            return Err(Error::Shape(format!("{} vs {} outputs", self.k(), other.k())));
        }
        if let Some(id) = other.patient_ids.iter().find(|id| self.patient_ids.contains(id)) {
            return Err(Error::Data(format!("patient {id} appears in both datasets")));
        }
        let n = self.n();
        let mut out = LongitudinalDataset {
            schema: self.schema.clone(),
            y: Mat::vcat(&[&self.y, &other.y]),
            m: Mat::vcat(&[&self.m, &other.m]),
            x: Mat::vcat(&[&self.x, &other.x]),
            t: self.t.iter().chain(&other.t).copied().collect(),
            patient_ids: self.patient_ids.iter().chain(&other.patient_ids).cloned().collect(),
            patient_offsets: self.patient_offsets.iter().copied().chain(other.patient_offsets[1..].iter().map(|o| o + n)).collect(),
            windows: self.windows.iter().chain(&other.windows).copied().collect(),
        };
        out.recode_ids();
        Ok(out)
    }

    /// Rows `[lo, hi)` of every patient (clipped to the patient's length).
    fn per_patient_rows(&self, f: impl Fn(usize) -> Range<usize>) -> LongitudinalDataset {
        let mut rows = Vec::new();
        let mut offsets = vec![0];
        for p in 0..self.num_patients() {
            let r = self.patient_rows(p);
            let local = f(r.len());
            rows.extend(local.map(|k| r.start + k));
            offsets.push(rows.len());
        }
        LongitudinalDataset {
            schema: self.schema.clone(),
            y: self.y.select_rows(&rows),
            m: self.m.select_rows(&rows),
            x: self.x.select_rows(&rows),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            patient_ids: self.patient_ids.clone(),
            patient_offsets: offsets,
            windows: self.windows.clone(),
        }
    }

    /// Rewrite the `id` column so that it indexes `patient_ids`.
    fn recode_ids(&mut self) {
        if let Some(j) = self.schema.index_of(ID) {
            for p in 0..self.num_patients() {
                for i in self.patient_rows(p) {
                    self.x[(i, j)] = p as f64;
                }
            }
        }
    }
}

/// Split patients into (train, val, test) with a seeded shuffle.
pub fn split_by_patient(
    ds: &LongitudinalDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LongitudinalDataset, LongitudinalDataset, LongitudinalDataset)> {
    let (ftr, fva, fte) = fractions;
    if [ftr, fva, fte].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ftr + fva + fte) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let p = ds.num_patients();
    let nonzero = [ftr, fva, fte].iter().filter(|&&f| f > 0.0).count();
    if p < nonzero {
        return Err(Error::InvalidArgument(format!("{p} patients cannot fill {nonzero} non-empty splits")));
    }
    let mut n_val = (fva * p as f64).round() as usize;
    let mut n_test = (fte * p as f64).round() as usize;
    if fva > 0.0 {
        n_val = n_val.max(1);
    }
    if fte > 0.0 {
        n_test = n_test.max(1);
    }
    let min_train = usize::from(ftr > 0.0);
    while n_val + n_test + min_train > p {
        if n_val >= n_test && n_val > usize::from(fva > 0.0) {
            n_val -= 1;
        } else {
            n_test -= 1;
        }
    }
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = p - n_val - n_test;
    let mut tr = idx[..n_train].to_vec();
    let mut va = idx[n_train..n_train + n_val].to_vec();
    let mut te = idx[n_train + n_val..].to_vec();
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok((ds.subset(&tr), ds.subset(&va), ds.subset(&te)))
}

/// First `first_k` rows of each patient (conditioning) and the rest (targets).
pub fn truncate_history(ds: &LongitudinalDataset, first_k: usize) -> Result<(LongitudinalDataset, LongitudinalDataset)> {
    for p in 0..ds.num_patients() {
        if ds.patient_rows(p).len() <= first_k {
            return Err(Error::InvalidArgument(format!(
                "patient {} has {} rows, needs more than {first_k}",
                ds.patient_ids[p],
                ds.patient_rows(p).len()
            )));
        }
    }
    Ok((ds.per_patient_rows(|n| 0..first_k.min(n)), ds.per_patient_rows(|n| first_k.min(n)..n)))
}

/// Mean/standard deviation of each continuous covariate, fitted on training
/// data and applied to every dataset the model sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub stats: BTreeMap<String, (f64, f64)>,
}

impl Standardizer {
    pub fn fit(ds: &LongitudinalDataset) -> Standardizer {
        let mut stats = BTreeMap::new();
        for (j, c) in ds.schema.columns.iter().enumerate() {
            if matches!(c.kind, ColumnKind::Continuous) {
                let col = ds.x.column(j);
                let n = col.len().max(1) as f64;
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                stats.insert(c.name.clone(), (mean, sd));
            }
        }
        Standardizer { stats }
    }

    /// Standardized copy of the covariate matrix; `t` is left untouched.
    pub fn apply(&self, ds: &LongitudinalDataset) -> Mat {
        let mut x = ds.x.clone();
        for (j, c) in ds.schema.columns.iter().enumerate() {
            if let Some(&(mean, sd)) = self.stats.get(&c.name) {
                for i in 0..x.rows {
                    x[(i, j)] = (x[(i, j)] - mean) / sd;
                }
            }
        }
        x
    }

    pub fn transform(&self, name: &str, v: f64) -> f64 {
        match self.stats.get(name) {
            Some(&(mean, sd)) => (v - mean) / sd,
            None => v,
        }
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("cannot read {}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for r in rdr.records() {
        rows.push(r?);
    }
    Ok((header, rows))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Data(format!("{what}: cannot parse \"{s}\" as a number")))
}

fn y_columns(header: &[String], prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(j, h)| h.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()).map(|k| (k, j)))
        .collect();
    cols.sort_unstable();
    cols.into_iter().map(|(_, j)| j).collect()
}

/// Load `observations.csv`, `covariates.csv` and the optional `mask.csv` and
/// `windows.csv` from `dir`.
pub fn load_dataset(dir: &Path, schema: &CovariateSchema) -> Result<LongitudinalDataset> {
    schema.validate()?;
    let (oh, orows) = read_csv(&dir.join("observations.csv"))?;
    if orows.is_empty() {
        return Err(Error::Data("observations.csv: no rows".into()));
    }
    let col = |h: &[String], name: &str| h.iter().position(|c| c == name);
    let pid_o = col(&oh, "patient_id").ok_or_else(|| Error::Data("observations.csv: no patient_id column".into()))?;
    let time_o = col(&oh, TIME).ok_or_else(|| Error::Data("observations.csv: no time column".into()))?;
    let ycols = y_columns(&oh, "y_");
    if ycols.is_empty() {
        return Err(Error::Data("observations.csv: no y_ columns".into()));
    }
    let k = ycols.len();

    // Static covariates by patient.
    let cov_path = dir.join("covariates.csv");
    let (ch, crows) = if cov_path.exists() { read_csv(&cov_path)? } else { (vec!["patient_id".into()], vec![]) };
    let pid_c = col(&ch, "patient_id").ok_or_else(|| Error::Data("covariates.csv: no patient_id column".into()))?;
    let mut statics: HashMap<String, &csv::StringRecord> = HashMap::new();
    for (r, rec) in crows.iter().enumerate() {
        let id = rec.get(pid_c).unwrap_or("").trim().to_string();
        if statics.insert(id.clone(), rec).is_some() {
            return Err(Error::Data(format!("covariates.csv row {}: duplicate patient_id {id}", r + 2)));
        }
    }

    // Optional explicit mask.
    let mask_path = dir.join("mask.csv");
    let mut mask_map: HashMap<(String, u64), Vec<f64>> = HashMap::new();
    if mask_path.exists() {
        let (mh, mrows) = read_csv(&mask_path)?;
        let (pm, tm) = (
            col(&mh, "patient_id").ok_or_else(|| Error::Data("mask.csv: no patient_id column".into()))?,
            col(&mh, TIME).ok_or_else(|| Error::Data("mask.csv: no time column".into()))?,
        );
        let mcols = y_columns(&mh, "m_");
        if mcols.len() != k {
            return Err(Error::Data(format!("mask.csv has {} m_ columns, expected {k}", mcols.len())));
        }
        for (r, rec) in mrows.iter().enumerate() {
            let what = format!("mask.csv row {}", r + 2);
            let t = parse_f64(&rec[tm], &what)?;
            let vals = mcols
                .iter()
                .map(|&j| {
                    let v = parse_f64(&rec[j], &what)?;
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Data(format!("{what}: mask value {v} is not 0/1")));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            mask_map.insert((rec[pm].trim().to_string(), t.to_bits()), vals);
        }
    }

    // Group rows by patient, in order of first appearance, then sort by time.
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: HashMap<String, Vec<usize>> = HashMap::new();
    for (r, rec) in orows.iter().enumerate() {
        let id = rec.get(pid_o).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("observations.csv row {}: empty patient_id", r + 2)));
        }
        by_patient.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        by_patient.get_mut(&id).unwrap().push(r);
    }
    order.sort();

    let q = schema.columns.len();
    let n = orows.len();
    let mut y = Mat::zeros(n, k);
    let mut m = Mat::zeros(n, k);
    let mut x = Mat::zeros(n, q);
    let mut t = vec![0.0; n];
    let mut offsets = vec![0];
    let mut row = 0;
    let id_levels: Vec<String> = order.clone();
    for (pi, id) in order.iter().enumerate() {
        let mut rows: Vec<(f64, usize)> = by_patient[id]
            .iter()
            .map(|&r| Ok((parse_f64(&orows[r][time_o], &format!("observations.csv row {}", r + 2))?, r)))
            .collect::<Result<_>>()?;
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Data(format!(
                    "observations.csv row {}: duplicate (patient, time) pair ({id}, {})",
                    w[1].1 + 2,
                    w[1].0
                )));
            }
        }
        for &(time, r) in &rows {
            let rec = &orows[r];
            let what = format!("observations.csv row {}", r + 2);
            if !time.is_finite() {
                return Err(Error::Data(format!("{what}: non-finite time")));
            }
            t[row] = time;
            let explicit = mask_map.get(&(id.clone(), time.to_bits()));
            if !mask_map.is_empty() && explicit.is_none() {
                return Err(Error::Data(format!("{what}: no matching row in mask.csv")));
            }
            for (kk, &j) in ycols.iter().enumerate() {
                let cell = rec.get(j).unwrap_or("").trim();
                let present = !cell.is_empty();
                let observed = match explicit {
                    Some(mv) => mv[kk] == 1.0 && present,
                    None => present,
                };
                if let (Some(mv), false) = (explicit, present) {
                    if mv[kk] == 1.0 {
                        return Err(Error::Data(format!("{what}: y_{kk} empty but mask.csv marks it observed")));
                    }
                }
                if observed {
                    y[(row, kk)] = parse_f64(cell, &what)?;
                    m[(row, kk)] = 1.0;
                }
            }
            for (j, c) in schema.columns.iter().enumerate() {
                let raw: String = if c.name == ID {
                    x[(row, j)] = pi as f64;
                    continue;
                } else if c.name == TIME {
                    x[(row, j)] = time;
                    continue;
                } else if let Some(jj) = col(&oh, &c.name) {
                    rec.get(jj).unwrap_or("").trim().to_string()
                } else if let Some(jj) = col(&ch, &c.name) {
                    let srec = statics.get(id).ok_or_else(|| {
                        Error::Data(format!("covariates.csv: no row for patient {id} (needed for \"{}\")", c.name))
                    })?;
                    srec.get(jj).unwrap_or("").trim().to_string()
                } else {
                    return Err(Error::Schema(format!("covariate \"{}\" found in neither CSV file", c.name)));
                };
                x[(row, j)] = match schema.levels(j) {
                    Some(levels) => levels.iter().position(|l| *l == raw).ok_or_else(|| {
                        Error::Data(format!("{what}: unknown category \"{raw}\" for \"{}\"", c.name))
                    })? as f64,
                    None => {
                        if raw.is_empty() {
                            return Err(Error::Data(format!("{what}: missing covariate \"{}\"", c.name)));
                        }
                        parse_f64(&raw, &what)?
                    }
                };
            }
            row += 1;
        }
        offsets.push(row);
    }

    let mut windows: Vec<(f64, f64)> = (0..order.len())
        .map(|p| {
            let ts = &t[offsets[p]..offsets[p + 1]];
            (ts[0].min(0.0), *ts.last().unwrap())
        })
        .collect();
    let win_path = dir.join("windows.csv");
    if win_path.exists() {
        let (wh, wrows) = read_csv(&win_path)?;
        let (pw, sw, ew) = (
            col(&wh, "patient_id").ok_or_else(|| Error::Data("windows.csv: no patient_id column".into()))?,
            col(&wh, "start").ok_or_else(|| Error::Data("windows.csv: no start column".into()))?,
            col(&wh, "end").ok_or_else(|| Error::Data("windows.csv: no end column".into()))?,
        );
        for (r, rec) in wrows.iter().enumerate() {
            let what = format!("windows.csv row {}", r + 2);
            if let Some(p) = id_levels.iter().position(|l| l == rec[pw].trim()) {
                let (s, e) = (parse_f64(&rec[sw], &what)?, parse_f64(&rec[ew], &what)?);
                let ts = &t[offsets[p]..offsets[p + 1]];
                if s > ts[0] || e < *ts.last().unwrap() {
                    return Err(Error::Data(format!("{what}: window [{s}, {e}] does not cover the events")));
                }
                windows[p] = (s, e);
            }
        }
    }

    let ds = LongitudinalDataset { schema: schema.clone(), y, m, x, t, patient_ids: order, patient_offsets: offsets, windows };
    ds.validate()?;
    Ok(ds)
}

pub(crate) fn fmt_f64(v: f64) -> String {
    // Shortest representation that parses back to the identical f64.
    format!("{v}")
}

/// Write the dataset in the format read by [`load_dataset`], together with
/// `mask.csv`, `windows.csv` and `schema.json`. Covariates that are constant
/// within every patient go to `covariates.csv`, the rest to
/// `observations.csv`.
pub fn emit_dataset(ds: &LongitudinalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = ds.k();
    let label = |j: usize, v: f64, p: usize| -> String {
        if ds.schema.columns[j].name == ID {
            return ds.patient_ids[p].clone();
        }
        match ds.schema.levels(j) {
            Some(levels) => levels[v as usize].clone(),
            None => fmt_f64(v),
        }
    };
    let mut statics = Vec::new();
    let mut varying = Vec::new();
    for (j, c) in ds.schema.columns.iter().enumerate() {
        if c.name == ID || c.name == TIME {
            continue;
        }
        let constant = (0..ds.num_patients()).all(|p| {
            let r = ds.patient_rows(p);
            r.clone().all(|i| ds.x[(i, j)] == ds.x[(r.start, j)])
        });
        if constant {
            statics.push(j);
        } else {
            varying.push(j);
        }
    }
    let pr = ds.patient_of_row();

    let mut w = csv::Writer::from_path(dir.join("observations.csv"))?;
    let mut header = vec!["patient_id".to_string(), TIME.to_string()];
    header.extend(varying.iter().map(|&j| ds.schema.columns[j].name.clone()));
    header.extend((0..k).map(|kk| format!("y_{kk}")));
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![ds.patient_ids[pr[i]].clone(), fmt_f64(ds.t[i])];
        rec.extend(varying.iter().map(|&j| label(j, ds.x[(i, j)], pr[i])));
        rec.extend((0..k).map(|kk| if ds.m[(i, kk)] != 0.0 { fmt_f64(ds.y[(i, kk)]) } else { String::new() }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("covariates.csv"))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(statics.iter().map(|&j| ds.schema.columns[j].name.clone()));
    w.write_record(&header)?;
    for p in 0..ds.num_patients() {
        let i = ds.patient_offsets[p];
        let mut rec = vec![ds.patient_ids[p].clone()];
        rec.extend(statics.iter().map(|&j| label(j, ds.x[(i, j)], p)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    write_matrix_csv(&dir.join("mask.csv"), ds, &ds.m, "m_", |v| fmt_f64(v))?;

    let mut w = csv::Writer::from_path(dir.join("windows.csv"))?;
    w.write_record(["patient_id", "start", "end"])?;
    for p in 0..ds.num_patients() {
        w.write_record([ds.patient_ids[p].clone(), fmt_f64(ds.windows[p].0), fmt_f64(ds.windows[p].1)])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let schema_json = serde_json::to_string_pretty(&ds.schema)?;
    fs::write(dir.join("schema.json"), schema_json).map_err(|e| Error::io(dir.join("schema.json"), e))?;
    Ok(())
}

/// Write an `N x K` matrix keyed by (patient_id, time) with columns
/// `{prefix}0..{prefix}{K-1}`.
pub fn write_matrix_csv(
    path: &Path,
    ds: &LongitudinalDataset,
    mat: &Mat,
    prefix: &str,
    fmt: impl Fn(f64) -> String,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id".to_string(), TIME.to_string()];
    header.extend((0..mat.cols).map(|kk| format!("{prefix}{kk}")));
    w.write_record(&header)?;
    let pr = ds.patient_of_row();
    for i in 0..ds.n() {
        let mut rec = vec![ds.patient_ids[pr[i]].clone(), fmt_f64(ds.t[i])];
        rec.extend(mat.row_slice(i).iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A keyed matrix read back from a CSV written by [`write_matrix_csv`]:
/// rows indexed by (patient_id, time bits).
pub struct KeyedMatrix {
    pub rows: HashMap<(String, u64), Vec<Option<f64>>>,
    pub cols: usize,
}

/// Read a CSV with `patient_id`, `time` and `{prefix}k` columns. Empty cells
/// become `None`.
pub fn read_matrix_csv(path: &Path, prefix: &str) -> Result<KeyedMatrix> {
    let (h, rows) = read_csv(path)?;
    let pid = h.iter().position(|c| c == "patient_id").ok_or_else(|| Error::Data(format!("{}: no patient_id", path.display())))?;
    let tc = h.iter().position(|c| c == TIME).ok_or_else(|| Error::Data(format!("{}: no time column", path.display())))?;
    let cols = y_columns(&h, prefix);
    let mut out = HashMap::new();
    for (r, rec) in rows.iter().enumerate() {
        let what = format!("{} row {}", path.display(), r + 2);
        let t = parse_f64(&rec[tc], &what)?;
        let vals = cols
            .iter()
            .map(|&j| {
                let c = rec.get(j).unwrap_or("").trim();
                if c.is_empty() {
                    Ok(None)
                } else {
                    parse_f64(c, &what).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert((rec[pid].trim().to_string(), t.to_bits()), vals);
    }
    Ok(KeyedMatrix { rows: out, cols: cols.len() })
}

pub fn load_schema(path: &Path) -> Result<CovariateSchema> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema: CovariateSchema = serde_json::from_str(&s)?;
    schema.validate()?;
    Ok(schema)
}
