//! Learning curves over stratified training subsamples.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::ridge::{fit_ridge_logistic, predict_proba, RidgeConfig};
use crate::embed::PatientRepresentation;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SIZES: [usize; 6] = [125, 250, 500, 1000, 2000, 4000];

/// Exactly `round(prevalence * n)` positives and the rest negatives, drawn
/// without replacement. The subset is returned sorted by patient id.
pub fn stratified_subsample(patients: &[u32], labels: &[bool], n: usize, prevalence: f64, seed: u64) -> Result<Vec<u32>> {
    if patients.len() != labels.len() {
        return Err(Error::invalid("patients and labels differ in length"));
    }
    if !(0.0..=1.0).contains(&prevalence) {
        return Err(Error::config("prevalence must lie in [0, 1]"));
    }
    let n_pos = (prevalence * n as f64).round() as usize;
    let n_neg = n - n_pos;
    let mut pos: Vec<u32> = patients.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let mut neg: Vec<u32> = patients.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.len() < n_pos || neg.len() < n_neg {
        return Err(Error::Insufficient(format!(
            "need {n_pos} positives and {n_neg} negatives, have {} and {} (short by {} and {})",
            pos.len(),
            neg.len(),
            n_pos.saturating_sub(pos.len()),
            n_neg.saturating_sub(neg.len())
        )));
    }
    pos.sort_unstable();
    neg.sort_unstable();
    let mut r = rng::stream(seed, &[0x5ab5]);
    pos.shuffle(&mut r);
    neg.shuffle(&mut r);
    let mut out: Vec<u32> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    out.sort_unstable();
    Ok(out)
}

/// Concatenates two representations of the same patient.
pub fn wide_and_deep(a: &PatientRepresentation, b: &PatientRepresentation) -> Result<PatientRepresentation> {
    if a.patient_id != b.patient_id {
        return Err(Error::invalid("wide-and-deep parts belong to different patients"));
    }
    let mut vector = a.vector.clone();
    vector.extend_from_slice(&b.vector);
    Ok(PatientRepresentation { patient_id: a.patient_id, vector, method: format!("wd[{}|{}]", a.method, b.method) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub method: String,
    pub task: String,
    pub n: usize,
    pub repeat: usize,
    pub seed: u64,
    /// `None` when the fit or metric failed for this cell.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub method: String,
    pub task: String,
    pub n: usize,
    pub mean_auroc: f64,
    pub sem: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveResult {
    pub records: Vec<CurveRecord>,
}

impl LearningCurveResult {
    pub fn merge(&mut self, other: LearningCurveResult) {
        self.records.extend(other.records);
    }

    /// Mean and standard error of the mean over successful repeats.
    pub fn summary(&self) -> Vec<CurveSummary> {
        let mut cells: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            let e = cells.entry((r.method.clone(), r.task.clone(), r.n)).or_default();
            if let Some(a) = r.auroc {
                e.push(a);
            }
        }
        cells
            .into_iter()
            .map(|((method, task, n), v)| {
                let count = v.len();
                let mean = if count > 0 { v.iter().sum::<f64>() / count as f64 } else { f64::NAN };
                let sem = if count > 1 {
                    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
                    (var / count as f64).sqrt()
                } else {
                    f64::NAN
                };
                CurveSummary { method, task, n, mean_auroc: mean, sem, count }
            })
            .collect()
    }

    pub fn cell(&self, method: &str, task: &str, n: usize) -> Option<CurveSummary> {
        self.summary().into_iter().find(|s| s.method == method && s.task == task && s.n == n)
    }

    /// `method,task,n,repeat,seed,auroc`, with `NA` for failed cells.
    pub fn write_records_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,task,n,repeat,seed,auroc")?;
        for r in &self.records {
            let a = r.auroc.map_or("NA".to_string(), |a| a.to_string());
            writeln!(out, "{},{},{},{},{},{}", r.method, r.task, r.n, r.repeat, r.seed, a)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,task,n,mean_auroc,sem")?;
        for s in self.summary() {
            writeln!(out, "{},{},{},{},{}", s.method, s.task, s.n, s.mean_auroc, s.sem)?;
        }
        Ok(())
    }

    pub fn read_records_csv<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for (k, line) in input.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse { line: k + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            records.push(CurveRecord {
                method: f[0].to_string(),
                task: f[1].to_string(),
                n: f[2].parse().map_err(|_| bad("bad n"))?,
                repeat: f[3].parse().map_err(|_| bad("bad repeat"))?,
                seed: f[4].parse().map_err(|_| bad("bad seed"))?,
                auroc: if f[5] == "NA" { None } else { Some(f[5].parse().map_err(|_| bad("bad auroc"))?) },
            });
        }
        Ok(LearningCurveResult { records })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub prevalence: f64,
    pub ridge: RidgeConfig,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { sizes: DEFAULT_SIZES.to_vec(), repeats: 20, prevalence: 0.2, ridge: RidgeConfig::default(), seed: 7 }
    }
}

/// Seed of one (size, repeat) cell; shared by every method.
pub fn cell_seed(seed: u64, n: usize, repeat: usize) -> u64 {
    rng::derive_seed(seed, &[n as u64, repeat as u64])
}

/// Patient vectors of one method, keyed by patient id.
pub type RepresentationTable = BTreeMap<u32, Vec<f64>>;

/// Fits and scores every (method, size, repeat) cell for one task.
/// `train_labels` is the pool subsamples are drawn from; `test_labels` is
/// scored in full for every cell.
pub fn learning_curve(
    representations: &BTreeMap<String, RepresentationTable>,
    task: &str,
    train_labels: &BTreeMap<u32, bool>,
    test_labels: &BTreeMap<u32, bool>,
    cfg: &CurveConfig,
) -> Result<LearningCurveResult> {
    for (method, table) in representations {
        if let Some(p) = train_labels.keys().chain(test_labels.keys()).find(|p| !table.contains_key(p)) {
            return Err(Error::invalid(format!("method {method} has no vector for patient {p}")));
        }
    }
    let pool: Vec<u32> = train_labels.keys().copied().collect();
    let pool_labels: Vec<bool> = train_labels.values().copied().collect();
    let test_ids: Vec<u32> = test_labels.keys().copied().collect();
    let test_y: Vec<bool> = test_labels.values().copied().collect();

    let mut subsets = BTreeMap::new();
    for &n in &cfg.sizes {
        for repeat in 0..cfg.repeats {
            let seed = cell_seed(cfg.seed, n, repeat);
            subsets.insert((n, repeat), (seed, stratified_subsample(&pool, &pool_labels, n, cfg.prevalence, seed)));
        }
    }
    let jobs: Vec<(&String, usize, usize)> = representations
        .keys()
        .flat_map(|m| subsets.keys().map(move |&(n, r)| (m, n, r)))
        .collect();
    let records: Vec<CurveRecord> = jobs
        .par_iter()
        .map(|&(method, n, repeat)| {
            let (seed, subset) = &subsets[&(n, repeat)];
            let table = &representations[method];
            let outcome = subset.as_ref().map_err(|e| Error::Insufficient(e.to_string())).and_then(|ids| {
                let x: Vec<Vec<f64>> = ids.iter().map(|p| table[p].clone()).collect();
                let y: Vec<bool> = ids.iter().map(|p| train_labels[p]).collect();
                let model = fit_ridge_logistic(&x, &y, &cfg.ridge, *seed)?;
                let xt: Vec<Vec<f64>> = test_ids.iter().map(|p| table[p].clone()).collect();
                auroc(&predict_proba(&model, &xt)?, &test_y)
            });
            let auroc = match outcome {
                Ok(a) => Some(a),
                Err(e) => {
                    warn!("{method} / {task} / N={n} / repeat {repeat}: {e}");
                    None
                }
            };
            CurveRecord { method: method.clone(), task: task.to_string(), n, repeat, seed: *seed, auroc }
        })
        .collect();
    Ok(LearningCurveResult { records })
}
