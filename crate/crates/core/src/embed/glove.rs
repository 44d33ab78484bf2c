use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cooccur::CooccurrenceTable;
use super::matrix::{EmbeddingMatrix, EmbeddingSource};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GloveConfig {
    pub dim: usize,
    pub window: usize,
    pub iterations: usize,
    pub repetitions: usize,
    pub x_max: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GloveConfig {
    fn default() -> Self {
        GloveConfig {
            dim: 50,
            window: 10,
            iterations: 25,
            repetitions: 2,
            x_max: 10.0,
            alpha: 0.75,
            learning_rate: 0.05,
            seed: 7,
        }
    }
}

impl GloveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.repetitions == 0 {
            return Err(Error::config("dim, window and repetitions must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        if !(self.x_max > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::config("x_max and learning_rate must be positive"));
        }
        Ok(())
    }
}

/// `(x / x_max)^alpha`, capped at 1.
pub fn glove_weight(x: f64, x_max: f64, alpha: f64) -> f64 {
    if x < x_max {
        (x / x_max).powf(alpha)
    } else {
        1.0
    }
}

struct Params {
    dim: usize,
    w: Vec<f64>,
    wt: Vec<f64>,
    b: Vec<f64>,
    bt: Vec<f64>,
}

impl Params {
    fn residual(&self, i: usize, j: usize, log_x: f64) -> f64 {
        let d = self.dim;
        let dot: f64 = self.w[i * d..(i + 1) * d].iter().zip(&self.wt[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
        dot + self.b[i] + self.bt[j] - log_x
    }
}

fn objective(p: &Params, entries: &[(usize, usize, f64, f64)]) -> f64 {
    entries.iter().map(|&(i, j, lx, f)| f * p.residual(i, j, lx).powi(2)).sum()
}

pub fn train_glove(table: &CooccurrenceTable, cfg: &GloveConfig) -> Result<EmbeddingMatrix> {
    train_glove_with_trace(table, cfg).map(|(e, _)| e)
}

/// Trains with AdaGrad over shuffled entries. The trace holds the full
/// objective at the initial parameters and after every epoch.
pub fn train_glove_with_trace(table: &CooccurrenceTable, cfg: &GloveConfig) -> Result<(EmbeddingMatrix, Vec<f64>)> {
    cfg.validate()?;
    if table.is_empty() {
        return Err(Error::invalid("co-occurrence table is empty"));
    }
    let v = table.vocab_size();
    let d = cfg.dim;
    let mut init = rng::stream(cfg.seed, &[0]);
    let half = 0.5 / d as f64;
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| init.random_range(-half..half)).collect() };
    let mut p = Params { dim: d, w: draw(v * d), wt: draw(v * d), b: draw(v), bt: draw(v) };
    let mut gw = vec![1.0f64; v * d];
    let mut gwt = vec![1.0f64; v * d];
    let mut gb = vec![1.0f64; v];
    let mut gbt = vec![1.0f64; v];

    let mut entries: Vec<(usize, usize, f64, f64)> = table
        .iter()
        .map(|(i, j, x)| (i as usize, j as usize, x.ln(), glove_weight(x, cfg.x_max, cfg.alpha)))
        .collect();
    let mut trace = vec![objective(&p, &entries)];
    let eta = cfg.learning_rate;
    for epoch in 0..cfg.iterations {
        entries.shuffle(&mut rng::stream(cfg.seed, &[1, epoch as u64]));
        for &(i, j, lx, f) in &entries {
            let diff = p.residual(i, j, lx);
            let fdiff = f * diff;
            if !fdiff.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite GloVe residual at epoch {epoch} for pair ({i}, {j})"
                )));
            }
            let scaled = eta * fdiff;
            for k in 0..d {
                let a = i * d + k;
                let c = j * d + k;
                let g1 = scaled * p.wt[c];
                let g2 = scaled * p.w[a];
                p.w[a] -= g1 / gw[a].sqrt();
                p.wt[c] -= g2 / gwt[c].sqrt();
                gw[a] += g1 * g1;
                gwt[c] += g2 * g2;
            }
            p.b[i] -= scaled / gb[i].sqrt();
            p.bt[j] -= scaled / gbt[j].sqrt();
            gb[i] += scaled * scaled;
            gbt[j] += scaled * scaled;
        }
        let obj = objective(&p, &entries);
        if !obj.is_finite() {
            return Err(Error::numeric(format!("GloVe objective became non-finite at epoch {epoch}")));
        }
        debug!("glove epoch {epoch}: objective {obj:.6}");
        trace.push(obj);
    }
    let data: Vec<f64> = p.w.iter().zip(&p.wt).map(|(a, b)| a + b).collect();
    let bias: Vec<f64> = p.b.iter().zip(&p.bt).map(|(a, b)| a + b).collect();
    let e = EmbeddingMatrix::new(EmbeddingSource::Glove, d, data)?.with_bias(bias)?;
    Ok((e, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{build_shuffled_corpus, count_cooccurrences};

    #[test]
    fn weight_is_capped() {
        assert_eq!(glove_weight(10.0, 10.0, 0.75), 1.0);
        assert_eq!(glove_weight(20.0, 10.0, 0.75), 1.0);
        assert!((glove_weight(5.0, 10.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_pair_reaches_log_target() {
        let e = std::f64::consts::E;
        let table = CooccurrenceTable::from_weights(2, &[(0, 1, e), (1, 0, e)]).unwrap();
        let cfg = GloveConfig { dim: 1, iterations: 3000, ..GloveConfig::default() };
        let (_, trace) = train_glove_with_trace(&table, &cfg).unwrap();
        // the objective sums f(X) * residual^2 over both orientations
        let f = glove_weight(e, cfg.x_max, cfg.alpha);
        let per_entry = trace.last().unwrap() / (2.0 * f);
        assert!(per_entry < 1e-4, "residual^2 {per_entry}");
    }

    #[test]
    fn trace_is_non_increasing_within_one_percent() {
        let cohort = crate::synthgen::generate_cohort(&crate::synthgen::GeneratorConfig {
            n_patients: 150,
            ..Default::default()
        })
        .unwrap();
        let vocab = crate::corpus::build_vocabulary(&cohort, 2, None, crate::corpus::NoteScope::All).unwrap();
        let eras = crate::corpus::build_eras(&cohort, &vocab, 365, 180);
        let stream = build_shuffled_corpus(&eras, 2, 1).unwrap();
        let table = count_cooccurrences(&stream, 10, vocab.len()).unwrap();
        let cfg = GloveConfig { dim: 10, iterations: 15, ..GloveConfig::default() };
        let (emb, trace) = train_glove_with_trace(&table, &cfg).unwrap();
        assert_eq!(trace.len(), 16);
        assert!(trace.windows(2).all(|w| w[1] <= w[0] * 1.01), "{trace:?}");
        assert!(trace.last().unwrap() < &trace[0]);
        assert_eq!(emb.vocab_size(), vocab.len());
        assert_eq!(emb.bias().unwrap().len(), vocab.len());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let table = CooccurrenceTable::from_weights(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        for cfg in [
            GloveConfig { dim: 0, ..Default::default() },
            GloveConfig { alpha: 1.5, ..Default::default() },
            GloveConfig { x_max: 0.0, ..Default::default() },
        ] {
            assert!(train_glove(&table, &cfg).is_err());
        }
        let empty = CooccurrenceTable::from_weights(2, &[]).unwrap();
        assert!(train_glove(&empty, &GloveConfig::default()).is_err());
    }
}
