use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::EmbeddingMatrix;
use crate::corpus::{BagOfWords, EraView};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Min,
    Mean,
    Max,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Min => "min",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Aggregator::Min),
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            _ => Err(Error::config(format!("unknown aggregator `{s}`"))),
        }
    }
}

/// A patient's feature vector and a description of how it was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRepresentation {
    pub patient_id: u32,
    pub vector: Vec<f64>,
    pub method: String,
}

impl PatientRepresentation {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn extremum(acc: &mut [f64], row: &[f64], keep_larger: bool) {
    for (a, &x) in acc.iter_mut().zip(row) {
        let larger = x.total_cmp(a).is_gt();
        if larger == keep_larger && x.total_cmp(a).is_ne() {
            *a = x;
        }
    }
}

/// Pools the distinct covered words of a bag. `None` when no word is covered.
pub fn pool_words(bag: &BagOfWords, e: &EmbeddingMatrix, aggr: Aggregator) -> Option<Vec<f64>> {
    pool_words_with(bag, e, aggr, false)
}

/// As [`pool_words`]; with `count_weighted` the mean weights words by count.
pub fn pool_words_with(bag: &BagOfWords, e: &EmbeddingMatrix, aggr: Aggregator, count_weighted: bool) -> Option<Vec<f64>> {
    let mut rows = bag.entries().iter().filter_map(|&(id, c)| e.row(id).map(|r| (r, c)));
    let (first, c0) = rows.next()?;
    let mut acc = first.to_vec();
    match aggr {
        Aggregator::Min | Aggregator::Max => {
            for (r, _) in rows {
                extremum(&mut acc, r, aggr == Aggregator::Max);
            }
        }
        Aggregator::Mean => {
            let weight = |c: u32| if count_weighted { f64::from(c) } else { 1.0 };
            let mut total = weight(c0);
            acc.iter_mut().for_each(|a| *a *= total);
            for (r, c) in rows {
                let w = weight(c);
                total += w;
                for (a, x) in acc.iter_mut().zip(r) {
                    *a += w * x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= total);
        }
    }
    Some(acc)
}

/// Element-wise aggregate across note vectors. The mean sums each
/// dimension in sorted order, so the result does not depend on note order.
pub fn pool_notes(vectors: &[Vec<f64>], aggr: Aggregator) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::invalid("no note vectors to pool"))?;
    let d = first.len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("note vectors differ in dimension"));
    }
    Ok(match aggr {
        Aggregator::Min | Aggregator::Max => {
            let mut acc = first.clone();
            for v in &vectors[1..] {
                extremum(&mut acc, v, aggr == Aggregator::Max);
            }
            acc
        }
        Aggregator::Mean => {
            let mut column = Vec::with_capacity(vectors.len());
            (0..d)
                .map(|k| {
                    column.clear();
                    column.extend(vectors.iter().map(|v| v[k]));
                    column.sort_by(f64::total_cmp);
                    column.iter().sum::<f64>() / vectors.len() as f64
                })
                .collect()
        }
    })
}

fn method_name(recipe: &[Aggregator], sources: &[&EmbeddingMatrix]) -> String {
    let aggs: Vec<&str> = recipe.iter().map(|a| a.name()).collect();
    let srcs: Vec<&str> = sources.iter().map(|s| s.source().name()).collect();
    format!("ea[{}]:{}", srcs.join("+"), aggs.join("+"))
}

/// Two-level pooling for every (source, aggregator) pair, concatenated in
/// source-major order. `Ok(None)` when some source covers none of the
/// patient's notes.
pub fn represent_patient(
    era: &EraView,
    recipe: &[Aggregator],
    sources: &[&EmbeddingMatrix],
) -> Result<Option<PatientRepresentation>> {
    if recipe.is_empty() || sources.is_empty() {
        return Err(Error::invalid("recipe and source list must be non-empty"));
    }
    let mut vector = Vec::with_capacity(recipe.len() * sources.iter().map(|s| s.dim()).sum::<usize>());
    for source in sources {
        for &aggr in recipe {
            let notes: Vec<Vec<f64>> = era.notes.iter().filter_map(|n| pool_words(&n.bag, source, aggr)).collect();
            if notes.is_empty() {
                info!(
                    "patient {} has no notes covered by the {} embedding; excluded",
                    era.patient_id,
                    source.source().name()
                );
                return Ok(None);
            }
            vector.extend(pool_notes(&notes, aggr)?);
        }
    }
    Ok(Some(PatientRepresentation { patient_id: era.patient_id, vector, method: method_name(recipe, sources) }))
}

/// Represents every era in parallel, dropping excluded patients; output
/// keeps the input order.
pub fn represent_patients(
    eras: &[EraView],
    recipe: &[Aggregator],
    sources: &[&EmbeddingMatrix],
) -> Result<Vec<PatientRepresentation>> {
    let reps: Vec<Option<PatientRepresentation>> =
        eras.par_iter().map(|e| represent_patient(e, recipe, sources)).collect::<Result<_>>()?;
    Ok(reps.into_iter().flatten().collect())
}
