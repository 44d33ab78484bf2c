//! Analogy-based relatedness of drug and indication embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::embed::EmbeddingMatrix;
use crate::error::Result;
use crate::synthgen::PlantedRelation;

pub const DEFAULT_TOP_K: usize = 40;

/// Named relations as (drug id, indication id) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationSet {
    pub relations: BTreeMap<String, Vec<(u32, u32)>>,
}

impl RelationSet {
    /// Resolves token pairs against `vocab`; pairs with an unknown token are dropped.
    pub fn resolve(planted: &[PlantedRelation], vocab: &Vocabulary) -> Self {
        let mut relations: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for p in planted {
            let entry = relations.entry(p.relation.clone()).or_default();
            if let (Some(d), Some(m)) = (vocab.id(&p.drug), vocab.id(&p.indication)) {
                entry.push((d, m));
            }
        }
        RelationSet { relations }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelatednessResult {
    pub queries: usize,
    pub successes: usize,
    pub ratio: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Top `k` covered words by cosine similarity to `q`, excluding `skip`.
/// Ties go to the lower word id.
pub fn nearest_words(e: &EmbeddingMatrix, q: &[f64], k: usize, skip: &[u32]) -> Vec<u32> {
    let qn = norm(q);
    let mut scored: Vec<(f64, u32)> = (0..e.vocab_size() as u32)
        .filter(|w| !skip.contains(w))
        .filter_map(|w| {
            let row = e.row(w)?;
            let denom = qn * norm(row);
            let cos = if denom > 0.0 { row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / denom } else { 0.0 };
            Some((cos, w))
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|s| s.1).collect()
}

/// For every ordered pair of distinct pairs ((d1, m1), (d2, m2)) the query
/// e_d1 - e_m1 + e_m2 succeeds when one of its `top_k` neighbours w has
/// (w, m2) in the relation.
pub fn relatedness_score(e: &EmbeddingMatrix, relations: &RelationSet, top_k: usize) -> BTreeMap<String, RelatednessResult> {
    let mut out = BTreeMap::new();
    for (name, pairs) in &relations.relations {
        let covered: Vec<(u32, u32)> =
            pairs.iter().copied().filter(|&(d, m)| e.row(d).is_some() && e.row(m).is_some()).collect();
        if covered.len() < 2 {
            warn!("relation {name}: only {} covered pairs, skipped", covered.len());
            continue;
        }
        let set: BTreeSet<(u32, u32)> = covered.iter().copied().collect();
        let (mut queries, mut successes) = (0, 0);
        for (a, &(d1, m1)) in covered.iter().enumerate() {
            for (b, &(_, m2)) in covered.iter().enumerate() {
                if a == b {
                    continue;
                }
                let (vd, vm1, vm2) = (e.row(d1).unwrap(), e.row(m1).unwrap(), e.row(m2).unwrap());
                let q: Vec<f64> = (0..e.dim()).map(|i| vd[i] - vm1[i] + vm2[i]).collect();
                queries += 1;
                if nearest_words(e, &q, top_k, &[d1, m1, m2]).iter().any(|&w| set.contains(&(w, m2))) {
                    successes += 1;
                }
            }
        }
        out.insert(name.clone(), RelatednessResult { queries, successes, ratio: successes as f64 / queries as f64 });
    }
    out
}

/// `relation,queries,successes,ratio`
pub fn write_relatedness_csv<W: Write>(results: &BTreeMap<String, RelatednessResult>, mut out: W) -> Result<()> {
    writeln!(out, "relation,queries,successes,ratio")?;
    for (name, r) in results {
        writeln!(out, "{name},{},{},{}", r.queries, r.successes, r.ratio)?;
    }
    Ok(())
}
