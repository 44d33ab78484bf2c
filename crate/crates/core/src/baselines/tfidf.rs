use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BagOfWords, EraView};
use crate::embed::PatientRepresentation;
use crate::error::{Error, Result};

/// The `cap` most frequent words over the training notes (by summed count,
/// ties to the lower id), in id order.
pub fn select_vocabulary(train: &[EraView], cap: usize) -> Vec<u32> {
    let mut freq: HashMap<u32, u64> = HashMap::new();
    for era in train {
        for note in &era.notes {
            for &(id, c) in note.bag.entries() {
                *freq.entry(id).or_insert(0) += u64::from(c);
            }
        }
    }
    let mut ranked: Vec<(u32, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<u32> = ranked.into_iter().take(cap).map(|e| e.0).collect();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub word_ids: Vec<u32>,
    pub idf: Vec<f64>,
    pub n_docs: usize,
}

impl TfidfModel {
    /// Fits vocabulary and `idf = ln(N_docs / df)` over the training notes.
    pub fn fit(train: &[EraView], vocab_cap: usize) -> Result<Self> {
        let n_docs: usize = train.iter().map(|e| e.notes.len()).sum();
        if n_docs == 0 {
            return Err(Error::invalid("no training notes for TF-IDF"));
        }
        if vocab_cap == 0 {
            return Err(Error::config("vocabulary cap must be at least 1"));
        }
        let word_ids = select_vocabulary(train, vocab_cap);
        let mut df: HashMap<u32, usize> = HashMap::new();
        for era in train {
            for note in &era.notes {
                for id in note.bag.ids() {
                    *df.entry(id).or_insert(0) += 1;
                }
            }
        }
        let idf = word_ids
            .iter()
            .map(|id| match df.get(id) {
                Some(&d) if d > 0 => (n_docs as f64 / d as f64).ln(),
                _ => 0.0,
            })
            .collect();
        Ok(TfidfModel { word_ids, idf, n_docs })
    }

    pub fn dim(&self) -> usize {
        self.word_ids.len()
    }

    /// `tf * idf` over the model vocabulary; other words are dropped.
    pub fn transform(&self, bag: &BagOfWords) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for &(id, c) in bag.entries() {
            if let Ok(k) = self.word_ids.binary_search(&id) {
                v[k] = f64::from(c) * self.idf[k];
            }
        }
        v
    }

    pub fn represent(&self, era: &EraView) -> PatientRepresentation {
        PatientRepresentation {
            patient_id: era.patient_id,
            vector: self.transform(&era.patient_bag()),
            method: format!("tfidf-{}", self.dim()),
        }
    }
}

/// Fits on `train` and represents every era of `all`, keyed by patient id.
pub fn tfidf_represent(
    train: &[EraView],
    all: &[EraView],
    vocab_cap: usize,
) -> Result<(TfidfModel, BTreeMap<u32, PatientRepresentation>)> {
    let model = TfidfModel::fit(train, vocab_cap)?;
    let reps: Vec<PatientRepresentation> = all.par_iter().map(|e| model.represent(e)).collect();
    Ok((model, reps.into_iter().map(|r| (r.patient_id, r)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DatedBag;

    fn era(id: u32, bags: Vec<BagOfWords>) -> EraView {
        EraView {
            patient_id: id,
            prediction_day: 100,
            notes: bags.into_iter().map(|bag| DatedBag { day: 0, bag, ccs: vec![] }).collect(),
            ccs_labels: vec![],
            task_labels: BTreeMap::new(),
        }
    }

    #[test]
    fn hand_computed_weights() {
        let train = vec![era(1, vec![BagOfWords::from_counts([(0, 3), (1, 1)]), BagOfWords::from_counts([(1, 3)])])];
        let (m, reps) = tfidf_represent(&train, &train, 10).unwrap();
        assert_eq!(m.word_ids, vec![0, 1]);
        let v = &reps[&1].vector;
        assert!((v[0] - 3.0 * 2f64.ln()).abs() < 1e-15);
        // word 1 is in every note
        assert_eq!(v[1], 0.0);
        let (m1, _) = tfidf_represent(&train, &train, 1).unwrap();
        assert_eq!(m1.dim(), 1);
        assert_eq!(m1.word_ids, vec![1]);
    }

    #[test]
    fn unseen_words_are_dropped() {
        let train = vec![era(1, vec![BagOfWords::from_ids([0]), BagOfWords::from_ids([1])])];
        let test = era(2, vec![BagOfWords::from_counts([(0, 1), (7, 5)])]);
        let m = TfidfModel::fit(&train, 10).unwrap();
        assert_eq!(m.represent(&test).vector, vec![2f64.ln(), 0.0]);
    }

    #[test]
    fn held_out_notes_never_change_the_model() {
        let train = vec![era(1, vec![BagOfWords::from_ids([0, 2]), BagOfWords::from_ids([1])])];
        let a = vec![era(5, vec![BagOfWords::from_ids([3])])];
        let b = vec![era(5, vec![BagOfWords::from_counts([(0, 9), (4, 2)])])];
        let (ma, _) = tfidf_represent(&train, &a, 2).unwrap();
        let (mb, _) = tfidf_represent(&train, &b, 2).unwrap();
        assert_eq!(ma, mb);
    }
}
