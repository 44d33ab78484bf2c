//! Note-level evaluation with cosine k-nearest neighbours.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::MicroCounts;
use crate::corpus::{encode_note, BagOfWords, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::{token_name, CohortDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoteClass {
    Present,
    Absent,
    Questionable,
    Unmentioned,
}

impl NoteClass {
    pub const ALL: [NoteClass; 4] = [NoteClass::Present, NoteClass::Absent, NoteClass::Questionable, NoteClass::Unmentioned];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalNote {
    pub bag: BagOfWords,
    /// One class per target.
    pub labels: Vec<NoteClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteEvalSet {
    pub targets: Vec<String>,
    pub train: Vec<EvalNote>,
    pub test: Vec<EvalNote>,
}

impl NoteEvalSet {
    pub fn validate(&self) -> Result<()> {
        let t = self.targets.len();
        if t == 0 {
            return Err(Error::invalid("note evaluation set has no targets"));
        }
        if self.train.iter().chain(&self.test).any(|n| n.labels.len() != t) {
            return Err(Error::invalid("every note needs one label per target"));
        }
        Ok(())
    }
}

/// Labels notes of the first `targets` latent conditions: Present when only
/// affirmed condition words occur, Absent when only negated ones, Questionable
/// when both, Unmentioned otherwise. Notes are drawn from the given patients,
/// at most `max_notes` per side.
pub fn synthetic_note_eval(
    cohort: &CohortDataset,
    vocab: &Vocabulary,
    train_patients: &[u32],
    test_patients: &[u32],
    targets: usize,
    max_notes: usize,
    seed: u64,
) -> Result<NoteEvalSet> {
    if targets == 0 || targets > cohort.condition_lexicon.len() {
        return Err(Error::config(format!("targets must lie in 1..={}", cohort.condition_lexicon.len())));
    }
    let lexicons: Vec<BTreeSet<String>> =
        cohort.condition_lexicon[..targets].iter().map(|ws| ws.iter().map(|&w| token_name(w as usize)).collect()).collect();
    let collect = |ids: &[u32], stream: u64| {
        let wanted: BTreeSet<u32> = ids.iter().copied().collect();
        let mut notes: Vec<EvalNote> = cohort
            .patients
            .iter()
            .filter(|p| wanted.contains(&p.patient_id))
            .flat_map(|p| &p.notes)
            .map(|note| {
                let labels = lexicons
                    .iter()
                    .map(|lex| {
                        let affirmed = note.tokens.iter().any(|t| !t.1 && lex.contains(&t.0));
                        let negated = note.tokens.iter().any(|t| t.1 && lex.contains(&t.0));
                        match (affirmed, negated) {
                            (true, false) => NoteClass::Present,
                            (false, true) => NoteClass::Absent,
                            (true, true) => NoteClass::Questionable,
                            (false, false) => NoteClass::Unmentioned,
                        }
                    })
                    .collect();
                EvalNote { bag: encode_note(note, vocab), labels }
            })
            .collect();
        notes.shuffle(&mut rng::stream(seed, &[0x407e, stream]));
        notes.truncate(max_notes);
        notes
    };
    let set = NoteEvalSet {
        targets: (0..targets).map(|c| format!("c{c:02}")).collect(),
        train: collect(train_patients, 0),
        test: collect(test_patients, 1),
    };
    set.validate()?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnConfig {
    pub k_candidates: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k_candidates: vec![1, 3, 5, 9, 15, 25], folds: 5, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub target: String,
    pub k: usize,
    pub cv_micro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEvalReport {
    pub targets: Vec<TargetScore>,
    pub mean_micro_f1: f64,
}

impl NoteEvalReport {
    /// `target,k,cv_micro_f1,micro_f1` followed by a `mean` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "target,k,cv_micro_f1,micro_f1")?;
        for t in &self.targets {
            writeln!(out, "{},{},{},{}", t.target, t.k, t.cv_micro_f1, t.micro_f1)?;
        }
        writeln!(out, "mean,,,{}", self.mean_micro_f1)?;
        Ok(())
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

/// Candidate indices ordered by cosine similarity to `q`, ties to the lower index.
fn rank(q: &[f64], pool: &[Vec<f64>], candidates: &[usize]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> =
        candidates.iter().map(|&i| (pool[i].iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|s| s.1).collect()
}

/// Majority class of the first `k` neighbours; a tied vote goes to the tied
/// class whose member ranks nearest.
pub fn vote(ranked: &[usize], labels: &[NoteClass], k: usize) -> NoteClass {
    let top = &ranked[..k.min(ranked.len())];
    let mut counts = [0usize; 4];
    for &i in top {
        counts[labels[i].index()] += 1;
    }
    let best = *counts.iter().max().unwrap();
    top.iter().map(|&i| labels[i]).find(|c| counts[c.index()] == best).unwrap_or(NoteClass::Unmentioned)
}

fn score(truth: &[NoteClass], pred: &[NoteClass]) -> MicroCounts {
    let t: Vec<usize> = truth.iter().map(|c| c.index()).collect();
    let p: Vec<usize> = pred.iter().map(|c| c.index()).collect();
    MicroCounts::from_predictions(&t, &p, 4)
}

/// Chooses k per target by cross-validated micro-F1 (ties to the smaller k)
/// and reports test micro-F1. Notes the representation maps to `None` are
/// treated as zero vectors, which are equally similar to every note.
pub fn knn_note_eval<F>(set: &NoteEvalSet, represent: F, cfg: &KnnConfig) -> Result<NoteEvalReport>
where
    F: Fn(&BagOfWords) -> Option<Vec<f64>>,
{
    set.validate()?;
    if cfg.k_candidates.is_empty() || cfg.k_candidates.contains(&0) {
        return Err(Error::config("k candidates must be a non-empty list of positive integers"));
    }
    if cfg.folds < 2 || set.train.len() < cfg.folds {
        return Err(Error::Insufficient(format!("{} training notes for {} folds", set.train.len(), cfg.folds)));
    }
    let embed = |notes: &[EvalNote]| notes.iter().map(|n| represent(&n.bag)).collect::<Vec<_>>();
    let (raw_train, raw_test) = (embed(&set.train), embed(&set.test));
    let dim = raw_train
        .iter()
        .chain(&raw_test)
        .flatten()
        .map(|v| v.len())
        .next()
        .ok_or_else(|| Error::Insufficient("representation is undefined for every note".into()))?;
    let fill = |v: Vec<Option<Vec<f64>>>| -> Result<Vec<Vec<f64>>> {
        v.into_iter()
            .map(|x| match x {
                Some(x) if x.len() != dim => Err(Error::invalid("representation dimension varies across notes")),
                Some(x) => Ok(unit(x)),
                None => Ok(vec![0.0; dim]),
            })
            .collect()
    };
    let (train, test) = (fill(raw_train)?, fill(raw_test)?);

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[0xf01d]));
    let mut fold_of = vec![0; train.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % cfg.folds;
    }
    let cv_ranks: Vec<Vec<usize>> = (0..train.len())
        .map(|i| {
            let pool: Vec<usize> = (0..train.len()).filter(|&j| fold_of[j] != fold_of[i]).collect();
            rank(&train[i], &train, &pool)
        })
        .collect();
    let all: Vec<usize> = (0..train.len()).collect();
    let test_ranks: Vec<Vec<usize>> = test.iter().map(|q| rank(q, &train, &all)).collect();

    let mut targets = Vec::new();
    for (t, name) in set.targets.iter().enumerate() {
        let labels: Vec<NoteClass> = set.train.iter().map(|n| n.labels[t]).collect();
        let mut best: Option<(usize, f64)> = None;
        for &k in &cfg.k_candidates {
            let pred: Vec<NoteClass> = cv_ranks.iter().map(|r| vote(r, &labels, k)).collect();
            let f1 = score(&labels, &pred).f1();
            if best.is_none_or(|(bk, bf)| f1 > bf || (f1 == bf && k < bk)) {
                best = Some((k, f1));
            }
        }
        let (k, cv_micro_f1) = best.unwrap();
        let truth: Vec<NoteClass> = set.test.iter().map(|n| n.labels[t]).collect();
        let pred: Vec<NoteClass> = test_ranks.iter().map(|r| vote(r, &labels, k)).collect();
        targets.push(TargetScore { target: name.clone(), k, cv_micro_f1, micro_f1: score(&truth, &pred).f1() });
    }
    let mean_micro_f1 = targets.iter().map(|t| t.micro_f1).sum::<f64>() / targets.len() as f64;
    Ok(NoteEvalReport { targets, mean_micro_f1 })
}


#[cfg(test)]
mod tests {
    use super::*;
    use NoteClass::*;

    fn note(ids: &[u32], labels: &[NoteClass]) -> EvalNote {
        EvalNote { bag: BagOfWords::from_ids(ids.iter().copied()), labels: labels.to_vec() }
    }

    fn one_hot(bag: &BagOfWords) -> Option<Vec<f64>> {
        let mut v = vec![0.0; 8];
        for (id, c) in bag.entries() {
            v[*id as usize] = *c as f64;
        }
        if bag.is_empty() { None } else { Some(v) }
    }

    #[test]
    fn micro_f1_from_counts() {
        let c = MicroCounts { tp: 2, fp: 1, fn_: 1 };
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_note_recovers_its_labels_with_k1() {
        let set = NoteEvalSet {
            targets: vec!["a".into(), "b".into()],
            train: vec![note(&[0, 1], &[Present, Absent]), note(&[2, 3], &[Absent, Questionable]), note(&[4], &[Unmentioned, Present])],
            test: vec![note(&[2, 3], &[Absent, Questionable])],
        };
        let cfg = KnnConfig { k_candidates: vec![1], folds: 3, seed: 1 };
        let r = knn_note_eval(&set, one_hot, &cfg).unwrap();
        assert!(r.targets.iter().all(|t| t.micro_f1 == 1.0 && t.k == 1));
    }

    #[test]
    fn majority_vote_on_toy_set() {
        // Training majority is Present; six test notes with truth P,P,P,A,Q,U
        // give TP = 3, FP = 3, FN = 3 and micro-F1 = 1/2.
        let train = vec![note(&[0], &[Present]), note(&[1], &[Present]), note(&[2], &[Absent]), note(&[3], &[Present]), note(&[4], &[Unmentioned])];
        let test: Vec<EvalNote> =
            [Present, Present, Present, Absent, Questionable, Unmentioned].iter().enumerate().map(|(i, &c)| note(&[i as u32 + 1], &[c])).collect();
        let set = NoteEvalSet { targets: vec!["t".into()], train, test };
        let cfg = KnnConfig { k_candidates: vec![5], folds: 5, seed: 0 };
        let r = knn_note_eval(&set, one_hot, &cfg).unwrap();
        assert_eq!(r.targets[0].micro_f1, 0.5);
        assert_eq!(r.mean_micro_f1, 0.5);
    }

    #[test]
    fn chosen_k_is_a_candidate_and_ties_prefer_nearest() {
        assert_eq!(vote(&[3, 0, 1, 2], &[Absent, Present, Present, Absent], 4), Absent);
        assert_eq!(vote(&[1, 0], &[Absent, Present], 2), Present);
        let set = NoteEvalSet {
            targets: vec!["t".into()],
            train: (0..20).map(|i| note(&[i % 4], &[if i % 4 == 0 { Present } else { Absent }])).collect(),
            test: vec![note(&[0], &[Present])],
        };
        let cfg = KnnConfig { k_candidates: vec![2, 4, 7], folds: 4, seed: 3 };
        let r = knn_note_eval(&set, one_hot, &cfg).unwrap();
        assert!(cfg.k_candidates.contains(&r.targets[0].k));
        assert_eq!(r.targets[0].micro_f1, 1.0);
    }

    #[test]
    fn rejects_unlabeled_and_empty_inputs() {
        let bad = NoteEvalSet { targets: vec!["t".into()], train: vec![note(&[0], &[])], test: vec![] };
        assert!(knn_note_eval(&bad, one_hot, &KnnConfig::default()).is_err());
        let none = NoteEvalSet { targets: vec!["t".into()], train: (0..5).map(|_| note(&[], &[Absent])).collect(), test: vec![] };
        assert!(knn_note_eval(&none, one_hot, &KnnConfig::default()).is_err());
    }
}
