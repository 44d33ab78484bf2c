//! Text preprocessing: vocabulary, bag-of-words encoding, observation and
//! follow-up eras, same-day merging and patient splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::{CohortDataset, PatientRecord, RawNote};

pub const NEGATION_SUFFIX: &str = "~neg";

/// Vocabulary key of a token occurrence; negated mentions are distinct words.
pub fn token_key(token: &str, negated: bool) -> String {
    if negated {
        format!("{token}{NEGATION_SUFFIX}")
    } else {
        token.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    note_frequency: Vec<u64>,
}

/// Which notes contribute to vocabulary counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoteScope {
    All,
    /// Only notes inside each patient's observation era.
    ObservationEra { observation_days: u32, followup_days: u32 },
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn note_frequency(&self, id: u32) -> u64 {
        self.note_frequency[id as usize]
    }

    /// Assigns ids by descending note frequency, ties broken by token order.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i as u32))
            .collect();
        let (tokens, note_frequency) = entries.into_iter().unzip();
        Vocabulary { tokens, index, note_frequency }
    }

    /// TSV `word_id<TAB>token<TAB>note_frequency`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, (t, f)) in self.tokens.iter().zip(&self.note_frequency).enumerate() {
            writeln!(out, "{i}\t{t}\t{f}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err("expected word_id, token, note_frequency"));
            }
            let id: usize = fields[0].parse().map_err(|_| parse_err("bad word id"))?;
            if id != tokens.len() {
                return Err(parse_err("word ids must be dense and ascending"));
            }
            tokens.push(fields[1].to_string());
            freq.push(fields[2].parse().map_err(|_| parse_err("bad note frequency"))?);
        }
        let index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Parse { line: 0, msg: "duplicate token in vocabulary".into() });
        }
        Ok(Vocabulary { tokens, index, note_frequency: freq })
    }
}

fn notes_in_scope<'a>(p: &'a PatientRecord, scope: NoteScope) -> Box<dyn Iterator<Item = &'a RawNote> + 'a> {
    match scope {
        NoteScope::All => Box::new(p.notes.iter()),
        NoteScope::ObservationEra { observation_days, followup_days } => {
            let pred = p.prediction_day(followup_days);
            let start = pred.saturating_sub(observation_days);
            Box::new(p.notes.iter().filter(move |n| n.day >= start && n.day < pred))
        }
    }
}

/// Builds the vocabulary, keeping words whose note frequency lies in
/// `[min_notes, max_notes]` (`None` = unbounded).
pub fn build_vocabulary(
    cohort: &CohortDataset,
    min_notes: u64,
    max_notes: Option<u64>,
    scope: NoteScope,
) -> Result<Vocabulary> {
    if cohort.patients.is_empty() {
        return Err(Error::invalid("cohort has no patients"));
    }
    let mut df: HashMap<String, u64> = HashMap::new();
    for p in &cohort.patients {
        for note in notes_in_scope(p, scope) {
            let distinct: BTreeSet<String> = note.tokens.iter().map(|t| token_key(&t.0, t.1)).collect();
            for key in distinct {
                *df.entry(key).or_insert(0) += 1;
            }
        }
    }
    let max = max_notes.unwrap_or(u64::MAX);
    let vocab = Vocabulary::from_counts(df.into_iter().filter(|&(_, f)| f >= min_notes && f <= max));
    if vocab.is_empty() {
        return Err(Error::invalid("vocabulary is empty after frequency filtering"));
    }
    Ok(vocab)
}

/// Number of notes in scope, used for the relative `max_notes` default.
pub fn count_notes(cohort: &CohortDataset, scope: NoteScope) -> usize {
    cohort.patients.iter().map(|p| notes_in_scope(p, scope).count()).sum()
}

/// Sparse word counts, sorted by word id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BagOfWords {
    entries: Vec<(u32, u32)>,
}

impl BagOfWords {
    pub fn from_counts(counts: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut map: BTreeMap<u32, u32> = BTreeMap::new();
        for (id, c) in counts {
            if c > 0 {
                *map.entry(id).or_insert(0) += c;
            }
        }
        BagOfWords { entries: map.into_iter().collect() }
    }

    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        Self::from_counts(ids.into_iter().map(|i| (i, 1)))
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| u64::from(e.1)).sum()
    }

    pub fn count(&self, id: u32) -> u32 {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    /// Element-wise sum.
    pub fn add(&self, other: &BagOfWords) -> BagOfWords {
        let mut out = Vec::with_capacity(self.entries.len() + other.entries.len());
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() || j < b.len() {
            if j == b.len() || i < a.len() && a[i].0 < b[j].0 {
                out.push(a[i]);
                i += 1;
            } else if i == a.len() || b[j].0 < a[i].0 {
                out.push(b[j]);
                j += 1;
            } else {
                out.push((a[i].0, a[i].1 + b[j].1));
                i += 1;
                j += 1;
            }
        }
        BagOfWords { entries: out }
    }

    /// Presence encoding, every count set to 1.
    pub fn binarized(&self) -> BagOfWords {
        BagOfWords { entries: self.entries.iter().map(|&(id, _)| (id, 1)).collect() }
    }
}

/// Encodes a note; out-of-vocabulary tokens are dropped.
pub fn encode_note(note: &RawNote, vocab: &Vocabulary) -> BagOfWords {
    BagOfWords::from_ids(note.tokens.iter().filter_map(|t| vocab.id(&token_key(&t.0, t.1))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatedBag {
    pub day: u32,
    pub bag: BagOfWords,
    /// Conditions diagnosed on this day.
    pub ccs: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraView {
    pub patient_id: u32,
    pub prediction_day: u32,
    pub notes: Vec<DatedBag>,
    pub ccs_labels: Vec<u16>,
    pub task_labels: BTreeMap<String, u8>,
}

impl EraView {
    /// Summed bag over all observation notes.
    pub fn patient_bag(&self) -> BagOfWords {
        self.notes.iter().fold(BagOfWords::default(), |acc, n| acc.add(&n.bag))
    }

    pub fn label(&self, task: &str) -> Option<u8> {
        self.task_labels.get(task).copied()
    }
}

fn era_for(p: &PatientRecord, vocab: &Vocabulary, observation_days: u32, followup_days: u32) -> Option<EraView> {
    let pred = p.prediction_day(followup_days);
    let start = pred.saturating_sub(observation_days);
    let in_obs = |day: u32| day >= start && day < pred;

    let mut notes: Vec<DatedBag> = p
        .notes
        .iter()
        .filter(|n| in_obs(n.day))
        .map(|n| DatedBag { day: n.day, bag: encode_note(n, vocab), ccs: Vec::new() })
        .filter(|n| !n.bag.is_empty())
        .collect();
    if notes.is_empty() {
        return None;
    }
    notes.sort_by_key(|n| n.day);
    for n in &mut notes {
        let mut ccs: Vec<u16> = p.diagnoses.iter().filter(|d| d.0 == n.day).map(|d| d.1).collect();
        ccs.dedup();
        n.ccs = ccs;
    }
    let ccs_labels: BTreeSet<u16> = p.diagnoses.iter().filter(|d| in_obs(d.0)).map(|d| d.1).collect();
    let task_labels = p
        .outcomes
        .keys()
        .map(|task| {
            let hit = p
                .events
                .iter()
                .any(|e| &e.task == task && e.day >= pred && e.day <= p.end_of_record);
            (task.clone(), u8::from(hit))
        })
        .collect();
    Some(EraView {
        patient_id: p.patient_id,
        prediction_day: pred,
        notes,
        ccs_labels: ccs_labels.into_iter().collect(),
        task_labels,
    })
}

/// Builds observation-era views. Patients without any non-empty encoded
/// observation note are dropped. Output is ordered by patient id.
pub fn build_eras(cohort: &CohortDataset, vocab: &Vocabulary, observation_days: u32, followup_days: u32) -> Vec<EraView> {
    let mut eras: Vec<EraView> = cohort
        .patients
        .par_iter()
        .filter_map(|p| era_for(p, vocab, observation_days, followup_days))
        .collect();
    eras.sort_by_key(|e| e.patient_id);
    eras
}

/// Patients whose stored outcome disagrees with the follow-up-era events.
pub fn label_inconsistencies(cohort: &CohortDataset) -> Vec<(u32, String)> {
    let fu = cohort.config.followup_days;
    let mut bad = Vec::new();
    for p in &cohort.patients {
        let pred = p.prediction_day(fu);
        for (task, &y) in &p.outcomes {
            let hit = p.events.iter().any(|e| &e.task == task && e.day >= pred && e.day <= p.end_of_record);
            if hit != (y == 1) {
                bad.push((p.patient_id, task.clone()));
            }
        }
    }
    bad
}

/// Sums bags that share a day; the sequence length becomes the number of
/// distinct days.
pub fn merge_same_day(era: &EraView) -> EraView {
    let mut merged: Vec<DatedBag> = Vec::new();
    for n in &era.notes {
        match merged.last_mut() {
            Some(last) if last.day == n.day => {
                last.bag = last.bag.add(&n.bag);
                let mut ccs: BTreeSet<u16> = last.ccs.iter().copied().collect();
                ccs.extend(n.ccs.iter().copied());
                last.ccs = ccs.into_iter().collect();
            }
            _ => merged.push(n.clone()),
        }
    }
    EraView { notes: merged, ..era.clone() }
}

pub fn write_eras_jsonl<W: Write>(eras: &[EraView], mut out: W) -> Result<()> {
    for e in eras {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_eras_jsonl<R: BufRead>(input: R) -> Result<Vec<EraView>> {
    let mut eras = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        eras.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(eras)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

impl DataSplit {
    /// TSV `patient_id<TAB>partition`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (name, ids) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            for id in ids {
                writeln!(out, "{id}\t{name}")?;
            }
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut split = DataSplit { train: vec![], validation: vec![], test: vec![] };
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Parse { line: i + 1, msg: m.to_string() };
            let (id, part) = line.split_once('\t').ok_or_else(|| err("expected patient_id<TAB>partition"))?;
            let id: u32 = id.parse().map_err(|_| err("bad patient id"))?;
            match part {
                "train" => split.train.push(id),
                "validation" => split.validation.push(id),
                "test" => split.test.push(id),
                _ => return Err(err("unknown partition")),
            }
        }
        Ok(split)
    }
}

/// Seeded shuffle followed by a partition into train/validation/test.
pub fn split_patients(patient_ids: &[u32], fractions: [f64; 3], seed: u64) -> Result<DataSplit> {
    if fractions.iter().any(|&f| f <= 0.0 || !f.is_finite()) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, expected 1")));
    }
    let mut ids = patient_ids.to_vec();
    ids.sort_unstable();
    ids.shuffle(&mut rng::stream(seed, &[0x5711]));
    let n = ids.len() as f64;
    let b1 = (n * fractions[0]).round() as usize;
    let b2 = ((n * (fractions[0] + fractions[1])).round() as usize).max(b1);
    let part = |range: std::ops::Range<usize>| {
        let mut v = ids[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(DataSplit { train: part(0..b1), validation: part(b1..b2), test: part(b2..ids.len()) })
}
