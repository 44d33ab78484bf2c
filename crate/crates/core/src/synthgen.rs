//! Synthetic longitudinal cohort generator.
//!
//! Patients carry a sparse set of latent conditions. Notes are bags of
//! tokens drawn from condition lexicons mixed with background vocabulary,
//! diagnoses are emitted for the conditions a note is about, and follow-up
//! outcomes are Bernoulli draws from per-task logistic models over the latent
//! condition indicators. The generating coefficients are kept on the dataset
//! so downstream evaluation can be compared with the best achievable score.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::metrics::auroc;
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

pub const MORTALITY: &str = "mortality";
pub const ADMISSION: &str = "admission";
pub const ER_VISIT: &str = "er_visit";
pub const UTILIZATION_TASKS: [&str; 3] = [MORTALITY, ADMISSION, ER_VISIT];

pub const RELATION_NAMES: [&str; 2] = ["may_treat", "may_prevent"];

/// Logistic outcome model over the latent condition indicator vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub task: String,
    pub intercept: f64,
    pub weights: Vec<f64>,
    /// Condition whose diagnosis code marks the event, for disease tasks.
    #[serde(default)]
    pub condition: Option<u16>,
}

impl OutcomeModel {
    pub fn linear_predictor(&self, conditions: &[u16]) -> f64 {
        self.intercept
            + conditions
                .iter()
                .map(|&c| self.weights[c as usize])
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub vocab_size: usize,
    pub n_latent_conditions: usize,
    pub words_per_condition: usize,
    /// Leading words of each lexicon that may appear negated.
    pub negatable_words: usize,
    pub notes_per_patient_range: (usize, usize),
    pub words_per_note_range: (usize, usize),
    pub negation_rate: f64,
    /// Probability that a token in a condition-focused note is background.
    pub background_rate: f64,
    /// Bernoulli prior of each latent condition.
    pub condition_prevalence: Vec<f64>,
    pub outcome_weights: Vec<OutcomeModel>,
    pub observation_days: u32,
    pub followup_days: u32,
    pub relation_pairs: usize,
    /// Minimum number of notes in which each planted pair co-occurs.
    pub relation_floor: usize,
    /// Probability of realizing a planted pair in a note focused on its condition.
    pub relation_rate: f64,
    pub seed: u64,
}

const DEFAULT_CONDITIONS: usize = 24;

impl Default for GeneratorConfig {
    fn default() -> Self {
        let n_cond = DEFAULT_CONDITIONS;
        let prevalence = default_prevalence(n_cond);
        let mut outcomes = Vec::new();
        for (t, (task, target, scale)) in [
            (MORTALITY, 0.22, 1.4),
            (ADMISSION, 0.30, 1.1),
            (ER_VISIT, 0.26, 1.0),
        ]
        .into_iter()
        .enumerate()
        {
            let weights = default_weights(t as u64, n_cond, scale);
            let intercept = calibrate_intercept(&prevalence, &weights, target);
            outcomes.push(OutcomeModel {
                task: task.to_string(),
                intercept,
                weights,
                condition: None,
            });
        }
        // one disease task per dense (most prevalent) condition
        for c in 0..2u16 {
            let mut weights = default_weights(10 + u64::from(c), n_cond, 0.8);
            weights[c as usize] += 1.5;
            let intercept = calibrate_intercept(&prevalence, &weights, 0.25);
            outcomes.push(OutcomeModel {
                task: format!("dx_c{c:02}"),
                intercept,
                weights,
                condition: Some(c),
            });
        }
        GeneratorConfig {
            n_patients: 8000,
            vocab_size: 340,
            n_latent_conditions: n_cond,
            words_per_condition: 8,
            negatable_words: 2,
            notes_per_patient_range: (3, 14),
            words_per_note_range: (8, 30),
            negation_rate: 0.05,
            background_rate: 0.45,
            condition_prevalence: prevalence,
            outcome_weights: outcomes,
            observation_days: 365,
            followup_days: 182,
            relation_pairs: 5,
            relation_floor: 5,
            relation_rate: 0.3,
            seed: 7,
        }
    }
}

fn default_prevalence(n: usize) -> Vec<f64> {
    let (hi, lo) = (0.25_f64, 0.03_f64);
    (0..n)
        .map(|c| {
            let t = if n > 1 { c as f64 / (n - 1) as f64 } else { 0.0 };
            hi * (lo / hi).powf(t)
        })
        .collect()
}

fn default_weights(task: u64, n: usize, scale: f64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut r = ChaCha8Rng::seed_from_u64(rng::derive_seed(0x5eed, &[task]));
    (0..n)
        .map(|_| scale * r.random_range(-0.25..1.0))
        .collect()
}

/// Intercept `b` with `E[sigmoid(b + w.z)] = target` under the independent
/// Bernoulli condition prior, estimated on a fixed Monte Carlo sample.
pub fn calibrate_intercept(prevalence: &[f64], weights: &[f64], target: f64) -> f64 {
    let mut r = rng::stream(0xca11b, &[prevalence.len() as u64]);
    let scores: Vec<f64> = (0..20_000)
        .map(|_| {
            prevalence
                .iter()
                .zip(weights)
                .filter(|(&p, _)| r.random::<f64>() < p)
                .map(|(_, &w)| w)
                .sum()
        })
        .collect();
    let mean_rate = |b: f64| scores.iter().map(|s| sigmoid(b + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GeneratorConfig {
    fn n_drugs(&self) -> usize {
        RELATION_NAMES.len() * self.relation_pairs
    }

    /// First background word id.
    fn background_start(&self) -> usize {
        self.n_latent_conditions * self.words_per_condition + self.n_drugs()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_patients", self.n_patients),
            ("vocab_size", self.vocab_size),
            ("n_latent_conditions", self.n_latent_conditions),
            ("words_per_condition", self.words_per_condition),
            ("notes_per_patient min", self.notes_per_patient_range.0),
            ("words_per_note min", self.words_per_note_range.0),
            ("observation_days", self.observation_days as usize),
            ("followup_days", self.followup_days as usize),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.notes_per_patient_range.0 > self.notes_per_patient_range.1
            || self.words_per_note_range.0 > self.words_per_note_range.1
        {
            return Err(Error::config("range minimum exceeds maximum"));
        }
        for (name, p) in [
            ("negation_rate", self.negation_rate),
            ("background_rate", self.background_rate),
            ("relation_rate", self.relation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        let lexicon = self.n_latent_conditions * self.words_per_condition;
        if self.vocab_size < lexicon {
            return Err(Error::config(format!(
                "vocab_size {} < n_latent_conditions x words_per_condition = {lexicon}",
                self.vocab_size
            )));
        }
        if self.vocab_size <= self.background_start() + 2 * RELATION_NAMES.len() {
            return Err(Error::config(format!(
                "vocab_size {} leaves no room for background words after {} lexicon and drug tokens",
                self.vocab_size,
                self.background_start()
            )));
        }
        if self.negatable_words > self.words_per_condition {
            return Err(Error::config("negatable_words exceeds words_per_condition"));
        }
        if self.condition_prevalence.len() != self.n_latent_conditions
            || self.condition_prevalence.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::config(
                "condition_prevalence must hold one probability per latent condition",
            ));
        }
        for m in &self.outcome_weights {
            if m.weights.len() != self.n_latent_conditions {
                return Err(Error::config(format!(
                    "outcome weights for {} have length {}, expected {}",
                    m.task,
                    m.weights.len(),
                    self.n_latent_conditions
                )));
            }
            if let Some(c) = m.condition {
                if c as usize >= self.n_latent_conditions {
                    return Err(Error::config(format!("task {} names unknown condition {c}", m.task)));
                }
            }
        }
        if self.relation_pairs > 0 && self.relation_pairs < 2 {
            return Err(Error::config("relation_pairs must be 0 or >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token(pub String, pub bool);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawNote {
    pub day: u32,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEvent {
    pub day: u32,
    pub task: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: u32,
    pub end_of_record: u32,
    pub death_day: Option<u32>,
    pub notes: Vec<RawNote>,
    pub diagnoses: Vec<(u32, u16)>,
    pub outcomes: BTreeMap<String, u8>,
    pub events: Vec<OutcomeEvent>,
    /// Ground-truth latent conditions; never read by representation code.
    pub latent_conditions: Vec<u16>,
}

impl PatientRecord {
    pub fn prediction_day(&self, followup_days: u32) -> u32 {
        self.end_of_record.saturating_sub(followup_days)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRelation {
    pub relation: String,
    pub drug: String,
    pub indication: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortHeader {
    pub schema_version: u32,
    pub config: GeneratorConfig,
    pub vocabulary_universe: Vec<String>,
    pub condition_lexicon: Vec<Vec<u32>>,
    pub planted_relations: Vec<PlantedRelation>,
    pub bayes_info: Vec<OutcomeModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    pub config: GeneratorConfig,
    pub patients: Vec<PatientRecord>,
    pub vocabulary_universe: Vec<String>,
    pub condition_lexicon: Vec<Vec<u32>>,
    pub planted_relations: Vec<PlantedRelation>,
    pub bayes_info: Vec<OutcomeModel>,
}

impl CohortDataset {
    pub fn task_names(&self) -> Vec<String> {
        self.bayes_info.iter().map(|m| m.task.clone()).collect()
    }

    pub fn outcome_model(&self, task: &str) -> Result<&OutcomeModel> {
        self.bayes_info
            .iter()
            .find(|m| m.task == task)
            .ok_or_else(|| Error::invalid(format!("unknown task {task}")))
    }

    /// True generating linear predictor of `task` for every patient.
    pub fn latent_scores(&self, task: &str) -> Result<BTreeMap<u32, f64>> {
        let model = self.outcome_model(task)?;
        Ok(self
            .patients
            .iter()
            .map(|p| (p.patient_id, model.linear_predictor(&p.latent_conditions)))
            .collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = CohortHeader {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            vocabulary_universe: self.vocabulary_universe.clone(),
            condition_lexicon: self.condition_lexicon.clone(),
            planted_relations: self.planted_relations.clone(),
            bayes_info: self.bayes_info.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for p in &self.patients {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or(Error::Parse { line: 1, msg: "empty cohort file".into() })??;
        let header: CohortHeader = serde_json::from_str(&first)
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported schema version {}", header.schema_version),
            });
        }
        let mut patients = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PatientRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
            patients.push(p);
        }
        Ok(CohortDataset {
            config: header.config,
            patients,
            vocabulary_universe: header.vocabulary_universe,
            condition_lexicon: header.condition_lexicon,
            planted_relations: header.planted_relations,
            bayes_info: header.bayes_info,
        })
    }

    /// `relation<TAB>drug_token<TAB>indication_token`, one pair per line.
    pub fn write_relations_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.planted_relations {
            writeln!(out, "{}\t{}\t{}", r.relation, r.drug, r.indication)?;
        }
        Ok(())
    }
}

pub fn read_relations_tsv<R: BufRead>(input: R) -> Result<Vec<PlantedRelation>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push(PlantedRelation {
            relation: fields[0].to_string(),
            drug: fields[1].to_string(),
            indication: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn token_name(word_id: usize) -> String {
    format!("C{word_id:07}")
}

/// Layout of the token universe shared by all patients.
struct Universe {
    lexicon: Vec<Vec<u32>>,
    /// (relation index, drug id, indication id, hosting condition)
    pairs: Vec<(usize, u32, u32, usize)>,
    /// Two marker tokens per relation, emitted alongside its drugs.
    markers: Vec<[u32; 2]>,
    background: Vec<u32>,
    /// Cumulative Zipf weights over `background`.
    background_cdf: Vec<f64>,
}

impl Universe {
    fn new(cfg: &GeneratorConfig) -> Self {
        let wpc = cfg.words_per_condition;
        let lexicon: Vec<Vec<u32>> = (0..cfg.n_latent_conditions)
            .map(|c| ((c * wpc) as u32..((c + 1) * wpc) as u32).collect())
            .collect();
        let drug0 = cfg.n_latent_conditions * wpc;
        let mut pairs = Vec::new();
        for r in 0..RELATION_NAMES.len() {
            for k in 0..cfg.relation_pairs {
                let slot = r * cfg.relation_pairs + k;
                let cond = slot % cfg.n_latent_conditions;
                // the indication is the last lexicon word, never a negatable one
                let indication = lexicon[cond][wpc - 1];
                pairs.push((r, (drug0 + slot) as u32, indication, cond));
            }
        }
        let bg0 = cfg.background_start();
        let markers = (0..RELATION_NAMES.len())
            .map(|r| [(bg0 + 2 * r) as u32, (bg0 + 2 * r + 1) as u32])
            .collect();
        let background: Vec<u32> = ((bg0 + 2 * RELATION_NAMES.len()) as u32..cfg.vocab_size as u32).collect();
        let mut acc = 0.0;
        let background_cdf = (0..background.len())
            .map(|rank| {
                acc += 1.0 / (rank as f64 + 1.0).powf(0.8);
                acc
            })
            .collect();
        Universe { lexicon, pairs, markers, background, background_cdf }
    }

    fn background_word(&self, r: &mut ChaCha8Rng) -> u32 {
        let total = *self.background_cdf.last().expect("non-empty background");
        let u = r.random::<f64>() * total;
        let idx = self.background_cdf.partition_point(|&c| c < u);
        self.background[idx.min(self.background.len() - 1)]
    }
}

/// Generates a cohort. Pure function of `config`.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<CohortDataset> {
    config.validate()?;
    let universe = Universe::new(config);
    let names: Vec<String> = (0..config.vocab_size).map(token_name).collect();

    let mut patients: Vec<PatientRecord> = (0..config.n_patients as u32)
        .into_par_iter()
        .map(|pid| generate_patient(config, &universe, &names, pid))
        .collect();

    enforce_relation_floor(config, &universe, &names, &mut patients);

    let planted_relations = universe
        .pairs
        .iter()
        .map(|&(r, d, m, _)| PlantedRelation {
            relation: RELATION_NAMES[r].to_string(),
            drug: names[d as usize].clone(),
            indication: names[m as usize].clone(),
        })
        .collect();

    Ok(CohortDataset {
        config: config.clone(),
        patients,
        vocabulary_universe: names,
        condition_lexicon: universe.lexicon.clone(),
        planted_relations,
        bayes_info: config.outcome_weights.clone(),
    })
}

fn generate_patient(cfg: &GeneratorConfig, u: &Universe, names: &[String], pid: u32) -> PatientRecord {
    let mut r = rng::stream(cfg.seed, &[u64::from(pid)]);

    let conditions: Vec<u16> = cfg
        .condition_prevalence
        .iter()
        .enumerate()
        .filter(|(_, &p)| r.random::<f64>() < p)
        .map(|(c, _)| c as u16)
        .collect();

    let obs = cfg.observation_days;
    let fu = cfg.followup_days;
    let end = obs + fu + r.random_range(0..=365u32);
    let pred = end - fu;
    let obs_start = pred - obs;

    let mut outcomes = BTreeMap::new();
    let mut events = Vec::new();
    let mut death_day = None;
    let mut event_diagnoses = Vec::new();
    for m in &cfg.outcome_weights {
        let p = sigmoid(m.linear_predictor(&conditions));
        let hit = r.random::<f64>() < p;
        outcomes.insert(m.task.clone(), u8::from(hit));
        if hit {
            let day = if m.task == MORTALITY {
                death_day = Some(end);
                end
            } else {
                r.random_range(pred..=end)
            };
            events.push(OutcomeEvent { day, task: m.task.clone() });
            if let Some(c) = m.condition {
                event_diagnoses.push((day, c));
            }
        }
    }

    // note days: the first always lands in the observation era
    let n_notes = r.random_range(cfg.notes_per_patient_range.0..=cfg.notes_per_patient_range.1);
    let mut days = vec![r.random_range(obs_start..pred)];
    for _ in 1..n_notes {
        let u01 = r.random::<f64>();
        let day = if u01 < 0.75 || obs_start == 0 && u01 < 0.9 {
            r.random_range(obs_start..pred)
        } else if u01 < 0.9 {
            r.random_range(0..obs_start)
        } else {
            r.random_range(pred..=end)
        };
        days.push(day);
    }
    for e in &events {
        if e.task != MORTALITY {
            days.push(e.day);
        }
    }
    days.sort_unstable();

    let mut notes = Vec::with_capacity(days.len());
    let mut diagnoses = Vec::new();
    for day in days {
        let focus: Vec<usize> = {
            let mut f: Vec<usize> = conditions
                .iter()
                .map(|&c| c as usize)
                .filter(|_| r.random::<f64>() < 0.6)
                .collect();
            if f.is_empty() && !conditions.is_empty() {
                f.push(*conditions.choose(&mut r).expect("non-empty") as usize);
            }
            f
        };
        let n_words = r.random_range(cfg.words_per_note_range.0..=cfg.words_per_note_range.1);
        let mut tokens = Vec::with_capacity(n_words + 3);
        for _ in 0..n_words {
            if r.random::<f64>() < cfg.negation_rate && cfg.negatable_words > 0 {
                let c = r.random_range(0..cfg.n_latent_conditions);
                let w = u.lexicon[c][r.random_range(0..cfg.negatable_words)];
                tokens.push(Token(names[w as usize].clone(), true));
                continue;
            }
            let w = if !focus.is_empty() && r.random::<f64>() >= cfg.background_rate {
                let c = focus[r.random_range(0..focus.len())];
                u.lexicon[c][r.random_range(0..cfg.words_per_condition)]
            } else {
                u.background_word(&mut r)
            };
            tokens.push(Token(names[w as usize].clone(), false));
        }
        for &c in &focus {
            for &(rel, drug, ind, host) in &u.pairs {
                if host == c && r.random::<f64>() < cfg.relation_rate {
                    push_pair(&mut tokens, names, drug, ind, u.markers[rel][r.random_range(0..2)]);
                }
            }
            diagnoses.push((day, c as u16));
        }
        notes.push(RawNote { day, tokens });
    }
    diagnoses.extend(event_diagnoses);
    diagnoses.sort_unstable();
    diagnoses.dedup();

    PatientRecord {
        patient_id: pid,
        end_of_record: end,
        death_day,
        notes,
        diagnoses,
        outcomes,
        events,
        latent_conditions: conditions,
    }
}

fn push_pair(tokens: &mut Vec<Token>, names: &[String], drug: u32, indication: u32, marker: u32) {
    tokens.push(Token(names[indication as usize].clone(), false));
    tokens.push(Token(names[drug as usize].clone(), false));
    tokens.push(Token(names[marker as usize].clone(), false));
}

fn note_has(note: &RawNote, name: &str) -> bool {
    note.tokens.iter().any(|t| !t.1 && t.0 == name)
}

/// Count of notes containing both tokens (non-negated).
pub fn pair_cooccurrence_notes(patients: &[PatientRecord], drug: &str, indication: &str) -> usize {
    patients
        .iter()
        .flat_map(|p| &p.notes)
        .filter(|n| note_has(n, drug) && note_has(n, indication))
        .count()
}

/// Tops up planted pairs that fell short of the floor, visiting notes in
/// patient-id order and preferring notes that already mention the indication.
fn enforce_relation_floor(cfg: &GeneratorConfig, u: &Universe, names: &[String], patients: &mut [PatientRecord]) {
    for &(rel, drug, ind, _) in &u.pairs {
        let (d, m) = (&names[drug as usize], &names[ind as usize]);
        let mut have = pair_cooccurrence_notes(patients, d, m);
        for prefer_indication in [true, false] {
            for p in patients.iter_mut() {
                for note in p.notes.iter_mut() {
                    if have >= cfg.relation_floor {
                        break;
                    }
                    let has_m = note_has(note, m);
                    if has_m != prefer_indication || note_has(note, d) && has_m {
                        continue;
                    }
                    push_pair(&mut note.tokens, names, drug, ind, u.markers[rel][0]);
                    have += 1;
                }
            }
        }
    }
}

/// AUROC of the generating linear predictor against the realized labels.
pub fn bayes_auroc(dataset: &CohortDataset, task: &str) -> Result<f64> {
    let model = dataset.outcome_model(task)?;
    let mut scores = Vec::with_capacity(dataset.patients.len());
    let mut labels = Vec::with_capacity(dataset.patients.len());
    for p in &dataset.patients {
        scores.push(model.linear_predictor(&p.latent_conditions));
        labels.push(p.outcomes.get(task).copied().unwrap_or(0) == 1);
    }
    auroc(&scores, &labels)
}
