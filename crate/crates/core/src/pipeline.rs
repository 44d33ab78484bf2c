//! End-to-end experiment: cohort, preprocessing, representations and
//! learning curves. Shared by the command-line tool and the test suites.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_lda, lda_represent, lsa_represent, truncated_svd, LdaConfig, LdaModel, LsaModel, TermPatientMatrix, TfidfModel,
    TopicPooling,
};
use crate::corpus::{
    build_eras, build_vocabulary, count_notes, split_patients, BagOfWords, DataSplit, EraView, NoteScope, Vocabulary,
};
use crate::embed::{
    build_shuffled_corpus, count_cooccurrences, represent_patient, train_glove, Aggregator, EmbeddingMatrix, GloveConfig,
};
use crate::error::{Error, Result};
use crate::evalkit::curve::{learning_curve, CurveConfig, LearningCurveResult, RepresentationTable};
use crate::rng::module_seed;
use crate::seqmodel::{examples_from_eras, extract_patient_state, train_sequence_model, SequenceModelConfig};
use crate::synthgen::{generate_cohort, CohortDataset, GeneratorConfig, UTILIZATION_TASKS};

pub const METHOD_EA: &str = "ea_glove";
pub const METHOD_TFIDF: &str = "tfidf";
pub const METHOD_RNN: &str = "rnn";
pub const METHOD_WIDE_DEEP: &str = "wd_rnn_tfidf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub min_notes: u64,
    /// Upper note-frequency bound as a fraction of the notes in scope.
    pub max_note_fraction: f64,
    pub split_fractions: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { min_notes: 5, max_note_fraction: 0.5, split_fractions: [0.625, 0.125, 0.25] }
    }
}

/// Cohort plus everything derived from it before any learning.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cohort: CohortDataset,
    pub vocab: Vocabulary,
    pub eras: Vec<EraView>,
    pub split: DataSplit,
}

impl Prepared {
    pub fn eras_of<'a>(&'a self, ids: &[u32]) -> Vec<EraView> {
        let idx: BTreeMap<u32, &'a EraView> = self.eras.iter().map(|e| (e.patient_id, e)).collect();
        ids.iter().filter_map(|p| idx.get(p).map(|e| (*e).clone())).collect()
    }

    /// Task labels of the given patients.
    pub fn labels(&self, task: &str, ids: &[u32]) -> Result<BTreeMap<u32, bool>> {
        let idx: BTreeMap<u32, &EraView> = self.eras.iter().map(|e| (e.patient_id, e)).collect();
        ids.iter()
            .map(|p| {
                let y = idx
                    .get(p)
                    .and_then(|e| e.label(task))
                    .ok_or_else(|| Error::invalid(format!("patient {p} has no label for task {task}")))?;
                Ok((*p, y == 1))
            })
            .collect()
    }
}

/// Vocabulary over observation-era notes, era views and a patient split.
pub fn preprocess(cohort: CohortDataset, cfg: &PreprocessConfig, seed: u64) -> Result<Prepared> {
    let scope = NoteScope::ObservationEra {
        observation_days: cohort.config.observation_days,
        followup_days: cohort.config.followup_days,
    };
    let max_notes = (cfg.max_note_fraction * count_notes(&cohort, scope) as f64).floor() as u64;
    let vocab = build_vocabulary(&cohort, cfg.min_notes, Some(max_notes), scope)?;
    let eras = build_eras(&cohort, &vocab, cohort.config.observation_days, cohort.config.followup_days);
    let ids: Vec<u32> = eras.iter().map(|e| e.patient_id).collect();
    let split = split_patients(&ids, cfg.split_fractions, module_seed(seed, "split"))?;
    info!("vocabulary {} words, {} eras, split {}/{}/{}", vocab.len(), eras.len(), split.train.len(), split.validation.len(), split.test.len());
    Ok(Prepared { cohort, vocab, eras, split })
}

/// GloVe trained on the shuffled observation notes of `train`.
pub fn train_glove_embedding(train: &[EraView], vocab_size: usize, cfg: &GloveConfig) -> Result<EmbeddingMatrix> {
    let stream = build_shuffled_corpus(train, cfg.repetitions, cfg.seed)?;
    let table = count_cooccurrences(&stream, cfg.window, vocab_size)?;
    train_glove(&table, cfg)
}

/// Embed-and-aggregate vectors for every era. Patients with no covered
/// word get the zero vector so every patient stays in the evaluation.
pub fn ea_table(eras: &[EraView], recipe: &[Aggregator], e: &EmbeddingMatrix) -> Result<RepresentationTable> {
    let dim = recipe.len() * e.dim();
    eras.iter()
        .map(|era| {
            let v = represent_patient(era, recipe, &[e])?.map_or_else(|| vec![0.0; dim], |r| r.vector);
            Ok((era.patient_id, v))
        })
        .collect()
}

pub fn tfidf_table(model: &TfidfModel, eras: &[EraView]) -> RepresentationTable {
    eras.iter().map(|e| (e.patient_id, model.represent(e).vector)).collect()
}

/// Final hidden states; an era with no notes gets the zero vector.
pub fn rnn_table(eras: &[EraView], params: &crate::seqmodel::SequenceModelParams) -> Result<RepresentationTable> {
    let dim = params.config.state_dim();
    eras.iter()
        .map(|era| Ok((era.patient_id, extract_patient_state(era, params)?.map_or_else(|| vec![0.0; dim], |r| r.vector))))
        .collect()
}

pub fn concat_tables(a: &RepresentationTable, b: &RepresentationTable) -> Result<RepresentationTable> {
    a.iter()
        .map(|(p, va)| {
            let vb = b.get(p).ok_or_else(|| Error::invalid(format!("patient {p} missing from second table")))?;
            Ok((*p, va.iter().chain(vb).copied().collect()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub preprocess: PreprocessConfig,
    pub glove: GloveConfig,
    pub aggregators: Vec<Aggregator>,
    pub sequence: SequenceModelConfig,
    pub tfidf_cap: usize,
    pub tasks: Vec<String>,
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub prevalence: f64,
    pub methods: Vec<String>,
}

impl ExperimentConfig {
    /// Module seeds all derive from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let generator = GeneratorConfig { seed: module_seed(seed, "synthgen"), ..GeneratorConfig::default() };
        let sequence = SequenceModelConfig {
            n_labels: generator.n_latent_conditions,
            epochs: 20,
            seed: module_seed(seed, "seqmodel"),
            ..SequenceModelConfig::default()
        };
        ExperimentConfig {
            seed,
            generator,
            preprocess: PreprocessConfig::default(),
            glove: GloveConfig { dim: 16, seed: module_seed(seed, "embed"), ..GloveConfig::default() },
            aggregators: vec![Aggregator::Min, Aggregator::Mean, Aggregator::Max],
            sequence,
            tfidf_cap: 15000,
            tasks: UTILIZATION_TASKS.iter().map(|t| t.to_string()).collect(),
            sizes: crate::evalkit::curve::DEFAULT_SIZES.to_vec(),
            repeats: 20,
            prevalence: 0.2,
            methods: [METHOD_EA, METHOD_TFIDF, METHOD_WIDE_DEEP].iter().map(|m| m.to_string()).collect(),
        }
    }

    pub fn curve_config(&self) -> CurveConfig {
        CurveConfig {
            sizes: self.sizes.clone(),
            repeats: self.repeats,
            prevalence: self.prevalence,
            seed: module_seed(self.seed, "evalkit"),
            ..CurveConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub curves: LearningCurveResult,
    /// Bayes-optimal test AUROC per task from the generator's latent scores.
    pub bayes_auroc: BTreeMap<String, f64>,
    pub prepared: Prepared,
    pub glove: Option<EmbeddingMatrix>,
    /// Wall seconds per stage.
    pub timings: Vec<(String, f64)>,
}

/// Builds the requested representation tables for every era.
pub fn build_representations(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    timings: &mut Vec<(String, f64)>,
) -> Result<(BTreeMap<String, RepresentationTable>, Option<EmbeddingMatrix>)> {
    let train = prepared.eras_of(&prepared.split.train);
    let validation = prepared.eras_of(&prepared.split.validation);
    let wants = |m: &str| cfg.methods.iter().any(|x| x == m);
    let mut tables = BTreeMap::new();
    let mut glove = None;

    if wants(METHOD_EA) {
        let t = Instant::now();
        let e = train_glove_embedding(&train, prepared.vocab.len(), &cfg.glove)?;
        tables.insert(METHOD_EA.to_string(), ea_table(&prepared.eras, &cfg.aggregators, &e)?);
        glove = Some(e);
        timings.push(("glove".into(), t.elapsed().as_secs_f64()));
    }
    let tfidf = if wants(METHOD_TFIDF) || wants(METHOD_WIDE_DEEP) {
        let t = Instant::now();
        let model = TfidfModel::fit(&train, cfg.tfidf_cap)?;
        let table = tfidf_table(&model, &prepared.eras);
        timings.push(("tfidf".into(), t.elapsed().as_secs_f64()));
        Some(table)
    } else {
        None
    };
    if wants(METHOD_RNN) || wants(METHOD_WIDE_DEEP) {
        let t = Instant::now();
        let seq = SequenceModelConfig { vocab_size: prepared.vocab.len(), ..cfg.sequence.clone() };
        let (params, _) = train_sequence_model(
            &examples_from_eras(&train, &seq),
            &examples_from_eras(&validation, &seq),
            &seq,
            None,
        )?;
        let rnn = rnn_table(&prepared.eras, &params)?;
        timings.push(("rnn".into(), t.elapsed().as_secs_f64()));
        if wants(METHOD_WIDE_DEEP) {
            tables.insert(METHOD_WIDE_DEEP.to_string(), concat_tables(&rnn, tfidf.as_ref().unwrap())?);
        }
        if wants(METHOD_RNN) {
            tables.insert(METHOD_RNN.to_string(), rnn);
        }
    }
    if let Some(table) = tfidf.filter(|_| wants(METHOD_TFIDF)) {
        tables.insert(METHOD_TFIDF.to_string(), table);
    }
    Ok((tables, glove))
}

/// Learning curves of every method on every task over the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut timings = Vec::new();
    let t = Instant::now();
    let cohort = generate_cohort(&cfg.generator)?;
    let prepared = preprocess(cohort, &cfg.preprocess, cfg.seed)?;
    timings.push(("prepare".into(), t.elapsed().as_secs_f64()));

    let (tables, glove) = build_representations(&prepared, cfg, &mut timings)?;
    let t = Instant::now();
    let mut curves = LearningCurveResult::default();
    let mut bayes = BTreeMap::new();
    let curve_cfg = cfg.curve_config();
    for task in &cfg.tasks {
        let train = prepared.labels(task, &prepared.split.train)?;
        let test = prepared.labels(task, &prepared.split.test)?;
        curves.merge(learning_curve(&tables, task, &train, &test, &curve_cfg)?);
        bayes.insert(task.clone(), test_bayes_auroc(&prepared, task)?);
    }
    timings.push(("curves".into(), t.elapsed().as_secs_f64()));
    Ok(ExperimentOutput { curves, bayes_auroc: bayes, prepared, glove, timings })
}

/// AUROC of the generator's latent score on the test split, the ceiling any
/// representation can reach on that task.
pub fn test_bayes_auroc(prepared: &Prepared, task: &str) -> Result<f64> {
    let scores = prepared.cohort.latent_scores(task)?;
    let labels = prepared.labels(task, &prepared.split.test)?;
    let s: Vec<f64> = labels.keys().map(|p| scores[p]).collect();
    let y: Vec<bool> = labels.values().copied().collect();
    crate::evalkit::metrics::auroc(&s, &y)
}

/// LSA on the summed training bags, `k` capped by the matrix shape.
pub fn fit_lsa(train: &[EraView], vocab_cap: usize, k: usize, seed: u64) -> Result<LsaModel> {
    let matrix = TermPatientMatrix::from_eras(train, vocab_cap)?;
    let k = k.min(matrix.word_ids.len()).min(matrix.patient_ids.len());
    let mut model = truncated_svd(&matrix, k, seed)?;
    model.word_ids = matrix.word_ids;
    Ok(model)
}

pub fn lsa_table(model: &LsaModel, eras: &[EraView]) -> RepresentationTable {
    eras.iter().map(|e| (e.patient_id, lsa_represent(model, e.patient_id, &e.patient_bag()).vector)).collect()
}

/// LDA over the individual training notes.
pub fn fit_lda_notes(train: &[EraView], vocab_size: usize, cfg: &LdaConfig) -> Result<LdaModel> {
    let notes: Vec<BagOfWords> = train.iter().flat_map(|e| e.notes.iter().map(|n| n.bag.clone())).collect();
    fit_lda(&notes, vocab_size, cfg)
}

pub fn lda_table(model: &LdaModel, eras: &[EraView], pooling: TopicPooling) -> RepresentationTable {
    eras.par_iter().map(|e| (e.patient_id, lda_represent(model, e, pooling).vector)).collect()
}

/// CSV `patient_id,x0,...,x{d-1}`.
pub fn write_table_csv<W: Write>(table: &RepresentationTable, mut out: W) -> Result<()> {
    let dim = table.values().next().map_or(0, Vec::len);
    let header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    writeln!(out, "patient_id{}{}", if dim > 0 { "," } else { "" }, header.join(","))?;
    for (p, v) in table {
        let cells: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{p}{}{}", if dim > 0 { "," } else { "" }, cells.join(","))?;
    }
    Ok(())
}

pub fn read_table_csv<R: BufRead>(input: R) -> Result<RepresentationTable> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty representation file".into() })??;
    let dim = header.split(',').count() - 1;
    let mut table = RepresentationTable::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: k + 2, msg };
        let mut fields = line.split(',');
        let p: u32 = fields.next().unwrap_or("").parse().map_err(|_| bad("bad patient id".into()))?;
        let v: Vec<f64> = fields.map(|f| f.parse().map_err(|_| bad(format!("bad number {f:?}")))).collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(bad(format!("expected {dim} values, found {}", v.len())));
        }
        if table.insert(p, v).is_some() {
            return Err(bad(format!("duplicate patient {p}")));
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_csv_round_trips() {
        let t = RepresentationTable::from([(3, vec![0.1, -2.5e-7]), (10, vec![1.0 / 3.0, 4.0])]);
        let mut buf = Vec::new();
        write_table_csv(&t, &mut buf).unwrap();
        assert_eq!(read_table_csv(buf.as_slice()).unwrap(), t);
        assert!(matches!(read_table_csv("patient_id,x0\n1,2,3\n".as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn concat_keeps_order_and_requires_both() {
        let a = RepresentationTable::from([(1, vec![1.0]), (2, vec![2.0])]);
        let b = RepresentationTable::from([(1, vec![9.0]), (2, vec![8.0, 7.0])]);
        assert_eq!(concat_tables(&a, &b).unwrap()[&2], vec![2.0, 8.0, 7.0]);
        assert!(concat_tables(&a, &RepresentationTable::from([(1, vec![0.0])])).is_err());
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let mut cfg = ExperimentConfig::with_seed(3);
        cfg.generator.n_patients = 400;
        cfg.glove.dim = 8;
        cfg.glove.iterations = 3;
        cfg.sequence.embed_dim = 8;
        cfg.sequence.hidden_dim = 8;
        cfg.sequence.epochs = 1;
        cfg.sizes = vec![50, 100];
        cfg.repeats = 2;
        cfg.tasks = vec!["mortality".into()];
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.curves.records.len(), 3 * 2 * 2);
        assert!(a.curves.records.iter().all(|r| r.auroc.is_some_and(|x| (0.0..=1.0).contains(&x))));
    }
}
