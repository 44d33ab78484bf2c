//! One method per subcommand; each reads its inputs from the work directory
//! and writes its artifacts back there.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use patrep::baselines::{read_lda, read_lsa, write_lda, write_lsa, TfidfModel};
use patrep::corpus::{read_eras_jsonl, write_eras_jsonl, DataSplit, EraView, Vocabulary};
use patrep::embed::{export_embeddings, pool_notes, pool_words, read_embeddings, EmbeddingMatrix, EmbeddingSource};
use patrep::evalkit::ridge::{LambdaPath, RidgeConfig};
use patrep::evalkit::{
    knn_note_eval, learning_curve, relatedness_score, synthetic_note_eval, write_relatedness_csv, CurveConfig, KnnConfig,
    LearningCurveResult, RelationSet,
};
use patrep::pipeline::{
    concat_tables, ea_table, fit_lda_notes, fit_lsa, lda_table, lsa_table, preprocess, read_table_csv, rnn_table,
    tfidf_table, train_glove_embedding, write_table_csv,
};
use patrep::seqmodel::{
    examples_from_eras, labeled_notes, read_checkpoint, train_flat_model, train_sequence_model, write_checkpoint,
    CellKind, SequenceModelConfig, TrainTrace,
};
use patrep::synthgen::{generate_cohort, read_relations_tsv, CohortDataset};

use crate::config::RunConfig;
use crate::report;
use crate::CliError;

pub const COHORT: &str = "cohort.jsonl";
pub const RELATIONS: &str = "relations.tsv";
pub const VOCAB: &str = "vocab.tsv";
pub const ERAS: &str = "eras.jsonl";
pub const SPLIT: &str = "split.tsv";
pub const GLOVE: &str = "glove.txt";
pub const RNN_CKPT: &str = "rnn.ckpt";
pub const RNN_EMB: &str = "rnn_embeddings.txt";
pub const FLAT_CKPT: &str = "flat.ckpt";
pub const FLAT_EMB: &str = "flat_embeddings.txt";
pub const TFIDF: &str = "tfidf.json";
pub const LSA: &str = "lsa.txt";
pub const LDA: &str = "lda.txt";
pub const REPS: &str = "reps";
pub const RESULTS: &str = "results";
pub const CURVES: &str = "curves.csv";
pub const SUMMARY: &str = "curves_summary.csv";

pub struct Context {
    cfg: RunConfig,
}

type Res = Result<(), CliError>;

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.workdir)?;
        Ok(Context { cfg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.workdir.join(name)
    }

    fn open(&self, name: &str) -> Result<BufReader<File>, CliError> {
        open_path(&self.path(name))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(File::create(path)?))
    }

    fn cohort(&self) -> Result<CohortDataset, CliError> {
        Ok(CohortDataset::read_jsonl(self.open(COHORT)?)?)
    }

    fn vocab(&self) -> Result<Vocabulary, CliError> {
        Ok(Vocabulary::read_tsv(self.open(VOCAB)?)?)
    }

    fn eras(&self) -> Result<Vec<EraView>, CliError> {
        Ok(read_eras_jsonl(self.open(ERAS)?)?)
    }

    fn split(&self) -> Result<DataSplit, CliError> {
        Ok(DataSplit::read_tsv(self.open(SPLIT)?)?)
    }

    fn subset(eras: &[EraView], ids: &[u32]) -> Vec<EraView> {
        let wanted: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
        eras.iter().filter(|e| wanted.contains(&e.patient_id)).cloned().collect()
    }

    fn embedding(&self, which: &str, vocab: &Vocabulary) -> Result<EmbeddingMatrix, CliError> {
        let path = match which {
            "glove" => self.path(GLOVE),
            "flat" => self.path(FLAT_EMB),
            "rnn" => self.path(RNN_EMB),
            other => PathBuf::from(other),
        };
        Ok(read_embeddings(open_path(&path)?, vocab)?)
    }

    fn sequence_config(&self, vocab: &Vocabulary, eras: &[EraView]) -> Result<SequenceModelConfig, CliError> {
        let n_labels = self.cfg.generator.n_latent_conditions;
        if let Some(max) = eras.iter().flat_map(|e| e.ccs_labels.iter()).max() {
            if usize::from(*max) >= n_labels {
                return Err(CliError::Usage(format!(
                    "eras carry condition label {max} but generator.n_latent_conditions is {n_labels}"
                )));
            }
        }
        Ok(SequenceModelConfig { vocab_size: vocab.len(), n_labels, ..self.cfg.rnn.clone() })
    }

    pub fn generate(&self) -> Res {
        let cohort = generate_cohort(&self.cfg.generator)?;
        let mut out = self.create(COHORT)?;
        cohort.write_jsonl(&mut out)?;
        out.flush()?;
        let mut rel = self.create(RELATIONS)?;
        cohort.write_relations_tsv(&mut rel)?;
        rel.flush()?;
        println!("wrote {} patients to {}", cohort.patients.len(), self.path(COHORT).display());
        Ok(())
    }

    pub fn preprocess(&self) -> Res {
        let prepared = preprocess(self.cohort()?, &self.cfg.preprocess, self.cfg.seed)?;
        let mut v = self.create(VOCAB)?;
        prepared.vocab.write_tsv(&mut v)?;
        v.flush()?;
        let mut e = self.create(ERAS)?;
        write_eras_jsonl(&prepared.eras, &mut e)?;
        e.flush()?;
        let mut s = self.create(SPLIT)?;
        prepared.split.write_tsv(&mut s)?;
        s.flush()?;
        println!(
            "vocabulary {} words; {} eras; split {}/{}/{}",
            prepared.vocab.len(),
            prepared.eras.len(),
            prepared.split.train.len(),
            prepared.split.validation.len(),
            prepared.split.test.len()
        );
        Ok(())
    }

    pub fn train_glove(&self) -> Res {
        let (vocab, eras, split) = (self.vocab()?, self.eras()?, self.split()?);
        let train = Self::subset(&eras, &split.train);
        let e = train_glove_embedding(&train, vocab.len(), &self.cfg.glove)?;
        let mut out = self.create(GLOVE)?;
        export_embeddings(&e, &vocab, &mut out)?;
        out.flush()?;
        println!("GloVe: {} of {} words covered, dim {}", e.coverage_count(), vocab.len(), e.dim());
        Ok(())
    }

    fn write_trace(&self, name: &str, trace: &TrainTrace) -> Res {
        let mut out = self.create(name)?;
        writeln!(out, "epoch,train_loss,validation_loss")?;
        for (k, (t, v)) in trace.train_loss.iter().zip(&trace.validation_loss).enumerate() {
            writeln!(out, "{k},{t},{v}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn train_rnn(&self) -> Res {
        let (vocab, eras, split) = (self.vocab()?, self.eras()?, self.split()?);
        let cfg = self.sequence_config(&vocab, &eras)?;
        let train = examples_from_eras(&Self::subset(&eras, &split.train), &cfg);
        let val = examples_from_eras(&Self::subset(&eras, &split.validation), &cfg);
        let (params, trace) = train_sequence_model(&train, &val, &cfg, None)?;
        let mut out = self.create(RNN_CKPT)?;
        write_checkpoint(&params, &mut out)?;
        out.flush()?;
        let mut emb = self.create(RNN_EMB)?;
        export_embeddings(&params.embedding_matrix(EmbeddingSource::Rnn)?, &vocab, &mut emb)?;
        emb.flush()?;
        self.write_trace("rnn_trace.csv", &trace)?;
        println!("trained {:?} for {} epochs in {:.1}s", cfg.cell, cfg.epochs, trace.wall_seconds);
        Ok(())
    }

    pub fn train_flat(&self) -> Res {
        let (vocab, eras, split) = (self.vocab()?, self.eras()?, self.split()?);
        let cfg = SequenceModelConfig { cell: CellKind::Flat, ..self.sequence_config(&vocab, &eras)? };
        let notes = labeled_notes(&Self::subset(&eras, &split.train));
        let (params, e, trace) = train_flat_model(&notes, &cfg)?;
        let mut out = self.create(FLAT_CKPT)?;
        write_checkpoint(&params, &mut out)?;
        out.flush()?;
        let mut emb = self.create(FLAT_EMB)?;
        export_embeddings(&e, &vocab, &mut emb)?;
        emb.flush()?;
        self.write_trace("flat_trace.csv", &trace)?;
        println!("trained flat model on {} notes", notes.len());
        Ok(())
    }

    pub fn fit_baseline(&self, kind: &str) -> Res {
        let (vocab, eras, split) = (self.vocab()?, self.eras()?, self.split()?);
        let train = Self::subset(&eras, &split.train);
        let b = &self.cfg.baselines;
        match kind {
            "tfidf" => {
                let model = TfidfModel::fit(&train, b.tfidf_cap)?;
                let mut out = self.create(TFIDF)?;
                serde_json::to_writer(&mut out, &model).map_err(patrep::Error::from)?;
                out.flush()?;
                println!("TF-IDF over {} words", model.dim());
            }
            "lsa" => {
                let model = fit_lsa(&train, b.tfidf_cap, b.lsa_dim, b.lsa_seed)?;
                let mut out = self.create(LSA)?;
                write_lsa(&model, &mut out)?;
                out.flush()?;
                println!("LSA with K = {} (relative residual {:.4})", model.k(), model.relative_residual);
            }
            "lda" => {
                let model = fit_lda_notes(&train, vocab.len(), &b.lda)?;
                let mut out = self.create(LDA)?;
                write_lda(&model, &mut out)?;
                out.flush()?;
                println!("LDA with {} topics", model.topics);
            }
            other => return Err(CliError::Usage(format!("unknown baseline {other:?}"))),
        }
        Ok(())
    }

    fn tfidf_model(&self) -> Result<TfidfModel, CliError> {
        serde_json::from_reader(self.open(TFIDF)?).map_err(|e| CliError::Core(e.into()))
    }

    pub fn represent(&self, method: &str, embedding: &str, parts: &[String]) -> Res {
        let eras = self.eras()?;
        let (name, table) = match method {
            "ea" => {
                let vocab = self.vocab()?;
                let e = self.embedding(embedding, &vocab)?;
                let tag = Path::new(embedding).file_stem().and_then(|s| s.to_str()).unwrap_or(embedding);
                (format!("ea_{tag}"), ea_table(&eras, &self.cfg.represent.aggregators, &e)?)
            }
            "tfidf" => ("tfidf".to_string(), tfidf_table(&self.tfidf_model()?, &eras)),
            "lsa" => ("lsa".to_string(), lsa_table(&read_lsa(self.open(LSA)?)?, &eras)),
            "lda" => ("lda".to_string(), lda_table(&read_lda(self.open(LDA)?)?, &eras, self.cfg.represent.lda_pooling)),
            "rnn" => ("rnn".to_string(), rnn_table(&eras, &read_checkpoint(self.open(RNN_CKPT)?)?)?),
            "wd" => {
                if parts.len() < 2 {
                    return Err(CliError::Usage("wd needs at least two --parts".into()));
                }
                let mut table = self.table(&parts[0])?;
                for p in &parts[1..] {
                    table = concat_tables(&table, &self.table(p)?)?;
                }
                (format!("wd_{}", parts.join("_")), table)
            }
            other => return Err(CliError::Usage(format!("unknown representation method {other:?}"))),
        };
        let file = format!("{REPS}/{name}.csv");
        let mut out = self.create(&file)?;
        write_table_csv(&table, &mut out)?;
        out.flush()?;
        println!("wrote {} vectors to {}", table.len(), self.path(&file).display());
        Ok(())
    }

    fn table(&self, name: &str) -> Result<patrep::evalkit::RepresentationTable, CliError> {
        Ok(read_table_csv(self.open(&format!("{REPS}/{name}.csv"))?)?)
    }

    pub fn eval_curves(&self, methods: &[String]) -> Res {
        let (eras, split) = (self.eras()?, self.split()?);
        let mut tables = BTreeMap::new();
        for m in methods {
            tables.insert(m.clone(), self.table(m)?);
        }
        let c = &self.cfg.curves;
        let curve = CurveConfig {
            sizes: c.sizes.clone(),
            repeats: c.repeats,
            prevalence: c.prevalence,
            ridge: RidgeConfig {
                lambda_path: LambdaPath::Auto { n: c.lambda_count, decades: c.lambda_decades },
                folds: c.folds,
                ..RidgeConfig::default()
            },
            seed: c.seed,
        };
        let labels = |task: &str, ids: &[u32]| -> Result<BTreeMap<u32, bool>, CliError> {
            let by_id: BTreeMap<u32, &EraView> = eras.iter().map(|e| (e.patient_id, e)).collect();
            ids.iter()
                .filter_map(|p| by_id.get(p))
                .map(|e| {
                    e.label(task)
                        .map(|y| (e.patient_id, y == 1))
                        .ok_or_else(|| CliError::Usage(format!("unknown task {task:?}")))
                })
                .collect()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(c.workers)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", c.workers)))?;
        let mut result = LearningCurveResult::default();
        for task in &c.tasks {
            let (train, test) = (labels(task, &split.train)?, labels(task, &split.test)?);
            result.merge(pool.install(|| learning_curve(&tables, task, &train, &test, &curve))?);
        }
        let mut out = self.create(&format!("{RESULTS}/{CURVES}"))?;
        result.write_records_csv(&mut out)?;
        out.flush()?;
        let mut out = self.create(&format!("{RESULTS}/{SUMMARY}"))?;
        result.write_summary_csv(&mut out)?;
        out.flush()?;
        let missing = result.records.iter().filter(|r| r.auroc.is_none()).count();
        println!("{} cells ({missing} failed)", result.records.len());
        Ok(())
    }

    pub fn eval_intrinsic(&self, embedding: &str) -> Res {
        let vocab = self.vocab()?;
        let e = self.embedding(embedding, &vocab)?;
        let relations = RelationSet::resolve(&read_relations_tsv(self.open(RELATIONS)?)?, &vocab);
        let scores = relatedness_score(&e, &relations, self.cfg.intrinsic.top_k);
        let tag = Path::new(embedding).file_stem().and_then(|s| s.to_str()).unwrap_or(embedding);
        let mut out = self.create(&format!("{RESULTS}/relatedness_{tag}.csv"))?;
        write_relatedness_csv(&scores, &mut out)?;
        out.flush()?;
        for (name, r) in &scores {
            println!("{name}: {}/{} = {:.4}", r.successes, r.queries, r.ratio);
        }
        Ok(())
    }

    pub fn eval_notes(&self, method: &str, embedding: &str) -> Res {
        let (cohort, vocab, split) = (self.cohort()?, self.vocab()?, self.split()?);
        let n = &self.cfg.notes;
        let set = synthetic_note_eval(&cohort, &vocab, &split.train, &split.test, n.targets, n.max_notes, n.seed)?;
        let knn = KnnConfig { k_candidates: n.k_candidates.clone(), folds: n.folds, seed: n.seed };
        let (tag, report) = match method {
            "ea" => {
                let e = self.embedding(embedding, &vocab)?;
                let recipe = self.cfg.represent.aggregators.clone();
                let represent = |bag: &patrep::corpus::BagOfWords| {
                    let mut v = Vec::new();
                    for &a in &recipe {
                        v.extend(pool_notes(&[pool_words(bag, &e, a)?], a).ok()?);
                    }
                    Some(v)
                };
                let tag = Path::new(embedding).file_stem().and_then(|s| s.to_str()).unwrap_or(embedding);
                (format!("ea_{tag}"), knn_note_eval(&set, represent, &knn)?)
            }
            "tfidf" => {
                let model = self.tfidf_model()?;
                ("tfidf".to_string(), knn_note_eval(&set, |bag| Some(model.transform(bag)), &knn)?)
            }
            other => return Err(CliError::Usage(format!("unknown note representation {other:?}"))),
        };
        let mut out = self.create(&format!("{RESULTS}/notes_{tag}.csv"))?;
        report.write_csv(&mut out)?;
        out.flush()?;
        println!("mean micro-F1 over {} targets: {:.4}", report.targets.len(), report.mean_micro_f1);
        Ok(())
    }

    pub fn report(&self) -> Res {
        let summary = LearningCurveResult::read_records_csv(self.open(&format!("{RESULTS}/{CURVES}"))?)?.summary();
        let text = report::tables(&summary);
        let mut out = self.create(&format!("{RESULTS}/report.txt"))?;
        out.write_all(text.as_bytes())?;
        out.flush()?;
        let mut svg = self.create(&format!("{RESULTS}/curves.svg"))?;
        svg.write_all(report::svg(&summary).as_bytes())?;
        svg.flush()?;
        print!("{text}");
        Ok(())
    }
}

fn open_path(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|_| CliError::Missing(path.to_path_buf()))
}
