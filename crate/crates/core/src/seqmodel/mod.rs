//! Supervised sequence model over daily note bags: a max-pooled embedding
//! layer, a GRU or LSTM recurrence and a multi-label sigmoid head. The flat
//! variant skips the recurrence and is trained on single notes.

mod checkpoint;
mod net;

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{merge_same_day, BagOfWords, EraView};
use crate::embed::{EmbeddingMatrix, EmbeddingSource, PatientRepresentation};
use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use net::{multitask_loss, Forward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
    /// No recurrence: the state is the pooled input itself.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    FinalStep,
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputEncoding {
    Binary,
    Counts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModelConfig {
    pub cell: CellKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_labels: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub supervision: Supervision,
    pub init: InitKind,
    pub input_encoding: InputEncoding,
    pub seed: u64,
}

impl Default for SequenceModelConfig {
    fn default() -> Self {
        SequenceModelConfig {
            cell: CellKind::Gru,
            vocab_size: 0,
            embed_dim: 64,
            hidden_dim: 64,
            n_labels: 24,
            dropout: 0.2,
            epochs: 100,
            batch_size: 32,
            max_seq_len: 50,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            supervision: Supervision::FinalStep,
            init: InitKind::Random,
            input_encoding: InputEncoding::Binary,
            seed: 7,
        }
    }
}

impl SequenceModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.n_labels == 0 {
            return Err(Error::config("vocabulary, embedding, hidden and label sizes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.max_seq_len == 0 || self.batch_size == 0 {
            return Err(Error::config("max_seq_len and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::config("invalid optimizer constants"));
        }
        Ok(())
    }

    /// Width of the recurrent state, which is the representation size.
    pub fn state_dim(&self) -> usize {
        match self.cell {
            CellKind::Flat => self.embed_dim,
            _ => self.hidden_dim,
        }
    }

    fn gates(&self) -> usize {
        match self.cell {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
            CellKind::Flat => 0,
        }
    }

    fn gate_names(&self) -> &'static [&'static str] {
        match self.cell {
            CellKind::Gru => &["z", "r", "h"],
            CellKind::Lstm => &["i", "f", "o", "g"],
            CellKind::Flat => &[],
        }
    }
}

/// A named row-major matrix (vectors have one column).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Tensor { name: name.to_string(), rows, cols, data: vec![0.0; rows * cols] }
    }

    fn glorot(name: &str, rows: usize, cols: usize, r: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| r.random_range(-limit..limit)).collect();
        Tensor { name: name.to_string(), rows, cols, data }
    }
}

/// All weights in a fixed order: `L`, then per gate `W_*`, `U_*`, `b_*`,
/// then the output layer `W_out`, `b_out`. Optimizer state mirrors them.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModelParams {
    pub config: SequenceModelConfig,
    pub tensors: Vec<Tensor>,
    pub accumulators: Vec<Vec<f64>>,
}

impl SequenceModelParams {
    /// Random initialization; `pretrained` seeds the covered rows of `L`.
    pub fn init(config: &SequenceModelConfig, pretrained: Option<&EmbeddingMatrix>) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[0x1417]);
        let (v, d, h, k) = (config.vocab_size, config.embed_dim, config.hidden_dim, config.n_labels);
        let mut l = Tensor::zeros("L", v, d);
        l.data.iter_mut().for_each(|x| *x = r.random_range(-0.05..0.05));
        match (config.init, pretrained) {
            (InitKind::Pretrained, Some(e)) => {
                if e.vocab_size() != v || e.dim() != d {
                    return Err(Error::config("pretrained embedding shape does not match the model"));
                }
                for id in 0..v {
                    if let Some(row) = e.row(id as u32) {
                        l.data[id * d..(id + 1) * d].copy_from_slice(row);
                    }
                }
            }
            (InitKind::Pretrained, None) => {
                return Err(Error::config("pretrained initialization needs an embedding"));
            }
            (InitKind::Random, _) => {}
        }
        let mut tensors = vec![l];
        for g in config.gate_names() {
            tensors.push(Tensor::glorot(&format!("W_{g}"), h, d, &mut r));
            tensors.push(Tensor::glorot(&format!("U_{g}"), h, h, &mut r));
            tensors.push(Tensor::zeros(&format!("b_{g}"), h, 1));
        }
        tensors.push(Tensor::glorot("W_out", config.state_dim(), k, &mut r));
        tensors.push(Tensor::zeros("b_out", k, 1));
        debug_assert_eq!(tensors.len(), 3 + 3 * config.gates());
        let accumulators = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Ok(SequenceModelParams { config: config.clone(), tensors, accumulators })
    }

    pub(crate) fn output_layer(&self) -> (&Tensor, &Tensor) {
        let n = self.tensors.len();
        (&self.tensors[n - 2], &self.tensors[n - 1])
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zero_gradients(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor { data: vec![0.0; t.data.len()], ..t.clone() }).collect()
    }

    /// The embedding layer `L` as word vectors.
    pub fn embedding_matrix(&self, source: EmbeddingSource) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(source, self.config.embed_dim, self.tensors[0].data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// One training or inference sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub patient_id: u32,
    pub steps: Vec<BagOfWords>,
    /// Labels of each step, used by per-step supervision.
    pub step_labels: Vec<Vec<u16>>,
    /// Labels of the whole sequence, used by final-step supervision.
    pub labels: Vec<u16>,
}

impl SequenceExample {
    fn targets(&self, cfg: &SequenceModelConfig) -> Result<Vec<Vec<f64>>> {
        let hot = |labels: &[u16]| -> Result<Vec<f64>> {
            let mut v = vec![0.0; cfg.n_labels];
            for &l in labels {
                *v.get_mut(l as usize).ok_or_else(|| Error::invalid(format!("label {l} outside {}", cfg.n_labels)))? =
                    1.0;
            }
            Ok(v)
        };
        match cfg.supervision {
            Supervision::FinalStep => Ok(vec![hot(&self.labels)?]),
            Supervision::PerStep => {
                if self.step_labels.len() != self.steps.len() {
                    return Err(Error::invalid("per-step labels do not match the sequence length"));
                }
                self.step_labels.iter().map(|l| hot(l)).collect()
            }
        }
    }
}

/// Merges same-day notes, keeps the most recent `max_seq_len` days and
/// encodes bags per the input encoding.
pub fn example_from_era(era: &EraView, cfg: &SequenceModelConfig) -> SequenceExample {
    let merged = merge_same_day(era);
    let skip = merged.notes.len().saturating_sub(cfg.max_seq_len);
    let notes = &merged.notes[skip..];
    let encode = |b: &BagOfWords| match cfg.input_encoding {
        InputEncoding::Binary => b.binarized(),
        InputEncoding::Counts => b.clone(),
    };
    SequenceExample {
        patient_id: era.patient_id,
        steps: notes.iter().map(|n| encode(&n.bag)).collect(),
        step_labels: notes.iter().map(|n| n.ccs.clone()).collect(),
        labels: era.ccs_labels.clone(),
    }
}

pub fn examples_from_eras(eras: &[EraView], cfg: &SequenceModelConfig) -> Vec<SequenceExample> {
    eras.iter().map(|e| example_from_era(e, cfg)).filter(|e| !e.steps.is_empty()).collect()
}

/// Element-wise max of the embedding rows of the words in `x`, with an
/// optional multiplicative dropout mask.
pub fn pooled_embed(x: &BagOfWords, l: &Tensor, mask: Option<&[f64]>) -> Result<Vec<f64>> {
    let (mut v, _) = net::pool_with_argmax(x, l)?;
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
    }
    Ok(v)
}

fn draw_masks(cfg: &SequenceModelConfig, ex: &SequenceExample, r: &mut impl Rng) -> net::Masks {
    let keep = 1.0 - cfg.dropout;
    let mut mask = |n: usize| -> Vec<f64> {
        (0..n).map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
    };
    let input = ex.steps.iter().map(|_| mask(cfg.embed_dim)).collect();
    let heads = match cfg.supervision {
        Supervision::FinalStep => 1,
        Supervision::PerStep => ex.steps.len(),
    };
    let output = (0..heads).map(|_| mask(cfg.state_dim())).collect();
    net::Masks { input, output }
}

/// Runs the network. `Mode::Train` draws dropout masks from `dropout_rng`;
/// `Mode::Infer` never applies dropout.
pub fn rnn_forward(
    ex: &SequenceExample,
    params: &SequenceModelParams,
    mode: Mode,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Forward> {
    let masks = match (mode, dropout_rng) {
        (Mode::Train, Some(r)) if params.config.dropout > 0.0 => Some(draw_masks(&params.config, ex, r)),
        _ => None,
    };
    net::forward(params, ex, masks.as_ref())
}

/// Mean loss of the batch and its exact gradient (no dropout).
pub fn loss_and_gradients(params: &SequenceModelParams, batch: &[SequenceExample]) -> Result<(f64, Vec<Tensor>)> {
    batch_gradients(params, batch, None)
}

fn batch_gradients(
    params: &SequenceModelParams,
    batch: &[SequenceExample],
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = params.zero_gradients();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let masks = match dropout_rng.as_deref_mut() {
            Some(r) if params.config.dropout > 0.0 => Some(draw_masks(&params.config, ex, r)),
            _ => None,
        };
        let targets = ex.targets(&params.config)?;
        let fwd = net::forward(params, ex, masks.as_ref())?;
        loss += net::example_loss(&fwd, &targets) * scale;
        net::backward(params, &fwd, &targets, masks.as_ref(), scale, &mut grads);
    }
    Ok((loss, grads))
}

/// Mean inference-mode loss over a set of examples.
pub fn evaluate_loss(params: &SequenceModelParams, examples: &[SequenceExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let fwd = net::forward(params, ex, None)?;
        total += net::example_loss(&fwd, &ex.targets(&params.config)?);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// RMSProp step on every parameter.
pub fn rmsprop_update(params: &mut SequenceModelParams, grads: &[Tensor]) {
    let (rho, eta, eps) = (params.config.rmsprop_decay, params.config.learning_rate, params.config.rmsprop_eps);
    for ((t, acc), g) in params.tensors.iter_mut().zip(params.accumulators.iter_mut()).zip(grads) {
        for ((w, a), &gi) in t.data.iter_mut().zip(acc.iter_mut()).zip(&g.data) {
            *a = rho * *a + (1.0 - rho) * gi * gi;
            *w -= eta * gi / (*a + eps).sqrt();
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub wall_seconds: f64,
}

/// Trains from fresh parameters. `pretrained` is used when the config asks
/// for pretrained initialization.
pub fn train_sequence_model(
    train: &[SequenceExample],
    validation: &[SequenceExample],
    config: &SequenceModelConfig,
    pretrained: Option<&EmbeddingMatrix>,
) -> Result<(SequenceModelParams, TrainTrace)> {
    let params = SequenceModelParams::init(config, pretrained)?;
    continue_training(params, train, validation)
}

/// Runs `config.epochs` epochs of seeded mini-batch RMSProp.
pub fn continue_training(
    mut params: SequenceModelParams,
    train: &[SequenceExample],
    validation: &[SequenceExample],
) -> Result<(SequenceModelParams, TrainTrace)> {
    let cfg = params.config.clone();
    if train.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reference: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[0xba7c, epoch as u64]));
        let mut dropout = rng::stream(cfg.seed, &[0xd0, epoch as u64]);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SequenceExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = batch_gradients(&params, &batch, Some(&mut dropout))?;
            let reference = *reference.get_or_insert(loss);
            if !loss.is_finite() || loss > 1e3 * reference {
                return Err(Error::numeric(format!("training diverged at epoch {epoch} (batch loss {loss})")));
            }
            total += loss * batch.len() as f64;
            rmsprop_update(&mut params, &grads);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if validation.is_empty() { f64::NAN } else { evaluate_loss(&params, validation)? };
        info!("epoch {epoch}: train loss {train_loss:.5}, validation loss {val_loss:.5}");
        trace.train_loss.push(train_loss);
        trace.validation_loss.push(val_loss);
    }
    if !params.is_finite() {
        return Err(Error::numeric("parameters became non-finite"));
    }
    trace.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, trace))
}

/// Inference-mode final hidden state; `None` for an empty sequence.
pub fn extract_patient_state(era: &EraView, params: &SequenceModelParams) -> Result<Option<PatientRepresentation>> {
    let ex = example_from_era(era, &params.config);
    if ex.steps.is_empty() {
        return Ok(None);
    }
    let fwd = net::forward(params, &ex, None)?;
    Ok(Some(PatientRepresentation {
        patient_id: era.patient_id,
        vector: fwd.hidden.last().cloned().unwrap_or_default(),
        method: format!("rnn-{}", params.config.state_dim()),
    }))
}

/// A note and its same-day condition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledNote {
    pub patient_id: u32,
    pub bag: BagOfWords,
    pub labels: Vec<u16>,
}

/// Every observation note with its same-day diagnoses.
pub fn labeled_notes(eras: &[EraView]) -> Vec<LabeledNote> {
    eras.iter()
        .flat_map(|e| {
            e.notes.iter().map(move |n| LabeledNote { patient_id: e.patient_id, bag: n.bag.clone(), labels: n.ccs.clone() })
        })
        .collect()
}

/// One-step sequences for the flat model.
pub fn flat_examples(notes: &[LabeledNote], cfg: &SequenceModelConfig) -> Vec<SequenceExample> {
    notes
        .iter()
        .filter(|n| !n.bag.is_empty())
        .map(|n| {
            let bag = match cfg.input_encoding {
                InputEncoding::Binary => n.bag.binarized(),
                InputEncoding::Counts => n.bag.clone(),
            };
            SequenceExample {
                patient_id: n.patient_id,
                steps: vec![bag],
                step_labels: vec![n.labels.clone()],
                labels: n.labels.clone(),
            }
        })
        .collect()
}

/// Trains the flat model on single notes and returns its embedding layer.
pub fn train_flat_model(
    notes: &[LabeledNote],
    config: &SequenceModelConfig,
) -> Result<(SequenceModelParams, EmbeddingMatrix, TrainTrace)> {
    let cfg = SequenceModelConfig { cell: CellKind::Flat, supervision: Supervision::FinalStep, ..config.clone() };
    let examples = flat_examples(notes, &cfg);
    let (params, trace) = train_sequence_model(&examples, &[], &cfg, None)?;
    let e = params.embedding_matrix(EmbeddingSource::Flat)?;
    Ok((params, e, trace))
}

#[cfg(test)]
mod tests;
