use super::*;
use crate::corpus::DatedBag;
use rand::SeedableRng;
use std::collections::BTreeMap;

fn tiny_config(cell: CellKind, supervision: Supervision) -> SequenceModelConfig {
    SequenceModelConfig {
        cell,
        vocab_size: 30,
        embed_dim: 8,
        hidden_dim: 6,
        n_labels: 5,
        dropout: 0.0,
        supervision,
        seed: 3,
        ..Default::default()
    }
}

fn randomized(cfg: &SequenceModelConfig, seed: u64) -> SequenceModelParams {
    let mut p = SequenceModelParams::init(cfg, None).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for t in &mut p.tensors {
        t.data.iter_mut().for_each(|x| *x = r.random_range(-0.6..0.6));
    }
    p
}

fn tiny_batch(t_len: usize, seed: u64) -> Vec<SequenceExample> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|k| {
            let steps: Vec<BagOfWords> = (0..t_len)
                .map(|_| BagOfWords::from_ids((0..r.random_range(1..6)).map(|_| r.random_range(0..20u32))))
                .collect();
            let step_labels = (0..t_len).map(|_| (0..5u16).filter(|_| r.random_bool(0.4)).collect()).collect();
            SequenceExample { patient_id: k, steps, step_labels, labels: (0..5u16).filter(|_| r.random_bool(0.5)).collect() }
        })
        .collect()
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter.
fn max_fd_error(p: &SequenceModelParams, batch: &[SequenceExample]) -> f64 {
    let (_, grads) = loss_and_gradients(p, batch).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for k in 0..g.data.len() {
            let mut plus = p.clone();
            plus.tensors[ti].data[k] += h;
            let mut minus = p.clone();
            minus.tensors[ti].data[k] -= h;
            let lp = loss_and_gradients(&plus, batch).unwrap().0;
            let lm = loss_and_gradients(&minus, batch).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = g.data[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for cell in [CellKind::Gru, CellKind::Lstm, CellKind::Flat] {
        for sup in [Supervision::FinalStep, Supervision::PerStep] {
            let cfg = tiny_config(cell, sup);
            let p = randomized(&cfg, 11);
            let t_len = if cell == CellKind::Flat { 1 } else { 4 };
            let err = max_fd_error(&p, &tiny_batch(t_len, 5));
            assert!(err < 1e-4, "{cell:?} {sup:?}: {err}");
        }
    }
}

#[test]
fn pooled_embed_hand_values() {
    let mut l = Tensor::zeros("L", 4, 2);
    l.data = vec![0.0, 0.0, 0.0, 0.0, 1.0, 5.0, 4.0, 0.0];
    assert_eq!(pooled_embed(&BagOfWords::from_ids([2, 3]), &l, None).unwrap(), vec![4.0, 5.0]);
    assert_eq!(pooled_embed(&BagOfWords::from_ids([3]), &l, None).unwrap(), vec![4.0, 0.0]);
    assert_eq!(pooled_embed(&BagOfWords::from_counts([(2, 3), (3, 1)]), &l, None).unwrap(), vec![4.0, 5.0]);
    assert_eq!(pooled_embed(&BagOfWords::from_ids([2, 3]), &l, Some(&[0.0, 2.0])).unwrap(), vec![0.0, 10.0]);
    assert!(pooled_embed(&BagOfWords::default(), &l, None).is_err());
}

#[test]
fn zero_weights_give_zero_state() {
    let cfg = tiny_config(CellKind::Gru, Supervision::FinalStep);
    let mut p = SequenceModelParams::init(&cfg, None).unwrap();
    for t in &mut p.tensors {
        t.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let n = p.tensors.len();
    p.tensors[n - 1].data = vec![0.3, -1.0, 0.0, 2.0, 0.5];
    let fwd = rnn_forward(&tiny_batch(4, 1)[0], &p, Mode::Infer, None).unwrap();
    assert!(fwd.hidden.iter().flatten().all(|&x| x == 0.0));
    for (y, b) in fwd.predictions[0].iter().zip(&p.tensors[n - 1].data) {
        assert_eq!(*y, net::sigmoid(*b));
    }
}

/// Scalar-loop GRU written straight from the recurrences.
fn oracle_gru(p: &SequenceModelParams, ex: &SequenceExample) -> (Vec<f64>, Vec<f64>) {
    let (d, h) = (p.config.embed_dim, p.config.hidden_dim);
    let get = |name: &str| p.tensor(name).unwrap();
    let mut state = vec![0.0; h];
    for bag in &ex.steps {
        let mut phi = vec![f64::NEG_INFINITY; d];
        for id in bag.ids() {
            for k in 0..d {
                phi[k] = phi[k].max(get("L").data[id as usize * d + k]);
            }
        }
        let lin = |g: &str, k: usize, hv: &[f64]| -> f64 {
            let w = get(&format!("W_{g}"));
            let u = get(&format!("U_{g}"));
            let mut a = get(&format!("b_{g}")).data[k];
            for j in 0..d {
                a += w.data[k * d + j] * phi[j];
            }
            for j in 0..h {
                a += u.data[k * h + j] * hv[j];
            }
            a
        };
        let z: Vec<f64> = (0..h).map(|k| 1.0 / (1.0 + (-lin("z", k, &state)).exp())).collect();
        let r: Vec<f64> = (0..h).map(|k| 1.0 / (1.0 + (-lin("r", k, &state)).exp())).collect();
        let rh: Vec<f64> = (0..h).map(|k| r[k] * state[k]).collect();
        let cand: Vec<f64> = (0..h).map(|k| lin("h", k, &rh).tanh()).collect();
        state = (0..h).map(|k| (1.0 - z[k]) * state[k] + z[k] * cand[k]).collect();
    }
    let w = get("W_out");
    let k_out = p.config.n_labels;
    let y = (0..k_out)
        .map(|c| {
            let mut a = get("b_out").data[c];
            for j in 0..h {
                a += w.data[j * k_out + c] * state[j];
            }
            1.0 / (1.0 + (-a).exp())
        })
        .collect();
    (state, y)
}

#[test]
fn forward_matches_scalar_oracle() {
    let cfg = tiny_config(CellKind::Gru, Supervision::FinalStep);
    let p = randomized(&cfg, 2);
    for ex in tiny_batch(4, 8) {
        let fwd = rnn_forward(&ex, &p, Mode::Infer, None).unwrap();
        let (h, y) = oracle_gru(&p, &ex);
        for (a, b) in fwd.hidden.last().unwrap().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fwd.predictions[0].iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_step_gru_by_hand() {
    let cfg = tiny_config(CellKind::Gru, Supervision::FinalStep);
    let p = randomized(&cfg, 4);
    let ex = &tiny_batch(1, 3)[0];
    let phi = pooled_embed(&ex.steps[0], &p.tensors[0], None).unwrap();
    let fwd = rnn_forward(ex, &p, Mode::Infer, None).unwrap();
    let (d, h) = (8, 6);
    for k in 0..h {
        let aff = |g: &str| {
            let w = p.tensor(&format!("W_{g}")).unwrap();
            p.tensor(&format!("b_{g}")).unwrap().data[k] + (0..d).map(|j| w.data[k * d + j] * phi[j]).sum::<f64>()
        };
        let want = net::sigmoid(aff("z")) * aff("h").tanh();
        assert!((fwd.hidden[0][k] - want).abs() < 1e-14);
    }
}

#[test]
fn loss_hand_values() {
    assert!((multitask_loss(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(multitask_loss(&[1.0, 0.0], &[1.0, 0.0]) <= -(1.0 - net::EPS).ln() + 1e-18);
    let (p, y) = ([0.2, 0.9, 0.6], [0.0, 1.0, 0.0]);
    let hand = -((0.8f64).ln() + (0.9f64).ln() + (0.4f64).ln()) / 3.0;
    assert!((multitask_loss(&p, &y) - hand).abs() < 1e-15);
}

#[test]
fn stationary_targets_have_zero_gradient() {
    for cell in [CellKind::Gru, CellKind::Lstm] {
        let cfg = tiny_config(cell, Supervision::FinalStep);
        let p = randomized(&cfg, 6);
        let ex = &tiny_batch(4, 2)[0];
        let fwd = net::forward(&p, ex, None).unwrap();
        let targets = fwd.predictions.clone();
        let mut grads = p.zero_gradients();
        net::backward(&p, &fwd, &targets, None, 1.0, &mut grads);
        assert!(grads.iter().all(|g| g.data.iter().all(|&x| x.abs() < 1e-15)));
    }
}

#[test]
fn absent_words_get_no_gradient() {
    let cfg = tiny_config(CellKind::Gru, Supervision::FinalStep);
    let p = randomized(&cfg, 9);
    let batch = tiny_batch(4, 4);
    let (_, grads) = loss_and_gradients(&p, &batch).unwrap();
    // the batch only uses ids below 20
    assert!(grads[0].data[20 * 8..].iter().all(|&x| x == 0.0));
}

fn toy_eras(n: usize, seed: u64) -> Vec<EraView> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n as u32)
        .map(|pid| {
            let cond = r.random_range(0..3u16);
            let notes = (0..r.random_range(1..6u32))
                .map(|day| {
                    let base = u32::from(cond) * 5;
                    let mut ids: Vec<u32> = (0..4).map(|_| base + r.random_range(0..5)).collect();
                    ids.push(15 + r.random_range(0..10));
                    DatedBag { day, bag: BagOfWords::from_ids(ids), ccs: vec![cond] }
                })
                .collect();
            EraView { patient_id: pid, prediction_day: 400, notes, ccs_labels: vec![cond], task_labels: BTreeMap::new() }
        })
        .collect()
}

fn toy_config() -> SequenceModelConfig {
    SequenceModelConfig { vocab_size: 25, embed_dim: 8, hidden_dim: 8, n_labels: 3, epochs: 20, ..Default::default() }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = SequenceModelConfig { learning_rate: 0.0, epochs: 3, ..toy_config() };
    let ex = examples_from_eras(&toy_eras(40, 1), &cfg);
    let init = SequenceModelParams::init(&cfg, None).unwrap();
    let (trained, _) = train_sequence_model(&ex, &[], &cfg, None).unwrap();
    assert_eq!(init.tensors, trained.tensors);
}

/// Mean training loss of the first and twentieth epoch on the toy task,
/// recorded from a reference run.
const GOLDEN_EPOCH_LOSS: (f64, f64) = (0.6955, 0.5804);

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = toy_config();
    let eras = toy_eras(200, 2);
    let ex = examples_from_eras(&eras, &cfg);
    let (a, trace) = train_sequence_model(&ex[..160], &ex[160..], &cfg, None).unwrap();
    let (b, _) = train_sequence_model(&ex[..160], &ex[160..], &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(trace.train_loss.len(), 20);
    let (first, last) = (trace.train_loss[0], trace.train_loss[19]);
    assert!(last < first);
    assert!((first - GOLDEN_EPOCH_LOSS.0).abs() <= 0.05 * GOLDEN_EPOCH_LOSS.0);
    assert!((last - GOLDEN_EPOCH_LOSS.1).abs() <= 0.05 * GOLDEN_EPOCH_LOSS.1);
}

#[test]
fn extraction_properties() {
    let cfg = toy_config();
    let eras = toy_eras(5, 3);
    let p = SequenceModelParams::init(&cfg, None).unwrap();
    let a = extract_patient_state(&eras[0], &p).unwrap().unwrap();
    let b = extract_patient_state(&eras[0], &p).unwrap().unwrap();
    assert_eq!(a.dim(), 8);
    assert_eq!(a, b);
    assert_eq!(a.method, "rnn-8");
    let mut zero = p.clone();
    for t in &mut zero.tensors[1..] {
        t.data.iter_mut().for_each(|x| *x = 0.0);
    }
    assert!(extract_patient_state(&eras[1], &zero).unwrap().unwrap().vector.iter().all(|&x| x == 0.0));
    let empty = EraView { notes: vec![], ..eras[2].clone() };
    assert!(extract_patient_state(&empty, &p).unwrap().is_none());
}

#[test]
fn truncation_keeps_most_recent_days() {
    let cfg = SequenceModelConfig { max_seq_len: 2, ..toy_config() };
    let p = randomized(&cfg, 1);
    let era = toy_eras(30, 5).into_iter().find(|e| e.notes.len() >= 4).unwrap();
    let tail = EraView { notes: era.notes[era.notes.len() - 2..].to_vec(), ..era.clone() };
    let long = SequenceModelConfig { max_seq_len: 50, ..cfg.clone() };
    let p_long = SequenceModelParams { config: long, ..p.clone() };
    assert_eq!(extract_patient_state(&era, &p).unwrap(), extract_patient_state(&tail, &p_long).unwrap());
}

#[test]
fn gates_stay_in_range_and_supervision_keeps_states() {
    let cfg = tiny_config(CellKind::Gru, Supervision::FinalStep);
    let p = randomized(&cfg, 12);
    let per = SequenceModelParams { config: tiny_config(CellKind::Gru, Supervision::PerStep), ..p.clone() };
    for ex in tiny_batch(4, 13) {
        let f = net::forward(&p, &ex, None).unwrap();
        let g = net::forward(&per, &ex, None).unwrap();
        assert_eq!(f.hidden, g.hidden);
        assert_eq!(g.predictions.len(), 4);
        assert!(f.hidden.iter().flatten().all(|x| x.abs() < 1.0));
    }
}

#[test]
fn inference_ignores_dropout() {
    let cfg = SequenceModelConfig { dropout: 0.5, ..tiny_config(CellKind::Lstm, Supervision::FinalStep) };
    let p = randomized(&cfg, 3);
    let ex = &tiny_batch(4, 1)[0];
    let mut r = rng::stream(1, &[]);
    let a = rnn_forward(ex, &p, Mode::Infer, Some(&mut r)).unwrap();
    let b = rnn_forward(ex, &p, Mode::Infer, None).unwrap();
    assert_eq!(a.predictions, b.predictions);
    let c = rnn_forward(ex, &p, Mode::Train, Some(&mut r)).unwrap();
    assert_ne!(a.predictions, c.predictions);
}

#[test]
fn flat_model_matches_one_step_sequence() {
    let cfg = SequenceModelConfig { cell: CellKind::Flat, ..toy_config() };
    let p = randomized(&cfg, 7);
    let notes = labeled_notes(&toy_eras(10, 4));
    let flat = flat_examples(&notes, &cfg);
    let as_sequences: Vec<SequenceExample> = notes
        .iter()
        .map(|n| SequenceExample {
            patient_id: n.patient_id,
            steps: vec![n.bag.binarized()],
            step_labels: vec![n.labels.clone()],
            labels: n.labels.clone(),
        })
        .collect();
    assert_eq!(loss_and_gradients(&p, &flat).unwrap().0, loss_and_gradients(&p, &as_sequences).unwrap().0);
    let (_, e, _) = train_flat_model(&notes, &SequenceModelConfig { epochs: 2, ..cfg }).unwrap();
    assert_eq!(e.source(), EmbeddingSource::Flat);
    assert!(crate::embed::pool_words(&notes[0].bag, &e, crate::embed::Aggregator::Max).is_some());
}

#[test]
fn checkpoint_round_trip() {
    for cell in [CellKind::Gru, CellKind::Lstm, CellKind::Flat] {
        let p = randomized(&tiny_config(cell, Supervision::PerStep), 1);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}

#[test]
fn config_validation() {
    assert!(SequenceModelParams::init(&SequenceModelConfig { dropout: 1.0, ..toy_config() }, None).is_err());
    assert!(SequenceModelParams::init(&SequenceModelConfig { vocab_size: 0, ..toy_config() }, None).is_err());
    assert!(
        SequenceModelParams::init(&SequenceModelConfig { init: InitKind::Pretrained, ..toy_config() }, None).is_err()
    );
}
