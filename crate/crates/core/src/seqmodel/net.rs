//! Forward pass and backpropagation through time.

use super::{CellKind, SequenceExample, SequenceModelParams, Supervision, Tensor};
use crate::corpus::BagOfWords;
use crate::error::{Error, Result};

pub(crate) const EPS: f64 = 1e-7;

pub(crate) fn sigmoid(x: f64) -> f64 {
    crate::synthgen::sigmoid(x)
}

/// `out += t * x` for a `rows x cols` tensor.
fn matvec_add(t: &Tensor, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &t.data[r * t.cols..(r + 1) * t.cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += t^T * x`.
fn matvec_t_add(t: &Tensor, x: &[f64], out: &mut [f64]) {
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        let row = &t.data[r * t.cols..(r + 1) * t.cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * xr;
        }
    }
}

/// `g += a b^T`.
fn outer_add(g: &mut Tensor, a: &[f64], b: &[f64]) {
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut g.data[r * g.cols..(r + 1) * g.cols];
        for (x, bv) in row.iter_mut().zip(b) {
            *x += ar * bv;
        }
    }
}

fn add_into(g: &mut Tensor, v: &[f64]) {
    for (x, y) in g.data.iter_mut().zip(v) {
        *x += y;
    }
}

/// Element-wise max over the embedding rows of the words in `bag`, with
/// the winning word per dimension (the lowest id on ties).
pub(crate) fn pool_with_argmax(bag: &BagOfWords, l: &Tensor) -> Result<(Vec<f64>, Vec<u32>)> {
    let mut ids = bag.ids();
    let first = ids.next().ok_or_else(|| Error::invalid("cannot pool an empty bag"))?;
    let d = l.cols;
    let row = |id: u32| -> Result<&[f64]> {
        let s = id as usize * d;
        l.data.get(s..s + d).ok_or_else(|| Error::invalid(format!("word id {id} outside the embedding")))
    };
    let mut v = row(first)?.to_vec();
    let mut arg = vec![first; d];
    for id in ids {
        for (k, &x) in row(id)?.iter().enumerate() {
            if x > v[k] {
                v[k] = x;
                arg[k] = id;
            }
        }
    }
    Ok((v, arg))
}

/// Dropout masks for one sequence: one per input step and one per output.
pub(crate) struct Masks {
    pub input: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
}

struct Step {
    phi: Vec<f64>,
    argmax: Vec<u32>,
    h_prev: Vec<f64>,
    h: Vec<f64>,
    /// GRU: z, r, h~. LSTM: i, f, o, g.
    gates: [Vec<f64>; 4],
    c_prev: Vec<f64>,
    c: Vec<f64>,
}

pub struct Forward {
    pub hidden: Vec<Vec<f64>>,
    /// One vector for final-step supervision, one per step otherwise.
    pub predictions: Vec<Vec<f64>>,
    steps: Vec<Step>,
    /// Dropped-out hidden vectors fed to the output layer.
    head_inputs: Vec<Vec<f64>>,
}

fn idx(cell: CellKind, gate: usize, part: usize) -> usize {
    debug_assert!(cell != CellKind::Flat);
    1 + gate * 3 + part
}

fn affine(p: &SequenceModelParams, gate: usize, phi: &[f64], h: &[f64]) -> Vec<f64> {
    let cell = p.config.cell;
    let mut a = p.tensors[idx(cell, gate, 2)].data.clone();
    matvec_add(&p.tensors[idx(cell, gate, 0)], phi, &mut a);
    matvec_add(&p.tensors[idx(cell, gate, 1)], h, &mut a);
    a
}

pub(crate) fn forward(p: &SequenceModelParams, ex: &SequenceExample, masks: Option<&Masks>) -> Result<Forward> {
    let cfg = &p.config;
    if ex.steps.is_empty() {
        return Err(Error::invalid(format!("patient {} has an empty sequence", ex.patient_id)));
    }
    let hdim = cfg.state_dim();
    let l = &p.tensors[0];
    let mut h = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    let mut steps = Vec::with_capacity(ex.steps.len());
    for (t, bag) in ex.steps.iter().enumerate() {
        let (mut phi, argmax) = pool_with_argmax(bag, l)?;
        if let Some(m) = masks {
            phi.iter_mut().zip(&m.input[t]).for_each(|(x, k)| *x *= k);
        }
        let h_prev = h.clone();
        let c_prev = c.clone();
        let gates = match cfg.cell {
            CellKind::Flat => {
                h = phi.clone();
                Default::default()
            }
            CellKind::Gru => {
                let z: Vec<f64> = affine(p, 0, &phi, &h_prev).into_iter().map(sigmoid).collect();
                let r: Vec<f64> = affine(p, 1, &phi, &h_prev).into_iter().map(sigmoid).collect();
                let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(a, b)| a * b).collect();
                let mut a = p.tensors[idx(cfg.cell, 2, 2)].data.clone();
                matvec_add(&p.tensors[idx(cfg.cell, 2, 0)], &phi, &mut a);
                matvec_add(&p.tensors[idx(cfg.cell, 2, 1)], &rh, &mut a);
                let cand: Vec<f64> = a.into_iter().map(f64::tanh).collect();
                h = (0..hdim).map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * cand[k]).collect();
                [z, r, cand, Vec::new()]
            }
            CellKind::Lstm => {
                let i: Vec<f64> = affine(p, 0, &phi, &h_prev).into_iter().map(sigmoid).collect();
                let f: Vec<f64> = affine(p, 1, &phi, &h_prev).into_iter().map(sigmoid).collect();
                let o: Vec<f64> = affine(p, 2, &phi, &h_prev).into_iter().map(sigmoid).collect();
                let g: Vec<f64> = affine(p, 3, &phi, &h_prev).into_iter().map(f64::tanh).collect();
                c = (0..hdim).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
                h = (0..hdim).map(|k| o[k] * c[k].tanh()).collect();
                [i, f, o, g]
            }
        };
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite activation at step {t} for patient {}",
                ex.patient_id
            )));
        }
        steps.push(Step { phi, argmax, h_prev, h: h.clone(), gates, c_prev, c: c.clone() });
    }
    let hidden: Vec<Vec<f64>> = steps.iter().map(|s| s.h.clone()).collect();
    let heads: Vec<usize> = match cfg.supervision {
        Supervision::FinalStep => vec![steps.len() - 1],
        Supervision::PerStep => (0..steps.len()).collect(),
    };
    let (w_out, b_out) = p.output_layer();
    let mut head_inputs = Vec::with_capacity(heads.len());
    let mut predictions = Vec::with_capacity(heads.len());
    for (k, &t) in heads.iter().enumerate() {
        let mut x = hidden[t].clone();
        if let Some(m) = masks {
            x.iter_mut().zip(&m.output[k]).for_each(|(a, b)| *a *= b);
        }
        let mut a = b_out.data.clone();
        matvec_t_add(w_out, &x, &mut a);
        predictions.push(a.into_iter().map(sigmoid).collect());
        head_inputs.push(x);
    }
    Ok(Forward { hidden, predictions, steps, head_inputs })
}

/// Mean over labels of the binary cross-entropy with clamped predictions.
pub fn multitask_loss(pred: &[f64], labels: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Loss of one example (averaged over heads).
pub(crate) fn example_loss(fwd: &Forward, targets: &[Vec<f64>]) -> f64 {
    fwd.predictions.iter().zip(targets).map(|(p, y)| multitask_loss(p, y)).sum::<f64>() / targets.len() as f64
}

/// Accumulates `scale * d(loss)/d(params)` for one example into `grads`.
pub(crate) fn backward(
    p: &SequenceModelParams,
    fwd: &Forward,
    targets: &[Vec<f64>],
    masks: Option<&Masks>,
    scale: f64,
    grads: &mut [Tensor],
) {
    let cfg = &p.config;
    let hdim = cfg.state_dim();
    let n_heads = fwd.predictions.len();
    let t_len = fwd.steps.len();
    let head_steps: Vec<usize> = match cfg.supervision {
        Supervision::FinalStep => vec![t_len - 1],
        Supervision::PerStep => (0..t_len).collect(),
    };
    let (w_out, _) = p.output_layer();
    let n_out = grads.len();
    // d loss / d h_t contributed by the output heads
    let mut dh_heads = vec![vec![0.0; hdim]; t_len];
    for (k, &t) in head_steps.iter().enumerate() {
        let pred = &fwd.predictions[k];
        let n_labels = pred.len() as f64;
        let da: Vec<f64> = pred
            .iter()
            .zip(&targets[k])
            .map(|(&yh, &y)| {
                if (EPS..=1.0 - EPS).contains(&yh) {
                    scale * (yh - y) / (n_labels * n_heads as f64)
                } else {
                    0.0
                }
            })
            .collect();
        outer_add(&mut grads[n_out - 2], &fwd.head_inputs[k], &da);
        add_into(&mut grads[n_out - 1], &da);
        let mut dx = vec![0.0; hdim];
        matvec_add(w_out, &da, &mut dx);
        if let Some(m) = masks {
            dx.iter_mut().zip(&m.output[k]).for_each(|(a, b)| *a *= b);
        }
        for (a, b) in dh_heads[t].iter_mut().zip(&dx) {
            *a += b;
        }
    }

    let mut dh_next = vec![0.0; hdim];
    let mut dc_next = vec![0.0; hdim];
    for t in (0..t_len).rev() {
        let s = &fwd.steps[t];
        let dh: Vec<f64> = dh_next.iter().zip(&dh_heads[t]).map(|(a, b)| a + b).collect();
        let mut dphi = vec![0.0; s.phi.len()];
        match cfg.cell {
            CellKind::Flat => {
                dphi.copy_from_slice(&dh);
                dh_next = vec![0.0; hdim];
            }
            CellKind::Gru => {
                let [z, r, cand, _] = &s.gates;
                let mut dh_prev: Vec<f64> = (0..hdim).map(|k| dh[k] * (1.0 - z[k])).collect();
                let da_h: Vec<f64> = (0..hdim).map(|k| dh[k] * z[k] * (1.0 - cand[k] * cand[k])).collect();
                let da_z: Vec<f64> =
                    (0..hdim).map(|k| dh[k] * (cand[k] - s.h_prev[k]) * z[k] * (1.0 - z[k])).collect();
                let rh: Vec<f64> = r.iter().zip(&s.h_prev).map(|(a, b)| a * b).collect();
                outer_add(&mut grads[idx(cfg.cell, 2, 0)], &da_h, &s.phi);
                outer_add(&mut grads[idx(cfg.cell, 2, 1)], &da_h, &rh);
                add_into(&mut grads[idx(cfg.cell, 2, 2)], &da_h);
                let mut drh = vec![0.0; hdim];
                matvec_t_add(&p.tensors[idx(cfg.cell, 2, 1)], &da_h, &mut drh);
                let da_r: Vec<f64> = (0..hdim).map(|k| drh[k] * s.h_prev[k] * r[k] * (1.0 - r[k])).collect();
                for k in 0..hdim {
                    dh_prev[k] += drh[k] * r[k];
                }
                for (gate, da) in [(0, &da_z), (1, &da_r)] {
                    outer_add(&mut grads[idx(cfg.cell, gate, 0)], da, &s.phi);
                    outer_add(&mut grads[idx(cfg.cell, gate, 1)], da, &s.h_prev);
                    add_into(&mut grads[idx(cfg.cell, gate, 2)], da);
                    matvec_t_add(&p.tensors[idx(cfg.cell, gate, 1)], da, &mut dh_prev);
                }
                for (gate, da) in [(0, &da_z), (1, &da_r), (2, &da_h)] {
                    matvec_t_add(&p.tensors[idx(cfg.cell, gate, 0)], da, &mut dphi);
                }
                dh_next = dh_prev;
            }
            CellKind::Lstm => {
                let [i, f, o, g] = &s.gates;
                let tc: Vec<f64> = s.c.iter().map(|x| x.tanh()).collect();
                let dc: Vec<f64> = (0..hdim).map(|k| dc_next[k] + dh[k] * o[k] * (1.0 - tc[k] * tc[k])).collect();
                let da = [
                    (0..hdim).map(|k| dc[k] * g[k] * i[k] * (1.0 - i[k])).collect::<Vec<f64>>(),
                    (0..hdim).map(|k| dc[k] * s.c_prev[k] * f[k] * (1.0 - f[k])).collect(),
                    (0..hdim).map(|k| dh[k] * tc[k] * o[k] * (1.0 - o[k])).collect(),
                    (0..hdim).map(|k| dc[k] * i[k] * (1.0 - g[k] * g[k])).collect(),
                ];
                let mut dh_prev = vec![0.0; hdim];
                for (gate, d) in da.iter().enumerate() {
                    outer_add(&mut grads[idx(cfg.cell, gate, 0)], d, &s.phi);
                    outer_add(&mut grads[idx(cfg.cell, gate, 1)], d, &s.h_prev);
                    add_into(&mut grads[idx(cfg.cell, gate, 2)], d);
                    matvec_t_add(&p.tensors[idx(cfg.cell, gate, 1)], d, &mut dh_prev);
                    matvec_t_add(&p.tensors[idx(cfg.cell, gate, 0)], d, &mut dphi);
                }
                dc_next = (0..hdim).map(|k| dc[k] * f[k]).collect();
                dh_next = dh_prev;
            }
        }
        if let Some(m) = masks {
            dphi.iter_mut().zip(&m.input[t]).for_each(|(a, b)| *a *= b);
        }
        let l = &mut grads[0];
        for (k, (&word, &g)) in s.argmax.iter().zip(&dphi).enumerate() {
            l.data[word as usize * l.cols + k] += g;
        }
    }
}
