use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BagOfWords, EraView};
use crate::embed::PatientRepresentation;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub topics: usize,
    pub iterations: usize,
    /// Document-topic prior; `None` means `50 / K`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub inference_sweeps: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig { topics: 20, iterations: 50, alpha: None, beta: 0.01, inference_sweeps: 25, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub topics: usize,
    pub vocab_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub inference_sweeps: usize,
    pub seed: u64,
    /// Row-major `K x V` topic-word probabilities.
    pub topic_word: Vec<f64>,
}

impl LdaModel {
    pub fn topic(&self, k: usize) -> &[f64] {
        &self.topic_word[k * self.vocab_size..(k + 1) * self.vocab_size]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicPooling {
    Mean,
    Max,
}

/// Draws an index with probability proportional to `weights`.
fn draw(weights: &[f64], r: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

struct Sampler {
    topics: usize,
    vocab: usize,
    doc_topic: Vec<u32>,
    topic_word: Vec<u32>,
    topic_total: Vec<u32>,
}

/// Collapsed Gibbs sampling over token-topic assignments.
pub fn fit_lda(notes: &[BagOfWords], vocab_size: usize, cfg: &LdaConfig) -> Result<LdaModel> {
    let k = cfg.topics;
    if k < 2 {
        return Err(Error::config("LDA needs at least two topics"));
    }
    if !(cfg.beta > 0.0) || cfg.alpha.is_some_and(|a| !(a > 0.0)) {
        return Err(Error::config("LDA priors must be positive"));
    }
    let alpha = cfg.alpha.unwrap_or(50.0 / k as f64);
    let docs: Vec<Vec<u32>> = notes
        .iter()
        .map(|b| b.entries().iter().flat_map(|&(id, c)| std::iter::repeat_n(id, c as usize)).collect())
        .filter(|d: &Vec<u32>| !d.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::invalid("LDA corpus is empty"));
    }
    if docs.iter().flatten().any(|&w| w as usize >= vocab_size) {
        return Err(Error::invalid("LDA token outside the vocabulary"));
    }
    let mut r = rng::stream(cfg.seed, &[0x1da]);
    let mut s = Sampler {
        topics: k,
        vocab: vocab_size,
        doc_topic: vec![0; docs.len() * k],
        topic_word: vec![0; k * vocab_size],
        topic_total: vec![0; k],
    };
    let mut z: Vec<Vec<usize>> = docs
        .iter()
        .enumerate()
        .map(|(d, words)| {
            words
                .iter()
                .map(|&w| {
                    let t = r.random_range(0..k);
                    s.doc_topic[d * k + t] += 1;
                    s.topic_word[t * vocab_size + w as usize] += 1;
                    s.topic_total[t] += 1;
                    t
                })
                .collect()
        })
        .collect();
    let vbeta = vocab_size as f64 * cfg.beta;
    let mut p = vec![0.0; k];
    for _ in 0..cfg.iterations {
        for (d, words) in docs.iter().enumerate() {
            for (i, &w) in words.iter().enumerate() {
                let w = w as usize;
                let old = z[d][i];
                s.doc_topic[d * k + old] -= 1;
                s.topic_word[old * s.vocab + w] -= 1;
                s.topic_total[old] -= 1;
                for (t, pt) in p.iter_mut().enumerate() {
                    *pt = (f64::from(s.doc_topic[d * k + t]) + alpha)
                        * (f64::from(s.topic_word[t * s.vocab + w]) + cfg.beta)
                        / (f64::from(s.topic_total[t]) + vbeta);
                }
                let new = draw(&p, &mut r);
                z[d][i] = new;
                s.doc_topic[d * k + new] += 1;
                s.topic_word[new * s.vocab + w] += 1;
                s.topic_total[new] += 1;
            }
        }
    }
    debug_assert_eq!(s.topic_total.iter().map(|&c| c as usize).sum::<usize>(), docs.iter().map(Vec::len).sum::<usize>());
    let mut topic_word = vec![0.0; k * vocab_size];
    for t in 0..s.topics {
        let denom = f64::from(s.topic_total[t]) + vbeta;
        for w in 0..vocab_size {
            topic_word[t * vocab_size + w] = (f64::from(s.topic_word[t * vocab_size + w]) + cfg.beta) / denom;
        }
    }
    Ok(LdaModel {
        topics: k,
        vocab_size,
        alpha,
        beta: cfg.beta,
        inference_sweeps: cfg.inference_sweeps,
        seed: cfg.seed,
        topic_word,
    })
}

/// Topic proportions of one note by Gibbs sampling with frozen topics.
pub fn infer_note(model: &LdaModel, bag: &BagOfWords, seed: u64) -> Vec<f64> {
    let k = model.topics;
    let words: Vec<usize> = bag
        .entries()
        .iter()
        .filter(|&&(id, _)| (id as usize) < model.vocab_size)
        .flat_map(|&(id, c)| std::iter::repeat_n(id as usize, c as usize))
        .collect();
    if words.is_empty() {
        return vec![1.0 / k as f64; k];
    }
    let mut r = rng::stream(seed, &[]);
    let mut counts = vec![0u32; k];
    let mut z: Vec<usize> = words
        .iter()
        .map(|_| {
            let t = r.random_range(0..k);
            counts[t] += 1;
            t
        })
        .collect();
    let mut p = vec![0.0; k];
    for _ in 0..model.inference_sweeps {
        for (i, &w) in words.iter().enumerate() {
            counts[z[i]] -= 1;
            for (t, pt) in p.iter_mut().enumerate() {
                *pt = (f64::from(counts[t]) + model.alpha) * model.topic_word[t * model.vocab_size + w];
            }
            z[i] = draw(&p, &mut r);
            counts[z[i]] += 1;
        }
    }
    let denom = words.len() as f64 + k as f64 * model.alpha;
    counts.iter().map(|&c| (f64::from(c) + model.alpha) / denom).collect()
}

/// Pools per-note topic proportions across the era's notes.
pub fn lda_represent(model: &LdaModel, era: &EraView, pooling: TopicPooling) -> PatientRepresentation {
    let notes: Vec<Vec<f64>> = era
        .notes
        .iter()
        .enumerate()
        .map(|(i, n)| infer_note(model, &n.bag, rng::derive_seed(model.seed, &[u64::from(era.patient_id), i as u64])))
        .collect();
    let k = model.topics;
    let vector = if notes.is_empty() {
        vec![0.0; k]
    } else {
        (0..k)
            .map(|t| match pooling {
                TopicPooling::Mean => notes.iter().map(|v| v[t]).sum::<f64>() / notes.len() as f64,
                TopicPooling::Max => notes.iter().map(|v| v[t]).fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    };
    let tag = match pooling {
        TopicPooling::Mean => "mean",
        TopicPooling::Max => "max",
    };
    PatientRepresentation { patient_id: era.patient_id, vector, method: format!("lda-{k}-{tag}") }
}

/// Text layout: `K V alpha beta sweeps seed`, then one row per topic.
pub fn write_lda<W: Write>(model: &LdaModel, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{} {} {} {} {} {}",
        model.topics, model.vocab_size, model.alpha, model.beta, model.inference_sweeps, model.seed
    )?;
    for t in 0..model.topics {
        let row: Vec<String> = model.topic(t).iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_lda<R: BufRead>(input: R) -> Result<LdaModel> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let h: Vec<&str> = header.split_whitespace().collect();
    let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
    if h.len() != 6 {
        return Err(bad(1, "expected `K V alpha beta sweeps seed`"));
    }
    let topics: usize = h[0].parse().map_err(|_| bad(1, "bad topic count"))?;
    let vocab_size: usize = h[1].parse().map_err(|_| bad(1, "bad vocabulary size"))?;
    let alpha: f64 = h[2].parse().map_err(|_| bad(1, "bad alpha"))?;
    let beta: f64 = h[3].parse().map_err(|_| bad(1, "bad beta"))?;
    let inference_sweeps: usize = h[4].parse().map_err(|_| bad(1, "bad sweep count"))?;
    let seed: u64 = h[5].parse().map_err(|_| bad(1, "bad seed"))?;
    let mut topic_word = Vec::with_capacity(topics * vocab_size);
    for t in 0..topics {
        let line = lines.next().transpose()?.ok_or_else(|| bad(t + 2, "missing topic row"))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse().map_err(|_| bad(t + 2, "bad probability")))
            .collect::<Result<_>>()?;
        if row.len() != vocab_size {
            return Err(bad(t + 2, "topic row has the wrong length"));
        }
        topic_word.extend(row);
    }
    Ok(LdaModel { topics, vocab_size, alpha, beta, inference_sweeps, seed, topic_word })
}
