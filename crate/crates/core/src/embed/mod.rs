//! Word embeddings trained on order-randomized notes, imported embeddings,
//! and embed-and-aggregate patient vectors.

mod cooccur;
mod glove;
mod matrix;
mod pool;

pub use cooccur::{build_shuffled_corpus, count_cooccurrences, CooccurrenceTable, TokenStream};
pub use glove::{glove_weight, train_glove, train_glove_with_trace, GloveConfig};
pub use matrix::{export_embeddings, import_embeddings, read_embeddings, EmbeddingMatrix, EmbeddingSource};
pub use pool::{
    pool_notes, pool_words, pool_words_with, represent_patient, represent_patients, Aggregator,
    PatientRepresentation,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_eras, build_vocabulary, NoteScope};
    use crate::synthgen::{generate_cohort, token_name, GeneratorConfig};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Margin of same-condition over cross-condition cosine measured once
    /// with this exact configuration.
    const GOLDEN_MARGIN: f64 = 0.842;

    #[test]
    fn same_condition_words_are_closer() {
        let cohort = generate_cohort(&GeneratorConfig { n_patients: 600, ..Default::default() }).unwrap();
        let vocab = build_vocabulary(&cohort, 5, None, NoteScope::All).unwrap();
        let eras = build_eras(&cohort, &vocab, 365, 180);
        let stream = build_shuffled_corpus(&eras, 2, 3).unwrap();
        let table = count_cooccurrences(&stream, 10, vocab.len()).unwrap();
        let e = train_glove(&table, &GloveConfig { dim: 20, ..GloveConfig::default() }).unwrap();
        let ids: Vec<Vec<u32>> = cohort
            .condition_lexicon
            .iter()
            .map(|words| words.iter().filter_map(|&w| vocab.id(&token_name(w as usize))).collect())
            .collect();
        let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
        for (c, words) in ids.iter().enumerate() {
            for (k, &a) in words.iter().enumerate() {
                for &b in &words[k + 1..] {
                    same += cosine(e.row(a).unwrap(), e.row(b).unwrap());
                    n_same += 1;
                }
                let other = &ids[(c + 1) % ids.len()];
                for &b in other {
                    cross += cosine(e.row(a).unwrap(), e.row(b).unwrap());
                    n_cross += 1;
                }
            }
        }
        let margin = same / n_same as f64 - cross / n_cross as f64;
        assert!(margin >= 0.5 * GOLDEN_MARGIN && margin > 0.0, "margin {margin}");
    }
}
