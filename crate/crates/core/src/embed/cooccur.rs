use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::EraView;
use crate::error::{Error, Result};
use crate::rng;

/// Concatenated token ids split into boundary-delimited segments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<u32>,
    /// Start offset of every segment, followed by the total length.
    bounds: Vec<usize>,
}

impl TokenStream {
    pub fn from_segments<I, S>(segments: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u32]>,
    {
        let mut s = TokenStream { tokens: Vec::new(), bounds: vec![0] };
        for seg in segments {
            s.tokens.extend_from_slice(seg.as_ref());
            s.bounds.push(s.tokens.len());
        }
        s
    }

    pub fn segments(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.bounds.windows(2).map(|w| &self.tokens[w[0]..w[1]])
    }

    pub fn num_segments(&self) -> usize {
        self.bounds.len().saturating_sub(1)
    }

    /// Total number of tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Expands every observation note into `repetitions` independent uniform
/// permutations of its token multiset, each its own segment.
pub fn build_shuffled_corpus(eras: &[EraView], repetitions: usize, seed: u64) -> Result<TokenStream> {
    if repetitions == 0 {
        return Err(Error::config("repetitions must be at least 1"));
    }
    let per_era: Vec<Vec<Vec<u32>>> = eras
        .par_iter()
        .map(|era| {
            let mut segs = Vec::with_capacity(era.notes.len() * repetitions);
            for (k, note) in era.notes.iter().enumerate() {
                let multiset: Vec<u32> = note
                    .bag
                    .entries()
                    .iter()
                    .flat_map(|&(id, c)| std::iter::repeat_n(id, c as usize))
                    .collect();
                for r in 0..repetitions {
                    let mut rng = rng::stream(seed, &[u64::from(era.patient_id), k as u64, r as u64]);
                    let mut seg = multiset.clone();
                    seg.shuffle(&mut rng);
                    segs.push(seg);
                }
            }
            segs
        })
        .collect();
    Ok(TokenStream::from_segments(per_era.into_iter().flatten()))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Symmetric co-occurrence weights. Weights are held exactly as integers
/// scaled by `lcm(1..=W)`, so sharded counting is order independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceTable {
    vocab_size: usize,
    window: usize,
    scale: u128,
    /// Sorted by `(i, j)`; both orientations of every pair are present.
    entries: Vec<(u32, u32, u128)>,
}

impl CooccurrenceTable {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of stored (ordered) entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Common denominator of all weights.
    pub fn scale(&self) -> u128 {
        self.scale
    }

    fn find(&self, i: u32, j: u32) -> Option<u128> {
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .ok()
            .map(|k| self.entries[k].2)
    }

    /// Weight times `scale()`, exact.
    pub fn scaled_weight(&self, i: u32, j: u32) -> u128 {
        self.find(i, j).unwrap_or(0)
    }

    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.scaled_weight(i, j) as f64 / self.scale as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        let s = self.scale as f64;
        self.entries.iter().map(move |&(i, j, x)| (i, j, x as f64 / s))
    }

    pub fn scaled_entries(&self) -> &[(u32, u32, u128)] {
        &self.entries
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.2).sum::<u128>() as f64 / self.scale as f64
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries.iter().all(|&(i, j, x)| self.find(j, i) == Some(x))
    }

    /// Writes `i<TAB>j<TAB>x_ij` per stored entry.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, j, x) in self.iter() {
            writeln!(out, "{i}\t{j}\t{x}")?;
        }
        Ok(())
    }

    /// Builds a table from explicit symmetric weights (both orientations
    /// must be listed). Used for hand-made inputs.
    pub fn from_weights(vocab_size: usize, weights: &[(u32, u32, f64)]) -> Result<Self> {
        const SCALE: u128 = 1 << 40;
        let mut map: HashMap<(u32, u32), u128> = HashMap::new();
        for &(i, j, x) in weights {
            if i as usize >= vocab_size || j as usize >= vocab_size {
                return Err(Error::invalid("co-occurrence id out of range"));
            }
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::invalid("co-occurrence weights must be finite and non-negative"));
            }
            *map.entry((i, j)).or_insert(0) += (x * SCALE as f64).round() as u128;
        }
        let t = Self::from_map(vocab_size, 0, SCALE, map);
        if !t.is_symmetric() {
            return Err(Error::invalid("co-occurrence weights are not symmetric"));
        }
        Ok(t)
    }

    fn from_map(vocab_size: usize, window: usize, scale: u128, map: HashMap<(u32, u32), u128>) -> Self {
        let mut entries: Vec<(u32, u32, u128)> =
            map.into_iter().filter(|e| e.1 > 0).map(|((i, j), x)| (i, j, x)).collect();
        entries.sort_unstable();
        CooccurrenceTable { vocab_size, window, scale, entries }
    }
}

fn count_segments<'a>(
    segments: impl Iterator<Item = &'a [u32]>,
    window: usize,
    step: &[u128],
) -> HashMap<(u32, u32), u128> {
    let mut map: HashMap<(u32, u32), u128> = HashMap::new();
    for seg in segments {
        for (a, &i) in seg.iter().enumerate() {
            for (k, &j) in seg[a + 1..].iter().take(window).enumerate() {
                let w = step[k + 1];
                *map.entry((i, j)).or_insert(0) += w;
                *map.entry((j, i)).or_insert(0) += w;
            }
        }
    }
    map
}

/// Counts pairs at distance `k <= window` within each segment with weight
/// `1/k`, added to both orientations.
pub fn count_cooccurrences(stream: &TokenStream, window: usize, vocab_size: usize) -> Result<CooccurrenceTable> {
    if window == 0 {
        return Err(Error::config("window must be at least 1"));
    }
    if window > 64 {
        return Err(Error::config("window must be at most 64"));
    }
    if let Some(&bad) = stream.tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let scale = (1..=window as u128).fold(1, |acc, k| acc / gcd(acc, k) * k);
    let step: Vec<u128> = (0..=window as u128).map(|k| if k == 0 { 0 } else { scale / k }).collect();

    let segs: Vec<&[u32]> = stream.segments().collect();
    let shard = segs.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let map = segs
        .par_chunks(shard)
        .map(|chunk| count_segments(chunk.iter().copied(), window, &step))
        .reduce(HashMap::new, |mut a, b| {
            if a.len() < b.len() {
                return merge(b, a);
            }
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });
    Ok(CooccurrenceTable::from_map(vocab_size, window, scale, map))
}

fn merge(mut a: HashMap<(u32, u32), u128>, b: HashMap<(u32, u32), u128>) -> HashMap<(u32, u32), u128> {
    for (k, v) in b {
        *a.entry(k).or_insert(0) += v;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BagOfWords, DatedBag};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn era(id: u32, bags: Vec<BagOfWords>) -> EraView {
        EraView {
            patient_id: id,
            prediction_day: 400,
            notes: bags.into_iter().map(|bag| DatedBag { day: 10, bag, ccs: vec![] }).collect(),
            ccs_labels: vec![],
            task_labels: BTreeMap::new(),
        }
    }

    #[test]
    fn repetitions_are_separate_permuted_segments() {
        let e = era(1, vec![BagOfWords::from_counts([(0, 1)])]);
        let s = build_shuffled_corpus(&[e], 3, 0).unwrap();
        assert_eq!(s.num_segments(), 3);
        assert!(s.segments().all(|seg| seg == [0]));

        let bag = BagOfWords::from_counts([(0, 2), (3, 1), (5, 4)]);
        let e = era(2, vec![bag.clone(), BagOfWords::from_counts([(1, 1)])]);
        let one = build_shuffled_corpus(std::slice::from_ref(&e), 1, 9).unwrap();
        let two = build_shuffled_corpus(std::slice::from_ref(&e), 2, 9).unwrap();
        assert_eq!(two.len(), 2 * one.len());
        for seg in two.segments().take(2) {
            let mut sorted = seg.to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 0, 3, 5, 5, 5, 5]);
        }
        assert!(build_shuffled_corpus(&[e], 0, 9).is_err());
    }

    #[test]
    fn hand_counted_segment() {
        // a=0 b=1 c=2
        let s = TokenStream::from_segments([vec![0u32, 1, 2]]);
        let t = count_cooccurrences(&s, 2, 3).unwrap();
        assert_eq!(t.get(0, 1), 1.0);
        assert_eq!(t.get(1, 2), 1.0);
        assert_eq!(t.get(0, 2), 0.5);
        assert_eq!(t.get(2, 0), 0.5);
        assert_eq!(t.get(0, 0), 0.0);
        assert_eq!(t.len(), 6);
        assert!(t.is_symmetric());
    }

    #[test]
    fn segments_isolate_windows() {
        let s = TokenStream::from_segments([vec![0u32], vec![1]]);
        for w in [1, 3, 10] {
            assert!(count_cooccurrences(&s, w, 2).unwrap().is_empty());
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let s = TokenStream::from_segments([vec![0u32, 7]]);
        assert!(count_cooccurrences(&s, 2, 5).is_err());
        assert!(count_cooccurrences(&s, 0, 10).is_err());
    }

    #[test]
    fn tsv_dump_lists_every_entry() {
        let s = TokenStream::from_segments([vec![0u32, 1]]);
        let t = count_cooccurrences(&s, 1, 2).unwrap();
        let mut out = Vec::new();
        t.write_tsv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0\t1\t1\n1\t0\t1\n");
    }

    proptest! {
        #[test]
        fn table_is_symmetric_and_mass_matches(
            segs in prop::collection::vec(prop::collection::vec(0u32..12, 0..20), 1..8),
            w in 1usize..6,
        ) {
            let s = TokenStream::from_segments(&segs);
            let t = count_cooccurrences(&s, w, 12).unwrap();
            prop_assert!(t.is_symmetric());
            let expected: f64 = segs
                .iter()
                .map(|seg| {
                    (1..=w).map(|k| 2.0 * seg.len().saturating_sub(k) as f64 / k as f64).sum::<f64>()
                })
                .sum();
            prop_assert!((t.total_mass() - expected).abs() < 1e-9 * (1.0 + expected));
        }
    }
}
