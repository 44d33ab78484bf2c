use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Glove,
    Imported,
    Rnn,
    Flat,
    Random,
}

impl EmbeddingSource {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingSource::Glove => "glove",
            EmbeddingSource::Imported => "imported",
            EmbeddingSource::Rnn => "rnn",
            EmbeddingSource::Flat => "flat",
            EmbeddingSource::Random => "random",
        }
    }
}

/// Row-major `V x d` word vectors with a coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
    covered: Vec<bool>,
    bias: Option<Vec<f64>>,
    source: EmbeddingSource,
}

impl EmbeddingMatrix {
    /// Fully covered matrix from row-major data.
    pub fn new(source: EmbeddingSource, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid("embedding data length is not a multiple of dim"));
        }
        let v = data.len() / dim;
        Self::with_coverage(source, dim, data, vec![true; v])
    }

    pub fn with_coverage(source: EmbeddingSource, dim: usize, data: Vec<f64>, covered: Vec<bool>) -> Result<Self> {
        if dim == 0 || data.len() != covered.len() * dim {
            return Err(Error::invalid("embedding shape does not match coverage mask"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("embedding contains non-finite entries"));
        }
        Ok(EmbeddingMatrix { dim, data, covered, bias: None, source })
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.vocab_size() {
            return Err(Error::invalid("bias length differs from vocabulary size"));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    /// Uniform entries in `[-scale, scale)`.
    pub fn random(vocab_size: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[0xe4b]);
        let data = (0..vocab_size * dim).map(|_| r.random_range(-scale..scale)).collect();
        Self::new(EmbeddingSource::Random, dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.covered.len()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn is_covered(&self, id: u32) -> bool {
        self.covered.get(id as usize).copied().unwrap_or(false)
    }

    pub fn coverage_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    /// The row of a covered word.
    pub fn row(&self, id: u32) -> Option<&[f64]> {
        self.is_covered(id).then(|| {
            let s = id as usize * self.dim;
            &self.data[s..s + self.dim]
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Writes covered rows as `token v1 ... vd`.
pub fn export_embeddings<W: Write>(e: &EmbeddingMatrix, vocab: &Vocabulary, mut out: W) -> Result<()> {
    if e.vocab_size() != vocab.len() {
        return Err(Error::invalid("embedding and vocabulary sizes differ"));
    }
    for id in 0..e.vocab_size() as u32 {
        if let Some(row) = e.row(id) {
            write!(out, "{}", vocab.token(id))?;
            for x in row {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn import_embeddings(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    read_embeddings(BufReader::new(File::open(path)?), vocab)
}

/// Reads text embeddings, keeping rows whose token is in `vocab`.
pub fn read_embeddings<R: BufRead>(input: R, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let mut dim: Option<usize> = None;
    let mut rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("`{f}` is not a number"))))
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(err("row has no values".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(err(format!("expected {d} values, found {}", values.len())));
            }
            _ => {}
        }
        if let Some(id) = vocab.id(token) {
            if rows.iter().any(|r| r.0 == id) {
                return Err(err(format!("duplicate token `{token}`")));
            }
            rows.push((id, values));
        }
    }
    let dim = dim.ok_or_else(|| Error::Parse { line: 0, msg: "no embedding rows".into() })?;
    let mut data = vec![0.0; vocab.len() * dim];
    let mut covered = vec![false; vocab.len()];
    for (id, values) in rows {
        let s = id as usize * dim;
        data[s..s + dim].copy_from_slice(&values);
        covered[id as usize] = true;
    }
    EmbeddingMatrix::with_coverage(EmbeddingSource::Imported, dim, data, covered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab5() -> Vocabulary {
        Vocabulary::from_counts(["a", "b", "c", "d", "e"].iter().enumerate().map(|(i, t)| (t.to_string(), 10 - i as u64)))
    }

    #[test]
    fn partial_file_sets_coverage() {
        let v = vocab5();
        let text = "a 1 2\nzzz 0 0\nc 3 4\ne -1 0.5\n";
        let e = read_embeddings(Cursor::new(text), &v).unwrap();
        assert_eq!(e.coverage_count(), 3);
        assert_eq!(e.row(v.id("c").unwrap()).unwrap(), &[3.0, 4.0]);
        assert!(e.row(v.id("b").unwrap()).is_none());
        assert_eq!(e.source(), EmbeddingSource::Imported);
    }

    #[test]
    fn export_import_round_trip() {
        let v = vocab5();
        let e = EmbeddingMatrix::random(5, 3, 1.0, 4).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&e, &v, &mut buf).unwrap();
        let back = read_embeddings(Cursor::new(buf), &v).unwrap();
        for id in 0..5 {
            assert_eq!(back.row(id), e.row(id));
        }
    }

    #[test]
    fn malformed_lines_name_their_line() {
        let v = vocab5();
        match read_embeddings(Cursor::new("a 1 2\nb 1 x\n"), &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match read_embeddings(Cursor::new("a 1 2\n\nb 1 2 3\n"), &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_checks() {
        assert!(EmbeddingMatrix::new(EmbeddingSource::Glove, 3, vec![0.0; 7]).is_err());
        assert!(EmbeddingMatrix::new(EmbeddingSource::Glove, 1, vec![f64::NAN]).is_err());
    }
}
