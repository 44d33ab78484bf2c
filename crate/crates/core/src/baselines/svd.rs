use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::tfidf::select_vocabulary;
use crate::corpus::{BagOfWords, EraView};
use crate::embed::PatientRepresentation;
use crate::error::{Error, Result};
use crate::rng;

/// A matrix known only through products with dense blocks.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A x` for an `ncols x b` block.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// `A^T y` for an `nrows x b` block.
    fn apply_t(&self, y: &DMatrix<f64>) -> DMatrix<f64>;
    fn frobenius_sq(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(pub DMatrix<f64>);

impl LinearOperator for DenseMatrix {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }
    fn ncols(&self) -> usize {
        self.0.ncols()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.0 * x
    }
    fn apply_t(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.tr_mul(y)
    }
    fn frobenius_sq(&self) -> f64 {
        self.0.norm_squared()
    }
}

/// Sparse word-by-patient counts stored by column.
#[derive(Debug, Clone, PartialEq)]
pub struct TermPatientMatrix {
    pub word_ids: Vec<u32>,
    pub patient_ids: Vec<u32>,
    /// Per patient: `(row, value)` pairs sorted by row.
    pub columns: Vec<Vec<(u32, f64)>>,
}

impl TermPatientMatrix {
    /// Rows are the `cap` most frequent training words; one column per era.
    pub fn from_eras(eras: &[EraView], cap: usize) -> Result<Self> {
        if eras.is_empty() || cap == 0 {
            return Err(Error::invalid("term-patient matrix needs eras and a positive cap"));
        }
        let word_ids = select_vocabulary(eras, cap);
        let columns = eras.iter().map(|e| Self::column(&word_ids, &e.patient_bag())).collect();
        Ok(TermPatientMatrix { word_ids, patient_ids: eras.iter().map(|e| e.patient_id).collect(), columns })
    }

    fn column(word_ids: &[u32], bag: &BagOfWords) -> Vec<(u32, f64)> {
        bag.entries()
            .iter()
            .filter_map(|&(id, c)| word_ids.binary_search(&id).ok().map(|r| (r as u32, f64::from(c))))
            .collect()
    }

    /// Rescales row `r` by `weights[r]` (e.g. idf).
    pub fn scale_rows(&mut self, weights: &[f64]) {
        for col in &mut self.columns {
            for (r, v) in col.iter_mut() {
                *v *= weights[*r as usize];
            }
        }
    }
}

impl LinearOperator for TermPatientMatrix {
    fn nrows(&self) -> usize {
        self.word_ids.len()
    }
    fn ncols(&self) -> usize {
        self.columns.len()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for b in 0..x.ncols() {
            for (j, col) in self.columns.iter().enumerate() {
                let xj = x[(j, b)];
                if xj != 0.0 {
                    for &(r, v) in col {
                        out[(r as usize, b)] += v * xj;
                    }
                }
            }
        }
        out
    }
    fn apply_t(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols(), y.ncols());
        for b in 0..y.ncols() {
            let yb = y.column(b);
            for (j, col) in self.columns.iter().enumerate() {
                out[(j, b)] = col.iter().map(|&(r, v)| v * yb[r as usize]).sum();
            }
        }
        out
    }
    fn frobenius_sq(&self) -> f64 {
        self.columns.iter().flatten().map(|(_, v)| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaModel {
    /// Vocabulary of the rows of the factored matrix.
    pub word_ids: Vec<u32>,
    /// Left singular vectors, `V' x K`, column-major.
    pub projection: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `P x K`, when known.
    pub right_vectors: Option<DMatrix<f64>>,
    /// `||A - U S V^T||_F / ||A||_F`.
    pub relative_residual: f64,
}

impl LsaModel {
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }
}

/// Modified Gram-Schmidt, applied twice. Columns that vanish are replaced by
/// fresh random directions so the result is always orthonormal.
fn orthonormalize(m: &mut DMatrix<f64>, seed: u64) {
    let (n, b) = m.shape();
    let mut r = rng::stream(seed, &[0x0b]);
    for j in 0..b {
        for attempt in 0..4 {
            let before = m.column(j).norm();
            for _ in 0..2 {
                for i in 0..j {
                    let proj = m.column(i).dot(&m.column(j));
                    let qi = m.column(i).into_owned();
                    m.column_mut(j).axpy(-proj, &qi, 1.0);
                }
            }
            let norm = m.column(j).norm();
            if norm > 1e-10 * before.max(1e-300) && norm > 1e-300 {
                m.column_mut(j).unscale_mut(norm);
                break;
            }
            assert!(attempt < 3, "could not complete an orthonormal basis");
            for i in 0..n {
                m[(i, j)] = r.sample(StandardNormal);
            }
        }
    }
}

/// Top-`k` singular triplets by block power (subspace) iteration with
/// oversampling and a Rayleigh-Ritz step.
pub fn truncated_svd<A: LinearOperator>(a: &A, k: usize, seed: u64) -> Result<LsaModel> {
    let (m, n) = (a.nrows(), a.ncols());
    if k == 0 || k > m.min(n) {
        return Err(Error::invalid(format!("K = {k} must lie in [1, {}]", m.min(n))));
    }
    let b = (k + 10).min(m.min(n));
    let mut r = rng::stream(seed, &[0x5bd]);
    let omega = DMatrix::from_fn(n, b, |_, _| r.sample(StandardNormal));
    let mut u = a.apply(&omega);
    orthonormalize(&mut u, seed);
    let mut prev: Vec<f64> = vec![0.0; k];
    let mut sweep = 0u64;
    let (u, sigma, vt) = loop {
        // Rayleigh-Ritz on B = U^T A through the small Gram matrix B B^T
        let mut bt = a.apply_t(&u);
        let eig = bt.tr_mul(&bt).symmetric_eigen();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let sigma: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()).collect();
        let converged = sigma[..k].iter().zip(&prev).all(|(s, p)| (s - p).abs() <= 1e-13 * sigma[0].max(1e-300));
        sweep += 1;
        // a full-width block spans the whole space after one product
        if converged || (b == m.min(n) && sweep > 1) || sweep > 500 {
            let w = DMatrix::from_fn(b, k, |i, c| eig.eigenvectors[(i, order[c])]);
            let left = &u * &w;
            let mut right = &bt * &w;
            for (c, &s) in sigma[..k].iter().enumerate() {
                if s > 0.0 {
                    right.column_mut(c).unscale_mut(s);
                }
            }
            break (left, sigma[..k].to_vec(), right);
        }
        prev = sigma[..k].to_vec();
        orthonormalize(&mut bt, seed ^ sweep);
        u = a.apply(&bt);
        orthonormalize(&mut u, seed.wrapping_add(sweep));
    };
    let total = a.frobenius_sq();
    let captured: f64 = sigma.iter().map(|s| s * s).sum();
    let relative_residual = if total > 0.0 { ((total - captured).max(0.0) / total).sqrt() } else { 0.0 };
    Ok(LsaModel { word_ids: Vec::new(), projection: u, singular_values: sigma, right_vectors: Some(vt), relative_residual })
}

/// `U^T p` for the patient's summed bag restricted to the model rows.
pub fn lsa_represent(model: &LsaModel, patient_id: u32, bag: &BagOfWords) -> PatientRepresentation {
    let k = model.k();
    let mut v = vec![0.0; k];
    for &(id, c) in bag.entries() {
        if let Ok(row) = model.word_ids.binary_search(&id) {
            for (c_out, x) in v.iter_mut().enumerate() {
                *x += model.projection[(row, c_out)] * f64::from(c);
            }
        }
    }
    PatientRepresentation { patient_id, vector: v, method: format!("lsa-{k}") }
}

/// Text layout: `K V'`, the singular values, then `word_id u_1 ... u_K` rows.
pub fn write_lsa<W: Write>(model: &LsaModel, mut out: W) -> Result<()> {
    writeln!(out, "{} {}", model.k(), model.word_ids.len())?;
    let sv: Vec<String> = model.singular_values.iter().map(|s| s.to_string()).collect();
    writeln!(out, "{}", sv.join(" "))?;
    for (r, id) in model.word_ids.iter().enumerate() {
        write!(out, "{id}")?;
        for c in 0..model.k() {
            write!(out, " {}", model.projection[(r, c)])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|f| f.parse::<f64>().map_err(|_| Error::Parse { line: lineno, msg: format!("`{f}` is not a number") }))
        .collect()
}

pub fn read_lsa<R: BufRead>(input: R) -> Result<LsaModel> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let header = parse_floats(lines.first().map_or("", String::as_str), 1)?;
    if header.len() != 2 {
        return Err(Error::Parse { line: 1, msg: "expected `K rows`".into() });
    }
    let (k, rows) = (header[0] as usize, header[1] as usize);
    let singular_values = parse_floats(lines.get(1).map_or("", String::as_str), 2)?;
    if singular_values.len() != k || lines.len() < rows + 2 {
        return Err(Error::Parse { line: 2, msg: "model file is truncated".into() });
    }
    let mut word_ids = Vec::with_capacity(rows);
    let mut projection = DMatrix::zeros(rows, k);
    for r in 0..rows {
        let vals = parse_floats(&lines[r + 2], r + 3)?;
        if vals.len() != k + 1 {
            return Err(Error::Parse { line: r + 3, msg: format!("expected {} values", k + 1) });
        }
        word_ids.push(vals[0] as u32);
        for c in 0..k {
            projection[(r, c)] = vals[c + 1];
        }
    }
    Ok(LsaModel { word_ids, projection, singular_values, right_vectors: None, relative_residual: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_dense(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let model = truncated_svd(&DenseMatrix(DMatrix::identity(5, 5)), 5, 1).unwrap();
        assert!(model.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-10));
    }

    #[test]
    fn exact_rank_two_reconstructs() {
        let a = random_dense(30, 2, 1) * random_dense(2, 20, 2);
        let model = truncated_svd(&DenseMatrix(a.clone()), 2, 3).unwrap();
        let v = model.right_vectors.as_ref().unwrap();
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(model.singular_values.clone()));
        let recon = &model.projection * s * v.transpose();
        assert!((recon - a).amax() < 1e-8);
        assert!(model.relative_residual < 1e-6);
    }

    #[test]
    fn projection_columns_are_orthonormal() {
        let model = truncated_svd(&DenseMatrix(random_dense(40, 25, 4)), 8, 1).unwrap();
        let gram = model.projection.tr_mul(&model.projection);
        assert!((gram - DMatrix::identity(8, 8)).amax() < 1e-8);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        assert!(truncated_svd(&DenseMatrix(random_dense(4, 3, 0)), 4, 0).is_err());
        assert!(truncated_svd(&DenseMatrix(random_dense(4, 3, 0)), 0, 0).is_err());
    }

    #[test]
    fn sparse_operator_matches_dense() {
        let eras: Vec<EraView> = (0..6u32)
            .map(|p| EraView {
                patient_id: p,
                prediction_day: 9,
                notes: vec![crate::corpus::DatedBag {
                    day: 0,
                    bag: BagOfWords::from_counts([(p % 3, 1 + p), (3 + p % 2, 2)]),
                    ccs: vec![],
                }],
                ccs_labels: vec![],
                task_labels: Default::default(),
            })
            .collect();
        let tp = TermPatientMatrix::from_eras(&eras, 10).unwrap();
        let dense = tp.apply(&DMatrix::identity(6, 6));
        let x = random_dense(6, 3, 9);
        assert!((tp.apply(&x) - &dense * &x).amax() < 1e-12);
        let y = random_dense(5, 2, 8);
        assert!((tp.apply_t(&y) - dense.tr_mul(&y)).amax() < 1e-12);
        let mut model = truncated_svd(&tp, 3, 2).unwrap();
        model.word_ids = tp.word_ids.clone();
        // column projections equal S times the right singular vectors
        let v = model.right_vectors.clone().unwrap();
        for (j, e) in eras.iter().enumerate() {
            let p = lsa_represent(&model, e.patient_id, &e.patient_bag());
            for c in 0..3 {
                assert!((p.vector[c] - model.singular_values[c] * v[(j, c)]).abs() < 1e-6);
            }
        }
        let zero = lsa_represent(&model, 0, &BagOfWords::default());
        assert!(zero.vector.iter().all(|&x| x == 0.0));
        let mut buf = Vec::new();
        write_lsa(&model, &mut buf).unwrap();
        let back = read_lsa(buf.as_slice()).unwrap();
        assert_eq!(back.word_ids, model.word_ids);
        assert_eq!(back.projection, model.projection);
    }
}
