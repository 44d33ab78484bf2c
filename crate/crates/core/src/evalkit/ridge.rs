//! L2-penalized logistic regression with a cross-validated lambda path.
//!
//! Features are standardized with training statistics. Each lambda on the
//! path is solved by Newton's method to a gradient norm below `grad_tol`,
//! warm-started from the previous (larger) lambda. The penalty applies to
//! the coefficients only, never the intercept.
//!
//! Wide inputs are first rotated onto an orthogonal basis of the training
//! rows (eigenvectors of `Z^T Z`, or of `Z Z^T` when there are fewer rows
//! than columns). The penalized objective is invariant under that rotation,
//! so the minimizer is the same, and in the rotated basis a diagonal
//! preconditioner makes conjugate-gradient Newton steps cheap.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Column count up to which Newton steps use a dense Cholesky solve.
const DIRECT_MAX_COLS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaPath {
    /// `n` values log-spaced from lambda_max down `decades` decades.
    Auto { n: usize, decades: f64 },
    Explicit(Vec<f64>),
}

impl Default for LambdaPath {
    fn default() -> Self {
        LambdaPath::Auto { n: 30, decades: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeConfig {
    pub lambda_path: LambdaPath,
    pub folds: usize,
    pub standardize: bool,
    pub grad_tol: f64,
    pub max_newton_iter: usize,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            lambda_path: LambdaPath::default(),
            folds: 5,
            standardize: true,
            grad_tol: 1e-8,
            max_newton_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeLogisticModel {
    /// Coefficients on the standardized scale.
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub lambda: f64,
    pub lambda_path: Vec<f64>,
    /// Mean validation deviance per lambda; `None` where some fold failed.
    pub cv_deviance: Vec<Option<f64>>,
    /// `fold_deviance[f][k]`: validation deviance of fold `f` at lambda `k`.
    pub fold_deviance: Vec<Vec<Option<f64>>>,
}

impl RidgeLogisticModel {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    /// Coefficients and intercept on the original feature scale.
    pub fn raw_coefficients(&self) -> (Vec<f64>, f64) {
        let beta: Vec<f64> = self.coef.iter().zip(&self.scales).map(|(b, s)| b / s).collect();
        let shift: f64 = beta.iter().zip(&self.means).map(|(b, m)| b * m).sum();
        (beta, self.intercept - shift)
    }

    pub fn decision_function(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} features, got {}", self.dim(), x.len())));
        }
        Ok(self.intercept
            + x.iter()
                .zip(&self.means)
                .zip(&self.scales)
                .zip(&self.coef)
                .map(|(((x, m), s), b)| (x - m) / s * b)
                .sum::<f64>())
    }
}

pub fn predict_proba(model: &RidgeLogisticModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    rows.iter().map(|r| model.decision_function(r).map(sigmoid)).collect()
}

fn sigmoid(x: f64) -> f64 {
    crate::synthgen::sigmoid(x)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean negative log-likelihood of labels `y` under linear predictor `eta`.
pub fn mean_nll(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter().zip(y).map(|(&e, &t)| softplus(e) - t * e).sum::<f64>() / eta.len() as f64
}

/// `mean_nll + lambda/2 * |beta|^2` for standardized rows `z`.
pub fn penalized_objective(z: &[Vec<f64>], y: &[f64], beta: &[f64], intercept: f64, lambda: f64) -> f64 {
    let eta: Vec<f64> = z
        .iter()
        .map(|r| intercept + r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    mean_nll(&eta, y) + 0.5 * lambda * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Per-column mean and population standard deviation (1 for constant columns).
pub fn column_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardized(rows: &[&Vec<f64>], mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), mean.len(), |i, j| (rows[i][j] - mean[j]) / scale[j])
}

/// Solution of one penalized problem.
#[derive(Debug, Clone)]
pub struct Solution {
    pub beta: DVector<f64>,
    pub intercept: f64,
    /// Objective after each accepted Newton iterate, starting point first.
    pub objective_trace: Vec<f64>,
    pub grad_norm: f64,
}

/// Mixing weight used to turn the lasso lambda_max rule into a ridge one.
const RIDGE_ALPHA_SURROGATE: f64 = 1e-3;

/// Design matrix prepared for repeated Newton solves.
struct Design {
    z: DMatrix<f64>,
    /// Single-precision copies used only for Hessian-vector products.
    z32: Option<DMatrix<f32>>,
    z_sq32: Option<DMatrix<f32>>,
}

impl Design {
    fn new(z: DMatrix<f64>) -> Self {
        let wide = z.ncols() > DIRECT_MAX_COLS;
        let z32 = wide.then(|| z.map(|x| x as f32));
        let z_sq32 = wide.then(|| z.map(|x| (x * x) as f32));
        Design { z, z32, z_sq32 }
    }

    fn n(&self) -> usize {
        self.z.nrows()
    }
}

struct State {
    eta: DVector<f64>,
    mu: DVector<f64>,
    grad: DVector<f64>,
    grad_b: f64,
    objective: f64,
}

fn evaluate(d: &Design, y: &DVector<f64>, lambda: f64, beta: &DVector<f64>, b: f64) -> State {
    let n = d.n() as f64;
    let eta = &d.z * beta;
    let eta = eta.add_scalar(b);
    let mu = eta.map(sigmoid);
    let resid = &mu - y;
    let grad = d.z.tr_mul(&resid) / n + beta * lambda;
    let grad_b = resid.sum() / n;
    let objective = mean_nll(eta.as_slice(), y.as_slice()) + 0.5 * lambda * beta.norm_squared();
    State { eta, mu, grad, grad_b, objective }
}

/// Minimizes `mean_nll + lambda/2 |beta|^2` by damped Newton from the given start.
fn newton(
    d: &Design,
    y: &DVector<f64>,
    lambda: f64,
    start: (DVector<f64>, f64),
    tol: f64,
    max_iter: usize,
) -> Option<Solution> {
    let (mut beta, mut b) = start;
    let mut s = evaluate(d, y, lambda, &beta, b);
    let mut trace = vec![s.objective];
    for _ in 0..max_iter {
        let gnorm = (s.grad.norm_squared() + s.grad_b * s.grad_b).sqrt();
        if !gnorm.is_finite() {
            return None;
        }
        if gnorm < tol {
            return Some(Solution { beta, intercept: b, objective_trace: trace, grad_norm: gnorm });
        }
        let w = s.mu.map(|m| m * (1.0 - m));
        let (step, step_b) = if d.z.ncols() <= DIRECT_MAX_COLS {
            direct_step(d, &w, lambda, &s)?
        } else {
            cg_step(d, &w, lambda, &s, gnorm)
        };
        // eta moves linearly along the step
        let z_step = &d.z * &step;
        let slope = s.grad.dot(&step) + s.grad_b * step_b;
        let objective_at = |t: f64| {
            let eta_t: Vec<f64> = s.eta.iter().zip(z_step.iter()).map(|(e, zs)| e + t * (zs + step_b)).collect();
            mean_nll(&eta_t, y.as_slice()) + 0.5 * lambda * (&beta + &step * t).norm_squared()
        };
        let full = objective_at(1.0);
        if full <= s.objective + 1e-4 * slope {
            beta += &step;
            b += step_b;
            s = evaluate(d, y, lambda, &beta, b);
        } else if full - s.objective <= 1e-10 * s.objective.abs().max(1.0) {
            // the objective no longer resolves progress; judge the full step by the gradient
            let (beta_t, b_t) = (&beta + &step, b + step_b);
            let s_t = evaluate(d, y, lambda, &beta_t, b_t);
            let gnorm_t = (s_t.grad.norm_squared() + s_t.grad_b * s_t.grad_b).sqrt();
            if gnorm_t >= gnorm {
                break;
            }
            (beta, b, s) = (beta_t, b_t, s_t);
        } else {
            let mut t = 0.5;
            while objective_at(t) > s.objective + 1e-4 * t * slope {
                t *= 0.5;
                if t < 1e-12 {
                    return None;
                }
            }
            beta += &step * t;
            b += step_b * t;
            s = evaluate(d, y, lambda, &beta, b);
        }
        trace.push(s.objective);
    }
    let gnorm = (s.grad.norm_squared() + s.grad_b * s.grad_b).sqrt();
    (gnorm < tol).then_some(Solution { beta, intercept: b, objective_trace: trace, grad_norm: gnorm })
}

fn direct_step(d: &Design, w: &DVector<f64>, lambda: f64, s: &State) -> Option<(DVector<f64>, f64)> {
    let n = d.n() as f64;
    let p = d.z.ncols();
    let sqrt_w = w.map(f64::sqrt);
    let mut zw = d.z.clone();
    for mut col in zw.column_iter_mut() {
        col.component_mul_assign(&sqrt_w);
    }
    let mut h = DMatrix::zeros(p + 1, p + 1);
    let hzz = zw.tr_mul(&zw) / n;
    h.view_mut((0, 0), (p, p)).copy_from(&hzz);
    for j in 0..p {
        h[(j, j)] += lambda;
    }
    let cross = d.z.tr_mul(w) / n;
    for j in 0..p {
        h[(j, p)] = cross[j];
        h[(p, j)] = cross[j];
    }
    h[(p, p)] = w.sum() / n;
    let mut g = DVector::zeros(p + 1);
    g.rows_mut(0, p).copy_from(&s.grad);
    g[p] = s.grad_b;
    let chol = h.clone().cholesky().or_else(|| {
        let mut jittered = h;
        for j in 0..=p {
            jittered[(j, j)] += 1e-12;
        }
        jittered.cholesky()
    })?;
    let sol = -chol.solve(&g);
    Some((sol.rows(0, p).into_owned(), sol[p]))
}

/// Jacobi-preconditioned conjugate gradient on the Newton system.
fn cg_step(d: &Design, w: &DVector<f64>, lambda: f64, s: &State, gnorm: f64) -> (DVector<f64>, f64) {
    let n = d.n() as f64;
    let p = d.z.ncols();
    let z32 = d.z32.as_ref().expect("single-precision design for wide problems");
    let z_sq32 = d.z_sq32.as_ref().expect("squared design for wide problems");
    let w32 = w.map(|x| x as f32);
    let diag = z_sq32.tr_mul(&w32).map(|x| f64::from(x) / n);
    let diag = diag.add_scalar(lambda);
    let diag_b = (w.sum() / n).max(1e-300);
    let hv = |v: &DVector<f64>, vb: f64| -> (DVector<f64>, f64) {
        let zv = z32 * v.map(|x| x as f32);
        let u = DVector::from_iterator(zv.len(), zv.iter().zip(w.iter()).map(|(a, b)| (f64::from(*a) + vb) * b));
        let ztu = z32.tr_mul(&u.map(|x| x as f32));
        (ztu.map(|x| f64::from(x) / n) + v * lambda, u.sum() / n)
    };
    let forcing = (gnorm.sqrt()).min(0.1) * gnorm;
    let mut x = DVector::zeros(p);
    let mut xb = 0.0;
    let mut r = -&s.grad;
    let mut rb = -s.grad_b;
    let mut zr = r.component_div(&diag);
    let mut zrb = rb / diag_b;
    let mut dir = zr.clone();
    let mut dir_b = zrb;
    let mut rz = r.dot(&zr) + rb * zrb;
    for _ in 0..(2 * p + 20) {
        let (hd, hd_b) = hv(&dir, dir_b);
        let curv = dir.dot(&hd) + dir_b * hd_b;
        if curv <= 0.0 {
            break;
        }
        let alpha = rz / curv;
        x.axpy(alpha, &dir, 1.0);
        xb += alpha * dir_b;
        r.axpy(-alpha, &hd, 1.0);
        rb -= alpha * hd_b;
        if (r.norm_squared() + rb * rb).sqrt() <= forcing {
            break;
        }
        zr = r.component_div(&diag);
        zrb = rb / diag_b;
        let rz_new = r.dot(&zr) + rb * zrb;
        let beta = rz_new / rz;
        rz = rz_new;
        dir = &zr + &dir * beta;
        dir_b = zrb + beta * dir_b;
    }
    (x, xb)
}

/// Solves one penalized problem on already standardized rows, from zero
/// coefficients and the null-model intercept.
pub fn solve_penalized(z: &[Vec<f64>], y: &[f64], lambda: f64, tol: f64) -> Result<Solution> {
    let n = z.len();
    let p = z.first().map_or(0, Vec::len);
    let zm = DMatrix::from_fn(n, p, |i, j| z[i][j]);
    let yv = DVector::from_column_slice(y);
    let start = (DVector::zeros(p), null_intercept(y)?);
    newton(&Design::new(zm), &yv, lambda, start, tol, 200)
        .ok_or_else(|| Error::numeric(format!("Newton did not converge at lambda {lambda}")))
}

fn null_intercept(y: &[f64]) -> Result<f64> {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    if ybar <= 0.0 || ybar >= 1.0 {
        return Err(Error::invalid("labels must contain both classes"));
    }
    Ok((ybar / (1.0 - ybar)).ln())
}

/// Orthogonal reduction of a training design: `z = basis_out * rotated`,
/// with `beta = to_beta * gamma`.
struct Reduced {
    rotated: DMatrix<f64>,
    to_beta: DMatrix<f64>,
}

fn reduce(z: &DMatrix<f64>) -> Reduced {
    let (n, p) = z.shape();
    if p <= DIRECT_MAX_COLS {
        return Reduced { rotated: z.clone(), to_beta: DMatrix::identity(p, p) };
    }
    if n >= p {
        let gram = z.tr_mul(z);
        let eig = gram.symmetric_eigen();
        let q = eig.eigenvectors;
        Reduced { rotated: z * &q, to_beta: q }
    } else {
        let gram = z * z.transpose();
        let eig = gram.symmetric_eigen();
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-10 * top.max(1e-300)).collect();
        let r = keep.len();
        let mut rotated = DMatrix::zeros(n, r);
        let mut u_scaled = DMatrix::zeros(n, r);
        for (c, &k) in keep.iter().enumerate() {
            let root = eig.eigenvalues[k].sqrt();
            let u = eig.eigenvectors.column(k);
            rotated.set_column(c, &(u * root));
            u_scaled.set_column(c, &(u / root));
        }
        Reduced { rotated, to_beta: z.tr_mul(&u_scaled) }
    }
}

fn lambda_values(path: &LambdaPath, z: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    match path {
        LambdaPath::Explicit(v) => {
            if v.is_empty() || v.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                return Err(Error::invalid("lambda path must hold positive finite values"));
            }
            let mut v = v.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            Ok(v)
        }
        LambdaPath::Auto { n, decades } => {
            if *n == 0 {
                return Err(Error::invalid("lambda path needs at least one value"));
            }
            let ybar = y.mean();
            let centered = y.add_scalar(-ybar);
            let corr = z.tr_mul(&centered) / z.nrows() as f64;
            // the lasso entry point scaled up, as ridge needs far heavier penalties to reach the null model
            let lmax = corr.amax().max(1e-8) / RIDGE_ALPHA_SURROGATE;
            Ok((0..*n)
                .map(|k| {
                    let t = if *n > 1 { k as f64 / (*n - 1) as f64 } else { 0.0 };
                    lmax * 10f64.powf(-decades * t)
                })
                .collect())
        }
    }
}

/// Solves the whole (descending) path with warm starts. Failed lambdas are
/// `None` and do not advance the warm start.
fn solve_path(design: &Design, y: &DVector<f64>, lambdas: &[f64], cfg: &RidgeConfig) -> Result<Vec<Option<(DVector<f64>, f64)>>> {
    let p = design.z.ncols();
    let mut warm = (DVector::zeros(p), null_intercept(y.as_slice())?);
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        match newton(design, y, lambda, warm.clone(), cfg.grad_tol, cfg.max_newton_iter) {
            Some(sol) => {
                warm = (sol.beta.clone(), sol.intercept);
                out.push(Some((sol.beta, sol.intercept)));
            }
            None => {
                warn!("ridge-logistic: Newton did not converge at lambda {lambda:.3e}; skipped");
                out.push(None);
            }
        }
    }
    Ok(out)
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut assign = vec![0; labels.len()];
    let mut r = rng::stream(seed, &[0xf01d]);
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        for (k, i) in idx.into_iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    assign
}

/// Fits the model, choosing lambda by minimum mean validation deviance.
pub fn fit_ridge_logistic(rows: &[Vec<f64>], labels: &[bool], cfg: &RidgeConfig, seed: u64) -> Result<RidgeLogisticModel> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("rows have inconsistent dimensions"));
    }
    if labels.len() != n {
        return Err(Error::invalid("row and label counts differ"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::invalid("labels must contain both classes"));
    }
    if cfg.folds < 2 || n < cfg.folds || n_pos < cfg.folds || n - n_pos < cfg.folds {
        return Err(Error::Insufficient(format!(
            "{n} samples ({n_pos} positive) cannot fill {} folds",
            cfg.folds
        )));
    }
    let y_all: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let all_refs: Vec<&Vec<f64>> = rows.iter().collect();
    let (means, scales) = if cfg.standardize {
        column_stats(rows, dim)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let z_all = standardized(&all_refs, &means, &scales);
    let y_vec = DVector::from_column_slice(&y_all);
    let lambdas = lambda_values(&cfg.lambda_path, &z_all, &y_vec)?;

    let assign = stratified_folds(labels, cfg.folds, seed);
    let mut fold_deviance = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let tr: Vec<usize> = (0..n).filter(|&i| assign[i] != f).collect();
        let va: Vec<usize> = (0..n).filter(|&i| assign[i] == f).collect();
        let tr_rows: Vec<&Vec<f64>> = tr.iter().map(|&i| &rows[i]).collect();
        let va_rows: Vec<&Vec<f64>> = va.iter().map(|&i| &rows[i]).collect();
        let tr_owned: Vec<Vec<f64>> = tr_rows.iter().map(|r| (*r).clone()).collect();
        let (m, s) = if cfg.standardize {
            column_stats(&tr_owned, dim)
        } else {
            (vec![0.0; dim], vec![1.0; dim])
        };
        let z_tr = standardized(&tr_rows, &m, &s);
        let z_va = standardized(&va_rows, &m, &s);
        let y_tr = DVector::from_iterator(tr.len(), tr.iter().map(|&i| y_all[i]));
        let y_va: Vec<f64> = va.iter().map(|&i| y_all[i]).collect();
        let red = reduce(&z_tr);
        let z_va_rot = &z_va * &red.to_beta;
        let path = solve_path(&Design::new(red.rotated), &y_tr, &lambdas, cfg)?;
        let devs = path
            .iter()
            .map(|sol| {
                sol.as_ref().map(|(gamma, b)| {
                    let eta = (&z_va_rot * gamma).add_scalar(*b);
                    2.0 * mean_nll(eta.as_slice(), &y_va)
                })
            })
            .collect::<Vec<_>>();
        fold_deviance.push(devs);
    }

    let cv_deviance: Vec<Option<f64>> = (0..lambdas.len())
        .map(|k| {
            let vals: Option<Vec<f64>> = fold_deviance.iter().map(|f| f[k]).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let best = cv_deviance
        .iter()
        .enumerate()
        .filter_map(|(k, d)| d.map(|d| (k, d)))
        .fold(None, |acc: Option<(usize, f64)>, (k, d)| match acc {
            Some((_, bd)) if bd <= d => acc,
            _ => Some((k, d)),
        })
        .ok_or_else(|| Error::numeric("no lambda converged in every fold"))?
        .0;

    // refit on all data along the path prefix down to the chosen lambda
    let red = reduce(&z_all);
    let path = solve_path(&Design::new(red.rotated), &y_vec, &lambdas[..=best], cfg)?;
    let (gamma, intercept) = path
        .last()
        .cloned()
        .flatten()
        .ok_or_else(|| Error::numeric("final refit did not converge"))?;
    let coef = &red.to_beta * gamma;
    Ok(RidgeLogisticModel {
        coef: coef.iter().copied().collect(),
        intercept,
        means,
        scales,
        lambda: lambdas[best],
        lambda_path: lambdas,
        cv_deviance,
        fold_deviance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::metrics::auroc;
    use rand::{Rng, SeedableRng};

    fn random_problem(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let labels = rows
            .iter()
            .map(|x| {
                let eta: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
                r.random::<f64>() < sigmoid(eta)
            })
            .collect();
        (rows, labels)
    }

    fn standardize_rows(rows: &[Vec<f64>], m: &[f64], s: &[f64]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) / s).collect()).collect()
    }

    /// Plain gradient descent with a fixed step, run for a long time.
    fn gd_oracle(z: &[Vec<f64>], y: &[f64], lambda: f64, iters: usize) -> f64 {
        let d = z[0].len();
        let n = z.len() as f64;
        let mut beta = vec![0.0; d];
        let mut b = 0.0;
        // the Hessian is bounded by max|z|^2/4 + lambda
        let lip = z.iter().map(|r| 1.0 + r.iter().map(|x| x * x).sum::<f64>()).fold(0.0, f64::max) / 4.0 + lambda;
        let step = 1.0 / lip;
        for _ in 0..iters {
            let mut gb = 0.0;
            let mut g = vec![0.0; d];
            for (row, &t) in z.iter().zip(y) {
                let e = b + row.iter().zip(&beta).map(|(a, c)| a * c).sum::<f64>();
                let r = sigmoid(e) - t;
                gb += r / n;
                for (gj, x) in g.iter_mut().zip(row) {
                    *gj += r * x / n;
                }
            }
            for ((bj, gj), _) in beta.iter_mut().zip(&g).zip(0..) {
                *bj -= step * (gj + lambda * *bj);
            }
            b -= step * gb;
        }
        penalized_objective(z, y, &beta, b, lambda)
    }

    #[test]
    fn huge_lambda_gives_null_model() {
        let (rows, labels) = random_problem(60, 3, 1);
        let cfg = RidgeConfig { lambda_path: LambdaPath::Explicit(vec![1e6]), ..Default::default() };
        let m = fit_ridge_logistic(&rows, &labels, &cfg, 0).unwrap();
        assert!(m.coef.iter().all(|c| c.abs() < 1e-4));
        let ybar = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        assert!((m.intercept - (ybar / (1.0 - ybar)).ln()).abs() < 1e-6);
    }

    #[test]
    fn ordered_one_dimensional_data_is_separated() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 25).collect();
        let cfg = RidgeConfig { lambda_path: LambdaPath::Explicit(vec![1e-3]), ..Default::default() };
        let m = fit_ridge_logistic(&rows, &labels, &cfg, 0).unwrap();
        let scores = predict_proba(&m, &rows).unwrap();
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let (rows, labels) = random_problem(30, 3, 11);
        let m = fit_ridge_logistic(&rows, &labels, &RidgeConfig::default(), 5).unwrap();
        let z = standardize_rows(&rows, &m.means, &m.scales);
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let ours = penalized_objective(&z, &y, &m.coef, m.intercept, m.lambda);
        let oracle = gd_oracle(&z, &y, m.lambda, 200_000);
        assert!(ours <= oracle + 1e-6, "ours {ours} oracle {oracle}");
        assert!(m.lambda_path.contains(&m.lambda));
        assert_eq!(m.lambda_path.len(), 30);
    }

    #[test]
    fn wide_and_narrow_solvers_agree() {
        // 40 rows, 150 columns exercises the row-space reduction and CG steps
        let (rows, labels) = random_problem(40, 150, 2);
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let (m, s) = column_stats(&rows, 150);
        let z = standardize_rows(&rows, &m, &s);
        let lambda = 0.05;
        let direct = solve_penalized(&z, &y, lambda, 1e-10).unwrap();
        let zm = DMatrix::from_fn(40, 150, |i, j| z[i][j]);
        let red = reduce(&zm);
        assert!(red.rotated.ncols() <= 40);
        let yv = DVector::from_column_slice(&y);
        let sol = newton(&Design::new(red.rotated.clone()), &yv, lambda, (DVector::zeros(red.rotated.ncols()), 0.0), 1e-10, 100).unwrap();
        let beta = &red.to_beta * &sol.beta;
        let obj_red = penalized_objective(&z, &y, beta.as_slice(), sol.intercept, lambda);
        let obj_direct = penalized_objective(&z, &y, direct.beta.as_slice(), direct.intercept, lambda);
        assert!((obj_red - obj_direct).abs() < 1e-10);
        assert!((beta - &direct.beta).amax() < 1e-6);
    }

    #[test]
    fn newton_objective_decreases() {
        let (rows, labels) = random_problem(80, 4, 9);
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
        let (m, s) = column_stats(&rows, 4);
        let sol = solve_penalized(&standardize_rows(&rows, &m, &s), &y, 1e-3, 1e-8).unwrap();
        assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(sol.grad_norm < 1e-8);
    }

    #[test]
    fn uniform_feature_scaling_preserves_ranking() {
        let (rows, labels) = random_problem(50, 4, 4);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * 1000.0).collect()).collect();
        let cfg = RidgeConfig::default();
        let a = fit_ridge_logistic(&rows, &labels, &cfg, 1).unwrap();
        let b = fit_ridge_logistic(&scaled, &labels, &cfg, 1).unwrap();
        let pa = predict_proba(&a, &rows).unwrap();
        let pb = predict_proba(&b, &scaled).unwrap();
        let order = |p: &[f64]| {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
            idx
        };
        assert_eq!(order(&pa), order(&pb));
    }

    #[test]
    fn predict_proba_behaviour() {
        let model = RidgeLogisticModel {
            coef: vec![0.0, 0.0],
            intercept: 0.3,
            means: vec![0.0; 2],
            scales: vec![1.0; 2],
            lambda: 1.0,
            lambda_path: vec![1.0],
            cv_deviance: vec![],
            fold_deviance: vec![],
        };
        let p = predict_proba(&model, &[vec![1.0, 2.0], vec![-4.0, 9.0]]).unwrap();
        assert!(p.iter().all(|&v| (v - sigmoid(0.3)).abs() < 1e-15));
        assert!(predict_proba(&model, &[vec![1.0]]).is_err());
        // hand computation: z = (x - m)/s, eta = b + coef.z
        let model = RidgeLogisticModel { coef: vec![2.0, -1.0], means: vec![1.0, 0.0], scales: vec![2.0, 1.0], ..model };
        let p = predict_proba(&model, &[vec![3.0, 1.0], vec![1.0, 0.5]]).unwrap();
        let want = [1.0 / (1.0 + (-1.3f64).exp()), 1.0 / (1.0 + (-(-0.2f64)).exp())];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let p2 = predict_proba(&model, &[vec![5.0, 1.0]]).unwrap();
        assert!(p2[0] > p[0]);
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = vec![vec![1.0]; 10];
        assert!(fit_ridge_logistic(&rows, &[true; 10], &RidgeConfig::default(), 0).is_err());
    }
}
