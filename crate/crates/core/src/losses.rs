//! Training objectives, stochastic trace and log-determinant estimators, and
//! exact parameter gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iresnet::{Block, Gradient, InversionConfig, Model, ModelTape};
use crate::numerics::{Matrix, Rng, Vector};
use crate::prior::Prior;
use crate::problem::{Dataset, LinearProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Approx,
    Reco,
    Logdet,
    Div,
    DivEquiv,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Approx,
        Objective::Reco,
        Objective::Logdet,
        Objective::Div,
        Objective::DivEquiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Approx => "approx",
            Objective::Reco => "reco",
            Objective::Logdet => "logdet",
            Objective::Div => "div",
            Objective::DivEquiv => "div_equiv",
        }
    }

    /// Objectives whose theory says the trained model ignores the data noise.
    pub fn noise_invariant(self) -> bool {
        matches!(self, Objective::Approx | Objective::Logdet | Objective::Div)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| LossError::UnknownObjective(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("unknown objective {0:?} (expected approx, reco, logdet, div or div_equiv)")]
    UnknownObjective(String),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("objective div_equiv needs precomputed targets in the batch")]
    MissingTargets,
    #[error("objective logdet needs a square operator")]
    NotSquare,
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    /// Regularization weight `delta_hat`; the penalty is scaled by its square.
    pub reg_weight: f64,
    /// 0 selects the exact trace.
    pub hutchinson_probes: usize,
    /// 0 selects the exact log-determinant.
    pub powerseries_terms: usize,
    pub reco_unroll_iters: usize,
    pub reco_gradient: RecoGradient,
}

/// How the reconstruction loss is differentiated through the inversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoGradient {
    /// Backpropagate through exactly `reco_unroll_iters` fixed-point steps.
    #[default]
    Unrolled,
    /// Iterate to convergence (at most `reco_unroll_iters` steps) and solve
    /// the adjoint equation `(I - Df)^T lambda = a` per sample.
    Implicit,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Approx,
            reg_weight: 0.0,
            hutchinson_probes: 0,
            powerseries_terms: 0,
            reco_unroll_iters: 50,
            reco_gradient: RecoGradient::Unrolled,
        }
    }
}

impl LossConfig {
    pub fn new(objective: Objective, reg_weight: f64) -> Self {
        Self {
            objective,
            reg_weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(LossError::Config(format!("reg_weight must be >= 0, got {}", self.reg_weight)));
        }
        if self.objective == Objective::Reco && self.reco_unroll_iters == 0 {
            return Err(LossError::Config("reco_unroll_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Probes per element used for the regularizer; `None` when exact.
    fn probes(&self) -> Option<usize> {
        match self.objective {
            Objective::Div if self.hutchinson_probes > 0 => Some(self.hutchinson_probes),
            Objective::Logdet if self.powerseries_terms > 0 => Some(self.hutchinson_probes.max(1)),
            _ => None,
        }
    }
}

/// A mini-batch, one sample per column. `target` holds the `div_equiv`
/// regression targets when that objective is used.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
    pub z: Matrix,
    pub target: Option<Matrix>,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix, z: Matrix) -> Self {
        Self { x, y, z, target: None }
    }

    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Self {
        let pick = |m: &Matrix| Matrix::from_fn(m.nrows(), indices.len(), |r, c| m[(r, indices[c])]);
        Self::new(pick(&data.xs), pick(&data.ys), pick(&data.zs))
    }

    pub fn with_equiv_targets(mut self, prior: &Prior, problem: &LinearProblem, reg_weight: f64) -> Self {
        self.target = Some(equiv_targets(&self.x, prior, problem, reg_weight));
        self
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `A^T A x - delta_hat^2 score(x)` column-wise.
pub fn equiv_targets(x: &Matrix, prior: &Prior, problem: &LinearProblem, reg_weight: f64) -> Matrix {
    let d2 = reg_weight * reg_weight;
    let mut t = problem.normal() * x;
    for c in 0..x.ncols() {
        let s = prior.score(&x.column(c).into_owned());
        for r in 0..x.nrows() {
            t[(r, c)] -= d2 * s[r];
        }
    }
    t
}

fn half_mean_sq(a: &Matrix, b: &Matrix) -> f64 {
    0.5 * (a - b).norm_squared() / a.ncols() as f64
}

/// Mean of `1/2 |phi(x) - z|^2`.
pub fn loss_approx(model: &Model, x: &Matrix, z: &Matrix) -> f64 {
    half_mean_sq(&model.forward_batch(x), z)
}

/// Mean of `1/2 |x - psi(z)|^2` with `psi` by fixed-point inversion; the
/// second value counts samples whose inversion did not converge.
pub fn loss_reco(model: &Model, x: &Matrix, z: &Matrix, inv: &InversionConfig) -> (f64, usize) {
    let r = model.invert_batch(z, inv);
    (half_mean_sq(x, &r.x), r.failures())
}

/// Mean of `1/2 |phi(x) - y|^2 - delta_hat^2 log|det D phi(x)|`, exact.
pub fn loss_logdet(model: &Model, x: &Matrix, y: &Matrix, reg_weight: f64) -> f64 {
    let tape = model.tape(x, true);
    let reg: f64 = (0..x.ncols()).map(|b| tape.logdet(model, b)).sum::<f64>() / x.ncols() as f64;
    half_mean_sq(tape.output(), y) - reg_weight * reg_weight * reg
}

/// Mean of `1/2 |phi(x) - z|^2 - delta_hat^2 div phi(x)`, exact.
pub fn loss_div(model: &Model, x: &Matrix, z: &Matrix, reg_weight: f64) -> f64 {
    let tape = model.tape(x, true);
    let reg: f64 = (0..x.ncols()).map(|b| tape.divergence(model, b)).sum::<f64>() / x.ncols() as f64;
    half_mean_sq(tape.output(), z) - reg_weight * reg_weight * reg
}

/// Mean of `1/2 |phi(x) - (A^T A x - delta_hat^2 score(x))|^2`.
pub fn loss_div_equiv(model: &Model, x: &Matrix, reg_weight: f64, prior: &Prior, problem: &LinearProblem) -> f64 {
    half_mean_sq(&model.forward_batch(x), &equiv_targets(x, prior, problem, reg_weight))
}

/// Per-probe values `<e, D phi(x) e>`, each via one directional derivative.
pub fn hutchinson_samples(model: &Model, x: &Vector, probes: usize, rng: &mut Rng) -> Vec<f64> {
    let n = x.len();
    let eps = Matrix::from_fn(n, probes, |_, _| rng.normal());
    let xs = Matrix::from_fn(n, probes, |r, _| x[r]);
    let (_, t) = model.jvp_batch(&xs, &eps);
    (0..probes).map(|c| eps.column(c).dot(&t.column(c))).collect()
}

/// Hutchinson estimate of `tr D phi(x)` from `probes` Gaussian probes.
pub fn hutchinson_divergence(model: &Model, x: &Vector, probes: usize, rng: &mut Rng) -> f64 {
    let s = hutchinson_samples(model, x, probes.max(1), rng);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Per-probe truncated-series values `-sum_k <e, (Df)^k e> / k` for one block.
pub fn logdet_power_series_samples(block: &Block, x: &Vector, terms: usize, probes: usize, rng: &mut Rng) -> Vec<f64> {
    let n = x.len();
    let lin = block.linearize(x);
    let eps = Matrix::from_fn(n, probes, |_, _| rng.normal());
    let mut v = eps.clone();
    let mut out = vec![0.0; probes];
    for k in 1..=terms.max(1) {
        v = lin.apply(&v);
        for (c, o) in out.iter_mut().enumerate() {
            *o -= eps.column(c).dot(&v.column(c)) / k as f64;
        }
    }
    out
}

/// Truncated power-series estimate of `log det(I - Df(x))` for one block.
pub fn logdet_power_series(block: &Block, x: &Vector, terms: usize, probes: usize, rng: &mut Rng) -> f64 {
    let s = logdet_power_series_samples(block, x, terms, probes.max(1), rng);
    s.iter().sum::<f64>() / s.len() as f64
}

/// The same series with exact traces of the powers.
pub fn logdet_power_series_exact_trace(block: &Block, x: &Vector, terms: usize) -> f64 {
    let j = block.linearize(x).matrix();
    let mut p = Matrix::identity(j.nrows(), j.nrows());
    let mut total = 0.0;
    for k in 1..=terms.max(1) {
        p = &p * &j;
        total -= p.trace() / k as f64;
    }
    total
}

/// Sum of block estimates along the forward pass through `model`.
pub fn model_logdet_power_series(model: &Model, x: &Vector, terms: usize, probes: usize, rng: &mut Rng) -> f64 {
    model
        .block_inputs(x)
        .iter()
        .zip(model.blocks())
        .map(|(xi, b)| logdet_power_series(b, xi, terms, probes, rng))
        .sum()
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub gradient: Gradient,
    /// Largest final unrolled step over the batch (reconstruction only).
    pub unroll_residual: f64,
}

/// Loss of the configured objective on `batch` and its exact gradient.
/// Probe draws (when estimators are selected) come from `rng`, one set per
/// batch element, in column order.
pub fn loss_and_gradient(model: &Model, batch: &Batch, cfg: &LossConfig, rng: &mut Rng) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let bsz = batch.len() as f64;
    let d2 = cfg.reg_weight * cfg.reg_weight;
    let (loss, gradient, unroll_residual) = match cfg.objective {
        Objective::Approx | Objective::DivEquiv => {
            let target = match cfg.objective {
                Objective::Approx => &batch.z,
                _ => batch.target.as_ref().ok_or(LossError::MissingTargets)?,
            };
            let tape = model.tape(&batch.x, false);
            let r = tape.output() - target;
            let loss = 0.5 * r.norm_squared() / bsz;
            let (g, _) = model.backward(&tape, &(r / bsz), &[]);
            (loss, g, 0.0)
        }
        Objective::Div => {
            let tape = model.tape(&batch.x, true);
            let r = tape.output() - &batch.z;
            let fit = 0.5 * r.norm_squared() / bsz;
            let (reg, g_jb) = divergence_cotangents(model, &tape, d2 / bsz, cfg.probes(), rng);
            let (g, _) = model.backward(&tape, &(r / bsz), &g_jb);
            (fit - d2 * reg / bsz, g, 0.0)
        }
        Objective::Logdet => {
            if batch.y.nrows() != batch.x.nrows() {
                return Err(LossError::NotSquare);
            }
            let tape = model.tape(&batch.x, true);
            let r = tape.output() - &batch.y;
            let fit = 0.5 * r.norm_squared() / bsz;
            let (reg, g_jb) = logdet_cotangents(model, &tape, d2 / bsz, cfg, rng);
            let (g, _) = model.backward(&tape, &(r / bsz), &g_jb);
            (fit - d2 * reg / bsz, g, 0.0)
        }
        Objective::Reco => match cfg.reco_gradient {
            RecoGradient::Unrolled => reco_unrolled(model, batch, cfg.reco_unroll_iters),
            RecoGradient::Implicit => reco_implicit(model, batch, cfg.reco_unroll_iters),
        },
    };
    if !loss.is_finite() {
        return Err(LossError::NonFiniteLoss(loss));
    }
    if let Some(name) = gradient.first_non_finite() {
        return Err(LossError::NonFiniteGradient(name));
    }
    Ok(LossOutput {
        loss,
        gradient,
        unroll_residual,
    })
}

fn empty_slabs(model: &Model, n: usize, cols: usize) -> Vec<Option<Matrix>> {
    (0..model.blocks().len()).map(|_| Some(Matrix::zeros(n, n * cols))).collect()
}

fn write_slab(slab: &mut Matrix, g: &Matrix, b: usize, cols: usize) {
    let n = g.nrows();
    for j in 0..n {
        for i in 0..n {
            slab[(i, j * cols + b)] = g[(i, j)];
        }
    }
}

/// Summed (exact or estimated) divergence over the batch and cotangents of
/// each block Jacobian for the penalty `-scale * sum_b tr(D phi)`.
fn divergence_cotangents(model: &Model, tape: &ModelTape, scale: f64, probes: Option<usize>, rng: &mut Rng) -> (f64, Vec<Option<Matrix>>) {
    let (n, cols, k) = (model.dim(), tape.len(), model.blocks().len());
    let mut slabs = empty_slabs(model, n, cols);
    let mut total = 0.0;
    for b in 0..cols {
        let jb: Vec<Matrix> = (0..k).map(|i| tape.block_jacobian(model, i, b)).collect();
        let mut prefix = vec![Matrix::identity(n, n)];
        for j in &jb {
            prefix.push(j * prefix.last().unwrap());
        }
        let full = &prefix[k];
        // d(value)/d(product)
        let g_p = match probes {
            None => {
                total += full.trace();
                Matrix::identity(n, n)
            }
            Some(m) => {
                let mut outer = Matrix::zeros(n, n);
                for _ in 0..m {
                    let e = Vector::from_fn(n, |_, _| rng.normal());
                    total += e.dot(&(full * &e)) / m as f64;
                    outer += &e * e.transpose();
                }
                outer / m as f64
            }
        };
        let g_p = g_p * (-scale);
        let mut suffix = Matrix::identity(n, n);
        for i in (0..k).rev() {
            let g = suffix.transpose() * &g_p * prefix[i].transpose();
            write_slab(slabs[i].as_mut().unwrap(), &g, b, cols);
            suffix = &suffix * &jb[i];
        }
    }
    (total, slabs)
}

/// Summed log-determinant over the batch and cotangents for the penalty
/// `-scale * sum_b log|det D phi|`.
fn logdet_cotangents(model: &Model, tape: &ModelTape, scale: f64, cfg: &LossConfig, rng: &mut Rng) -> (f64, Vec<Option<Matrix>>) {
    let (n, cols, k) = (model.dim(), tape.len(), model.blocks().len());
    let mut slabs = empty_slabs(model, n, cols);
    let mut total = 0.0;
    let terms = cfg.powerseries_terms;
    let probes = cfg.probes();
    for b in 0..cols {
        for i in 0..k {
            let g = match probes {
                None => {
                    let jb = tape.block_jacobian(model, i, b);
                    let lu = jb.clone().lu();
                    total += lu.determinant().abs().ln();
                    let inv = lu.try_inverse().expect("block Jacobian is invertible");
                    inv.transpose() * (-scale)
                }
                Some(m) => {
                    let jf = tape.residual_jacobian(model, i, b);
                    let (value, d_jf) = power_series_with_gradient(&jf, terms, m, rng);
                    total += value;
                    // D phi_i = I - Df
                    d_jf * scale
                }
            };
            write_slab(slabs[i].as_mut().unwrap(), &g, b, cols);
        }
    }
    (total, slabs)
}

/// Estimate `-sum_k <e, J^k e> / (k m)` over `m` probes and its gradient in `J`.
fn power_series_with_gradient(j: &Matrix, terms: usize, probes: usize, rng: &mut Rng) -> (f64, Matrix) {
    let n = j.nrows();
    let terms = terms.max(1);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, n);
    let c = |k: usize| -1.0 / (k as f64 * probes as f64);
    let jt = j.transpose();
    for _ in 0..probes {
        let e = Vector::from_fn(n, |_, _| rng.normal());
        let mut vs = Vec::with_capacity(terms + 1);
        vs.push(e.clone());
        for k in 1..=terms {
            let next = j * &vs[k - 1];
            value += c(k) * e.dot(&next);
            vs.push(next);
        }
        let mut adj = &e * c(terms);
        for k in (1..=terms).rev() {
            grad += &adj * vs[k - 1].transpose();
            if k > 1 {
                adj = &e * c(k - 1) + &jt * &adj;
            }
        }
    }
    (value, grad)
}

/// Reconstruction loss with `psi` unrolled for `iters` fixed-point steps per
/// block, differentiated through the unrolled iterations.
fn reco_unrolled(model: &Model, batch: &Batch, iters: usize) -> (f64, Gradient, f64) {
    let k = model.blocks().len();
    let bsz = batch.len() as f64;
    // iterates[i] holds x^0..x^{T-1} for block i; x^0 is the block's target
    let mut iterates: Vec<Vec<Matrix>> = vec![Vec::new(); k];
    let mut cur = batch.z.clone();
    let mut residual = 0.0f64;
    for i in (0..k).rev() {
        let block = &model.blocks()[i];
        let y = cur;
        let mut x = y.clone();
        let mut store = Vec::with_capacity(iters);
        for _ in 0..iters {
            let next = &y + block.residual(&x);
            store.push(std::mem::replace(&mut x, next));
        }
        let last = &x - store.last().unwrap();
        for c in 0..last.ncols() {
            residual = residual.max(last.column(c).norm());
        }
        iterates[i] = store;
        cur = x;
    }
    let r = &cur - &batch.x;
    let loss = 0.5 * r.norm_squared() / bsz;

    let mut grad = Gradient::zeros_like(model);
    let mut a = r / bsz;
    for (i, store) in iterates.iter().enumerate() {
        let mut a_y = Matrix::zeros(a.nrows(), a.ncols());
        for xk in store.iter().rev() {
            a_y += &a;
            a = model.residual_backward(i, xk, &a, &mut grad);
        }
        a_y += &a;
        a = a_y;
    }
    (loss, grad, residual)
}

/// Fixed-point tolerance of the implicit mode.
pub const RECO_IMPLICIT_TOL: f64 = 1e-12;

/// Reconstruction loss at the (converged) inverse with the implicit-function
/// gradient. Returns the largest final step like the unrolled variant.
fn reco_implicit(model: &Model, batch: &Batch, max_iters: usize) -> (f64, Gradient, f64) {
    let k = model.blocks().len();
    let n = model.dim();
    let cols = batch.len();
    let bsz = cols as f64;
    // points[i] is the inverse of block i, i.e. the block's input
    let mut points: Vec<Matrix> = vec![Matrix::zeros(0, 0); k];
    let mut cur = batch.z.clone();
    let mut residual = 0.0f64;
    for i in (0..k).rev() {
        let block = &model.blocks()[i];
        let mut x = cur.clone();
        let mut step = f64::INFINITY;
        for _ in 0..max_iters {
            let next = &cur + block.residual(&x);
            step = (0..cols).map(|c| (next.column(c) - x.column(c)).norm()).fold(0.0, f64::max);
            x = next;
            if step <= RECO_IMPLICIT_TOL {
                break;
            }
        }
        residual = residual.max(step);
        points[i] = x.clone();
        cur = x;
    }
    let r = &cur - &batch.x;
    let loss = 0.5 * r.norm_squared() / bsz;

    let mut grad = Gradient::zeros_like(model);
    let mut a = r / bsz;
    for (i, x) in points.iter().enumerate() {
        let block = &model.blocks()[i];
        let tangents: Vec<Matrix> = (0..n)
            .map(|j| {
                let e = Matrix::from_fn(n, cols, |r, _| if r == j { 1.0 } else { 0.0 });
                block.jvp(x, &e).1
            })
            .collect();
        let mut lambda = Matrix::zeros(n, cols);
        for c in 0..cols {
            let jb = Matrix::from_fn(n, n, |r, j| tangents[j][(r, c)]);
            let l = jb.transpose().lu().solve(&a.column(c).into_owned()).unwrap_or_else(|| Vector::zeros(n));
            lambda.set_column(c, &l);
        }
        model.residual_backward(i, x, &lambda, &mut grad);
        a = lambda;
    }
    (loss, grad, residual)
}
