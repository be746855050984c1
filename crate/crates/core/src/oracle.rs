//! Bayesian reference quantities by tensor-grid quadrature: posterior mean,
//! MAP, noisy-data density and score, and residuals of the optimality
//! conditions characterising trained models.

use std::f64::consts::PI;

use thiserror::Error;

use crate::iresnet::{InversionConfig, Model};
use crate::numerics::{default_fd_step, fd_gradient, streams, Matrix, QuadratureGrid, Rng, Vector};
use crate::prior::{GaussianPrior, Prior};
use crate::problem::LinearProblem;

/// Normalizers below this are treated as underflow.
pub const MIN_NORMALIZER: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("posterior needs a positive noise level, got {0}")]
    ZeroNoise(f64),
    #[error("posterior normalizer underflows at y = {0:?} (data far outside the prior's range)")]
    Underflow(Vec<f64>),
    #[error("quadrature grid holds only {mass} of the prior mass")]
    GridTooSmall { mass: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub points: usize,
    /// Integration box; the prior's support box when `None`.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub map_starts: usize,
    pub map_step: f64,
    pub map_tol: f64,
    pub map_max_iters: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            points: QuadratureGrid::DEFAULT_POINTS,
            bounds: None,
            map_starts: 16,
            map_step: 1.0,
            map_tol: 1e-9,
            map_max_iters: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub x: Vector,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Quadrature oracle for one (prior, problem) pair. Log prior values at the
/// nodes and the mapped nodes `A x_i` are cached.
pub struct Oracle<'a> {
    prior: &'a Prior,
    problem: &'a LinearProblem,
    cfg: OracleConfig,
    grid: QuadratureGrid,
    /// `log w_i + log p_X(x_i)`
    log_mass: Vec<f64>,
    mapped: Matrix,
    starts: Vec<Vector>,
}

struct Moments {
    log_normalizer: f64,
    mean: Vector,
    /// `E[A x] - y` under the posterior
    shift: Vector,
}

impl<'a> Oracle<'a> {
    pub fn new(prior: &'a Prior, problem: &'a LinearProblem, cfg: OracleConfig) -> Result<Self, OracleError> {
        if problem.input_dim() != prior.dim() {
            return Err(OracleError::Dimension(format!(
                "prior has dim {}, operator has {} columns",
                prior.dim(),
                problem.input_dim()
            )));
        }
        let bounds = cfg.bounds.clone().unwrap_or_else(|| prior.support_box());
        let grid = QuadratureGrid::new(bounds, vec![cfg.points; prior.dim()])
            .map_err(|e| OracleError::Dimension(e.to_string()))?;
        let log_mass: Vec<f64> = (0..grid.len())
            .map(|i| grid.weight(i).ln() + prior.log_density_slice(grid.node(i)))
            .collect();
        let mass: f64 = log_mass.iter().map(|l| l.exp()).sum();
        if mass < 0.9999 {
            return Err(OracleError::GridTooSmall { mass });
        }
        let mapped = problem.matrix() * grid.node_matrix();
        let mut rng = Rng::new(cfg.seed).fork(streams::ORACLE);
        let starts = (1..cfg.map_starts.max(1)).map(|_| prior.sample(&mut rng)).collect();
        Ok(Self {
            prior,
            problem,
            cfg,
            grid,
            log_mass,
            mapped,
            starts,
        })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn prior(&self) -> &Prior {
        self.prior
    }

    pub fn problem(&self) -> &LinearProblem {
        self.problem
    }

    fn delta(&self) -> Result<f64, OracleError> {
        let d = self.problem.delta();
        if d > 0.0 {
            Ok(d)
        } else {
            Err(OracleError::ZeroNoise(d))
        }
    }

    fn moments(&self, y: &Vector) -> Result<Moments, OracleError> {
        let delta = self.delta()?;
        let m = self.problem.output_dim();
        if y.len() != m {
            return Err(OracleError::Dimension(format!("y has length {}, expected {m}", y.len())));
        }
        let n = self.prior.dim();
        let inv2 = 0.5 / (delta * delta);
        let ax = self.mapped.as_slice();
        let mut logs = Vec::with_capacity(self.grid.len());
        let mut max = f64::NEG_INFINITY;
        for (i, &lm) in self.log_mass.iter().enumerate() {
            let mut sq = 0.0;
            for r in 0..m {
                let d = ax[i * m + r] - y[r];
                sq += d * d;
            }
            let l = lm - sq * inv2;
            max = max.max(l);
            logs.push(l);
        }
        let mut total = 0.0;
        let mut mean = Vector::zeros(n);
        let mut amean = Vector::zeros(m);
        for (i, l) in logs.iter().enumerate() {
            let w = (l - max).exp();
            total += w;
            let node = self.grid.node(i);
            for r in 0..n {
                mean[r] += w * node[r];
            }
            for r in 0..m {
                amean[r] += w * ax[i * m + r];
            }
        }
        let log_gauss_norm = -0.5 * m as f64 * (2.0 * PI * delta * delta).ln();
        let log_normalizer = max + total.ln() + log_gauss_norm;
        if log_normalizer < MIN_NORMALIZER.ln() || !log_normalizer.is_finite() {
            return Err(OracleError::Underflow(y.as_slice().to_vec()));
        }
        Ok(Moments {
            log_normalizer,
            mean: mean / total,
            shift: amean / total - y,
        })
    }

    /// `E[x | y]`.
    pub fn posterior_mean(&self, y: &Vector) -> Result<Vector, OracleError> {
        Ok(self.moments(y)?.mean)
    }

    pub fn data_log_density(&self, y: &Vector) -> Result<f64, OracleError> {
        Ok(self.moments(y)?.log_normalizer)
    }

    /// `p_Y(y) = int p_X(x) p_H(Ax - y) dx`.
    pub fn data_density(&self, y: &Vector) -> Result<f64, OracleError> {
        Ok(self.data_log_density(y)?.exp())
    }

    /// `grad log p_Y(y)`, by quadrature of the differentiated integrand.
    pub fn data_score(&self, y: &Vector) -> Result<Vector, OracleError> {
        let d = self.delta()?;
        Ok(self.moments(y)?.shift / (d * d))
    }

    /// `|A x_PM - y - delta^2 grad log p_Y(y)|`.
    pub fn tweedie_residual(&self, y: &Vector) -> Result<f64, OracleError> {
        let d = self.delta()?;
        let pm = self.posterior_mean(y)?;
        let score = self.data_score(y)?;
        Ok((self.problem.apply(&pm) - y - score * (d * d)).norm())
    }

    /// `1/2 |Ax - y|^2 - delta^2 log p_X(x)`.
    pub fn map_functional(&self, x: &Vector, y: &Vector) -> f64 {
        let d = self.problem.delta();
        0.5 * (self.problem.apply(x) - y).norm_squared() - d * d * self.prior.log_density(x)
    }

    fn map_gradient(&self, x: &Vector, y: &Vector) -> Vector {
        let d = self.problem.delta();
        self.problem.apply_adjoint(&(self.problem.apply(x) - y)) - self.prior.score(x) * (d * d)
    }

    fn map_hessian(&self, x: &Vector) -> Matrix {
        let d = self.problem.delta();
        let n = x.len();
        let h = 1e-5 * x.norm().max(1.0);
        let mut hs = Matrix::zeros(n, n);
        for j in 0..n {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let col = (self.prior.score(&xp) - self.prior.score(&xm)) / (2.0 * h);
            hs.set_column(j, &col);
        }
        let hs = (&hs + hs.transpose()) * 0.5;
        self.problem.normal() - hs * (d * d)
    }

    /// Starting points: the least-squares backprojection of `y`, then prior draws.
    pub fn map_starts(&self, y: &Vector) -> Vec<Vector> {
        let at = self.problem.adjoint();
        let back = self
            .problem
            .normal()
            .clone()
            .cholesky()
            .map(|c| c.solve(&(at * y)))
            .unwrap_or_else(|| at * y);
        std::iter::once(back).chain(self.starts.iter().cloned()).collect()
    }

    /// Descent from one start with backtracking. Newton directions are used
    /// where the local Hessian is positive definite, steepest descent elsewhere.
    pub fn map_descent(&self, start: &Vector, y: &Vector) -> MapResult {
        let mut x = start.clone();
        let mut f = self.map_functional(&x, y);
        let mut g = self.map_gradient(&x, y);
        for _ in 0..self.cfg.map_max_iters {
            if g.norm() <= self.cfg.map_tol {
                break;
            }
            let (dir, mut t) = match self.map_hessian(&x).cholesky() {
                Some(c) => (-c.solve(&g), 1.0),
                None => (-&g, self.cfg.map_step),
            };
            let slope = g.dot(&dir);
            let (dir, slope) = if slope < 0.0 { (dir, slope) } else { (-&g, -g.norm_squared()) };
            let mut accepted = None;
            for _ in 0..60 {
                let xn = &x + &dir * t;
                let fnew = self.map_functional(&xn, y);
                if fnew <= f + 1e-4 * t * slope {
                    accepted = Some((xn, fnew));
                    break;
                }
                t *= 0.5;
            }
            let (xn, fnew) = match accepted {
                Some(a) => a,
                None => {
                    // below round-off in f: accept a full step that shrinks the gradient
                    let xn = &x + &dir;
                    if self.map_gradient(&xn, y).norm() < g.norm() {
                        let fnew = self.map_functional(&xn, y);
                        (xn, fnew)
                    } else {
                        break;
                    }
                }
            };
            x = xn;
            f = fnew;
            g = self.map_gradient(&x, y);
        }
        let grad_norm = g.norm();
        MapResult {
            x,
            value: f,
            grad_norm,
            converged: grad_norm <= self.cfg.map_tol,
        }
    }

    /// Best converged run over all starts (lowest functional value, then the
    /// lexicographically smallest point); flagged if no run converged.
    pub fn map_estimate(&self, y: &Vector) -> Result<MapResult, OracleError> {
        self.delta()?;
        let runs: Vec<MapResult> = self.map_starts(y).iter().map(|s| self.map_descent(s, y)).collect();
        let any_converged = runs.iter().any(|r| r.converged);
        let best = runs
            .into_iter()
            .filter(|r| r.converged || !any_converged)
            .min_by(|a, b| {
                a.value
                    .total_cmp(&b.value)
                    .then_with(|| a.x.iter().zip(b.x.iter()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
            })
            .expect("at least one start");
        Ok(best)
    }
}

/// `p_H(Ax - y) p_X(x)`.
pub fn posterior_unnorm(x: &Vector, y: &Vector, prior: &Prior, problem: &LinearProblem) -> f64 {
    let d = problem.delta();
    let m = y.len() as f64;
    let r = problem.apply(x) - y;
    let log_h = -0.5 * r.norm_squared() / (d * d) - 0.5 * m * (2.0 * PI * d * d).ln();
    (log_h + prior.log_density(x)).exp()
}

/// `|A^T A x - delta_hat^2 score(x) - z|`.
pub fn map_foc_residual(x: &Vector, z: &Vector, prior: &Prior, problem: &LinearProblem, reg_weight: f64) -> f64 {
    (problem.apply_normal(x) - prior.score(x) * (reg_weight * reg_weight) - z).norm()
}

/// Inversion settings for push-forward evaluations under finite differences.
pub fn tight_inversion() -> InversionConfig {
    InversionConfig {
        max_iters: 1000,
        tol: 1e-14,
    }
}

/// `log p_X(psi(y)) - log|det D phi(psi(y))|`, with the inversion's convergence flag.
pub fn pushforward_logdensity(model: &Model, y: &Vector, prior: &Prior, inv: &InversionConfig) -> (f64, bool) {
    let r = model.invert(y, inv);
    (prior.log_density(&r.x) - model.logdet(&r.x), r.converged)
}

/// Column-wise push-forward log-density.
pub fn pushforward_logdensity_batch(model: &Model, y: &Matrix, prior: &Prior, inv: &InversionConfig) -> (Vec<f64>, Vec<bool>) {
    let r = model.invert_batch(y, inv);
    let tape = model.tape(&r.x, true);
    let values = (0..y.ncols())
        .map(|b| prior.log_density(&r.x.column(b).into_owned()) - tape.logdet(model, b))
        .collect();
    (values, r.converged)
}

/// `|phi(x) - A x + delta_hat^2 grad_y log(phi_# p_X)(phi(x))|`, gradient by
/// central differences.
pub fn theorem1_residual(model: &Model, x: &Vector, reg_weight: f64, problem: &LinearProblem, prior: &Prior) -> f64 {
    let y = model.forward(x);
    let inv = tight_inversion();
    let g = fd_gradient(|v| pushforward_logdensity(model, v, prior, &inv).0, &y, default_fd_step(&y));
    (&y - problem.apply(x) + g * (reg_weight * reg_weight)).norm()
}

/// Batched [`theorem1_residual`] over the columns of `xs`.
pub fn theorem1_residuals(model: &Model, xs: &Matrix, reg_weight: f64, problem: &LinearProblem, prior: &Prior) -> Vec<f64> {
    let n = xs.nrows();
    let cols = xs.ncols();
    let ys = model.forward_batch(xs);
    let steps: Vec<f64> = (0..cols).map(|c| default_fd_step(&ys.column(c).into_owned())).collect();
    // columns: for each axis j, +h then -h
    let mut probes = Matrix::zeros(n, 2 * n * cols);
    for j in 0..n {
        for c in 0..cols {
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let col = (2 * j + k) * cols + c;
                probes.set_column(col, &ys.column(c));
                probes[(j, col)] += sign * steps[c];
            }
        }
    }
    let (vals, _) = pushforward_logdensity_batch(model, &probes, prior, &tight_inversion());
    let d2 = reg_weight * reg_weight;
    (0..cols)
        .map(|c| {
            let g = Vector::from_fn(n, |j, _| (vals[2 * j * cols + c] - vals[(2 * j + 1) * cols + c]) / (2.0 * steps[c]));
            let x = xs.column(c).into_owned();
            (ys.column(c) - problem.apply(&x) + g * d2).norm()
        })
        .collect()
}

/// `C = delta_hat^2 tr(A^T A) + delta_hat^4 / 2 * int p_X |grad log p_X|^2`.
pub fn theorem2_constant(prior: &Prior, problem: &LinearProblem, reg_weight: f64, grid: &QuadratureGrid) -> f64 {
    let d2 = reg_weight * reg_weight;
    let mut fisher = 0.0;
    for i in 0..grid.len() {
        let x = Vector::from_column_slice(grid.node(i));
        let p = prior.density(&x);
        if p > 0.0 {
            fisher += grid.weight(i) * p * prior.score(&x).norm_squared();
        }
    }
    d2 * problem.normal().trace() + 0.5 * d2 * d2 * fisher
}

/// Model values at the quadrature nodes carrying non-negligible prior mass.
pub struct QuadratureFields {
    mass: Vec<f64>,
    x: Matrix,
    phi: Matrix,
    div: Vec<f64>,
    score: Matrix,
}

/// Nodes with `p_X` below this fraction of its grid maximum are skipped.
const MASS_CUTOFF: f64 = 1e-16;

pub fn quadrature_fields(model: &Model, prior: &Prior, grid: &QuadratureGrid) -> QuadratureFields {
    let dens: Vec<f64> = (0..grid.len()).map(|i| prior.log_density_slice(grid.node(i)).exp()).collect();
    let peak = dens.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..grid.len()).filter(|&i| dens[i] > MASS_CUTOFF * peak).collect();
    let n = grid.dim();
    let x = Matrix::from_fn(n, keep.len(), |r, c| grid.node(keep[c])[r]);
    let mut phi = Matrix::zeros(n, keep.len());
    let mut div = Vec::with_capacity(keep.len());
    let chunk = 4096;
    for start in (0..keep.len()).step_by(chunk) {
        let cols = chunk.min(keep.len() - start);
        let tape = model.tape(&x.columns(start, cols).into_owned(), true);
        phi.columns_mut(start, cols).copy_from(tape.output());
        div.extend((0..cols).map(|b| tape.divergence(model, b)));
    }
    let mut score = Matrix::zeros(n, keep.len());
    for c in 0..keep.len() {
        score.set_column(c, &prior.score(&x.column(c).into_owned()));
    }
    QuadratureFields {
        mass: keep.iter().map(|&i| grid.weight(i) * dens[i]).collect(),
        x,
        phi,
        div,
        score,
    }
}

impl QuadratureFields {
    /// Noiseless objectives against `p_X`: `(Q_div, Q_equiv)` with
    /// `Q_div = int p (1/2 |phi - A^T A x|^2 - delta_hat^2 div phi)` and
    /// `Q_equiv = int p 1/2 |phi - A^T A x + delta_hat^2 score|^2`.
    pub fn objectives(&self, problem: &LinearProblem, reg_weight: f64) -> (f64, f64) {
        let d2 = reg_weight * reg_weight;
        let ax = problem.normal() * &self.x;
        let (mut q_div, mut q_equiv) = (0.0, 0.0);
        for (c, &w) in self.mass.iter().enumerate() {
            let r = self.phi.column(c) - ax.column(c);
            q_div += w * (0.5 * r.norm_squared() - d2 * self.div[c]);
            q_equiv += w * 0.5 * (r + self.score.column(c) * d2).norm_squared();
        }
        (q_div, q_equiv)
    }
}

/// The positive root of `c = 1 + delta_hat^2 / (c sigma^2)`: for the prior
/// `N(0, sigma^2 I)` and `A = Id`, `phi = c Id` satisfies the log-det
/// stationarity condition exactly.
pub fn logdet_scalar_fixed_point(sigma: f64, reg_weight: f64) -> f64 {
    let r = reg_weight * reg_weight / (sigma * sigma);
    0.5 * (1.0 + (1.0 + 4.0 * r).sqrt())
}

/// Closed forms for a Gaussian prior and a linear problem.
pub mod gaussian {
    use super::*;

    fn data_cov(prior: &GaussianPrior, problem: &LinearProblem) -> Matrix {
        let a = problem.matrix();
        let d = problem.delta();
        let m = a.nrows();
        a * prior.covariance() * a.transpose() + Matrix::identity(m, m) * (d * d)
    }

    /// Posterior mean, equal to the MAP (Tikhonov) solution.
    pub fn posterior_mean(prior: &GaussianPrior, problem: &LinearProblem, y: &Vector) -> Vector {
        let a = problem.matrix();
        let s = data_cov(prior, problem);
        let resid = y - a * prior.mean();
        prior.mean() + prior.covariance() * a.transpose() * s.cholesky().expect("SPD").solve(&resid)
    }

    /// `(A^T A + delta^2 Sigma^{-1})^{-1} (A^T y + delta^2 Sigma^{-1} mu)`.
    pub fn map(prior: &GaussianPrior, problem: &LinearProblem, y: &Vector) -> Vector {
        let d2 = problem.delta().powi(2);
        let lhs = problem.normal() + prior.precision() * d2;
        let rhs = problem.adjoint() * y + prior.precision() * prior.mean() * d2;
        lhs.cholesky().expect("SPD").solve(&rhs)
    }

    pub fn data_density(prior: &GaussianPrior, problem: &LinearProblem, y: &Vector) -> f64 {
        let s = data_cov(prior, problem);
        let r = y - problem.matrix() * prior.mean();
        let chol = s.clone().cholesky().expect("SPD");
        let quad = r.dot(&chol.solve(&r));
        let m = y.len() as f64;
        (-0.5 * quad - 0.5 * m * (2.0 * PI).ln() - 0.5 * s.determinant().ln()).exp()
    }

    pub fn data_score(prior: &GaussianPrior, problem: &LinearProblem, y: &Vector) -> Vector {
        let s = data_cov(prior, problem);
        let r = y - problem.matrix() * prior.mean();
        -s.cholesky().expect("SPD").solve(&r)
    }

    /// Posterior density in closed form (normalized).
    pub fn posterior_density(prior: &GaussianPrior, problem: &LinearProblem, y: &Vector, x: &Vector) -> f64 {
        let d2 = problem.delta().powi(2);
        let precision = problem.normal() / d2 + prior.precision();
        let mean = posterior_mean(prior, problem, y);
        let r = x - mean;
        let n = x.len() as f64;
        (-0.5 * r.dot(&(&precision * &r)) - 0.5 * n * (2.0 * PI).ln() + 0.5 * precision.determinant().ln()).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::quad_integrate;

    fn v(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    fn gaussian(sigma: f64) -> (Prior, GaussianPrior) {
        let g = GaussianPrior::isotropic(2, sigma).unwrap();
        (Prior::Gaussian(g.clone()), g)
    }

    #[test]
    fn posterior_unnorm_properties() {
        let prior = Prior::default_bimodal();
        let p = LinearProblem::denoising(0.3).unwrap();
        let x = v(0.5, 1.8);
        let at_mode = posterior_unnorm(&x, &x, &prior, &p);
        assert!((at_mode - prior.density(&x) / (2.0 * PI * 0.09)).abs() < 1e-15);
        assert!(posterior_unnorm(&x, &v(0.6, 1.7), &prior, &p) < at_mode);
        // symmetric in the residual
        let a = LinearProblem::a_eps(0.5, 0.3).unwrap();
        let ax = a.apply(&x);
        let r = v(0.1, -0.2);
        let up = posterior_unnorm(&x, &(&ax + &r), &prior, &a);
        let down = posterior_unnorm(&x, &(&ax - &r), &prior, &a);
        assert!((up - down).abs() <= 1e-15 * up);
    }

    #[test]
    fn gaussian_posterior_pointwise() {
        let g = GaussianPrior::new(v(0.3, -0.2), Matrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8])).unwrap();
        let prior = Prior::Gaussian(g.clone());
        let p = LinearProblem::a_eps(0.5, 0.4).unwrap();
        let y = v(0.7, 1.1);
        let evidence = gaussian::data_density(&g, &p, &y);
        for x in [v(0.0, 0.0), v(1.0, -1.0), v(-0.5, 2.0)] {
            let expect = gaussian::posterior_density(&g, &p, &y, &x) * evidence;
            let got = posterior_unnorm(&x, &y, &prior, &p);
            assert!((got - expect).abs() <= 1e-10 * expect, "{got} {expect}");
        }
    }

    #[test]
    fn posterior_mean_examples() {
        let (prior, _) = gaussian(1.0);
        let p = LinearProblem::denoising(0.5).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig::default()).unwrap();
        let y = v(1.0, -0.5);
        assert!((o.posterior_mean(&y).unwrap() - &y * (1.0 / 1.25)).norm() < 1e-6);

        let bimodal = Prior::default_bimodal();
        let p = LinearProblem::denoising(0.25).unwrap();
        let o = Oracle::new(&bimodal, &p, OracleConfig::default()).unwrap();
        assert!(o.posterior_mean(&v(0.0, 0.0)).unwrap().norm() < 1e-10);

        let p = LinearProblem::denoising(1e-3).unwrap();
        let cfg = OracleConfig {
            bounds: Some(vec![(-0.2, 0.2), (1.8, 2.2)]),
            ..OracleConfig::default()
        };
        // local window around the mode, so the prior-mass check is bypassed
        let mode = v(0.0, 2.0);
        let o = oracle_on(&bimodal, &p, cfg);
        assert!((o.posterior_mean(&mode).unwrap() - &mode).norm() < 1e-2);
    }

    fn oracle_on<'a>(prior: &'a Prior, problem: &'a LinearProblem, cfg: OracleConfig) -> Oracle<'a> {
        let bounds = cfg.bounds.clone().unwrap();
        let grid = QuadratureGrid::new(bounds, vec![cfg.points; 2]).unwrap();
        let log_mass = (0..grid.len()).map(|i| grid.weight(i).ln() + prior.log_density_slice(grid.node(i))).collect();
        let mapped = problem.matrix() * grid.node_matrix();
        Oracle {
            prior,
            problem,
            cfg,
            grid,
            log_mass,
            mapped,
            starts: Vec::new(),
        }
    }

    #[test]
    fn far_data_underflows() {
        let prior = Prior::default_bimodal();
        let p = LinearProblem::denoising(0.05).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig::default()).unwrap();
        assert!(matches!(o.posterior_mean(&v(40.0, 40.0)), Err(OracleError::Underflow(_))));
        let p0 = LinearProblem::denoising(0.0).unwrap();
        let o = Oracle::new(&prior, &p0, OracleConfig::default()).unwrap();
        assert!(matches!(o.posterior_mean(&v(0.0, 1.0)), Err(OracleError::ZeroNoise(_))));
    }

    #[test]
    fn gaussian_oracles_match_closed_forms() {
        let g = GaussianPrior::new(v(0.2, -0.1), Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6])).unwrap();
        let prior = Prior::Gaussian(g.clone());
        for p in [LinearProblem::denoising(0.3).unwrap(), LinearProblem::a_eps(0.5, 0.25).unwrap()] {
            let o = Oracle::new(&prior, &p, OracleConfig::default()).unwrap();
            for y in [v(0.0, 0.0), v(0.8, -0.4), v(-1.2, 1.5)] {
                let pm = o.posterior_mean(&y).unwrap();
                assert!((&pm - gaussian::posterior_mean(&g, &p, &y)).norm() <= 1e-6);
                let map = o.map_estimate(&y).unwrap();
                assert!(map.converged);
                assert!((&map.x - gaussian::map(&g, &p, &y)).norm() <= 1e-6);
                assert!((&map.x - &pm).norm() <= 1e-6);
                let dens = o.data_density(&y).unwrap();
                let expect = gaussian::data_density(&g, &p, &y);
                assert!((dens - expect).abs() <= 1e-6 * expect);
                let s = o.data_score(&y).unwrap();
                let expect = gaussian::data_score(&g, &p, &y);
                assert!((&s - &expect).norm() <= 1e-5 * expect.norm().max(1e-12) || (&s - &expect).norm() < 1e-12);
                assert!(o.tweedie_residual(&y).unwrap() <= 1e-6);
                assert!(dens <= 1.0 / (2.0 * PI * p.delta().powi(2)));
                // Tikhonov point satisfies the first-order condition
                let z = p.apply_adjoint(&y);
                let tik = gaussian::map(&g, &p, &y);
                assert!(map_foc_residual(&tik, &z, &prior, &p, p.delta()) <= 1e-8 * (1.0 + z.norm()));
            }
        }
    }

    #[test]
    fn unregularized_foc_is_normal_equation() {
        let prior = Prior::default_bimodal();
        let p = LinearProblem::a_eps(0.5, 0.1).unwrap();
        let z = v(0.3, 2.0);
        let x = p.normal().clone().lu().solve(&z).unwrap();
        assert!(map_foc_residual(&x, &z, &prior, &p, 0.0) < 1e-12);
    }

    #[test]
    fn data_score_matches_finite_differences() {
        let prior = Prior::default_bimodal();
        let p = LinearProblem::a_eps(0.5, 0.3).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig { points: 200, ..OracleConfig::default() }).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let x = prior.sample(&mut rng);
            let (y, _) = p.observe(&x, &mut rng);
            let s = o.data_score(&y).unwrap();
            let fd = fd_gradient(|q| o.data_log_density(q).unwrap(), &y, 1e-5);
            assert!((&s - &fd).norm() <= 1e-4 * s.norm().max(1e-3), "{s} vs {fd}");
        }
        assert!(o.data_score(&v(0.0, 0.0)).unwrap().norm() < 1e-10);
    }

    #[test]
    fn data_density_normalizes() {
        let prior = Prior::default_bimodal();
        let p = LinearProblem::denoising(0.25).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig { points: 160, ..OracleConfig::default() }).unwrap();
        let ygrid = QuadratureGrid::square(-5.0, 5.0, 120).unwrap();
        let total = quad_integrate(&ygrid, |y| o.data_density(&Vector::from_column_slice(y)).unwrap()).unwrap();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn bimodal_map_beats_mode_centres() {
        let prior = Prior::default_bimodal();
        let p = LinearProblem::denoising(0.25).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig::default()).unwrap();
        for y in [v(0.2, 1.7), v(-0.3, -2.3), v(0.1, 0.4)] {
            let r = o.map_estimate(&y).unwrap();
            assert!(r.converged);
            for c in [v(0.0, 2.0), v(0.0, -2.0)] {
                assert!(r.value <= o.map_functional(&c, &y));
            }
            let z = p.apply_adjoint(&y);
            assert!(map_foc_residual(&r.x, &z, &prior, &p, p.delta()) <= 1e-6 * (1.0 + z.norm()));
        }
    }

    #[test]
    fn pushforward_examples() {
        let prior = Prior::default_bimodal();
        let id = Model::zeros(&crate::iresnet::ModelConfig {
            hidden: 4,
            ..Default::default()
        })
        .unwrap();
        let y = v(0.4, 1.5);
        let inv = InversionConfig::default();
        assert_eq!(pushforward_logdensity(&id, &y, &prior, &inv).0, prior.log_density(&y));
        let b = Matrix::from_row_slice(2, 2, &[0.2, 0.1, -0.1, 0.3]);
        let lin = Model::linear(vec![b.clone()], 0.99).unwrap();
        let phi = Matrix::identity(2, 2) - b;
        let x = phi.clone().lu().solve(&y).unwrap();
        let expect = prior.log_density(&x) - phi.determinant().abs().ln();
        let (got, ok) = pushforward_logdensity(&lin, &y, &prior, &inv);
        assert!(ok);
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn scalar_logdet_construction_is_stationary() {
        for (sigma, d) in [(1.0, 0.25), (1.5, 0.5)] {
            let (prior, _) = gaussian(sigma);
            let p = LinearProblem::denoising(0.0).unwrap();
            let c = logdet_scalar_fixed_point(sigma, d);
            let m = Model::linear(vec![Matrix::identity(2, 2) * (1.0 - c)], 0.99).unwrap();
            let mut rng = Rng::new(1);
            let xs = Matrix::from_fn(2, 20, |_, _| sigma * rng.normal());
            for r in theorem1_residuals(&m, &xs, d, &p, &prior) {
                assert!(r <= 1e-8, "{r}");
            }
            let x = xs.column(0).into_owned();
            assert!(theorem1_residual(&m, &x, d, &p, &prior) <= 1e-8);
            // the other root of the quadratic does not satisfy the condition
            let wrong = Model::linear(vec![Matrix::identity(2, 2) * 0.1], 0.99).unwrap();
            assert!(theorem1_residual(&wrong, &x, d, &p, &prior) > 1e-3);
        }
    }

    #[test]
    fn objectives_differ_by_the_constant() {
        let prior = Prior::default_bimodal();
        let grid = prior.grid_with_points(200);
        let b = Matrix::from_row_slice(2, 2, &[0.2, 0.1, -0.1, 0.3]);
        let model = Model::linear(vec![b], 0.99).unwrap();
        let fields = quadrature_fields(&model, &prior, &grid);
        let p = LinearProblem::a_eps(0.5, 0.0).unwrap();
        let (q_div, q_equiv) = fields.objectives(&p, 0.5);
        let c = theorem2_constant(&prior, &p, 0.5, &grid);
        assert!(((q_equiv - q_div) - c).abs() <= 1e-3 * c, "{q_equiv} {q_div} {c}");
    }

    #[test]
    fn theorem2_constant_for_gaussian() {
        // N(0, s^2 I): int p |score|^2 = n / s^2
        let (prior, _) = gaussian(1.0);
        let p = LinearProblem::a_eps(0.5, 0.0).unwrap();
        let c = theorem2_constant(&prior, &p, 0.5, &prior.default_grid());
        let expect = 0.25 * 5.25 + 0.5 * 0.0625 * 2.0;
        assert!((c - expect).abs() < 1e-8);
    }
}
