//! Analytic priors with density, log-density, score and exact sampling.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::numerics::{Matrix, QuadratureGrid, Rng, Vector};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Radii below this are clamped in the polar density; the `1/r` factor is
/// removable and the origin carries no mass.
pub const RADIUS_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("covariance must be symmetric positive definite")]
    NotPositiveDefinite,
    #[error("mean has length {mean} but covariance is {cov}x{cov}")]
    Shape { mean: usize, cov: usize },
    #[error("invalid polar component {index}: {reason}")]
    Component { index: usize, reason: String },
    #[error("mixture weights sum to {0}, expected 1")]
    Weights(f64),
}

#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: Vector,
    cov: Matrix,
    chol: Matrix,
    precision: Matrix,
    log_norm: f64,
}

impl GaussianPrior {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self, PriorError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(PriorError::Shape {
                mean: mean.len(),
                cov: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max().max(1.0) {
            return Err(PriorError::NotPositiveDefinite);
        }
        let chol = cov.clone().cholesky().ok_or(PriorError::NotPositiveDefinite)?;
        let l = chol.l();
        let precision = chol.inverse();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = -(mean.len() as f64) * LOG_SQRT_2PI - 0.5 * log_det;
        Ok(Self {
            mean,
            cov,
            chol: l,
            precision,
            log_norm,
        })
    }

    /// Isotropic `N(0, sigma^2 I)`.
    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, PriorError> {
        Self::new(Vector::zeros(dim), Matrix::identity(dim, dim) * (sigma * sigma))
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.cov
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }
}

/// One polar Gaussian: radius and angle are independent normals, mapped to
/// Cartesian coordinates by `(r cos t, r sin t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarComponent {
    pub weight: f64,
    pub radius: f64,
    pub angle: f64,
    pub radius_std: f64,
    pub angle_std: f64,
}

#[derive(Clone, Debug)]
pub struct PolarMixture {
    components: Vec<PolarComponent>,
}

impl PolarMixture {
    pub fn new(components: Vec<PolarComponent>) -> Result<Self, PriorError> {
        for (index, c) in components.iter().enumerate() {
            let bad = |reason: &str| PriorError::Component {
                index,
                reason: reason.to_string(),
            };
            if !(c.weight > 0.0) {
                return Err(bad("weight must be positive"));
            }
            if !(c.radius > 0.0) {
                return Err(bad("radius must be positive"));
            }
            if !(c.radius_std > 0.0 && c.angle_std > 0.0) {
                return Err(bad("standard deviations must be positive"));
            }
            if !c.angle.is_finite() {
                return Err(bad("angle must be finite"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.is_empty() || (total - 1.0).abs() > 1e-12 {
            return Err(PriorError::Weights(total));
        }
        Ok(Self { components })
    }

    /// Two curved modes on the vertical axis, mirror images of each other.
    pub fn default_bimodal() -> Self {
        let component = |angle| PolarComponent {
            weight: 0.5,
            radius: 2.0,
            angle,
            radius_std: 0.25,
            angle_std: 0.6,
        };
        Self::new(vec![component(FRAC_PI_2), component(3.0 * FRAC_PI_2)]).expect("valid default")
    }

    pub fn components(&self) -> &[PolarComponent] {
        &self.components
    }

    /// Per-component log densities in polar coordinates (without the Jacobian
    /// `1/r`) and their partial derivatives in `r` and `theta`.
    fn component_terms(&self, r: f64, theta: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.components.iter().map(move |c| {
            let dr = (r - c.radius) / c.radius_std;
            let log_r = -0.5 * dr * dr - c.radius_std.ln() - LOG_SQRT_2PI;
            let d_log_r = -dr / c.radius_std;
            let (log_t, d_log_t) = wrapped_normal_log(theta - c.angle, c.angle_std);
            (c.weight.ln() + log_r + log_t, d_log_r, d_log_t)
        })
    }
}

/// Log density of a normal wrapped onto the circle, evaluated at angular
/// offset `d`, and its derivative. Images beyond two turns are below 1e-300
/// for any `std` up to ~1.5.
fn wrapped_normal_log(d: f64, std: f64) -> (f64, f64) {
    let d = wrap_angle(d);
    let mut exps = [0.0; 5];
    let mut max = f64::NEG_INFINITY;
    for (j, e) in exps.iter_mut().enumerate() {
        let t = d + 2.0 * PI * (j as f64 - 2.0);
        *e = -0.5 * (t / std).powi(2);
        max = max.max(*e);
    }
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, e) in exps.iter().enumerate() {
        let t = d + 2.0 * PI * (j as f64 - 2.0);
        let w = (e - max).exp();
        sum += w;
        weighted += w * (-t / (std * std));
    }
    (max + sum.ln() - std.ln() - LOG_SQRT_2PI, weighted / sum)
}

/// Wraps to `(-pi, pi]`.
fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Clone, Debug)]
pub enum Prior {
    Gaussian(GaussianPrior),
    PolarBimodal(PolarMixture),
}

impl Prior {
    pub fn default_bimodal() -> Self {
        Prior::PolarBimodal(PolarMixture::default_bimodal())
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        Prior::Gaussian(GaussianPrior::isotropic(dim, 1.0).expect("identity covariance"))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Prior::Gaussian(_) => "gaussian",
            Prior::PolarBimodal(_) => "bimodal",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(g) => g.mean.len(),
            Prior::PolarBimodal(_) => 2,
        }
    }

    pub fn density(&self, x: &Vector) -> f64 {
        self.log_density(x).exp()
    }

    pub fn log_density(&self, x: &Vector) -> f64 {
        self.log_density_slice(x.as_slice())
    }

    /// Log density on a raw coordinate slice (used on quadrature nodes).
    pub fn log_density_slice(&self, x: &[f64]) -> f64 {
        match self {
            Prior::Gaussian(g) => {
                let d = Vector::from_iterator(x.len(), x.iter().zip(g.mean.iter()).map(|(a, m)| a - m));
                g.log_norm - 0.5 * d.dot(&(&g.precision * &d))
            }
            Prior::PolarBimodal(m) => {
                let r = x[0].hypot(x[1]).max(RADIUS_FLOOR);
                let theta = x[1].atan2(x[0]);
                log_sum_exp(m.component_terms(r, theta).map(|(l, _, _)| l)) - r.ln()
            }
        }
    }

    /// Gradient of the log density.
    pub fn score(&self, x: &Vector) -> Vector {
        match self {
            Prior::Gaussian(g) => -(&g.precision * (x - &g.mean)),
            Prior::PolarBimodal(m) => {
                let r = x[0].hypot(x[1]).max(RADIUS_FLOOR);
                let theta = x[1].atan2(x[0]);
                let terms: Vec<(f64, f64, f64)> = m.component_terms(r, theta).collect();
                let lse = log_sum_exp(terms.iter().map(|t| t.0));
                let (mut d_r, mut d_t) = (0.0, 0.0);
                for (l, dr, dt) in terms {
                    let resp = (l - lse).exp();
                    d_r += resp * dr;
                    d_t += resp * dt;
                }
                d_r -= 1.0 / r;
                let (c, s) = (x[0] / r, x[1] / r);
                // grad r = (c, s), grad theta = (-s, c) / r
                Vector::from_vec(vec![d_r * c - d_t * s / r, d_r * s + d_t * c / r])
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vector {
        match self {
            Prior::Gaussian(g) => {
                let xi = Vector::from_fn(g.mean.len(), |_, _| rng.normal());
                &g.mean + &g.chol * xi
            }
            Prior::PolarBimodal(m) => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut chosen = &m.components[m.components.len() - 1];
                for c in &m.components {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                let r = chosen.radius + chosen.radius_std * rng.normal();
                let theta = chosen.angle + chosen.angle_std * rng.normal();
                Vector::from_vec(vec![r * theta.cos(), r * theta.sin()])
            }
        }
    }

    /// Box `[lo_i, hi_i]` holding all but a negligible fraction of the mass
    /// (8 standard deviations in every direction).
    pub fn support_box(&self) -> Vec<(f64, f64)> {
        match self {
            Prior::Gaussian(g) => (0..g.mean.len())
                .map(|i| {
                    let s = g.cov[(i, i)].sqrt();
                    (g.mean[i] - 8.0 * s, g.mean[i] + 8.0 * s)
                })
                .collect(),
            Prior::PolarBimodal(m) => {
                let reach = m
                    .components
                    .iter()
                    .map(|c| c.radius + 8.0 * c.radius_std)
                    .fold(0.0, f64::max);
                vec![(-reach, reach); 2]
            }
        }
    }

    /// Default midpoint grid over [`Prior::support_box`].
    pub fn default_grid(&self) -> QuadratureGrid {
        self.grid_with_points(QuadratureGrid::DEFAULT_POINTS)
    }

    pub fn grid_with_points(&self, points: usize) -> QuadratureGrid {
        let bounds = self.support_box();
        let dims = bounds.len();
        QuadratureGrid::new(bounds, vec![points; dims]).expect("prior support box is a valid grid")
    }

    /// Unit vector along which the modes of a symmetric two-component polar
    /// mixture are separated; `None` for other priors.
    pub fn mode_axis(&self) -> Option<Vector> {
        match self {
            Prior::PolarBimodal(m) if m.components.len() == 2 => {
                let a = m.components[0].angle;
                Some(Vector::from_vec(vec![a.cos(), a.sin()]))
            }
            _ => None,
        }
    }
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{default_fd_step, fd_gradient, quad_integrate};

    fn v(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn gaussian_closed_forms() {
        let p = Prior::standard_gaussian(2);
        assert!((p.density(&v(0.0, 0.0)) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((p.log_density(&v(0.0, 0.0)) + (2.0 * PI).ln()).abs() < 1e-14);
        let s = Prior::Gaussian(GaussianPrior::isotropic(2, 0.5).unwrap());
        let x = v(0.3, -1.2);
        assert!((s.score(&x) + &x / 0.25).abs().max() < 1e-12);
        assert!((s.density(&x) - s.density(&-&x)).abs() < 1e-16);
        let g = GaussianPrior::new(v(1.0, -2.0), Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let g = Prior::Gaussian(g);
        assert!(g.score(&v(1.0, -2.0)).norm() < 1e-15);
    }

    #[test]
    fn gaussian_rejects_bad_covariance() {
        let bad = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(GaussianPrior::new(v(0.0, 0.0), bad).unwrap_err(), PriorError::NotPositiveDefinite);
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianPrior::new(v(0.0, 0.0), asym).is_err());
        assert!(matches!(
            GaussianPrior::new(Vector::zeros(3), Matrix::identity(2, 2)),
            Err(PriorError::Shape { .. })
        ));
    }

    #[test]
    fn polar_rejects_bad_components() {
        let mut c = PolarMixture::default_bimodal().components().to_vec();
        c[0].weight = 0.7;
        assert!(matches!(PolarMixture::new(c.clone()), Err(PriorError::Weights(_))));
        c[0].weight = 0.5;
        c[1].angle_std = 0.0;
        assert!(matches!(PolarMixture::new(c), Err(PriorError::Component { index: 1, .. })));
    }

    #[test]
    fn bimodal_normalizes_on_test_box() {
        let p = Prior::default_bimodal();
        let grid = QuadratureGrid::square(-5.0, 5.0, 400).unwrap();
        let total = quad_integrate(&grid, |x| p.log_density_slice(x).exp()).unwrap();
        assert!((0.999..=1.001).contains(&total), "{total}");
    }

    #[test]
    fn every_prior_normalizes_on_its_support_box() {
        let priors = [
            Prior::default_bimodal(),
            Prior::standard_gaussian(2),
            Prior::Gaussian(GaussianPrior::new(v(0.5, -1.0), Matrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3])).unwrap()),
        ];
        for p in priors {
            let total = quad_integrate(&p.default_grid(), |x| p.log_density_slice(x).exp()).unwrap();
            assert!((total - 1.0).abs() <= 1e-4, "{}: {total}", p.name());
        }
    }

    #[test]
    fn log_density_consistent_and_finite() {
        let p = Prior::default_bimodal();
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let x = v(8.0 * rng.uniform() - 4.0, 8.0 * rng.uniform() - 4.0);
            let d = p.density(&x);
            assert!(d > 0.0);
            assert!((p.log_density(&x).exp() - d).abs() <= 1e-12 * d);
        }
        for k in 0..16 {
            let a = k as f64 * PI / 8.0;
            assert!(p.log_density(&v(10.0 * a.cos(), 10.0 * a.sin())).is_finite());
        }
    }

    #[test]
    fn scores_match_finite_differences() {
        let priors = [
            Prior::default_bimodal(),
            Prior::standard_gaussian(2),
            Prior::Gaussian(GaussianPrior::new(v(0.5, -1.0), Matrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3])).unwrap()),
        ];
        let mut rng = Rng::new(9);
        for p in &priors {
            for _ in 0..100 {
                let x = p.sample(&mut rng);
                let fd = fd_gradient(|y| p.log_density(y), &x, default_fd_step(&x));
                let s = p.score(&x);
                let rel = (&s - &fd).norm() / s.norm().max(1e-12);
                assert!(rel <= 1e-5, "{} at {x:?}: {s:?} vs {fd:?}", p.name());
            }
        }
    }

    #[test]
    fn score_smooth_across_angle_cut() {
        // atan2 jumps on the negative horizontal axis, the wrapped angle law does not
        let p = Prior::default_bimodal();
        let above = p.score(&v(-1.5, 1e-12));
        let below = p.score(&v(-1.5, -1e-12));
        assert!((above - below).norm() < 1e-9);
    }

    #[test]
    fn gaussian_sample_covariance() {
        let p = Prior::standard_gaussian(2);
        let mut rng = Rng::new(21);
        let n = 100_000;
        let mut cov = Matrix::zeros(2, 2);
        for _ in 0..n {
            let x = p.sample(&mut rng);
            cov += &x * x.transpose();
        }
        cov /= n as f64;
        assert!((cov - Matrix::identity(2, 2)).abs().max() < 0.05);
    }

    #[test]
    fn degenerate_polar_concentrates() {
        let m = PolarMixture::new(vec![PolarComponent {
            weight: 1.0,
            radius: 1.5,
            angle: 0.7,
            radius_std: 1e-9,
            angle_std: 1e-9,
        }])
        .unwrap();
        let p = Prior::PolarBimodal(m);
        let mut rng = Rng::new(2);
        let target = v(1.5 * 0.7f64.cos(), 1.5 * 0.7f64.sin());
        for _ in 0..100 {
            assert!((p.sample(&mut rng) - &target).norm() < 1e-7);
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, -0.1, 0.0, PI, 3.0 * FRAC_PI_2, 10.0] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-15 && w <= PI + 1e-15);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-12 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-12);
        }
    }
}
