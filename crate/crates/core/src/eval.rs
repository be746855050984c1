//! Metrics and figure data: reconstruction/approximation errors, deformed
//! grids (CSV + SVG) and score fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::iresnet::{InversionConfig, Model};
use crate::losses::Objective;
use crate::numerics::{Matrix, Vector};
use crate::oracle::{Oracle, OracleError};
use crate::prior::Prior;
use crate::problem::{Dataset, LinearProblem};

/// Inversion settings for evaluating trained models. Blocks trained on
/// ill-conditioned operators sit near the Lipschitz cap, where 100 steps do
/// not reach the tolerance.
pub const EVAL_INVERSION: InversionConfig = InversionConfig {
    max_iters: 2000,
    tol: 1e-10,
};

/// Data fed to `psi`: the measurement itself for the log-det objective
/// (trained in data space), the normal-equation data `A^T y` otherwise.
pub fn reconstruction_input(data: &Dataset, objective: Objective) -> &Matrix {
    if objective == Objective::Logdet {
        &data.ys
    } else {
        &data.zs
    }
}

/// Mean `|x_i - psi(input_i)|^2` and the number of unconverged inversions.
pub fn reconstruction_mse(model: &Model, data: &Dataset, objective: Objective, inv: &InversionConfig) -> (f64, usize) {
    let r = model.invert_batch(reconstruction_input(data, objective), inv);
    ((&r.x - &data.xs).norm_squared() / data.len() as f64, r.failures())
}

/// Mean `|phi(x_i) - z_i|^2`. Log-det models map into data space, so their
/// output is compared as `A^T phi(x)` against `z`.
pub fn approximation_mse(model: &Model, data: &Dataset, problem: &LinearProblem, objective: Objective) -> f64 {
    let out = model.forward_batch(&data.xs);
    let out = if objective == Objective::Logdet { problem.adjoint() * out } else { out };
    (&out - &data.zs).norm_squared() / data.len() as f64
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub objective: Objective,
    pub delta: f64,
    pub reg_weight: f64,
    pub operator: String,
    pub reconstruction_mse: f64,
    pub approximation_mse: f64,
    pub inversion_failures: usize,
    pub test_size: usize,
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "objective={}", self.objective);
        let _ = writeln!(s, "operator={}", self.operator);
        let _ = writeln!(s, "delta={}", self.delta);
        let _ = writeln!(s, "reg_weight={}", self.reg_weight);
        let _ = writeln!(s, "test_size={}", self.test_size);
        let _ = writeln!(s, "reconstruction_mse={:.16e}", self.reconstruction_mse);
        let _ = writeln!(s, "approximation_mse={:.16e}", self.approximation_mse);
        let _ = writeln!(s, "inversion_failures={}", self.inversion_failures);
        s
    }
}

pub fn evaluate(model: &Model, data: &Dataset, problem: &LinearProblem, objective: Objective, reg_weight: f64) -> EvalReport {
    let (rec, failures) = reconstruction_mse(model, data, objective, &EVAL_INVERSION);
    EvalReport {
        objective,
        delta: problem.delta(),
        reg_weight,
        operator: problem.operator().to_string(),
        reconstruction_mse: rec,
        approximation_mse: approximation_mse(model, data, problem, objective),
        inversion_failures: failures,
        test_size: data.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub lines: usize,
    pub samples: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: -3.0,
            hi: 3.0,
            lines: 21,
            samples: 200,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.lines < 2 || self.samples < 2 {
            return Err(format!("grid needs >= 2 lines and samples, got {} and {}", self.lines, self.samples));
        }
        if !(self.lo < self.hi) {
            return Err(format!("grid bounds must satisfy lo < hi, got [{}, {}]", self.lo, self.hi));
        }
        Ok(())
    }

    fn coord(&self, i: usize, n: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64
    }

    /// Points along the grid lines: horizontal lines first, then vertical,
    /// `samples` points each, as matrix columns.
    pub fn line_points(&self) -> Matrix {
        let (l, s) = (self.lines, self.samples);
        let mut m = Matrix::zeros(2, 2 * l * s);
        for i in 0..l {
            for j in 0..s {
                let a = self.coord(i, l);
                let t = self.coord(j, s);
                m[(0, i * s + j)] = t;
                m[(1, i * s + j)] = a;
                m[(0, (l + i) * s + j)] = a;
                m[(1, (l + i) * s + j)] = t;
            }
        }
        m
    }

    /// Intersection nodes of the grid lines, row-major.
    pub fn nodes(&self) -> Matrix {
        let l = self.lines;
        Matrix::from_fn(2, l * l, |r, c| if r == 0 { self.coord(c % l, l) } else { self.coord(c / l, l) })
    }
}

/// Original points, their images and per-point failure flags.
#[derive(Clone, Debug)]
pub struct GridImage {
    pub spec: GridSpec,
    pub points: Matrix,
    pub image: Matrix,
    pub flags: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    /// `psi(A^T A g)`
    Normal,
    /// `psi(A g)`
    Direct,
}

impl GridMode {
    pub fn for_objective(o: Objective) -> Self {
        if o == Objective::Logdet {
            GridMode::Direct
        } else {
            GridMode::Normal
        }
    }
}

pub fn reconstruction_grid(model: &Model, problem: &LinearProblem, spec: &GridSpec, mode: GridMode, inv: &InversionConfig) -> GridImage {
    let points = spec.line_points();
    let data = match mode {
        GridMode::Normal => problem.normal() * &points,
        GridMode::Direct => problem.matrix() * &points,
    };
    let r = model.invert_batch(&data, inv);
    GridImage {
        spec: *spec,
        points,
        image: r.x,
        flags: r.converged.iter().map(|c| !c).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    PosteriorMean,
    Map,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::PosteriorMean => "pm",
            Estimator::Map => "map",
        }
    }
}

/// Oracle estimator applied to noiseless data `A g`.
pub fn estimator_grid(estimator: Estimator, oracle: &Oracle<'_>, spec: &GridSpec) -> Result<GridImage, OracleError> {
    estimator_image(estimator, oracle, spec, spec.line_points())
}

pub fn estimator_image(estimator: Estimator, oracle: &Oracle<'_>, spec: &GridSpec, points: Matrix) -> Result<GridImage, OracleError> {
    let mut image = Matrix::zeros(2, points.ncols());
    let mut flags = Vec::with_capacity(points.ncols());
    for c in 0..points.ncols() {
        let y = oracle.problem().apply(&points.column(c).into_owned());
        let (x, ok) = match estimator {
            Estimator::PosteriorMean => (oracle.posterior_mean(&y)?, true),
            Estimator::Map => {
                let r = oracle.map_estimate(&y)?;
                (r.x, r.converged)
            }
        };
        image.set_column(c, &x);
        flags.push(!ok);
    }
    Ok(GridImage {
        spec: *spec,
        points,
        image,
        flags,
    })
}

/// Mean prior density at the images of points whose original position lies
/// within `half_width` of the line between the modes.
pub fn band_density(prior: &Prior, grid: &GridImage, half_width: f64) -> f64 {
    let axis = prior.mode_axis().unwrap_or_else(|| Vector::from_vec(vec![0.0, 1.0]));
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..grid.points.ncols() {
        if grid.points.column(c).dot(&axis).abs() <= half_width {
            sum += prior.density(&grid.image.column(c).into_owned());
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Mean prior density at all image points.
pub fn mean_density(prior: &Prior, grid: &GridImage) -> f64 {
    let n = grid.image.ncols();
    (0..n).map(|c| prior.density(&grid.image.column(c).into_owned())).sum::<f64>() / n as f64
}

/// Half width of the central band used by [`band_density`].
pub const BAND_HALF_WIDTH: f64 = 0.5;

fn e17(v: f64) -> String {
    format!("{v:.16e}")
}

impl GridImage {
    /// `gx,gy,rx,ry,flag`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gx,gy,rx,ry,flag\n");
        for c in 0..self.points.ncols() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e17(self.points[(0, c)]),
                e17(self.points[(1, c)]),
                e17(self.image[(0, c)]),
                e17(self.image[(1, c)]),
                u8::from(self.flags[c])
            );
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let size = 600.0;
        let (lo, hi) = (self.spec.lo - 0.5, self.spec.hi + 0.5);
        let px = |v: f64| (v - lo) / (hi - lo) * size;
        let py = |v: f64| size - (v - lo) / (hi - lo) * size;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let per = self.spec.samples;
        for (m, colour, w) in [(&self.points, "#cccccc", 0.6), (&self.image, "#1f4e9c", 1.0)] {
            for line in 0..m.ncols() / per {
                let pts: Vec<String> = (0..per)
                    .map(|j| {
                        let c = line * per + j;
                        format!("{:.2},{:.2}", px(m[(0, c)]), py(m[(1, c)]))
                    })
                    .collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="{w}" points="{}"/>"#, pts.join(" "));
            }
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(dir.join(format!("{stem}.svg")), self.to_svg())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreField {
    Prior,
    Data,
}

/// Score vectors at the grid intersections: rows `gx,gy,sx,sy`.
pub fn score_field(field: ScoreField, prior: &Prior, oracle: Option<&Oracle<'_>>, spec: &GridSpec) -> Result<Matrix, OracleError> {
    let nodes = spec.nodes();
    let mut out = Matrix::zeros(4, nodes.ncols());
    for c in 0..nodes.ncols() {
        let g = nodes.column(c).into_owned();
        let s = match (field, oracle) {
            (ScoreField::Prior, _) => prior.score(&g),
            (ScoreField::Data, Some(o)) => o.data_score(&g)?,
            (ScoreField::Data, None) => return Err(OracleError::Dimension("data score needs an oracle".into())),
        };
        out[(0, c)] = g[0];
        out[(1, c)] = g[1];
        out[(2, c)] = s[0];
        out[(3, c)] = s[1];
    }
    Ok(out)
}

pub fn score_field_csv(field: &Matrix) -> String {
    let mut s = String::from("gx,gy,sx,sy\n");
    for c in 0..field.ncols() {
        let _ = writeln!(s, "{},{},{},{}", e17(field[(0, c)]), e17(field[(1, c)]), e17(field[(2, c)]), e17(field[(3, c)]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iresnet::ModelConfig;
    use crate::numerics::Rng;
    use crate::oracle::OracleConfig;
    use crate::prior::GaussianPrior;
    use crate::problem::generate_dataset;

    fn identity_model() -> Model {
        Model::zeros(&ModelConfig {
            hidden: 4,
            ..Default::default()
        })
        .unwrap()
    }

    /// Linear blocks whose product is `A^T A`.
    fn normal_operator_model(problem: &LinearProblem) -> Model {
        Model::linear_from_matrix(problem.normal(), 3, 0.99).unwrap()
    }

    #[test]
    fn zero_metrics_for_exact_models() {
        let prior = Prior::default_bimodal();
        let id = LinearProblem::denoising(0.0).unwrap();
        let data = generate_dataset(&id, &prior, 200, &Rng::new(1)).unwrap();
        let (mse, fail) = reconstruction_mse(&identity_model(), &data, Objective::Approx, &InversionConfig::default());
        assert_eq!((mse, fail), (0.0, 0));

        let p = LinearProblem::a_eps(0.5, 0.0).unwrap();
        let data = generate_dataset(&p, &prior, 200, &Rng::new(2)).unwrap();
        let m = normal_operator_model(&p);
        let (mse, _) = reconstruction_mse(&m, &data, Objective::Approx, &InversionConfig { max_iters: 500, tol: 1e-14 });
        assert!(mse < 1e-20, "{mse}");
        assert!(approximation_mse(&m, &data, &p, Objective::Approx) < 1e-24);
    }

    #[test]
    fn approximation_error_of_exact_operator_is_noise() {
        // E|A^T eta|^2 = delta^2 tr(A A^T)
        let prior = Prior::default_bimodal();
        let p = LinearProblem::a_eps(0.5, 0.3).unwrap();
        let n = 4000;
        let data = generate_dataset(&p, &prior, n, &Rng::new(5)).unwrap();
        let m = normal_operator_model(&p);
        let out = m.forward_batch(&data.xs);
        let errs: Vec<f64> = (0..n).map(|c| (out.column(c) - data.zs.column(c)).norm_squared()).collect();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let expect = 0.09 * (p.matrix() * p.adjoint()).trace();
        assert!((approximation_mse(&m, &data, &p, Objective::Approx) - mean).abs() < 1e-12);
        assert!((mean - expect).abs() <= 3.0 * se, "{mean} {expect} {se}");
    }

    #[test]
    fn identity_grids_are_undeformed() {
        let spec = GridSpec {
            samples: 20,
            ..GridSpec::default()
        };
        let id = LinearProblem::denoising(0.1).unwrap();
        let g = reconstruction_grid(&identity_model(), &id, &spec, GridMode::Normal, &InversionConfig::default());
        assert_eq!(g.image, g.points);
        let p = LinearProblem::a_eps(0.5, 0.1).unwrap();
        let g = reconstruction_grid(&normal_operator_model(&p), &p, &spec, GridMode::Normal, &InversionConfig { max_iters: 500, tol: 1e-14 });
        assert!((&g.image - &g.points).amax() < 1e-10);
        assert!(g.flags.iter().all(|f| !f));
        let csv = g.to_csv();
        assert!(csv.starts_with("gx,gy,rx,ry,flag\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 21 * 20);
        assert!(g.to_svg().contains("<polyline"));
    }

    #[test]
    fn gaussian_estimator_grids() {
        let sigma = 1.0;
        let prior = Prior::Gaussian(GaussianPrior::isotropic(2, sigma).unwrap());
        let p = LinearProblem::denoising(0.5).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig::default()).unwrap();
        let spec = GridSpec {
            lines: 5,
            samples: 3,
            ..GridSpec::default()
        };
        let pm = estimator_grid(Estimator::PosteriorMean, &o, &spec).unwrap();
        let map = estimator_grid(Estimator::Map, &o, &spec).unwrap();
        assert!((&pm.image - &map.image).amax() <= 1e-6);
        let expect = &pm.points * (sigma * sigma / (sigma * sigma + 0.25));
        assert!((&pm.image - expect).amax() <= 1e-6);
    }

    #[test]
    fn score_fields() {
        let gauss = Prior::standard_gaussian(2);
        let spec = GridSpec {
            lines: 9,
            ..GridSpec::default()
        };
        let f = score_field(ScoreField::Prior, &gauss, None, &spec).unwrap();
        for c in 0..f.ncols() {
            assert!((f[(2, c)] + f[(0, c)]).abs() < 1e-14 && (f[(3, c)] + f[(1, c)]).abs() < 1e-14);
        }
        let prior = Prior::default_bimodal();
        let p = LinearProblem::denoising(0.25).unwrap();
        let o = Oracle::new(&prior, &p, OracleConfig { points: 200, ..OracleConfig::default() }).unwrap();
        let fp = score_field(ScoreField::Prior, &prior, None, &spec).unwrap();
        let fd = score_field(ScoreField::Data, &prior, Some(&o), &spec).unwrap();
        let max_norm = |m: &Matrix| (0..m.ncols()).map(|c| m[(2, c)].hypot(m[(3, c)])).fold(0.0, f64::max);
        assert!(max_norm(&fd) <= max_norm(&fp));
        // odd symmetry: node c and its mirror n-1-c
        let n = fd.ncols();
        for c in 0..n {
            let m = n - 1 - c;
            assert!((fd[(2, c)] + fd[(2, m)]).abs() < 1e-8 && (fd[(3, c)] + fd[(3, m)]).abs() < 1e-8);
        }
        assert!(score_field_csv(&fd).starts_with("gx,gy,sx,sy\n"));
    }

    #[test]
    fn band_density_selects_central_rows() {
        let prior = Prior::default_bimodal();
        let spec = GridSpec {
            lines: 21,
            samples: 10,
            ..GridSpec::default()
        };
        let points = spec.line_points();
        let g = GridImage {
            spec,
            image: points.clone(),
            points,
            flags: vec![false; 2 * 21 * 10],
        };
        let band = band_density(&prior, &g, BAND_HALF_WIDTH);
        assert!(band.is_finite() && band < mean_density(&prior, &g));
    }
}
