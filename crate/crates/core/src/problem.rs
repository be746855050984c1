//! Linear forward operators, the Gaussian noise model, the normal-equation
//! transform `z = A^T y`, and paired dataset generation.

use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::{mat_apply, streams, Matrix, Rng, Vector};
use crate::prior::Prior;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("noise level must be finite and non-negative, got {0}")]
    InvalidDelta(f64),
    #[error("dataset needs at least one sample")]
    EmptyDataset,
    #[error("operator is {rows}x{cols}; this requires a square operator")]
    NotSquare { rows: usize, cols: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed dataset file {path}: {reason}")]
    Parse { path: String, reason: String },
}

/// Which operator family a problem came from; used in labels and metadata.
#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Identity,
    Eps(f64),
    Custom,
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Identity => write!(f, "identity"),
            Operator::Eps(e) => write!(f, "eps={e}"),
            Operator::Custom => write!(f, "custom"),
        }
    }
}

/// `y = A x + eta`, `eta ~ N(0, delta^2 I)`.
#[derive(Clone, Debug)]
pub struct LinearProblem {
    operator: Operator,
    a: Matrix,
    adjoint: Matrix,
    normal: Matrix,
    delta: f64,
}

impl LinearProblem {
    pub fn new(a: Matrix, delta: f64) -> Result<Self, ProblemError> {
        Self::with_operator(Operator::Custom, a, delta)
    }

    fn with_operator(operator: Operator, a: Matrix, delta: f64) -> Result<Self, ProblemError> {
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(ProblemError::InvalidDelta(delta));
        }
        let adjoint = a.transpose();
        let normal = &adjoint * &a;
        Ok(Self {
            operator,
            a,
            adjoint,
            normal,
            delta,
        })
    }

    /// Denoising, `A = Id` in two dimensions.
    pub fn denoising(delta: f64) -> Result<Self, ProblemError> {
        Self::with_operator(Operator::Identity, Matrix::identity(2, 2), delta)
    }

    /// `A_eps = [[1, 1], [1, 1 + eps]]`, increasingly ill-posed as `eps -> 0`.
    pub fn a_eps(eps: f64, delta: f64) -> Result<Self, ProblemError> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(ProblemError::InvalidEpsilon(eps));
        }
        Self::with_operator(Operator::Eps(eps), a_eps_matrix(eps), delta)
    }

    pub fn operator(&self) -> &Operator {
        &self.operator
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn adjoint(&self) -> &Matrix {
        &self.adjoint
    }

    /// `A^T A`.
    pub fn normal(&self) -> &Matrix {
        &self.normal
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Same operator, different noise level.
    pub fn with_delta(&self, delta: f64) -> Result<Self, ProblemError> {
        Self::with_operator(self.operator.clone(), self.a.clone(), delta)
    }

    pub fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_square(&self) -> bool {
        self.a.nrows() == self.a.ncols()
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.a * x
    }

    pub fn apply_adjoint(&self, y: &Vector) -> Vector {
        mat_apply(&self.adjoint, y).expect("adjoint dimension")
    }

    pub fn apply_normal(&self, x: &Vector) -> Vector {
        &self.normal * x
    }

    /// Draws `y = A x + delta xi` and returns `(y, A^T y)`.
    pub fn observe(&self, x: &Vector, rng: &mut Rng) -> (Vector, Vector) {
        let xi = Vector::from_fn(self.output_dim(), |_, _| rng.normal());
        self.observe_with(x, &xi)
    }

    /// Observation for a given standard-normal draw `xi`.
    pub fn observe_with(&self, x: &Vector, xi: &Vector) -> (Vector, Vector) {
        let y = self.apply(x) + xi * self.delta;
        let z = self.apply_adjoint(&y);
        (y, z)
    }
}

pub fn a_eps_matrix(eps: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + eps])
}

/// Paired samples `(x, y, z)` stored one sample per column.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub xs: Matrix,
    pub ys: Matrix,
    pub zs: Matrix,
    pub seed: u64,
    pub delta: f64,
    pub operator: Operator,
    pub prior_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> Vector {
        self.xs.column(i).into_owned()
    }

    pub fn y(&self, i: usize) -> Vector {
        self.ys.column(i).into_owned()
    }

    pub fn z(&self, i: usize) -> Vector {
        self.zs.column(i).into_owned()
    }

    /// Writes `<stem>.csv` and `<stem>.meta`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), ProblemError> {
        let csv = dir.join(format!("{stem}.csv"));
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| ProblemError::Io { path, source }
        };
        let file = fs::File::create(&csv).map_err(io_err(&csv))?;
        let mut w = BufWriter::new(file);
        let header: Vec<String> = ["x", "y", "z"]
            .iter()
            .flat_map(|p| (1..=self.xs.nrows()).map(move |i| format!("{p}{i}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io_err(&csv))?;
        for i in 0..self.len() {
            let row: Vec<String> = [&self.xs, &self.ys, &self.zs]
                .iter()
                .flat_map(|m| m.column(i).iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>())
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io_err(&csv))?;
        }
        w.flush().map_err(io_err(&csv))?;

        let meta = dir.join(format!("{stem}.meta"));
        let text = format!(
            "seed={}\ndelta={}\noperator={}\nprior={}\nn={}\n",
            self.seed,
            fmt_f64(self.delta),
            self.operator,
            self.prior_name,
            self.len()
        );
        fs::write(&meta, text).map_err(io_err(&meta))
    }

    /// Reads back a dataset written by [`Dataset::write`].
    pub fn read(dir: &Path, stem: &str) -> Result<Self, ProblemError> {
        let meta_path = dir.join(format!("{stem}.meta"));
        let meta = read_key_values(&meta_path)?;
        let parse_err = |path: &Path, reason: String| ProblemError::Parse {
            path: path.display().to_string(),
            reason,
        };
        let get = |key: &str| {
            meta.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| parse_err(&meta_path, format!("missing key {key}")))
        };
        let seed: u64 = get("seed")?.parse().map_err(|e| parse_err(&meta_path, format!("seed: {e}")))?;
        let delta: f64 = get("delta")?.parse().map_err(|e| parse_err(&meta_path, format!("delta: {e}")))?;
        let n: usize = get("n")?.parse().map_err(|e| parse_err(&meta_path, format!("n: {e}")))?;
        let operator = match get("operator")?.as_str() {
            "identity" => Operator::Identity,
            "custom" => Operator::Custom,
            other => match other.strip_prefix("eps=").map(str::parse::<f64>) {
                Some(Ok(e)) => Operator::Eps(e),
                _ => return Err(parse_err(&meta_path, format!("unknown operator {other}"))),
            },
        };
        let prior_name = get("prior")?;

        let csv_path = dir.join(format!("{stem}.csv"));
        let file = fs::File::open(&csv_path).map_err(|source| ProblemError::Io {
            path: csv_path.display().to_string(),
            source,
        })?;
        let mut lines = io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(&csv_path, "empty file".into()))?
            .map_err(|source| ProblemError::Io {
                path: csv_path.display().to_string(),
                source,
            })?;
        let cols = header.split(',').count();
        if cols % 3 != 0 || cols == 0 {
            return Err(parse_err(&csv_path, format!("header has {cols} columns")));
        }
        let dim = cols / 3;
        let mut data = Vec::with_capacity(n * cols);
        for (row, line) in lines.enumerate() {
            let line = line.map_err(|source| ProblemError::Io {
                path: csv_path.display().to_string(),
                source,
            })?;
            let values: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let values = values.map_err(|e| parse_err(&csv_path, format!("row {row}: {e}")))?;
            if values.len() != cols {
                return Err(parse_err(&csv_path, format!("row {row} has {} columns", values.len())));
            }
            data.extend(values);
        }
        if data.len() != n * cols {
            return Err(parse_err(&csv_path, format!("expected {n} rows, found {}", data.len() / cols)));
        }
        let block = |offset: usize| Matrix::from_fn(dim, n, |i, j| data[j * cols + offset + i]);
        Ok(Self {
            xs: block(0),
            ys: block(dim),
            zs: block(2 * dim),
            seed,
            delta,
            operator,
            prior_name,
        })
    }
}

/// Draws `n` independent triples. Prior samples and noise come from separate
/// forks of `rng`, so two problems with different `delta` see the same `x`
/// samples and the same standard-normal noise draws.
pub fn generate_dataset(problem: &LinearProblem, prior: &Prior, n: usize, rng: &Rng) -> Result<Dataset, ProblemError> {
    generate_dataset_with(problem, prior, n, rng, false)
}

/// As [`generate_dataset`]; with `noiseless` the targets are exact `A x`.
pub fn generate_dataset_with(
    problem: &LinearProblem,
    prior: &Prior,
    n: usize,
    rng: &Rng,
    noiseless: bool,
) -> Result<Dataset, ProblemError> {
    if n == 0 {
        return Err(ProblemError::EmptyDataset);
    }
    let mut prior_rng = rng.fork(streams::PRIOR);
    let mut noise_rng = rng.fork(streams::NOISE);
    let (nx, ny) = (problem.input_dim(), problem.output_dim());
    let mut xs = Matrix::zeros(nx, n);
    let mut ys = Matrix::zeros(ny, n);
    let mut zs = Matrix::zeros(nx, n);
    let scaled = if noiseless { problem.with_delta(0.0)? } else { problem.clone() };
    for i in 0..n {
        let x = prior.sample(&mut prior_rng);
        let (y, z) = scaled.observe(&x, &mut noise_rng);
        xs.set_column(i, &x);
        ys.set_column(i, &y);
        zs.set_column(i, &z);
    }
    Ok(Dataset {
        xs,
        ys,
        zs,
        seed: rng.seed(),
        delta: scaled.delta(),
        operator: problem.operator().clone(),
        prior_name: prior.name().to_string(),
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>, ProblemError> {
    let text = fs::read_to_string(path).map_err(|source| ProblemError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| ProblemError::Parse {
                    path: path.display().to_string(),
                    reason: format!("not a key=value line: {l}"),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{quad_integrate, singular_values};

    #[test]
    fn denoising_is_identity() {
        let p = LinearProblem::denoising(0.1).unwrap();
        let x = Vector::from_vec(vec![0.3, -2.0]);
        assert_eq!(p.apply(&x), x);
        assert_eq!(p.normal(), &Matrix::identity(2, 2));
        assert_eq!(singular_values(p.matrix()).as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn a_eps_examples() {
        let p = LinearProblem::a_eps(0.5, 0.0).unwrap();
        assert_eq!(p.matrix(), &Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.5]));
        assert!((p.matrix().determinant() - 0.5).abs() < 1e-15);
        assert!((p.normal().trace() - 5.25).abs() < 1e-15);
        let p = LinearProblem::a_eps(0.125, 0.0).unwrap();
        assert_eq!(p.normal(), &Matrix::from_row_slice(2, 2, &[2.0, 2.125, 2.125, 2.265625]));
        assert!(matches!(LinearProblem::a_eps(0.0, 0.1), Err(ProblemError::InvalidEpsilon(_))));
        assert!(matches!(LinearProblem::a_eps(-1.0, 0.1), Err(ProblemError::InvalidEpsilon(_))));
        assert!(matches!(LinearProblem::denoising(-0.1), Err(ProblemError::InvalidDelta(_))));
    }

    #[test]
    fn ill_posedness_ordering() {
        let conds: Vec<f64> = [0.125, 0.25, 0.5, 1.0]
            .iter()
            .map(|&e| crate::numerics::condition_number(&a_eps_matrix(e)))
            .collect();
        assert!(conds.windows(2).all(|w| w[0] > w[1]), "{conds:?}");
        for e in [0.125, 0.25, 0.5, 1.0] {
            let p = LinearProblem::a_eps(e, 0.0).unwrap();
            let d = p.matrix().determinant();
            assert!((p.normal().determinant() - d * d).abs() < 1e-12 && d * d > 0.0);
        }
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let p = LinearProblem::a_eps(0.5, 0.0).unwrap();
        let x = Vector::from_vec(vec![0.7, -0.2]);
        let (y, z) = p.observe(&x, &mut Rng::new(1));
        assert_eq!(y, p.apply(&x));
        assert_eq!(z, p.apply_adjoint(&y));
    }

    #[test]
    fn observation_decomposes_exactly() {
        let p = LinearProblem::a_eps(0.5, 0.3).unwrap();
        let x = Vector::from_vec(vec![0.7, -0.2]);
        let xi = Vector::from_vec(vec![0.4, -1.1]);
        let (y, z) = p.observe_with(&x, &xi);
        let eta = &xi * 0.3;
        assert_eq!(y, p.apply(&x) + &eta);
        let resid = &z - p.normal() * &x - p.adjoint() * &eta;
        assert!(resid.abs().max() < 1e-15);
    }

    #[test]
    fn noise_variance() {
        let delta = 0.3;
        let p = LinearProblem::denoising(delta).unwrap();
        let mut rng = Rng::new(8);
        let x = Vector::zeros(2);
        let n = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let (y, _) = p.observe(&x, &mut rng);
            sq[0] += y[0] * y[0];
            sq[1] += y[1] * y[1];
        }
        for s in sq {
            assert!((s / n as f64 / (delta * delta) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let p = LinearProblem::a_eps(0.125, 0.2).unwrap();
        let prior = Prior::default_bimodal();
        let a = generate_dataset(&p, &prior, 500, &Rng::new(3)).unwrap();
        let b = generate_dataset(&p, &prior, 500, &Rng::new(3)).unwrap();
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
        for i in 0..a.len() {
            let z = mat_apply(p.adjoint(), &a.y(i)).unwrap();
            assert_eq!(a.z(i), z);
        }
        // a different noise level keeps the x samples
        let c = generate_dataset(&p.with_delta(0.4).unwrap(), &prior, 500, &Rng::new(3)).unwrap();
        assert_eq!(a.xs, c.xs);
        assert!(generate_dataset(&p, &prior, 0, &Rng::new(3)).is_err());
    }

    #[test]
    fn dataset_mean_matches_quadrature() {
        let p = LinearProblem::denoising(0.1).unwrap();
        let prior = Prior::default_bimodal();
        let n = 40_000;
        let d = generate_dataset(&p, &prior, n, &Rng::new(12)).unwrap();
        let grid = prior.default_grid();
        for axis in 0..2 {
            let mean = quad_integrate(&grid, |x| x[axis] * prior.log_density_slice(x).exp()).unwrap();
            let second = quad_integrate(&grid, |x| x[axis] * x[axis] * prior.log_density_slice(x).exp()).unwrap();
            let sd = (second - mean * mean).sqrt();
            let emp = d.xs.row(axis).sum() / n as f64;
            assert!((emp - mean).abs() <= 4.0 * sd / (n as f64).sqrt(), "axis {axis}: {emp} vs {mean}");
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let p = LinearProblem::a_eps(0.5, 0.25).unwrap();
        let d = generate_dataset(&p, &Prior::default_bimodal(), 20, &Rng::new(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path(), "train").unwrap();
        let text = fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(text.starts_with("x1,x2,y1,y2,z1,z2\n"));
        let back = Dataset::read(dir.path(), "train").unwrap();
        assert_eq!(back.xs, d.xs);
        assert_eq!(back.zs, d.zs);
        assert_eq!(back.operator, Operator::Eps(0.5));
        assert_eq!(back.seed, 5);
        assert_eq!(back.prior_name, "bimodal");
    }
}
