//! Small dense linear algebra, seeded random streams, tensor-grid quadrature
//! and finite differences.
//!
//! Vectors and matrices are nalgebra's dynamically sized types. Batched data
//! is stored column-per-sample (`n x batch`), which is also the layout the
//! network kernels in [`crate::iresnet`] expect.

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {op} expects {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("integrand is not finite ({value}) at node {node:?}")]
    NonFiniteIntegrand { node: Vec<f64>, value: f64 },
    #[error("invalid quadrature grid: {0}")]
    InvalidGrid(String),
}

/// Matrix-vector product with a checked inner dimension.
pub fn mat_apply(m: &Matrix, v: &Vector) -> Result<Vector, NumericsError> {
    if m.ncols() != v.len() {
        return Err(NumericsError::DimensionMismatch {
            op: "mat_apply",
            expected: m.ncols(),
            got: v.len(),
        });
    }
    Ok(m * v)
}

/// `c <- alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
///
/// Thin wrapper over `matrixmultiply::dgemm` using nalgebra's column-major
/// storage; transposition is expressed through strides, so nothing is copied.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k, rsa, csa) = if trans_a {
        (a.ncols(), a.nrows(), a.nrows(), 1)
    } else {
        (a.nrows(), a.ncols(), 1, a.nrows())
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.ncols(), b.nrows(), b.nrows(), 1)
    } else {
        (b.nrows(), b.ncols(), 1, b.nrows())
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.nrows(), c.ncols()), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_mut(beta);
        return;
    }
    let rsc = 1;
    let csc = c.nrows();
    // SAFETY: shapes and strides are checked above and describe exactly the
    // column-major buffers owned by `a`, `b` and `c`; `c` is borrowed mutably
    // so it cannot alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Sign and log-absolute-value of the determinant.
pub fn slogdet(m: &Matrix) -> (f64, f64) {
    let lu = m.clone().lu();
    let det = lu.determinant();
    if det == 0.0 {
        return (0.0, f64::NEG_INFINITY);
    }
    // log|det| from the U diagonal, which does not overflow for larger sizes
    let logabs = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
    (det.signum(), logabs)
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vector {
    let mut s = m.clone().svd(false, false).singular_values;
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number.
pub fn condition_number(m: &Matrix) -> f64 {
    let s = singular_values(m);
    s[0] / s[s.len() - 1]
}

/// Named sub-streams so that data, initialization, probes and shuffling can be
/// drawn independently of each other.
pub mod streams {
    pub const PRIOR: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PROBES: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const TRAIN_SET: u64 = 6;
    pub const TEST_SET: u64 = 7;
    pub const ORACLE: u64 = 8;
}

/// Seeded ChaCha20 stream.
///
/// `fork` derives a child stream from `(seed, stream id, tag)` only, never from
/// the draws consumed so far, so the child is the same no matter how much the
/// parent has been used.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, tag: u64) -> Rng {
        let mixed = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Self::with_stream(self.seed, mixed)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` i.i.d. standard normal draws.
pub fn sample_std_normal(rng: &mut Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.normal())
}

/// Midpoint-rule tensor grid.
///
/// Every cell of the box is represented by its center with weight equal to the
/// cell volume, so the weights sum to the box volume and no node touches the
/// boundary.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    bounds: Vec<(f64, f64)>,
    points: Vec<usize>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub const DEFAULT_POINTS: usize = 400;

    pub fn new(bounds: Vec<(f64, f64)>, points: Vec<usize>) -> Result<Self, NumericsError> {
        if bounds.is_empty() || bounds.len() != points.len() {
            return Err(NumericsError::InvalidGrid(format!(
                "{} bounds for {} point counts",
                bounds.len(),
                points.len()
            )));
        }
        for (axis, (&(lo, hi), &p)) in bounds.iter().zip(&points).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(NumericsError::InvalidGrid(format!("axis {axis}: bad bounds [{lo}, {hi}]")));
            }
            if p == 0 {
                return Err(NumericsError::InvalidGrid(format!("axis {axis}: zero points")));
            }
        }
        let dim = bounds.len();
        let total: usize = points.iter().product();
        let cell: f64 = bounds.iter().zip(&points).map(|(&(lo, hi), &p)| (hi - lo) / p as f64).product();
        let mut nodes = Vec::with_capacity(total * dim);
        let mut index = vec![0usize; dim];
        for _ in 0..total {
            for axis in 0..dim {
                let (lo, hi) = bounds[axis];
                let h = (hi - lo) / points[axis] as f64;
                nodes.push(lo + (index[axis] as f64 + 0.5) * h);
            }
            // odometer, first axis fastest
            for axis in 0..dim {
                index[axis] += 1;
                if index[axis] < points[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Ok(Self {
            bounds,
            points,
            nodes,
            weights: vec![cell; total],
        })
    }

    /// Square 2D grid `[lo, hi]^2` with `points` nodes per axis.
    pub fn square(lo: f64, hi: f64, points: usize) -> Result<Self, NumericsError> {
        Self::new(vec![(lo, hi); 2], vec![points; 2])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.nodes[i * d..(i + 1) * d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes as an `dim x len` matrix, one node per column.
    pub fn node_matrix(&self) -> Matrix {
        Matrix::from_column_slice(self.dim(), self.len(), &self.nodes)
    }

    /// Largest cell width over all axes.
    pub fn spacing(&self) -> f64 {
        self.bounds
            .iter()
            .zip(&self.points)
            .map(|(&(lo, hi), &p)| (hi - lo) / p as f64)
            .fold(0.0, f64::max)
    }
}

/// `sum_i w_i f(node_i)`; a non-finite integrand value is an error naming the node.
pub fn quad_integrate<F>(grid: &QuadratureGrid, mut f: F) -> Result<f64, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut total = 0.0;
    for i in 0..grid.len() {
        let node = grid.node(i);
        let value = f(node);
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteIntegrand {
                node: node.to_vec(),
                value,
            });
        }
        total += grid.weight(i) * value;
    }
    Ok(total)
}

/// Default central-difference step, `1e-5 * max(1, |x|)`.
pub fn default_fd_step(x: &Vector) -> f64 {
    1e-5 * x.norm().max(1.0)
}

/// Central-difference gradient.
pub fn fd_gradient<F>(mut f: F, x: &Vector, h: f64) -> Vector
where
    F: FnMut(&Vector) -> f64,
{
    let mut probe = x.clone();
    Vector::from_fn(x.len(), |j, _| {
        probe[j] = x[j] + h;
        let up = f(&probe);
        probe[j] = x[j] - h;
        let down = f(&probe);
        probe[j] = x[j];
        (up - down) / (2.0 * h)
    })
}

/// Largest singular value by power iteration on `W^T W`, continuing from the
/// left-vector estimate `u` (updated in place). Returns the estimate.
pub fn power_iteration(w: &Matrix, u: &mut Vector, iterations: usize) -> f64 {
    debug_assert_eq!(u.len(), w.nrows());
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let mut v = w.tr_mul(u);
        let vn = v.norm();
        if vn == 0.0 {
            return 0.0;
        }
        v /= vn;
        let wv = w * &v;
        sigma = wv.norm();
        if sigma == 0.0 {
            return 0.0;
        }
        *u = wv / sigma;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat_apply_examples() {
        let id = Matrix::identity(2, 2);
        assert_eq!(mat_apply(&id, &Vector::from_vec(vec![3.0, -1.0])).unwrap().as_slice(), &[3.0, -1.0]);
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.5]);
        assert_eq!(mat_apply(&a, &Vector::from_vec(vec![1.0, 0.0])).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(mat_apply(&a, &Vector::from_vec(vec![0.0, 1.0])).unwrap().as_slice(), &[1.0, 1.5]);
    }

    #[test]
    fn mat_apply_rejects_bad_dimension() {
        let a = Matrix::zeros(2, 3);
        let err = mat_apply(&a, &Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, NumericsError::DimensionMismatch { expected: 3, got: 2, .. }));
    }

    #[test]
    fn gemm_matches_naive_products() {
        let mut rng = Rng::new(3);
        let a = Matrix::from_fn(5, 7, |_, _| rng.normal());
        let b = Matrix::from_fn(7, 4, |_, _| rng.normal());
        let mut c = Matrix::from_fn(5, 4, |_, _| rng.normal());
        let expect = 2.0 * &a * &b + 0.5 * &c;
        gemm(2.0, &a, false, &b, false, 0.5, &mut c);
        assert!((c - expect).abs().max() < 1e-12);

        let at = a.transpose();
        let bt = b.transpose();
        let mut c = Matrix::zeros(5, 4);
        gemm(1.0, &at, true, &bt, true, 0.0, &mut c);
        assert!((c - &a * &b).abs().max() < 1e-12);
    }

    #[test]
    fn normal_stream_is_reproducible() {
        let a = sample_std_normal(&mut Rng::new(17), 2);
        let b = sample_std_normal(&mut Rng::new(17), 2);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn fork_ignores_parent_consumption() {
        let parent = Rng::new(5);
        let mut used = parent.clone();
        for _ in 0..10 {
            used.normal();
        }
        assert_eq!(parent.fork(3).normal().to_bits(), used.fork(3).normal().to_bits());
        assert_ne!(parent.fork(3).normal().to_bits(), parent.fork(4).normal().to_bits());
    }

    #[test]
    fn normal_moments() {
        let n = 100_000;
        let mut rng = Rng::new(11);
        for _ in 0..2 {
            let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn quadrature_unit_and_symmetry() {
        for p in [1, 7, 40] {
            let grid = QuadratureGrid::square(0.0, 1.0, p).unwrap();
            let total = quad_integrate(&grid, |_| 1.0).unwrap();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((grid.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let grid = QuadratureGrid::square(-3.0, 3.0, 64).unwrap();
        assert!(quad_integrate(&grid, |x| x[0]).unwrap().abs() < 1e-12);
        for i in 0..grid.len() {
            let node = grid.node(i);
            assert!(node.iter().all(|&c| c > -3.0 && c < 3.0));
        }
    }

    #[test]
    fn quadrature_gaussian_normalization() {
        let grid = QuadratureGrid::square(-8.0, 8.0, 400).unwrap();
        let total = quad_integrate(&grid, |x| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI))
            .unwrap();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn quadrature_reports_non_finite_node() {
        let grid = QuadratureGrid::square(-1.0, 1.0, 4).unwrap();
        let err = quad_integrate(&grid, |x| if x[0] > 0.0 && x[1] > 0.0 { f64::NAN } else { 1.0 }).unwrap_err();
        match err {
            NumericsError::NonFiniteIntegrand { node, .. } => assert!(node[0] > 0.0 && node[1] > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_grid_rejected() {
        assert!(QuadratureGrid::square(1.0, 1.0, 3).is_err());
        assert!(QuadratureGrid::square(0.0, 1.0, 0).is_err());
        assert!(QuadratureGrid::new(vec![(0.0, 1.0)], vec![2, 2]).is_err());
    }

    #[test]
    fn fd_gradient_examples() {
        let x = Vector::from_vec(vec![1.0, 2.0]);
        let g = fd_gradient(|v| v.norm_squared() / 2.0, &x, 1e-5);
        assert!((g - &x).abs().max() < 1e-8);

        let g = fd_gradient(|v| 3.0 * v[0] - 2.0 * v[1] + 1.0, &x, 0.7);
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);

        let log_gauss = |v: &Vector| -v.norm_squared() / 2.0 - (2.0 * std::f64::consts::PI).ln();
        let x = Vector::from_vec(vec![1.0, 0.0]);
        let g = fd_gradient(log_gauss, &x, default_fd_step(&x));
        assert!((g[0] + 1.0).abs() < 1e-6 && g[1].abs() < 1e-6);
    }

    #[test]
    fn slogdet_matches_determinant() {
        let m = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -3.0]);
        let (sign, logabs) = slogdet(&m);
        assert_eq!(sign, -1.0);
        assert!((logabs - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let w = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 0.5]));
        let mut u = Vector::from_element(3, 1.0);
        let s = power_iteration(&w, &mut u, 30);
        assert!((s - 3.0).abs() < 1e-10);
    }
}
