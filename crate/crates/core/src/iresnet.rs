//! Invertible residual networks `phi = phi_K o ... o phi_1`, `phi_i = Id - f_i`,
//! with `f_i` a two-hidden-layer tanh MLP kept contractive by spectral
//! rescaling, plus fixed-point inversion and a plain-text checkpoint format.
//!
//! All batched routines take samples as columns of an `n x B` matrix.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{gemm, power_iteration, singular_values, slogdet, Matrix, Rng, Vector};

pub const DEFAULT_POWER_ITERS: usize = 10;
pub const CHECKPOINT_VERSION: u32 = 1;
const WARMUP_POWER_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("linear block {index} has spectral norm {norm} above the bound {bound}")]
    NotContractive { index: usize, norm: f64, bound: f64 },
    #[error("parameter vector has length {got}, model needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("unsupported checkpoint version {0}")]
    Version(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub lipschitz: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            blocks: 3,
            lipschitz: 0.99,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(ModelError::Architecture(format!(
                "dim, hidden and blocks must be positive (got {}, {}, {})",
                self.dim, self.hidden, self.blocks
            )));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz < 1.0) {
            return Err(ModelError::Architecture(format!("L must lie in (0, 1), got {}", self.lipschitz)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(ModelError::Architecture(format!("bad init_std {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-10,
        }
    }
}

/// Result of inverting one point. `residual` is the last fixed-point step
/// length, maximised over blocks.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub x: Vector,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct BatchInversion {
    pub x: Matrix,
    pub converged: Vec<bool>,
    pub residual: Vec<f64>,
    pub iterations: usize,
}

impl BatchInversion {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    pub fn failures(&self) -> usize {
        self.converged.iter().filter(|&&c| !c).count()
    }
}

/// Weights of `f(x) = W3 tanh(W2 tanh(W1 x + b1) + b2) + b3`. Also used as the
/// gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub w3: Matrix,
    pub b3: Vector,
}

impl MlpParams {
    pub const NAMES: [&'static str; 6] = ["W1", "b1", "W2", "b2", "W3", "b3"];

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, dim),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: Vector::zeros(hidden),
            w3: Matrix::zeros(dim, hidden),
            b3: Vector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column-major views in `NAMES` order.
    pub fn arrays(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
        ]
    }

    fn shapes(&self) -> [(usize, usize); 6] {
        let (n, h) = (self.dim(), self.hidden());
        [(h, n), (h, 1), (h, h), (h, 1), (n, h), (n, 1)]
    }
}

/// MLP residual block with persistent power-iteration vectors.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub params: MlpParams,
    power: [Vector; 3],
    sigma: [f64; 3],
}

impl MlpBlock {
    fn new(params: MlpParams, rng: &mut Rng) -> Self {
        let (n, h) = (params.dim(), params.hidden());
        let mut unit = |len: usize| {
            let v = Vector::from_fn(len, |_, _| rng.normal());
            let norm = v.norm();
            v / norm
        };
        let power = [unit(h), unit(h), unit(n)];
        Self {
            params,
            power,
            sigma: [0.0; 3],
        }
    }

    fn weights(&self) -> [&Matrix; 3] {
        [&self.params.w1, &self.params.w2, &self.params.w3]
    }

    /// Runs `iterations` power steps on each weight and rescales so that the
    /// product of the estimated norms is at most `bound`.
    pub fn normalize(&mut self, bound: f64, iterations: usize) -> [f64; 3] {
        for k in 0..3 {
            let w = [&self.params.w1, &self.params.w2, &self.params.w3][k];
            self.sigma[k] = power_iteration(w, &mut self.power[k], iterations);
        }
        let product: f64 = self.sigma.iter().product();
        if product > bound {
            let s = (bound / product).cbrt();
            self.params.w1 *= s;
            self.params.w2 *= s;
            self.params.w3 *= s;
            for sigma in &mut self.sigma {
                *sigma *= s;
            }
            [s; 3]
        } else {
            [1.0; 3]
        }
    }

    /// Norm estimates from the last normalization call.
    pub fn norm_estimates(&self) -> [f64; 3] {
        self.sigma
    }

    /// Exact spectral norms by dense SVD.
    pub fn spectral_norms(&self) -> [f64; 3] {
        self.weights().map(|w| singular_values(w)[0])
    }

    pub fn power_vectors(&self) -> &[Vector; 3] {
        &self.power
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Mlp(MlpBlock),
    /// `f(x) = B x`, not trainable.
    Linear(Matrix),
}

impl Block {
    pub fn dim(&self) -> usize {
        match self {
            Block::Mlp(b) => b.params.dim(),
            Block::Linear(m) => m.nrows(),
        }
    }

    /// `f(x)` for every column.
    pub fn residual(&self, x: &Matrix) -> Matrix {
        match self {
            Block::Linear(m) => m * x,
            Block::Mlp(b) => {
                let p = &b.params;
                let mut a1 = Matrix::zeros(p.hidden(), x.ncols());
                gemm(1.0, &p.w1, false, x, false, 0.0, &mut a1);
                add_bias_tanh(&mut a1, &p.b1);
                let mut a2 = Matrix::zeros(p.hidden(), x.ncols());
                gemm(1.0, &p.w2, false, &a1, false, 0.0, &mut a2);
                add_bias_tanh(&mut a2, &p.b2);
                let mut out = Matrix::zeros(p.dim(), x.ncols());
                gemm(1.0, &p.w3, false, &a2, false, 0.0, &mut out);
                add_bias(&mut out, &p.b3);
                out
            }
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x - self.residual(x)
    }

    /// `(phi_i(x), D phi_i(x) v)` column-wise.
    pub fn jvp(&self, x: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
        match self {
            Block::Linear(m) => (x - m * x, v - m * v),
            Block::Mlp(b) => {
                let p = &b.params;
                let cols = x.ncols();
                let mut pre = Matrix::zeros(p.hidden(), cols);
                gemm(1.0, &p.w1, false, v, false, 0.0, &mut pre);
                let fw = mlp_forward(p, x, Some(vec![pre]));
                let f = fw.out.columns(0, cols).into_owned();
                let fdot = fw.out.columns(cols, cols).into_owned();
                (x - f, v - fdot)
            }
        }
    }

    /// The residual Jacobian `D f(x)` frozen at one point, for repeated products.
    pub fn linearize(&self, x: &Vector) -> Linearization<'_> {
        match self {
            Block::Linear(m) => Linearization::Linear(m),
            Block::Mlp(b) => {
                let p = &b.params;
                let a1 = &p.w1 * x + &p.b1;
                let d1 = a1.map(|a| {
                    let t = a.tanh();
                    1.0 - t * t
                });
                let h1 = a1.map(f64::tanh);
                let a2 = &p.w2 * h1 + &p.b2;
                let d2 = a2.map(|a| {
                    let t = a.tanh();
                    1.0 - t * t
                });
                Linearization::Mlp { params: p, d1, d2 }
            }
        }
    }

    /// Fixed-point inversion of `y = x - f(x)` column-wise.
    pub fn invert(&self, y: &Matrix, cfg: &InversionConfig) -> (Matrix, Vec<f64>, usize) {
        let cols = y.ncols();
        let mut x = y.clone();
        let mut steps = vec![f64::INFINITY; cols];
        let mut iters = 0;
        for k in 1..=cfg.max_iters.max(1) {
            let next = y + self.residual(&x);
            for (j, step) in steps.iter_mut().enumerate() {
                *step = (next.column(j) - x.column(j)).norm();
            }
            x = next;
            iters = k;
            if steps.iter().all(|&s| s <= cfg.tol) {
                break;
            }
        }
        (x, steps, iters)
    }
}

/// Frozen residual Jacobian of one block.
pub enum Linearization<'a> {
    Linear(&'a Matrix),
    Mlp { params: &'a MlpParams, d1: Vector, d2: Vector },
}

impl Linearization<'_> {
    /// `D f · V`.
    pub fn apply(&self, v: &Matrix) -> Matrix {
        match self {
            Linearization::Linear(m) => *m * v,
            Linearization::Mlp { params, d1, d2 } => {
                let mut t = &params.w1 * v;
                scale_rows(&mut t, d1);
                let mut t = &params.w2 * t;
                scale_rows(&mut t, d2);
                &params.w3 * t
            }
        }
    }

    pub fn matrix(&self) -> Matrix {
        let n = match self {
            Linearization::Linear(m) => m.nrows(),
            Linearization::Mlp { params, .. } => params.dim(),
        };
        self.apply(&Matrix::identity(n, n))
    }
}

/// Cached forward pass of one MLP block. Stacked matrices hold the primal
/// columns first, then one `B`-column slab per tangent direction.
struct MlpForward {
    cols: usize,
    tangents: usize,
    /// `[H1 | T1_1 | ...]`, `T1_j = D1 * (W1 e_j)`
    s1: Matrix,
    d1: Matrix,
    /// `W2 [H1 | T1_j ...]`, only tangent slabs are read back
    z2: Matrix,
    /// `[H2 | T2_1 | ...]`, `T2_j = D2 * S2_j`
    s2: Matrix,
    d2: Matrix,
    /// `[F | dF/dx_j ...]`
    out: Matrix,
}

fn mlp_forward(p: &MlpParams, x: &Matrix, tangent_pre: Option<Vec<Matrix>>) -> MlpForward {
    let (h, cols) = (p.hidden(), x.ncols());
    let tangent_pre = tangent_pre.unwrap_or_default();
    let tangents = tangent_pre.len();
    let width = cols * (1 + tangents);

    let mut s1 = Matrix::zeros(h, width);
    {
        let mut a1 = s1.columns_mut(0, cols);
        a1.copy_from(&(&p.w1 * x));
    }
    let mut d1 = Matrix::zeros(h, cols);
    {
        let buf = s1.as_mut_slice();
        let d = d1.as_mut_slice();
        for c in 0..cols {
            for r in 0..h {
                let i = c * h + r;
                let t = (buf[i] + p.b1[r]).tanh();
                buf[i] = t;
                d[i] = 1.0 - t * t;
            }
        }
        for (j, pre) in tangent_pre.iter().enumerate() {
            let slab = &mut buf[(j + 1) * h * cols..(j + 2) * h * cols];
            for ((o, &a), &g) in slab.iter_mut().zip(pre.as_slice()).zip(d.iter()) {
                *o = a * g;
            }
        }
    }

    let mut z2 = Matrix::zeros(h, width);
    gemm(1.0, &p.w2, false, &s1, false, 0.0, &mut z2);
    let mut s2 = Matrix::zeros(h, width);
    let mut d2 = Matrix::zeros(h, cols);
    {
        let z = z2.as_slice();
        let o = s2.as_mut_slice();
        let d = d2.as_mut_slice();
        for c in 0..cols {
            for r in 0..h {
                let i = c * h + r;
                let t = (z[i] + p.b2[r]).tanh();
                o[i] = t;
                d[i] = 1.0 - t * t;
            }
        }
        for j in 1..=tangents {
            let base = j * h * cols;
            for i in 0..h * cols {
                o[base + i] = d[i] * z[base + i];
            }
        }
    }

    let mut out = Matrix::zeros(p.dim(), width);
    gemm(1.0, &p.w3, false, &s2, false, 0.0, &mut out);
    {
        let n = p.dim();
        let buf = out.as_mut_slice();
        for c in 0..cols {
            for r in 0..n {
                buf[c * n + r] += p.b3[r];
            }
        }
    }
    MlpForward {
        cols,
        tangents,
        s1,
        d1,
        z2,
        s2,
        d2,
        out,
    }
}

/// Backward pass of one MLP block. `d_f` is the cotangent of `f(x)`; `g_jf`
/// (`n x nB`, column `j*B + b` = column `j` of the cotangent of `Df` at sample
/// `b`) is the cotangent of the residual Jacobian. Returns the cotangent of `x`
/// flowing through `f`.
fn mlp_backward(p: &MlpParams, x: &Matrix, fw: &MlpForward, d_f: &Matrix, g_jf: Option<&Matrix>, grad: &mut MlpParams) -> Matrix {
    let (n, h, cols) = (p.dim(), p.hidden(), fw.cols);
    let tangents = if g_jf.is_some() {
        assert_eq!(fw.tangents, n, "Jacobian cotangent needs a tape with tangents");
        n
    } else {
        0
    };
    let width = cols * (1 + tangents);

    let mut g3 = Matrix::zeros(n, width);
    g3.columns_mut(0, cols).copy_from(d_f);
    if let Some(g) = g_jf {
        g3.columns_mut(cols, n * cols).copy_from(g);
    }
    let s2 = if tangents == fw.tangents {
        fw.s2.clone()
    } else {
        fw.s2.columns(0, width).into_owned()
    };
    gemm(1.0, &g3, false, &s2, true, 1.0, &mut grad.w3);
    add_rowsum(&mut grad.b3, d_f);

    let mut ds2 = Matrix::zeros(h, width);
    gemm(1.0, &p.w3, true, &g3, false, 0.0, &mut ds2);

    // ds2 becomes [dA2 | dS2_j]
    {
        let buf = ds2.as_mut_slice();
        let d2 = fw.d2.as_slice();
        let h2 = &fw.s2.as_slice()[..h * cols];
        let z2 = fw.z2.as_slice();
        let mut dd2 = vec![0.0; h * cols];
        for j in 1..=tangents {
            let base = j * h * cols;
            for i in 0..h * cols {
                dd2[i] += buf[base + i] * z2[base + i];
                buf[base + i] *= d2[i];
            }
        }
        for i in 0..h * cols {
            buf[i] = buf[i] * d2[i] - 2.0 * dd2[i] * h2[i] * d2[i];
        }
    }
    let s1 = if tangents == fw.tangents {
        fw.s1.clone()
    } else {
        fw.s1.columns(0, width).into_owned()
    };
    gemm(1.0, &ds2, false, &s1, true, 1.0, &mut grad.w2);
    add_rowsum(&mut grad.b2, &ds2.columns(0, cols).into_owned());

    let mut ds1 = Matrix::zeros(h, width);
    gemm(1.0, &p.w2, true, &ds2, false, 0.0, &mut ds1);

    let mut da1 = Matrix::zeros(h, cols);
    {
        let buf = ds1.as_slice();
        let d1 = fw.d1.as_slice();
        let h1 = &fw.s1.as_slice()[..h * cols];
        let mut dd1 = vec![0.0; h * cols];
        for j in 0..tangents {
            let base = (j + 1) * h * cols;
            let w1j = p.w1.column(j);
            let gw1 = grad.w1.as_mut_slice();
            for c in 0..cols {
                for r in 0..h {
                    let i = c * h + r;
                    let g = buf[base + i];
                    gw1[j * h + r] += g * d1[i];
                    dd1[i] += g * w1j[r];
                }
            }
        }
        let o = da1.as_mut_slice();
        for i in 0..h * cols {
            o[i] = buf[i] * d1[i] - 2.0 * dd1[i] * h1[i] * d1[i];
        }
    }
    gemm(1.0, &da1, false, x, true, 1.0, &mut grad.w1);
    add_rowsum(&mut grad.b1, &da1);

    let mut dx = Matrix::zeros(n, cols);
    gemm(1.0, &p.w1, true, &da1, false, 0.0, &mut dx);
    dx
}

fn add_bias(m: &mut Matrix, b: &Vector) {
    let rows = m.nrows();
    for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
        *v += b[i % rows];
    }
}

fn add_bias_tanh(m: &mut Matrix, b: &Vector) {
    let rows = m.nrows();
    for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
        *v = (*v + b[i % rows]).tanh();
    }
}

fn add_rowsum(acc: &mut Vector, m: &Matrix) {
    let rows = m.nrows();
    for (i, v) in m.as_slice().iter().enumerate() {
        acc[i % rows] += v;
    }
}

fn scale_rows(m: &mut Matrix, s: &Vector) {
    let rows = m.nrows();
    for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
        *v *= s[i % rows];
    }
}

enum TapeKind {
    Mlp(MlpForward),
    Linear,
}

/// Forward record of one block over a batch.
pub struct BlockTape {
    input: Matrix,
    output: Matrix,
    kind: TapeKind,
    tangents: bool,
}

/// Forward record of a whole model over a batch; block Jacobians are
/// available when built with tangents.
pub struct ModelTape {
    blocks: Vec<BlockTape>,
    dim: usize,
    cols: usize,
}

impl ModelTape {
    pub fn output(&self) -> &Matrix {
        &self.blocks.last().expect("model has blocks").output
    }

    pub fn input(&self) -> &Matrix {
        &self.blocks[0].input
    }

    pub fn len(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.cols == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_input(&self, block: usize) -> &Matrix {
        &self.blocks[block].input
    }

    /// `D f_i` at sample `b`.
    pub fn residual_jacobian(&self, model: &Model, block: usize, b: usize) -> Matrix {
        let tape = &self.blocks[block];
        assert!(tape.tangents, "tape was recorded without tangents");
        match (&tape.kind, &model.blocks[block]) {
            (TapeKind::Linear, Block::Linear(m)) => m.clone(),
            (TapeKind::Mlp(fw), _) => {
                let n = self.dim;
                Matrix::from_fn(n, n, |i, j| fw.out[(i, (j + 1) * self.cols + b)])
            }
            _ => unreachable!("tape does not match model"),
        }
    }

    /// `D phi_i = I - D f_i` at sample `b`.
    pub fn block_jacobian(&self, model: &Model, block: usize, b: usize) -> Matrix {
        Matrix::identity(self.dim, self.dim) - self.residual_jacobian(model, block, b)
    }

    pub fn jacobian(&self, model: &Model, b: usize) -> Matrix {
        let mut j = Matrix::identity(self.dim, self.dim);
        for i in 0..self.blocks.len() {
            j = self.block_jacobian(model, i, b) * j;
        }
        j
    }

    pub fn divergence(&self, model: &Model, b: usize) -> f64 {
        self.jacobian(model, b).trace()
    }

    pub fn logdet(&self, model: &Model, b: usize) -> f64 {
        (0..self.blocks.len()).map(|i| slogdet(&self.block_jacobian(model, i, b)).1).sum()
    }
}

/// Per-block gradient; linear blocks carry none.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub blocks: Vec<Option<MlpParams>>,
}

impl Gradient {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Mlp(m) => Some(MlpParams::zeros(m.params.dim(), m.params.hidden())),
                    Block::Linear(_) => None,
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.blocks.iter().flatten() {
            for a in p.arrays() {
                out.extend_from_slice(a);
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.blocks.iter_mut().flatten() {
            for a in p.arrays_mut() {
                a.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Name of the first parameter array holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, p) in self.blocks.iter().enumerate() {
            if let Some(p) = p {
                for (name, a) in MlpParams::NAMES.iter().zip(p.arrays()) {
                    if a.iter().any(|v| !v.is_finite()) {
                        return Some(format!("block{i}.{name}"));
                    }
                }
            }
        }
        None
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    blocks: Vec<Block>,
    dim: usize,
    hidden: usize,
    lipschitz: f64,
}

impl Model {
    /// Weights `N(0, init_std^2 / fan_in)`, zero biases, one normalization.
    pub fn new_random(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (n, h) = (cfg.dim, cfg.hidden);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut p = MlpParams::zeros(n, h);
            for (w, fan_in) in [(&mut p.w1, n), (&mut p.w2, h), (&mut p.w3, h)] {
                let std = cfg.init_std / (fan_in as f64).sqrt();
                w.iter_mut().for_each(|v| *v = std * rng.normal());
            }
            let mut block = MlpBlock::new(p, rng);
            for k in 0..3 {
                let w = block.weights()[k].clone();
                power_iteration(&w, &mut block.power[k], WARMUP_POWER_ITERS);
            }
            blocks.push(Block::Mlp(block));
        }
        let mut model = Self {
            blocks,
            dim: n,
            hidden: h,
            lipschitz: cfg.lipschitz,
        };
        model.normalize_lipschitz();
        Ok(model)
    }

    /// All weights and biases zero, so `phi = Id`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let mut c = cfg.clone();
        c.init_std = 0.0;
        Self::new_random(&c, &mut Rng::new(0))
    }

    /// Blocks `f_i(x) = B_i x`; each `B_i` must have spectral norm at most `lipschitz`.
    pub fn linear(blocks: Vec<Matrix>, lipschitz: f64) -> Result<Self, ModelError> {
        let dim = blocks.first().map(|m| m.nrows()).ok_or_else(|| ModelError::Architecture("no blocks".into()))?;
        for (index, m) in blocks.iter().enumerate() {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(ModelError::Architecture(format!("linear block {index} is not {dim}x{dim}")));
            }
            let norm = singular_values(m)[0];
            if norm > lipschitz {
                return Err(ModelError::NotContractive {
                    index,
                    norm,
                    bound: lipschitz,
                });
            }
        }
        Ok(Self {
            blocks: blocks.into_iter().map(Block::Linear).collect(),
            dim,
            hidden: 0,
            lipschitz,
        })
    }

    /// `phi = M` for symmetric positive definite `M`, split into `k` blocks
    /// `I - M^{1/k}`.
    pub fn linear_from_matrix(m: &Matrix, k: usize, lipschitz: f64) -> Result<Self, ModelError> {
        if k == 0 || !m.is_square() {
            return Err(ModelError::Architecture("need a square matrix and k >= 1".into()));
        }
        let eig = m.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(ModelError::Architecture("matrix is not positive definite".into()));
        }
        let root = &eig.eigenvectors
            * Matrix::from_diagonal(&eig.eigenvalues.map(|l| l.powf(1.0 / k as f64)))
            * eig.eigenvectors.transpose();
        let b = Matrix::identity(m.nrows(), m.nrows()) - root;
        Self::linear(vec![b; k], lipschitz)
    }

    /// Appends MLP and linear blocks in sequence; used to build mixed models.
    pub fn from_blocks(blocks: Vec<Block>, lipschitz: f64) -> Result<Self, ModelError> {
        let dim = blocks.first().map(Block::dim).ok_or_else(|| ModelError::Architecture("no blocks".into()))?;
        let hidden = blocks
            .iter()
            .find_map(|b| match b {
                Block::Mlp(m) => Some(m.params.hidden()),
                Block::Linear(_) => None,
            })
            .unwrap_or(0);
        if blocks.iter().any(|b| b.dim() != dim) {
            return Err(ModelError::Architecture("blocks disagree on dimension".into()));
        }
        Ok(Self {
            blocks,
            dim,
            hidden,
            lipschitz,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn forward(&self, x: &Vector) -> Vector {
        let m = self.forward_batch(&Matrix::from_column_slice(x.len(), 1, x.as_slice()));
        m.column(0).into_owned()
    }

    pub fn forward_batch(&self, x: &Matrix) -> Matrix {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur);
        }
        cur
    }

    /// Records every block; with `tangents` each block's Jacobian is carried.
    pub fn tape(&self, x: &Matrix, tangents: bool) -> ModelTape {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (output, kind) = match b {
                Block::Linear(m) => (&cur - m * &cur, TapeKind::Linear),
                Block::Mlp(mb) => {
                    let p = &mb.params;
                    let pre = tangents.then(|| {
                        (0..self.dim)
                            .map(|j| {
                                let col = p.w1.column(j);
                                Matrix::from_fn(p.hidden(), cur.ncols(), |r, _| col[r])
                            })
                            .collect()
                    });
                    let fw = mlp_forward(p, &cur, pre);
                    let out = &cur - fw.out.columns(0, cur.ncols());
                    (out, TapeKind::Mlp(fw))
                }
            };
            let next = output.clone();
            blocks.push(BlockTape {
                input: std::mem::replace(&mut cur, next),
                output,
                kind,
                tangents,
            });
        }
        ModelTape {
            blocks,
            dim: self.dim,
            cols: x.ncols(),
        }
    }

    /// Reverse pass. `d_out` is the cotangent of `phi(x)`; `g_jb[i]` if given
    /// is the cotangent of `D phi_i` in the same slab layout as the tape
    /// (`n x nB`). Returns the parameter gradient and the cotangent of `x`.
    pub fn backward(&self, tape: &ModelTape, d_out: &Matrix, g_jb: &[Option<Matrix>]) -> (Gradient, Matrix) {
        let mut grad = Gradient::zeros_like(self);
        let mut d = d_out.clone();
        for i in (0..self.blocks.len()).rev() {
            let t = &tape.blocks[i];
            // phi_i = x - f_i  =>  cotangents of f_i and D f_i flip sign
            let d_f = -&d;
            let g_jf = g_jb.get(i).and_then(|g| g.as_ref()).map(|g| -g);
            let dx_f = match (&self.blocks[i], &t.kind) {
                (Block::Linear(m), TapeKind::Linear) => m.tr_mul(&d_f),
                (Block::Mlp(mb), TapeKind::Mlp(fw)) => {
                    let g = grad.blocks[i].as_mut().expect("mlp gradient slot");
                    mlp_backward(&mb.params, &t.input, fw, &d_f, g_jf.as_ref(), g)
                }
                _ => unreachable!("tape does not match model"),
            };
            d += dx_f;
        }
        (grad, d)
    }

    /// Cotangent pass through `f_i` alone at `x` (no tangents); accumulates
    /// into `grad` and returns `(D f_i)^T d_f`.
    pub fn residual_backward(&self, block: usize, x: &Matrix, d_f: &Matrix, grad: &mut Gradient) -> Matrix {
        match &self.blocks[block] {
            Block::Linear(m) => m.tr_mul(d_f),
            Block::Mlp(mb) => {
                let fw = mlp_forward(&mb.params, x, None);
                let g = grad.blocks[block].as_mut().expect("mlp gradient slot");
                mlp_backward(&mb.params, x, &fw, d_f, None, g)
            }
        }
    }

    pub fn jacobian(&self, x: &Vector) -> Matrix {
        let tape = self.tape(&Matrix::from_column_slice(x.len(), 1, x.as_slice()), true);
        tape.jacobian(self, 0)
    }

    pub fn divergence(&self, x: &Vector) -> f64 {
        self.jacobian(x).trace()
    }

    /// Sum of per-block `log|det D phi_i|`.
    pub fn logdet(&self, x: &Vector) -> f64 {
        let tape = self.tape(&Matrix::from_column_slice(x.len(), 1, x.as_slice()), true);
        tape.logdet(self, 0)
    }

    /// `(phi(x), D phi(x) v)` by one linearized pass.
    pub fn jvp(&self, x: &Vector, v: &Vector) -> (Vector, Vector) {
        let (y, t) = self.jvp_batch(
            &Matrix::from_column_slice(x.len(), 1, x.as_slice()),
            &Matrix::from_column_slice(v.len(), 1, v.as_slice()),
        );
        (y.column(0).into_owned(), t.column(0).into_owned())
    }

    pub fn jvp_batch(&self, x: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
        let mut cur = x.clone();
        let mut tan = v.clone();
        for b in &self.blocks {
            let (y, t) = b.jvp(&cur, &tan);
            cur = y;
            tan = t;
        }
        (cur, tan)
    }

    /// Inputs to every block at `x` (entry `i` is the input of block `i`).
    pub fn block_inputs(&self, x: &Vector) -> Vec<Vector> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut cur = Matrix::from_column_slice(x.len(), 1, x.as_slice());
        for b in &self.blocks {
            out.push(cur.column(0).into_owned());
            cur = b.forward(&cur);
        }
        out
    }

    pub fn invert(&self, y: &Vector, cfg: &InversionConfig) -> Inversion {
        let r = self.invert_batch(&Matrix::from_column_slice(y.len(), 1, y.as_slice()), cfg);
        Inversion {
            x: r.x.column(0).into_owned(),
            converged: r.converged[0],
            residual: r.residual[0],
            iterations: r.iterations,
        }
    }

    /// Blocks in reverse, each by fixed-point iteration from `x^0 = y`.
    pub fn invert_batch(&self, y: &Matrix, cfg: &InversionConfig) -> BatchInversion {
        let cols = y.ncols();
        let mut cur = y.clone();
        let mut residual = vec![0.0f64; cols];
        let mut iterations = 0;
        for b in self.blocks.iter().rev() {
            let (x, steps, iters) = b.invert(&cur, cfg);
            for (r, s) in residual.iter_mut().zip(steps) {
                *r = r.max(s);
            }
            iterations = iterations.max(iters);
            cur = x;
        }
        BatchInversion {
            x: cur,
            converged: residual.iter().map(|&r| r <= cfg.tol).collect(),
            residual,
            iterations,
        }
    }

    /// One normalization pass with the default iteration count.
    pub fn normalize_lipschitz(&mut self) -> Vec<[f64; 3]> {
        self.normalize_lipschitz_with(DEFAULT_POWER_ITERS)
    }

    pub fn normalize_lipschitz_with(&mut self, iterations: usize) -> Vec<[f64; 3]> {
        let bound = self.lipschitz;
        self.blocks
            .iter_mut()
            .map(|b| match b {
                Block::Mlp(m) => m.normalize(bound, iterations),
                Block::Linear(_) => [1.0; 3],
            })
            .collect()
    }

    /// Product of the stored norm estimates per block (linear blocks: exact norm).
    pub fn lipschitz_estimates(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Mlp(m) => m.norm_estimates().iter().product(),
                Block::Linear(m) => singular_values(m)[0],
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Mlp(m) => m.params.len(),
                Block::Linear(_) => 0,
            })
            .sum()
    }

    /// Trainable parameters flattened block by block in `MlpParams::NAMES` order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            if let Block::Mlp(m) = b {
                for a in m.params.arrays() {
                    out.extend_from_slice(a);
                }
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(ModelError::ParamLength { expected, got: flat.len() });
        }
        let mut offset = 0;
        for b in &mut self.blocks {
            if let Block::Mlp(m) = b {
                for a in m.params.arrays_mut() {
                    a.copy_from_slice(&flat[offset..offset + a.len()]);
                    offset += a.len();
                }
            }
        }
        Ok(())
    }

    /// `(name, range)` of every parameter array in the flat layout.
    pub fn param_layout(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if let Block::Mlp(m) = b {
                for (name, a) in MlpParams::NAMES.iter().zip(m.params.arrays()) {
                    out.push((format!("block{i}.{name}"), offset..offset + a.len()));
                    offset += a.len();
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_checkpoint_string()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let kinds: Vec<&str> = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Mlp(_) => "mlp",
                Block::Linear(_) => "linear",
            })
            .collect();
        let _ = writeln!(s, "version={CHECKPOINT_VERSION}");
        let _ = writeln!(s, "n={}", self.dim);
        let _ = writeln!(s, "blocks={}", self.blocks.len());
        let _ = writeln!(s, "L={}", self.lipschitz);
        let _ = writeln!(s, "activation=tanh");
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "rng={}", Rng::ALGORITHM);
        let _ = writeln!(s, "kinds={}", kinds.join(","));
        let mut push = |name: String, m: &Matrix| {
            let _ = writeln!(s, "array={name} rows={} cols={}", m.nrows(), m.ncols());
            for r in 0..m.nrows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Linear(m) => push(format!("block{i}.B"), m),
                Block::Mlp(mb) => {
                    for ((name, a), (rows, cols)) in MlpParams::NAMES.iter().zip(mb.params.arrays()).zip(mb.params.shapes()) {
                        push(format!("block{i}.{name}"), &Matrix::from_column_slice(rows, cols, a));
                    }
                    for (k, u) in mb.power.iter().enumerate() {
                        push(format!("block{i}.u{}", k + 1), &Matrix::from_column_slice(u.len(), 1, u.as_slice()));
                    }
                    let sigma = Matrix::from_row_slice(1, 3, &mb.sigma);
                    push(format!("block{i}.sigma"), &sigma);
                }
            }
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint_str(&text).map_err(|e| match e {
            ModelError::Checkpoint { reason, .. } => ModelError::Checkpoint {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, ModelError> {
        let bad = |reason: String| ModelError::Checkpoint {
            path: "<string>".into(),
            reason,
        };
        let mut lines = text.lines().peekable();
        let mut header = std::collections::BTreeMap::new();
        while let Some(line) = lines.peek() {
            if line.starts_with("array=") {
                break;
            }
            let line = lines.next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line {line}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| header.get(k).cloned().ok_or_else(|| bad(format!("missing header {k}")));
        let version = get("version")?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(ModelError::Version(version));
        }
        if get("activation")? != "tanh" {
            return Err(bad("only tanh activation is supported".into()));
        }
        let parse_usize = |k: &str| -> Result<usize, ModelError> { get(k)?.parse().map_err(|e| bad(format!("{k}: {e}"))) };
        let dim = parse_usize("n")?;
        let nblocks = parse_usize("blocks")?;
        let hidden = parse_usize("hidden")?;
        let lipschitz: f64 = get("L")?.parse().map_err(|e| bad(format!("L: {e}")))?;
        let kinds: Vec<String> = match header.get("kinds") {
            Some(k) => k.split(',').map(str::to_string).collect(),
            None => vec!["mlp".to_string(); nblocks],
        };
        if kinds.len() != nblocks {
            return Err(bad(format!("kinds lists {} blocks, header says {nblocks}", kinds.len())));
        }

        let mut arrays = std::collections::BTreeMap::new();
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let spec = line.strip_prefix("array=").ok_or_else(|| bad(format!("expected array line, got {line}")))?;
            let mut parts = spec.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("array without name".into()))?.to_string();
            let mut rows = None;
            let mut cols = None;
            for p in parts {
                match p.split_once('=') {
                    Some(("rows", v)) => rows = v.parse::<usize>().ok(),
                    Some(("cols", v)) => cols = v.parse::<usize>().ok(),
                    _ => return Err(bad(format!("bad array spec {spec}"))),
                }
            }
            let (rows, cols) = rows.zip(cols).ok_or_else(|| bad(format!("array {name} lacks shape")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = lines.next().ok_or_else(|| bad(format!("array {name} truncated at row {r}")))?;
                for v in row.split_whitespace() {
                    data.push(v.parse::<f64>().map_err(|e| bad(format!("array {name}: {e}")))?);
                }
            }
            if data.len() != rows * cols {
                return Err(bad(format!("array {name} has {} values, expected {}", data.len(), rows * cols)));
            }
            arrays.insert(name, Matrix::from_row_slice(rows, cols, &data));
        }
        let mut take = |name: String, rows: usize, cols: usize| -> Result<Matrix, ModelError> {
            let m = arrays.remove(&name).ok_or_else(|| bad(format!("missing array {name}")))?;
            if m.shape() != (rows, cols) {
                return Err(bad(format!("array {name} has shape {:?}, expected {:?}", m.shape(), (rows, cols))));
            }
            Ok(m)
        };

        let mut blocks = Vec::with_capacity(nblocks);
        for (i, kind) in kinds.iter().enumerate() {
            match kind.as_str() {
                "linear" => blocks.push(Block::Linear(take(format!("block{i}.B"), dim, dim)?)),
                "mlp" => {
                    let mut params = MlpParams::zeros(dim, hidden);
                    let shapes = params.shapes();
                    for ((name, a), (rows, cols)) in MlpParams::NAMES.iter().zip(params.arrays_mut()).zip(shapes) {
                        let m = take(format!("block{i}.{name}"), rows, cols)?;
                        a.copy_from_slice(m.as_slice());
                    }
                    let u1 = take(format!("block{i}.u1"), hidden, 1)?;
                    let u2 = take(format!("block{i}.u2"), hidden, 1)?;
                    let u3 = take(format!("block{i}.u3"), dim, 1)?;
                    let sigma = take(format!("block{i}.sigma"), 1, 3)?;
                    blocks.push(Block::Mlp(MlpBlock {
                        params,
                        power: [u1.column(0).into_owned(), u2.column(0).into_owned(), u3.column(0).into_owned()],
                        sigma: [sigma[(0, 0)], sigma[(0, 1)], sigma[(0, 2)]],
                    }));
                }
                other => return Err(bad(format!("unknown block kind {other}"))),
            }
        }
        if let Some(name) = arrays.keys().next() {
            return Err(bad(format!("unexpected array {name}")));
        }
        Ok(Self {
            blocks,
            dim,
            hidden,
            lipschitz,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{default_fd_step, fd_gradient};

    fn small_cfg(hidden: usize) -> ModelConfig {
        ModelConfig {
            hidden,
            ..ModelConfig::default()
        }
    }

    /// Random model whose weights are large enough for the rescaling to bind.
    fn saturated(seed: u64, hidden: usize) -> Model {
        let cfg = ModelConfig {
            init_std: 3.0,
            ..small_cfg(hidden)
        };
        Model::new_random(&cfg, &mut Rng::new(seed)).unwrap()
    }

    fn v(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn zero_model_is_identity() {
        let m = Model::zeros(&small_cfg(16)).unwrap();
        let x = v(0.4, -1.3);
        assert_eq!(m.forward(&x), x);
        assert_eq!(m.jacobian(&x), Matrix::identity(2, 2));
        assert_eq!(m.divergence(&x), 2.0);
        assert_eq!(m.logdet(&x), 0.0);
        let inv = m.invert(&x, &InversionConfig::default());
        assert_eq!(inv.x, x);
        assert_eq!(inv.iterations, 1);
        assert!(inv.converged);
    }

    #[test]
    fn linear_block_examples() {
        let half = Matrix::identity(2, 2) * 0.5;
        let m = Model::linear(vec![half.clone()], 0.99).unwrap();
        let x = v(1.0, -2.0);
        assert_eq!(m.forward(&x), &x * 0.5);
        assert_eq!(m.jacobian(&x), Matrix::identity(2, 2) - &half);
        assert!((m.divergence(&x) - 1.0).abs() < 1e-15);
        assert!((m.logdet(&x) - 2.0 * 0.5f64.ln()).abs() < 1e-14);
        let inv = m.invert(&x, &InversionConfig::default());
        assert!((inv.x - &x * 2.0).norm() < 1e-9);
        assert!(inv.converged);

        let b = Matrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
        let m = Model::linear(vec![b.clone()], 0.99).unwrap();
        assert!((m.divergence(&x) - (2.0 - b.trace())).abs() < 1e-15);
        assert!(Model::linear(vec![Matrix::identity(2, 2) * 1.5], 0.99).is_err());
    }

    #[test]
    fn inversion_of_half_contraction_is_geometric() {
        let m = Model::linear(vec![Matrix::identity(2, 2) * 0.5], 0.99).unwrap();
        let y = v(1.0, 0.0);
        let mut prev = f64::INFINITY;
        for iters in 1..20 {
            let r = m.invert(&y, &InversionConfig { max_iters: iters, tol: 0.0 });
            let err = (r.x - &y * 2.0).norm();
            if iters > 1 {
                assert!((err / prev - 0.5).abs() < 1e-9, "{err} {prev}");
            }
            prev = err;
        }
    }

    #[test]
    fn linear_from_matrix_reproduces_normal_operator() {
        for eps in [0.125, 0.5] {
            let a = crate::problem::a_eps_matrix(eps);
            let ata = a.transpose() * &a;
            let m = Model::linear_from_matrix(&ata, 3, 0.99).unwrap();
            let x = v(0.7, -0.3);
            assert!((m.forward(&x) - &ata * &x).norm() < 1e-12);
            assert!((m.jacobian(&x) - &ata).norm() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = saturated(4, 16);
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let x = v(2.0 * rng.normal(), 2.0 * rng.normal());
            let j = m.jacobian(&x);
            let h = default_fd_step(&x);
            for r in 0..2 {
                let g = fd_gradient(|p| m.forward(p)[r], &x, h);
                for c in 0..2 {
                    let scale = j.row(r).amax().max(1e-3);
                    assert!((g[c] - j[(r, c)]).abs() <= 1e-5 * scale, "{} vs {}", g[c], j[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn logdet_and_divergence_match_dense() {
        let m = saturated(5, 32);
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let x = v(2.0 * rng.normal(), 2.0 * rng.normal());
            let j = m.jacobian(&x);
            let (sign, logabs) = slogdet(&j);
            assert_eq!(sign, 1.0);
            assert!((m.logdet(&x) - logabs).abs() <= 1e-10);
            assert_eq!(m.divergence(&x), j.trace());
        }
    }

    #[test]
    fn jvp_matches_jacobian() {
        let m = saturated(6, 16);
        let x = v(0.3, 1.7);
        let d = v(-0.4, 0.9);
        let (y, t) = m.jvp(&x, &d);
        assert!((y - m.forward(&x)).norm() < 1e-14);
        assert!((t - m.jacobian(&x) * d).norm() < 1e-13);
    }

    #[test]
    fn bi_lipschitz_and_round_trip() {
        let m = saturated(7, 64);
        let l = m.lipschitz();
        let mut rng = Rng::new(2);
        let cfg = InversionConfig::default();
        for _ in 0..200 {
            let x = v(2.0 * rng.normal(), 2.0 * rng.normal());
            let x2 = v(2.0 * rng.normal(), 2.0 * rng.normal());
            let lower = (1.0 - l).powi(3) * (&x - &x2).norm();
            assert!((m.forward(&x) - m.forward(&x2)).norm() >= lower);
            let back = m.invert(&m.forward(&x), &cfg);
            assert!((back.x - &x).norm() <= 1e-6);
            let y = x2;
            let fwd = m.forward(&m.invert(&y, &cfg).x);
            assert!((fwd - y).norm() <= 1e-6);
        }
    }

    #[test]
    fn normalization_caps_norm_product() {
        let mut m = saturated(8, 64);
        for _ in 0..5 {
            m.normalize_lipschitz();
        }
        for b in m.blocks() {
            let Block::Mlp(b) = b else { unreachable!() };
            let est: f64 = b.norm_estimates().iter().product();
            assert!(est <= 0.99 * 1.001);
            let exact = b.spectral_norms();
            for (e, s) in b.norm_estimates().iter().zip(exact) {
                assert!((e - s).abs() <= 1e-3 * s, "{e} vs {s}");
            }
        }
        // already compliant: no rescaling
        let mut small = Model::new_random(&small_cfg(64), &mut Rng::new(3)).unwrap();
        for f in small.normalize_lipschitz() {
            assert_eq!(f, [1.0; 3]);
        }
    }

    #[test]
    fn normalization_halves_doubled_layer() {
        let mut p = MlpParams::zeros(2, 2);
        p.w1 = Matrix::identity(2, 2) * 2.0;
        p.w2 = Matrix::identity(2, 2);
        p.w3 = Matrix::identity(2, 2);
        let block = MlpBlock::new(p, &mut Rng::new(1));
        let mut m = Model::from_blocks(vec![Block::Mlp(block)], 0.99).unwrap();
        let f = m.normalize_lipschitz();
        let s = (0.99f64 / 2.0).cbrt();
        assert!((f[0][0] - s).abs() < 1e-12);
        let Block::Mlp(b) = &m.blocks()[0] else { unreachable!() };
        let prod: f64 = b.spectral_norms().iter().product();
        assert!(prod <= 0.99 * 1.001 && prod > 0.98);
    }

    #[test]
    fn empirical_lipschitz_of_residuals() {
        let m = saturated(10, 32);
        let mut rng = Rng::new(4);
        for b in m.blocks() {
            let mut worst = 0.0f64;
            for _ in 0..10_000 {
                let x = Matrix::from_fn(2, 2, |_, _| 3.0 * rng.normal());
                let fx = b.residual(&x);
                let num = (fx.column(0) - fx.column(1)).norm();
                let den = (x.column(0) - x.column(1)).norm();
                worst = worst.max(num / den);
            }
            assert!(worst <= 0.99 + 1e-3, "{worst}");
        }
    }

    #[test]
    fn batched_tape_matches_pointwise() {
        let m = saturated(11, 16);
        let x = Matrix::from_fn(2, 5, |i, j| (i as f64 - 0.5) * (j as f64 + 1.0) * 0.4);
        let tape = m.tape(&x, true);
        for b in 0..5 {
            let xb = x.column(b).into_owned();
            assert!((tape.output().column(b) - m.forward(&xb)).norm() < 1e-14);
            assert!((tape.jacobian(&m, b) - m.jacobian(&xb)).norm() < 1e-13);
        }
        let plain = m.forward_batch(&x);
        assert!((plain - tape.output()).norm() < 1e-14);
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let m = saturated(12, 8);
        let text = m.to_checkpoint_string();
        assert!(text.starts_with("version=1\nn=2\nblocks=3\nL=0.99\nactivation=tanh\nhidden=8\nrng=chacha20\n"));
        let back = Model::from_checkpoint_str(&text).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.to_checkpoint_string(), text);

        let lin = Model::linear_from_matrix(&Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), 3, 0.99).unwrap();
        let back = Model::from_checkpoint_str(&lin.to_checkpoint_string()).unwrap();
        let x = v(0.2, 0.1);
        assert_eq!(back.forward(&x), lin.forward(&x));

        let bad = text.replacen("version=1", "version=2", 1);
        assert!(matches!(Model::from_checkpoint_str(&bad), Err(ModelError::Version(_))));
        let truncated = &text[..text.len() / 2];
        assert!(Model::from_checkpoint_str(truncated).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut m = saturated(13, 8);
        let mut p = m.params();
        assert_eq!(p.len(), m.num_params());
        assert_eq!(m.param_layout().last().unwrap().1.end, p.len());
        p[5] += 1.0;
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert!(m.set_params(&p[1..]).is_err());
    }
}
