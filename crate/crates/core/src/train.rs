//! Mini-batch Adam training with Lipschitz renormalization after every step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{approximation_mse, reconstruction_mse, EVAL_INVERSION};
use crate::iresnet::{Model, ModelConfig, ModelError};
use crate::losses::{equiv_targets, loss_and_gradient, Batch, LossConfig, LossError, Objective, RecoGradient};
use crate::numerics::{streams, Matrix, Rng};
use crate::prior::{GaussianPrior, Prior};
use crate::problem::{generate_dataset, Dataset, LinearProblem, ProblemError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss diverged at epoch {epoch}, step {step}: {source}; last checkpoint: {checkpoint}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: LossError,
        checkpoint: String,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    /// `identity` or `eps` (the `A_eps` family).
    pub operator: String,
    pub eps: f64,
    pub delta: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            operator: "identity".into(),
            eps: 0.5,
            delta: 0.25,
        }
    }
}

impl ProblemSpec {
    pub fn build(&self) -> Result<LinearProblem, TrainError> {
        Ok(match self.operator.as_str() {
            "identity" => LinearProblem::denoising(self.delta)?,
            "eps" => LinearProblem::a_eps(self.eps, self.delta)?,
            other => return Err(TrainError::Config(format!("unknown operator {other:?} (expected identity or eps)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    /// `bimodal` or `gaussian` (isotropic, zero mean).
    pub name: String,
    pub sigma: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            name: "bimodal".into(),
            sigma: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn build(&self) -> Result<Prior, TrainError> {
        match self.name.as_str() {
            "bimodal" => Ok(Prior::default_bimodal()),
            "gaussian" => GaussianPrior::isotropic(2, self.sigma)
                .map(Prior::Gaussian)
                .map_err(|e| TrainError::Config(e.to_string())),
            other => Err(TrainError::Config(format!("unknown prior {other:?} (expected bimodal or gaussian)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub blocks: usize,
    pub hidden: usize,
    pub lipschitz: f64,
    pub init_std: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            blocks: m.blocks,
            hidden: m.hidden,
            lipschitz: m.lipschitz,
            init_std: m.init_std,
        }
    }
}

impl ArchSpec {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: 2,
            hidden: self.hidden,
            blocks: self.blocks,
            lipschitz: self.lipschitz,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub objective: Objective,
    /// Defaults to the data noise level.
    pub reg_weight: Option<f64>,
    pub hutchinson_probes: usize,
    pub powerseries_terms: usize,
    pub reco_unroll_iters: usize,
    pub reco_gradient: RecoGradient,
}

impl Default for LossSpec {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            objective: l.objective,
            reg_weight: None,
            hutchinson_probes: l.hutchinson_probes,
            powerseries_terms: l.powerseries_terms,
            reco_unroll_iters: l.reco_unroll_iters,
            reco_gradient: l.reco_gradient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub checkpoint_every: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_size: 400_000,
            test_size: 10_000,
            checkpoint_every: 20,
        }
    }
}

/// Full training configuration, read from a sectioned `key = value` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub problem: ProblemSpec,
    pub prior: PriorSpec,
    pub model: ArchSpec,
    pub loss: LossSpec,
    pub train: OptimSpec,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn reg_weight(&self) -> f64 {
        self.loss.reg_weight.unwrap_or(self.problem.delta)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            objective: self.loss.objective,
            reg_weight: self.reg_weight(),
            hutchinson_probes: self.loss.hutchinson_probes,
            powerseries_terms: self.loss.powerseries_terms,
            reco_unroll_iters: self.loss.reco_unroll_iters,
            reco_gradient: self.loss.reco_gradient,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", t.learning_rate)));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) || t.adam_eps <= 0.0 {
            return Err(TrainError::Config("adam betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if t.train_size == 0 {
            return Err(TrainError::Config("train_size must be >= 1".into()));
        }
        self.model.model_config().validate()?;
        self.loss_config().validate()?;
        let problem = self.problem.build()?;
        self.prior.build()?;
        if self.loss.objective == Objective::Logdet && !problem.is_square() {
            return Err(TrainError::Loss(LossError::NotSquare));
        }
        Ok(())
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64) {
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub reconstruction_mse: f64,
    pub approximation_mse: f64,
    pub inversion_failures: usize,
    pub wall_time: f64,
    pub config: TrainConfig,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `key=value` summary lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let last = self.epoch_losses.last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "objective={}", c.loss.objective);
        let _ = writeln!(s, "operator={}", c.problem.build().map(|p| p.operator().to_string()).unwrap_or_default());
        let _ = writeln!(s, "delta={}", c.problem.delta);
        let _ = writeln!(s, "reg_weight={}", c.reg_weight());
        let _ = writeln!(s, "prior={}", c.prior.name);
        let _ = writeln!(s, "seed={}", c.seed);
        let _ = writeln!(s, "epochs={}", self.epoch_losses.len());
        let _ = writeln!(s, "final_loss={last:.16e}");
        let _ = writeln!(s, "reconstruction_mse={:.16e}", self.reconstruction_mse);
        let _ = writeln!(s, "approximation_mse={:.16e}", self.approximation_mse);
        let _ = writeln!(s, "inversion_failures={}", self.inversion_failures);
        let _ = writeln!(s, "wall_time_s={:.3}", self.wall_time);
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint={}", p.display());
        }
        s
    }

    pub fn losses_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l:.16e}", i + 1);
        }
        s
    }

    /// Writes `report.txt`, `losses.csv` and `config.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.summary())?;
        fs::write(dir.join("losses.csv"), self.losses_csv())?;
        fs::write(dir.join("config.toml"), self.config.to_toml_string())?;
        Ok(())
    }
}

/// Train and test sets for a config; x samples depend only on the seed.
pub fn datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset), TrainError> {
    let problem = cfg.problem.build()?;
    let prior = cfg.prior.build()?;
    let root = Rng::new(cfg.seed);
    let train = generate_dataset(&problem, &prior, cfg.train.train_size, &root.fork(streams::TRAIN_SET))?;
    let test = generate_dataset(&problem, &prior, cfg.train.test_size.max(1), &root.fork(streams::TEST_SET))?;
    Ok((train, test))
}

/// Trains a model; writes checkpoints into `out` when given.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    let (data, test) = datasets(cfg)?;
    train_on(cfg, &data, &test, out)
}

fn pick(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, test: &Dataset, out: Option<&Path>) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = cfg.problem.build()?;
    let prior = cfg.prior.build()?;
    let loss_cfg = cfg.loss_config();
    let opt = &cfg.train;
    let root = Rng::new(cfg.seed);
    let mut model = Model::new_random(&cfg.model.model_config(), &mut root.fork(streams::INIT))?;
    let mut shuffle = root.fork(streams::SHUFFLE);
    let mut probes = root.fork(streams::PROBES);
    let targets = (loss_cfg.objective == Objective::DivEquiv).then(|| equiv_targets(&data.xs, &prior, &problem, loss_cfg.reg_weight));

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut adam = AdamState::new(model.num_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opt.epochs);
    let mut step = 0;
    for epoch in 1..=opt.epochs {
        shuffle.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            step += 1;
            let mut batch = Batch::from_dataset(data, chunk);
            if let Some(t) = &targets {
                batch.target = Some(pick(t, chunk));
            }
            let out = loss_and_gradient(&model, &batch, &loss_cfg, &mut probes).map_err(|source| TrainError::Diverged {
                epoch,
                step,
                source,
                checkpoint: last_checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into()),
            })?;
            sum += out.loss * chunk.len() as f64;
            count += chunk.len();
            let mut params = model.params();
            adam_step(
                &mut params,
                &out.gradient.flatten(),
                &mut adam,
                opt.learning_rate,
                (opt.adam_beta1, opt.adam_beta2),
                opt.adam_eps,
            );
            model.set_params(&params)?;
            model.normalize_lipschitz();
        }
        epoch_losses.push(sum / count as f64);
        if let Some(dir) = out {
            if opt.checkpoint_every > 0 && (epoch % opt.checkpoint_every == 0 || epoch == opt.epochs) {
                let path = dir.join(format!("checkpoint_{epoch:04}.txt"));
                model.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join("model.txt");
            model.save(&path)?;
            Some(path)
        }
        None => None,
    };
    let (reconstruction, failures) = reconstruction_mse(&model, test, loss_cfg.objective, &EVAL_INVERSION);
    let report = TrainReport {
        epoch_losses,
        reconstruction_mse: reconstruction,
        approximation_mse: approximation_mse(&model, test, &problem, loss_cfg.objective),
        inversion_failures: failures,
        wall_time: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        checkpoint,
    };
    Ok((model, report))
}
