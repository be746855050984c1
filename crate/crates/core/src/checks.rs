//! Acceptance suite: nine numbered criteria, each producing a PASS/FAIL
//! outcome with the measured values. Shared by the `check` command and the
//! `acceptance` test target.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::eval::{
    band_density, estimator_grid, estimator_image, reconstruction_grid, reconstruction_mse, approximation_mse, Estimator,
    GridMode, GridSpec, BAND_HALF_WIDTH, EVAL_INVERSION,
};
use crate::iresnet::{InversionConfig, Model, ModelConfig};
use crate::losses::{
    hutchinson_samples, logdet_power_series_samples, loss_and_gradient, Batch, LossConfig, Objective, RecoGradient,
};
use crate::numerics::{fd_gradient, slogdet, streams, Matrix, Rng, Vector};
use crate::oracle::{
    gaussian, logdet_scalar_fixed_point, map_foc_residual, quadrature_fields, theorem1_residual, theorem1_residuals,
    theorem2_constant, Oracle, OracleConfig,
};
use crate::prior::{GaussianPrior, Prior};
use crate::problem::{generate_dataset, Dataset, LinearProblem};
use crate::train::{datasets, train, ArchSpec, LossSpec, OptimSpec, PriorSpec, ProblemSpec, TrainConfig, TrainReport};

/// Pass thresholds, one field per quantity.
#[derive(Clone, Debug)]
pub struct Tolerances {
    pub tweedie: f64,
    pub tweedie_seconds: f64,
    pub objective_constant_rel: f64,
    pub tikhonov_rel: f64,
    pub stationarity_ratio: f64,
    pub scalar_construction: f64,
    /// Standard errors allowed for Monte-Carlo comparisons.
    pub se_multiplier: f64,
    pub map_density_rel: f64,
    pub round_trip: f64,
    pub round_trip_iters: usize,
    pub fd_rel: f64,
    pub se_slope: f64,
    pub se_slope_tol: f64,
    pub power_series_terms: usize,
    pub power_series_probes: usize,
    pub exact_logdet: f64,
    pub oracle_estimator: f64,
    pub oracle_density_rel: f64,
    pub oracle_score_rel: f64,
    pub map_foc: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tweedie: 1e-4,
            tweedie_seconds: 300.0,
            objective_constant_rel: 1e-3,
            tikhonov_rel: 0.02,
            stationarity_ratio: 0.05,
            scalar_construction: 1e-8,
            se_multiplier: 3.0,
            map_density_rel: 0.2,
            round_trip: 1e-6,
            round_trip_iters: 100,
            fd_rel: 1e-4,
            se_slope: -0.5,
            se_slope_tol: 0.1,
            power_series_terms: 200,
            power_series_probes: 50,
            exact_logdet: 1e-10,
            oracle_estimator: 1e-6,
            oracle_density_rel: 1e-6,
            oracle_score_rel: 1e-5,
            map_foc: 1e-6,
        }
    }
}

/// Sizes of the trainings and Monte-Carlo runs behind the suite.
#[derive(Clone, Debug)]
pub struct Budget {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub reco_iters: usize,
    pub mc_chunks: usize,
    pub mc_chunk_size: usize,
    pub stationarity_samples: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            seed: 1,
            train_size: 20_000,
            test_size: 4_000,
            epochs: 60,
            batch_size: 256,
            learning_rate: 3e-4,
            reco_iters: 30,
            mc_chunks: 100,
            mc_chunk_size: 1000,
            stationarity_samples: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: usize,
    pub title: &'static str,
    pub pass: bool,
    pub details: Vec<String>,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} [{}] {} ({:.1}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.seconds
        )
    }
}

pub const TITLES: [&str; 9] = [
    "Tweedie identity on the data range",
    "div and div-equivalent objectives differ by a model-independent constant",
    "div training on a Gaussian prior recovers the Tikhonov map",
    "log-det stationarity",
    "noise independence of approx/logdet/div",
    "error orderings at eps = 1/8",
    "grid density ordering against the oracle estimators",
    "mechanics",
    "oracle self-validation",
];

/// Collects measurements of one criterion.
#[derive(Default)]
struct Log {
    pass: bool,
    lines: Vec<String>,
}

impl Log {
    fn new() -> Self {
        Self {
            pass: true,
            lines: Vec::new(),
        }
    }

    fn le(&mut self, label: impl Display, value: f64, bound: f64) {
        let ok = value <= bound;
        self.record(ok, format!("{label}: {value:.4e} <= {bound:.4e}"));
    }

    fn check(&mut self, ok: bool, text: impl Into<String>) {
        self.record(ok, text.into());
    }

    fn note(&mut self, text: impl Into<String>) {
        self.lines.push(text.into());
    }

    fn record(&mut self, ok: bool, text: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {text}", if ok { "ok " } else { "BAD" }));
    }
}

type Res<T> = Result<T, String>;

fn err(e: impl Display) -> String {
    e.to_string()
}

pub struct Trained {
    pub model: Model,
    pub report: TrainReport,
    pub test: Dataset,
}

pub struct Suite {
    pub tol: Tolerances,
    pub budget: Budget,
    cache: Mutex<HashMap<String, Arc<Trained>>>,
}

impl Default for Suite {
    fn default() -> Self {
        Self::new(Tolerances::default(), Budget::default())
    }
}

impl Suite {
    pub fn new(tol: Tolerances, budget: Budget) -> Self {
        Self {
            tol,
            budget,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Runs every criterion in order, calling `each` as soon as one finishes.
    pub fn run_all(&self, mut each: impl FnMut(&Outcome)) -> Vec<Outcome> {
        (1..=TITLES.len())
            .map(|id| {
                let o = self.run(id);
                each(&o);
                o
            })
            .collect()
    }

    pub fn run(&self, id: usize) -> Outcome {
        let start = Instant::now();
        let mut log = Log::new();
        let result = match id {
            1 => self.tweedie(&mut log),
            2 => self.objective_constant(&mut log),
            3 => self.tikhonov(&mut log),
            4 => self.stationarity(&mut log),
            5 => self.noise_independence(&mut log),
            6 => self.error_orderings(&mut log),
            7 => self.grid_density(&mut log),
            8 => self.mechanics(&mut log),
            9 => self.oracle_validation(&mut log),
            _ => Err(format!("no criterion {id}")),
        };
        if let Err(e) = result {
            log.check(false, format!("error: {e}"));
        }
        Outcome {
            id,
            title: TITLES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown"),
            pass: log.pass,
            details: log.lines,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    /// Training config with the suite's budget.
    pub fn config(&self, objective: Objective, problem: ProblemSpec, prior: &str, reg_weight: Option<f64>, seed: u64) -> TrainConfig {
        let b = &self.budget;
        TrainConfig {
            seed,
            problem,
            prior: PriorSpec {
                name: prior.to_string(),
                ..PriorSpec::default()
            },
            model: ArchSpec::default(),
            loss: LossSpec {
                objective,
                reg_weight,
                reco_unroll_iters: b.reco_iters,
                reco_gradient: RecoGradient::Implicit,
                ..LossSpec::default()
            },
            train: OptimSpec {
                epochs: b.epochs,
                batch_size: b.batch_size,
                learning_rate: b.learning_rate,
                train_size: b.train_size,
                test_size: b.test_size,
                ..OptimSpec::default()
            },
        }
    }

    /// Trains `cfg` once per suite; later calls return the cached result.
    pub fn trained(&self, cfg: &TrainConfig) -> Res<Arc<Trained>> {
        let key = cfg.to_toml_string();
        let mut cache = self.cache.lock().map_err(err)?;
        if let Some(t) = cache.get(&key) {
            return Ok(t.clone());
        }
        let (model, report) = train(cfg, None).map_err(err)?;
        let (_, test) = datasets(cfg).map_err(err)?;
        let t = Arc::new(Trained { model, report, test });
        cache.insert(key, t.clone());
        Ok(t)
    }

    fn tweedie(&self, log: &mut Log) -> Res<()> {
        let start = Instant::now();
        let prior = Prior::default_bimodal();
        for (name, problem) in [("A=Id", LinearProblem::denoising(0.25)), ("A=A_1/2", LinearProblem::a_eps(0.5, 0.25))] {
            let problem = problem.map_err(err)?;
            let oracle = Oracle::new(&prior, &problem, OracleConfig::default()).map_err(err)?;
            let data = generate_dataset(&problem, &prior, 2000, &Rng::new(self.budget.seed)).map_err(err)?;
            let (lo, hi) = column_range(&data.ys);
            let (mut worst, mut worst_fd): (f64, f64) = (0.0, 0.0);
            for i in 0..9 {
                for j in 0..9 {
                    let t = |k: usize, s: usize| lo[k] + (hi[k] - lo[k]) * s as f64 / 8.0;
                    let y = Vector::from_vec(vec![t(0, i), t(1, j)]);
                    worst = worst.max(oracle.tweedie_residual(&y).map_err(err)?);
                    // same identity with the score from differences of log p_Y
                    let mut failure = None;
                    let score = fd_gradient(
                        |v| {
                            oracle.data_log_density(v).unwrap_or_else(|e| {
                                failure = Some(e);
                                f64::NAN
                            })
                        },
                        &y,
                        1e-4,
                    );
                    if let Some(e) = failure {
                        return Err(err(e));
                    }
                    let pm = oracle.posterior_mean(&y).map_err(err)?;
                    let r = problem.apply(&pm) - &y - score * problem.delta().powi(2);
                    worst_fd = worst_fd.max(r.norm());
                }
            }
            let range = format!("[{:.2},{:.2}]x[{:.2},{:.2}]", lo[0], hi[0], lo[1], hi[1]);
            log.le(format!("{name}: max residual over 9x9 grid on {range}"), worst, self.tol.tweedie);
            log.le(format!("{name}: same with finite-difference data score"), worst_fd, self.tol.tweedie);
        }
        log.le("runtime [s]", start.elapsed().as_secs_f64(), self.tol.tweedie_seconds);
        Ok(())
    }

    fn objective_constant(&self, log: &mut Log) -> Res<()> {
        let prior = Prior::default_bimodal();
        let grid = prior.default_grid();
        let cfg = ModelConfig::default();
        let lin = |entries: [f64; 4]| Matrix::from_row_slice(2, 2, &entries);
        let random = |seed| {
            Model::new_random(
                &ModelConfig {
                    init_std: 1.0,
                    ..ModelConfig::default()
                },
                &mut Rng::new(seed),
            )
        };
        let models = [
            ("identity", Model::zeros(&cfg).map_err(err)?),
            ("linear 1", Model::linear(vec![lin([0.2, 0.1, -0.1, 0.3])], 0.99).map_err(err)?),
            ("linear 2", Model::linear(vec![lin([-0.5, 0.3, 0.2, 0.4]), lin([0.1, -0.6, 0.0, 0.2])], 0.99).map_err(err)?),
            ("random 1", random(self.budget.seed).map_err(err)?),
            ("random 2", random(self.budget.seed + 1).map_err(err)?),
        ];
        let fields: Vec<_> = models.iter().map(|(_, m)| quadrature_fields(m, &prior, &grid)).collect();
        for reg in [0.1, 0.5] {
            for (aname, a) in [("Id", LinearProblem::denoising(0.0)), ("A_1/2", LinearProblem::a_eps(0.5, 0.0))] {
                let a = a.map_err(err)?;
                let c = theorem2_constant(&prior, &a, reg, &grid);
                let mut worst: f64 = 0.0;
                for f in &fields {
                    let (q_div, q_equiv) = f.objectives(&a, reg);
                    worst = worst.max(((q_equiv - q_div) - c).abs() / c.abs());
                }
                log.le(format!("reg={reg} A={aname} C={c:.6}: max rel. gap over 5 models"), worst, self.tol.objective_constant_rel);
            }
        }
        Ok(())
    }

    fn tikhonov(&self, log: &mut Log) -> Res<()> {
        let reg = 0.3;
        let spec = ProblemSpec {
            operator: "eps".into(),
            eps: 0.5,
            delta: reg,
        };
        let cfg = self.config(Objective::Div, spec, "gaussian", None, self.budget.seed);
        let t = self.trained(&cfg)?;
        let problem = cfg.problem.build().map_err(err)?;
        let m = problem.normal() + Matrix::identity(2, 2) * (reg * reg);
        let target = &m * &t.test.xs;
        let fwd = (t.model.forward_batch(&t.test.xs) - &target).norm() / target.norm();
        log.le("forward map vs (A^T A + reg^2 I) x, rel. L2(p_X)", fwd, self.tol.tikhonov_rel);
        let tik = m.lu().solve(&t.test.zs).ok_or("singular Tikhonov matrix")?;
        let inv = t.model.invert_batch(&t.test.zs, &EVAL_INVERSION);
        let rel = (&inv.x - &tik).norm() / tik.norm();
        log.le("psi(z) vs Tikhonov solution, rel. over test set", rel, self.tol.tikhonov_rel);
        log.note(format!("inversion failures {}, final loss {:.6}", inv.failures(), last(&t.report.epoch_losses)));
        Ok(())
    }

    fn logdet_config(&self) -> TrainConfig {
        self.config(Objective::Logdet, denoise_spec(0.25), "bimodal", None, self.budget.seed)
    }

    fn stationarity(&self, log: &mut Log) -> Res<()> {
        let cfg = self.logdet_config();
        let t = self.trained(&cfg)?;
        let prior = Prior::default_bimodal();
        let problem = cfg.problem.build().map_err(err)?;
        let mut rng = Rng::new(self.budget.seed).fork(streams::PRIOR);
        let n = self.budget.stationarity_samples;
        let mut xs = Matrix::zeros(2, n);
        for c in 0..n {
            xs.set_column(c, &prior.sample(&mut rng));
        }
        let res = theorem1_residuals(&t.model, &xs, cfg.reg_weight(), &problem, &prior);
        let out = t.model.forward_batch(&xs);
        let norms: Vec<f64> = (0..n).map(|c| out.column(c).norm()).collect();
        let (mr, mn) = (median(&res), median(&norms));
        log.le(format!("median residual / median |phi(x)| ({mr:.4e} / {mn:.4e})"), mr / mn, self.tol.stationarity_ratio);

        let mut worst: f64 = 0.0;
        for (sigma, d) in [(1.0, 0.25), (1.5, 0.5)] {
            let prior = Prior::Gaussian(GaussianPrior::isotropic(2, sigma).map_err(err)?);
            let c = logdet_scalar_fixed_point(sigma, d);
            let m = Model::linear(vec![Matrix::identity(2, 2) * (1.0 - c)], 0.99).map_err(err)?;
            let mut rng = Rng::new(self.budget.seed);
            for _ in 0..20 {
                let x = Vector::from_fn(2, |_, _| sigma * rng.normal());
                worst = worst.max(theorem1_residual(&m, &x, d, &LinearProblem::denoising(0.0).map_err(err)?, &prior));
            }
        }
        log.le("scalar construction phi = c Id, max residual", worst, self.tol.scalar_construction);
        Ok(())
    }

    fn noise_independence(&self, log: &mut Log) -> Res<()> {
        let (da, db, reg) = (0.1, 0.4, 0.25);
        let prior = Prior::default_bimodal();
        let a = Matrix::identity(2, 2);
        let model = Model::new_random(
            &ModelConfig {
                hidden: 16,
                init_std: 1.0,
                ..ModelConfig::default()
            },
            &mut Rng::new(self.budget.seed),
        )
        .map_err(err)?;
        let p = model.num_params();
        let z_crit = Normal::new(0.0, 1.0).map_err(err)?.inverse_cdf(1.0 - 0.0027 / (2.0 * p as f64));
        log.note(format!("gradient threshold {z_crit:.3} SE per coordinate ({p} coordinates, family-wise 0.27%)"));
        let (chunks, size) = (self.budget.mc_chunks, self.budget.mc_chunk_size);
        for objective in [Objective::Approx, Objective::Logdet, Objective::Div] {
            let cfg = LossConfig::new(objective, reg);
            let dim = if objective == Objective::Logdet { a.nrows() } else { a.ncols() };
            // E|A^T eta|^2 = delta^2 tr(A A^T); E|eta|^2 = delta^2 m
            let trace = if objective == Objective::Logdet { dim as f64 } else { (&a * a.transpose()).trace() };
            let offset = 0.5 * (da * da - db * db) * trace;
            let root = Rng::new(self.budget.seed).fork(objective as u64 + 100);
            let mut prior_rng = root.fork(streams::PRIOR);
            let mut noise_rng = root.fork(streams::NOISE);
            let mut probes = root.fork(streams::PROBES);
            let mut loss_diffs = Vec::with_capacity(chunks);
            let mut grad_diffs = Vec::with_capacity(chunks);
            for _ in 0..chunks {
                let mut xs = Matrix::zeros(2, size);
                for c in 0..size {
                    xs.set_column(c, &prior.sample(&mut prior_rng));
                }
                let ax = &a * &xs;
                let mut observe = |delta: f64| {
                    let ys = &ax + Matrix::from_fn(ax.nrows(), size, |_, _| delta * noise_rng.normal());
                    let zs = a.transpose() * &ys;
                    Batch::new(xs.clone(), ys, zs)
                };
                let (ba, bb) = (observe(da), observe(db));
                let la = loss_and_gradient(&model, &ba, &cfg, &mut probes).map_err(err)?;
                let lb = loss_and_gradient(&model, &bb, &cfg, &mut probes).map_err(err)?;
                loss_diffs.push(la.loss - lb.loss - offset);
                let (ga, gb) = (la.gradient.flatten(), lb.gradient.flatten());
                grad_diffs.push(ga.iter().zip(&gb).map(|(x, y)| x - y).collect::<Vec<f64>>());
            }
            let (mean, se) = mean_se(&loss_diffs);
            log.le(
                format!("{objective}: |E[L_a - L_b] - offset| in SE (mean {mean:.3e}, SE {se:.3e})"),
                mean.abs() / se,
                self.tol.se_multiplier,
            );
            let mut worst: f64 = 0.0;
            for k in 0..p {
                let col: Vec<f64> = grad_diffs.iter().map(|g| g[k]).collect();
                let (m, s) = mean_se(&col);
                let score = if s > 0.0 { m.abs() / s } else if m.abs() <= 1e-12 { 0.0 } else { f64::INFINITY };
                worst = worst.max(score);
            }
            log.le(format!("{objective}: max |E[g_a - g_b]| in SE"), worst, z_crit);
        }

        // trained null distribution
        let probe = generate_dataset(&LinearProblem::denoising(0.0).map_err(err)?, &prior, 2000, &Rng::new(self.budget.seed + 7)).map_err(err)?;
        for objective in [Objective::Approx, Objective::Logdet, Objective::Div] {
            let run = |delta: f64, seed: u64| self.trained(&self.config(objective, denoise_spec(delta), "bimodal", Some(reg), seed));
            let base = run(da, self.budget.seed)?;
            let noisy = run(db, self.budget.seed)?;
            let other_a = run(da, self.budget.seed + 1)?;
            let other_b = run(db, self.budget.seed + 1)?;
            let d_noise = rms_diff(&base.model, &noisy.model, &probe.ys);
            let seed_a = rms_diff(&base.model, &other_a.model, &probe.ys);
            let seed_b = rms_diff(&noisy.model, &other_b.model, &probe.ys);
            let d_seed = seed_a.max(seed_b);
            log.le(
                format!("{objective}: RMS psi change delta 0.1 -> 0.4 vs seed change (at 0.1: {seed_a:.4e}, at 0.4: {seed_b:.4e})"),
                d_noise,
                d_seed,
            );
        }
        Ok(())
    }

    fn error_orderings(&self, log: &mut Log) -> Res<()> {
        let objectives = [Objective::Approx, Objective::Reco, Objective::Logdet, Objective::Div];
        for delta in [0.05, 0.15, 0.3] {
            let spec = ProblemSpec {
                operator: "eps".into(),
                eps: 0.125,
                delta,
            };
            let problem = spec.build().map_err(err)?;
            let mut rec = Vec::new();
            let mut apx = Vec::new();
            for o in objectives {
                let t = self.trained(&self.config(o, spec.clone(), "bimodal", None, self.budget.seed))?;
                let (r, fails) = reconstruction_mse(&t.model, &t.test, o, &EVAL_INVERSION);
                rec.push(r);
                apx.push(approximation_mse(&t.model, &t.test, &problem, o));
                if fails > 0 {
                    log.note(format!("delta={delta} {o}: {fails} inversion failures"));
                }
            }
            let row = |v: &[f64]| {
                objectives
                    .iter()
                    .zip(v)
                    .map(|(o, x)| format!("{o}={x:.4e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            log.note(format!("delta={delta} reconstruction: {}", row(&rec)));
            log.note(format!("delta={delta} approximation:  {}", row(&apx)));
            log.check(rec[1] <= rec[0].min(rec[2]).min(rec[3]), format!("delta={delta}: reco-trained has minimal reconstruction MSE"));
            log.check(rec[3] < rec[0], format!("delta={delta}: div reconstruction < approx"));
            log.check(rec[2] < rec[0], format!("delta={delta}: logdet reconstruction < approx"));
            log.check(apx[0] <= apx[1].min(apx[2]).min(apx[3]), format!("delta={delta}: approx-trained has minimal approximation MSE"));
        }
        Ok(())
    }

    fn grid_density(&self, log: &mut Log) -> Res<()> {
        let prior = Prior::default_bimodal();
        let problem = LinearProblem::denoising(0.25).map_err(err)?;
        let spec = GridSpec::default();
        let mut values = Vec::new();
        for o in [Objective::Approx, Objective::Logdet, Objective::Div] {
            let cfg = if o == Objective::Logdet {
                self.logdet_config()
            } else {
                self.config(o, denoise_spec(0.25), "bimodal", None, self.budget.seed)
            };
            let t = self.trained(&cfg)?;
            let grid = reconstruction_grid(&t.model, &problem, &spec, GridMode::for_objective(o), &EVAL_INVERSION);
            values.push(band_density(&prior, &grid, BAND_HALF_WIDTH));
        }
        let oracle = Oracle::new(&prior, &problem, OracleConfig::default()).map_err(err)?;
        let axis = prior.mode_axis().ok_or("prior has no mode axis")?;
        let all = spec.line_points();
        let band: Vec<usize> = (0..all.ncols()).filter(|&c| all.column(c).dot(&axis).abs() <= BAND_HALF_WIDTH).collect();
        let points = Matrix::from_fn(2, band.len(), |r, c| all[(r, band[c])]);
        let pm = estimator_image(Estimator::PosteriorMean, &oracle, &spec, points.clone()).map_err(err)?;
        let map = estimator_image(Estimator::Map, &oracle, &spec, points).map_err(err)?;
        let (pm, map) = (band_density(&prior, &pm, BAND_HALF_WIDTH), band_density(&prior, &map, BAND_HALF_WIDTH));
        let (approx, logdet, div) = (values[0], values[1], values[2]);
        log.note(format!(
            "band density ({} nodes): approx {approx:.5} logdet {logdet:.5} div {div:.5} pm {pm:.5} map {map:.5}",
            band.len()
        ));
        log.check(approx <= logdet && logdet <= div, "approx <= logdet <= div");
        log.le("|div - map| / map", (div - map).abs() / map, self.tol.map_density_rel);
        log.check(
            (logdet - pm).abs() < (logdet - map).abs(),
            format!("logdet closer to pm ({:.5}) than to map ({:.5})", (logdet - pm).abs(), (logdet - map).abs()),
        );
        Ok(())
    }

    fn mechanics(&self, log: &mut Log) -> Res<()> {
        let tol = &self.tol;
        let mut rng = Rng::new(self.budget.seed);
        let inv = InversionConfig {
            max_iters: tol.round_trip_iters,
            ..InversionConfig::default()
        };
        let mut worst: f64 = 0.0;
        for (k, init_std) in [0.1, 1.0, 3.0].into_iter().enumerate() {
            let m = Model::new_random(
                &ModelConfig {
                    init_std,
                    ..ModelConfig::default()
                },
                &mut Rng::new(self.budget.seed + k as u64),
            )
            .map_err(err)?;
            let xs = Matrix::from_fn(2, 200, |_, _| 2.0 * rng.normal());
            let back = m.invert_batch(&m.forward_batch(&xs), &inv);
            let e = (0..xs.ncols()).map(|c| (back.x.column(c) - xs.column(c)).norm()).fold(0.0, f64::max);
            worst = worst.max(e);
        }
        log.le(format!("round trip, L=0.99, {} iterations", tol.round_trip_iters), worst, tol.round_trip);

        let small = Model::new_random(
            &ModelConfig {
                hidden: 8,
                init_std: 2.0,
                ..ModelConfig::default()
            },
            &mut Rng::new(self.budget.seed),
        )
        .map_err(err)?;
        let prior = Prior::default_bimodal();
        let problem = LinearProblem::a_eps(0.5, 0.2).map_err(err)?;
        let d = generate_dataset(&problem, &prior, 6, &Rng::new(self.budget.seed)).map_err(err)?;
        let batch = Batch::new(d.xs, d.ys, d.zs).with_equiv_targets(&prior, &problem, 0.3);
        for o in [Objective::Approx, Objective::Reco, Objective::Logdet, Objective::Div, Objective::DivEquiv] {
            let mut cfg = LossConfig::new(o, 0.3);
            cfg.reco_unroll_iters = 20;
            log.le(format!("{o}: gradient vs central differences, worst rel."), fd_mismatch(&small, &batch, &cfg)?, tol.fd_rel);
        }

        let x = Vector::from_vec(vec![0.3, -0.8]);
        let exact = small.divergence(&x);
        let samples = hutchinson_samples(&small, &x, 20_000, &mut rng);
        let (mean, se) = mean_se(&samples);
        log.le(format!("Hutchinson bias in SE (exact {exact:.5})"), (mean - exact).abs() / se, tol.se_multiplier);
        let ms = [1usize, 4, 16, 64, 256];
        let mut logs = Vec::new();
        for &m in &ms {
            let reps: Vec<f64> = (0..400)
                .map(|_| {
                    let s = hutchinson_samples(&small, &x, m, &mut rng);
                    s.iter().sum::<f64>() / m as f64
                })
                .collect();
            logs.push(((m as f64).ln(), std_dev(&reps).ln()));
        }
        let slope = regression_slope(&logs);
        log.le(format!("Hutchinson SE slope {slope:.4}, distance from {}", tol.se_slope), (slope - tol.se_slope).abs(), tol.se_slope_tol);

        let big = Model::new_random(
            &ModelConfig {
                init_std: 3.0,
                ..ModelConfig::default()
            },
            &mut Rng::new(self.budget.seed),
        )
        .map_err(err)?;
        let (k, probes) = (tol.power_series_terms, tol.power_series_probes);
        let mut ok = true;
        let mut worst_ratio: f64 = 0.0;
        for (b, block) in big.blocks().iter().enumerate() {
            let xb = Vector::from_vec(vec![0.5 - b as f64, 0.2 * b as f64]);
            let lin = block.linearize(&xb).matrix();
            let exact = slogdet(&(Matrix::identity(2, 2) - lin)).1;
            let s = logdet_power_series_samples(block, &xb, k, probes, &mut rng);
            let (mean, se) = mean_se(&s);
            let l = big.lipschitz();
            let tail = 2.0 * l.powi(k as i32 + 1) / ((k as f64 + 1.0) * (1.0 - l));
            let bound = tail + tol.se_multiplier * se;
            ok &= (mean - exact).abs() <= bound;
            worst_ratio = worst_ratio.max((mean - exact).abs() / bound);
        }
        log.check(ok, format!("power series K={k}, {probes} probes within tail + 3 SE (worst error/bound {worst_ratio:.3})"));

        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let x = Vector::from_fn(2, |_, _| 2.0 * rng.normal());
            let (sign, ld) = slogdet(&big.jacobian(&x));
            if sign <= 0.0 {
                worst = f64::INFINITY;
            }
            worst = worst.max((big.logdet(&x) - ld).abs());
        }
        log.le("exact logdet vs dense slogdet", worst, tol.exact_logdet);

        let stable = byte_stability(self.budget.seed)?;
        for (what, same) in stable {
            log.check(same, format!("{what} byte-stable across reruns"));
        }
        Ok(())
    }

    fn oracle_validation(&self, log: &mut Log) -> Res<()> {
        let tol = &self.tol;
        let g = GaussianPrior::new(
            Vector::from_vec(vec![0.2, -0.1]),
            Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6]),
        )
        .map_err(err)?;
        let prior = Prior::Gaussian(g.clone());
        let ys = [[0.0, 0.0], [0.8, -0.4], [-1.2, 1.5], [2.0, 1.0]];
        let (mut pm_err, mut map_err, mut dens_err, mut score_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for p in [LinearProblem::denoising(0.3), LinearProblem::a_eps(0.5, 0.25)] {
            let p = p.map_err(err)?;
            let o = Oracle::new(&prior, &p, OracleConfig::default()).map_err(err)?;
            for y in ys {
                let y = Vector::from_vec(y.to_vec());
                pm_err = pm_err.max((o.posterior_mean(&y).map_err(err)? - gaussian::posterior_mean(&g, &p, &y)).norm());
                let map = o.map_estimate(&y).map_err(err)?;
                map_err = map_err.max(if map.converged { (map.x - gaussian::map(&g, &p, &y)).norm() } else { f64::INFINITY });
                let expect = gaussian::data_density(&g, &p, &y);
                dens_err = dens_err.max((o.data_density(&y).map_err(err)? - expect).abs() / expect);
                let expect = gaussian::data_score(&g, &p, &y);
                score_err = score_err.max((o.data_score(&y).map_err(err)? - &expect).norm() / expect.norm().max(1e-12));
            }
        }
        log.le("Gaussian posterior mean vs closed form", pm_err, tol.oracle_estimator);
        log.le("Gaussian MAP vs closed form", map_err, tol.oracle_estimator);
        log.le("Gaussian p_Y rel.", dens_err, tol.oracle_density_rel);
        log.le("Gaussian data score rel.", score_err, tol.oracle_score_rel);

        let prior = Prior::default_bimodal();
        let mut worst: f64 = 0.0;
        for p in [LinearProblem::denoising(0.25), LinearProblem::a_eps(0.5, 0.25)] {
            let p = p.map_err(err)?;
            let o = Oracle::new(&prior, &p, OracleConfig::default()).map_err(err)?;
            for i in 0..3 {
                for j in 0..3 {
                    let y = Vector::from_vec(vec![-2.0 + 2.0 * i as f64, -2.5 + 2.5 * j as f64]);
                    let r = o.map_estimate(&y).map_err(err)?;
                    let z = p.apply_adjoint(&y);
                    let res = map_foc_residual(&r.x, &z, &prior, &p, p.delta()) / (1.0 + z.norm());
                    worst = worst.max(if r.converged { res } else { f64::INFINITY });
                }
            }
        }
        log.le("bimodal MAP first-order residual / (1 + |z|)", worst, tol.map_foc);
        Ok(())
    }
}

fn denoise_spec(delta: f64) -> ProblemSpec {
    ProblemSpec {
        operator: "identity".into(),
        delta,
        ..ProblemSpec::default()
    }
}

fn last(v: &[f64]) -> f64 {
    v.last().copied().unwrap_or(f64::NAN)
}

fn column_range(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let lo = (0..m.nrows()).map(|r| m.row(r).min()).collect();
    let hi = (0..m.nrows()).map(|r| m.row(r).max()).collect();
    (lo, hi)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Sample mean and its standard error.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    (v.iter().sum::<f64>() / n, std_dev(v) / n.sqrt())
}

fn regression_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// RMS distance of the two inverses on the columns of `inputs`.
fn rms_diff(a: &Model, b: &Model, inputs: &Matrix) -> f64 {
    let ra = a.invert_batch(inputs, &EVAL_INVERSION);
    let rb = b.invert_batch(inputs, &EVAL_INVERSION);
    ((ra.x - rb.x).norm_squared() / inputs.ncols() as f64).sqrt()
}

/// Worst `|g - fd| / max(|fd|, 1e-3 |fd|_inf)` over all parameters.
fn fd_mismatch(model: &Model, batch: &Batch, cfg: &LossConfig) -> Res<f64> {
    let eval = |m: &Model| loss_and_gradient(m, batch, cfg, &mut Rng::new(0)).map_err(err);
    let g = eval(model)?.gradient.flatten();
    let p0 = model.params();
    let h = 1e-6;
    let mut m = model.clone();
    let mut fd = vec![0.0; p0.len()];
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        m.set_params(&p).map_err(err)?;
        let fp = eval(&m)?.loss;
        p[i] = p0[i] - h;
        m.set_params(&p).map_err(err)?;
        let fm = eval(&m)?.loss;
        fd[i] = (fp - fm) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(g.iter().zip(&fd).map(|(a, b)| (a - b).abs() / b.abs().max(1e-3 * scale)).fold(0.0, f64::max))
}

static SCRATCH: AtomicUsize = AtomicUsize::new(0);

/// Fresh directory under the system temp dir, removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new() -> Res<Self> {
        let n = SCRATCH.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("invreg-check-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir).map_err(err)?;
        Ok(Self(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn read_all(dir: &Path) -> Res<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).map_err(err)? {
        let e = e.map_err(err)?;
        let name = e.file_name().to_string_lossy().into_owned();
        // the report echoes wall time
        if name != "report.txt" {
            files.push((name, fs::read(e.path()).map_err(err)?));
        }
    }
    files.sort();
    Ok(files)
}

/// Runs each seeded producer twice and compares the bytes written.
fn byte_stability(seed: u64) -> Res<Vec<(&'static str, bool)>> {
    let prior = Prior::default_bimodal();
    let problem = LinearProblem::a_eps(0.5, 0.25).map_err(err)?;
    let dataset = || -> Res<Vec<(String, Vec<u8>)>> {
        let s = Scratch::new()?;
        generate_dataset(&problem, &prior, 500, &Rng::new(seed)).map_err(err)?.write(&s.0, "data").map_err(err)?;
        read_all(&s.0)
    };
    let cfg = TrainConfig {
        seed,
        model: ArchSpec {
            hidden: 8,
            ..ArchSpec::default()
        },
        loss: LossSpec {
            objective: Objective::Div,
            hutchinson_probes: 2,
            ..LossSpec::default()
        },
        train: OptimSpec {
            epochs: 2,
            batch_size: 64,
            train_size: 256,
            test_size: 64,
            checkpoint_every: 1,
            ..OptimSpec::default()
        },
        ..TrainConfig::default()
    };
    let training = || -> Res<(Vec<(String, Vec<u8>)>, String)> {
        let s = Scratch::new()?;
        let (model, report) = train(&cfg, Some(&s.0)).map_err(err)?;
        report.write(&s.0).map_err(err)?;
        let grid = reconstruction_grid(
            &model,
            &cfg.problem.build().map_err(err)?,
            &GridSpec::default(),
            GridMode::Normal,
            &EVAL_INVERSION,
        );
        Ok((read_all(&s.0)?, grid.to_csv()))
    };
    let spec = GridSpec {
        lines: 3,
        samples: 10,
        ..GridSpec::default()
    };
    let oracle_grid = || -> Res<String> {
        let p = LinearProblem::denoising(0.25).map_err(err)?;
        let o = Oracle::new(&prior, &p, OracleConfig::default()).map_err(err)?;
        Ok(estimator_grid(Estimator::Map, &o, &spec).map_err(err)?.to_csv())
    };
    let (t1, g1) = training()?;
    let (t2, g2) = training()?;
    Ok(vec![
        ("dataset CSV", dataset()? == dataset()?),
        ("training losses and checkpoints", t1 == t2 && !t1.is_empty()),
        ("reconstruction grid CSV", g1 == g2),
        ("MAP grid CSV", oracle_grid()? == oracle_grid()?),
    ])
}
