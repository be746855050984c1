use invreg::iresnet::{Block, Model, ModelConfig};
use invreg::losses::{loss_and_gradient, Batch, LossConfig, Objective, RecoGradient};
use invreg::numerics::{Matrix, Rng};
use invreg::prior::Prior;
use invreg::problem::{generate_dataset, LinearProblem};

fn width8(seed: u64) -> Model {
    let cfg = ModelConfig {
        hidden: 8,
        init_std: 2.0,
        ..ModelConfig::default()
    };
    Model::new_random(&cfg, &mut Rng::new(seed)).unwrap()
}

fn batch(problem: &LinearProblem, prior: &Prior, n: usize, seed: u64) -> Batch {
    let d = generate_dataset(problem, prior, n, &Rng::new(seed)).unwrap();
    Batch::new(d.xs, d.ys, d.zs)
}

/// Worst `|g - fd| / max(|fd|, 1e-3 |fd|_inf)` over all parameters.
fn fd_mismatch(model: &Model, batch: &Batch, cfg: &LossConfig, probe_seed: u64) -> f64 {
    let eval = |m: &Model| loss_and_gradient(m, batch, cfg, &mut Rng::new(probe_seed)).unwrap();
    let g = eval(model).gradient.flatten();
    let p0 = model.params();
    let h = 1e-6;
    let mut fd = vec![0.0; p0.len()];
    let mut m = model.clone();
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + h;
        m.set_params(&p).unwrap();
        let fp = eval(&m).loss;
        p[i] = p0[i] - h;
        m.set_params(&p).unwrap();
        let fm = eval(&m).loss;
        fd[i] = (fp - fm) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    g.iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn configs() -> Vec<(&'static str, LossConfig)> {
    let base = |o| LossConfig::new(o, 0.3);
    let mut hutch = base(Objective::Div);
    hutch.hutchinson_probes = 2;
    let mut series = base(Objective::Logdet);
    series.powerseries_terms = 8;
    series.hutchinson_probes = 2;
    let mut reco = base(Objective::Reco);
    reco.reco_unroll_iters = 20;
    let mut implicit = base(Objective::Reco);
    implicit.reco_gradient = RecoGradient::Implicit;
    implicit.reco_unroll_iters = 500;
    vec![
        ("approx", base(Objective::Approx)),
        ("reco", reco),
        ("reco_implicit", implicit),
        ("logdet", base(Objective::Logdet)),
        ("logdet_series", series),
        ("div", base(Objective::Div)),
        ("div_hutchinson", hutch),
        ("div_equiv", base(Objective::DivEquiv)),
    ]
}

#[test]
fn gradients_match_finite_differences() {
    let prior = Prior::default_bimodal();
    let problem = LinearProblem::a_eps(0.5, 0.2).unwrap();
    let model = width8(1);
    let b = batch(&problem, &prior, 6, 2).with_equiv_targets(&prior, &problem, 0.3);
    for (name, cfg) in configs() {
        let worst = fd_mismatch(&model, &b, &cfg, 7);
        assert!(worst <= 1e-4, "{name}: worst relative mismatch {worst:e}");
    }
}

#[test]
fn gradients_with_identity_operator() {
    let prior = Prior::default_bimodal();
    let problem = LinearProblem::denoising(0.25).unwrap();
    let model = width8(3);
    let b = batch(&problem, &prior, 5, 4).with_equiv_targets(&prior, &problem, 0.3);
    for (name, cfg) in configs() {
        let worst = fd_mismatch(&model, &b, &cfg, 11);
        assert!(worst <= 1e-4, "{name}: worst relative mismatch {worst:e}");
    }
}

#[test]
fn equiv_target_map_is_stationary() {
    // Gaussian N(0, I), A = Id: the div_equiv target is (1 + d^2) x, a linear model
    let d: f64 = 0.3;
    let prior = Prior::standard_gaussian(2);
    let problem = LinearProblem::denoising(0.0).unwrap();
    // an MLP block with zero output layer plus a linear block holding the map
    let mut mlp = width8(9).blocks()[0].clone();
    if let Block::Mlp(m) = &mut mlp {
        m.params.w3.fill(0.0);
        m.params.b3.fill(0.0);
    }
    let model = Model::from_blocks(vec![mlp, Block::Linear(Matrix::identity(2, 2) * (-d * d))], 0.99).unwrap();
    assert!(model.num_params() > 0);
    let b = batch(&problem, &prior, 32, 5).with_equiv_targets(&prior, &problem, d);
    let out = loss_and_gradient(&model, &b, &LossConfig::new(Objective::DivEquiv, d), &mut Rng::new(0)).unwrap();
    assert!(out.loss < 1e-28);
    assert!(out.gradient.norm() <= 1e-6);
}
