//! The experiment matrix: deformed grids for every objective on the identity
//! and `A_{1/2}` operators, oracle PM/MAP grids, score fields and the error
//! table over noise levels at `eps = 1/8`.

use std::fmt::Write as _;
use std::path::Path;

use invreg::eval::{
    estimator_grid, evaluate, reconstruction_grid, score_field, score_field_csv, Estimator, GridMode, GridSpec, ScoreField,
    EVAL_INVERSION,
};
use invreg::losses::Objective;
use invreg::oracle::{Oracle, OracleConfig};
use invreg::train::{datasets, train, ProblemSpec, TrainConfig};

use crate::{write_text, CliError};

const OBJECTIVES: [Objective; 4] = [Objective::Approx, Objective::Reco, Objective::Logdet, Objective::Div];
const ERROR_DELTAS: [f64; 3] = [0.05, 0.15, 0.3];

/// `base` supplies seed, prior, architecture, optimizer settings and the
/// noise level of the grid panels; operator and objective are overridden.
pub fn run(base: &TrainConfig, out: &Path) -> Result<(), CliError> {
    let prior = base.prior.build()?;
    let spec = GridSpec::default();
    let grids = out.join("grids");
    let operators = [("id", "identity", base.problem.eps), ("eps05", "eps", 0.5)];
    for (tag, operator, eps) in operators {
        let problem_spec = ProblemSpec {
            operator: operator.into(),
            eps,
            delta: base.problem.delta,
        };
        let problem = problem_spec.build()?;
        for objective in OBJECTIVES {
            let cfg = variant(base, &problem_spec, objective);
            let dir = out.join("runs").join(format!("{tag}_{objective}"));
            let (model, report) = train(&cfg, Some(&dir))?;
            report.write(&dir)?;
            let image = reconstruction_grid(&model, &problem, &spec, GridMode::for_objective(objective), &EVAL_INVERSION);
            image.write(&grids, &format!("{tag}_{objective}"))?;
            println!("{tag} {objective}: final loss {:.6e}", report.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        let oracle = Oracle::new(&prior, &problem, OracleConfig::default())?;
        for e in [Estimator::PosteriorMean, Estimator::Map] {
            estimator_grid(e, &oracle, &spec)?.write(&grids, &format!("{tag}_{}", e.name()))?;
        }
        println!("{tag}: oracle grids written");
        if tag == "id" {
            let fields = out.join("fields");
            write_text(&fields, "prior_score.csv", &score_field_csv(&score_field(ScoreField::Prior, &prior, None, &spec)?))?;
            let data = score_field(ScoreField::Data, &prior, Some(&oracle), &spec)?;
            write_text(&fields, "data_score.csv", &score_field_csv(&data))?;
        }
    }

    let mut table = String::from("eps,delta,objective,reconstruction_mse,approximation_mse,inversion_failures\n");
    for delta in ERROR_DELTAS {
        let problem_spec = ProblemSpec {
            operator: "eps".into(),
            eps: 0.125,
            delta,
        };
        let problem = problem_spec.build()?;
        for objective in OBJECTIVES {
            let mut cfg = variant(base, &problem_spec, objective);
            cfg.loss.reg_weight = None;
            let (model, _) = train(&cfg, None)?;
            let (_, test) = datasets(&cfg)?;
            let r = evaluate(&model, &test, &problem, objective, cfg.reg_weight());
            let _ = writeln!(
                table,
                "0.125,{delta},{objective},{:.16e},{:.16e},{}",
                r.reconstruction_mse, r.approximation_mse, r.inversion_failures
            );
            println!("eps=1/8 delta={delta} {objective}: reconstruction {:.4e} approximation {:.4e}", r.reconstruction_mse, r.approximation_mse);
        }
    }
    write_text(out, "errors.csv", &table)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn variant(base: &TrainConfig, problem: &ProblemSpec, objective: Objective) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.problem = problem.clone();
    cfg.loss.objective = objective;
    cfg
}
