//! Named studies: each one turns a resolved config into deterministic CSV
//! tables plus a list of pass/fail checks. Tables are plain text with LF
//! line endings, a fixed column order, and shortest round-trip decimals, so
//! byte-for-byte replay is meaningful.

use std::fmt::Write as _;

use mfc_core::control::{
    optimize_policy, value_gap_study, ControlError, Policy,
};
use mfc_core::measures::check_marginal_constraint;
use mfc_core::particle::simulate_n_agent;
use mfc_core::problem::ProblemSpec;
use mfc_core::verify::{
    check_holder, check_moment_bound, fp_residual, mollifier_convergence_study,
    residual_scaling_study, shift_with_sigma0, TestFunctionDictionary, VerifyError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, StudyKind};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Sim(#[from] mfc_core::particle::SimError),
    #[error(transparent)]
    Measure(#[from] mfc_core::error::MeasureError),
    #[error("study produced no data: {0}")]
    Empty(String),
}

/// One acceptance-style check evaluated by a study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub observed: f64,
    pub threshold: String,
}

impl CheckRecord {
    fn new(name: impl Into<String>, pass: bool, observed: f64, threshold: impl Into<String>) -> Self {
        CheckRecord {
            name: name.into(),
            pass,
            observed,
            threshold: threshold.into(),
        }
    }
}

/// In-memory result of a study run: named tables plus checks.
#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub tables: Vec<(String, String)>,
    pub checks: Vec<CheckRecord>,
}

impl StudyOutput {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = x.ln();
        let ly = y.max(1e-300).ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Runs the study named by the config and returns its tables and checks.
pub fn run_study(config: &ExperimentConfig) -> Result<StudyOutput, StudyError> {
    let spec = config.resolve_problem()?;
    match config.study {
        StudyKind::Chaos => chaos_study(config, &spec),
        StudyKind::Optimize => optimize_study(config, &spec),
        StudyKind::Verify => verify_study(config, &spec),
        StudyKind::Mollify => mollify_study(config, &spec),
        StudyKind::ResidualScaling => residual_scaling(config, &spec),
    }
}

fn chaos_study(config: &ExperimentConfig, spec: &ProblemSpec) -> Result<StudyOutput, StudyError> {
    let section = config.chaos.as_ref().expect("validated");
    let init = config.init.to_initial_law();
    let study = value_gap_study(
        spec,
        &section.family.to_family(),
        &init,
        &section.n_list,
        section.budget,
        &config.sim_config(),
        section.method.to_method(),
    )?;

    let mut csv = String::from("N,value,se,gap\n");
    for row in &study.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.particles, row.value, row.standard_error, row.gap
        );
    }
    let mut reference = String::from("N,value,se\n");
    let _ = writeln!(
        reference,
        "{},{},{}",
        study.reference_particles, study.reference_value, study.reference_se
    );

    let mut checks = Vec::new();
    if let Some(target) = section.target_value {
        for row in &study.rows {
            let dev = (row.value - target).abs();
            let bound = section.se_multiplier * row.standard_error;
            checks.push(CheckRecord::new(
                format!("value_at_target_N{}", row.particles),
                dev <= bound,
                dev,
                format!("<= {} ({} se)", bound, section.se_multiplier),
            ));
        }
        let dev = (study.reference_value - target).abs();
        let bound = section.se_multiplier * study.reference_se;
        checks.push(CheckRecord::new(
            "value_at_target_reference",
            dev <= bound,
            dev,
            format!("<= {bound}"),
        ));
    } else {
        let first = &study.rows[0];
        let last = study.rows.last().unwrap();
        let slack = 2.0 * (first.standard_error + last.standard_error);
        checks.push(CheckRecord::new(
            "gap_trend",
            first.gap > last.gap - slack,
            first.gap - last.gap,
            format!("gap(N_min) > gap(N_max) - {slack}"),
        ));
        let points: Vec<(f64, f64)> = study
            .rows
            .iter()
            .map(|r| (r.particles as f64, r.gap.max(1e-12)))
            .collect();
        let slope = loglog_slope(&points);
        checks.push(CheckRecord::new(
            "gap_slope",
            slope <= section.max_gap_slope,
            slope,
            format!("<= {}", section.max_gap_slope),
        ));
    }

    Ok(StudyOutput {
        tables: vec![
            ("chaos.csv".into(), csv),
            ("chaos_reference.csv".into(), reference),
        ],
        checks,
    })
}

fn optimize_study(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
) -> Result<StudyOutput, StudyError> {
    let section = config.optimize.as_ref().expect("validated");
    let init = config.init.to_initial_law();
    let result = optimize_policy(
        spec,
        &section.family.to_family(),
        &init,
        section.budget,
        &config.sim_config(),
        section.method.to_method(),
    )?;

    let param_len = result.best_params.len();
    let mut csv = String::from("generation,best,mean");
    for d in 0..param_len {
        let _ = write!(csv, ",param{d}");
    }
    csv.push('\n');
    for rec in &result.history {
        let _ = write!(csv, "{},{},{}", rec.generation, rec.best_value, rec.mean_value);
        for v in &rec.best_params {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let mut best = String::from("value,se");
    for d in 0..param_len {
        let _ = write!(best, ",param{d}");
    }
    best.push('\n');
    let _ = write!(best, "{},{}", result.value, result.standard_error);
    for v in &result.best_params {
        let _ = write!(best, ",{v}");
    }
    best.push('\n');

    let mut checks = Vec::new();
    if let (Some(target), Some(tol)) = (section.target_value, section.value_tolerance) {
        let dev = (result.value - target).abs();
        checks.push(CheckRecord::new(
            "value_near_target",
            dev <= tol,
            dev,
            format!("<= {tol}"),
        ));
    }
    if let (Some(targets), Some(tol)) = (&section.target_params, section.params_tolerance) {
        let dev = result
            .best_params
            .iter()
            .zip(targets)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        checks.push(CheckRecord::new(
            "params_near_target",
            dev <= tol,
            dev,
            format!("<= {tol}"),
        ));
    }

    Ok(StudyOutput {
        tables: vec![("history.csv".into(), csv), ("best.csv".into(), best)],
        checks,
    })
}

fn verify_study(config: &ExperimentConfig, spec: &ProblemSpec) -> Result<StudyOutput, StudyError> {
    let section = config.verify.as_ref().expect("validated");
    let policy: Policy = section.policy.to_policy();
    let init = config.init.to_initial_law();
    let cfg = config.sim_config();
    let policies = vec![policy; cfg.particles];
    let bundle = simulate_n_agent(spec, &policies, &init, &cfg)?;
    let rep = &bundle.replications[0];

    let dict = TestFunctionDictionary::default_for_dim(spec.n);
    let residuals = fp_residual(spec, &rep.state_path, &rep.control_path, &rep.noise, &dict)?;
    let moment = check_moment_bound(
        &rep.state_path,
        spec.p_prime,
        rep.state_path.node(0).p_moment(spec.p_prime),
        section.moment_ceiling,
    );
    let (theta, _) = shift_with_sigma0(spec, &rep.state_path, &rep.control_path, &rep.noise)?;
    let holder = check_holder(&theta, spec.p)?;
    let defect = check_marginal_constraint(&rep.control_path, &rep.state_path, spec.p, 1e-9)?;

    let mut diag = String::from("metric,value\n");
    let _ = writeln!(diag, "max_residual,{}", residuals.max_abs);
    let _ = writeln!(diag, "moment_sup,{}", moment.sup_moment);
    let _ = writeln!(diag, "moment_ratio,{}", moment.ratio);
    let _ = writeln!(diag, "holder_ratio,{}", holder.max_ratio);
    let _ = writeln!(diag, "marginal_defect,{}", defect.max_defect);

    let mut checks = Vec::new();
    if let Some(ceiling) = section.residual_ceiling {
        checks.push(CheckRecord::new(
            "residual_ceiling",
            residuals.max_abs <= ceiling,
            residuals.max_abs,
            format!("<= {ceiling}"),
        ));
    }
    if let Some(ceiling) = section.moment_ceiling {
        checks.push(CheckRecord::new(
            "moment_ratio_ceiling",
            moment.ratio <= ceiling,
            moment.ratio,
            format!("<= {ceiling}"),
        ));
    }
    if let Some((lo, hi)) = section.holder_window {
        checks.push(CheckRecord::new(
            "holder_window",
            holder.max_ratio >= lo && holder.max_ratio <= hi,
            holder.max_ratio,
            format!("in [{lo}, {hi}]"),
        ));
    }
    if let Some(ceiling) = section.defect_ceiling {
        checks.push(CheckRecord::new(
            "marginal_defect_ceiling",
            defect.max_defect <= ceiling,
            defect.max_defect,
            format!("<= {ceiling}"),
        ));
    }

    Ok(StudyOutput {
        tables: vec![
            ("residuals.csv".into(), residuals.to_csv()),
            ("diagnostics.csv".into(), diag),
        ],
        checks,
    })
}

fn mollify_study(config: &ExperimentConfig, spec: &ProblemSpec) -> Result<StudyOutput, StudyError> {
    let section = config.mollify.as_ref().expect("validated");
    let init = config.init.to_initial_law();
    let cfg = config.sim_config();

    // Reference: plain particle run at a multiple of the cloud size.
    let mut ref_cfg = cfg.clone();
    ref_cfg.particles = cfg.particles * section.reference_multiplier;
    ref_cfg.replications = 1;
    let policies = vec![section.policy.to_policy(); ref_cfg.particles];
    let reference = simulate_n_agent(spec, &policies, &init, &ref_cfg)?;
    let rep = &reference.replications[0];

    let study = mollifier_convergence_study(
        spec,
        &section.eps_list,
        &rep.control_path,
        &rep.state_path,
        &rep.noise,
        &init,
        &cfg,
        section.study_reps,
    )?;

    let mut checks = Vec::new();
    for pair in study.rows.windows(2) {
        let slack = 2.0 * (pair[0].standard_error + pair[1].standard_error);
        checks.push(CheckRecord::new(
            format!("monotone_eps_{}_{}", pair[0].eps, pair[1].eps),
            pair[1].mean_distance <= pair[0].mean_distance + slack,
            pair[1].mean_distance - pair[0].mean_distance,
            format!("<= {slack}"),
        ));
    }
    if section.require_halving {
        let first = &study.rows[0];
        let last = study.rows.last().unwrap();
        checks.push(CheckRecord::new(
            "halving",
            last.mean_distance <= 0.5 * first.mean_distance,
            last.mean_distance / first.mean_distance,
            "<= 0.5".to_string(),
        ));
    }

    Ok(StudyOutput {
        tables: vec![("mollify.csv".into(), study.to_csv())],
        checks,
    })
}

fn residual_scaling(
    config: &ExperimentConfig,
    spec: &ProblemSpec,
) -> Result<StudyOutput, StudyError> {
    let section = config.residual_scaling.as_ref().expect("validated");
    let init = config.init.to_initial_law();
    let dict = TestFunctionDictionary::default_for_dim(spec.n);
    let study = residual_scaling_study(
        spec,
        &section.policy.to_policy(),
        &init,
        &section.n_list,
        section.reps,
        &dict,
        &config.sim_config(),
    )?;

    let mut csv = study.to_csv();
    let _ = write!(csv, "");
    let mut slope_table = String::from("slope\n");
    let _ = writeln!(slope_table, "{}", study.slope);

    let mut checks = Vec::new();
    let (lo, hi) = section.slope_window;
    checks.push(CheckRecord::new(
        "slope_window",
        study.slope >= lo && study.slope <= hi,
        study.slope,
        format!("in [{lo}, {hi}]"),
    ));
    if let Some((rlo, rhi)) = section.ratio_window {
        for pair in study.rows.windows(2) {
            if pair[1].particles == 4 * pair[0].particles {
                let ratio = pair[0].mean_sq_residual / pair[1].mean_sq_residual.max(1e-300);
                checks.push(CheckRecord::new(
                    format!("ratio_N{}_to_N{}", pair[0].particles, pair[1].particles),
                    ratio >= rlo && ratio <= rhi,
                    ratio,
                    format!("in [{rlo}, {rhi}]"),
                ));
            }
        }
    }

    Ok(StudyOutput {
        tables: vec![
            ("scaling.csv".into(), csv),
            ("scaling_slope.csv".into(), slope_table),
        ],
        checks,
    })
}
