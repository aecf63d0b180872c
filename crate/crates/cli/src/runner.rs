//! Executes the configured checks and assembles the reports.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use duality_core::analysis::{ftau_convex_net, net_cover_certificate, partition_subconvex_net, NetKind};
use duality_core::duality::Duality;
use duality_core::minimax_bridge::{reconcile_minimax, MONOTONE_TOL};
use duality_core::stability::{
    appropriate_convergence_check, run_stability_experiment, uniform_convergence_on_set, v_compactness_check,
    ExperimentInputs, MarketSequence, GROWTH_RATIO_LIMIT, STABILITY_COLUMNS,
};
use duality_core::Error;

use crate::config::{self, Check, Prepared, Tolerances, CONFIG_VERSION};
use crate::report;

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub tol_scale: Option<f64>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum RunError {
    /// Exit code 2.
    Config(Vec<String>),
    /// Exit code 3.
    Solver { module: &'static str, source: Error },
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 2,
            RunError::Solver { .. } => 3,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(errs) => write!(f, "invalid config:\n  {}", errs.join("\n  ")),
            RunError::Solver { module, source } => write!(f, "{module}: {source}"),
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

fn solver(module: &'static str) -> impl Fn(Error) -> RunError {
    move |source| RunError::Solver { module, source }
}

/// One judged quantity; every row carries the tolerance it was judged against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Row {
    fn at_most(name: &str, value: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tol,
            pass: value <= tol,
        }
    }

    fn at_least(name: &str, value: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tol,
            pass: value >= tol,
        }
    }

    fn flag(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            tol: 1.0,
            pass: ok,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: Check,
    pub pass: bool,
    pub rows: Vec<Row>,
    pub details: Value,
}

impl CheckReport {
    fn new(check: Check, rows: Vec<Row>, details: Value) -> Self {
        Self {
            check,
            pass: rows.iter().all(|r| r.pass),
            rows,
            details,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub version: &'static str,
    pub seed: u64,
    pub tol_scale: f64,
    pub tolerances: Tolerances,
    pub utility: String,
    pub scenarios: Vec<String>,
    pub horizon: usize,
    pub tau: Vec<usize>,
    pub checks: Vec<CheckReport>,
    pub pass: bool,
}

/// Output of a run: the report plus the stability CSV rows.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub csv_rows: Vec<Vec<f64>>,
}

pub const CSV_HEADER: [&str; 9] = ["n", "dZ", "dXT", "dXtau", "du", "dv", "dvprime", "ducp", "tol"];

pub fn load(path: &Path) -> Result<Prepared, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(vec![format!("config: cannot read {}: {e}", path.display())]))?;
    let cfg = config::parse(&text).map_err(RunError::Config)?;
    config::prepare(cfg).map_err(RunError::Config)
}

/// Dry run: parse and check invariants, including the sequence markets.
pub fn validate(path: &Path) -> Result<(), Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("config: cannot read {}: {e}", path.display())])?;
    let p = config::prepare(config::parse(&text)?)?;
    if let (Some(s), Some(delta)) = (&p.config.sequence, &p.delta) {
        MarketSequence::new(p.market.clone(), delta.clone(), s.decay.clone(), s.n_max)
            .map_err(|e| vec![format!("sequence: {e}")])?;
    }
    Ok(())
}

pub fn execute(p: &Prepared, opts: &RunOptions) -> Result<Outcome, RunError> {
    let scale = opts.tol_scale.unwrap_or(1.0);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RunError::Config(vec![format!("--tol-scale: {scale} is not positive")]));
    }
    let tol = Tolerances::resolve(&p.config.tolerances, scale);
    let seed = opts.seed.unwrap_or(p.config.seed);
    if !p.market.check_nflvr() {
        return Err(RunError::Solver {
            module: "market",
            source: Error::NflvrFailed,
        });
    }
    let mut checks = Vec::new();
    let mut csv_rows = Vec::new();
    for &c in &p.config.checks {
        let r = match c {
            Check::Duality => duality_check(p, &tol)?,
            Check::Stability => {
                let (r, rows) = stability_check(p, &tol)?;
                csv_rows = rows;
                r
            }
            Check::Nets => nets_check(p, seed)?,
            Check::Minimax => minimax_check(p)?,
        };
        checks.push(r);
    }
    let report = Report {
        version: CONFIG_VERSION,
        seed,
        tol_scale: scale,
        tolerances: tol,
        utility: p.utility.name(),
        scenarios: p.market.space().scenarios().to_vec(),
        horizon: p.market.horizon(),
        tau: p.tau.values().to_vec(),
        pass: checks.iter().all(|c| c.pass),
        checks,
    };
    Ok(Outcome { report, csv_rows })
}

fn duality_check(p: &Prepared, tol: &Tolerances) -> Result<CheckReport, RunError> {
    let d = Duality::new(&p.market, &p.utility);
    let err = solver("conditional_duality");
    let sol = d.solve(&p.tau, &p.xi, &p.eta).map_err(&err)?;
    let rel = d.dual_relation_check(&p.tau, &p.xi).map_err(&err)?;
    let der = d.dual_derivative(&p.tau, &p.eta).map_err(&err)?;
    let c32 = d.conjugacy_check(&p.tau, &p.eta, 32).map_err(&err)?;
    let c128 = d.conjugacy_check(&p.tau, &p.eta, 128).map_err(&err)?;
    let vp = d.value_process(p.config.x0).map_err(&err)?;
    let rows = vec![
        Row::at_most("kkt_residual", sol.kkt_residual, tol.kkt),
        Row::at_most("dual_relation", rel.residual, tol.dual_relation),
        Row::at_most("derivative_rel_gap", der.max_rel_gap, tol.derivative),
        Row::at_most("conjugacy_32", c32.max_residual, tol.conjugacy_32),
        Row::at_most("conjugacy_128", c128.max_residual, tol.conjugacy_128),
        Row::at_most("value_process_martingale", vp.martingale_residual, tol.martingale),
    ];
    let details = json!({
        "u": sol.atom_values_u,
        "v": sol.atom_values_v,
        "u_prime": sol.u_prime,
        "v_prime": sol.v_prime,
        "x_hat": sol.x_hat,
        "y_hat": sol.y_hat,
        "derivative": der,
        "conjugacy_32": c32,
        "conjugacy_128": c128,
        "value_process": vp,
    });
    Ok(CheckReport::new(Check::Duality, rows, details))
}

fn stability_check(p: &Prepared, tol: &Tolerances) -> Result<(CheckReport, Vec<Vec<f64>>), RunError> {
    let spec = p.config.sequence.as_ref().expect("validated");
    let delta = p.delta.clone().expect("validated");
    let err = solver("stability_lab");
    let seq = MarketSequence::new(p.market.clone(), delta, spec.decay.clone(), spec.n_max).map_err(&err)?;
    let compact = v_compactness_check(&seq, &p.utility).map_err(&err)?;
    let conv = appropriate_convergence_check(&seq).map_err(&err)?;
    let inputs = ExperimentInputs {
        tau: p.tau.clone(),
        xi: p.xi.clone(),
        eta: p.eta.clone(),
        x0: p.config.x0,
        joint_xi: spec.joint_xi.clone(),
    };
    let exp = run_stability_experiment(&seq, &p.utility, &inputs).map_err(&err)?;
    let mut rows = vec![
        Row::at_most("v_compactness_growth_ratio", compact.growth_ratio, GROWTH_RATIO_LIMIT),
        Row::at_most("appropriate_convergence", conv.final_distance, tol.stability),
        Row::flag("appropriate_convergence_monotone", conv.monotone),
    ];
    for c in &exp.columns {
        rows.push(Row::at_most(&c.name, c.final_value, tol.stability));
        rows.push(Row::flag(&format!("{}_monotone", c.name), c.monotone));
    }
    let uniform = match &spec.uniform {
        Some(u) => {
            let k = p.order_interval(u.lower, u.upper).map_err(&err)?;
            let r = uniform_convergence_on_set(&seq, &p.utility, &p.tau, &k, u.r).map_err(&err)?;
            let last = |v: &[f64]| v[v.len() - 1];
            rows.push(Row::at_most("uniform_value_gap", last(&r.value_gap), tol.uniform));
            rows.push(Row::at_most("uniform_derivative_gap", last(&r.derivative_gap), tol.uniform));
            rows.push(Row::flag("uniform_lipschitz", r.alpha_certifies_all_pairs));
            Some(r)
        }
        None => None,
    };
    let csv: Vec<Vec<f64>> = exp
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.n as f64];
            v.extend(r.distances());
            v.push(tol.stability);
            v
        })
        .collect();
    debug_assert_eq!(STABILITY_COLUMNS.len() + 2, CSV_HEADER.len());
    let details = json!({
        "v_compactness": compact,
        "appropriate_convergence": conv,
        "experiment": exp,
        "uniform": uniform,
    });
    Ok((CheckReport::new(Check::Stability, rows, details), csv))
}

fn nets_check(p: &Prepared, seed: u64) -> Result<CheckReport, RunError> {
    let spec = p.config.nets.as_ref().expect("validated");
    let err = solver("analysis_toolkit");
    let space = p.market.space();
    let k = p.order_interval(spec.lower, spec.upper).map_err(&err)?;
    let mut rows = Vec::new();
    let mut details = serde_json::Map::new();
    let convex = ftau_convex_net(space, &k, spec.r).map_err(&err)?;
    let cert = net_cover_certificate(space, &k, &convex, NetKind::Convex, spec.r, spec.samples, seed).map_err(&err)?;
    rows.push(Row::at_most("convex_net_violations", cert.violations as f64, 0.0));
    details.insert("convex".into(), json!({"net": convex, "certificate": cert}));
    if k.is_strictly_positive() {
        let sub = partition_subconvex_net(space, &k, spec.r).map_err(&err)?;
        let cert = net_cover_certificate(space, &k, &sub, NetKind::PartitionSubconvex, spec.r, spec.samples, seed)
            .map_err(&err)?;
        rows.push(Row::at_most("partition_subconvex_net_violations", cert.violations as f64, 0.0));
        details.insert("partition_subconvex".into(), json!({"net": sub, "certificate": cert}));
    }
    Ok(CheckReport::new(Check::Nets, rows, Value::Object(details)))
}

fn minimax_check(p: &Prepared) -> Result<CheckReport, RunError> {
    let spec = p.config.minimax.as_ref().expect("validated");
    let r = reconcile_minimax(&p.market, &p.utility, &p.tau, &p.eta, &spec.steps).map_err(solver("minimax_bridge"))?;
    let min_gap = r.steps.iter().map(|b| b.min_gap).fold(f64::INFINITY, f64::min);
    let worst_limit = r
        .steps
        .iter()
        .flat_map(|b| b.limit_error.iter().zip(&b.limit_tolerance).map(|(e, t)| e / t))
        .fold(0.0, f64::max);
    let rows = vec![
        Row::at_least("easy_inequality_min_gap", min_gap, -MONOTONE_TOL),
        Row::flag("truncated_values_monotone", r.monotone_in_n),
        Row::at_most("truncation_limit_error_ratio", worst_limit, 1.0),
    ];
    Ok(CheckReport::new(Check::Minimax, rows, serde_json::to_value(&r).unwrap_or(Value::Null)))
}

/// Runs on a pool of `jobs` threads and writes `report.json` and `report.csv`.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<(Outcome, PathBuf), RunError> {
    let p = load(config_path)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = opts.jobs {
            if j == 0 {
                return Err(RunError::Config(vec!["--jobs: must be at least 1".into()]));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| RunError::Io(format!("thread pool: {e}")))?
    };
    let outcome = pool.install(|| execute(&p, opts))?;
    let dir = opts
        .out
        .clone()
        .or_else(|| p.config.output.as_ref().and_then(|o| o.dir.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    write_reports(&outcome, &dir)?;
    Ok((outcome, dir))
}

pub fn write_reports(o: &Outcome, dir: &Path) -> Result<(), RunError> {
    let io = |e: std::io::Error| RunError::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = report::to_json(&o.report).map_err(|e| RunError::Io(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json).map_err(io)?;
    std::fs::write(dir.join("report.csv"), report::to_csv(&CSV_HEADER, &o.csv_rows)).map_err(io)?;
    Ok(())
}
