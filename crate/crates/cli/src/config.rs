//! Experiment configuration (`duality-lab/1` JSON) and its validation.

use serde::{Deserialize, Serialize};

use duality_core::analysis::ConvexCompactSet;
use duality_core::filtered_space::{FilteredSpace, RandomVariable, StoppingTime};
use duality_core::fixtures;
use duality_core::market::MarketModel;
use duality_core::stability::Decay;
use duality_core::utility::{UtilityPair, UtilitySpec};

pub const CONFIG_VERSION: &str = "duality-lab/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: String,
    #[serde(default)]
    pub fixture: Option<Fixture>,
    #[serde(default)]
    pub space: Option<SpaceSpec>,
    #[serde(default)]
    pub market: Option<MarketSpec>,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub tau: TauSpec,
    #[serde(default)]
    pub xi: Input,
    #[serde(default)]
    pub eta: Input,
    /// Initial capital of the time-0 problem (value process, intermediate wealth).
    #[serde(default = "one")]
    pub x0: f64,
    #[serde(default)]
    pub sequence: Option<SequenceSpec>,
    pub checks: Vec<Check>,
    #[serde(default)]
    pub tolerances: ToleranceOverrides,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nets: Option<NetsSpec>,
    #[serde(default)]
    pub minimax: Option<MinimaxSpec>,
    #[serde(default)]
    pub output: Option<OutputSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixture {
    FixA,
    FixB,
    FixBTwoPeriod,
    FixC,
    TrinomialTwoPeriod,
    Arbitrage,
}

impl Fixture {
    pub fn market(self) -> MarketModel {
        match self {
            Fixture::FixA => fixtures::fix_a(),
            Fixture::FixB => fixtures::fix_b(),
            Fixture::FixBTwoPeriod => fixtures::fix_b_two_period(),
            Fixture::FixC => fixtures::fix_c(),
            Fixture::TrinomialTwoPeriod => fixtures::trinomial_two_period(),
            Fixture::Arbitrage => fixtures::arbitrage(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    #[serde(default)]
    pub scenarios: Option<Vec<String>>,
    pub prob: Vec<f64>,
    pub partitions: Vec<Vec<Vec<usize>>>,
}

/// `dm[t - 1][c]` on cell `c` of `partitions[t]`; `lam[t - 1][c]` on cell `c` of `partitions[t - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub dm: Vec<Vec<f64>>,
    pub lam: Vec<Vec<f64>>,
}

/// A stopping time as a scenario vector or the deterministic form `"t=k"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSpec {
    Vector(Vec<usize>),
    Time(String),
}

impl Default for TauSpec {
    fn default() -> Self {
        TauSpec::Time("t=0".to_string())
    }
}

/// A scalar or one value per atom of `F_tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Input {
    Scalar(f64),
    PerAtom(Vec<f64>),
}

impl Default for Input {
    fn default() -> Self {
        Input::Scalar(1.0)
    }
}

/// Scalar direction, or `[t - 1][c]` on cell `c` of `partitions[t - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSpec {
    Scalar(f64),
    PerCell(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub delta: DeltaSpec,
    pub decay: Decay,
    pub n_max: usize,
    #[serde(default)]
    pub joint_xi: Option<Decay>,
    #[serde(default)]
    pub uniform: Option<UniformSpec>,
}

/// Order interval `[lower, upper]` on the atoms of `F_tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSpec {
    pub lower: f64,
    pub upper: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetsSpec {
    pub lower: f64,
    pub upper: f64,
    pub r: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimaxSpec {
    pub steps: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Duality,
    Stability,
    Nets,
    Minimax,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceOverrides {
    pub kkt: Option<f64>,
    pub dual_relation: Option<f64>,
    pub derivative: Option<f64>,
    pub conjugacy_32: Option<f64>,
    pub conjugacy_128: Option<f64>,
    pub martingale: Option<f64>,
    pub stability: Option<f64>,
    pub uniform: Option<f64>,
}

/// Tolerances every report row is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub kkt: f64,
    pub dual_relation: f64,
    pub derivative: f64,
    pub conjugacy_32: f64,
    pub conjugacy_128: f64,
    pub martingale: f64,
    pub stability: f64,
    pub uniform: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            kkt: 1e-8,
            dual_relation: 1e-6,
            derivative: 1e-4,
            conjugacy_32: 2e-3,
            conjugacy_128: 2e-4,
            martingale: 1e-7,
            stability: 1e-3,
            uniform: 2e-3,
        }
    }
}

impl Tolerances {
    pub fn resolve(o: &ToleranceOverrides, scale: f64) -> Self {
        let d = Self::default();
        let pick = |v: Option<f64>, def: f64| v.unwrap_or(def) * scale;
        Self {
            kkt: pick(o.kkt, d.kkt),
            dual_relation: pick(o.dual_relation, d.dual_relation),
            derivative: pick(o.derivative, d.derivative),
            conjugacy_32: pick(o.conjugacy_32, d.conjugacy_32),
            conjugacy_128: pick(o.conjugacy_128, d.conjugacy_128),
            martingale: pick(o.martingale, d.martingale),
            stability: pick(o.stability, d.stability),
            uniform: pick(o.uniform, d.uniform),
        }
    }
}

/// A configuration turned into module inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub market: MarketModel,
    pub utility: UtilityPair,
    pub tau: StoppingTime,
    pub xi: RandomVariable,
    pub eta: RandomVariable,
    pub delta: Option<Vec<RandomVariable>>,
}

pub fn parse(text: &str) -> Result<ExperimentConfig, Vec<String>> {
    serde_json::from_str(text).map_err(|e| vec![format!("config: {e}")])
}

fn build_market(cfg: &ExperimentConfig, errs: &mut Vec<String>) -> Option<MarketModel> {
    match (&cfg.fixture, &cfg.space, &cfg.market) {
        (Some(f), None, None) => Some(f.market()),
        (Some(_), _, _) => {
            errs.push("fixture: cannot be combined with space or market".into());
            None
        }
        (None, Some(s), Some(m)) => {
            let names = s
                .scenarios
                .clone()
                .unwrap_or_else(|| (0..s.prob.len()).map(|i| format!("w{i}")).collect());
            let problems = FilteredSpace::violations(&names, &s.prob, &s.partitions);
            if !problems.is_empty() {
                errs.extend(problems.into_iter().map(|p| format!("space.{p}")));
                return None;
            }
            let space = FilteredSpace::new(names, s.prob.clone(), s.partitions.clone()).ok()?;
            match MarketModel::from_cells(space, &m.dm, &m.lam) {
                Ok(m) => Some(m),
                Err(e) => {
                    errs.push(format!("market: {e}"));
                    None
                }
            }
        }
        (None, None, _) => {
            errs.push("space: either fixture or space + market is required".into());
            None
        }
        (None, Some(_), None) => {
            errs.push("market: required when space is given".into());
            None
        }
    }
}

fn build_tau(spec: &TauSpec, space: &FilteredSpace, errs: &mut Vec<String>) -> Option<StoppingTime> {
    let r = match spec {
        TauSpec::Vector(v) => space.stopping_time(v.clone()),
        TauSpec::Time(s) => match s.trim().strip_prefix("t=").and_then(|k| k.trim().parse::<usize>().ok()) {
            Some(t) if t <= space.horizon() => Ok(space.deterministic_time(t)),
            _ => {
                errs.push(format!("tau: \"{s}\" is not of the form t=k with k <= {}", space.horizon()));
                return None;
            }
        },
    };
    r.map_err(|e| errs.push(format!("tau: {e}"))).ok()
}

fn build_input(
    name: &str,
    input: &Input,
    space: &FilteredSpace,
    tau: &StoppingTime,
    errs: &mut Vec<String>,
) -> Option<RandomVariable> {
    let g = space.sigma_at(tau);
    let per_atom = match input {
        Input::Scalar(v) => vec![*v; g.n_atoms()],
        Input::PerAtom(v) if v.len() == g.n_atoms() => v.clone(),
        Input::PerAtom(v) => {
            errs.push(format!("{name}: {} values for {} atoms of F_tau", v.len(), g.n_atoms()));
            return None;
        }
    };
    if let Some(a) = per_atom.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        errs.push(format!("{name}: value {} on atom {a} is not strictly positive", per_atom[a]));
        return None;
    }
    Some(g.spread(&per_atom))
}

fn build_delta(spec: &DeltaSpec, m: &MarketModel, errs: &mut Vec<String>) -> Option<Vec<RandomVariable>> {
    let space = m.space();
    let n = space.n_scenarios();
    match spec {
        DeltaSpec::Scalar(d) => Some(vec![RandomVariable::constant(n, *d); m.horizon()]),
        DeltaSpec::PerCell(cells) => {
            if cells.len() != m.horizon() {
                errs.push(format!("sequence.delta: {} periods for horizon {}", cells.len(), m.horizon()));
                return None;
            }
            let mut out = Vec::new();
            for (k, vals) in cells.iter().enumerate() {
                if vals.len() != space.n_cells(k) {
                    errs.push(format!(
                        "sequence.delta[{k}]: {} values for {} cells of partitions[{k}]",
                        vals.len(),
                        space.n_cells(k)
                    ));
                    return None;
                }
                out.push(RandomVariable::new((0..n).map(|w| vals[space.cell_of(k, w)]).collect()));
            }
            Some(out)
        }
    }
}

/// Parses and checks everything that can be checked without solving,
/// collecting every violation.
pub fn prepare(cfg: ExperimentConfig) -> Result<Prepared, Vec<String>> {
    let mut errs = Vec::new();
    if cfg.version != CONFIG_VERSION {
        errs.push(format!("version: expected \"{CONFIG_VERSION}\", got \"{}\"", cfg.version));
    }
    if cfg.checks.is_empty() {
        errs.push("checks: at least one check is required".into());
    }
    let utility = match cfg.utility.build().and_then(|u| u.inada_check().map(|_| u)) {
        Ok(u) => Some(u),
        Err(e) => {
            errs.push(format!("utility: {e}"));
            None
        }
    };
    if !(cfg.x0 > 0.0 && cfg.x0.is_finite()) {
        errs.push(format!("x0: {} is not strictly positive", cfg.x0));
    }
    let market = build_market(&cfg, &mut errs);
    let mut tau = None;
    let mut xi = None;
    let mut eta = None;
    let mut delta = None;
    if let Some(m) = &market {
        tau = build_tau(&cfg.tau, m.space(), &mut errs);
        if let Some(t) = &tau {
            xi = build_input("xi", &cfg.xi, m.space(), t, &mut errs);
            eta = build_input("eta", &cfg.eta, m.space(), t, &mut errs);
        }
        if let Some(s) = &cfg.sequence {
            delta = build_delta(&s.delta, m, &mut errs);
        }
    }
    let needs = |c: Check| cfg.checks.contains(&c);
    match &cfg.sequence {
        None if needs(Check::Stability) => errs.push("sequence: required by the stability check".into()),
        Some(s) => {
            if s.n_max < 1 {
                errs.push("sequence.n_max: must be at least 1".into());
            }
            if let Decay::Table { values } = &s.decay {
                if values.len() < s.n_max {
                    errs.push(format!("sequence.decay: table has {} values for n_max {}", values.len(), s.n_max));
                }
            }
            if let Some(u) = &s.uniform {
                if !(u.lower > 0.0 && u.lower <= u.upper && u.r > 0.0) {
                    errs.push("sequence.uniform: need 0 < lower <= upper and r > 0".into());
                }
            }
        }
        None => {}
    }
    match &cfg.nets {
        None if needs(Check::Nets) => errs.push("nets: required by the nets check".into()),
        Some(n) => {
            if !(n.lower <= n.upper && n.r > 0.0 && n.lower.is_finite() && n.upper.is_finite()) {
                errs.push("nets: need lower <= upper and r > 0".into());
            }
        }
        None => {}
    }
    match &cfg.minimax {
        None if needs(Check::Minimax) => errs.push("minimax: required by the minimax check".into()),
        Some(m) => {
            if m.steps.is_empty() || m.steps.iter().any(|s| !(*s > 0.0)) {
                errs.push("minimax.steps: need at least one positive step".into());
            }
        }
        None => {}
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(Prepared {
        config: cfg,
        market: market.expect("checked"),
        utility: utility.expect("checked"),
        tau: tau.expect("checked"),
        xi: xi.expect("checked"),
        eta: eta.expect("checked"),
        delta,
    })
}

impl Prepared {
    /// Order interval on the atoms of `F_tau`.
    pub fn order_interval(&self, lower: f64, upper: f64) -> duality_core::Result<ConvexCompactSet> {
        ConvexCompactSet::order_interval(self.market.space().sigma_at(&self.tau), lower, upper)
    }
}
