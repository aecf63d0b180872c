use thiserror::Error;

/// Errors raised by the lab's kernels and solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid filtered space: {}", .0.join("; "))]
    InvalidSpace(Vec<String>),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid stopping time: {0}")]
    InvalidStoppingTime(String),

    #[error("random variable is not measurable with respect to the conditioning sigma-algebra (atom {atom})")]
    NotMeasurable { atom: usize },

    #[error("empty family")]
    EmptyFamily,

    #[error("non-finite value in input ({0})")]
    NonFinite(String),

    #[error("market: increment dM at t={t} has conditional mean {mean:e} on node {node} (not a martingale)")]
    NonMartingaleIncrement { t: usize, node: usize, mean: f64 },

    #[error("market: {what} at t={t} is not constant on cell {cell} of partition {partition}")]
    NotAdapted {
        what: &'static str,
        t: usize,
        cell: usize,
        partition: usize,
    },

    #[error("market: price S_{t} is nonpositive in scenario {scenario}")]
    NonPositivePrice { t: usize, scenario: usize },

    #[error("market: density nonpositive at node (t={t}, cell={node})")]
    DensityNonPositive { t: usize, node: usize },

    #[error("market: arbitrage at node (t={t}, cell={node}): zero conditional variance with drift {mean:e}")]
    Arbitrage { t: usize, node: usize, mean: f64 },

    #[error("NFLVR check failed")]
    NflvrFailed,

    #[error("primal unbounded on atom {atom}")]
    PrimalUnbounded { atom: usize },

    #[error("dual unbounded below on atom {atom}")]
    DualUnbounded { atom: usize },

    #[error("solver failed on atom {atom}: {reason}")]
    SolverFailed { atom: usize, reason: String },

    #[error("derivative inconsistency on atom {atom}: formula {formula:e}, finite difference {finite_difference:e}")]
    DerivativeInconsistency {
        atom: usize,
        formula: f64,
        finite_difference: f64,
    },

    #[error("invalid utility: {0}")]
    InvalidUtility(String),

    #[error("utility is inadmissible: {0}")]
    InadmissibleUtility(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("grid too large: {0}")]
    GridTooLarge(String),

    #[error("strategy dimension {dim} exceeds the brute-force limit {limit}")]
    DimensionTooLarge { dim: usize, limit: usize },

    #[error("net construction did not terminate within {0} iterations")]
    NetDidNotTerminate(usize),

    #[error("set touches zero on atom {atom}")]
    SetTouchesZero { atom: usize },

    #[error("stability experiment failed at n={n}: {source}")]
    SequenceStep { n: usize, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;
