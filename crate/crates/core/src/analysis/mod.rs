//! Numerical checks of the theory behind the probability paths: flow maps,
//! the continuity equation, SDE moment matching and vector-field variance.

mod flow;
mod sde;
mod suite;
mod variance;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use flow::{
    continuity_residual, default_continuity_grid, flow_map_check, ContinuityGrid,
    ContinuityReport, FlowMapReport,
};
pub use sde::{
    alt_sde_check, extrapolate_to_one, m_variance, path_variance, sde_moment_check, AltCheckpoint,
    AltSdeReport, SdeCheckpoint, SdeConfig,
    SdeReport,
};
pub use suite::{
    continuity_outcomes, continuity_schedules, flow_map_outcomes, run_suite, sde_outcomes,
    variance_outcomes, SuiteConfig, SCHEDULE_KINDS,
};
pub use variance::{lemma1_check, vf_variance_compare, Ar1Spec, LemmaReport, VarianceReport, VarianceRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Inconclusive => "INCONCLUSIVE",
        })
    }
}

/// One line of a verification summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
    /// Informational checks never fail a verification run.
    pub gating: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, status: CheckStatus, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status,
            detail: detail.into(),
            gating: true,
        }
    }

    pub fn informational(mut self) -> Self {
        self.gating = false;
        self
    }

    pub fn from_bool(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
        Self::new(name, status, detail)
    }

    pub fn is_failure(&self) -> bool {
        self.gating && self.status == CheckStatus::Fail
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.gating { "" } else { " (info)" };
        write!(f, "{:<12} {}{}: {}", self.status, self.name, tag, self.detail)
    }
}

/// Sample mean and its standard error.
pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Population variance and the asymptotic standard error of that estimate.
pub(crate) fn var_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    mean_se(&sq)
}

/// `Var(x) - Var(y)` on paired samples with its asymptotic standard error.
pub(crate) fn var_diff_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let w: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx).powi(2) - (y - my).powi(2))
        .collect();
    mean_se(&w)
}
