//! Sample-size search, sample size ratios and effect calibration.

use serde::{Deserialize, Serialize};

use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::estimand::{contrast_for_exposure, Estimand, SplineAverage};
use crate::gls::{
    fixed_effects_covariance, power_from_se, vc_from_icc_cac, BlockCovariance, CorrelationSpec, PowerResult,
    VarianceComponents, DEFAULT_ALPHA,
};
use crate::model::{build_x, ModelSpec};

pub const MAX_INDIVIDUALS: u32 = 1_000_000;
pub const MAX_CLUSTERS: u32 = 1_000_000;

/// A power problem on a balanced design. The operation applied decides
/// which quantity is free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchProblem {
    pub design: DesignSpec,
    pub model: ModelSpec,
    pub estimand: Estimand,
    pub correlation: CorrelationSpec,
    pub effect: f64,
    pub target_power: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SearchResult {
    Solved { n: u32, achieved_power: f64 },
    Infeasible { limiting_power: f64 },
}

impl SearchResult {
    pub fn n(&self) -> Option<u32> {
        match self {
            Self::Solved { n, .. } => Some(*n),
            Self::Infeasible { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Individuals,
    Clusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SsrOutcome {
    Ratio { ratio: f64, it_n: u32, eti_n: u32 },
    Infeasible { limiting_power: f64 },
}

impl SsrOutcome {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            Self::Ratio { ratio, .. } => Some(*ratio),
            Self::Infeasible { .. } => None,
        }
    }
}

/// Standard error of the estimand contrast on `design`.
///
/// Clusters sharing a sequence contribute identical information, so the
/// covariance is computed with one cluster per sequence and scaled.
pub fn contrast_se(design: &DesignSpec, model: &ModelSpec, estimand: &Estimand, vc: &VarianceComponents) -> Result<f64> {
    contrast_se_with(design, model, estimand, vc.tau2, |k| vc.cell_variance(k))
}

fn contrast_se_with(
    design: &DesignSpec,
    model: &ModelSpec,
    estimand: &Estimand,
    tau2: f64,
    cell_var: impl Fn(u32) -> f64,
) -> Result<f64> {
    design.validate()?;
    let mut single = design.clone();
    single.clusters_per_sequence = 1;
    let layout = single.build()?;
    let contrast = contrast_for_exposure(estimand, model, layout.max_exposure, SplineAverage::DiscreteMean)?;
    let x = build_x(&layout, model)?;
    let v = BlockCovariance::from_rows(&x.cells, tau2, |c| cell_var(c.cell_size));
    let cov = fixed_effects_covariance(&x, &v)?;
    let var = contrast.variance(&cov)? / design.clusters_per_sequence as f64;
    if !(var > 0.0) {
        return Err(Error::Numerical(format!("contrast variance is not positive ({var})")));
    }
    Ok(var.sqrt())
}

impl SearchProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.target_power > self.alpha && self.target_power < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "target power must lie in (alpha, 1), got {}",
                self.target_power
            )));
        }
        if !self.effect.is_finite() {
            return Err(Error::InvalidSpec("effect must be finite".into()));
        }
        self.design.validate()
    }

    pub fn variance_components(&self) -> Result<VarianceComponents> {
        vc_from_icc_cac(&self.correlation)
    }

    pub fn standard_error(&self) -> Result<f64> {
        contrast_se(&self.design, &self.model, &self.estimand, &self.variance_components()?)
    }

    /// Analytic power at the problem's current design.
    pub fn power(&self) -> Result<PowerResult> {
        power_from_se(self.effect, self.standard_error()?, self.alpha)
    }

    fn with_individuals(&self, k: u32) -> Self {
        let mut p = self.clone();
        p.design.individuals_per_cell = k;
        p
    }

    /// Power as individuals per cell grow without bound.
    pub fn limiting_power(&self) -> Result<f64> {
        let vc = self.variance_components()?;
        // with gamma2 = 0 the limit covariance is singular; approach it instead
        let floor = if vc.gamma2 > 0.0 {
            vc.gamma2
        } else {
            1e-10 * (vc.sigma2 + vc.tau2 * self.design.n_periods() as f64)
        };
        let se = contrast_se_with(&self.design, &self.model, &self.estimand, vc.tau2, |_| floor)?;
        Ok(power_from_se(self.effect, se, self.alpha)?.power)
    }
}

/// Smallest `n` in `1..=cap` with `pred(n)`, assuming `pred` is monotone.
fn smallest_satisfying(cap: u32, what: &str, mut pred: impl FnMut(u32) -> Result<bool>) -> Result<u32> {
    if pred(1)? {
        return Ok(1);
    }
    let mut lo = 1u32;
    let mut hi = 2u32;
    loop {
        if pred(hi)? {
            break;
        }
        if hi >= cap {
            return Err(Error::SearchBound(format!("{what} would exceed {cap}")));
        }
        lo = hi;
        hi = hi.saturating_mul(2).min(cap);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pred(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest individuals per cell reaching the target power.
pub fn required_individuals(p: &SearchProblem) -> Result<SearchResult> {
    p.validate()?;
    let limit = p.limiting_power()?;
    if limit < p.target_power {
        return Ok(SearchResult::Infeasible { limiting_power: limit });
    }
    let n = smallest_satisfying(MAX_INDIVIDUALS, "individuals per cell", |k| {
        Ok(p.with_individuals(k).power()?.power >= p.target_power)
    })?;
    Ok(SearchResult::Solved { n, achieved_power: p.with_individuals(n).power()?.power })
}

/// Smallest clusters per sequence reaching the target power.
pub fn required_clusters(p: &SearchProblem) -> Result<SearchResult> {
    p.validate()?;
    let vc = p.variance_components()?;
    let mut one = p.design.clone();
    one.clusters_per_sequence = 1;
    let se1 = contrast_se(&one, &p.model, &p.estimand, &vc)?;
    let power = |c: u32| power_from_se(p.effect, se1 / (c as f64).sqrt(), p.alpha).map(|r| r.power);
    let n = smallest_satisfying(MAX_CLUSTERS, "clusters per sequence", |c| Ok(power(c)? >= p.target_power))?;
    Ok(SearchResult::Solved { n, achieved_power: power(n)? })
}

pub fn required(p: &SearchProblem, axis: Axis) -> Result<SearchResult> {
    match axis {
        Axis::Individuals => required_individuals(p),
        Axis::Clusters => required_clusters(p),
    }
}

/// Sample size needed under the ETI-side problem over that of the IT side.
pub fn ssr(p_it: &SearchProblem, p_eti: &SearchProblem, axis: Axis) -> Result<SsrOutcome> {
    let it_n = match required(p_it, axis)? {
        SearchResult::Solved { n, .. } => n,
        SearchResult::Infeasible { limiting_power } => {
            return Err(Error::Numerical(format!(
                "reference model cannot reach the target power (limit {limiting_power})"
            )))
        }
    };
    Ok(match required(p_eti, axis)? {
        SearchResult::Solved { n, .. } => SsrOutcome::Ratio { ratio: n as f64 / it_n as f64, it_n, eti_n: n },
        SearchResult::Infeasible { limiting_power } => SsrOutcome::Infeasible { limiting_power },
    })
}

/// Positive effect size at which the design reaches the target power.
pub fn calibrate_effect(p: &SearchProblem) -> Result<f64> {
    let mut probe = p.clone();
    probe.effect = 0.0;
    probe.validate()?;
    let se = probe.standard_error()?;
    let power = |e: f64| power_from_se(e, se, p.alpha).map(|r| r.power);
    let mut hi = se;
    while power(hi)? < p.target_power {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let pm = power(mid)?;
        if (pm - p.target_power).abs() < 1e-12 {
            return Ok(mid);
        }
        if pm < p.target_power {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
