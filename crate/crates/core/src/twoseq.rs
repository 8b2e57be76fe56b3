//! Closed-form exposure-time effect estimators for two-sequence designs
//! with a cluster random intercept only.
//!
//! Cluster 1 crosses over first. Cell means are indexed by the period
//! labels of the base design, so the added control period is period 0 and
//! the added treatment period is period 4.

use serde::{Deserialize, Serialize};

use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::gls::{cell_covariance, gls_estimate, VarianceComponents};
use crate::model::{build_x, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoSeqDesign {
    /// Two clusters, three periods.
    Base,
    /// One extra treated period appended at the end.
    AddTreatment,
    /// One extra control period prepended at the start.
    AddControl,
}

impl TwoSeqDesign {
    /// Period labels in calendar order.
    pub fn periods(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Self::Base => 1..=3,
            Self::AddTreatment => 1..=4,
            Self::AddControl => 0..=3,
        }
    }

    pub fn spec(&self, k: u32) -> DesignSpec {
        let base = DesignSpec::standard(2, 1, k);
        match self {
            Self::Base => base,
            Self::AddTreatment => base.with_extra_end(1),
            Self::AddControl => base.with_extra_start(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSeqCells {
    pub design: TwoSeqDesign,
    /// `y[i]` holds cluster `i + 1`'s cell means in calendar order.
    pub y: [Vec<f64>; 2],
    pub k: u32,
    pub tau2: f64,
    pub sigma2: f64,
}

impl TwoSeqCells {
    pub fn new(design: TwoSeqDesign, y: [Vec<f64>; 2], k: u32, tau2: f64, sigma2: f64) -> Result<Self> {
        let n = design.periods().count();
        if y[0].len() != n || y[1].len() != n {
            return Err(Error::InvalidSpec(format!("{design:?} needs {n} cell means per cluster")));
        }
        if k == 0 || !(tau2 >= 0.0) || !(sigma2 > 0.0) {
            return Err(Error::InvalidSpec("need k >= 1, tau2 >= 0, sigma2 > 0".into()));
        }
        Ok(Self { design, y, k, tau2, sigma2 })
    }

    /// Cell mean of cluster `i` (1 or 2) at period label `j`.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.y[i - 1][j - *self.design.periods().start()]
    }

    pub fn phi(&self) -> f64 {
        phi(self.tau2, self.sigma2, self.k)
    }

    /// Difference between the clusters at period `j`.
    fn diff(&self, j: usize) -> f64 {
        self.at(1, j) - self.at(2, j)
    }
}

/// `tau2 / (tau2 + sigma2 / K)`.
pub fn phi(tau2: f64, sigma2: f64, k: u32) -> f64 {
    tau2 / (tau2 + sigma2 / k as f64)
}

/// Estimators on the first three periods of a base or extra-treatment design.
pub fn base_estimators(cells: &TwoSeqCells) -> Result<(f64, f64)> {
    if cells.design == TwoSeqDesign::AddControl {
        return Err(Error::InvalidSpec("base estimators need the base period labels".into()));
    }
    let phi = cells.phi();
    let d1 = cells.diff(2) - phi * cells.diff(1);
    let d2 = cells.diff(3) + d1 - phi * cells.diff(1);
    Ok((d1, d2))
}

/// Estimators for the extra-control design, pooling both control periods.
pub fn add1c_estimators(cells: &TwoSeqCells) -> Result<(f64, f64)> {
    if cells.design != TwoSeqDesign::AddControl {
        return Err(Error::InvalidSpec("pooled estimators need the extra-control design".into()));
    }
    let phi = cells.phi();
    let w = phi / (1.0 + phi);
    let pooled = cells.diff(0) + cells.diff(1);
    let d1 = cells.diff(2) - w * pooled;
    let d2 = cells.diff(3) + d1 - w * pooled;
    Ok((d1, d2))
}

/// `(delta_1, delta_2)` from a GLS fit of the exposure-time model.
pub fn gls_estimators(cells: &TwoSeqCells) -> Result<(f64, f64)> {
    let layout = cells.design.spec(cells.k).build()?;
    let vc = VarianceComponents::new(cells.tau2, 0.0, cells.sigma2)?;
    let x = build_x(&layout, &ModelSpec::eti())?;
    let y: Vec<f64> = x.cells.iter().map(|c| cells.y[c.cluster - 1][c.period - 1]).collect();
    let fit = gls_estimate(&x, &cell_covariance(&layout, &vc), &y)?;
    let at = |label: &str| fit.estimates[x.column(label).expect("exposure column")];
    Ok((at("exposure_1"), at("exposure_2")))
}

/// GLS estimates on the extra-treatment design agree with the base closed
/// forms to `1e-10`.
pub fn add1t_invariance_check(cells: &TwoSeqCells) -> Result<bool> {
    if cells.design != TwoSeqDesign::AddTreatment {
        return Err(Error::InvalidSpec("invariance check needs the extra-treatment design".into()));
    }
    let (g1, g2) = gls_estimators(cells)?;
    let (b1, b2) = base_estimators(cells)?;
    Ok((g1 - b1).abs() < 1e-10 && (g2 - b2).abs() < 1e-10)
}

/// Variance of the first-exposure estimator on the base or extra-control
/// design, from its coefficients on the cell means.
pub fn delta1_variance(design: TwoSeqDesign, tau2: f64, sigma2: f64, k: u32) -> f64 {
    let phi = phi(tau2, sigma2, k);
    // coefficients on cluster 1's cells; cluster 2's are their negatives
    let coef: Vec<f64> = match design {
        TwoSeqDesign::Base | TwoSeqDesign::AddTreatment => vec![-phi, 1.0],
        TwoSeqDesign::AddControl => {
            let w = phi / (1.0 + phi);
            vec![-w, -w, 1.0]
        }
    };
    let sum_sq: f64 = coef.iter().map(|a| a * a).sum();
    let row_sum: f64 = coef.iter().sum();
    2.0 * (sigma2 / k as f64 * sum_sq + tau2 * row_sum * row_sum)
}
