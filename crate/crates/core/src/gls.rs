//! Covariance of cluster-period means and generalized least squares.
//!
//! Each cluster contributes a compound-symmetric block
//! `V_i = diag(gamma2 + sigma2 / K_ij) + tau2 * 11'`, inverted through the
//! rank-one update identity so no dense inverse of `V` is ever formed.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::DesignLayout;
use crate::error::{Error, Result};
use crate::model::{LabeledMatrix, RowCell};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub tau2: f64,
    pub gamma2: f64,
    pub sigma2: f64,
}

impl VarianceComponents {
    pub fn new(tau2: f64, gamma2: f64, sigma2: f64) -> Result<Self> {
        let vc = Self { tau2, gamma2, sigma2 };
        vc.validate()?;
        Ok(vc)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.tau2, self.gamma2, self.sigma2].iter().all(|v| v.is_finite())
            && self.tau2 >= 0.0
            && self.gamma2 >= 0.0
            && self.sigma2 > 0.0;
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "variance components need tau2 >= 0, gamma2 >= 0, sigma2 > 0, got ({}, {}, {})",
                self.tau2, self.gamma2, self.sigma2
            )));
        }
        Ok(())
    }

    pub fn icc(&self) -> f64 {
        let between = self.tau2 + self.gamma2;
        between / (between + self.sigma2)
    }

    /// Cluster autocorrelation; 1 by convention when both cluster terms vanish.
    pub fn cac(&self) -> f64 {
        let between = self.tau2 + self.gamma2;
        if between == 0.0 {
            1.0
        } else {
            self.tau2 / between
        }
    }

    /// Variance of a cell mean over `k` individuals, excluding `tau2`.
    pub fn cell_variance(&self, k: u32) -> f64 {
        self.gamma2 + self.sigma2 / k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub icc: f64,
    pub cac: f64,
    #[serde(default = "unit")]
    pub sigma2: f64,
}

fn unit() -> f64 {
    1.0
}

impl CorrelationSpec {
    pub fn new(icc: f64, cac: f64) -> Self {
        Self { icc, cac, sigma2: 1.0 }
    }
}

pub fn vc_from_icc_cac(spec: &CorrelationSpec) -> Result<VarianceComponents> {
    if !(spec.icc >= 0.0 && spec.icc < 1.0) {
        return Err(Error::InvalidSpec(format!("icc must lie in [0, 1), got {}", spec.icc)));
    }
    if !(0.0..=1.0).contains(&spec.cac) {
        return Err(Error::InvalidSpec(format!("cac must lie in [0, 1], got {}", spec.cac)));
    }
    if !(spec.sigma2 > 0.0 && spec.sigma2.is_finite()) {
        return Err(Error::InvalidSpec(format!("sigma2 must be positive, got {}", spec.sigma2)));
    }
    let between = spec.sigma2 * spec.icc / (1.0 - spec.icc);
    VarianceComponents::new(spec.cac * between, (1.0 - spec.cac) * between, spec.sigma2)
}

/// One cluster's covariance block: `diag(diag) + tau2 * 11'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsBlock {
    pub cluster: usize,
    pub periods: Vec<usize>,
    pub diag: Vec<f64>,
    pub tau2: f64,
}

impl CsBlock {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |a, b| self.tau2 + if a == b { self.diag[a] } else { 0.0 })
    }

    /// Eigenvalues lie in `[min d, max d + n tau2]`; the block is accepted
    /// when the lower bound clears `1e-12` times the upper bound.
    pub fn check_positive_definite(&self) -> Result<()> {
        let lo = self.diag.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.diag.iter().copied().fold(0.0, f64::max) + self.dim() as f64 * self.tau2;
        if !(self.tau2 >= 0.0) || !(lo > 1e-12 * hi) {
            return Err(Error::Numerical(format!("covariance block of cluster {} is not positive definite", self.cluster)));
        }
        Ok(())
    }

    /// The scalar `c` in `V^-1 = D^-1 - c (D^-1 1)(D^-1 1)'`.
    pub fn rank_one_coefficient(&self) -> f64 {
        let s: f64 = self.diag.iter().map(|d| 1.0 / d).sum();
        self.tau2 / (1.0 + self.tau2 * s)
    }

    pub fn log_det(&self) -> f64 {
        let s: f64 = self.diag.iter().map(|d| 1.0 / d).sum();
        self.diag.iter().map(|d| d.ln()).sum::<f64>() + (1.0 + self.tau2 * s).ln()
    }

    /// `V^-1 v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let c = self.rank_one_coefficient();
        let dot: f64 = v.iter().zip(&self.diag).map(|(x, d)| x / d).sum();
        v.iter().zip(&self.diag).map(|(x, d)| (x - c * dot) / d).collect()
    }
}

/// Block-diagonal covariance over cells in (cluster, period) order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCovariance {
    pub blocks: Vec<CsBlock>,
}

impl BlockCovariance {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(CsBlock::dim).sum()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut off = 0;
        for b in &self.blocks {
            m.view_mut((off, off), (b.dim(), b.dim())).copy_from(&b.dense());
            off += b.dim();
        }
        m
    }

    pub fn log_det(&self) -> f64 {
        self.blocks.iter().map(CsBlock::log_det).sum()
    }

    /// Covariance for the rows of a design matrix, with cell variance
    /// `cell_var(row)` on the diagonal and `tau2` shared within clusters.
    pub fn from_rows(cells: &[RowCell], tau2: f64, cell_var: impl Fn(&RowCell) -> f64) -> Self {
        let mut blocks: Vec<CsBlock> = Vec::new();
        for c in cells {
            match blocks.last_mut() {
                Some(b) if b.cluster == c.cluster => {
                    b.periods.push(c.period);
                    b.diag.push(cell_var(c));
                }
                _ => blocks.push(CsBlock { cluster: c.cluster, periods: vec![c.period], diag: vec![cell_var(c)], tau2 }),
            }
        }
        Self { blocks }
    }

    pub fn for_matrix(x: &LabeledMatrix, vc: &VarianceComponents) -> Self {
        Self::from_rows(&x.cells, vc.tau2, |c| vc.cell_variance(c.cell_size))
    }
}

/// Covariance of the observed cell means of `layout`.
pub fn cell_covariance(layout: &DesignLayout, vc: &VarianceComponents) -> BlockCovariance {
    let cells: Vec<RowCell> = layout
        .observed_cells()
        .map(|c| RowCell { cluster: c.cluster, period: c.period, exposure: c.exposure, cell_size: c.cell_size })
        .collect();
    BlockCovariance::from_rows(&cells, vc.tau2, |c| vc.cell_variance(c.cell_size))
}

/// Square matrix with fixed-effect labels on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCovariance {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledCovariance {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { labels: self.labels.clone(), values: &self.values * factor }
    }
}

/// A covariance block with the design rows and block positions it covers.
type AlignedBlock<'a> = (&'a CsBlock, Vec<usize>, Vec<f64>);

/// Pairs each design row with the block entry covering the same cell.
fn aligned_blocks<'a>(x: &LabeledMatrix, v: &'a BlockCovariance) -> Result<Vec<AlignedBlock<'a>>> {
    let by_cluster: HashMap<usize, &CsBlock> = v.blocks.iter().map(|b| (b.cluster, b)).collect();
    let mut out: Vec<AlignedBlock> = Vec::new();
    for (row, cell) in x.cells.iter().enumerate() {
        let block = by_cluster.get(&cell.cluster).ok_or_else(|| {
            Error::InvalidSpec(format!("no covariance block for cluster {}", cell.cluster))
        })?;
        let pos = block.periods.iter().position(|&p| p == cell.period).ok_or_else(|| {
            Error::InvalidSpec(format!("no covariance entry for cluster {} period {}", cell.cluster, cell.period))
        })?;
        match out.last_mut() {
            Some((b, rows, d)) if b.cluster == cell.cluster => {
                rows.push(row);
                d.push(block.diag[pos]);
            }
            _ => out.push((block, vec![row], vec![block.diag[pos]])),
        }
    }
    Ok(out)
}

/// `X' V^-1 X` and `X' V^-1 y` accumulated cluster by cluster.
fn weighted_normal_equations(x: &LabeledMatrix, v: &BlockCovariance, y: Option<&[f64]>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = x.ncols();
    let mut info = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (block, rows, diag) in aligned_blocks(x, v)? {
        let sub = CsBlock { cluster: block.cluster, periods: Vec::new(), diag, tau2: block.tau2 };
        sub.check_positive_definite()?;
        let c = sub.rank_one_coefficient();
        let mut u = DVector::zeros(p);
        let mut uy = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            let xr = x.values.row(r).transpose();
            let w = 1.0 / sub.diag[k];
            info.ger(w, &xr, &xr, 1.0);
            u.axpy(w, &xr, 1.0);
            if let Some(y) = y {
                rhs.axpy(w * y[r], &xr, 1.0);
                uy += w * y[r];
            }
        }
        info.ger(-c, &u, &u, 1.0);
        if y.is_some() {
            rhs.axpy(-c * uy, &u, 1.0);
        }
    }
    Ok((info, rhs))
}

fn invert_information(x: &LabeledMatrix, info: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = info
        .cholesky()
        .ok_or_else(|| Error::Identifiability { columns: x.dependent_columns() })?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `(X' V^-1 X)^-1` labeled by the columns of `x`.
pub fn fixed_effects_covariance(x: &LabeledMatrix, v: &BlockCovariance) -> Result<LabeledCovariance> {
    let (info, _) = weighted_normal_equations(x, v, None)?;
    Ok(LabeledCovariance { labels: x.labels.clone(), values: invert_information(x, info)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsFit {
    pub estimates: DVector<f64>,
    pub cov: LabeledCovariance,
}

/// GLS estimates for cell means `y` (one per row of `x`).
pub fn gls_estimate(x: &LabeledMatrix, v: &BlockCovariance, y: &[f64]) -> Result<GlsFit> {
    if y.len() != x.nrows() {
        return Err(Error::InvalidSpec(format!("expected {} responses, got {}", x.nrows(), y.len())));
    }
    let (info, rhs) = weighted_normal_equations(x, v, Some(y))?;
    let cov = invert_information(x, info)?;
    let estimates = &cov * rhs;
    Ok(GlsFit { estimates, cov: LabeledCovariance { labels: x.labels.clone(), values: cov } })
}

/// Linear combination of fixed effects, keyed by column label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastVector {
    pub labels: Vec<String>,
    pub weights: Vec<f64>,
    /// Set when the contrast relies on a convention rather than a direct
    /// model parameter.
    pub note: Option<String>,
}

impl ContrastVector {
    pub fn new(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if labels.len() != weights.len() {
            return Err(Error::InvalidSpec("contrast labels and weights differ in length".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidSpec("contrast has no nonzero weight".into()));
        }
        Ok(Self { labels, weights, note: None })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Dense weight vector over `labels`.
    pub fn dense(&self, labels: &[String]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(labels.len());
        for (l, &w) in self.labels.iter().zip(&self.weights) {
            let k = labels
                .iter()
                .position(|m| m == l)
                .ok_or_else(|| Error::InvalidSpec(format!("contrast column '{l}' not in model")))?;
            out[k] += w;
        }
        Ok(out)
    }

    pub fn apply(&self, labels: &[String], values: &DVector<f64>) -> Result<f64> {
        Ok(self.dense(labels)?.dot(values))
    }

    pub fn variance(&self, cov: &LabeledCovariance) -> Result<f64> {
        let c = self.dense(&cov.labels)?;
        Ok((c.transpose() * &cov.values * &c)[(0, 0)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub power: f64,
    pub standard_error: f64,
    pub effect_value: f64,
    pub alpha: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidSpec(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

pub fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal quantile, polished with Newton steps on the CDF.
pub fn normal_quantile(p: f64) -> f64 {
    let n = std_normal();
    let mut z = n.inverse_cdf(p);
    if z.is_finite() {
        for _ in 0..2 {
            let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            if density > 0.0 {
                z -= (n.cdf(z) - p) / density;
            }
        }
    }
    z
}

/// `z_{1 - alpha/2}`.
pub fn critical_value(alpha: f64) -> f64 {
    normal_quantile(1.0 - alpha / 2.0)
}

/// Two-sided z-test power for a standard error, ignoring the far tail.
pub fn power_from_se(effect_value: f64, se: f64, alpha: f64) -> Result<PowerResult> {
    check_alpha(alpha)?;
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::Numerical(format!("standard error must be positive, got {se}")));
    }
    let power = std_normal().cdf(effect_value.abs() / se - critical_value(alpha));
    Ok(PowerResult { power, standard_error: se, effect_value, alpha })
}

pub fn analytic_power(c: &ContrastVector, effect_value: f64, cov: &LabeledCovariance, alpha: f64) -> Result<PowerResult> {
    check_alpha(alpha)?;
    let var = c.variance(cov)?;
    if !(var > 0.0) {
        return Err(Error::Numerical(format!("contrast variance is not positive ({var})")));
    }
    power_from_se(effect_value, var.sqrt(), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignSpec;
    use crate::model::{build_x, ModelSpec, TimeTrend};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn treatment_block(cov: &LabeledCovariance, x: &LabeledMatrix) -> DMatrix<f64> {
        let r = x.treatment_columns();
        cov.values.view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    /// Dense `(X' V^-1 X)^-1` with explicit full inverses.
    fn dense_oracle(x: &LabeledMatrix, v: &BlockCovariance) -> DMatrix<f64> {
        let vinv = v.dense().try_inverse().unwrap();
        (x.values.transpose() * vinv * &x.values).try_inverse().unwrap()
    }

    fn vc(icc: f64, cac: f64) -> VarianceComponents {
        vc_from_icc_cac(&CorrelationSpec::new(icc, cac)).unwrap()
    }

    fn eti_se(spec: &DesignSpec, model: ModelSpec, vc: &VarianceComponents, column: &str) -> f64 {
        let lay = spec.build().unwrap();
        let x = build_x(&lay, &model).unwrap();
        let cov = fixed_effects_covariance(&x, &cell_covariance(&lay, vc)).unwrap();
        let k = cov.index(column).unwrap();
        cov.values[(k, k)].sqrt()
    }

    #[test]
    fn icc_cac_inversion() {
        let v = vc_from_icc_cac(&CorrelationSpec::new(0.0, 0.3)).unwrap();
        assert_eq!((v.tau2, v.gamma2, v.sigma2), (0.0, 0.0, 1.0));
        let v = vc_from_icc_cac(&CorrelationSpec::new(0.5, 1.0)).unwrap();
        assert_eq!((v.tau2, v.gamma2, v.sigma2), (1.0, 0.0, 1.0));
        let v = vc(0.05, 0.75);
        assert!((v.tau2 + v.gamma2 - 0.05 / 0.95).abs() < 1e-15);
        assert!((v.tau2 - 0.75 * 0.05 / 0.95).abs() < 1e-15);
        assert!((v.icc() - 0.05).abs() < 1e-15 && (v.cac() - 0.75).abs() < 1e-15);
        assert!(vc_from_icc_cac(&CorrelationSpec::new(1.0, 0.5)).is_err());
        assert!(vc_from_icc_cac(&CorrelationSpec::new(0.1, 1.5)).is_err());
    }

    #[test]
    fn covariance_blocks() {
        let lay = DesignSpec::standard(2, 1, 4).build().unwrap();
        let v = cell_covariance(&lay, &VarianceComponents::new(0.0, 0.0, 2.0).unwrap()).dense();
        assert_eq!(v, DMatrix::from_diagonal_element(6, 6, 0.5));

        let v = cell_covariance(&lay, &VarianceComponents::new(0.3, 0.0, 2.0).unwrap());
        assert_eq!(v.blocks.len(), 2);
        let b = v.blocks[0].dense();
        for a in 0..3 {
            for c in 0..3 {
                let want = if a == c { 0.3 + 0.5 } else { 0.3 };
                assert!((b[(a, c)] - want).abs() < 1e-15);
            }
        }

        let single = CsBlock { cluster: 0, periods: vec![1, 2], diag: vec![1.0, 1.0], tau2: 1.0 };
        assert_eq!(single.dense(), DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let dense_det = single.dense().determinant().ln();
        assert!((single.log_det() - dense_det).abs() < 1e-14);
    }

    #[test]
    fn block_solve_matches_dense() {
        let b = CsBlock { cluster: 0, periods: vec![1, 2, 3], diag: vec![0.5, 1.5, 0.7], tau2: 0.4 };
        let v = [1.0, -2.0, 0.3];
        let dense = b.dense().try_inverse().unwrap() * DVector::from_column_slice(&v);
        for (a, e) in b.solve(&v).iter().zip(dense.iter()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_positive_definite_blocks() {
        let lay = DesignSpec::standard(2, 1, 1).build().unwrap();
        let x = build_x(&lay, &ModelSpec::eti()).unwrap();
        let v = BlockCovariance::from_rows(&x.cells, 1.0, |_| 0.0);
        assert!(matches!(fixed_effects_covariance(&x, &v), Err(Error::Numerical(_))));
    }

    #[test]
    fn identity_case() {
        let q = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5]);
        let cells: Vec<RowCell> = (0..4).map(|i| RowCell { cluster: i, period: 1, exposure: 0, cell_size: 1 }).collect();
        let x = LabeledMatrix::new(vec!["a".into(), "b".into()], q, cells, 1).unwrap();
        let v = BlockCovariance::from_rows(&x.cells, 0.0, |_| 1.0);
        let cov = fixed_effects_covariance(&x, &v).unwrap();
        assert!((cov.values - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn block_path_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let mut lay = DesignSpec::standard(4, 1, 3).build().unwrap();
            for c in lay.cells.iter_mut() {
                c.cell_size = rng.random_range(1..30);
            }
            let vc = VarianceComponents::new(rng.random_range(0.0..0.5), rng.random_range(0.0..0.3), rng.random_range(0.5..2.0)).unwrap();
            let model = [ModelSpec::eti(), ModelSpec::it(), ModelSpec::dct(2), ModelSpec::ncs(3)][trial % 4];
            let x = build_x(&lay, &model).unwrap();
            let v = cell_covariance(&lay, &vc);
            let got = fixed_effects_covariance(&x, &v).unwrap().values;
            let want = dense_oracle(&x, &v);
            let scale = want.abs().max();
            assert!((got - want).abs().max() < 1e-10 * scale.max(1.0), "trial {trial}");
        }
    }

    #[test]
    fn gls_estimates_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lay = DesignSpec::standard(3, 2, 3).build().unwrap();
        for c in lay.cells.iter_mut() {
            c.cell_size = rng.random_range(1..10);
        }
        let vc = VarianceComponents::new(0.2, 0.1, 1.0).unwrap();
        let x = build_x(&lay, &ModelSpec::eti()).unwrap();
        let v = cell_covariance(&lay, &vc);
        let y: Vec<f64> = (0..x.nrows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = gls_estimate(&x, &v, &y).unwrap();
        let vinv = v.dense().try_inverse().unwrap();
        let want = dense_oracle(&x, &v) * x.values.transpose() * vinv * DVector::from_column_slice(&y);
        assert!((fit.estimates - want).abs().max() < 1e-10);
    }

    #[test]
    fn base_design_covariance_matches_closed_form() {
        // K = 1, tau2 = 1, sigma2 = 1, so phi = 1/2
        let lay = DesignSpec::standard(2, 1, 1).build().unwrap();
        let vc = VarianceComponents::new(1.0, 0.0, 1.0).unwrap();
        let x = build_x(&lay, &ModelSpec::eti()).unwrap();
        let v = cell_covariance(&lay, &vc);
        let cov = treatment_block(&fixed_effects_covariance(&x, &v).unwrap(), &x);

        // cells ordered Y11 Y12 Y13 Y21 Y22 Y23
        let phi = 0.5;
        let d1 = [-phi, 1.0, 0.0, phi, -1.0, 0.0];
        let d2: Vec<f64> = (0..6)
            .map(|k| d1[k] + [-phi, 0.0, 1.0, phi, 0.0, -1.0][k])
            .collect();
        let mut a = DMatrix::zeros(2, 6);
        for k in 0..6 {
            a[(0, k)] = d1[k];
            a[(1, k)] = d2[k];
        }
        let want = &a * v.dense() * a.transpose();
        assert!((cov - want).abs().max() < 1e-12);
    }

    #[test]
    fn power_formula_edges() {
        let z = critical_value(0.05);
        let r = power_from_se(z * 0.3, 0.3, 0.05).unwrap();
        assert!((r.power - 0.5).abs() < 1e-15);
        let r = power_from_se(0.0, 0.3, 0.05).unwrap();
        assert!((r.power - 0.025).abs() < 1e-15);
        let r = power_from_se(-z * 0.3, 0.3, 0.05).unwrap();
        assert!((r.power - 0.5).abs() < 1e-15);
        assert!(power_from_se(0.1, 0.0, 0.05).is_err());
        assert!(power_from_se(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn analytic_power_uses_contrast_variance() {
        let cov = LabeledCovariance {
            labels: vec!["a".into(), "b".into()],
            values: DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
        };
        let c = ContrastVector::new(vec!["a".into(), "b".into()], vec![0.5, 0.5]).unwrap();
        let r = analytic_power(&c, 0.2, &cov, 0.05).unwrap();
        let se = (0.25 * (0.04 + 0.09 + 0.02f64)).sqrt();
        assert!((r.standard_error - se).abs() < 1e-15);
        let bad = ContrastVector::new(vec!["zzz".into()], vec![1.0]).unwrap();
        assert!(analytic_power(&bad, 0.2, &cov, 0.05).is_err());
        assert!(ContrastVector::new(vec!["a".into()], vec![0.0]).is_err());
    }

    #[test]
    fn frozen_standard_errors() {
        let v = vc(0.05, 0.75);
        let spec = DesignSpec::standard(6, 4, 5);
        assert!((eti_se(&spec, ModelSpec::it(), &v, "treatment") - 0.1097764631444387).abs() < 1e-12);
        assert!((eti_se(&spec, ModelSpec::eti(), &v, "exposure_1") - 0.12461669963008516).abs() < 1e-12);
    }

    #[test]
    fn it_variance_same_under_linear_time() {
        for s in [3, 4, 6] {
            for (icc, cac) in [(0.01, 0.5), (0.1, 1.0)] {
                let v = vc(icc, cac);
                let spec = DesignSpec::standard(s, 2, 10);
                let cat = eti_se(&spec, ModelSpec::it(), &v, "treatment");
                let lin = eti_se(&spec, ModelSpec::it().with_time(TimeTrend::Linear), &v, "treatment");
                assert!((cat * cat - lin * lin).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reference_level_does_not_matter() {
        let lay = DesignSpec::standard(4, 2, 5).build().unwrap();
        let x = build_x(&lay, &ModelSpec::eti()).unwrap();
        let j = lay.n_periods;
        // period J as reference: indicators for periods 1..J-1
        let mut alt = x.values.clone();
        let mut labels = x.labels.clone();
        for (i, c) in x.cells.iter().enumerate() {
            for p in 1..j {
                alt[(i, p)] = if c.period == p { 1.0 } else { 0.0 };
            }
        }
        for (p, label) in labels.iter_mut().enumerate().take(j).skip(1) {
            *label = format!("period_{p}");
        }
        let alt = LabeledMatrix::new(labels, alt, x.cells.clone(), x.first_treatment).unwrap();
        let v = cell_covariance(&lay, &vc(0.05, 0.5));
        let a = treatment_block(&fixed_effects_covariance(&x, &v).unwrap(), &x);
        let b = treatment_block(&fixed_effects_covariance(&alt, &v).unwrap(), &alt);
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn limit_power_below_one() {
        let spec = DesignSpec::standard(4, 4, 1);
        let lay = spec.build().unwrap();
        let x = build_x(&lay, &ModelSpec::eti()).unwrap();
        let v = vc(0.05, 0.75);
        let limit = BlockCovariance::from_rows(&x.cells, v.tau2, |_| v.gamma2);
        let cov = fixed_effects_covariance(&x, &limit).unwrap();
        let k = cov.index("exposure_4").unwrap();
        let p = power_from_se(0.2, cov.values[(k, k)].sqrt(), 0.05).unwrap().power;
        assert!(p < 1.0 - 1e-6);
        let mut last = 0.0;
        for size in [1, 10, 100, 1000, 100000] {
            let se = eti_se(&DesignSpec::standard(4, 4, size), ModelSpec::eti(), &v, "exposure_4");
            let q = power_from_se(0.2, se, 0.05).unwrap().power;
            assert!(q > last && q <= p + 1e-12);
            last = q;
        }
        assert!((last - p).abs() < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn power_increases_with_cell_size(s in 2u32..6, k in 1u32..40, icc in 0.001f64..0.3, cac in 0.0f64..1.0) {
            let v = vc(icc, cac);
            let a = eti_se(&DesignSpec::standard(s, 2, k), ModelSpec::eti(), &v, "exposure_1");
            let b = eti_se(&DesignSpec::standard(s, 2, k + 1), ModelSpec::eti(), &v, "exposure_1");
            prop_assert!(b < a);
        }

        #[test]
        fn power_increases_with_clusters(s in 2u32..6, c in 1u32..6, icc in 0.001f64..0.3, cac in 0.0f64..1.0) {
            let v = vc(icc, cac);
            let a = eti_se(&DesignSpec::standard(s, c, 5), ModelSpec::it(), &v, "treatment");
            let b = eti_se(&DesignSpec::standard(s, c + 1, 5), ModelSpec::it(), &v, "treatment");
            prop_assert!(b < a);
            // clusters in a sequence are exchangeable, so se scales as 1/sqrt(c)
            let one = eti_se(&DesignSpec::standard(s, 1, 5), ModelSpec::it(), &v, "treatment");
            prop_assert!((a - one / (c as f64).sqrt()).abs() < 1e-10);
        }
    }
}
