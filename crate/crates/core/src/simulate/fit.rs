//! GLS and REML fits of the two-random-intercept model on cell summaries.
//!
//! Clusters with identical row patterns (periods, exposures and cell sizes)
//! share their design rows and covariance block, so the normal equations
//! and the restricted likelihood are accumulated per pattern from a few
//! sufficient statistics of the data.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::{CellData, Dataset};
use crate::design::DesignLayout;
use crate::error::{Error, Result};
use crate::gls::{ContrastVector, LabeledCovariance, VarianceComponents};
use crate::model::{build_x, LabeledMatrix, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitMethod {
    KnownVariance(VarianceComponents),
    Reml,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub labels: Vec<String>,
    pub estimates: DVector<f64>,
    pub cov: LabeledCovariance,
    pub vc: VarianceComponents,
    /// True when `vc` was estimated rather than supplied.
    pub estimated_vc: bool,
    pub converged: bool,
    /// An estimated cluster or cluster-period variance sits at zero.
    pub boundary: bool,
    pub log_restricted_likelihood: f64,
    pub evaluations: usize,
}

impl FitResult {
    /// Point estimate and standard error of a contrast.
    pub fn contrast(&self, c: &ContrastVector) -> Result<(f64, f64)> {
        let est = c.apply(&self.labels, &self.estimates)?;
        let var = c.variance(&self.cov)?;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::Numerical(format!("contrast variance is not positive ({var})")));
        }
        Ok((est, var.sqrt()))
    }
}

/// Rows of one pattern sharing a cell size.
#[derive(Debug, Clone)]
struct SizeClass {
    k: u32,
    positions: Vec<usize>,
    gram: DMatrix<f64>,
    sum: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Pattern {
    /// First design row of each member cluster.
    starts: Vec<usize>,
    len: usize,
    classes: Vec<SizeClass>,
}

/// Data-dependent statistics for one pattern.
#[derive(Debug, Clone)]
struct PatternData {
    /// `sum_{j in class} x_j Y_j`, with `Y_j` summed over members.
    cross: Vec<DVector<f64>>,
    /// `sum_{j in class} Y_j`.
    total: Vec<f64>,
    /// `sum_members sum_{j in class} ybar_j^2`.
    squares: Vec<f64>,
    /// `sum_members a_k a_l` with `a_k` the member's class total.
    products: DMatrix<f64>,
}

/// Sufficient statistics of one dataset under a prepared model.
#[derive(Debug, Clone)]
pub struct FitData {
    patterns: Vec<PatternData>,
    within_ss: f64,
}

/// A model bound to a layout, ready to fit any dataset on that layout.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    x: LabeledMatrix,
    /// Index into `layout.cells` of each design row.
    cell_index: Vec<usize>,
    patterns: Vec<Pattern>,
    n_periods: usize,
    n_individuals: f64,
    n_cells: f64,
    sum_log_k: f64,
}

struct Evaluation {
    deviance: f64,
    info: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl PreparedModel {
    pub fn new(layout: &DesignLayout, model: &ModelSpec) -> Result<Self> {
        let x = build_x(layout, model)?;
        let p = x.ncols();
        let cell_index: Vec<usize> = x
            .cells
            .iter()
            .map(|c| (c.cluster - 1) * layout.n_periods + (c.period - 1))
            .collect();

        let mut lookup: HashMap<Vec<(usize, u32, u32)>, usize> = HashMap::new();
        let mut patterns: Vec<Pattern> = Vec::new();
        let mut start = 0;
        while start < x.nrows() {
            let cluster = x.cells[start].cluster;
            let mut end = start;
            while end < x.nrows() && x.cells[end].cluster == cluster {
                end += 1;
            }
            let key: Vec<(usize, u32, u32)> =
                x.cells[start..end].iter().map(|c| (c.period, c.exposure, c.cell_size)).collect();
            match lookup.get(&key) {
                Some(&g) => patterns[g].starts.push(start),
                None => {
                    let mut classes: Vec<SizeClass> = Vec::new();
                    for (pos, c) in x.cells[start..end].iter().enumerate() {
                        let row = x.values.row(start + pos).transpose();
                        let idx = match classes.iter().position(|s| s.k == c.cell_size) {
                            Some(i) => i,
                            None => {
                                classes.push(SizeClass {
                                    k: c.cell_size,
                                    positions: Vec::new(),
                                    gram: DMatrix::zeros(p, p),
                                    sum: DVector::zeros(p),
                                });
                                classes.len() - 1
                            }
                        };
                        let class = &mut classes[idx];
                        class.positions.push(pos);
                        class.gram.ger(1.0, &row, &row, 1.0);
                        class.sum += &row;
                    }
                    lookup.insert(key, patterns.len());
                    patterns.push(Pattern { starts: vec![start], len: end - start, classes });
                }
            }
            start = end;
        }

        let n_individuals = x.cells.iter().map(|c| c.cell_size as f64).sum();
        let sum_log_k = x.cells.iter().map(|c| (c.cell_size as f64).ln()).sum();
        let n_cells = x.nrows() as f64;
        Ok(Self { x, cell_index, patterns, n_periods: layout.n_periods, n_individuals, n_cells, sum_log_k })
    }

    pub fn matrix(&self) -> &LabeledMatrix {
        &self.x
    }

    pub fn labels(&self) -> &[String] {
        &self.x.labels
    }

    /// Number of distinct cluster patterns.
    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn data(&self, cells: &CellData) -> Result<FitData> {
        if cells.layout.n_periods != self.n_periods || cells.stats.len() != cells.layout.cells.len() {
            return Err(Error::InvalidSpec("cell data do not match the prepared layout".into()));
        }
        let mut within_ss = 0.0;
        for &i in &self.cell_index {
            within_ss += cells.stats[i].within_ss;
        }
        let p = self.x.ncols();
        let patterns = self
            .patterns
            .iter()
            .map(|pat| {
                let nc = pat.classes.len();
                let mut y_sum = vec![0.0; pat.len];
                let mut squares = vec![0.0; nc];
                let mut products = DMatrix::zeros(nc, nc);
                let mut a = vec![0.0; nc];
                for &start in &pat.starts {
                    for (ci, class) in pat.classes.iter().enumerate() {
                        a[ci] = 0.0;
                        for &pos in &class.positions {
                            let y = cells.stats[self.cell_index[start + pos]].mean;
                            y_sum[pos] += y;
                            a[ci] += y;
                            squares[ci] += y * y;
                        }
                    }
                    for k in 0..nc {
                        for l in 0..nc {
                            products[(k, l)] += a[k] * a[l];
                        }
                    }
                }
                let first = pat.starts[0];
                let mut cross = Vec::with_capacity(nc);
                let mut total = Vec::with_capacity(nc);
                for class in &pat.classes {
                    let mut r = DVector::zeros(p);
                    let mut t = 0.0;
                    for &pos in &class.positions {
                        r.axpy(y_sum[pos], &self.x.values.row(first + pos).transpose(), 1.0);
                        t += y_sum[pos];
                    }
                    cross.push(r);
                    total.push(t);
                }
                PatternData { cross, total, squares, products }
            })
            .collect();
        Ok(FitData { patterns, within_ss })
    }

    /// Restricted deviance `-2 log L_R` and the GLS normal equations at `vc`.
    fn evaluate(&self, data: &FitData, vc: &VarianceComponents) -> Option<Evaluation> {
        let p = self.x.ncols();
        let mut info = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        let mut y_vinv_y = 0.0;
        let mut log_det_v = 0.0;
        let mut u = DVector::zeros(p);
        for (pat, pd) in self.patterns.iter().zip(&data.patterns) {
            let m = pat.starts.len() as f64;
            let inv_d: Vec<f64> = pat.classes.iter().map(|c| 1.0 / vc.cell_variance(c.k)).collect();
            if inv_d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return None;
            }
            let h: f64 = pat.classes.iter().zip(&inv_d).map(|(c, w)| c.positions.len() as f64 * w).sum();
            let c = vc.tau2 / (1.0 + vc.tau2 * h);
            u.fill(0.0);
            let mut s = 0.0;
            for (k, class) in pat.classes.iter().enumerate() {
                info.zip_apply(&class.gram, |a, g| *a += m * inv_d[k] * g);
                u.axpy(inv_d[k], &class.sum, 1.0);
                rhs.axpy(inv_d[k], &pd.cross[k], 1.0);
                s += inv_d[k] * pd.total[k];
                y_vinv_y += inv_d[k] * pd.squares[k];
                log_det_v -= m * class.positions.len() as f64 * inv_d[k].ln();
                for (l, w) in inv_d.iter().enumerate() {
                    y_vinv_y -= c * pd.products[(k, l)] * inv_d[k] * w;
                }
            }
            info.ger(-m * c, &u, &u, 1.0);
            rhs.axpy(-c * s, &u, 1.0);
            log_det_v += m * (1.0 + vc.tau2 * h).ln();
        }
        let chol = info.clone().cholesky()?;
        let log_det_info = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let beta = chol.solve(&rhs);
        let quad = y_vinv_y - rhs.dot(&beta);
        let deviance = (self.n_individuals - p as f64) * (2.0 * std::f64::consts::PI).ln()
            + (self.n_individuals - self.n_cells) * vc.sigma2.ln()
            + data.within_ss / vc.sigma2
            + self.sum_log_k
            + log_det_v
            + log_det_info
            + quad;
        deviance.is_finite().then_some(Evaluation { deviance, info, rhs })
    }

    /// `-2` times the restricted log-likelihood at `vc`.
    pub fn restricted_deviance(&self, data: &FitData, vc: &VarianceComponents) -> Result<f64> {
        self.evaluate(data, vc)
            .map(|e| e.deviance)
            .ok_or_else(|| Error::Numerical("restricted likelihood undefined at these components".into()))
    }

    fn finish(&self, eval: Evaluation, vc: VarianceComponents, estimated: bool, converged: bool, boundary: bool, evaluations: usize) -> Result<FitResult> {
        let chol = eval
            .info
            .cholesky()
            .ok_or_else(|| Error::Identifiability { columns: self.x.dependent_columns() })?;
        let cov = chol.inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        let estimates = &cov * &eval.rhs;
        Ok(FitResult {
            labels: self.x.labels.clone(),
            estimates,
            cov: LabeledCovariance { labels: self.x.labels.clone(), values: cov },
            vc,
            estimated_vc: estimated,
            converged,
            boundary,
            log_restricted_likelihood: -0.5 * eval.deviance,
            evaluations,
        })
    }

    pub fn fit_data(&self, data: &FitData, cells: &CellData, method: &FitMethod) -> Result<FitResult> {
        match method {
            FitMethod::KnownVariance(vc) => {
                vc.validate()?;
                let eval = self
                    .evaluate(data, vc)
                    .ok_or_else(|| Error::Identifiability { columns: self.x.dependent_columns() })?;
                self.finish(eval, *vc, false, true, false, 1)
            }
            FitMethod::Reml => self.reml(data, cells),
        }
    }

    pub fn fit(&self, cells: &CellData, method: &FitMethod) -> Result<FitResult> {
        let data = self.data(cells)?;
        self.fit_data(&data, cells, method)
    }

    fn reml(&self, data: &FitData, cells: &CellData) -> Result<FitResult> {
        let start = self.starting_values(data, cells);
        let sigma_floor = 1e-10 * start[2];
        let clamp = |t: &[f64; 3]| [t[0].max(0.0), t[1].max(0.0), t[2].max(sigma_floor)];
        let mut evaluations = 0usize;
        let mut objective = |t: &[f64; 3]| -> f64 {
            evaluations += 1;
            let c = clamp(t);
            let vc = VarianceComponents { tau2: c[0], gamma2: c[1], sigma2: c[2] };
            self.evaluate(data, &vc).map_or(f64::INFINITY, |e| e.deviance)
        };

        let k_bar = self.n_cells / self.x.cells.iter().map(|c| 1.0 / c.cell_size as f64).sum::<f64>();
        let base = start[2] / k_bar;
        let steps = [0.5 * start[0] + 0.05 * base, 0.5 * start[1] + 0.05 * base, 0.2 * start[2]];
        let (mut theta, mut best, simplex_converged) = nelder_mead(&mut objective, start, steps, 4000);
        theta = clamp(&theta);
        best = best.min(objective(&theta));

        let scales = [base.max(1e-8), base.max(1e-8), start[2]];
        let mut converged = false;
        for _ in 0..100 {
            let before = best;
            for (i, &scale) in scales.iter().enumerate() {
                let (t, f) = newton_coordinate(&mut objective, theta, best, i, scale, if i == 2 { sigma_floor } else { 0.0 });
                theta = t;
                best = f;
            }
            if (before - best).abs() <= 1e-10 * best.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        let converged = converged && simplex_converged && best.is_finite();
        let vc = VarianceComponents { tau2: theta[0], gamma2: theta[1], sigma2: theta[2] };
        let boundary = vc.tau2 <= 1e-8 * vc.sigma2 || vc.gamma2 <= 1e-8 * vc.sigma2;
        let eval = self
            .evaluate(data, &vc)
            .ok_or_else(|| Error::Numerical("restricted likelihood undefined at the REML estimate".into()))?;
        self.finish(eval, vc, true, converged, boundary, evaluations)
    }

    /// Moment estimates: pooled within-cell variance for `sigma2`, and the
    /// covariance of period-centred cell means within and across periods
    /// for the cluster terms.
    fn starting_values(&self, data: &FitData, cells: &CellData) -> [f64; 3] {
        let df = self.n_individuals - self.n_cells;
        let sigma2 = if df > 0.0 && data.within_ss > 0.0 { data.within_ss / df } else { 1.0 };
        let mut period_sum = vec![0.0; self.n_periods];
        let mut period_n = vec![0.0; self.n_periods];
        for (row, &i) in self.cell_index.iter().enumerate() {
            let p = self.x.cells[row].period - 1;
            period_sum[p] += cells.stats[i].mean;
            period_n[p] += 1.0;
        }
        let centred: Vec<(usize, f64, f64)> = self
            .cell_index
            .iter()
            .enumerate()
            .map(|(row, &i)| {
                let c = &self.x.cells[row];
                let p = c.period - 1;
                (c.cluster, cells.stats[i].mean - period_sum[p] / period_n[p], c.cell_size as f64)
            })
            .collect();
        let mut var = 0.0;
        let mut n_var = 0.0;
        let mut cov = 0.0;
        let mut n_cov = 0.0;
        let mut start = 0;
        while start < centred.len() {
            let cluster = centred[start].0;
            let mut end = start;
            while end < centred.len() && centred[end].0 == cluster {
                end += 1;
            }
            let block = &centred[start..end];
            for (a, ra) in block.iter().enumerate() {
                var += ra.1 * ra.1 - sigma2 / ra.2;
                n_var += 1.0;
                for rb in &block[a + 1..] {
                    cov += ra.1 * rb.1;
                    n_cov += 1.0;
                }
            }
            start = end;
        }
        let tau2 = if n_cov > 0.0 { (cov / n_cov).max(0.0) } else { 0.0 };
        let gamma2 = if n_var > 0.0 { (var / n_var - tau2).max(0.0) } else { 0.0 };
        [tau2, gamma2, sigma2]
    }
}

/// Minimises `f` from `x0` with an axis-aligned initial simplex. Returns the
/// best point, its value, and whether the value spread fell below tolerance.
fn nelder_mead(f: &mut impl FnMut(&[f64; 3]) -> f64, x0: [f64; 3], steps: [f64; 3], max_iter: usize) -> ([f64; 3], f64, bool) {
    let mut pts: Vec<[f64; 3]> = vec![x0];
    for i in 0..3 {
        let mut p = x0;
        p[i] += steps[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(&mut *f).collect();
    let combine = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] {
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
    };
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i]).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = vals[3] - vals[0];
        if spread.is_finite() && spread <= 1e-13 * vals[0].abs().max(1.0) {
            return (pts[0], vals[0], true);
        }
        let mut centroid = [0.0; 3];
        for p in &pts[..3] {
            for k in 0..3 {
                centroid[k] += p[k] / 3.0;
            }
        }
        let reflected = combine(&centroid, &pts[3], -1.0);
        let fr = f(&reflected);
        if fr < vals[0] {
            let expanded = combine(&centroid, &pts[3], -2.0);
            let fe = f(&expanded);
            if fe < fr {
                pts[3] = expanded;
                vals[3] = fe;
            } else {
                pts[3] = reflected;
                vals[3] = fr;
            }
        } else if fr < vals[2] {
            pts[3] = reflected;
            vals[3] = fr;
        } else {
            let (contracted, fc) = if fr < vals[3] {
                let c = combine(&centroid, &reflected, 0.5);
                let fc = f(&c);
                (c, fc)
            } else {
                let c = combine(&centroid, &pts[3], 0.5);
                let fc = f(&c);
                (c, fc)
            };
            if fc < vals[3].min(fr) {
                pts[3] = contracted;
                vals[3] = fc;
            } else {
                for i in 1..4 {
                    pts[i] = combine(&pts[0], &pts[i], 0.5);
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let best = (0..4).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (pts[best], vals[best], false)
}

/// One damped Newton step along coordinate `i` using finite differences,
/// kept above `floor`. Returns the new point only if it improves `f`.
fn newton_coordinate(
    f: &mut impl FnMut(&[f64; 3]) -> f64,
    theta: [f64; 3],
    f0: f64,
    i: usize,
    scale: f64,
    floor: f64,
) -> ([f64; 3], f64) {
    let h = 1e-4 * theta[i].abs().max(scale);
    let at = |v: f64| {
        let mut t = theta;
        t[i] = v;
        t
    };
    let x = theta[i];
    let (g, curv) = if x - h >= floor {
        let fp = f(&at(x + h));
        let fm = f(&at(x - h));
        ((fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / (h * h))
    } else {
        let f1 = f(&at(x + h));
        let f2 = f(&at(x + 2.0 * h));
        ((-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h), (f0 - 2.0 * f1 + f2) / (h * h))
    };
    if !g.is_finite() {
        return (theta, f0);
    }
    let mut step = if curv > 0.0 && curv.is_finite() { -g / curv } else { -g.signum() * h };
    for _ in 0..30 {
        let target = (x + step).max(floor);
        if target == x {
            break;
        }
        let cand = at(target);
        let fc = f(&cand);
        if fc < f0 {
            return (cand, fc);
        }
        step *= 0.5;
    }
    (theta, f0)
}

/// Fits `model` to an individual-level dataset.
pub fn fit(data: &Dataset, model: &ModelSpec, method: &FitMethod) -> Result<FitResult> {
    let cells = data.cells()?;
    PreparedModel::new(&cells.layout, model)?.fit(&cells, method)
}
