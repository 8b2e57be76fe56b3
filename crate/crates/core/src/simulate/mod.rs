//! Data generation, model fitting and Monte Carlo power.

mod data;
mod fit;

pub use data::{CellData, CellStat, DataRow, Dataset};
pub use fit::{fit, FitData, FitMethod, FitResult, PreparedModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{Cell, DesignLayout};
use crate::error::{Error, Result};
use crate::estimand::{contrast_for, Estimand};
use crate::gls::{critical_value, VarianceComponents};
use crate::model::ModelSpec;

/// Treatment effect as a function of exposure time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectCurve {
    Immediate { delta: f64 },
    /// `start` at exposure 1 rising linearly to `end` at the last exposure.
    JumpLinear { start: f64, end: f64 },
    /// `ramp[s - 1]` for `s <= washout`, then `delta`.
    WashoutConstant { washout: u32, ramp: Vec<f64>, delta: f64 },
    /// `values[s - 1]` at exposure `s`.
    Tabulated { values: Vec<f64> },
}

impl EffectCurve {
    pub fn validate(&self, max_exposure: u32) -> Result<()> {
        match self {
            Self::WashoutConstant { washout, ramp, .. } if ramp.len() != *washout as usize => Err(Error::InvalidSpec(
                format!("washout curve needs {washout} ramp values, got {}", ramp.len()),
            )),
            Self::Tabulated { values } if values.len() < max_exposure as usize => Err(Error::InvalidSpec(format!(
                "tabulated curve needs {max_exposure} values, got {}",
                values.len()
            ))),
            _ => Ok(()),
        }
    }

    /// `delta(s)` on a layout whose largest exposure is `max_exposure`.
    pub fn value(&self, s: u32, max_exposure: u32) -> f64 {
        if s == 0 {
            return 0.0;
        }
        match self {
            Self::Immediate { delta } => *delta,
            Self::JumpLinear { start, end } => {
                if max_exposure <= 1 {
                    *start
                } else {
                    start + (end - start) * (s - 1) as f64 / (max_exposure - 1) as f64
                }
            }
            Self::WashoutConstant { washout, ramp, delta } => {
                if s <= *washout {
                    ramp[(s - 1) as usize]
                } else {
                    *delta
                }
            }
            Self::Tabulated { values } => values[(s - 1) as usize],
        }
    }

    /// True value of an estimand under this curve.
    pub fn estimand_value(&self, e: &Estimand, max_exposure: u32) -> f64 {
        e.evaluate(|s| self.value(s, max_exposure))
    }
}

/// Mean outcome by calendar period, before treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalendarTrend {
    /// `from` at period 1 rising linearly to `to` at the last period.
    Linear { from: f64, to: f64 },
    Tabulated { values: Vec<f64> },
}

impl Default for CalendarTrend {
    fn default() -> Self {
        Self::Linear { from: 0.0, to: 0.0 }
    }
}

impl CalendarTrend {
    pub fn value(&self, period: usize, n_periods: usize) -> f64 {
        match self {
            Self::Linear { from, to } => {
                if n_periods <= 1 {
                    *from
                } else {
                    from + (to - from) * (period - 1) as f64 / (n_periods - 1) as f64
                }
            }
            Self::Tabulated { values } => values[period - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub layout: DesignLayout,
    pub curve: EffectCurve,
    pub trend: CalendarTrend,
    pub vc: VarianceComponents,
    pub reps: u32,
    pub seed: u64,
    pub alpha: f64,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidSpec("reps must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.vc.validate()?;
        self.curve.validate(self.layout.max_exposure)?;
        if let CalendarTrend::Tabulated { values } = &self.trend {
            if values.len() < self.layout.n_periods {
                return Err(Error::InvalidSpec(format!(
                    "tabulated trend needs {} values, got {}",
                    self.layout.n_periods,
                    values.len()
                )));
            }
        }
        Ok(())
    }

    fn mean(&self, cell: &Cell) -> f64 {
        self.trend.value(cell.period, self.layout.n_periods) + self.curve.value(cell.exposure, self.layout.max_exposure)
    }

    /// Draws one cluster's outcomes from its own stream, in period then
    /// individual order.
    fn draw_cluster(&self, rep: u32, cluster: usize, mut emit: impl FnMut(&Cell, u32, f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((rep as u64) << 32) | cluster as u64);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let alpha = self.vc.tau2.sqrt() * z();
        let (sd_xi, sd_e) = (self.vc.gamma2.sqrt(), self.vc.sigma2.sqrt());
        for cell in self.layout.cluster_cells(cluster).iter().filter(|c| c.observed) {
            let mean = self.mean(cell) + alpha + sd_xi * z();
            for k in 1..=cell.cell_size {
                emit(cell, k, mean + sd_e * z());
            }
        }
    }
}

/// Individual-level data for replication `rep`.
pub fn generate(scenario: &SimScenario, rep: u32) -> Dataset {
    let mut rows = Vec::with_capacity(scenario.layout.total_individuals() as usize);
    for cluster in 1..=scenario.layout.n_clusters {
        scenario.draw_cluster(rep, cluster, |cell, k, y| {
            rows.push(DataRow {
                cluster,
                period: cell.period,
                individual: k,
                exposure: cell.exposure,
                treatment: cell.treatment,
                outcome: y,
            })
        });
    }
    Dataset { rows }
}

/// Cell summaries of `generate(scenario, rep)` without materialising rows.
pub fn generate_cells(scenario: &SimScenario, rep: u32) -> CellData {
    let layout = &scenario.layout;
    let mut stats = vec![CellStat::default(); layout.cells.len()];
    let mut buf: Vec<f64> = Vec::new();
    for cluster in 1..=layout.n_clusters {
        let mut current = 0;
        let mut flush = |period: usize, buf: &mut Vec<f64>| {
            if !buf.is_empty() {
                stats[(cluster - 1) * layout.n_periods + period - 1] = data::summarize(buf);
                buf.clear();
            }
        };
        scenario.draw_cluster(rep, cluster, |cell, _, y| {
            if cell.period != current {
                flush(current, &mut buf);
                current = cell.period;
            }
            buf.push(y);
        });
        flush(current, &mut buf);
    }
    CellData { layout: layout.clone(), stats }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPower {
    pub power: f64,
    pub mc_standard_error: f64,
    pub reps: u32,
    pub rejections: u32,
    pub failures: u32,
    pub warning: Option<String>,
}

/// Monte Carlo power of the two-sided Wald test of `estimand`.
///
/// Replications whose fit errors or does not converge are excluded and
/// counted as failures.
pub fn mc_power(scenario: &SimScenario, model: &ModelSpec, estimand: &Estimand, method: &FitMethod) -> Result<McPower> {
    scenario.validate()?;
    let prepared = PreparedModel::new(&scenario.layout, model)?;
    let contrast = contrast_for(estimand, model, &scenario.layout)?;
    let z = critical_value(scenario.alpha);
    let outcomes: Vec<Option<bool>> = (0..scenario.reps)
        .into_par_iter()
        .map(|rep| {
            let cells = generate_cells(scenario, rep);
            let fit = prepared.fit(&cells, method).ok()?;
            if !fit.converged {
                return None;
            }
            let (est, se) = fit.contrast(&contrast).ok()?;
            Some(est.abs() / se > z)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count() as u32;
    let rejections = outcomes.iter().filter(|o| **o == Some(true)).count() as u32;
    let ok = scenario.reps - failures;
    if ok == 0 {
        return Err(Error::Numerical("every replication failed to fit".into()));
    }
    let power = rejections as f64 / ok as f64;
    let warning = (failures as f64 > 0.05 * scenario.reps as f64)
        .then(|| format!("{failures} of {} replications failed to fit", scenario.reps));
    Ok(McPower {
        power,
        mc_standard_error: (power * (1.0 - power) / ok as f64).sqrt(),
        reps: scenario.reps,
        rejections,
        failures,
        warning,
    })
}
