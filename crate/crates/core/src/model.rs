//! Fixed-effects design matrices over observed cluster-period cells.
//!
//! Column order is always: intercept, calendar-time columns, treatment
//! columns. Rows follow the layout's (cluster, period) order.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignLayout;
use crate::error::{Error, Result};
use crate::spline::NaturalSpline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectStructure {
    /// Immediate treatment: one constant effect.
    It,
    /// Exposure time indicators: one effect per exposure time.
    Eti,
    /// Delayed constant treatment: free effects for the first `washout`
    /// exposure times, constant afterwards.
    Dct { washout: u32 },
    /// Natural cubic spline in exposure time with `df` columns.
    Ncs { df: u32 },
    /// Immediate treatment fitted after dropping washout cells.
    ItDropWashout { washout: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeTrend {
    Categorical,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub effect: EffectStructure,
    pub time: TimeTrend,
}

impl ModelSpec {
    pub fn new(effect: EffectStructure, time: TimeTrend) -> Self {
        Self { effect, time }
    }

    pub fn it() -> Self {
        Self::new(EffectStructure::It, TimeTrend::Categorical)
    }

    pub fn eti() -> Self {
        Self::new(EffectStructure::Eti, TimeTrend::Categorical)
    }

    pub fn dct(washout: u32) -> Self {
        Self::new(EffectStructure::Dct { washout }, TimeTrend::Categorical)
    }

    pub fn ncs(df: u32) -> Self {
        Self::new(EffectStructure::Ncs { df }, TimeTrend::Categorical)
    }

    pub fn it_drop_washout(washout: u32) -> Self {
        Self::new(EffectStructure::ItDropWashout { washout }, TimeTrend::Categorical)
    }

    pub fn with_time(mut self, time: TimeTrend) -> Self {
        self.time = time;
        self
    }

    /// Checks the model against a layout's maximum exposure.
    pub fn check(&self, max_exposure: u32) -> Result<()> {
        match self.effect {
            EffectStructure::Dct { washout } | EffectStructure::ItDropWashout { washout } => {
                if washout == 0 || washout >= max_exposure {
                    return Err(Error::InvalidSpec(format!(
                        "washout must satisfy 1 <= w < max exposure {max_exposure}, got {washout}"
                    )));
                }
            }
            EffectStructure::Ncs { df } => {
                if df < 2 || df > max_exposure {
                    return Err(Error::InvalidSpec(format!(
                        "spline df must satisfy 2 <= d <= max exposure {max_exposure}, got {df}"
                    )));
                }
            }
            EffectStructure::It | EffectStructure::Eti => {}
        }
        Ok(())
    }

    /// Spline over exposure times `1..=max_exposure`, for NCS models.
    pub fn spline(&self, max_exposure: u32) -> Result<Option<NaturalSpline>> {
        match self.effect {
            EffectStructure::Ncs { df } => {
                self.check(max_exposure)?;
                Ok(Some(NaturalSpline::new(df as usize, (1.0, max_exposure as f64))?))
            }
            _ => Ok(None),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.effect {
            EffectStructure::It => write!(f, "it")?,
            EffectStructure::Eti => write!(f, "eti")?,
            EffectStructure::Dct { washout } => write!(f, "dct:{washout}")?,
            EffectStructure::Ncs { df } => write!(f, "ncs:{df}")?,
            EffectStructure::ItDropWashout { washout } => write!(f, "it-drop:{washout}")?,
        }
        match self.time {
            TimeTrend::Categorical => Ok(()),
            TimeTrend::Linear => write!(f, "+lin"),
        }
    }
}

impl FromStr for EffectStructure {
    type Err = Error;

    /// Parses `it`, `eti`, `dct:w`, `ncs:d`, `it-drop:w`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let num = |a: Option<&str>| -> Result<u32> {
            a.ok_or_else(|| Error::Parse(format!("model '{s}' needs an integer argument")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad integer in model '{s}'")))
        };
        match name {
            "it" if arg.is_none() => Ok(Self::It),
            "eti" if arg.is_none() => Ok(Self::Eti),
            "dct" => Ok(Self::Dct { washout: num(arg)? }),
            "ncs" => Ok(Self::Ncs { df: num(arg)? }),
            "it-drop" => Ok(Self::ItDropWashout { washout: num(arg)? }),
            _ => Err(Error::Parse(format!("unknown model '{s}'"))),
        }
    }
}

impl FromStr for TimeTrend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cat" | "categorical" => Ok(Self::Categorical),
            "lin" | "linear" => Ok(Self::Linear),
            other => Err(Error::Parse(format!("unknown time trend '{other}'"))),
        }
    }
}

/// The cell a design-matrix row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowCell {
    pub cluster: usize,
    pub period: usize,
    pub exposure: u32,
    pub cell_size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
    pub cells: Vec<RowCell>,
    /// Index of the first treatment column; treatment columns run to the end.
    pub first_treatment: usize,
}

impl LabeledMatrix {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>, cells: Vec<RowCell>, first_treatment: usize) -> Result<Self> {
        if labels.len() != values.ncols() || cells.len() != values.nrows() || first_treatment > labels.len() {
            return Err(Error::InvalidSpec(format!(
                "matrix shape {}x{} does not match {} labels / {} row cells",
                values.nrows(),
                values.ncols(),
                labels.len(),
                cells.len()
            )));
        }
        Ok(Self { labels, values, cells, first_treatment })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn treatment_columns(&self) -> std::ops::Range<usize> {
        self.first_treatment..self.labels.len()
    }

    pub fn column(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Greedy Gram-Schmidt pass; returns the labels of columns that lie in
    /// the span of the columns before them.
    pub fn dependent_columns(&self) -> Vec<String> {
        let n = self.nrows();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut dependent = Vec::new();
        for j in 0..self.ncols() {
            let mut v: Vec<f64> = self.values.column(j).iter().copied().collect();
            let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for q in &basis {
                    let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        v[i] -= dot * q[i];
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm0 == 0.0 || norm <= 1e-9 * norm0.max(1.0) {
                dependent.push(self.labels[j].clone());
            } else {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        dependent
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.labels)?;
        for i in 0..self.nrows() {
            wtr.write_record(self.values.row(i).iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Names of the treatment columns a model produces on a layout with the
/// given maximum exposure.
pub fn treatment_labels(model: &ModelSpec, max_exposure: u32) -> Vec<String> {
    match model.effect {
        EffectStructure::It | EffectStructure::ItDropWashout { .. } => vec!["treatment".into()],
        EffectStructure::Eti => (1..=max_exposure).map(|s| format!("exposure_{s}")).collect(),
        EffectStructure::Dct { washout } => (1..=washout)
            .map(|s| format!("exposure_{s}"))
            .chain(std::iter::once(format!("exposure_gt_{washout}")))
            .collect(),
        EffectStructure::Ncs { df } => (1..=df).map(|k| format!("spline_{k}")).collect(),
    }
}

/// Treatment part of a design row for a cell with exposure `s`.
pub(crate) fn treatment_row(model: &ModelSpec, spline: Option<&NaturalSpline>, max_exposure: u32, s: u32) -> Vec<f64> {
    let width = treatment_labels(model, max_exposure).len();
    let mut out = vec![0.0; width];
    if s == 0 {
        return out;
    }
    match model.effect {
        EffectStructure::It | EffectStructure::ItDropWashout { .. } => out[0] = 1.0,
        EffectStructure::Eti => out[(s - 1) as usize] = 1.0,
        EffectStructure::Dct { washout } => {
            if s <= washout {
                out[(s - 1) as usize] = 1.0;
            } else {
                out[washout as usize] = 1.0;
            }
        }
        EffectStructure::Ncs { .. } => {
            let row = spline.expect("spline for NCS model").row(s as f64);
            out.copy_from_slice(&row);
        }
    }
    out
}

/// Builds the fixed-effects design matrix for `model` on `layout`.
///
/// Categorical time uses period 1 as the reference level. Under
/// `ItDropWashout(w)` the rows of cells with `1 <= s <= w` are removed.
pub fn build_x(layout: &DesignLayout, model: &ModelSpec) -> Result<LabeledMatrix> {
    let max_exposure = layout.max_exposure;
    model.check(max_exposure)?;
    let spline = model.spline(max_exposure)?;
    let j = layout.n_periods;

    let mut labels = vec!["intercept".to_string()];
    match model.time {
        TimeTrend::Categorical => labels.extend((2..=j).map(|p| format!("period_{p}"))),
        TimeTrend::Linear => labels.push("period".into()),
    }
    let first_treatment = labels.len();
    labels.extend(treatment_labels(model, max_exposure));
    let p = labels.len();

    let drop = match model.effect {
        EffectStructure::ItDropWashout { washout } => washout,
        _ => 0,
    };
    let cells: Vec<RowCell> = layout
        .observed_cells()
        .filter(|c| !(c.exposure >= 1 && c.exposure <= drop))
        .map(|c| RowCell { cluster: c.cluster, period: c.period, exposure: c.exposure, cell_size: c.cell_size })
        .collect();

    let mut values = DMatrix::zeros(cells.len(), p);
    for (i, c) in cells.iter().enumerate() {
        values[(i, 0)] = 1.0;
        match model.time {
            TimeTrend::Categorical => {
                if c.period > 1 {
                    values[(i, c.period - 1)] = 1.0;
                }
            }
            TimeTrend::Linear => values[(i, 1)] = c.period as f64,
        }
        for (k, v) in treatment_row(model, spline.as_ref(), max_exposure, c.exposure).into_iter().enumerate() {
            values[(i, first_treatment + k)] = v;
        }
    }

    let x = LabeledMatrix::new(labels, values, cells, first_treatment)?;
    let dependent = x.dependent_columns();
    if !dependent.is_empty() {
        return Err(Error::Identifiability { columns: dependent });
    }
    Ok(x)
}
