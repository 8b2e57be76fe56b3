//! Stepped wedge layouts: which cluster-period cells are observed, who is
//! treated, how long each cluster has been exposed, and how many individuals
//! are measured in each cell.
//!
//! Two families are supported:
//!
//! - **standard** designs, where sequence `q` crosses over at period
//!   `q + 1 + extra_start`, optionally padded with all-control periods at the
//!   start and all-treated periods at the end;
//! - **staircase** designs `SC(S, K, R0, R1)`, where each sequence is only
//!   observed for `R0` control periods immediately before crossover and `R1`
//!   treated periods immediately after.
//!
//! Periods and cluster ids are 1-based throughout, matching the usual
//! `(i, j)` cell notation.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staircase {
    pub r0: u32,
    pub r1: u32,
}

/// Parameters of a balanced design.
///
/// Deserializes from the JSON design format:
/// `{"sequences": 6, "clusters_per_sequence": 4, "individuals_per_cell": 5,
///   "extra_start": 0, "extra_end": 0, "baseline_multiplier": 1.0,
///   "staircase": null}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub sequences: u32,
    pub clusters_per_sequence: u32,
    pub individuals_per_cell: u32,
    #[serde(default)]
    pub extra_start: u32,
    #[serde(default)]
    pub extra_end: u32,
    #[serde(default = "default_multiplier")]
    pub baseline_multiplier: f64,
    #[serde(default)]
    pub staircase: Option<Staircase>,
}

fn default_multiplier() -> f64 {
    1.0
}

impl DesignSpec {
    /// A standard complete design with no extra periods.
    pub fn standard(sequences: u32, clusters_per_sequence: u32, individuals_per_cell: u32) -> Self {
        Self {
            sequences,
            clusters_per_sequence,
            individuals_per_cell,
            extra_start: 0,
            extra_end: 0,
            baseline_multiplier: 1.0,
            staircase: None,
        }
    }

    pub fn staircase(
        sequences: u32,
        clusters_per_sequence: u32,
        individuals_per_cell: u32,
        r0: u32,
        r1: u32,
    ) -> Self {
        Self {
            staircase: Some(Staircase { r0, r1 }),
            ..Self::standard(sequences, clusters_per_sequence, individuals_per_cell)
        }
    }

    pub fn with_extra_start(mut self, n: u32) -> Self {
        self.extra_start = n;
        self
    }

    pub fn with_extra_end(mut self, n: u32) -> Self {
        self.extra_end = n;
        self
    }

    pub fn with_baseline_multiplier(mut self, m: f64) -> Self {
        self.baseline_multiplier = m;
        self
    }

    /// Total number of calendar periods.
    pub fn n_periods(&self) -> usize {
        match self.staircase {
            None => (self.sequences + 1 + self.extra_start + self.extra_end) as usize,
            Some(sc) => (self.sequences + sc.r0 + sc.r1 - 1) as usize,
        }
    }

    /// Cell size in calendar period 1: `baseline_multiplier * K` rounded half up.
    pub fn baseline_cell_size(&self) -> Result<u32> {
        let m = self.baseline_multiplier;
        if !m.is_finite() || m <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "baseline_multiplier must be positive and finite, got {m}"
            )));
        }
        let k = (m * self.individuals_per_cell as f64 + 0.5).floor();
        if k < 1.0 || k > u32::MAX as f64 {
            return Err(Error::InvalidSpec(format!(
                "baseline_multiplier * individuals_per_cell rounds to {k}, must be >= 1"
            )));
        }
        Ok(k as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::InvalidSpec("sequences must be >= 1".into()));
        }
        if self.clusters_per_sequence == 0 {
            return Err(Error::InvalidSpec("clusters_per_sequence must be >= 1".into()));
        }
        if self.individuals_per_cell == 0 {
            return Err(Error::InvalidSpec("individuals_per_cell must be >= 1".into()));
        }
        self.baseline_cell_size()?;
        if let Some(sc) = self.staircase {
            if sc.r0 == 0 || sc.r1 == 0 {
                return Err(Error::InvalidSpec("staircase r0 and r1 must be >= 1".into()));
            }
            if self.extra_start != 0 || self.extra_end != 0 {
                return Err(Error::InvalidSpec(
                    "staircase designs cannot have extra start/end periods".into(),
                ));
            }
        }
        Ok(())
    }

    /// Builds the layout, dispatching on whether a staircase is requested.
    pub fn build(&self) -> Result<DesignLayout> {
        match self.staircase {
            None => build_standard(self),
            Some(_) => build_staircase(self),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub cluster: usize,
    pub sequence: usize,
    pub period: usize,
    pub observed: bool,
    pub treatment: bool,
    pub exposure: u32,
    pub cell_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutKind {
    Standard,
    Staircase { r0: u32, r1: u32 },
    /// Reconstructed from data; no structural window is assumed.
    Observed,
}

/// Cluster-by-period grid. `cells` is cluster-major and holds every
/// cluster-period pair, observed or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub n_clusters: usize,
    pub n_periods: usize,
    pub cluster_sequence: Vec<usize>,
    pub cells: Vec<Cell>,
    pub kind: LayoutKind,
    pub max_exposure: u32,
}

impl DesignLayout {
    pub fn cell(&self, cluster: usize, period: usize) -> &Cell {
        &self.cells[(cluster - 1) * self.n_periods + (period - 1)]
    }

    pub fn cluster_cells(&self, cluster: usize) -> &[Cell] {
        let start = (cluster - 1) * self.n_periods;
        &self.cells[start..start + self.n_periods]
    }

    pub fn observed_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.observed)
    }

    pub fn n_sequences(&self) -> usize {
        self.cluster_sequence.iter().copied().max().unwrap_or(0)
    }

    /// Total number of individuals over all observed cells.
    pub fn total_individuals(&self) -> u64 {
        self.observed_cells().map(|c| c.cell_size as u64).sum()
    }

    /// Writes the layout as CSV with header
    /// `cluster,sequence,period,observed,treatment,exposure,cell_size`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "cluster",
            "sequence",
            "period",
            "observed",
            "treatment",
            "exposure",
            "cell_size",
        ])?;
        for c in &self.cells {
            wtr.write_record([
                c.cluster.to_string(),
                c.sequence.to_string(),
                c.period.to_string(),
                (c.observed as u8).to_string(),
                (c.treatment as u8).to_string(),
                c.exposure.to_string(),
                if c.observed { c.cell_size } else { 0 }.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Standard stepped wedge, optionally with extra start/end periods and an
/// enlarged baseline period.
pub fn build_standard(spec: &DesignSpec) -> Result<DesignLayout> {
    spec.validate()?;
    if spec.staircase.is_some() {
        return Err(Error::InvalidSpec("build_standard called with a staircase spec".into()));
    }
    let n_periods = spec.n_periods();
    let k = spec.individuals_per_cell;
    let k_base = spec.baseline_cell_size()?;
    let n_clusters = (spec.sequences * spec.clusters_per_sequence) as usize;
    let mut cells = Vec::with_capacity(n_clusters * n_periods);
    let mut cluster_sequence = Vec::with_capacity(n_clusters);
    let mut cluster = 0;
    for q in 1..=spec.sequences as usize {
        // sequence q is in control for the first extra_start + q periods
        let last_control = spec.extra_start as usize + q;
        for _ in 0..spec.clusters_per_sequence {
            cluster += 1;
            cluster_sequence.push(q);
            for period in 1..=n_periods {
                let exposure = period.saturating_sub(last_control) as u32;
                cells.push(Cell {
                    cluster,
                    sequence: q,
                    period,
                    observed: true,
                    treatment: exposure > 0,
                    exposure,
                    cell_size: if period == 1 { k_base } else { k },
                });
            }
        }
    }
    Ok(DesignLayout {
        n_clusters,
        n_periods,
        cluster_sequence,
        cells,
        kind: LayoutKind::Standard,
        max_exposure: spec.sequences + spec.extra_end,
    })
}

/// Staircase design: sequence `q` observes periods `q ..= q + R0 + R1 - 1`
/// and crosses over after period `R0 + q - 1`.
pub fn build_staircase(spec: &DesignSpec) -> Result<DesignLayout> {
    let sc = spec
        .staircase
        .ok_or_else(|| Error::InvalidSpec("build_staircase requires r0/r1".into()))?;
    spec.validate()?;
    let n_periods = spec.n_periods();
    let k = spec.individuals_per_cell;
    let k_base = spec.baseline_cell_size()?;
    let n_clusters = (spec.sequences * spec.clusters_per_sequence) as usize;
    let window = (sc.r0 + sc.r1) as usize;
    let mut cells = Vec::with_capacity(n_clusters * n_periods);
    let mut cluster_sequence = Vec::with_capacity(n_clusters);
    let mut cluster = 0;
    for q in 1..=spec.sequences as usize {
        let first = q;
        let last = q + window - 1;
        let first_treated = q + sc.r0 as usize;
        for _ in 0..spec.clusters_per_sequence {
            cluster += 1;
            cluster_sequence.push(q);
            for period in 1..=n_periods {
                let observed = (first..=last).contains(&period);
                let exposure = if observed && period >= first_treated {
                    (period - first_treated + 1) as u32
                } else {
                    0
                };
                cells.push(Cell {
                    cluster,
                    sequence: q,
                    period,
                    observed,
                    treatment: exposure > 0,
                    exposure,
                    cell_size: if period == 1 { k_base } else { k },
                });
            }
        }
    }
    Ok(DesignLayout {
        n_clusters,
        n_periods,
        cluster_sequence,
        cells,
        kind: LayoutKind::Staircase { r0: sc.r0, r1: sc.r1 },
        max_exposure: sc.r1,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub message: &'static str,
    pub cluster: Option<usize>,
    pub period: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message)?;
        match (self.cluster, self.period) {
            (Some(c), Some(p)) => write!(f, " (cluster {c}, period {p})"),
            (Some(c), None) => write!(f, " (cluster {c})"),
            (None, Some(p)) => write!(f, " (period {p})"),
            (None, None) => Ok(()),
        }
    }
}

pub const EXPOSURE_STEP: &str = "exposure not incremented by 1";
pub const OUTSIDE_WINDOW: &str = "cell observed outside staircase window";

/// Checks every layout invariant; an empty list means the layout is valid.
pub fn validate(layout: &DesignLayout) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |message, cluster, period| Violation { message, cluster, period };
    let j = layout.n_periods;

    if layout.cells.len() != layout.n_clusters * j || layout.cluster_sequence.len() != layout.n_clusters {
        out.push(v("layout dimensions inconsistent", None, None));
        return out;
    }

    let mut max_seen = 0;
    let mut crossovers = vec![None; layout.n_clusters];
    for cluster in 1..=layout.n_clusters {
        let cells = layout.cluster_cells(cluster);
        let mut first_treated: Option<usize> = None;
        for (idx, c) in cells.iter().enumerate() {
            let period = idx + 1;
            if c.cluster != cluster || c.period != period {
                out.push(v("cell index does not match its position", Some(cluster), Some(period)));
                continue;
            }
            if c.sequence != layout.cluster_sequence[cluster - 1] {
                out.push(v("cell sequence differs from cluster sequence", Some(cluster), Some(period)));
            }
            if !c.observed {
                if layout.kind == LayoutKind::Standard {
                    out.push(v("unobserved cell in standard design", Some(cluster), Some(period)));
                }
                continue;
            }
            if c.cell_size == 0 {
                out.push(v("observed cell has zero individuals", Some(cluster), Some(period)));
            }
            if c.treatment != (c.exposure >= 1) {
                out.push(v("treatment indicator disagrees with exposure", Some(cluster), Some(period)));
            }
            max_seen = max_seen.max(c.exposure);
            match first_treated {
                None if c.exposure >= 1 => {
                    if c.exposure != 1 {
                        out.push(v("exposure does not start at 1", Some(cluster), Some(period)));
                    }
                    first_treated = Some(period + 1 - c.exposure as usize);
                }
                None => {}
                Some(cross) => {
                    if c.exposure == 0 {
                        out.push(v("cluster returns to control after crossover", Some(cluster), Some(period)));
                    } else if c.exposure as usize != period + 1 - cross {
                        out.push(v(EXPOSURE_STEP, Some(cluster), Some(period)));
                    }
                }
            }
        }
        crossovers[cluster - 1] = first_treated;
    }

    if max_seen != layout.max_exposure {
        out.push(v("max_exposure does not match observed exposures", None, None));
    }

    if let LayoutKind::Staircase { r0, r1 } = layout.kind {
        for cluster in 1..=layout.n_clusters {
            let Some(cross) = crossovers[cluster - 1] else {
                out.push(v("staircase cluster never crosses over", Some(cluster), None));
                continue;
            };
            let lo = cross as i64 - r0 as i64;
            let hi = cross as i64 + r1 as i64 - 1;
            for c in layout.cluster_cells(cluster) {
                let p = c.period as i64;
                let inside = p >= lo && p <= hi;
                if c.observed && !inside {
                    out.push(v(OUTSIDE_WINDOW, Some(cluster), Some(c.period)));
                } else if !c.observed && inside && p >= 1 {
                    out.push(v("staircase window cell not observed", Some(cluster), Some(c.period)));
                }
            }
            if lo < 1 || hi > j as i64 {
                out.push(v("staircase window extends past the study", Some(cluster), None));
            }
        }
    }

    // clusters sharing a sequence must share the pattern
    let mut template: Vec<Option<usize>> = vec![None; layout.n_sequences() + 1];
    for cluster in 1..=layout.n_clusters {
        let q = layout.cluster_sequence[cluster - 1];
        match template[q] {
            None => template[q] = Some(cluster),
            Some(t) => {
                let same = layout
                    .cluster_cells(t)
                    .iter()
                    .zip(layout.cluster_cells(cluster))
                    .all(|(a, b)| {
                        a.observed == b.observed && a.exposure == b.exposure && a.cell_size == b.cell_size
                    });
                if !same {
                    out.push(v("clusters in the same sequence differ", Some(cluster), None));
                }
            }
        }
    }

    let mut any_mixed = false;
    for period in 1..=j {
        let (mut ctl, mut trt) = (false, false);
        for cluster in 1..=layout.n_clusters {
            let c = layout.cell(cluster, period);
            if c.observed {
                if c.treatment {
                    trt = true;
                } else {
                    ctl = true;
                }
            }
        }
        if !ctl && !trt {
            out.push(v("period has no observed cells", None, Some(period)));
        }
        any_mixed |= ctl && trt;
    }
    if !any_mixed {
        out.push(v("no period observes both control and treated cells", None, None));
    }
    out
}
