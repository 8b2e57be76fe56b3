//! Individual-level datasets, their cell summaries, and layout recovery.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::design::{validate, Cell, DesignLayout, LayoutKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataRow {
    pub cluster: usize,
    pub period: usize,
    pub individual: u32,
    pub exposure: u32,
    pub treatment: bool,
    pub outcome: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    cluster: usize,
    period: usize,
    individual: u32,
    exposure: u32,
    treatment: u8,
    outcome: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<DataRow>,
}

/// Mean and within-cell sum of squares of one cluster-period cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellStat {
    pub mean: f64,
    pub within_ss: f64,
}

/// Cell summaries aligned with `layout.cells`; unobserved cells hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CellData {
    pub layout: DesignLayout,
    pub stats: Vec<CellStat>,
}

impl CellData {
    pub fn stat(&self, cluster: usize, period: usize) -> CellStat {
        self.stats[(cluster - 1) * self.layout.n_periods + (period - 1)]
    }

    /// Cell means in `layout.observed_cells()` order.
    pub fn observed_means(&self) -> Vec<f64> {
        self.layout
            .cells
            .iter()
            .zip(&self.stats)
            .filter(|(c, _)| c.observed)
            .map(|(_, s)| s.mean)
            .collect()
    }
}

/// Mean and centred sum of squares, accumulated in input order.
pub(crate) fn summarize(values: &[f64]) -> CellStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let within_ss = values.iter().map(|y| (y - mean) * (y - mean)).sum();
    CellStat { mean, within_ss }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(CsvRow {
                cluster: r.cluster,
                period: r.period,
                individual: r.individual,
                exposure: r.exposure,
                treatment: r.treatment as u8,
                outcome: r.outcome,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let want = ["cluster", "period", "individual", "exposure", "treatment", "outcome"];
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(Error::Parse(format!("dataset header must be {}", want.join(","))));
        }
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<CsvRow>() {
            let r = rec?;
            if r.treatment > 1 {
                return Err(Error::Parse(format!("treatment must be 0 or 1, got {}", r.treatment)));
            }
            rows.push(DataRow {
                cluster: r.cluster,
                period: r.period,
                individual: r.individual,
                exposure: r.exposure,
                treatment: r.treatment == 1,
                outcome: r.outcome,
            });
        }
        Ok(Self { rows })
    }

    /// Collapses to cell summaries and recovers the layout.
    ///
    /// Clusters are grouped into sequences by their observation and
    /// exposure pattern, ordered by crossover period.
    pub fn cells(&self) -> Result<CellData> {
        if self.rows.is_empty() {
            return Err(Error::InvalidSpec("dataset has no rows".into()));
        }
        let mut by_cell: BTreeMap<(usize, usize), (u32, bool, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            if r.cluster == 0 || r.period == 0 {
                return Err(Error::Parse("cluster and period ids start at 1".into()));
            }
            let entry = by_cell.entry((r.cluster, r.period)).or_insert((r.exposure, r.treatment, Vec::new()));
            if entry.0 != r.exposure || entry.1 != r.treatment {
                return Err(Error::Parse(format!(
                    "cluster {} period {} mixes exposure or treatment values",
                    r.cluster, r.period
                )));
            }
            entry.2.push(r.outcome);
        }
        let n_clusters = by_cell.keys().map(|k| k.0).max().unwrap_or(0);
        let n_periods = by_cell.keys().map(|k| k.1).max().unwrap_or(0);

        let mut cells = Vec::with_capacity(n_clusters * n_periods);
        let mut stats = Vec::with_capacity(n_clusters * n_periods);
        for cluster in 1..=n_clusters {
            for period in 1..=n_periods {
                match by_cell.get(&(cluster, period)) {
                    Some((exposure, treatment, ys)) => {
                        cells.push(Cell {
                            cluster,
                            sequence: 0,
                            period,
                            observed: true,
                            treatment: *treatment,
                            exposure: *exposure,
                            cell_size: ys.len() as u32,
                        });
                        stats.push(summarize(ys));
                    }
                    None => {
                        cells.push(Cell {
                            cluster,
                            sequence: 0,
                            period,
                            observed: false,
                            treatment: false,
                            exposure: 0,
                            cell_size: 0,
                        });
                        stats.push(CellStat::default());
                    }
                }
            }
        }

        // sequence ids by pattern, ordered by crossover then pattern
        let pattern = |cluster: usize| -> Vec<(bool, u32, u32)> {
            cells[(cluster - 1) * n_periods..cluster * n_periods]
                .iter()
                .map(|c| (c.observed, c.exposure, c.cell_size))
                .collect()
        };
        let crossover = |cluster: usize| -> usize {
            cells[(cluster - 1) * n_periods..cluster * n_periods]
                .iter()
                .find(|c| c.exposure > 0)
                .map_or(usize::MAX, |c| c.period)
        };
        let mut keys: Vec<_> = (1..=n_clusters).map(|c| (crossover(c), pattern(c))).collect();
        keys.sort();
        keys.dedup();
        let cluster_sequence: Vec<usize> = (1..=n_clusters)
            .map(|c| {
                let key = (crossover(c), pattern(c));
                keys.binary_search(&key).map(|i| i + 1).unwrap_or(0)
            })
            .collect();
        for c in cells.iter_mut() {
            c.sequence = cluster_sequence[c.cluster - 1];
        }
        let max_exposure = cells.iter().map(|c| c.exposure).max().unwrap_or(0);
        let layout = DesignLayout { n_clusters, n_periods, cluster_sequence, cells, kind: LayoutKind::Observed, max_exposure };
        let violations = validate(&layout);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
            return Err(Error::InvalidSpec(format!("dataset layout is invalid: {}", msg.join("; "))));
        }
        Ok(CellData { layout, stats })
    }
}
