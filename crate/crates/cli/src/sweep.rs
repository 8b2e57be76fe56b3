//! Grid sweeps emitting one tidy row per grid point.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};
use swpower::search::{required, ssr};
use swpower::{CorrelationSpec, DesignSpec, Estimand, ModelSpec};

use crate::output;
use crate::parse::{AxisKey, AxisValue, Grid, GridAxis};
use crate::{exit, with_jobs, CliError, Format, Measure, SweepCmd, VERSION};

pub const MAX_POINTS: u128 = 100_000;

struct Row {
    key: Vec<AxisKey>,
    cells: Vec<Value>,
}

fn result_columns(measure: Measure) -> &'static [&'static str] {
    match measure {
        Measure::Power => &["power", "standard_error"],
        Measure::Samplesize => &["status", "n", "achieved_power", "limiting_power"],
        Measure::Ssr => &["status", "ratio", "it_n", "eti_n", "limiting_power"],
    }
}

#[derive(Serialize)]
struct BaseConfig {
    design: DesignSpec,
    model: ModelSpec,
    estimand: Option<Estimand>,
    correlation: CorrelationSpec,
    effect: f64,
    target_power: f64,
    alpha: f64,
}

fn describe(value: &AxisValue) -> String {
    match value {
        AxisValue::Real(x) => output::fmt_num(*x),
        AxisValue::Count(n) => n.to_string(),
        AxisValue::Staircase(s) => format!("{}:{}", s.r0, s.r1),
        AxisValue::Estimand(t) => t.to_string(),
    }
}

fn evaluate(cmd: &SweepCmd, base: &DesignSpec, point: &[(GridAxis, &AxisValue)]) -> Result<Row, CliError> {
    let mut design = base.clone();
    let mut args = cmd.problem.clone();
    let mut template = None;
    for (axis, value) in point {
        match (axis, value) {
            (GridAxis::Icc, AxisValue::Real(x)) => args.icc = *x,
            (GridAxis::Cac, AxisValue::Real(x)) => args.cac = *x,
            (GridAxis::BaselineMultiplier, AxisValue::Real(x)) => design.baseline_multiplier = *x,
            (GridAxis::Sequences, AxisValue::Count(n)) => design.sequences = *n,
            (GridAxis::Clusters, AxisValue::Count(n)) => design.clusters_per_sequence = *n,
            (GridAxis::Individuals, AxisValue::Count(n)) => design.individuals_per_cell = *n,
            (GridAxis::ExtraStart, AxisValue::Count(n)) => design.extra_start = *n,
            (GridAxis::ExtraEnd, AxisValue::Count(n)) => design.extra_end = *n,
            (GridAxis::Staircase, AxisValue::Staircase(s)) => design.staircase = Some(*s),
            (GridAxis::Estimand, AxisValue::Estimand(t)) => template = Some(t),
            _ => unreachable!("axis values are parsed per axis"),
        }
    }
    let max_exposure = design.build()?.max_exposure;
    let estimand = template
        .map(|t| t.resolve(max_exposure))
        .transpose()
        .map_err(|m| CliError::invalid("--grid estimand", m))?;
    let problem = args.problem_on(design, estimand)?;

    let mut key = Vec::with_capacity(point.len());
    let mut cells = Vec::new();
    for (_, value) in point {
        match value {
            AxisValue::Real(x) => {
                key.push(AxisKey::Real(*x));
                cells.push(json!(x));
            }
            AxisValue::Count(n) => {
                key.push(AxisKey::Count(*n));
                cells.push(json!(n));
            }
            AxisValue::Staircase(s) => {
                key.push(AxisKey::Pair(s.r0, s.r1));
                cells.push(json!(describe(value)));
            }
            AxisValue::Estimand(_) => {
                key.push(AxisKey::Estimand(problem.estimand));
                cells.push(json!(problem.estimand.to_string()));
            }
        }
    }

    let result = match cmd.measure {
        Measure::Power => serde_json::to_value(problem.power()?),
        Measure::Samplesize => serde_json::to_value(required(&problem, cmd.axis.into())?),
        Measure::Ssr => {
            let mut reference = problem.clone();
            reference.model = ModelSpec::new(cmd.reference_model, problem.model.time);
            serde_json::to_value(ssr(&reference, &problem, cmd.axis.into())?)
        }
    }
    .expect("results serialize");
    cells.extend(result_columns(cmd.measure).iter().map(|c| result.get(*c).cloned().unwrap_or(Value::Null)));
    Ok(Row { key, cells })
}

fn compare(a: &Row, b: &Row) -> Ordering {
    a.key.iter().zip(&b.key).map(|(x, y)| x.cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

pub fn run(cmd: &SweepCmd) -> Result<i32, CliError> {
    let grids: &[Grid] = &cmd.grid;
    for (i, g) in grids.iter().enumerate() {
        if grids[..i].iter().any(|h| h.axis == g.axis) {
            return Err(CliError::invalid("--grid", format!("axis '{}' given more than once", g.axis.name())));
        }
    }
    let total = grids.iter().map(|g| g.values.len() as u128).product::<u128>();
    if total > MAX_POINTS {
        return Err(CliError::invalid("--grid", format!("{total} grid points exceed the limit of {MAX_POINTS}")));
    }
    let base = cmd.problem.design.resolve()?;

    let points: Vec<Vec<(GridAxis, &AxisValue)>> = (0..total as usize)
        .map(|mut index| {
            let mut point = Vec::with_capacity(grids.len());
            for g in grids.iter().rev() {
                point.push((g.axis, &g.values[index % g.values.len()]));
                index /= g.values.len();
            }
            point.reverse();
            point
        })
        .collect();
    let mut rows = with_jobs(cmd.jobs, || {
        points
            .par_iter()
            .map(|p| {
                evaluate(cmd, &base, p).map_err(|e| {
                    let at: Vec<String> = p.iter().map(|(a, v)| format!("{}={}", a.name(), describe(v))).collect();
                    CliError::Context { context: format!("grid point {}", at.join(", ")), source: Box::new(e) }
                })
            })
            .collect::<Result<Vec<Row>, CliError>>()
    })??;
    rows.sort_by(compare);

    let header: Vec<String> = grids
        .iter()
        .map(|g| g.axis.name().to_string())
        .chain(result_columns(cmd.measure).iter().map(|c| c.to_string()))
        .collect();
    let bytes = match cmd.output.format {
        Format::Csv => {
            let table: Vec<Vec<String>> = rows.iter().map(|r| r.cells.iter().map(output::field).collect()).collect();
            output::csv_table(&header, &table)?
        }
        Format::Json => {
            let objects: Vec<Value> = rows
                .iter()
                .map(|r| Value::Object(header.iter().cloned().zip(r.cells.iter().cloned()).collect::<Map<_, _>>()))
                .collect();
            let p = &cmd.problem;
            let config = json!({
                "problem": BaseConfig {
                    design: base.clone(),
                    model: p.model.spec(),
                    estimand: p.model.estimand,
                    correlation: p.correlation(),
                    effect: p.effect,
                    target_power: p.target_power,
                    alpha: p.alpha,
                },
                "grid": grids
                    .iter()
                    .map(|g| json!({ "axis": g.axis.name(), "values": g.values.iter().map(describe).collect::<Vec<_>>() }))
                    .collect::<Vec<_>>(),
                "measure": cmd.measure,
                "axis": cmd.axis,
                "reference_model": ModelSpec::new(cmd.reference_model, p.model.time),
            });
            output::json_bytes(&json!({
                "tool": "swpower",
                "version": VERSION,
                "command": "sweep",
                "config": config,
                "rows": objects,
            }))?
        }
    };
    output::emit(cmd.output.out.as_deref(), &bytes)?;
    Ok(exit::OK)
}
