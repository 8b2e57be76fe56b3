//! Python bindings: a `Problem` object wrapping the analytic power,
//! sample-size and simulation routines.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use swpower::design::Staircase;
use swpower::model::EffectStructure;
use swpower::search::{calibrate_effect, required, ssr, SsrOutcome};
use swpower::simulate::{mc_power, CalendarTrend, EffectCurve, FitMethod, SimScenario};
use swpower::{Axis, CorrelationSpec, DesignSpec, Estimand, ModelSpec, SearchProblem, SearchResult, TimeTrend};

fn py_err(e: swpower::Error) -> PyErr {
    match e {
        swpower::Error::Numerical(_) | swpower::Error::Io(_) | swpower::Error::Csv(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn axis(name: &str) -> PyResult<Axis> {
    match name {
        "individuals" => Ok(Axis::Individuals),
        "clusters" => Ok(Axis::Clusters),
        _ => Err(PyValueError::new_err(format!("axis must be 'individuals' or 'clusters', got '{name}'"))),
    }
}

fn search_result<'py>(py: Python<'py>, r: SearchResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match r {
        SearchResult::Solved { n, achieved_power } => {
            d.set_item("status", "solved")?;
            d.set_item("n", n)?;
            d.set_item("achieved_power", achieved_power)?;
        }
        SearchResult::Infeasible { limiting_power } => {
            d.set_item("status", "infeasible")?;
            d.set_item("limiting_power", limiting_power)?;
        }
    }
    Ok(d)
}

/// A stepped wedge power problem.
///
/// `model` is one of `it`, `eti`, `dct:W`, `ncs:D`, `it-drop:W`; `time` is
/// `cat` or `lin`; `estimand` is `TATE(a,b)` or `PTE(s)` and defaults to
/// the full exposure range.
#[pyclass(module = "swpower_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Problem {
    inner: SearchProblem,
}

#[pymethods]
impl Problem {
    #[new]
    #[pyo3(signature = (
        sequences,
        clusters_per_sequence,
        individuals_per_cell,
        model = "eti",
        time = "cat",
        estimand = None,
        icc = 0.05,
        cac = 0.75,
        sigma2 = 1.0,
        effect = 0.2,
        target_power = 0.9,
        alpha = 0.05,
        extra_start = 0,
        extra_end = 0,
        baseline_multiplier = 1.0,
        staircase = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sequences: u32,
        clusters_per_sequence: u32,
        individuals_per_cell: u32,
        model: &str,
        time: &str,
        estimand: Option<&str>,
        icc: f64,
        cac: f64,
        sigma2: f64,
        effect: f64,
        target_power: f64,
        alpha: f64,
        extra_start: u32,
        extra_end: u32,
        baseline_multiplier: f64,
        staircase: Option<(u32, u32)>,
    ) -> PyResult<Self> {
        let design = DesignSpec {
            sequences,
            clusters_per_sequence,
            individuals_per_cell,
            extra_start,
            extra_end,
            baseline_multiplier,
            staircase: staircase.map(|(r0, r1)| Staircase { r0, r1 }),
        };
        let layout = design.build().map_err(py_err)?;
        let model = ModelSpec::new(
            model.parse::<EffectStructure>().map_err(py_err)?,
            time.parse::<TimeTrend>().map_err(py_err)?,
        );
        model.check(layout.max_exposure).map_err(py_err)?;
        let estimand = match estimand {
            Some(s) => s.parse::<Estimand>().map_err(py_err)?,
            None => Estimand::tate(0, layout.max_exposure),
        };
        estimand.check(layout.max_exposure).map_err(py_err)?;
        let inner = SearchProblem {
            design,
            model,
            estimand,
            correlation: CorrelationSpec { icc, cac, sigma2 },
            effect,
            target_power,
            alpha,
        };
        inner.validate().map_err(py_err)?;
        inner.variance_components().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn estimand(&self) -> String {
        self.inner.estimand.to_string()
    }

    #[getter]
    fn model(&self) -> String {
        self.inner.model.to_string()
    }

    #[getter]
    fn effect(&self) -> f64 {
        self.inner.effect
    }

    /// Copy with a different effect.
    fn with_effect(&self, effect: f64) -> Self {
        let mut inner = self.inner.clone();
        inner.effect = effect;
        Self { inner }
    }

    /// Analytic power: dict with `power`, `standard_error`, `effect_value`, `alpha`.
    fn power<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.power().map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("power", r.power)?;
        d.set_item("standard_error", r.standard_error)?;
        d.set_item("effect_value", r.effect_value)?;
        d.set_item("alpha", r.alpha)?;
        Ok(d)
    }

    /// Smallest individuals per cell or clusters per sequence reaching the target power.
    #[pyo3(signature = (axis = "individuals"))]
    fn sample_size<'py>(&self, py: Python<'py>, axis: &str) -> PyResult<Bound<'py, PyDict>> {
        search_result(py, required(&self.inner, self::axis(axis)?).map_err(py_err)?)
    }

    /// Required sample size under this model divided by that under `reference`.
    #[pyo3(signature = (reference = "it", axis = "clusters"))]
    fn ssr<'py>(&self, py: Python<'py>, reference: &str, axis: &str) -> PyResult<Bound<'py, PyDict>> {
        let mut p_ref = self.inner.clone();
        p_ref.model = ModelSpec::new(reference.parse::<EffectStructure>().map_err(py_err)?, self.inner.model.time);
        let d = PyDict::new(py);
        match ssr(&p_ref, &self.inner, self::axis(axis)?).map_err(py_err)? {
            SsrOutcome::Ratio { ratio, it_n, eti_n } => {
                d.set_item("status", "ratio")?;
                d.set_item("ratio", ratio)?;
                d.set_item("reference_n", it_n)?;
                d.set_item("n", eti_n)?;
            }
            SsrOutcome::Infeasible { limiting_power } => {
                d.set_item("status", "infeasible")?;
                d.set_item("limiting_power", limiting_power)?;
            }
        }
        Ok(d)
    }

    /// Effect size giving power `target`.
    fn calibrate_effect(&self, target: f64) -> PyResult<f64> {
        let mut p = self.inner.clone();
        p.target_power = target;
        calibrate_effect(&p).map_err(py_err)
    }

    /// Cell layout as a list of dicts.
    fn layout<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let layout = self.inner.design.build().map_err(py_err)?;
        layout
            .cells
            .iter()
            .map(|c| {
                let d = PyDict::new(py);
                d.set_item("cluster", c.cluster)?;
                d.set_item("sequence", c.sequence)?;
                d.set_item("period", c.period)?;
                d.set_item("observed", c.observed)?;
                d.set_item("treatment", c.treatment)?;
                d.set_item("exposure", c.exposure)?;
                d.set_item("cell_size", c.cell_size)?;
                Ok(d)
            })
            .collect()
    }

    /// Monte Carlo power. `curve` lists the effect at exposure times
    /// 1, 2, ...; it defaults to the problem's effect at every exposure.
    /// `trend` lists the period means. `method` is `reml` or `known`.
    #[pyo3(signature = (reps = 1000, seed = 1, method = "reml", curve = None, trend = None))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        reps: u32,
        seed: u64,
        method: &str,
        curve: Option<Vec<f64>>,
        trend: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let p = &self.inner;
        let vc = p.variance_components().map_err(py_err)?;
        let method = match method {
            "reml" => FitMethod::Reml,
            "known" => FitMethod::KnownVariance(vc),
            _ => return Err(PyValueError::new_err(format!("method must be 'reml' or 'known', got '{method}'"))),
        };
        let scenario = SimScenario {
            layout: p.design.build().map_err(py_err)?,
            curve: curve.map_or(EffectCurve::Immediate { delta: p.effect }, |values| EffectCurve::Tabulated { values }),
            trend: trend.map_or_else(CalendarTrend::default, |values| CalendarTrend::Tabulated { values }),
            vc,
            reps,
            seed,
            alpha: p.alpha,
        };
        let (model, estimand) = (p.model, p.estimand);
        let mc = py
            .detach(|| mc_power(&scenario, &model, &estimand, &method))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("power", mc.power)?;
        d.set_item("mc_standard_error", mc.mc_standard_error)?;
        d.set_item("reps", mc.reps)?;
        d.set_item("rejections", mc.rejections)?;
        d.set_item("failures", mc.failures)?;
        d.set_item("warning", mc.warning)?;
        d.set_item("estimand_value", scenario.curve.estimand_value(&estimand, scenario.layout.max_exposure))?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let d = &self.inner.design;
        format!(
            "Problem(sequences={}, clusters_per_sequence={}, individuals_per_cell={}, model='{}', estimand='{}')",
            d.sequences, d.clusters_per_sequence, d.individuals_per_cell, self.inner.model, self.inner.estimand
        )
    }
}

#[pymodule]
fn swpower_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
