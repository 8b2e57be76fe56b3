//! Power and sample-size calculations for stepped wedge cluster randomized
//! trials with time-varying treatment effects.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod error;
pub mod estimand;
pub mod gls;
pub mod model;
pub mod search;
pub mod simulate;
pub mod spline;
pub mod twoseq;

pub use design::{DesignLayout, DesignSpec};
pub use error::{Error, Result};
pub use estimand::Estimand;
pub use gls::{CorrelationSpec, VarianceComponents};
pub use model::{EffectStructure, ModelSpec, TimeTrend};
pub use search::{Axis, SearchProblem, SearchResult};
