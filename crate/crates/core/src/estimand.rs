//! Target estimands and their contrasts over model treatment columns.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::DesignLayout;
use crate::error::{Error, Result};
use crate::gls::ContrastVector;
use crate::model::{treatment_labels, EffectStructure, ModelSpec};
use crate::spline::NaturalSpline;

/// Serialized in its textual form, `"TATE(a,b)"` or `"PTE(s)"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Estimand {
    /// Mean effect over exposure times `s1 + 1 ..= s2`.
    Tate { s1: u32, s2: u32 },
    /// Effect at exposure time `s`.
    Pte { s: u32 },
}

/// How an NCS model turns a TATE into a contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SplineAverage {
    /// Mean of basis rows at the integer exposures in range.
    #[default]
    DiscreteMean,
    /// Integral of the basis over `[s1, s2]` divided by `s2 - s1`.
    ExactIntegral,
}

impl Estimand {
    pub fn tate(s1: u32, s2: u32) -> Self {
        Self::Tate { s1, s2 }
    }

    pub fn pte(s: u32) -> Self {
        Self::Pte { s }
    }

    /// Checks the estimand is well formed and within `1..=max_exposure`.
    pub fn check(&self, max_exposure: u32) -> Result<()> {
        match *self {
            Self::Tate { s1, s2 } => {
                if s1 >= s2 {
                    return Err(Error::Range(format!("{self}: need s1 < s2")));
                }
                if s2 > max_exposure {
                    return Err(Error::Range(format!("{self}: s2 exceeds max exposure {max_exposure}")));
                }
            }
            Self::Pte { s } => {
                if s == 0 || s > max_exposure {
                    return Err(Error::Range(format!("{self}: s must lie in 1..={max_exposure}")));
                }
            }
        }
        Ok(())
    }

    /// Exposure times the estimand averages over.
    pub fn exposures(&self) -> std::ops::RangeInclusive<u32> {
        match *self {
            Self::Tate { s1, s2 } => s1 + 1..=s2,
            Self::Pte { s } => s..=s,
        }
    }

    /// Value of the estimand for an effect curve given per exposure time.
    pub fn evaluate(&self, curve: impl Fn(u32) -> f64) -> f64 {
        let range = self.exposures();
        let n = (range.end() - range.start() + 1) as f64;
        range.map(curve).sum::<f64>() / n
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tate { s1, s2 } => write!(f, "TATE({s1},{s2})"),
            Self::Pte { s } => write!(f, "PTE({s})"),
        }
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        let bad = || Error::Parse(format!("estimand '{s}' is not TATE(a,b) or PTE(s)"));
        let (name, rest) = compact.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<u32> = args
            .split(',')
            .map(|a| a.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (name, nums.as_slice()) {
            ("TATE", [a, b]) => Ok(Self::tate(*a, *b)),
            ("PTE", [a]) => Ok(Self::pte(*a)),
            _ => Err(bad()),
        }
    }
}

impl From<Estimand> for String {
    fn from(e: Estimand) -> Self {
        e.to_string()
    }
}

impl TryFrom<String> for Estimand {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Contrast for `e` under `model` fitted to `layout`.
pub fn contrast_for(e: &Estimand, model: &ModelSpec, layout: &DesignLayout) -> Result<ContrastVector> {
    contrast_for_exposure(e, model, layout.max_exposure, SplineAverage::DiscreteMean)
}

/// Contrast for `e` given only the layout's maximum exposure.
pub fn contrast_for_exposure(e: &Estimand, model: &ModelSpec, max_exposure: u32, spline_average: SplineAverage) -> Result<ContrastVector> {
    e.check(max_exposure)?;
    model.check(max_exposure)?;
    let labels = treatment_labels(model, max_exposure);
    let range = e.exposures();
    let n = (range.end() - range.start() + 1) as f64;
    let mut weights = vec![0.0; labels.len()];
    let mut note = None;
    match model.effect {
        EffectStructure::It => weights[0] = 1.0,
        EffectStructure::ItDropWashout { washout } => {
            if *range.start() <= washout {
                return Err(Error::EstimandNotIdentified(format!(
                    "{e} reaches into the dropped washout exposures 1..={washout}"
                )));
            }
            weights[0] = 1.0;
        }
        EffectStructure::Eti => {
            for s in range {
                weights[(s - 1) as usize] = 1.0 / n;
            }
        }
        EffectStructure::Dct { washout } => {
            let mut straddle = (false, false);
            for s in range {
                if s <= washout {
                    weights[(s - 1) as usize] += 1.0 / n;
                    straddle.0 = true;
                } else {
                    weights[washout as usize] += 1.0 / n;
                    straddle.1 = true;
                }
            }
            if straddle.0 && straddle.1 {
                note = Some(format!(
                    "{e} straddles the washout boundary {washout}; washout effects and the constant effect are weighted by the share of exposures each covers"
                ));
            }
        }
        EffectStructure::Ncs { df } => {
            let spline = NaturalSpline::new(df as usize, (1.0, max_exposure as f64))?;
            match (e, spline_average) {
                (Estimand::Tate { s1, s2 }, SplineAverage::ExactIntegral) => {
                    weights = integrate_basis(&spline, *s1 as f64, *s2 as f64);
                }
                _ => {
                    for s in range {
                        for (w, b) in weights.iter_mut().zip(spline.row(s as f64)) {
                            *w += b / n;
                        }
                    }
                }
            }
        }
    }
    let c = ContrastVector::new(labels, weights)?;
    Ok(match note {
        Some(n) => c.with_note(n),
        None => c,
    })
}

/// Mean of the basis over `[a, b]` by composite Simpson on unit-width
/// panels, each split finely enough that the cubic pieces are exact up to
/// rounding.
fn integrate_basis(spline: &NaturalSpline, a: f64, b: f64) -> Vec<f64> {
    let panels = ((b - a).ceil() as usize).max(1) * 512;
    let h = (b - a) / panels as f64;
    let mut acc = vec![0.0; spline.dim()];
    for i in 0..=panels {
        let w = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for (acc, v) in acc.iter_mut().zip(spline.row(a + i as f64 * h)) {
            *acc += w * v;
        }
    }
    acc.iter().map(|v| v * h / 3.0 / (b - a)).collect()
}
