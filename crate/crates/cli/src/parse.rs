//! Parsers for the compact textual forms accepted on the command line.

use std::cmp::Ordering;
use std::fmt;

use swpower::design::Staircase;
use swpower::simulate::{CalendarTrend, EffectCurve};
use swpower::Estimand;

fn number(s: &str) -> Result<f64, String> {
    s.trim().parse::<f64>().map_err(|_| format!("'{s}' is not a number"))
}

fn numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(number).collect()
}

fn count(s: &str) -> Result<u32, String> {
    s.trim().parse::<u32>().map_err(|_| format!("'{s}' is not a non-negative integer"))
}

/// `R0:R1`.
pub fn staircase(s: &str) -> Result<Staircase, String> {
    let (r0, r1) = s.split_once(':').ok_or_else(|| format!("expected R0:R1, got '{s}'"))?;
    Ok(Staircase { r0: count(r0)?, r1: count(r1)? })
}

/// `immediate:D`, `jump-linear:A,B`, `washout:D:R1,..,Rw` or
/// `tabulated:V1,..,Vn`.
pub fn curve(s: &str) -> Result<EffectCurve, String> {
    let (kind, rest) = s.split_once(':').ok_or_else(|| format!("expected KIND:VALUES, got '{s}'"))?;
    match kind.trim().to_ascii_lowercase().as_str() {
        "immediate" => Ok(EffectCurve::Immediate { delta: number(rest)? }),
        "jump-linear" => match numbers(rest)?.as_slice() {
            [start, end] => Ok(EffectCurve::JumpLinear { start: *start, end: *end }),
            _ => Err("jump-linear needs two values: START,END".into()),
        },
        "washout" => {
            let (delta, ramp) = rest.split_once(':').ok_or("washout needs DELTA:R1,..,Rw")?;
            let ramp = numbers(ramp)?;
            Ok(EffectCurve::WashoutConstant { washout: ramp.len() as u32, ramp, delta: number(delta)? })
        }
        "tabulated" => Ok(EffectCurve::Tabulated { values: numbers(rest)? }),
        other => Err(format!("unknown curve kind '{other}'")),
    }
}

/// `flat`, `linear:FROM,TO` or `tabulated:V1,..,VJ`.
pub fn trend(s: &str) -> Result<CalendarTrend, String> {
    if s.trim().eq_ignore_ascii_case("flat") {
        return Ok(CalendarTrend::default());
    }
    let (kind, rest) = s.split_once(':').ok_or_else(|| format!("expected flat or KIND:VALUES, got '{s}'"))?;
    match kind.trim().to_ascii_lowercase().as_str() {
        "linear" => match numbers(rest)?.as_slice() {
            [from, to] => Ok(CalendarTrend::Linear { from: *from, to: *to }),
            _ => Err("linear trend needs two values: FROM,TO".into()),
        },
        "tabulated" => Ok(CalendarTrend::Tabulated { values: numbers(rest)? }),
        other => Err(format!("unknown trend kind '{other}'")),
    }
}

/// An estimand argument: a constant or `S` plus or minus a constant, where
/// `S` is the largest exposure time of the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    relative: bool,
    offset: i64,
}

impl Term {
    fn parse(s: &str) -> Result<Self, String> {
        let bad = || format!("'{s}' is not an integer, S, S+k or S-k");
        let s = s.trim();
        match s.strip_prefix('S') {
            None => Ok(Self { relative: false, offset: s.parse().map_err(|_| bad())? }),
            Some("") => Ok(Self { relative: true, offset: 0 }),
            Some(rest) => {
                let rest = rest.trim();
                let offset: i64 = match rest.strip_prefix('+') {
                    Some(k) => k.trim().parse().map_err(|_| bad())?,
                    None => rest.strip_prefix('-').ok_or_else(bad)?.trim().parse::<i64>().map(|k| -k).map_err(|_| bad())?,
                };
                Ok(Self { relative: true, offset })
            }
        }
    }

    fn resolve(&self, s: u32) -> Result<u32, String> {
        let v = if self.relative { s as i64 + self.offset } else { self.offset };
        u32::try_from(v).map_err(|_| format!("estimand argument evaluates to {v} at S={s}"))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.relative, self.offset) {
            (false, k) => write!(f, "{k}"),
            (true, 0) => write!(f, "S"),
            (true, k) if k > 0 => write!(f, "S+{k}"),
            (true, k) => write!(f, "S-{}", -k),
        }
    }
}

/// `TATE(a,b)` or `PTE(s)` whose arguments may refer to `S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EstimandTemplate {
    Tate(Term, Term),
    Pte(Term),
}

impl EstimandTemplate {
    pub fn parse(s: &str) -> Result<Self, String> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        let bad = || format!("expected TATE(a,b) or PTE(s), got '{s}'");
        let (name, args) = compact.split_once('(').ok_or_else(bad)?;
        let args = args.strip_suffix(')').ok_or_else(bad)?;
        let terms: Vec<Term> = args.split(',').map(Term::parse).collect::<Result<_, _>>()?;
        match (name, terms.as_slice()) {
            ("TATE", [a, b]) => Ok(Self::Tate(*a, *b)),
            ("PTE", [a]) => Ok(Self::Pte(*a)),
            _ => Err(bad()),
        }
    }

    pub fn resolve(&self, s: u32) -> Result<Estimand, String> {
        match self {
            Self::Tate(a, b) => Ok(Estimand::tate(a.resolve(s)?, b.resolve(s)?)),
            Self::Pte(a) => Ok(Estimand::pte(a.resolve(s)?)),
        }
    }
}

impl fmt::Display for EstimandTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tate(a, b) => write!(f, "TATE({a},{b})"),
            Self::Pte(a) => write!(f, "PTE({a})"),
        }
    }
}

/// A sweepable input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    Icc,
    Cac,
    Sequences,
    Clusters,
    Individuals,
    ExtraStart,
    ExtraEnd,
    BaselineMultiplier,
    Staircase,
    Estimand,
}

impl GridAxis {
    pub const ALL: [(&'static str, GridAxis); 10] = [
        ("icc", Self::Icc),
        ("cac", Self::Cac),
        ("sequences", Self::Sequences),
        ("clusters", Self::Clusters),
        ("individuals", Self::Individuals),
        ("extra-start", Self::ExtraStart),
        ("extra-end", Self::ExtraEnd),
        ("baseline-multiplier", Self::BaselineMultiplier),
        ("staircase", Self::Staircase),
        ("estimand", Self::Estimand),
    ];

    pub fn name(&self) -> &'static str {
        Self::ALL.iter().find(|(_, a)| a == self).map(|(n, _)| *n).unwrap_or_default()
    }

    fn value(&self, s: &str) -> Result<AxisValue, String> {
        match self {
            Self::Icc | Self::Cac | Self::BaselineMultiplier => number(s).map(AxisValue::Real),
            Self::Staircase => staircase(s).map(AxisValue::Staircase),
            Self::Estimand => EstimandTemplate::parse(s).map(AxisValue::Estimand),
            _ => count(s).map(AxisValue::Count),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AxisValue {
    Real(f64),
    Count(u32),
    Staircase(Staircase),
    Estimand(EstimandTemplate),
}

/// Sort key of a resolved axis value.
#[derive(Debug, Clone, PartialEq)]
pub enum AxisKey {
    Real(f64),
    Count(u32),
    Pair(u32, u32),
    Estimand(Estimand),
}

impl AxisKey {
    pub fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Self::Real(a), Self::Real(b)) => a.total_cmp(b),
            (Self::Count(a), Self::Count(b)) => a.cmp(b),
            (Self::Pair(a, b), Self::Pair(c, d)) => (a, b).cmp(&(c, d)),
            (Self::Estimand(a), Self::Estimand(b)) => a.cmp(b),
            _ => Ordering::Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axis: GridAxis,
    pub values: Vec<AxisValue>,
}

/// `NAME=V1,V2,..`; estimand values are separated by `;` since they contain
/// commas. An empty value list gives an empty axis.
pub fn grid(s: &str) -> Result<Grid, String> {
    let (name, values) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUES, got '{s}'"))?;
    let name = name.trim().to_ascii_lowercase();
    let axis = GridAxis::ALL
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, a)| *a)
        .ok_or_else(|| {
            let known: Vec<&str> = GridAxis::ALL.iter().map(|(n, _)| *n).collect();
            format!("unknown grid axis '{name}', expected one of {}", known.join(", "))
        })?;
    let sep = if axis == GridAxis::Estimand { ';' } else { ',' };
    let values = if values.trim().is_empty() {
        Vec::new()
    } else {
        values.split(sep).map(|v| axis.value(v)).collect::<Result<_, _>>()?
    };
    Ok(Grid { axis, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_and_trends() {
        assert_eq!(curve("immediate:0.2").unwrap(), EffectCurve::Immediate { delta: 0.2 });
        assert_eq!(curve("jump-linear:0.1,0.3").unwrap(), EffectCurve::JumpLinear { start: 0.1, end: 0.3 });
        assert_eq!(
            curve("washout:0.2:0.05,0.1").unwrap(),
            EffectCurve::WashoutConstant { washout: 2, ramp: vec![0.05, 0.1], delta: 0.2 }
        );
        assert!(curve("bogus:1").is_err());
        assert!(curve("jump-linear:1").is_err());
        assert_eq!(trend("flat").unwrap(), CalendarTrend::default());
        assert_eq!(trend("linear:0,1").unwrap(), CalendarTrend::Linear { from: 0.0, to: 1.0 });
    }

    #[test]
    fn estimand_templates_resolve_against_s() {
        let t = EstimandTemplate::parse("tate(0, S-3)").unwrap();
        assert_eq!(t.to_string(), "TATE(0,S-3)");
        assert_eq!(t.resolve(8).unwrap(), Estimand::tate(0, 5));
        assert!(t.resolve(2).is_err());
        assert_eq!(EstimandTemplate::parse("PTE(S)").unwrap().resolve(6).unwrap(), Estimand::pte(6));
        assert_eq!(EstimandTemplate::parse("TATE(1,4)").unwrap().resolve(9).unwrap(), Estimand::tate(1, 4));
        assert!(EstimandTemplate::parse("ATE(1)").is_err());
        assert!(EstimandTemplate::parse("PTE(Q)").is_err());
    }

    #[test]
    fn grid_axes() {
        let g = grid("estimand=TATE(0,S);TATE(0,S-3)").unwrap();
        assert_eq!(g.axis, GridAxis::Estimand);
        assert_eq!(g.values.len(), 2);
        assert_eq!(grid("icc=0.01,0.05").unwrap().values, vec![AxisValue::Real(0.01), AxisValue::Real(0.05)]);
        assert!(grid("icc=").unwrap().values.is_empty());
        assert!(grid("sequences=4,x").is_err());
        assert!(grid("bogus=1").is_err());
        assert_eq!(GridAxis::ExtraStart.name(), "extra-start");
    }
}
