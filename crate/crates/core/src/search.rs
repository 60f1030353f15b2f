//! Log-scale bisection for the first point where a non-increasing function
//! drops to a threshold.

use crate::error::{invalid, Error, Result};

/// Bracket and termination rule for a scale search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBracket {
    pub lo: f64,
    pub hi: f64,
    /// Relative width `hi / lo - 1` at which bisection stops.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SearchBracket {
    fn default() -> Self {
        SearchBracket {
            lo: 1e-6,
            hi: 1e12,
            rel_tol: 1e-6,
            max_iter: 200,
        }
    }
}

impl SearchBracket {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 0.0) || !self.hi.is_finite() {
            return Err(invalid(
                "bracket",
                format!("bad bounds [{}, {}]", self.lo, self.hi),
            ));
        }
        if self.lo > self.hi {
            return Err(Error::EmptyBracket {
                lo: self.lo,
                hi: self.hi,
            });
        }
        if !(self.rel_tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    /// Smallest bracketed point found with `f <= threshold` (or `hi` when none).
    pub at: f64,
    pub crossed: bool,
    /// Every `(point, f(point))` evaluated, sorted by point.
    pub evaluations: Vec<(f64, f64)>,
}

/// Positive stand-in for a zero lower bound; log-bisection needs `lo > 0`.
const ZERO_FLOOR: f64 = 1e-150;

/// Finds `inf { x in [lo, hi] : f(x) <= threshold }` for non-increasing `f`.
///
/// Monotonicity is checked against every evaluation; a violation larger
/// than roundoff is reported instead of being bisected through.
pub fn first_crossing<F>(mut f: F, threshold: f64, bracket: SearchBracket) -> Result<Crossing>
where
    F: FnMut(f64) -> f64,
{
    bracket.validate()?;
    let mut evals = Vec::new();
    let mut eval = |x: f64, evals: &mut Vec<(f64, f64)>| {
        let v = f(x);
        evals.push((x, v));
        v
    };

    let f_lo = eval(bracket.lo, &mut evals);
    if f_lo <= threshold {
        return Ok(finish(bracket.lo, true, evals));
    }
    let f_hi = eval(bracket.hi, &mut evals);
    check_order(bracket.lo, f_lo, bracket.hi, f_hi)?;
    if f_hi > threshold {
        return Ok(finish(bracket.hi, false, evals));
    }

    let (mut lo, mut hi) = (bracket.lo.max(ZERO_FLOOR), bracket.hi);
    let (mut v_lo, mut v_hi) = (f_lo, f_hi);
    if lo > bracket.lo {
        v_lo = eval(lo, &mut evals);
        check_order(lo, v_lo, hi, v_hi)?;
        if v_lo <= threshold {
            return Ok(finish(lo, true, evals));
        }
    }
    for _ in 0..bracket.max_iter {
        if hi / lo - 1.0 <= bracket.rel_tol {
            break;
        }
        let mid = (lo.ln() + 0.5 * (hi.ln() - lo.ln())).exp();
        let v = eval(mid, &mut evals);
        check_order(lo, v_lo, mid, v)?;
        check_order(mid, v, hi, v_hi)?;
        if v <= threshold {
            hi = mid;
            v_hi = v;
        } else {
            lo = mid;
            v_lo = v;
        }
    }
    Ok(finish(hi, true, evals))
}

fn finish(at: f64, crossed: bool, mut evaluations: Vec<(f64, f64)>) -> Crossing {
    evaluations.sort_by(|a, b| a.0.total_cmp(&b.0));
    Crossing {
        at,
        crossed,
        evaluations,
    }
}

fn check_order(x_lo: f64, v_lo: f64, x_hi: f64, v_hi: f64) -> Result<()> {
    let slack = 1e-9 * (v_lo.abs() + v_hi.abs()) + 1e-300;
    if v_hi > v_lo + slack {
        Err(Error::NonMonotoneResidual {
            tau_lo: x_lo,
            r_lo: v_lo,
            tau_hi: x_hi,
            r_hi: v_hi,
        })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_reciprocal_crossing() {
        let c = first_crossing(|x| 1.0 / x, 0.25, SearchBracket::default()).unwrap();
        assert!(c.crossed);
        assert!((c.at - 4.0).abs() <= 4.0 * 2e-6);
        assert!(1.0 / c.at <= 0.25);
    }

    #[test]
    fn immediate_and_missing_crossings() {
        let c = first_crossing(|_| 0.0, 1.0, SearchBracket::default()).unwrap();
        assert_eq!((c.at, c.crossed), (1e-6, true));
        let c = first_crossing(|_| 2.0, 1.0, SearchBracket::default()).unwrap();
        assert_eq!((c.at, c.crossed), (1e12, false));
    }

    #[test]
    fn rejects_empty_bracket_and_non_monotone() {
        let b = SearchBracket {
            lo: 5.0,
            hi: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            first_crossing(|x| -x, 0.0, b),
            Err(Error::EmptyBracket { .. })
        ));
        let bumpy = |x: f64| {
            if x < 10.0 {
                5.0
            } else if x < 1e3 {
                0.0
            } else {
                9.0
            }
        };
        let r = first_crossing(bumpy, 0.5, SearchBracket::default());
        assert!(matches!(r, Err(Error::NonMonotoneResidual { .. })));
    }
}
