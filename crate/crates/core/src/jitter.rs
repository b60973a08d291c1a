//! Noise escalation shared by the fast and dense paths.

use crate::error::{Error, Result};

pub const MAX_ESCALATIONS: u32 = 6;
pub const FACTOR: f64 = 10.0;
/// Escalation starting point when the configured noise is exactly zero.
pub const ZERO_NOISE_START: f64 = 1e-10;

fn escalate(xi: &[f64]) -> Vec<f64> {
    xi.iter().map(|&x| if x > 0.0 { x * FACTOR } else { ZERO_NOISE_START }).collect()
}

fn is_breakdown(e: &Error) -> bool {
    matches!(e, Error::SchurBreakdown { .. } | Error::CholeskyFailed(_))
}

/// Runs `f` with the given noise, multiplying it by [`FACTOR`] after each
/// breakdown. Returns the result, the noise that succeeded and the number
/// of escalations.
pub fn with_escalation<T>(xi: &[f64], mut f: impl FnMut(&[f64]) -> Result<T>) -> Result<(T, Vec<f64>, u32)> {
    let mut cur = xi.to_vec();
    let mut count = 0;
    loop {
        match f(&cur) {
            Ok(v) => return Ok((v, cur, count)),
            Err(e) if is_breakdown(&e) && count < MAX_ESCALATIONS => {
                log::debug!("escalating noise after {e}");
                cur = escalate(&cur);
                count += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escalates_until_success() {
        let (v, xi, n) = with_escalation(&[1e-8, 0.0], |xi| {
            if xi[0] < 1e-6 {
                Err(Error::SchurBreakdown { stage: 1, min_real: -1.0 })
            } else {
                Ok(xi[1])
            }
        })
        .unwrap();
        assert_eq!(n, 2);
        assert!((xi[0] - 1e-6).abs() < 1e-20);
        assert!(v > 0.0);
    }

    #[test]
    fn gives_up_after_schedule() {
        let mut calls = 0;
        let r: Result<((), _, _)> = with_escalation(&[1.0], |_| {
            calls += 1;
            Err(Error::CholeskyFailed(0.0))
        });
        assert!(r.is_err());
        assert_eq!(calls, MAX_ESCALATIONS + 1);
    }

    #[test]
    fn other_errors_pass_through() {
        let r: Result<((), _, _)> = with_escalation(&[1.0], |_| Err(Error::SingularSystem(2)));
        assert_eq!(r.unwrap_err(), Error::SingularSystem(2));
    }
}
