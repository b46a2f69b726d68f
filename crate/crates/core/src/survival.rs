//! Cox partial likelihood and Harrell's concordance index.

use crate::error::{Error, Result};

/// Predicted hazards with the observed times and event flags they are scored against.
#[derive(Clone, Copy, Debug)]
pub struct SurvivalBatch<'a> {
    pub hazards: &'a [f64],
    pub times: &'a [f64],
    pub events: &'a [bool],
}

impl<'a> SurvivalBatch<'a> {
    pub fn new(hazards: &'a [f64], times: &'a [f64], events: &'a [bool]) -> Result<Self> {
        let batch = SurvivalBatch {
            hazards,
            times,
            events,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.hazards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hazards.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    fn validate(&self) -> Result<()> {
        let n = self.hazards.len();
        if self.times.len() != n {
            return Err(Error::Dimension {
                context: "survival times",
                expected: n,
                got: self.times.len(),
            });
        }
        if self.events.len() != n {
            return Err(Error::Dimension {
                context: "event flags",
                expected: n,
                got: self.events.len(),
            });
        }
        if let Some(t) = self.times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!(
                "survival time must be finite and positive, got {t}"
            )));
        }
        if !self.hazards.iter().all(|h| h.is_finite()) {
            return Err(Error::Numerical("non-finite hazard".into()));
        }
        Ok(())
    }

    fn require_events(&self) -> Result<()> {
        self.validate()?;
        if self.event_count() == 0 {
            return Err(Error::NoEvents(
                "cox loss needs at least one observed event".into(),
            ));
        }
        Ok(())
    }
}

/// Indices still at risk at `times[i]`: every `j` with `times[j] >= times[i]`, ties included.
pub fn risk_set(times: &[f64], i: usize) -> Vec<usize> {
    let t = times[i];
    (0..times.len()).filter(|&j| times[j] >= t).collect()
}

fn log_sum_exp_over(values: &[f64], idx: &[usize]) -> f64 {
    let max = idx
        .iter()
        .map(|&j| values[j])
        .fold(f64::NEG_INFINITY, f64::max);
    max + idx
        .iter()
        .map(|&j| (values[j] - max).exp())
        .sum::<f64>()
        .ln()
}

/// Per-event terms `-(F_i - logsumexp_{j in R(i)} F_j)`, one per sample with an event,
/// in sample order.
pub fn cox_event_terms(batch: &SurvivalBatch) -> Result<Vec<f64>> {
    batch.require_events()?;
    Ok((0..batch.len())
        .filter(|&i| batch.events[i])
        .map(|i| {
            let rs = risk_set(batch.times, i);
            log_sum_exp_over(batch.hazards, &rs) - batch.hazards[i]
        })
        .collect())
}

/// Negative Cox log partial likelihood with Breslow ties.
pub fn cox_loss(batch: &SurvivalBatch) -> Result<f64> {
    Ok(cox_event_terms(batch)?.iter().sum())
}

/// Gradient of [`cox_loss`] with respect to each hazard.
pub fn cox_loss_grad(batch: &SurvivalBatch) -> Result<Vec<f64>> {
    batch.require_events()?;
    let n = batch.len();
    let mut grad = vec![0.0; n];
    for k in (0..n).filter(|&k| batch.events[k]) {
        grad[k] -= 1.0;
        let rs = risk_set(batch.times, k);
        let lse = log_sum_exp_over(batch.hazards, &rs);
        for &j in &rs {
            grad[j] += (batch.hazards[j] - lse).exp();
        }
    }
    Ok(grad)
}

/// Loss and gradient together.
pub fn cox_loss_and_grad(batch: &SurvivalBatch) -> Result<(f64, Vec<f64>)> {
    Ok((cox_loss(batch)?, cox_loss_grad(batch)?))
}

/// Harrell's c-index: higher risk should pair with shorter survival.
///
/// A pair is comparable when the shorter time is an observed event and the
/// times differ. Risk ties earn half credit.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::Dimension {
            context: "concordance inputs",
            expected: n,
            got: times.len().min(events.len()),
        });
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(Error::Numerical("NaN risk in concordance".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    // credit is kept doubled so ties stay integral
    let mut doubled_credit: u64 = 0;
    let mut comparable: u64 = 0;
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        for &i in order[start..end].iter().filter(|&&i| events[i]) {
            for &j in &order[end..] {
                comparable += 1;
                doubled_credit += match risks[i].partial_cmp(&risks[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(doubled_credit as f64 / (2 * comparable) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn risk_set_examples() {
        assert_eq!(risk_set(&[5.0, 3.0, 8.0], 1), vec![0, 1, 2]);
        assert_eq!(risk_set(&[5.0, 3.0, 8.0], 2), vec![2]);
        assert_eq!(risk_set(&[4.0, 4.0], 0), vec![0, 1]);
    }

    #[test]
    fn single_event_sample_has_zero_loss_and_grad() {
        for h in [-3.0, 0.0, 12.5] {
            let hs = [h];
            let b = SurvivalBatch::new(&hs, &[2.0], &[true]).unwrap();
            assert_eq!(cox_loss(&b).unwrap(), 0.0);
            assert_eq!(cox_loss_grad(&b).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn three_sample_enumeration() {
        let h = [0.5, -0.2, 0.3];
        let b = SurvivalBatch::new(&h, &[2.0, 5.0, 9.0], &[true, true, false]).unwrap();
        // event 0: risk set {0,1,2}; event 1: risk set {1,2}
        let t0 = -(h[0] - (h[0].exp() + h[1].exp() + h[2].exp()).ln());
        let t1 = -(h[1] - (h[1].exp() + h[2].exp()).ln());
        assert!((cox_loss(&b).unwrap() - (t0 + t1)).abs() < 1e-14);
    }

    #[test]
    fn zero_events_is_an_error() {
        let b = SurvivalBatch::new(&[0.1, 0.2], &[1.0, 2.0], &[false, false]).unwrap();
        assert!(matches!(cox_loss(&b), Err(Error::NoEvents(_))));
        assert!(matches!(cox_loss_grad(&b), Err(Error::NoEvents(_))));
    }

    #[test]
    fn batch_validation() {
        assert!(SurvivalBatch::new(&[0.0], &[0.0], &[true]).is_err());
        assert!(SurvivalBatch::new(&[0.0], &[1.0, 2.0], &[true]).is_err());
        assert!(SurvivalBatch::new(&[f64::NAN], &[1.0], &[true]).is_err());
    }

    #[test]
    fn extreme_hazards_stay_finite() {
        let h = [800.0, -800.0, 799.0];
        let b = SurvivalBatch::new(&h, &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert!(cox_loss(&b).unwrap().is_finite());
        assert!(cox_loss_grad(&b).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn all_tied_all_events_grad_sums_to_zero() {
        let h = [0.3, -1.1, 2.0, 0.7, -0.2];
        let t = [4.0; 5];
        let b = SurvivalBatch::new(&h, &t, &[true; 5]).unwrap();
        let g = cox_loss_grad(&b).unwrap();
        // each of the 5 events contributes -1 plus softmax weights summing to 1
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn cindex_examples() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let ev = [true; 4];
        assert_eq!(
            concordance_index(&[4.0, 3.0, 2.0, 1.0], &times, &ev).unwrap(),
            1.0
        );
        assert_eq!(
            concordance_index(&[1.0, 2.0, 3.0, 4.0], &times, &ev).unwrap(),
            0.0
        );
        assert_eq!(concordance_index(&[0.7; 4], &times, &ev).unwrap(), 0.5);
    }

    #[test]
    fn cindex_excludes_tied_times_and_censored_first() {
        // only pair (0,2) is comparable: 0 and 1 share a time, 1 is censored
        let c = concordance_index(&[1.0, 5.0, 0.0], &[1.0, 1.0, 2.0], &[true, false, false]);
        assert_eq!(c.unwrap(), 1.0);
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(Error::NoComparablePairs)
        ));
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[3.0, 3.0], &[true, true]),
            Err(Error::NoComparablePairs)
        ));
    }
}
