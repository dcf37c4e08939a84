use super::{AbrPolicy, Observation, PolicyError};

/// Always the same rung.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPolicy {
    index: usize,
}

impl FixedPolicy {
    pub fn new(index: usize, ladder_len: usize) -> Result<Self, PolicyError> {
        if index >= ladder_len {
            return Err(PolicyError::InvalidIndex {
                index,
                ladder: ladder_len,
            });
        }
        Ok(Self { index })
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

impl AbrPolicy for FixedPolicy {
    fn name(&self) -> String {
        format!("fixed-{}", self.index)
    }

    fn select(&mut self, _obs: &Observation) -> Result<usize, PolicyError> {
        Ok(self.index)
    }
}

/// Harmonic mean of recent throughput, then the highest affordable rung.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateBasedPolicy {
    pub window: usize,
}

impl Default for RateBasedPolicy {
    fn default() -> Self {
        Self { window: 5 }
    }
}

impl RateBasedPolicy {
    pub fn estimate(&self, obs: &Observation) -> Option<f64> {
        let recent: Vec<f64> = obs.recent_throughputs().take(self.window).collect();
        if recent.is_empty() {
            return None;
        }
        Some(recent.len() as f64 / recent.iter().map(|t| 1.0 / t).sum::<f64>())
    }
}

impl AbrPolicy for RateBasedPolicy {
    fn name(&self) -> String {
        "rate-based".into()
    }

    fn select(&mut self, obs: &Observation) -> Result<usize, PolicyError> {
        let Some(est) = self.estimate(obs) else {
            return Ok(0);
        };
        Ok(obs
            .ladder_kbps
            .iter()
            .rposition(|kbps| kbps / 1000.0 <= est)
            .unwrap_or(0))
    }
}

/// Linear buffer-to-rung map between a reservoir and a cushion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferBasedPolicy {
    pub reservoir_s: f64,
    pub cushion_s: f64,
}

impl Default for BufferBasedPolicy {
    fn default() -> Self {
        Self {
            reservoir_s: 5.0,
            cushion_s: 35.0,
        }
    }
}

impl AbrPolicy for BufferBasedPolicy {
    fn name(&self) -> String {
        "buffer-based".into()
    }

    fn select(&mut self, obs: &Observation) -> Result<usize, PolicyError> {
        let top = obs.ladder_len().saturating_sub(1);
        if obs.buffer_s <= self.reservoir_s {
            return Ok(0);
        }
        if obs.buffer_s >= self.cushion_s {
            return Ok(top);
        }
        let frac = (obs.buffer_s - self.reservoir_s) / (self.cushion_s - self.reservoir_s);
        Ok(((frac * top as f64).floor() as usize).min(top))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abr::observation::blank_observation;
    use crate::abr::HISTORY;
    use crate::sim::DEFAULT_LADDER_KBPS;
    use proptest::prelude::*;

    fn with_history(tput: &[f64]) -> Observation {
        let mut obs = blank_observation(&DEFAULT_LADDER_KBPS);
        let start = HISTORY - tput.len();
        obs.throughput_mbps[start..].copy_from_slice(tput);
        obs
    }

    #[test]
    fn fixed() {
        let mut p = FixedPolicy::new(0, 5).unwrap();
        assert_eq!(p.select(&with_history(&[9.0])).unwrap(), 0);
        assert!(FixedPolicy::new(5, 5).is_err());
    }

    #[test]
    fn rate_based_examples() {
        let mut p = RateBasedPolicy::default();
        let obs = with_history(&[1.0, 2.0]);
        assert!((p.estimate(&obs).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.select(&obs).unwrap(), 2);
        assert_eq!(p.estimate(&with_history(&[1.7; 8])), Some(1.7));
        assert_eq!(p.select(&blank_observation(&DEFAULT_LADDER_KBPS)).unwrap(), 0);
        // Only the five most recent samples count.
        let obs = with_history(&[0.01, 0.01, 0.01, 3.0, 3.0, 3.0, 3.0, 3.0]);
        assert_eq!(p.select(&obs).unwrap(), 4);
    }

    #[test]
    fn buffer_based_examples() {
        let mut p = BufferBasedPolicy::default();
        let mut obs = blank_observation(&DEFAULT_LADDER_KBPS);
        for (buffer, want) in [(0.0, 0), (60.0, 4), (20.0, 2), (5.0, 0), (34.9, 3)] {
            obs.buffer_s = buffer;
            assert_eq!(p.select(&obs).unwrap(), want, "buffer {buffer}");
        }
    }

    proptest! {
        #[test]
        fn rate_based_is_monotone(base in prop::collection::vec(0.05f64..6.0, 1..=HISTORY),
                                  bump in prop::collection::vec(0.0f64..3.0, HISTORY)) {
            let higher: Vec<f64> = base.iter().zip(&bump).map(|(b, d)| b + d).collect();
            let mut p = RateBasedPolicy::default();
            let lo = p.select(&with_history(&base)).unwrap();
            let hi = p.select(&with_history(&higher)).unwrap();
            prop_assert!(hi >= lo);
        }

        #[test]
        fn buffer_based_is_monotone(a in 0.0f64..60.0, b in 0.0f64..60.0) {
            let mut p = BufferBasedPolicy::default();
            let mut obs = blank_observation(&DEFAULT_LADDER_KBPS);
            obs.buffer_s = a.min(b);
            let lo = p.select(&obs).unwrap();
            obs.buffer_s = a.max(b);
            prop_assert!(p.select(&obs).unwrap() >= lo);
        }
    }
}
