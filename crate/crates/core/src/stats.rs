use serde::{Deserialize, Serialize};

/// Streaming count/mean/sum-of-squared-deviations accumulator (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += delta * nb / n as f64;
        self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        self.count = n;
    }

    /// Unbiased sample variance; `NaN` below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

impl FromIterator<f64> for RunningMoments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = RunningMoments::new();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// `(mean_a − mean_b) / sqrt(se_a² + se_b²)`.
pub fn welch_z(mean_a: f64, se_a: f64, mean_b: f64, se_b: f64) -> f64 {
    let joint = (se_a * se_a + se_b * se_b).sqrt();
    let d = mean_a - mean_b;
    if joint == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(d)
        }
    } else {
        d / joint
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_two_pass_formulas() {
        let xs = [1.0, 4.0, -2.0, 8.5, 3.25];
        let m: RunningMoments = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m.mean - mean).abs() < 1e-15);
        assert!((m.variance() - var).abs() < 1e-13);
        assert!((m.stderr() - (var / 5.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 13.0).collect();
        let all: RunningMoments = xs.iter().copied().collect();
        let mut a: RunningMoments = xs[..11].iter().copied().collect();
        let b: RunningMoments = xs[11..].iter().copied().collect();
        a.merge(&b);
        assert_eq!(a.count, all.count);
        assert!((a.mean - all.mean).abs() < 1e-13);
        assert!((a.m2 - all.m2).abs() < 1e-10 * all.m2);
        let mut empty = RunningMoments::new();
        empty.merge(&all);
        assert_eq!(empty, all);
    }

    #[test]
    fn constant_stream_has_zero_stderr() {
        let m: RunningMoments = std::iter::repeat(1.0).take(2).collect();
        assert_eq!((m.mean, m.stderr()), (1.0, 0.0));
        assert!(RunningMoments::new().variance().is_nan());
    }

    #[test]
    fn welch_z_edge_cases() {
        assert_eq!(welch_z(1.0, 0.0, 1.0, 0.0), 0.0);
        assert_eq!(welch_z(2.0, 0.0, 1.0, 0.0), f64::INFINITY);
        assert!((welch_z(2.0, 0.3, 1.0, 0.4) - 2.0).abs() < 1e-15);
    }
}
