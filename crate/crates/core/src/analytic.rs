//! Closed-form single-receiver (SX) channel for a point transmitter and a
//! fully absorbing sphere in unbounded 3D space without flow.
//!
//! Distances passed to these functions are transmitter-to-surface distances:
//! callers subtract the receiver radius from the center distance first.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timing and medium parameters of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Diffusion coefficient, µm²/s.
    pub diffusion: f64,
    /// Sampling interval Δt, s.
    pub sampling_interval: f64,
    /// Samples per timeslot; the slot duration is `samples_per_slot · Δt`.
    pub samples_per_slot: u32,
}

impl ChannelParams {
    /// Builds parameters from a slot duration, checking that it is an integral
    /// number of sampling intervals.
    pub fn new(diffusion: f64, sampling_interval: f64, slot_duration: f64) -> Result<Self> {
        if !(diffusion > 0.0) {
            return Err(Error::Config(format!("diffusion coefficient must be > 0, got {diffusion}")));
        }
        if !(sampling_interval > 0.0) || !(slot_duration > 0.0) {
            return Err(Error::Config(format!(
                "sampling interval ({sampling_interval}) and slot duration ({slot_duration}) must be > 0"
            )));
        }
        let ratio = slot_duration / sampling_interval;
        let samples = ratio.round();
        if samples < 1.0 || (ratio - samples).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "slot duration {slot_duration} s is not an integral multiple of the sampling interval {sampling_interval} s"
            )));
        }
        Ok(Self {
            diffusion,
            sampling_interval,
            samples_per_slot: samples as u32,
        })
    }

    pub fn slot_duration(&self) -> f64 {
        self.sampling_interval * f64::from(self.samples_per_slot)
    }
}

/// Per-slot hitting probability of one receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowProbability {
    pub value: f64,
    /// 1-based slot index relative to the release.
    pub slot_index: u32,
    /// Zero for analytic values.
    pub standard_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Probability that a molecule released at distance `d` from the surface of
/// a sphere of radius `r_rx` has been absorbed by time `t`.
pub fn sx_cdf(d: f64, t: f64, r_rx: f64, diffusion: f64) -> Result<f64> {
    if !(d > 0.0) || !(r_rx > 0.0) {
        return Err(Error::Domain(format!(
            "SX distance and radius must be positive (d = {d}, r = {r_rx})"
        )));
    }
    if !(t >= 0.0) || !(diffusion > 0.0) {
        return Err(Error::Domain(format!(
            "time must be non-negative and diffusion positive (t = {t}, D = {diffusion})"
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(r_rx / (d + r_rx) * libm::erfc(d / (4.0 * diffusion * t).sqrt()))
}

/// Probability of absorption within the sampling interval ending at `t`.
pub fn cir_window(d: f64, t: f64, params: &ChannelParams, r_rx: f64) -> Result<f64> {
    let dt = params.sampling_interval;
    if t < dt {
        return Err(Error::Domain(format!(
            "CIR window end {t} s precedes one sampling interval ({dt} s)"
        )));
    }
    let hi = sx_cdf(d, t, r_rx, params.diffusion)?;
    let lo = sx_cdf(d, t - dt, r_rx, params.diffusion)?;
    Ok((hi - lo).max(0.0))
}

/// Probability of absorption during slot `slot_index` (1-based, counted from
/// the release instant).
pub fn window_prob_sx(
    d: f64,
    slot_index: u32,
    params: &ChannelParams,
    r_rx: f64,
) -> Result<WindowProbability> {
    if slot_index == 0 {
        return Err(Error::Domain("slot index is 1-based".into()));
    }
    let slot = params.slot_duration();
    let hi = sx_cdf(d, f64::from(slot_index) * slot, r_rx, params.diffusion)?;
    let lo = sx_cdf(d, f64::from(slot_index - 1) * slot, r_rx, params.diffusion)?;
    Ok(WindowProbability {
        value: (hi - lo).max(0.0),
        slot_index,
        standard_error: 0.0,
    })
}

/// Window probabilities for slots `1..=slots` from a center distance.
pub fn sx_table(
    center_distance: f64,
    r_rx: f64,
    params: &ChannelParams,
    slots: u32,
) -> Result<Vec<WindowProbability>> {
    let d = center_distance - r_rx;
    (1..=slots)
        .map(|i| window_prob_sx(d, i, params, r_rx))
        .collect()
}

pub fn count_moments(n_tx: u64, h: f64) -> CountMoments {
    let n = n_tx as f64;
    CountMoments {
        mean: n * h,
        variance: n * h * (1.0 - h),
    }
}

/// Draws a received-molecule count from the Normal approximation of the
/// Binomial(n_tx, h) count, rounded and clamped to `[0, n_tx]`.
pub fn sample_received<R: Rng + ?Sized>(n_tx: u64, h: f64, rng: &mut R) -> u64 {
    let h = h.clamp(0.0, 1.0);
    let m = count_moments(n_tx, h);
    let draw = if m.variance > 0.0 {
        // Normal::new only fails for a non-finite or negative sd.
        Normal::new(m.mean, m.variance.sqrt())
            .expect("finite moments")
            .sample(rng)
    } else {
        m.mean
    };
    draw.round().clamp(0.0, n_tx as f64) as u64
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;

    const D: f64 = 79.4;

    fn table_params() -> ChannelParams {
        ChannelParams::new(D, 0.01, 5.0).unwrap()
    }

    #[test]
    fn cdf_long_time_limit() {
        let f = sx_cdf(10.0, 1e9, 8.0, D).unwrap();
        assert!((f - 8.0 / 18.0).abs() < 1e-4, "{f}");
    }

    #[test]
    fn cdf_zero_time() {
        assert_eq!(sx_cdf(10.0, 0.0, 8.0, D).unwrap(), 0.0);
        assert_eq!(sx_cdf(0.5, 0.0, 5.0, D).unwrap(), 0.0);
    }

    #[test]
    fn cdf_golden() {
        // mpmath, 40 digits.
        let expected = 0.321_188_647_695_943_356_296_655_882_951_745_1;
        let f = sx_cdf(10.0, 5.0, 8.0, D).unwrap();
        assert!(((f - expected) / expected).abs() < 1e-10, "{f}");
    }

    #[test]
    fn cdf_domain_errors() {
        assert!(sx_cdf(0.0, 1.0, 8.0, D).is_err());
        assert!(sx_cdf(-1.0, 1.0, 8.0, D).is_err());
        assert!(sx_cdf(1.0, 1.0, 0.0, D).is_err());
        assert!(sx_cdf(1.0, -1.0, 1.0, D).is_err());
    }

    #[test]
    fn cir_first_window_is_cdf() {
        let p = table_params();
        let h = cir_window(10.0, 0.01, &p, 8.0).unwrap();
        assert_eq!(h, sx_cdf(10.0, 0.01, 8.0, D).unwrap());
        assert!(cir_window(10.0, 0.005, &p, 8.0).is_err());
    }

    #[test]
    fn cir_golden() {
        let expected = 0.001_033_099_328_060_303_493_790_762_641_696_44;
        let h = cir_window(10.0, 1.0, &table_params(), 8.0).unwrap();
        assert!(((h - expected) / expected).abs() < 1e-9, "{h}");
    }

    #[test]
    fn cir_telescopes() {
        let p = table_params();
        let m = 700;
        let sum: f64 = (1..=m)
            .map(|l| cir_window(10.0, f64::from(l) * 0.01, &p, 8.0).unwrap())
            .sum();
        let f = sx_cdf(10.0, f64::from(m) * 0.01, 8.0, D).unwrap();
        assert!((sum - f).abs() < 1e-12);
    }

    #[test]
    fn window_matches_per_sample_sum() {
        let p = table_params();
        for i in 1..=3u32 {
            let per_sample: f64 = (1..=p.samples_per_slot)
                .map(|l| {
                    let t = f64::from(i - 1) * 5.0 + f64::from(l) * 0.01;
                    cir_window(10.0, t, &p, 8.0).unwrap()
                })
                .sum();
            let w = window_prob_sx(10.0, i, &p, 8.0).unwrap();
            assert!((w.value - per_sample).abs() < 1e-12);
            assert_eq!(w.standard_error, 0.0);
        }
    }

    #[test]
    fn window_golden() {
        let p = table_params();
        let w1 = window_prob_sx(10.0, 1, &p, 8.0).unwrap();
        assert!((w1.value - 0.321_188_647_695_943_356_3).abs() < 1e-12);
        let w2 = window_prob_sx(10.0, 2, &p, 8.0).unwrap();
        assert!((w2.value - 0.035_192_831_479_666_807_78).abs() < 1e-12);
    }

    #[test]
    fn params_reject_fractional_slot() {
        assert!(matches!(ChannelParams::new(D, 0.3, 5.0), Err(Error::Config(_))));
        assert_eq!(table_params().samples_per_slot, 500);
    }

    #[test]
    fn moments_examples() {
        let m = count_moments(10_000, 0.05);
        assert!((m.mean - 500.0).abs() < 1e-9);
        assert!((m.variance - 475.0).abs() < 1e-9);
        assert_eq!(count_moments(10_000, 0.0), CountMoments { mean: 0.0, variance: 0.0 });
        assert_eq!(count_moments(10_000, 1.0), CountMoments { mean: 10_000.0, variance: 0.0 });
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = rng_from(1);
        for _ in 0..100 {
            assert_eq!(sample_received(10_000, 0.0, &mut rng), 0);
            assert_eq!(sample_received(10_000, 1.0, &mut rng), 10_000);
        }
    }

    #[test]
    fn sampling_moments() {
        let mut rng = rng_from(2);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_received(10_000, 0.05, &mut rng) as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let m = count_moments(10_000, 0.05);
        let se_mean = (m.variance / n as f64).sqrt();
        assert!((mean - m.mean).abs() < 4.0 * se_mean, "mean {mean}");
        // Var of the sample variance for a Normal: 2σ⁴/(n-1). Rounding adds 1/12.
        let se_var = (2.0 * m.variance.powi(2) / (n as f64 - 1.0)).sqrt();
        assert!((var - m.variance).abs() < 5.0 * se_var + 1.0 / 12.0, "var {var}");
    }

    proptest! {
        #[test]
        fn cdf_monotone(d in 0.1f64..80.0, dd in 0.0f64..20.0, t in 0.0f64..30.0, dt in 0.0f64..30.0, r in 1.0f64..10.0) {
            let f = sx_cdf(d, t, r, D).unwrap();
            prop_assert!(sx_cdf(d, t + dt, r, D).unwrap() >= f);
            prop_assert!(f <= r / (d + r));
            if t > 0.0 && dd > 1e-6 {
                prop_assert!(sx_cdf(d + dd, t, r, D).unwrap() < f || f == 0.0);
            }
        }

        #[test]
        fn slots_telescope(d in 0.5f64..60.0, r in 1.0f64..10.0, m in 1u32..12) {
            let p = table_params();
            let sum: f64 = (1..=m).map(|i| window_prob_sx(d, i, &p, r).unwrap().value).sum();
            let f = sx_cdf(d, f64::from(m) * 5.0, r, D).unwrap();
            prop_assert!((sum - f).abs() < 1e-12);
        }

        #[test]
        fn samples_in_range(n in 0u64..50_000, h in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = rng_from(seed);
            let x = sample_received(n, h, &mut rng);
            prop_assert!(x <= n);
        }
    }
}
