//! Per-slice offered load and channel quality.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Lowest and highest channel quality indicator.
pub const CQI_MIN: u8 = 1;
pub const CQI_MAX: u8 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficShape {
    Sinusoid,
    SquareWave,
    BurstPoisson,
}

/// Parametric generator of a slice's base demand, in PRBs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProfile {
    pub shape: TrafficShape,
    #[serde(default)]
    pub mean_prb: f64,
    #[serde(default)]
    pub amplitude_prb: f64,
    #[serde(default = "default_period")]
    pub period_steps: u32,
    #[serde(default)]
    pub phase_steps: u32,
    #[serde(default)]
    pub noise_std_prb: f64,
    /// Expected bursts per step (burst shape only).
    #[serde(default)]
    pub burst_rate: f64,
    #[serde(default)]
    pub burst_size_prb: f64,
}

fn default_period() -> u32 {
    1
}

impl TrafficProfile {
    pub fn sinusoid(mean: f64, amplitude: f64, period: u32, noise_std: f64) -> Self {
        Self {
            shape: TrafficShape::Sinusoid,
            mean_prb: mean,
            amplitude_prb: amplitude,
            period_steps: period,
            phase_steps: 0,
            noise_std_prb: noise_std,
            burst_rate: 0.0,
            burst_size_prb: 0.0,
        }
    }

    pub fn square_wave(mean: f64, amplitude: f64, period: u32, noise_std: f64) -> Self {
        Self {
            shape: TrafficShape::SquareWave,
            ..Self::sinusoid(mean, amplitude, period, noise_std)
        }
    }

    pub fn burst_poisson(mean: f64, rate: f64, size: f64, noise_std: f64) -> Self {
        Self {
            shape: TrafficShape::BurstPoisson,
            burst_rate: rate,
            burst_size_prb: size,
            ..Self::sinusoid(mean, 0.0, 1, noise_std)
        }
    }

    /// Checks the profile against the capacity of the cell that owns it.
    /// Returns the offending field name and a message.
    pub fn check(&self, capacity_prb: u32) -> Result<(), (&'static str, String)> {
        let non_negative = [
            ("mean_prb", self.mean_prb),
            ("amplitude_prb", self.amplitude_prb),
            ("noise_std_prb", self.noise_std_prb),
            ("burst_rate", self.burst_rate),
            ("burst_size_prb", self.burst_size_prb),
        ];
        for (name, value) in non_negative {
            if !value.is_finite() || value < 0.0 {
                return Err((name, format!("must be finite and non-negative, got {value}")));
            }
        }
        if self.period_steps < 1 {
            return Err(("period_steps", "must be at least 1".into()));
        }
        if self.mean_prb + self.amplitude_prb > f64::from(capacity_prb) {
            return Err((
                "amplitude_prb",
                format!(
                    "mean_prb + amplitude_prb = {} exceeds cell capacity {capacity_prb}",
                    self.mean_prb + self.amplitude_prb
                ),
            ));
        }
        Ok(())
    }

    /// Noise-free part of the demand at step `t`.
    fn deterministic_part(&self, t: u64) -> f64 {
        let period = u64::from(self.period_steps.max(1));
        let pos = (t + u64::from(self.phase_steps)) % period;
        match self.shape {
            TrafficShape::Sinusoid => {
                let angle = 2.0 * PI * pos as f64 / period as f64;
                self.mean_prb + self.amplitude_prb * angle.sin()
            }
            TrafficShape::SquareWave => {
                if 2 * pos < period {
                    self.mean_prb + self.amplitude_prb
                } else {
                    self.mean_prb - self.amplitude_prb
                }
            }
            TrafficShape::BurstPoisson => self.mean_prb,
        }
    }
}

/// Base demand `b(t) >= 0` in (fractional) PRBs.
///
/// Randomness is only drawn for the components that are switched on: the
/// Poisson burst count when `burst_rate > 0`, then the Gaussian noise when
/// `noise_std_prb > 0`.
pub fn demand_at<R: Rng + ?Sized>(profile: &TrafficProfile, t: u64, rng: &mut R) -> f64 {
    let mut demand = profile.deterministic_part(t);
    if profile.shape == TrafficShape::BurstPoisson && profile.burst_rate > 0.0 {
        let bursts: f64 = Poisson::new(profile.burst_rate)
            .map(|p| p.sample(rng))
            .unwrap_or(0.0);
        demand += bursts * profile.burst_size_prb;
    }
    if profile.noise_std_prb > 0.0 {
        if let Ok(noise) = Normal::new(0.0, profile.noise_std_prb) {
            demand += noise.sample(rng);
        }
    }
    if demand.is_nan() {
        return 0.0;
    }
    demand.max(0.0)
}

/// Channel quality of one slice: a bounded ±1 random walk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub cqi: u8,
    pub drift_prob: f64,
}

impl ChannelState {
    pub fn new(cqi: u8, drift_prob: f64) -> Self {
        Self {
            cqi: cqi.clamp(CQI_MIN, CQI_MAX),
            drift_prob,
        }
    }

    /// Applies one drift of ±1 and clamps to the CQI range.
    pub fn drifted(self, up: bool) -> Self {
        let cqi = if up {
            self.cqi.saturating_add(1)
        } else {
            self.cqi.saturating_sub(1)
        };
        Self {
            cqi: cqi.clamp(CQI_MIN, CQI_MAX),
            ..self
        }
    }
}

/// One channel update: with probability `drift_prob` move ±1 (equiprobable).
pub fn cqi_step<R: Rng + ?Sized>(state: ChannelState, rng: &mut R) -> ChannelState {
    if state.drift_prob > 0.0 && rng.random::<f64>() < state.drift_prob {
        state.drifted(rng.random_bool(0.5))
    } else {
        state
    }
}

/// Spectral-efficiency factor, linear from 0.3 at CQI 1 to 1.0 at CQI 15.
pub fn spectral_efficiency(cqi: u8) -> f64 {
    let cqi = cqi.clamp(CQI_MIN, CQI_MAX);
    0.3 + 0.7 * f64::from(cqi - CQI_MIN) / 14.0
}

/// PRBs needed to carry `base_prb` of traffic at the given channel quality,
/// rounded up to whole PRBs and clamped to `[0, capacity_prb]`.
pub fn effective_prb_demand(base_prb: f64, cqi: u8, capacity_prb: u32) -> u32 {
    if !(base_prb > 0.0) {
        return 0;
    }
    let needed = base_prb / spectral_efficiency(cqi);
    // absorb representation error so that e.g. 30 / (0.3 + 0.7) is 30, not 31
    let rounded = (needed - 1e-9).ceil().max(0.0);
    rounded.min(f64::from(capacity_prb)) as u32
}
