//! Analytic bookkeeping of Bell-pair quality.
//!
//! Every pair is a Werner state, fully described by the weight `w` of its
//! Bell-state component. Fidelity, depolarizing memory noise and ideal
//! entanglement swapping all act on `w` in closed form, so no state vectors
//! are simulated. Link-level generation is a geometric number of attempts.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sim::RngStream;

/// Speed of light in optical fiber, km/s.
pub const FIBER_LIGHT_SPEED_KM_S: f64 = 2.0e5;

/// Default attenuation length in km (0.2 dB/km fiber).
pub const DEFAULT_ATTENUATION_LENGTH_KM: f64 = 44.0;

/// Werner parameter of a two-qubit state, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WernerParam(f64);

impl WernerParam {
    pub const PERFECT: WernerParam = WernerParam(1.0);
    pub const MIXED: WernerParam = WernerParam(0.0);

    pub fn new(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return config_err(format!("Werner parameter {w} outside [0, 1]"));
        }
        Ok(WernerParam(w))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Fidelity with the target Bell state, `(3w + 1) / 4`.
    pub fn fidelity(self) -> f64 {
        werner_to_fidelity(self)
    }

    /// Multiply by a factor in `[0, 1]`; the result stays a valid parameter.
    fn scaled(self, factor: f64) -> WernerParam {
        WernerParam((self.0 * factor).clamp(0.0, 1.0))
    }
}

/// `w = (4F - 1) / 3`; fails for `F` outside `[1/4, 1]`.
pub fn fidelity_to_werner(fidelity: f64) -> Result<WernerParam> {
    if !(0.25..=1.0).contains(&fidelity) {
        return config_err(format!("fidelity {fidelity} outside [1/4, 1]"));
    }
    Ok(WernerParam(((4.0 * fidelity - 1.0) / 3.0).clamp(0.0, 1.0)))
}

pub fn werner_to_fidelity(w: WernerParam) -> f64 {
    (3.0 * w.0 + 1.0) / 4.0
}

/// Physical description of one quantum link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub length_km: f64,
    /// Joint photon emission and frequency coupling efficiency.
    pub eta: f64,
    pub attempt_freq_hz: f64,
    pub attenuation_length_km: f64,
}

impl LinkParams {
    pub fn new(length_km: f64, eta: f64, attempt_freq_hz: f64) -> Result<Self> {
        let p = LinkParams {
            length_km,
            eta,
            attempt_freq_hz,
            attenuation_length_km: DEFAULT_ATTENUATION_LENGTH_KM,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_km > 0.0 && self.length_km.is_finite()) {
            return config_err(format!(
                "link length must be positive, got {}",
                self.length_km
            ));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return config_err(format!("eta must be in (0, 1], got {}", self.eta));
        }
        if !(self.attempt_freq_hz > 0.0 && self.attempt_freq_hz.is_finite()) {
            return config_err(format!(
                "attempt frequency must be positive, got {}",
                self.attempt_freq_hz
            ));
        }
        if self.attenuation_length_km.is_nan() || self.attenuation_length_km <= 0.0 {
            return config_err("attenuation length must be positive");
        }
        Ok(())
    }

    /// Fiber transmission probability `q_L = exp(-L / L_att)`.
    pub fn transmission_prob(&self) -> f64 {
        (-self.length_km / self.attenuation_length_km).exp()
    }

    /// Per-attempt success probability `q = eta * q_L^2`.
    pub fn success_prob(&self) -> f64 {
        link_success_prob(self)
    }

    /// Mean generation rate `mu = q * f_a`, pairs per second.
    pub fn mean_rate(&self) -> f64 {
        self.success_prob() * self.attempt_freq_hz
    }

    /// One-way classical latency between an endpoint and the link midpoint.
    pub fn midpoint_delay(&self, light_speed_km_s: f64) -> f64 {
        self.length_km / 2.0 / light_speed_km_s
    }

    /// One-way classical latency across the whole link.
    pub fn end_to_end_delay(&self, light_speed_km_s: f64) -> f64 {
        self.length_km / light_speed_km_s
    }
}

pub fn link_success_prob(params: &LinkParams) -> f64 {
    let q_l = params.transmission_prob();
    (params.eta * q_l * q_l).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Number of attempts until the first success, `K ~ Geometric(q)`, `K >= 1`,
/// drawn by inverting the CDF on a single uniform.
pub fn sample_attempts(q: f64, rng: &mut RngStream) -> u64 {
    assert!(
        q > 0.0 && q <= 1.0,
        "success probability {q} outside (0, 1]"
    );
    let u = rng.uniform_open_low();
    if q >= 1.0 {
        return 1;
    }
    // P(K > k) = (1 - q)^k, so K = ceil(ln U / ln(1 - q)).
    let k = (u.ln() / (-q).ln_1p()).ceil();
    if k < 1.0 {
        1
    } else {
        k as u64
    }
}

/// Time until the next successful generation, `K / f_a` seconds.
pub fn sample_lleg_interval(q: f64, attempt_freq_hz: f64, rng: &mut RngStream) -> f64 {
    sample_attempts(q, rng) as f64 / attempt_freq_hz
}

/// Memory noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub coherence_time_s: f64,
    pub initial_fidelity: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.coherence_time_s.is_nan() || self.coherence_time_s <= 0.0 {
            return config_err(format!(
                "coherence time must be positive, got {}",
                self.coherence_time_s
            ));
        }
        if !(self.initial_fidelity > 0.25 && self.initial_fidelity <= 1.0) {
            return config_err(format!(
                "initial fidelity must be in (1/4, 1], got {}",
                self.initial_fidelity
            ));
        }
        Ok(())
    }

    pub fn initial_werner(&self) -> Result<WernerParam> {
        fidelity_to_werner(self.initial_fidelity)
    }
}

/// Depolarizing decay factor for one qubit stored `storage_time` seconds.
pub fn decay_factor(storage_time: f64, coherence_time: f64) -> f64 {
    (-storage_time.max(0.0) / coherence_time).exp()
}

/// Apply depolarizing memory noise to one stored qubit of the pair.
pub fn decohere(w: WernerParam, storage_time: f64, coherence_time: f64) -> WernerParam {
    w.scaled(decay_factor(storage_time, coherence_time))
}

/// Two-bit Bell-state measurement outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BsmOutcome(u8);

impl BsmOutcome {
    pub fn new(bits: u8) -> Self {
        assert!(bits < 4, "BSM outcome has two bits, got {bits}");
        BsmOutcome(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

/// Running XOR of BSM outcomes needed to decode the final Bell state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PauliFrame(u8);

impl PauliFrame {
    pub fn from_bits(bits: u8) -> Self {
        assert!(bits < 4, "Pauli frame has two bits, got {bits}");
        PauliFrame(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

pub fn pauli_accumulate(frame: PauliFrame, outcome: BsmOutcome) -> PauliFrame {
    PauliFrame(frame.0 ^ outcome.0)
}

/// Ideal entanglement swap of two Werner pairs.
pub fn swap(w1: WernerParam, w2: WernerParam, rng: &mut RngStream) -> (WernerParam, BsmOutcome) {
    let outcome = BsmOutcome::new(rng.below(4) as u8);
    (WernerParam(w1.0 * w2.0), outcome)
}
