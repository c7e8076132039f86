//! Proportional-integral active queue management.
//!
//! Each switch runs one controller. Every sampling period it compares the
//! average buffering time of q-datagrams against a target and moves the
//! marking probability:
//!
//! `p <- clamp(p + alpha * (t_now - t_tgt) - beta * (t_prev - t_tgt), 0, 1)`

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::sim::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiParams {
    /// Proportional gain, probability per second of error.
    pub alpha: f64,
    /// Integral-offset gain, probability per second of error.
    pub beta: f64,
    pub target_buffering_s: f64,
    pub sample_period_s: f64,
}

impl PiParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > self.beta && self.beta > 0.0) {
            return config_err(format!(
                "PI gains need alpha > beta > 0, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if self.target_buffering_s.is_nan() || self.target_buffering_s <= 0.0 {
            return config_err("target buffering time must be positive");
        }
        if self.sample_period_s.is_nan() || self.sample_period_s <= 0.0 {
            return config_err("AQM sample period must be positive");
        }
        Ok(())
    }
}

/// Result of one periodic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiSample {
    pub p: f64,
    /// Average buffering time used for this step.
    pub avg_buffering_s: f64,
    /// How many buffering periods completed during the step.
    pub completed: u64,
}

#[derive(Debug, Clone)]
pub struct PiController {
    params: PiParams,
    p: f64,
    t_prev: f64,
    sum: f64,
    count: u64,
    rng: RngStream,
}

impl PiController {
    pub fn new(params: PiParams, rng: RngStream) -> Self {
        PiController {
            params,
            p: 0.0,
            t_prev: params.target_buffering_s,
            sum: 0.0,
            count: 0,
            rng,
        }
    }

    pub fn params(&self) -> &PiParams {
        &self.params
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Overwrite the marking probability (clamped).
    pub fn set_p(&mut self, p: f64) {
        self.p = p.clamp(0.0, 1.0);
    }

    /// Overwrite the previous-period average.
    pub fn set_previous_average(&mut self, t: f64) {
        self.t_prev = t;
    }

    /// A q-datagram finished buffering at this switch.
    pub fn record_buffering(&mut self, duration_s: f64) {
        self.sum += duration_s;
        self.count += 1;
    }

    /// Periodic update. An empty period reuses the previous average.
    pub fn update(&mut self) -> PiSample {
        let completed = self.count;
        let t_next = if completed > 0 {
            self.sum / completed as f64
        } else {
            self.t_prev
        };
        let tgt = self.params.target_buffering_s;
        let p =
            self.p + self.params.alpha * (t_next - tgt) - self.params.beta * (self.t_prev - tgt);
        self.p = p.clamp(0.0, 1.0);
        self.t_prev = t_next;
        self.sum = 0.0;
        self.count = 0;
        PiSample {
            p: self.p,
            avg_buffering_s: t_next,
            completed,
        }
    }

    /// Whether to mark an arriving q-datagram as congested.
    pub fn mark_decision(&mut self) -> bool {
        self.rng.bernoulli(self.p)
    }
}
