//! Time-dependent loss weighting for evaluators whose signal only appears
//! late in the reverse chain.
//!
//! The weight sits on a 0.05 plateau for `t > t_cut`, where
//! `t_cut = t_min + (t_max - t_min) / 3`, and ramps up to 1 at `t_min`:
//!
//! ```text
//! u    = (t_cut - t) / (t_cut - t_min)
//! w(t) = 0.05 + 0.95 (e^{k u} - 1) / (e^k - 1)     (exponential)
//! w(t) = 0.05 + 0.95 u                              (linear)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHT_FLOOR: f64 = 0.05;
pub const DEFAULT_SHARPNESS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampShape {
    Exponential,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeightSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub sharpness: f64,
    pub shape: RampShape,
}

impl LossWeightSchedule {
    pub fn new(t_min: f64, t_max: f64) -> Self {
        Self {
            t_min,
            t_max,
            sharpness: DEFAULT_SHARPNESS,
            shape: RampShape::Exponential,
        }
    }

    pub fn with_shape(mut self, shape: RampShape) -> Self {
        self.shape = shape;
        self
    }

    pub fn with_sharpness(mut self, k: f64) -> Self {
        self.sharpness = k;
        self
    }

    pub fn cutoff(&self) -> f64 {
        self.t_min + (self.t_max - self.t_min) / 3.0
    }

    pub fn weight(&self, t: f64) -> Result<f64> {
        if !(t >= self.t_min && t <= self.t_max) {
            return Err(Error::Contract(format!(
                "loss weight queried at t = {t} outside [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        let cut = self.cutoff();
        if t > cut {
            return Ok(WEIGHT_FLOOR);
        }
        let u = (cut - t) / (cut - self.t_min);
        let ramp = match self.shape {
            RampShape::Exponential => {
                let k = self.sharpness;
                (k * u).exp_m1() / k.exp_m1()
            }
            RampShape::Linear => u,
        };
        Ok(WEIGHT_FLOOR + (1.0 - WEIGHT_FLOOR) * ramp)
    }
}
