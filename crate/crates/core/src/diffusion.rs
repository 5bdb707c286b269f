//! Noise schedules, forward corruption, reverse sampler steps and the
//! classifier-free guidance combination rule.
//!
//! Timestep convention: `t = 0` is clean data and `t = T` is (near) pure
//! noise. A schedule stores the cumulative signal coefficients
//! `alpha_bar[0..=T]` with `alpha_bar[0] == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Offset used by the cosine schedule so the first steps are not degenerate.
const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step betas; keeps `alpha_bar[T]` strictly positive.
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScheduleFamily::Cosine),
            "linear" => Ok(ScheduleFamily::Linear),
            other => Err(format!("unknown schedule family `{other}`")),
        }
    }
}

impl std::fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleFamily::Cosine => "cosine",
            ScheduleFamily::Linear => "linear",
        })
    }
}

/// Cumulative signal-retention coefficients of the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit `alpha_bar[0..=T]` values.
    ///
    /// Rejects anything that is not strictly decreasing from exactly 1 down
    /// to a value below `1e-3`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !(pair[1] < pair[0]) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar not strictly decreasing at t = {}",
                    t + 1
                )));
            }
        }
        let last = *alpha_bar.last().unwrap();
        if !(last > 0.0) {
            return Err(Error::InvalidSchedule("alpha_bar[T] must be positive".into()));
        }
        if last >= 1e-3 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar[T] = {last} is not close enough to pure noise"
            )));
        }
        Ok(Self { alpha_bar })
    }

    /// Cosine schedule with `steps` reverse steps.
    pub fn cosine(steps: usize) -> Result<Self> {
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prev_target = 1.0;
        for t in 1..=steps {
            let target = f(t) / f0;
            let beta = (1.0 - target / prev_target).min(MAX_BETA);
            prev_target = target;
            let next = alpha_bar[t - 1] * (1.0 - beta);
            alpha_bar.push(next);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Linear-beta schedule, with the endpoints rescaled to `1000 / steps` so
    /// short chains still reach pure noise.
    pub fn linear(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(MAX_BETA));
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let frac = if steps == 1 {
                1.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            let beta = lo + (hi - lo) * frac;
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn new(family: ScheduleFamily, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        match family {
            ScheduleFamily::Cosine => Self::cosine(steps),
            ScheduleFamily::Linear => Self::linear(steps),
        }
    }

    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `x_t = sqrt(ab) x0 + sqrt(1 - ab) noise` at timestep `t`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        forward_noise(x0, self.alpha_bar(t)?, noise)
    }

    pub fn predict_x0(&self, x_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        predict_x0(x_t, eps_hat, self.alpha_bar(t)?).map_err(|e| match e {
            Error::SingularTimestep { .. } => Error::SingularTimestep { t },
            other => other,
        })
    }
}

/// Class label or the null (unconditional) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn class(self) -> Option<usize> {
        match self {
            Condition::Class(c) => Some(c),
            Condition::Null => None,
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Class(c) => write!(f, "{c}"),
            Condition::Null => f.write_str("null"),
        }
    }
}

/// A latent `x` at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Vec<f64>, t: usize) -> Self {
        Self { x, t }
    }
}

/// Reverse-process sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl Sampler {
    /// Takes one reverse step. `noise` is ignored by DDIM but must still have
    /// the right dimension so both samplers share one calling convention.
    pub fn step(
        self,
        state: &LatentState,
        eps_guided: &[f64],
        sched: &NoiseSchedule,
        noise: &[f64],
    ) -> Result<LatentState> {
        match self {
            Sampler::Ddpm => ddpm_step(state, eps_guided, sched, noise),
            Sampler::Ddim => ddim_step(state, eps_guided, sched),
        }
    }
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(format!("unknown sampler `{other}`")),
        }
    }
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampler::Ddpm => "ddpm",
            Sampler::Ddim => "ddim",
        })
    }
}

/// Forward corruption with an explicit `alpha_bar`.
pub fn forward_noise(x0: &[f64], alpha_bar: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), noise.len())?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

/// Inverts [`forward_noise`] given a noise estimate.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps_hat.len())?;
    if !(alpha_bar > 0.0) {
        return Err(Error::SingularTimestep { t: usize::MAX });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - b * e) / a)
        .collect())
}

/// `eps_uncond + s (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dim(eps_uncond.len(), eps_cond.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + s * (c - u))
        .collect())
}

fn step_inputs(state: &LatentState, eps: &[f64], sched: &NoiseSchedule) -> Result<(f64, f64)> {
    if state.t == 0 {
        return Err(Error::CannotStep);
    }
    check_dim(state.x.len(), eps.len())?;
    Ok((sched.alpha_bar(state.t)?, sched.alpha_bar(state.t - 1)?))
}

/// Ancestral DDPM step using the "small" posterior variance. The step into
/// clean data has zero variance and returns the `x0` prediction itself.
pub fn ddpm_step(
    state: &LatentState,
    eps_guided: &[f64],
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<LatentState> {
    let (ab_t, ab_prev) = step_inputs(state, eps_guided, sched)?;
    check_dim(state.x.len(), noise.len())?;
    let x0 = predict_x0(&state.x, eps_guided, ab_t).map_err(|_| Error::SingularTimestep { t: state.t })?;
    let t = state.t - 1;
    if ab_prev == 1.0 {
        return Ok(LatentState::new(x0, t));
    }
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let coef_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
    let x = x0
        .iter()
        .zip(&state.x)
        .zip(noise)
        .map(|((p, x), z)| coef_x0 * p + coef_xt * x + sigma * z)
        .collect();
    Ok(LatentState::new(x, t))
}

/// Deterministic DDIM step (eta = 0).
pub fn ddim_step(state: &LatentState, eps_guided: &[f64], sched: &NoiseSchedule) -> Result<LatentState> {
    let (ab_t, ab_prev) = step_inputs(state, eps_guided, sched)?;
    let x0 = predict_x0(&state.x, eps_guided, ab_t).map_err(|_| Error::SingularTimestep { t: state.t })?;
    let t = state.t - 1;
    if ab_prev == 1.0 {
        return Ok(LatentState::new(x0, t));
    }
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let x = x0
        .iter()
        .zip(eps_guided)
        .map(|(p, e)| a * p + b * e)
        .collect();
    Ok(LatentState::new(x, t))
}
