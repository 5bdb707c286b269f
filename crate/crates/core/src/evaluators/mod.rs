//! Online scorers of noisy latents.
//!
//! Every evaluator maps `(x_t, t, cond)` to a scalar where greater is better:
//!
//! * `alignment-oracle`: log Bayes posterior of the target class.
//! * `quality-oracle`: log density of the noised marginal.
//! * `alignment-learned` / `reward-learned`: inner product of a
//!   time-conditioned latent embedding with a learned class embedding.
//! * `discriminator-learned`: log-odds that the latent is real.
//! * `capability-learned`: regression onto a programmatic oracle score.

mod artifact;
pub mod diagnostics;
pub mod bt;
pub mod loss_weight;
pub mod mlp;
pub mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::world::MixtureWorld;
use mlp::Mlp;

pub use bt::{bt_probability, bt_ratio, softplus};
pub use loss_weight::{LossWeightSchedule, RampShape};
pub use train::{
    train_alignment, train_capability, train_discriminator, train_reward, CapabilitySample,
    LossWeighting, PreferencePair, TrainHyper,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvaluatorKind {
    AlignmentOracle,
    QualityOracle,
    AlignmentLearned,
    DiscriminatorLearned,
    RewardLearned,
    CapabilityLearned,
}

impl EvaluatorKind {
    pub const ALL: [EvaluatorKind; 6] = [
        EvaluatorKind::AlignmentOracle,
        EvaluatorKind::QualityOracle,
        EvaluatorKind::AlignmentLearned,
        EvaluatorKind::DiscriminatorLearned,
        EvaluatorKind::RewardLearned,
        EvaluatorKind::CapabilityLearned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvaluatorKind::AlignmentOracle => "alignment-oracle",
            EvaluatorKind::QualityOracle => "quality-oracle",
            EvaluatorKind::AlignmentLearned => "alignment-learned",
            EvaluatorKind::DiscriminatorLearned => "discriminator-learned",
            EvaluatorKind::RewardLearned => "reward-learned",
            EvaluatorKind::CapabilityLearned => "capability-learned",
        }
    }

    /// Whether scoring needs a class label.
    pub fn is_conditional(self) -> bool {
        !matches!(
            self,
            EvaluatorKind::QualityOracle | EvaluatorKind::DiscriminatorLearned
        )
    }

    pub fn is_oracle(self) -> bool {
        matches!(
            self,
            EvaluatorKind::AlignmentOracle | EvaluatorKind::QualityOracle
        )
    }
}

impl std::fmt::Display for EvaluatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvaluatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown evaluator kind `{s}`"))
    }
}

/// Sinusoidal embedding of `t / steps`, `width / 2` geometric frequencies
/// between 1 and 64.
pub fn time_embedding(t: usize, steps: usize, width: usize) -> Vec<f64> {
    let u = t as f64 / steps as f64;
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for k in 0..half {
        let freq = if half > 1 {
            64f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((freq * u).sin());
        out.push((freq * u).cos());
    }
    if width % 2 == 1 {
        out.push(u);
    }
    out
}

/// Trained network behind a learned evaluator.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    /// Latent tower `f(x, t)` and a `classes x embed` table; scores are
    /// `f(x, t) . table[c]`.
    TwoTower { tower: Mlp, table: Vec<f64> },
    /// Scalar head; conditional heads take a one-hot class after the time
    /// embedding. Output is `target_mean + target_scale * net(...)`.
    Head {
        net: Mlp,
        conditional: bool,
        target_mean: f64,
        target_scale: f64,
    },
}

/// Provenance recorded with trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub config_hash: String,
    pub steps_trained: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedScorer {
    pub kind: EvaluatorKind,
    pub dim: usize,
    pub classes: usize,
    /// Chain length `T` the time embedding was trained against.
    pub steps: usize,
    pub time_embed: usize,
    pub network: Network,
    pub meta: TrainingMeta,
}

impl LearnedScorer {
    pub(crate) fn input(&self, x: &[f64], t: usize, class: Option<usize>, onehot: bool) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim + self.time_embed + self.classes);
        v.extend_from_slice(x);
        v.extend(time_embedding(t, self.steps, self.time_embed));
        if onehot {
            let c = class.expect("conditional head needs a class");
            v.extend((0..self.classes).map(|i| if i == c { 1.0 } else { 0.0 }));
        }
        v
    }

    fn score(&self, x: &[f64], t: usize, cond: Condition) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let class = match (self.kind.is_conditional(), cond) {
            (true, Condition::Null) => {
                return Err(Error::Contract(format!(
                    "{} evaluator needs a class condition",
                    self.kind
                )))
            }
            (true, Condition::Class(c)) if c >= self.classes => {
                return Err(Error::Contract(format!("class {c} out of range")))
            }
            (_, c) => c.class(),
        };
        match &self.network {
            Network::TwoTower { tower, table } => {
                let c = class.expect("conditional");
                let f = tower.forward(&self.input(x, t, None, false));
                let m = tower.output_width();
                Ok(f.iter().zip(&table[c * m..(c + 1) * m]).map(|(a, b)| a * b).sum())
            }
            Network::Head {
                net,
                conditional,
                target_mean,
                target_scale,
            } => {
                let out = net.forward(&self.input(x, t, class, *conditional))[0];
                Ok(target_mean + target_scale * out)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.network {
            Network::TwoTower { tower, table } => tower.num_params() + table.len(),
            Network::Head { net, .. } => net.num_params(),
        }
    }

    /// Multiply-adds of one score: the network forward pass plus the class
    /// inner product for two-tower scorers.
    pub fn op_cost(&self) -> u64 {
        match &self.network {
            Network::TwoTower { tower, .. } => tower.op_cost() + tower.output_width() as u64,
            Network::Head { net, .. } => net.op_cost(),
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Oracle {
        kind: EvaluatorKind,
        world: Arc<MixtureWorld>,
        schedule: Arc<NoiseSchedule>,
    },
    Learned(Arc<LearnedScorer>),
}

/// A scorer of noisy latents. Cheap to clone and safe to share.
#[derive(Debug, Clone)]
pub struct Evaluator {
    repr: Repr,
}

impl Evaluator {
    pub fn alignment_oracle(world: Arc<MixtureWorld>, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            repr: Repr::Oracle {
                kind: EvaluatorKind::AlignmentOracle,
                world,
                schedule,
            },
        }
    }

    pub fn quality_oracle(world: Arc<MixtureWorld>, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            repr: Repr::Oracle {
                kind: EvaluatorKind::QualityOracle,
                world,
                schedule,
            },
        }
    }

    pub fn learned(scorer: LearnedScorer) -> Self {
        Self {
            repr: Repr::Learned(Arc::new(scorer)),
        }
    }

    pub fn kind(&self) -> EvaluatorKind {
        match &self.repr {
            Repr::Oracle { kind, .. } => *kind,
            Repr::Learned(s) => s.kind,
        }
    }

    pub fn learned_scorer(&self) -> Option<&LearnedScorer> {
        match &self.repr {
            Repr::Learned(s) => Some(s),
            Repr::Oracle { .. } => None,
        }
    }

    /// Scores a latent at timestep `t`; greater is better for every kind.
    pub fn score(&self, x: &[f64], t: usize, cond: Condition) -> Result<f64> {
        match &self.repr {
            Repr::Oracle {
                kind,
                world,
                schedule,
            } => {
                let ab = schedule.alpha_bar(t)?;
                match kind {
                    EvaluatorKind::AlignmentOracle => match cond {
                        Condition::Class(c) => world.log_posterior_at(x, ab, c),
                        Condition::Null => Err(Error::Contract(
                            "alignment-oracle evaluator needs a class condition".into(),
                        )),
                    },
                    _ => world.log_density_at(x, ab, Condition::Null),
                }
            }
            Repr::Learned(s) => s.score(x, t, cond),
        }
    }

    pub fn num_params(&self) -> usize {
        self.learned_scorer().map_or(0, LearnedScorer::num_params)
    }

    /// Multiply-adds per call to [`Evaluator::score`].
    pub fn op_cost(&self) -> u64 {
        match &self.repr {
            Repr::Oracle { world, .. } => world.posterior_op_cost(),
            Repr::Learned(s) => s.op_cost(),
        }
    }

    /// Serializes a learned evaluator to the binary artifact format.
    pub fn to_artifact_bytes(&self) -> Result<Vec<u8>> {
        match &self.repr {
            Repr::Learned(s) => artifact::encode(s),
            Repr::Oracle { kind, .. } => Err(Error::Artifact(format!(
                "{kind} has no parameters to serialize"
            ))),
        }
    }

    pub fn from_artifact_bytes(bytes: &[u8]) -> Result<Self> {
        artifact::decode(bytes).map(Self::learned)
    }
}

/// Log-odds of a probability, the discriminator's quality score.
pub fn log_odds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracles() -> (Evaluator, Evaluator) {
        let world = Arc::new(MixtureWorld::default_world());
        let sched = Arc::new(NoiseSchedule::cosine(200).unwrap());
        (
            Evaluator::alignment_oracle(world.clone(), sched.clone()),
            Evaluator::quality_oracle(world, sched),
        )
    }

    #[test]
    fn alignment_oracle_at_symmetry_point() {
        let (align, _) = oracles();
        let s = align.score(&[0.0, 0.0], 10, Condition::Class(1)).unwrap();
        assert!((s - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conditional_kinds_reject_null() {
        let (align, quality) = oracles();
        assert!(matches!(
            align.score(&[0.0, 0.0], 10, Condition::Null),
            Err(Error::Contract(_))
        ));
        assert!(quality.score(&[0.0, 0.0], 10, Condition::Null).is_ok());
    }

    #[test]
    fn oracle_orientation() {
        let (align, quality) = oracles();
        // moving towards class 1 raises its posterior and its alignment score
        let mut prev = f64::NEG_INFINITY;
        for x in [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
            let s = align.score(&[x, 0.0], 0, Condition::Class(1)).unwrap();
            assert!(s > prev);
            prev = s;
        }
        // the quality oracle prefers a component mean over empty space
        let at_mode = quality.score(&[2.0, 2.0], 0, Condition::Null).unwrap();
        let far = quality.score(&[6.0, 6.0], 0, Condition::Null).unwrap();
        assert!(at_mode > far);
    }

    #[test]
    fn log_odds_is_zero_at_half() {
        assert_eq!(log_odds(0.5), 0.0);
        assert!(log_odds(0.9) > log_odds(0.6));
    }

    #[test]
    fn time_embedding_shape() {
        let e = time_embedding(20, 200, 16);
        assert_eq!(e.len(), 16);
        assert!((e[0] - 0.1f64.sin()).abs() < 1e-15);
        assert_eq!(time_embedding(0, 200, 4), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in EvaluatorKind::ALL {
            assert_eq!(k.as_str().parse::<EvaluatorKind>().unwrap(), k);
        }
    }
}
