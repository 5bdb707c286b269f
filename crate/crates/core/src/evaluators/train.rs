//! Training loops for the learned evaluators.
//!
//! All four objectives noise their inputs on the fly: each example draws a
//! timestep uniformly from `0..=T` and fresh Gaussian noise, so the scorer
//! learns to read latents along the whole reverse chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bt::{log_bt_probability, log_softplus_grad, softplus};
use super::loss_weight::{LossWeightSchedule, RampShape, DEFAULT_SHARPNESS};
use super::mlp::{Mlp, MomentumSgd, Tape};
use super::{Evaluator, EvaluatorKind, LearnedScorer, Network, TrainingMeta};
use crate::diffusion::{forward_noise, Condition, NoiseSchedule};
use crate::error::{Error, Result};
use crate::world::MixtureWorld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    Uniform,
    Exponential,
    Linear,
}

impl std::str::FromStr for LossWeighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "exponential" => Ok(Self::Exponential),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown loss weighting `{other}`")),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Exponential => "exponential",
            Self::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    /// Output width of the latent tower for two-tower scorers.
    pub embed_dim: usize,
    /// Softmax temperature of the contrastive alignment objective.
    pub temperature: f64,
    pub loss_weighting: LossWeighting,
    pub sharpness: f64,
}

impl TrainHyper {
    pub fn default_for(kind: EvaluatorKind) -> Self {
        let loss_weighting = match kind {
            EvaluatorKind::RewardLearned | EvaluatorKind::CapabilityLearned => {
                LossWeighting::Exponential
            }
            _ => LossWeighting::Uniform,
        };
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            clip_norm: 5.0,
            seed: 0,
            hidden: vec![64, 64, 64],
            time_embed: 16,
            embed_dim: 16,
            temperature: 1.0,
            loss_weighting,
            sharpness: DEFAULT_SHARPNESS,
        }
    }

    /// SHA-256 over the kind and the JSON encoding of the hyperparameters.
    pub fn config_hash(&self, kind: EvaluatorKind) -> String {
        let mut h = Sha256::new();
        h.update(kind.as_str().as_bytes());
        h.update(serde_json::to_vec(self).expect("hyperparameters serialize"));
        hex::encode(h.finalize())
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Contract("batch size and layer widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Contract("learning rate and temperature must be positive".into()));
        }
        Ok(())
    }

    fn weight_fn(&self, steps: usize) -> impl Fn(usize) -> f64 {
        let schedule = match self.loss_weighting {
            LossWeighting::Uniform => None,
            LossWeighting::Exponential => Some(RampShape::Exponential),
            LossWeighting::Linear => Some(RampShape::Linear),
        }
        .map(|shape| {
            LossWeightSchedule::new(0.0, steps as f64)
                .with_shape(shape)
                .with_sharpness(self.sharpness)
        });
        move |t| match &schedule {
            Some(s) => s.weight(t as f64).expect("t within the chain"),
            None => 1.0,
        }
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut v = vec![input];
        v.extend(&self.hidden);
        v.push(output);
        v
    }
}

/// Two latents generated for the same condition, with the preferred one
/// marked.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub x_i: Vec<f64>,
    pub x_j: Vec<f64>,
    pub cond: Condition,
    pub i_preferred: bool,
}

impl PreferencePair {
    pub fn preferred(&self) -> &[f64] {
        if self.i_preferred {
            &self.x_i
        } else {
            &self.x_j
        }
    }

    pub fn rejected(&self) -> &[f64] {
        if self.i_preferred {
            &self.x_j
        } else {
            &self.x_i
        }
    }
}

/// Clean latent, its condition and the oracle capability score.
#[derive(Debug, Clone, PartialEq)]
pub struct CapabilitySample {
    pub x0: Vec<f64>,
    pub class: usize,
    pub target: f64,
}

struct Noiser<'a> {
    sched: &'a NoiseSchedule,
    rng: ChaCha8Rng,
}

impl Noiser<'_> {
    fn timestep(&mut self) -> usize {
        self.rng.random_range(0..=self.sched.steps())
    }

    fn noise(&mut self, x0: &[f64], t: usize) -> Vec<f64> {
        let eps: Vec<f64> = (0..x0.len())
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        forward_noise(x0, self.sched.alpha_bar(t).expect("sampled in range"), &eps)
            .expect("matching dims")
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            reason: format!("loss became {loss}"),
        })
    }
}

fn meta(hyper: &TrainHyper, kind: EvaluatorKind, final_loss: f64) -> TrainingMeta {
    TrainingMeta {
        seed: hyper.seed,
        config_hash: hyper.config_hash(kind),
        steps_trained: hyper.steps,
        final_loss,
    }
}

struct TwoTowerState {
    tower: Mlp,
    table: Vec<f64>,
    embed: usize,
    time_embed: usize,
    steps: usize,
}

impl TwoTowerState {
    fn new(dim: usize, classes: usize, steps: usize, hyper: &TrainHyper, rng: &mut ChaCha8Rng) -> Self {
        let tower = Mlp::new(&hyper.sizes(dim + hyper.time_embed, hyper.embed_dim), false, rng);
        Self {
            tower,
            // zero table: the untrained scorer ignores the class entirely
            table: vec![0.0; classes * hyper.embed_dim],
            embed: hyper.embed_dim,
            time_embed: hyper.time_embed,
            steps,
        }
    }

    fn embed(&self, x: &[f64], t: usize) -> Tape {
        let mut input = x.to_vec();
        input.extend(super::time_embedding(t, self.steps, self.time_embed));
        self.tower.forward_tape(&input)
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.table[c * self.embed..(c + 1) * self.embed]
    }

    fn dot(&self, f: &[f64], c: usize) -> f64 {
        f.iter().zip(self.row(c)).map(|(a, b)| a * b).sum()
    }

    fn into_scorer(self, kind: EvaluatorKind, dim: usize, classes: usize, meta: TrainingMeta) -> LearnedScorer {
        LearnedScorer {
            kind,
            dim,
            classes,
            steps: self.steps,
            time_embed: self.time_embed,
            network: Network::TwoTower {
                tower: self.tower,
                table: self.table,
            },
            meta,
        }
    }
}

/// Contrastive alignment scorer: softmax over class embeddings of
/// `f(x_t, t) . E_c / temperature`, trained on `(x_t, c)` drawn from the world.
pub fn train_alignment(world: &MixtureWorld, sched: &NoiseSchedule, hyper: &TrainHyper) -> Result<Evaluator> {
    hyper.validate()?;
    let (dim, classes) = (world.dim(), world.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut state = TwoTowerState::new(dim, classes, sched.steps(), hyper, &mut rng);
    let mut noiser = Noiser { sched, rng };
    let mut opt = MomentumSgd::new(
        state.tower.num_params() + state.table.len(),
        hyper.learning_rate,
        hyper.momentum,
        hyper.clip_norm,
    );
    let inv_tau = 1.0 / hyper.temperature;
    let scale = 1.0 / hyper.batch_size as f64;
    let mut last_loss = f64::NAN;
    for step in 0..hyper.steps {
        let mut g_tower = vec![0.0; state.tower.num_params()];
        let mut g_table = vec![0.0; state.table.len()];
        let mut loss = 0.0;
        for _ in 0..hyper.batch_size {
            let c = world.sample_class(&mut noiser.rng);
            let x0 = world.sample_data(Condition::Class(c), &mut noiser.rng)?;
            let t = noiser.timestep();
            let xt = noiser.noise(&x0, t);
            let tape = state.embed(&xt, t);
            let f = &tape.output;
            let logits: Vec<f64> = (0..classes).map(|k| state.dot(f, k) * inv_tau).collect();
            let lse = crate::world::log_sum_exp(&logits);
            loss -= logits[c] - lse;
            let mut g_f = vec![0.0; state.embed];
            for k in 0..classes {
                let g = ((logits[k] - lse).exp() - if k == c { 1.0 } else { 0.0 }) * inv_tau * scale;
                let row = state.row(k);
                for e in 0..state.embed {
                    g_f[e] += g * row[e];
                    g_table[k * state.embed + e] += g * f[e];
                }
            }
            state.tower.backward(&tape, &g_f, &mut g_tower);
        }
        last_loss = loss * scale;
        check_loss(step, last_loss)?;
        opt.step_parts(
            &mut [state.tower.params_mut(), &mut state.table],
            &[&g_tower, &g_table],
        );
    }
    let meta = meta(hyper, EvaluatorKind::AlignmentLearned, last_loss);
    Ok(Evaluator::learned(state.into_scorer(
        EvaluatorKind::AlignmentLearned,
        dim,
        classes,
        meta,
    )))
}

fn check_set(name: &str, set: &[Vec<f64>], dim: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Contract(format!("{name} must not be empty")));
    }
    if let Some(x) = set.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Real-vs-generated classifier on noised latents. Batches are balanced;
/// the score is the log-odds of "real".
pub fn train_discriminator(
    real_set: &[Vec<f64>],
    generated_set: &[Vec<f64>],
    sched: &NoiseSchedule,
    hyper: &TrainHyper,
) -> Result<Evaluator> {
    hyper.validate()?;
    let dim = real_set.first().map_or(0, Vec::len);
    check_set("real set", real_set, dim)?;
    check_set("generated set", generated_set, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = Mlp::new(&hyper.sizes(dim + hyper.time_embed, 1), true, &mut rng);
    let mut noiser = Noiser { sched, rng };
    let mut opt = MomentumSgd::new(net.num_params(), hyper.learning_rate, hyper.momentum, hyper.clip_norm);
    let scale = 1.0 / hyper.batch_size as f64;
    let mut last_loss = f64::NAN;
    for step in 0..hyper.steps {
        let mut grads = vec![0.0; net.num_params()];
        let mut loss = 0.0;
        for b in 0..hyper.batch_size {
            let real = b % 2 == 0;
            let set = if real { real_set } else { generated_set };
            let x0 = &set[noiser.rng.random_range(0..set.len())];
            let t = noiser.timestep();
            let mut input = noiser.noise(x0, t);
            input.extend(super::time_embedding(t, sched.steps(), hyper.time_embed));
            let tape = net.forward_tape(&input);
            let z = tape.output[0];
            let y = if real { 1.0 } else { 0.0 };
            loss += if real { softplus(-z) } else { softplus(z) };
            let p = 1.0 / (1.0 + (-z).exp());
            net.backward(&tape, &[(p - y) * scale], &mut grads);
        }
        last_loss = loss * scale;
        check_loss(step, last_loss)?;
        opt.step(net.params_mut(), &grads);
    }
    Ok(Evaluator::learned(LearnedScorer {
        kind: EvaluatorKind::DiscriminatorLearned,
        dim,
        classes: 0,
        steps: sched.steps(),
        time_embed: hyper.time_embed,
        network: Network::Head {
            net,
            conditional: false,
            target_mean: 0.0,
            target_scale: 1.0,
        },
        meta: meta(hyper, EvaluatorKind::DiscriminatorLearned, last_loss),
    }))
}

/// Bradley-Terry reward scorer. Minimizes `-w(t) ln p(i > j | c)` with the
/// two latents noised to the same timestep. The class count is taken from
/// the largest class seen in `pairs`.
pub fn train_reward(pairs: &[PreferencePair], sched: &NoiseSchedule, hyper: &TrainHyper) -> Result<Evaluator> {
    hyper.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::Contract("reward training needs at least one pair".into()))?;
    let dim = first.x_i.len();
    let mut classes = 0;
    for p in pairs {
        if p.x_i.len() != dim || p.x_j.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.x_i.len().max(p.x_j.len()),
            });
        }
        match p.cond {
            Condition::Class(c) => classes = classes.max(c + 1),
            Condition::Null => return Err(Error::Contract("preference pairs need a class".into())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut state = TwoTowerState::new(dim, classes, sched.steps(), hyper, &mut rng);
    let mut noiser = Noiser { sched, rng };
    let mut opt = MomentumSgd::new(
        state.tower.num_params() + state.table.len(),
        hyper.learning_rate,
        hyper.momentum,
        hyper.clip_norm,
    );
    let weight = hyper.weight_fn(sched.steps());
    let scale = 1.0 / hyper.batch_size as f64;
    let mut last_loss = f64::NAN;
    for step in 0..hyper.steps {
        let mut g_tower = vec![0.0; state.tower.num_params()];
        let mut g_table = vec![0.0; state.table.len()];
        let mut loss = 0.0;
        for _ in 0..hyper.batch_size {
            let pair = &pairs[noiser.rng.random_range(0..pairs.len())];
            let c = pair.cond.class().expect("checked above");
            let t = noiser.timestep();
            let w = weight(t);
            let win = noiser.noise(pair.preferred(), t);
            let lose = noiser.noise(pair.rejected(), t);
            let (tw, tl) = (state.embed(&win, t), state.embed(&lose, t));
            let (sw, sl) = (state.dot(&tw.output, c), state.dot(&tl.output, c));
            let log_p = log_bt_probability(sw, sl);
            loss -= w * log_p;
            let q = 1.0 - log_p.exp();
            let d_win = -q * log_softplus_grad(sw) * w * scale;
            let d_lose = q * log_softplus_grad(sl) * w * scale;
            let row: Vec<f64> = state.row(c).to_vec();
            for e in 0..state.embed {
                g_table[c * state.embed + e] += d_win * tw.output[e] + d_lose * tl.output[e];
            }
            let gw: Vec<f64> = row.iter().map(|r| d_win * r).collect();
            let gl: Vec<f64> = row.iter().map(|r| d_lose * r).collect();
            state.tower.backward(&tw, &gw, &mut g_tower);
            state.tower.backward(&tl, &gl, &mut g_tower);
        }
        last_loss = loss * scale;
        check_loss(step, last_loss)?;
        opt.step_parts(
            &mut [state.tower.params_mut(), &mut state.table],
            &[&g_tower, &g_table],
        );
    }
    let meta = meta(hyper, EvaluatorKind::RewardLearned, last_loss);
    Ok(Evaluator::learned(state.into_scorer(EvaluatorKind::RewardLearned, dim, classes, meta)))
}

/// Conditional regressor onto oracle scores with a time-weighted squared
/// error. Targets are standardized internally; the class count is taken from
/// the largest class in `data`.
pub fn train_capability(data: &[CapabilitySample], sched: &NoiseSchedule, hyper: &TrainHyper) -> Result<Evaluator> {
    hyper.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Contract("capability training needs data".into()))?;
    let dim = first.x0.len();
    if let Some(bad) = data.iter().find(|s| s.x0.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.x0.len(),
        });
    }
    let classes = data.iter().map(|s| s.class + 1).max().unwrap_or(1);
    let n = data.len() as f64;
    let mean = data.iter().map(|s| s.target).sum::<f64>() / n;
    let var = data.iter().map(|s| (s.target - mean).powi(2)).sum::<f64>() / n;
    let target_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = Mlp::new(&hyper.sizes(dim + hyper.time_embed + classes, 1), true, &mut rng);
    let mut noiser = Noiser { sched, rng };
    let mut opt = MomentumSgd::new(net.num_params(), hyper.learning_rate, hyper.momentum, hyper.clip_norm);
    let weight = hyper.weight_fn(sched.steps());
    let scale = 1.0 / hyper.batch_size as f64;
    let mut last_loss = f64::NAN;
    for step in 0..hyper.steps {
        let mut grads = vec![0.0; net.num_params()];
        let mut loss = 0.0;
        for _ in 0..hyper.batch_size {
            let s = &data[noiser.rng.random_range(0..data.len())];
            let t = noiser.timestep();
            let w = weight(t);
            let mut input = noiser.noise(&s.x0, t);
            input.extend(super::time_embedding(t, sched.steps(), hyper.time_embed));
            input.extend((0..classes).map(|k| if k == s.class { 1.0 } else { 0.0 }));
            let tape = net.forward_tape(&input);
            let z = (s.target - mean) / target_scale;
            let r = tape.output[0] - z;
            loss += w * r * r;
            net.backward(&tape, &[2.0 * w * r * scale], &mut grads);
        }
        last_loss = loss * scale;
        check_loss(step, last_loss)?;
        opt.step(net.params_mut(), &grads);
    }
    Ok(Evaluator::learned(LearnedScorer {
        kind: EvaluatorKind::CapabilityLearned,
        dim,
        classes,
        steps: sched.steps(),
        time_embed: hyper.time_embed,
        network: Network::Head {
            net,
            conditional: true,
            target_mean: mean,
            target_scale,
        },
        meta: meta(hyper, EvaluatorKind::CapabilityLearned, last_loss),
    }))
}

/// Default capability oracle: negative squared distance from `x0` to the
/// nearest component mean of class `c`.
pub fn capability_oracle(world: &MixtureWorld, x0: &[f64], c: usize) -> f64 {
    -world
        .component_means(c)
        .iter()
        .map(|mu| mu.iter().zip(x0).map(|(m, x)| (m - x).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Marginal draws paired with a prior-sampled class and the oracle score.
pub fn capability_dataset<R: Rng + ?Sized>(
    world: &MixtureWorld,
    n: usize,
    oracle: impl Fn(&MixtureWorld, &[f64], usize) -> f64,
    rng: &mut R,
) -> Result<Vec<CapabilitySample>> {
    (0..n)
        .map(|_| {
            let x0 = world.sample_data(Condition::Null, rng)?;
            let class = world.sample_class(rng);
            let target = oracle(world, &x0, class);
            Ok(CapabilitySample { x0, class, target })
        })
        .collect()
}

/// Pairs of marginal draws labelled by the clean-data alignment oracle
/// (higher log posterior of the pair's class wins). Exact ties are redrawn.
pub fn oracle_preference_pairs<R: Rng + ?Sized>(
    world: &MixtureWorld,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = world.sample_class(rng);
        let x_i = world.sample_data(Condition::Null, rng)?;
        let x_j = world.sample_data(Condition::Null, rng)?;
        let (a, b) = (world.log_posterior_at(&x_i, 1.0, c)?, world.log_posterior_at(&x_j, 1.0, c)?);
        if a == b {
            continue;
        }
        out.push(PreferencePair {
            x_i,
            x_j,
            cond: Condition::Class(c),
            i_preferred: a > b,
        });
    }
    Ok(out)
}
