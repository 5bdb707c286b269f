//! Guidance policies and the guided reverse chain.
//!
//! Each reverse step evaluates the conditional and unconditional noise
//! predictions exactly once. Static policies pick a scale from the timestep
//! alone; the dynamic policy recombines the two cached predictions at every
//! candidate scale, advances each candidate with one shared noise draw, scores
//! the candidate next states with the evaluators and keeps the best.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, Condition, LatentState, NoiseSchedule, Sampler};
use crate::error::{Error, Result};
use crate::evaluators::Evaluator;
use crate::world::MixtureWorld;

/// Fixed scale that serves as the tie-break anchor.
pub const DEFAULT_SCALE: f64 = 7.5;
/// Floor on the denominator of the relative score change.
pub const WEIGHT_EPSILON: f64 = 1e-6;
/// Multiply-adds per latent coordinate of one sampler update.
const SAMPLER_OPS_PER_DIM: u64 = 5;

/// Strictly increasing set of candidate guidance scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCandidateSet {
    scales: Vec<f64>,
}

impl GuidanceCandidateSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Contract("candidate set is empty".into()));
        }
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("candidate scales must be finite".into()));
        }
        if scales.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("candidate scales must be strictly increasing".into()));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.scales[0]
    }

    pub fn max(&self) -> f64 {
        *self.scales.last().unwrap()
    }
}

impl Default for GuidanceCandidateSet {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 3.0, 7.5, 11.0, 15.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealShape {
    Linear,
    Cosine,
}

/// How per-evaluator scores are combined before the argmax.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Fixed coefficients, one per evaluator.
    Linear(Vec<f64>),
    /// Relative-change weights recomputed every step.
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct NamedEvaluator {
    pub name: String,
    pub evaluator: Evaluator,
}

impl NamedEvaluator {
    pub fn new(name: impl Into<String>, evaluator: Evaluator) -> Self {
        Self {
            name: name.into(),
            evaluator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicPolicy {
    pub candidates: GuidanceCandidateSet,
    pub evaluators: Vec<NamedEvaluator>,
    pub weighting: Weighting,
    /// Ties go to the candidate closest to this scale, then the smaller one.
    pub anchor: f64,
}

impl DynamicPolicy {
    pub fn new(candidates: GuidanceCandidateSet, evaluators: Vec<NamedEvaluator>, weighting: Weighting) -> Result<Self> {
        if evaluators.is_empty() {
            return Err(Error::Contract("dynamic guidance needs at least one evaluator".into()));
        }
        if let Weighting::Linear(w) = &weighting {
            if w.len() != evaluators.len() {
                return Err(Error::Contract(format!(
                    "{} linear weights for {} evaluators",
                    w.len(),
                    evaluators.len()
                )));
            }
        }
        Ok(Self {
            candidates,
            evaluators,
            weighting,
            anchor: DEFAULT_SCALE,
        })
    }
}

#[derive(Debug, Clone)]
pub enum GuidancePolicy {
    Fixed(f64),
    /// `scale` for `t_lo <= t <= t_hi`, `outside` elsewhere.
    Interval {
        scale: f64,
        t_lo: usize,
        t_hi: usize,
        outside: f64,
    },
    /// Ramps from `start` at `t = T` to `end` at `t = 1`.
    Annealing {
        start: f64,
        end: f64,
        shape: AnnealShape,
    },
    /// `table[t - 1]` is the scale used at step `t`.
    StaticLookup(Vec<f64>),
    Dynamic(DynamicPolicy),
}

impl GuidancePolicy {
    /// Guidance applied on the middle half of the chain.
    pub fn default_interval(steps: usize) -> Self {
        GuidancePolicy::Interval {
            scale: 11.0,
            t_lo: steps / 4,
            t_hi: 3 * steps / 4,
            outside: 1.0,
        }
    }

    pub fn default_annealing() -> Self {
        GuidancePolicy::Annealing {
            start: 15.0,
            end: 1.0,
            shape: AnnealShape::Linear,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        match self {
            GuidancePolicy::Interval { t_lo, t_hi, .. } if !(t_lo < t_hi && *t_hi <= steps) => Err(
                Error::Contract(format!("interval [{t_lo}, {t_hi}] invalid for {steps} steps")),
            ),
            GuidancePolicy::StaticLookup(table) if table.len() != steps => Err(Error::Contract(
                format!("lookup table has {} entries for {steps} steps", table.len()),
            )),
            _ => Ok(()),
        }
    }

    /// Scale of a non-dynamic policy at reverse step `t` of a `steps`-long
    /// chain.
    pub fn scale_at(&self, t: usize, steps: usize) -> Result<f64> {
        if t == 0 || t > steps {
            return Err(Error::TimestepOutOfRange { t, max: steps });
        }
        match self {
            GuidancePolicy::Fixed(s) => Ok(*s),
            GuidancePolicy::Interval {
                scale,
                t_lo,
                t_hi,
                outside,
            } => Ok(if (*t_lo..=*t_hi).contains(&t) {
                *scale
            } else {
                *outside
            }),
            GuidancePolicy::Annealing { start, end, shape } => {
                let u = if steps > 1 {
                    (t - 1) as f64 / (steps - 1) as f64
                } else {
                    1.0
                };
                let phi = match shape {
                    AnnealShape::Linear => u,
                    AnnealShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * u).cos()),
                };
                Ok(end + (start - end) * phi)
            }
            GuidancePolicy::StaticLookup(table) => table.get(t - 1).copied().ok_or_else(|| {
                Error::Contract(format!("lookup table has no entry for t = {t}"))
            }),
            GuidancePolicy::Dynamic(_) => Err(Error::Contract(
                "dynamic guidance has no timestep-only scale".into(),
            )),
        }
    }
}

/// Relative-change weights `(e_t - e_{t+1}) / e_{t+1}`, clamped at zero and
/// renormalized; uniform when nothing is positive or no history exists.
pub fn adaptive_weights(current: &[f64], previous: Option<&[f64]>) -> Vec<f64> {
    let n = current.len();
    let uniform = vec![1.0 / n as f64; n];
    let Some(previous) = previous else {
        return uniform;
    };
    let raw: Vec<f64> = current
        .iter()
        .zip(previous)
        .map(|(&cur, &prev)| ((cur - prev) / prev.max(WEIGHT_EPSILON)).max(0.0))
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        raw.into_iter().map(|a| a / sum).collect()
    } else {
        uniform
    }
}

/// Index of the best candidate. Ties go to the scale nearest `anchor`, then
/// to the smaller scale.
pub fn select_candidate(scores: &[f64], scales: &[f64], anchor: f64) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pick = None::<usize>;
    for (i, (&s, &scale)) in scores.iter().zip(scales).enumerate() {
        if s != best {
            continue;
        }
        pick = match pick {
            None => Some(i),
            Some(j) => {
                let (di, dj) = ((scale - anchor).abs(), (scales[j] - anchor).abs());
                if di < dj || (di == dj && scale < scales[j]) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    pick.unwrap_or(0)
}

/// Running min/max of one evaluator's scores along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningRange {
    min: f64,
    max: f64,
}

impl Default for RunningRange {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl RunningRange {
    pub fn observe(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Maps into `[0, 1]`; a degenerate range maps everything to 0.5.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.5
        }
    }
}

/// Calls and multiply-adds spent by one or more chains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounter {
    pub denoiser_calls: u64,
    pub evaluator_calls: u64,
    pub sampler_steps: u64,
    pub denoiser_ops: u64,
    pub evaluator_ops: u64,
    pub sampler_ops: u64,
}

impl std::ops::AddAssign for NfeCounter {
    fn add_assign(&mut self, o: Self) {
        self.denoiser_calls += o.denoiser_calls;
        self.evaluator_calls += o.evaluator_calls;
        self.sampler_steps += o.sampler_steps;
        self.denoiser_ops += o.denoiser_ops;
        self.evaluator_ops += o.evaluator_ops;
        self.sampler_ops += o.sampler_ops;
    }
}

impl std::iter::Sum for NfeCounter {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut acc = NfeCounter::default();
        for c in iter {
            acc += c;
        }
        acc
    }
}

/// One reverse step of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub chosen_scale: f64,
    /// Raw score of the chosen candidate, per evaluator.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub weights: Vec<f64>,
    /// Combined score of every candidate, in candidate order.
    pub candidate_scores: Vec<f64>,
}

/// Per-step record of the scales a chain used.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScheduleTrace {
    pub evaluator_names: Vec<String>,
    pub candidate_scales: Vec<f64>,
    pub records: Vec<StepRecord>,
}

impl ScheduleTrace {
    /// `(t, chosen_scale)` in reverse-time order.
    pub fn scales(&self) -> Vec<(usize, f64)> {
        self.records.iter().map(|r| (r.t, r.chosen_scale)).collect()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string(), "chosen_scale".to_string()];
        for n in &self.evaluator_names {
            cols.push(format!("{n}_raw"));
            cols.push(format!("{n}_norm"));
            cols.push(format!("{n}_weight"));
        }
        for s in &self.candidate_scales {
            cols.push(format!("cand_{s}"));
        }
        cols.join(",")
    }

    /// CSV body with a `schema_version` comment line first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema_version=1\n");
        out.push_str(&self.csv_header());
        out.push('\n');
        for r in &self.records {
            let mut cells = vec![r.t.to_string(), r.chosen_scale.to_string()];
            for i in 0..self.evaluator_names.len() {
                cells.push(r.raw[i].to_string());
                cells.push(r.normalized[i].to_string());
                cells.push(r.weights[i].to_string());
            }
            cells.extend(r.candidate_scores.iter().map(f64::to_string));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Reads back the `t` and `chosen_scale` columns of [`Self::to_csv`].
    pub fn parse_scales(text: &str) -> Result<Vec<(usize, f64)>> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract("trace CSV has no header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") || cols.get(1) != Some(&"chosen_scale") {
            return Err(Error::Contract("trace CSV must start with t,chosen_scale".into()));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let mut it = line.split(',');
                let bad = || Error::Contract(format!("malformed trace row {}", i + 1));
                let t = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let s = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                Ok((t, s))
            })
            .collect()
    }
}

/// World, schedule and sampler shared by every chain of an experiment.
#[derive(Debug, Clone)]
pub struct Testbed {
    pub world: Arc<MixtureWorld>,
    pub schedule: Arc<NoiseSchedule>,
    pub sampler: Sampler,
}

impl Testbed {
    pub fn new(world: MixtureWorld, schedule: NoiseSchedule, sampler: Sampler) -> Self {
        Self {
            world: Arc::new(world),
            schedule: Arc::new(schedule),
            sampler,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn alignment_oracle(&self) -> Evaluator {
        Evaluator::alignment_oracle(self.world.clone(), self.schedule.clone())
    }

    pub fn quality_oracle(&self) -> Evaluator {
        Evaluator::quality_oracle(self.world.clone(), self.schedule.clone())
    }
}

/// Independent RNG stream for chain `index` under `master_seed`.
pub fn chain_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct ChainResult {
    pub sample: Vec<f64>,
    pub trace: ScheduleTrace,
    pub counter: NfeCounter,
}

/// A guided reverse chain that can be advanced step by step.
pub struct GuidedChain<'a> {
    bed: &'a Testbed,
    policy: &'a GuidancePolicy,
    cond: Condition,
    rng: ChaCha8Rng,
    state: LatentState,
    trace: ScheduleTrace,
    counter: NfeCounter,
    ranges: Vec<RunningRange>,
    /// Raw scores of the chosen path, most recent last.
    history: Vec<Vec<f64>>,
}

impl<'a> GuidedChain<'a> {
    /// Draws `x_T ~ N(0, I)` from `rng`, which then supplies every step's noise.
    pub fn new(bed: &'a Testbed, policy: &'a GuidancePolicy, cond: Condition, mut rng: ChaCha8Rng) -> Result<Self> {
        bed.world.check_condition(cond)?;
        policy.validate(bed.steps())?;
        let mut trace = ScheduleTrace::default();
        let mut n_evals = 0;
        if let GuidancePolicy::Dynamic(d) = policy {
            if cond == Condition::Null && d.evaluators.iter().any(|e| e.evaluator.kind().is_conditional()) {
                return Err(Error::Contract("conditional evaluator in an unconditional chain".into()));
            }
            trace.evaluator_names = d.evaluators.iter().map(|e| e.name.clone()).collect();
            trace.candidate_scales = d.candidates.scales().to_vec();
            n_evals = d.evaluators.len();
        }
        let x: Vec<f64> = (0..bed.world.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            bed,
            policy,
            cond,
            rng,
            state: LatentState::new(x, bed.steps()),
            trace,
            counter: NfeCounter::default(),
            ranges: vec![RunningRange::default(); n_evals],
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn counter(&self) -> &NfeCounter {
        &self.counter
    }

    pub fn cond(&self) -> Condition {
        self.cond
    }

    /// Advances one reverse step.
    pub fn step(&mut self) -> Result<()> {
        let t = self.state.t;
        if t == 0 {
            return Err(Error::CannotStep);
        }
        let bed = self.bed;
        let d = bed.world.dim() as u64;
        let eps_c = bed.world.exact_eps(&self.state.x, t, self.cond, &bed.schedule)?;
        let eps_u = bed.world.exact_eps(&self.state.x, t, Condition::Null, &bed.schedule)?;
        self.counter.denoiser_calls += 2;
        self.counter.denoiser_ops += bed.world.eps_op_cost(self.cond) + bed.world.eps_op_cost(Condition::Null);
        let noise: Vec<f64> = (0..bed.world.dim()).map(|_| self.rng.sample(StandardNormal)).collect();

        match self.policy {
            GuidancePolicy::Dynamic(policy) => {
                let (next, record) = self.dynamic_step(policy, &eps_c, &eps_u, &noise)?;
                self.state = next;
                self.trace.records.push(record);
            }
            other => {
                let s = other.scale_at(t, bed.steps())?;
                let eps = cfg_combine(&eps_u, &eps_c, s)?;
                self.state = bed.sampler.step(&self.state, &eps, &bed.schedule, &noise)?;
                self.counter.sampler_steps += 1;
                self.counter.sampler_ops += (SAMPLER_OPS_PER_DIM + 1) * d;
                self.trace.records.push(StepRecord {
                    t,
                    chosen_scale: s,
                    raw: vec![],
                    normalized: vec![],
                    weights: vec![],
                    candidate_scores: vec![],
                });
            }
        }
        Ok(())
    }

    fn dynamic_step(
        &mut self,
        policy: &DynamicPolicy,
        eps_c: &[f64],
        eps_u: &[f64],
        noise: &[f64],
    ) -> Result<(LatentState, StepRecord)> {
        let bed = self.bed;
        let t = self.state.t;
        let d = bed.world.dim() as u64;
        let n_ev = policy.evaluators.len();

        let weights = match &policy.weighting {
            Weighting::Linear(w) => w.clone(),
            Weighting::Adaptive => {
                let k = self.history.len();
                let norm = |scores: &Vec<f64>| -> Vec<f64> {
                    scores.iter().zip(&self.ranges).map(|(v, r)| r.normalize(*v)).collect()
                };
                if k >= 2 {
                    let cur = norm(&self.history[k - 1]);
                    let prev = norm(&self.history[k - 2]);
                    adaptive_weights(&cur, Some(&prev))
                } else {
                    adaptive_weights(&vec![0.0; n_ev], None)
                }
            }
        };

        let mut candidates = Vec::with_capacity(policy.candidates.len());
        let mut raw = Vec::with_capacity(policy.candidates.len());
        for &s in policy.candidates.scales() {
            let eps = cfg_combine(eps_u, eps_c, s)?;
            let next = bed.sampler.step(&self.state, &eps, &bed.schedule, noise)?;
            let scores = policy
                .evaluators
                .iter()
                .map(|e| e.evaluator.score(&next.x, next.t, self.cond))
                .collect::<Result<Vec<f64>>>()?;
            for (r, v) in self.ranges.iter_mut().zip(&scores) {
                r.observe(*v);
            }
            self.counter.sampler_ops += (SAMPLER_OPS_PER_DIM + 1) * d;
            self.counter.evaluator_calls += n_ev as u64;
            self.counter.evaluator_ops += policy.evaluators.iter().map(|e| e.evaluator.op_cost()).sum::<u64>();
            candidates.push(next);
            raw.push(scores);
        }
        self.counter.sampler_steps += 1;

        let combined: Vec<f64> = raw
            .iter()
            .map(|scores| {
                scores
                    .iter()
                    .zip(&self.ranges)
                    .zip(&weights)
                    .map(|((v, r), w)| w * r.normalize(*v))
                    .sum()
            })
            .collect();
        let best = select_candidate(&combined, policy.candidates.scales(), policy.anchor);
        let chosen_raw = raw.swap_remove(best);
        let record = StepRecord {
            t,
            chosen_scale: policy.candidates.scales()[best],
            normalized: chosen_raw.iter().zip(&self.ranges).map(|(v, r)| r.normalize(*v)).collect(),
            raw: chosen_raw.clone(),
            weights,
            candidate_scores: combined,
        };
        self.history.push(chosen_raw);
        Ok((candidates.swap_remove(best), record))
    }

    /// Steps until the state reaches timestep `t_stop`.
    pub fn run_until(&mut self, t_stop: usize) -> Result<()> {
        while self.state.t > t_stop {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<ChainResult> {
        self.run_until(0)?;
        Ok(ChainResult {
            sample: self.state.x,
            trace: self.trace,
            counter: self.counter,
        })
    }
}

/// Full reverse chain from `x_T ~ N(0, I)` under `policy`.
pub fn run_guided_chain(
    bed: &Testbed,
    policy: &GuidancePolicy,
    cond: Condition,
    rng: ChaCha8Rng,
) -> Result<ChainResult> {
    GuidedChain::new(bed, policy, cond, rng)?.finish()
}
