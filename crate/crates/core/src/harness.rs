//! Experiment engine: metrics, best-of-N filtering, paired policy
//! comparisons, schedule aggregation, win rates and operation counts.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::Condition;
use crate::error::{Error, Result};
use crate::evaluators::Evaluator;
use crate::guidance::{chain_rng, GuidancePolicy, GuidedChain, NfeCounter, ScheduleTrace, Testbed};
use crate::world::MixtureWorld;

/// Ridge added to rank-deficient covariances.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Judge scores closer than this count as a tie.
pub const TIE_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// True when a covariance needed the ridge.
    pub regularized: bool,
}

fn moments(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = samples.first().map(Vec::len).unwrap_or(0);
    if samples.len() < d + 1 || d == 0 {
        return Err(Error::Contract(format!(
            "need at least {} samples of dimension {d}, got {}",
            d + 1,
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        crate::error::check_dim(d, s.len())?;
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn needs_ridge(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max().abs().max(1.0);
    eig.eigenvalues.min() <= 1e-12 * max
}

/// Squared 2-Wasserstein distance between Gaussians fit to each sample set.
pub fn frechet_gaussian(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    let (ma, mut ca) = moments(a)?;
    let (mb, mut cb) = moments(b)?;
    crate::error::check_dim(ma.len(), mb.len())?;
    let regularized = needs_ridge(&ca) || needs_ridge(&cb);
    if regularized {
        let ridge = DMatrix::identity(ma.len(), ma.len()) * COVARIANCE_RIDGE;
        ca += &ridge;
        cb += &ridge;
    }
    let ra = sym_sqrt(&ca);
    let mut inner = &ra * &cb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(Frechet {
        distance: dist.max(0.0),
        regularized,
    })
}

/// Mean clean-data posterior of the target class.
pub fn alignment_metric(samples: &[Vec<f64>], conds: &[Condition], world: &MixtureWorld) -> Result<f64> {
    Ok(mean(&posterior_values(samples, conds, world)?))
}

/// Per-sample clean-data posterior of the target class.
pub fn posterior_values(samples: &[Vec<f64>], conds: &[Condition], world: &MixtureWorld) -> Result<Vec<f64>> {
    paired_len(samples.len(), conds.len())?;
    samples
        .iter()
        .zip(conds)
        .map(|(x, cond)| match cond {
            Condition::Class(c) => world.posterior_class_prob_at(x, 1.0, *c),
            Condition::Null => Err(Error::Contract("alignment needs a class condition".into())),
        })
        .collect()
}

/// Per-sample clean-data log posterior of the target class.
pub fn log_posterior_values(samples: &[Vec<f64>], conds: &[Condition], world: &MixtureWorld) -> Result<Vec<f64>> {
    paired_len(samples.len(), conds.len())?;
    samples
        .iter()
        .zip(conds)
        .map(|(x, cond)| match cond {
            Condition::Class(c) => world.log_posterior_at(x, 1.0, *c),
            Condition::Null => Err(Error::Contract("alignment needs a class condition".into())),
        })
        .collect()
}

fn paired_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("unpaired inputs: {a} vs {b}")));
    }
    Ok(())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for `stat` over resampled index sets.
pub fn bootstrap_ci<F>(n: usize, level: f64, resamples: usize, seed: u64, stat: F) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if n == 0 || resamples == 0 {
        return Err(Error::Contract("bootstrap needs data and resamples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..n);
        }
        stats.push(stat(&idx)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

/// As [`bootstrap_ci`], but every resample draws within each stratum so
/// stratum sizes stay fixed. `strata[i]` labels item `i`.
pub fn stratified_bootstrap_ci<F>(strata: &[usize], level: f64, resamples: usize, seed: u64, stat: F) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if strata.is_empty() || resamples == 0 {
        return Err(Error::Contract("bootstrap needs data and resamples".into()));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &s) in strata.iter().enumerate() {
        if groups.len() <= s {
            groups.resize(s + 1, Vec::new());
        }
        groups[s].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    let mut idx = Vec::with_capacity(strata.len());
    for _ in 0..resamples {
        idx.clear();
        for g in groups.iter().filter(|g| !g.is_empty()) {
            idx.extend((0..g.len()).map(|_| g[rng.random_range(0..g.len())]));
        }
        stats.push(stat(&idx)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

fn class_strata(conds: &[Condition], classes: usize) -> Vec<usize> {
    conds.iter().map(|c| c.class().unwrap_or(classes)).collect()
}

/// 95% bootstrap interval of a sample mean.
pub fn mean_ci(values: &[f64], seed: u64) -> Result<(f64, f64)> {
    bootstrap_ci(values.len(), 0.95, DEFAULT_BOOTSTRAP_RESAMPLES, seed, |idx| {
        Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    })
}

/// 95% bootstrap interval of the mean paired difference `a - b`.
pub fn paired_diff_ci(a: &[f64], b: &[f64], seed: u64) -> Result<(f64, f64)> {
    paired_len(a.len(), b.len())?;
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_ci(&diff, seed)
}

/// Class-conditional reference draws from the clean data law.
#[derive(Debug, Clone)]
pub struct Reference {
    pub per_class: Vec<Vec<Vec<f64>>>,
}

impl Reference {
    pub fn draw(world: &MixtureWorld, per_class: usize, seed: u64) -> Result<Self> {
        let per_class = (0..world.num_classes())
            .map(|c| {
                let mut rng = chain_rng(seed, u64::MAX - c as u64);
                (0..per_class).map(|_| world.sample_data(Condition::Class(c), &mut rng)).collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_class })
    }

    /// Class-conditional distance averaged over the classes present in `conds`.
    pub fn frechet(&self, samples: &[Vec<f64>], conds: &[Condition]) -> Result<Frechet> {
        self.frechet_subset(samples, conds, &(0..samples.len()).collect::<Vec<_>>())
    }

    /// As [`Self::frechet`] restricted to the cells in `idx` (with repeats).
    pub fn frechet_subset(&self, samples: &[Vec<f64>], conds: &[Condition], idx: &[usize]) -> Result<Frechet> {
        paired_len(samples.len(), conds.len())?;
        let mut total = 0.0;
        let mut classes = 0;
        let mut regularized = false;
        for (c, refs) in self.per_class.iter().enumerate() {
            let group: Vec<Vec<f64>> = idx
                .iter()
                .filter(|&&i| conds[i] == Condition::Class(c))
                .map(|&i| samples[i].clone())
                .collect();
            if group.is_empty() {
                continue;
            }
            let f = frechet_gaussian(&group, refs)?;
            total += f.distance;
            regularized |= f.regularized;
            classes += 1;
        }
        if classes == 0 {
            return Err(Error::Contract("no class-conditioned samples".into()));
        }
        Ok(Frechet {
            distance: total / classes as f64,
            regularized,
        })
    }
}

/// The `(cond, seed)` cells of an experiment: cell `i` targets class
/// `i mod C` and draws from RNG stream `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cells {
    pub master_seed: u64,
    pub conds: Vec<Condition>,
}

impl Cells {
    pub fn round_robin(n: usize, classes: usize, master_seed: u64) -> Self {
        Self {
            master_seed,
            conds: (0..n).map(|i| Condition::Class(i % classes)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

/// Every chain of one policy over a cell set.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub name: String,
    pub samples: Vec<Vec<f64>>,
    pub traces: Vec<ScheduleTrace>,
    pub counter: NfeCounter,
}

/// Runs one chain per cell in parallel; results are in cell order.
pub fn run_policy(bed: &Testbed, name: &str, policy: &GuidancePolicy, cells: &Cells) -> Result<PolicyRun> {
    let results: Vec<_> = cells
        .conds
        .par_iter()
        .enumerate()
        .map(|(i, &cond)| {
            crate::guidance::run_guided_chain(bed, policy, cond, chain_rng(cells.master_seed, i as u64))
        })
        .collect::<Result<_>>()?;
    let mut run = PolicyRun {
        name: name.to_string(),
        samples: Vec::with_capacity(results.len()),
        traces: Vec::with_capacity(results.len()),
        counter: NfeCounter::default(),
    };
    for r in results {
        run.samples.push(r.sample);
        run.traces.push(r.trace);
        run.counter += r.counter;
    }
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub batch: usize,
    pub keep: usize,
    pub fraction: f64,
    pub evaluator: Evaluator,
}

impl FilterConfig {
    pub fn new(batch: usize, keep: usize, fraction: f64, evaluator: Evaluator) -> Result<Self> {
        if keep == 0 || keep > batch {
            return Err(Error::Contract(format!("need 1 <= K <= B, got K={keep}, B={batch}")));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Contract(format!("filter fraction {fraction} outside (0, 1]")));
        }
        Ok(Self {
            batch,
            keep,
            fraction,
            evaluator,
        })
    }

    /// Timestep at which partial latents are ranked.
    pub fn stop_step(&self, steps: usize) -> usize {
        steps - ((self.fraction * steps as f64).round() as usize).min(steps)
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Survivors in original seed order.
    pub samples: Vec<Vec<f64>>,
    /// Seed indices within the batch of the survivors.
    pub kept: Vec<usize>,
    pub counter: NfeCounter,
}

/// Best-of-N for one condition: chains use streams `base .. base + B`.
pub fn filter_best_of(
    cfg: &FilterConfig,
    bed: &Testbed,
    policy: &GuidancePolicy,
    cond: Condition,
    master_seed: u64,
    base_stream: u64,
) -> Result<FilterOutcome> {
    let t_stop = cfg.stop_step(bed.steps());
    let mut chains = Vec::with_capacity(cfg.batch);
    let mut scores = Vec::with_capacity(cfg.batch);
    let mut counter = NfeCounter::default();
    for b in 0..cfg.batch {
        let mut chain = GuidedChain::new(bed, policy, cond, chain_rng(master_seed, base_stream + b as u64))?;
        chain.run_until(t_stop)?;
        scores.push(cfg.evaluator.score(&chain.state().x, t_stop, cond)?);
        chains.push(Some(chain));
    }
    counter.evaluator_calls += cfg.batch as u64;
    counter.evaluator_ops += cfg.batch as u64 * cfg.evaluator.op_cost();
    let mut order: Vec<usize> = (0..cfg.batch).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept = order[..cfg.keep].to_vec();
    kept.sort_unstable();
    let mut samples = Vec::with_capacity(cfg.keep);
    for (b, slot) in chains.iter_mut().enumerate() {
        let chain = slot.take().unwrap();
        if kept.contains(&b) {
            let r = chain.finish()?;
            counter += r.counter;
            samples.push(r.sample);
        } else {
            counter += *chain.counter();
        }
    }
    Ok(FilterOutcome { samples, kept, counter })
}

/// Best-of-N over every cell; cell `i` uses streams `i * B ..`.
pub fn filter_cells(cfg: &FilterConfig, bed: &Testbed, policy: &GuidancePolicy, cells: &Cells) -> Result<Vec<FilterOutcome>> {
    cells
        .conds
        .par_iter()
        .enumerate()
        .map(|(i, &cond)| filter_best_of(cfg, bed, policy, cond, cells.master_seed, (i * cfg.batch) as u64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterRow {
    /// Evaluator name, or `none` for the unfiltered baseline.
    pub filter: String,
    pub alignment: f64,
    pub alignment_lo: f64,
    pub alignment_hi: f64,
    /// Paired gain over the baseline.
    pub gain: f64,
    pub gain_lo: f64,
    pub gain_hi: f64,
    pub fd: f64,
    pub counter: NfeCounter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub batch: usize,
    pub keep: usize,
    pub fraction: f64,
    /// Baseline first.
    pub rows: Vec<FilterRow>,
}

impl FilterReport {
    pub fn row(&self, filter: &str) -> Option<&FilterRow> {
        self.rows.iter().find(|r| r.filter == filter)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# schema_version=1\nfilter,batch,keep,fraction,alignment,alignment_lo,alignment_hi,gain,gain_lo,gain_hi,fd,denoiser_calls,evaluator_calls\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.filter,
                self.batch,
                self.keep,
                self.fraction,
                r.alignment,
                r.alignment_lo,
                r.alignment_hi,
                r.gain,
                r.gain_lo,
                r.gain_hi,
                r.fd,
                r.counter.denoiser_calls,
                r.counter.evaluator_calls
            ));
        }
        out
    }
}

/// Table of best-of-N filters against no filtering. The baseline keeps the
/// first K seeds of every batch, so all rows share the same x_T draws.
/// Per-cell alignment is the mean posterior of the K survivors.
#[allow(clippy::too_many_arguments)]
pub fn filter_experiment(
    bed: &Testbed,
    policy: &GuidancePolicy,
    cells: &Cells,
    reference: &Reference,
    batch: usize,
    keep: usize,
    fraction: f64,
    filters: &[(String, Evaluator)],
) -> Result<FilterReport> {
    let world = &bed.world;
    let seed = bootstrap_seed(cells.master_seed);
    let baseline: Vec<(Vec<Vec<f64>>, NfeCounter)> = cells
        .conds
        .par_iter()
        .enumerate()
        .map(|(i, &cond)| {
            let mut xs = Vec::with_capacity(keep);
            let mut counter = NfeCounter::default();
            for k in 0..keep {
                let r = crate::guidance::run_guided_chain(
                    bed,
                    policy,
                    cond,
                    chain_rng(cells.master_seed, (i * batch + k) as u64),
                )?;
                counter += r.counter;
                xs.push(r.sample);
            }
            Ok((xs, counter))
        })
        .collect::<Result<_>>()?;

    let summarize = |name: &str, groups: Vec<Vec<Vec<f64>>>, counter: NfeCounter, base: Option<&[f64]>| {
        let per_cell = groups
            .iter()
            .zip(&cells.conds)
            .map(|(xs, c)| Ok(mean(&posterior_values(xs, &vec![*c; xs.len()], world)?)))
            .collect::<Result<Vec<f64>>>()?;
        let (samples, conds): (Vec<Vec<f64>>, Vec<Condition>) = groups
            .into_iter()
            .zip(&cells.conds)
            .flat_map(|(xs, c)| xs.into_iter().map(move |x| (x, *c)))
            .unzip();
        let (alignment_lo, alignment_hi) = mean_ci(&per_cell, seed)?;
        let (gain, (gain_lo, gain_hi)) = match base {
            Some(b) => (mean(&per_cell) - mean(b), paired_diff_ci(&per_cell, b, seed)?),
            None => (0.0, (0.0, 0.0)),
        };
        let row = FilterRow {
            filter: name.to_string(),
            alignment: mean(&per_cell),
            alignment_lo,
            alignment_hi,
            gain,
            gain_lo,
            gain_hi,
            fd: reference.frechet(&samples, &conds)?.distance,
            counter,
        };
        Ok::<_, Error>((row, per_cell))
    };

    let counter = baseline.iter().map(|b| b.1).sum();
    let (row, base_cells) = summarize("none", baseline.into_iter().map(|b| b.0).collect(), counter, None)?;
    let mut rows = vec![row];
    for (name, evaluator) in filters {
        let cfg = FilterConfig::new(batch, keep, fraction, evaluator.clone())?;
        let outcomes = filter_cells(&cfg, bed, policy, cells)?;
        let counter = outcomes.iter().map(|o| o.counter).sum();
        let groups = outcomes.into_iter().map(|o| o.samples).collect();
        rows.push(summarize(name, groups, counter, Some(&base_cells))?.0);
    }
    Ok(FilterReport {
        batch,
        keep,
        fraction,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub policy: String,
    pub seeds: usize,
    pub alignment: f64,
    pub alignment_lo: f64,
    pub alignment_hi: f64,
    pub log_posterior: f64,
    pub fd: f64,
    pub fd_lo: f64,
    pub fd_hi: f64,
    pub fd_regularized: bool,
    pub counter: NfeCounter,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

const REPORT_HEADER: &str = "policy,seeds,alignment,alignment_lo,alignment_hi,log_posterior,fd,fd_lo,fd_hi,fd_regularized,denoiser_calls,evaluator_calls,denoiser_ops,evaluator_ops,sampler_ops";

impl MetricsReport {
    pub fn row(&self, policy: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema_version=1\n{REPORT_HEADER}\n");
        for r in &self.rows {
            let c = &r.counter;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.policy,
                r.seeds,
                r.alignment,
                r.alignment_lo,
                r.alignment_hi,
                r.log_posterior,
                r.fd,
                r.fd_lo,
                r.fd_hi,
                r.fd_regularized,
                c.denoiser_calls,
                c.evaluator_calls,
                c.denoiser_ops,
                c.evaluator_ops,
                c.sampler_ops
            ));
        }
        out
    }
}

/// Seed used for every bootstrap of a comparison.
fn bootstrap_seed(master: u64) -> u64 {
    master ^ 0x5eed_b007
}

/// Report row for one finished policy run.
pub fn metrics_row(run: &PolicyRun, cells: &Cells, world: &MixtureWorld, reference: &Reference) -> Result<MetricsRow> {
    let post = posterior_values(&run.samples, &cells.conds, world)?;
    let logp = log_posterior_values(&run.samples, &cells.conds, world)?;
    let (alignment_lo, alignment_hi) = mean_ci(&post, bootstrap_seed(cells.master_seed))?;
    let fd = reference.frechet(&run.samples, &cells.conds)?;
    let (fd_lo, fd_hi) = stratified_bootstrap_ci(
        &class_strata(&cells.conds, world.num_classes()),
        0.95,
        DEFAULT_BOOTSTRAP_RESAMPLES,
        bootstrap_seed(cells.master_seed),
        |idx| Ok(reference.frechet_subset(&run.samples, &cells.conds, idx)?.distance),
    )?;
    Ok(MetricsRow {
        policy: run.name.clone(),
        seeds: cells.len(),
        alignment: mean(&post),
        alignment_lo,
        alignment_hi,
        log_posterior: mean(&logp),
        fd: fd.distance,
        fd_lo,
        fd_hi,
        fd_regularized: fd.regularized,
        counter: run.counter,
    })
}

/// Runs every policy on the same cells and tabulates them.
pub fn compare_policies(
    bed: &Testbed,
    policies: &[(String, GuidancePolicy)],
    cells: &Cells,
    reference: &Reference,
) -> Result<(MetricsReport, Vec<PolicyRun>)> {
    let mut report = MetricsReport::default();
    let mut runs = Vec::with_capacity(policies.len());
    for (name, policy) in policies {
        let run = run_policy(bed, name, policy, cells)?;
        report.rows.push(metrics_row(&run, cells, &bed.world, reference)?);
        runs.push(run);
    }
    Ok((report, runs))
}

/// Paired 95% interval of `alignment(a) - alignment(b)`.
pub fn alignment_diff_ci(a: &PolicyRun, b: &PolicyRun, cells: &Cells, world: &MixtureWorld) -> Result<(f64, f64)> {
    let pa = posterior_values(&a.samples, &cells.conds, world)?;
    let pb = posterior_values(&b.samples, &cells.conds, world)?;
    paired_diff_ci(&pa, &pb, bootstrap_seed(cells.master_seed))
}

/// Paired 95% interval of `fd(a) - fd(b)`, resampling cells jointly within
/// each class.
pub fn frechet_diff_ci(a: &PolicyRun, b: &PolicyRun, cells: &Cells, reference: &Reference) -> Result<(f64, f64)> {
    stratified_bootstrap_ci(
        &class_strata(&cells.conds, reference.per_class.len()),
        0.95,
        DEFAULT_BOOTSTRAP_RESAMPLES,
        bootstrap_seed(cells.master_seed),
        |idx| {
            Ok(reference.frechet_subset(&a.samples, &cells.conds, idx)?.distance
                - reference.frechet_subset(&b.samples, &cells.conds, idx)?.distance)
        },
    )
}

/// Per-timestep summaries of many schedule traces, `t = T` first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleAggregate {
    pub t: Vec<usize>,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub smoothed_normalized_median: Vec<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Centered moving average with the window clipped at both ends.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(v.len() - 1);
            mean(&v[lo..=hi])
        })
        .collect()
}

/// `range` is the candidate span mapped onto `[0, 1]`.
pub fn aggregate_schedules(traces: &[Vec<(usize, f64)>], range: (f64, f64), steps: usize) -> Result<ScheduleAggregate> {
    let first = traces.first().ok_or_else(|| Error::Contract("no traces to aggregate".into()))?;
    if traces.iter().any(|tr| tr.len() != first.len() || tr.iter().zip(first).any(|(a, b)| a.0 != b.0)) {
        return Err(Error::Contract("traces cover different timesteps".into()));
    }
    let t: Vec<usize> = first.iter().map(|p| p.0).collect();
    let mut means = Vec::with_capacity(t.len());
    let mut medians = Vec::with_capacity(t.len());
    for k in 0..t.len() {
        let mut col: Vec<f64> = traces.iter().map(|tr| tr[k].1).collect();
        means.push(mean(&col));
        medians.push(median(&mut col));
    }
    let span = range.1 - range.0;
    let normalized: Vec<f64> = medians
        .iter()
        .map(|m| if span > 0.0 { (m - range.0) / span } else { 0.5 })
        .collect();
    Ok(ScheduleAggregate {
        t,
        mean: means,
        median: medians,
        smoothed_normalized_median: moving_average(&normalized, (steps / 20).max(1)),
    })
}

impl ScheduleAggregate {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema_version=1\nt,mean,median,smoothed_normalized_median\n");
        for i in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.t[i], self.mean[i], self.median[i], self.smoothed_normalized_median[i]
            ));
        }
        out
    }

    /// Mean schedule as a lookup table indexed by `t - 1`.
    pub fn mean_lookup(&self) -> GuidancePolicy {
        self.lookup(&self.mean)
    }

    pub fn median_lookup(&self) -> GuidancePolicy {
        self.lookup(&self.median)
    }

    fn lookup(&self, series: &[f64]) -> GuidancePolicy {
        let mut table = vec![0.0; self.t.len()];
        for (t, v) in self.t.iter().zip(series) {
            table[t - 1] = *v;
        }
        GuidancePolicy::StaticLookup(table)
    }

    /// Line chart of the three series against reverse time.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 40.0);
        let tmax = self.t.iter().copied().max().unwrap_or(1).max(1) as f64;
        let ymax = self
            .mean
            .iter()
            .chain(&self.median)
            .copied()
            .fold(1.0, f64::max);
        let x = |t: usize| pad + (tmax - t as f64) / tmax * (w - 2.0 * pad);
        let y = |v: f64| h - pad - v / ymax * (h - 2.0 * pad);
        let line = |series: &[f64], colour: &str| {
            let pts: Vec<String> = self
                .t
                .iter()
                .zip(series)
                .map(|(t, v)| format!("{:.2},{:.2}", x(*t), y(*v)))
                .collect();
            format!(
                "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            )
        };
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{pad}\" y=\"{lbl}\" font-size=\"12\">t = T .. 1 (max {ymax})</text>\n",
            b = h - pad,
            r = w - pad,
            lbl = h - 10.0,
        );
        out.push_str(&line(&self.mean, "steelblue"));
        out.push_str(&line(&self.median, "darkorange"));
        let scaled: Vec<f64> = self.smoothed_normalized_median.iter().map(|v| v * ymax).collect();
        out.push_str(&line(&scaled, "seagreen"));
        out.push_str("</svg>\n");
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinRate {
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Fraction of paired cells where the judge prefers `a`; ties score 0.5.
pub fn win_rate(a: &[Vec<f64>], b: &[Vec<f64>], conds: &[Condition], judge: &Evaluator, seed: u64) -> Result<WinRate> {
    paired_len(a.len(), b.len())?;
    paired_len(a.len(), conds.len())?;
    let outcomes = a
        .iter()
        .zip(b)
        .zip(conds)
        .map(|((xa, xb), &cond)| {
            let (sa, sb) = (judge.score(xa, 0, cond)?, judge.score(xb, 0, cond)?);
            Ok(if (sa - sb).abs() <= TIE_TOLERANCE {
                0.5
            } else if sa > sb {
                1.0
            } else {
                0.0
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let (lo, hi) = mean_ci(&outcomes, seed)?;
    Ok(WinRate {
        rate: mean(&outcomes),
        lo,
        hi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpRow {
    pub component: &'static str,
    pub ops: u64,
    pub percent: f64,
}

/// Multiply-add breakdown of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCountReport {
    pub rows: Vec<OpRow>,
    pub total: u64,
    /// Evaluator share of the total, in percent.
    pub evaluator_overhead: f64,
    /// Total divided by the total without evaluator work.
    pub ratio_to_baseline: f64,
}

pub fn op_count_report(counter: &NfeCounter) -> OpCountReport {
    let parts = [
        ("denoiser", counter.denoiser_ops),
        ("evaluator", counter.evaluator_ops),
        ("sampler", counter.sampler_ops),
    ];
    let total: u64 = parts.iter().map(|p| p.1).sum();
    let pct = |v: u64| if total == 0 { 0.0 } else { 100.0 * v as f64 / total as f64 };
    let baseline = total - counter.evaluator_ops;
    OpCountReport {
        rows: parts
            .iter()
            .map(|&(component, ops)| OpRow {
                component,
                ops,
                percent: pct(ops),
            })
            .collect(),
        total,
        evaluator_overhead: pct(counter.evaluator_ops),
        ratio_to_baseline: if baseline == 0 { f64::NAN } else { total as f64 / baseline as f64 },
    }
}

impl OpCountReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema_version=1\ncomponent,ops,percent\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.component, r.ops, r.percent));
        }
        out.push_str(&format!("total,{},100\n", self.total));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frechet_identity_and_one_d() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        assert!(frechet_gaussian(&a, &a).unwrap().distance < 1e-10);
        // sample moments exactly N(0, 1) and N(1, 1) with the n - 1 convention
        let s = (0.75f64).sqrt();
        let p: Vec<Vec<f64>> = [-s, s, -s, s].iter().map(|v| vec![*v]).collect();
        let s1 = (0.75f64).sqrt();
        let q: Vec<Vec<f64>> = [1.0 - s1, 1.0 + s1, 1.0 - s1, 1.0 + s1].iter().map(|v| vec![*v]).collect();
        let f = frechet_gaussian(&p, &p).unwrap();
        assert!(f.distance < 1e-12);
        let g = frechet_gaussian(&p, &q).unwrap();
        assert!((g.distance - 1.0).abs() < 1e-10, "{}", g.distance);
    }

    #[test]
    fn frechet_rejects_too_few_and_flags_degenerate() {
        assert!(frechet_gaussian(&[vec![0.0, 0.0], vec![1.0, 1.0]], &vec![vec![0.0, 0.0]; 5]).is_err());
        let line: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        assert!(frechet_gaussian(&line, &line).unwrap().regularized);
    }

    #[test]
    fn schedule_aggregation_of_constant_traces() {
        let tr: Vec<(usize, f64)> = (1..=40).rev().map(|t| (t, 7.5)).collect();
        let agg = aggregate_schedules(&[tr.clone(), tr.clone(), tr], (1.0, 15.0), 40).unwrap();
        assert!(agg.mean.iter().chain(&agg.median).all(|v| *v == 7.5));
        assert!(agg.smoothed_normalized_median.iter().all(|v| (v - 6.5 / 14.0).abs() < 1e-15));
        assert!(aggregate_schedules(&[], (1.0, 15.0), 40).is_err());
    }

    #[test]
    fn moving_average_clips_at_ends() {
        assert_eq!(moving_average(&[0.0, 3.0, 6.0, 9.0], 2), vec![1.5, 3.0, 6.0, 7.5]);
        assert_eq!(moving_average(&[1.0, 2.0], 1), vec![1.0, 2.0]);
    }

    #[test]
    fn bootstrap_of_constant_is_degenerate() {
        let (lo, hi) = mean_ci(&[2.0; 20], 1).unwrap();
        assert_eq!((lo, hi), (2.0, 2.0));
    }

    #[test]
    fn filter_config_bounds() {
        let w = std::sync::Arc::new(MixtureWorld::default_world());
        let s = std::sync::Arc::new(crate::NoiseSchedule::cosine(10).unwrap());
        let ev = Evaluator::alignment_oracle(w, s);
        assert!(FilterConfig::new(4, 8, 0.25, ev.clone()).is_err());
        assert!(FilterConfig::new(4, 1, 0.0, ev.clone()).is_err());
        let cfg = FilterConfig::new(4, 1, 0.25, ev).unwrap();
        assert_eq!(cfg.stop_step(200), 150);
    }

    #[test]
    fn op_report_without_evaluators() {
        let c = NfeCounter {
            denoiser_ops: 90,
            sampler_ops: 10,
            ..Default::default()
        };
        let r = op_count_report(&c);
        assert_eq!(r.evaluator_overhead, 0.0);
        assert_eq!(r.ratio_to_baseline, 1.0);
        assert_eq!(r.rows[0].percent, 90.0);
    }
}
