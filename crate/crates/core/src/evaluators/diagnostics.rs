//! Held-out measurements of evaluator quality at a fixed timestep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::train::{CapabilitySample, PreferencePair};
use super::Evaluator;
use crate::diffusion::{Condition, NoiseSchedule};
use crate::error::Result;
use crate::world::MixtureWorld;

/// Probability that a positive outranks a negative, ties counted as half.
pub fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

fn noised(x0: &[f64], t: usize, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    sched.forward_noise(x0, t, &eps)
}

/// Fraction of fresh `(x_t, c)` draws for which the true class has the
/// highest score; ties share credit.
pub fn class_accuracy(
    ev: &Evaluator,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0.0;
    for _ in 0..n {
        let c = world.sample_class(&mut rng);
        let x0 = world.sample_data(Condition::Class(c), &mut rng)?;
        let xt = noised(&x0, t, sched, &mut rng)?;
        let scores = (0..world.num_classes())
            .map(|k| ev.score(&xt, t, Condition::Class(k)))
            .collect::<Result<Vec<_>>>()?;
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties = scores.iter().filter(|&&s| s == best).count();
        if scores[c] == best {
            hits += 1.0 / ties as f64;
        }
    }
    Ok(hits / n as f64)
}

/// AUC of matched `(x_t, c)` scores against the same latents scored with a
/// different class.
pub fn matched_auc(
    ev: &Evaluator,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = world.num_classes();
    let (mut pos, mut neg) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let c = world.sample_class(&mut rng);
        let other = (c + 1 + rng.random_range(0..classes - 1)) % classes;
        let x0 = world.sample_data(Condition::Class(c), &mut rng)?;
        let xt = noised(&x0, t, sched, &mut rng)?;
        pos.push(ev.score(&xt, t, Condition::Class(c))?);
        neg.push(ev.score(&xt, t, Condition::Class(other))?);
    }
    Ok(auc(&pos, &neg))
}

/// AUC of "real" against "generated" after noising both sets to `t`.
pub fn discriminator_auc(
    ev: &Evaluator,
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score_all = |set: &[Vec<f64>]| -> Result<Vec<f64>> {
        set.iter()
            .map(|x| ev.score(&noised(x, t, sched, &mut rng)?, t, Condition::Null))
            .collect()
    };
    let pos = score_all(real)?;
    let neg = score_all(generated)?;
    Ok(auc(&pos, &neg))
}

/// Fraction of pairs where the preferred latent scores higher, ties as half.
pub fn pairwise_accuracy(
    ev: &Evaluator,
    pairs: &[PreferencePair],
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0.0;
    for p in pairs {
        let a = ev.score(&noised(p.preferred(), t, sched, &mut rng)?, t, p.cond)?;
        let b = ev.score(&noised(p.rejected(), t, sched, &mut rng)?, t, p.cond)?;
        hits += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
    }
    Ok(hits / pairs.len() as f64)
}

/// Mean squared error of the regressor at `t`, and the target variance.
pub fn regression_mse(
    ev: &Evaluator,
    data: &[CapabilitySample],
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len() as f64;
    let mean = data.iter().map(|s| s.target).sum::<f64>() / n;
    let var = data.iter().map(|s| (s.target - mean).powi(2)).sum::<f64>() / n;
    let mut se = 0.0;
    for s in data {
        let xt = noised(&s.x0, t, sched, &mut rng)?;
        se += (ev.score(&xt, t, Condition::Class(s.class))? - s.target).powi(2);
    }
    Ok((se / n, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]), 0.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0]), 0.5);
        assert_eq!(auc(&[2.0], &[1.0, 2.0, 3.0]), 0.5);
    }
}
