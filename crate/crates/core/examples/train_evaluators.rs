//! Trains one noisy-latent evaluator of each learned kind, reports its
//! held-out diagnostic at low and full noise, and round-trips an artifact.
//!
//! cargo run --release --example train_evaluators

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dyncfg::evaluators::diagnostics::{class_accuracy, discriminator_auc, pairwise_accuracy, regression_mse};
use dyncfg::evaluators::train::{
    capability_dataset, capability_oracle, oracle_preference_pairs, train_alignment, train_capability,
    train_discriminator, train_reward, TrainHyper,
};
use dyncfg::{Condition, Evaluator, EvaluatorKind, MixtureWorld, NoiseSchedule};

fn main() -> dyncfg::Result<()> {
    let world = MixtureWorld::default_world();
    let sched = NoiseSchedule::cosine(200)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hyper = TrainHyper::default_for;

    let clip = train_alignment(&world, &sched, &hyper(EvaluatorKind::AlignmentLearned))?;
    println!(
        "alignment  accuracy  t=20 {:.3}  t=200 {:.3}",
        class_accuracy(&clip, &world, &sched, 20, 2000, 1)?,
        class_accuracy(&clip, &world, &sched, 200, 2000, 1)?
    );

    let pairs = oracle_preference_pairs(&world, 5000, &mut rng)?;
    let held = oracle_preference_pairs(&world, 1000, &mut rng)?;
    let reward = train_reward(&pairs, &sched, &hyper(EvaluatorKind::RewardLearned))?;
    println!(
        "reward     pairwise  t=0  {:.3}  t=200 {:.3}",
        pairwise_accuracy(&reward, &held, &sched, 0, 1)?,
        pairwise_accuracy(&reward, &held, &sched, 200, 1)?
    );

    let data = capability_dataset(&world, 5000, capability_oracle, &mut rng)?;
    let held = capability_dataset(&world, 1000, capability_oracle, &mut rng)?;
    let cap = train_capability(&data, &sched, &hyper(EvaluatorKind::CapabilityLearned))?;
    let (lo, var) = regression_mse(&cap, &held, &sched, 20, 1)?;
    let (hi, _) = regression_mse(&cap, &held, &sched, 200, 1)?;
    println!("capability mse/var  t=20 {:.3}  t=200 {:.3}", lo / var, hi / var);

    // real draws against a copy shifted by (+1, +1)
    let draw = |n, shift: f64, rng: &mut ChaCha8Rng| -> dyncfg::Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| Ok(world.sample_data(Condition::Null, rng)?.iter().map(|v| v + shift).collect()))
            .collect()
    };
    let (real, fake) = (draw(4000, 0.0, &mut rng)?, draw(4000, 1.0, &mut rng)?);
    let disc = train_discriminator(&real, &fake, &sched, &hyper(EvaluatorKind::DiscriminatorLearned))?;
    let (hr, hf) = (draw(1000, 0.0, &mut rng)?, draw(1000, 1.0, &mut rng)?);
    println!(
        "quality    AUC       t=0  {:.3}  t=200 {:.3}",
        discriminator_auc(&disc, &hr, &hf, &sched, 0, 1)?,
        discriminator_auc(&disc, &hr, &hf, &sched, 200, 1)?
    );

    let bytes = clip.to_artifact_bytes()?;
    let back = Evaluator::from_artifact_bytes(&bytes)?;
    let x = [1.0, -0.5];
    assert_eq!(back.score(&x, 30, Condition::Class(1))?, clip.score(&x, 30, Condition::Class(1))?);
    println!("artifact: {} bytes, {} parameters, {} multiply-adds per score", bytes.len(), back.num_params(), back.op_cost());
    Ok(())
}
