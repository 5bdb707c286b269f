//! Best-of-4 filtering a quarter of the way into sampling, ranking partial
//! latents with the exact posterior and with a learned alignment scorer.
//!
//! cargo run --release --example filtering

use dyncfg::evaluators::train::{train_alignment, TrainHyper};
use dyncfg::harness::{filter_experiment, Cells, Reference};
use dyncfg::{EvaluatorKind, GuidancePolicy, MixtureWorld, NoiseSchedule, Sampler, Testbed};

fn main() -> dyncfg::Result<()> {
    let bed = Testbed::new(MixtureWorld::hard_world(), NoiseSchedule::cosine(200)?, Sampler::Ddpm);
    let clip = train_alignment(&bed.world, &bed.schedule, &TrainHyper::default_for(EvaluatorKind::AlignmentLearned))?;
    let cells = Cells::round_robin(1000, 2, 11);
    let reference = Reference::draw(&bed.world, 3000, 12)?;

    for fraction in [0.25, 0.5, 1.0] {
        let report = filter_experiment(
            &bed,
            &GuidancePolicy::Fixed(1.0),
            &cells,
            &reference,
            4,
            1,
            fraction,
            &[("oracle".into(), bed.alignment_oracle()), ("learned".into(), clip.clone())],
        )?;
        println!("filter at {:.0}% of the trajectory", fraction * 100.0);
        for r in &report.rows {
            println!(
                "  {:<8} alignment {:.4}  gain {:+.4} [{:+.4}, {:+.4}]  denoiser calls {}",
                r.filter, r.alignment, r.gain, r.gain_lo, r.gain_hi, r.counter.denoiser_calls
            );
        }
    }
    Ok(())
}
