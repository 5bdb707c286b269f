//! One dynamically guided chain: at every step each candidate scale is tried
//! with the same noise draw and the evaluators pick the winner.
//!
//! cargo run --release --example dynamic_search

use dyncfg::guidance::{chain_rng, run_guided_chain, DynamicPolicy, NamedEvaluator, Weighting};
use dyncfg::harness::op_count_report;
use dyncfg::{Condition, GuidanceCandidateSet, GuidancePolicy, MixtureWorld, NoiseSchedule, Sampler, Testbed};

fn main() -> dyncfg::Result<()> {
    let bed = Testbed::new(MixtureWorld::hard_world(), NoiseSchedule::cosine(200)?, Sampler::Ddpm);
    let policy = GuidancePolicy::Dynamic(DynamicPolicy::new(
        GuidanceCandidateSet::default(),
        vec![
            NamedEvaluator::new("align", bed.alignment_oracle()),
            NamedEvaluator::new("quality", bed.quality_oracle()),
        ],
        Weighting::Adaptive,
    )?);

    let result = run_guided_chain(&bed, &policy, Condition::Class(0), chain_rng(7, 0))?;
    println!("{:>4} {:>6} {:>14} {:>14}", "t", "scale", "w_align", "w_quality");
    for r in result.trace.records.iter().step_by(10) {
        println!("{:>4} {:>6} {:>14.4} {:>14.4}", r.t, r.chosen_scale, r.weights[0], r.weights[1]);
    }
    println!("final sample {:?}", result.sample);

    let c = &result.counter;
    let ops = op_count_report(c);
    println!(
        "denoiser calls {} for {} steps, evaluator calls {}, evaluator share of ops {:.1}%",
        c.denoiser_calls, c.sampler_steps, c.evaluator_calls, ops.evaluator_overhead
    );
    Ok(())
}
