//! Collects the scale schedules chosen by dynamic guidance, summarizes them
//! per timestep and replays the mean schedule as a static lookup.
//!
//! cargo run --release --example schedule_aggregation

use dyncfg::guidance::{DynamicPolicy, NamedEvaluator, ScheduleTrace, Weighting};
use dyncfg::harness::{aggregate_schedules, alignment_metric, run_policy, Cells};
use dyncfg::{GuidanceCandidateSet, GuidancePolicy, MixtureWorld, NoiseSchedule, Sampler, Testbed};

fn main() -> dyncfg::Result<()> {
    let bed = Testbed::new(MixtureWorld::default_world(), NoiseSchedule::cosine(200)?, Sampler::Ddpm);
    let candidates = GuidanceCandidateSet::default();
    let policy = GuidancePolicy::Dynamic(DynamicPolicy::new(
        candidates.clone(),
        vec![
            NamedEvaluator::new("align", bed.alignment_oracle()),
            NamedEvaluator::new("quality", bed.quality_oracle()),
        ],
        Weighting::Adaptive,
    )?);
    let cells = Cells::round_robin(200, 2, 3);
    let run = run_policy(&bed, "dynamic", &policy, &cells)?;

    let traces: Vec<_> = run.traces.iter().map(ScheduleTrace::scales).collect();
    let agg = aggregate_schedules(&traces, (candidates.min(), candidates.max()), bed.steps())?;
    println!("{:>4} {:>7} {:>7} {:>9}", "t", "mean", "median", "smoothed");
    for i in (0..agg.t.len()).step_by(20) {
        println!("{:>4} {:>7.2} {:>7.2} {:>9.3}", agg.t[i], agg.mean[i], agg.median[i], agg.smoothed_normalized_median[i]);
    }

    let replay = run_policy(&bed, "mean-lookup", &agg.mean_lookup(), &cells)?;
    println!(
        "alignment: dynamic {:.6}, mean schedule replayed {:.6}",
        alignment_metric(&run.samples, &cells.conds, &bed.world)?,
        alignment_metric(&replay.samples, &cells.conds, &bed.world)?
    );

    let svg = std::env::temp_dir().join("dyncfg_schedule.svg");
    std::fs::write(&svg, agg.to_svg()).map_err(|e| dyncfg::Error::Io { path: svg.clone(), source: e })?;
    println!("chart written to {}", svg.display());
    Ok(())
}
