//! Fixed-scale guided sampling on the hard world: alignment rises and
//! the Fréchet distance to clean draws grows as the scale goes up.
//!
//! cargo run --release --example guided_sampling

use dyncfg::harness::{alignment_metric, run_policy, Cells, Reference};
use dyncfg::{GuidancePolicy, MixtureWorld, NoiseSchedule, Sampler, Testbed};

fn main() -> dyncfg::Result<()> {
    let bed = Testbed::new(MixtureWorld::hard_world(), NoiseSchedule::cosine(200)?, Sampler::Ddpm);
    let cells = Cells::round_robin(300, 2, 1);
    let reference = Reference::draw(&bed.world, 3000, 2)?;

    println!("{:>6} {:>10} {:>8}", "scale", "alignment", "FD");
    for s in [1.0, 3.0, 7.5, 11.0, 15.0] {
        let run = run_policy(&bed, "fixed", &GuidancePolicy::Fixed(s), &cells)?;
        let align = alignment_metric(&run.samples, &cells.conds, &bed.world)?;
        let fd = reference.frechet(&run.samples, &cells.conds)?.distance;
        println!("{s:>6} {align:>10.4} {fd:>8.4}");
    }
    Ok(())
}
