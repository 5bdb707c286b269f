use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dyncfg::guidance::{chain_rng, run_guided_chain};
use dyncfg::harness::{
    alignment_metric, filter_best_of, filter_cells, filter_experiment, frechet_gaussian, run_policy,
    stratified_bootstrap_ci, win_rate, Cells, FilterConfig, MetricsReport, Reference,
};
use dyncfg::world::ClassSpec;
use dyncfg::{Condition, GuidancePolicy, MixtureWorld, NoiseSchedule, Sampler, Testbed, WorldSpec};

fn bed(world: MixtureWorld) -> Testbed {
    Testbed::new(world, NoiseSchedule::cosine(200).unwrap(), Sampler::Ddpm)
}

fn gaussian_cloud(n: usize, seed: u64, mix: [f64; 4], shift: [f64; 2]) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            vec![shift[0] + mix[0] * u + mix[1] * v, shift[1] + mix[2] * u + mix[3] * v]
        })
        .collect()
}

/// Closed form for 2x2 covariances: `tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))`
/// with `M = A^{1/2} B A^{1/2}`, whose trace and determinant equal those of `A B`.
fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let stats = |s: &[Vec<f64>]| {
        let n = s.len() as f64;
        let m = [s.iter().map(|x| x[0]).sum::<f64>() / n, s.iter().map(|x| x[1]).sum::<f64>() / n];
        let mut c = [0.0; 4];
        for x in s {
            let d = [x[0] - m[0], x[1] - m[1]];
            c[0] += d[0] * d[0] / (n - 1.0);
            c[1] += d[0] * d[1] / (n - 1.0);
            c[2] += d[1] * d[0] / (n - 1.0);
            c[3] += d[1] * d[1] / (n - 1.0);
        }
        (m, c)
    };
    let ((ma, ca), (mb, cb)) = (stats(a), stats(b));
    let ab = [
        ca[0] * cb[0] + ca[1] * cb[2],
        ca[0] * cb[1] + ca[1] * cb[3],
        ca[2] * cb[0] + ca[3] * cb[2],
        ca[2] * cb[1] + ca[3] * cb[3],
    ];
    let det = ab[0] * ab[3] - ab[1] * ab[2];
    let cross = (ab[0] + ab[3] + 2.0 * det.sqrt()).sqrt();
    (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0] + ca[3] + cb[0] + cb[3] - 2.0 * cross
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_matches_closed_form_oracle(
        seed in 0u64..10_000,
        m1 in prop::array::uniform4(-2.0f64..2.0),
        m2 in prop::array::uniform4(-2.0f64..2.0),
        s in prop::array::uniform2(-3.0f64..3.0),
    ) {
        let a = gaussian_cloud(200, seed, m1, [0.0, 0.0]);
        let b = gaussian_cloud(300, seed + 1, m2, s);
        let got = frechet_gaussian(&a, &b).unwrap();
        prop_assume!(!got.regularized);
        let want = frechet_oracle(&a, &b);
        prop_assert!((got.distance - want).abs() <= 1e-8 * want.abs().max(1.0), "{} vs {}", got.distance, want);
        let back = frechet_gaussian(&b, &a).unwrap().distance;
        prop_assert!((got.distance - back).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn frechet_is_invariant_under_shared_rigid_motions(
        seed in 0u64..10_000,
        angle in 0.0f64..std::f64::consts::TAU,
        shift in prop::array::uniform2(-10.0f64..10.0),
        flip in any::<bool>(),
    ) {
        let a = gaussian_cloud(150, seed, [1.0, 0.3, 0.0, 0.7], [0.0, 0.0]);
        let b = gaussian_cloud(150, seed + 7, [0.5, 0.0, 0.4, 1.2], [1.0, -1.0]);
        let (c, s) = (angle.cos(), angle.sin());
        let sign = if flip { -1.0 } else { 1.0 };
        let map = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
            set.iter()
                .map(|x| vec![c * x[0] - s * x[1] + shift[0], sign * (s * x[0] + c * x[1]) + shift[1]])
                .collect()
        };
        let before = frechet_gaussian(&a, &b).unwrap().distance;
        let after = frechet_gaussian(&map(&a), &map(&b)).unwrap().distance;
        prop_assert!((before - after).abs() <= 1e-8 * before.max(1.0));
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn alignment_of_exact_hard_world_draws_matches_quadrature() {
    // Classes differ only along the first axis (means -0.8 and +0.8, variance
    // 0.4), so the posterior of class 0 is sigmoid(-4 x1) with x1 ~ N(-0.8, 0.4).
    let (mu, var) = (-0.8f64, 0.4f64);
    let (lo, hi, n) = (-8.0, 8.0, 40000);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| sigmoid(-4.0 * x) * (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let oracle = acc * h / 3.0;
    assert!(oracle > 0.5 && oracle < 1.0);

    let world = MixtureWorld::hard_world();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let conds: Vec<Condition> = (0..40000).map(|i| Condition::Class(i % 2)).collect();
    let xs: Vec<Vec<f64>> = conds.iter().map(|c| world.sample_data(*c, &mut rng).unwrap()).collect();
    let metric = alignment_metric(&xs, &conds, &world).unwrap();
    assert!((metric - oracle).abs() < 0.005, "{metric} vs {oracle}");
}

fn separated_world() -> MixtureWorld {
    let class = |m: f64| ClassSpec {
        weights: vec![1.0],
        means: vec![vec![m, 0.0]],
        covariances: vec![vec![0.2, 0.0, 0.0, 0.2]],
    };
    MixtureWorld::new(WorldSpec {
        dim: 2,
        priors: vec![0.5, 0.5],
        classes: vec![class(-3.0), class(3.0)],
    })
    .unwrap()
}

#[test]
fn alignment_metric_limits() {
    let world = separated_world();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wrong: Vec<Vec<f64>> = (0..500).map(|_| world.sample_data(Condition::Class(1), &mut rng).unwrap()).collect();
    let conds = vec![Condition::Class(0); 500];
    assert!(alignment_metric(&wrong, &conds, &world).unwrap() < 0.05);

    let single = MixtureWorld::new(WorldSpec {
        dim: 2,
        priors: vec![1.0],
        classes: vec![ClassSpec {
            weights: vec![1.0],
            means: vec![vec![0.0, 0.0]],
            covariances: vec![vec![1.0, 0.0, 0.0, 1.0]],
        }],
    })
    .unwrap();
    let xs = vec![vec![0.3, 9.0], vec![-4.0, 1.0]];
    assert_eq!(alignment_metric(&xs, &[Condition::Class(0); 2], &single).unwrap(), 1.0);
}

#[test]
fn win_rate_cases() {
    let world = separated_world();
    let b = bed(world.clone());
    let judge = b.alignment_oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let conds: Vec<Condition> = (0..300).map(|_| Condition::Class(0)).collect();
    let good: Vec<Vec<f64>> = conds.iter().map(|c| world.sample_data(*c, &mut rng).unwrap()).collect();
    let bad: Vec<Vec<f64>> = conds.iter().map(|_| world.sample_data(Condition::Class(1), &mut rng).unwrap()).collect();

    assert_eq!(win_rate(&good, &good, &conds, &judge, 1).unwrap().rate, 0.5);
    let w = win_rate(&good, &bad, &conds, &judge, 1).unwrap();
    assert!(w.rate > 0.95);
    let back = win_rate(&bad, &good, &conds, &judge, 1).unwrap();
    assert_eq!(w.rate + back.rate, 1.0);
    assert!(win_rate(&good, &bad[..10], &conds, &judge, 1).is_err());
}

#[test]
fn keeping_the_whole_batch_is_a_no_op() {
    let b = bed(MixtureWorld::default_world());
    let policy = GuidancePolicy::Fixed(7.5);
    let cfg = FilterConfig::new(4, 4, 0.25, b.alignment_oracle()).unwrap();
    let out = filter_best_of(&cfg, &b, &policy, Condition::Class(1), 9, 40).unwrap();
    assert_eq!(out.kept, vec![0, 1, 2, 3]);
    for (k, x) in out.samples.iter().enumerate() {
        let plain = run_guided_chain(&b, &policy, Condition::Class(1), chain_rng(9, 40 + k as u64)).unwrap();
        assert_eq!(x, &plain.sample);
    }
}

#[test]
fn truncated_chains_are_counted() {
    let b = bed(MixtureWorld::default_world());
    let cfg = FilterConfig::new(4, 1, 0.25, b.alignment_oracle()).unwrap();
    let t_stop = cfg.stop_step(200);
    assert_eq!(t_stop, 150);
    let out = filter_best_of(&cfg, &b, &GuidancePolicy::Fixed(7.5), Condition::Class(0), 1, 0).unwrap();
    assert_eq!(out.counter.denoiser_calls, (4 * 2 * 50 + 2 * 150) as u64);
    assert_eq!(out.counter.evaluator_calls, 4);
}

#[test]
fn filtering_after_the_last_step_never_hurts() {
    let b = bed(MixtureWorld::hard_world());
    let cells = Cells::round_robin(200, 2, 5);
    let policy = GuidancePolicy::Fixed(1.0);
    let cfg = FilterConfig::new(4, 1, 1.0, b.alignment_oracle()).unwrap();
    let outcomes = filter_cells(&cfg, &b, &policy, &cells).unwrap();
    let all = FilterConfig::new(4, 4, 1.0, b.alignment_oracle()).unwrap();
    let batches = filter_cells(&all, &b, &policy, &cells).unwrap();
    for ((best, batch), cond) in outcomes.iter().zip(&batches).zip(&cells.conds) {
        let c = cond.class().unwrap();
        let top = b.world.posterior_class_prob_at(&best.samples[0], 1.0, c).unwrap();
        let avg = batch.samples.iter().map(|x| b.world.posterior_class_prob_at(x, 1.0, c).unwrap()).sum::<f64>() / 4.0;
        assert!(top >= avg);
    }
}

#[test]
fn quarter_way_oracle_filter_improves_alignment() {
    let b = bed(MixtureWorld::hard_world());
    let cells = Cells::round_robin(500, 2, 11);
    let reference = Reference::draw(&b.world, 2000, 12).unwrap();
    let report = filter_experiment(
        &b,
        &GuidancePolicy::Fixed(1.0),
        &cells,
        &reference,
        4,
        1,
        0.25,
        &[("oracle".into(), b.alignment_oracle())],
    )
    .unwrap();
    let row = report.row("oracle").unwrap();
    assert!(row.gain_lo > 0.0, "{row:?}");
    assert!(report.to_csv().starts_with("# schema_version=1\nfilter,"));
}

#[test]
fn results_do_not_depend_on_the_worker_count() {
    let b = bed(MixtureWorld::default_world());
    let cells = Cells::round_robin(16, 2, 3);
    let policy = GuidancePolicy::default_annealing();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_policy(&b, "p", &policy, &cells).unwrap().samples)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn stratified_resamples_keep_class_sizes() {
    let strata = [0, 1, 0, 1, 1, 2];
    stratified_bootstrap_ci(&strata, 0.95, 50, 1, |idx| {
        let count = |s: usize| idx.iter().filter(|&&i| strata[i] == s).count();
        assert_eq!((count(0), count(1), count(2)), (2, 3, 1));
        Ok(0.0)
    })
    .unwrap();
}

#[test]
fn empty_report_is_header_only() {
    let csv = MetricsReport::default().to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("# schema_version=1\npolicy,"));
}
