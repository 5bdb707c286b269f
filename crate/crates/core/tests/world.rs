use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dyncfg::guidance::{chain_rng, run_guided_chain};
use dyncfg::harness::frechet_gaussian;
use dyncfg::world::ClassSpec;
use dyncfg::{Condition, GuidancePolicy, MixtureWorld, NoiseSchedule, Sampler, Testbed, WorldSpec};

fn one_class(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> MixtureWorld {
    let dim = means[0].len();
    MixtureWorld::new(WorldSpec {
        dim,
        priors: vec![1.0],
        classes: vec![ClassSpec {
            weights,
            means,
            covariances,
        }],
    })
    .unwrap()
}

fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn noised_density_matches_quadrature_in_one_dimension() {
    let (w, mu, var) = ([0.3, 0.7], [-1.5, 2.0], [0.2, 0.8]);
    let world = one_class(w.to_vec(), vec![vec![mu[0]], vec![mu[1]]], vec![vec![var[0]], vec![var[1]]]);
    // composite Simpson over x0 on a wide grid
    let (lo, hi, n) = (-12.0, 14.0, 20000);
    let h = (hi - lo) / n as f64;
    for ab in [0.999f64, 0.7, 0.3, 0.01] {
        for x in [-3.0, -0.4, 0.0, 1.7, 4.5] {
            let f = |x0: f64| {
                let prior: f64 = (0..2).map(|k| w[k] * normal_pdf(x0, mu[k], var[k])).sum();
                normal_pdf(x, ab.sqrt() * x0, 1.0 - ab) * prior
            };
            let mut acc = f(lo) + f(hi);
            for i in 1..n {
                acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let quad = acc * h / 3.0;
            let exact = world.log_density_at(&[x], ab, Condition::Class(0)).unwrap().exp();
            assert!((exact - quad).abs() / quad < 1e-6, "ab={ab} x={x}: {exact} vs {quad}");
        }
    }
}

fn spd(a: f64, b: f64, c: f64) -> Vec<f64> {
    // L L^T with L = [[a, 0], [b, c]]
    vec![a * a, a * b, a * b, b * b + c * c]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eps_matches_finite_differences(
        m in prop::collection::vec(-3.0f64..3.0, 6),
        l in prop::collection::vec(0.3f64..1.2, 9),
        w in prop::collection::vec(0.1f64..1.0, 3),
        x in prop::collection::vec(-4.0f64..4.0, 2),
        t in 1usize..=200,
    ) {
        let total: f64 = w.iter().sum();
        let world = one_class(
            w.iter().map(|v| v / total).collect(),
            vec![m[0..2].to_vec(), m[2..4].to_vec(), m[4..6].to_vec()],
            vec![spd(l[0], l[1] - 0.75, l[2]), spd(l[3], l[4] - 0.75, l[5]), spd(l[6], l[7] - 0.75, l[8])],
        );
        let sched = NoiseSchedule::cosine(200).unwrap();
        let cond = Condition::Class(0);
        let eps = world.exact_eps(&x, t, cond, &sched).unwrap();
        let sigma = (1.0 - sched.alpha_bar(t).unwrap()).sqrt();
        let h = 1e-5;
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for i in 0..2 {
            let (mut p, mut q) = (x.clone(), x.clone());
            p[i] += h;
            q[i] -= h;
            let g = (world.log_density(&p, t, cond, &sched).unwrap() - world.log_density(&q, t, cond, &sched).unwrap()) / (2.0 * h);
            err += (eps[i] + sigma * g).powi(2);
            norm += eps[i].powi(2);
        }
        prop_assert!(err.sqrt() <= 1e-5 * norm.sqrt().max(1e-3));
    }
}

#[test]
fn far_points_collapse_onto_one_component() {
    let world = MixtureWorld::default_world();
    let sched = NoiseSchedule::cosine(200).unwrap();
    let mu = [-2.0, 2.0];
    for t in [1, 50, 100, 150] {
        let ab = sched.alpha_bar(t).unwrap();
        let x = [12.0 * mu[0], 12.0 * mu[1]];
        let eps = world.exact_eps(&x, t, Condition::Class(0), &sched).unwrap();
        let var = ab * 0.4 + 1.0 - ab;
        for i in 0..2 {
            let single = (1.0 - ab).sqrt() * (x[i] - ab.sqrt() * mu[i]) / var;
            assert!((eps[i] - single).abs() < 1e-6, "t={t}: {} vs {single}", eps[i]);
        }
    }
}

#[test]
fn component_occupancy_passes_chi_square() {
    let world = one_class(vec![0.5, 0.5], vec![vec![-5.0, 0.0], vec![5.0, 0.0]], vec![vec![0.1, 0.0, 0.0, 0.1]; 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 20000;
    let left = (0..n)
        .filter(|_| world.sample_data(Condition::Class(0), &mut rng).unwrap()[0] < 0.0)
        .count() as f64;
    let expected = n as f64 / 2.0;
    let chi2 = 2.0 * (left - expected).powi(2) / expected;
    // one degree of freedom, p = 0.001
    assert!(chi2 < 10.83, "chi-square {chi2}");
}

#[test]
fn posterior_limits() {
    let world = MixtureWorld::default_world();
    let sched = NoiseSchedule::cosine(200).unwrap();
    for x in [[0.0, 0.0], [3.0, -1.0], [-2.0, 2.0]] {
        let p = world.posterior_class_prob(&x, 200, 0, &sched).unwrap();
        assert!((p - 0.5).abs() < 1e-3, "posterior at T {p}");
    }
    // ten standard deviations of separation
    let sigma = 0.1f64;
    let sep = one_class_pair(10.0 * sigma, sigma * sigma);
    let p = sep.posterior_class_prob_at(&[0.0, 0.0], 1.0, 0).unwrap();
    assert!(p > 0.999, "{p}");
}

fn one_class_pair(offset: f64, var: f64) -> MixtureWorld {
    let class = |m: f64| ClassSpec {
        weights: vec![1.0],
        means: vec![vec![m, 0.0]],
        covariances: vec![vec![var, 0.0, 0.0, var]],
    };
    MixtureWorld::new(WorldSpec {
        dim: 2,
        priors: vec![0.5, 0.5],
        classes: vec![class(0.0), class(offset)],
    })
    .unwrap()
}

#[test]
fn single_gaussian_chains_reproduce_the_data_law() {
    let world = one_class(vec![1.0], vec![vec![1.0, -0.5]], vec![vec![0.6, 0.2, 0.2, 0.3]]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let direct: Vec<Vec<f64>> = (0..2000).map(|_| world.sample_data(Condition::Class(0), &mut rng).unwrap()).collect();
    for sampler in [Sampler::Ddpm, Sampler::Ddim] {
        let bed = Testbed::new(world.clone(), NoiseSchedule::cosine(200).unwrap(), sampler);
        let chains: Vec<Vec<f64>> = (0..2000)
            .map(|i| run_guided_chain(&bed, &GuidancePolicy::Fixed(1.0), Condition::Class(0), chain_rng(9, i)).unwrap().sample)
            .collect();
        let fd = frechet_gaussian(&chains, &direct).unwrap().distance;
        assert!(fd < 0.01, "{sampler:?}: FD {fd}");
    }
}

#[test]
fn ddim_is_deterministic_given_the_start() {
    let bed = Testbed::new(MixtureWorld::default_world(), NoiseSchedule::cosine(50).unwrap(), Sampler::Ddim);
    let a = run_guided_chain(&bed, &GuidancePolicy::Fixed(3.0), Condition::Class(1), chain_rng(1, 4)).unwrap();
    let b = run_guided_chain(&bed, &GuidancePolicy::Fixed(3.0), Condition::Class(1), chain_rng(1, 4)).unwrap();
    assert_eq!(a.sample, b.sample);
}
