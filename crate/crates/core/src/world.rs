//! Class-conditional Gaussian mixture with closed-form noised densities.
//!
//! Under the forward process a component `N(mu, Sigma)` becomes
//! `N(sqrt(ab) mu, ab Sigma + (1 - ab) I)`. Each covariance is stored through
//! its eigendecomposition `Sigma = Q diag(lambda) Q^T`, so the noised
//! covariance at any `ab` shares `Q` and has eigenvalues `ab lambda + 1 - ab`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Condition, NoiseSchedule};
use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SUM_TOLERANCE: f64 = 1e-12;

/// Serializable description of a mixture world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub dim: usize,
    pub priors: Vec<f64>,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub weights: Vec<f64>,
    /// One mean per component.
    pub means: Vec<Vec<f64>>,
    /// One dense `dim x dim` row-major covariance per component.
    pub covariances: Vec<Vec<f64>>,
}

impl WorldSpec {
    /// Two classes of two isotropic components each, laid out on a square of
    /// half-width `spread` along the first axis and 2 along the second.
    fn square(spread: f64, variance: f64) -> Self {
        let iso = vec![variance, 0.0, 0.0, variance];
        let class = |sign: f64| ClassSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![sign * spread, -2.0], vec![sign * spread, 2.0]],
            covariances: vec![iso.clone(), iso.clone()],
        };
        WorldSpec {
            dim: 2,
            priors: vec![0.5, 0.5],
            classes: vec![class(-1.0), class(1.0)],
        }
    }

    /// Class 0 at (-2, +-2), class 1 at (+2, +-2), all covariances 0.4 I.
    pub fn default_world() -> Self {
        Self::square(2.0, 0.4)
    }

    /// Same layout with the classes pulled to +-0.8 on the first axis.
    pub fn hard_world() -> Self {
        Self::square(0.8, 0.4)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_world()),
            "hard" => Some(Self::hard_world()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    weight: f64,
    mean: Vec<f64>,
    /// Eigenvectors as columns.
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl Component {
    fn new(weight: f64, mean: Vec<f64>, cov: &[f64], dim: usize) -> Result<Self> {
        check_dim(dim, mean.len())?;
        check_dim(dim * dim, cov.len())?;
        let m = DMatrix::from_row_slice(dim, dim, cov);
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidWorld("covariance is not symmetric".into()));
                }
            }
        }
        if m.clone().cholesky().is_none() {
            return Err(Error::InvalidWorld("covariance is not positive definite".into()));
        }
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidWorld("covariance is not positive definite".into()));
        }
        Ok(Self {
            log_weight: weight.ln(),
            weight,
            mean,
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
        })
    }

    /// Log density of the noised component at `x` and its gradient in `x`.
    fn log_density_and_grad(&self, x: &[f64], ab: f64, grad: Option<&mut [f64]>) -> f64 {
        let d = x.len();
        let sa = ab.sqrt();
        let mut proj = vec![0.0; d];
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for i in 0..d {
            let mut y = 0.0;
            for j in 0..d {
                y += self.basis[(j, i)] * (x[j] - sa * self.mean[j]);
            }
            let lambda = ab * self.eigenvalues[i] + (1.0 - ab);
            logdet += lambda.ln();
            quad += y * y / lambda;
            proj[i] = y / lambda;
        }
        if let Some(g) = grad {
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += self.basis[(j, i)] * proj[i];
                }
                g[j] = -acc;
            }
        }
        -0.5 * (d as f64 * LN_2PI + logdet + quad)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d)
            .map(|i| self.eigenvalues[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (0..d)
            .map(|j| self.mean[j] + (0..d).map(|i| self.basis[(j, i)] * z[i]).sum::<f64>())
            .collect()
    }

    /// Multiply-adds of one density + gradient evaluation.
    fn op_cost(&self) -> u64 {
        let d = self.mean.len() as u64;
        2 * d * d + 4 * d
    }
}

/// Exactly solvable conditional data model standing in for a trained
/// noise-prediction network.
#[derive(Debug, Clone)]
pub struct MixtureWorld {
    dim: usize,
    priors: Vec<f64>,
    log_priors: Vec<f64>,
    classes: Vec<Vec<Component>>,
    spec: WorldSpec,
}

fn check_simplex(what: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidWorld(format!("{what} must not be empty")));
    }
    if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidWorld(format!("{what} must be positive")));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidWorld(format!("{what} sum to {sum}, not 1")));
    }
    Ok(())
}

impl MixtureWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::InvalidWorld("dimension must be positive".into()));
        }
        check_simplex("class priors", &spec.priors)?;
        if spec.priors.len() != spec.classes.len() {
            return Err(Error::InvalidWorld(format!(
                "{} priors for {} classes",
                spec.priors.len(),
                spec.classes.len()
            )));
        }
        let mut classes = Vec::with_capacity(spec.classes.len());
        for (c, class) in spec.classes.iter().enumerate() {
            check_simplex(&format!("class {c} weights"), &class.weights)?;
            if class.means.len() != class.weights.len()
                || class.covariances.len() != class.weights.len()
            {
                return Err(Error::InvalidWorld(format!(
                    "class {c}: weights, means and covariances differ in length"
                )));
            }
            let comps = class
                .weights
                .iter()
                .zip(&class.means)
                .zip(&class.covariances)
                .map(|((&w, mu), cov)| Component::new(w, mu.clone(), cov, spec.dim))
                .collect::<Result<Vec<_>>>()?;
            classes.push(comps);
        }
        Ok(Self {
            dim: spec.dim,
            log_priors: spec.priors.iter().map(|p| p.ln()).collect(),
            priors: spec.priors.clone(),
            classes,
            spec,
        })
    }

    pub fn default_world() -> Self {
        Self::new(WorldSpec::default_world()).expect("default world is valid")
    }

    pub fn hard_world() -> Self {
        Self::new(WorldSpec::hard_world()).expect("hard world is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn num_components(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Means of the components of class `c`.
    pub fn component_means(&self, c: usize) -> Vec<&[f64]> {
        self.classes[c].iter().map(|k| k.mean.as_slice()).collect()
    }

    pub fn check_condition(&self, cond: Condition) -> Result<()> {
        match cond {
            Condition::Class(c) if c >= self.num_classes() => Err(Error::Contract(format!(
                "class {c} out of range for {} classes",
                self.num_classes()
            ))),
            _ => Ok(()),
        }
    }

    /// Draws a class label from the priors.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        pick(&self.priors, rng.random::<f64>())
    }

    /// Draws a clean sample from the conditional law, or from the marginal
    /// when `cond` is null.
    pub fn sample_data<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<Vec<f64>> {
        self.check_condition(cond)?;
        let class = match cond {
            Condition::Class(c) => c,
            Condition::Null => self.sample_class(rng),
        };
        let comps = &self.classes[class];
        let weights: Vec<f64> = comps.iter().map(|k| k.weight).collect();
        let k = pick(&weights, rng.random::<f64>());
        Ok(comps[k].sample(rng))
    }

    fn terms(&self, cond: Condition) -> impl Iterator<Item = (f64, &Component)> {
        let classes: Vec<usize> = match cond {
            Condition::Class(c) => vec![c],
            Condition::Null => (0..self.num_classes()).collect(),
        };
        classes.into_iter().flat_map(move |c| {
            let lp = match cond {
                Condition::Class(_) => 0.0,
                Condition::Null => self.log_priors[c],
            };
            self.classes[c].iter().map(move |k| (lp + k.log_weight, k))
        })
    }

    /// Log density of the noised law at signal level `ab`.
    pub fn log_density_at(&self, x: &[f64], ab: f64, cond: Condition) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        self.check_condition(cond)?;
        let logs: Vec<f64> = self
            .terms(cond)
            .map(|(lw, k)| lw + k.log_density_and_grad(x, ab, None))
            .collect();
        Ok(log_sum_exp(&logs))
    }

    pub fn log_density(
        &self,
        x: &[f64],
        t: usize,
        cond: Condition,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        self.log_density_at(x, sched.alpha_bar(t)?, cond)
    }

    /// Gradient of the noised log density at signal level `ab`.
    pub fn score_at(&self, x: &[f64], ab: f64, cond: Condition) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        self.check_condition(cond)?;
        let d = self.dim;
        let mut logs = Vec::new();
        let mut grads = Vec::new();
        for (lw, k) in self.terms(cond) {
            let mut g = vec![0.0; d];
            logs.push(lw + k.log_density_and_grad(x, ab, Some(&mut g)));
            grads.push(g);
        }
        let lse = log_sum_exp(&logs);
        let mut score = vec![0.0; d];
        for (l, g) in logs.iter().zip(&grads) {
            let r = (l - lse).exp();
            for (s, gi) in score.iter_mut().zip(g) {
                *s += r * gi;
            }
        }
        Ok(score)
    }

    /// Noise prediction `-sqrt(1 - ab) grad log p(x)` at signal level `ab`.
    pub fn eps_at(&self, x: &[f64], ab: f64, cond: Condition) -> Result<Vec<f64>> {
        let scale = -(1.0 - ab).sqrt();
        Ok(self
            .score_at(x, ab, cond)?
            .into_iter()
            .map(|g| scale * g)
            .collect())
    }

    pub fn exact_eps(
        &self,
        x: &[f64],
        t: usize,
        cond: Condition,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        self.eps_at(x, sched.alpha_bar(t)?, cond)
    }

    /// `log pi_c + log p_ab(x | c)` for every class.
    pub fn class_joint_log_likelihoods(&self, x: &[f64], ab: f64) -> Result<Vec<f64>> {
        (0..self.num_classes())
            .map(|c| Ok(self.log_priors[c] + self.log_density_at(x, ab, Condition::Class(c))?))
            .collect()
    }

    /// Log Bayes posterior of class `c` at signal level `ab`.
    pub fn log_posterior_at(&self, x: &[f64], ab: f64, c: usize) -> Result<f64> {
        self.check_condition(Condition::Class(c))?;
        let joint = self.class_joint_log_likelihoods(x, ab)?;
        Ok(joint[c] - log_sum_exp(&joint))
    }

    pub fn posterior_class_prob_at(&self, x: &[f64], ab: f64, c: usize) -> Result<f64> {
        Ok(self.log_posterior_at(x, ab, c)?.exp())
    }

    pub fn posterior_class_prob(
        &self,
        x: &[f64],
        t: usize,
        c: usize,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        self.posterior_class_prob_at(x, sched.alpha_bar(t)?, c)
    }

    /// Multiply-adds of one exact noise prediction under `cond`.
    pub fn eps_op_cost(&self, cond: Condition) -> u64 {
        let comps: u64 = self.terms(cond).map(|(_, k)| k.op_cost()).sum();
        let n = self.terms(cond).count() as u64;
        comps + n * self.dim as u64 + self.dim as u64
    }

    /// Multiply-adds of one class posterior (every component density).
    pub fn posterior_op_cost(&self) -> u64 {
        let d = self.dim as u64;
        self.classes
            .iter()
            .flatten()
            .map(|k| k.op_cost() - d * d)
            .sum()
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard_normal(dim: usize) -> MixtureWorld {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        MixtureWorld::new(WorldSpec {
            dim,
            priors: vec![1.0],
            classes: vec![ClassSpec {
                weights: vec![1.0],
                means: vec![vec![0.0; dim]],
                covariances: vec![cov],
            }],
        })
        .unwrap()
    }

    #[test]
    fn rejects_invalid_worlds() {
        let mut spec = WorldSpec::default_world();
        spec.priors = vec![0.6, 0.6];
        assert!(MixtureWorld::new(spec).is_err());
        let mut spec = WorldSpec::default_world();
        spec.classes[0].covariances[0] = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(MixtureWorld::new(spec), Err(Error::InvalidWorld(_))));
        let mut spec = WorldSpec::default_world();
        spec.classes[1].weights = vec![0.5, 0.4];
        assert!(MixtureWorld::new(spec).is_err());
    }

    #[test]
    fn standard_normal_is_closed_under_noising() {
        let w = standard_normal(2);
        let sched = NoiseSchedule::cosine(200).unwrap();
        let x = [0.7, -1.3];
        let expected = -LN_2PI - 0.5 * (0.49 + 1.69);
        for t in [0, 1, 50, 199, 200] {
            let ld = w.log_density(&x, t, Condition::Null, &sched).unwrap();
            assert!((ld - expected).abs() < 1e-12);
            let eps = w.exact_eps(&x, t, Condition::Class(0), &sched).unwrap();
            let s = (1.0 - sched.alpha_bar(t).unwrap()).sqrt();
            assert!((eps[0] - s * x[0]).abs() < 1e-14);
            assert!((eps[1] - s * x[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn full_noise_approaches_standard_normal() {
        let w = MixtureWorld::default_world();
        let sched = NoiseSchedule::cosine(200).unwrap();
        let x = [0.3, -0.9];
        let ld = w.log_density(&x, 200, Condition::Class(1), &sched).unwrap();
        let reference = -LN_2PI - 0.5 * (0.09 + 0.81);
        assert!((ld - reference).abs() < 1e-3);
    }

    #[test]
    fn symmetric_posterior_at_origin() {
        let w = MixtureWorld::default_world();
        for ab in [1.0, 0.5, 0.01] {
            let p = w.posterior_class_prob_at(&[0.0, 0.0], ab, 0).unwrap();
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn separated_class_posterior_is_confident() {
        // class means 10 sigma apart along the first axis
        let sigma2 = 0.04;
        let spec = WorldSpec {
            dim: 2,
            priors: vec![0.5, 0.5],
            classes: vec![
                ClassSpec {
                    weights: vec![1.0],
                    means: vec![vec![-1.0, 0.0]],
                    covariances: vec![vec![sigma2, 0.0, 0.0, sigma2]],
                },
                ClassSpec {
                    weights: vec![1.0],
                    means: vec![vec![1.0, 0.0]],
                    covariances: vec![vec![sigma2, 0.0, 0.0, sigma2]],
                },
            ],
        };
        let w = MixtureWorld::new(spec).unwrap();
        let p = w.posterior_class_prob_at(&[-1.0, 0.0], 1.0, 0).unwrap();
        // density ratio exp(-(2^2) / (2 sigma^2)) = exp(-50)
        let expected = 1.0 / (1.0 + (-50.0f64).exp());
        assert!(p > 0.999);
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn posterior_sums_to_one() {
        let w = MixtureWorld::default_world();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            let ab = rng.random_range(0.0..1.0);
            let s: f64 = (0..2).map(|c| w.posterior_class_prob_at(&x, ab, c).unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_gaussian_sample_mean() {
        let w = standard_normal(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| w.sample_data(Condition::Null, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn degenerate_prior_matches_class_law() {
        let mut spec = WorldSpec::default_world();
        spec.priors = vec![1.0];
        spec.classes.truncate(1);
        let w = MixtureWorld::new(spec).unwrap();
        let x = [1.0, 0.5];
        for ab in [1.0, 0.3, 1e-4] {
            let a = w.log_density_at(&x, ab, Condition::Null).unwrap();
            let b = w.log_density_at(&x, ab, Condition::Class(0)).unwrap();
            assert_eq!(a, b);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mean_y: f64 = (0..n)
            .map(|_| w.sample_data(Condition::Null, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean_y + 2.0).abs() < 0.03);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let w = MixtureWorld::default_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(w.sample_data(Condition::Class(2), &mut rng).is_err());
        assert!(w.log_density_at(&[0.0, 0.0], 0.5, Condition::Class(5)).is_err());
    }
}
