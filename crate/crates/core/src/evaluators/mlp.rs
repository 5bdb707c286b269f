//! Dense multilayer perceptron with SiLU hidden activations, manual
//! backpropagation and a momentum SGD optimizer.

use rand::Rng;
use rand_distr::StandardNormal;

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Parameters are stored flat: for each layer the `out x in` row-major
/// weight matrix followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input of layer `l` (post-activation of `l - 1`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Scaled-normal initialization. With `zero_output` the last layer starts
    /// at zero so the untrained network outputs exactly 0.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], zero_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let mut params = Vec::with_capacity(Self::count(sizes));
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                if zero_output && l == layers - 1 {
                    params.push(0.0);
                } else {
                    params.push(std * rng.sample::<f64, _>(StandardNormal));
                }
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::count(&sizes)).then_some(Self { sizes, params })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Multiply-adds of one forward pass.
    pub fn op_cost(&self) -> u64 {
        self.sizes.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    fn layer(&self, input: &[f64], l: usize, offset: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[offset..offset + n_in * n_out];
        let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_width());
        let layers = self.sizes.len() - 1;
        let mut h = input.to_vec();
        let mut offset = 0;
        for l in 0..layers {
            let mut z = self.layer(&h, l, offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = silu(*v));
            }
            h = z;
        }
        h
    }

    pub fn forward_tape(&self, input: &[f64]) -> Tape {
        assert_eq!(input.len(), self.input_width());
        let layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut h = input.to_vec();
        let mut offset = 0;
        for l in 0..layers {
            let z = self.layer(&h, l, offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
            inputs.push(h);
            if l + 1 < layers {
                h = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        Tape {
            inputs,
            pre,
            output: h,
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = grad_output.to_vec();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                for (d, z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *d *= silu_grad(*z);
                }
            }
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let base = offsets[l];
            let input = &tape.inputs[l];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = base + o * n_in;
                for i in 0..n_in {
                    grads[row + i] += d * input[i];
                    next[i] += d * self.params[row + i];
                }
                grads[base + n_in * n_out + o] += d;
            }
            delta = next;
        }
        delta
    }
}

/// Plain stochastic gradient descent with heavy-ball momentum and global
/// gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(num_params: usize, learning_rate: f64, momentum: f64, clip_norm: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            clip_norm,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_parts(&mut [params], &[grads]);
    }

    /// One update over several parameter blocks sharing a single clipping
    /// norm. Blocks must be passed in the same order every call.
    pub fn step_parts(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let v = &mut self.velocity[offset..offset + p.len()];
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = self.momentum * *v + scale * g;
                *p -= self.learning_rate * *v;
            }
            offset += p.len();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 8, 8, 2], true, &mut rng);
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(net.num_params(), 3 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
        assert_eq!(net.op_cost(), 24 + 64 + 16);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 5, 4, 2], false, &mut rng);
        let x = [0.4, -0.7, 1.3];
        let w = [0.8, -1.1];
        let loss = |n: &Mlp, x: &[f64]| n.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let tape = net.forward_tape(&x);
        assert_eq!(tape.output, net.forward(&x));
        let mut grads = vec![0.0; net.num_params()];
        let gin = net.backward(&tape, &w, &mut grads);
        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gin[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_clips_large_gradients() {
        let mut opt = MomentumSgd::new(2, 1.0, 0.0, 1.0);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, 4.0]);
        assert!((p[0] + 0.6).abs() < 1e-15 && (p[1] + 0.8).abs() < 1e-15);
    }
}
