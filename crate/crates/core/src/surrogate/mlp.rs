//! Feed-forward regressor trained on absolute error with mini-batch Adam.
//! ReLU hidden layers, linear scalar output. The output layer starts at zero
//! weights with its bias at the target median.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{median, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub members: usize,
    pub batch_size: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self { hidden: vec![64, 64], epochs: 200, learning_rate: 0.01, members: 8, batch_size: 32 }
    }
}

/// Parameters are stored flat: for each layer, `out x in` weights row-major
/// followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub(crate) dims: Vec<usize>,
    pub(crate) params: Vec<f64>,
}

impl Mlp {
    /// He-initialized network with the given layer widths (input first,
    /// output last).
    pub fn new(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { dims, params }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0];
        for w in self.dims.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        offsets
    }

    /// Activations of every layer (input included), post-ReLU for hidden layers.
    fn forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let offsets = self.layer_offsets();
        let layers = self.dims.len() - 1;
        let mut acts = vec![input.to_vec()];
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offsets[l]..offsets[l] + n_in * n_out];
            let b = &self.params[offsets[l] + n_in * n_out..offsets[l + 1]];
            let prev = &acts[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(prev).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn predict_f64(&self, input: &[f64]) -> f64 {
        self.forward(input).last().unwrap()[0]
    }

    pub fn predict(&self, row: &[u8]) -> f64 {
        let input: Vec<f64> = row.iter().map(|&b| f64::from(b)).collect();
        self.predict_f64(&input)
    }

    /// Mean absolute error over `inputs` (row-major, `dims[0]` columns) and
    /// its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, inputs: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
        let offsets = self.layer_offsets();
        let layers = self.dims.len() - 1;
        let n = targets.len();
        let d = self.dims[0];
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let acts = self.forward(&inputs[i * d..(i + 1) * d]);
            let diff = acts[layers][0] - t;
            loss += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut delta = vec![sign / n as f64];
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
                let w_off = offsets[l];
                let b_off = w_off + n_in * n_out;
                let prev = &acts[l];
                for o in 0..n_out {
                    grad[b_off + o] += delta[o];
                    for k in 0..n_in {
                        grad[w_off + o * n_in + k] += delta[o] * prev[k];
                    }
                }
                if l > 0 {
                    let mut back = vec![0.0; n_in];
                    for (o, &dl) in delta.iter().enumerate() {
                        for (k, bk) in back.iter_mut().enumerate() {
                            *bk += dl * self.params[w_off + o * n_in + k];
                        }
                    }
                    for (bk, &a) in back.iter_mut().zip(prev) {
                        if a <= 0.0 {
                            *bk = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        (loss / n as f64, grad)
    }

    pub fn fit(x: &FeatureMatrix, y: &[f64], params: &MlpParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![x.cols()];
        dims.extend(&params.hidden);
        dims.push(1);
        let mut net = Mlp::new(dims, &mut rng);
        let offsets = net.layer_offsets();
        let last = offsets.len() - 2;
        net.params[offsets[last]..offsets[last + 1]].iter_mut().for_each(|p| *p = 0.0);
        *net.params.last_mut().unwrap() = median(y);

        let d = x.cols();
        let inputs: Vec<f64> = (0..x.rows()).flat_map(|i| x.row(i).iter().map(|&b| f64::from(b))).collect();
        let mut adam = Adam::new(net.params.len(), params.learning_rate);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut batch_x = Vec::new();
        let mut batch_y = Vec::new();
        for _ in 0..params.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(params.batch_size) {
                batch_x.clear();
                batch_y.clear();
                for &i in chunk {
                    batch_x.extend_from_slice(&inputs[i * d..(i + 1) * d]);
                    batch_y.push(y[i]);
                }
                let (_, grad) = net.loss_and_grad(&batch_x, &batch_y);
                adam.step(&mut net.params, &grad);
            }
        }
        net
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 && self.m[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Relative error between analytic and central-difference gradients.
    fn gradient_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=20);
        let h1 = rng.random_range(1..=8);
        let h2 = rng.random_range(1..=8);
        let mut net = Mlp::new(vec![d, h1, h2, 1], &mut rng);
        for p in net.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let n = 6;
        let inputs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, analytic) = net.loss_and_grad(&inputs, &targets);
        let h = 1e-6;
        let mut num = vec![0.0; analytic.len()];
        for (i, g) in num.iter_mut().enumerate() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let (up, _) = net.loss_and_grad(&inputs, &targets);
            net.params[i] = orig - h;
            let (down, _) = net.loss_and_grad(&inputs, &targets);
            net.params[i] = orig;
            *g = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + num.iter().map(|a| a * a).sum::<f64>().sqrt();
        if scale == 0.0 { 0.0 } else { diff / scale }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let rel = gradient_check(seed);
            assert!(rel < 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn fits_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = FeatureMatrix::new("fp", 6);
        let mut y = Vec::new();
        for _ in 0..200 {
            let row: Vec<u8> = (0..6).map(|_| rng.random_range(0..2)).collect();
            y.push(0.1 * f64::from(row[0]) + 0.3 * f64::from(row[3]));
            x.push(&row).unwrap();
        }
        let params = MlpParams { hidden: vec![16], epochs: 60, ..Default::default() };
        let net = Mlp::fit(&x, &y, &params, 3);
        let mae: f64 = (0..200).map(|i| (net.predict(x.row(i)) - y[i]).abs()).sum::<f64>() / 200.0;
        assert!(mae < 0.03, "mae {mae}");
    }
}
