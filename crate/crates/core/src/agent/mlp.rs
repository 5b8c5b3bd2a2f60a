use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AgentError;

/// Output transform of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Identity,
    /// `lo + (hi − lo)·(tanh(z) + 1)/2`.
    TanhScaled {
        lo: f64,
        hi: f64,
    },
}

/// Dense layer `y = x·Wᵀ + b`; `w` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((outputs, inputs)),
            b: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }
}

/// Rectifier multilayer perceptron with a configurable head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub head: Head,
}

/// Activations kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Fan-in uniform initialization; the last layer uses `±final_scale` when
    /// given.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        head: Head,
        final_scale: Option<f64>,
        rng: &mut R,
    ) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least input and output sizes"
        );
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let bound = match final_scale {
                    Some(s) if k == n - 1 => s,
                    _ => 1.0 / (dims[k] as f64).sqrt(),
                };
                let mut draw = || rng.random_range(-bound..=bound);
                Layer {
                    w: Array2::from_shape_simple_fn((dims[k + 1], dims[k]), &mut draw),
                    b: Array1::from_shape_simple_fn(dims[k + 1], &mut draw),
                }
            })
            .collect();
        Self { layers, head }
    }

    pub fn zeros(dims: &[usize], head: Head) -> Self {
        Self {
            layers: dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect(),
            head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), AgentError> {
        if x.ncols() != self.input_dim() {
            return Err(AgentError::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, AgentError> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, AgentError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(view)?.row(0).to_vec())
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), AgentError> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w.t()) + &layer.b;
            inputs.push(h);
            h = if k < last {
                z.mapv(|v| v.max(0.0))
            } else {
                self.apply_head(&z)
            };
            pre.push(z);
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    fn apply_head(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Identity => z.clone(),
            Head::TanhScaled { lo, hi } => z.mapv(|v| lo + (hi - lo) * (v.tanh() + 1.0) * 0.5),
        }
    }

    /// Reverse pass for the scalar `Σ upstream ⊙ output`. Returns parameter
    /// gradients (shaped like the layers) and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> (Vec<Layer>, Array2<f64>) {
        let last = self.layers.len() - 1;
        let mut delta = match self.head {
            Head::Identity => upstream.to_owned(),
            Head::TanhScaled { lo, hi } => {
                let mut d = upstream.to_owned();
                Zip::from(&mut d).and(&cache.pre[last]).for_each(|d, &z| {
                    let t = z.tanh();
                    *d *= 0.5 * (hi - lo) * (1.0 - t * t);
                });
                d
            }
        };
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..=last).rev() {
            if k < last {
                Zip::from(&mut delta).and(&cache.pre[k]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.push(Layer {
                w: delta.t().dot(&cache.inputs[k]),
                b: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&self.layers[k].w);
        }
        grads.reverse();
        (grads, delta)
    }

    /// `self ← τ·other + (1 − τ)·self`.
    pub fn blend_from(&mut self, other: &Mlp, tau: f64) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            Zip::from(&mut mine.w)
                .and(&theirs.w)
                .for_each(|a, &b| *a = tau * b + (1.0 - tau) * *a);
            Zip::from(&mut mine.b)
                .and(&theirs.b)
                .for_each(|a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
    }

    /// Parameters in declaration order: per layer, `w` row-major then `b`.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), AgentError> {
        if values.len() != self.parameter_count() {
            return Err(AgentError::Shape {
                expected: self.parameter_count(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut()
                .chain(l.b.iter_mut())
                .for_each(|x| *x = it.next().expect("length checked"));
        }
        Ok(())
    }
}

pub fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
        .collect()
}

/// Horizontal concatenation `[a | b]`.
pub fn hstack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &[Layer]) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let lr_t = self.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(&mut layer.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
            Zip::from(&mut layer.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_actor_outputs_midpoint() {
        let net = Mlp::zeros(&[3, 4, 2], Head::TanhScaled { lo: -0.2, hi: 0.4 });
        let out = net.forward_one(&[1.0, -5.0, 2.0]).unwrap();
        assert!(out.iter().all(|a| (a - 0.1).abs() < 1e-15));
    }

    #[test]
    fn large_bias_saturates_at_upper_bound() {
        let mut net = Mlp::zeros(&[2, 1], Head::TanhScaled { lo: -0.2, hi: 0.2 });
        net.layers[0].b[0] = 50.0;
        assert!((net.forward_one(&[0.3, 0.3]).unwrap()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let mut net = Mlp::zeros(&[3, 1], Head::Identity);
        net.layers[0].w = array![[0.5, -1.0, 2.0]];
        net.layers[0].b = array![0.25];
        let x = [1.0, 2.0, 3.0];
        assert!((net.forward_one(&x).unwrap()[0] - (0.5 - 2.0 + 6.0 + 0.25)).abs() < 1e-15);
        let (_, cache) = net
            .forward_cached(ArrayView2::from_shape((1, 3), &x).unwrap())
            .unwrap();
        let (g, dx) = net.backward(&cache, array![[1.0]].view());
        assert_eq!(g[0].w.row(0).to_vec(), x.to_vec());
        assert_eq!(g[0].b[0], 1.0);
        assert_eq!(dx.row(0).to_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn dead_rectifier_blocks_gradient() {
        let mut net = Mlp::zeros(&[1, 1, 1], Head::Identity);
        net.layers[0].w[[0, 0]] = 1.0;
        net.layers[0].b[0] = -10.0;
        net.layers[1].w[[0, 0]] = 3.0;
        let (_, cache) = net.forward_cached(array![[1.0]].view()).unwrap();
        let (g, dx) = net.backward(&cache, array![[1.0]].view());
        assert_eq!(g[0].w[[0, 0]], 0.0);
        assert_eq!(dx[[0, 0]], 0.0);
    }

    #[test]
    fn input_dimension_checked() {
        let net = Mlp::zeros(&[3, 1], Head::Identity);
        assert!(matches!(
            net.forward_one(&[1.0]),
            Err(AgentError::Shape {
                expected: 3,
                got: 1
            })
        ));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::new(&[3, 5, 2], Head::Identity, None, &mut rng);
        let mut b = Mlp::zeros(&[3, 5, 2], Head::Identity);
        b.set_flat_params(&a.flat_params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g)
        let mut net = Mlp::zeros(&[1, 1], Head::Identity);
        let mut opt = Adam::new(&net, 0.01);
        let g = vec![Layer {
            w: array![[4.0]],
            b: array![-0.5],
        }];
        opt.step(&mut net, &g);
        // eps shifts the step by about lr·eps/|g|
        assert!((net.layers[0].w[[0, 0]] + 0.01).abs() < 1e-7);
        assert!((net.layers[0].b[0] - 0.01).abs() < 1e-7);
    }
}
