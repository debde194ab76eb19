//! Feed-forward dense networks with exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::rng::{rng_normal, RngState};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Real, Tensor};
use crate::error::{dim_mismatch, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => libm::tanh(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Short tag used in model headers.
    pub fn tag(self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu { alpha } => format!("leaky-relu({alpha})"),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Tanh => "tanh".into(),
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::LeakyRelu { alpha } => 2.0 / (1.0 + alpha * alpha),
            _ => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    /// `d_out × d_in`
    pub weight: Tensor<T>,
    /// `d_out`
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn d_in(&self) -> usize {
        self.weight.row_len()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Ordered stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T = f32> {
    pub layers: Vec<Layer<T>>,
}

pub type DenseNet = Net<f32>;

/// Inputs and pre-activations retained by [`Net::forward`].
#[derive(Clone, Debug)]
pub struct Cache<T = f32> {
    /// `acts[0]` is the network input, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Tensor<T>>,
    pub pre: Vec<Tensor<T>>,
}

impl<T: Real> Cache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("cache holds at least the input")
    }
}

/// Per-layer parameter gradients, same layout as the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads<T = f32> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> NetGrads<T> {
    pub fn zeros_like(net: &Net<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.shape()),
                        Tensor::zeros(l.bias.shape()),
                    )
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in w.data_mut().iter_mut().zip(ow.data()) {
                *x = T::from_f64(x.to_f64() + y.to_f64());
            }
            for (x, y) in b.data_mut().iter_mut().zip(ob.data()) {
                *x = T::from_f64(x.to_f64() + y.to_f64());
            }
        }
    }

    /// Weight and bias slices in `[w0, b0, w1, b1, ..]` order.
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.data()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter().map(|x| x.to_f64()))
            .collect()
    }
}

impl Net<f32> {
    /// Seeded He/Glorot-style initialization; biases start at zero.
    pub fn init(dims: &[usize], activations: &[Activation], rng: &mut RngState) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (d_in, d_out) = (w[0], w[1]);
                let scale = (act.init_gain() / d_in as f64).sqrt();
                let weight =
                    rng_normal::<f32>(rng, &[d_out, d_in]).map(|x| (x as f64 * scale) as f32);
                Layer {
                    weight,
                    bias: Tensor::zeros(&[d_out]),
                    activation: act,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Hidden layers share `hidden`; the last layer uses `output`.
    pub fn mlp(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let acts: Vec<Activation> = (0..n)
            .map(|i| if i + 1 == n { output } else { hidden })
            .collect();
        Self::init(dims, &acts, rng)
    }
}

impl<T: Real> Net<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(dim_mismatch(
                    "layer chain",
                    pair[0].d_out(),
                    format!("{} at layer {}", pair[1].d_in(), i + 1),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.d_out() {
                return Err(dim_mismatch("bias length", l.d_out(), l.bias.len()));
            }
        }
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, Layer::d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Layer::d_out)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.d_in()];
        d.extend(self.layers.iter().map(Layer::d_out));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Net<U> {
        Net {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.weight
                    .data()
                    .iter()
                    .chain(l.bias.data())
                    .map(|x| x.to_f64())
            })
            .collect()
    }

    /// Overwrites all parameters from a flat vector in [`Net::flatten`] order.
    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for s in self.params_mut() {
            for x in s.iter_mut() {
                *x = T::from_f64(*it.next().expect("flat vector long enough"));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.row_len() != self.d_in() {
            return Err(dim_mismatch(
                "network input width",
                self.d_in(),
                batch.row_len(),
            ));
        }
        Ok(())
    }

    /// Forward pass retaining what [`Net::backward`] needs.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        self.check_input(batch)?;
        let mut acts = vec![batch.as_matrix()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = affine(layer, acts.last().unwrap())?;
            let act = layer.activation;
            let a = z.map(|x| T::from_f64(act.apply(x.to_f64())));
            pre.push(z);
            acts.push(a);
        }
        let cache = Cache { acts, pre };
        Ok((cache.output().clone(), cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.as_matrix();
        for layer in &self.layers {
            let act = layer.activation;
            x = affine(layer, &x)?.map(|v| T::from_f64(act.apply(v.to_f64())));
        }
        Ok(x)
    }

    /// Reverse pass; returns parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<(NetGrads<T>, Tensor<T>)> {
        let (g, gi) = self.backward_impl(cache, grad_output, true)?;
        Ok((g, gi.expect("input gradient requested")))
    }

    /// Reverse pass that skips the input gradient of the first layer.
    pub fn backward_params(
        &self,
        cache: &Cache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<NetGrads<T>> {
        Ok(self.backward_impl(cache, grad_output, false)?.0)
    }

    fn backward_impl(
        &self,
        cache: &Cache<T>,
        grad_output: &Tensor<T>,
        want_input: bool,
    ) -> Result<(NetGrads<T>, Option<Tensor<T>>)> {
        if cache.pre.len() != self.layers.len() {
            return Err(dim_mismatch(
                "cache depth",
                self.layers.len(),
                cache.pre.len(),
            ));
        }
        let out = cache.output();
        if grad_output.rows() != out.rows() || grad_output.row_len() != out.row_len() {
            return Err(dim_mismatch(
                "grad_output shape",
                format!("{:?}", out.shape()),
                format!("{:?}", grad_output.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.as_matrix();
        let mut input_grad = None;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            let post = &cache.acts[l + 1];
            let act = layer.activation;
            let delta = if act == Activation::Identity {
                g
            } else {
                let data = g
                    .data()
                    .iter()
                    .zip(pre.data().iter().zip(post.data()))
                    .map(|(gv, (x, y))| {
                        T::from_f64(gv.to_f64() * act.derivative(x.to_f64(), y.to_f64()))
                    })
                    .collect();
                Tensor::new(g.shape().to_vec(), data)?
            };
            let gw = matmul_tn(&delta, &cache.acts[l])?;
            let m = delta.rows();
            let n = delta.row_len();
            let mut gb = vec![0.0f64; n];
            for i in 0..m {
                for (acc, v) in gb.iter_mut().zip(delta.row(i)) {
                    *acc += v.to_f64();
                }
            }
            let gb = Tensor::new(vec![n], gb.into_iter().map(T::from_f64).collect())?;
            grads.push((gw, gb));
            if l > 0 || want_input {
                g = matmul_nn(&delta, &layer.weight)?;
                if l == 0 {
                    input_grad = Some(g.clone());
                }
            } else {
                g = Tensor::zeros(&[0, 0]);
            }
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, input_grad))
    }
}

fn affine<T: Real>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut z = matmul_nt(x, &layer.weight)?;
    let b = layer.bias.data();
    let n = b.len();
    for row in z.data_mut().chunks_mut(n.max(1)) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v = T::from_f64(v.to_f64() + bv.to_f64());
        }
    }
    Ok(z)
}
