//! Parameterized layers built from the raw operators: linear, batch norm,
//! 2D convolution, and the shared point-wise MLP used throughout the nets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::operators::{add, batch_norm, conv2d, leaky_relu, linear, BnCfg};
use super::{Scalar, Tensor};
use crate::error::Result;

/// A tensor with a stable name; `trainable` distinguishes parameters from
/// running buffers. Both kinds are checkpointed.
#[derive(Clone)]
pub struct NamedTensor<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Anything that owns named tensors.
pub trait Layer<T: Scalar> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>);
}

/// All trainable parameters of a layer tree, in collection order.
pub fn trainable_params<T: Scalar>(layer: &dyn Layer<T>) -> Vec<Tensor<T>> {
    let mut all = Vec::new();
    layer.collect("", &mut all);
    all.into_iter()
        .filter(|e| e.trainable)
        .map(|e| e.tensor)
        .collect()
}

/// Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn kaiming_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, values).expect("shape/value agreement")
}

pub struct Linear<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: kaiming_uniform(rng, &[c_in, c_out], c_in),
            b: Tensor::param(&[c_out], vec![T::ZERO; c_out]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.w, Some(&self.b))
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.w"),
            tensor: self.w.clone(),
            trainable: true,
        });
        out.push(NamedTensor {
            name: format!("{prefix}.b"),
            tensor: self.b.clone(),
            trainable: true,
        });
    }
}

pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub decay: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(&[c], vec![T::ONE; c]).unwrap(),
            beta: Tensor::param(&[c], vec![T::ZERO; c]).unwrap(),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::ONE),
            eps: 1e-5,
            decay: 0.9,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            BnCfg {
                eps: self.eps,
                decay: self.decay,
                train,
            },
        )
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.gamma"),
            tensor: self.gamma.clone(),
            trainable: true,
        });
        out.push(NamedTensor {
            name: format!("{prefix}.beta"),
            tensor: self.beta.clone(),
            trainable: true,
        });
        out.push(NamedTensor {
            name: format!("{prefix}.running_mean"),
            tensor: self.running_mean.clone(),
            trainable: false,
        });
        out.push(NamedTensor {
            name: format!("{prefix}.running_var"),
            tensor: self.running_var.clone(),
            trainable: false,
        });
    }
}

pub struct Conv2d<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(k: usize, c_in: usize, c_out: usize, padding: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new_rect(k, k, c_in, c_out, padding, rng)
    }

    pub fn new_rect(
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2d {
            kernel: kaiming_uniform(rng, &[kh, kw, c_in, c_out], kh * kw * c_in),
            bias: Tensor::param(&[c_out], vec![T::ZERO; c_out]).unwrap(),
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.kernel, self.padding)?;
        super::operators::add_bias(&y, &self.bias)
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.kernel"),
            tensor: self.kernel.clone(),
            trainable: true,
        });
        out.push(NamedTensor {
            name: format!("{prefix}.bias"),
            tensor: self.bias.clone(),
            trainable: true,
        });
    }
}

/// Shared per-point MLP: a stack of linear layers, each followed by batch
/// norm and leaky ReLU except (optionally) the last, which stays plain.
pub struct SharedMlp<T: Scalar> {
    pub linears: Vec<Linear<T>>,
    pub norms: Vec<Option<BatchNorm<T>>>,
    pub slope: f64,
    pub final_plain: bool,
}

impl<T: Scalar> SharedMlp<T> {
    pub fn new(widths: &[usize], final_plain: bool, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "SharedMlp needs at least one layer");
        let n = widths.len() - 1;
        let mut linears = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            linears.push(Linear::new(widths[i], widths[i + 1], rng));
            let last = i == n - 1;
            norms.push(if last && final_plain {
                None
            } else {
                Some(BatchNorm::new(widths[i + 1]))
            });
        }
        SharedMlp {
            linears,
            norms,
            slope,
            final_plain,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (lin, norm) in self.linears.iter().zip(&self.norms) {
            h = lin.forward(&h)?;
            if let Some(bn) = norm {
                h = bn.forward(&h, train)?;
                h = leaky_relu(&h, self.slope);
            }
        }
        Ok(h)
    }

    pub fn out_width(&self) -> usize {
        self.linears.last().unwrap().w.shape()[1]
    }

    /// Zero the final linear layer (weights and bias).
    pub fn zero_last_layer(&self) {
        let last = self.linears.last().unwrap();
        for v in last.w.values_mut().iter_mut() {
            *v = T::ZERO;
        }
        for v in last.b.values_mut().iter_mut() {
            *v = T::ZERO;
        }
    }
}

impl<T: Scalar> Layer<T> for SharedMlp<T> {
    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        for (i, (lin, norm)) in self.linears.iter().zip(&self.norms).enumerate() {
            lin.collect(&format!("{prefix}.lin{i}"), out);
            if let Some(bn) = norm {
                bn.collect(&format!("{prefix}.bn{i}"), out);
            }
        }
    }
}

/// Residual add helper shared by the block implementations.
pub fn residual_add<T: Scalar>(branch: &Tensor<T>, shortcut: &Tensor<T>) -> Result<Tensor<T>> {
    add(branch, shortcut)
}
