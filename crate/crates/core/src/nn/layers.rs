//! Layer wrappers: parameter registration plus graph building.
//!
//! A layer object holds only its name and hyperparameters; the arrays live in
//! a [`ParameterStore`] under `<name>.w`, `<name>.b`, `<name>.gamma`, etc.
//! Construction order fixes both checkpoint layout and initialization draws,
//! so builders must register layers in a stable order.

use ndarray::s;
use rand_chacha::ChaCha20Rng;

use super::graph::{Graph, Var};
use super::kernels;
use super::params::{he_normal, ParameterStore};
use super::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    stride: usize,
    pad: usize,
    bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        store.insert(
            format!("{name}.w"),
            he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k),
            true,
        );
        if bias {
            store.insert(format!("{name}.b"), Tensor::zeros((1, out_ch, 1, 1)), true);
        }
        Conv2d {
            name: name.to_string(),
            stride,
            pad,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let w = g.param(store, &format!("{}.w", self.name));
        let b = self
            .bias
            .then(|| g.param(store, &format!("{}.b", self.name)));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    name: String,
    stride: usize,
    pad: usize,
    bias: bool,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParameterStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        // Weight layout [IC, OC, K, K]; fan-in taken as in_ch*k*k like the
        // forward convolution it mirrors.
        store.insert(
            format!("{name}.w"),
            he_normal(rng, (in_ch, out_ch, k, k), in_ch * k * k),
            true,
        );
        if bias {
            store.insert(format!("{name}.b"), Tensor::zeros((1, out_ch, 1, 1)), true);
        }
        ConvTranspose2d {
            name: name.to_string(),
            stride,
            pad,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let w = g.param(store, &format!("{}.w", self.name));
        let b = self
            .bias
            .then(|| g.param(store, &format!("{}.b", self.name)));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization with per-batch statistics in training and running
/// averages at inference; momentum 0.1, epsilon 1e-5.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    name: String,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn register(store: &mut ParameterStore, name: &str, channels: usize) -> Self {
        store.insert(format!("{name}.gamma"), Tensor::ones((1, channels, 1, 1)), true);
        store.insert(format!("{name}.beta"), Tensor::zeros((1, channels, 1, 1)), true);
        store.insert(
            format!("{name}.running_mean"),
            Tensor::zeros((1, channels, 1, 1)),
            false,
        );
        store.insert(
            format!("{name}.running_var"),
            Tensor::ones((1, channels, 1, 1)),
            false,
        );
        BatchNorm2d {
            name: name.to_string(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode updates the running statistics in the store as a side
    /// effect, which is why the store is borrowed mutably.
    pub fn forward(&self, g: &mut Graph, store: &mut ParameterStore, x: Var) -> Var {
        let gamma = g.param(store, &format!("{}.gamma", self.name));
        let beta = g.param(store, &format!("{}.beta", self.name));
        let (mean, var, batch_stats) = if g.is_train() {
            let (mean, var) = kernels::channel_mean_var(g.value(x));
            let rm_name = format!("{}.running_mean", self.name);
            let rv_name = format!("{}.running_var", self.name);
            let rm = store.get(&rm_name) * (1.0 - self.momentum) + &mean * self.momentum;
            let rv = store.get(&rv_name) * (1.0 - self.momentum) + &var * self.momentum;
            store.set(&rm_name, rm);
            store.set(&rv_name, rv);
            (mean, var, true)
        } else {
            (
                store.get(&format!("{}.running_mean", self.name)).clone(),
                store.get(&format!("{}.running_var", self.name)).clone(),
                false,
            )
        };
        let eps = self.eps;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = normalize(g.value(x), &mean, &inv_std);
        g.batch_norm(x, gamma, beta, xhat, inv_std, batch_stats)
    }
}

fn normalize(x: &Tensor, mean: &Tensor, inv_std: &Tensor) -> Tensor {
    let (_, c, _, _) = x.dim();
    let mut xh = x.clone();
    for ch in 0..c {
        let m = mean[[0, ch, 0, 0]];
        let is = inv_std[[0, ch, 0, 0]];
        xh.slice_mut(s![.., ch, .., ..])
            .mapv_inplace(|v| (v - m) * is);
    }
    xh
}
