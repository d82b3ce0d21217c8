//! Reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Builder methods push
//! nodes that hold both the computed value and the recipe to backpropagate
//! through it; [`Graph::backward`] then does one reverse sweep and returns
//! gradients keyed by parameter. Loss nodes compute their input gradient at
//! construction time (labels are known then), so the sweep itself never sees
//! label data.
//!
//! Node indices are only ever created by this module, so a [`Var`] always
//! refers to an earlier node and the natural order is topological.

use std::collections::HashMap;

use ndarray::{s, Array3, Axis};

use super::kernels;
use super::params::{ParamKey, ParameterStore};
use super::Tensor;
use crate::losses::{self, DiceMode};
use crate::Result;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Const,
    Param {
        key: ParamKey,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Tensor,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Elementwise product with a constant factor; the factor may have one
    /// channel and broadcast over the input's channels.
    MulConst {
        x: Var,
        factor: Tensor,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    BilinearResize {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    /// Scalar loss with the input gradient frozen at construction time.
    PrecomputedLoss {
        x: Var,
        grad: Tensor,
    },
    /// Two-input variant of the above (discriminator losses).
    PrecomputedLoss2 {
        a: Var,
        b: Var,
        grad_a: Tensor,
        grad_b: Tensor,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients from one backward sweep, addressable by parameter key or by the
/// input node the caller kept a [`Var`] for.
pub struct Gradients {
    params: HashMap<ParamKey, Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, store: &ParameterStore, name: &str) -> Option<&Tensor> {
        self.params.get(&store.key(name))
    }

    pub fn param_by_key(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
}

impl Graph {
    /// `train` selects batch statistics in normalization layers and enables
    /// running-average updates.
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `[1,1,1,1]` node as a plain f64.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained in the sweep result.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Leaf that reads (a copy of) a named parameter; gradients accumulate
    /// under the parameter's key, so referencing the same parameter from
    /// several passes sums their contributions.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        let key = store.key(name);
        self.push(store.get(name).clone(), Op::Param { key })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        self.push(value, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let value = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad })
    }

    /// Normalization node. The layer wrapper computes `xhat` and `inv_std`
    /// from batch or running statistics; `batch_stats` says which, because
    /// the backward formula differs (batch statistics depend on `x`).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Tensor,
        batch_stats: bool,
    ) -> Var {
        let g = self.value(gamma);
        let b = self.value(beta);
        let (_, c, _, _) = xhat.dim();
        let mut value = xhat.clone();
        for ch in 0..c {
            let gv = g[[0, ch, 0, 0]];
            let bv = b[[0, ch, 0, 0]];
            value
                .slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| v * gv + bv);
        }
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b })
    }

    /// Elementwise multiply by a constant (no gradient through the factor).
    /// A single-channel factor broadcasts across the input's channels.
    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Var {
        let value = mul_broadcast(self.value(x), &factor);
        self.push(value, Op::MulConst { x, factor })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let (n, _, h, w) = self.value(parts[0]).dim();
        let total: usize = parts.iter().map(|p| self.value(*p).dim().1).sum();
        let mut value = Tensor::zeros((n, total, h, w));
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.dim().1;
            assert_eq!(t.dim().0, n, "concat batch mismatch");
            assert_eq!((t.dim().2, t.dim().3), (h, w), "concat extent mismatch");
            value.slice_mut(s![.., off..off + c, .., ..]).assign(t);
            off += c;
        }
        self.push(value, Op::ConcatChannels { parts: parts.to_vec() })
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let value = kernels::bilinear_resize(self.value(x), oh, ow);
        self.push(value, Op::BilinearResize { x })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = kernels::softmax_channels(self.value(x));
        self.push(value, Op::Softmax { x })
    }

    /// Cross-entropy over labeled pixels. Returns the loss node and the
    /// number of labeled pixels (zero means the loss is the 0 constant).
    pub fn mce(&mut self, logits: Var, labels: &Array3<u8>, ignore: u8) -> Result<(Var, usize)> {
        let out = losses::mce_with_grad(self.value(logits), labels, ignore)?;
        let var = self.push(
            super::scalar(out.value),
            Op::PrecomputedLoss {
                x: logits,
                grad: out.grad,
            },
        );
        Ok((var, out.labeled))
    }

    /// Dice loss on a probability map (typically a [`Graph::softmax`] node).
    pub fn dice(
        &mut self,
        probs: Var,
        labels: &Array3<u8>,
        ignore: u8,
        mode: DiceMode,
    ) -> Result<Var> {
        let (value, grad) = losses::dice_with_grad(self.value(probs), labels, ignore, mode)?;
        Ok(self.push(super::scalar(value), Op::PrecomputedLoss { x: probs, grad }))
    }

    /// Generator-side least-squares adversarial loss on target scores.
    pub fn lsgan_g(&mut self, scores: Var) -> Var {
        let (value, grad) = losses::lsgan_g_with_grad(self.value(scores));
        self.push(super::scalar(value), Op::PrecomputedLoss { x: scores, grad })
    }

    /// Discriminator-side least-squares adversarial loss.
    pub fn lsgan_d(&mut self, src_scores: Var, tgt_scores: Var) -> Var {
        let (value, grad_a, grad_b) =
            losses::lsgan_d_with_grad(self.value(src_scores), self.value(tgt_scores));
        self.push(
            super::scalar(value),
            Op::PrecomputedLoss2 {
                a: src_scores,
                b: tgt_scores,
                grad_a,
                grad_b,
            },
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for (v, w) in terms {
            acc += self.scalar_value(*v) * w;
        }
        self.push(
            super::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// One reverse sweep from a scalar root. Returns gradients for every
    /// parameter and input leaf reachable from the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward roots must be scalar nodes"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(super::scalar(1.0));
        let mut out = Gradients {
            params: HashMap::new(),
            inputs: HashMap::new(),
        };
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    accumulate_map(&mut out.inputs, i, dy);
                }
                Op::Const => {}
                Op::Param { key } => {
                    accumulate_map(&mut out.params, *key, dy);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        b.is_some(),
                    );
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, w.0, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        b.is_some(),
                    );
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, w.0, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = dy.dim();
                    let m = (n * h * w) as f64;
                    let gamma_v = self.value(*gamma);
                    let mut dgamma = Tensor::zeros((1, c, 1, 1));
                    let mut dbeta = Tensor::zeros((1, c, 1, 1));
                    let mut dx = Tensor::zeros(dy.dim());
                    for ch in 0..c {
                        let dy_c = dy.slice(s![.., ch, .., ..]);
                        let xh_c = xhat.slice(s![.., ch, .., ..]);
                        let sum_dy = dy_c.sum();
                        let sum_dy_xhat = (&dy_c * &xh_c).sum();
                        dgamma[[0, ch, 0, 0]] = sum_dy_xhat;
                        dbeta[[0, ch, 0, 0]] = sum_dy;
                        let g = gamma_v[[0, ch, 0, 0]];
                        let istd = inv_std[[0, ch, 0, 0]];
                        let mut dx_c = dx.slice_mut(s![.., ch, .., ..]);
                        if *batch_stats {
                            // Batch statistics depend on x, so the mean and
                            // variance terms feed back into dx.
                            ndarray::Zip::from(&mut dx_c).and(&dy_c).and(&xh_c).for_each(
                                |d, &dyv, &xhv| {
                                    *d = g * istd / m
                                        * (m * dyv - sum_dy - xhv * sum_dy_xhat);
                                },
                            );
                        } else {
                            ndarray::Zip::from(&mut dx_c).and(&dy_c).for_each(|d, &dyv| {
                                *d = g * istd * dyv;
                            });
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, gamma.0, dgamma);
                    accumulate(&mut grads, beta.0, dbeta);
                }
                Op::Relu { x } => {
                    let y = &self.nodes[i].value;
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                        if yv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, x.0, dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let y = &self.nodes[i].value;
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                        if yv <= 0.0 {
                            *d *= slope;
                        }
                    });
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, dy.clone());
                    accumulate(&mut grads, b.0, dy);
                }
                Op::MulConst { x, factor } => {
                    let dx = mul_broadcast(&dy, factor);
                    accumulate(&mut grads, x.0, dx);
                }
                Op::ConcatChannels { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(*p).dim().1;
                        let slice = dy.slice(s![.., off..off + c, .., ..]).to_owned();
                        accumulate(&mut grads, p.0, slice);
                        off += c;
                    }
                }
                Op::BilinearResize { x } => {
                    let (_, _, h, w) = self.value(*x).dim();
                    let dx = kernels::bilinear_resize_backward(&dy, h, w);
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[i].value;
                    let (n, c, h, w) = y.dim();
                    let mut dx = Tensor::zeros(y.dim());
                    for b in 0..n {
                        for r in 0..h {
                            for col in 0..w {
                                let mut dot = 0.0;
                                for ch in 0..c {
                                    dot += y[[b, ch, r, col]] * dy[[b, ch, r, col]];
                                }
                                for ch in 0..c {
                                    dx[[b, ch, r, col]] =
                                        y[[b, ch, r, col]] * (dy[[b, ch, r, col]] - dot);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::PrecomputedLoss { x, grad } => {
                    let scale = dy[[0, 0, 0, 0]];
                    accumulate(&mut grads, x.0, grad.mapv(|g| g * scale));
                }
                Op::PrecomputedLoss2 {
                    a,
                    b,
                    grad_a,
                    grad_b,
                } => {
                    let scale = dy[[0, 0, 0, 0]];
                    accumulate(&mut grads, a.0, grad_a.mapv(|g| g * scale));
                    accumulate(&mut grads, b.0, grad_b.mapv(|g| g * scale));
                }
                Op::WeightedSum { terms } => {
                    let scale = dy[[0, 0, 0, 0]];
                    for (v, w) in terms {
                        accumulate(&mut grads, v.0, super::scalar(scale * w));
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(t) => *t += &g,
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_map<K: std::hash::Hash + Eq>(map: &mut HashMap<K, Tensor>, key: K, g: Tensor) {
    map.entry(key)
        .and_modify(|t| *t += &g)
        .or_insert(g);
}

/// `x * factor` where `factor` either matches `x`'s shape or has one channel
/// and broadcasts over channels.
fn mul_broadcast(x: &Tensor, factor: &Tensor) -> Tensor {
    if x.dim() == factor.dim() {
        return x * factor;
    }
    let (n, c, h, w) = x.dim();
    assert_eq!(
        factor.dim(),
        (n, 1, h, w),
        "factor must match input or broadcast over channels"
    );
    let mut y = x.clone();
    for ch in 0..c {
        let mut y_c = y.slice_mut(s![.., ch, .., ..]);
        y_c *= &factor.index_axis(Axis(1), 0);
    }
    y
}
