//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records every operation as it executes ("define by run").
//! Each node stores its value plus the recipe that produced it; calling
//! [`Tape::backward`] on a scalar node sweeps the recipes in reverse and
//! accumulates chain-rule gradients into every node that asked for them.
//! Tapes are single network / single batch scoped: build, backward, drop.

use crate::error::{Error, Result};
use crate::ops::activation::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, softmax_channels_backward,
    softmax_channels_forward, softmax_rows_backward, softmax_rows_forward,
};
use crate::ops::conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    conv_transpose2d_forward,
};
use crate::ops::flip::{flip_tensor, FlipKind};
use crate::ops::linear::{linear_backward, linear_forward};
use crate::ops::loss::{
    cross_entropy_backward, cross_entropy_forward, cross_entropy_spatial_backward,
    cross_entropy_spatial_forward,
};
use crate::ops::norm::{
    batch_norm_infer_backward, batch_norm_infer_forward, batch_norm_train_backward,
    batch_norm_train_forward, BnBatchStats,
};
use crate::ops::pool::{
    global_avg_pool_backward, global_avg_pool_forward, max_pool2d_backward, max_pool2d_forward,
};
use crate::ops::resize::{bilinear_resize_backward, bilinear_resize_forward};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

enum Recipe<E: Element> {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Sum(VarId),
    Scale(VarId, E),
    Relu(VarId),
    Sigmoid(VarId),
    SoftmaxRows(VarId),
    SoftmaxChannels(VarId),
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNormTrain {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        stats: BnBatchStats<E>,
    },
    BatchNormInfer {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
        eps: E,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(VarId),
    CrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        probs: Tensor<E>,
        weights: Option<Vec<E>>,
    },
    CrossEntropySpatial {
        logits: VarId,
        targets: Vec<usize>,
        probs: Tensor<E>,
    },
    BilinearResize(VarId),
    Flip {
        x: VarId,
        kind: FlipKind,
    },
}

pub struct Tape<E: Element> {
    values: Vec<Tensor<E>>,
    grads: Vec<Option<Tensor<E>>>,
    recipes: Vec<Recipe<E>>,
    needs: Vec<bool>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            recipes: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.values[id.0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, id: VarId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, value: Tensor<E>, recipe: Recipe<E>, needs: bool) -> VarId {
        self.values.push(value);
        self.grads.push(None);
        self.recipes.push(recipe);
        self.needs.push(needs);
        VarId(self.values.len() - 1)
    }

    fn needs_any(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    /// Insert a graph input. `requires_grad` marks it (and everything
    /// computed from it) as a gradient target.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> VarId {
        self.push(value, Recipe::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> VarId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y)?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(v, Recipe::Add(a, b), needs))
    }

    /// Elementwise product, same shape only.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y)?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(v, Recipe::Mul(a, b), needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let mut acc = E::zero();
        for &v in self.values[x.0].data() {
            acc += v;
        }
        let needs = self.needs[x.0];
        self.push(Tensor::scalar(acc), Recipe::Sum(x), needs)
    }

    pub fn scale(&mut self, x: VarId, c: E) -> VarId {
        let v = self.values[x.0].map(|e| e * c);
        let needs = self.needs[x.0];
        self.push(v, Recipe::Scale(x, c), needs)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = relu_forward(&self.values[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Recipe::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = sigmoid_forward(&self.values[x.0]);
        let needs = self.needs[x.0];
        self.push(v, Recipe::Sigmoid(x), needs)
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let v = softmax_rows_forward(&self.values[x.0])?;
        let needs = self.needs[x.0];
        Ok(self.push(v, Recipe::SoftmaxRows(x), needs))
    }

    pub fn softmax_channels(&mut self, x: VarId) -> Result<VarId> {
        let v = softmax_channels_forward(&self.values[x.0])?;
        let needs = self.needs[x.0];
        Ok(self.push(v, Recipe::SoftmaxChannels(x), needs))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let v = linear_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|id| &self.values[id.0]),
        )?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs_any(&ids);
        Ok(self.push(v, Recipe::Linear { x, w, b }, needs))
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<VarId> {
        let v = conv2d_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|id| &self.values[id.0]),
            stride,
            pad,
        )?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs_any(&ids);
        Ok(self.push(
            v,
            Recipe::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<VarId> {
        let v = conv_transpose2d_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|id| &self.values[id.0]),
            stride,
            pad,
        )?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs_any(&ids);
        Ok(self.push(
            v,
            Recipe::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Training-mode batch norm. Returns the output node and the batch
    /// statistics so the caller can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: E,
    ) -> Result<(VarId, BnBatchStats<E>)> {
        let (v, stats) = batch_norm_train_forward(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        )?;
        let needs = self.needs_any(&[x, gamma, beta]);
        let id = self.push(
            v,
            Recipe::BatchNormTrain {
                x,
                gamma,
                beta,
                stats: stats.clone(),
            },
            needs,
        );
        Ok((id, stats))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
        eps: E,
    ) -> Result<VarId> {
        let v = batch_norm_infer_forward(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            &running_mean,
            &running_var,
            eps,
        )?;
        let needs = self.needs_any(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Recipe::BatchNormInfer {
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            },
            needs,
        ))
    }

    pub fn max_pool2d(
        &mut self,
        x: VarId,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<VarId> {
        let (v, argmax) = max_pool2d_forward(&self.values[x.0], kernel, stride)?;
        let needs = self.needs[x.0];
        Ok(self.push(v, Recipe::MaxPool { x, argmax }, needs))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let v = global_avg_pool_forward(&self.values[x.0])?;
        let needs = self.needs[x.0];
        Ok(self.push(v, Recipe::GlobalAvgPool(x), needs))
    }

    /// Mean softmax cross-entropy of `N x K` logits against class indices.
    pub fn cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
        class_weights: Option<&[E]>,
    ) -> Result<VarId> {
        let (loss, probs) =
            cross_entropy_forward(&self.values[logits.0], labels, class_weights)?;
        let needs = self.needs[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            Recipe::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weights: class_weights.map(|w| w.to_vec()),
            },
            needs,
        ))
    }

    /// Per-pixel softmax cross-entropy of NCHW logits against class
    /// indices in batch-row-column order.
    pub fn cross_entropy_spatial(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let (loss, probs) = cross_entropy_spatial_forward(&self.values[logits.0], targets)?;
        let needs = self.needs[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            Recipe::CrossEntropySpatial {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn bilinear_resize(&mut self, x: VarId, out_h: usize, out_w: usize) -> Result<VarId> {
        let v = bilinear_resize_forward(&self.values[x.0], out_h, out_w)?;
        let needs = self.needs[x.0];
        Ok(self.push(v, Recipe::BilinearResize(x), needs))
    }

    pub fn flip(&mut self, x: VarId, kind: FlipKind) -> VarId {
        let v = flip_tensor(&self.values[x.0], kind);
        let needs = self.needs[x.0];
        self.push(v, Recipe::Flip { x, kind }, needs)
    }

    /// Reverse sweep from a scalar loss. Afterwards every leaf created with
    /// `requires_grad` holds a gradient; leaves the loss never touched hold
    /// zeros.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::new(
            self.values[loss.0].shape().to_vec(),
            vec![E::one()],
        )?);

        let Tape {
            values,
            grads,
            recipes,
            needs,
        } = self;

        for i in (0..values.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &recipes[i] {
                Recipe::Leaf => {}
                Recipe::Add(a, b) => {
                    accumulate(grads, needs, *a, || Ok(g.clone()))?;
                    accumulate(grads, needs, *b, || Ok(g.clone()))?;
                }
                Recipe::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(grads, needs, a, || g.zip_map(&values[b.0], |gv, bv| gv * bv))?;
                    accumulate(grads, needs, b, || g.zip_map(&values[a.0], |gv, av| gv * av))?;
                }
                Recipe::Sum(x) => {
                    let gs = g.item()?;
                    accumulate(grads, needs, *x, || {
                        Ok(Tensor::full(values[x.0].shape().to_vec(), gs))
                    })?;
                }
                Recipe::Scale(x, c) => {
                    let c = *c;
                    accumulate(grads, needs, *x, || Ok(g.map(|v| v * c)))?;
                }
                Recipe::Relu(x) => {
                    accumulate(grads, needs, *x, || relu_backward(&g, &values[x.0]))?;
                }
                Recipe::Sigmoid(x) => {
                    accumulate(grads, needs, *x, || sigmoid_backward(&g, &values[i]))?;
                }
                Recipe::SoftmaxRows(x) => {
                    accumulate(grads, needs, *x, || softmax_rows_backward(&g, &values[i]))?;
                }
                Recipe::SoftmaxChannels(x) => {
                    accumulate(grads, needs, *x, || {
                        softmax_channels_backward(&g, &values[i])
                    })?;
                }
                Recipe::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(&g, &values[x.0], &values[w.0])?;
                    accumulate(grads, needs, *x, || Ok(dx))?;
                    accumulate(grads, needs, *w, || Ok(dw))?;
                    if let Some(b) = b {
                        accumulate(grads, needs, *b, || Ok(db))?;
                    }
                }
                Recipe::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (stride, pad) = (*stride, *pad);
                    if needs[x.0] {
                        let (_, _, h, wd) = values[x.0].dims4()?;
                        let dx = conv2d_backward_input(&g, &values[w.0], (h, wd), stride, pad)?;
                        accumulate(grads, needs, *x, || Ok(dx))?;
                    }
                    if needs[w.0] {
                        let ks = values[w.0].shape();
                        let (kh, kw) = (ks[2], ks[3]);
                        let dw =
                            conv2d_backward_weight(&values[x.0], &g, (kh, kw), stride, pad)?;
                        accumulate(grads, needs, *w, || Ok(dw))?;
                    }
                    if let Some(b) = b {
                        if needs[b.0] {
                            let db = conv2d_backward_bias(&g)?;
                            accumulate(grads, needs, *b, || Ok(db))?;
                        }
                    }
                }
                Recipe::ConvTranspose2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (stride, pad) = (*stride, *pad);
                    if needs[x.0] {
                        let dx = conv2d_forward(&g, &values[w.0], None, stride, pad)?;
                        accumulate(grads, needs, *x, || Ok(dx))?;
                    }
                    if needs[w.0] {
                        let ks = values[w.0].shape();
                        let (kh, kw) = (ks[2], ks[3]);
                        let dw = conv2d_backward_weight(&g, &values[x.0], (kh, kw), stride, pad)?;
                        accumulate(grads, needs, *w, || Ok(dw))?;
                    }
                    if let Some(b) = b {
                        if needs[b.0] {
                            let db = conv2d_backward_bias(&g)?;
                            accumulate(grads, needs, *b, || Ok(db))?;
                        }
                    }
                }
                Recipe::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dgamma, dbeta) =
                        batch_norm_train_backward(&g, &values[x.0], &values[gamma.0], stats)?;
                    accumulate(grads, needs, *x, || Ok(dx))?;
                    accumulate(grads, needs, *gamma, || Ok(dgamma))?;
                    accumulate(grads, needs, *beta, || Ok(dbeta))?;
                }
                Recipe::BatchNormInfer {
                    x,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) = batch_norm_infer_backward(
                        &g,
                        &values[x.0],
                        &values[gamma.0],
                        running_mean,
                        running_var,
                        *eps,
                    )?;
                    accumulate(grads, needs, *x, || Ok(dx))?;
                    accumulate(grads, needs, *gamma, || Ok(dgamma))?;
                    accumulate(grads, needs, *beta, || Ok(dbeta))?;
                }
                Recipe::MaxPool { x, argmax } => {
                    accumulate(grads, needs, *x, || {
                        max_pool2d_backward(&g, argmax, values[x.0].shape())
                    })?;
                }
                Recipe::GlobalAvgPool(x) => {
                    accumulate(grads, needs, *x, || {
                        global_avg_pool_backward(&g, values[x.0].shape())
                    })?;
                }
                Recipe::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    weights,
                } => {
                    let gs = g.item()?;
                    accumulate(grads, needs, *logits, || {
                        cross_entropy_backward(gs, probs, labels, weights.as_deref())
                    })?;
                }
                Recipe::CrossEntropySpatial {
                    logits,
                    targets,
                    probs,
                } => {
                    let gs = g.item()?;
                    accumulate(grads, needs, *logits, || {
                        cross_entropy_spatial_backward(gs, probs, targets)
                    })?;
                }
                Recipe::BilinearResize(x) => {
                    accumulate(grads, needs, *x, || {
                        bilinear_resize_backward(&g, values[x.0].shape())
                    })?;
                }
                Recipe::Flip { x, kind } => {
                    let kind = *kind;
                    accumulate(grads, needs, *x, || Ok(flip_tensor(&g, kind)))?;
                }
            }
            grads[i] = Some(g);
        }

        // Leaves the loss never reached still get a (zero) gradient.
        for i in 0..values.len() {
            if needs[i] && matches!(recipes[i], Recipe::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(values[i].shape().to_vec()));
            }
        }
        Ok(())
    }
}

fn accumulate<E: Element>(
    grads: &mut [Option<Tensor<E>>],
    needs: &[bool],
    id: VarId,
    delta: impl FnOnce() -> Result<Tensor<E>>,
) -> Result<()> {
    if !needs[id.0] {
        return Ok(());
    }
    let delta = delta()?;
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

/// Maximum relative error between analytic gradients and central finite
/// differences, over every element of every input:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must construct a scalar loss from the given leaves; it is
/// re-invoked for every probe, so it must be deterministic.
pub fn grad_check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).cloned().expect("leaf gradient"))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<VarId> = probe.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &ids)?;
        t.value(l).item()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient_is_two_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap(), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untouched_trainable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0f64), true);
        let unused = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(w), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_check_on_composite_expression() {
        // loss = sum(relu(x) * y)
        let x = Tensor::new(vec![4], vec![0.5f64, -1.2, 2.0, -0.3]).unwrap();
        let y = Tensor::new(vec![4], vec![1.5f64, -0.5, 0.25, 2.0]).unwrap();
        let err = grad_check(&[x, y], 1e-5, |tape, ids| {
            let r = tape.relu(ids[0]);
            let m = tape.mul(r, ids[1])?;
            Ok(tape.sum(m))
        })
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }
}
