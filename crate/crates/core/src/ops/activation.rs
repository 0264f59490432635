//! Pointwise nonlinearities and softmax variants.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// ReLU; the subgradient at 0 is taken as 0 (strict `> 0` mask).
pub fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

pub fn relu_backward<E: Element>(gout: &Tensor<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    gout.zip_map(x, |g, v| if v > E::zero() { g } else { E::zero() })
}

pub fn sigmoid_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| E::one() / (E::one() + (-v).exp()))
}

/// Backward from the saved output: `g * y * (1 - y)`.
pub fn sigmoid_backward<E: Element>(gout: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    gout.zip_map(y, |g, s| g * s * (E::one() - s))
}

/// Row softmax over an `N x K` tensor, stabilized by the row maximum.
pub fn softmax_rows_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k) = x.dims2()?;
    let mut out = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        let row = &x.data()[r * k..(r + 1) * k];
        let dst = &mut out.data_mut()[r * k..(r + 1) * k];
        softmax_slice(row, dst);
    }
    Ok(out)
}

/// Backward from the saved output: `y ⊙ (g - <g, y>)` per row.
pub fn softmax_rows_backward<E: Element>(
    gout: &Tensor<E>,
    y: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, k) = y.dims2()?;
    if gout.shape() != y.shape() {
        return Err(Error::Shape("softmax backward: shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        let g = &gout.data()[r * k..(r + 1) * k];
        let s = &y.data()[r * k..(r + 1) * k];
        let mut dot = E::zero();
        for (&gv, &sv) in g.iter().zip(s) {
            dot += gv * sv;
        }
        let dst = &mut dx.data_mut()[r * k..(r + 1) * k];
        for ((d, &gv), &sv) in dst.iter_mut().zip(g).zip(s) {
            *d = sv * (gv - dot);
        }
    }
    Ok(dx)
}

/// Per-pixel softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut logits = vec![E::zero(); c];
    let mut probs = vec![E::zero(); c];
    for batch in 0..n {
        for i in 0..hw {
            for ch in 0..c {
                logits[ch] = x.data()[(batch * c + ch) * hw + i];
            }
            softmax_slice(&logits, &mut probs);
            for ch in 0..c {
                out.data_mut()[(batch * c + ch) * hw + i] = probs[ch];
            }
        }
    }
    Ok(out)
}

pub fn softmax_channels_backward<E: Element>(
    gout: &Tensor<E>,
    y: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = y.dims4()?;
    if gout.shape() != y.shape() {
        return Err(Error::Shape(
            "softmax_channels backward: shape mismatch".into(),
        ));
    }
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape().to_vec());
    for batch in 0..n {
        for i in 0..hw {
            let mut dot = E::zero();
            for ch in 0..c {
                let idx = (batch * c + ch) * hw + i;
                dot += gout.data()[idx] * y.data()[idx];
            }
            for ch in 0..c {
                let idx = (batch * c + ch) * hw + i;
                dx.data_mut()[idx] = y.data()[idx] * (gout.data()[idx] - dot);
            }
        }
    }
    Ok(dx)
}

/// Stabilized softmax of one logit slice into `dst`.
pub fn softmax_slice<E: Element>(logits: &[E], dst: &mut [E]) {
    debug_assert_eq!(logits.len(), dst.len());
    let mut max = logits[0];
    for &v in &logits[1..] {
        if v > max {
            max = v;
        }
    }
    let mut denom = E::zero();
    for (d, &v) in dst.iter_mut().zip(logits) {
        let e = (v - max).exp();
        *d = e;
        denom += e;
    }
    for d in dst.iter_mut() {
        *d /= denom;
    }
}
