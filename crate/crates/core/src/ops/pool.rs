//! Spatial pooling over NCHW tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// index of the winning input element (first winner on ties, row-major
/// scan), which the backward pass routes the gradient through.
pub fn max_pool2d_forward<E: Element>(
    x: &Tensor<E>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<E>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (k_h, k_w) = kernel;
    let (s_h, s_w) = stride;
    if k_h == 0 || k_w == 0 || s_h == 0 || s_w == 0 {
        return Err(Error::Config("max_pool2d: zero kernel or stride".into()));
    }
    if k_h > h || k_w > w {
        return Err(Error::Config(format!(
            "max_pool2d: kernel {k_h}x{k_w} exceeds input {h}x{w}"
        )));
    }
    let out_h = (h - k_h) / s_h + 1;
    let out_w = (w - k_w) / s_w + 1;
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    let mut argmax = vec![0usize; n * c * out_h * out_w];
    let data = x.data();
    for nc in 0..n * c {
        let plane_off = nc * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_idx = plane_off + (oy * s_h) * w + ox * s_w;
                let mut best = data[best_idx];
                for ky in 0..k_h {
                    let row = plane_off + (oy * s_h + ky) * w + ox * s_w;
                    for kx in 0..k_w {
                        let v = data[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                let o = nc * out_h * out_w + oy * out_w + ox;
                out.data_mut()[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward<E: Element>(
    gout: &Tensor<E>,
    argmax: &[usize],
    x_shape: &[usize],
) -> Result<Tensor<E>> {
    if gout.len() != argmax.len() {
        return Err(Error::Shape(
            "max_pool2d backward: gradient/argmax length mismatch".into(),
        ));
    }
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for (&g, &idx) in gout.data().iter().zip(argmax) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

/// Mean over all spatial positions: NCHW -> NC.
pub fn global_avg_pool_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = E::one() / E::from_f64(hw as f64);
    let mut out = Tensor::zeros(vec![n, c]);
    for nc in 0..n * c {
        let mut acc = E::zero();
        for &v in &x.data()[nc * hw..(nc + 1) * hw] {
            acc += v;
        }
        out.data_mut()[nc] = acc * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward<E: Element>(
    gout: &Tensor<E>,
    x_shape: &[usize],
) -> Result<Tensor<E>> {
    let [n, c, h, w] = match x_shape[..] {
        [a, b, cc, d] => [a, b, cc, d],
        _ => {
            return Err(Error::Shape(format!(
                "global_avg_pool backward: bad input shape {x_shape:?}"
            )))
        }
    };
    if gout.shape() != [n, c] {
        return Err(Error::Shape(format!(
            "global_avg_pool backward: gradient shape {:?} vs [{n}, {c}]",
            gout.shape()
        )));
    }
    let hw = h * w;
    let inv = E::one() / E::from_f64(hw as f64);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for nc in 0..n * c {
        let g = gout.data()[nc] * inv;
        dx.data_mut()[nc * hw..(nc + 1) * hw]
            .iter_mut()
            .for_each(|v| *v = g);
    }
    Ok(dx)
}
