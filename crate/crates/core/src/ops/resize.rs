//! Bilinear resizing of NCHW tensors.
//!
//! Sampling is half-pixel aligned ("align corners false"): output pixel `i`
//! reads the source at `(i + 0.5) * in/out - 0.5`, clamped to the valid
//! range, then interpolates the two nearest rows/columns. The clamping and
//! the half-pixel grid are both mirror-symmetric, so resizing commutes with
//! horizontal/vertical flips.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_resize_forward<E: Element>(
    x: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("bilinear_resize: zero target size".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for (oy, ty) in ys.iter().enumerate() {
            let wy = E::from_f64(ty.frac);
            let one_wy = E::one() - wy;
            let row_lo = &src[ty.lo * w..(ty.lo + 1) * w];
            let row_hi = &src[ty.hi * w..(ty.hi + 1) * w];
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (ox, tx) in xs.iter().enumerate() {
                let wx = E::from_f64(tx.frac);
                let one_wx = E::one() - wx;
                drow[ox] = one_wy * (one_wx * row_lo[tx.lo] + wx * row_lo[tx.hi])
                    + wy * (one_wx * row_hi[tx.lo] + wx * row_hi[tx.hi]);
            }
        }
    }
    Ok(out)
}

/// Adjoint: scatter each output gradient onto its four source taps with the
/// same interpolation weights.
pub fn bilinear_resize_backward<E: Element>(
    gout: &Tensor<E>,
    x_shape: &[usize],
) -> Result<Tensor<E>> {
    let (n, c, out_h, out_w) = gout.dims4()?;
    let [xn, xc, h, w] = match x_shape[..] {
        [a, b, cc, d] => [a, b, cc, d],
        _ => {
            return Err(Error::Shape(format!(
                "bilinear_resize backward: bad input shape {x_shape:?}"
            )))
        }
    };
    if (n, c) != (xn, xc) {
        return Err(Error::Shape(
            "bilinear_resize backward: batch/channel mismatch".into(),
        ));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(gout.clone());
    }
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for nc in 0..n * c {
        let src = &gout.data()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            let wy = E::from_f64(ty.frac);
            let one_wy = E::one() - wy;
            for (ox, tx) in xs.iter().enumerate() {
                let wx = E::from_f64(tx.frac);
                let one_wx = E::one() - wx;
                let g = src[oy * out_w + ox];
                dst[ty.lo * w + tx.lo] += one_wy * one_wx * g;
                dst[ty.lo * w + tx.hi] += one_wy * wx * g;
                dst[ty.hi * w + tx.lo] += wy * one_wx * g;
                dst[ty.hi * w + tx.hi] += wy * wx * g;
            }
        }
    }
    Ok(dx)
}
