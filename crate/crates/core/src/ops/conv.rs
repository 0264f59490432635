//! 2-D convolution, its adjoints, and transposed convolution.
//!
//! Layouts: activations NCHW, kernels OIHW. A transposed convolution with
//! kernel `k` is exactly the adjoint of the convolution with the same `k`,
//! so its input channels are `k.shape[0]` and its output channels
//! `k.shape[1]`.
//!
//! All three kernels lower to im2col plus a fixed-order matrix product, so
//! results are deterministic across runs and the per-output accumulation
//! order matches the direct five-loop summation.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }
    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Validate shapes and compute the output size of a forward convolution.
pub fn conv_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<ConvGeom> {
    let [batch, in_c, in_h, in_w] = four(x_shape, "conv2d input")?;
    let [out_c, k_in_c, k_h, k_w] = four(w_shape, "conv2d kernel")?;
    if in_c != k_in_c {
        return Err(Error::Shape(format!(
            "conv2d: input has {in_c} channels but kernel expects {k_in_c}"
        )));
    }
    let (s_h, s_w) = stride;
    if s_h == 0 || s_w == 0 {
        return Err(Error::Config("conv2d: zero stride".into()));
    }
    let (p_h, p_w) = pad;
    let out_h = out_extent(in_h, k_h, s_h, p_h)?;
    let out_w = out_extent(in_w, k_w, s_w, p_w)?;
    Ok(ConvGeom {
        batch,
        in_c,
        in_h,
        in_w,
        out_c,
        k_h,
        k_w,
        s_h,
        s_w,
        p_h,
        p_w,
        out_h,
        out_w,
    })
}

fn four(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape(format!(
            "{what}: expected rank 4, got shape {shape:?}"
        ))),
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "conv2d: non-positive output size (input {input} + 2*pad {pad} < kernel {kernel})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn check_bias<E: Element>(bias: Option<&Tensor<E>>, out_c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {out_c} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Gather one image into column form: row `(ic*KH+ky)*KW+kx`, column
/// `oy*OW+ox`. Out-of-bounds taps (padding) become zero.
fn im2col<E: Element>(img: &[E], geo: &ConvGeom, col: &mut [E]) {
    let (ih, iw, ow) = (geo.in_h, geo.in_w, geo.out_w);
    let cols = geo.col_cols();
    let mut row = 0;
    for ic in 0..geo.in_c {
        let plane = &img[ic * ih * iw..(ic + 1) * ih * iw];
        for ky in 0..geo.k_h {
            for kx in 0..geo.k_w {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.s_h + ky) as isize - geo.p_h as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= ih as isize {
                        drow.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * geo.s_w + kx) as isize - geo.p_w as isize;
                        *d = if ix < 0 || ix >= iw as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column form back onto an image.
fn col2im_acc<E: Element>(col: &[E], geo: &ConvGeom, img: &mut [E]) {
    let (ih, iw, ow) = (geo.in_h, geo.in_w, geo.out_w);
    let cols = geo.col_cols();
    let mut row = 0;
    for ic in 0..geo.in_c {
        let plane = &mut img[ic * ih * iw..(ic + 1) * ih * iw];
        for ky in 0..geo.k_h {
            for kx in 0..geo.k_w {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.s_h + ky) as isize - geo.p_h as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * iw..(iy as usize + 1) * iw];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * geo.s_w + kx) as isize - geo.p_w as isize;
                        if ix >= 0 && ix < iw as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation: `out[n,o] = bias[o] + sum_{ic,ky,kx} x * w`.
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<E>> {
    let geo = conv_geom(x.shape(), w.shape(), stride, pad)?;
    check_bias(bias, geo.out_c)?;
    let cols = geo.col_cols();
    let rows = geo.col_rows();
    let mut col = vec![E::zero(); rows * cols];
    let mut out = Tensor::zeros(vec![geo.batch, geo.out_c, geo.out_h, geo.out_w]);
    let img_len = geo.in_c * geo.in_h * geo.in_w;
    let out_len = geo.out_c * cols;
    for n in 0..geo.batch {
        let out_n = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                out_n[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = bv);
            }
        }
        im2col(&x.data()[n * img_len..(n + 1) * img_len], &geo, &mut col);
        gemm_acc(out_n, w.data(), &col, geo.out_c, rows, cols);
    }
    Ok(out)
}

/// Gradient of a convolution w.r.t. its input; also the forward pass of the
/// transposed convolution. `in_hw` fixes the target spatial size, which the
/// stride formula alone cannot recover when the forward pass floored.
pub fn conv2d_backward_input<E: Element>(
    gout: &Tensor<E>,
    w: &Tensor<E>,
    in_hw: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<E>> {
    let [batch, g_c, g_h, g_w] = four(gout.shape(), "conv2d gradient")?;
    let [out_c, in_c, _, _] = four(w.shape(), "conv2d kernel")?;
    if g_c != out_c {
        return Err(Error::Shape(format!(
            "conv2d: gradient has {g_c} channels but kernel produces {out_c}"
        )));
    }
    let geo = conv_geom(
        &[batch, in_c, in_hw.0, in_hw.1],
        w.shape(),
        stride,
        pad,
    )?;
    if (geo.out_h, geo.out_w) != (g_h, g_w) {
        return Err(Error::Shape(format!(
            "conv2d: gradient spatial size {g_h}x{g_w} does not match computed {}x{}",
            geo.out_h, geo.out_w
        )));
    }
    let cols = geo.col_cols();
    let rows = geo.col_rows();
    let mut col = vec![E::zero(); rows * cols];
    let mut dx = Tensor::zeros(vec![batch, in_c, in_hw.0, in_hw.1]);
    let img_len = in_c * in_hw.0 * in_hw.1;
    let g_len = out_c * cols;
    for n in 0..batch {
        col.iter_mut().for_each(|v| *v = E::zero());
        gemm_at_acc(
            &mut col,
            w.data(),
            &gout.data()[n * g_len..(n + 1) * g_len],
            rows,
            out_c,
            cols,
        );
        col2im_acc(&col, &geo, &mut dx.data_mut()[n * img_len..(n + 1) * img_len]);
    }
    Ok(dx)
}

/// Gradient of a convolution w.r.t. its kernel.
pub fn conv2d_backward_weight<E: Element>(
    x: &Tensor<E>,
    gout: &Tensor<E>,
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<E>> {
    let [batch, in_c, in_h, in_w] = four(x.shape(), "conv2d input")?;
    let [g_batch, out_c, g_h, g_w] = four(gout.shape(), "conv2d gradient")?;
    if batch != g_batch {
        return Err(Error::Shape(format!(
            "conv2d: input batch {batch} vs gradient batch {g_batch}"
        )));
    }
    let geo = conv_geom(
        &[batch, in_c, in_h, in_w],
        &[out_c, in_c, kernel_hw.0, kernel_hw.1],
        stride,
        pad,
    )?;
    if (geo.out_h, geo.out_w) != (g_h, g_w) {
        return Err(Error::Shape(format!(
            "conv2d: gradient spatial size {g_h}x{g_w} does not match computed {}x{}",
            geo.out_h, geo.out_w
        )));
    }
    let cols = geo.col_cols();
    let rows = geo.col_rows();
    let mut col = vec![E::zero(); rows * cols];
    let mut dw = Tensor::zeros(vec![out_c, in_c, kernel_hw.0, kernel_hw.1]);
    let img_len = in_c * in_h * in_w;
    let g_len = out_c * cols;
    for n in 0..batch {
        im2col(&x.data()[n * img_len..(n + 1) * img_len], &geo, &mut col);
        gemm_bt_acc(
            dw.data_mut(),
            &gout.data()[n * g_len..(n + 1) * g_len],
            &col,
            out_c,
            cols,
            rows,
        );
    }
    Ok(dw)
}

/// Gradient of a convolution w.r.t. its bias: sum over batch and space.
pub fn conv2d_backward_bias<E: Element>(gout: &Tensor<E>) -> Result<Tensor<E>> {
    let [batch, out_c, h, w] = four(gout.shape(), "conv2d gradient")?;
    let hw = h * w;
    let mut db = Tensor::zeros(vec![out_c]);
    for n in 0..batch {
        for o in 0..out_c {
            let plane = &gout.data()[(n * out_c + o) * hw..(n * out_c + o + 1) * hw];
            let mut acc = E::zero();
            for &v in plane {
                acc += v;
            }
            db.data_mut()[o] += acc;
        }
    }
    Ok(db)
}

/// Output size of a transposed convolution: `(in-1)*stride - 2*pad + kernel`.
pub fn conv_transpose2d_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad + 1 {
        return Err(Error::Config(format!(
            "transposed conv2d: non-positive output size (input {input}, kernel {kernel}, stride {stride}, pad {pad})"
        )));
    }
    Ok(grown - 2 * pad)
}

/// Scatter upsampling: the adjoint of [`conv2d_forward`] with the same
/// kernel. Input channels are `w.shape[0]`, output channels `w.shape[1]`.
pub fn conv_transpose2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<E>> {
    let [_, x_c, x_h, x_w] = four(x.shape(), "transposed conv2d input")?;
    let [w_in, w_out, k_h, k_w] = four(w.shape(), "transposed conv2d kernel")?;
    if x_c != w_in {
        return Err(Error::Shape(format!(
            "transposed conv2d: input has {x_c} channels but kernel expects {w_in}"
        )));
    }
    check_bias(bias, w_out)?;
    let out_h = conv_transpose2d_out_extent(x_h, k_h, stride.0, pad.0)?;
    let out_w = conv_transpose2d_out_extent(x_w, k_w, stride.1, pad.1)?;
    let mut out = conv2d_backward_input(x, w, (out_h, out_w), stride, pad)?;
    if let Some(b) = bias {
        let (n_b, c_b, h_b, w_b) = out.dims4()?;
        let hw = h_b * w_b;
        for n in 0..n_b {
            for c in 0..c_b {
                let bv = b.data()[c];
                out.data_mut()[(n * c_b + c) * hw..(n * c_b + c + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}
