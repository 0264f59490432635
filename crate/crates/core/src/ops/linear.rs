//! Fully connected layer: `y = x w^T + b` with `x: N x D`, `w: K x D`.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use crate::tensor::{Element, Tensor};

pub fn linear_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let (n, d) = x.dims2()?;
    let (k, wd) = w.dims2()?;
    if d != wd {
        return Err(Error::Shape(format!(
            "linear: input dim {d} vs weight dim {wd}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?} vs {k} outputs",
                b.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(vec![n, k]);
    if let Some(b) = bias {
        for r in 0..n {
            out.data_mut()[r * k..(r + 1) * k].copy_from_slice(b.data());
        }
    }
    // out[n x k] += x[n x d] * w^T (w stored k x d)
    gemm_bt_acc(out.data_mut(), x.data(), w.data(), n, d, k);
    Ok(out)
}

/// Returns (dx, dw, db).
pub fn linear_backward<E: Element>(
    gout: &Tensor<E>,
    x: &Tensor<E>,
    w: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, d) = x.dims2()?;
    let (k, _) = w.dims2()?;
    if gout.shape() != [n, k] {
        return Err(Error::Shape(format!(
            "linear backward: gradient shape {:?} vs [{n}, {k}]",
            gout.shape()
        )));
    }
    // dx[n x d] = g[n x k] * w[k x d]
    let mut dx = Tensor::zeros(vec![n, d]);
    gemm_acc(dx.data_mut(), gout.data(), w.data(), n, k, d);
    // dw[k x d] = g^T[k x n] * x[n x d] (g stored n x k)
    let mut dw = Tensor::zeros(vec![k, d]);
    gemm_at_acc(dw.data_mut(), gout.data(), x.data(), k, n, d);
    // db[k] = column sums of g
    let mut db = Tensor::zeros(vec![k]);
    for r in 0..n {
        for c in 0..k {
            db.data_mut()[c] += gout.data()[r * k + c];
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_product() {
        // x = [[1, 2]], w = [[3, 4], [5, 6]], b = [0.5, -0.5]
        let x = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[11.5, 16.5]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 3]);
        let w = Tensor::<f32>::zeros(vec![2, 4]);
        assert!(linear_forward(&x, &w, None).is_err());
    }
}
