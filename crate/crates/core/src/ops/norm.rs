//! Batch normalization over NCHW tensors, per-channel statistics across
//! batch and spatial dimensions.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Training,
    Inference,
}

/// Per-channel batch statistics saved by the training forward pass for the
/// backward pass and the running-statistics update.
#[derive(Debug, Clone)]
pub struct BnBatchStats<E: Element> {
    pub mean: Vec<E>,
    /// Population variance (divided by the normalization count).
    pub var: Vec<E>,
    pub eps: E,
    /// Batch x spatial count each channel was normalized over.
    pub count: usize,
}

fn check_channel_params<E: Element>(
    c: usize,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm: scale {:?} / shift {:?} vs {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Training-mode forward: normalize with batch statistics, apply
/// scale/shift. The caller updates running statistics from the returned
/// [`BnBatchStats`].
pub fn batch_norm_train_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<(Tensor<E>, BnBatchStats<E>)> {
    let (n, c, h, w) = x.dims4()?;
    check_channel_params(c, gamma, beta)?;
    let count = n * h * w;
    if count < 2 {
        return Err(Error::Config(format!(
            "batch_norm: training mode needs at least 2 elements per channel, got {count}"
        )));
    }
    let inv_count = E::one() / E::from_f64(count as f64);
    let hw = h * w;
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut acc = E::zero();
        for batch in 0..n {
            let plane = &x.data()[(batch * c + ch) * hw..(batch * c + ch + 1) * hw];
            for &v in plane {
                acc += v;
            }
        }
        let m = acc * inv_count;
        let mut acc2 = E::zero();
        for batch in 0..n {
            let plane = &x.data()[(batch * c + ch) * hw..(batch * c + ch + 1) * hw];
            for &v in plane {
                let d = v - m;
                acc2 += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = acc2 * inv_count;
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    for batch in 0..n {
        for ch in 0..c {
            let inv_std = E::one() / (var[ch] + eps).sqrt();
            let (g, b, m) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            let base = (batch * c + ch) * hw;
            for i in 0..hw {
                out.data_mut()[base + i] = (x.data()[base + i] - m) * inv_std * g + b;
            }
        }
    }
    Ok((
        out,
        BnBatchStats {
            mean,
            var,
            eps,
            count,
        },
    ))
}

/// Training-mode backward through the batch statistics.
pub fn batch_norm_train_backward<E: Element>(
    gout: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &BnBatchStats<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = E::from_f64(stats.count as f64);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let m = stats.mean[ch];
        let inv_std = E::one() / (stats.var[ch] + stats.eps).sqrt();
        let g = gamma.data()[ch];
        // Reductions over the normalization population.
        let mut sum_g = E::zero();
        let mut sum_g_xhat = E::zero();
        for batch in 0..n {
            let base = (batch * c + ch) * hw;
            for i in 0..hw {
                let go = gout.data()[base + i];
                let xhat = (x.data()[base + i] - m) * inv_std;
                sum_g += go;
                sum_g_xhat += go * xhat;
            }
        }
        dgamma.data_mut()[ch] = sum_g_xhat;
        dbeta.data_mut()[ch] = sum_g;
        // dx = gamma*inv_std/M * (M*g - sum(g) - xhat*sum(g*xhat))
        let scale = g * inv_std / count;
        for batch in 0..n {
            let base = (batch * c + ch) * hw;
            for i in 0..hw {
                let go = gout.data()[base + i];
                let xhat = (x.data()[base + i] - m) * inv_std;
                dx.data_mut()[base + i] =
                    scale * (count * go - sum_g - xhat * sum_g_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Inference-mode forward: depends only on running statistics.
pub fn batch_norm_infer_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    check_channel_params(c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm: running stats {:?} / {:?} vs {c} channels",
            running_mean.shape(),
            running_var.shape()
        )));
    }
    if running_var.data().iter().any(|&v| v <= E::zero()) {
        return Err(Error::Config(
            "batch_norm: running variance must be strictly positive".into(),
        ));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for batch in 0..n {
        for ch in 0..c {
            let inv_std = E::one() / (running_var.data()[ch] + eps).sqrt();
            let (g, b, m) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
            let base = (batch * c + ch) * hw;
            for i in 0..hw {
                out.data_mut()[base + i] = (x.data()[base + i] - m) * inv_std * g + b;
            }
        }
    }
    Ok(out)
}

/// Inference-mode backward: the statistics are constants.
pub fn batch_norm_infer_backward<E: Element>(
    gout: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: E,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let inv_std = E::one() / (running_var.data()[ch] + eps).sqrt();
        let m = running_mean.data()[ch];
        let g = gamma.data()[ch];
        let mut sum_g = E::zero();
        let mut sum_g_xhat = E::zero();
        for batch in 0..n {
            let base = (batch * c + ch) * hw;
            for i in 0..hw {
                let go = gout.data()[base + i];
                sum_g += go;
                sum_g_xhat += go * (x.data()[base + i] - m) * inv_std;
                dx.data_mut()[base + i] = go * g * inv_std;
            }
        }
        dgamma.data_mut()[ch] = sum_g_xhat;
        dbeta.data_mut()[ch] = sum_g;
    }
    Ok((dx, dgamma, dbeta))
}

/// Exponential moving average update of running statistics. The variance
/// estimate gets the sample (unbiased) correction before entering the
/// average, matching common framework behavior.
pub fn update_running_stats<E: Element>(
    running_mean: &mut Tensor<E>,
    running_var: &mut Tensor<E>,
    stats: &BnBatchStats<E>,
    momentum: E,
) {
    let keep = E::one() - momentum;
    let count = stats.count;
    let correction = if count > 1 {
        E::from_f64(count as f64 / (count as f64 - 1.0))
    } else {
        E::one()
    };
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + momentum * (b * correction);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full(vec![c], 1.0)
    }
    fn zeros_t(c: usize) -> Tensor<f64> {
        Tensor::zeros(vec![c])
    }

    #[test]
    fn training_normalizes_to_zero_mean_unit_variance() {
        let x = Tensor::new(
            vec![2, 1, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.5, 10.0],
        )
        .unwrap();
        let (out, stats) =
            batch_norm_train_forward(&x, &ones(1), &zeros_t(1), 1e-5).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        // epsilon shrinks the variance slightly below 1
        assert!((var - stats.var[0] / (stats.var[0] + 1e-5)).abs() < 1e-9);
        assert!(var < 1.0 && var > 0.99);
    }

    #[test]
    fn inference_identity_statistics_pass_input_through() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.3, -0.7, 1.5, 2.0]).unwrap();
        let out = batch_norm_infer_forward(
            &x,
            &ones(2),
            &zeros_t(2),
            &zeros_t(2),
            &ones(2),
            1e-5,
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full(vec![2, 1, 2, 2], 7.25f64);
        let beta = Tensor::full(vec![1], 0.125);
        let (out, _) = batch_norm_train_forward(&x, &ones(1), &beta, 1e-5).unwrap();
        for &v in out.data() {
            assert_eq!(v, 0.125);
        }
    }

    #[test]
    fn singleton_population_rejected_in_training() {
        let x = Tensor::full(vec![1, 3, 1, 1], 1.0f64);
        assert!(matches!(
            batch_norm_train_forward(&x, &ones(3), &zeros_t(3), 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nonpositive_running_variance_rejected() {
        let x = Tensor::full(vec![1, 1, 2, 2], 1.0f64);
        let bad_var = Tensor::full(vec![1], 0.0);
        assert!(matches!(
            batch_norm_infer_forward(&x, &ones(1), &zeros_t(1), &zeros_t(1), &bad_var, 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn running_update_uses_unbiased_variance() {
        let mut rm = Tensor::zeros(vec![1]);
        let mut rv = Tensor::full(vec![1], 1.0f64);
        let stats = BnBatchStats {
            mean: vec![2.0],
            var: vec![4.0],
            eps: 1e-5,
            count: 8,
        };
        update_running_stats(&mut rm, &mut rv, &stats, 0.1);
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        let unbiased = 4.0 * 8.0 / 7.0;
        assert!((rv.data()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
}
