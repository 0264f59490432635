//! Cross-entropy losses, fused with softmax via log-sum-exp.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean (optionally class-weighted) cross-entropy of `N x K` logits against
/// class indices. Returns the scalar loss and the softmax probabilities the
/// backward pass reuses.
pub fn cross_entropy_forward<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
    class_weights: Option<&[E]>,
) -> Result<(E, Tensor<E>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(Error::Shape(format!(
                "cross_entropy: {k} classes vs {} weights",
                w.len()
            )));
        }
    }
    let mut probs = Tensor::zeros(vec![n, k]);
    let mut total = E::zero();
    let mut weight_sum = E::zero();
    for r in 0..n {
        let y = labels[r];
        if y >= k {
            return Err(Error::Config(format!(
                "cross_entropy: label {y} out of range for {k} classes (row {r})"
            )));
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut denom = E::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        let w = class_weights.map_or(E::one(), |cw| cw[y]);
        total += w * (lse - row[y]);
        weight_sum += w;
        let dst = &mut probs.data_mut()[r * k..(r + 1) * k];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp() / denom;
        }
    }
    Ok((total / weight_sum, probs))
}

/// `d logits = g * w_y * (softmax - onehot) / sum(w_y)`.
pub fn cross_entropy_backward<E: Element>(
    gout: E,
    probs: &Tensor<E>,
    labels: &[usize],
    class_weights: Option<&[E]>,
) -> Result<Tensor<E>> {
    let (n, k) = probs.dims2()?;
    let mut weight_sum = E::zero();
    for &y in labels {
        weight_sum += class_weights.map_or(E::one(), |cw| cw[y]);
    }
    let mut dx = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        let y = labels[r];
        let w = class_weights.map_or(E::one(), |cw| cw[y]);
        let scale = gout * w / weight_sum;
        let src = &probs.data()[r * k..(r + 1) * k];
        let dst = &mut dx.data_mut()[r * k..(r + 1) * k];
        for (c, (d, &p)) in dst.iter_mut().zip(src).enumerate() {
            let onehot = if c == y { E::one() } else { E::zero() };
            *d = scale * (p - onehot);
        }
    }
    Ok(dx)
}

/// Per-pixel cross-entropy over NCHW logits against per-pixel class
/// indices (row-major over batch, then rows, then columns), averaged over
/// every pixel of every image.
pub fn cross_entropy_spatial_forward<E: Element>(
    logits: &Tensor<E>,
    targets: &[usize],
) -> Result<(E, Tensor<E>)> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::Shape(format!(
            "spatial cross_entropy: {} pixels vs {} targets",
            n * hw,
            targets.len()
        )));
    }
    let mut probs = Tensor::zeros(logits.shape().to_vec());
    let mut total = E::zero();
    let mut row = vec![E::zero(); c];
    for batch in 0..n {
        for i in 0..hw {
            let y = targets[batch * hw + i];
            if y >= c {
                return Err(Error::Config(format!(
                    "spatial cross_entropy: target {y} out of range for {c} channels"
                )));
            }
            for ch in 0..c {
                row[ch] = logits.data()[(batch * c + ch) * hw + i];
            }
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut denom = E::zero();
            for &v in &row {
                denom += (v - max).exp();
            }
            total += max + denom.ln() - row[y];
            for ch in 0..c {
                probs.data_mut()[(batch * c + ch) * hw + i] = (row[ch] - max).exp() / denom;
            }
        }
    }
    Ok((total / E::from_f64((n * hw) as f64), probs))
}

pub fn cross_entropy_spatial_backward<E: Element>(
    gout: E,
    probs: &Tensor<E>,
    targets: &[usize],
) -> Result<Tensor<E>> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let scale = gout / E::from_f64((n * hw) as f64);
    let mut dx = Tensor::zeros(probs.shape().to_vec());
    for batch in 0..n {
        for i in 0..hw {
            let y = targets[batch * hw + i];
            for ch in 0..c {
                let idx = (batch * c + ch) * hw + i;
                let onehot = if ch == y { E::one() } else { E::zero() };
                dx.data_mut()[idx] = scale * (probs.data()[idx] - onehot);
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Tensor::zeros(vec![1, 3]);
        let (loss, _) = cross_entropy_forward::<f64>(&logits, &[0], None).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_cost_near_zero() {
        let logits = Tensor::new(vec![1, 3], vec![50.0f64, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_forward(&logits, &[0], None).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn matches_log_sum_exp_evaluation() {
        // logits [1,2,3], label 2: lse = ln(e^1+e^2+e^3), loss = lse - 3
        let logits = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let (loss, _) = cross_entropy_forward(&logits, &[2], None).unwrap();
        let want = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln() - 3.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            cross_entropy_forward::<f64>(&logits, &[0, 3], None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn class_weights_reweight_rows() {
        let logits = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 2.0]).unwrap();
        let (unweighted, _) = cross_entropy_forward(&logits, &[0, 1], None).unwrap();
        let (weighted, _) =
            cross_entropy_forward(&logits, &[0, 1], Some(&[1.0, 1.0])).unwrap();
        assert!((unweighted - weighted).abs() < 1e-12);
        let (tilted, _) =
            cross_entropy_forward(&logits, &[0, 1], Some(&[3.0, 1.0])).unwrap();
        let l0 = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        let l1 = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        assert!((tilted - (3.0 * l0 + l1) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_loss_averages_pixels() {
        let logits = Tensor::zeros(vec![1, 2, 2, 2]);
        let (loss, _) =
            cross_entropy_spatial_forward::<f64>(&logits, &[0, 1, 0, 1]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }
}
