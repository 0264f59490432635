//! Named gradient checks for every differentiable layer, runnable from the
//! CLI (`gradcheck`) and the test suite. All checks run in 64-bit with
//! central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, VarId};
use crate::error::Result;
use crate::ops::flip::FlipKind;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Central-difference step used throughout.
pub const GRAD_STEP: f64 = 1e-5;
/// A check passes when its max relative error stays below this.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn rng_for(case: &str) -> ChaCha8Rng {
    derive_rng(0x6c65_7369, "gradcheck", fxhash(case))
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so ReLU probes never cross the kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.gen_range(min_abs..1.5);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Project a tensor output to a scalar with a fixed random weighting, so
/// every output element contributes to the checked loss.
fn project(tape: &mut Tape<f64>, out: VarId, rng: &mut ChaCha8Rng) -> Result<VarId> {
    let weights = Tensor::from_fn(tape.value(out).shape().to_vec(), |_| rng.gen_range(0.3..1.7));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Run the whole layer suite. Deterministic: fixed seeds, fixed shapes.
pub fn run_suite() -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();

    {
        let mut rng = rng_for("linear");
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[5], -0.5, 0.5);
        let prng = rng_for("linear/proj");
        let err = grad_check(&[x, w, b], GRAD_STEP, |tape, ids| {
            let out = tape.linear(ids[0], ids[1], Some(ids[2]))?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "linear",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("conv2d");
        let x = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -0.6, 0.6);
        let b = uniform(&mut rng, &[4], -0.5, 0.5);
        let prng = rng_for("conv2d/proj");
        let err = grad_check(&[x, w, b], GRAD_STEP, |tape, ids| {
            let out = tape.conv2d(ids[0], ids[1], Some(ids[2]), (1, 1), (1, 1))?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "conv2d (3x3, stride 1, pad 1)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("conv2d/s2");
        let x = uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 3, 3], -0.6, 0.6);
        let prng = rng_for("conv2d/s2/proj");
        let err = grad_check(&[x, w], GRAD_STEP, |tape, ids| {
            let out = tape.conv2d(ids[0], ids[1], None, (2, 2), (1, 1))?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "conv2d (3x3, stride 2)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("tconv");
        let x = uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 2, 2], -0.6, 0.6);
        let b = uniform(&mut rng, &[2], -0.5, 0.5);
        let prng = rng_for("tconv/proj");
        let err = grad_check(&[x, w, b], GRAD_STEP, |tape, ids| {
            let out = tape.conv2d_transpose(ids[0], ids[1], Some(ids[2]), (2, 2), (0, 0))?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "transposed_conv2d (2x2, stride 2)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("bn/train");
        let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[3], 0.6, 1.4);
        let beta = uniform(&mut rng, &[3], -0.4, 0.4);
        let prng = rng_for("bn/train/proj");
        let err = grad_check(&[x, gamma, beta], GRAD_STEP, |tape, ids| {
            let (out, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "batch_norm (training mode)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("bn/infer");
        let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[3], 0.6, 1.4);
        let beta = uniform(&mut rng, &[3], -0.4, 0.4);
        let rm = uniform(&mut rng, &[3], -0.3, 0.3);
        let rv = uniform(&mut rng, &[3], 0.5, 1.5);
        let prng = rng_for("bn/infer/proj");
        let err = grad_check(&[x, gamma, beta], GRAD_STEP, move |tape, ids| {
            let out =
                tape.batch_norm_infer(ids[0], ids[1], ids[2], rm.clone(), rv.clone(), 1e-5)?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "batch_norm (inference mode)",
            max_rel_err: err,
        });
    }

    {
        // Inputs bounded away from the kink: |x| > 10 * step.
        let mut rng = rng_for("relu");
        let x = away_from_zero(&mut rng, &[3, 7], 10.0 * GRAD_STEP * 10.0);
        let prng = rng_for("relu/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.relu(ids[0]);
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "relu (probed away from 0)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("sigmoid");
        let x = uniform(&mut rng, &[2, 5], -2.0, 2.0);
        let prng = rng_for("sigmoid/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.sigmoid(ids[0]);
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "sigmoid",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("softmax");
        let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let prng = rng_for("softmax/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.softmax_rows(ids[0])?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "softmax",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("ce");
        let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            tape.cross_entropy(ids[0], &[0, 2, 1, 2], None)
        })?;
        cases.push(GradCheckCase {
            name: "softmax + cross_entropy",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("ce/weighted");
        let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            tape.cross_entropy(ids[0], &[0, 2, 1, 2], Some(&[2.0, 1.0, 0.5]))
        })?;
        cases.push(GradCheckCase {
            name: "weighted cross_entropy",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("ce/spatial");
        let x = uniform(&mut rng, &[2, 2, 3, 3], -2.0, 2.0);
        let targets: Vec<usize> = (0..18).map(|i| i % 2).collect();
        let err = grad_check(&[x], GRAD_STEP, move |tape, ids| {
            tape.cross_entropy_spatial(ids[0], &targets)
        })?;
        cases.push(GradCheckCase {
            name: "per-pixel cross_entropy",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("maxpool");
        // Distinct, well-separated values keep the argmax stable under probes.
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(vec![1, 2, 4, 4], vals).unwrap();
        let prng = rng_for("maxpool/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.max_pool2d(ids[0], (2, 2), (2, 2))?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "max_pool2d",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("gap");
        let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let prng = rng_for("gap/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.global_avg_pool(ids[0])?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "global_avg_pool",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("resize/up");
        let x = uniform(&mut rng, &[1, 2, 3, 4], -1.0, 1.0);
        let prng = rng_for("resize/up/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.bilinear_resize(ids[0], 7, 9)?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "bilinear_resize (upsample)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("resize/down");
        let x = uniform(&mut rng, &[1, 2, 6, 5], -1.0, 1.0);
        let prng = rng_for("resize/down/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.bilinear_resize(ids[0], 3, 3)?;
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "bilinear_resize (downsample)",
            max_rel_err: err,
        });
    }

    {
        let mut rng = rng_for("flip");
        let x = uniform(&mut rng, &[1, 2, 3, 4], -1.0, 1.0);
        let prng = rng_for("flip/proj");
        let err = grad_check(&[x], GRAD_STEP, |tape, ids| {
            let out = tape.flip(ids[0], FlipKind::Both);
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "flip",
            max_rel_err: err,
        });
    }

    {
        // Basic residual block: conv-bn-relu-conv-bn, add identity
        // shortcut, final relu. Same composition the network builder emits.
        let mut rng = rng_for("resblock");
        let x = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w1 = uniform(&mut rng, &[3, 3, 3, 3], -0.5, 0.5);
        let g1 = uniform(&mut rng, &[3], 0.7, 1.3);
        let b1 = uniform(&mut rng, &[3], -0.3, 0.3);
        let w2 = uniform(&mut rng, &[3, 3, 3, 3], -0.5, 0.5);
        let g2 = uniform(&mut rng, &[3], 0.7, 1.3);
        let b2 = uniform(&mut rng, &[3], -0.3, 0.3);
        let prng = rng_for("resblock/proj");
        let err = grad_check(&[x, w1, g1, b1, w2, g2, b2], GRAD_STEP, |tape, ids| {
            let c1 = tape.conv2d(ids[0], ids[1], None, (1, 1), (1, 1))?;
            let (n1, _) = tape.batch_norm_train(c1, ids[2], ids[3], 1e-5)?;
            let r1 = tape.relu(n1);
            let c2 = tape.conv2d(r1, ids[4], None, (1, 1), (1, 1))?;
            let (n2, _) = tape.batch_norm_train(c2, ids[5], ids[6], 1e-5)?;
            let added = tape.add(n2, ids[0])?;
            let out = tape.relu(added);
            project(tape, out, &mut prng.clone())
        })?;
        cases.push(GradCheckCase {
            name: "residual block (conv-bn-relu-conv-bn + shortcut)",
            max_rel_err: err,
        });
    }

    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_tolerance() {
        let cases = run_suite().unwrap();
        assert!(cases.len() >= 15);
        for case in &cases {
            assert!(
                case.passed(),
                "{}: max relative error {} >= {}",
                case.name,
                case.max_rel_err,
                GRAD_TOLERANCE
            );
        }
    }
}
