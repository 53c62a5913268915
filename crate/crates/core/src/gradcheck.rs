//! Central-difference verification of the reverse-mode gradients. Runs in
//! 64-bit mode so truncation error, not rounding, dominates the residual.
//! The op suite and the end-to-end loss check live here so integration
//! tests and the acceptance gate share one oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::distill_loss_on_tape;
use crate::encoder::{PhiNetConfig, StudentEncoder};
use crate::error::Result;
use crate::tape::{NodeRef, Tape};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOutcome {
    pub checks: usize,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    fn fold(&mut self, other: CheckOutcome) {
        self.checks += other.checks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Relative error with a floored denominator: near-zero pairs are compared
/// absolutely at the floor's scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks d(loss)/d(param) for every element of every parameter against
/// central differences. `build` must record the same graph whatever
/// parameter values it is handed.
pub fn check_gradients<F>(
    params: &[Tensor<f64>],
    build: &F,
    step: f64,
    tol: f64,
) -> std::result::Result<CheckOutcome, String>
where
    F: Fn(&mut Tape<f64>, &[NodeRef]) -> Result<NodeRef>,
{
    let eval = |values: &[Tensor<f64>]| -> std::result::Result<(Tape<f64>, NodeRef), String> {
        let mut tape = Tape::new();
        let nodes: Vec<NodeRef> =
            values.iter().enumerate().map(|(i, t)| tape.param(t.clone(), i)).collect();
        let loss = build(&mut tape, &nodes).map_err(|e| e.to_string())?;
        Ok((tape, loss))
    };

    let (tape, loss) = eval(params)?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut outcome = CheckOutcome::default();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.data().len() {
            let analytic = grads.get(pi).map(|g| g.data()[ei]).unwrap_or(0.0);
            let mut best_rel = f64::INFINITY;
            // Retry ladder: a perturbation can push some activation across
            // a kink, making the difference one-sided. Shrinking the step
            // resolves those; a wrong analytic gradient never converges.
            for h in [step, step / 10.0, step / 100.0] {
                let orig = p.data()[ei];
                work[pi].data_mut()[ei] = orig + h;
                let (tp, lp) = eval(&work)?;
                let plus = tp.value(lp).scalar_value().map_err(|e| e.to_string())?;
                work[pi].data_mut()[ei] = orig - h;
                let (tm, lm) = eval(&work)?;
                let minus = tm.value(lm).scalar_value().map_err(|e| e.to_string())?;
                work[pi].data_mut()[ei] = orig;

                let numeric = (plus - minus) / (2.0 * h);
                best_rel = best_rel.min(relative_error(analytic, numeric));
                if best_rel <= tol {
                    break;
                }
            }
            if best_rel > tol {
                return Err(format!(
                    "param {pi} element {ei}: analytic {analytic}, \
                     best relative error {best_rel} after step refinement"
                ));
            }
            outcome.checks += 1;
            outcome.max_rel_err = outcome.max_rel_err.max(best_rel);
        }
    }
    Ok(outcome)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape.to_vec(), data, "gradcheck input").unwrap()
}

/// Samples with magnitude in [margin, 1 + margin]: keeps piecewise ops
/// away from their kinks so central differences stay two-sided.
fn rand_tensor_off_kinks(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * (margin + rng.gen::<f64>())
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data, "gradcheck input").unwrap()
}

fn mask_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape)
}

/// Runs every tape operation once with random shapes drawn from `seed`.
/// Each loss is a random projection of the op's output, so per-position
/// sign errors cannot cancel.
pub fn op_suite(seed: u64) -> std::result::Result<CheckOutcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = CheckOutcome::default();

    // conv2d, stride 1 pad 1 and stride 2 pad 0.
    for (stride, pad, h, w) in [(1usize, 1usize, 5usize, 4usize), (2, 0, 6, 5)] {
        let x = rand_tensor(&mut rng, &[2, 3, h, w]);
        let ker = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (w + 2 * pad - 3) / stride + 1;
        let mask = mask_for(&mut rng, &[2, 4, oh, ow]);
        total.fold(check_gradients(
            &[x, ker],
            &|tape, p| {
                let out = tape.conv2d(p[0], p[1], stride, pad)?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // depthwise_conv2d, both strides.
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        let x = rand_tensor(&mut rng, &[2, 4, 5, 5]);
        let ker = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let o = (5 + 2 * pad - 3) / stride + 1;
        let mask = mask_for(&mut rng, &[2, 4, o, o]);
        total.fold(check_gradients(
            &[x, ker],
            &|tape, p| {
                let out = tape.depthwise_conv2d(p[0], p[1], stride, pad)?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // linear.
    {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let wt = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        let mask = mask_for(&mut rng, &[3, 5]);
        total.fold(check_gradients(
            &[x, wt, b],
            &|tape, p| {
                let out = tape.linear(p[0], p[1], p[2])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // batchnorm2d in train mode: gradient flows through the batch
    // statistics as well as the affine parameters.
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 3]);
        let gamma = rand_tensor_off_kinks(&mut rng, &[3], 0.2);
        let beta = rand_tensor(&mut rng, &[3]);
        let mask = mask_for(&mut rng, &[2, 3, 4, 3]);
        total.fold(check_gradients(
            &[x, gamma, beta],
            &|tape, p| {
                let (out, _, _) = tape.batchnorm2d_train(p[0], p[1], p[2], 1e-5)?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // Pointwise activations; relu and hswish sampled away from kinks.
    {
        let x = rand_tensor_off_kinks(&mut rng, &[3, 4], 0.05);
        let mask = mask_for(&mut rng, &[3, 4]);
        total.fold(check_gradients(
            &[x],
            &|tape, p| {
                let out = tape.relu(p[0])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }
    {
        // hswish kinks sit at -3 and 3; [margin, 1 + margin] magnitudes
        // stay clear of both.
        let x = rand_tensor_off_kinks(&mut rng, &[3, 4], 0.05);
        let mask = mask_for(&mut rng, &[3, 4]);
        total.fold(check_gradients(
            &[x],
            &|tape, p| {
                let out = tape.hswish(p[0])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mask = mask_for(&mut rng, &[3, 4]);
        total.fold(check_gradients(
            &[x],
            &|tape, p| {
                let out = tape.sigmoid(p[0])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // global_avg_pool.
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let mask = mask_for(&mut rng, &[2, 3]);
        total.fold(check_gradients(
            &[x],
            &|tape, p| {
                let out = tape.global_avg_pool(p[0])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // add, mul (same shape), mul (channel broadcast).
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let mask = mask_for(&mut rng, &[3, 4]);
        total.fold(check_gradients(
            &[a, b],
            &|tape, p| {
                let out = tape.add(p[0], p[1])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let mask = mask_for(&mut rng, &[3, 4]);
        total.fold(check_gradients(
            &[a, b],
            &|tape, p| {
                let out = tape.mul(p[0], p[1])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let gates = rand_tensor(&mut rng, &[2, 3]);
        let mask = mask_for(&mut rng, &[2, 3, 2, 2]);
        total.fold(check_gradients(
            &[a, gates],
            &|tape, p| {
                let out = tape.mul(p[0], p[1])?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // l2_normalize along both axes. Off-kink sampling keeps row norms
    // comfortably positive.
    for axis in [0usize, 1] {
        let x = rand_tensor_off_kinks(&mut rng, &[3, 5], 0.2);
        let mask = mask_for(&mut rng, &[3, 5]);
        total.fold(check_gradients(
            &[x],
            &|tape, p| {
                let out = tape.l2_normalize(p[0], axis)?;
                let m = tape.input(mask.clone());
                let prod = tape.mul(out, m)?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    // sum and scale on their own.
    {
        let x = rand_tensor(&mut rng, &[4, 3]);
        total.fold(check_gradients(
            &[x],
            &|tape, p| {
                let s = tape.sum(p[0])?;
                tape.scale(s, 1.3)
            },
            STEP,
            TOLERANCE,
        )?);
    }

    Ok(total)
}

/// End-to-end check: the full training graph (batchnorm in train mode,
/// every block, the projection, normalization, and the loss) against
/// central differences, for every one of the tiny network's parameters.
pub fn end_to_end(seed: u64) -> std::result::Result<CheckOutcome, String> {
    let cfg = PhiNetConfig::preset("tiny").map_err(|e| e.to_string())?;
    let mut enc = StudentEncoder::<f64>::new(cfg, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = rand_tensor(&mut rng, &[2, 1, 16, 12]);
    let teacher = {
        let raw = rand_tensor(&mut rng, &[2, enc.latent_dim()]);
        let d = enc.latent_dim();
        let mut data = raw.data().to_vec();
        for row in 0..2 {
            let norm: f64 = data[row * d..(row + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut data[row * d..(row + 1) * d] {
                *v /= norm;
            }
        }
        Tensor::from_vec(vec![2, d], data, "teacher").unwrap()
    };

    let loss_value = |enc: &mut StudentEncoder<f64>| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let s = enc.forward_train(&mut tape, &x, None).map_err(|e| e.to_string())?;
        let l = distill_loss_on_tape(&mut tape, s, teacher.clone()).map_err(|e| e.to_string())?;
        tape.value(l).scalar_value().map_err(|e| e.to_string())
    };

    let grads = {
        let mut tape = Tape::new();
        let s = enc.forward_train(&mut tape, &x, None).map_err(|e| e.to_string())?;
        let l = distill_loss_on_tape(&mut tape, s, teacher.clone()).map_err(|e| e.to_string())?;
        tape.backward(l).map_err(|e| e.to_string())?
    };

    let n_params = enc.num_params();
    let mut outcome = CheckOutcome::default();
    for pi in 0..n_params {
        let len = enc.param_values_mut()[pi].data().len();
        for ei in 0..len {
            let analytic = grads.get(pi).map(|g| g.data()[ei]).unwrap_or(0.0);
            let mut best_rel = f64::INFINITY;
            // Same step-refinement ladder as check_gradients: escapes
            // activations perturbed across a kink.
            for h in [STEP, STEP / 10.0, STEP / 100.0] {
                let orig = enc.param_values_mut()[pi].data()[ei];
                enc.param_values_mut()[pi].data_mut()[ei] = orig + h;
                let plus = loss_value(&mut enc)?;
                enc.param_values_mut()[pi].data_mut()[ei] = orig - h;
                let minus = loss_value(&mut enc)?;
                enc.param_values_mut()[pi].data_mut()[ei] = orig;

                let numeric = (plus - minus) / (2.0 * h);
                best_rel = best_rel.min(relative_error(analytic, numeric));
                if best_rel <= TOLERANCE {
                    break;
                }
            }
            if best_rel > TOLERANCE {
                return Err(format!(
                    "seed {seed} param {pi} element {ei}: analytic {analytic}, \
                     best relative error {best_rel} after step refinement"
                ));
            }
            outcome.checks += 1;
            outcome.max_rel_err = outcome.max_rel_err.max(best_rel);
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_catches_a_wrong_gradient() {
        // A graph whose "loss" uses stop_gradient has analytic gradient
        // zero while the numeric difference is not: the checker must
        // refuse it.
        let x = Tensor::from_vec(vec![2], vec![0.7f64, -0.4], "x").unwrap();
        let y = Tensor::from_vec(vec![2], vec![0.3f64, 0.9], "y").unwrap();
        let err = check_gradients(
            &[x, y],
            &|tape, p| {
                let frozen = tape.stop_gradient(p[0]);
                let prod = tape.mul(frozen, p[1])?;
                tape.sum(prod)
            },
            STEP,
            TOLERANCE,
        )
        .unwrap_err();
        assert!(err.contains("relative error"), "{err}");
    }

    #[test]
    fn relative_error_floors_near_zero_pairs() {
        assert!(relative_error(0.0, 1e-9) < 1e-5);
        assert!(relative_error(1.0, 1.0) == 0.0);
        assert!(relative_error(1.0, 2.0) > 0.4);
    }

    #[test]
    fn one_seed_of_the_op_suite_passes() {
        let out = op_suite(0).unwrap();
        assert!(out.checks > 300, "{}", out.checks);
        assert!(out.max_rel_err < TOLERANCE);
    }

    #[test]
    fn aligned_cosine_loss_has_zero_gradient_at_its_maximum() {
        // loss = -dot(l2_normalize(s), sg(t)) with s parallel to t: the
        // cosine is at its maximum, so the gradient must vanish.
        let t = {
            let v = [0.6f64, -0.3, 0.5, 0.4];
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let data: Vec<f64> = v.iter().map(|x| x / norm).collect();
            Tensor::from_vec(vec![1, 4], data, "t").unwrap()
        };
        let s = {
            // Same direction, different length.
            let data: Vec<f64> = t.data().iter().map(|x| x * 2.5).collect();
            Tensor::from_vec(vec![1, 4], data, "s").unwrap()
        };
        let mut tape = Tape::new();
        let sp = tape.param(s, 0);
        let loss = distill_loss_on_tape(&mut tape, sp, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(0).unwrap();
        for &v in g.data() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }
}
