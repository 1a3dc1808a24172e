//! Angular regression loss for direction maps and the class-weighted
//! binary cross-entropy over energy bins.

use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

/// Bound on `-<u_gt, u_pred>` where the arccos derivative is evaluated.
pub const COS_CLAMP: f64 = 1.0 - 1e-6;
/// Lower bound for log arguments.
pub const LOG_FLOOR: f64 = 1e-12;
/// Allowed deviation of a target vector's norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-4;

fn check_layout<T: Real>(what: &str, t: &Tensor<T>, n: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if t.shape() != [n, c, h, w] {
        return Err(NnError::Input(format!(
            "{what} has shape {:?}, expected {:?}",
            t.shape(),
            [n, c, h, w]
        )));
    }
    Ok(())
}

fn check_mask(mask: &[bool], n: usize, p: usize) -> Result<()> {
    if mask.len() != n * p {
        return Err(NnError::Input(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            n * p
        )));
    }
    Ok(())
}

/// `sum_{p in mask} w_p * theta_p^2` where `theta_p` is the angle between
/// `pred` and `target` at `p`. Both are `(n, 2, h, w)` maps; `weights` is
/// `(n, 1, h, w)`. Returns the loss and its gradient with respect to `pred`.
pub fn angular_mse_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: &Tensor<T>,
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let [n, c, h, w] = pred.shape();
    if c != 2 {
        return Err(NnError::Input(format!("direction map needs 2 channels, got {c}")));
    }
    check_layout("target", target, n, 2, h, w)?;
    check_layout("weights", weights, n, 1, h, w)?;
    let p = h * w;
    check_mask(mask, n, p)?;

    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for s in 0..n {
        let ps = pred.sample(s);
        let ts = target.sample(s);
        let ws = weights.sample(s);
        let ms = &mask[s * p..(s + 1) * p];
        let gs = grad.sample_mut(s);
        for i in 0..p {
            if !ms[i] {
                continue;
            }
            let (ty, tx) = (ts[i].f64(), ts[p + i].f64());
            let norm = (ty * ty + tx * tx).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(NnError::Input(format!(
                    "target vector at sample {s}, pixel {i} has norm {norm}"
                )));
            }
            let wp = ws[i].f64();
            let cos = ty * ps[i].f64() + tx * ps[p + i].f64();
            let theta = cos.clamp(-1.0, 1.0).acos();
            loss += wp * theta * theta;
            let dcos = -2.0 * wp * theta_over_sin(theta);
            gs[i] = T::of(dcos * ty);
            gs[p + i] = T::of(dcos * tx);
        }
    }
    Ok((T::of(loss), grad))
}

// d(theta^2)/d(cos) = -2 theta / sin(theta). The ratio tends to 1 at
// theta = 0; near theta = pi the sine is floored at its value for
// cos = -COS_CLAMP.
fn theta_over_sin(theta: f64) -> f64 {
    if theta < 1e-6 {
        return 1.0;
    }
    let s = theta.sin();
    if theta > std::f64::consts::FRAC_PI_2 {
        theta / s.max((1.0 - COS_CLAMP * COS_CLAMP).sqrt())
    } else {
        theta / s
    }
}

/// Default per-bin coefficients, largest for the lowest bin:
/// `c_b = 1 + (k - 1 - b) / k` for zero-based bin `b`.
pub fn default_class_coeffs(k: usize) -> Vec<f64> {
    (0..k).map(|b| 1.0 + (k - 1 - b) as f64 / k as f64).collect()
}

/// `-sum_{p in mask} sum_k w_p c_k [t log y + (1 - t) log(1 - y)]` over the
/// softmax output `probs` of shape `(n, k, h, w)`, with one-hot targets
/// given by `target_bins` (`n * h * w` entries). Returns the loss and its
/// gradient with respect to the softmax logits.
pub fn weighted_xent_loss<T: Real>(
    probs: &Tensor<T>,
    target_bins: &[u32],
    weights: &Tensor<T>,
    class_coeffs: &[f64],
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let [n, k, h, w] = probs.shape();
    if k != class_coeffs.len() {
        return Err(NnError::Input(format!(
            "prediction has {k} channels but {} class coefficients were given",
            class_coeffs.len()
        )));
    }
    check_layout("weights", weights, n, 1, h, w)?;
    let p = h * w;
    check_mask(mask, n, p)?;
    if target_bins.len() != n * p {
        return Err(NnError::Input(format!(
            "target has {} entries, expected {}",
            target_bins.len(),
            n * p
        )));
    }

    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(probs.shape());
    let mut y = vec![0.0f64; k];
    let mut b = vec![0.0f64; k];
    for s in 0..n {
        let ys = probs.sample(s);
        let ws = weights.sample(s);
        let gs = grad.sample_mut(s);
        for i in 0..p {
            if !mask[s * p + i] {
                continue;
            }
            let t = target_bins[s * p + i] as usize;
            if t >= k {
                return Err(NnError::Input(format!(
                    "target bin {t} outside 0..{k} at sample {s}, pixel {i}"
                )));
            }
            let wp = ws[i].f64();
            for c in 0..k {
                y[c] = ys[c * p + i].f64();
            }
            // b_c = y_c * dL/dy_c; softmax Jacobian gives dz_j = b_j - y_j sum_c b_c.
            for c in 0..k {
                let wc = wp * class_coeffs[c];
                if c == t {
                    loss -= wc * y[c].max(LOG_FLOOR).ln();
                    b[c] = -wc;
                } else {
                    let q = (1.0 - y[c]).max(LOG_FLOOR);
                    loss -= wc * q.ln();
                    b[c] = wc * y[c] / q;
                }
            }
            let total: f64 = b.iter().sum();
            for j in 0..k {
                let rest = total - b[j];
                let own = if j == t {
                    b[j] * (1.0 - y[j])
                } else {
                    wp * class_coeffs[j] * y[j]
                };
                gs[j * p + i] = T::of(own - y[j] * rest);
            }
        }
    }
    Ok((T::of(loss), grad))
}
