//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Model, Param};
use crate::loss::{angular_mse_loss, weighted_xent_loss};
use crate::models::Cascade;
use crate::tensor::Tensor;

/// Absolute part of the relative-error denominator, scaled by `max(1, |loss|)`.
/// Summation round-off in the loss limits central differences at
/// `eps = 1e-5` to roughly `1e-9 * |loss|` absolute, so smaller gradients
/// cannot be compared meaningfully.
pub const REL_FLOOR: f64 = 1e-5;

// Losses are averaged over the masked pixels, as in training.
fn per_pixel(mask: &[bool]) -> f64 {
    1.0 / mask.iter().filter(|&&m| m).count().max(1) as f64
}

/// Scalar objective applied to a model output. The two losses are averaged
/// over the masked pixels.
#[derive(Clone, Debug)]
pub enum Objective {
    /// `sum(r * out)` for a fixed random projection `r`.
    Linear(Tensor<f64>),
    Angular {
        target: Tensor<f64>,
        weights: Tensor<f64>,
        mask: Vec<bool>,
    },
    /// Requires a softmax output; the gradient enters at the logits.
    Xent {
        bins: Vec<u32>,
        weights: Tensor<f64>,
        coeffs: Vec<f64>,
        mask: Vec<bool>,
    },
}

/// Where the gradient returned by [`Objective::eval`] attaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradAt {
    Output,
    Logits,
}

impl Objective {
    pub fn eval(&self, out: &Tensor<f64>) -> Result<(f64, Tensor<f64>, GradAt)> {
        match self {
            Objective::Linear(r) => {
                if r.shape() != out.shape() {
                    return Err(NnError::Input("projection shape differs from output".into()));
                }
                let l = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
                Ok((l, r.clone(), GradAt::Output))
            }
            Objective::Angular { target, weights, mask } => {
                let (l, mut g) = angular_mse_loss(out, target, weights, mask)?;
                let s = per_pixel(mask);
                g.scale(s);
                Ok((l * s, g, GradAt::Output))
            }
            Objective::Xent {
                bins,
                weights,
                coeffs,
                mask,
            } => {
                let (l, mut g) = weighted_xent_loss(out, bins, weights, coeffs, mask)?;
                let s = per_pixel(mask);
                g.scale(s);
                Ok((l * s, g, GradAt::Logits))
            }
        }
    }

    /// Random objective of the given kind matching `shape`, for tests.
    pub fn random_linear(shape: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Objective::Linear(Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ))
    }
}

/// Something whose scalar loss and gradients can be checked.
pub trait Checkable {
    fn loss(&mut self, input: &Tensor<f64>) -> Result<f64>;
    /// Loss plus input gradient; parameter gradients are left in place.
    fn loss_and_grad(&mut self, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)>;
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
    /// Fingerprint of the ReLU on/off pattern of the last evaluation.
    fn kink_signature(&self) -> u64;
}

/// A model paired with the objective applied to its output.
pub struct WithObjective<'a> {
    pub model: &'a mut Model<f64>,
    pub objective: &'a Objective,
}

impl Checkable for WithObjective<'_> {
    fn loss(&mut self, input: &Tensor<f64>) -> Result<f64> {
        let out = self.model.forward(input)?;
        Ok(self.objective.eval(&out)?.0)
    }

    fn loss_and_grad(&mut self, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let out = self.model.forward(input)?;
        let (l, g, at) = self.objective.eval(&out)?;
        let gi = match at {
            GradAt::Output => self.model.backward(&g)?,
            GradAt::Logits => self.model.backward_logits(&g)?,
        };
        Ok((l, gi))
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.model.params_mut()
    }

    fn kink_signature(&self) -> u64 {
        self.model.relu_signature()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the worst coordinate, e.g. `param 3[17]` or `input[5]`.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because the `+-eps` evaluations crossed a ReLU kink.
    pub skipped: usize,
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

enum Coord {
    Param(usize, usize),
    Input(usize),
}

/// Compares analytic gradients of `target` at `input` against central
/// differences with step `eps`. Up to `per_tensor` coordinates of every
/// parameter tensor and of the input are sampled with `seed`. Coordinates
/// whose perturbation changes any ReLU on/off state are skipped, since the
/// difference quotient then straddles a kink.
pub fn grad_check(
    target: &mut dyn Checkable,
    input: &Tensor<f64>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (loss, input_grad) = target.loss_and_grad(input)?;
    let base_sig = target.kink_signature();
    let floor = REL_FLOOR * loss.abs().max(1.0);
    let analytic: Vec<Vec<f64>> = target
        .params_mut()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut coords = Vec::new();
    for (pi, grads) in analytic.iter().enumerate() {
        for idx in sample_indices(&mut rng, grads.len(), per_tensor) {
            coords.push(Coord::Param(pi, idx));
        }
    }
    for idx in sample_indices(&mut rng, input.len(), per_tensor) {
        coords.push(Coord::Input(idx));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut x = input.clone();
    for coord in coords {
        let mut eval = |target: &mut dyn Checkable, delta: f64| -> Result<(f64, u64)> {
            match coord {
                Coord::Param(pi, idx) => {
                    let orig = target.params_mut()[pi].value.data()[idx];
                    target.params_mut()[pi].value.data_mut()[idx] = orig + delta;
                    let l = target.loss(&x);
                    target.params_mut()[pi].value.data_mut()[idx] = orig;
                    Ok((l?, target.kink_signature()))
                }
                Coord::Input(idx) => {
                    let orig = x.data()[idx];
                    x.data_mut()[idx] = orig + delta;
                    let l = target.loss(&x);
                    x.data_mut()[idx] = orig;
                    Ok((l?, target.kink_signature()))
                }
            }
        };
        let (lp, sp) = eval(target, eps)?;
        let (lm, sm) = eval(target, -eps)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let (a, what) = match coord {
            Coord::Param(pi, idx) => (analytic[pi][idx], format!("param {pi}[{idx}]")),
            Coord::Input(idx) => (input_grad.data()[idx], format!("input[{idx}]")),
        };
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = what;
        }
    }
    // Leave caches at the unperturbed point.
    target.loss(input)?;
    Ok(report)
}

/// The cascade with the weighted cross-entropy on its output.
pub struct CascadeXent<'a> {
    pub cascade: &'a mut Cascade<f64>,
    pub mask: Vec<bool>,
    pub bins: Vec<u32>,
    pub weights: Tensor<f64>,
    pub coeffs: Vec<f64>,
}

impl Checkable for CascadeXent<'_> {
    fn loss(&mut self, input: &Tensor<f64>) -> Result<f64> {
        let (_, probs) = self.cascade.forward(input, &self.mask)?;
        let l = weighted_xent_loss(&probs, &self.bins, &self.weights, &self.coeffs, &self.mask)?.0;
        Ok(l * per_pixel(&self.mask))
    }

    fn loss_and_grad(&mut self, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let (_, probs) = self.cascade.forward(input, &self.mask)?;
        let (l, mut g) = weighted_xent_loss(&probs, &self.bins, &self.weights, &self.coeffs, &self.mask)?;
        let s = per_pixel(&self.mask);
        g.scale(s);
        Ok((l * s, self.cascade.backward_logits(&g)?))
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut v = self.cascade.dn.params_mut();
        v.extend(self.cascade.wtn.params_mut());
        v
    }

    fn kink_signature(&self) -> u64 {
        self.cascade.dn.relu_signature() ^ self.cascade.wtn.relu_signature().rotate_left(1)
    }
}

/// Step used by [`standard_suite`].
pub const SUITE_EPS: f64 = 1e-5;
/// Coordinates sampled per tensor by [`standard_suite`].
pub const SUITE_PER_TENSOR: usize = 8;

struct CaseRng(ChaCha8Rng);

impl CaseRng {
    fn tensor(&mut self, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| self.0.random_range(-1.0..1.0)).collect())
    }

    fn unit_field(&mut self, n: usize, h: usize, w: usize) -> Tensor<f64> {
        let p = h * w;
        let mut t = Tensor::zeros([n, 2, h, w]);
        for s in 0..n {
            let d = t.sample_mut(s);
            for i in 0..p {
                let a: f64 = self.0.random_range(0.0..std::f64::consts::TAU);
                d[i] = a.sin();
                d[p + i] = a.cos();
            }
        }
        t
    }

    fn weights(&mut self, n: usize, h: usize, w: usize) -> Tensor<f64> {
        let len = n * h * w;
        Tensor::from_vec([n, 1, h, w], (0..len).map(|_| self.0.random_range(0.2..2.0)).collect())
    }

    fn mask(&mut self, len: usize) -> Vec<bool> {
        (0..len).map(|_| self.0.random_range(0.0..1.0) < 0.8).collect()
    }

    fn bins(&mut self, len: usize, k: usize) -> Vec<u32> {
        (0..len).map(|_| self.0.random_range(0..k as u32)).collect()
    }
}

/// Rotates target vectors that are nearly opposite to `pred` by a quarter
/// turn. The angular loss is deliberately non-smooth at the antipode (the
/// arccos derivative is clamped there), so finite differences are only
/// meaningful away from it.
fn keep_off_antipodes(target: &mut Tensor<f64>, pred: &Tensor<f64>) {
    let p = pred.plane();
    for s in 0..pred.batch() {
        let ps = pred.sample(s).to_vec();
        let ts = target.sample_mut(s);
        for i in 0..p {
            let n = ps[i].hypot(ps[p + i]).max(1e-300);
            let cos = (ts[i] * ps[i] + ts[p + i] * ps[p + i]) / n;
            if cos < -0.999 {
                let (y, x) = (ts[i], ts[p + i]);
                ts[i] = -x;
                ts[p + i] = y;
            }
        }
    }
}

/// Smallest norm allowed at a unit_normalize input. Closer to the origin the
/// normalization is so curved that a step of `eps` is no longer small.
pub const MIN_NORMALIZE_NORM: f64 = 0.05;

fn well_conditioned(model: &Model<f64>) -> bool {
    model
        .min_normalize_input_norm()
        .is_none_or(|r| r >= MIN_NORMALIZE_NORM)
}

// Xavier weights plus small random biases, redrawn until the point is away
// from the normalization singularity.
fn init_generic(model: &mut Model<f64>, input: &Tensor<f64>, rng: &mut CaseRng, seed: u64) -> Result<()> {
    for attempt in 0..64u64 {
        crate::optim::init_model(model, seed.wrapping_add(attempt * 0x9e37_79b9));
        for c in model.convs_mut() {
            for b in c.bias.value.data_mut() {
                *b = rng.0.random_range(-0.1..0.1);
            }
        }
        model.forward(input)?;
        if well_conditioned(model) {
            return Ok(());
        }
    }
    Err(NnError::State("no well-conditioned initialization found".into()))
}

fn check_model(
    mut model: Model<f64>,
    input: &Tensor<f64>,
    objective: Option<Objective>,
    rng: &mut CaseRng,
    seed: u64,
) -> Result<GradCheckReport> {
    init_generic(&mut model, input, rng, seed)?;
    let objective = match objective {
        Some(Objective::Angular { mut target, weights, mask }) => {
            let out = model.forward(input)?;
            keep_off_antipodes(&mut target, &out);
            Objective::Angular { target, weights, mask }
        }
        Some(o) => o,
        None => {
            let out = model.forward(input)?;
            Objective::random_linear(out.shape(), seed ^ 0x5eed)
        }
    };
    let mut target = WithObjective {
        model: &mut model,
        objective: &objective,
    };
    grad_check(&mut target, input, SUITE_EPS, SUITE_PER_TENSOR, seed)
}

/// Gradient checks of every layer kind, both losses, both networks and the
/// cascade on small random inputs. Returns `(case name, report)` pairs.
pub fn standard_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::graph::Layer;
    use crate::models::{build_dn, build_wtn, DnConfig, WtnConfig};

    let mut rng = CaseRng(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let x2 = rng.tensor([2, 2, 4, 4]);

    let mut m = Model::new(2);
    m.conv("conv5", 0, 5, 2, 3)?;
    out.push(("conv5x5".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    m.conv("conv1", 0, 1, 2, 3)?;
    out.push(("conv1x1".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    let c = m.conv("conv", 0, 1, 2, 3)?;
    m.add("relu", Layer::Relu, &[c])?;
    out.push(("relu".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    m.add("pool", Layer::AvgPool2, &[0])?;
    out.push(("avgpool2".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    m.add("up", Layer::Upsample2, &[0])?;
    out.push(("upsample2".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    let p = m.add("pool", Layer::AvgPool2, &[0])?;
    let p = m.add("pool2", Layer::AvgPool2, &[p])?;
    m.add("up", Layer::UpsampleTo, &[p, 0])?;
    out.push(("upsample_to".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    let p = m.add("pool", Layer::AvgPool2, &[0])?;
    m.add("up", Layer::BilinearTo, &[p, 0])?;
    out.push(("bilinear_to".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    let a = m.conv("a", 0, 1, 2, 2)?;
    let b = m.conv("b", 0, 5, 2, 1)?;
    m.add("cat", Layer::Concat, &[a, b, 0])?;
    out.push(("concat".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    let c = m.conv("conv", 0, 1, 2, 2)?;
    m.add("norm", Layer::UnitNormalize, &[c])?;
    out.push(("unit_normalize".into(), check_model(m, &x2, None, &mut rng, seed)?));

    let xk = rng.tensor([2, 5, 4, 4]);
    let mut m = Model::new(5);
    m.add("softmax", Layer::Softmax, &[0])?;
    out.push(("softmax".into(), check_model(m, &xk, None, &mut rng, seed)?));

    let mut m = Model::new(2);
    let c = m.conv("conv", 0, 5, 2, 2)?;
    m.add("norm", Layer::UnitNormalize, &[c])?;
    let obj = Objective::Angular {
        target: rng.unit_field(2, 4, 4),
        weights: rng.weights(2, 4, 4),
        mask: rng.mask(32),
    };
    out.push(("angular_mse_loss".into(), check_model(m, &x2, Some(obj), &mut rng, seed)?));

    let mut m = Model::new(2);
    let c = m.conv("conv", 0, 5, 2, 5)?;
    m.add("softmax", Layer::Softmax, &[c])?;
    let obj = Objective::Xent {
        bins: rng.bins(32, 5),
        weights: rng.weights(2, 4, 4),
        coeffs: crate::loss::default_class_coeffs(5),
        mask: rng.mask(32),
    };
    out.push(("weighted_xent_loss".into(), check_model(m, &x2, Some(obj), &mut rng, seed)?));

    let (h, w) = (8, 8);
    let x4 = rng.tensor([1, 4, h, w]);
    let dn_cfg = DnConfig {
        widths: [4, 4, 4],
        head_width: 3,
        fuse_width: 4,
    };
    let wtn_cfg = WtnConfig {
        widths: [4, 4],
        fc_width: 4,
        k: 16,
    };
    let obj = Objective::Angular {
        target: rng.unit_field(1, h, w),
        weights: rng.weights(1, h, w),
        mask: rng.mask(h * w),
    };
    out.push((
        "direction_network".into(),
        check_model(build_dn(&dn_cfg), &x4, Some(obj), &mut rng, seed)?,
    ));

    let dirs = rng.unit_field(1, h, w);
    let obj = Objective::Xent {
        bins: rng.bins(h * w, 16),
        weights: rng.weights(1, h, w),
        coeffs: crate::loss::default_class_coeffs(16),
        mask: rng.mask(h * w),
    };
    out.push((
        "watershed_network".into(),
        check_model(build_wtn(&wtn_cfg), &dirs, Some(obj), &mut rng, seed)?,
    ));

    let mut dn = build_dn(&dn_cfg);
    let mut wtn = build_wtn(&wtn_cfg);
    init_generic(&mut dn, &x4, &mut rng, seed)?;
    crate::optim::init_model(&mut wtn, seed.wrapping_add(1));
    let mut cascade = Cascade::new(dn, wtn)?;
    let mut target = CascadeXent {
        cascade: &mut cascade,
        mask: rng.mask(h * w),
        bins: rng.bins(h * w, 16),
        weights: rng.weights(1, h, w),
        coeffs: crate::loss::default_class_coeffs(16),
    };
    out.push((
        "cascade".into(),
        grad_check(&mut target, &x4, SUITE_EPS, SUITE_PER_TENSOR, seed)?,
    ));
    Ok(out)
}
