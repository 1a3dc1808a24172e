//! Direction network, watershed transform network, their cascade, and the
//! gated four-channel input encoding.

use dwt_core::targets::{BinSpec, TargetBundle};
use dwt_core::grid::ensure_same_dims;
use dwt_core::{LabelMap, Rgb8Image, VectorField};

use crate::error::{NnError, Result};
use crate::graph::{Layer, Model, NodeId};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DnConfig {
    /// Encoder block widths at 1/2, 1/4 and 1/8 scale.
    pub widths: [usize; 3],
    /// Width of each aggregation head.
    pub head_width: usize,
    /// Width of the first two fusion 1x1 convolutions.
    pub fuse_width: usize,
}

impl Default for DnConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 32],
            head_width: 32,
            fuse_width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WtnConfig {
    pub widths: [usize; 2],
    pub fc_width: usize,
    /// Number of energy bins.
    pub k: usize,
}

impl Default for WtnConfig {
    fn default() -> Self {
        Self {
            widths: [32, 32],
            fc_width: 32,
            k: 16,
        }
    }
}

/// Names of the last layer of each DN aggregation head, finest scale first.
pub const DN_HEADS: [&str; 3] = ["head1_out", "head2_out", "head3_out"];

pub fn build_dn<T: Real>(config: &DnConfig) -> Model<T> {
    build_dn_inner(config).expect("static topology is valid")
}

fn build_dn_inner<T: Real>(config: &DnConfig) -> Result<Model<T>> {
    let mut m = Model::new(4);
    let mut prev = 0;
    let mut cin = 4;
    let mut scales = Vec::new();
    for (i, &w) in config.widths.iter().enumerate() {
        let b = i + 1;
        let c = m.conv(&format!("enc{b}"), prev, 5, cin, w)?;
        let r = m.add(&format!("enc{b}_relu"), Layer::Relu, &[c])?;
        prev = m.add(&format!("enc{b}_pool"), Layer::AvgPool2, &[r])?;
        scales.push((prev, w));
        cin = w;
    }
    let hw = config.head_width;
    let mut heads: Vec<NodeId> = Vec::new();
    for (i, &(src, w)) in scales.iter().enumerate() {
        let b = i + 1;
        let c = m.conv(&format!("head{b}_conv"), src, 5, w, hw)?;
        let r = m.add(&format!("head{b}_relu"), Layer::Relu, &[c])?;
        let f = m.conv(&format!("head{b}_fc"), r, 1, hw, hw)?;
        let r = m.add(&format!("head{b}_fc_relu"), Layer::Relu, &[f])?;
        let out = m.conv(DN_HEADS[i], r, 1, hw, hw)?;
        heads.push(out);
    }
    let up2 = m.add("head2_up", Layer::BilinearTo, &[heads[1], heads[0]])?;
    let up3 = m.add("head3_up", Layer::BilinearTo, &[heads[2], heads[0]])?;
    let cat = m.add("concat", Layer::Concat, &[heads[0], up2, up3])?;
    let fw = config.fuse_width;
    let f1 = m.conv("fuse1", cat, 1, 3 * hw, fw)?;
    let r1 = m.add("fuse1_relu", Layer::Relu, &[f1])?;
    let f2 = m.conv("fuse2", r1, 1, fw, fw)?;
    let r2 = m.add("fuse2_relu", Layer::Relu, &[f2])?;
    let f3 = m.conv("fuse3", r2, 1, fw, 2)?;
    let up = m.add("upsample", Layer::BilinearTo, &[f3, 0])?;
    m.add("normalize", Layer::UnitNormalize, &[up])?;
    Ok(m)
}

pub fn build_wtn<T: Real>(config: &WtnConfig) -> Model<T> {
    build_wtn_inner(config).expect("static topology is valid")
}

fn build_wtn_inner<T: Real>(config: &WtnConfig) -> Result<Model<T>> {
    let mut m = Model::new(2);
    let [w1, w2] = config.widths;
    let c = m.conv("block1", 0, 5, 2, w1)?;
    let r = m.add("block1_relu", Layer::Relu, &[c])?;
    let p = m.add("block1_pool", Layer::AvgPool2, &[r])?;
    let c = m.conv("block2", p, 5, w1, w2)?;
    let r = m.add("block2_relu", Layer::Relu, &[c])?;
    let p = m.add("block2_pool", Layer::AvgPool2, &[r])?;
    let f = m.conv("fc1", p, 1, w2, config.fc_width)?;
    let r = m.add("fc1_relu", Layer::Relu, &[f])?;
    let f = m.conv("fc2", r, 1, config.fc_width, config.k)?;
    let up = m.add("upsample", Layer::BilinearTo, &[f, 0])?;
    m.add("softmax", Layer::Softmax, &[up])?;
    Ok(m)
}

/// Outcome of [`balance_branch_init`].
#[derive(Clone, Debug, PartialEq)]
pub struct BranchBalance {
    pub before: [f64; 3],
    pub after: [f64; 3],
    pub scales: [f64; 3],
}

impl BranchBalance {
    pub fn ratio_after(&self) -> f64 {
        let max = self.after.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.after.iter().cloned().fold(f64::MAX, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }
}

fn variance<T: Real>(t: &Tensor<T>) -> f64 {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|v| v.f64()).sum::<f64>() / n;
    t.data().iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n
}

/// Rescales the final layer of each DN head so that the three head outputs
/// have the variance of the median head on `probe`.
pub fn balance_branch_init<T: Real>(dn: &mut Model<T>, probe: &Tensor<T>) -> Result<BranchBalance> {
    let ids: Vec<NodeId> = DN_HEADS
        .iter()
        .map(|n| {
            dn.find(n)
                .ok_or_else(|| NnError::Input(format!("model has no head `{n}`")))
        })
        .collect::<Result<_>>()?;
    let measure = |dn: &mut Model<T>| -> Result<[f64; 3]> {
        dn.forward(probe)?;
        let mut v = [0.0; 3];
        for (i, &id) in ids.iter().enumerate() {
            v[i] = variance(dn.activation(id).expect("forward ran"));
        }
        Ok(v)
    };
    let before = measure(dn)?;
    let mut sorted = before;
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[1];
    let mut scales = [1.0; 3];
    if before.iter().any(|&v| !(v > 0.0)) || !(median > 0.0) {
        log::warn!("branch variance is zero ({before:?}); keeping unscaled initialization");
        dn.clear_cache();
        return Ok(BranchBalance {
            before,
            after: before,
            scales,
        });
    }
    for (i, &id) in ids.iter().enumerate() {
        let s = (median / before[i]).sqrt();
        scales[i] = s;
        if let Layer::Conv(c) = &mut dn.nodes_mut()[id].layer {
            c.weight.value.scale(T::of(s));
            c.bias.value.scale(T::of(s));
        }
    }
    let after = measure(dn)?;
    dn.clear_cache();
    Ok(BranchBalance {
        before,
        after,
        scales,
    })
}

/// Per-channel normalization constants, computed once over the training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputStats {
    /// Mean of the gated RGB channels.
    pub rgb_mean: [f64; 3],
    /// Multiplier for the class channel so its spread matches the RGB channels.
    pub class_scale: f64,
    /// Number of semantic classes including background.
    pub num_classes: u32,
}

fn class_value(c: u32, num_classes: u32) -> f64 {
    255.0 * c as f64 / (num_classes - 1) as f64
}

fn check_classes(semseg: &LabelMap, num_classes: u32) -> Result<()> {
    let max = semseg.max_id();
    if max > 0 && num_classes < 2 {
        return Err(NnError::Input(format!(
            "{num_classes} class(es) cannot encode nonzero class id {max}"
        )));
    }
    if max >= num_classes.max(1) {
        return Err(NnError::Input(format!(
            "class id {max} outside 0..{num_classes}"
        )));
    }
    Ok(())
}

impl InputStats {
    pub fn compute(samples: &[(&Rgb8Image, &LabelMap)], num_classes: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(NnError::Input("no samples for input statistics".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut csum = 0.0f64;
        let mut csq = 0.0f64;
        let mut n = 0.0f64;
        for (rgb, semseg) in samples {
            ensure_same_dims(*rgb, *semseg, "input statistics")?;
            check_classes(semseg, num_classes)?;
            for (i, &c) in semseg.data().iter().enumerate() {
                if c != 0 {
                    for ch in 0..3 {
                        let v = rgb.data()[3 * i + ch] as f64;
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                    let cv = class_value(c, num_classes);
                    csum += cv;
                    csq += cv * cv;
                }
                n += 1.0;
            }
        }
        let rgb_mean = sum.map(|s| s / n);
        let mut rgb_std = 0.0;
        for ch in 0..3 {
            rgb_std += (sq[ch] / n - rgb_mean[ch] * rgb_mean[ch]).max(0.0).sqrt() / 3.0;
        }
        let cmean = csum / n;
        let cstd = (csq / n - cmean * cmean).max(0.0).sqrt();
        let class_scale = if cstd > 0.0 { rgb_std / cstd } else { 1.0 };
        Ok(Self {
            rgb_mean,
            class_scale,
            num_classes,
        })
    }
}

/// `(1, 4, h, w)` network input: gated and mean-subtracted RGB plus the
/// scaled class channel.
pub fn assemble_input<T: Real>(rgb: &Rgb8Image, semseg: &LabelMap, stats: &InputStats) -> Result<Tensor<T>> {
    ensure_same_dims(rgb, semseg, "assemble_input")?;
    check_classes(semseg, stats.num_classes)?;
    let (w, h) = (rgb.width(), rgb.height());
    let p = w * h;
    let mut t = Tensor::zeros([1, 4, h, w]);
    let data = t.data_mut();
    for (i, &c) in semseg.data().iter().enumerate() {
        for ch in 0..3 {
            let raw = if c == 0 { 0.0 } else { rgb.data()[3 * i + ch] as f64 };
            data[ch * p + i] = T::of(raw - stats.rgb_mean[ch]);
        }
        let cv = if c == 0 { 0.0 } else { class_value(c, stats.num_classes) };
        data[3 * p + i] = T::of(cv * stats.class_scale);
    }
    Ok(t)
}

/// `(1, 2, h, w)` tensor of `(dy, dx)` from a vector field.
pub fn vector_field_tensor<T: Real>(field: &VectorField) -> Tensor<T> {
    let (w, h) = (field.width(), field.height());
    let p = w * h;
    let mut t = Tensor::zeros([1, 2, h, w]);
    let data = t.data_mut();
    for i in 0..p {
        data[i] = T::of(field.data()[2 * i]);
        data[p + i] = T::of(field.data()[2 * i + 1]);
    }
    t
}

/// Inverse of [`vector_field_tensor`] for sample `n`.
pub fn tensor_vector_field<T: Real>(t: &Tensor<T>, n: usize) -> Result<VectorField> {
    let (h, w) = (t.height(), t.width());
    let p = h * w;
    let dy = t.channel(n, 0);
    let dx = t.channel(n, 1);
    let mut data = Vec::with_capacity(2 * p);
    for i in 0..p {
        data.push(dy[i].f64());
        data.push(dx[i].f64());
    }
    Ok(VectorField::from_vec(w, h, data)?)
}

/// One training image with every supervision signal in tensor form.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub input: Tensor<T>,
    /// Ground-truth unit directions, zero outside instances.
    pub directions: Tensor<T>,
    pub bins: Vec<u32>,
    pub weights: Tensor<T>,
    /// Loss region: pixels with a class of interest and an instance.
    pub mask: Vec<bool>,
}

impl<T: Real> TrainSample<T> {
    pub fn new(
        rgb: &Rgb8Image,
        semseg: &LabelMap,
        instances: &LabelMap,
        stats: &InputStats,
        bins: &BinSpec,
    ) -> Result<Self> {
        ensure_same_dims(semseg, instances, "training sample")?;
        let targets = TargetBundle::compute(instances, bins);
        Self::from_targets(rgb, semseg, instances, &targets, stats)
    }

    pub fn from_targets(
        rgb: &Rgb8Image,
        semseg: &LabelMap,
        instances: &LabelMap,
        targets: &TargetBundle,
        stats: &InputStats,
    ) -> Result<Self> {
        let input = assemble_input(rgb, semseg, stats)?;
        let (w, h) = (rgb.width(), rgb.height());
        let mask: Vec<bool> = semseg
            .data()
            .iter()
            .zip(instances.data())
            .map(|(&c, &id)| c != 0 && id != 0)
            .collect();
        let mut directions = vector_field_tensor(&targets.direction);
        let p = w * h;
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                directions.data_mut()[i] = T::zero();
                directions.data_mut()[p + i] = T::zero();
            }
        }
        let weights = Tensor::from_vec(
            [1, 1, h, w],
            targets.weights.data().iter().map(|&v| T::of(v)).collect(),
        );
        Ok(Self {
            input,
            directions,
            bins: targets.energy.data().to_vec(),
            weights,
            mask,
        })
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Zeroes both channels of a direction map outside `mask`.
pub fn gate_directions<T: Real>(dirs: &mut Tensor<T>, mask: &[bool]) {
    let p = dirs.plane();
    for s in 0..dirs.batch() {
        let ms = &mask[s * p..(s + 1) * p];
        let d = dirs.sample_mut(s);
        for (i, &m) in ms.iter().enumerate() {
            if !m {
                d[i] = T::zero();
                d[p + i] = T::zero();
            }
        }
    }
}

/// DN followed by WTN. The DN output is gated by the foreground mask before
/// it enters the WTN, as the WTN was pretrained on gated ground truth.
#[derive(Clone, Debug)]
pub struct Cascade<T> {
    pub dn: Model<T>,
    pub wtn: Model<T>,
    gate: Vec<bool>,
}

impl<T: Real> Cascade<T> {
    pub fn new(dn: Model<T>, wtn: Model<T>) -> Result<Self> {
        let dn_out = dn.nodes()[dn.output()].layer.kind();
        if dn_out != "unit_normalize" || wtn.input_channels() != 2 {
            return Err(NnError::Input(format!(
                "cascade needs a 2-channel direction output feeding a 2-channel WTN (found {dn_out} -> {} channels)",
                wtn.input_channels()
            )));
        }
        Ok(Self {
            dn,
            wtn,
            gate: Vec::new(),
        })
    }

    /// Returns the gated directions and the K-channel probabilities.
    pub fn forward(&mut self, input: &Tensor<T>, mask: &[bool]) -> Result<(Tensor<T>, Tensor<T>)> {
        if mask.len() != input.batch() * input.plane() {
            return Err(NnError::Input(format!(
                "gate has {} entries for input {:?}",
                mask.len(),
                input.shape()
            )));
        }
        let mut dirs = self.dn.forward(input)?;
        gate_directions(&mut dirs, mask);
        self.gate = mask.to_vec();
        let probs = self.wtn.forward(&dirs)?;
        Ok((dirs, probs))
    }

    /// Backpropagates a gradient with respect to the WTN logits through both
    /// networks and returns the input gradient.
    pub fn backward_logits(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.wtn.backward_logits(grad)?;
        gate_directions(&mut g, &self.gate);
        self.dn.backward(&g)
    }

    pub fn into_parts(self) -> (Model<T>, Model<T>) {
        (self.dn, self.wtn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::init_model;

    #[test]
    fn dn_shapes_and_unit_norm() {
        let mut dn = build_dn::<f32>(&DnConfig::default());
        init_model(&mut dn, 1);
        let x = Tensor::from_vec(
            [2, 4, 16, 16],
            (0..2 * 4 * 256).map(|i| ((i * 7919) % 255) as f32 - 127.0).collect(),
        );
        let out = dn.forward(&x).unwrap();
        assert_eq!(out.shape(), [2, 2, 16, 16]);
        let p = out.plane();
        for s in 0..2 {
            let o = out.sample(s);
            for i in 0..p {
                let n = (o[i] * o[i] + o[p + i] * o[p + i]).sqrt();
                assert!((n - 1.0).abs() < 1e-5, "norm {n}");
            }
        }
        let heads = dn.nodes().iter().filter(|n| DN_HEADS.contains(&n.name.as_str())).count();
        assert_eq!(heads, 3);
    }

    #[test]
    fn wtn_shapes_and_simplex() {
        let mut wtn = build_wtn::<f64>(&WtnConfig::default());
        init_model(&mut wtn, 2);
        let x = Tensor::from_vec([1, 2, 8, 8], (0..128).map(|i| (i as f64).sin()).collect());
        let out = wtn.forward(&x).unwrap();
        assert_eq!(out.shape(), [1, 16, 8, 8]);
        for i in 0..64 {
            let s: f64 = (0..16).map(|c| out.channel(0, c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_channel_equal_spacing() {
        let rgb = Rgb8Image::from_vec(3, 1, vec![10; 9]).unwrap();
        let sem = LabelMap::from_vec(3, 1, vec![0, 1, 2]).unwrap();
        let stats = InputStats {
            rgb_mean: [0.0; 3],
            class_scale: 1.0,
            num_classes: 3,
        };
        let t = assemble_input::<f64>(&rgb, &sem, &stats).unwrap();
        assert_eq!(t.channel(0, 3), &[0.0, 127.5, 255.0]);
        assert_eq!(t.channel(0, 0), &[0.0, 10.0, 10.0]);
    }

    #[test]
    fn class_ids_need_two_classes() {
        let rgb = Rgb8Image::new(2, 1);
        let sem = LabelMap::from_vec(2, 1, vec![0, 1]).unwrap();
        let stats = InputStats {
            rgb_mean: [0.0; 3],
            class_scale: 1.0,
            num_classes: 1,
        };
        assert!(assemble_input::<f32>(&rgb, &sem, &stats).is_err());
    }
}
