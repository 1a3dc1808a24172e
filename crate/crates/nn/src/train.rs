//! Staged training: direction network, watershed network, then the cascade.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dwt_core::LabelMap;

use crate::error::{NnError, Result};
use crate::graph::Model;
use crate::loss::{angular_mse_loss, weighted_xent_loss};
use crate::models::{gate_directions, Cascade, TrainSample};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PretrainDn,
    PretrainWtn,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::PretrainDn => "pretrain_dn",
            Phase::PretrainWtn => "pretrain_wtn",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl TrainSchedule {
    /// 20 epochs, batch 4, learning rate 1e-5, L2 1e-5.
    pub fn reference_dn(seed: u64) -> Self {
        Self {
            phase: Phase::PretrainDn,
            epochs: 20,
            batch_size: 4,
            lr: 1e-5,
            l2: 1e-5,
            seed,
        }
    }

    /// 25 epochs, batch 6, learning rate 5e-4, L2 1e-6.
    pub fn reference_wtn(seed: u64) -> Self {
        Self {
            phase: Phase::PretrainWtn,
            epochs: 25,
            batch_size: 6,
            lr: 5e-4,
            l2: 1e-6,
            seed,
        }
    }

    /// 20 epochs, batch 3, learning rate 5e-6, L2 1e-6.
    pub fn reference_finetune(seed: u64) -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 20,
            batch_size: 3,
            lr: 5e-6,
            l2: 1e-6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.l2 >= 0.0) {
            return Err(NnError::Input(format!(
                "{}: epochs, batch size and learning rate must be positive (got {self:?})",
                self.phase.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Loss per foreground pixel, averaged over the epoch.
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Called after every epoch, e.g. for logging.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochStats);

struct Batch<T> {
    input: Tensor<T>,
    directions: Tensor<T>,
    weights: Tensor<T>,
    bins: Vec<u32>,
    mask: Vec<bool>,
    fg: usize,
}

fn make_batch<T: Real>(data: &[TrainSample<T>], idx: &[usize]) -> Batch<T> {
    let pick = |f: fn(&TrainSample<T>) -> &Tensor<T>| {
        let items: Vec<&Tensor<T>> = idx.iter().map(|&i| f(&data[i])).collect();
        Tensor::stack(&items)
    };
    let mut bins = Vec::new();
    let mut mask = Vec::new();
    for &i in idx {
        bins.extend_from_slice(&data[i].bins);
        mask.extend_from_slice(&data[i].mask);
    }
    let fg = mask.iter().filter(|&&m| m).count();
    Batch {
        input: pick(|s| &s.input),
        directions: pick(|s| &s.directions),
        weights: pick(|s| &s.weights),
        bins,
        mask,
        fg,
    }
}

fn check_data<T: Real>(data: &[TrainSample<T>], schedule: &TrainSchedule) -> Result<()> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(NnError::Input(format!(
            "{}: training set is empty",
            schedule.phase.name()
        )));
    }
    Ok(())
}

/// Runs `epochs` passes over shuffled mini-batches. `step` returns the summed
/// loss of a batch after applying its gradients.
fn run_epochs<T: Real>(
    data: &[TrainSample<T>],
    schedule: &TrainSchedule,
    observer: Option<Observer<'_>>,
    mut step: impl FnMut(&Batch<T>, T) -> Result<f64>,
) -> Result<History> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut observer = observer;
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut fg_total = 0usize;
        let mut steps = 0;
        for chunk in order.chunks(schedule.batch_size) {
            let batch = make_batch(data, chunk);
            if batch.fg == 0 {
                continue;
            }
            let norm = T::of(1.0 / batch.fg as f64);
            total += step(&batch, norm)?;
            fg_total += batch.fg;
            steps += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: if fg_total > 0 { total / fg_total as f64 } else { 0.0 },
            steps,
        };
        if !stats.mean_loss.is_finite() {
            return Err(NnError::State(format!(
                "{}: loss diverged at epoch {}",
                schedule.phase.name(),
                stats.epoch
            )));
        }
        if let Some(obs) = observer.as_mut() {
            obs(&stats);
        }
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Trains the DN on the angular loss against ground-truth directions.
pub fn pretrain_dn<T: Real>(
    dn: &mut Model<T>,
    data: &[TrainSample<T>],
    schedule: &TrainSchedule,
    observer: Option<Observer<'_>>,
) -> Result<History> {
    check_data(data, schedule)?;
    let mut adam = AdamState::new(dn, AdamConfig::new(schedule.lr, schedule.l2));
    run_epochs(data, schedule, observer, |b, norm| {
        let out = dn.forward(&b.input)?;
        let (loss, mut g) = angular_mse_loss(&out, &b.directions, &b.weights, &b.mask)?;
        g.scale(norm);
        dn.backward(&g)?;
        adam_step(dn, &mut adam)?;
        Ok(loss.f64())
    })
}

/// Trains the WTN on gated ground-truth directions against the energy bins.
pub fn pretrain_wtn<T: Real>(
    wtn: &mut Model<T>,
    data: &[TrainSample<T>],
    coeffs: &[f64],
    schedule: &TrainSchedule,
    observer: Option<Observer<'_>>,
) -> Result<History> {
    check_data(data, schedule)?;
    let mut adam = AdamState::new(wtn, AdamConfig::new(schedule.lr, schedule.l2));
    run_epochs(data, schedule, observer, |b, norm| {
        let probs = wtn.forward(&b.directions)?;
        let (loss, mut g) = weighted_xent_loss(&probs, &b.bins, &b.weights, coeffs, &b.mask)?;
        g.scale(norm);
        wtn.backward_logits(&g)?;
        adam_step(wtn, &mut adam)?;
        Ok(loss.f64())
    })
}

/// Trains the cascade end to end on the energy bins.
pub fn finetune<T: Real>(
    cascade: &mut Cascade<T>,
    data: &[TrainSample<T>],
    coeffs: &[f64],
    schedule: &TrainSchedule,
    observer: Option<Observer<'_>>,
) -> Result<History> {
    check_data(data, schedule)?;
    let cfg = AdamConfig::new(schedule.lr, schedule.l2);
    let mut adam_dn = AdamState::new(&cascade.dn, cfg);
    let mut adam_wtn = AdamState::new(&cascade.wtn, cfg);
    run_epochs(data, schedule, observer, |b, norm| {
        let (_, probs) = cascade.forward(&b.input, &b.mask)?;
        let (loss, mut g) = weighted_xent_loss(&probs, &b.bins, &b.weights, coeffs, &b.mask)?;
        g.scale(norm);
        cascade.backward_logits(&g)?;
        adam_step(&mut cascade.wtn, &mut adam_wtn)?;
        adam_step(&mut cascade.dn, &mut adam_dn)?;
        Ok(loss.f64())
    })
}

/// Energy prediction for one image.
#[derive(Clone, Debug)]
pub struct EnergyPrediction<T> {
    /// Arg-max bin per pixel, 0 outside the classes of interest.
    pub bins: LabelMap,
    /// `(1, k, h, w)` softmax output.
    pub probs: Tensor<T>,
    /// `(1, 2, h, w)` gated direction output.
    pub directions: Tensor<T>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Arg-max bins of a `(1, k, h, w)` probability map, forced to 0 outside `mask`.
pub fn bins_from_probs<T: Real>(probs: &Tensor<T>, mask: &[bool]) -> Result<LabelMap> {
    let (h, w, k) = (probs.height(), probs.width(), probs.channels());
    let p = h * w;
    if mask.len() != p {
        return Err(NnError::Input(format!(
            "mask has {} entries for a {h}x{w} map",
            mask.len()
        )));
    }
    let s = probs.sample(0);
    let data = (0..p)
        .map(|i| {
            if mask[i] {
                argmax((0..k).map(|c| s[c * p + i])) as u32
            } else {
                0
            }
        })
        .collect();
    Ok(LabelMap::from_vec(w, h, data)?)
}

/// Runs the cascade on an assembled `(1, 4, h, w)` input. `semseg` gates the
/// direction map and the output bins.
pub fn infer_energy<T: Real>(
    cascade: &mut Cascade<T>,
    input: &Tensor<T>,
    semseg: &LabelMap,
) -> Result<EnergyPrediction<T>> {
    if input.batch() != 1 || input.height() != semseg.height() || input.width() != semseg.width() {
        return Err(NnError::Input(format!(
            "input {:?} does not match a {}x{} segmentation",
            input.shape(),
            semseg.height(),
            semseg.width()
        )));
    }
    let mask: Vec<bool> = semseg.data().iter().map(|&c| c != 0).collect();
    let (directions, probs) = cascade.forward(input, &mask)?;
    cascade.dn.clear_cache();
    cascade.wtn.clear_cache();
    let bins = bins_from_probs(&probs, &mask)?;
    Ok(EnergyPrediction {
        bins,
        probs,
        directions,
    })
}

/// Runs the WTN on a direction map and returns arg-max bins.
pub fn infer_wtn_bins<T: Real>(wtn: &mut Model<T>, directions: &Tensor<T>, mask: &[bool]) -> Result<LabelMap> {
    let mut d = directions.clone();
    gate_directions(&mut d, mask);
    let probs = wtn.forward(&d)?;
    wtn.clear_cache();
    bins_from_probs(&probs, mask)
}

/// Per-pixel probability mass on bins `>= level`.
pub fn mass_at_or_above<T: Real>(probs: &Tensor<T>, level: usize) -> Vec<f64> {
    let p = probs.plane();
    let s = probs.sample(0);
    (0..p)
        .map(|i| (level..probs.channels()).map(|c| s[c * p + i].f64()).sum())
        .collect()
}
