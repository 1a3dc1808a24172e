use dwt_core::metrics::{angular_error_sum, bin_accuracy};
use dwt_core::synth::{generate_dataset, generate_scene, Sample, SceneConfig};
use dwt_core::targets::BinSpec;
use dwt_core::{LabelMap, Mask};
use dwt_nn::loss::default_class_coeffs;
use dwt_nn::models::{
    balance_branch_init, build_dn, build_wtn, tensor_vector_field, Cascade, DnConfig, InputStats, TrainSample,
    WtnConfig,
};
use dwt_nn::optim::init_model;
use dwt_nn::train::{
    argmax, finetune, infer_energy, infer_wtn_bins, pretrain_dn, pretrain_wtn, History, Phase, TrainSchedule,
};
use dwt_nn::{Model, Tensor};

const K: usize = 16;

fn samples(raw: &[Sample]) -> (InputStats, Vec<TrainSample<f32>>) {
    let pairs: Vec<_> = raw.iter().map(|s| (&s.rgb, &s.semseg)).collect();
    let stats = InputStats::compute(&pairs, 3).unwrap();
    let bins = BinSpec::fallback();
    let set = raw
        .iter()
        .map(|s| TrainSample::new(&s.rgb, &s.semseg, &s.instances, &stats, &bins).unwrap())
        .collect();
    (stats, set)
}

fn schedule(phase: Phase, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> TrainSchedule {
    TrainSchedule {
        phase,
        epochs,
        batch_size,
        lr,
        l2: 1e-6,
        seed,
    }
}

fn fresh_dn(seed: u64) -> Model<f32> {
    let mut dn = build_dn(&DnConfig::default());
    init_model(&mut dn, seed);
    dn
}

fn fresh_wtn(seed: u64) -> Model<f32> {
    let mut wtn = build_wtn(&WtnConfig::default());
    init_model(&mut wtn, seed);
    wtn
}

fn mask_of(s: &TrainSample<f32>) -> Mask {
    let w = s.input.width();
    Mask::from_vec(w, s.input.height(), s.mask.clone()).unwrap()
}

fn mean_angle_deg(dn: &mut Model<f32>, set: &[TrainSample<f32>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for s in set {
        let out = dn.forward(&s.input).unwrap();
        let pred = tensor_vector_field(&out, 0).unwrap();
        let gt = tensor_vector_field(&s.directions, 0).unwrap();
        let (a, c) = angular_error_sum(&pred, &gt, &mask_of(s)).unwrap();
        sum += a;
        n += c;
    }
    sum / n as f64
}

fn fg_accuracy(bins: &LabelMap, s: &TrainSample<f32>) -> f64 {
    let gt = LabelMap::from_vec(bins.width(), bins.height(), s.bins.clone()).unwrap();
    let (hit, total) = bin_accuracy(bins, &gt, Some(&mask_of(s))).unwrap();
    hit as f64 / total as f64
}

fn one_scene(seed: u64) -> (Sample, TrainSample<f32>) {
    let raw = generate_scene(&SceneConfig::default(), seed).unwrap();
    let (_, mut set) = samples(std::slice::from_ref(&raw));
    (raw, set.remove(0))
}

#[test]
fn dn_overfits_one_image() {
    let (_, s) = one_scene(0);
    let set = vec![s];
    let mut dn = fresh_dn(1);
    let before = mean_angle_deg(&mut dn, &set);
    let history = pretrain_dn(&mut dn, &set, &schedule(Phase::PretrainDn, 200, 1, 1e-3, 1), None).unwrap();
    let after = mean_angle_deg(&mut dn, &set);
    println!("dn overfit: {before:.1} -> {after:.2} degrees");
    assert_eq!(history.epochs.len(), 200);
    assert!(after < 10.0, "mean angular error {after}");
}

#[test]
fn wtn_overfits_one_image() {
    let (raw, s) = one_scene(5);
    let set = vec![s];
    let coeffs = default_class_coeffs(K);
    let mut wtn = fresh_wtn(2);
    pretrain_wtn(&mut wtn, &set, &coeffs, &schedule(Phase::PretrainWtn, 200, 1, 3e-3, 2), None).unwrap();
    let bins = infer_wtn_bins(&mut wtn, &set[0].directions, &set[0].mask).unwrap();
    let gt = LabelMap::from_vec(64, 64, set[0].bins.clone()).unwrap();
    let (hit, total) = bin_accuracy(&bins, &gt, None).unwrap();
    let all = hit as f64 / total as f64;
    let fg = fg_accuracy(&bins, &set[0]);
    println!("wtn overfit: accuracy {all:.3} over all pixels, {fg:.3} on foreground");
    assert!(raw.semseg.foreground().count() > 0);
    assert!(all > 0.8, "bin accuracy {all}");
    assert!(fg > 0.8, "foreground bin accuracy {fg}");
}

#[test]
fn training_is_deterministic() {
    let ds = generate_dataset(&SceneConfig::default(), 5, 40).unwrap();
    let (_, set) = samples(&ds.train);
    let run = || -> (History, Vec<f32>) {
        let mut dn = fresh_dn(3);
        let h = pretrain_dn(&mut dn, &set, &schedule(Phase::PretrainDn, 2, 2, 1e-3, 9), None).unwrap();
        let out = dn.forward(&set[0].input).unwrap().into_vec();
        (h, out)
    };
    let (h1, o1) = run();
    let (h2, o2) = run();
    assert_eq!(h1, h2);
    assert_eq!(o1, o2);

    let coeffs = default_class_coeffs(K);
    let wtn_run = || {
        let mut wtn = fresh_wtn(4);
        pretrain_wtn(&mut wtn, &set, &coeffs, &schedule(Phase::PretrainWtn, 2, 3, 1e-3, 9), None).unwrap()
    };
    assert_eq!(wtn_run(), wtn_run());
}

#[test]
fn wtn_loss_decreases_over_first_epochs() {
    let ds = generate_dataset(&SceneConfig::default(), 63, 100).unwrap();
    let (_, set) = samples(&ds.train[..50]);
    let coeffs = default_class_coeffs(K);
    let mut wtn = fresh_wtn(5);
    let h = pretrain_wtn(&mut wtn, &set, &coeffs, &schedule(Phase::PretrainWtn, 5, 6, 1e-3, 5), None).unwrap();
    let l = h.losses();
    println!("wtn losses {l:?}");
    assert!(l[4] < l[0]);
    // Non-increasing within 10% noise.
    assert!(l.windows(2).all(|w| w[1] <= w[0] * 1.1));
}

#[test]
fn branch_balance_bounds_variance_ratio() {
    let ds = generate_dataset(&SceneConfig::default(), 10, 7).unwrap();
    let (_, set) = samples(&ds.train);
    let probe = Tensor::stack(&set.iter().take(4).map(|s| &s.input).collect::<Vec<_>>());
    let mut a = fresh_dn(6);
    let ba = balance_branch_init(&mut a, &probe).unwrap();
    assert!(ba.ratio_after() <= 4.0, "{ba:?}");
    let mut b = fresh_dn(6);
    let bb = balance_branch_init(&mut b, &probe).unwrap();
    assert_eq!(ba, bb);
}

#[test]
fn finetune_improves_one_image_and_keeps_directions() {
    let (_, s) = one_scene(11);
    let set = vec![s];
    let coeffs = default_class_coeffs(K);
    let mut dn = fresh_dn(7);
    pretrain_dn(&mut dn, &set, &schedule(Phase::PretrainDn, 40, 1, 3e-3, 1), None).unwrap();
    let mut wtn = fresh_wtn(8);
    pretrain_wtn(&mut wtn, &set, &coeffs, &schedule(Phase::PretrainWtn, 40, 1, 3e-3, 2), None).unwrap();
    let mut cascade = Cascade::new(dn, wtn).unwrap();
    let semseg = generate_scene(&SceneConfig::default(), 11).unwrap().semseg;
    let before = fg_accuracy(&infer_energy(&mut cascade, &set[0].input, &semseg).unwrap().bins, &set[0]);
    let h = finetune(&mut cascade, &set, &coeffs, &schedule(Phase::Finetune, 60, 1, 1e-3, 3), None).unwrap();
    let after = fg_accuracy(&infer_energy(&mut cascade, &set[0].input, &semseg).unwrap().bins, &set[0]);
    let angle = mean_angle_deg(&mut cascade.dn, &set);
    println!("finetune: accuracy {before:.3} -> {after:.3}, direction error {angle:.1} degrees");
    assert_eq!(h.epochs.len(), 60);
    assert!(after > before);
    assert!(angle < 45.0);
}

#[test]
fn cascade_output_dims() {
    let (_, s) = one_scene(2);
    let mut cascade = Cascade::new(fresh_dn(1), fresh_wtn(2)).unwrap();
    let (dirs, probs) = cascade.forward(&s.input, &s.mask).unwrap();
    assert_eq!(dirs.shape(), [1, 2, 64, 64]);
    assert_eq!(probs.shape(), [1, 16, 64, 64]);
}

#[test]
fn cascade_rejects_mismatched_seam() {
    let wtn = build_wtn::<f32>(&WtnConfig {
        k: 16,
        ..WtnConfig::default()
    });
    let mut bad: Model<f32> = Model::new(3);
    bad.conv("c", 0, 1, 3, 3).unwrap();
    assert!(Cascade::new(bad, wtn).is_err());
}

#[test]
fn inference_gating_and_ties() {
    assert_eq!(argmax([0.25f32, 0.25, 0.25, 0.25]), 0);
    assert_eq!(argmax([0.1f32, 0.5, 0.5, 0.2]), 1);

    let (raw, s) = one_scene(3);
    let mut cascade = Cascade::new(fresh_dn(1), fresh_wtn(2)).unwrap();
    let empty = LabelMap::new(64, 64);
    let pred = infer_energy(&mut cascade, &s.input, &empty).unwrap();
    assert!(pred.bins.data().iter().all(|&b| b == 0));

    let pred = infer_energy(&mut cascade, &s.input, &raw.semseg).unwrap();
    let p = 64 * 64;
    for i in 0..p {
        if raw.semseg.data()[i] == 0 {
            assert_eq!(pred.bins.data()[i], 0);
        } else {
            let want = argmax((0..K).map(|c| pred.probs.data()[c * p + i]));
            assert_eq!(pred.bins.data()[i] as usize, want);
        }
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let mut dn = fresh_dn(1);
    let err = pretrain_dn::<f32>(&mut dn, &[], &schedule(Phase::PretrainDn, 1, 1, 1e-3, 1), None).unwrap_err();
    assert!(err.to_string().contains("empty"));
}

#[test]
fn reference_schedules_are_recorded() {
    let dn = TrainSchedule::reference_dn(0);
    assert_eq!((dn.epochs, dn.batch_size, dn.lr, dn.l2), (20, 4, 1e-5, 1e-5));
    let wtn = TrainSchedule::reference_wtn(0);
    assert_eq!((wtn.epochs, wtn.batch_size, wtn.lr, wtn.l2), (25, 6, 5e-4, 1e-6));
    let ft = TrainSchedule::reference_finetune(0);
    assert_eq!((ft.epochs, ft.batch_size, ft.lr, ft.l2), (20, 3, 5e-6, 1e-6));
}
