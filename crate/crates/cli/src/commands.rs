//! One function per subcommand. Each reads its inputs from the output
//! directory, checks that the producing command ran, and writes its
//! artifacts plus a run manifest.

use std::fmt::Write as _;

use rayon::prelude::*;

use dwt_core::extract::{extract_instances, rank_instances, read_instances, write_instances, Instance, RankMode};
use dwt_core::io::{
    read_label_png, read_rgb_png, read_scalar_field, read_vector_field, write_label_png, write_rgb_png,
    write_scalar_field, write_vector_field,
};
use dwt_core::metrics::{
    angular_error_sum, average_precision, bin_accuracy, default_thresholds, gt_instances, mean_weighted_coverage,
    ordering_study, GtInstance,
};
use dwt_core::synth::{generate_scene, ClassHistogram, DatasetPlan, Sample, Split, CLASS_NAMES};
use dwt_core::targets::{default_bin_edges, BinSpec, TargetBundle};
use dwt_core::watershed::{gradient_magnitude, watershed_flood};
use dwt_core::{LabelMap, Mask, ScalarField};
use dwt_nn::checkpoint::{load_model, save_model};
use dwt_nn::gradcheck::{standard_suite, GradCheckReport};
use dwt_nn::loss::default_class_coeffs;
use dwt_nn::models::{
    assemble_input, balance_branch_init, build_dn, build_wtn, tensor_vector_field, Cascade, InputStats, TrainSample,
};
use dwt_nn::optim::init_model;
use dwt_nn::train::{finetune, infer_energy, mass_at_or_above, pretrain_dn, pretrain_wtn, History, Phase, TrainSchedule};
use dwt_nn::{Model, Tensor};

use crate::config::{EdgeMode, ModelChoice, PhaseConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::run::{kv_value, read_kv, read_text, require, write_text, Layout, Run};

/// Largest gradient-check relative error accepted by `grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

const NUM_CLASSES: u32 = CLASS_NAMES.len() as u32;

fn artifact_err(path: &std::path::Path, message: impl Into<String>) -> CliError {
    CliError::Artifact {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn load_plan(layout: &Layout) -> Result<DatasetPlan> {
    let path = layout.data_manifest();
    require(&path, "gen-data")?;
    Ok(DatasetPlan::parse_manifest(&read_text(&path)?)?)
}

fn indices(plan: &DatasetPlan, split: Split) -> Vec<usize> {
    (0..plan.entries.len()).filter(|&i| plan.entries[i].1 == split).collect()
}

fn load_sample(layout: &Layout, index: usize) -> Result<Sample> {
    Ok(Sample {
        rgb: read_rgb_png(layout.data(index, "rgb"))?,
        semseg: read_label_png(layout.data(index, "semseg"))?,
        instances: read_label_png(layout.data(index, "instances"))?,
    })
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(run: &mut Run) -> Result<()> {
    let c = run.config;
    let base = c.substream("data") >> 32;
    let plan = DatasetPlan::new(c.count, base)?;
    let layout = run.layout.clone();
    crate::run::create_parent(&layout.data_manifest())?;
    let samples: Vec<Sample> = plan
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, &(seed, _))| -> Result<Sample> {
            let s = generate_scene(&c.scene, seed)?;
            write_rgb_png(&s.rgb, layout.data(i, "rgb"))?;
            write_label_png(&s.semseg, layout.data(i, "semseg"))?;
            write_label_png(&s.instances, layout.data(i, "instances"))?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut report = String::new();
    for split in [Split::Train, Split::Val] {
        let mut hist = ClassHistogram::default();
        for i in indices(&plan, split) {
            hist.add(&samples[i]);
        }
        report.push_str(&hist.report(&format!("{} ({} scenes)", split.name(), plan.count(split))));
        report.push('\n');
    }
    write_text(&layout.data_manifest(), &plan.manifest())?;
    write_text(&layout.path("data/histogram.txt"), &report)?;
    print!("{report}");
    run.produced("data/manifest.txt");
    run.produced("data/histogram.txt");
    run.produced(format!("data/NNNN_{{rgb,semseg,instances}}.png x {}", plan.entries.len()));
    Ok(())
}

// ------------------------------------------------------------ make-targets

fn write_stats(layout: &Layout, stats: &InputStats) -> Result<()> {
    let m = stats.rgb_mean;
    let text = format!(
        "rgb_mean = {},{},{}\nclass_scale = {}\nnum_classes = {}\n",
        m[0], m[1], m[2], stats.class_scale, stats.num_classes
    );
    write_text(&layout.input_stats(), &text)
}

fn load_stats(layout: &Layout) -> Result<InputStats> {
    let path = layout.input_stats();
    require(&path, "make-targets")?;
    let kv = read_kv(&path)?;
    let bad = |k: &str| artifact_err(&path, format!("bad `{k}`"));
    let mean: Vec<f64> = kv_value(&kv, "rgb_mean", &path)?
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad("rgb_mean")))
        .collect::<Result<_>>()?;
    Ok(InputStats {
        rgb_mean: mean.try_into().map_err(|_| bad("rgb_mean"))?,
        class_scale: kv_value(&kv, "class_scale", &path)?.parse().map_err(|_| bad("class_scale"))?,
        num_classes: kv_value(&kv, "num_classes", &path)?.parse().map_err(|_| bad("num_classes"))?,
    })
}

fn write_bins(layout: &Layout, bins: &BinSpec) -> Result<()> {
    let edges: Vec<String> = bins.edges().iter().map(|e| e.to_string()).collect();
    write_text(&layout.bins(), &format!("k = {}\nedges = {}\n", bins.k(), edges.join(",")))
}

fn load_bins(layout: &Layout) -> Result<BinSpec> {
    let path = layout.bins();
    require(&path, "make-targets")?;
    let kv = read_kv(&path)?;
    let edges: Vec<f64> = kv_value(&kv, "edges", &path)?
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| artifact_err(&path, "bad edge")))
        .collect::<Result<_>>()?;
    Ok(BinSpec::new(edges)?)
}

fn fit_bins(c: &RunConfig, train: &[LabelMap]) -> Result<BinSpec> {
    let bins = match &c.edges {
        EdgeMode::Quantile => default_bin_edges(train, c.k)?,
        EdgeMode::Fallback => BinSpec::fallback(),
        EdgeMode::Fixed(edges) => BinSpec::new(edges.clone())?,
    };
    if bins.k() != c.k {
        return Err(CliError::Config(format!(
            "{}: [bins] edges give {} bins but k = {}",
            c.path.display(),
            bins.k(),
            c.k
        )));
    }
    Ok(bins)
}

pub fn make_targets(run: &mut Run) -> Result<()> {
    let layout = run.layout.clone();
    let plan = load_plan(&layout)?;
    let samples: Vec<Sample> = (0..plan.entries.len())
        .into_par_iter()
        .map(|i| load_sample(&layout, i))
        .collect::<Result<_>>()?;
    let train = indices(&plan, Split::Train);
    let train_labels: Vec<LabelMap> = train.iter().map(|&i| samples[i].instances.clone()).collect();
    let bins = fit_bins(run.config, &train_labels)?;
    let pairs: Vec<_> = train.iter().map(|&i| (&samples[i].rgb, &samples[i].semseg)).collect();
    let stats = InputStats::compute(&pairs, NUM_CLASSES)?;
    samples.par_iter().enumerate().try_for_each(|(i, s)| -> Result<()> {
        let t = TargetBundle::compute(&s.instances, &bins);
        crate::run::create_parent(&layout.target(i, "energy", "png"))?;
        write_scalar_field(&t.distance, layout.target(i, "distance", "dwtf"))?;
        write_vector_field(&t.direction, layout.target(i, "direction", "dwtf"))?;
        write_scalar_field(&t.weights, layout.target(i, "weights", "dwtf"))?;
        write_label_png(&t.energy, layout.target(i, "energy", "png"))?;
        Ok(())
    })?;
    write_bins(&layout, &bins)?;
    write_stats(&layout, &stats)?;
    let edges: Vec<String> = bins.edges().iter().map(|e| format!("{e:.2}")).collect();
    println!("{} energy bins, edges {}", bins.k(), edges.join(" "));
    run.produced("targets/bins.txt");
    run.produced("targets/input_stats.txt");
    run.produced(format!(
        "targets/NNNN_{{distance,direction,weights}}.dwtf + NNNN_energy.png x {}",
        samples.len()
    ));
    Ok(())
}

fn load_targets(layout: &Layout, index: usize) -> Result<TargetBundle> {
    let energy = layout.target(index, "energy", "png");
    require(&energy, "make-targets")?;
    Ok(TargetBundle {
        distance: read_scalar_field(layout.target(index, "distance", "dwtf"))?,
        direction: read_vector_field(layout.target(index, "direction", "dwtf"))?,
        energy: read_label_png(energy)?,
        weights: read_scalar_field(layout.target(index, "weights", "dwtf"))?,
    })
}

fn load_training_set(layout: &Layout, split: Split) -> Result<Vec<TrainSample<f32>>> {
    let plan = load_plan(layout)?;
    let stats = load_stats(layout)?;
    indices(&plan, split)
        .into_par_iter()
        .map(|i| {
            let s = load_sample(layout, i)?;
            let t = load_targets(layout, i)?;
            Ok(TrainSample::from_targets(&s.rgb, &s.semseg, &s.instances, &t, &stats)?)
        })
        .collect()
}

// ---------------------------------------------------------------- training

fn schedule(phase: Phase, p: &PhaseConfig, seed: u64) -> TrainSchedule {
    TrainSchedule {
        phase,
        epochs: p.epochs,
        batch_size: p.batch_size,
        lr: p.lr,
        l2: p.l2,
        seed,
    }
}

fn history_text(h: &History) -> String {
    let mut s = String::from("# epoch steps mean_loss\n");
    for e in &h.epochs {
        writeln!(s, "{} {} {:.9}", e.epoch, e.steps, e.mean_loss).unwrap();
    }
    s
}

fn log_epoch(phase: &'static str) -> impl FnMut(&dwt_nn::train::EpochStats) {
    move |e| log::info!("{phase} epoch {} loss {:.4}", e.epoch, e.mean_loss)
}

fn mask_of(s: &TrainSample<f32>) -> Result<Mask> {
    Ok(Mask::from_vec(s.input.width(), s.input.height(), s.mask.clone())?)
}

fn mean_angle(dn: &mut Model<f32>, set: &[TrainSample<f32>]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in set {
        let out = dn.forward(&s.input)?;
        dn.clear_cache();
        let pred = tensor_vector_field(&out, 0)?;
        let gt = tensor_vector_field(&s.directions, 0)?;
        let (a, c) = angular_error_sum(&pred, &gt, &mask_of(s)?)?;
        sum += a;
        n += c;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn train_dn(run: &mut Run) -> Result<()> {
    let c = run.config;
    let layout = run.layout.clone();
    let train = load_training_set(&layout, Split::Train)?;
    let mut dn = build_dn::<f32>(&c.dn);
    init_model(&mut dn, c.substream("init.dn"));
    let mut report = String::new();
    if c.balance_branches && !train.is_empty() {
        let probe: Vec<&Tensor<f32>> = train.iter().take(4).map(|s| &s.input).collect();
        let b = balance_branch_init(&mut dn, &Tensor::stack(&probe))?;
        writeln!(report, "branch_variance_ratio_before = {:.6}", ratio(&b.before)).unwrap();
        writeln!(report, "branch_variance_ratio_after = {:.6}", b.ratio_after()).unwrap();
    }
    let mut obs = log_epoch("train-dn");
    let h = pretrain_dn(&mut dn, &train, &schedule(Phase::PretrainDn, &c.train_dn, c.substream("shuffle.dn")), Some(&mut obs))?;
    let val = load_training_set(&layout, Split::Val)?;
    let angle = mean_angle(&mut dn, &val)?;
    writeln!(report, "val_mean_angular_error_deg = {angle:.6}").unwrap();
    save_model(&dn, &layout.model_dir("dn"), "dn")?;
    write_text(&layout.path("models/dn/history.txt"), &history_text(&h))?;
    write_text(&layout.path("models/dn/report.kv"), &report)?;
    println!("train-dn: final loss {:.4}, val mean angular error {angle:.2} deg", h.losses().last().unwrap_or(&0.0));
    run.produced("models/dn/dn.manifest");
    run.produced("models/dn/history.txt");
    run.produced("models/dn/report.kv");
    Ok(())
}

fn ratio(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn wtn_accuracy(wtn: &mut Model<f32>, set: &[TrainSample<f32>]) -> Result<(usize, usize)> {
    let (mut hit, mut total) = (0, 0);
    for s in set {
        let bins = dwt_nn::train::infer_wtn_bins(wtn, &s.directions, &s.mask)?;
        let gt = LabelMap::from_vec(bins.width(), bins.height(), s.bins.clone())?;
        let (a, b) = bin_accuracy(&bins, &gt, Some(&mask_of(s)?))?;
        hit += a;
        total += b;
    }
    Ok((hit, total))
}

pub fn train_wtn(run: &mut Run) -> Result<()> {
    let c = run.config;
    let layout = run.layout.clone();
    let bins = load_bins(&layout)?;
    if bins.k() != c.k {
        return Err(CliError::Config(format!(
            "targets were made with k = {} but the config has k = {}; rerun make-targets",
            bins.k(),
            c.k
        )));
    }
    let train = load_training_set(&layout, Split::Train)?;
    let mut wtn = build_wtn::<f32>(&c.wtn);
    init_model(&mut wtn, c.substream("init.wtn"));
    let coeffs = default_class_coeffs(c.k);
    let mut obs = log_epoch("train-wtn");
    let sched = schedule(Phase::PretrainWtn, &c.train_wtn, c.substream("shuffle.wtn"));
    let h = pretrain_wtn(&mut wtn, &train, &coeffs, &sched, Some(&mut obs))?;
    let val = load_training_set(&layout, Split::Val)?;
    let (hit, total) = wtn_accuracy(&mut wtn, &val)?;
    let acc = hit as f64 / total.max(1) as f64;
    save_model(&wtn, &layout.model_dir("wtn"), "wtn")?;
    write_text(&layout.path("models/wtn/history.txt"), &history_text(&h))?;
    write_text(
        &layout.path("models/wtn/report.kv"),
        &format!("val_foreground_bin_accuracy_on_gt_directions = {acc:.6}\n"),
    )?;
    println!(
        "train-wtn: final loss {:.4}, val foreground bin accuracy on ground-truth directions {acc:.3}",
        h.losses().last().unwrap_or(&0.0)
    );
    run.produced("models/wtn/wtn.manifest");
    run.produced("models/wtn/history.txt");
    run.produced("models/wtn/report.kv");
    Ok(())
}

fn load_pretrained(layout: &Layout) -> Result<(Model<f32>, Model<f32>)> {
    let dn = layout.path("models/dn/dn.manifest");
    let wtn = layout.path("models/wtn/wtn.manifest");
    require(&dn, "train-dn")?;
    require(&wtn, "train-wtn")?;
    Ok((load_model(&dn)?, load_model(&wtn)?))
}

pub fn finetune_cmd(run: &mut Run) -> Result<()> {
    let c = run.config;
    let layout = run.layout.clone();
    let (dn, wtn) = load_pretrained(&layout)?;
    let train = load_training_set(&layout, Split::Train)?;
    let mut cascade = Cascade::new(dn, wtn)?;
    let coeffs = default_class_coeffs(c.k);
    let mut obs = log_epoch("finetune");
    let sched = schedule(Phase::Finetune, &c.finetune, c.substream("shuffle.finetune"));
    let h = finetune(&mut cascade, &train, &coeffs, &sched, Some(&mut obs))?;
    let (dn, wtn) = cascade.into_parts();
    let dir = layout.model_dir("finetuned");
    save_model(&dn, &dir, "dn")?;
    save_model(&wtn, &dir, "wtn")?;
    write_text(&dir.join("history.txt"), &history_text(&h))?;
    println!("finetune: final loss {:.4}", h.losses().last().unwrap_or(&0.0));
    run.produced("models/finetuned/dn.manifest");
    run.produced("models/finetuned/wtn.manifest");
    run.produced("models/finetuned/history.txt");
    Ok(())
}

// ------------------------------------------------------------------- infer

fn load_cascade(layout: &Layout, choice: ModelChoice) -> Result<(Model<f32>, Model<f32>)> {
    match choice {
        ModelChoice::Pretrained => load_pretrained(layout),
        ModelChoice::Finetuned => {
            let dn = layout.path("models/finetuned/dn.manifest");
            let wtn = layout.path("models/finetuned/wtn.manifest");
            require(&dn, "finetune")?;
            require(&wtn, "finetune")?;
            Ok((load_model(&dn)?, load_model(&wtn)?))
        }
    }
}

pub fn infer(run: &mut Run) -> Result<()> {
    let c = run.config;
    let layout = run.layout.clone();
    let plan = load_plan(&layout)?;
    let stats = load_stats(&layout)?;
    let bins = load_bins(&layout)?;
    let (dn, wtn) = load_cascade(&layout, c.infer_models)?;
    Cascade::new(dn.clone(), wtn.clone())?;
    let items = indices(&plan, c.infer_split);
    let k = bins.k() as u32;
    let counts: Vec<usize> = items
        .par_iter()
        .map_init(
            || Cascade::new(dn.clone(), wtn.clone()).expect("checked above"),
            |cascade, &i| -> Result<usize> {
                let s = load_sample(&layout, i)?;
                let input = assemble_input::<f32>(&s.rgb, &s.semseg, &stats)?;
                let pred = infer_energy(cascade, &input, &s.semseg)?;
                let (w, h) = (s.rgb.width(), s.rgb.height());
                let conf = ScalarField::from_vec(w, h, mass_at_or_above(&pred.probs, 1))?;
                let found = extract_instances(&pred.bins, &s.semseg, k, &c.cut, Some(&conf))?;
                let ranked = rank_instances(&found, RankMode::Confidence);
                let energy_path = layout.inferred(i, "energy", "png");
                crate::run::create_parent(&energy_path)?;
                write_label_png(&pred.bins, energy_path)?;
                write_vector_field(&tensor_vector_field(&pred.directions, 0)?, layout.inferred(i, "directions", "dwtf"))?;
                write_scalar_field(&conf, layout.inferred(i, "confidence", "dwtf"))?;
                write_instances(
                    &ranked,
                    w,
                    h,
                    layout.inferred(i, "instances", "png"),
                    layout.inferred(i, "instances", "txt"),
                )?;
                Ok(ranked.len())
            },
        )
        .collect::<Result<_>>()?;
    let index: String = items
        .iter()
        .zip(&counts)
        .map(|(i, n)| format!("{i} {n}\n"))
        .collect();
    write_text(&layout.path("infer/index.txt"), &format!("# index instances\n{index}"))?;
    println!(
        "infer: {} {} images, {} instances",
        items.len(),
        c.infer_split.name(),
        counts.iter().sum::<usize>()
    );
    run.produced("infer/index.txt");
    run.produced(format!(
        "infer/NNNN_{{energy,instances}}.png + NNNN_{{directions,confidence}}.dwtf + NNNN_instances.txt x {}",
        items.len()
    ));
    Ok(())
}

// -------------------------------------------------------------- evaluation

struct Scored {
    preds: Vec<Vec<Instance>>,
    gt_energy_preds: Vec<Vec<Instance>>,
    gts: Vec<Vec<GtInstance>>,
    bins_all: (usize, usize),
    bins_fg: (usize, usize),
    angle: (f64, usize),
}

fn load_scored(run: &Run) -> Result<Scored> {
    let c = run.config;
    let layout = &run.layout;
    require(&layout.path("infer/index.txt"), "infer")?;
    let plan = load_plan(layout)?;
    let bins = load_bins(layout)?;
    let k = bins.k() as u32;
    let per_image: Vec<_> = indices(&plan, c.infer_split)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let s = load_sample(layout, i)?;
            let t = load_targets(layout, i)?;
            let png = layout.inferred(i, "instances", "png");
            require(&png, "infer")?;
            let preds = read_instances(png, layout.inferred(i, "instances", "txt"))?;
            let energy = read_label_png(layout.inferred(i, "energy", "png"))?;
            let dirs = read_vector_field(layout.inferred(i, "directions", "dwtf"))?;
            let gts = gt_instances(&s.instances, &s.semseg)?;
            let gt_energy = extract_instances(&t.energy, &s.semseg, k, &c.cut, None)?;
            let fg = s.semseg.foreground();
            let loss_region = Mask::from_vec(
                fg.width(),
                fg.height(),
                fg.data().iter().zip(s.instances.data()).map(|(&f, &id)| f && id != 0).collect(),
            )?;
            let all = bin_accuracy(&energy, &t.energy, None)?;
            let on_fg = bin_accuracy(&energy, &t.energy, Some(&fg))?;
            let angle = angular_error_sum(&dirs, &t.direction, &loss_region)?;
            Ok((preds, gt_energy, gts, all, on_fg, angle))
        })
        .collect::<Result<_>>()?;
    let mut out = Scored {
        preds: vec![],
        gt_energy_preds: vec![],
        gts: vec![],
        bins_all: (0, 0),
        bins_fg: (0, 0),
        angle: (0.0, 0),
    };
    for (p, g, gt, a, f, ang) in per_image {
        out.preds.push(p);
        out.gt_energy_preds.push(g);
        out.gts.push(gt);
        out.bins_all = (out.bins_all.0 + a.0, out.bins_all.1 + a.1);
        out.bins_fg = (out.bins_fg.0 + f.0, out.bins_fg.1 + f.1);
        out.angle = (out.angle.0 + ang.0, out.angle.1 + ang.1);
    }
    Ok(out)
}

fn frac(p: (usize, usize)) -> f64 {
    p.0 as f64 / p.1.max(1) as f64
}

pub fn eval(run: &mut Run) -> Result<()> {
    let s = load_scored(run)?;
    let th = default_thresholds();
    let ap = average_precision(&s.preds, &s.gts, &th)?;
    let gt_ap = average_precision(&s.gt_energy_preds, &s.gts, &th)?;
    let cov = mean_weighted_coverage(&s.preds, &s.gts)?;
    let angle = s.angle.0 / s.angle.1.max(1) as f64;

    let mut kv = String::new();
    let mut put = |k: &str, v: f64| writeln!(kv, "{k} = {v:.9}").unwrap();
    put("images", s.preds.len() as f64);
    put("mean_ap", ap.mean_ap);
    put("ap50", ap.ap50);
    put("mucov", cov.mean);
    put("bin_accuracy", frac(s.bins_all));
    put("bin_accuracy_foreground", frac(s.bins_fg));
    put("mean_angular_error_deg", angle);
    put("gt_energy_mean_ap", gt_ap.mean_ap);
    put("gt_energy_ap50", gt_ap.ap50);
    for cls in &ap.per_class {
        put(&format!("class.{}.ap", cls.class_id), cls.ap);
        put(&format!("class.{}.ap50", cls.class_id), cls.ap_per_threshold[0]);
    }

    let mut table = format!("{:<12}{:>8}{:>8}{:>8}{:>8}\n", "class", "gt", "pred", "AP", "AP50");
    for cls in &ap.per_class {
        let name = CLASS_NAMES.get(cls.class_id as usize).copied().unwrap_or("?");
        writeln!(
            table,
            "{name:<12}{:>8}{:>8}{:>8.3}{:>8.3}",
            cls.gt_count, cls.prediction_count, cls.ap, cls.ap_per_threshold[0]
        )
        .unwrap();
    }
    writeln!(table, "{:<12}{:>8}{:>8}{:>8.3}{:>8.3}", "mean", "", "", ap.mean_ap, ap.ap50).unwrap();
    writeln!(table, "\nmuCov                     {:.3}", cov.mean).unwrap();
    writeln!(table, "bin accuracy (all)        {:.3}", frac(s.bins_all)).unwrap();
    writeln!(table, "bin accuracy (foreground) {:.3}", frac(s.bins_fg)).unwrap();
    writeln!(table, "mean angular error        {angle:.2} deg").unwrap();
    writeln!(table, "GT-energy cut AP / AP50   {:.3} / {:.3}", gt_ap.mean_ap, gt_ap.ap50).unwrap();

    let layout = &run.layout;
    write_text(&layout.path("eval/report.txt"), &table)?;
    write_text(&layout.path("eval/report.kv"), &kv)?;
    print!("{table}");
    run.produced("eval/report.txt");
    run.produced("eval/report.kv");
    Ok(())
}

pub fn ordering(run: &mut Run) -> Result<()> {
    let c = run.config;
    let s = load_scored(run)?;
    let seeds: Vec<u64> = (0..c.ordering_seeds).map(|i| c.substream(&format!("ordering.{i}"))).collect();
    let study = ordering_study(&s.preds, &s.gts, &seeds)?;
    let mut kv = String::new();
    writeln!(kv, "random_mean = {:.9}", study.random_mean).unwrap();
    writeln!(kv, "random_std = {:.9}", study.random_std).unwrap();
    writeln!(kv, "confidence = {:.9}", study.confidence).unwrap();
    writeln!(kv, "oracle = {:.9}", study.oracle).unwrap();
    for (i, v) in study.random_per_seed.iter().enumerate() {
        writeln!(kv, "random.{i} = {v:.9}").unwrap();
    }
    let mut table = format!("{:<22}{:>10}\n", "ordering", "mean AP");
    writeln!(
        table,
        "{:<22}{:>10}",
        format!("random ({} seeds)", seeds.len()),
        format!("{:.3}±{:.3}", study.random_mean, study.random_std)
    )
    .unwrap();
    writeln!(table, "{:<22}{:>10.3}", "confidence", study.confidence).unwrap();
    writeln!(table, "{:<22}{:>10.3}", "oracle", study.oracle).unwrap();
    write_text(&run.layout.path("ordering/report.txt"), &table)?;
    write_text(&run.layout.path("ordering/report.kv"), &kv)?;
    print!("{table}");
    run.produced("ordering/report.txt");
    run.produced("ordering/report.kv");
    Ok(())
}

// ---------------------------------------------------------- watershed-demo

pub fn watershed_demo(run: &mut Run) -> Result<()> {
    let c = run.config;
    let layout = run.layout.clone();
    let plan = load_plan(&layout)?;
    let bins = load_bins(&layout)?;
    let n = c.watershed_scenes.min(plan.entries.len());
    crate::run::create_parent(&layout.path("watershed/report.txt"))?;
    let rows: Vec<(usize, usize, usize)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let s = load_sample(&layout, i)?;
            let t = load_targets(&layout, i)?;
            let ws = watershed_flood(&gradient_magnitude(&s.rgb))?;
            write_label_png(&ws.basins, layout.path(format!("watershed/{i:04}_basins.png")))?;
            let cut = extract_instances(&t.energy, &s.semseg, bins.k() as u32, &c.cut, None)?;
            Ok((s.instances.ids().len(), ws.basin_count, cut.len()))
        })
        .collect::<Result<_>>()?;
    let mut table = format!("{:<8}{:>9}{:>11}{:>8}{:>12}\n", "scene", "objects", "watershed", "ratio", "energy cut");
    let mut kv = String::new();
    for (i, (objects, basins, cut)) in rows.iter().enumerate() {
        let ratio = *basins as f64 / (*objects).max(1) as f64;
        writeln!(table, "{i:<8}{objects:>9}{basins:>11}{ratio:>8.1}{cut:>12}").unwrap();
        writeln!(kv, "scene.{i} = {objects} {basins} {cut}").unwrap();
    }
    let oversegmented = rows.iter().filter(|(o, b, _)| *b >= 2 * o).count();
    let exact = rows.iter().filter(|(o, _, cut)| cut == o).count();
    writeln!(table, "\nwatershed >= 2x objects on {oversegmented}/{n} scenes; energy cut exact on {exact}/{n}").unwrap();
    writeln!(kv, "scenes = {n}\noversegmented = {oversegmented}\nexact_cut = {exact}").unwrap();
    write_text(&layout.path("watershed/report.txt"), &table)?;
    write_text(&layout.path("watershed/report.kv"), &kv)?;
    print!("{table}");
    run.produced("watershed/report.txt");
    run.produced("watershed/report.kv");
    run.produced(format!("watershed/NNNN_basins.png x {n}"));
    Ok(())
}

// -------------------------------------------------------------- grad-check

pub fn grad_check(run: &mut Run) -> Result<()> {
    let c = run.config;
    let seeds: Vec<u64> = (0..c.grad_check_seeds).map(|i| c.substream(&format!("grad_check.{i}"))).collect();
    let results: Vec<Vec<(String, GradCheckReport)>> = seeds
        .par_iter()
        .map(|&s| standard_suite(s).map_err(CliError::from))
        .collect::<Result<_>>()?;
    // Worst case per name, in suite order.
    let mut worst: Vec<(String, f64, usize, usize, usize)> = Vec::new();
    for (si, suite) in results.iter().enumerate() {
        for (name, r) in suite {
            match worst.iter_mut().find(|w| &w.0 == name) {
                Some(w) => {
                    w.3 += r.checked;
                    w.4 += r.skipped;
                    if r.max_rel_error > w.1 {
                        w.1 = r.max_rel_error;
                        w.2 = si;
                    }
                }
                None => worst.push((name.clone(), r.max_rel_error, si, r.checked, r.skipped)),
            }
        }
    }
    let mut table = format!("{:<20}{:>14}{:>8}{:>10}{:>10}\n", "case", "max rel err", "seed", "checked", "skipped");
    let mut kv = String::new();
    for (name, err, seed, checked, skipped) in &worst {
        writeln!(table, "{name:<20}{err:>14.3e}{seed:>8}{checked:>10}{skipped:>10}").unwrap();
        writeln!(kv, "{name} = {err:.6e}").unwrap();
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    writeln!(table, "\n{} seeds, tolerance {GRAD_CHECK_TOLERANCE:e}, worst {max:.3e}", seeds.len()).unwrap();
    writeln!(kv, "seeds = {}\nmax_rel_error = {max:.6e}", seeds.len()).unwrap();
    write_text(&run.layout.path("grad_check/report.txt"), &table)?;
    write_text(&run.layout.path("grad_check/report.kv"), &kv)?;
    print!("{table}");
    run.produced("grad_check/report.txt");
    run.produced("grad_check/report.kv");
    if max >= GRAD_CHECK_TOLERANCE {
        return Err(CliError::Check(format!(
            "gradient check failed: max relative error {max:.3e} >= {GRAD_CHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
