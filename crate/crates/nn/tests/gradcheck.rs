use dwt_nn::gradcheck::{grad_check, standard_suite, Objective, WithObjective};
use dwt_nn::{Model, Tensor};

const SEEDS: u64 = 20;

#[test]
fn standard_suite_passes_on_twenty_seeds() {
    let mut worst: Vec<(String, f64, u64)> = Vec::new();
    for seed in 0..SEEDS {
        for (name, report) in standard_suite(seed).unwrap() {
            assert!(report.checked > 0, "{name} seed {seed}: nothing checked");
            assert!(
                report.max_rel_error < 1e-4,
                "{name} seed {seed}: {:.3e} at {}",
                report.max_rel_error,
                report.worst
            );
            match worst.iter_mut().find(|w| w.0 == name) {
                Some(w) if w.1 < report.max_rel_error => *w = (name, report.max_rel_error, seed),
                Some(_) => {}
                None => worst.push((name, report.max_rel_error, seed)),
            }
        }
    }
    for (name, err, seed) in worst {
        println!("{name:20} {err:.3e} (seed {seed})");
    }
}

#[test]
fn suite_covers_every_layer_kind_and_loss() {
    let names: Vec<String> = standard_suite(0).unwrap().into_iter().map(|(n, _)| n).collect();
    for want in [
        "conv5x5",
        "conv1x1",
        "relu",
        "avgpool2",
        "upsample2",
        "upsample_to",
        "bilinear_to",
        "concat",
        "unit_normalize",
        "softmax",
        "angular_mse_loss",
        "weighted_xent_loss",
        "direction_network",
        "watershed_network",
        "cascade",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

#[test]
fn report_is_deterministic_per_seed() {
    let a = standard_suite(3).unwrap();
    let b = standard_suite(3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identity_like_conv_is_near_exact() {
    let mut model: Model<f64> = Model::new(3);
    model.conv("id", 0, 1, 3, 3).unwrap();
    {
        let conv = model.convs_mut().next().unwrap();
        let w = conv.weight.value.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
    }
    let input = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
    let objective = Objective::random_linear([1, 3, 4, 4], 11);
    let mut target = WithObjective {
        model: &mut model,
        objective: &objective,
    };
    let report = grad_check(&mut target, &input, 1e-5, 64, 0).unwrap();
    assert_eq!(report.skipped, 0);
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}
