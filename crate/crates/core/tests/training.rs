use modeforge::data::{Point2, TrackWindow};
use modeforge::evaluation::{best_of_errors, evaluate_model, window_errors, MetricMode, Partition};
use modeforge::forecast::{
    train_baseline, train_ideal_cgan, train_vanilla_gan, BaselineTrainConfig, ModeWeights, Predictor,
    WeightSetting,
};
use modeforge::gan::{adversarial_step, generator_objective, sample_z, Batch, GanConfig, GanState};
use modeforge::nn::{AdversarialForm, EncoderKind};
use modeforge::selfcond::{extract_features, intra_cluster_metrics, train_selfcond, wrong_mode_probe, SelfCondTrainConfig};
use modeforge::synth::{generate_benchmark, BenchmarkSpec};
use modeforge::weights::{compute_weights, ClusterStats, Lambdas, WeightTable};
use modeforge::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench(per_template: usize, seed: u64) -> Vec<TrackWindow> {
    let spec = BenchmarkSpec::desk_default(seed).balanced(per_template, seed);
    generate_benchmark(&spec).unwrap().0
}

fn tiny_gan(epochs: usize, batch_size: usize) -> GanConfig {
    GanConfig {
        epochs,
        batch_size,
        hidden_dim: 8,
        latent_dim: 4,
        d_hidden_dim: 16,
        feature_dim: 8,
        seed: 3,
        ..GanConfig::default()
    }
}

fn tiny_selfcond(k: usize, epochs: usize) -> SelfCondTrainConfig {
    SelfCondTrainConfig {
        gan: tiny_gan(epochs, 16),
        k,
        recluster_every: 1,
        condition_discriminator: false,
    }
}

fn uniform_table(k: usize) -> WeightTable {
    let stats: Vec<ClusterStats> = (0..k)
        .map(|i| ClusterStats {
            cluster_id: i,
            ade: Some(1.0),
            fde: Some(1.0),
            count: 10,
        })
        .collect();
    compute_weights(&stats, Lambdas::default()).unwrap()
}

fn fresh_state(windows: &[TrackWindow], cfg: &GanConfig) -> GanState {
    let (t, h) = (windows[0].obs.len(), windows[0].fut.len());
    GanState::new(cfg.generator(t, h, 0), cfg.discriminator(t + h, 0), cfg, 1, 2).unwrap()
}

#[test]
fn one_step_updates_both_networks() {
    let windows = bench(2, 1);
    let cfg = tiny_gan(1, 4);
    let mut state = fresh_state(&windows, &cfg);
    let (g0, d0) = (state.g.clone(), state.d.clone());
    let z = sample_z(&mut ChaCha8Rng::seed_from_u64(0), 4, cfg.latent_dim);
    let batch = Batch::new(&windows, &[0, 3, 5, 8], z);
    let l = adversarial_step(&mut state, &batch, 1.0, AdversarialForm::NonSaturating, 0).unwrap();
    assert!(l.d_loss.is_finite() && l.g_loss.is_finite());
    for (name, m) in &g0.tensors {
        assert_ne!(&state.g.tensors[name], m, "generator tensor {name} unchanged");
    }
    assert_ne!(state.d.tensors, d0.tensors);
}

#[test]
fn zero_l2_weight_leaves_only_the_adversarial_term() {
    let windows = bench(2, 2);
    let cfg = tiny_gan(1, 4);
    let state = fresh_state(&windows, &cfg);
    let z = sample_z(&mut ChaCha8Rng::seed_from_u64(1), 4, cfg.latent_dim);
    let batch = Batch::new(&windows, &[1, 2, 3, 4], z);
    for form in [AdversarialForm::NonSaturating, AdversarialForm::Minimax] {
        let (adv, l2, total) = generator_objective(&state, &batch, 0.0, form);
        assert_eq!(total, adv);
        assert!(l2 > 0.0);
        let (adv2, l2b, total2) = generator_objective(&state, &batch, 2.5, form);
        assert_eq!((adv2, l2b), (adv, l2));
        assert!((total2 - (adv + 2.5 * l2)).abs() < 1e-12);
    }
}

#[test]
fn selfcond_smoke_run() {
    let windows = bench(10, 4);
    assert_eq!(windows.len(), 50);
    let out = train_selfcond(&windows, &tiny_selfcond(3, 2)).unwrap();
    let counts = out.model.clustering.counts();
    assert_eq!(counts.len(), 3);
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    assert_eq!(counts.iter().sum::<usize>(), 50);
    assert_eq!(out.log.steps.len(), 2 * 50usize.div_ceil(16));
    assert!(out.log.steps.iter().all(|s| s.d_loss.is_some_and(f64::is_finite) && s.g_loss.is_finite()));
    assert_eq!(out.log.epochs.len(), 2);
}

#[test]
fn selfcond_is_deterministic() {
    let windows = bench(6, 5);
    let cfg = tiny_selfcond(3, 2);
    let a = train_selfcond(&windows, &cfg).unwrap();
    let b = train_selfcond(&windows, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
}

#[test]
fn features_follow_the_discriminator() {
    let windows = bench(4, 6);
    let model = train_selfcond(&windows, &tiny_selfcond(2, 1)).unwrap().model;
    let empty = extract_features(&model.d_cfg, &model.d, &[], None).unwrap();
    assert_eq!(empty.shape(), (0, model.d_cfg.feature_dim));
    let f = extract_features(&model.d_cfg, &model.d, &windows, None).unwrap();
    let refs: Vec<&TrackWindow> = windows.iter().collect();
    let full = modeforge::nn::full_matrix(&refs);
    let (direct, _) = model.d_cfg.evaluate(&model.d, &full, None).unwrap();
    assert_eq!(f, direct);
    assert_eq!(f, extract_features(&model.d_cfg, &model.d, &windows, None).unwrap());
}

#[test]
fn intra_cluster_counts_partition_the_windows() {
    let windows = bench(8, 7);
    let model = train_selfcond(&windows, &tiny_selfcond(4, 1)).unwrap().model;
    let ids = model.assign(&windows).unwrap();
    let stats = intra_cluster_metrics(&model, &windows, &ids, 9, MetricMode::Mean).unwrap();
    assert_eq!(stats.iter().map(|s| s.count).sum::<usize>(), windows.len());
    for s in &stats {
        assert_eq!(s.ade.is_some(), s.count > 0);
    }
}

#[test]
fn single_cluster_matches_overall_metrics() {
    let windows = bench(6, 8);
    let model = train_selfcond(&windows, &tiny_selfcond(1, 1)).unwrap().model;
    let ids = vec![0; windows.len()];
    let stats = intra_cluster_metrics(&model, &windows, &ids, 4, MetricMode::Mean).unwrap();
    let report = evaluate_model(&model, 0, &windows, &[Partition::by_label(&windows)], 4, 1, MetricMode::Mean).unwrap();
    assert!((stats[0].ade.unwrap() - report.overall.ade.unwrap()).abs() < 1e-12);
    assert!((stats[0].fde.unwrap() - report.overall.fde.unwrap()).abs() < 1e-12);
    assert_eq!(stats[0].count, report.overall.n);
}

#[test]
fn single_mode_ideal_ignores_the_assignment() {
    let windows = bench(4, 9);
    let model = train_selfcond(&windows, &tiny_selfcond(1, 1)).unwrap().model;
    let ideal = model.predict(&windows, 12).unwrap();
    let fixed = model.predict_with_modes(&windows, &vec![0; windows.len()], 12).unwrap();
    assert_eq!(ideal, fixed);
    assert!(matches!(wrong_mode_probe(&model, &windows, 1, 1, MetricMode::Mean), Err(Error::Config(_))));
}

#[test]
fn uniform_weights_reproduce_vanilla_training() {
    let windows = bench(10, 10);
    let cfg = tiny_gan(10, 10);
    let table = uniform_table(3);
    let ids: Vec<usize> = (0..windows.len()).map(|i| i % 3).collect();
    let weights = ModeWeights {
        table: &table,
        cluster_ids: &ids,
        cluster_first: false,
        normalize_loss_weights: true,
    };
    let (_, vanilla) = train_vanilla_gan(&windows, &cfg, WeightSetting::None, None).unwrap();
    assert_eq!(vanilla.steps.len(), 50);
    for setting in [WeightSetting::Wl2, WeightSetting::Wb, WeightSetting::Wl2wb] {
        let (_, log) = train_vanilla_gan(&windows, &cfg, setting, Some(weights)).unwrap();
        assert_eq!(log.steps.len(), vanilla.steps.len());
        for (a, b) in log.steps.iter().zip(&vanilla.steps) {
            assert!((a.g_loss - b.g_loss).abs() <= 1e-9, "{setting:?} step {}", a.step);
            assert!((a.d_loss.unwrap() - b.d_loss.unwrap()).abs() <= 1e-9);
        }
    }
}

#[test]
fn zero_weight_cluster_never_reaches_a_batch() {
    let mut windows = bench(6, 11);
    let ids: Vec<usize> = (0..windows.len()).map(|i| i % 2).collect();
    for (w, &c) in windows.iter_mut().zip(&ids) {
        if c == 1 {
            w.fut[0] = Point2::new(1e6, 1e6);
        }
    }
    let table = WeightTable {
        lambdas: Lambdas::default(),
        weights: vec![1.0, 0.0],
        probs: vec![1.0, 0.0],
        terms: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    };
    let weights = ModeWeights {
        table: &table,
        cluster_ids: &ids,
        cluster_first: false,
        normalize_loss_weights: true,
    };
    let max_l2 = |setting, weights| {
        let (_, log) = train_vanilla_gan(&windows, &tiny_gan(5, 8), setting, weights).unwrap();
        log.steps.iter().map(|s| s.g_l2).fold(0.0, f64::max)
    };
    assert!(max_l2(WeightSetting::Wb, Some(weights)) < 1e3);
    assert!(max_l2(WeightSetting::None, None) > 1e10);
}

#[test]
fn weighted_settings_require_weights() {
    let windows = bench(2, 12);
    for setting in [WeightSetting::Wl2, WeightSetting::Wb, WeightSetting::Wl2wb] {
        let err = train_vanilla_gan(&windows, &tiny_gan(1, 4), setting, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

#[test]
fn gan_smoke_on_imbalanced_benchmark() {
    let spec = BenchmarkSpec::desk_default(3);
    let (windows, _) = generate_benchmark(&spec).unwrap();
    let (_, log) = train_vanilla_gan(&windows, &tiny_gan(1, 64), WeightSetting::None, None).unwrap();
    assert_eq!(log.steps.len(), 1000usize.div_ceil(64));
    assert!(log.steps.iter().all(|s| s.d_loss.is_some() && s.g_adv.is_some()));
}

#[test]
fn baseline_overfits_a_few_samples() {
    let windows: Vec<TrackWindow> = bench(2, 13);
    assert_eq!(windows.len(), 10);
    let cfg = BaselineTrainConfig {
        epochs: 500,
        batch_size: 128,
        lr: 5e-3,
        ..BaselineTrainConfig::default()
    };
    let (model, _) = train_baseline(&windows, &cfg).unwrap();
    let errs = window_errors(&windows, &model.predict(&windows, 0).unwrap(), MetricMode::Mean).unwrap();
    let ade = errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64;
    assert!(ade < 0.05, "train ADE {ade}");
    let (again, _) = train_baseline(&windows, &cfg).unwrap();
    assert_eq!(again.params, model.params);
}

fn linear_windows(n: usize) -> Vec<TrackWindow> {
    (0..n)
        .map(|i| {
            let v = Point2::new(0.4 + 0.01 * i as f64, 0.05 - 0.005 * i as f64);
            TrackWindow {
                source_id: format!("lin-{i}"),
                label: "linear".into(),
                origin: Point2::new(i as f64, 0.0),
                obs: vec![v; 8],
                fut: vec![v; 12],
            }
        })
        .collect()
}

#[test]
fn baseline_loss_decreases_on_linear_motion() {
    let windows = linear_windows(16);
    let cfg = BaselineTrainConfig {
        epochs: 20,
        batch_size: 16,
        hidden_dim: 8,
        mlp_dim: 16,
        ..BaselineTrainConfig::default()
    };
    let full_loss = |epochs: usize| {
        let (m, _) = train_baseline(&windows, &BaselineTrainConfig { epochs, ..cfg.clone() }).unwrap();
        let p = m.predict(&windows, 0).unwrap();
        let fut = modeforge::nn::fut_matrix(&windows.iter().collect::<Vec<_>>());
        p.data.iter().zip(&fut.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / windows.len() as f64
    };
    let losses: Vec<f64> = (1..=20).map(full_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{losses:?}");
    }
    assert!(losses[19] < losses[0]);
}

fn three_label_windows() -> Vec<TrackWindow> {
    let mut spec = BenchmarkSpec::desk_default(14).balanced(6, 14);
    spec.templates.truncate(3);
    generate_benchmark(&spec).unwrap().0
}

#[test]
fn ideal_cgan_conditions_on_labels() {
    let windows = three_label_windows();
    let (model, _) = train_ideal_cgan(&windows, &tiny_gan(1, 8)).unwrap();
    assert_eq!(model.meta.generator.cond_dim, 3);
    assert_eq!(model.meta.labels, ["arc-left", "arc-right", "straight"]);

    let base = model.predict(&windows, 5).unwrap();
    let mut relabeled = windows.clone();
    for w in &mut relabeled {
        w.label = if w.label == "straight" { "arc-left".into() } else { "straight".into() };
    }
    let flipped = model.predict(&relabeled, 5).unwrap();
    assert!(base.data.iter().zip(&flipped.data).any(|(a, b)| (a - b).abs() > 1e-8));

    let mut unknown = windows.clone();
    unknown[0].label = "u-turn".into();
    assert!(matches!(model.predict(&unknown, 5), Err(Error::InvalidInput(_))));
}

#[test]
fn ideal_cgan_is_equivariant_to_label_order() {
    let windows = three_label_windows();
    let (model, _) = train_ideal_cgan(&windows, &tiny_gan(1, 8)).unwrap();
    let perm = [2usize, 0, 1];
    let mut permuted = model.clone();
    permuted.meta.labels = perm.iter().map(|&i| model.meta.labels[i].clone()).collect();
    let wx = permuted.params.tensors.get_mut("enc.wx").unwrap();
    let orig = model.params.tensors["enc.wx"].clone();
    for (new_slot, &old_slot) in perm.iter().enumerate() {
        wx.row_mut(2 + new_slot).copy_from_slice(orig.row(2 + old_slot));
    }
    let a = model.predict(&windows, 8).unwrap();
    let b = permuted.predict(&windows, 8).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn best_of_one_is_the_single_draw() {
    let windows = bench(4, 15);
    let (model, _) = train_vanilla_gan(&windows, &tiny_gan(1, 8), WeightSetting::None, None).unwrap();
    let single = window_errors(&windows, &model.predict(&windows, 21).unwrap(), MetricMode::Mean).unwrap();
    assert_eq!(best_of_errors(&model, &windows, 21, 1, MetricMode::Mean).unwrap(), single);
    let best = best_of_errors(&model, &windows, 21, 4, MetricMode::Mean).unwrap();
    assert!(best.iter().zip(&single).all(|(b, s)| b.0 <= s.0));
    assert!(best_of_errors(&model, &windows, 21, 0, MetricMode::Mean).is_err());
}

#[test]
fn gan_config_rejects_an_encoder_without_room_for_modes() {
    let windows = bench(4, 16);
    let mut cfg = tiny_selfcond(5, 1);
    cfg.gan.feature_dim = 4;
    cfg.gan.encoder = EncoderKind::Mlp;
    assert!(matches!(train_selfcond(&windows, &cfg), Err(Error::Config(_))));
}
