use super::*;
use ndarray::{Array1, Array3, Array4};

/// Toy architecture that fits a 1x8x64 input.
fn toy_arch() -> ArchConfig {
    ArchConfig { time_kernel: 3, band_kernel: 2, channels: [2, 2, 3, 3, 4, 4], dropout: 0.5 }
}

fn toy_input(seed: u64) -> Array3<f64> {
    let noise = crate::dsp::white_noise(8 * 64, 16000, seed);
    Array3::from_shape_vec((1, 8, 64), noise.samples).unwrap()
}

/// Full objective the analytic gradients differentiate: sum of squared
/// errors plus the L2 term lambda/2 * ||params||^2.
fn objective(model: &Model<f64>, x: &Array3<f64>, y: &Array1<f64>, l2: f64, seed: u64) -> f64 {
    let (out, _) = model.forward(x, Mode::Train, seed);
    let (loss, _) = loss_and_grad(&out, y);
    loss + 0.5 * l2 * model.param_sq_norm()
}

fn numeric_gradient(
    model: &mut Model<f64>,
    x: &Array3<f64>,
    y: &Array1<f64>,
    l2: f64,
    seed: u64,
) -> Vec<f64> {
    let eps = 1e-4;
    let base = model.params_flat();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        model.set_params_flat(&p);
        let plus = objective(model, x, y, l2, seed);
        p[i] = base[i] - eps;
        model.set_params_flat(&p);
        let minus = objective(model, x, y, l2, seed);
        grad.push((plus - minus) / (2.0 * eps));
    }
    model.set_params_flat(&base);
    grad
}

fn analytic_gradient(model: &Model<f64>, x: &Array3<f64>, y: &Array1<f64>, l2: f64, seed: u64) -> Vec<f64> {
    let (out, cache) = model.forward(x, Mode::Train, seed);
    let (_, dout) = loss_and_grad(&out, y);
    model.backward(&cache, dout, l2).flat()
}

/// Smallest |pre-activation| across all conv layers: the margin between the
/// finite-difference probe and the nearest ReLU kink.
fn min_abs_preactivation(model: &Model<f64>, x: &Array3<f64>) -> f64 {
    let mut min = f64::INFINITY;
    let mut planes = x.clone();
    for layer in &model.layers {
        match layer {
            Layer::Conv(conv) => {
                let linear = Conv2d { relu: false, ..conv.clone() };
                let (pre, _) = linear.forward(&planes);
                for v in pre.iter() {
                    min = min.min(v.abs());
                }
                planes = if conv.relu { pre.mapv(|v| v.max(0.0)) } else { pre };
            }
            Layer::AvgPool { kh, kw } => {
                planes = super::layers::avg_pool_forward(&planes, *kh, *kw);
            }
            // Everything after flatten is linear; no more kinks.
            _ => break,
        }
    }
    min
}

fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        assert!(
            (a - n).abs() / denom < tol,
            "param {i}: analytic {a:.8e} vs numeric {n:.8e}"
        );
    }
}

#[test]
fn full_stack_gradient_matches_finite_differences() {
    // Find a seed where no conv pre-activation sits near the ReLU kink, so
    // the central difference does not straddle it.
    let y = Array1::from_vec(vec![0.3]);
    let mut chosen = None;
    for seed in 0..32u64 {
        let model =
            build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), seed).unwrap();
        let x = toy_input(seed + 100);
        if min_abs_preactivation(&model, &x) > 1e-3 {
            chosen = Some((model, x, seed));
            break;
        }
    }
    let (mut model, x, seed) = chosen.expect("a kink-free seed exists");
    let analytic = analytic_gradient(&model, &x, &y, 1e-3, seed);
    let numeric = numeric_gradient(&mut model, &x, &y, 1e-3, seed);
    assert_grads_close(&analytic, &numeric, 1e-4);
}

#[test]
fn joint_head_gradient_matches_finite_differences() {
    let y = Array1::from_vec(vec![0.2, -0.4]);
    let mut chosen = None;
    for seed in 0..32u64 {
        let model = build_model::<f64>(1, 8, 64, TargetMode::Joint, &toy_arch(), seed).unwrap();
        let x = toy_input(seed + 300);
        if min_abs_preactivation(&model, &x) > 1e-3 {
            chosen = Some((model, x, seed));
            break;
        }
    }
    let (mut model, x, seed) = chosen.expect("a kink-free seed exists");
    let analytic = analytic_gradient(&model, &x, &y, 0.0, seed);
    let numeric = numeric_gradient(&mut model, &x, &y, 0.0, seed);
    assert_grads_close(&analytic, &numeric, 1e-4);
}

#[test]
fn zero_loss_gradient_leaves_only_the_regularizer() {
    let model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 3).unwrap();
    let x = toy_input(9);
    let (_, cache) = model.forward(&x, Mode::Train, 7);
    let lambda = 0.37;
    let grads = model.backward(&cache, Array1::zeros(1), lambda);
    let params = model.params_flat();
    for (g, p) in grads.flat().iter().zip(params.iter()) {
        assert_eq!(*g, lambda * p, "gradient is not exactly lambda*w");
    }
    // Doubling lambda doubles the regularizer gradient.
    let grads2 = model.backward(&cache, Array1::zeros(1), 2.0 * lambda);
    for (g2, g) in grads2.flat().iter().zip(grads.flat().iter()) {
        assert!((g2 - 2.0 * g).abs() <= 1e-15 * g.abs().max(1.0));
    }
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let input = toy_input(5);
    let conv = Conv2d {
        weights: Array4::from_shape_vec((1, 1, 1, 1), vec![1.0]).unwrap(),
        bias: Array1::zeros(1),
        relu: false,
    };
    let (out, _) = conv.forward(&input);
    assert_eq!(out, input);
}

#[test]
fn zero_input_zero_bias_gives_zero_output() {
    let model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 11).unwrap();
    let x = Array3::zeros((1, 8, 64));
    let out = model.forward_eval(&x);
    assert_eq!(out[0], 0.0);
}

#[test]
fn eval_forward_is_deterministic() {
    let model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 13).unwrap();
    let x = toy_input(14);
    let a = model.forward_eval(&x);
    let b = model.forward_eval(&x);
    assert_eq!(a, b);
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = build_model::<f32>(1, 20, 1997, TargetMode::Volume, &ArchConfig::default(), 5).unwrap();
    let b = build_model::<f32>(1, 20, 1997, TargetMode::Volume, &ArchConfig::default(), 5).unwrap();
    let c = build_model::<f32>(1, 20, 1997, TargetMode::Volume, &ArchConfig::default(), 6).unwrap();
    assert_eq!(a.params_flat(), b.params_flat());
    assert_ne!(a.params_flat(), c.params_flat());
}

#[test]
fn output_dims_per_target_mode() {
    let m = build_model::<f32>(1, 20, 1997, TargetMode::Volume, &ArchConfig::default(), 0).unwrap();
    assert_eq!(m.output_dim(), 1);
    let m = build_model::<f32>(1, 40, 1997, TargetMode::Joint, &ArchConfig::default(), 0).unwrap();
    assert_eq!(m.output_dim(), 2);
}

#[test]
fn too_small_input_reports_offending_layer() {
    // Two band pools on 2 bands cannot work: the error names the layer.
    match build_model::<f32>(1, 2, 1997, TargetMode::Volume, &ArchConfig::default(), 0) {
        Err(NnError::BadShape { layer, .. }) => assert!(layer >= 8, "layer {layer}"),
        other => panic!("expected BadShape, got {other:?}"),
    }
}

#[test]
fn repeated_time_pooling_trace() {
    // floor(n/2) four times from 1997.
    let mut planes = Array3::<f64>::zeros((1, 1, 1997));
    let mut dims = Vec::new();
    for _ in 0..4 {
        planes = super::layers::avg_pool_forward(&planes, 1, 2);
        dims.push(planes.dim().2);
    }
    assert_eq!(dims, vec![998, 499, 249, 124]);
}

#[test]
fn avg_pool_preserves_window_means_exactly() {
    let input = toy_input(21);
    let pooled = super::layers::avg_pool_forward(&input, 2, 4);
    let (_, h_out, w_out) = pooled.dim();
    // Mean over pooled equals mean over the covered input region.
    let mut covered = 0.0;
    for h in 0..h_out * 2 {
        for w in 0..w_out * 4 {
            covered += input[(0, h, w)];
        }
    }
    let covered_mean = covered / (h_out as f64 * 2.0 * w_out as f64 * 4.0);
    let pooled_mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    assert!((covered_mean - pooled_mean).abs() < 1e-12);
}

#[test]
fn dropout_mask_expectation_is_unbiased() {
    // Averaging many train-mode passes approaches the eval output: dropout
    // is the last stochastic element and everything after it is linear.
    let model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 31).unwrap();
    let x = toy_input(32);
    let eval_out = model.forward_eval(&x)[0];
    let n = 10_000;
    let mut acc = 0.0;
    for i in 0..n {
        let (out, _) = model.forward(&x, Mode::Train, 1000 + i);
        acc += out[0];
    }
    let avg = acc / n as f64;
    assert!(
        (avg - eval_out).abs() <= 0.02 * eval_out.abs(),
        "avg {avg} vs eval {eval_out}"
    );
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 41).unwrap();
    let before = model.params_flat();
    let mut adam = Adam::new(&model);
    let (_, cache) = model.forward(&toy_input(42), Mode::Train, 0);
    let mut grads = model.backward(&cache, Array1::zeros(1), 0.0);
    grads.scale(0.0);
    adam.step(&mut model, &grads, 1e-3).unwrap();
    assert_eq!(model.params_flat(), before);
}

#[test]
fn adam_first_step_magnitude_is_lr() {
    // With bias correction, m_hat = g and v_hat = g^2 at t = 1, so the
    // update is lr * g / (|g| + eps) which is essentially lr.
    let mut model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 51).unwrap();
    let before = model.params_flat();
    let mut adam = Adam::new(&model);
    let x = toy_input(52);
    let (out, cache) = model.forward(&x, Mode::Train, 3);
    let (_, dout) = loss_and_grad(&out, &Array1::from_vec(vec![out[0] + 1.0]));
    let grads = model.backward(&cache, dout, 0.0);
    let flat = grads.flat();
    adam.step(&mut model, &grads, 1e-3).unwrap();
    let after = model.params_flat();
    for ((b, a), g) in before.iter().zip(after.iter()).zip(flat.iter()) {
        if g.abs() > 1e-4 {
            let delta = (a - b).abs();
            assert!((delta - 1e-3).abs() < 1e-6, "delta {delta}");
        }
    }
}

#[test]
fn adam_updates_are_deterministic() {
    let run = || {
        let mut model =
            build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 61).unwrap();
        let mut adam = Adam::new(&model);
        for step in 0..5 {
            let x = toy_input(100 + step);
            let (out, cache) = model.forward(&x, Mode::Train, step);
            let (_, dout) = loss_and_grad(&out, &Array1::from_vec(vec![1.0]));
            let grads = model.backward(&cache, dout, 1e-4);
            adam.step(&mut model, &grads, 1e-3).unwrap();
        }
        model.params_flat()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 71).unwrap();
    let mut adam = Adam::new(&model);
    let (_, cache) = model.forward(&toy_input(72), Mode::Train, 0);
    let mut grads = model.backward(&cache, Array1::from_vec(vec![1.0]), 0.0);
    if let LayerGrads::Dense { dw, .. } = &mut grads.layers.last_mut().unwrap() {
        dw[(0, 0)] = f64::NAN;
    }
    assert!(matches!(
        adam.step(&mut model, &grads, 1e-3),
        Err(NnError::NonFiniteGradient { .. })
    ));
}

#[test]
fn l2_alone_shrinks_weight_norm_each_step() {
    let mut model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &toy_arch(), 81).unwrap();
    let mut adam = Adam::new(&model);
    let (_, cache) = model.forward(&toy_input(82), Mode::Train, 0);
    let mut last = model.param_sq_norm();
    for _ in 0..5 {
        let grads = model.backward(&cache, Array1::zeros(1), 1e-2);
        adam.step(&mut model, &grads, 1e-4).unwrap();
        let now = model.param_sq_norm();
        assert!(now < last, "norm did not shrink: {now} vs {last}");
        last = now;
    }
}

fn constant_label_source(n: usize, label: f64, seed: u64) -> VecSource<f64> {
    let samples = (0..n)
        .map(|i| (toy_input(seed + i as u64), Array1::from_vec(vec![label])))
        .collect();
    VecSource { samples }
}

#[test]
fn training_fits_a_constant_label() {
    let train_src = constant_label_source(12, 0.8, 500);
    let val_src = constant_label_source(4, 0.8, 900);
    let config = TrainConfig {
        epochs: 80,
        batch_size: 4,
        initial_lr: 1e-2,
        l2_lambda: 0.0,
        lr_patience: 30,
        seed: 7,
        arch: toy_arch(),
        ..TrainConfig::default()
    };
    let mut model = build_model::<f64>(1, 8, 64, TargetMode::Volume, &config.arch, 7).unwrap();
    let mut adam = Adam::new(&model);
    let history =
        train(&mut model, &mut adam, &train_src, &val_src, &config, |_| TrainSignal::Continue)
            .unwrap();
    let final_val = history.last().unwrap().val_loss;
    let best_val = history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best_val < 1e-3, "val loss {final_val}, best {best_val}");
}

#[test]
fn joint_training_decreases_both_targets_early() {
    // Full-batch, dropout disabled: the per-epoch loss is the exact
    // objective. Labels are offset from the untrained predictions so both
    // targets start with comparable errors and small-lr descent must shrink
    // each of them.
    let config = TrainConfig {
        epochs: 10,
        batch_size: 12,
        initial_lr: 1e-3,
        l2_lambda: 0.0,
        seed: 3,
        arch: ArchConfig { dropout: 0.0, ..toy_arch() },
        ..TrainConfig::default()
    };
    let mut model = build_model::<f64>(1, 8, 64, TargetMode::Joint, &config.arch, 3).unwrap();
    let samples: Vec<(Array3<f64>, Array1<f64>)> = (0..12)
        .map(|i| {
            let x = toy_input(700 + i as u64);
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let init = model.forward_eval(&x);
            let y = Array1::from_vec(vec![init[0] + 0.8 + 0.5 * mean, init[1] - 0.8 - 0.5 * mean]);
            (x, y)
        })
        .collect();
    let train_src = VecSource { samples: samples.clone() };
    let val_src = VecSource { samples };
    let mut adam = Adam::new(&model);
    let history =
        train(&mut model, &mut adam, &train_src, &val_src, &config, |_| TrainSignal::Continue)
            .unwrap();
    // Adam's normalized steps do not promise per-epoch monotonicity of each
    // shared-trunk target, but over the first 10 epochs both must improve
    // and the summed objective must descend.
    let first = &history[0];
    let last = history.last().unwrap();
    assert!(last.train_loss < first.train_loss, "total loss did not descend");
    for t in 0..2 {
        assert!(
            last.train_loss_per_target[t] < first.train_loss_per_target[t],
            "target {t} did not improve: {:?} -> {:?}",
            first.train_loss_per_target,
            last.train_loss_per_target
        );
    }
}

#[test]
fn grid_search_contract() {
    let train_src = constant_label_source(8, 0.5, 2000);
    let val_src = constant_label_source(4, 0.5, 3000);
    let base = TrainConfig { arch: toy_arch(), seed: 1, ..TrainConfig::default() };

    let single = GridAxes {
        batch_sizes: vec![4],
        initial_lrs: vec![1e-3],
        l2_lambdas: vec![0.0],
    };
    let result = grid_search::<f64, _, _>(
        &base, &single, 3, (1, 8, 64), TargetMode::Volume, &train_src, &val_src,
    )
    .unwrap();
    assert_eq!(result.runs.len(), 1);
    assert_eq!(result.best.batch_size, 4);

    let grid = GridAxes {
        batch_sizes: vec![4, 8],
        initial_lrs: vec![1e-2, 1e-3],
        l2_lambdas: vec![0.0],
    };
    let result = grid_search::<f64, _, _>(
        &base, &grid, 3, (1, 8, 64), TargetMode::Volume, &train_src, &val_src,
    )
    .unwrap();
    assert_eq!(result.runs.len(), 4);
    let best_val = result
        .runs
        .iter()
        .find(|(c, _)| *c == result.best)
        .map(|(_, v)| *v)
        .unwrap();
    for (_, v) in &result.runs {
        assert!(best_val <= *v);
    }
}

#[test]
fn scaler_round_trips() {
    let scaler = TargetScaler::JointMax { volume_absmax: 4.0, rt60_absmax: 1.2 };
    let scaled = scaler.scale(TargetMode::Joint, 3.0, 0.6);
    assert!((scaled[0] - 0.75).abs() < 1e-12);
    assert!((scaled[1] - 0.5).abs() < 1e-12);
    let (vol, rt) = scaler.unscale(TargetMode::Joint, &[0.75, 0.5]);
    assert!((vol.unwrap() - 3.0).abs() < 1e-12);
    assert!((rt.unwrap() - 0.6).abs() < 1e-12);

    let scaler = TargetScaler::Standardized { mean: 2.0, std: 0.5 };
    let scaled = scaler.scale(TargetMode::Volume, 2.5, 0.0);
    assert!((scaled[0] - 1.0).abs() < 1e-12);
    let (vol, _) = scaler.unscale(TargetMode::Volume, &[1.0]);
    assert!((vol.unwrap() - 2.5).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model =
        build_model::<f32>(1, 8, 64, TargetMode::Volume, &toy_arch(), 91).unwrap();
    let mut adam = Adam::new(&model);
    // A few updates so moments are nonzero.
    for step in 0..3 {
        let x32 = toy_input(200 + step).mapv(|v| v as f32);
        let (out, cache) = model.forward(&x32, Mode::Train, step);
        let (_, dout) = loss_and_grad(&out, &Array1::from_vec(vec![0.5f32]));
        let grads = model.backward(&cache, dout, 1e-4);
        adam.step(&mut model, &grads, 1e-3).unwrap();
    }
    let meta = CheckpointMeta {
        arch: toy_arch(),
        input_shape: (1, 8, 64),
        target_mode: TargetMode::Volume,
        recipe: crate::features::Recipe::PlusPhase,
        scaler: TargetScaler::Standardized { mean: 1.5, std: 0.7 },
        feature_stats: crate::features::FeatureStats::default(),
        train_config: TrainConfig { arch: toy_arch(), ..TrainConfig::default() },
        adam_step: adam.step,
        tensors: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rfck");
    save_checkpoint(&path, &Checkpoint { meta, model: model.clone(), adam: adam.clone() }).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model.params_flat(), model.params_flat());
    assert_eq!(loaded.adam.step, adam.step);
    assert_eq!(loaded.meta.scaler, TargetScaler::Standardized { mean: 1.5, std: 0.7 });

    // Saving the loaded checkpoint again produces identical bytes.
    let path2 = dir.path().join("m2.rfck");
    save_checkpoint(&path2, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

    let forward_a = model.forward_eval(&toy_input(5).mapv(|v| v as f32));
    let forward_b = loaded.model.forward_eval(&toy_input(5).mapv(|v| v as f32));
    assert_eq!(forward_a, forward_b);
}
