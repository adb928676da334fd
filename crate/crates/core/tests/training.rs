use daycast_core::datastore::{generate_synthetic, DatasetBundle, SyntheticConfig};
use daycast_core::exec::Execution;
use daycast_core::forecaster::{
    decode_model, encode_model, evaluate_gnll, make_windows, predict_batch, train, z_score,
    ForecastError, Hyperparams, SplitSpec, TrainedModel, WindowSet,
};

fn small_hp(seed: u64) -> Hyperparams {
    Hyperparams {
        history_horizon: 48,
        lstm_hidden: 8,
        fc_hidden: 8,
        max_epochs: 4,
        batch_size: 16,
        stride_hours: 12,
        seed,
        ..Default::default()
    }
}

fn windows(bundle: &DatasetBundle, hp: &Hyperparams) -> WindowSet {
    make_windows(bundle, hp, &SplitSpec::chronological(bundle, hp, 2, 0.2)).unwrap()
}

fn synthetic(cfg: SyntheticConfig) -> DatasetBundle {
    generate_synthetic(&cfg).unwrap()
}

#[test]
fn absurd_learning_rate_diverges() {
    let b = synthetic(SyntheticConfig {
        n_days: 20,
        ..Default::default()
    });
    let hp = Hyperparams {
        learning_rate: 1e3,
        max_epochs: 10,
        ..small_hp(1)
    };
    let set = windows(&b, &hp);
    match train(&set.train, &set.validation, &set.scaler, &hp) {
        Err(ForecastError::Divergence { epoch }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn constant_load_predicts_the_constant() {
    let b = synthetic(SyntheticConfig {
        n_days: 20,
        daily_amplitude: 0.0,
        temp_sensitivity: 0.0,
        noise_sigma_weekday: 0.0,
        noise_sigma_weekend: 0.0,
        rare_event_count: 0,
        ..Default::default()
    });
    let c = b.load.values[0];
    assert!(b.load.values.iter().all(|&v| v == c));
    let hp = small_hp(2);
    let set = windows(&b, &hp);
    let m = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
    for r in predict_batch(&m, &set.test, 0.95, Execution::Sequential).unwrap() {
        assert!(
            r.steps.iter().all(|s| (s.mu - c).abs() <= 0.02 * c),
            "{:?}",
            r.mu()
        );
    }
}

#[test]
fn noise_free_sinusoid_drops_two_nats() {
    let b = synthetic(SyntheticConfig {
        n_days: 40,
        temp_sensitivity: 0.0,
        weekly_weekend_factor: 1.0,
        noise_sigma_weekday: 0.0,
        noise_sigma_weekend: 0.0,
        rare_event_count: 0,
        ..Default::default()
    });
    let hp = Hyperparams {
        stride_hours: 3,
        max_epochs: 30,
        learning_rate: 3e-3,
        seed: 3,
        ..Default::default()
    };
    let mut set = make_windows(&b, &hp, &SplitSpec::chronological(&b, &hp, 0, 0.1)).unwrap();
    set.train.truncate(200);
    assert_eq!(set.train.len(), 200);
    let m = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
    // both sides with dropout off; logged epochs after 0 average dropout-on minibatches
    let first = m.log.initial().unwrap().train_gnll;
    let last = evaluate_gnll(&m, &set.train, Execution::default()).unwrap();
    assert!(first - last >= 2.0, "epoch 0 {first}, final {last}");
}

#[test]
fn same_seed_same_weights_and_file() {
    let b = synthetic(SyntheticConfig {
        n_days: 20,
        ..Default::default()
    });
    let hp = small_hp(4);
    let set = windows(&b, &hp);
    let a = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
    let c = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
    assert_eq!(a.params, c.params);
    assert_eq!(encode_model(&a).unwrap(), encode_model(&c).unwrap());
    assert_eq!(a.id(), c.id());
    let other = train(&set.train, &set.validation, &set.scaler, &small_hp(5)).unwrap();
    assert_ne!(a.params, other.params);
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_and_sequential_training_agree_bitwise() {
    use daycast_core::forecaster::{train_with, TrainOptions};

    let b = synthetic(SyntheticConfig {
        n_days: 20,
        ..Default::default()
    });
    let hp = small_hp(6);
    let set = windows(&b, &hp);
    let run = |execution| {
        let opts = TrainOptions {
            execution,
            ..Default::default()
        };
        encode_model(&train_with(&set.train, &set.validation, &set.scaler, &hp, &opts).unwrap())
            .unwrap()
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn model_file_round_trips() {
    let b = synthetic(SyntheticConfig {
        n_days: 20,
        ..Default::default()
    });
    let hp = small_hp(7);
    let set = windows(&b, &hp);
    let m = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
    let bytes = encode_model(&m).unwrap();
    let back = decode_model(&bytes).unwrap();
    assert_eq!(back.id(), m.id());
    assert_eq!(back.params, m.params);
    assert_eq!(back.log, m.log);
    assert_eq!(encode_model(&back).unwrap(), bytes);
    assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let newer = text.replacen("\"format_version\":1", "\"format_version\":99", 1);
    assert!(matches!(
        decode_model(newer.as_bytes()),
        Err(ForecastError::UnsupportedVersion { found: 99, .. })
    ));
}

/// Multiplying the load by a power of two leaves every scaled value, and so
/// the whole loss trajectory, unchanged bit for bit; other factors agree to
/// rounding.
#[test]
fn load_scale_does_not_change_scaled_training() {
    let b = synthetic(SyntheticConfig {
        n_days: 20,
        ..Default::default()
    });
    let hp = small_hp(8);
    let trajectory = |k: f64| {
        let mut scaled = b.clone();
        scaled.load.values.iter_mut().for_each(|v| *v *= k);
        let set = windows(&scaled, &hp);
        let m = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
        m.log
            .epochs
            .iter()
            .map(|e| (e.train_gnll, e.validation_gnll))
            .collect::<Vec<_>>()
    };
    let base = trajectory(1.0);
    assert_eq!(trajectory(8.0), base);
    for (x, y) in trajectory(3.7).iter().zip(&base) {
        assert!(
            (x.0 - y.0).abs() < 1e-8 && (x.1 - y.1).abs() < 1e-8,
            "{x:?} vs {y:?}"
        );
    }
}

#[test]
fn inference_is_repeatable_and_floored() {
    let b = synthetic(SyntheticConfig {
        n_days: 20,
        ..Default::default()
    });
    let hp = small_hp(9);
    let set = windows(&b, &hp);
    let m = train(&set.train, &set.validation, &set.scaler, &hp).unwrap();
    let once = predict_batch(&m, &set.test, 0.95, Execution::Sequential).unwrap();
    assert_eq!(
        once,
        predict_batch(&m, &set.test, 0.95, Execution::default()).unwrap()
    );

    // force the variance head's pre-activation to -1000
    let mut params = m.params.clone();
    params.tensors[8].column_mut(1).fill(0.0);
    params.tensors[9][[0, 1]] = -1000.0;
    let floored = TrainedModel::new(
        m.hyperparams.clone(),
        m.scaler.clone(),
        m.dims,
        params,
        m.log.clone(),
        m.provenance.clone(),
    )
    .unwrap();
    let r = &predict_batch(&floored, &set.test[..1], 0.95, Execution::Sequential).unwrap()[0];
    let load = m.scaler.index("load").unwrap();
    let sigma = m.scaler.inverse_spread(load, hp.variance_floor.sqrt());
    let z = z_score(0.95).unwrap();
    for s in &r.steps {
        assert!(s.sigma > 0.0);
        assert!((s.sigma - sigma).abs() <= 1e-9 * sigma);
        assert!(((s.upper - s.lower) - 2.0 * z * sigma).abs() <= 1e-9 * sigma);
    }
}
