use dkl_core::data::{gaussian_mixture, split, Dataset};
use dkl_core::losses::LossConfig;
use dkl_core::model::MlpParams;
use dkl_core::trainers::{
    evaluate, trajectory_gap, train_adversarial, train_baseline, train_distill, AttackConfig, EpochMetrics,
    LossKind, TrainConfig, TrainOutcome,
};
use dkl_core::Result;

fn quiet(_: &EpochMetrics) -> Result<()> {
    Ok(())
}

fn data(seed: u64) -> (Dataset, Dataset) {
    let ds = gaussian_mixture(5, 6, 60, 0.5, seed).unwrap();
    split(&ds, 0.25, seed).unwrap()
}

fn cfg(loss: LossKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        hidden: vec![24],
        loss,
        epochs,
        batch_size: 32,
        lr: 0.05,
        ..TrainConfig::default()
    }
}

fn max_param_gap(a: &MlpParams, b: &MlpParams) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .flat_map(|(x, y)| {
            x.weight
                .iter()
                .zip(y.weight.iter())
                .chain(x.bias.iter().zip(y.bias.iter()))
                .map(|(u, v)| (u - v).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn teacher(train: &Dataset, test: &Dataset) -> ndarray::Array2<f64> {
    let t = train_baseline(&cfg(LossKind::CeOnly, 6), train, test, &mut quiet).unwrap();
    t.params.logits(train.features()).unwrap()
}

#[test]
fn separable_data_is_fit() {
    let ds = gaussian_mixture(4, 4, 50, 0.01, 3).unwrap();
    let (train, test) = split(&ds, 0.2, 3).unwrap();
    let out = train_baseline(&cfg(LossKind::CeOnly, 15), &train, &test, &mut quiet).unwrap();
    assert!(out.metrics.last().unwrap().train_acc >= 0.99);
}

#[test]
fn untrained_models_are_near_chance() {
    let ds = gaussian_mixture(4, 6, 200, 0.5, 1).unwrap();
    let mean: f64 = (0..10)
        .map(|seed| {
            let p = MlpParams::init(&[6, 24, 4], seed).unwrap();
            evaluate(&p, &ds, None, 0).unwrap().clean_acc
        })
        .sum::<f64>()
        / 10.0;
    assert!((mean - 0.25).abs() < 0.1, "mean untrained accuracy {mean}");
}

#[test]
fn distill_without_divergence_weight_is_baseline() {
    let (train, test) = data(1);
    let t = teacher(&train, &test);
    let base = train_baseline(&cfg(LossKind::CeOnly, 2), &train, &test, &mut quiet).unwrap();
    let mut c = cfg(LossKind::Dkl, 2);
    c.loss_config = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        ..LossConfig::dkl()
    };
    let kd = train_distill(&c, &train, &test, t.view(), &mut quiet).unwrap();
    assert_eq!(kd.params.to_bytes(), base.params.to_bytes());
}

#[test]
fn distill_kl_and_dkl_follow_the_same_trajectory() {
    let (train, test) = data(2);
    let t = teacher(&train, &test);
    let kl = train_distill(&cfg(LossKind::Kl, 1), &train, &test, t.view(), &mut quiet).unwrap();
    let dkl = train_distill(&cfg(LossKind::Dkl, 1), &train, &test, t.view(), &mut quiet).unwrap();
    let gap = max_param_gap(&kl.params, &dkl.params);
    assert!(gap < 1e-8, "parameter gap {gap:e}");
    assert!(trajectory_gap(&kl.metrics, &dkl.metrics).unwrap() < 1e-6);
    assert!(kl.metrics[0].agreement.unwrap() > 0.5);
}

#[test]
fn wmse_reaches_the_student_only_with_break_asymmetry() {
    let (train, test) = data(3);
    let t = teacher(&train, &test);
    let ikl = train_distill(&cfg(LossKind::Ikl, 2), &train, &test, t.view(), &mut quiet).unwrap();
    for m in &ikl.metrics {
        assert!(m.wmse_grad_min.unwrap() > 0.0, "epoch {}", m.epoch);
    }
    let dkl = train_distill(&cfg(LossKind::Dkl, 2), &train, &test, t.view(), &mut quiet).unwrap();
    for m in &dkl.metrics {
        assert_eq!(m.wmse_grad_max, Some(0.0));
    }
}

fn adv_cfg(loss: LossKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        attack: AttackConfig {
            iterations: 3,
            ..AttackConfig::default()
        },
        ..cfg(loss, epochs)
    }
}

#[test]
fn adversarial_without_divergence_weight_is_baseline() {
    let (train, test) = data(4);
    let base = train_baseline(&cfg(LossKind::CeOnly, 2), &train, &test, &mut quiet).unwrap();
    let mut c = adv_cfg(LossKind::Kl, 2);
    c.lambda = 0.0;
    let adv = train_adversarial(&c, &train, &test, &mut quiet).unwrap();
    assert_eq!(adv.params.to_bytes(), base.params.to_bytes());
}

#[test]
fn adversarial_kl_and_dkl_follow_the_same_trajectory() {
    let (train, test) = data(5);
    let run = |loss| -> TrainOutcome { train_adversarial(&adv_cfg(loss, 2), &train, &test, &mut quiet).unwrap() };
    let kl = run(LossKind::Kl);
    let dkl = run(LossKind::Dkl);
    let gap = max_param_gap(&kl.params, &dkl.params);
    assert!(gap < 1e-8, "parameter gap {gap:e}");
    assert!(trajectory_gap(&kl.metrics, &dkl.metrics).unwrap() < 1e-6);
}

#[test]
fn ikl_adversarial_keeps_valid_stats_and_is_deterministic() {
    let (train, test) = data(6);
    let mut c = TrainConfig::ikl_at();
    c.hidden = vec![24];
    c.epochs = 2;
    c.attack.iterations = 3;
    let a = train_adversarial(&c, &train, &test, &mut quiet).unwrap();
    let b = train_adversarial(&c, &train, &test, &mut quiet).unwrap();
    assert_eq!(a.metrics, b.metrics);
    for row in a.stats.rows().rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    for m in &a.metrics {
        assert!(m.robust_acc.unwrap() <= m.test_acc);
        assert!(m.wmse.is_some());
    }
}

#[test]
fn more_attack_iterations_hurt_an_undefended_model_more() {
    for seed in 0..5 {
        let (train, test) = data(10 + seed);
        let model = train_baseline(&cfg(LossKind::CeOnly, 8), &train, &test, &mut quiet).unwrap();
        let atk = |iterations| AttackConfig {
            iterations,
            ..AttackConfig::default()
        };
        let one = evaluate(&model.params, &test, Some(&atk(1)), seed).unwrap();
        let ten = evaluate(&model.params, &test, Some(&atk(10)), seed).unwrap();
        assert!(
            ten.robust_acc.unwrap() < one.robust_acc.unwrap(),
            "seed {seed}: {:?} vs {:?}",
            ten,
            one
        );
    }
}
