use lfp_core::config::{AppConfig, Preset};
use lfp_core::datagen::generate_samples;
use lfp_core::training::{mean_matting_loss, pretrain_propagating, train_three_stage, Stage, StepRecord, TrainConfig, TrainSink, Trainer};

fn tiny() -> AppConfig {
    AppConfig::preset(Preset::Tiny)
}

#[test]
fn context_loss_decreases_over_200_pretraining_steps() {
    let cfg = tiny();
    let net = cfg.network().unwrap();
    let data = generate_samples(&cfg.procedural_source(), 1, &cfg.augment_config()).unwrap();
    let mut t = Trainer::new(&net, net.init_params(0).unwrap(), cfg.train_config()).unwrap();
    let before = t.params.digest(|n| n.starts_with("matting."));
    t.begin_stage(Stage::Pretrain).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.train_step(&data[0]).unwrap().1.unwrap()).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(t.params.digest(|n| n.starts_with("matting.")), before);
}

#[test]
fn desk_scale_three_stage_run_lowers_the_matting_loss() {
    let cfg = tiny();
    let net = cfg.network().unwrap();
    let data = generate_samples(&cfg.procedural_source(), 16, &cfg.augment_config()).unwrap();
    assert!(data.iter().all(|s| s.inner_side() == 64));
    let tc = TrainConfig {
        pretrain_epochs: 1,
        stage_epochs: [2, 1, 1],
        ..cfg.train_config()
    };
    let mut log = Vec::new();
    let mut sink = TrainSink {
        log: &mut log,
        checkpoint_dir: None,
    };
    let (pre, _) = pretrain_propagating(&net, net.init_params(0).unwrap(), &data, &tc, cfg.to_json(), &mut sink).unwrap();
    let initial = mean_matting_loss(&net, &pre.params, &data, &tc.loss).unwrap();
    let (done, stages) = train_three_stage(&net, &pre, &data, &tc, &mut sink).unwrap();
    let last = mean_matting_loss(&net, &done.params, &data, &tc.loss).unwrap();
    assert!(last < initial, "{initial} -> {last}");
    assert_eq!(stages.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![32, 16, 16]);
    assert_eq!(done.step, 16 + 64);
    let records: Vec<StepRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 80);
    assert!(records.iter().all(|r| r.total.is_finite()));
}

#[test]
fn same_seed_gives_identical_parameters_and_checkpoints() {
    let cfg = tiny();
    let net = cfg.network().unwrap();
    assert_eq!(net.init_params(9).unwrap(), net.init_params(9).unwrap());
    assert_ne!(net.init_params(9).unwrap(), net.init_params(10).unwrap());
    let data = generate_samples(&cfg.procedural_source(), 2, &cfg.augment_config()).unwrap();
    let run = || {
        let mut log = Vec::new();
        let mut sink = TrainSink {
            log: &mut log,
            checkpoint_dir: None,
        };
        let tc = TrainConfig {
            stage_epochs: [1, 1, 1],
            ..cfg.train_config()
        };
        let (pre, _) = pretrain_propagating(&net, net.init_params(1).unwrap(), &data, &tc, cfg.to_json(), &mut sink).unwrap();
        let (c, _) = train_three_stage(&net, &pre, &data, &tc, &mut sink).unwrap();
        (c.to_bytes().unwrap(), log)
    };
    assert_eq!(run(), run());
}

#[test]
fn periodic_checkpoints_are_written() {
    let cfg = tiny();
    let net = cfg.network().unwrap();
    let data = generate_samples(&cfg.procedural_source(), 3, &cfg.augment_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        checkpoint_every: 2,
        pretrain_epochs: 2,
        ..cfg.train_config()
    };
    let mut log = Vec::new();
    let mut sink = TrainSink {
        log: &mut log,
        checkpoint_dir: Some(dir.path()),
    };
    pretrain_propagating(&net, net.init_params(0).unwrap(), &data, &tc, serde_json::Value::Null, &mut sink).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec!["step-00000002.ckpt", "step-00000004.ckpt", "step-00000006.ckpt"]);
}
