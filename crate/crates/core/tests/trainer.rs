use modal_emu_core::data::{generate_split, DatasetSpec, ModalSample, SceneSpec};
use modal_emu_core::losses::BayesianLoss;
use modal_emu_core::metrics::relative_l1_histogram;
use modal_emu_core::trainer::{
    alignment_probe, derive_seed, evaluate, load_for_inference, load_model, parallel_map, preset,
    pseudo_head_variant, AblationGrid, Adam, Checkpoint, RowSpec, TrainConfig, Trainer, LOG_HEADER,
};
use modal_emu_core::{Error, Gradients, Tensor};
use serde_json::json;

fn tiny(extra: serde_json::Value) -> TrainConfig {
    let mut base = json!({
        "lr": 1e-3,
        "batch_size": 2,
        "epochs": 2,
        "seed": 3,
        "backbone_channels": [4, 4, 8],
        "convs_per_block": 1,
        "embed_dims": [16, 16, 16],
        "feature_channels": 8,
        "heads": 2,
        "prompt_len": 2,
    });
    let obj = base.as_object_mut().unwrap();
    for (k, v) in extra.as_object().unwrap() {
        obj.insert(k.clone(), v.clone());
    }
    TrainConfig::from_json(&base.to_string()).unwrap()
}

fn samples(n: usize, seed: u64) -> Vec<ModalSample> {
    let spec = DatasetSpec {
        train: n,
        val: 0,
        test: 0,
        scene: SceneSpec {
            count_range: (1, 8),
            ..SceneSpec::default()
        },
        illumination_range: (0.3, 1.0),
        seed,
    };
    generate_split(&spec, "train").unwrap()
}

#[test]
fn config_rejects_bad_values_and_unknown_fields() {
    for bad in [
        json!({"lr": 0.0}),
        json!({"batch_size": 0}),
        json!({"stride": 4}),
        json!({"crop_size": 12}),
        json!({"scma": false, "prompting_mode": "ap"}),
        json!({"learning_rate": 0.1}),
    ] {
        let r = TrainConfig::from_json(&bad.to_string());
        assert!(matches!(r, Err(Error::Config(_))), "{bad}");
    }
    let c = TrainConfig::from_json("{}").unwrap();
    assert_eq!(c.lr, 1e-5);
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut t = Trainer::new(tiny(json!({}))).unwrap();
    t.adam.lr = 0.0;
    let before = t.model.params.clone();
    let r = t.train_step(&samples(2, 1)).unwrap();
    assert!(r.l_bl > 0.0 && r.l_cl > 0.0 && r.grad_norm > 0.0);
    assert_eq!(r.l_total, r.l_bl + r.l_cl);
    for ((_, _, a), (_, _, b)) in t.model.params.iter().zip(before.iter()) {
        assert_eq!(a, b);
    }
    assert_eq!(t.step, 1);
}

#[test]
fn prompting_off_creates_no_prompts_and_no_consistency_term() {
    let mut t = Trainer::new(tiny(json!({"prompting_mode": "off"}))).unwrap();
    assert_eq!(t.model.num_prompt_params(), 0);
    assert!(t.model.params.iter().all(|(_, n, _)| !n.starts_with("prompts")));
    let r = t.train_step(&samples(2, 2)).unwrap();
    assert_eq!(r.l_cl, 0.0);
}

#[test]
fn prompting_adds_exactly_the_prompt_tensors() {
    let on = Trainer::new(tiny(json!({}))).unwrap().model;
    let off = Trainer::new(tiny(json!({"prompting_mode": "off"}))).unwrap().model;
    assert_eq!(on.params.len(), off.params.len() + 2);
    assert_eq!(on.num_params(), off.num_params() + on.num_prompt_params());
}

#[test]
fn prompting_off_gradients_are_inference_pass_gradients() {
    let cfg = tiny(json!({"prompting_mode": "off", "dropout": 0.0}));
    let batch = samples(3, 4);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let start = t.model.clone();
    t.train_step(&batch).unwrap();

    let bl = BayesianLoss::default();
    let mut grads = Gradients::for_store(&start.params);
    for s in &batch {
        let mut g = start.graph();
        let d = start.predict(&mut g, &s.rgb, &s.aux).unwrap();
        let l = bl.loss(&mut g, d, &s.points).unwrap();
        g.backward(l).unwrap();
        grads.merge(&g.param_grads().unwrap()).unwrap();
    }
    let mut params = start.params.clone();
    let mut adam = Adam::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    adam.step(&mut params, &grads).unwrap();
    for ((_, n, a), (_, _, b)) in t.model.params.iter().zip(params.iter()) {
        assert_eq!(a, b, "{n}");
    }
}

#[test]
fn repeated_steps_on_a_fixed_batch_reduce_the_loss() {
    let mut t = Trainer::new(tiny(json!({"batch_size": 4}))).unwrap();
    let batch = samples(4, 5);
    let losses: Vec<f64> = (0..51).map(|_| t.train_step(&batch).unwrap().l_total).collect();
    let decreases = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreases >= 45, "{decreases} of 50 steps decreased: {losses:?}");
}

#[test]
fn training_is_deterministic() {
    let data = samples(6, 6);
    let run = |threads: &str| {
        std::env::set_var("MODAL_EMU_THREADS", threads);
        let mut t = Trainer::new(tiny(json!({"flip_prob": 0.5}))).unwrap();
        let logs = t.fit(&data, &data[..2], None).unwrap();
        (logs, t.model.params)
    };
    let (a, pa) = run("1");
    let (b, pb) = run("3");
    std::env::remove_var("MODAL_EMU_THREADS");
    assert_eq!(a, b);
    for ((_, _, x), (_, _, y)) in pa.iter().zip(pb.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let data = samples(4, 7);
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(tiny(json!({"epochs": 3}))).unwrap();
    straight.fit(&data, &[], None).unwrap();

    let mut first = Trainer::new(tiny(json!({"epochs": 3}))).unwrap();
    first.run_epoch(&data).unwrap();
    let path = dir.path().join("a.ckpt");
    first.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, first.checkpoint());
    let mut resumed = Trainer::from_checkpoint(&loaded).unwrap();
    assert_eq!((resumed.epoch, resumed.step), (1, 2));
    resumed.fit(&data, &[], None).unwrap();
    for ((_, n, x), (_, _, y)) in straight.model.params.iter().zip(resumed.model.params.iter()) {
        assert_eq!(x, y, "{n}");
    }
    assert_eq!(straight.adam.t, resumed.adam.t);
}

#[test]
fn corrupt_checkpoints_are_parse_errors() {
    let t = Trainer::new(tiny(json!({}))).unwrap();
    let bytes = t.checkpoint().to_bytes();
    let p = std::path::Path::new("x.ckpt");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic, p), Err(Error::Parse { offset: 0, .. })));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad_version, p), Err(Error::Parse { offset: 8, .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Parse { .. })));
    let mut tampered = bytes.clone();
    let at = 36 + 4 + 2; // inside the config JSON
    tampered[at] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&tampered, p), Err(Error::Parse { .. })));
}

#[test]
fn fit_writes_logs_and_checkpoints() {
    let data = samples(4, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(json!({}))).unwrap();
    let logs = t.fit(&data, &data[..2], Some(dir.path())).unwrap();
    assert_eq!(logs.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(logs.iter().all(|l| l.val_game0.is_some()));
    let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.epoch, 2);
    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.best_val, t.best_val);
}

#[test]
fn evaluation_smoke_and_determinism() {
    let model = Trainer::new(tiny(json!({}))).unwrap().model;
    let data = samples(3, 9);
    let a = evaluate(&model, &data[..1], 8).unwrap();
    assert!(a.table.game.iter().all(|v| v.is_finite()) && a.table.rmse.is_finite());
    let b = evaluate(&model, &data, 8).unwrap();
    let c = evaluate(&model, &data, 8).unwrap();
    assert_eq!(b.table, c.table);
    assert!(matches!(evaluate(&model, &[], 8), Err(Error::Contract(_))));
}

#[test]
fn inference_checkpoint_loading_ignores_emulation_parts() {
    let mut t = Trainer::new(tiny(json!({}))).unwrap();
    let data = samples(4, 10);
    t.run_epoch(&data).unwrap();
    let ckpt = t.checkpoint();
    let lean = load_for_inference(&ckpt).unwrap();
    let full = load_model(&ckpt).unwrap();
    assert!(lean.prompts.is_none());
    assert_eq!(full.num_params() - lean.num_params(), full.num_prompt_params());
    assert_eq!(evaluate(&lean, &data, 8).unwrap().table, evaluate(&full, &data, 8).unwrap().table);
}

#[test]
fn pseudo_head_variant_requires_prompting_and_the_reduction() {
    let data = samples(2, 11);
    let off = Trainer::new(tiny(json!({"prompting_mode": "off"}))).unwrap().model;
    assert!(matches!(pseudo_head_variant(&off, &data, 8), Err(Error::Contract(_))));
    let plain = Trainer::new(tiny(json!({}))).unwrap().model;
    assert!(matches!(pseudo_head_variant(&plain, &data, 8), Err(Error::Contract(_))));
    assert!(TrainConfig::from_json(&json!({"prompting_mode": "off", "use_pseudo_in_head": true}).to_string()).is_err());
}

#[test]
fn pseudo_head_with_real_only_reduction_equals_standard_path() {
    let mut model = Trainer::new(tiny(json!({"use_pseudo_in_head": true}))).unwrap().model;
    let (r, t) = model.pseudo_reduce.clone().unwrap();
    for conv in [r, t] {
        let mut w = vec![0.0; 8 * 16];
        for c in 0..8 {
            w[c * 16 + c] = 1.0;
        }
        *model.params.get_mut(conv.weight) = Tensor::new(vec![8, 16, 1, 1], w).unwrap();
    }
    let (standard, variant) = pseudo_head_variant(&model, &samples(2, 12), 8).unwrap();
    assert_eq!(standard, variant);
}

#[test]
fn alignment_probe_outputs() {
    let model = Trainer::new(tiny(json!({}))).unwrap().model;
    let data = samples(3, 13);
    let probe = alignment_probe(&model, &data, 0.05).unwrap();
    assert_eq!(probe.rgb.ratios.len(), 3);
    assert!(probe.to_csv().starts_with("modality,bin_start,bin_end,percent\n"));
    assert!(probe.to_text().contains("median"));
    let off = Trainer::new(tiny(json!({"prompting_mode": "off"}))).unwrap().model;
    assert!(matches!(alignment_probe(&off, &data, 0.05), Err(Error::Contract(_))));

    let real: Vec<Tensor> = data.iter().map(|s| s.aux.clone()).collect();
    let same = relative_l1_histogram(&real, &real, 0.05).unwrap();
    assert_eq!(same.percent, vec![100.0]);
}

#[test]
fn modality_weights_stay_in_the_unit_interval() {
    let mut t = Trainer::new(tiny(json!({"lr": 0.05}))).unwrap();
    let data = samples(2, 14);
    for _ in 0..5 {
        t.train_step(&data).unwrap();
    }
    let (a, b) = t.model.head.weights(&t.model.params);
    assert!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0);
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let mut t = Trainer::new(tiny(json!({}))).unwrap();
    let id = t.model.params.id("head.out.bias").unwrap();
    t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
    match t.train_step(&samples(1, 15)) {
        Err(Error::Numeric(m)) => assert!(m.contains("head.out.bias"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn helpers_preserve_order_and_mix_seeds() {
    let items: Vec<u64> = (0..37).collect();
    assert_eq!(parallel_map(&items, |i, &v| i as u64 * 100 + v), items.iter().map(|v| v * 101).collect::<Vec<_>>());
    assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    assert_eq!(derive_seed(&[42, 3, 0]), derive_seed(&[42, 3, 0]));
}

#[test]
fn ablation_grid_resolution() {
    let grid = AblationGrid::from_json(
        &json!({"base": {"lr": 1e-3}, "rows": ["baseline", {"name": "mine", "overrides": {"prompting_mode": "ip"}}]})
            .to_string(),
    )
    .unwrap();
    let rows = grid.resolve().unwrap();
    assert_eq!(rows[0].0, "baseline");
    assert!(!rows[0].1.scma && !rows[0].1.mcma);
    assert_eq!(rows[1].1.lr, 1e-3);
    assert!(preset("+ap").is_some() && preset("nope").is_none());
    assert!(AblationGrid::from_json(r#"{"rows": ["nope"]}"#).is_err());
    assert!(AblationGrid::from_json(r#"{"rows": []}"#).is_err());
    assert!(AblationGrid::from_json(r#"{"rows": ["baseline"], "extra": 1}"#).is_err());
    assert!(matches!(grid.rows[1], RowSpec::Custom { .. }));
}
