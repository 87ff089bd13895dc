mod common;

use std::fs;
use std::process::Command;

use scenehoi::cli::{cmd_eval, cmd_gen, cmd_predict, cmd_train, load_model, load_split};
use scenehoi::datagen::load_annotations;
use scenehoi::evalkit::{evaluate, parse_records, records_to_string, Records, RECALL_KS};
use scenehoi::matchloss::Trainer;
use scenehoi::model::Model;
use scenehoi::nn::ParamGroup;
use scenehoi::Error;

use common::{oracle_records, overfit_gen, overfit_train, quick_run, small_model};

#[test]
fn gen_writes_split_sizes_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_run(dir.path(), 3);
    cfg.data.splits = [100, 20, 40];
    let first = cmd_gen(&cfg).unwrap();
    for (path, n) in [(&cfg.data.train, 100), (&cfg.data.val, 20), (&cfg.data.test, 40)] {
        assert_eq!(load_annotations(path).unwrap().1.len(), n);
    }
    assert_eq!(first.statistics[0].1.scenes, 100);
    assert_eq!(first.groups.head.len() + first.groups.body.len() + first.groups.tail.len(), 6);
    let again = cmd_gen(&cfg).unwrap();
    assert_eq!(first.files, again.files);
}

#[test]
fn gen_accepts_large_label_spaces() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_run(dir.path(), 0);
    cfg.gen.object_classes = 150;
    cfg.gen.relation_classes = 50;
    cfg.gen.action_classes = 25;
    cfg.model.object_classes = 150;
    cfg.model.relation_classes = 50;
    cfg.model.action_classes = 25;
    cfg.resolve().unwrap();
    cmd_gen(&cfg).unwrap();
    let (header, _) = load_annotations(&cfg.data.train).unwrap();
    assert_eq!((header.object_classes, header.relation_classes), (150, 50));
}

#[test]
fn missing_dataset_fails_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 0);
    assert!(matches!(cmd_train(&cfg, false), Err(Error::Config(_))));
    assert!(!cfg.output_dir.exists());
}

#[test]
fn mismatched_dataset_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 0);
    cmd_gen(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.object_classes = 9;
    other.gen.object_classes = 9;
    assert!(cmd_train(&other, false).is_err());
    assert!(!cfg.output_dir.exists());
}

#[test]
fn scene_graph_stage_leaves_interaction_weights_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_run(dir.path(), 1);
    cfg.train.stage2_epochs = 0;
    cmd_gen(&cfg).unwrap();
    let summary = cmd_train(&cfg, false).unwrap();
    let fresh = Model::new(cfg.model.clone(), cfg.seed()).unwrap();
    let (trained, _) = load_model(&cfg, &summary.checkpoint).unwrap();
    assert_eq!(fresh.group_digest(ParamGroup::Hoi), trained.group_digest(ParamGroup::Hoi));
    assert_ne!(fresh.group_digest(ParamGroup::Sgg), trained.group_digest(ParamGroup::Sgg));
    assert_eq!(summary.reports.len(), 1);
}

#[test]
fn overfit_run_cuts_loss_to_a_tenth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_run(dir.path(), 1);
    cfg.gen = overfit_gen(1);
    cfg.model = small_model();
    cfg.train = overfit_train();
    cfg.data.splits = [4, 0, 0];
    cfg.resolve().unwrap();
    cmd_gen(&cfg).unwrap();
    let summary = cmd_train(&cfg, false).unwrap();
    assert_eq!(summary.steps, 500);
    let scenes = load_split(&cfg.data.train, &cfg.model).unwrap();
    let before = Trainer::new(Model::new(cfg.model.clone(), 1).unwrap(), cfg.train.clone()).unwrap();
    let (model, _) = load_model(&cfg, &summary.checkpoint).unwrap();
    let after = Trainer::new(model, cfg.train.clone()).unwrap();
    let (l0, l1) = (before.evaluate_loss(&scenes).unwrap(), after.evaluate_loss(&scenes).unwrap());
    assert!(l1 <= 0.1 * l0, "loss {l0} -> {l1}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = quick_run(dir.path(), 5);
    cmd_gen(&full).unwrap();
    let mut full = full;
    full.train.stage2_epochs = 2;
    full.output_dir = dir.path().join("full");
    cmd_train(&full, false).unwrap();

    let mut part = full.clone();
    part.output_dir = dir.path().join("part");
    part.train.stage2_epochs = 1;
    cmd_train(&part, false).unwrap();
    part.train.stage2_epochs = 2;
    cmd_train(&part, true).unwrap();

    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&full.output_dir, "loss.csv"), read(&part.output_dir, "loss.csv"));
    assert_eq!(read(&full.output_dir, "checkpoint.ckpt"), read(&part.output_dir, "checkpoint.ckpt"));
}

#[test]
fn eval_scores_oracle_and_empty_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 2);
    cmd_gen(&cfg).unwrap();
    let test = load_split(&cfg.data.test, &cfg.model).unwrap();
    let oracle = dir.path().join("oracle.tsv");
    fs::write(&oracle, records_to_string(&oracle_records(&test))).unwrap();
    let m = cmd_eval(&cfg, None, Some(&oracle)).unwrap().metrics;
    for k in RECALL_KS {
        assert_eq!(m.constrained.recall[&k], 1.0);
        assert_eq!(m.unconstrained.recall[&k], 1.0);
    }
    assert_eq!(m.map_role.map, 1.0);

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let m = cmd_eval(&cfg, None, Some(&empty)).unwrap().metrics;
    for k in RECALL_KS {
        assert_eq!(m.constrained.recall[&k], 0.0);
        assert_eq!(m.constrained.mean_recall[&k], 0.0);
    }
    assert_eq!(m.map_role.map, 0.0);
    assert!(cfg.output_dir.join("eval.json").is_file());
}

#[test]
fn eval_matches_in_process_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 4);
    cmd_gen(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, false).unwrap().checkpoint;
    let report = cmd_eval(&cfg, Some(&ckpt), None).unwrap();

    let test = load_split(&cfg.data.test, &cfg.model).unwrap();
    let train = load_split(&cfg.data.train, &cfg.model).unwrap();
    let (model, _) = load_model(&cfg, &ckpt).unwrap();
    let mut records = Records::default();
    for s in &test {
        let p = model.predict(&s.image, s.index).unwrap();
        records.rel.insert(s.index, p.rel);
        records.hoi.extend(p.hoi);
    }
    assert_eq!(report.metrics, evaluate(&records, &test, &train, &cfg.eval.settings).unwrap());
    let written = fs::read_to_string(cfg.output_dir.join("predictions.tsv")).unwrap();
    assert_eq!(parse_records(&written).unwrap(), records);
}

#[test]
fn eval_refuses_other_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 0);
    cmd_gen(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, false).unwrap().checkpoint;
    let mut other = cfg.clone();
    other.model.ablation.alignment = false;
    assert!(matches!(cmd_eval(&other, Some(&ckpt), None), Err(Error::DigestMismatch { .. })));
}

#[test]
fn predict_prints_k_parseable_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 6);
    cmd_gen(&cfg).unwrap();
    let ckpt = cmd_train(&cfg, false).unwrap().checkpoint;
    let scene = &load_split(&cfg.data.test, &cfg.model).unwrap()[0];
    let png = dir.path().join("scene.png");
    scene.image.save(&png).unwrap();

    let text = cmd_predict(&cfg, &ckpt, &png, 42, 5).unwrap();
    assert_eq!(text, cmd_predict(&cfg, &ckpt, &png, 42, 5).unwrap());
    assert_eq!(text.lines().filter(|l| l.starts_with("REL\t")).count(), 5);
    let parsed = parse_records(&text).unwrap();
    assert_eq!(parsed.rel[&42].len(), 5);
    assert_eq!(records_to_string(&parsed).lines().count(), text.lines().count());

    let small = dir.path().join("small.png");
    scenehoi::features::Image::filled(8, 8, [0.0; 3]).save(&small).unwrap();
    assert!(matches!(cmd_predict(&cfg, &ckpt, &small, 0, 5), Err(Error::Image(_))));
}

#[test]
fn binary_exit_codes_and_output_root() {
    let bin = env!("CARGO_BIN_EXE_scenehoi");
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_run(dir.path(), 0);
    let file = dir.path().join("run.toml");
    fs::write(&file, cfg.to_toml()).unwrap();

    let run = |args: &[&str]| Command::new(bin).args(args).env_remove(scenehoi::cli::OUTPUT_ROOT_ENV).output().unwrap();
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["gen"]).status.code(), Some(1), "seed is mandatory");
    let cfg_arg = file.to_str().unwrap();
    assert_eq!(run(&["gen", "--config", cfg_arg]).status.code(), Some(0));

    let root = dir.path().join("elsewhere");
    let out = Command::new(bin)
        .args(["train", "--config", cfg_arg])
        .env(scenehoi::cli::OUTPUT_ROOT_ENV, &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("checkpoint.ckpt").is_file());

    let ckpt = root.join("checkpoint.ckpt");
    let mismatch = run(&["eval", "--config", cfg_arg, "--no-vl", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(mismatch.status.code(), Some(2));
    let warn = run(&["gen", "--config", cfg_arg, "--no-vl", "--vl-mode", "pool"]);
    assert!(String::from_utf8_lossy(&warn.stderr).contains("warning"));
}
