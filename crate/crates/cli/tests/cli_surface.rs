//! End-to-end exercise of the command surface at tiny scale: train, eval,
//! report, attention inspection, scene export, and the on-disk formats.

use std::path::{Path, PathBuf};

use graphdet::checkpoint;
use graphdet::detector::{evaluate_split, HrParams, Split};
use graphdet::dumps;
use graphdet_cli as cli;

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("graphdet-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config_text() -> &'static str {
    "seed=11\n\
     image_h=32\nimage_w=32\n\
     scenes_train=3\nscenes_val=2\n\
     objects_min=1\nobjects_max=2\n\
     size_min=8\nsize_max=16\n\
     n_per_gt=2\nn_bg=1\n\
     channels=8\nfeature_dim=16\nroi_size=3\nmlp_hidden=4\n\
     canonical_size=8\n\
     steps=6\neval_interval=3\n"
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, tiny_config_text()).unwrap();
    path
}

#[test]
fn train_eval_report_roundtrip() {
    let dir = workdir("pipeline");
    let cfg_path = write_config(&dir);
    let cfg = cli::load_config(&cfg_path, None).unwrap();

    let out = dir.join("run");
    cli::cmd_train(&cfg, &out).unwrap();
    assert!(out.join("checkpoint.ckpt").exists());
    assert!(out.join("metrics.txt").exists());
    assert!(out.join("params.txt").exists());

    let report_a = dir.join("a.csv");
    let a = cli::cmd_eval(
        &cfg,
        &out.join("checkpoint.ckpt"),
        Split::Val,
        Some(&report_a),
    )
    .unwrap();
    let parsed = dumps::parse_ap_report(&std::fs::read_to_string(&report_a).unwrap()).unwrap();
    assert_eq!(parsed, a);

    // Identical reports with distinct class counts: all deltas zero, slope
    // exactly zero.
    let fixed = dir.join("fixed.csv");
    std::fs::write(
        &fixed,
        "class_id,gt_count,ap50,ap\n1,9,0.9,0.5\n2,4,0.8,0.4\n3,2,0.7,0.3\nall,15,0.8,0.4\n",
    )
    .unwrap();
    let table = cli::cmd_report(&fixed, &fixed, Some(&dir.join("plot.csv"))).unwrap();
    assert!(table.contains("mean_delta_ap50=+0.000000"));
    let plot = std::fs::read_to_string(dir.join("plot.csv")).unwrap();
    assert!(plot
        .lines()
        .any(|l| l.starts_with("fit_ap50_vs_count,,,0,")));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn metric_logs_are_bitwise_identical_across_runs() {
    let dir = workdir("determinism");
    let cfg_path = write_config(&dir);
    let cfg = cli::load_config(&cfg_path, None).unwrap();
    cli::cmd_train(&cfg, &dir.join("run1")).unwrap();
    cli::cmd_train(&cfg, &dir.join("run2")).unwrap();
    let a = std::fs::read(dir.join("run1/metrics.txt")).unwrap();
    let b = std::fs::read(dir.join("run2/metrics.txt")).unwrap();
    assert_eq!(a, b);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn checkpoint_reload_reproduces_forward_outputs_bitwise() {
    let dir = workdir("ckpt");
    let cfg_path = write_config(&dir);
    let cfg = cli::load_config(&cfg_path, None).unwrap();
    cli::cmd_train(&cfg, &dir.join("run")).unwrap();

    let ckpt = dir.join("run/checkpoint.ckpt");
    let mut params_a = HrParams::init(&cfg, cfg.seed).unwrap();
    checkpoint::load_model(&ckpt, &mut params_a).unwrap();
    let report_a = evaluate_split(&params_a, &cfg, Split::Val).unwrap();

    // Save the loaded (f32-precision) weights again and reload: forward
    // results must be identical bit for bit.
    let ckpt2 = dir.join("again.ckpt");
    checkpoint::save_model(&ckpt2, &params_a).unwrap();
    let mut params_b = HrParams::init(&cfg, cfg.seed + 1).unwrap();
    checkpoint::load_model(&ckpt2, &mut params_b).unwrap();
    let report_b = evaluate_split(&params_b, &cfg, Split::Val).unwrap();
    assert_eq!(report_a, report_b);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_and_unknown_keys_are_named() {
    let dir = workdir("badcfg");
    let no_seed = dir.join("no_seed.cfg");
    std::fs::write(&no_seed, "lr=0.1\n").unwrap();
    let err = cli::load_config(&no_seed, None).unwrap_err();
    assert!(format!("{err:#}").contains("seed"), "{err:#}");

    let unknown = dir.join("unknown.cfg");
    std::fs::write(&unknown, "seed=1\nnot_a_key=2\n").unwrap();
    let err = cli::load_config(&unknown, None).unwrap_err();
    assert!(format!("{err:#}").contains("not_a_key"), "{err:#}");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn stage1_only_toggle_trains_and_evaluates() {
    let dir = workdir("ablation");
    let cfg_path = write_config(&dir);
    let mut cfg = cli::load_config(&cfg_path, None).unwrap();
    cfg.enable_stage2 = false;
    cli::cmd_train(&cfg, &dir.join("run")).unwrap();
    cli::cmd_eval(&cfg, &dir.join("run/checkpoint.ckpt"), Split::Train, None).unwrap();
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn attention_dump_has_expected_rows_and_stochastic_weights() {
    let dir = workdir("inspect");
    let cfg_path = write_config(&dir);
    let cfg = cli::load_config(&cfg_path, None).unwrap();
    cli::cmd_train(&cfg, &dir.join("run")).unwrap();

    let csv = cli::cmd_inspect_attention(
        &cfg,
        &dir.join("run/checkpoint.ckpt"),
        0,
        0,
        Some(&dir.join("attn.csv")),
    )
    .unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("graph,record,i,j"));
    // S=3 pixel graph: 9×9 weight rows plus 9×9 edge rows for that graph.
    let pixel_weight_rows = lines
        .iter()
        .filter(|l| l.starts_with("pixel,weight,"))
        .count();
    assert_eq!(pixel_weight_rows, 81);

    // Every weight row of every graph sums to one over its keys.
    for graph in ["pixel", "scale", "roi"] {
        let mut by_i: std::collections::BTreeMap<usize, f64> = Default::default();
        for l in &lines {
            let mut parts = l.split(',');
            if parts.next() != Some(graph) || parts.next() != Some("weight") {
                continue;
            }
            let i: usize = parts.next().unwrap().parse().unwrap();
            let _j = parts.next();
            let v: f64 = parts.next().unwrap().parse().unwrap();
            *by_i.entry(i).or_default() += v;
        }
        assert!(!by_i.is_empty(), "no weight rows for {graph}");
        for (i, sum) in by_i {
            assert!((sum - 1.0).abs() < 1e-9, "{graph} row {i} sums to {sum}");
        }
    }

    let err = cli::cmd_inspect_attention(&cfg, &dir.join("run/checkpoint.ckpt"), 0, 999, None)
        .unwrap_err();
    assert!(format!("{err:#}").contains("out of range"));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn synth_export_writes_png_and_sidecar() {
    let dir = workdir("export");
    let cfg_path = write_config(&dir);
    let cfg = cli::load_config(&cfg_path, None).unwrap();
    let n = cli::cmd_synth_export(&cfg, &dir.join("scenes"), Some(2)).unwrap();
    assert_eq!(n, 2);
    let png = std::fs::read(dir.join("scenes/scene_00000.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let sidecar = std::fs::read_to_string(dir.join("scenes/scene_00000.txt")).unwrap();
    for line in sidecar.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        let class_id: usize = fields[0].parse().unwrap();
        assert!((1..=3).contains(&class_id));
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn seed_override_changes_the_dataset() {
    let dir = workdir("override");
    let cfg_path = write_config(&dir);
    let base = cli::load_config(&cfg_path, None).unwrap();
    let overridden = cli::load_config(&cfg_path, Some(99)).unwrap();
    assert_eq!(base.seed, 11);
    assert_eq!(overridden.seed, 99);
    assert_ne!(
        base.scene_spec().manifest_hash(),
        overridden.scene_spec().manifest_hash()
    );
    std::fs::remove_dir_all(&dir).ok();
}
