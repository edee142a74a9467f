//! Command implementations behind the `graphdet` binary. Each command is a
//! plain function so integration tests can drive the full surface without
//! spawning processes.

use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use graphdet::checkpoint;
use graphdet::checks::{self, CheckKnobs};
use graphdet::detector::{evaluate_split, inspect_attention, train_loop, HrParams, Split};
use graphdet::dumps;
use graphdet::eval::{delta_report, format_param_report, param_count_report, ApReport};
use graphdet::runcfg::RunConfig;
use graphdet::synth::generate_scene;

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg =
        RunConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => bail!("unknown split {other:?}; expected train or val"),
    }
}

/// Train, then write checkpoint, metric log, resolved config, and the
/// parameter-count report into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let result = train_loop(cfg)?;
    checkpoint::save_model(&out_dir.join("checkpoint.ckpt"), &result.params)?;
    std::fs::write(out_dir.join("metrics.txt"), result.log.join("\n") + "\n")?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    let counts = param_count_report(&result.params);
    std::fs::write(out_dir.join("params.txt"), format_param_report(&counts))?;
    println!(
        "trained {} steps; artifacts in {}",
        cfg.steps,
        out_dir.display()
    );
    Ok(())
}

/// Evaluate a checkpoint on one split; optionally write the report CSV.
pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<ApReport> {
    let mut params = HrParams::init(cfg, cfg.seed)?;
    checkpoint::load_model(ckpt, &mut params)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let report = evaluate_split(&params, cfg, split)?;
    let csv = dumps::ap_report_csv(&report);
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(report)
}

/// ΔAP table between two report files plus regression plot data.
pub fn cmd_report(base: &Path, new: &Path, out: Option<&Path>) -> Result<String> {
    let read = |p: &Path| -> Result<ApReport> {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(dumps::parse_ap_report(&text)?)
    };
    let a = read(base)?;
    let b = read(new)?;
    let delta = delta_report(&a, &b)?;
    let mut table = String::from("class_id gt_count delta_ap50 delta_ap\n");
    for &(class_id, gt_count, d50, dap) in &delta.per_class {
        table.push_str(&format!(
            "{class_id:<8} {gt_count:<8} {d50:<+10.4} {dap:<+10.4}\n"
        ));
    }
    table.push_str(&format!(
        "mean_delta_ap50={:+.6} mean_delta_ap={:+.6}\n",
        b.mean_ap50 - a.mean_ap50,
        b.mean_ap - a.mean_ap
    ));
    table.push_str(&format!(
        "fit ap50~count: slope={:.6e} intercept={:.6e}\n",
        delta.fit_ap50_count.slope, delta.fit_ap50_count.intercept
    ));
    table.push_str(&format!(
        "fit ap50~ln(count): slope={:.6e} intercept={:.6e}\n",
        delta.fit_ap50_logcount.slope, delta.fit_ap50_logcount.intercept
    ));
    if let Some(path) = out {
        std::fs::write(path, dumps::plot_data_csv(&delta))?;
    }
    print!("{table}");
    Ok(table)
}

/// Dump the three graphs' attention matrices and edge attributes for one
/// RoI of one scene.
pub fn cmd_inspect_attention(
    cfg: &RunConfig,
    ckpt: &Path,
    scene_index: u64,
    roi_index: usize,
    out: Option<&Path>,
) -> Result<String> {
    let mut params = HrParams::init(cfg, cfg.seed)?;
    checkpoint::load_model(ckpt, &mut params)?;
    let dump = inspect_attention(&params, cfg, scene_index, roi_index)?;
    let csv = dumps::attention_dump_csv(&dump);
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    for graph in &dump {
        println!("{}: {} nodes", graph.name, graph.weights.shape()[0]);
    }
    Ok(csv)
}

/// Run the gradient battery and print the pass/fail table. Returns whether
/// every row passed.
pub fn cmd_gradcheck(cfg: Option<&RunConfig>) -> Result<bool> {
    let knobs = cfg.map(CheckKnobs::from_config).unwrap_or_default();
    let rows = checks::gradient_battery_with(&knobs)?;
    println!(
        "gradcheck at eps={:.0e} (reduced dims: C=8, D=16, S=3, 32x32 image)",
        checks::EPS
    );
    print!("{}", checks::format_table(&rows));
    Ok(rows.iter().all(checks::CheckRow::passed))
}

/// Export scenes as PNG plus a sidecar with one `class,x1,y1,x2,y2` line
/// per object. Exports the train split unless `count` is given.
pub fn cmd_synth_export(cfg: &RunConfig, out_dir: &Path, count: Option<u64>) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let spec = cfg.scene_spec();
    let n = count.unwrap_or(cfg.scenes_train as u64);
    for index in 0..n {
        let scene = generate_scene(&spec, index)?;
        let png_path = out_dir.join(format!("scene_{index:05}.png"));
        let file = std::fs::File::create(&png_path)?;
        let mut encoder = png::Encoder::new(
            BufWriter::new(file),
            scene.width() as u32,
            scene.height() as u32,
        );
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&scene.to_rgb8())?;
        writer.finish()?;

        let mut sidecar = String::new();
        for &(box_, class_id) in &scene.gt {
            let (x1, y1, x2, y2) = box_.corners();
            sidecar.push_str(&format!("{class_id},{x1},{y1},{x2},{y2}\n"));
        }
        std::fs::write(out_dir.join(format!("scene_{index:05}.txt")), sidecar)?;
    }
    Ok(n as usize)
}
