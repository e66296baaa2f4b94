//! Implementations behind the `bsq` subcommands.
//!
//! Each function here is one subcommand: it validates its inputs, delegates
//! the real work to `bsq_core`, writes its artifacts, and prints a short,
//! deterministic summary. All fallible paths return [`bsq_core::Error`] so
//! the binary can map them onto the documented exit codes.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use bsq_core::bsm;
use bsq_core::dataio::formats::{self, BsqtDtype, PolygonFile};
use bsq_core::dataio::{self, Sample};
use bsq_core::experiments;
use bsq_core::morphology::{self, BinaryMask, KernelSize};
use bsq_core::viz;
use bsq_core::{BranchSet, Error, EvalConfig, EvalReport, Result, RunConfig};

/// Upscale factor for the rendered rasters, purely for visibility.
const VIZ_SCALE: usize = 8;

/// Print to stdout, ignoring a closed pipe: `bsq ... | head` must end the
/// stream quietly, not crash the process.
macro_rules! outln {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stdout(), $($arg)*);
    };
}

/// Like [`outln!`] without the trailing newline.
macro_rules! out {
    ($($arg:tt)*) => {
        let _ = write!(std::io::stdout(), $($arg)*);
    };
}

/// Build the global worker pool from `BSQ_THREADS` when the variable is set;
/// otherwise leave the default (one worker per core).
pub fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("BSQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Config(format!("BSQ_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the parameters that determine a command's output as config.json in
/// its output directory, so every artifact directory is self-describing.
fn write_command_echo(dir: &Path, doc: &serde_json::Value) -> Result<()> {
    write_text(&dir.join("config.json"), &serde_json::to_string_pretty(doc)?)
}

fn load_config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn mask_to_bsqt(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let data: Vec<f64> = (0..h * w)
        .map(|i| if mask.get(i / w, i % w) { 1.0 } else { 0.0 })
        .collect();
    formats::write_bsqt(path, &[h, w], &data, BsqtDtype::F64)
}

/// `bsq gen-gt`: derive the four supervision targets from a mask file.
pub fn gen_gt(mask_path: &Path, k: usize, out: &Path) -> Result<()> {
    let k = KernelSize::new(k)?;
    let bytes = std::fs::read(mask_path).map_err(|e| Error::io(mask_path, e))?;
    let mask = if bytes.starts_with(b"P5") {
        formats::parse_pgm(&bytes)?
    } else {
        let doc: PolygonFile = serde_json::from_slice(&bytes)?;
        dataio::polygon_file_mask(&doc)?
    };
    let targets = morphology::target_set(&mask, k);

    create_dir(out)?;
    let named = [
        ("gs", &targets.gs),
        ("gb", &targets.gb),
        ("gc", &targets.gc),
        ("ge", &targets.ge),
    ];
    for (name, target) in named {
        formats::write_pgm(out.join(format!("{name}.pgm")), target)?;
        mask_to_bsqt(&out.join(format!("{name}.bsqt")), target)?;
    }
    write_command_echo(
        out,
        &json!({
            "command": "gen-gt",
            "mask": mask_path.display().to_string(),
            "k": k.get(),
        }),
    )?;
    for (name, target) in named {
        outln!("{name}: {} positive px", target.count_ones());
    }
    Ok(())
}

/// `bsq train`: generate the configured dataset, fit on its 80% split, and
/// persist dataset + checkpoint + loss log.
pub fn train(config_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(out) = out_override {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;

    let out = PathBuf::from(&cfg.out_dir);
    create_dir(&out)?;
    cfg.write_echo(&out)?;

    let dataset = experiments::build_dataset(&cfg)?;
    dataio::write_dataset(out.join("data"), &dataset, cfg.seed, &cfg.data, cfg.model.squeeze_kernel()?)?;

    let (train_idx, _) = dataio::split_indices(dataset.len());
    if train_idx.is_empty() {
        return Err(Error::Config("dataset leaves an empty training split".into()));
    }
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let result = bsm::train(&train_set, &cfg.model, &cfg.loss, &cfg.optim, cfg.seed)?;

    write_text(&out.join("training_log.csv"), &bsm::training_log_csv(&result.log))?;
    bsm::write_checkpoint(out.join("checkpoint"), &result.params, &cfg.model, cfg.seed)?;

    let final_loss = result.log.last().map_or(f64::NAN, |row| row.total);
    outln!(
        "trained {} steps on {} samples; final loss {final_loss:.6}",
        result.log.len(),
        train_set.len()
    );
    outln!("checkpoint: {}", out.join("checkpoint").display());
    Ok(())
}

fn print_report_table(report: &EvalReport) {
    let mut header = String::from("samples  mask_iou");
    let mut row = format!("{:>7}  {:>8.4}", report.count, report.mean_mask_iou);
    for (tol, f) in &report.mean_f_scores {
        let name = format!("f_{tol}px");
        header.push_str(&format!("  {name:>7}"));
        row.push_str(&format!("  {f:>7.4}"));
    }
    header.push_str("  boundary_iou");
    row.push_str(&format!("  {:>12.4}", report.mean_boundary_iou));
    outln!("{header}");
    outln!("{row}");
}

/// `bsq eval`: score a checkpoint on every sample of a dataset directory.
pub fn eval(ckpt: &Path, data: &Path, out: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let (params, manifest) = bsm::read_checkpoint(ckpt)?;
    let (samples, _) = dataio::load_dataset(data)?;
    let eval_cfg: EvalConfig = match config {
        Some(path) => load_config_or_default(Some(path))?.eval,
        None => EvalConfig::default(),
    };
    eval_cfg.validate()?;

    let report = experiments::eval_model(&params, &manifest.config, &samples, &eval_cfg)?;
    print_report_table(&report);

    if let Some(out) = out {
        create_dir(out)?;
        write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&out.join("report.csv"), &report.to_csv())?;
        write_command_echo(
            out,
            &json!({
                "command": "eval",
                "ckpt": ckpt.display().to_string(),
                "data": data.display().to_string(),
                "eval": eval_cfg,
            }),
        )?;
    }
    Ok(())
}

/// `bsq sweep-k`: one trained-and-evaluated row per kernel size.
pub fn sweep_k(config: Option<&Path>, values: &[usize], seeds: &[u64], out_override: Option<&Path>) -> Result<()> {
    let cfg = load_config_or_default(config)?;
    let out = out_override.map_or_else(|| PathBuf::from(&cfg.out_dir).join("sweep"), Path::to_path_buf);

    let rows = experiments::sweep_k(&cfg, values, seeds)?;
    let csv = experiments::sweep_csv(&rows);

    create_dir(&out)?;
    cfg.write_echo(&out)?;
    write_text(&out.join("sweep.csv"), &csv)?;
    let doc = json!({ "values": values, "seeds": seeds, "rows": rows });
    write_text(&out.join("sweep.json"), &serde_json::to_string_pretty(&doc)?)?;

    out!("{csv}");
    Ok(())
}

/// One named branch subset to ablate.
pub type BranchVariant = (String, BranchSet);

/// Parse a comma-separated branch subset such as "seg,con,exp". The mask
/// branch is mandatory; the label preserves the canonical branch order.
pub fn parse_branch_set(raw: &str) -> std::result::Result<BranchVariant, String> {
    let mut seg = false;
    let mut set = BranchSet { bnd: false, con: false, exp: false };
    for part in raw.split(',') {
        match part.trim() {
            "seg" => seg = true,
            "bnd" => set.bnd = true,
            "con" => set.con = true,
            "exp" => set.exp = true,
            other => return Err(format!("unknown branch {other:?} (expected seg, bnd, con, exp)")),
        }
    }
    if !seg {
        return Err("a branch set must include seg".into());
    }
    let mut label = String::from("seg");
    for (name, on) in [("bnd", set.bnd), ("con", set.con), ("exp", set.exp)] {
        if on {
            label.push('+');
            label.push_str(name);
        }
    }
    Ok((label, set))
}

/// `bsq ablate`: train each branch subset over the seeds, on one shared
/// dataset.
pub fn ablate(
    config: Option<&Path>,
    branches: &[BranchVariant],
    seeds: &[u64],
    out_override: Option<&Path>,
) -> Result<()> {
    let cfg = load_config_or_default(config)?;
    let out = out_override.map_or_else(|| PathBuf::from(&cfg.out_dir).join("ablation"), Path::to_path_buf);
    let variants = if branches.is_empty() {
        experiments::ablation_variants()
    } else {
        branches.to_vec()
    };

    let rows = experiments::ablate(&cfg, &variants, seeds)?;
    let csv = experiments::ablation_csv(&rows);

    create_dir(&out)?;
    cfg.write_echo(&out)?;
    write_text(&out.join("ablation.csv"), &csv)?;
    let doc = json!({ "seeds": seeds, "rows": rows });
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&doc)?)?;

    out!("{csv}");
    Ok(())
}

fn write_flow_rasters(dir: &Path, name: &str, flow: &bsq_core::FlowField) -> Result<()> {
    let (h, w, rgb) = viz::flow_to_rgb(flow);
    let (h2, w2, rgb2) = viz::upscale_rgb(h, w, &rgb, VIZ_SCALE)?;
    formats::write_ppm(dir.join(format!("{name}.ppm")), h2, w2, &rgb2)?;
    formats::write_field_bsqt(dir.join(format!("{name}.bsqt")), &flow.to_feature_field())
}

/// `bsq viz`: run one sample through a checkpoint and render what the
/// boundary machinery produced.
pub fn viz(ckpt: &Path, data: &Path, sample: usize, out: &Path) -> Result<()> {
    let (params, manifest) = bsm::read_checkpoint(ckpt)?;
    let (samples, _) = dataio::load_dataset(data)?;
    let item = samples
        .get(sample)
        .ok_or_else(|| Error::Config(format!("sample {sample} out of range, dataset has {}", samples.len())))?;

    let output = bsm::infer(&item.image, &params, &manifest.config)?;

    create_dir(out)?;
    formats::write_pgm(out.join("pred_mask.pgm"), &output.mask)?;
    formats::write_pgm(out.join("gt_mask.pgm"), item.mask())?;
    let mut written = vec!["pred_mask.pgm", "gt_mask.pgm"];

    if let Some(flow) = &output.con_flow {
        write_flow_rasters(out, "con_flow", flow)?;
        written.push("con_flow.ppm");
    }
    if let Some(flow) = &output.exp_flow {
        write_flow_rasters(out, "exp_flow", flow)?;
        written.push("exp_flow.ppm");
    }
    if let Some(feat) = &output.boundary_feat {
        let (h, w, rgb) = viz::pca_to_rgb(feat)?;
        let (h2, w2, rgb2) = viz::upscale_rgb(h, w, &rgb, VIZ_SCALE)?;
        formats::write_ppm(out.join("boundary_pca.ppm"), h2, w2, &rgb2)?;
        formats::write_field_bsqt(out.join("boundary_feat.bsqt"), feat)?;
        written.push("boundary_pca.ppm");
    } else {
        outln!("note: checkpoint has no boundary branch; flow and PCA rasters skipped");
    }

    write_command_echo(
        out,
        &json!({
            "command": "viz",
            "ckpt": ckpt.display().to_string(),
            "data": data.display().to_string(),
            "sample": sample,
            "model": manifest.config,
        }),
    )?;
    outln!("wrote {} to {}", written.join(", "), out.display());
    Ok(())
}
