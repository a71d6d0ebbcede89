use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ptv_core::config::RunConfig;
use ptv_core::eval::{
    evaluate, export_embeddings, radius_sweep, run_ablation, write_summary, SweepReport,
};
use ptv_core::model::ActionModel;
use ptv_core::synthdata::{make_dataset, read_clip, Manifest, Split};
use ptv_core::trainer::{train as run_training, LoadedDataset};

use crate::Common;

/// Seed precedence: --seed, then PTV_SEED, then the config file.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("PTV_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| ptv_core::Error::Config(format!("PTV_SEED `{env_seed}` is not a number")))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.eval.out_dir = out.clone();
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.eval.out_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join(format!("{command}.resolved.toml")))?;
    Ok(dir)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Manifest, LoadedDataset)> {
    let manifest_path = cfg.dataset.root.join("manifest.tsv");
    if !manifest_path.exists() {
        bail!(ptv_core::Error::data(
            &manifest_path,
            "dataset manifest not found; run `ptv generate` first",
        ));
    }
    let manifest = Manifest::load(&manifest_path)?;
    let data = LoadedDataset::load(&cfg.dataset.root, &manifest)?;
    Ok((manifest, data))
}

pub fn generate(common: Common) -> Result<()> {
    let cfg = resolve(&common)?;
    let root = cfg.dataset.root.clone();
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    cfg.save(&root.join("generate.resolved.toml"))?;

    let dataset_cfg = cfg.dataset_config()?;
    let manifest = make_dataset(&dataset_cfg, &root, cfg.workers.max(1))?;

    let train_n = manifest.count(Split::Train);
    let test_n = manifest.count(Split::Test);
    println!(
        "generated {} clips ({} classes x {}), split {train_n} train / {test_n} test",
        manifest.entries.len(),
        dataset_cfg.classes.len(),
        dataset_cfg.clips_per_class
    );
    println!("manifest: {}", root.join("manifest.tsv").display());
    Ok(())
}

pub fn train(
    common: Common,
    from_checkpoint: Option<PathBuf>,
    frames: Option<usize>,
    points: Option<usize>,
) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(frames) = frames {
        cfg.train.clip_frames = frames;
    }
    if let Some(points) = points {
        cfg.train.points_per_frame = points;
    }
    cfg.validate()?;

    let (_, data) = load_dataset(&cfg)?;
    let out_dir = prepare_out_dir(&cfg, "train")?;

    let mut model = ActionModel::new(cfg.model_config()?, cfg.seed)?;
    if let Some(ckpt) = &from_checkpoint {
        model.params.restore(ckpt)?;
        println!("resumed from {}", ckpt.display());
    }

    let train_cfg = cfg.train_config();
    let log_path = out_dir.join("metrics.tsv");
    let outcome = run_training(&mut model, &data, &train_cfg, Some(&log_path))?;

    let ckpt_path = out_dir.join("model.ptvw");
    model.params.save(&ckpt_path)?;
    outcome.final_report.write_tsv(&out_dir.join("eval.tsv"))?;
    let omega = model.omega().scales();
    write_summary(
        &out_dir.join("train.summary"),
        &[
            ("epochs_run".into(), outcome.epochs_run.to_string()),
            ("test_accuracy".into(), format!("{:.4}", outcome.final_report.accuracy)),
            ("omega_alpha".into(), format!("{:.4}", omega[0])),
            ("omega_beta".into(), format!("{:.4}", omega[1])),
            ("omega_gamma".into(), format!("{:.4}", omega[2])),
            ("checkpoint".into(), ckpt_path.display().to_string()),
        ],
    )?;
    println!(
        "trained {} epochs, test accuracy {:.2}%, checkpoint {}",
        outcome.epochs_run,
        100.0 * outcome.final_report.accuracy,
        ckpt_path.display()
    );
    Ok(())
}

pub fn eval(common: Common, checkpoint: Option<PathBuf>, embeddings: bool) -> Result<()> {
    let cfg = resolve(&common)?;
    let (_, data) = load_dataset(&cfg)?;
    let out_dir = prepare_out_dir(&cfg, "eval")?;

    let mut model = ActionModel::new(cfg.model_config()?, cfg.seed)?;
    if let Some(ckpt) = &checkpoint {
        model.params.restore(ckpt)?;
    }

    let report = evaluate(&model, &data.test, cfg.train.clip_frames, cfg.train.points_per_frame)?;
    report.write_tsv(&out_dir.join("eval.tsv"))?;
    write_summary(
        &out_dir.join("eval.summary"),
        &[
            ("videos".into(), data.test.len().to_string()),
            ("test_accuracy".into(), format!("{:.4}", report.accuracy)),
        ],
    )?;
    println!("evaluated {} videos: accuracy {:.2}%", data.test.len(), 100.0 * report.accuracy);

    if embeddings {
        let path = out_dir.join("embeddings.ptve");
        let rows = export_embeddings(
            &model,
            &data.test,
            cfg.train.clip_frames,
            cfg.train.points_per_frame,
            &path,
        )?;
        println!("wrote {rows} embeddings to {}", path.display());
    }
    Ok(())
}

pub fn ablate(common: Common) -> Result<()> {
    let cfg = resolve(&common)?;
    let (_, data) = load_dataset(&cfg)?;
    let out_dir = prepare_out_dir(&cfg, "ablate")?;

    let rows = run_ablation(&cfg.model_config()?, &cfg.train_config(), &data, cfg.workers.max(1))?;

    let table_path = out_dir.join("ablation.tsv");
    let mut lines = vec!["layered\tmns\teeq\taccuracy\tseed".to_string()];
    let mark = |b: bool| if b { "on" } else { "off" };
    for row in &rows {
        let acc = match (&row.accuracy, &row.failure) {
            (Some(a), _) => format!("{a:.4}"),
            (None, Some(why)) => format!("failed: {why}"),
            (None, None) => "-".into(),
        };
        lines.push(format!(
            "{}\t{}\t{}\t{}\t{}",
            mark(row.layered),
            mark(row.mns),
            mark(row.eeq),
            acc,
            row.seed
        ));
    }
    std::fs::write(&table_path, lines.join("\n") + "\n")
        .with_context(|| table_path.display().to_string())?;

    for line in &lines {
        println!("{line}");
    }
    println!("table: {}", table_path.display());
    Ok(())
}

pub fn sweep(common: Common) -> Result<()> {
    let cfg = resolve(&common)?;
    let (_, data) = load_dataset(&cfg)?;
    let out_dir = prepare_out_dir(&cfg, "sweep")?;

    let report: SweepReport =
        radius_sweep(&cfg.model_config()?, &cfg.train_config(), &data, cfg.workers.max(1))?;

    let table_path = out_dir.join("sweep.tsv");
    let mut lines = vec!["eeq\tradius_scale\taccuracy".to_string()];
    for cell in &report.cells {
        let acc = match (&cell.accuracy, &cell.failure) {
            (Some(a), _) => format!("{a:.4}"),
            (None, Some(why)) => format!("failed: {why}"),
            (None, None) => "-".into(),
        };
        lines.push(format!(
            "{}\t{}\t{acc}",
            if cell.eeq { "on" } else { "off" },
            cell.radius_scale
        ));
    }
    lines.push(format!("variance_eeq_on\t{:.6}", report.variance_eeq_on));
    lines.push(format!("variance_eeq_off\t{:.6}", report.variance_eeq_off));
    let ratio = if report.variance_eeq_off > 0.0 {
        report.variance_eeq_on / report.variance_eeq_off
    } else {
        f64::NAN as ptv_core::Real
    };
    lines.push(format!("variance_ratio_on_over_off\t{ratio:.4}"));
    std::fs::write(&table_path, lines.join("\n") + "\n")
        .with_context(|| table_path.display().to_string())?;

    for line in &lines {
        println!("{line}");
    }
    println!("table: {}", table_path.display());
    Ok(())
}

pub fn inspect(files: Vec<PathBuf>) -> Result<()> {
    for path in &files {
        describe_clip(path)?;
    }
    Ok(())
}

fn describe_clip(path: &Path) -> Result<()> {
    let clip = read_clip(path)?;
    println!("{}", path.display());
    println!("  class_id: {}", clip.class_id);
    println!("  subject_id: {}", clip.subject_id);
    println!("  frames: {}", clip.frames.len());
    println!("  points_per_frame: {}", clip.frames.first().map_or(0, |f| f.len()));
    // Per-frame extents are the quickest sanity read on a clip.
    for (t, frame) in clip.frames.iter().enumerate() {
        let (mut min, mut max) = ([f32::INFINITY; 3], [f32::NEG_INFINITY; 3]);
        for p in frame {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        println!(
            "  frame {t}: {} points, x [{:.2}, {:.2}], y [{:.2}, {:.2}], z [{:.2}, {:.2}]",
            frame.len(),
            min[0],
            max[0],
            min[1],
            max[1],
            min[2],
            max[2]
        );
    }
    Ok(())
}
