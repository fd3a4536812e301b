//! Subcommand implementations. Conventions: the dataset lives where the
//! config's `[data] dir` points; command artifacts land in `--out`; the
//! effective config (file + overrides + `--seed`) is persisted next to
//! every artifact; existing artifacts are never overwritten without
//! `--force`.

use crate::Common;
use hierzoom_core::checkpoint::{
    model_checkpoint, pretrain_checkpoint, restore_bundle, restore_pretrained_cnn, Checkpoint,
    TrainMeta,
};
use hierzoom_core::config::Config;
use hierzoom_core::dataset::{load_split, Manifest, Split};
use hierzoom_core::error::{Error, Result};
use hierzoom_core::image::{Image, Region};
use hierzoom_core::labels::{pgm_to_mask, Mask};
use hierzoom_core::models::ModelBundle;
use hierzoom_core::pgm::{image_to_pgm, pgm_to_image};
use hierzoom_core::seeding::{derived_rng, STREAM_PATCH, STREAM_TRAIN};
use hierzoom_core::synthdata::{gen_dataset, sample_patches};
use hierzoom_core::tape::Tape;
use hierzoom_core::train::{
    evaluate, pretrain_patch_cnn, run_sample, seed_bundle_cnns, train_epoch, Optimizer, SampleRun,
    ZoomPolicy,
};
use std::path::{Path, PathBuf};

/// Patches drawn per training image during pretraining; half are centered
/// on lesion pixels, half are uniform.
const PATCHES_PER_IMAGE: usize = 8;

fn effective_config(common: &Common) -> Result<Config> {
    let mut cfg = Config::load(&common.config)?;
    for spec in &common.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn persist_config(cfg: &Config, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, cfg.canonical_text()).map_err(|e| Error::io(path, e))
}

fn refuse_clobber(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn manifest_path(cfg: &Config) -> PathBuf {
    Path::new(&cfg.data.dir).join("manifest.tsv")
}

/// The checkpoint fixes the architecture; the command's config must agree
/// on every dimension before the two can be used together.
fn check_model_match(cfg: &Config, ckpt_cfg: &Config) -> Result<()> {
    let pairs = [
        ("r", cfg.run.r, ckpt_cfg.run.r),
        ("d", cfg.run.d, ckpt_cfg.run.d),
        ("s", cfg.run.s, ckpt_cfg.run.s),
        ("hdim", cfg.run.hdim, ckpt_cfg.run.hdim),
    ];
    let mismatches: Vec<String> = pairs
        .iter()
        .filter(|(_, a, b)| a != b)
        .map(|(k, a, b)| format!("{k} is {a} here but {b} in the checkpoint"))
        .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(mismatches.join("; ")))
    }
}

fn load_model(common: &Common, cfg: &Config) -> Result<ModelBundle> {
    let path = common.out.join("model.ckpt");
    let ckpt = Checkpoint::load(&path)?;
    let (ckpt_cfg, bundle, _, _) = restore_bundle(&ckpt)?;
    check_model_match(cfg, &ckpt_cfg)?;
    Ok(bundle)
}

pub(crate) fn gen_data(common: &Common) -> Result<()> {
    let cfg = effective_config(common)?;
    let dir = PathBuf::from(&cfg.data.dir);
    refuse_clobber(&dir.join("manifest.tsv"), common.force)?;
    let (_, summary) = gen_dataset(&cfg.data, cfg.run.split, &dir)?;
    persist_config(&cfg, &dir, "dataset.cfg")?;
    println!("{summary}");
    Ok(())
}

pub(crate) fn pretrain(common: &Common) -> Result<()> {
    let cfg = effective_config(common)?;
    let ckpt_path = common.out.join("pretrain.ckpt");
    refuse_clobber(&ckpt_path, common.force)?;
    let samples = load_split(&manifest_path(&cfg), Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Usage("the training split is empty".into()));
    }
    let pairs: Vec<(&Image, &Mask)> = samples.iter().map(|s| (&s.image, &s.mask)).collect();
    let mut patch_rng = derived_rng(cfg.run.seed, STREAM_PATCH, 0);
    let patches = sample_patches(&pairs, cfg.run.d, PATCHES_PER_IMAGE, &mut patch_rng)?;
    let mut rng = derived_rng(cfg.run.seed, STREAM_PATCH, 1);
    let result = pretrain_patch_cnn(&cfg.run, &patches, &mut rng)?;
    persist_config(&cfg, &common.out, "pretrain.cfg")?;
    pretrain_checkpoint(&cfg, &result, &rng).save(&ckpt_path)?;
    println!(
        "patches={} holdout_accuracy={}",
        patches.len(),
        result.holdout_accuracy
    );
    Ok(())
}

pub(crate) fn train(common: &Common, pretrained: Option<&Path>) -> Result<()> {
    let cfg = effective_config(common)?;
    if cfg.run.r < 2 {
        return Err(Error::Config(format!(
            "training requires r >= 2 so at least one zoom step exists, got {}",
            cfg.run.r
        )));
    }
    let ckpt_path = common.out.join("model.ckpt");
    let log_path = common.out.join("train.log");
    refuse_clobber(&ckpt_path, common.force)?;
    refuse_clobber(&log_path, common.force)?;
    let samples = load_split(&manifest_path(&cfg), Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Usage("the training split is empty".into()));
    }

    let mut init_rng = derived_rng(cfg.run.seed, STREAM_TRAIN, 0);
    let mut bundle = ModelBundle::init(cfg.run.d, cfg.run.hdim, &mut init_rng)?;
    if let Some(path) = pretrained {
        let ckpt = Checkpoint::load(path)?;
        let cnn = restore_pretrained_cnn(&ckpt, cfg.run.d, cfg.run.hdim)?;
        seed_bundle_cnns(&mut bundle, &cnn)?;
    }
    let mut opt = Optimizer::for_bundle(cfg.run.optimizer, cfg.run.lr, &bundle);
    let mut epoch_rng = derived_rng(cfg.run.seed, STREAM_TRAIN, 1);

    persist_config(&cfg, &common.out, "train.cfg")?;
    let mut log = String::new();
    write_file(&log_path, log.as_bytes())?;
    model_checkpoint(&cfg, &bundle, TrainMeta::start(), &epoch_rng).save(&ckpt_path)?;

    for epoch in 1..=cfg.run.epochs {
        let stats = train_epoch(&mut bundle, &mut opt, &samples, &cfg.run, &mut epoch_rng)?;
        let line = format!(
            "{} {} {} {} {}",
            epoch, stats.loss_graph, stats.loss_node, stats.total, stats.train_auc
        );
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
        write_file(&log_path, log.as_bytes())?;
        let meta = TrainMeta {
            epoch,
            loss_graph: stats.loss_graph,
            loss_node: stats.loss_node,
            loss_total: stats.total,
        };
        model_checkpoint(&cfg, &bundle, meta, &epoch_rng).save(&ckpt_path)?;
    }
    Ok(())
}

pub(crate) fn eval(common: &Common, split: &str) -> Result<()> {
    let cfg = effective_config(common)?;
    let split: Split = split.parse()?;
    let report_path = common.out.join("eval.txt");
    refuse_clobber(&report_path, common.force)?;
    let bundle = load_model(common, &cfg)?;
    let samples = load_split(&manifest_path(&cfg), split)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("the {split} split is empty")));
    }
    let report = evaluate(&bundle, &samples, &cfg.run)?;
    persist_config(&cfg, &common.out, "eval.cfg")?;
    write_file(&report_path, report.to_key_values().as_bytes())?;
    println!("split={split}");
    println!("auc={}", report.auc);
    println!("zoom_precision_deepest={}", report.zoom_precision_deepest);
    println!("zoom_recall_deepest={}", report.zoom_recall_deepest);
    println!("mean_node_count={}", report.mean_node_count);
    Ok(())
}

/// Scores a raw image: predicted zooming against an all-background mask,
/// so no labels enter the run.
fn score_image(bundle: &ModelBundle, cfg: &Config, image: &Image) -> Result<SampleRun> {
    let mask = Mask::zeros(image.width(), image.height())?;
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let (run, _) = run_sample(
        &mut tape,
        &bound,
        &cfg.run,
        image,
        &mask,
        0,
        ZoomPolicy::Predicted,
    )?;
    Ok(run)
}

pub(crate) fn infer(common: &Common, image_path: &Path) -> Result<()> {
    let cfg = effective_config(common)?;
    let bundle = load_model(common, &cfg)?;
    let image = pgm_to_image(&read_file(image_path)?)?;
    let run = score_image(&bundle, &cfg, &image)?;
    persist_config(&cfg, &common.out, "infer.cfg")?;
    println!("score={}", run.score);
    println!("nodes={}", run.node_count);
    Ok(())
}

/// Inverts the intensity along a region's perimeter ring.
fn draw_border(img: &mut Image, region: Region) {
    let t = (img.width().max(img.height()) / 128).max(1);
    let x1 = region.x0 + region.width;
    let y1 = region.y0 + region.height;
    for y in region.y0..y1.min(img.height()) {
        for x in region.x0..x1.min(img.width()) {
            let on_border = x < region.x0 + t
                || x >= x1.saturating_sub(t)
                || y < region.y0 + t
                || y >= y1.saturating_sub(t);
            if on_border {
                img.set(x, y, 1.0 - img.get(x, y));
            }
        }
    }
}

pub(crate) fn visualize(common: &Common, sample_id: &str) -> Result<()> {
    let cfg = effective_config(common)?;
    let first_overlay = common.out.join(format!("viz_{sample_id}_level1.pgm"));
    refuse_clobber(&first_overlay, common.force)?;
    let bundle = load_model(common, &cfg)?;
    let manifest_file = manifest_path(&cfg);
    let manifest = Manifest::load(&manifest_file)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.id == sample_id)
        .ok_or_else(|| {
            Error::Usage(format!(
                "sample '{sample_id}' is not in {}",
                manifest_file.display()
            ))
        })?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let image = pgm_to_image(&read_file(&base.join(&entry.image_path))?)?;
    let mask = pgm_to_mask(&read_file(&base.join(&entry.mask_path))?)?;

    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let (run, _) = run_sample(
        &mut tape,
        &bound,
        &cfg.run,
        &image,
        &mask,
        entry.y,
        ZoomPolicy::Predicted,
    )?;

    persist_config(&cfg, &common.out, "visualize.cfg")?;
    for level in 1..=cfg.run.r {
        let mut overlay = image.clone();
        if level == 1 {
            // The root is zoomed by definition.
            draw_border(&mut overlay, run.graph.node(0)?.region);
        } else {
            for rec in run
                .records
                .iter()
                .filter(|r| r.level == level && r.predicted == 1)
            {
                draw_border(&mut overlay, run.graph.node(rec.node_id)?.region);
            }
        }
        let path = common.out.join(format!("viz_{sample_id}_level{level}.pgm"));
        write_file(&path, &image_to_pgm(&overlay))?;
    }
    write_file(
        &common.out.join(format!("viz_{sample_id}_graph.txt")),
        run.graph.dump().as_bytes(),
    )?;
    println!("score={}", run.score);
    println!("nodes={}", run.node_count);
    Ok(())
}
