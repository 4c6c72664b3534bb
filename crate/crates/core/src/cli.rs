//! Command-line entry point. Each subcommand reads the run config, checks
//! that its inputs exist, writes into its own artifact namespace and records
//! a manifest with the config hash, seed and artifact checksums.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown
//! subcommand or flag), 3 invalid config or missing prerequisite artifact.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AutoencoderConfig, Decoder, Encoder};
use crate::checkpoint::Checkpoint;
use crate::classifier::{augmentation_experiment, train_classifier, ClassifierConfig, ClassifierModel, Condition, ExperimentReport};
use crate::config::{sha256_hex, RunConfig};
use crate::data::{generate_toy_dataset, load_dataset, prepare_clips, save_dataset, LabeledItem, LabeledVideoDataset};
use crate::denoiser::{train_diffusion, DenoiserConfig, DenoiserModel};
use crate::error::{LddmError, Result};
use crate::metrics::{corpus_distance, diversity_score, perceptual_patch_distance, write_metric_csv, ClassifierFeatures, FeatureExtractor, FeatureView, MetricRow, RandomPatchFeatures};
use crate::nn::TrainingLog;
use crate::synthesis::{batch_synthesize, save_synthetic, PerImage, SourceImage, SynthesisBundle};
use crate::tensor::Tensor;
use crate::video::{LatentDynamic, SeedImage, VideoClip};

#[derive(Parser, Debug)]
#[command(name = "lddm", version, about = "Latent dynamic diffusion for image-to-video synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the toy datasets (real, holdout, image pool)
    GenToy(Args),
    /// Train the video autoencoder (stage 1)
    TrainAe(Args),
    /// Encode the real clips with the frozen encoder
    EncodeLatents(Args),
    /// Train the latent denoiser (stage 2)
    TrainDiff(Args),
    /// Synthesize clips from holdout frames and the image pool
    Synthesize(Args),
    /// Compute distance, perceptual and diversity metrics
    Evaluate(Args),
    /// Run the real / synthetic / combined classification experiment
    Experiment(Args),
    /// Render plots from the experiment and training logs
    Report(Args),
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Path to the JSON run config
    #[arg(long)]
    pub config: PathBuf,
}

/// Run manifest written by every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
}

impl Ctx {
    fn data(&self, sub: &str) -> PathBuf {
        self.cfg.paths.data_dir.join(sub)
    }
    fn ckpt(&self, sub: &str) -> PathBuf {
        self.cfg.paths.checkpoint_dir.join(sub)
    }
    fn report(&self, sub: &str) -> PathBuf {
        self.cfg.paths.report_dir.join(sub)
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LddmError::MissingArtifact(format!("{} ({hint})", path.display())))
    }
}

fn require_checkpoint(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LddmError::MissingArtifact(format!(
            "missing checkpoint {} ({hint})",
            path.display()
        )))
    }
}

/// Removes and recreates a namespace directory so reruns leave no stale files.
fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path)?;
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn write_manifest(ctx: &Ctx, command: &str, dirs: &[PathBuf], at: &Path, summary: serde_json::Value) -> Result<()> {
    let mut files = Vec::new();
    for d in dirs {
        collect_files(d, &mut files)?;
    }
    let base = at.parent().unwrap_or(Path::new("."));
    let artifacts = files
        .iter()
        .filter(|p| p.as_path() != at)
        .map(|p| {
            let rel = pathdiff(p, base);
            Ok(ArtifactRecord {
                path: rel.display().to_string(),
                sha256: sha256_hex(&std::fs::read(p)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = RunManifest {
        command: command.into(),
        config_sha256: ctx.hash.clone(),
        seed: ctx.cfg.seed,
        artifacts,
        summary,
    };
    std::fs::write(at, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

/// `path` relative to `base` when it lies below it, else unchanged.
fn pathdiff(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn write_log(path: &Path, log: &TrainingLog) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(log)?)?;
    Ok(())
}

fn autoencoder_config(cfg: &RunConfig) -> AutoencoderConfig {
    AutoencoderConfig {
        geometry: cfg.geometry,
        features: cfg.autoencoder.features,
    }
}

fn classifier_config(cfg: &RunConfig) -> ClassifierConfig {
    ClassifierConfig {
        clip_shape: cfg.geometry.clip_shape(),
        features: cfg.classifier.features,
        hidden: cfg.classifier.hidden,
    }
}

fn first_frames(ds: &LabeledVideoDataset) -> Result<LabeledVideoDataset> {
    let items = ds
        .items()
        .iter()
        .map(|i| {
            Ok(LabeledItem {
                clip: i.clip.select_frames(&[0])?,
                label: i.label,
                source_id: i.source_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledVideoDataset::new(items, ds.provenance())
}

fn gen_toy(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let s = cfg.sampling;
    let subsets = [
        ("real", cfg.toy.videos_per_class, 0u64),
        ("holdout", cfg.toy.holdout_per_class, 1),
        ("images", cfg.toy.image_pool_per_class, 2),
    ];
    let mut counts = serde_json::Map::new();
    for (name, n, k) in subsets {
        let raw = generate_toy_dataset(&cfg.toy_params(cfg.seed.wrapping_mul(3).wrapping_add(k), n))?;
        let mut clips = prepare_clips(&raw, s.clip_len, s.sampled, None)?;
        if name == "images" {
            clips = first_frames(&clips)?;
        }
        let dir = ctx.data(name);
        fresh_dir(&dir)?;
        save_dataset(&clips, &dir)?;
        counts.insert(name.into(), clips.len().into());
    }
    Ok(counts.into())
}

fn load_real(ctx: &Ctx, name: &str) -> Result<LabeledVideoDataset> {
    let m = ctx.data(name).join("manifest.jsonl");
    require(&m, "run gen-toy first")?;
    load_dataset(&m)
}

fn train_ae(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let real = load_real(ctx, "real")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.autoencoder.train.seed);
    let (enc, dec, log) = train_autoencoder(&real.clips(), autoencoder_config(cfg), &cfg.autoencoder.train, &mut rng)?;
    let dir = ctx.ckpt("ae");
    fresh_dir(&dir)?;
    enc.to_checkpoint().save(&dir.join("encoder.ckpt"))?;
    dec.to_checkpoint().save(&dir.join("decoder.ckpt"))?;
    write_log(&dir.join("loss.json"), &log)?;
    let n = log.losses.len();
    let k = n.min(20).max(1);
    Ok(serde_json::json!({
        "steps": n,
        "initial_loss": log.losses.first(),
        "final_loss_mean": log.mean(n - k..n),
    }))
}

fn encode_latents(ctx: &Ctx) -> Result<serde_json::Value> {
    let enc_path = ctx.ckpt("ae").join("encoder.ckpt");
    require_checkpoint(&enc_path, "run train-ae first")?;
    let enc = Encoder::from_checkpoint(&Checkpoint::load_kind(&enc_path, "encoder")?)?;
    let real = load_real(ctx, "real")?;
    let mut latents = Vec::new();
    for chunk in real.items().chunks(32) {
        let clips: Vec<&VideoClip> = chunk.iter().map(|i| &i.clip).collect();
        latents.extend(enc.encode_batch(&clips)?);
    }
    let g = ctx.cfg.geometry;
    let ls = g.latent_shape();
    let mut params = crate::nn::ParamStore::new();
    let flat: Vec<f64> = latents.iter().flat_map(|l| l.values.iter().copied()).collect();
    params.insert("latents", Tensor::new(vec![latents.len(), ls[0], ls[1], ls[2], ls[3]], flat)?);
    let seeds: Vec<f64> = real
        .items()
        .iter()
        .flat_map(|i| i.clip.frame(0).iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect();
    params.insert("seeds", Tensor::new(vec![real.len(), g.height, g.width, g.channels], seeds)?);
    let mut ck = Checkpoint::new("latents", serde_json::to_value(g)?, params);
    ck.extra.insert("labels".into(), serde_json::to_value(real.labels())?);
    let ids: Vec<&str> = real.items().iter().map(|i| i.source_id.as_str()).collect();
    ck.extra.insert("source_ids".into(), serde_json::to_value(ids)?);
    let dir = ctx.ckpt("latents");
    fresh_dir(&dir)?;
    ck.save(&dir.join("latents.ckpt"))?;
    Ok(serde_json::json!({ "count": latents.len(), "shape": ls }))
}

fn load_latents(path: &Path) -> Result<Vec<(LatentDynamic, SeedImage)>> {
    let ck = Checkpoint::load_kind(path, "latents")?;
    let g: crate::video::Geometry = ck.arch_as()?;
    let ls = g.latent_shape();
    let lat = ck.params.get("latents").ok_or_else(|| LddmError::MalformedHeader("no latents tensor".into()))?;
    let seeds = ck.params.get("seeds").ok_or_else(|| LddmError::MalformedHeader("no seeds tensor".into()))?;
    let n = lat.shape()[0];
    let (lz, ls_len) = (g.latent_len(), g.height * g.width * g.channels);
    if seeds.shape()[0] != n || lat.len() != n * lz || seeds.len() != n * ls_len {
        return Err(LddmError::MalformedHeader("latent and seed counts disagree".into()));
    }
    (0..n)
        .map(|i| {
            let z = LatentDynamic::new(lat.data()[i * lz..(i + 1) * lz].to_vec(), ls)?;
            let px: Vec<f32> = seeds.data()[i * ls_len..(i + 1) * ls_len].iter().map(|&v| v as f32).collect();
            Ok((z, SeedImage::new(px, [g.height, g.width, g.channels])?))
        })
        .collect()
}

fn train_diff(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    require_checkpoint(&ctx.ckpt("ae").join("encoder.ckpt"), "run train-ae first")?;
    let lat_path = ctx.ckpt("latents").join("latents.ckpt");
    require_checkpoint(&lat_path, "run encode-latents first")?;
    let latents = load_latents(&lat_path)?;
    let schedule = cfg.schedule.build()?;
    let dcfg = DenoiserConfig {
        geometry: cfg.geometry,
        steps: schedule.steps(),
        features: cfg.denoiser.features,
        time_dim: cfg.denoiser.time_dim,
        blocks: cfg.denoiser.blocks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.denoiser.train.seed);
    let (model, log) = train_diffusion(&latents, &schedule, dcfg, &cfg.denoiser.train, &mut rng)?;
    let dir = ctx.ckpt("diff");
    fresh_dir(&dir)?;
    model.to_checkpoint().save(&dir.join("denoiser.ckpt"))?;
    write_log(&dir.join("loss.json"), &log)?;
    let n = log.losses.len();
    let k = n.min(100).max(1);
    Ok(serde_json::json!({
        "steps": n,
        "leading_mean": log.mean(0..k),
        "trailing_mean": log.mean(n - k..n),
    }))
}

fn load_bundle(ctx: &Ctx) -> Result<SynthesisBundle> {
    let dec_path = ctx.ckpt("ae").join("decoder.ckpt");
    let den_path = ctx.ckpt("diff").join("denoiser.ckpt");
    require_checkpoint(&dec_path, "run train-ae first")?;
    require_checkpoint(&den_path, "run train-diff first")?;
    let dec = Decoder::from_checkpoint(&Checkpoint::load_kind(&dec_path, "decoder")?)?;
    let den = DenoiserModel::from_checkpoint(&Checkpoint::load_kind(&den_path, "denoiser")?)?;
    SynthesisBundle::new(dec, den, ctx.cfg.schedule.build()?)
}

fn sources(ds: &LabeledVideoDataset) -> Vec<SourceImage> {
    ds.items()
        .iter()
        .map(|i| SourceImage {
            image: i.clip.seed_image(),
            label: i.label,
            id: i.source_id.clone(),
        })
        .collect()
}

fn synthesize(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let bundle = load_bundle(ctx)?;
    let holdout = load_real(ctx, "holdout")?;
    let images = load_real(ctx, "images")?;
    let root = ctx.data("synthetic");
    fresh_dir(&root)?;

    let seeds = sources(&holdout);
    let cond = batch_synthesize(&seeds, PerImage::Fixed(1), &bundle, cfg.seed.wrapping_add(100))?;
    save_synthetic(&cond, &root.join("holdout_conditioned"))?;

    let k = cfg.synthesis.diversity_images.min(seeds.len());
    let div = batch_synthesize(
        &seeds[..k],
        PerImage::Fixed(cfg.synthesis.diversity_samples),
        &bundle,
        cfg.seed.wrapping_add(200),
    )?;
    save_synthetic(&div, &root.join("diversity"))?;

    let aug = batch_synthesize(&sources(&images), cfg.synthesis.per_image, &bundle, cfg.seed.wrapping_add(300))?;
    save_synthetic(&aug, &root.join("augment"))?;
    Ok(serde_json::json!({
        "holdout_conditioned": cond.len(),
        "diversity": div.len(),
        "augment": aug.len(),
    }))
}

fn load_synthetic(ctx: &Ctx, name: &str) -> Result<(LabeledVideoDataset, Vec<crate::synthesis::SynthesisRecord>)> {
    let dir = ctx.data("synthetic").join(name);
    let m = dir.join("manifest.jsonl");
    require(&m, "run synthesize first")?;
    let ds = load_dataset(&m)?;
    let text = std::fs::read_to_string(dir.join("synthesis.jsonl"))?;
    let recs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(LddmError::from))
        .collect::<Result<Vec<_>>>()?;
    Ok((ds, recs))
}

/// Trains (or reuses) the classifier whose features serve as metric extractors.
fn extractor_model(ctx: &Ctx, dir: &Path) -> Result<ClassifierModel> {
    let cfg = &ctx.cfg;
    let real = load_real(ctx, "real")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.classifier.train.seed);
    let (model, _) = train_classifier(&real, classifier_config(cfg), &cfg.classifier.train, &mut rng)?;
    model.to_checkpoint().save(&dir.join("extractor.ckpt"))?;
    Ok(model)
}

fn evaluate(ctx: &Ctx) -> Result<serde_json::Value> {
    let holdout = load_real(ctx, "holdout")?;
    let real = load_real(ctx, "real")?;
    let (synth, recs) = load_synthetic(ctx, "holdout_conditioned")?;
    let (div_set, div_recs) = load_synthetic(ctx, "diversity")?;
    let dir = ctx.report("evaluate");
    fresh_dir(&dir)?;
    let model = extractor_model(ctx, &dir)?;

    let real_clips: Vec<&VideoClip> = holdout.items().iter().map(|i| &i.clip).collect();
    let synth_clips: Vec<&VideoClip> = synth.items().iter().map(|i| &i.clip).collect();
    let statics: Vec<VideoClip> = holdout
        .items()
        .iter()
        .map(|i| i.clip.seed_image().repeat(i.clip.frame_count()))
        .collect::<Result<_>>()?;
    let static_clips: Vec<&VideoClip> = statics.iter().collect();
    let train_clips: Vec<&VideoClip> = real.items().iter().map(|i| &i.clip).collect();

    let mut rows = Vec::new();
    for view in [FeatureView::Clip, FeatureView::FrameDifference] {
        let ex = ClassifierFeatures { model: &model, view };
        let metric = match view {
            FeatureView::Clip => "frechet_clip",
            FeatureView::FrameDifference => "frechet_dynamics",
        };
        for (name, corpus) in [
            ("synthesized", &synth_clips),
            ("static_repeat", &static_clips),
            ("real_train", &train_clips),
        ] {
            rows.push(MetricRow {
                metric: metric.into(),
                extractor: ex.descriptor(),
                corpus_a: "holdout".into(),
                corpus_b: name.into(),
                value: corpus_distance(&real_clips, corpus, &ex)?,
                size_a: real_clips.len(),
                size_b: corpus.len(),
            });
        }
    }

    let lp = RandomPatchFeatures::new(ctx.cfg.geometry.channels, 8, ctx.cfg.seed);
    let by_id: std::collections::HashMap<&str, &VideoClip> =
        holdout.items().iter().map(|i| (i.source_id.as_str(), &i.clip)).collect();
    for (name, clips) in [("synthesized", &synth_clips), ("static_repeat", &static_clips)] {
        let mut total = 0.0;
        for (k, clip) in clips.iter().enumerate() {
            let reference = if name == "synthesized" {
                by_id.get(recs[k].source_image_id.as_str()).copied().ok_or_else(|| {
                    LddmError::MalformedHeader(format!("unknown source image {}", recs[k].source_image_id))
                })?
            } else {
                real_clips[k]
            };
            total += perceptual_patch_distance(reference, clip, &lp)?;
        }
        rows.push(MetricRow {
            metric: "patch_perceptual".into(),
            extractor: lp.descriptor(),
            corpus_a: "holdout".into(),
            corpus_b: name.into(),
            value: total / clips.len() as f64,
            size_a: real_clips.len(),
            size_b: clips.len(),
        });
    }

    let ex = ClassifierFeatures { model: &model, view: FeatureView::Clip };
    let mut groups: Vec<(String, Vec<&VideoClip>)> = Vec::new();
    for (item, rec) in div_set.items().iter().zip(&div_recs) {
        match groups.iter_mut().find(|(id, _)| *id == rec.source_image_id) {
            Some((_, v)) => v.push(&item.clip),
            None => groups.push((rec.source_image_id.clone(), vec![&item.clip])),
        }
    }
    let mut div_total = 0.0;
    for (_, clips) in &groups {
        div_total += diversity_score(clips, &ex)?;
    }
    rows.push(MetricRow {
        metric: "diversity".into(),
        extractor: ex.descriptor(),
        corpus_a: "diversity".into(),
        corpus_b: "diversity".into(),
        value: div_total / groups.len().max(1) as f64,
        size_a: div_set.len(),
        size_b: groups.len(),
    });

    write_metric_csv(&rows, &dir.join("metrics.csv"))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&rows)?)?;
    Ok(serde_json::to_value(&rows)?)
}

fn experiment(ctx: &Ctx) -> Result<serde_json::Value> {
    let cfg = &ctx.cfg;
    let real = load_real(ctx, "real")?;
    let (synth, _) = load_synthetic(ctx, "augment")?;
    let report = augmentation_experiment(
        &real,
        &synth,
        &cfg.experiment.fractions,
        &cfg.experiment.seeds,
        classifier_config(cfg),
        &cfg.classifier.train,
    )?;
    let dir = ctx.report("experiment");
    fresh_dir(&dir)?;
    report.write_csv(&dir.join("cells.csv"))?;
    report.write_json(&dir.join("report.json"))?;
    Ok(serde_json::to_value(&report.summary)?)
}

fn report(ctx: &Ctx) -> Result<serde_json::Value> {
    use plotters::prelude::*;
    let path = ctx.report("experiment").join("report.json");
    require(&path, "run experiment first")?;
    let rep: ExperimentReport = serde_json::from_slice(&std::fs::read(&path)?)?;
    let dir = ctx.report("report");
    fresh_dir(&dir)?;
    let plot_err = |e: String| LddmError::InvalidArgument(format!("plot: {e}"));

    let out = dir.join("accuracy_vs_fraction.svg");
    {
        let root = SVGBackend::new(&out, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Median accuracy vs real training fraction", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(0.0f64..1.0, 0.0f64..1.05)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("real fraction")
            .y_desc("accuracy")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (i, cond) in Condition::ALL.into_iter().enumerate() {
            let mut pts: Vec<(f64, f64)> = rep
                .summary
                .iter()
                .filter(|s| s.condition == cond)
                .filter_map(|s| s.median_accuracy.map(|a| (s.fraction, a)))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(cond.name())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }

    let mut plotted = vec![out.display().to_string()];
    for (name, sub) in [("autoencoder", "ae"), ("denoiser", "diff")] {
        let log_path = ctx.ckpt(sub).join("loss.json");
        if !log_path.exists() {
            continue;
        }
        let log: TrainingLog = serde_json::from_slice(&std::fs::read(&log_path)?)?;
        if log.losses.is_empty() {
            continue;
        }
        let out = dir.join(format!("{name}_loss.svg"));
        let ymax = log.losses.iter().cloned().fold(0.0, f64::max) * 1.05;
        let root = SVGBackend::new(&out, (640, 360)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{name} training loss"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(0..log.losses.len(), 0.0..ymax.max(1e-12))
            .map_err(|e| plot_err(e.to_string()))?;
        chart.configure_mesh().x_desc("step").draw().map_err(|e| plot_err(e.to_string()))?;
        chart
            .draw_series(LineSeries::new(log.losses.iter().copied().enumerate(), &BLUE))
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
        plotted.push(out.display().to_string());
    }
    Ok(serde_json::json!({ "plots": plotted }))
}

fn run_command(cmd: &Command) -> Result<()> {
    let (name, args, dirs_of): (&str, &Args, fn(&Ctx) -> (Vec<PathBuf>, PathBuf)) = match cmd {
        Command::GenToy(a) => ("gen-toy", a, |c| {
            (
                vec![c.data("real"), c.data("holdout"), c.data("images")],
                c.cfg.paths.data_dir.join("gen-toy.manifest.json"),
            )
        }),
        Command::TrainAe(a) => ("train-ae", a, |c| (vec![c.ckpt("ae")], c.ckpt("ae").join("manifest.json"))),
        Command::EncodeLatents(a) => ("encode-latents", a, |c| {
            (vec![c.ckpt("latents")], c.ckpt("latents").join("manifest.json"))
        }),
        Command::TrainDiff(a) => ("train-diff", a, |c| (vec![c.ckpt("diff")], c.ckpt("diff").join("manifest.json"))),
        Command::Synthesize(a) => ("synthesize", a, |c| {
            (vec![c.data("synthetic")], c.data("synthetic").join("manifest.json"))
        }),
        Command::Evaluate(a) => ("evaluate", a, |c| {
            (vec![c.report("evaluate")], c.report("evaluate").join("manifest.json"))
        }),
        Command::Experiment(a) => ("experiment", a, |c| {
            (vec![c.report("experiment")], c.report("experiment").join("manifest.json"))
        }),
        Command::Report(a) => ("report", a, |c| (vec![c.report("report")], c.report("report").join("manifest.json"))),
    };
    let (cfg, hash) = RunConfig::load(&args.config)?;
    let ctx = Ctx { cfg, hash };
    let started = Instant::now();
    eprintln!("lddm {name}: starting");
    let summary = match cmd {
        Command::GenToy(_) => gen_toy(&ctx)?,
        Command::TrainAe(_) => train_ae(&ctx)?,
        Command::EncodeLatents(_) => encode_latents(&ctx)?,
        Command::TrainDiff(_) => train_diff(&ctx)?,
        Command::Synthesize(_) => synthesize(&ctx)?,
        Command::Evaluate(_) => evaluate(&ctx)?,
        Command::Experiment(_) => experiment(&ctx)?,
        Command::Report(_) => report(&ctx)?,
    };
    let (dirs, at) = dirs_of(&ctx);
    write_manifest(&ctx, name, &dirs, &at, summary)?;
    eprintln!(
        "lddm {name}: done in {:.1}s, manifest {}",
        started.elapsed().as_secs_f64(),
        at.display()
    );
    Ok(())
}

/// Exit status for an error: 3 for configuration and missing prerequisites, 1 otherwise.
pub fn exit_code(e: &LddmError) -> i32 {
    match e {
        LddmError::Config(_) | LddmError::MissingArtifact(_) => 3,
        _ => 1,
    }
}

/// Parses arguments (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run_command(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let category = if code == 3 { "configuration error" } else { "runtime error" };
            eprintln!("lddm: {category}: {e}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(["lddm", "frobnicate"]), 2);
    }

    #[test]
    fn missing_config_is_config_error() {
        assert_eq!(dispatch(["lddm", "gen-toy", "--config", "/nonexistent/cfg.json"]), 3);
    }

    #[test]
    fn error_categories() {
        assert_eq!(exit_code(&LddmError::MissingArtifact("x".into())), 3);
        assert_eq!(exit_code(&LddmError::EmptyInput("x")), 1);
    }
}
