use clap::{Args, Parser, Subcommand};
use georeg::config::{ExtractorKind, RunConfig};
use georeg::eval::benchmark::write_per_query_csv;
use georeg::eval::dataset::{load_pairs, write_pairs, FrameRecord};
use georeg::eval::{run_benchmark, synthetic_pairs, train, PairedDataset, Split, TrainingPair};
use georeg::features::{ExtractorParams, FeatureExtractor, LearnedExtractor};
use georeg::fusion::FusionState;
use georeg::geometry::{GeoRaster, ReferenceSource};
use georeg::search::search;
use georeg::sequencer::{FrameObservation, HeadingEstimate, Sequencer, StepMode};
use georeg::synth::{generate_trajectory, generate_world};
use georeg::Result;
use serde::Serialize;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "georeg", version, about = "Cross-view heading and location estimation against aerial imagery")]
struct Cli {
    /// Run configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world, a trajectory through it and a paired dataset.
    Simgen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the learned extractor on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split of a manifest and write metrics.json and per_query.csv.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cold-start heading estimation over a recorded frame list.
    Coldstart {
        #[command(flatten)]
        common: Common,
        /// JSON-lines frame records; image paths are relative to this file.
        #[arg(long)]
        frames: PathBuf,
        /// Search for the location around the reported position first.
        #[arg(long)]
        gps_challenged: bool,
        /// Switch to windowed refinement after the first accepted estimate.
        #[arg(long)]
        refine: bool,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        fov_threshold: Option<f64>,
        #[arg(long)]
        ratio_threshold: Option<f64>,
    },
    /// Read frame records from stdin, write one estimate per line to stdout.
    Stream {
        #[command(flatten)]
        common: Common,
        /// Directory that relative image paths are resolved against.
        #[arg(long, default_value = ".")]
        base: PathBuf,
        /// Fuse accepted estimates with odometry and report the fused heading.
        #[arg(long)]
        fuse: bool,
        /// Initial heading for the fusion filter; defaults to the first accepted estimate.
        #[arg(long)]
        initial_heading: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// Geo-referenced aerial raster (PNG with a `.json` sidecar).
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Simgen { out } => simgen(&cfg, &out),
        Command::Train { manifest, out } => train_cmd(&cfg, &manifest, &out),
        Command::Eval { manifest, checkpoint, out } => eval_cmd(&cfg, &manifest, checkpoint.as_deref(), &out),
        Command::Coldstart {
            common,
            frames,
            gps_challenged,
            refine,
            tau,
            fov_threshold,
            ratio_threshold,
        } => {
            let mut cfg = cfg;
            if let Some(t) = tau {
                cfg.sequencer.tau_seconds = t;
            }
            if let Some(f) = fov_threshold {
                cfg.sequencer.fov_threshold = f;
            }
            if let Some(r) = ratio_threshold {
                cfg.sequencer.ratio_threshold = r;
            }
            cfg.validate()?;
            coldstart(&cfg, &common, &frames, gps_challenged, refine)
        }
        Command::Stream {
            common,
            base,
            fuse,
            initial_heading,
        } => stream(&cfg, &common, &base, fuse, initial_heading),
    }
}

fn extractor(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Box<dyn FeatureExtractor>> {
    match (cfg.extractor, checkpoint) {
        (ExtractorKind::Handcrafted, _) => Ok(Box::new(cfg.handcrafted)),
        (ExtractorKind::Learned, Some(p)) => Ok(Box::new(LearnedExtractor {
            params: ExtractorParams::load(p, Some(&cfg.network))?,
        })),
        (ExtractorKind::Learned, None) => Err(georeg::Error::InvalidConfig(
            "the learned extractor needs --checkpoint".into(),
        )),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn simgen(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("frames"))?;
    let world = generate_world(&cfg.world)?;
    world.save(out.join("world.png"))?;

    let frames = generate_trajectory(&world, &cfg.trajectory)?;
    let mut lines = String::new();
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frames/{i:05}.png");
        f.observation.image.save_png(out.join(&name))?;
        let record = FrameRecord {
            image: name,
            latitude: f.observation.global_position.latitude,
            longitude: f.observation.global_position.longitude,
            heading_delta: f.observation.heading_delta,
            translation: f.observation.translation,
            timestamp: f.observation.timestamp,
            truth_heading: Some(f.truth.heading_degrees),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    std::fs::write(out.join("frames.jsonl"), lines)?;

    let pairs = synthetic_pairs(&cfg.dataset)?;
    write_pairs(out.join("pairs"), &pairs)?;
    write_json(&out.join("config.json"), cfg)?;
    eprintln!(
        "wrote world, {} frames and {} pairs to {}",
        frames.len(),
        pairs.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let ds = PairedDataset::load_manifest(manifest)?;
    let factor = cfg.network.feature_downsample;
    let pairs: Vec<TrainingPair> = load_pairs(&ds)?
        .into_iter()
        .filter(|p| p.split == Split::Train)
        .map(|p| TrainingPair {
            gt_bin: p.gt_bin(factor),
            ground: p.ground,
            reference: p.reference,
        })
        .collect();
    if pairs.is_empty() {
        return Err(georeg::Error::EmptySet);
    }
    let initial = ExtractorParams::init(cfg.network.clone())?;
    let (params, report) = train(&pairs, initial, &cfg.loss, &cfg.optimizer, Some(out))?;
    params.save(out.join("final.json"))?;
    write_json(&out.join("losses.json"), &report)?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        eprintln!("loss {first:.4} -> {last:.4} over {} epochs", report.epoch_losses.len());
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, manifest: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let ds = PairedDataset::load_manifest(manifest)?;
    let pairs = load_pairs(&ds)?;
    let ex = extractor(cfg, checkpoint)?;
    let report = run_benchmark(&pairs, ex.as_ref(), &cfg.benchmark)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    write_per_query_csv(out.join("per_query.csv"), &report)?;
    for (k, v) in &report.recall_at {
        eprintln!("R@{k}: {v:.3}");
    }
    Ok(())
}

fn read_frames(path: &Path) -> Result<Vec<FrameObservation>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<FrameRecord>(l)?.to_observation(base))
        .collect()
}

/// Heading prior carried between accepted estimates by odometry.
struct Prior(Option<f64>);

impl Prior {
    fn mode(&mut self, delta: f64, refine: bool) -> StepMode {
        if let Some(p) = &mut self.0 {
            *p = georeg::angle::wrap_degrees(*p + delta);
        }
        match self.0 {
            Some(prior_heading) if refine => StepMode::Refine { prior_heading },
            _ => StepMode::ColdStart,
        }
    }

    fn update(&mut self, e: &HeadingEstimate) {
        if e.accepted {
            self.0 = Some(e.heading_degrees);
        }
    }
}

#[derive(Serialize)]
struct SearchLine {
    latitude: f64,
    longitude: f64,
    heading_degrees: f64,
    score: f64,
}

fn coldstart(cfg: &RunConfig, common: &Common, frames_path: &Path, gps_challenged: bool, refine: bool) -> Result<()> {
    let world = GeoRaster::load(&common.world)?;
    let refs = ReferenceSource::new(&world, cfg.polar);
    let ex = extractor(cfg, common.checkpoint.as_deref())?;
    let mut frames = read_frames(frames_path)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if gps_challenged {
        let found = search(&frames, &refs, ex.as_ref(), &cfg.search)?;
        let b = &found.best;
        writeln!(
            out,
            "{}",
            serde_json::to_string(&SearchLine {
                latitude: b.location.latitude,
                longitude: b.location.longitude,
                heading_degrees: b.heading_degrees,
                score: b.score,
            })?
        )?;
        // a stationary user: every frame is taken at the found location
        for f in &mut frames {
            f.global_position = b.location;
        }
    }
    let mut seq = Sequencer::new(cfg.sequencer.clone())?;
    let mut prior = Prior(None);
    for f in &frames {
        let mode = prior.mode(f.heading_delta, refine);
        let e = seq.step(f, &refs, ex.as_ref(), mode)?;
        prior.update(&e);
        writeln!(out, "{}", serde_json::to_string(&e)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StreamLine {
    #[serde(flatten)]
    estimate: HeadingEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    fused_heading: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fused_variance: Option<f64>,
}

fn stream(cfg: &RunConfig, common: &Common, base: &Path, fuse: bool, initial: Option<f64>) -> Result<()> {
    let world = GeoRaster::load(&common.world)?;
    let refs = ReferenceSource::new(&world, cfg.polar);
    let ex = extractor(cfg, common.checkpoint.as_deref())?;
    let mut seq = Sequencer::new(cfg.sequencer.clone())?;
    let mut filter = match initial {
        Some(h) if fuse => Some(FusionState::new(h, &cfg.fusion)?),
        _ => None,
    };
    let mut last_t: Option<f64> = None;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line)?;
        let frame = record.to_observation(base)?;
        let e = seq.step(&frame, &refs, ex.as_ref(), StepMode::ColdStart)?;
        if fuse {
            let dt = last_t.map_or(0.0, |t| frame.timestamp - t);
            filter = match filter {
                Some(f) => Some(f.predict(frame.heading_delta, dt)?.correct(&e)),
                None if e.accepted => Some(FusionState::new(e.heading_degrees, &cfg.fusion)?),
                None => None,
            };
        }
        last_t = Some(frame.timestamp);
        let line = StreamLine {
            fused_heading: filter.map(|f| f.heading),
            fused_variance: filter.map(|f| f.variance),
            estimate: e,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
        out.flush()?;
    }
    Ok(())
}
