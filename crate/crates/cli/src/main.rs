//! `dbag`: extract features, train, build the reference set, predict and
//! evaluate, all driven by one TOML config.
//!
//! Exit codes: 0 success, 1 usage or general failure, 2 partial failure
//! (some videos failed), 3 artifact mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dbag::artifact;
use dbag::config::PipelineConfig;
use dbag::descriptor::PadMode;
use dbag::eval::{self, Assignment, DataSpec, SplitMode};
use dbag::inference::{self, VideoVerdict};
use dbag::manifest::Manifest;
use dbag::net::{Checkpoint, ModelConfig};
use dbag::pipeline;
use dbag::synthetic;
use dbag::trainer::ReferenceSet;
use dbag::Error;

#[derive(Parser, Debug)]
#[command(name = "dbag", version, about = "Behavior-aware deepfake detection pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed everywhere it is used.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `off` or `repeat_last`.
    #[arg(long, global = true)]
    pad_mode: Option<PadMode>,
    #[arg(long, global = true)]
    m_neighbors: Option<usize>,
    #[arg(long, global = true)]
    margin: Option<f32>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute per-video feature caches.
    Extract {
        /// Manifests to process; defaults to the config's train and test manifests.
        #[arg(long)]
        manifest: Vec<PathBuf>,
    },
    /// Train the embedding network on the training side of the split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrain even when the checkpoint is up to date.
        #[arg(long)]
        force: bool,
    },
    /// Embed the training slices into a reference set.
    BuildRef {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the test side of a manifest.
    Predict {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, build the reference set and score the test manifest in one go.
    Evaluate {
        #[arg(long, alias = "manifest")]
        train_manifest: Option<PathBuf>,
        /// Defaults to the train manifest (same-dataset protocol).
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// Restrict the training side to real videos plus this manipulation.
        #[arg(long)]
        train_manipulation: Option<String>,
        #[arg(long)]
        test_manipulation: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a 2-D projection of the reference set and the ROC curve as CSV.
    ExportViz {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic fixture pack and a config that uses it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 240)]
        frames: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
    },
}

/// A failure plus the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ArtifactMismatch(_) | Error::StatsMismatch { .. } | Error::CorruptCache { .. } => 3,
            _ => 1,
        };
        let message = match &e {
            Error::MissingArtifact(p) => format!("missing artifact {}; run the step that produces it first", p.display()),
            Error::MissingCache { video_id, path } => {
                format!("no feature cache for `{video_id}` at {}; run `dbag extract` first", path.display())
            }
            _ => e.to_string(),
        };
        Failure { code, message }
    }
}

fn mismatch(message: String) -> Failure {
    Failure { code: 3, message }
}

type Outcome = std::result::Result<u8, Failure>;

/// Hashes attached to predictions, so downstream steps can check the chain.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionMeta {
    config_hash: String,
    checkpoint_hash: String,
    reference_hash: String,
    manifest_hash: String,
    failed: Vec<(String, String)>,
}

struct Ctx {
    cfg: PipelineConfig,
    workers: usize,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self, Failure> {
        let mut cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig {
                base_dir: std::env::current_dir().map_err(Error::from)?,
                ..PipelineConfig::default()
            },
        };
        if let Some(s) = cli.seed {
            cfg.set_seed(s);
        }
        if let Some(p) = cli.pad_mode {
            cfg.slicing.pad_mode = p;
        }
        if let Some(m) = cli.m_neighbors {
            cfg.inference.m_neighbors = m;
        }
        if let Some(m) = cli.margin {
            cfg.train.margin = m;
        }
        cfg.validate()?;
        let workers = cli
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Ok(Self { cfg, workers })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(p)
    }

    fn cache_dir(&self) -> PathBuf {
        self.path(&self.cfg.paths.cache_dir)
    }

    fn checkpoint_path(&self, over: &Option<PathBuf>) -> PathBuf {
        over.clone()
            .unwrap_or_else(|| self.path(&self.cfg.paths.checkpoint_dir).join("model.ckpt"))
    }

    fn reference_path(&self, over: &Option<PathBuf>) -> PathBuf {
        over.clone()
            .unwrap_or_else(|| self.path(&self.cfg.paths.checkpoint_dir).join("reference.emb"))
    }

    fn output_dir(&self, over: &Option<PathBuf>) -> PathBuf {
        over.clone().unwrap_or_else(|| self.path(&self.cfg.paths.output_dir))
    }

    fn manifest(&self, over: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<Manifest, Failure> {
        let path = match (over, fallback) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => self.path(p),
            (None, None) => {
                return Err(Failure {
                    code: 1,
                    message: format!("no {what} manifest: pass --manifest or set it in the config"),
                })
            }
        };
        Ok(Manifest::load(&path)?)
    }

    fn train_manifest(&self, over: &Option<PathBuf>) -> Result<Manifest, Failure> {
        self.manifest(over, &self.cfg.paths.train_manifest, "train")
    }

    fn test_manifest(&self, over: &Option<PathBuf>) -> Result<Manifest, Failure> {
        let fallback = self.cfg.paths.test_manifest.clone().or(self.cfg.paths.train_manifest.clone());
        self.manifest(over, &fallback, "test")
    }
}

fn meta_str<'a>(ckpt: &'a Checkpoint, key: &str) -> &'a str {
    ckpt.header.metadata.get(key).and_then(|v| v.as_str()).unwrap_or("")
}

fn cmd_extract(ctx: &Ctx, manifests: &[PathBuf]) -> Outcome {
    let paths: Vec<PathBuf> = if manifests.is_empty() {
        [&ctx.cfg.paths.train_manifest, &ctx.cfg.paths.test_manifest]
            .into_iter()
            .flatten()
            .map(|p| ctx.path(p))
            .collect()
    } else {
        manifests.to_vec()
    };
    if paths.is_empty() {
        return Err(Failure {
            code: 1,
            message: "no manifest: pass --manifest or set paths.train_manifest".into(),
        });
    }
    let registry = ctx.cfg.backends.build();
    let mut failed = 0;
    for p in paths {
        let manifest = Manifest::load(&p)?;
        let s = pipeline::extract_manifest(
            &manifest,
            &ctx.cache_dir(),
            &registry,
            &ctx.cfg.region,
            &ctx.cfg.extraction,
            ctx.workers,
        )?;
        println!(
            "{}: {} computed, {} up to date, {} failed",
            p.display(),
            s.computed.len(),
            s.skipped.len(),
            s.failed.len()
        );
        for (id, why) in &s.failed {
            println!("  failed {id}: {why}");
        }
        failed += s.failed.len();
    }
    Ok(if failed > 0 { 2 } else { 0 })
}

fn training_videos(ctx: &Ctx, manifest: &Manifest) -> Result<Vec<pipeline::VideoFeatures>, Failure> {
    let plan = eval::plan_for(manifest, ctx.cfg.split, ctx.cfg.seed, false)?;
    Ok(eval::select_videos(
        &DataSpec::new("train", manifest),
        &plan,
        Assignment::Train,
        &ctx.cache_dir(),
    )?)
}

fn cmd_train(ctx: &Ctx, manifest: &Option<PathBuf>, out: &Option<PathBuf>, force: bool) -> Outcome {
    let manifest = ctx.train_manifest(manifest)?;
    let path = ctx.checkpoint_path(out);
    let exp = ctx.cfg.experiment();
    if !force && path.exists() {
        if let Ok(ck) = Checkpoint::load(&path) {
            if meta_str(&ck, "config_hash") == exp.config_hash && meta_str(&ck, "manifest_hash") == manifest.hash() {
                println!("{} is up to date", path.display());
                return Ok(0);
            }
        }
    }
    let videos = training_videos(ctx, &manifest)?;
    let mut trained = pipeline::train_model(&videos, &exp, &manifest.hash())?;
    let hash = trained.checkpoint.save(&path)?;
    let history = path.with_extension("history.jsonl");
    artifact::write_atomic(&history, trained.history.to_jsonl().as_bytes())?;
    println!("checkpoint {} sha256 {hash}", path.display());
    Ok(0)
}

fn cmd_build_ref(ctx: &Ctx, manifest: &Option<PathBuf>, checkpoint: &Option<PathBuf>, out: &Option<PathBuf>) -> Outcome {
    let manifest = ctx.train_manifest(manifest)?;
    let ck_path = ctx.checkpoint_path(checkpoint);
    let ckpt = Checkpoint::load(&ck_path)?;
    let ck_hash = artifact::hash_file(&ck_path)?;
    let trained_on = meta_str(&ckpt, "manifest_hash");
    if trained_on != manifest.hash() {
        return Err(mismatch(format!(
            "checkpoint was trained on manifest {trained_on}, but the reference manifest hashes to {}",
            manifest.hash()
        )));
    }
    if ckpt.header.region_spec_hash != ctx.cfg.region.hash() {
        return Err(mismatch(format!(
            "checkpoint uses region spec {}, config has {}",
            ckpt.header.region_spec_hash,
            ctx.cfg.region.hash()
        )));
    }
    let out = ctx.reference_path(out);
    if let Ok(existing) = ReferenceSet::load(&out) {
        if existing.checkpoint_hash == ck_hash && existing.manifest_hash == manifest.hash() {
            println!("{} is up to date", out.display());
            return Ok(0);
        }
    }
    let videos = training_videos(ctx, &manifest)?;
    let reference = pipeline::reference_for_checkpoint(&ckpt, &ck_hash, &videos, &manifest.hash())?;
    reference.save(&out)?;
    println!("reference {} ({} slices)", out.display(), reference.len());
    Ok(0)
}

fn cmd_predict(
    ctx: &Ctx,
    manifest: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    reference: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Outcome {
    let manifest = ctx.test_manifest(manifest)?;
    let ck_path = ctx.checkpoint_path(checkpoint);
    let ckpt = Checkpoint::load(&ck_path)?;
    let ck_hash = artifact::hash_file(&ck_path)?;
    let reference = ReferenceSet::load(&ctx.reference_path(reference))?;
    if reference.checkpoint_hash != ck_hash {
        return Err(mismatch(format!(
            "reference set was built with checkpoint {}, but {} hashes to {ck_hash}",
            reference.checkpoint_hash,
            ck_path.display()
        )));
    }
    let icfg = &ctx.cfg.inference;
    if icfg.m_neighbors > reference.len() {
        return Err(Error::MTooLarge {
            m: icfg.m_neighbors,
            n: reference.len(),
        }
        .into());
    }
    // a manifest the model was trained on is split; anything else is all test
    let as_test = ctx.cfg.split == SplitMode::Predefined || manifest.hash() != reference.manifest_hash;
    let plan = if as_test {
        eval::plan_for(&manifest, SplitMode::Predefined, ctx.cfg.seed, true)?
    } else {
        eval::plan_for(&manifest, ctx.cfg.split, ctx.cfg.seed, true)?
    };
    let mut verdicts: Vec<VideoVerdict> = Vec::new();
    let mut failed = Vec::new();
    for rec in &manifest.records {
        let one = Manifest {
            records: vec![rec.clone()],
            base_dir: manifest.base_dir.clone(),
        };
        let result = eval::select_videos(&DataSpec::new("test", &one), &plan, Assignment::Test, &ctx.cache_dir())
            .and_then(|vs| {
                vs.iter()
                    .map(|v| pipeline::predict(&ckpt, &reference, v, icfg))
                    .collect::<dbag::Result<Vec<_>>>()
            });
        match result {
            Ok(vs) => verdicts.extend(vs),
            Err(e @ (Error::ArtifactMismatch(_) | Error::StatsMismatch { .. })) => return Err(e.into()),
            Err(e) => {
                log::error!("{}: {e}", rec.video_id);
                failed.push((rec.video_id.clone(), e.to_string()));
            }
        }
    }
    let dir = ctx.output_dir(&None);
    let out = out.clone().unwrap_or_else(|| dir.join("predictions.jsonl"));
    inference::write_predictions(&out, &verdicts)?;
    let meta = PredictionMeta {
        config_hash: ctx.cfg.hash(),
        checkpoint_hash: ck_hash,
        reference_hash: reference.hash(),
        manifest_hash: manifest.hash(),
        failed: failed.clone(),
    };
    artifact::write_json(&artifact::sidecar_path(&out), &meta)?;
    let fakes = verdicts.iter().filter(|v| v.label.is_fake()).count();
    println!(
        "{} videos scored ({fakes} fake), {} failed; wrote {}",
        verdicts.len(),
        failed.len(),
        out.display()
    );
    Ok(if failed.is_empty() { 0 } else { 2 })
}

fn cmd_evaluate(
    ctx: &Ctx,
    train: &Option<PathBuf>,
    test: &Option<PathBuf>,
    train_manip: &Option<String>,
    test_manip: &Option<String>,
    out_dir: &Option<PathBuf>,
) -> Outcome {
    let train_m = ctx.train_manifest(train)?;
    let test_m = match (test, &ctx.cfg.paths.test_manifest) {
        (None, None) => train_m.clone(),
        _ => ctx.test_manifest(test)?,
    };
    let name = |m: &Manifest| m.records.first().map(|r| r.dataset_name.clone()).unwrap_or_default();
    let mut train_spec = DataSpec::new(name(&train_m), &train_m);
    if let Some(m) = train_manip {
        train_spec = train_spec.with_manipulation(m.clone());
    }
    let mut test_spec = DataSpec::new(name(&test_m), &test_m);
    if let Some(m) = test_manip {
        test_spec = test_spec.with_manipulation(m.clone());
    }
    let outcome = eval::run_experiment(&train_spec, &test_spec, &ctx.cache_dir(), &ctx.cfg.experiment())?;
    let dir = ctx.output_dir(out_dir);
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    artifact::write_atomic(&dir.join("model.ckpt"), &outcome.checkpoint_bytes)?;
    outcome.reference.save(&dir.join("reference.emb"))?;
    artifact::write_atomic(&dir.join("history.jsonl"), outcome.history.to_jsonl().as_bytes())?;
    let r = &outcome.report;
    r.save(&dir.join("report.json"))?;
    artifact::write_atomic(&dir.join("roc.csv"), eval::roc_csv(&r.roc()?).as_bytes())?;
    println!(
        "{} -> {}: AUC {:.2}  EER {:.2}  ACC {:.2}  ({} videos, {} skipped)",
        r.train,
        r.test,
        r.auc,
        r.eer,
        r.acc,
        r.n_videos,
        r.skipped.len()
    );
    Ok(0)
}

fn cmd_export_viz(ctx: &Ctx, reference: &Option<PathBuf>, report: &Option<PathBuf>, out_dir: &Option<PathBuf>) -> Outcome {
    let dir = ctx.output_dir(out_dir);
    let reference = ReferenceSet::load(&ctx.reference_path(reference))?;
    let coords = eval::pca_2d(reference.embeddings.view());
    let ids: Vec<String> = reference
        .video_ids
        .iter()
        .zip(&reference.start_frames)
        .map(|(v, s)| format!("{v}@{s}"))
        .collect();
    let proj = dir.join("projection.csv");
    artifact::write_atomic(&proj, eval::projection_csv(&coords, &reference.labels, &ids).as_bytes())?;
    println!("wrote {}", proj.display());
    let report_path = report.clone().unwrap_or_else(|| dir.join("report.json"));
    if report_path.exists() {
        let r = eval::EvalReport::load(&report_path)?;
        let roc = dir.join("roc.csv");
        artifact::write_atomic(&roc, eval::roc_csv(&r.roc()?).as_bytes())?;
        println!("wrote {}", roc.display());
    }
    Ok(0)
}

fn cmd_synth(seed: u64, out: &Path, n_train: usize, n_test: usize, frames: usize, epochs: usize) -> Outcome {
    let (mut train, mut test) = synthetic::benchmark_sets(seed);
    train.n_videos = n_train;
    test.n_videos = n_test;
    for c in [&mut train, &mut test] {
        c.frames = frames;
    }
    let pack = synthetic::write_fixture_pack(out, &train, &test)?;
    let mut cfg = PipelineConfig::default();
    cfg.set_seed(seed);
    cfg.split = SplitMode::Predefined;
    cfg.model = ModelConfig::compact();
    cfg.train.epochs = epochs;
    let rel = |p: &Path| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    cfg.paths.train_manifest = Some(rel(&pack.train_manifest));
    cfg.paths.test_manifest = Some(rel(&pack.test_manifest));
    cfg.paths.cache_dir = rel(&pack.cache_dir);
    let cfg_path = out.join("config.toml");
    cfg.save(&cfg_path)?;
    artifact::write_json(
        &out.join("generator.json"),
        &serde_json::json!({ "train": train, "test": test }),
    )?;
    println!("wrote {}", cfg_path.display());
    Ok(0)
}

fn run(cli: &Cli) -> Outcome {
    if let Command::Synth {
        out,
        n_train,
        n_test,
        frames,
        epochs,
    } = &cli.command
    {
        return cmd_synth(cli.seed.unwrap_or(0), out, *n_train, *n_test, *frames, *epochs);
    }
    let ctx = Ctx::load(cli)?;
    match &cli.command {
        Command::Extract { manifest } => cmd_extract(&ctx, manifest),
        Command::Train { manifest, out, force } => cmd_train(&ctx, manifest, out, *force),
        Command::BuildRef {
            manifest,
            checkpoint,
            out,
        } => cmd_build_ref(&ctx, manifest, checkpoint, out),
        Command::Predict {
            manifest,
            checkpoint,
            reference,
            out,
        } => cmd_predict(&ctx, manifest, checkpoint, reference, out),
        Command::Evaluate {
            train_manifest,
            test_manifest,
            train_manipulation,
            test_manipulation,
            out_dir,
        } => cmd_evaluate(&ctx, train_manifest, test_manifest, train_manipulation, test_manipulation, out_dir),
        Command::ExportViz {
            reference,
            report,
            out_dir,
        } => cmd_export_viz(&ctx, reference, report, out_dir),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
