//! Train and evaluate on the seeded synthetic benchmark.
//!
//! ```text
//! RUST_LOG=info cargo run --release -p dbag-core --example synthetic_benchmark -- [seed] [out_dir] [drift flicker spread]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use dbag::eval::{run_experiment, DataSpec, SplitMode};
use dbag::manifest::Manifest;
use dbag::net::ModelConfig;
use dbag::pipeline::ExperimentConfig;
use dbag::synthetic::{benchmark_sets, write_fixture_pack};

fn main() -> dbag::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let out: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dbag-bench"));

    let t0 = Instant::now();
    let (mut train, mut test) = benchmark_sets(seed);
    // optional generator overrides for calibration: drift flicker spread
    let extra: Vec<f32> = args.by_ref().map(|s| s.parse().expect("number")).collect();
    for c in [&mut train, &mut test] {
        if let Some(&d) = extra.first() {
            c.drift = d;
        }
        if let Some(&f) = extra.get(1) {
            c.flicker = f;
        }
        if let Some(&v) = extra.get(2) {
            c.video_spread = v;
        }
    }
    let pack = write_fixture_pack(&out, &train, &test)?;
    let train_m = Manifest::load(&pack.train_manifest)?;
    let test_m = Manifest::load(&pack.test_manifest)?;
    log::info!("generated fixtures in {:.1?}", t0.elapsed());

    let cfg = ExperimentConfig {
        model: ModelConfig::compact(),
        split: SplitMode::Predefined,
        seed,
        ..ExperimentConfig::default()
    };
    let t1 = Instant::now();
    let outcome = run_experiment(
        &DataSpec::new("synthetic-train", &train_m),
        &DataSpec::new("synthetic-test", &test_m),
        &pack.cache_dir,
        &cfg,
    )?;
    let r = &outcome.report;
    println!(
        "AUC {:.2}  EER {:.2}  ACC {:.2}  ({} videos) in {:.1?}",
        r.auc,
        r.eer,
        r.acc,
        r.n_videos,
        t1.elapsed()
    );
    for e in &outcome.history.epochs {
        println!("epoch {:2}  loss {:.4}  active {:.3}", e.epoch, e.mean_loss, e.active_fraction);
    }
    r.save(&out.join("report.json"))?;
    Ok(())
}
