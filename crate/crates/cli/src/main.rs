//! `nst`: train, study, benchmark and serve style transfer models.
//!
//! Every subcommand resolves its configuration (file, then `--set`
//! overrides, then subcommand flags), creates `runs/<timestamp>-<hash8>/`,
//! writes `config.resolved` there and keeps all of its output inside that
//! directory. Exit codes: 0 success, 1 configuration error, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use nst_core::raster::{self, Encoding};
use nst_core::service::bench::bench_latency;
use nst_core::trainer::{config_hash, load_content, Experiment, PreparedStyle, StyleSpec};
use nst_core::{fixtures, Checkpoint, Config, Engine, ImageTensor, Model, Resolution, StylizeRequest};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nst", version, about = "Feed-forward multi-style neural style transfer")]
struct Cli {
    /// TOML config file. Relative paths inside it resolve against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set epochs=1` or `--set service.queue_depth=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs", global = true)]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multi-style network on the configured content and styles.
    Train,
    /// Fine-tune a new style into an existing checkpoint (CIN parameters only).
    AddStyle(AddStyleArgs),
    /// Stylise one image with a trained checkpoint.
    Stylize(StylizeArgs),
    /// Train one model per style weight and compare held-out outputs.
    SweepStyleWeight {
        /// Comma-separated style weights; default from `sweep.style_weights`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Train one model per batch size and seed and compare loss oscillation.
    SweepBatchSize {
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Equal optimisation-step budget for every batch size.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// One training run with snapshots at the listed epochs and a saturation verdict.
    SweepEpochs {
        #[arg(long, value_delimiter = ',')]
        epochs: Vec<usize>,
    },
    /// Mean pairwise Gram distance between style images.
    Dispersion {
        /// Style images; default: the configured styles (crops applied).
        images: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
    },
    /// Latency per resolution over the full request path.
    Bench(BenchArgs),
    /// Serve the HTTP API. SIGHUP reloads the checkpoint; Ctrl-C stops.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Args)]
struct AddStyleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    style_id: String,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    display_name: Option<String>,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    style: String,
    #[arg(long = "in", value_name = "IMAGE")]
    input: PathBuf,
    /// low, mid, high, native or WIDTHxHEIGHT.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long, default_value = "jpeg")]
    format: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Style to benchmark; default the first in the checkpoint.
    #[arg(long)]
    style: Option<String>,
    #[arg(long, value_delimiter = ',')]
    resolutions: Vec<String>,
    #[arg(long)]
    repeats: Option<usize>,
}

/// A problem with the invocation or configuration (exit code 1).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<nst_core::Error>().is_some_and(|e| e.is_config())
    });
    if config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with `: `, skipping causes already quoted by
/// their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Subcommand flags expressed as config overrides, so `config.resolved`
/// records them.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let list = |v: &[String]| format!("[{}]", v.join(", "));
    let quoted = |v: &[String]| list(&v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>());
    let nums = |v: Vec<String>| list(&v);
    let path = |p: &Path| format!("{:?}", p.display().to_string());
    let mut o = Vec::new();
    match cmd {
        Command::SweepStyleWeight { values } if !values.is_empty() => {
            o.push(format!("sweep.style_weights={}", nums(values.iter().map(|v| format!("{v:?}")).collect())));
        }
        Command::SweepBatchSize { values, seeds, steps } => {
            if !values.is_empty() {
                o.push(format!("sweep.batch_sizes={}", nums(values.iter().map(ToString::to_string).collect())));
            }
            if !seeds.is_empty() {
                o.push(format!("sweep.batch_seeds={}", nums(seeds.iter().map(ToString::to_string).collect())));
            }
            if let Some(s) = steps {
                o.push(format!("sweep.batch_steps={s}"));
            }
        }
        Command::SweepEpochs { epochs } if !epochs.is_empty() => {
            o.push(format!("sweep.epochs={}", nums(epochs.iter().map(ToString::to_string).collect())));
        }
        Command::Dispersion { layers, .. } if !layers.is_empty() => {
            o.push(format!("train.weights.style_layers={}", quoted(layers)));
        }
        Command::Stylize(a) => {
            if let Some(c) = &a.checkpoint {
                o.push(format!("service.checkpoint={}", path(c)));
            }
        }
        Command::Bench(a) => {
            if let Some(c) = &a.checkpoint {
                o.push(format!("service.checkpoint={}", path(c)));
            }
            if !a.resolutions.is_empty() {
                o.push(format!("bench.resolutions={}", quoted(&a.resolutions)));
            }
            if let Some(r) = a.repeats {
                o.push(format!("bench.repeats={r}"));
            }
        }
        Command::Serve { checkpoint, listen } => {
            if let Some(c) = checkpoint {
                o.push(format!("service.checkpoint={}", path(c)));
            }
            if let Some(l) = listen {
                o.push(format!("service.listen={l:?}"));
            }
        }
        _ => {}
    }
    o
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cwd = std::env::current_dir()?;
    let mut cfg = match &cli.config {
        Some(path) => Config::load(&cwd.join(path), &overrides)?,
        None => Config::parse("", &overrides)?,
    };
    // Absolute paths keep `config.resolved` runnable from anywhere.
    cfg.resolve_paths(&cwd);
    Ok(cfg)
}

/// `runs_dir/<UTC timestamp>-<hash8>`, with a numeric suffix on collision.
fn create_run_dir(runs_dir: &Path, resolved: &str) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let hash = &config_hash(resolved)[..8];
    let base = runs_dir.join(format!("{stamp}-{hash}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    for sub in ["checkpoints", "images"] {
        std::fs::create_dir_all(dir.join(sub)).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    }
    std::fs::write(dir.join("config.resolved"), resolved)?;
    Ok(dir)
}

fn write_summary(dir: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let resolved = cfg.resolved()?;
    let dir = create_run_dir(&cli.runs_dir, &resolved)?;
    tracing::info!(run_dir = %dir.display(), "starting");
    match &cli.command {
        Command::Train => train(&cfg, &dir)?,
        Command::AddStyle(a) => add_style(&cfg, a, &dir)?,
        Command::Stylize(a) => stylize(&cfg, a, &dir)?,
        Command::SweepStyleWeight { .. } => {
            let exp = Experiment::load(&cfg.train, &cfg.sweep)?;
            nst_core::sweep_style_weight(&exp, &cfg.sweep.style_weights)?.write(&dir)?;
        }
        Command::SweepBatchSize { .. } => {
            let exp = Experiment::load(&cfg.train, &cfg.sweep)?;
            nst_core::sweep_batch_size(&exp, &cfg.sweep)?.write(&dir)?;
        }
        Command::SweepEpochs { .. } => {
            let exp = Experiment::load(&cfg.train, &cfg.sweep)?;
            nst_core::sweep_epochs(&exp, &cfg.sweep.epochs, cfg.sweep.saturation_threshold)?.write(&dir)?;
        }
        Command::Dispersion { images, .. } => dispersion(&cfg, images, &dir)?,
        Command::Bench(a) => bench(&cfg, a, &dir)?,
        Command::Serve { .. } => serve(&cfg, &dir)?,
    }
    println!("{}", dir.display());
    Ok(())
}

fn train(cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let (ck_path, history) = nst_core::train(&cfg.train, dir)?;
    let ck = Checkpoint::load(&ck_path)?;
    let content = load_content(&cfg.train.content_dir, cfg.train.train_resolution)?;
    let first = &content[0];
    let mut cells = vec![first.clone()];
    for k in 0..ck.net.style_bank.len() {
        cells.push(ImageTensor::new(ck.net.forward_tensor(first.tensor(), k)?));
    }
    raster::tile(&cells, cells.len()).save_png(&dir.join("images").join("preview.png"))?;
    write_summary(
        dir,
        &json!({
            "checkpoint": ck_path,
            "steps": history.len(),
            "epochs": cfg.train.epochs,
            "final_loss": history.records.last().map(|r| r.breakdown),
            "wall_time_per_step": history.wall_time_per_step(),
            "styles": ck.net.style_bank.styles.iter().map(|s| &s.style_id).collect::<Vec<_>>(),
        }),
    )
}

fn add_style(cfg: &Config, a: &AddStyleArgs, dir: &Path) -> anyhow::Result<()> {
    let base = Checkpoint::load(&a.checkpoint)?;
    let mut spec = StyleSpec::new(&a.style_id, &a.image);
    spec.display_name = a.display_name.clone();
    let train = &cfg.train;
    let backbone = train.backbone.load(&spec.loss_weights(&train.weights).taps())?;
    let image = spec.prepare_image(&ImageTensor::load(&spec.image_path)?, train.train_resolution)?;
    let style = PreparedStyle::new(&backbone, spec, image, &train.weights)?;
    let content = load_content(&train.content_dir, train.train_resolution)?;
    let (ck, history) = nst_core::add_style(&base, style, train, &backbone, &content)?;
    let out = dir.join("checkpoints").join("final.safetensors");
    ck.save(&out)?;
    history.write_csv(&dir.join("loss.csv"))?;
    write_summary(dir, &json!({ "checkpoint": out, "base_checkpoint": a.checkpoint, "style_id": a.style_id, "steps": history.len() }))
}

fn engine(cfg: &Config) -> anyhow::Result<Engine> {
    let path = &cfg.service.checkpoint;
    let model = Model::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(Engine::new(model, cfg.service.clone()))
}

fn parse_encoding(s: &str) -> anyhow::Result<Encoding> {
    match s.to_ascii_lowercase().as_str() {
        "jpeg" | "jpg" => Ok(Encoding::Jpeg),
        "png" => Ok(Encoding::Png),
        other => Err(usage(format!("unsupported format `{other}`; use jpeg or png"))),
    }
}

fn stylize(cfg: &Config, a: &StylizeArgs, dir: &Path) -> anyhow::Result<()> {
    let encoding = parse_encoding(&a.format)?;
    let resolution = match &a.resolution {
        Some(r) => r.parse::<Resolution>().map_err(|e| usage(e.message))?,
        None => cfg.service.default_resolution,
    };
    let engine = engine(cfg)?;
    if !engine.list_styles().iter().any(|s| s.style_id == a.style) {
        let known: Vec<_> = engine.list_styles().into_iter().map(|s| s.style_id).collect();
        return Err(usage(format!("style `{}` is not in the checkpoint (available: {})", a.style, known.join(", "))));
    }
    let bytes = std::fs::read(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let req = StylizeRequest { content_image: bytes, style_id: a.style.clone(), target_resolution: resolution, encoding };
    let r = engine.stylize(&req).map_err(|e| if e.status == 400 { usage(e.to_string()) } else { anyhow!(e) })?;
    let ext = if encoding == Encoding::Png { "png" } else { "jpg" };
    let out = dir.join("images").join(format!("stylized.{ext}"));
    std::fs::write(&out, &r.image)?;
    write_summary(
        dir,
        &json!({
            "output": out,
            "input": a.input,
            "style_id": r.style_id,
            "resolution_used": r.resolution_used,
            "latency_ms": r.latency_ms,
            "model_provenance": r.model_provenance,
        }),
    )
}

fn dispersion(cfg: &Config, images: &[PathBuf], dir: &Path) -> anyhow::Result<()> {
    let train = &cfg.train;
    let (names, imgs): (Vec<String>, Vec<ImageTensor>) = if images.is_empty() {
        train
            .style_specs
            .iter()
            .map(|s| Ok((s.style_id.clone(), s.prepare_image(&ImageTensor::load(&s.image_path)?, train.train_resolution)?)))
            .collect::<anyhow::Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    } else {
        let (h, w) = train.train_resolution;
        images
            .iter()
            .map(|p| Ok((p.display().to_string(), ImageTensor::load(p)?.resize_to_fill(h, w))))
            .collect::<anyhow::Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    };
    if imgs.len() < 2 {
        return Err(usage("dispersion needs at least two style images (pass paths or configure [[train.styles]])"));
    }
    let layers = &train.weights.style_layers;
    let backbone = train.backbone.load(layers)?;
    let d = nst_core::style_set_dispersion(&backbone, &imgs, layers)?;
    println!("dispersion {d:.6}");
    raster::tile(&imgs, imgs.len()).save_png(&dir.join("images").join("styles.png"))?;
    write_summary(
        dir,
        &json!({ "dispersion": d, "images": names, "layers": layers.iter().map(ToString::to_string).collect::<Vec<_>>() }),
    )
}

fn bench(cfg: &Config, a: &BenchArgs, dir: &Path) -> anyhow::Result<()> {
    let engine = engine(cfg)?;
    let style = match &a.style {
        Some(s) => s.clone(),
        None => engine.list_styles().first().map(|s| s.style_id.clone()).ok_or_else(|| usage("checkpoint has no styles"))?,
    };
    let source = match &cfg.bench.source_image {
        Some(p) => std::fs::read(p).with_context(|| format!("cannot read {}", p.display()))?,
        None => raster::encode(&fixtures::content_image(7, 1080, 1920), Encoding::Png, 90)?,
    };
    let limit = cfg.bench.memory_limit_mb.map(|mb| mb << 20);
    let table = bench_latency(
        &engine,
        &source,
        &style,
        &cfg.bench.resolutions,
        cfg.bench.repeats,
        cfg.service.latency_budget_ms,
        limit,
    )?;
    table.write_csv(&dir.join("latency.csv"))?;
    table.write_json(&dir.join("summary.json"))?;
    for r in &table.rows {
        match &r.failure {
            None => println!("{:>10} {:>4}x{:<4} median {:>9.1} ms  p90 {:>9.1} ms", r.resolution, r.width, r.height, r.total.median, r.total.p90),
            Some(f) => println!("{:>10} {:>4}x{:<4} failed: {f}", r.resolution, r.width, r.height),
        }
    }
    println!("selected: {}", table.selected.as_deref().unwrap_or("none within budget"));
    Ok(())
}

fn serve(cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let engine = Arc::new(engine(cfg)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let checkpoint = cfg.service.checkpoint.clone();
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.service.listen)
            .await
            .map_err(|e| usage(format!("cannot listen on {}: {e}", cfg.service.listen)))?;
        tracing::info!(addr = %listener.local_addr()?, checkpoint = %checkpoint.display(), "serving");
        spawn_reload_on_hangup(engine.clone(), checkpoint)?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        nst_core::service::http::serve(engine.clone(), listener, shutdown).await?;
        anyhow::Ok(())
    })?;
    write_summary(dir, &serde_json::to_value(engine.metrics())?)
}

#[cfg(unix)]
fn spawn_reload_on_hangup(engine: Arc<Engine>, checkpoint: PathBuf) -> anyhow::Result<()> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut hup = signal(SignalKind::hangup())?;
    tokio::spawn(async move {
        while hup.recv().await.is_some() {
            let (engine, path) = (engine.clone(), checkpoint.clone());
            match tokio::task::spawn_blocking(move || engine.reload(&path)).await {
                Ok(Ok(hash)) => tracing::info!(%hash, "checkpoint reloaded"),
                Ok(Err(e)) => tracing::error!("reload failed, keeping the current model: {e}"),
                Err(e) => tracing::error!("reload task failed: {e}"),
            }
        }
    });
    Ok(())
}

#[cfg(not(unix))]
fn spawn_reload_on_hangup(_: Arc<Engine>, _: PathBuf) -> anyhow::Result<()> {
    Ok(())
}
