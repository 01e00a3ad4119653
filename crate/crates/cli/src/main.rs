//! `aide`: drive the data engine one stage at a time or end to end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aide_core::engine::server::{bind, serve, ReviewService};
use aide_core::engine::store::write_atomic;
use aide_core::engine::{default_store_root, Backend, Engine, EngineConfig, EngineOptions, RunDir, Stage};
use aide_core::feeder::write_binary;
use aide_core::worldsim::{generate_world, Split};
use aide_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aide", version, about = "Self-improving data engine for open-world detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Engine configuration (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the simulated world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the run id.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Directory holding `runs/`.
    #[arg(long, global = true, env = "AIDE_RUN_ROOT")]
    root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the simulated world and its embedding stores.
    Simgen {
        #[arg(long, default_value = "world")]
        out: PathBuf,
        /// Dump every image instead of the regenerable summary.
        #[arg(long)]
        full: bool,
    },
    /// Caption pool images and report label-space gaps.
    Scan,
    /// Accept categories and retrieve training images for them.
    Feed {
        /// Category to feed; repeatable. Defaults to the scan's candidates.
        #[arg(long)]
        category: Vec<String>,
    },
    /// Pseudo-label retrieved images and train the detector.
    Update,
    /// Build verification cases; optionally serve the review API.
    Verify {
        /// Address to serve on, e.g. `:8080`.
        #[arg(long)]
        serve: Option<String>,
        /// Directory of real images named `<id>.png`.
        #[arg(long)]
        images_dir: Option<PathBuf>,
        /// Built review client assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Retrain on reviewer corrections.
    Retrain,
    /// Print the cost/accuracy table.
    Report {
        #[arg(long)]
        pretty: bool,
    },
    /// Run the loop until done or blocked on review.
    Run {
        /// Replace human review with auto-pass.
        #[arg(long)]
        headless: bool,
        #[arg(long)]
        max_rounds: Option<u32>,
        /// Stop after the first completion of this stage.
        #[arg(long)]
        stop_after: Option<Stage>,
        #[arg(long, hide = true)]
        crash_before_commit: Option<Stage>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownRun(_) => 2,
        Error::AdapterUnavailable { .. } => 3,
        Error::CorruptManifest(_) => 4,
        _ => 1,
    }
}

struct Context {
    root: PathBuf,
    config: EngineConfig,
    /// Whether the caller pinned any part of the configuration.
    explicit: bool,
    options: EngineOptions,
}

impl Context {
    fn new(common: &Common) -> Result<Context> {
        let mut config = match &common.config {
            Some(path) => EngineConfig::load(path)?,
            None => EngineConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.world.seed = seed;
        }
        if let Some(id) = &common.run_id {
            config.settings.run_id = id.clone();
        }
        let mut options = EngineOptions::default();
        if let Ok(url) = std::env::var("AIDE_ADAPTER_URL") {
            config.settings.backend = Backend::Remote;
            let mut remote = config.remote.clone();
            remote.base_url = url;
            if let Ok(var) = std::env::var("AIDE_TOKEN_VAR") {
                remote.token_env = Some(var);
            }
            options.remote = Some(remote);
        }
        Ok(Context {
            root: common.root.clone().unwrap_or_else(default_store_root),
            explicit: common.config.is_some() || common.seed.is_some(),
            config,
            options,
        })
    }

    /// Existing runs resume under their stored configuration unless the
    /// caller pinned one, in which case it must match.
    fn engine(&self, options: EngineOptions) -> Result<Engine> {
        let run = RunDir::new(&self.root, &self.config.settings.run_id);
        if run.exists() && !self.explicit {
            Engine::resume(&self.root, &self.config.settings.run_id, options)
        } else {
            Engine::open(&self.root, self.config.clone(), options)
        }
    }
}

fn run_stage(engine: &mut Engine, stage: Stage) -> Result<()> {
    match engine.next_stage()? {
        Some(next) if next == stage => {
            engine.run_iteration()?;
            Ok(())
        }
        Some(next) => Err(Error::NotRunnable(format!("next stage is {next}, not {stage}"))),
        None => Err(Error::NotRunnable("run is done".into())),
    }
}

fn simgen(ctx: &Context, out: &Path, full: bool) -> Result<()> {
    let world = generate_world(&ctx.config.world)?;
    let json = if full {
        serde_json::to_string_pretty(&world)?
    } else {
        serde_json::to_string_pretty(&serde_json::json!({
            "config": ctx.config.world,
            "images": world.images.len(),
        }))?
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("world.json"), (json + "\n").as_bytes())?;
    for split in [Split::Pool, Split::Eval] {
        let mut bytes = Vec::new();
        write_binary(&world.embedding_store(split)?, &mut bytes)?;
        let name = format!("{}.store", format!("{split:?}").to_lowercase());
        write_atomic(&out.join(&name), &bytes)?;
    }
    println!("wrote {} images to {}", world.images.len(), out.display());
    Ok(())
}

fn print_scan(engine: &Engine) {
    let Some(report) = &engine.state().issues else { return };
    println!("{:<20} {:>8} {:>10}  decision", "candidate", "mentions", "detectable");
    for c in &report.candidates {
        println!(
            "{:<20} {:>8} {:>10}  {:?}",
            c.name, c.mention_count, c.detectable, c.decision
        );
    }
    println!("scanned {} images, trigger {}", report.images_scanned, report.trigger_min_mentions);
}

fn print_feed(engine: &Engine) {
    let state = engine.state();
    for (name, r) in &state.retrieval {
        println!("{name}: {} images retrieved", r.len());
    }
    println!("label space version {}", state.label_space_version);
}

fn print_checkpoint(engine: &Engine) {
    let state = engine.state();
    println!(
        "pseudo-labels: {} novel, {} known, {} corrections",
        state.novel_labels.len(),
        state.known_labels.len(),
        state.corrections.len()
    );
    if let Some(c) = state.checkpoints.last() {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", v * 100.0));
        println!(
            "{}: novel AP {} known AP {} forgetting {}",
            c.label,
            pct(c.eval.novel_average),
            pct(c.eval.known_average),
            pct(c.eval.forgetting)
        );
    }
}

fn print_cases(engine: &Engine) -> Result<()> {
    let cases = engine.reviewed_cases()?;
    let count = |s| cases.iter().filter(|c| c.state == s).count();
    use aide_core::verifier::CaseState;
    println!(
        "{} cases: {} pending, {} passed, {} failed",
        cases.len(),
        count(CaseState::Pending),
        count(CaseState::Passed),
        count(CaseState::Failed)
    );
    for (name, d) in &engine.state().diversity {
        println!("scenario diversity {name}: {d:.3}");
    }
    Ok(())
}

async fn serve_review(ctx: &Context, addr: &str, images: Option<PathBuf>, static_dir: Option<PathBuf>) -> Result<()> {
    let service = Arc::new(ReviewService::open(&ctx.root, &ctx.config.settings.run_id, images, static_dir)?);
    let listener = bind(addr).await?;
    let local = listener.local_addr().map_err(|e| Error::io(Path::new(addr), e))?;
    println!("serving review for run {} on http://{local}", service.run_id());
    std::io::stdout().flush().ok();
    tokio::select! {
        r = serve(service, listener) => r,
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli.common)?;
    match cli.command {
        Command::Simgen { out, full } => simgen(&ctx, &out, full),
        Command::Scan => {
            let mut engine = ctx.engine(ctx.options.clone())?;
            run_stage(&mut engine, Stage::FindIssue)?;
            print_scan(&engine);
            Ok(())
        }
        Command::Feed { category } => {
            let mut options = ctx.options.clone();
            if !category.is_empty() {
                options.categories = Some(category);
            }
            let mut engine = ctx.engine(options)?;
            run_stage(&mut engine, Stage::Feed)?;
            print_feed(&engine);
            Ok(())
        }
        Command::Update => {
            let mut engine = ctx.engine(ctx.options.clone())?;
            run_stage(&mut engine, Stage::Update)?;
            print_checkpoint(&engine);
            Ok(())
        }
        Command::Verify { serve, images_dir, static_dir } => {
            {
                let mut engine = ctx.engine(ctx.options.clone())?;
                if engine.next_stage().ok().flatten() == Some(Stage::Verify) || serve.is_none() {
                    run_stage(&mut engine, Stage::Verify)?;
                }
                print_cases(&engine)?;
            }
            let Some(addr) = serve else { return Ok(()) };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(Path::new("tokio runtime"), e))?;
            rt.block_on(serve_review(&ctx, &addr, images_dir, static_dir))
        }
        Command::Retrain => {
            let mut engine = ctx.engine(ctx.options.clone())?;
            run_stage(&mut engine, Stage::Retrain)?;
            print_checkpoint(&engine);
            Ok(())
        }
        Command::Report { pretty } => {
            let engine = Engine::resume(&ctx.root, &ctx.config.settings.run_id, ctx.options.clone())?;
            let report = engine.report();
            print!("{}", if pretty { report.to_pretty() } else { report.to_tsv() });
            Ok(())
        }
        Command::Run { headless, max_rounds, stop_after, crash_before_commit } => {
            let mut ctx = ctx;
            if let Some(n) = max_rounds {
                ctx.config.settings.max_rounds = n;
                ctx.explicit = true;
            }
            let mut options = ctx.options.clone();
            options.headless = headless;
            options.crash_before_commit = crash_before_commit;
            let mut engine = ctx.engine(options)?;
            engine.run_until(stop_after)?;
            let stages: Vec<String> = engine.manifest().completed_stages().iter().map(|s| s.to_string()).collect();
            println!("stages: {}", stages.join(" -> "));
            print!("{}", engine.report().to_pretty());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
