use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use feedlab::config::RunConfig;
use feedlab::core::clock::system_clock;
use feedlab::core::measurement::Grouping;
use feedlab::core::payload::MOCK_FORMAT_ID;
use feedlab::core::platform::generate_inventory;
use feedlab::{mock, ops, server, sim};

/// Feed-reranking field experiment tooling.
#[derive(Parser)]
#[command(name = "feedlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short, env = "FEEDLAB_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for inventories, tokens, assignment and scripted behavior.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the event log and registry.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::load(self.config.as_deref()).map_err(|e| e.to_string())?;
        cfg.apply_env(std::env::vars()).map_err(|e| e.to_string())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the backend and coordination service.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen address; port 0 picks a free port.
        #[arg(long)]
        listen: Option<String>,
        /// Public URL used in recovery links.
        #[arg(long)]
        base_url: Option<String>,
        /// Mock platform to poll for monitored accounts.
        #[arg(long)]
        mock_url: Option<String>,
        /// Seconds between monitored-account polls.
        #[arg(long, default_value_t = 60)]
        poll_secs: u64,
    },
    /// Run the mock platform.
    Mock {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        listen: Option<String>,
        /// Posts in the generated inventory.
        #[arg(long)]
        posts: Option<usize>,
    },
    /// Run a scripted cohort against an in-process stack.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        cohort: usize,
        #[arg(long, default_value_t = 10)]
        pages: usize,
        #[arg(long)]
        page_size: Option<usize>,
        /// Assign arms round-robin instead of by hash.
        #[arg(long)]
        forced_alternation: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Apply a plan to a captured payload offline and print the actions.
    Replay {
        payload: PathBuf,
        plan: PathBuf,
        #[arg(long, default_value = MOCK_FORMAT_ID)]
        format: String,
        /// Write the rewritten payload here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Engagement report over the event log.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = By::Arm)]
        by: By,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write one CSV per record kind.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check transform plan files.
    ValidatePlan {
        #[arg(required = true)]
        plans: Vec<PathBuf>,
    },
    /// Remove withdrawn participants' records from disk.
    Compact {
        #[command(flatten)]
        common: Common,
    },
    /// Withdraw a participant: their records leave every report and export.
    Withdraw {
        #[command(flatten)]
        common: Common,
        participant: String,
        #[arg(long, default_value = "participant request")]
        reason: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum By {
    Arm,
    Participant,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("FEEDLAB_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
    match rt.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn bind(addr: &str) -> Result<(tokio::net::TcpListener, String), String> {
    let l = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("{addr}: {e}"))?;
    let local = l.local_addr().map_err(|e| e.to_string())?;
    Ok((l, format!("http://{local}")))
}

async fn run(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Serve { common, listen, base_url, mock_url, poll_secs } => {
            let mut cfg = common.load()?;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            let (listener, url) = bind(&cfg.listen).await?;
            cfg.base_url = base_url.or(cfg.base_url).or(Some(url.clone()));
            cfg.mock_url = mock_url.or(cfg.mock_url);
            let backend = Arc::new(server::build_backend(&cfg, system_clock())?);
            if let Some(m) = cfg.mock_url.clone() {
                let b = backend.clone();
                tokio::spawn(async move {
                    let source = mock::HttpAccountSource::new(m);
                    let mut since = 0;
                    loop {
                        let now = system_clock().now_ms();
                        match b.poll_monitored(&source, since).await {
                            Ok(n) => tracing::info!(added = n, "monitored accounts polled"),
                            Err(e) => tracing::warn!(error = %e, "monitored account poll failed"),
                        }
                        since = now;
                        tokio::time::sleep(Duration::from_secs(poll_secs.max(1))).await;
                    }
                });
            }
            println!("feedlab serve listening on {url}");
            server::serve(listener, server::app(backend)).await.map_err(|e| e.to_string())
        }
        Command::Mock { common, listen, posts } => {
            let mut cfg = common.load()?;
            if let Some(p) = posts {
                cfg.inventory.posts = p;
            }
            let inv = generate_inventory(&cfg.inventory_spec()).map_err(|e| e.to_string())?;
            let (listener, url) = bind(listen.as_deref().unwrap_or(&cfg.mock_listen)).await?;
            println!("feedlab mock listening on {url} ({} posts)", inv.len());
            server::serve(listener, mock::app(Arc::new(inv))).await.map_err(|e| e.to_string())
        }
        Command::Simulate { common, cohort, pages, page_size, forced_alternation, json } => {
            let mut cfg = common.load()?;
            let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
            if common.data_dir.is_none() && std::env::var_os("FEEDLAB_DATA_DIR").is_none() {
                cfg.data_dir = scratch.path().to_owned();
            }
            if forced_alternation {
                cfg.study.allow_forced_arm = true;
            }
            let run = sim::SimConfig {
                cohort,
                pages,
                page_size: page_size.unwrap_or(cfg.inventory.page_size),
                seed: cfg.seed,
                forced_alternation,
                client_deadline_ms: cfg.client_deadline_ms,
                ..sim::SimConfig::default()
            };
            let report = sim::simulate(&cfg, &run).await?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?);
            } else {
                print!("{}", report.to_text());
            }
            Ok(())
        }
        Command::Replay { payload, plan, format, out, seed } => {
            let raw = std::fs::read(&payload).map_err(|e| format!("{}: {e}", payload.display()))?;
            let plan = feedlab::config::resolve_plan(&plan.to_string_lossy(), std::path::Path::new("."))?;
            let r = ops::replay(&raw, &format, &plan, seed).await?;
            eprint!("{}", r.summary());
            match out {
                Some(path) => std::fs::write(&path, &r.output).map_err(|e| format!("{}: {e}", path.display())),
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&r.output).map_err(|e| e.to_string())
                }
            }
        }
        Command::Report { common, by, format } => {
            let cfg = common.load()?;
            let grouping = match by {
                By::Arm => Grouping::Arm,
                By::Participant => Grouping::Participant,
            };
            let report = ops::report(&cfg, grouping)?;
            match format {
                Format::Table => print!("{}", report.to_table()),
                Format::Csv => print!("{}", report.to_csv()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?),
            }
            Ok(())
        }
        Command::Export { common, out } => {
            let files = ops::export(&common.load()?, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::ValidatePlan { plans } => {
            let mut failed = 0;
            for p in &plans {
                match ops::validate_plan(p) {
                    Ok(plan) => println!("ok {} ({})", p.display(), plan.id),
                    Err(e) => {
                        println!("invalid {}: {e}", p.display());
                        failed += 1;
                    }
                }
            }
            if failed > 0 {
                return Err(format!("{failed} of {} plans invalid", plans.len()));
            }
            Ok(())
        }
        Command::Compact { common } => {
            let n = ops::compact(&common.load()?)?;
            println!("removed {n} records");
            Ok(())
        }
        Command::Withdraw { common, participant, reason } => {
            let offset = ops::withdraw(&common.load()?, &participant, &reason)?;
            println!("withdrew {participant} (tombstone at offset {offset})");
            Ok(())
        }
    }
}
