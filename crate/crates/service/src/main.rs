use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use empathy_core::backbone::BackboneBundle;
use empathy_core::corpus::{build_all_examples, load_corpus, Split};
use empathy_core::decoder::{generate, predict_polarity, DecodingConfig};
use empathy_core::metrics::evaluate;
use empathy_service::api::{router, AppState};
use empathy_service::run::{train, RunConfig};
use empathy_service::session::{exchange, BundleResponder, ChatSession, DecodingOverrides};
use empathy_service::store::SessionStore;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "empathy", version, about = "Train, evaluate and serve empathetic dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DecodingArgs {
    #[arg(long = "p")]
    top_p: Option<f64>,
    #[arg(long = "k")]
    top_k: Option<usize>,
    #[arg(long = "max-len")]
    max_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl DecodingArgs {
    fn config(&self) -> Result<DecodingConfig> {
        let overrides = DecodingOverrides {
            top_p: self.top_p,
            top_k: self.top_k,
            max_length: self.max_length,
            seed: self.seed,
            length_penalty: self.length_penalty,
            num_candidates: self.candidates,
            temperature: self.temperature,
        };
        Ok(overrides.apply(&DecodingConfig::default())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finetune from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate one reply for a serialized dialogue context.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        context: String,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Perplexity and BLEU on a corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        limit: Option<usize>,
        /// Write generated responses here, one per line.
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Significance tests over a human-judgment CSV.
    Abtest {
        #[arg(long)]
        file: PathBuf,
    },
    /// HTTP chat service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Persist sessions as JSON lines in this directory.
        #[arg(long)]
        sessions_dir: Option<PathBuf>,
        /// Drop sessions idle for this many seconds.
        #[arg(long)]
        session_ttl: Option<u64>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Terminal chat. `/reset` starts over, `/quit` exits.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
}

fn load(checkpoint: &PathBuf) -> Result<BackboneBundle> {
    BackboneBundle::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Train { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let report = train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "final_step": report.final_step,
                "best_val_ppl": report.best_val_ppl,
                "best_checkpoint": report.best_checkpoint,
                "stopped_early": report.stopped_early,
            }))?);
        }
        Command::Generate {
            checkpoint,
            context,
            decoding,
        } => {
            let bundle = load(&checkpoint)?;
            let cfg = decoding.config()?;
            let (polarity, confidence) = predict_polarity(&bundle, &context)?;
            let out = generate(&bundle, &context, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "text": out.text,
                "polarity": polarity,
                "confidence": confidence,
            }))?);
        }
        Command::Evaluate {
            checkpoint,
            data_dir,
            split,
            batch_size,
            limit,
            hypotheses,
            decoding,
        } => {
            let bundle = load(&checkpoint)?;
            let mut examples = build_all_examples(&load_corpus(&data_dir, split)?, None);
            if let Some(limit) = limit {
                examples.truncate(limit);
            }
            let (report, outputs) = evaluate(&bundle, &examples, &decoding.config()?, batch_size)?;
            if let Some(path) = hypotheses {
                std::fs::write(&path, outputs.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Abtest { file } => {
            let reader = std::fs::File::open(&file).with_context(|| format!("opening {}", file.display()))?;
            let reports = empathy_service::abtest::analyze(reader)?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        Command::Serve {
            checkpoint,
            port,
            host,
            sessions_dir,
            session_ttl,
            decoding,
        } => {
            let bundle = load(&checkpoint)?;
            let defaults = decoding.config()?;
            let mut store = match sessions_dir {
                Some(dir) => SessionStore::persistent(defaults, dir)?,
                None => SessionStore::in_memory(defaults),
            };
            if let Some(secs) = session_ttl {
                store = store.with_ttl(Duration::from_secs(secs));
            }
            let state = AppState {
                store: Arc::new(store),
                responder: Arc::new(BundleResponder::new(bundle, checkpoint.display().to_string())),
            };
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            tokio::runtime::Runtime::new()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(%addr, "listening");
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Chat { checkpoint, decoding } => {
            let responder = BundleResponder::new(load(&checkpoint)?, checkpoint.display().to_string());
            let cfg = decoding.config()?;
            let mut session = ChatSession::new("terminal".into(), cfg.clone());
            let stdin = std::io::stdin();
            let mut stdout = std::io::stdout();
            loop {
                write!(stdout, "you> ")?;
                stdout.flush()?;
                let mut line = String::new();
                if stdin.lock().read_line(&mut line)? == 0 {
                    break;
                }
                match line.trim() {
                    "" => continue,
                    "/quit" => break,
                    "/reset" => {
                        session = ChatSession::new("terminal".into(), cfg.clone());
                        continue;
                    }
                    text => match exchange(&responder, &mut session, text) {
                        Ok(reply) => writeln!(stdout, "bot> {}  [{} {:.2}]", reply.text, reply.polarity, reply.confidence)?,
                        Err(e) => writeln!(stdout, "error: {e}")?,
                    },
                }
            }
        }
    }
    Ok(())
}
