use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bpmnchain::compiler::{compile, MonitorProgram};
use bpmnchain::docstore::{verify_document, Attestation, DocStore};
use bpmnchain::ledger::{verify_blocks, Ledger};
use bpmnchain_service::config::Config;
use bpmnchain_service::scenario::{self, RunKeys, Scenario};
use bpmnchain_service::service::{dispatch, Service};
use bpmnchain_service::{api, keys};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bpmnchain",
    version,
    about = "Compile BPMN models into ledger monitors and run them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a BPMN model to a monitor program and print its id.
    Compile {
        model: PathBuf,
        /// Defaults to `<model>.program.json`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Parse, validate and compile a model, printing diagnostics.
    Validate { model: PathBuf },
    /// Play a scenario against an in-process monitor.
    Run {
        /// A program file from `compile`, or a `.bpmn` model.
        program: PathBuf,
        scenario: PathBuf,
        /// Directory with `<lane>.key` files and optionally `monitor.key`.
        #[arg(long, default_value = "keys")]
        keys: PathBuf,
        /// Where `chain.ndjson` and `trace.txt` are written.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML config; BPMNCHAIN_PORT, BPMNCHAIN_DATA_DIR and
        /// BPMNCHAIN_BLOCK_BATCH_SIZE override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write demo key files for lanes, plus `monitor.key`.
    Keygen {
        #[arg(long, default_value = "keys")]
        out: PathBuf,
        /// Derive keys from this seed instead of at random.
        #[arg(long)]
        seed: Option<String>,
        /// Take lane names from a program or model.
        #[arg(long)]
        program: Option<PathBuf>,
        lanes: Vec<String>,
    },
    /// Check block hashes, links and signatures of a chain file.
    VerifyChain {
        chain: PathBuf,
        /// Also check every attestation against the documents here.
        #[arg(long)]
        docs: Option<PathBuf>,
    },
}

fn load_program(path: &Path) -> Result<MonitorProgram> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "bpmn" || e == "xml") {
        return Ok(compile(&bytes)?.program);
    }
    Ok(MonitorProgram::from_bytes(&bytes)?)
}

fn cmd_compile(model: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let bytes = std::fs::read(model).with_context(|| format!("reading {}", model.display()))?;
    let program = match compile(&bytes) {
        Ok(c) => c.program,
        Err(e) => {
            eprintln!("{}: {e}", model.display());
            return Ok(ExitCode::from(1));
        }
    };
    let out = out.unwrap_or_else(|| model.with_extension("program.json"));
    std::fs::write(&out, program.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", program.program_id());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(model: &Path) -> Result<ExitCode> {
    let bytes = std::fs::read(model).with_context(|| format!("reading {}", model.display()))?;
    match compile(&bytes) {
        Ok(c) => {
            println!(
                "ok: {} lanes, {} tasks, {} scopes",
                c.program.actors.len(),
                c.program.dataflow.len(),
                c.program.scopes.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{}: {e}", model.display());
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_run(program: &Path, scenario_path: &Path, keys_dir: &Path, out_dir: &Path, batch: usize) -> Result<ExitCode> {
    let program = load_program(program)?;
    let script = Scenario::load(scenario_path)?;
    let keys = RunKeys::load(keys_dir, &program)?;
    let base = scenario_path.parent().unwrap_or(Path::new("."));
    let report = scenario::run(program, &script, base, &keys, batch)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("chain.ndjson"), report.chain_ndjson())?;
    std::fs::write(out_dir.join("trace.txt"), report.trace.join("\n") + "\n")?;
    match &report.divergence {
        Some(d) => {
            eprintln!("step {}: {}", d.step, d.message);
            Ok(ExitCode::from(2))
        }
        None => {
            println!("{} ok, instance {}", script.name, report.instance_id);
            Ok(ExitCode::SUCCESS)
        }
    }
}

async fn cmd_serve(config: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = Config::load(config.as_deref(), |k| std::env::var(k).ok())?;
    let listener = tokio::net::TcpListener::bind((cfg.bind.as_str(), cfg.port))
        .await
        .with_context(|| format!("binding {}:{}", cfg.bind, cfg.port))?;
    let addr = listener.local_addr()?;
    let base = cfg.callback_base.clone().unwrap_or_else(|| format!("http://{addr}"));
    let svc = std::sync::Arc::new(Service::open(&cfg, &base)?);
    {
        let m = svc.monitor();
        tracing::info!(
            height = m.ledger().height(),
            instances = m.instances().count(),
            "state restored"
        );
    }
    // Deliveries do not survive a restart; offer every live task again.
    dispatch(&svc, svc.all_pending());
    println!("listening on {addr}");
    axum::serve(listener, api::router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_keygen(out: &Path, seed: Option<&str>, program: Option<&Path>, mut lanes: Vec<String>) -> Result<ExitCode> {
    if let Some(p) = program {
        lanes.extend(load_program(p)?.actors);
    }
    if lanes.is_empty() {
        bail!("name some lanes or pass --program");
    }
    lanes.push("monitor".into());
    for lane in lanes {
        let key = keys::make_key(seed, &lane);
        keys::write_key(out, &lane, &key)?;
        println!("{}", keys::key_path(out, &lane).display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_chain(chain: &Path, docs: Option<&Path>) -> Result<ExitCode> {
    let (blocks, open) = Ledger::read_chain(chain)?;
    if !verify_blocks(&blocks) {
        println!("invalid: block hashes, links or signatures do not check out");
        return Ok(ExitCode::from(1));
    }
    if let Some(bad) = open.iter().find(|t| !t.verify()) {
        println!("invalid: unsealed tx {} has a bad signature", bad.tx_id);
        return Ok(ExitCode::from(1));
    }
    if let Some(dir) = docs {
        let store = DocStore::open_dir(dir)?;
        let mut checked = 0;
        for tx in blocks
            .iter()
            .flat_map(|b| &b.txs)
            .chain(&open)
            .filter(|t| t.method == "Attestation")
        {
            let att: Attestation = serde_json::from_value(tx.payload.clone())?;
            let bytes = store.get(&att.cid).unwrap_or_default();
            if !verify_document(&att.cid, &bytes, &att, &att.author) {
                println!(
                    "invalid: {} v{} ({}) fails verification",
                    att.data_object_name, att.version, att.cid
                );
                return Ok(ExitCode::from(1));
            }
            checked += 1;
        }
        println!("{checked} attestations verified");
    }
    let head = blocks.last().map(|b| b.block_hash.as_str()).unwrap_or("");
    println!(
        "ok: height {}, head {head}, {} unsealed",
        blocks.len().saturating_sub(1),
        open.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile { model, out } => cmd_compile(&model, out),
        Command::Validate { model } => cmd_validate(&model),
        Command::Run {
            program,
            scenario,
            keys,
            out_dir,
            batch,
        } => cmd_run(&program, &scenario, &keys, &out_dir, batch),
        Command::Serve { config } => tokio::runtime::Runtime::new()
            .context("starting runtime")
            .and_then(|rt| rt.block_on(cmd_serve(config))),
        Command::Keygen {
            out,
            seed,
            program,
            lanes,
        } => cmd_keygen(&out, seed.as_deref(), program.as_deref(), lanes),
        Command::VerifyChain { chain, docs } => cmd_verify_chain(&chain, docs.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
