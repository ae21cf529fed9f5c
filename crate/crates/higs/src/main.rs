use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use higs_core::graph::Nid;
use higs_core::layout::{optimize_layout, stability_violations, LayoutOptions};
use higs_core::persistence::{
    load_scene, load_session_file, read_scene, save_scene, save_session, PersistError, SceneMeta, SESSION_VERSION,
};
use higs_core::pipeline::{external_adapter_config, Backend, ProceduralBackend, RemoteConfig, SceneSession};
use higs_core::SceneGraph;
use higs::service;

#[derive(Parser)]
#[command(name = "higs", version, about = "Progressive scene graph generation")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a scene: one initial step plus optional anchored steps.
    Generate {
        #[arg(long)]
        text: String,
        /// Follow-up steps as "anchor:text;anchor:text". An anchor is a node
        /// id or a category (lowest matching id).
        #[arg(long, default_value = "")]
        steps: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the session file here.
        #[arg(long)]
        session: Option<PathBuf>,
        /// Use the external adapters configured through HIGS_ADAPTER_* variables.
        #[arg(long)]
        remote: bool,
    },
    /// Check graph invariants and On-edge stability; exit 0 iff clean.
    Validate { scene: PathBuf },
    /// Run layout optimization and write the corrected scene.
    Optimize {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        max_passes: u32,
    },
    /// Replay a session log; exit 0 iff it reproduces the stored scene.
    Replay {
        session: PathBuf,
        /// Regenerate every step through the procedural backend and compare.
        #[arg(long)]
        regenerate: bool,
    },
    /// Summary counts for a scene or session file.
    Stats { scene: PathBuf },
    /// Run the session HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        remote: bool,
    },
}

struct Failure {
    message: String,
    output: Option<Value>,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            message: e.to_string(),
            output: None,
        }
    }
}

type Outcome = Result<(Value, String), Failure>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok((value, text)) => {
            if cli.json {
                println!("{value}");
            } else if !text.is_empty() {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            if cli.json {
                println!("{}", f.output.unwrap_or_else(|| json!({ "error": f.message })));
            }
            eprintln!("higs: {}", f.message);
            ExitCode::FAILURE
        }
    }
}

fn backend(remote: bool) -> Result<Arc<dyn Backend>, Failure> {
    if !remote {
        return Ok(Arc::new(ProceduralBackend::new()));
    }
    let cfg = RemoteConfig::from_env().ok_or("--remote needs HIGS_ADAPTER_URL")?;
    Ok(Arc::new(external_adapter_config(cfg)))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Generate {
            text,
            steps,
            seed,
            out,
            session,
            remote,
        } => generate(&text, &steps, seed, &out, session.as_deref(), remote),
        Command::Validate { scene } => validate(&load_any(&scene)?),
        Command::Optimize {
            scene,
            out,
            report,
            max_passes,
        } => optimize(&scene, &out, report.as_deref(), max_passes),
        Command::Replay { session, regenerate } => replay(&session, regenerate),
        Command::Stats { scene } => Ok(stats(&load_any(&scene)?)),
        Command::Serve { addr, remote } => {
            let backend = backend(remote)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                log::info!("listening on {}", listener.local_addr()?);
                service::serve(listener, backend).await
            })?;
            Ok((Value::Null, String::new()))
        }
    }
}

fn parse_steps(steps: &str) -> Result<Vec<(String, String)>, Failure> {
    steps
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (a, t) = s
                .split_once(':')
                .ok_or_else(|| format!("step {s:?} is not anchor:text"))?;
            Ok((a.trim().to_string(), t.trim().to_string()))
        })
        .collect()
}

fn resolve_anchor(g: &SceneGraph, anchor: &str) -> Result<Nid, Failure> {
    if let Ok(nid) = anchor.parse::<Nid>() {
        return Ok(nid);
    }
    g.nodes()
        .find(|n| n.category == anchor)
        .map(|n| n.nid)
        .ok_or_else(|| format!("no node with category {anchor:?}").into())
}

fn generate(text: &str, steps: &str, seed: u64, out: &Path, session_out: Option<&Path>, remote: bool) -> Outcome {
    let steps = parse_steps(steps)?;
    let backend = backend(remote)?;
    let mut s = SceneSession::new("cli");
    let mut outcomes = vec![s.run_step(backend.as_ref(), None, text, seed)?];
    for (i, (anchor, t)) in steps.iter().enumerate() {
        let nid = resolve_anchor(&s.global, anchor)?;
        outcomes.push(s.run_step(backend.as_ref(), Some(nid), t, seed + i as u64 + 1)?);
    }
    let meta = SceneMeta {
        created: None,
        seed: Some(seed),
        step_count: s.steps_done(),
    };
    fs::write(out, save_scene(&s.global, meta.clone()))?;
    if let Some(p) = session_out {
        fs::write(p, save_session(&s, meta))?;
    }
    let text = format!(
        "{} nodes after {} steps, written to {}",
        s.global.len(),
        s.steps_done(),
        out.display()
    );
    Ok((json!({ "nodes": s.global.len(), "steps": outcomes }), text))
}

/// Reads a scene file, or the final scene of a session file.
fn load_any(path: &Path) -> Result<SceneGraph, Failure> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match load_scene(&bytes) {
        Err(PersistError::SchemaVersionMismatch { found, .. }) if found == SESSION_VERSION => {
            Ok(load_session_file(&bytes)?.scene.to_graph()?)
        }
        other => Ok(other?.0),
    }
}

fn validate(g: &SceneGraph) -> Outcome {
    let violations = g.validate();
    let unstable = stability_violations(g, 0.0, 1e-6);
    let value = json!({
        "violations": violations,
        "unstable": unstable.iter().map(|&(p, c)| json!({"parent": p, "child": c})).collect::<Vec<_>>(),
    });
    if violations.is_empty() && unstable.is_empty() {
        return Ok((value, "ok".into()));
    }
    let mut lines: Vec<String> = violations.iter().map(ToString::to_string).collect();
    lines.extend(unstable.iter().map(|(p, c)| format!("UnstableOn: {p} -> {c}")));
    Err(Failure {
        message: format!("{} problem(s)\n{}", lines.len(), lines.join("\n")),
        output: Some(value),
    })
}

fn optimize(scene: &Path, out: &Path, report_out: Option<&Path>, max_passes: u32) -> Outcome {
    let (mut g, meta) = read_scene(scene)?;
    let opts = LayoutOptions {
        max_passes,
        ..LayoutOptions::default()
    };
    let report = optimize_layout(&mut g, &opts)?;
    fs::write(out, save_scene(&g, meta))?;
    let value = serde_json::to_value(&report)?;
    if let Some(p) = report_out {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        fs::write(p, bytes)?;
    }
    let text = format!(
        "{} correction(s) in {} pass(es), converged: {}",
        report.corrections.len(),
        report.passes,
        report.converged
    );
    Ok((value, text))
}

fn replay(path: &Path, regenerate: bool) -> Outcome {
    let file = load_session_file(&fs::read(path)?)?;
    let procedural = ProceduralBackend::new();
    let backend: Option<&dyn Backend> = if regenerate { Some(&procedural) } else { None };
    match file.replay(backend) {
        Ok(s) => Ok((
            json!({ "divergence": null, "entries": file.log.len(), "nodes": s.global.len() }),
            format!("replayed {} entries, no divergence", file.log.len()),
        )),
        Err(e) => Err(Failure {
            message: e.to_string(),
            output: Some(json!({ "divergence": e.to_string() })),
        }),
    }
}

fn stats(g: &SceneGraph) -> (Value, String) {
    let mut per_category: BTreeMap<&str, usize> = BTreeMap::new();
    for n in g.nodes() {
        *per_category.entry(n.category.as_str()).or_default() += 1;
    }
    // levels in the deepest strong tree; an empty scene has none
    let depth = g.nids().map(|n| g.strong_depth(n) + 1).max().unwrap_or(0);
    let on_violations = stability_violations(g, 0.0, 1e-6).len();
    let mut text = format!(
        "nodes: {}\ndepth: {depth}\nOn violations: {on_violations}\n",
        g.len()
    );
    for (c, k) in &per_category {
        text.push_str(&format!("  {c}: {k}\n"));
    }
    let value = json!({
        "nodes": g.len(),
        "depth": depth,
        "perCategory": per_category,
        "onViolations": on_violations,
    });
    (value, text.trim_end().to_string())
}
