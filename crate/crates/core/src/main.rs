use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use hasim::scenario::{builtin, load_builtin, parse_scenario, run_scenario, FsSource, RunReport, Scenario};
use hasim::Trace;

#[derive(Parser)]
#[command(name = "hasim", version, about = "Deterministic HA cluster failover simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run scenario files (or `builtin:<name>`).
    Run {
        #[arg(required = true)]
        scenarios: Vec<String>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Write the trace here; with several scenarios, one file per
        /// scenario is written into this directory.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Parse a scenario and its configs without running it.
    Validate { scenario: String },
    /// List the scenarios compiled into the binary.
    ListBuiltin,
    /// Print the effective merged configuration of a scenario.
    ShowConfig { scenario: String },
}

fn load(arg: &str) -> Result<Scenario, String> {
    if let Some(r) = load_builtin(arg).filter(|_| !Path::new(arg).exists()) {
        return r.map_err(|e| format!("{arg}:{e}"));
    }
    let text = std::fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?;
    let base = Path::new(arg).parent().map(Path::to_path_buf).unwrap_or_default();
    parse_scenario(&text, &FsSource { base }).map_err(|e| format!("{arg}:{e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::ListBuiltin => {
            for n in builtin::scenario_names() {
                println!("{n:24} {}", builtin::summary(n).unwrap_or(""));
            }
            ExitCode::SUCCESS
        }
        Cmd::Validate { scenario } => match load(&scenario) {
            Ok(sc) => {
                for w in &sc.warnings {
                    eprintln!("warning: {w}");
                }
                println!("{}: ok ({} injections, {} expected steps)", sc.name, sc.timeline.len(), sc.expected.len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::ShowConfig { scenario } => match load(&scenario) {
            Ok(sc) => {
                print!("{}", show_config(&sc));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::Run { scenarios, seed, format, trace, parallel } => run(&scenarios, seed, format, trace, parallel),
    }
}

type RunResult = Result<(RunReport, Trace), String>;

fn run(args: &[String], seed: Option<u64>, format: Format, trace: Option<PathBuf>, parallel: usize) -> ExitCode {
    let mut loaded = Vec::new();
    for a in args {
        match load(a) {
            Ok(mut sc) => {
                if let Some(s) = seed {
                    sc.seed = s;
                }
                loaded.push(sc);
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
    }
    let results: Mutex<Vec<(String, RunResult)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, loaded.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sc) = loaded.get(i) else { break };
                let r = run_scenario(sc).map(|(rep, out)| (rep, out.trace)).map_err(|e| e.to_string());
                results.lock().expect("no panics while held").push((sc.name.clone(), r));
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut code = 0;
    let mut reports = Vec::new();
    for (name, r) in results {
        match r {
            Ok((rep, tr)) => {
                if let Some(path) = &trace {
                    let p = if args.len() > 1 { path.join(format!("{name}.trace")) } else { path.clone() };
                    if args.len() > 1 {
                        let _ = std::fs::create_dir_all(path);
                    }
                    if let Err(e) = std::fs::write(&p, tr.to_text()) {
                        eprintln!("error: {}: {e}", p.display());
                        return ExitCode::from(1);
                    }
                }
                code = code.max(rep.exit_code());
                reports.push(rep);
            }
            Err(e) => {
                eprintln!("error: {name}: {e}");
                return ExitCode::from(1);
            }
        }
    }
    match format {
        Format::Text => {
            for r in &reports {
                print!("{}", r.to_text());
            }
        }
        Format::Json => {
            let v = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(&reports)
            };
            println!("{}", v.expect("reports serialize"));
        }
    }
    ExitCode::from(code as u8)
}

fn show_config(sc: &Scenario) -> String {
    let mut s = format!("name {}\nseed {}\nend {}\n", sc.name, sc.seed, sc.end);
    for (kind, file) in &sc.config_files {
        s += &format!("config {kind} {file}\n");
    }
    s += &format!("nodes {}\n", sc.nodes.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(" "));
    for l in &sc.links {
        s += &format!("link {} {} latency {} bandwidth {}B/s\n", l.a, l.b, l.latency, l.bandwidth);
    }
    let ha = &sc.ha;
    s += &format!("heartbeat keepalive {} warntime {} deadtime {}\n", ha.keepalive, ha.warntime, ha.deadtime);
    let d = &sc.drbd;
    s += &format!(
        "drbd {} protocol {} rate {}B/s al-extents {} allow-two-primaries {} blocks {}x{}B\n",
        d.name, d.protocol, d.sync_rate, d.al_extents, d.allow_two_primaries, d.block_count, d.block_size
    );
    let p = &sc.cib.properties;
    s += &format!(
        "crm stickiness {} failure-stickiness {} no-quorum-policy {:?} stonith {} ({:?}) idle-timeout {}\n",
        p.default_resource_stickiness,
        p.default_resource_failure_stickiness,
        p.no_quorum_policy,
        p.stonith_enabled,
        p.stonith_action,
        p.transition_idle_timeout
    );
    for r in &sc.cib.resources {
        let loc: Vec<String> = r.location.iter().map(|(n, sc)| format!("{n}={sc}")).collect();
        s += &format!(
            "resource {} {:?} start {}/{} stop {}/{} location [{}]\n",
            r.id,
            r.kind,
            r.start_duration,
            r.start_timeout,
            r.stop_duration,
            r.stop_timeout,
            loc.join(" ")
        );
    }
    for w in &sc.workloads {
        s += &format!("workload {w:?}\n");
    }
    for (t, i) in &sc.timeline {
        s += &format!("inject {t} {i}\n");
    }
    for e in &sc.expected {
        s += &format!("expect \"{e}\"\n");
    }
    for w in &sc.warnings {
        s += &format!("# {w}\n");
    }
    for i in &sc.cib.ignored {
        s += &format!("# ignored: {i}\n");
    }
    s
}
