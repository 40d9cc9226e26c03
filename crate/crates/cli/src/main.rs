use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde_json::json;
use specreason::backend::http::{measure_profile, HttpBackendConfig, OpenAiCompletions};
use specreason::bench::{self, output, run_sweep, Problem, RunMetrics};
use specreason::config::{load_config, ExperimentConfig};
use specreason::engine::trace::write_jsonl;
use specreason::engine::StepAction;
use specreason::simlab::calibrate::monte_carlo_step_latency;
use specreason::simlab::{expected_speedup, SimSetup};
use specreason::types::{BackendProfile, Role};
use specreason::{run_scheme, Backend};

#[derive(Parser)]
#[command(name = "specreason", version, about = "Step-level speculative reasoning: run, sweep, simulate, profile, compare")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// `key=value` overrides; bare engine keys such as `threshold=5` are accepted.
    #[arg(long, num_args = 1..)]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Base URL for every HTTP backend in the config.
    #[arg(long)]
    backend_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one trajectory and print its trace summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Index of the problem to run.
        #[arg(long, default_value_t = 0)]
        problem: usize,
    },
    /// Run the sweep declared in the config.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Compare Monte-Carlo step latency with the closed form.
    Simulate {
        /// Small-step acceptance fraction; repeat for several.
        #[arg(long, num_args = 1.., default_values_t = [0.7])]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        #[arg(long, default_value_t = 21)]
        chain_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Measure a live server's decode and prefill rates.
    Profile {
        #[arg(long)]
        backend_url: String,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "base")]
        role: String,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long)]
        api_key_env: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Per-cell differences between two results.csv files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

/// Errors raised before any work starts; they exit with status 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

struct Prepared {
    config: ExperimentConfig,
    problems: Vec<Problem>,
    small: Box<dyn Backend>,
    base: Box<dyn Backend>,
}

/// Load, override, validate and build everything a verb needs. Nothing is
/// written here.
fn prepare(c: &Common) -> anyhow::Result<Prepared> {
    let mut config = load_config(&c.config, &c.overrides).map_err(invalid)?;
    config.set_http(c.backend_url.as_deref(), c.api_key_env.as_deref());
    if let Some(p) = c.parallelism {
        config.parallelism = p;
    }
    config.validate().map_err(invalid)?;
    let problems = config.load_problems().map_err(invalid)?;
    if problems.is_empty() {
        return Err(invalid("the problem source is empty"));
    }
    let small = config.small.build().map_err(invalid)?;
    let base = config.base.build().map_err(invalid)?;
    Ok(Prepared {
        config,
        problems,
        small,
        base,
    })
}

fn cmd_run(common: &Common, index: usize) -> anyhow::Result<()> {
    let p = prepare(common)?;
    let problem = p
        .problems
        .get(index)
        .ok_or_else(|| invalid(format!("problem index {index} out of range (have {})", p.problems.len())))?;
    let scheme = p.config.schemes[0];
    let r = run_scheme(scheme, &p.config.engine, &problem.prompt, p.small.as_ref(), p.base.as_ref())?;
    let metrics = RunMetrics::from_result(&r, problem, 0, p.config.engine.seed);
    println!(
        "{} {}: {} steps ({} accepted, {} regenerated, {} forced), {} rejected drafts",
        scheme,
        problem.id,
        r.state.retained_steps.len(),
        r.count(StepAction::AcceptedSpeculation),
        r.count(StepAction::RejectedThenRegenerated),
        r.count(StepAction::ForcedBase),
        r.rejected_steps.len()
    );
    println!(
        "latency {:.4} s, thinking tokens {}/{}, answer {:?}, correct {}",
        metrics.latency_s,
        metrics.thinking_tokens,
        metrics.budget,
        r.final_answer().trim(),
        metrics.correct
    );
    if let Some(dir) = &common.output_dir {
        fs::create_dir_all(dir.join("traces"))?;
        let id = format!("{scheme}/{}", problem.id);
        let mut records = r.trace_records(&id);
        records.push(specreason::engine::TraceRecord::Metrics(metrics.clone()));
        let f = fs::File::create(dir.join("traces").join("run.jsonl"))?;
        write_jsonl(BufWriter::new(f), &records)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&metrics)?)?;
    }
    Ok(())
}

fn cmd_sweep(common: &Common) -> anyhow::Result<()> {
    let p = prepare(common)?;
    let spec = p
        .config
        .sweep_spec()
        .ok_or_else(|| invalid("config has no `sweep` section"))?;
    let out = common.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let r = run_sweep(
        &spec,
        &p.config.schemes,
        &p.problems,
        p.small.as_ref(),
        p.base.as_ref(),
        p.config.parallelism,
    )?;
    output::write_outputs(&out, &r)?;
    println!("{:<20} {:>8} {:>10} {:>12} {:>10}", "scheme", spec.knob.name(), "pass@1", "latency_s", "accepted");
    for c in &r.cells {
        let s = &c.summary;
        println!(
            "{:<20} {:>8} {:>10} {:>12.4} {:>10}",
            s.scheme.to_string(),
            s.value,
            s.pass_at_1.map_or("-".into(), |x| format!("{x:.4}")),
            s.mean_latency_s,
            s.mean_accepted_fraction.map_or("-".into(), |x| format!("{x:.3}"))
        );
    }
    let failed: usize = r.cells.iter().map(|c| c.summary.failed).sum();
    if failed > 0 {
        eprintln!("{failed} trajectories failed; see traces");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_simulate(
    alphas: &[f64],
    steps: usize,
    chain_len: usize,
    seed: u64,
    output_dir: Option<&Path>,
    parallelism: Option<usize>,
) -> anyhow::Result<()> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(invalid(format!("alpha {a} outside [0, 1]")));
    }
    if steps == 0 || chain_len < 2 {
        return Err(invalid("need steps >= 1 and chain-len >= 2"));
    }
    let pool = rayon_pool(parallelism)?;
    let mut rows = Vec::new();
    println!("{:>6} {:>14} {:>14} {:>10} {:>9}", "alpha", "closed_form_s", "monte_carlo_s", "rel_err", "speedup");
    for &alpha in alphas {
        let check = pool.install(|| monte_carlo_step_latency(alpha, steps, chain_len, seed))?;
        let speedup = expected_speedup(alpha, &SimSetup::calibrated(alpha).latency_setup())?;
        println!(
            "{:>6.3} {:>14.6} {:>14.6} {:>9.4}% {:>9.3}",
            alpha,
            check.closed_form_s,
            check.monte_carlo_s,
            100.0 * check.relative_error,
            speedup
        );
        rows.push(json!({ "check": check, "expected_speedup": speedup }));
    }
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn rayon_pool(parallelism: Option<usize>) -> anyhow::Result<ThreadPool> {
    let mut b = ThreadPoolBuilder::new();
    if let Some(n) = parallelism {
        if n == 0 {
            return Err(invalid("parallelism must be >= 1"));
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn cmd_profile(
    url: &str,
    model: &str,
    role: &str,
    samples: usize,
    api_key_env: Option<&str>,
    output_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let role = match role.to_ascii_lowercase().as_str() {
        "small" => Role::Small,
        "base" => Role::Base,
        _ => return Err(invalid(format!("unknown role {role:?}; expected small or base"))),
    };
    let mut cfg = HttpBackendConfig::new(url, model);
    cfg.api_key_env = api_key_env.map(str::to_string);
    let placeholder = match role {
        Role::Small => BackendProfile::default_small(),
        Role::Base => BackendProfile::default_base(),
    };
    let backend = OpenAiCompletions::new(cfg, placeholder).map_err(invalid)?;
    let m = measure_profile(&backend, model, role, samples)?;
    let text = serde_json::to_string_pretty(&m.profile)?;
    println!("{text}");
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("profile.json"), &text)?;
    }
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, output_dir: Option<&Path>) -> anyhow::Result<()> {
    let ra = bench::read_results_csv(a).map_err(invalid).with_context(|| a.display().to_string())?;
    let rb = bench::read_results_csv(b).map_err(invalid).with_context(|| b.display().to_string())?;
    let deltas = bench::compare_results(&ra, &rb).map_err(invalid)?;
    println!(
        "{:<20} {:>8} {:>10} {:>12} {:>12} {:>8}",
        "scheme", "value", "d_pass@1", "latency_a", "latency_b", "ratio"
    );
    for d in &deltas {
        println!(
            "{:<20} {:>8} {:>10} {:>12.4} {:>12.4} {:>8.3}",
            d.scheme.to_string(),
            d.value,
            d.delta_pass_at_1.map_or("-".into(), |x| format!("{x:+.4}")),
            d.mean_latency_a,
            d.mean_latency_b,
            d.latency_ratio
        );
    }
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
        for d in &deltas {
            w.serialize(d)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.verb {
        Verb::Run { common, problem } => cmd_run(common, *problem),
        Verb::Sweep { common } => cmd_sweep(common),
        Verb::Simulate {
            alpha,
            steps,
            chain_len,
            seed,
            output_dir,
            parallelism,
        } => cmd_simulate(alpha, *steps, *chain_len, *seed, output_dir.as_deref(), *parallelism),
        Verb::Profile {
            backend_url,
            model,
            role,
            samples,
            api_key_env,
            output_dir,
        } => cmd_profile(backend_url, model, role, *samples, api_key_env.as_deref(), output_dir.as_deref()),
        Verb::Compare { a, b, output_dir } => cmd_compare(a, b, output_dir.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Invalid>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
