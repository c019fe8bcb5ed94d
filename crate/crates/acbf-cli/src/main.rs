use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acbf::config::apply_overrides;
use acbf::controller::Controller;
use acbf::scenarios::{preset_params, Audit, Scenario, ScenarioError, PRESETS};
use acbf::sim::{write_trace_csv, SimConfig, Summary};
use acbf::tightening::{refine_system, Dataset, TighteningError};
use acbf::{parallel, Execution};
use anyhow::{anyhow, Context};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};

const SAFETY_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "acbf", version, about = "Adaptive CBF scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace.
    Run(RunArgs),
    /// Audit the initial-condition margin and the admissible set on a grid.
    Check(CheckArgs),
    /// Tighten parameter bounds from a dataset.
    Tighten(TightenArgs),
    /// Run a scenario across values of one flag.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, value_parser = PossibleValuesParser::new(PRESETS))]
    scenario: String,
    /// TOML file overriding preset numbers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run grid audits and sweeps on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    data_driven: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace CSV path; the summary and reports are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_driven: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TightenArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset CSV. Without it a dataset is generated from `--seed`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Dt,
    TEnd,
    Seed,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    data_driven: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comparison table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error tagged with its exit status.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        let code = classify(&err);
        Failure { code, err }
    }
}

fn fail(code: u8, err: anyhow::Error) -> Failure {
    Failure { code, err }
}

fn classify(err: &anyhow::Error) -> u8 {
    let tightening = |t: &TighteningError| match t {
        TighteningError::DataInconsistent { .. } | TighteningError::SignUndetermined { .. } => 5,
        TighteningError::Dataset(_) | TighteningError::Csv(_) | TighteningError::Io(_) => 5,
        _ => 2,
    };
    if let Some(t) = err.downcast_ref::<TighteningError>() {
        return tightening(t);
    }
    match err.downcast_ref::<ScenarioError>() {
        Some(ScenarioError::Tightening(t)) => tightening(t),
        Some(ScenarioError::Exploration(_)) => 4,
        _ => 2,
    }
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let mut params = preset_params(&common.scenario)?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        params = apply_overrides(&params, &text).with_context(|| format!("applying {}", path.display()))?;
    }
    Ok(Scenario::from_params(&common.scenario, params)?)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_audit(sc: &Scenario, audit: &Audit) {
    let n = &audit.nominal;
    println!("scenario      {}", sc.id);
    println!("mode          {:?}", audit.mode);
    println!("mu_bar        {:?} (formula {:?})", n.mu_bar, n.mu_bar_formula);
    println!("nu_bar        {:?} (formula {:?})", n.nu_bar, n.nu_bar_formula);
    println!(
        "condition iv  margin {:.9} {}",
        audit.condition_iv.margin,
        if audit.condition_iv.holds { "ok" } else { "FAILED" }
    );
    println!(
        "K_BF grid     {} safe points, {} empty, min Psi0 {:.6e}, min |Psi1| {:.6e}",
        audit.kbf.samples,
        audit.kbf.violations.len(),
        audit.kbf.min_psi0,
        audit.kbf.min_abs_psi1
    );
    for v in audit.kbf.violations.iter().take(5) {
        println!("  empty at x = {:?} (Psi0 {:.6e}, Psi1 {:?})", v.x, v.psi0, v.psi1);
    }
}

fn audit_or_fail(sc: &Scenario, ctrl: &Controller, exec: Execution) -> Result<Audit, Failure> {
    let audit = sc.audit_with(ctrl, exec);
    if !audit.passed() {
        print_audit(sc, &audit);
        return Err(fail(3, anyhow!("condition audit failed for {}", sc.id)));
    }
    Ok(audit)
}

fn print_summary(s: &Summary) {
    println!("completed     {}", s.completed);
    if let Some(a) = &s.abort {
        println!("abort         {a}");
    }
    println!("t_final       {:.6}", s.t_final);
    println!("min h         {:.9e}", s.min_h);
    println!("min raw h     {:.9e}", s.min_h_raw);
    println!("min h_bar     {:.9e}", s.min_h_bar);
    println!("decay slack   {:.9e}", s.min_decay_slack);
    println!("rmse inside   {:?} (total {:.6e})", s.rmse_inside, s.rmse_inside_total);
    println!("max |u|       {:.6e}", s.max_abs_u);
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
}

fn unsafe_reason(s: &Summary) -> Option<String> {
    if let Some(a) = &s.abort {
        return Some(a.clone());
    }
    (s.min_h < -SAFETY_TOL || s.min_h_raw < -SAFETY_TOL)
        .then(|| format!("safety violated: min h = {:.3e}, min raw h = {:.3e}", s.min_h, s.min_h_raw))
}

fn sim_config(sc: &Scenario, dt: Option<f64>, t_end: Option<f64>) -> Result<SimConfig, Failure> {
    let mut cfg = sc.params.sim.clone();
    if let Some(dt) = dt {
        cfg.dt = dt;
    }
    if let Some(t) = t_end {
        cfg.t_end = t;
    }
    if !(cfg.dt > 0.0 && cfg.dt.is_finite() && cfg.t_end > 0.0 && cfg.t_end.is_finite()) {
        return Err(fail(2, anyhow!("dt and t_end must be positive and finite")));
    }
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let sc = load(&a.common)?;
    let exec = a.common.exec();
    let cfg = sim_config(&sc, a.dt, a.t_end)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("{}.csv", sc.id)));
    let ctrl = if a.data_driven {
        let dd = sc.data_driven(a.seed)?;
        let n = sc.system.n();
        let dim = sc.system.dim();
        dd.dataset
            .write_csv(BufWriter::new(File::create(sibling(&out, "dataset.csv"))?), dim, n)?;
        write_json(&sibling(&out, "bounds.json"), &dd.report)?;
        dd.controller
    } else {
        sc.controller()?
    };
    audit_or_fail(&sc, &ctrl, exec)?;
    let run = sc.simulate_with(&ctrl, &cfg);
    write_trace_csv(&run, BufWriter::new(File::create(&out)?))
        .with_context(|| format!("writing {}", out.display()))?;
    let summary = sc.summarize(&run);
    write_json(&sibling(&out, "summary.json"), &summary)?;
    print_summary(&summary);
    if let Some(why) = unsafe_reason(&summary) {
        if let Some(last) = run.trace.last() {
            eprintln!("state at t = {}: x = {:?}, mu_hat = {:?}, nu_hat = {:?}", last.t, last.x, last.mu_hat, last.nu_hat);
        }
        return Err(fail(4, anyhow!(why)));
    }
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<(), Failure> {
    let sc = load(&a.common)?;
    let ctrl = if a.data_driven {
        sc.data_driven(a.seed)?.controller
    } else {
        sc.controller()?
    };
    let audit = sc.audit_with(&ctrl, a.common.exec());
    if a.json {
        println!("{}", serde_json::to_string_pretty(&audit)?);
    } else {
        print_audit(&sc, &audit);
    }
    if !audit.passed() {
        return Err(fail(3, anyhow!("condition audit failed for {}", sc.id)));
    }
    Ok(())
}

fn cmd_tighten(a: TightenArgs) -> Result<(), Failure> {
    let sc = load(&a.common)?;
    let dataset = match &a.data {
        Some(p) => Dataset::load(p)?,
        None => sc.data_driven(a.seed)?.dataset,
    };
    dataset.check_dims(sc.system.dim(), sc.system.n())?;
    if dataset.is_empty() {
        eprintln!("warning: empty dataset; bounds equal the priors");
    }
    let (_, report) = refine_system(&sc.system, &sc.prior, &dataset)?;
    for ch in &report.channels {
        println!("channel {}", ch.channel);
        for (j, (iv, r)) in ch.theta.entries.iter().zip(&ch.theta_width_ratio).enumerate() {
            println!("  theta[{j}]  [{:.9e}, {:.9e}]  width ratio {r:.6}", iv.lo(), iv.hi());
        }
        for (j, (iv, r)) in ch.lambda.entries.iter().zip(&ch.lambda_width_ratio).enumerate() {
            println!("  lambda[{j}] [{:.9e}, {:.9e}]  width ratio {r:.6}", iv.lo(), iv.hi());
        }
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("{}.bounds.json", sc.id)));
    write_json(&out, &report)?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let sc = load(&a.common)?;
    let exec = a.common.exec();
    let base = if a.data_driven && !matches!(a.param, SweepParam::Seed) {
        Some(sc.data_driven(a.seed)?.controller)
    } else {
        None
    };
    let rows = parallel::map(exec, &a.values, |&v| -> Result<Summary, String> {
        let (dt, t_end) = match a.param {
            SweepParam::Dt => (Some(v), None),
            SweepParam::TEnd => (None, Some(v)),
            SweepParam::Seed => (None, None),
        };
        let cfg = sim_config(&sc, dt, t_end).map_err(|f| f.err.to_string())?;
        let ctrl = match (&base, a.param) {
            (Some(c), _) => c.clone(),
            (None, SweepParam::Seed) if a.data_driven => {
                sc.data_driven(v as u64).map_err(|e| e.to_string())?.controller
            }
            _ => sc.controller().map_err(|e| e.to_string())?,
        };
        Ok(sc.summarize(&sc.simulate_with(&ctrl, &cfg)))
    });
    println!("{:>14} {:>9} {:>16} {:>16} {:>16} {:>14}", "value", "complete", "min_h", "min_h_bar", "rmse_inside", "max_abs_u");
    let mut table = String::from("value,completed,min_h,min_h_raw,min_h_bar,rmse_inside,max_abs_u\n");
    let mut worst: Option<String> = None;
    for (v, row) in a.values.iter().zip(&rows) {
        match row {
            Ok(s) => {
                println!(
                    "{v:>14e} {:>9} {:>16.9e} {:>16.9e} {:>16.9e} {:>14.6e}",
                    s.completed, s.min_h, s.min_h_bar, s.rmse_inside_total, s.max_abs_u
                );
                table.push_str(&format!(
                    "{v:e},{},{:e},{:e},{:e},{:e},{:e}\n",
                    s.completed, s.min_h, s.min_h_raw, s.min_h_bar, s.rmse_inside_total, s.max_abs_u
                ));
                if let Some(why) = unsafe_reason(s) {
                    worst.get_or_insert(format!("value {v}: {why}"));
                }
            }
            Err(e) => return Err(fail(2, anyhow!("value {v}: {e}"))),
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    match worst {
        Some(w) => Err(fail(4, anyhow!(w))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Check(a) => cmd_check(a),
        Command::Tighten(a) => cmd_tighten(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
