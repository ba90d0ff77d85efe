use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use monodomain_core::config::RunConfig;
use monodomain_core::experiment::{self, Overrides};
use monodomain_core::ionic::{cell_trace, estimate_dt0, model_by_name, pace_to_steady_state, SharedModel, MODEL_NAMES};
use monodomain_core::oracles::{self, LinearTestProblem, SubIntegrator};
use monodomain_core::output::{create_dir, write_json, write_text};
use monodomain_core::splitting::{resolve_models, RunOptions};
use monodomain_core::{Error, Result};

#[derive(Parser)]
#[command(name = "monodomain", version, about = "Explicit splitting solvers for the cardiac monodomain model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Solver threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Replace the fibrosis seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory (default: config, then $MONODOMAIN_OUTPUT_DIR, then ./output).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Round diffusion sub-step counts up so that every sub-step is within the bound.
    #[arg(long)]
    strict_substeps: bool,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, Overrides, PathBuf)> {
        let cfg = RunConfig::load(&self.config)?;
        let ov = Overrides {
            workers: self.workers,
            seed: self.seed_override,
            output_dir: self.output_dir.clone(),
            strict_substeps: self.strict_substeps,
        };
        let dir = cfg.output_dir(self.output_dir.as_deref());
        Ok((cfg, ov, dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured simulation and write traces, maps, snapshots and a report.
    Run(Common),
    /// Critical diffusion step for each configured mesh spacing.
    Dts(Common),
    /// Run the configured problem under several schemes and compare the results.
    Compare(Common),
    /// Search the lowest stimulus amplitude that propagates.
    Threshold(Common),
    /// Single-cell tools.
    Cell {
        #[command(subcommand)]
        command: CellCommand,
    },
    #[command(hide = true)]
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
}

#[derive(Subcommand)]
enum CellCommand {
    /// Pace one cell and report APD90 per beat.
    Pace {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1000.0)]
        cycle_length: f64,
        #[arg(long, default_value_t = 100)]
        beats: usize,
        /// CSV of beat, apd90_ms.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Largest stable forward Euler step over one paced beat.
    Dt0 {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 1000.0)]
        duration: f64,
    },
    /// One stimulated beat from rest as CSV.
    Trace {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 500.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.1)]
        interval: f64,
        /// Extra state columns.
        #[arg(long, value_delimiter = ',')]
        states: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List registered models.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum Integrator {
    Exact,
    Euler,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Power-iteration bound versus the Gershgorin step for a configured mesh.
    Spectral(Common),
    /// Fine-step reference run of a configured problem.
    Reference(Common),
    /// Observed splitting order on the linear test problem.
    LinearConvergence {
        #[arg(long, value_enum, default_value = "exact")]
        integrator: Integrator,
        #[arg(long, default_value_t = 0.8)]
        dt: f64,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 16.0)]
        t_end: f64,
    },
}

fn model(name: &str) -> Result<SharedModel> {
    model_by_name(name).ok_or_else(|| {
        Error::invalid(format!("--model: unknown cell model '{name}' (known: {})", MODEL_NAMES.join(", ")))
    })
}

fn cmd_run(c: &Common) -> Result<()> {
    let (cfg, ov, dir) = c.load()?;
    let (prep, mut out) = experiment::execute(&cfg, &ov)?;
    experiment::write_artifacts(&ov.apply(&cfg), &prep, &mut out, &dir)?;
    let r = &out.report;
    println!(
        "{} dt={} dt_s={:.5} steps={} wall={:.2}s reaction={:.2}s diffusion={:.2}s",
        r.scheme, r.dt, r.dt_s, r.n_steps, r.timing.solve, r.timing.reaction, r.timing.diffusion
    );
    for p in &r.probes {
        println!(
            "probe node {} ({:.4}, {:.4}): lat={} apd90={}",
            p.node,
            p.x,
            p.y,
            fmt_opt(p.lat),
            fmt_opt(p.apd90)
        );
    }
    if let Some(cv) = r.cv {
        println!("cv={cv:.5} cm/ms");
    }
    println!("output: {}", dir.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

fn cmd_dts(c: &Common) -> Result<()> {
    let (cfg, ov, dir) = c.load()?;
    let rows = experiment::dts_table(&ov.apply(&cfg))?;
    println!("{:>8} {:>8} {:>8} {:>10} {:>10}", "h_um", "nodes", "elements", "dt_s_ms", "2/lmax_ms");
    for r in &rows {
        println!(
            "{:>8.0} {:>8} {:>8} {:>10.5} {:>10}",
            r.h * 1e4,
            r.nodes,
            r.elements,
            r.dt_s,
            r.spectral_step.map(|s| format!("{s:.5}")).unwrap_or_else(|| "-".into())
        );
    }
    write_text(&dir.join("dts.csv"), &experiment::dts_csv(&rows))
}

fn cmd_compare(c: &Common) -> Result<()> {
    let (cfg, ov, dir) = c.load()?;
    let (_, outcomes, report) = experiment::compare(&cfg, &ov)?;
    experiment::write_compare(&report, &outcomes, &dir)?;
    println!("reference: {} (#{})", report.reference, report.reference_index);
    for (s, p) in report.schemes.iter().zip(&report.versus_reference) {
        let dv: Vec<String> = p.max_dv.iter().map(|x| fmt_opt(*x)).collect();
        let apd: Vec<String> = s.apd90.iter().map(|x| fmt_opt(*x)).collect();
        println!(
            "#{} {} dt={} wall={:.2}s ratio={:.3} cv={} apd90=[{}] max_dv=[{}] nrmse_lat={} nrmse_apd={}",
            p.index,
            s.scheme,
            s.dt,
            s.wall_time,
            p.wall_ratio,
            s.cv.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
            apd.join(" "),
            dv.join(" "),
            p.nrmse_lat.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into()),
            p.nrmse_apd.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into()),
        );
    }
    println!("output: {}", dir.display());
    Ok(())
}

fn cmd_threshold(c: &Common) -> Result<()> {
    let (cfg, ov, dir) = c.load()?;
    let r = experiment::threshold_search(&cfg, &ov)?;
    println!("threshold={:.4} mV/ms ({} evaluations)", r.threshold, r.evaluations.len());
    write_json(&dir.join("threshold.json"), &r)
}

fn cmd_cell(c: &CellCommand) -> Result<()> {
    match c {
        CellCommand::Pace {
            model: name,
            cycle_length,
            beats,
            out,
        } => {
            let m = model(name)?;
            let spec = m.spec();
            let r = pace_to_steady_state(m.as_ref(), *cycle_length, *beats, spec.stim_amplitude, spec.stim_duration)?;
            let mut csv = String::from("beat,apd90_ms\n");
            for (i, a) in r.apd90.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i + 1, a));
            }
            println!(
                "{name}: last APD90 {} ms, end-diastolic V {:.3} mV, convergence {:.3e}",
                fmt_opt(r.apd90.last().copied().filter(|a| a.is_finite())),
                r.v,
                r.convergence
            );
            if let Some(p) = out {
                write_text(p, &csv)?;
            }
            Ok(())
        }
        CellCommand::Dt0 { model: name, duration } => {
            let m = model(name)?;
            let dt0 = estimate_dt0(m.as_ref(), *duration)?;
            println!("{name}: estimated dt0 {dt0:.5} ms (configured {} ms)", m.spec().dt0);
            Ok(())
        }
        CellCommand::Trace {
            model: name,
            duration,
            interval,
            states,
            out,
        } => {
            let m = model(name)?;
            let spec = m.spec();
            let names: Vec<&str> = states.iter().map(String::as_str).collect();
            let tr = cell_trace(
                m.as_ref(),
                spec.rest_v,
                &spec.rest_state,
                *duration,
                *interval,
                spec.stim_amplitude,
                spec.stim_duration,
                &names,
            )?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    create_dir(dir)?;
                }
            }
            tr.write_csv(out)
        }
        CellCommand::List => {
            for n in MODEL_NAMES {
                let m = model(n)?;
                let s = m.spec();
                println!("{n}: {} states, rest {} mV, dt0 {} ms", s.n_states(), s.rest_v, s.dt0);
            }
            Ok(())
        }
    }
}

fn cmd_oracle(c: &OracleCommand) -> Result<()> {
    match c {
        OracleCommand::Spectral(common) => {
            let (cfg, ov, _) = common.load()?;
            let prep = experiment::prepare(&ov.apply(&cfg))?;
            let b = oracles::spectral_bound(&prep.op)?;
            println!(
                "lambda_max={:.6e} 2/lambda_max={:.6} dt_s={:.6} ratio={:.4} iterations={}",
                b.lambda_max,
                b.critical_step,
                prep.op.dt_s,
                b.critical_step / (prep.op.dt_s / 0.9),
                b.iterations
            );
            Ok(())
        }
        OracleCommand::Reference(common) => {
            let (cfg, ov, dir) = common.load()?;
            let cfg = ov.apply(&cfg);
            let prep = experiment::prepare(&cfg)?;
            let opts: RunOptions = experiment::run_options(&cfg, &prep, ov.workers);
            let models = resolve_models(&prep.state)?;
            let r = oracles::reference_solution(
                &prep.op,
                models,
                prep.state.clone(),
                &prep.protocol,
                cfg.scheme.t_end,
                cfg.scheme.record_interval,
                &opts,
            )?;
            let sub = dir.join("reference");
            create_dir(&sub)?;
            for (i, tr) in r.traces.iter().enumerate() {
                tr.write_csv(&sub.join(format!("probe_{i}_node_{}.csv", tr.node)))?;
            }
            println!("reference: dt={} steps={} -> {}", r.plan.dt, r.plan.n_steps, sub.display());
            Ok(())
        }
        OracleCommand::LinearConvergence {
            integrator,
            dt,
            levels,
            t_end,
        } => {
            let kind = match integrator {
                Integrator::Exact => SubIntegrator::Exact,
                Integrator::Euler => SubIntegrator::ForwardEuler,
            };
            let s = oracles::linear_convergence(&LinearTestProblem::default(), kind, *dt, *levels, *t_end)?;
            println!("{:>10} {:>14} {:>8}", "dt", "max_error", "order");
            for (i, (d, e)) in s.dts.iter().zip(&s.errors).enumerate() {
                let o = if i == 0 { "-".to_string() } else { format!("{:.4}", s.orders[i - 1]) };
                println!("{d:>10.5} {e:>14.6e} {o:>8}");
            }
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Dts(c) => cmd_dts(c),
        Command::Compare(c) => cmd_compare(c),
        Command::Threshold(c) => cmd_threshold(c),
        Command::Cell { command } => cmd_cell(command),
        Command::Oracle { command } => cmd_oracle(command),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

