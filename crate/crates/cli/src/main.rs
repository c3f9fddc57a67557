use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use evcar_core::io::{
    load_config, read_json, write_json, write_path_csv, write_trajectory_csv, Config, EventRecord,
    SolutionFile,
};
use evcar_core::scenario::{
    next_structure, path_admissibility, run_leg, run_scenario, verify_gamma_plus, write_results,
    LegKind, ScenarioOptions, TBAR_F,
};
use evcar_core::shooting::{multi_start_s1, solve, trajectory, NewtonOptions};
use evcar_core::{Bounds, ModelConstants, Param, Structure, Tolerances, Unknowns};

const LEGS: &str = "Legs of imax150:
  h1   s1, imax 1100 down to the first contact with the current bound
  h2a  s2, imax down to 150
  h2b  s2, vmax 110 down to the first contact with the speed bound
  h3   s3, vmax down to a unit boundary control
  h4   s4, vmax down to the closing of the positive arc after the current bound
  h5   s5, vmax down to 10";

#[derive(Parser)]
#[command(
    name = "evcar",
    version,
    about = "Minimum-time electric vehicle: shooting, homotopies and checks"
)]
struct Cli {
    /// Car parameters and bounds as a flat JSON object.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Integration tolerance (relative and absolute).
    #[arg(long, global = true, env = "EVCAR_TOL")]
    tol: Option<f64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one shooting system.
    Solve(SolveArgs),
    /// Follow one homotopy from a solved report.
    Continue(ContinueArgs),
    /// Run a full continuation scenario.
    #[command(after_help = LEGS)]
    Scenario {
        #[command(subcommand)]
        which: ScenarioCmd,
    },
    /// Numerical verifications.
    Verify {
        #[command(subcommand)]
        which: VerifyCmd,
    },
}

#[derive(Args)]
struct BoundArgs {
    /// Current bound in A; overrides the config.
    #[arg(long)]
    imax: Option<f64>,
    /// Speed bound in km/h; overrides the config.
    #[arg(long)]
    vmax: Option<f64>,
    /// Target position in m; overrides the config.
    #[arg(long)]
    alphaf: Option<f64>,
}

impl BoundArgs {
    fn apply(&self, mut b: Bounds) -> Bounds {
        b.imax = self.imax.unwrap_or(b.imax);
        b.vmax = self.vmax.unwrap_or(b.vmax);
        b.alphaf = self.alphaf.unwrap_or(b.alphaf);
        b
    }
}

#[derive(Args)]
struct SolveArgs {
    /// s1 .. s5
    #[arg(long)]
    structure: Structure,
    #[command(flatten)]
    bounds: BoundArgs,
    /// Report used as the initial guess; required except for s1.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Trajectory CSV; defaults to the report path with a .csv extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ContinueArgs {
    /// h1, h2a, h2b, h3, h4 or h5
    #[arg(long)]
    homotopy: LegKind,
    /// Solved report at the start of the leg.
    #[arg(long)]
    from: PathBuf,
    /// Final imax of a current leg.
    #[arg(long, conflicts_with = "target_vmax")]
    target_imax: Option<f64>,
    /// Final vmax of a speed leg.
    #[arg(long)]
    target_vmax: Option<f64>,
    /// Stop at the first structure change.
    #[arg(long)]
    auto: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// imax lowered from 1100 to 150 at vmax = 110, then vmax lowered from
    /// 110 to 10.
    #[command(after_help = LEGS)]
    Imax150 {
        /// Directory for milestones, paths and trajectories.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Where the last speed leg stops, in km/h.
        #[arg(long, default_value_t = 10.0)]
        vmax_end: f64,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Scan the switching function of the positive bang strategy backward
    /// from a grid of terminal states.
    BangOptimality {
        /// Points per side of the terminal-state grid.
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 1200.0)]
        imax: f64,
        #[arg(long, default_value_t = 120.0)]
        vmax: f64,
        /// Backward horizon of the scan.
        #[arg(long, default_value_t = TBAR_F)]
        tbar: f64,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code.
enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn numerical(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Numerical(e.into())
}

type Outcome = Result<(), Failure>;

struct Ctx {
    config: Config,
    newton: NewtonOptions,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = context(&cli).and_then(|ctx| match &cli.cmd {
        Cmd::Solve(a) => cmd_solve(&ctx, a),
        Cmd::Continue(a) => cmd_continue(&ctx, a),
        Cmd::Scenario {
            which: ScenarioCmd::Imax150 { out, vmax_end },
        } => cmd_scenario(&ctx, out, *vmax_end),
        Cmd::Verify {
            which:
                VerifyCmd::BangOptimality {
                    grid,
                    imax,
                    vmax,
                    tbar,
                    out,
                },
        } => cmd_verify(&ctx, *grid, *imax, *vmax, *tbar, out.as_deref()),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn context(cli: &Cli) -> Result<Ctx, Failure> {
    let config = match &cli.config {
        Some(p) => load_config(p)
            .map_err(|e| usage(anyhow!(e).context(format!("config {}", p.display()))))?,
        None => Config::default(),
    };
    let mut newton = NewtonOptions::default();
    if let Some(tol) = cli.tol {
        if !(tol.is_finite() && tol > 0.0 && tol < 1.0) {
            return Err(usage(anyhow!("tolerance must lie in (0, 1), got {tol}")));
        }
        newton.flow = Tolerances::uniform(tol);
    }
    Ok(Ctx { config, newton })
}

fn load_solution(path: &Path) -> Result<SolutionFile, Failure> {
    read_json(path).map_err(|e| usage(anyhow!(e).context(format!("report {}", path.display()))))
}

fn write_solution(path: &Path, csv: &Path, sol: &SolutionFile, tol: &Tolerances) -> Outcome {
    write_json(path, sol).map_err(numerical)?;
    let mc = sol.constants().map_err(usage)?;
    let tr = trajectory(&mc, &sol.report.unknowns, tol).map_err(numerical)?;
    write_trajectory_csv(csv, &mc, &tr, 200).map_err(numerical)?;
    Ok(())
}

fn summary(y: &Unknowns) -> String {
    let p = y.p0();
    format!(
        "tf = {:.6}, p0 = ({:.6}, {:.6}, {:.6})",
        y.tf(),
        p[0],
        p[1],
        p[2]
    )
}

fn cmd_solve(ctx: &Ctx, a: &SolveArgs) -> Outcome {
    let bounds = a.bounds.apply(ctx.config.bounds);
    let car = ctx.config.car;
    let mc = ModelConstants::new(car, bounds).map_err(usage)?;
    let report = match &a.init {
        Some(p) => {
            let init = load_solution(p)?;
            let y = init.report.unknowns;
            if y.structure != a.structure {
                return Err(usage(anyhow!(
                    "{} holds a {} solution, not {}",
                    p.display(),
                    y.structure,
                    a.structure
                )));
            }
            solve(&mc, &y, &ctx.newton).map_err(numerical)?
        }
        None if a.structure == Structure::S1 => {
            multi_start_s1(&mc, &ctx.newton).map_err(numerical)?
        }
        None => return Err(usage(anyhow!("{} needs --init", a.structure))),
    };
    let csv = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let converged = report.converged;
    println!(
        "{}: {} |h| = {:.3e}, {}",
        a.structure,
        summary(&report.unknowns),
        report.residual_norm,
        report.message
    );
    write_solution(
        &a.out,
        &csv,
        &SolutionFile {
            car,
            bounds,
            report,
        },
        &ctx.newton.flow,
    )?;
    if converged {
        Ok(())
    } else {
        Err(numerical(anyhow!(
            "no convergence; report written to {}",
            a.out.display()
        )))
    }
}

fn cmd_continue(ctx: &Ctx, a: &ContinueArgs) -> Outcome {
    let kind = a.homotopy;
    let start = load_solution(&a.from)?;
    if !start.report.converged {
        return Err(usage(anyhow!(
            "{} is not a converged report",
            a.from.display()
        )));
    }
    let target = match (kind.param(), a.target_imax, a.target_vmax) {
        (Param::Imax, Some(t), None) | (Param::Vmax, None, Some(t)) => t,
        (Param::Imax, None, None) if a.auto => 150.0,
        (Param::Vmax, None, None) if a.auto => 10.0,
        (p, _, _) => {
            return Err(usage(anyhow!(
                "{kind} moves {}; give --target-{} or --auto",
                p.name(),
                p.name()
            )))
        }
    };
    let mc = start.constants().map_err(usage)?;
    let y0 = start.report.unknowns.clone();
    let want = kind.structure();
    let predecessor = |s: Structure| match s {
        Structure::S2 => Some(Structure::S1),
        Structure::S3 => Some(Structure::S2),
        Structure::S4 => Some(Structure::S3),
        Structure::S5 => Some(Structure::S4),
        Structure::S1 => None,
    };
    let y0 = if y0.structure == want {
        y0
    } else if predecessor(want) == Some(y0.structure) {
        info!("rewriting the {} report as {want}", y0.structure);
        next_structure(&mc, &y0, want, &ctx.newton).map_err(numerical)?
    } else {
        return Err(usage(anyhow!(
            "{kind} follows {want}; {} holds {}",
            a.from.display(),
            y0.structure
        )));
    };
    let opts = ScenarioOptions {
        newton: ctx.newton,
        ..Default::default()
    };
    let leg = run_leg(kind, &mc, &y0, target, a.auto, &opts).map_err(numerical)?;

    std::fs::create_dir_all(&a.out_dir).map_err(numerical)?;
    let adm = path_admissibility(&mc, &leg, &ctx.newton.flow).map_err(numerical)?;
    let path_csv = a.out_dir.join(format!("path_{kind}.csv"));
    write_path_csv(&path_csv, leg.structure, &leg.path.points, &adm).map_err(numerical)?;
    let events: Vec<EventRecord> = leg.path.event.iter().map(EventRecord::from).collect();
    write_json(&a.out_dir.join(format!("events_{kind}.json")), &events).map_err(numerical)?;

    let mut bounds = start.bounds;
    match kind.param() {
        Param::Imax => bounds.imax = leg.path.lambda_end,
        Param::Vmax => bounds.vmax = leg.path.lambda_end,
    }
    let mc_end = ModelConstants::new(start.car, bounds).map_err(usage)?;
    let report = solve(&mc_end, &leg.end_unknowns(), &ctx.newton).map_err(numerical)?;
    let end = a.out_dir.join(format!("{kind}_end.json"));
    for e in &events {
        println!(
            "event {} at {} = {:.6}",
            e.kind,
            kind.param().name(),
            e.lambda
        );
    }
    println!(
        "{kind}: {} = {:.6}, {} points, {}",
        kind.param().name(),
        leg.path.lambda_end,
        leg.path.points.len(),
        summary(&report.unknowns)
    );
    let converged = report.converged;
    write_solution(
        &end,
        &end.with_extension("csv"),
        &SolutionFile {
            car: start.car,
            bounds,
            report,
        },
        &ctx.newton.flow,
    )?;
    if converged {
        Ok(())
    } else {
        Err(numerical(anyhow!("end of {kind} did not converge")))
    }
}

fn cmd_scenario(ctx: &Ctx, out: &Path, vmax_end: f64) -> Outcome {
    let opts = ScenarioOptions {
        newton: ctx.newton,
        vmax_end,
        ..Default::default()
    };
    let run = run_scenario(&ctx.config.car, &opts);
    write_results(out, &run)
        .with_context(|| format!("writing {}", out.display()))
        .map_err(numerical)?;
    let m = &run.milestones;
    let show = |name: &str, v: Option<f64>| match v {
        Some(v) => println!("{name:<22} {v:.6}"),
        None => println!("{name:<22} -"),
    };
    show("imax_c1", m.imax_c1);
    show("vmax_c3", m.vmax_c3);
    show("vmax_gamma_c3", m.vmax_gamma_c3);
    show("vmax_gamma_c3 (root)", m.vmax_gamma_c3_oracle);
    show("vmax_plus", m.vmax_plus);
    println!("{:<22} {:.2} s", "runtime", m.runtime_s);
    println!("results in {}", out.display());
    if m.failures.is_empty() {
        Ok(())
    } else {
        Err(numerical(anyhow!(m.failures.join("; "))))
    }
}

fn cmd_verify(
    ctx: &Ctx,
    grid: usize,
    imax: f64,
    vmax: f64,
    tbar: f64,
    out: Option<&Path>,
) -> Outcome {
    let bounds = Bounds {
        imax,
        vmax,
        alphaf: ctx.config.bounds.alphaf,
    };
    let mc = ModelConstants::new(ctx.config.car, bounds).map_err(usage)?;
    let rep = verify_gamma_plus(&mc, grid, tbar, &ctx.newton.flow);
    println!(
        "grid {grid}x{grid}: min |phi| = {:.3e} at x_f = ({:.3}, 1, {:.3}), {} zero crossings, {} failures",
        rep.min_abs_phi,
        rep.argmin.0,
        rep.argmin.1,
        rep.zero_crossings,
        rep.failures.len()
    );
    if let Some(p) = out {
        write_json(p, &rep).map_err(numerical)?;
    }
    if rep.passed() {
        Ok(())
    } else {
        Err(numerical(anyhow!(
            "switching function vanishes or integration failed"
        )))
    }
}
