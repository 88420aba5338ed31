//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::adjoint::{gradient_check, random_direction};
use crate::io::{load_config, write_history_csv, write_vtk_snapshot, ConfigError, RunConfig};
use crate::mesh::{validate_mesh, TriangleMesh};
use crate::optimizer::{initial_phase_field, run_optimization, Snapshot};
use crate::pnp::{gummel_solve, StateSolution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "supercap", version, about = "Phase-field topology optimization of supercapacitor electrodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the optimization and write snapshots and history.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Build and check the mesh, write it as mesh.vtk.
    MeshOnly {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compare adjoint directional derivatives against finite differences.
    CheckGradient {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        directions: usize,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// Solve the state for zero applied potential and uniform bulk data.
    EquilibriumTest { config: PathBuf },
}

enum Failure {
    Config(ConfigError),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn config(path: &Path) -> Result<RunConfig, Failure> {
    load_config(path).map_err(Failure::Config)
}

fn mesh_for(cfg: &RunConfig) -> Result<TriangleMesh, Failure> {
    cfg.geometry.build_mesh().map_err(|e| Failure::Config(ConfigError { line: None, message: e.to_string() }))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_snapshot(dir: &Path, mesh: &TriangleMesh, iteration: usize, phi: &[f64], state: &StateSolution) -> Result<(), Failure> {
    write_vtk_snapshot(&dir.join(format!("phi_{iteration:06}.vtk")), mesh, &[("phi", phi)])?;
    write_vtk_snapshot(
        &dir.join(format!("state_{iteration:06}.vtk")),
        mesh,
        &[("psi", &state.psi), ("c1", &state.c[0]), ("c2", &state.c[1])],
    )?;
    Ok(())
}

fn run(path: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = config(path)?;
    let mesh = mesh_for(&cfg)?;
    let out = output_dir.unwrap_or_else(|| cfg.run.output_dir.clone());
    create_dir(&out)?;
    crate::io::write_atomic(&out.join("config.toml"), crate::io::config_to_string(&cfg).as_bytes())?;
    let phi0 = initial_phase_field(&mesh, cfg.run.initial_m);
    let stride = cfg.run.snapshot_stride;
    let mut write_error = None;
    let mut observer = |s: &Snapshot<'_>| {
        if s.iteration % stride == 0 && write_error.is_none() {
            if let Err(Failure::Runtime(e)) = write_snapshot(&out, &mesh, s.iteration, s.phi, s.state) {
                write_error = Some(e);
            }
        }
    };
    let result = run_optimization(&mesh, &cfg.physical, &cfg.optim, &cfg.tolerances, &phi0, &mut observer)?;
    if let Some(e) = write_error {
        return Err(Failure::Runtime(e));
    }
    let last = result.history.last().expect("history holds the final record");
    write_snapshot(&out, &mesh, last.iter, &result.phi, &result.state)?;
    write_history_csv(&out.join("history.csv"), &result.history)?;
    let first = &result.history.records[0];
    println!("iterations       {}", last.iter);
    println!("objective        {:.6e} -> {:.6e}", first.objective, last.objective);
    println!("volume error     {:.3e}", last.volume_error);
    println!("output           {}", out.display());
    Ok(())
}

fn mesh_only(path: &Path, output_dir: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = config(path)?;
    let mesh = mesh_for(&cfg)?;
    let diag = validate_mesh(&mesh)?;
    let out = output_dir.unwrap_or_else(|| cfg.run.output_dir.clone());
    create_dir(&out)?;
    write_vtk_snapshot(&out.join("mesh.vtk"), &mesh, &[])?;
    println!("vertices         {}", mesh.num_vertices());
    println!("triangles        {}", mesh.num_triangles());
    println!("area             {:.12}", mesh.total_area());
    println!("h                {:.6e}", diag.h);
    println!("min area         {:.6e}", diag.min_area);
    println!("max angle (deg)  {:.6}", diag.max_angle.to_degrees());
    println!("non-obtuse       {}", diag.is_nonobtuse);
    for (tag, count) in &diag.tag_edge_counts {
        println!("edges {tag:<10?} {count}");
    }
    Ok(())
}

fn check_gradient(path: &Path, directions: usize, threshold: f64) -> Result<bool, Failure> {
    let cfg = config(path)?;
    let mesh = mesh_for(&cfg)?;
    let phi = initial_phase_field(&mesh, cfg.run.initial_m);
    let dirs: Vec<Vec<f64>> = (0..directions as u64).map(|k| random_direction(&mesh, cfg.run.seed + k)).collect();
    let rows = gradient_check(&mesh, &phi, &cfg.physical, &cfg.tolerances, cfg.optim.sensitivity_method, &dirs)?;
    println!("direction  adjoint                 finite differences      relative error");
    let mut ok = true;
    for (k, r) in rows.iter().enumerate() {
        let fd = r.finite_differences.last().map_or(f64::NAN, |x| x.1);
        println!("{k:>9}  {:>22.15e}  {fd:>22.15e}  {:.3e}", r.adjoint, r.relative_error);
        ok &= r.relative_error <= threshold;
    }
    Ok(ok)
}

fn equilibrium_test(path: &Path) -> Result<bool, Failure> {
    let cfg = config(path)?;
    let mesh = mesh_for(&cfg)?;
    let mut p = cfg.physical;
    p.g_gamma2 = 0.0;
    p.g_gammain = 0.0;
    p.c_inf_gamma2 = p.c_inf;
    let phi = vec![1.0; mesh.num_vertices()];
    let s = gummel_solve(&mesh, &phi, &p, &cfg.tolerances, None)?;
    let psi_max = s.psi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let c_dev = s.c.iter().flatten().fold(0.0f64, |m, c| m.max((c - p.c_inf).abs()));
    println!("gummel sweeps    {}", s.gummel_iterations);
    println!("max |psi|        {psi_max:.3e}");
    println!("max |c - c_inf|  {c_dev:.3e}");
    Ok(s.converged && s.gummel_iterations <= 2 && psi_max <= 1e-10 && c_dev <= 1e-10)
}

/// Runs the command line and returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Run { config, output_dir } => run(&config, output_dir).map(|_| true),
        Command::MeshOnly { config, output_dir } => mesh_only(&config, output_dir).map(|_| true),
        Command::CheckGradient { config, directions, threshold } => check_gradient(&config, directions, threshold),
        Command::EquilibriumTest { config } => equilibrium_test(&config),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: check failed");
            EXIT_FAILURE
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: config: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
