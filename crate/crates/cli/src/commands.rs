use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use diffeo_core::flows::{
    correspond_left_right, permutation_invariant_sum, step_energies, DeformationPath, VelocityPath,
};
use diffeo_core::grid::{invert_with_stats, warp_image};
use diffeo_core::io::{
    indexed_path, parse_config, read_deformation_path, read_field, read_field_sequence,
    read_image_any, write_deformation_path, write_field, write_field_sequence, write_pgm,
    write_scalar,
};
use diffeo_core::kernels::apply_kernel;
use diffeo_core::matching::{register as run_register, MatchResult};
use diffeo_core::pulsons::{shoot as run_shoot, PulsonState, ScalarKernel, Side};
use diffeo_core::{Deformation, Error, Image, VectorField};

use crate::{phantom, CliError, Result};

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Writes an image as PGM when the path ends in `.pgm`, as a scalar field otherwise.
fn write_image_any(path: &Path, img: &Image) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        write_pgm(path, img)?;
    } else {
        write_scalar(path, img)?;
    }
    Ok(())
}

/// `|u_x|` of a deformation's displacement.
pub fn dispx_magnitude(phi: &Deformation) -> Image {
    let d = phi.displacement();
    Image::new(*d.grid(), d.ux().iter().map(|v| v.abs()).collect()).expect("finite displacement")
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_prefix: String,
}

/// Files written next to a registration result.
pub fn write_registration(prefix: &str, res: &MatchResult) -> Result<()> {
    write_pgm(format!("{prefix}_warped.pgm"), &res.warped)?;
    write_field(format!("{prefix}_phi.field"), res.phi_right.last().displacement())?;
    write_field(format!("{prefix}_phi_inv.field"), res.phi_inv.displacement())?;
    write_scalar(format!("{prefix}_dispx.field"), &dispx_magnitude(res.phi_right.last()))?;
    write_text(format!("{prefix}_trace.csv"), &res.trace_csv())?;
    let path = format!("{prefix}_path");
    write_deformation_path(&path, &res.phi_right)?;
    write_field_sequence(&format!("{path}_momenta"), &res.momenta)?;
    write_field_sequence(&format!("{path}_velocity"), res.velocity.steps())?;
    Ok(())
}

pub fn register(args: &RegisterArgs) -> Result<String> {
    let source = read_image_any(&args.source)?;
    let target = read_image_any(&args.target)?;
    let cfg = parse_config(&args.config)?;
    let res = run_register(&source, &target, &cfg)?;
    write_registration(&args.out_prefix, &res)?;
    Ok(format!(
        "register: iterations={} stop={:?} ssd={:.6e}->{:.6e} energy={:.6e}",
        res.trace.len() - 1,
        res.stop,
        res.trace[0].ssd,
        res.final_ssd,
        res.final_energy
    ))
}

#[derive(Args, Debug)]
pub struct WarpArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub phi_inv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn warp(args: &WarpArgs) -> Result<String> {
    let img = read_image_any(&args.image)?;
    let phi_inv = Deformation::from_displacement(read_field(&args.phi_inv)?);
    let out = warp_image(&img, &phi_inv)?;
    write_image_any(&args.out, &out)?;
    Ok(format!("warp: {} max_disp_px={:.6e}", img.grid(), phi_inv.max_displacement_px()))
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[arg(long)]
    pub phi: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

pub fn invert(args: &InvertArgs) -> Result<String> {
    let phi = Deformation::from_displacement(read_field(&args.phi)?);
    let (inv, stats) = invert_with_stats(&phi, args.max_iter, args.tol)?;
    write_field(&args.out, inv.displacement())?;
    Ok(format!(
        "invert: iterations={} last_update={:.3e}",
        stats.iterations, stats.last_update
    ))
}

#[derive(Args, Debug)]
pub struct CorrespondArgs {
    #[arg(long)]
    pub phi_path_prefix: String,
    #[arg(long)]
    pub out_prefix: String,
}

/// Per-step energies of a right path and of its corresponded left path.
pub struct EnergyTable {
    pub right: Vec<f64>,
    pub left: Vec<f64>,
    pub right_total: f64,
    pub left_total: f64,
}

pub fn energy_table(v: &VelocityPath, momenta: &[VectorField]) -> Result<EnergyTable> {
    let right = step_energies(v, momenta)?;
    let rev: Vec<VectorField> = momenta.iter().rev().cloned().collect();
    let left = step_energies(&v.reversed(), &rev)?;
    Ok(EnergyTable {
        right_total: permutation_invariant_sum(&right),
        left_total: permutation_invariant_sum(&left),
        right,
        left,
    })
}

fn correspondence_csv(table: Option<&EnergyTable>, endpoint_px: f64) -> String {
    let mut out = String::from("step,right_energy,left_energy\n");
    if let Some(t) = table {
        for (k, (r, l)) in t.right.iter().zip(&t.left).enumerate() {
            writeln!(out, "{k},{r:e},{l:e}").expect("write to string");
        }
        writeln!(out, "total,{:e},{:e}", t.right_total, t.left_total).expect("write to string");
    }
    writeln!(out, "endpoint_max_px,{endpoint_px:e},{endpoint_px:e}").expect("write to string");
    out
}

pub fn correspond(args: &CorrespondArgs) -> Result<String> {
    let phi: DeformationPath = read_deformation_path(&args.phi_path_prefix)?;
    let momenta_prefix = format!("{}_momenta", args.phi_path_prefix);
    let velocity_prefix = format!("{}_velocity", args.phi_path_prefix);
    let table = if indexed_path(&momenta_prefix, 0).exists() {
        let momenta = read_field_sequence(&momenta_prefix)?;
        let v = VelocityPath::new(read_field_sequence(&velocity_prefix)?)?;
        if momenta.len() != phi.steps() || v.len() != phi.steps() {
            return Err(CliError::Core(Error::InvalidData(format!(
                "path has {} steps but {} momenta and {} velocities",
                phi.steps(),
                momenta.len(),
                v.len()
            ))));
        }
        Some(energy_table(&v, &momenta)?)
    } else {
        None
    };
    let psi = correspond_left_right(&phi)?;
    let endpoint = psi.last().distance_px(phi.last())?;
    write_deformation_path(&args.out_prefix, &psi)?;
    write_text(
        format!("{}_energy.csv", args.out_prefix),
        &correspondence_csv(table.as_ref(), endpoint),
    )?;
    let energies = match &table {
        Some(t) => format!(
            "right_energy={:e} left_energy={:e} equal={}",
            t.right_total,
            t.left_total,
            t.right_total.to_bits() == t.left_total.to_bits()
        ),
        None => "energies=unavailable".to_string(),
    };
    Ok(format!(
        "correspond: steps={} endpoint_max_px={endpoint:.3e} {energies}",
        phi.steps()
    ))
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `x,y`, got `{s}`"))?;
    let x = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let y = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    if !(x.is_finite() && y.is_finite()) {
        return Err(format!("non-finite coordinate in `{s}`"));
    }
    Ok([x, y])
}

#[derive(Args, Debug)]
pub struct ShootArgs {
    /// Number of pulsons.
    #[arg(long)]
    pub n: Option<usize>,
    /// Initial position `x,y`, once per pulson.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub q: Vec<[f64; 2]>,
    /// Initial momentum `x,y`, once per pulson.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub p: Vec<[f64; 2]>,
    /// Initial state file with `Qx,Qy,Px,Py` rows (overrides --q/--p).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value = "right")]
    pub side: Side,
    #[arg(long = "T", default_value_t = 1.0, allow_hyphen_values = true)]
    pub t: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_state_file(path: &Path) -> Result<PulsonState> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (mut q, mut p) = (Vec::new(), Vec::new());
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with("Qx") {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::BadValue {
                line: idx + 1,
                key: "state".into(),
                reason: e.to_string(),
            })?;
        let [qx, qy, px, py] = vals[..] else {
            return Err(Error::BadValue {
                line: idx + 1,
                key: "state".into(),
                reason: format!("expected 4 columns, found {}", vals.len()),
            }
            .into());
        };
        q.push([qx, qy]);
        p.push([px, py]);
    }
    Ok(PulsonState::new(q, p)?)
}

pub fn shoot(args: &ShootArgs) -> Result<String> {
    let s0 = match &args.init {
        Some(path) => read_state_file(path)?,
        None => PulsonState::new(args.q.clone(), args.p.clone())?,
    };
    if let Some(n) = args.n {
        if n != s0.len() {
            return Err(CliError::Usage(format!(
                "--n {n} but {} pulsons were given",
                s0.len()
            )));
        }
    }
    let k = ScalarKernel::gaussian(args.sigma)?;
    let traj = run_shoot(&s0, &k, args.side, args.t, args.steps)?;
    write_text(&args.out, &traj.to_csv(&k))?;
    let h = traj.hamiltonians(&k);
    Ok(format!(
        "shoot: side={} n={} steps={} H0={:.12e} H1={:.12e} drift={:.3e}",
        match args.side {
            Side::Left => "left",
            Side::Right => "right",
        },
        s0.len(),
        args.steps,
        h[0],
        h[h.len() - 1],
        traj.max_relative_drift(&k)
    ))
}

#[derive(Args, Debug)]
pub struct KernelApplyArgs {
    /// Configuration whose kernel block is applied.
    #[arg(long)]
    pub config: PathBuf,
    /// Momentum field.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn kernel_apply(args: &KernelApplyArgs) -> Result<String> {
    let cfg = parse_config(&args.config)?;
    let p = read_field(&args.input)?;
    let v = apply_kernel(&cfg.kernel, &p)?;
    write_field(&args.out, &v)?;
    Ok(format!(
        "kernel-apply: {} max_in={:.6e} max_out={:.6e}",
        p.grid(),
        p.max_norm(),
        v.max_norm()
    ))
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Zero a disk in the left half of the source.
    #[arg(long)]
    pub lesion: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Writes every phantom image and mask under `prefix`.
pub fn write_phantom(prefix: &str, p: &phantom::Phantom) -> Result<()> {
    write_pgm(format!("{prefix}_source.pgm"), &p.source)?;
    write_pgm(format!("{prefix}_source_clean.pgm"), &p.source_clean)?;
    write_pgm(format!("{prefix}_target.pgm"), &p.target)?;
    write_pgm(format!("{prefix}_lesion_mask.pgm"), &p.lesion.to_image())?;
    write_pgm(format!("{prefix}_lesion_dilated.pgm"), &p.lesion_dilated.to_image())?;
    write_pgm(format!("{prefix}_ssd_mask.pgm"), &p.ssd_mask().to_image())?;
    Ok(())
}

pub fn phantom(args: &PhantomArgs) -> Result<String> {
    if args.size < 32 {
        return Err(CliError::Usage(format!("--size must be at least 32, got {}", args.size)));
    }
    let p = phantom::generate(args.size, args.lesion, args.seed)?;
    write_phantom(&args.out_prefix, &p)?;
    Ok(format!(
        "phantom: size={} seed={} lesion_px={} dilated_px={}",
        args.size,
        args.seed,
        p.lesion.count(),
        p.lesion_dilated.count()
    ))
}
