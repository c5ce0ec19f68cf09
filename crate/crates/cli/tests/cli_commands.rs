use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffeo_core::grid::{Grid2D, Image};
use diffeo_core::io::{read_field, read_pgm, write_deformation_path, write_pgm};
use diffeo_core::Deformation;

const CONFIG: &str = "n_timesteps = 8
sim_weight = 100
max_iters = 150
kernel {
  family = gaussian
  sigma = 8
}
";

fn diffeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffeo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn blob(g: Grid2D, cx: f64, cy: f64) -> Image {
    Image::from_fn(g, |x, y| 0.9 * (-((x - cx).powi(2) + (y - cy).powi(2)) / 98.0).exp())
}

/// `(t, Qx, Qy, Px, Py)` rows of a trajectory CSV.
fn trajectory(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,a,Qx,Qy,Px,Py,H"));
    lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn csv_total(path: &Path) -> (String, String) {
    let text = fs::read_to_string(path).unwrap();
    let line = text.lines().find(|l| l.starts_with("total,")).expect("total row");
    let cols: Vec<&str> = line.split(',').collect();
    (cols[1].to_string(), cols[2].to_string())
}

#[test]
fn register_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid2D::square(32).unwrap();
    let img = blob(g, 15.0, 16.0);
    let src = dir.path().join("src.pgm");
    write_pgm(&src, &img).unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("same");
    let o = diffeo(&["register", "--source", p(&src), "--target", p(&src), "--config", p(&cfg), "--out-prefix", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).trim_end().ends_with("OK"));
    let trace = fs::read_to_string(dir.path().join("same_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "{trace}");
    let warped = read_pgm(dir.path().join("same_warped.pgm")).unwrap();
    assert_eq!(warped, read_pgm(&src).unwrap());
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid2D::square(32).unwrap();
    let src = dir.path().join("src.pgm");
    write_pgm(&src, &blob(g, 15.0, 16.0)).unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.txt");
    let o = diffeo(&["register", "--source", p(&src), "--target", p(&src), "--config", p(&missing), "--out-prefix", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("register: failed error 3"));
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1, "{names:?}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = diffeo(&["phantom", "--out-prefix", "x", "--colour", "red"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn register_then_correspond() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid2D::square(64).unwrap();
    let (src, tgt) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    write_pgm(&src, &blob(g, 30.0, 32.0)).unwrap();
    write_pgm(&tgt, &blob(g, 32.0, 32.0)).unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("reg");
    let o = diffeo(&["register", "--source", p(&src), "--target", p(&tgt), "--config", p(&cfg), "--out-prefix", p(&out)]);
    assert!(o.status.success(), "{o:?}");

    let trace = fs::read_to_string(dir.path().join("reg_trace.csv")).unwrap();
    let ssd: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let reduction = 1.0 - ssd[ssd.len() - 1] / ssd[0];
    assert!(reduction >= 0.95, "{reduction}");
    for name in ["reg_phi.field", "reg_phi_inv.field", "reg_dispx.field", "reg_path_000.field", "reg_path_008.field"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }

    let left = dir.path().join("left");
    let o = diffeo(&["correspond", "--phi-path-prefix", &format!("{}_path", p(&out)), "--out-prefix", p(&left)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("equal=true"));
    let csv = dir.path().join("left_energy.csv");
    let (right_total, left_total) = csv_total(&csv);
    assert_eq!(right_total, left_total);
    let endpoint = fs::read_to_string(&csv).unwrap();
    let endpoint: f64 = endpoint
        .lines()
        .find(|l| l.starts_with("endpoint_max_px"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(endpoint < 0.1);
}

#[test]
fn correspond_identity_path() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid2D::square(16).unwrap();
    let prefix = format!("{}", p(&dir.path().join("id")));
    let path = diffeo_core::flows::DeformationPath::identity(g, 4);
    write_deformation_path(&prefix, &path).unwrap();
    let out = dir.path().join("psi");
    let o = diffeo(&["correspond", "--phi-path-prefix", &prefix, "--out-prefix", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    for k in 0..=4 {
        let f = read_field(dir.path().join(format!("psi_{k:03}.field"))).unwrap();
        assert_eq!(Deformation::from_displacement(f), Deformation::identity(g));
    }
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let prefix = dir.path().join(run);
        let o = diffeo(&["phantom", "--out-prefix", p(&prefix), "--size", "48", "--lesion", "--seed", "5"]);
        assert!(o.status.success(), "{o:?}");
    }
    for suffix in ["source", "source_clean", "target", "lesion_mask", "lesion_dilated", "ssd_mask"] {
        let a = fs::read(dir.path().join(format!("a_{suffix}.pgm"))).unwrap();
        let b = fs::read(dir.path().join(format!("b_{suffix}.pgm"))).unwrap();
        assert_eq!(a, b, "{suffix}");
    }
    let o = diffeo(&["phantom", "--out-prefix", p(&dir.path().join("c")), "--size", "48"]);
    assert!(o.status.success());
    let mask = read_pgm(dir.path().join("c_lesion_mask.pgm")).unwrap();
    assert!(mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_pulson_moves_straight() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one.csv");
    let o = diffeo(&["shoot", "--q", "0.5,-2", "--p", "1,0", "--T", "1", "--steps", "50", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let rows = trajectory(&out);
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    assert!((last[2] - first[2] - 1.0).abs() < 1e-12);
    assert!((last[3] - first[3]).abs() < 1e-12);
}

#[test]
fn left_shooting_is_reversed_right_shooting() {
    let dir = tempfile::tempdir().unwrap();
    let pulses = ["--q", "-3,0", "--q", "3,0", "--p", "1,0", "--p", "-0.6,0.8"];
    let run = |side: &str, t: &str, name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["shoot", "--n", "2"];
        args.extend_from_slice(&pulses);
        args.extend_from_slice(&["--side", side, "--T", t, "--steps", "4000", "--out", p(&out)]);
        let o = diffeo(&args);
        assert!(o.status.success(), "{o:?}");
        (stdout(&o), trajectory(&out))
    };
    let (summary, left) = run("left", "20", "left.csv");
    let (_, back) = run("right", "-20", "back.csv");
    assert_eq!(left.len(), back.len());
    let worst = left
        .iter()
        .zip(&back)
        .flat_map(|(a, b)| (1..7).map(move |c| (a[c] - b[c]).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst:e}");
    let drift: f64 = summary
        .split_whitespace()
        .find_map(|w| w.strip_prefix("drift="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(drift < 1e-8, "{drift:e}");
}

#[test]
fn bad_field_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.field");
    fs::write(&bad, b"not a field").unwrap();
    let o = diffeo(&["invert", "--phi", p(&bad), "--out", p(&dir.path().join("inv.field"))]);
    assert_eq!(o.status.code(), Some(4));
}
