use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vtkio::model::{Attribute, DataSet, Piece, Vtk};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_monodomain"))
}

fn recipe(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name)
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).env_remove("MONODOMAIN_OUTPUT_DIR").output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

const SMALL: &str = r#"
schema_version = 1
name = "small"

[mesh]
lx = 0.4
ly = 0.1
h = 0.02

[tissue]
d0_myocyte = 0.0017
rho = 0.25

[models]
myocyte_epi = "aliev_panfilov"

[scheme]
scheme = "daeti"
dt = 0.1
t_end = 40.0

[[stimulus]]
region = { kind = "half_plane_x", bound = 0.1, side = "below" }
t_start = 1.0
duration = 2.0
amplitude = 50.0

[output]
probes = [[0.2, 0.05]]
cv_probes = [[0.1, 0.05], [0.3, 0.05]]
snapshot_interval = 10.0
"#;

fn small_config(dir: &Path, edit: impl Fn(&str) -> String) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, edit(SMALL)).unwrap();
    p
}

#[test]
fn run_writes_artifact_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| s.to_string());
    let out_dir = tmp.path().join("out");
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["report.json", "lat.csv", "apd90.csv", "maps.vtk", "snapshots/index.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let snaps = fs::read_dir(out_dir.join("snapshots")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "vtk")
    });
    assert_eq!(snaps.count(), 5);
    let traces: Vec<_> = fs::read_dir(out_dir.join("traces")).unwrap().collect();
    assert_eq!(traces.len(), 3);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scheme"], "daeti");
    assert_eq!(report["metadata"]["prng"], "ChaCha8");
    assert_eq!(report["config"]["mesh"]["lx"], 0.4);
    let t = &report["timing"];
    let parts: f64 = ["assembly", "prepace", "reaction", "diffusion", "output"]
        .iter()
        .map(|k| t[k].as_f64().unwrap())
        .sum();
    assert!(t["total"].as_f64().unwrap() >= 0.95 * parts);
    assert!(report["cv"].as_f64().unwrap() > 0.0);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| s.to_string());
    let dirs = ["a", "b"].map(|d| tmp.path().join(d));
    for d in &dirs {
        assert!(run(&["run", "-c", cfg.to_str().unwrap(), "--output-dir", d.to_str().unwrap()]).status.success());
    }
    for f in ["lat.csv", "apd90.csv", "maps.vtk", "traces/probe_0_node_73.csv", "snapshots/v_00003.vtk"] {
        let (a, b) = (fs::read(dirs[0].join(f)).unwrap(), fs::read(dirs[1].join(f)).unwrap());
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn vtk_maps_reread_independently() {
    let tmp = tempfile::tempdir().unwrap();
    // long enough for every node to repolarize, so neither map holds nan
    let cfg = small_config(tmp.path(), |s| s.replace("t_end = 40.0", "t_end = 450.0"));
    let out_dir = tmp.path().join("out");
    assert!(run(&["run", "-c", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]).status.success());

    let vtk = Vtk::import(out_dir.join("maps.vtk")).expect("vtkio parse");
    let DataSet::UnstructuredGrid { pieces, .. } = vtk.data else {
        panic!("not an unstructured grid")
    };
    let Piece::Inline(piece) = &pieces[0] else { panic!("expected inline piece") };
    assert_eq!(piece.num_points(), 21 * 6);
    assert_eq!(piece.cells.types.len(), 20 * 5);
    let lat_vtk: Vec<f64> = piece
        .data
        .point
        .iter()
        .find_map(|a| match a {
            Attribute::DataArray(d) if d.name == "LAT" => d.data.clone().cast_into::<f64>(),
            _ => None,
        })
        .expect("LAT point data");

    let csv = fs::read_to_string(out_dir.join("lat.csv")).unwrap();
    let lat_csv: Vec<Option<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().ok())
        .collect();
    assert_eq!(lat_vtk.len(), lat_csv.len());
    for (v, c) in lat_vtk.iter().zip(&lat_csv) {
        match c {
            Some(c) => assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0)),
            None => assert!(v.is_nan()),
        }
    }
}

#[test]
fn unknown_model_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("\"aliev_panfilov\"", "\"beeler_reuter\""));
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--output-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("models.myocyte_epi") && err.contains("beeler_reuter"), "{err}");
}

#[test]
fn validation_lists_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| {
        s.replace("rho = 0.25", "rho = 2.0")
            .replace("t_end = 40.0", "t_end = -1.0")
            .replace("duration = 2.0", "duration = -2.0")
    });
    let o = run(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for key in ["tissue.rho", "scheme:", "stimulus[0].duration"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

#[test]
fn instability_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| {
        s.replace("h = 0.02", "h = 0.01").replace("scheme = \"daeti\"", "scheme = \"ost\"").replace("t_end = 40.0", "t_end = 100.0")
    });
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--output-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("instability"));
}

#[test]
fn io_failure_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| s.to_string());
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&["run", "-c", cfg.to_str().unwrap(), "--output-dir", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(&["run", "-c", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("t_end = 40.0", "t_end = 5.0"));
    let env_dir = tmp.path().join("env");
    let o = bin()
        .args(["run", "-c", cfg.to_str().unwrap()])
        .env("MONODOMAIN_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("small/report.json").exists());
}

#[test]
fn dts_single_spacing_single_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| format!("{s}\n[dts]\nspacings = [0.02]\nspectral = true\n"));
    let o = run(&["dts", "-c", cfg.to_str().unwrap(), "--output-dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(tmp.path().join("dts.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    let cols: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(&cols[..3], &["0.02", "126", "100"]);
    let dt_s: f64 = cols[3].parse().unwrap();
    let spectral: f64 = cols[4].parse().unwrap();
    assert!(spectral >= dt_s / 0.9);
}

#[test]
fn self_comparison_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), |s| {
        let s = s.replace("t_end = 40.0", "t_end = 450.0");
        format!("{s}\n[compare]\nschemes = [\"daeti\", \"daeti\"]\nreference = \"daeti\"\n")
    });
    let out_dir = tmp.path().join("cmp");
    let o = run(&["compare", "-c", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("compare.json")).unwrap()).unwrap();
    for p in r["versus_reference"].as_array().unwrap() {
        assert_eq!(p["max_dv"][0], 0.0);
        assert_eq!(p["nrmse_lat"], 0.0);
        assert_eq!(p["nrmse_apd"], 0.0);
    }
}

#[test]
fn reduced_recipe_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "run",
        "-c",
        recipe("reduced_sheet.toml").to_str().unwrap(),
        "--output-dir",
        tmp.path().to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("probe node 1300"), "{stdout}");
}

#[test]
fn cell_tools() {
    let o = run(&["cell", "list"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("ord_epi"));
    let o = run(&["cell", "dt0", "--model", "aliev_panfilov", "--duration", "400"]);
    assert!(o.status.success());
    let o = run(&["cell", "dt0", "--model", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t.csv");
    let o = run(&["cell", "trace", "--model", "aliev_panfilov", "--duration", "20", "--states", "w", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(out).unwrap();
    assert!(text.starts_with("t,V,w\n"));
    assert_eq!(text.lines().count(), 202);
}

#[test]
fn hidden_oracle_linear_convergence() {
    let o = run(&["oracle", "linear-convergence", "--integrator", "exact", "--dt", "0.8", "--levels", "3"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let orders: Vec<f64> = text.lines().skip(2).map(|l| l.split_whitespace().last().unwrap().parse().unwrap()).collect();
    assert_eq!(orders.len(), 2);
    assert!(orders.iter().all(|o| (1.9..=2.1).contains(o)), "{text}");
    let help = run(&["--help"]);
    assert!(!String::from_utf8_lossy(&help.stdout).contains("oracle"));
}
