use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use homog_cli::config::ExperimentConfig;
use homog_cli::experiments::run_experiment;
use homog_cli::manifest::{Manifest, MANIFEST_FILE};
use homog_core::io::{field_to_string, read_cloud};
use homog_core::ScalarField;

fn homog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homog"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn xi_config(dir: &Path, seeds: &str, threads: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "master_seed": 11,
            "output_dir": {:?},
            "threads": {threads},
            "experiment": {{"kind": "xi-sweep", "sizes": [20, 40, 80], "seeds": {seeds}, "lambda": 3}}
        }}"#,
        dir.to_str().unwrap()
    ))
    .unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn xi_sweep_has_ninety_rows_and_is_thread_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_experiment(&xi_config(&tmp.path().join("a"), "10", 1)).unwrap();
    let b = run_experiment(&xi_config(&tmp.path().join("b"), "10", 4)).unwrap();
    let csv = tmp.path().join("a/xi.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("T,seed,xi_x,xi_y,m,m_normalized,residual,iters\n"));
    assert!(!text.contains('\r'));
    assert_eq!(data_lines(&csv).len(), 90);
    assert_eq!(a.files[0].rows, Some(90));
    assert!(a.failed_rows.is_empty());
    // identical content hashes regardless of the worker count
    assert_eq!(a.files, b.files);
}

#[test]
fn seed_subset_reproduces_rows() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&xi_config(&tmp.path().join("full"), "4", 2)).unwrap();
    run_experiment(&xi_config(&tmp.path().join("part"), "[1, 3]", 2)).unwrap();
    let full = data_lines(&tmp.path().join("full/xi.csv"));
    let part = data_lines(&tmp.path().join("part/xi.csv"));
    assert_eq!(part.len(), 18);
    for row in &part {
        assert!(full.contains(row), "row {row} missing from the full run");
    }
}

#[test]
fn unknown_config_field_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"master_seed": 1, "output_dir": "x", "experiment": {"kind": "percolation-sweep",
            "nx": 5, "ny": 5, "probabilities": [0.5], "seeds": 2, "maxflow": false}}"#,
    )
    .unwrap();
    let out = homog(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("maxflow"));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn run_report_and_concat_check_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("perc.json");
    std::fs::write(
        &cfg,
        r#"{"master_seed": 5, "output_dir": "unused", "experiment": {"kind": "percolation-sweep",
            "nx": 20, "ny": 20, "probabilities": [0.3, 0.9], "seeds": 3}}"#,
    )
    .unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    ok(homog(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir_a.to_str().unwrap(),
    ]));
    ok(homog(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir_b.to_str().unwrap(),
        "--seed",
        "6",
        "--threads",
        "1",
    ]));
    let ma = dir_a.join(MANIFEST_FILE);
    let mb = dir_b.join(MANIFEST_FILE);

    let m = Manifest::load(&mb).unwrap();
    assert_eq!(m.config.master_seed, 6);
    assert_eq!(m.threads, 1);
    let rows = data_lines(&dir_a.join("percolation.csv"));
    assert_eq!(rows.len(), 6);
    let full_fields: Vec<&str> = rows.last().unwrap().split(',').collect();
    assert_eq!(full_fields[0], "9.0000000000000002e-1");

    let joined = tmp.path().join("joined.csv");
    let text = ok(homog(&[
        "report",
        ma.to_str().unwrap(),
        mb.to_str().unwrap(),
        "--concat",
        "percolation",
        "--out",
        joined.to_str().unwrap(),
    ]));
    assert!(text.contains("kind percolation-sweep"));
    let j = std::fs::read_to_string(&joined).unwrap();
    assert_eq!(j.lines().count(), 13);
    assert_eq!(j.lines().filter(|l| l.starts_with("p,")).count(), 1);

    // a table claiming a newer version of the same schema cannot be mixed in
    let bumped = std::fs::read_to_string(&mb)
        .unwrap()
        .replace("percolation/1", "percolation/2");
    std::fs::write(&mb, bumped).unwrap();
    let out = homog(&[
        "report",
        ma.to_str().unwrap(),
        mb.to_str().unwrap(),
        "--concat",
        "percolation",
        "--out",
        joined.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("percolation/2"));

    // edited content is caught by the hash check
    std::fs::write(dir_a.join("percolation.csv"), "p\n").unwrap();
    let out = homog(&["report", ma.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

fn sample(dir: &Path) -> PathBuf {
    let cloud = dir.join("cloud.txt");
    ok(homog(&[
        "sample",
        "--gamma",
        "2500",
        "--window",
        "0",
        "0",
        "1.5",
        "1.5",
        "--padding",
        "0.24",
        "--seed",
        "9",
        "--out",
        cloud.to_str().unwrap(),
    ]));
    cloud
}

fn quadratic_field(cloud: &Path, out: &Path) {
    let c = Arc::new(read_cloud(std::fs::read_to_string(cloud).unwrap().as_bytes()).unwrap());
    let u = ScalarField::from_fn(&c, |p| p.x * p.x - p.y);
    std::fs::write(out, field_to_string(&u)).unwrap();
}

#[test]
fn sample_grid_converge_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cloud = sample(tmp.path());
    let field = tmp.path().join("u.txt");
    quadratic_field(&cloud, &field);
    let grid = tmp.path().join("grid.json");
    ok(homog(&[
        "grid",
        "--cloud",
        cloud.to_str().unwrap(),
        "--eps",
        "0.02",
        "--t",
        "0.5",
        "--alpha",
        "0.1",
        "--lambda",
        "2",
        "--upsilon",
        "40",
        "--out",
        grid.to_str().unwrap(),
    ]));
    let g: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&grid).unwrap()).unwrap();
    assert_eq!(g["assembled"], true);
    for k in ["a", "b", "c", "d", "e", "f", "g"] {
        assert_eq!(g["validation"][k]["pass"], true, "property {k}");
    }
    let csv = ok(homog(&[
        "converge",
        "--cloud",
        cloud.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--t",
        "0.5",
        "--ref",
        "quadratic",
    ]));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("seed,eps,t,l2_grid,"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "9");
    let l2: f64 = row[3].parse().unwrap();
    assert!((0.0..1e-3).contains(&l2), "{l2}");

    let wrong_t = homog(&[
        "converge",
        "--cloud",
        cloud.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--t",
        "0.25",
        "--ref",
        "quadratic",
    ]);
    assert!(!wrong_t.status.success());
}

#[test]
fn energy_of_affine_field_is_positive_and_cell_reports_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cloud = sample(tmp.path());
    let field = tmp.path().join("u.txt");
    quadratic_field(&cloud, &field);
    let e: f64 = ok(homog(&[
        "energy",
        "--cloud",
        cloud.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
        "--region",
        "0",
        "0",
        "1",
        "1",
        "--radius",
        "0.04",
    ]))
    .trim()
    .parse()
    .unwrap();
    assert!(e > 0.0);
    let out = homog(&[
        "energy",
        "--cloud",
        cloud.to_str().unwrap(),
        "--field",
        field.to_str().unwrap(),
        "--region",
        "0",
        "0",
        "1.96",
        "1.96",
        "--radius",
        "0.04",
    ]);
    assert!(
        !out.status.success(),
        "region without padding must be refused"
    );

    let json = ok(homog(&[
        "cell",
        "--cloud",
        cloud.to_str().unwrap(),
        "--T",
        "0.5",
        "--lambda",
        "0.04",
        "--xi",
        "1",
        "0",
    ]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["converged"], true);
    assert!(v["solution"]["m"].as_f64().unwrap() > 0.0);
}

#[test]
fn other_experiment_kinds_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let cases = [
        (
            r#"{"kind": "lattice-oracle", "sizes": [24], "spacing": 1, "lambda": 1.5}"#,
            "lattice.csv",
            3,
        ),
        (
            r#"{"kind": "isotropy", "sizes": [16, 20], "seeds": 2, "lambda": 2}"#,
            "isotropy.csv",
            6,
        ),
        (
            r#"{"kind": "grid-success", "eps": 0.02, "t": 0.5, "upsilon": 40, "seeds": 2,
                "points": [{"alpha": 0.1, "lambda": 2}, {"alpha": 0.1, "lambda": 1.5}]}"#,
            "grid_success.csv",
            4,
        ),
        (
            r#"{"kind": "convergence", "eps": [0.02], "t": [0.5], "reference": {"kind": "quadratic"},
                "alpha": 0.1, "lambda": 2, "upsilon": 40, "seeds": 1}"#,
            "convergence.csv",
            1,
        ),
    ];
    for (k, (exp, file, rows)) in cases.into_iter().enumerate() {
        let out = format!("{dir}/{k}");
        let cfg = ExperimentConfig::from_json(&format!(
            r#"{{"master_seed": 3, "output_dir": {out:?}, "experiment": {exp}}}"#
        ))
        .unwrap();
        let m = run_experiment(&cfg).unwrap();
        let path = Path::new(&out).join(file);
        assert_eq!(data_lines(&path).len(), rows, "{file}");
        assert!(m.files.iter().any(|f| f.path == file));
        assert!(Manifest::load(&Path::new(&out).join(MANIFEST_FILE))
            .unwrap()
            .verify(&Path::new(&out).join(MANIFEST_FILE))
            .unwrap()
            .is_empty());
        if file == "lattice.csv" {
            for line in data_lines(&path) {
                let rel: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
                assert!(rel.abs() < 0.05, "{line}");
            }
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert_eq!(n, 6);
}
