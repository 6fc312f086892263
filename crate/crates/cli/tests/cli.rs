use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slm_core::imaging::{excess_kurtosis, read_pgm};

fn slm(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_slm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run slm");
    assert!(
        out.status.success(),
        "slm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn slm_err(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_slm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run slm");
    assert!(!out.status.success(), "slm {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Data rows of a schema-1 CSV as string fields, header excluded.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema=1"));
    lines.next().expect("header");
    lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn field(rows: &[Vec<String>], col: usize) -> Vec<f64> {
    rows.iter().map(|r| r[col].parse().unwrap()).collect()
}

fn truth_norm(side: usize) -> f64 {
    let img = slm_core::imaging::phantom(side, 0);
    img.pixels.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn synth_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = PathBuf::from(
        String::from_utf8(
            slm(
                d,
                &[
                    "synth", "phantom", "--side", "32", "--seed", "4", "--out", "a",
                ],
            )
            .stdout,
        )
        .unwrap()
        .trim(),
    );
    let b = PathBuf::from(
        String::from_utf8(
            slm(
                d,
                &[
                    "synth", "phantom", "--side", "32", "--seed", "4", "--out", "b",
                ],
            )
            .stdout,
        )
        .unwrap()
        .trim(),
    );
    assert_eq!(fs::read(d.join(&a)).unwrap(), fs::read(d.join(&b)).unwrap());

    let img = read_pgm(&d.join(&a)).unwrap();
    let mut levels: Vec<u8> = img.to_bytes();
    levels.sort_unstable();
    levels.dedup();
    assert!(levels.len() >= 2);

    let s = PathBuf::from(
        String::from_utf8(slm(d, &["synth", "smooth-edges", "--side", "32", "--out", "c"]).stdout)
            .unwrap()
            .trim(),
    );
    let img = read_pgm(&d.join(s)).unwrap();
    let diffs: Vec<f64> = (0..32)
        .flat_map(|r| (0..31).map(move |c| (r, c)))
        .map(|(r, c)| img.pixels[r * 32 + c + 1] - img.pixels[r * 32 + c])
        .collect();
    assert!(excess_kurtosis(&diffs) > 0.0);
}

#[test]
fn full_noiseless_design_reconstructs_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let all: Vec<String> = (0..8).map(|c| c.to_string()).collect();
    // simulated noise of norm sigma sqrt(n) must stay below the tolerance
    slm(
        dir.path(),
        &[
            "reconstruct",
            "--side",
            "8",
            "--columns",
            &all.join(","),
            "--sigma2",
            "1e-14",
            "--out",
            "r",
        ],
    );
    let rows = csv_rows(&dir.path().join("r/reconstruct.csv"));
    assert!(field(&rows, 2)[0] <= 1e-6 * truth_norm(8), "{rows:?}");
}

#[test]
fn zero_measurements_give_the_prior_mode() {
    let dir = tempfile::tempdir().unwrap();
    slm(
        dir.path(),
        &["reconstruct", "--side", "8", "--columns", "", "--out", "r"],
    );
    let img = read_pgm(&dir.path().join("r/reconstruction.pgm")).unwrap();
    assert!(img.pixels.iter().all(|v| *v == 0.0));
    let rows = csv_rows(&dir.path().join("r/reconstruct.csv"));
    assert!((field(&rows, 2)[0] - truth_norm(8)).abs() <= 1e-12 * truth_norm(8));
}

#[test]
fn map_beats_zero_filling_at_half_the_columns() {
    let dir = tempfile::tempdir().unwrap();
    slm(
        dir.path(),
        &["reconstruct", "--side", "32", "--count", "16", "--out", "r"],
    );
    let rows = csv_rows(&dir.path().join("r/reconstruct.csv"));
    let (map, zero_filled) = (field(&rows, 2)[0], field(&rows, 4)[0]);
    assert!(map < zero_filled, "MAP {map} vs zero-filled {zero_filled}");
}

#[test]
fn infer_descends_and_repeats_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(
        &cfg,
        "# 16x16 comparison\nside = 16\nimage = smooth_edges\ncompare = true\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    slm(
        d,
        &["infer", "--config", cfg, "--seed", "5", "--out", "one"],
    );
    slm(
        d,
        &["infer", "--config", cfg, "--seed", "5", "--out", "two"],
    );
    for name in ["infer.csv", "infer_summary.csv", "infer_compare.csv"] {
        assert_eq!(
            fs::read(d.join("one").join(name)).unwrap(),
            fs::read(d.join("two").join(name)).unwrap()
        );
    }
    let rows = csv_rows(&d.join("one/infer.csv"));
    for b in ["A", "B"] {
        let phi: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == b)
            .map(|r| r[2].parse().unwrap())
            .collect();
        assert!(
            phi.windows(2)
                .all(|w| w[1] <= w[0] + 1e-8 * (1.0 + w[0].abs())),
            "{b}: {phi:?}"
        );
    }
    // type A sits below type B from the second outer loop on
    let cmp = csv_rows(&d.join("one/infer_compare.csv"));
    for r in cmp
        .iter()
        .skip(2)
        .filter(|r| !r[1].is_empty() && !r[2].is_empty())
    {
        let (a, b): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!(a <= b, "outer {}: A {a} vs B {b}", r[0]);
    }
}

#[test]
fn designs_share_the_initial_error_and_honor_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| {
        [
            "design",
            "--side",
            "8",
            "--init",
            "2",
            "--count",
            "5",
            "--rd-seeds",
            "2",
            "--seed",
            "9",
            "--out",
            out,
        ]
    };
    slm(d, &args("one"));
    slm(d, &args("two"));
    let kinds = ["op", "ct", "eq", "rd", "rd_seed0", "rd_seed1"];
    let start: Vec<String> = kinds
        .iter()
        .map(|k| csv_rows(&d.join(format!("one/{k}.csv")))[0][4].clone())
        .collect();
    assert!(start.windows(2).all(|w| w[0] == w[1]), "{start:?}");
    for k in kinds {
        let strip = |dir: &str| -> Vec<Vec<String>> {
            csv_rows(&d.join(format!("{dir}/{k}.csv")))
                .into_iter()
                .map(|mut r| {
                    r.pop(); // wall time
                    r
                })
                .collect()
        };
        let rows = strip("one");
        assert_eq!(rows.len(), 4);
        assert_eq!(rows, strip("two"));
    }
    let op = csv_rows(&d.join("one/op.csv"));
    let picked: Vec<usize> = op[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(picked.iter().all(|c| *c < 8 && ![3, 4].contains(c)));
    for k in ["op", "ct", "eq", "rd"] {
        assert!(d.join(format!("one/design_{k}.pgm")).exists());
    }
}

#[test]
fn errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(slm_err(d, &["reconstruct", "--image", "missing.pgm"]).contains("missing.pgm"));
    fs::write(d.join("bad.pgm"), "P7\n").unwrap();
    assert!(slm_err(d, &["reconstruct", "--side", "8", "--image", "bad.pgm"]).contains("bad.pgm"));
    fs::write(d.join("typo.cfg"), "sides = 8\n").unwrap();
    assert!(slm_err(d, &["infer", "--config", "typo.cfg"]).contains("unknown key"));
    assert!(slm_err(d, &["infer", "--variance", "lanczos"]).contains("lanczos:K"));
}
