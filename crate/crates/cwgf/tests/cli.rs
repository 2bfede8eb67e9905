use std::fs;
use std::path::Path;
use std::process::Command;

fn cwgf(args: &[&str], threads: &str) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cwgf"))
        .args(args)
        .env("CWGF_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

#[test]
fn deblur_config_writes_sixteen_rows_and_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("gaussian_deblur.cfg");
    let out = tmp.path().join("out");
    let o = cwgf(&["run", cfg.to_str().unwrap(), out.to_str().unwrap()], "1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 17);
    for f in [
        "summary.txt",
        "truth.pgm",
        "estimate.pgm",
        "observation.pgm",
        "particles.pgm",
        "particles.csv",
        "prompt.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let pgm = fs::read(out.join("truth.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("ablation_timestep.cfg");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(cwgf(
        &["run", cfg.to_str().unwrap(), a.to_str().unwrap(), "--trace"],
        "1"
    )
    .status
    .success());
    assert!(cwgf(
        &["run", cfg.to_str().unwrap(), b.to_str().unwrap(), "--trace"],
        "3"
    )
    .status
    .success());
    let fa = files(&a);
    assert!(fa.iter().any(|(n, _)| n.ends_with("trajectory.csv")));
    assert_eq!(fa, files(&b));
}

#[test]
fn malformed_config_exits_two_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "bad.cfg",
        "[experiment]\nkind = \"gaussian\"\n[solver]\nparticels = 4\n",
    );
    let o = cwgf(&["run", &cfg, tmp.path().join("o").to_str().unwrap()], "1");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("particels") && err.contains("line 4"), "{err}");

    let cfg = config(
        tmp.path(),
        "range.cfg",
        "[experiment]\nkind = \"gaussian\"\n[solver]\nsigma_y = -1.0\n",
    );
    assert_eq!(
        cwgf(&["run", &cfg, tmp.path().join("o").to_str().unwrap()], "1")
            .status
            .code(),
        Some(2)
    );
    let o = cwgf(&["run"], "1");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_blowup_exits_three_with_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "blow.cfg",
        "[experiment]\nkind = \"gaussian\"\n[solver]\neta_r = 1e300\neta_l = 1e300\n[gaussian]\nprompt_offset = 1e300\n",
    );
    let o = cwgf(&["run", &cfg, tmp.path().join("o").to_str().unwrap()], "1");
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("iteration"), "{err}");
}

#[test]
fn sweep_flag_emits_one_report_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("gaussian_inpaint.cfg");
    let out = tmp.path().join("s");
    let o = cwgf(
        &[
            "run",
            cfg.to_str().unwrap(),
            out.to_str().unwrap(),
            "--sweep",
            "solver.plan=cyclic,decreasing,uniform",
            "--seed",
            "9",
        ],
        "2",
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["cyclic", "decreasing", "uniform"] {
        assert!(out.join(format!("plan_{mode}")).join("report.csv").exists());
    }
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert!(sweep.contains("problem_seed"));
}

#[test]
fn gmm_inpaint_emits_both_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        "gmm.cfg",
        "[experiment]\nkind = \"gmm_inpaint\"\n[solver]\niterations = 4\nparticles = 32\neta_c = 0.0\nsigma_dec = 0.6\nbase_set = [999, 500, 100, 1]\ninit = \"standard\"\n[gmm]\nruns = 16\nflow_steps = 50\n",
    );
    let out = tmp.path().join("g");
    let o = cwgf(&["run", &cfg, out.to_str().unwrap()], "4");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["histogram_joint.csv", "histogram_independent.csv"] {
        let h = fs::read_to_string(out.join(name)).unwrap();
        let total: usize = h
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, if name.contains("joint") { 32 } else { 16 });
    }
}
