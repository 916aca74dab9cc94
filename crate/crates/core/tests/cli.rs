use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qmrisr::metrics::MetricReport;

const BIN: &str = env!("CARGO_BIN_EXE_qmrisr");

fn qmrisr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "[phantom]\nsize=32\n\n[solver]\nmax_iters=5\n";

fn phantom_into(dir: &Path, config: &Path) {
    let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--quiet", "phantom"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn qmap_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "qmap"))
        .count()
}

#[test]
fn phantom_writes_all_maps_into_new_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.cfg", SMALL);
    let out_dir = tmp.path().join("nested/run");
    let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "phantom"]);
    assert!(out.status.success());
    assert_eq!(qmap_count(&out_dir), 21);
    let manifest = String::from_utf8(out.stdout).unwrap();
    assert_eq!(manifest.lines().count(), 21);
    for name in ["pd", "t1", "t2", "c_lr_00", "c_lr_11", "mask", "guide_t1w", "guide_t2w", "ql_pd", "ql_t2"] {
        assert!(out_dir.join(format!("{name}.qmap")).exists(), "{name}");
        assert!(out_dir.join(format!("{name}.qhdr")).exists(), "{name}");
    }
}

#[test]
fn invalid_guide_subset_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.cfg", "[sr]\nguides=t3w\n");
    let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "superres"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sr.guides"));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qmrisr(&["--out", tmp.path().to_str().unwrap(), "--quiet", "superres"]);
    assert_eq!(out.status.code(), Some(1));
    let out = qmrisr(&["rank", "missing_a.tsv", "missing_b.tsv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unweighted_guide_column_when_alpha_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.cfg", &format!("{SMALL}\n[sr]\nalpha=0\n"));
    phantom_into(tmp.path(), &config);
    let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--quiet", "superres"]);
    assert!(out.status.success());
    let log = fs::read_to_string(tmp.path().join("convergence.tsv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("iter\tdata_loss\tguide_loss\ttotal"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split('\t').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert!(rows.len() > 1);
    let last = rows.last().unwrap();
    assert_eq!(last[3], last[1]);
    assert!(last[2] > 0.0);
    for w in rows.windows(2) {
        assert!(w[1][3] <= w[0][3]);
    }
}

#[test]
fn guide_subsets_yield_different_reports_and_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let base = write_config(tmp.path(), "base.cfg", SMALL);
    phantom_into(&data, &base);
    let mut reports = Vec::new();
    for subset in ["t1w", "both"] {
        let run = tmp.path().join(subset);
        let config = write_config(
            tmp.path(),
            &format!("{subset}.cfg"),
            &format!("{SMALL}\n[paths]\ndata={}\n\n[sr]\nguides={subset}\n\n[evaluate]\nmodel={subset}\n", data.display()),
        );
        for cmd in ["superres", "evaluate"] {
            let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", run.to_str().unwrap(), "--quiet", cmd]);
            assert!(out.status.success(), "{subset} {cmd}: {}", String::from_utf8_lossy(&out.stderr));
        }
        reports.push(run.join("report.tsv"));
    }
    let parsed: Vec<MetricReport> = reports
        .iter()
        .map(|p| MetricReport::from_tsv(&fs::read_to_string(p).unwrap()).unwrap())
        .collect();
    assert_eq!(parsed[0].rows.len(), 4);
    assert_eq!(parsed[0].rows[3].map, "flair");
    assert_ne!(parsed[0].rows[..3], parsed[1].rows[..3]);

    let out = qmrisr(&["rank", reports[0].to_str().unwrap(), reports[1].to_str().unwrap()]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "rank\tmodel\ttotal");
    assert_eq!(lines.len(), 3);
}

#[test]
fn ground_truth_copy_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.cfg", SMALL);
    phantom_into(tmp.path(), &config);
    for (from, to) in [("pd", "sr_pd"), ("t1", "sr_t1"), ("t2", "sr_t2")] {
        for ext in ["qmap", "qhdr"] {
            fs::copy(tmp.path().join(format!("{from}.{ext}")), tmp.path().join(format!("{to}.{ext}"))).unwrap();
        }
    }
    let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "evaluate"]);
    assert!(out.status.success());
    let report = MetricReport::from_tsv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert_eq!(row.ssim, 1.0, "{}", row.map);
        assert_eq!(row.hfen, 0.0, "{}", row.map);
        assert!(row.baseline_ssim < 1.0 && row.baseline_hfen > 0.0);
    }
}

#[test]
fn seed_flag_changes_the_phantom() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.cfg", SMALL);
    let mut payloads = Vec::new();
    for seed in ["3", "4"] {
        let dir = tmp.path().join(seed);
        let out = qmrisr(&["--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", seed, "--quiet", "phantom"]);
        assert!(out.status.success());
        payloads.push(fs::read(dir.join("c_lr_00.qmap")).unwrap());
    }
    assert_ne!(payloads[0], payloads[1]);
}
