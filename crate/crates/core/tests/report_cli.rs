use std::fs;
use std::path::Path;
use std::process::Command;

use skcov::experiment::{run, ExperimentConfig, ExperimentReport, Kind};
use skcov::mcmc::ChainConfig;
use skcov::report::{
    read_report, report_json, write_report, InstanceDump, CSV_HEADER, REPORT_JSON, TABLE_CSV,
};
use skcov::{Couplings, Error};

fn without_clock(mut r: ExperimentReport) -> String {
    r.wall_clock_secs = 0.0;
    r.config.out = None;
    report_json(&r).unwrap()
}

fn skcov() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skcov"))
}

#[test]
fn json_round_trip_and_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new(Kind::OpnormSweep, vec![4, 6, 7], vec![0.3, 1.2], 6);
    let report = run(&cfg).unwrap();
    let (json, csv) = write_report(&report, dir.path()).unwrap();
    assert_eq!(read_report(&json).unwrap(), report);

    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // three statistics per grid point
    assert_eq!(rows.len(), 3 * 2 * 3);
    for row in &rows {
        assert_eq!(row.len(), 9);
        assert_eq!(row[0], "opnorm-sweep");
        assert_eq!(row[4], "6");
    }
    // the high-temperature lower bound is the opnorm predictor below beta = 1 only
    let pred = |beta: &str| {
        rows.iter()
            .find(|r| r[2] == beta && r[3] == "opnorm")
            .unwrap()[7]
    };
    assert!(!pred("0.3").is_empty());
    assert!(pred("1.2").is_empty());
}

#[test]
fn rerun_is_identical_apart_from_timing() {
    let cfg = ExperimentConfig::new(Kind::Identities, vec![5, 7], vec![0.5], 12).with_seed(3);
    assert_eq!(
        without_clock(run(&cfg).unwrap()),
        without_clock(run(&cfg).unwrap())
    );

    let chain = ChainConfig::new(2_000, 0);
    let cfg = ExperimentConfig::new(Kind::OpnormSweep, vec![6], vec![0.4], 4).with_chain(chain);
    assert_eq!(
        without_clock(run(&cfg).unwrap()),
        without_clock(run(&cfg).unwrap())
    );

    let other = ExperimentConfig::new(Kind::Identities, vec![5, 7], vec![0.5], 12).with_seed(4);
    let base = ExperimentConfig::new(Kind::Identities, vec![5, 7], vec![0.5], 12).with_seed(3);
    assert_ne!(run(&base).unwrap().rows, run(&other).unwrap().rows);
}

#[test]
fn rows_sorted_by_grid_then_statistic() {
    let cfg = ExperimentConfig::new(Kind::ResidualSweep, vec![6, 4], vec![0.7, 0.2], 3);
    let report = run(&cfg).unwrap();
    let keys: Vec<(usize, f64, String)> = report
        .rows
        .iter()
        .map(|r| (r.n, r.beta, r.statistic.clone()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    for r in &report.rows {
        assert!(
            report.definitions.contains_key(&r.statistic),
            "{}",
            r.statistic
        );
    }
}

#[test]
fn instance_dumps_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(Kind::ResidualSweep, vec![5], vec![0.5], 3);
    cfg.out = Some(dir.path().to_path_buf());
    cfg.dump_instances = 2;
    run(&cfg).unwrap();
    let inst = dir.path().join("instances");
    let bytes = fs::read(inst.join("n5_k1.bin")).unwrap();
    let c = Couplings::from_bytes(&bytes).unwrap();
    let dump: InstanceDump =
        serde_json::from_str(&fs::read_to_string(inst.join("n5_beta0.5_k1.json")).unwrap())
            .unwrap();
    assert_eq!(dump.instance, 1);
    assert_eq!(skcov::sample_couplings(5, dump.seed).unwrap(), c);
    let again = skcov::exact_summary(&c, 0.5, true).unwrap();
    assert_eq!(dump.exact, again.export());
    assert!(!inst.join("n5_k2.bin").exists());
}

#[test]
fn write_into_a_file_path_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("occupied");
    fs::write(&blocker, "x").unwrap();
    let report = run(&ExperimentConfig::new(
        Kind::DerivCheck,
        vec![4],
        vec![0.5],
        2,
    ))
    .unwrap();
    match write_report(&report, &blocker) {
        Err(Error::Io { path, .. }) => assert_eq!(path, blocker),
        other => panic!("expected an I/O error, got {other:?}"),
    }
}

fn read_json(dir: &Path) -> ExperimentReport {
    read_report(&dir.join(REPORT_JSON)).unwrap()
}

#[test]
fn cli_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pass");
    let status = skcov()
        .args([
            "deriv-check",
            "--n-list",
            "5",
            "--beta-list",
            "0.4,0.9",
            "--samples",
            "4",
            "--seed",
            "11",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join(TABLE_CSV).exists());
    let r = read_json(&out);
    assert_eq!(r.config.seed, 11);
    assert_eq!(r.checks.len(), 2);

    // A failing threshold from a config file gives exit code 1.
    let cfg_path = dir.path().join("cfg.json");
    fs::write(
        &cfg_path,
        r#"{"kind":"opnorm-sweep","n_list":[3,6],"beta_list":[0.5],"samples":5,
            "thresholds":{"opnorm_variation":1e-9}}"#,
    )
    .unwrap();
    let fail = dir.path().join("fail");
    let status = skcov()
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&fail)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    assert!(!read_json(&fail).all_passed);

    // Flags override the file.
    let over = dir.path().join("over");
    let status = skcov()
        .arg("--config")
        .arg(&cfg_path)
        .args(["--samples", "3", "--n-list", "4"])
        .arg("--out")
        .arg(&over)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let r = read_json(&over);
    assert_eq!(r.config.samples, 3);
    assert_eq!(r.config.n_list, vec![4]);

    // Invalid configurations exit with 2.
    let status = skcov()
        .args(["residual-sweep", "--n-list", "4", "--samples", "1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = skcov()
        .args(["identities", "--n-list", "15", "--samples", "3"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn cli_mcmc_flags_and_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = skcov()
            .env("SKCOV_THREADS", threads)
            .args([
                "critical-scan",
                "--engine",
                "mcmc",
                "--n-list",
                "6",
                "--beta-list",
                "0.6,1.4",
                "--samples",
                "3",
                "--sweeps",
                "2000",
                "--replicas",
                "4",
                "--ladder",
                "0.7,1.0,1.4",
            ])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.code() == Some(0) || status.code() == Some(1));
        let r = read_json(&out);
        let chain = r.config.chain.as_ref().unwrap();
        assert_eq!(
            (chain.sweeps, chain.burn_in_sweeps, chain.replicas),
            (2_000, 200, 4)
        );
        assert_eq!(chain.ladder.as_deref(), Some(&[0.7, 1.0, 1.4][..]));
        outputs.push(without_clock(r));
    }
    assert_eq!(outputs[0], outputs[1]);
}
