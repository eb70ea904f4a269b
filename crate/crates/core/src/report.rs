//! Report files: `report.json` holds the full report, `table.csv` one line
//! per row with columns `kind,n,beta,statistic,count,mean,stderr,predictor,z_or_flag`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::disorder::{interaction_matrix, sample_couplings};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, ExperimentReport};
use crate::gibbs::{exact_summary, ExactSummaryExport, FOUR_POINT_CAP};
use crate::observables::{tap_report, TapReport};
use crate::stats::derive_seed;

pub const REPORT_JSON: &str = "report.json";
pub const TABLE_CSV: &str = "table.csv";
pub const INSTANCE_DIR: &str = "instances";
pub const CSV_HEADER: &str = "kind,n,beta,statistic,count,mean,stderr,predictor,z_or_flag";

pub fn table_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let kind = report.config.kind.name();
    for r in &report.rows {
        let predictor = r.predictor.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{kind},{},{},{},{},{},{},{predictor},{}",
            r.n,
            r.beta,
            r.statistic,
            r.stat.count,
            r.stat.mean,
            r.stat.stderr(),
            r.z_or_flag.as_deref().unwrap_or("")
        )
        .expect("write to String");
    }
    out
}

pub fn report_json(report: &ExperimentReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.to_path_buf();
    move |source| Error::Io { path, source }
}

/// Writes both files into `dir`, creating it if needed.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let json = dir.join(REPORT_JSON);
    fs::write(&json, report_json(report)?).map_err(io(&json))?;
    let csv = dir.join(TABLE_CSV);
    fs::write(&csv, table_csv(report)).map_err(io(&csv))?;
    Ok((json, csv))
}

/// One exact-engine instance as written by [`write_instance_dumps`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDump {
    pub instance: usize,
    pub seed: u64,
    pub exact: ExactSummaryExport,
    pub tap: TapReport,
}

/// Writes `instances/n{n}_k{k}.bin` (coupling dump) and
/// `instances/n{n}_beta{beta}_k{k}.json` for the first `dump_instances`
/// instances of every grid point. Four-point moments are included up to the
/// four-point cap.
pub fn write_instance_dumps(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = dir.join(INSTANCE_DIR);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut written = Vec::new();
    let count = cfg.dump_instances.min(cfg.samples);
    for &n in &cfg.n_list {
        for k in 0..count {
            let seed = derive_seed(cfg.seed, &[("instance", k as u64)]);
            let c = sample_couplings(n, seed)?;
            let bin = dir.join(format!("n{n}_k{k}.bin"));
            fs::write(&bin, c.to_bytes()).map_err(io(&bin))?;
            written.push(bin);
            for &beta in &cfg.beta_list {
                let s = exact_summary(&c, beta, n <= FOUR_POINT_CAP)?;
                let dump = InstanceDump {
                    instance: k,
                    seed,
                    exact: s.export(),
                    tap: tap_report(&s.c, &interaction_matrix(&c), beta)?,
                };
                let path = dir.join(format!("n{n}_beta{beta}_k{k}.json"));
                fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(io(&path))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    Ok(serde_json::from_str(&text)?)
}
