//! Result files: sweep CSV, per-slot ledger lines, channel tables and the
//! run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrialConfig;
use crate::error::{Error, Result};
use crate::experiment::{Estimate, SweepSummary};
use crate::protocol::{DeliveryLedger, LinkSample, ReleaseEvent};

/// Column order of `sweep.csv`.
pub const SWEEP_COLUMNS: [&str; 12] = [
    "eta",
    "mean_K0",
    "mean_K1",
    "mean_total_links",
    "mean_relay_links",
    "mean_H_k0_S",
    "mean_H_k0_k1",
    "mean_H_k1_S",
    "mean_Ntot",
    "se_Ntot",
    "baseline_Ntot",
    "gain_pct",
];

pub const SX_TABLE_COLUMNS: [&str; 6] = ["dgn", "center_distance_um", "window", "t_end_s", "cdf", "h"];
pub const MX_TABLE_COLUMNS: [&str; 5] = ["source", "receiver", "window", "h", "se"];

/// Files written by one command, removed again unless the command commits.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            committed: false,
        })
    }

    /// Registers `name` inside the output directory and returns its path.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.files.push(path.clone());
        path
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, e.into())
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(e: &Option<Estimate>) -> String {
    e.map_or_else(String::new, |e| fixed(e.mean))
}

/// Rows of `sweep.csv` as formatted strings. Undefined CIR means (an empty
/// cluster in every trial) are left blank.
pub fn sweep_records(summary: &SweepSummary) -> Vec<Vec<String>> {
    summary
        .rows
        .iter()
        .map(|r| {
            let k = |c: usize| r.cluster_sizes.get(c).map_or(0.0, |e| e.mean);
            vec![
                format!("{}", r.eta),
                fixed(k(0)),
                fixed(k(1)),
                fixed(r.total_links.mean),
                fixed(r.relay_links.mean),
                opt(&r.h_first_to_tissue),
                opt(&r.h_first_to_next),
                opt(&r.h_last_to_tissue),
                fixed(r.n_tot.mean),
                fixed(r.n_tot.se),
                fixed(summary.baseline.mean),
                format!("{:.4}", r.gain_pct),
            ]
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SWEEP_COLUMNS).map_err(|e| csv_err(path, e))?;
    for rec in sweep_records(summary) {
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of `ledger.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotLine {
    pub slot: u32,
    pub releases: Vec<ReleaseEvent>,
    /// Link samples landing in this slot.
    pub arrivals: Vec<LinkSample>,
    pub dgn_absorbed: Vec<u64>,
    pub tissue_absorbed: u64,
    pub tissue_cumulative: u64,
}

pub fn slot_lines(ledger: &DeliveryLedger) -> Vec<SlotLine> {
    ledger
        .slots
        .iter()
        .map(|s| SlotLine {
            slot: s.slot,
            releases: ledger.releases.iter().filter(|r| r.slot == s.slot).cloned().collect(),
            arrivals: ledger
                .samples
                .iter()
                .filter(|x| x.arrival_slot() == s.slot)
                .cloned()
                .collect(),
            dgn_absorbed: s.dgn_absorbed.clone(),
            tissue_absorbed: s.tissue_absorbed,
            tissue_cumulative: s.tissue_cumulative,
        })
        .collect()
}

pub fn write_ledger_jsonl(path: &Path, ledger: &DeliveryLedger) -> Result<()> {
    let mut w = create(path)?;
    for line in slot_lines(ledger) {
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub master_seed: u64,
    pub runtime_seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub config: TrialConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrialConfig, runtime_seconds: f64, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.master_seed,
            runtime_seconds,
            outputs,
            config: config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_header_golden() {
        assert_eq!(
            SWEEP_COLUMNS.join(","),
            "eta,mean_K0,mean_K1,mean_total_links,mean_relay_links,mean_H_k0_S,mean_H_k0_k1,mean_H_k1_S,mean_Ntot,se_Ntot,baseline_Ntot,gain_pct"
        );
    }

    #[test]
    fn outputs_removed_unless_committed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut out = Outputs::create(dir.path()).unwrap();
            let p = out.file("a.txt");
            fs::write(&p, "x").unwrap();
        }
        assert!(!dir.path().join("a.txt").exists());
        let mut out = Outputs::create(dir.path()).unwrap();
        let p = out.file("b.txt");
        fs::write(&p, "x").unwrap();
        assert_eq!(out.commit(), vec![p.clone()]);
        assert!(p.exists());
    }

    #[test]
    fn unwritable_path_named() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing").join("x.csv");
        let err = write_csv(&bad, &["a"], &[]).unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
    }
}
