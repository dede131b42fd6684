//! Run directory layout:
//!
//! - `config.json`: the full run configuration
//! - `report.json`, `report.csv`: aggregate figures
//! - `episodes.jsonl`: one episode result per line, in stream order
//! - `timings.jsonl`: wall time per episode (kept apart so the episode
//!   file is reproducible byte for byte)
//! - `ece_bins.csv`: per-bin calibration data
//! - `resources.json`: parameter counts, tape size and timing

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StreamOutput, TttConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub dataset: String,
    pub seed: u64,
    pub top1: f64,
    pub ece: f64,
    pub mean_mem_loss: Option<f64>,
    pub mean_mae_loss: Option<f64>,
    pub trainable_params: usize,
    pub median_episode_ms: f64,
}

const CSV_HEADER: &str = "mode,dataset,seed,top1,ece,mean_mem_loss,mean_mae_loss,trainable_params,median_episode_ms";

impl RunReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.dataset,
            self.seed,
            self.top1,
            self.ece,
            opt(self.mean_mem_loss),
            opt(self.mean_mae_loss),
            self.trainable_params,
            self.median_episode_ms
        )
    }
}

fn csv(reports: &[RunReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_run(dir: &Path, config: &TttConfig, out: &StreamOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)? + "\n")?;
    fs::write(dir.join("report.csv"), csv(std::slice::from_ref(&out.report)))?;
    fs::write(dir.join("resources.json"), serde_json::to_string_pretty(&out.resources)? + "\n")?;

    let mut episodes = BufWriter::new(fs::File::create(dir.join("episodes.jsonl"))?);
    let mut timings = String::new();
    for e in &out.episodes {
        serde_json::to_writer(&mut episodes, e)?;
        episodes.write_all(b"\n")?;
        writeln!(timings, "{{\"id\":{},\"wall_ms\":{}}}", serde_json::to_string(&e.id)?, e.wall_ms).unwrap();
    }
    episodes.flush()?;
    fs::write(dir.join("timings.jsonl"), timings)?;

    let mut bins = String::from("bin,upper,count,confidence,accuracy\n");
    for (i, b) in out.ece.bins.iter().enumerate() {
        writeln!(bins, "{},{},{},{},{}", i + 1, b.upper, b.count, b.confidence, b.accuracy).unwrap();
    }
    fs::write(dir.join("ece_bins.csv"), bins)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Concatenates the `report.json` of each run directory into one CSV.
pub fn merge_reports(dirs: &[&Path]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::invalid("no run directories given"));
    }
    let reports = dirs
        .iter()
        .map(|d| read_report(&d.join("report.json")))
        .collect::<Result<Vec<_>>>()?;
    Ok(csv(&reports))
}
