//! Report files and their parsers.
//!
//! Each CSV opens with a `# config_hash=<hex>` line. Numbers are written in
//! shortest round-trip form, so parsing returns the exact in-memory values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vitsteer_core::steering::{Strategy, SweepRow};

use crate::artifacts::{check_hash, read_text, write_file, HASH_KEY};
use crate::error::{HarnessError, Result};
use crate::reference::Reference;

/// One line of `sweep.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub strategy: Strategy,
    pub alpha: f64,
    pub class: usize,
    pub accuracy_pct: f64,
    pub final_usage: f64,
    pub head_freq: Vec<f64>,
}

impl From<&SweepRow> for SweepRecord {
    fn from(r: &SweepRow) -> Self {
        Self {
            strategy: r.strategy,
            alpha: r.alpha,
            class: r.class,
            accuracy_pct: 100.0 * r.accuracy,
            final_usage: r.final_usage,
            head_freq: r.head_freq.clone(),
        }
    }
}

fn stamp(hash: &str) -> String {
    format!("# {HASH_KEY}={hash}\n")
}

/// Splits off and returns the hash line.
fn split_stamp<'a>(text: &'a str, path: &Path) -> Result<(&'a str, &'a str)> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let hash = first
        .strip_prefix("# ")
        .and_then(|l| l.strip_prefix(HASH_KEY))
        .and_then(|l| l.strip_prefix('='))
        .ok_or_else(|| HarnessError::parse(path, "missing config hash line"))?;
    Ok((hash.trim(), rest))
}

fn csv_text(hash: &str, header: Vec<String>, rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells");
    stamp(hash) + &body
}

fn parse_csv(text: &str, path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let (hash, body) = split_stamp(text, path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let bad = |e: csv::Error| HarnessError::parse(path, e.to_string());
    let header: Vec<String> = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(bad)?.iter().map(str::to_string).collect());
    }
    Ok((hash.to_string(), header, rows))
}

fn num(cell: &str, path: &Path) -> Result<f64> {
    cell.parse()
        .map_err(|_| HarnessError::parse(path, format!("not a number: {cell:?}")))
}

fn head_columns(heads: usize) -> Vec<String> {
    (0..heads).map(|h| format!("h{h}")).collect()
}

pub fn sweep_csv(hash: &str, heads: usize, rows: &[SweepRecord]) -> String {
    let mut header: Vec<String> = ["strategy", "alpha", "class", "accuracy_pct", "final_usage"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(head_columns(heads));
    let body = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.strategy.to_string(),
                r.alpha.to_string(),
                r.class.to_string(),
                r.accuracy_pct.to_string(),
                r.final_usage.to_string(),
            ];
            cells.extend(r.head_freq.iter().map(f64::to_string));
            cells
        })
        .collect();
    csv_text(hash, header, body)
}

/// Returns the embedded config hash and the rows.
pub fn parse_sweep_csv(text: &str, path: &Path) -> Result<(String, Vec<SweepRecord>)> {
    let (hash, header, rows) = parse_csv(text, path)?;
    if header.len() < 5 || header[..5] != ["strategy", "alpha", "class", "accuracy_pct", "final_usage"] {
        return Err(HarnessError::parse(path, format!("unexpected sweep header {header:?}")));
    }
    let mut out = Vec::with_capacity(rows.len());
    for cells in rows {
        if cells.len() != header.len() {
            return Err(HarnessError::parse(path, format!("row has {} cells, header {}", cells.len(), header.len())));
        }
        out.push(SweepRecord {
            strategy: cells[0].parse().map_err(|e: vitsteer_core::Error| HarnessError::parse(path, e.to_string()))?,
            alpha: num(&cells[1], path)?,
            class: cells[2]
                .parse()
                .map_err(|_| HarnessError::parse(path, format!("bad class {:?}", cells[2])))?,
            accuracy_pct: num(&cells[3], path)?,
            final_usage: num(&cells[4], path)?,
            head_freq: cells[5..].iter().map(|c| num(c, path)).collect::<Result<_>>()?,
        });
    }
    Ok((hash, out))
}

/// `C×H` matrix with one row per class.
pub fn head_freq_csv(hash: &str, names: &[String], freq: &[Vec<f64>]) -> String {
    let heads = freq.first().map_or(0, Vec::len);
    let mut header = vec!["class".to_string(), "name".to_string()];
    header.extend(head_columns(heads));
    let rows = freq
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let mut cells = vec![c.to_string(), names[c].clone()];
            cells.extend(row.iter().map(f64::to_string));
            cells
        })
        .collect();
    csv_text(hash, header, rows)
}

/// `C×C` matrix; the header names the columns' classes.
pub fn overlap_csv(hash: &str, names: &[String], overlap: &[Vec<f64>]) -> String {
    let mut header = vec!["class".to_string()];
    header.extend(names.iter().cloned());
    let rows = overlap
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let mut cells = vec![names[c].clone()];
            cells.extend(row.iter().map(f64::to_string));
            cells
        })
        .collect();
    csv_text(hash, header, rows)
}

/// Parses either matrix file into `(hash, row labels, values)`, skipping
/// `skip` leading label columns.
pub fn parse_matrix_csv(text: &str, path: &Path, skip: usize) -> Result<(String, Vec<String>, Vec<Vec<f64>>)> {
    let (hash, _, rows) = parse_csv(text, path)?;
    let mut labels = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for cells in rows {
        if cells.len() < skip {
            return Err(HarnessError::parse(path, "row shorter than its label columns"));
        }
        labels.push(cells[skip - 1].clone());
        values.push(cells[skip..].iter().map(|c| num(c, path)).collect::<Result<_>>()?);
    }
    Ok((hash, labels, values))
}

/// Written by the `train-vit` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config_hash: String,
    pub test_accuracy: f64,
    pub eval_usage_global: f64,
    pub eval_usage_final: f64,
    pub eval_usage_per_layer: Vec<f64>,
    pub loss_curve: Vec<f64>,
    pub accuracy_curve: Vec<f64>,
    pub soft_usage_curve: Vec<f64>,
    pub hard_usage_curve: Vec<f64>,
}

/// Written by the `train-sae` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub config_hash: String,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub loss_curve: Vec<f64>,
    pub dead_latents: usize,
    /// Largest `|‖column‖ − 1|` of the decoder.
    pub decoder_norm_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub accuracy_original_pct: f64,
    pub accuracy_reconstructed_pct: f64,
    pub usage_original: f64,
    pub usage_reconstructed: f64,
    pub delta_accuracy_pct: f64,
    pub delta_usage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub k_steer: usize,
    pub global_vs_per_class: f64,
    /// Over distinct class pairs.
    pub mean_pair: f64,
    pub max_pair: f64,
    pub max_pair_classes: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGain {
    pub class: usize,
    pub name: String,
    pub accuracy_base_pct: f64,
    pub accuracy_steered_pct: f64,
    pub gain_pct: f64,
    pub usage_base: f64,
    pub usage_steered: f64,
    /// Final-layer head on-frequencies under steering.
    pub head_freq: Vec<f64>,
}

/// Class-averaged sweep curve of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyCurve {
    pub strategy: String,
    pub alpha: Vec<f64>,
    pub accuracy_pct: Vec<f64>,
    pub final_usage: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config_hash: String,
    pub seed: u64,
    pub classes: Vec<String>,
    /// SHA-256 of each checkpoint file.
    pub checkpoints: BTreeMap<String, String>,
    pub training: TrainingSummary,
    pub sae: SaeSummary,
    pub ablation: AblationSummary,
    pub overlap: OverlapSummary,
    pub report_alpha: f64,
    /// Classes ranked by accuracy gain at `report_alpha` under per-class steering.
    pub top_gain: Vec<ClassGain>,
    pub curves: Vec<StrategyCurve>,
    pub reference: Reference,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialises") + "\n"
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::parse(path, e.to_string()))
}

/// Reads a JSON artifact and rejects it unless its `config_hash` matches.
pub fn read_stamped_json<T: for<'de> Deserialize<'de>>(path: &Path, hash: &str) -> Result<T> {
    let value: serde_json::Value = read_json(path)?;
    let found = value
        .get(HASH_KEY)
        .and_then(|v| v.as_str())
        .ok_or_else(|| HarnessError::parse(path, "missing config_hash"))?;
    check_hash(path, found, hash)?;
    serde_json::from_value(value).map_err(|e| HarnessError::parse(path, e.to_string()))
}

/// In-memory form of every report file.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub config_hash: String,
    pub sweep: Vec<SweepRecord>,
    pub head_freq: Vec<Vec<f64>>,
    pub overlap: Vec<Vec<f64>>,
    pub summary: ReportSummary,
}

impl ReportBundle {
    /// Loads the report files from `dir`, requiring all of them to carry
    /// `hash`.
    pub fn load(dir: &Path, hash: &str) -> Result<Self> {
        use crate::artifacts::{HEAD_FREQ_FILE, OVERLAP_FILE, REPORT_FILE, SWEEP_FILE};
        let sweep_path = dir.join(SWEEP_FILE);
        let (h, sweep) = parse_sweep_csv(&read_text(&sweep_path)?, &sweep_path)?;
        check_hash(&sweep_path, &h, hash)?;
        let hf_path = dir.join(HEAD_FREQ_FILE);
        let (h, _, head_freq) = parse_matrix_csv(&read_text(&hf_path)?, &hf_path, 2)?;
        check_hash(&hf_path, &h, hash)?;
        let ov_path = dir.join(OVERLAP_FILE);
        let (h, _, overlap) = parse_matrix_csv(&read_text(&ov_path)?, &ov_path, 1)?;
        check_hash(&ov_path, &h, hash)?;
        let summary = read_stamped_json(&dir.join(REPORT_FILE), hash)?;
        Ok(Self {
            config_hash: hash.to_string(),
            sweep,
            head_freq,
            overlap,
            summary,
        })
    }
}
