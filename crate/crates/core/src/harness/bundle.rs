//! On-disk result bundles and run summaries.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackKind;
use crate::error::{Error, Result};
use crate::federation::{Metric, RoundMetrics, RoundRecord};

use super::config::{Approach, ExperimentConfig};
use super::runner::{RunOutput, RunRow, RunStatus, RunTiming};

/// Environment variable naming the directory that receives result bundles.
pub const RESULTS_DIR_ENV: &str = "FEDIOT_RESULTS_DIR";

pub fn results_dir() -> PathBuf {
    std::env::var_os(RESULTS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Experiment,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub kind: BundleKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_values: Option<Vec<usize>>,
    pub runs: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        Some(Stats {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeStats {
    pub accuracy: Stats,
    pub tpr: Stats,
    pub tnr: Stats,
    pub f1: Stats,
}

impl ScopeStats {
    fn of(items: &[RoundMetrics]) -> Option<ScopeStats> {
        let pick = |m: Metric| Stats::of(&items.iter().map(|r| r.get(m)).collect::<Vec<_>>());
        Some(ScopeStats {
            accuracy: pick(Metric::Accuracy)?,
            tpr: pick(Metric::Tpr)?,
            tnr: pick(Metric::Tnr)?,
            f1: pick(Metric::F1)?,
        })
    }

    pub fn get(&self, metric: Metric) -> Stats {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Tpr => self.tpr,
            Metric::Tnr => self.tnr,
            Metric::F1 => self.f1,
        }
    }
}

/// Aggregate over all runs sharing an approach, attack and aggregation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub approach: Approach,
    pub attack: AttackKind,
    pub f: usize,
    pub aggregation: String,
    pub runs: usize,
    pub aborted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known: Option<ScopeStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_device: Option<ScopeStats>,
    pub transmissions_per_client: usize,
    pub local_steps_per_client: usize,
}

/// Group runs in order of first appearance; aborted runs are counted but
/// contribute no metric values.
pub fn summarize(runs: &[RunRow]) -> Vec<SummaryRow> {
    let key = |r: &RunRow| (r.approach, r.attack.kind, r.attack.f, r.aggregation.clone());
    let mut groups: Vec<(_, Vec<&RunRow>)> = Vec::new();
    for r in runs {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, rows)) => rows.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(k, rows)| {
            let done: Vec<&RunRow> = rows
                .iter()
                .copied()
                .filter(|r| r.status == RunStatus::Completed)
                .collect();
            let known: Vec<RoundMetrics> = done
                .iter()
                .filter_map(|r| r.evaluation.as_ref())
                .map(|e| e.known)
                .collect();
            let new: Vec<RoundMetrics> = done
                .iter()
                .filter_map(|r| r.evaluation.as_ref().and_then(|e| e.new_device))
                .collect();
            SummaryRow {
                approach: k.0,
                attack: k.1,
                f: k.2,
                aggregation: k.3.clone(),
                runs: rows.len(),
                aborted: rows.len() - done.len(),
                known: ScopeStats::of(&known),
                new_device: ScopeStats::of(&new),
                transmissions_per_client: rows
                    .iter()
                    .map(|r| r.transmissions_per_client)
                    .max()
                    .unwrap_or(0),
                local_steps_per_client: rows
                    .iter()
                    .map(|r| r.local_steps_per_client)
                    .max()
                    .unwrap_or(0),
            }
        })
        .collect()
}

/// A complete set of results: what was run and everything it produced.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub manifest: BundleManifest,
    pub config: ExperimentConfig,
    pub output: RunOutput,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            items.push(serde_json::from_str(&line)?);
        }
    }
    Ok(items)
}

impl ResultBundle {
    pub fn new(
        kind: BundleKind,
        config: ExperimentConfig,
        output: RunOutput,
        f_values: Option<Vec<usize>>,
    ) -> Self {
        let aborted = output
            .runs
            .iter()
            .filter(|r| r.status == RunStatus::Aborted)
            .count();
        ResultBundle {
            manifest: BundleManifest {
                kind,
                name: config.name.clone(),
                f_values,
                runs: output.runs.len(),
                aborted,
            },
            config,
            output,
        }
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.output.runs)
    }

    /// Write the bundle into `dir`, replacing a previous bundle there.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rounds_dir = dir.join("rounds");
        if rounds_dir.exists() {
            fs::remove_dir_all(&rounds_dir).map_err(|e| Error::io(&rounds_dir, e))?;
        }
        write_file(
            &dir.join("bundle.json"),
            &serde_json::to_vec_pretty(&self.manifest)?,
        )?;
        write_file(&dir.join("config.toml"), self.config.to_toml()?.as_bytes())?;
        write_file(&dir.join("runs.jsonl"), &jsonl(&self.output.runs)?)?;
        write_file(
            &dir.join("summary.json"),
            &serde_json::to_vec_pretty(&self.summary())?,
        )?;
        write_file(&dir.join("timing.jsonl"), &jsonl(&self.output.timings)?)?;
        if !self.output.rounds.is_empty() {
            fs::create_dir_all(&rounds_dir).map_err(|e| Error::io(&rounds_dir, e))?;
            for (key, records) in &self.output.rounds {
                let path = rounds_dir.join(format!("{key}.jsonl"));
                let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                file.write_all(&jsonl(records)?)
                    .map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<ResultBundle> {
        let manifest_path = dir.join("bundle.json");
        let manifest: BundleManifest = serde_json::from_slice(
            &fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )?;
        let config = ExperimentConfig::load(&dir.join("config.toml"))?;
        let runs: Vec<RunRow> = read_jsonl(&dir.join("runs.jsonl"))?;
        let timing_path = dir.join("timing.jsonl");
        let timings: Vec<RunTiming> = if timing_path.exists() {
            read_jsonl(&timing_path)?
        } else {
            Vec::new()
        };
        let mut rounds = Vec::new();
        let rounds_dir = dir.join("rounds");
        if rounds_dir.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&rounds_dir)
                .map_err(|e| Error::io(&rounds_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            for path in paths {
                let key = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_owned();
                let records: Vec<RoundRecord> = read_jsonl(&path)?;
                rounds.push((key, records));
            }
        }
        Ok(ResultBundle {
            manifest,
            config,
            output: RunOutput {
                runs,
                rounds,
                timings,
            },
        })
    }
}
