//! Markdown tables, plot-ready CSV and the communication-cost table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::adversary::AttackKind;
use crate::dataset::target_part_sizes;
use crate::error::{Error, Result};
use crate::federation::{Algorithm, Metric, RoundMetrics};
use crate::neuralnet::{checkpoint, ArchitectureSpec, Preset};

use super::bundle::{summarize, BundleKind, ResultBundle, Stats, SummaryRow};
use super::config::{Approach, DataSource, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Md,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!(
                "unknown report format `{other}` (expected md or csv)"
            ))),
        }
    }
}

/// Per-epoch batch count used in the cost closed forms (nearest integer).
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    (n as f64 / batch_size as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub algorithm: Algorithm,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Local SGD steps per client.
    pub local_steps: usize,
    /// Models sent by each client.
    pub transmissions: usize,
    pub model_bytes: Option<u64>,
    pub bytes_per_client: Option<u64>,
    /// Values counted during the runs of the bundle, when present.
    pub counted_local_steps: Option<usize>,
    pub counted_transmissions: Option<usize>,
}

/// Closed-form cost per client for both aggregation schemes.
pub fn cost_rows(
    n_k: usize,
    epochs: usize,
    rounds: usize,
    mini_batch_size: usize,
    batch_size: usize,
    model_bytes: Option<u64>,
) -> [CostRow; 2] {
    let mb_batches = batches_per_epoch(n_k, mini_batch_size);
    let me_batches = batches_per_epoch(n_k, batch_size);
    let mb_steps = epochs * mb_batches;
    let row = |algorithm, batch_size, batches, local_steps, transmissions: usize| CostRow {
        algorithm,
        batch_size,
        batches_per_epoch: batches,
        local_steps,
        transmissions,
        model_bytes,
        bytes_per_client: model_bytes.map(|b| b * transmissions as u64),
        counted_local_steps: None,
        counted_transmissions: None,
    };
    [
        row(
            Algorithm::MiniBatch,
            mini_batch_size,
            mb_batches,
            mb_steps,
            mb_steps,
        ),
        row(
            Algorithm::MultiEpoch,
            batch_size,
            me_batches,
            rounds * epochs * me_batches,
            rounds,
        ),
    ]
}

fn feature_dim(config: &ExperimentConfig) -> usize {
    match &config.data {
        DataSource::Synthetic { spec, .. } => spec.feature_dim,
        DataSource::Manifest {
            feature_columns, ..
        } => *feature_columns,
    }
}

/// Cost table for a config, with counted values from `runs` filled in.
pub fn cost_table(
    config: &ExperimentConfig,
    runs: &[SummaryRow],
    preset: Option<Preset>,
) -> Vec<CostRow> {
    let n_k = target_part_sizes(config.mode, config.balance.samples_per_device)[0];
    let model_bytes = config.cost.model_bytes.or_else(|| {
        preset
            .and_then(|p| ArchitectureSpec::preset(config.kind(), p, feature_dim(config)).ok())
            .map(|arch| checkpoint::binary_size(&arch) as u64)
    });
    let t = &config.training;
    let mut rows = cost_rows(
        n_k,
        t.epochs,
        t.rounds,
        t.mini_batch_size(),
        t.batch_size,
        model_bytes,
    )
    .to_vec();
    for row in &mut rows {
        let approach = match row.algorithm {
            Algorithm::MiniBatch => Approach::MiniBatch,
            Algorithm::MultiEpoch => Approach::MultiEpoch,
        };
        if let Some(s) = runs
            .iter()
            .find(|s| s.approach == approach && s.runs > s.aborted)
        {
            row.counted_local_steps = Some(s.local_steps_per_client);
            row.counted_transmissions = Some(s.transmissions_per_client);
        }
    }
    rows
}

/// Decimal byte units with up to three decimals, e.g. `2.82 MB`.
pub fn format_bytes(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "kB", "MB", "GB", "TB"];
    let mut value = bytes as f64;
    let mut unit = 0;
    while value >= 1000.0 && unit < UNITS.len() - 1 {
        value /= 1000.0;
        unit += 1;
    }
    let text = format!("{value:.3}");
    let text = text.trim_end_matches('0').trim_end_matches('.');
    format!("{text} {}", UNITS[unit])
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn bundle_preset(bundle: &ResultBundle) -> Option<Preset> {
    bundle
        .output
        .runs
        .first()
        .and_then(|r| r.preset.parse().ok())
        .or(bundle.config.model.preset)
}

/// Markdown report: metric tables (or the sweep table) plus the cost table.
pub fn markdown(bundle: &ResultBundle) -> String {
    let config = &bundle.config;
    let summary = summarize(&bundle.output.runs);
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", bundle.manifest.name);
    let _ = writeln!(
        out,
        "Mode: {:?}, benign fraction {:.2}%, {} runs ({} aborted).\n",
        config.mode,
        100.0 * config.balance.benign_fraction,
        bundle.manifest.runs,
        bundle.manifest.aborted
    );
    match bundle.manifest.kind {
        BundleKind::Experiment => metric_table(&mut out, &summary),
        BundleKind::Sweep => sweep_tables(
            &mut out,
            &summary,
            bundle.manifest.f_values.as_deref().unwrap_or(&[]),
        ),
    }
    let _ = writeln!(out, "\n## Communication cost per client\n");
    let _ = writeln!(
        out,
        "| Algorithm | B | Batches/epoch | Local steps | Transmissions | Model size | Sent per client | Counted steps | Counted transmissions |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
    for row in cost_table(config, &summary, bundle_preset(bundle)) {
        let opt = |v: Option<usize>| v.map_or("-".to_owned(), |v| v.to_string());
        let bytes = |v: Option<u64>| v.map_or("-".to_owned(), format_bytes);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            match row.algorithm {
                Algorithm::MiniBatch => "Mini-batch",
                Algorithm::MultiEpoch => "Multi-epoch",
            },
            row.batch_size,
            row.batches_per_epoch,
            row.local_steps,
            row.transmissions,
            bytes(row.model_bytes),
            bytes(row.bytes_per_client),
            opt(row.counted_local_steps),
            opt(row.counted_transmissions),
        );
    }
    out
}

fn metric_table(out: &mut String, summary: &[SummaryRow]) {
    let columns: Vec<&SummaryRow> = summary.iter().collect();
    let _ = write!(out, "| Metric | Devices |");
    for c in &columns {
        let _ = write!(out, " {} |", column_title(c));
    }
    let _ = write!(out, "\n|---|---|");
    for _ in &columns {
        let _ = write!(out, "---|");
    }
    let _ = writeln!(out);
    for metric in [Metric::Accuracy, Metric::Tpr, Metric::Tnr] {
        for (scope, pick) in [
            ("Known", (|s: &SummaryRow| s.known) as fn(&SummaryRow) -> _),
            ("New", |s: &SummaryRow| s.new_device),
        ] {
            let _ = write!(out, "| {} | {scope} |", metric.label());
            for c in &columns {
                let cell = pick(c).map_or("-".to_owned(), |s| pct(s.get(metric).mean));
                let _ = write!(out, " {cell} |");
            }
            let _ = writeln!(out);
        }
    }
}

fn column_title(s: &SummaryRow) -> String {
    let mut title = s.approach.title().to_owned();
    if s.approach.is_federated() && s.aggregation != "AVG" {
        title.push_str(&format!(" {}", s.aggregation));
    }
    if s.attack != AttackKind::None && s.f > 0 {
        title.push_str(&format!(" {} f={}", s.attack.name(), s.f));
    }
    title
}

fn stats_cell(s: Option<Stats>) -> String {
    s.map_or("-".to_owned(), |s| {
        format!("{} [{}, {}]", pct(s.mean), pct(s.min), pct(s.max))
    })
}

/// Sweep F1 lookup; f = 0 reads the shared honest baseline.
fn sweep_f1<'a>(
    summary: &'a [SummaryRow],
    attack: AttackKind,
    aggregation: &str,
    f: usize,
) -> Option<&'a SummaryRow> {
    summary.iter().find(|s| {
        s.aggregation == aggregation
            && s.f == f
            && if f == 0 {
                s.attack == AttackKind::None
            } else {
                s.attack == attack
            }
    })
}

fn aggregations(summary: &[SummaryRow]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for s in summary {
        if !seen.contains(&s.aggregation) {
            seen.push(s.aggregation.clone());
        }
    }
    seen
}

fn sweep_tables(out: &mut String, summary: &[SummaryRow], f_values: &[usize]) {
    let aggs = aggregations(summary);
    for attack in AttackKind::ALL_ATTACKS {
        let _ = writeln!(
            out,
            "## {} (known-device F1, mean [min, max])\n",
            attack.name()
        );
        let _ = write!(out, "| Rule |");
        for f in f_values {
            let _ = write!(out, " f={f} |");
        }
        let _ = write!(out, "\n|---|");
        for _ in f_values {
            let _ = write!(out, "---|");
        }
        let _ = writeln!(out);
        for agg in &aggs {
            let _ = write!(out, "| {agg} |");
            for &f in f_values {
                let cell = stats_cell(
                    sweep_f1(summary, attack, agg, f)
                        .and_then(|s| s.known)
                        .map(|k| k.f1),
                );
                let _ = write!(out, " {cell} |");
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_owned(),
        source,
    })?;
    let err = |source| Error::Csv {
        path: path.to_owned(),
        source,
    };
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn stat_fields(s: Option<Stats>) -> [String; 3] {
    match s {
        Some(s) => [s.mean.to_string(), s.min.to_string(), s.max.to_string()],
        None => [String::new(), String::new(), String::new()],
    }
}

/// Series name of a round log key: the key without fold and repetition.
fn series_of(key: &str) -> String {
    let parts: Vec<&str> = key.split('_').collect();
    parts
        .iter()
        .filter(|p| {
            !((p.starts_with("fold") && p[4..].chars().all(|c| c.is_ascii_digit()) && p.len() > 4)
                || (p.starts_with("rep")
                    && p[3..].chars().all(|c| c.is_ascii_digit())
                    && p.len() > 3))
        })
        .copied()
        .collect::<Vec<_>>()
        .join("_")
}

/// Write `summary.csv`, `curves.csv`, `cost.csv` and, for sweeps,
/// `sweep.csv` into `out_dir`. Returns the written paths.
pub fn write_csv_report(bundle: &ResultBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = summarize(&bundle.output.runs);
    let mut written = Vec::new();

    let path = out_dir.join("summary.csv");
    let mut rows = Vec::new();
    for s in &summary {
        for (scope, stats) in [("known", s.known), ("new", s.new_device)] {
            for metric in Metric::ALL {
                let [mean, min, max] = stat_fields(stats.map(|x| x.get(metric)));
                rows.push(vec![
                    s.approach.name().to_owned(),
                    s.attack.name().to_owned(),
                    s.f.to_string(),
                    s.aggregation.clone(),
                    scope.to_owned(),
                    format!("{metric:?}").to_lowercase(),
                    mean,
                    min,
                    max,
                    s.runs.to_string(),
                    s.aborted.to_string(),
                ]);
            }
        }
    }
    write_csv(
        &path,
        &[
            "approach",
            "attack",
            "f",
            "aggregation",
            "scope",
            "metric",
            "mean",
            "min",
            "max",
            "runs",
            "aborted",
        ],
        &rows,
    )?;
    written.push(path);

    // Curves: per series and round, stats over runs of every logged metric.
    let path = out_dir.join("curves.csv");
    let mut series: BTreeMap<
        (String, usize),
        (f64, Vec<RoundMetrics>, Vec<RoundMetrics>, Vec<f64>),
    > = BTreeMap::new();
    for (key, records) in &bundle.output.rounds {
        let name = series_of(key);
        for r in records {
            let Some(m) = &r.metrics else { continue };
            let entry = series
                .entry((name.clone(), r.round))
                .or_insert_with(|| (r.epoch, Vec::new(), Vec::new(), Vec::new()));
            entry.1.push(m.known);
            if let Some(n) = m.new_device {
                entry.2.push(n);
            }
            if let Some(t) = r.threshold {
                entry.3.push(t);
            }
        }
    }
    let mut header = vec![
        "series".to_owned(),
        "round".to_owned(),
        "epoch".to_owned(),
        "runs".to_owned(),
    ];
    for scope in ["known", "new"] {
        for metric in Metric::ALL {
            let m = format!("{metric:?}").to_lowercase();
            for stat in ["mean", "min", "max"] {
                header.push(format!("{scope}_{m}_{stat}"));
            }
        }
    }
    header.push("threshold_mean".to_owned());
    let rows: Vec<Vec<String>> = series
        .iter()
        .map(|((name, round), (epoch, known, new, thr))| {
            let mut row = vec![
                name.clone(),
                round.to_string(),
                epoch.to_string(),
                known.len().to_string(),
            ];
            for items in [known, new] {
                for metric in Metric::ALL {
                    let values: Vec<f64> = items.iter().map(|m| m.get(metric)).collect();
                    row.extend(stat_fields(Stats::of(&values)));
                }
            }
            row.push(Stats::of(thr).map_or(String::new(), |s| s.mean.to_string()));
            row
        })
        .collect();
    write_csv(
        &path,
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        &rows,
    )?;
    written.push(path);

    let path = out_dir.join("cost.csv");
    let rows: Vec<Vec<String>> = cost_table(&bundle.config, &summary, bundle_preset(bundle))
        .into_iter()
        .map(|r| {
            let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
            let opt64 = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
            vec![
                format!("{:?}", r.algorithm),
                r.batch_size.to_string(),
                r.batches_per_epoch.to_string(),
                r.local_steps.to_string(),
                r.transmissions.to_string(),
                opt64(r.model_bytes),
                opt64(r.bytes_per_client),
                r.bytes_per_client.map_or(String::new(), format_bytes),
                opt(r.counted_local_steps),
                opt(r.counted_transmissions),
            ]
        })
        .collect();
    write_csv(
        &path,
        &[
            "algorithm",
            "batch_size",
            "batches_per_epoch",
            "local_steps",
            "transmissions",
            "model_bytes",
            "bytes_per_client",
            "sent_per_client",
            "counted_local_steps",
            "counted_transmissions",
        ],
        &rows,
    )?;
    written.push(path);

    if bundle.manifest.kind == BundleKind::Sweep {
        let path = out_dir.join("sweep.csv");
        let f_values = bundle.manifest.f_values.clone().unwrap_or_default();
        let mut rows = Vec::new();
        for attack in AttackKind::ALL_ATTACKS {
            for agg in aggregations(&summary) {
                for &f in &f_values {
                    if let Some(s) = sweep_f1(&summary, attack, &agg, f) {
                        let [mean, min, max] = stat_fields(s.known.map(|k| k.f1));
                        rows.push(vec![
                            attack.name().to_owned(),
                            agg.clone(),
                            f.to_string(),
                            mean,
                            min,
                            max,
                            s.runs.to_string(),
                            s.aborted.to_string(),
                        ]);
                    }
                }
            }
        }
        write_csv(
            &path,
            &[
                "attack",
                "aggregation",
                "f",
                "f1_mean",
                "f1_min",
                "f1_max",
                "runs",
                "aborted",
            ],
            &rows,
        )?;
        written.push(path);
    }
    Ok(written)
}
