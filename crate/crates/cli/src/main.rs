use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use fediot::dataset::{
    generate_synthetic_fleet, load_manifest, write_fleet, Label, SyntheticFile, FEATURE_DIM,
};
use fediot::harness::{
    attack_sweep, markdown, results_dir, run_experiment, write_csv_report, BundleKind,
    ExperimentConfig, ReportFormat, ResultBundle, PROFILES,
};

#[derive(Parser)]
#[command(
    name = "fediot",
    version,
    about = "Federated IoT malware detection simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a device manifest and print per-device sample counts.
    Ingest {
        manifest: PathBuf,
        #[arg(long, default_value_t = FEATURE_DIM)]
        feature_columns: usize,
        /// The CSV files have no header row.
        #[arg(long)]
        no_header: bool,
    },
    /// Generate a synthetic fleet from a spec file and write it as CSVs plus a manifest.
    Synth {
        spec: PathBuf,
        /// Output directory (default: <results>/synth).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment from a config file or a named profile.
    Run {
        config: String,
        /// Bundle directory (default: <results>/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the attack × aggregation × f sweep on a supervised config.
    Sweep {
        config: String,
        #[arg(long = "f", value_delimiter = ',', required = true)]
        f_values: Vec<usize>,
        /// Bundle directory (default: <results>/<name>-sweep).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a result bundle as Markdown (stdout) or CSV files.
    Report {
        bundle: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
        /// Directory for CSV output (default: <bundle>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in experiment profiles.
    Profiles,
}

/// A config argument names a file when one exists at that path, otherwise a
/// built-in profile.
fn resolve_config(arg: &str) -> fediot::Result<ExperimentConfig> {
    let path = Path::new(arg);
    if path.exists() || !PROFILES.contains(&arg) {
        ExperimentConfig::load(path)
    } else {
        ExperimentConfig::profile(arg)
    }
}

fn execute(command: Command) -> fediot::Result<serde_json::Value> {
    match command {
        Command::Ingest {
            manifest,
            feature_columns,
            no_header,
        } => {
            let streams = load_manifest(&manifest, feature_columns, !no_header)?;
            let devices: Vec<_> = streams
                .iter()
                .map(|s| {
                    let benign = s
                        .samples
                        .iter()
                        .filter(|x| x.label == Some(Label::Benign))
                        .count();
                    json!({
                        "device_id": s.device_id,
                        "samples": s.samples.len(),
                        "benign": benign,
                        "attack": s.samples.len() - benign,
                    })
                })
                .collect();
            Ok(json!({ "devices": devices, "feature_columns": feature_columns }))
        }
        Command::Synth { spec, out } => {
            let file = SyntheticFile::load(&spec)?;
            let fleet = generate_synthetic_fleet(&file.spec, file.seed)?;
            let dir = out.unwrap_or_else(|| results_dir().join("synth"));
            let manifest = write_fleet(&fleet, &dir)?;
            Ok(json!({
                "manifest": manifest,
                "devices": fleet.len(),
                "samples_per_device": file.spec.samples_per_device,
                "feature_columns": file.spec.feature_dim,
            }))
        }
        Command::Run { config, out } => {
            let config = resolve_config(&config)?;
            let output = run_experiment(&config)?;
            let dir = out.unwrap_or_else(|| results_dir().join(&config.name));
            let bundle = ResultBundle::new(BundleKind::Experiment, config, output, None);
            bundle.write(&dir)?;
            Ok(
                json!({ "bundle": dir, "runs": bundle.manifest.runs, "aborted": bundle.manifest.aborted }),
            )
        }
        Command::Sweep {
            config,
            f_values,
            out,
        } => {
            let config = resolve_config(&config)?;
            let output = attack_sweep(&config, &f_values)?;
            let dir = out.unwrap_or_else(|| results_dir().join(format!("{}-sweep", config.name)));
            let bundle = ResultBundle::new(BundleKind::Sweep, config, output, Some(f_values));
            bundle.write(&dir)?;
            Ok(
                json!({ "bundle": dir, "runs": bundle.manifest.runs, "aborted": bundle.manifest.aborted }),
            )
        }
        Command::Report {
            bundle,
            format,
            out,
        } => {
            let format: ReportFormat = format.parse()?;
            let loaded = ResultBundle::read(&bundle)?;
            match format {
                ReportFormat::Md => {
                    print!("{}", markdown(&loaded));
                    Ok(serde_json::Value::Null)
                }
                ReportFormat::Csv => {
                    let dir = out.unwrap_or_else(|| bundle.join("report"));
                    let files = write_csv_report(&loaded, &dir)?;
                    Ok(json!({ "files": files }))
                }
            }
        }
        Command::Profiles => Ok(json!({ "profiles": PROFILES })),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = json!({ "error": { "kind": "usage", "message": e.to_string().trim() } });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
