//! Per-device traffic records: CSV ingestion, a synthetic non-IID fleet,
//! chronological splitting and class rebalancing.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Number of statistics per N-BaIoT traffic record.
pub const FEATURE_DIM: usize = 115;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Attack,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Benign),
            1 => Some(Label::Attack),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Attack => 1,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Benign => Label::Attack,
            Label::Attack => Label::Benign,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Attack => "attack",
        }
    }
}

/// One traffic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<Label>,
    /// Capture order within the device stream.
    pub seq_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

/// The raw, time-ordered stream of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceStream {
    pub device_id: String,
    pub samples: Vec<Sample>,
}

/// A single device's data after splitting (and optionally rebalancing).
#[derive(Debug, Clone, PartialEq)]
pub struct DevicePartition {
    pub device_id: String,
    pub train: Vec<Sample>,
    /// Benign samples reserved for threshold selection (unsupervised only).
    pub threshold_sel: Vec<Sample>,
    /// Leakage gap between train and test; never read after splitting.
    pub unused: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub benign_fraction: f64,
    pub samples_per_device: usize,
}

impl BalanceSpec {
    /// Benign share of the unmodified N-BaIoT dataset.
    pub const ORIGINAL_BENIGN_FRACTION: f64 = 0.0787;
    pub const SUPERVISED_SAMPLES: usize = 100_000;
    pub const UNSUPERVISED_SAMPLES: usize = 10_000;

    pub fn new(benign_fraction: f64, samples_per_device: usize) -> Result<Self> {
        let spec = BalanceSpec {
            benign_fraction,
            samples_per_device,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.benign_fraction > 0.0 && self.benign_fraction < 1.0) {
            return Err(Error::config(format!(
                "benign_fraction must lie in (0, 1), got {}",
                self.benign_fraction
            )));
        }
        if self.samples_per_device == 0 {
            return Err(Error::config("samples_per_device must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column layout of a device CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub feature_columns: usize,
    /// A trailing `label` column in {0, 1} is present.
    pub labeled: bool,
    pub has_header: bool,
}

impl CsvSchema {
    pub fn nbaiot(labeled: bool, has_header: bool) -> Self {
        CsvSchema {
            feature_columns: FEATURE_DIM,
            labeled,
            has_header,
        }
    }

    fn columns(&self) -> usize {
        self.feature_columns + usize::from(self.labeled)
    }
}

/// Read one device file. Rows keep file order; `seq_index` is the data row number.
pub fn load_device_csv(path: &Path, schema: CsvSchema) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_owned(),
            source,
        })?;

    let expected = schema.columns();
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv {
            path: path.to_owned(),
            source,
        })?;
        if record.len() != expected {
            return Err(Error::Schema {
                path: path.to_owned(),
                row,
                expected,
                found: record.len(),
            });
        }
        let parse = |column: usize| -> Result<f64> {
            let cell = &record[column];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: path.to_owned(),
                    row,
                    column,
                    value: cell.to_owned(),
                })
        };
        let features = (0..schema.feature_columns)
            .map(parse)
            .collect::<Result<Vec<_>>>()?;
        let label = if schema.labeled {
            let column = schema.feature_columns;
            let bit = parse(column)?;
            let label = match bit {
                b if b == 0.0 => Label::Benign,
                b if b == 1.0 => Label::Attack,
                _ => {
                    return Err(Error::Parse {
                        path: path.to_owned(),
                        row,
                        column,
                        value: record[column].to_owned(),
                    })
                }
            };
            Some(label)
        } else {
            None
        };
        samples.push(Sample {
            features,
            label,
            seq_index: row as u64,
        });
    }
    Ok(samples)
}

/// One line of a device manifest: `device_id, path, class`.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ManifestEntry {
    pub device_id: String,
    pub path: PathBuf,
    /// `benign` for benign captures; any other value names an attack capture.
    pub class: String,
}

impl ManifestEntry {
    pub fn label(&self) -> Label {
        if self.class.eq_ignore_ascii_case("benign") || self.class == "0" {
            Label::Benign
        } else {
            Label::Attack
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_owned(),
            source,
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    reader
        .deserialize::<ManifestEntry>()
        .map(|entry| {
            let mut entry = entry.map_err(|source| Error::Csv {
                path: path.to_owned(),
                source,
            })?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            Ok(entry)
        })
        .collect()
}

/// Load every device listed in an N-BaIoT style manifest (one file per device
/// per class, labels taken from the file role).
///
/// The per-class files of a device are merged into one stream by relative
/// position inside each file, so that each class is spread over the whole
/// timeline and chronological fractions apply to every class alike.
pub fn load_manifest(
    path: &Path,
    feature_columns: usize,
    has_header: bool,
) -> Result<Vec<DeviceStream>> {
    let entries = read_manifest(path)?;
    let schema = CsvSchema {
        feature_columns,
        labeled: false,
        has_header,
    };
    let mut order: Vec<String> = Vec::new();
    let mut files: Vec<Vec<Vec<Sample>>> = Vec::new();
    for entry in &entries {
        let mut samples = load_device_csv(&entry.path, schema)?;
        let label = entry.label();
        samples.iter_mut().for_each(|s| s.label = Some(label));
        match order.iter().position(|d| *d == entry.device_id) {
            Some(i) => files[i].push(samples),
            None => {
                order.push(entry.device_id.clone());
                files.push(vec![samples]);
            }
        }
    }
    Ok(order
        .into_iter()
        .zip(files)
        .map(|(device_id, files)| DeviceStream {
            device_id,
            samples: interleave_by_position(files),
        })
        .collect())
}

fn interleave_by_position(files: Vec<Vec<Sample>>) -> Vec<Sample> {
    let mut keyed: Vec<(f64, usize, Sample)> = files
        .into_iter()
        .enumerate()
        .flat_map(|(file, samples)| {
            let n = samples.len() as f64;
            samples
                .into_iter()
                .enumerate()
                .map(move |(i, s)| ((i as f64 + 0.5) / n, file, s))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, mut s))| {
            s.seq_index = i as u64;
            s
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Splitting and rebalancing
// ---------------------------------------------------------------------------

const SUPERVISED_PARTS: [u64; 3] = [790, 10, 200];
const UNSUPERVISED_PARTS: [u64; 4] = [395, 395, 10, 200];

/// Split `n` into parts given in thousandths: every part but the last is
/// rounded down, the last takes the remainder.
pub fn part_sizes(n: usize, per_mille: &[u64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = per_mille[..per_mille.len() - 1]
        .iter()
        .map(|&p| (n as u64 * p / 1000) as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    sizes.push(n - used);
    sizes
}

/// Sizes of (train, threshold_sel, unused, test) for a device holding
/// `samples_per_device` samples after rebalancing. `threshold_sel` is zero in
/// supervised mode.
pub fn target_part_sizes(mode: Mode, samples_per_device: usize) -> [usize; 4] {
    match mode {
        Mode::Supervised => {
            let s = part_sizes(samples_per_device, &SUPERVISED_PARTS);
            [s[0], 0, s[1], s[2]]
        }
        Mode::Unsupervised => {
            let s = part_sizes(samples_per_device, &UNSUPERVISED_PARTS);
            [s[0], s[1], s[2], s[3]]
        }
    }
}

fn carve(samples: &[Sample], sizes: &[usize]) -> Vec<Vec<Sample>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = samples[start..start + len].to_vec();
            start += len;
            part
        })
        .collect()
}

/// Split a time-ordered stream into train / (threshold) / unused / test.
///
/// Supervised mode splits the whole stream 79/1/20. Unsupervised mode splits
/// only the benign sub-stream 39.5/39.5/1/20 and appends every attack sample
/// to the test part.
pub fn chronological_split(
    device_id: &str,
    samples: &[Sample],
    mode: Mode,
) -> Result<DevicePartition> {
    let mut ordered = samples.to_vec();
    ordered.sort_by_key(|s| s.seq_index);
    match mode {
        Mode::Supervised => {
            if ordered.len() < SUPERVISED_PARTS.len() {
                return Err(Error::EmptyPart {
                    available: ordered.len(),
                    parts: SUPERVISED_PARTS.len(),
                });
            }
            let sizes = part_sizes(ordered.len(), &SUPERVISED_PARTS);
            if sizes[0] == 0 || sizes[2] == 0 {
                return Err(Error::EmptyPart {
                    available: ordered.len(),
                    parts: SUPERVISED_PARTS.len(),
                });
            }
            let mut parts = carve(&ordered, &sizes).into_iter();
            Ok(DevicePartition {
                device_id: device_id.to_owned(),
                train: parts.next().unwrap_or_default(),
                threshold_sel: Vec::new(),
                unused: parts.next().unwrap_or_default(),
                test: parts.next().unwrap_or_default(),
            })
        }
        Mode::Unsupervised => {
            let (benign, attack): (Vec<Sample>, Vec<Sample>) = ordered
                .into_iter()
                .partition(|s| s.label != Some(Label::Attack));
            let sizes = part_sizes(benign.len(), &UNSUPERVISED_PARTS);
            if benign.len() < UNSUPERVISED_PARTS.len()
                || sizes[0] == 0
                || sizes[1] == 0
                || sizes[3] == 0
            {
                return Err(Error::EmptyPart {
                    available: benign.len(),
                    parts: UNSUPERVISED_PARTS.len(),
                });
            }
            let mut parts = carve(&benign, &sizes).into_iter();
            let train = parts.next().unwrap_or_default();
            let threshold_sel = parts.next().unwrap_or_default();
            let unused = parts.next().unwrap_or_default();
            let mut test = parts.next().unwrap_or_default();
            test.extend(attack);
            test.sort_by_key(|s| s.seq_index);
            Ok(DevicePartition {
                device_id: device_id.to_owned(),
                train,
                threshold_sel,
                unused,
                test,
            })
        }
    }
}

/// Number of benign samples in a part of `size` samples.
pub fn benign_count(benign_fraction: f64, size: usize) -> usize {
    ((benign_fraction * size as f64).round() as usize).min(size)
}

/// Draw exactly `count` samples from `pool`: a uniform subset when the pool is
/// large enough, otherwise every original once plus uniform duplicates.
fn resample_class(pool: &[Sample], count: usize, rng: &mut impl Rng) -> Vec<Sample> {
    if count <= pool.len() {
        let mut picks = index::sample(rng, pool.len(), count).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| pool[i].clone()).collect()
    } else {
        let mut out = pool.to_vec();
        out.extend((0..count - pool.len()).map(|_| pool[rng.random_range(0..pool.len())].clone()));
        out
    }
}

fn rebalance_part(
    device: &str,
    part_name: &'static str,
    samples: &[Sample],
    benign: usize,
    attack: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(benign + attack);
    for (class, count) in [(Label::Benign, benign), (Label::Attack, attack)] {
        if count == 0 {
            continue;
        }
        let pool: Vec<Sample> = samples
            .iter()
            .filter(|s| s.label.unwrap_or(Label::Benign) == class)
            .cloned()
            .collect();
        if pool.is_empty() {
            return Err(Error::MissingClass {
                device: device.to_owned(),
                class: class.name(),
                part: part_name,
            });
        }
        let mut rng = seed::derived_rng(seed, &[class.bit() as u64]);
        out.extend(resample_class(&pool, count, &mut rng));
    }
    out.sort_by_key(|s| s.seq_index);
    Ok(out)
}

/// Up- or down-sample each part of a split device to the requested size and
/// class mix. Runs strictly after splitting so no sample changes side.
///
/// The `unused` gap is left as split.
pub fn rebalance(
    partition: &DevicePartition,
    spec: &BalanceSpec,
    mode: Mode,
    rng_seed: u64,
) -> Result<DevicePartition> {
    spec.validate()?;
    let [train_n, thr_n, _, test_n] = target_part_sizes(mode, spec.samples_per_device);
    let device = partition.device_id.as_str();
    let seed_for = |tag: u64| seed::derive(rng_seed, &[seed::role::PARTITION, tag]);
    let (train, threshold_sel) = match mode {
        Mode::Supervised => {
            let benign = benign_count(spec.benign_fraction, train_n);
            let train = rebalance_part(
                device,
                "train",
                &partition.train,
                benign,
                train_n - benign,
                seed_for(0),
            )?;
            (train, Vec::new())
        }
        Mode::Unsupervised => (
            rebalance_part(device, "train", &partition.train, train_n, 0, seed_for(0))?,
            rebalance_part(
                device,
                "threshold",
                &partition.threshold_sel,
                thr_n,
                0,
                seed_for(1),
            )?,
        ),
    };
    let benign = benign_count(spec.benign_fraction, test_n);
    let test = rebalance_part(
        device,
        "test",
        &partition.test,
        benign,
        test_n - benign,
        seed_for(2),
    )?;
    Ok(DevicePartition {
        device_id: partition.device_id.clone(),
        train,
        threshold_sel,
        unused: partition.unused.clone(),
        test,
    })
}

// ---------------------------------------------------------------------------
// Synthetic fleet
// ---------------------------------------------------------------------------

/// Recipe for a desk-scale stand-in of the N-BaIoT fleet.
///
/// Each device owns a benign Gaussian cluster whose centre is drawn from a
/// shared hyper-prior. Attack traffic comes from a few attack families; a
/// family's centre on a device is the device's benign centre shifted along a
/// family direction common to all devices plus a device-specific jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_devices: usize,
    pub samples_per_device: usize,
    pub feature_dim: usize,
    /// Probability that a time step carries attack traffic.
    pub attack_fraction: f64,
    pub attack_families: usize,
    /// Std-dev of the hyper-prior over benign centres.
    pub device_spread: f64,
    /// Within-cluster std-dev.
    pub noise: f64,
    /// Norm of the family shift between benign and attack centres.
    pub attack_shift: f64,
    /// Norm of the per-device deviation from the family shift.
    pub device_attack_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_devices: 9,
            samples_per_device: 1000,
            feature_dim: FEATURE_DIM,
            attack_fraction: 0.5,
            attack_families: 2,
            device_spread: 1.0,
            noise: 1.0,
            attack_shift: 12.0,
            device_attack_jitter: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn new(n_devices: usize, samples_per_device: usize, feature_dim: usize) -> Self {
        SyntheticSpec {
            n_devices,
            samples_per_device,
            feature_dim,
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_devices < 2 {
            return Err(Error::config("synthetic fleet needs at least 2 devices"));
        }
        if self.feature_dim < 1 {
            return Err(Error::config("feature_dim must be at least 1"));
        }
        if self.attack_families < 1 {
            return Err(Error::config("attack_families must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.attack_fraction) {
            return Err(Error::config("attack_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * normal(rng)).collect()
}

fn scaled_direction(rng: &mut impl Rng, dim: usize, norm: f64) -> Vec<f64> {
    let v = gaussian_vec(rng, dim, 1.0);
    let len = v
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x * norm / len).collect()
}

/// Generate one labeled stream per device, deterministic in `seed`.
pub fn generate_synthetic_fleet(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DeviceStream>> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut fleet_rng = seed::derived_rng(seed, &[seed::role::SYNTH]);
    let families: Vec<Vec<f64>> = (0..spec.attack_families)
        .map(|_| scaled_direction(&mut fleet_rng, dim, spec.attack_shift))
        .collect();

    Ok((0..spec.n_devices)
        .map(|device| {
            let mut rng = seed::derived_rng(seed, &[seed::role::SYNTH, device as u64 + 1]);
            let benign_centre = gaussian_vec(&mut rng, dim, spec.device_spread);
            let attack_centres: Vec<Vec<f64>> = families
                .iter()
                .map(|family| {
                    let jitter = scaled_direction(&mut rng, dim, spec.device_attack_jitter);
                    benign_centre
                        .iter()
                        .zip(family)
                        .zip(&jitter)
                        .map(|((b, f), j)| b + f + j)
                        .collect()
                })
                .collect();
            let samples = (0..spec.samples_per_device)
                .map(|t| {
                    let is_attack = rng.random_bool(spec.attack_fraction);
                    let centre = if is_attack {
                        &attack_centres[rng.random_range(0..attack_centres.len())]
                    } else {
                        &benign_centre
                    };
                    let features = centre
                        .iter()
                        .map(|c| c + spec.noise * normal(&mut rng))
                        .collect::<Vec<f64>>();
                    Sample {
                        features,
                        label: Some(if is_attack {
                            Label::Attack
                        } else {
                            Label::Benign
                        }),
                        seq_index: t as u64,
                    }
                })
                .collect();
            DeviceStream {
                device_id: format!("device-{device}"),
                samples,
            }
        })
        .collect())
}

/// A synthetic fleet description as written in a spec file: the generator
/// fields plus the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFile {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticFile {
    pub fn load(path: &Path) -> Result<SyntheticFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SyntheticFile =
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        file.spec.validate()?;
        Ok(file)
    }
}

/// Write a labeled fleet in the manifest layout: one headed CSV per device
/// and class plus `manifest.csv`. Returns the manifest path.
pub fn write_fleet(streams: &[DeviceStream], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |path: &Path| {
        let path = path.to_owned();
        move |source| Error::Csv { path, source }
    };
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = csv::Writer::from_path(&manifest_path).map_err(csv_err(&manifest_path))?;
    manifest
        .write_record(["device_id", "path", "class"])
        .map_err(csv_err(&manifest_path))?;
    for stream in streams {
        let dim = stream.samples.first().map_or(0, |s| s.features.len());
        let header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
        for label in [Label::Benign, Label::Attack] {
            let name = format!("{}_{}.csv", stream.device_id, label.name());
            let path = dir.join(&name);
            let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
            w.write_record(&header).map_err(csv_err(&path))?;
            for sample in &stream.samples {
                match sample.label {
                    Some(l) if l == label => {
                        w.write_record(sample.features.iter().map(|x| x.to_string()))
                            .map_err(csv_err(&path))?;
                    }
                    Some(_) => {}
                    None => {
                        return Err(Error::MissingLabel {
                            seq_index: sample.seq_index,
                        })
                    }
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            manifest
                .write_record([stream.device_id.as_str(), name.as_str(), label.name()])
                .map_err(csv_err(&manifest_path))?;
        }
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::io::Write;

    fn stream(n: usize, label: impl Fn(usize) -> Label) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                features: vec![i as f64, 1.0],
                label: Some(label(i)),
                seq_index: i as u64,
            })
            .collect()
    }

    fn alternating(i: usize) -> Label {
        if i % 2 == 0 {
            Label::Benign
        } else {
            Label::Attack
        }
    }

    fn write_csv(rows: &[String]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for row in rows {
            writeln!(file, "{row}").unwrap();
        }
        file
    }

    fn row(values: usize, fill: &str) -> String {
        vec![fill; values].join(",")
    }

    #[test]
    fn loads_well_formed_rows_in_order() {
        let file = write_csv(&[row(115, "0.5"), row(115, "1"), row(115, "-2e3")]);
        let samples = load_device_csv(file.path(), CsvSchema::nbaiot(false, false)).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(
            samples.iter().map(|s| s.seq_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(samples[2].features[114], -2000.0);
        assert!(samples.iter().all(|s| s.label.is_none()));
    }

    #[test]
    fn short_row_is_a_schema_error_naming_the_row() {
        let file = write_csv(&[row(115, "0"), row(114, "0"), row(115, "0")]);
        let err = load_device_csv(file.path(), CsvSchema::nbaiot(false, false)).unwrap_err();
        assert!(matches!(
            err,
            Error::Schema {
                row: 1,
                expected: 115,
                found: 114,
                ..
            }
        ));
    }

    #[test]
    fn non_numeric_cell_is_a_parse_error() {
        let mut bad = vec!["0"; 115];
        bad[7] = "abc";
        let file = write_csv(&[bad.join(",")]);
        let err = load_device_csv(file.path(), CsvSchema::nbaiot(false, false)).unwrap_err();
        assert!(matches!(
            err,
            Error::Parse {
                row: 0,
                column: 7,
                ..
            }
        ));
    }

    #[test]
    fn header_and_label_column() {
        let header = (0..115)
            .map(|i| format!("f{i}"))
            .chain(std::iter::once("label".to_owned()))
            .collect::<Vec<_>>()
            .join(",");
        let file = write_csv(&[
            header,
            format!("{},1", row(115, "3")),
            format!("{},0", row(115, "4")),
        ]);
        let samples = load_device_csv(file.path(), CsvSchema::nbaiot(true, true)).unwrap();
        assert_eq!(samples[0].label, Some(Label::Attack));
        assert_eq!(samples[1].label, Some(Label::Benign));

        let bad = write_csv(&[format!("{},2", row(115, "3"))]);
        assert!(matches!(
            load_device_csv(bad.path(), CsvSchema::nbaiot(true, false)),
            Err(Error::Parse { column: 115, .. })
        ));
    }

    #[test]
    fn manifest_interleaves_class_files() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, n: usize| {
            let rows: Vec<String> = (0..n).map(|i| row(115, &i.to_string())).collect();
            std::fs::write(dir.path().join(name), rows.join("\n")).unwrap();
        };
        write("benign.csv", 4);
        write("mirai.csv", 2);
        std::fs::write(
            dir.path().join("manifest.csv"),
            "device_id,path,class\ndoorbell,benign.csv,benign\ndoorbell,mirai.csv,mirai_udp\n",
        )
        .unwrap();
        let fleet = load_manifest(&dir.path().join("manifest.csv"), FEATURE_DIM, false).unwrap();
        assert_eq!(fleet.len(), 1);
        let labels: Vec<u8> = fleet[0]
            .samples
            .iter()
            .map(|s| s.label.unwrap().bit())
            .collect();
        assert_eq!(labels, vec![0, 1, 0, 0, 1, 0]);
        assert!(fleet[0]
            .samples
            .iter()
            .enumerate()
            .all(|(i, s)| s.seq_index == i as u64));
    }

    #[test]
    fn supervised_split_fractions() {
        let part = chronological_split("d", &stream(1000, alternating), Mode::Supervised).unwrap();
        assert_eq!(
            (part.train.len(), part.unused.len(), part.test.len()),
            (790, 10, 200)
        );
        assert!(part.threshold_sel.is_empty());
        let max_train = part.train.iter().map(|s| s.seq_index).max().unwrap();
        let min_unused = part.unused.iter().map(|s| s.seq_index).min().unwrap();
        let min_test = part.test.iter().map(|s| s.seq_index).min().unwrap();
        assert!(max_train < min_unused && min_unused < min_test);
    }

    #[test]
    fn unsupervised_split_fractions() {
        let mut samples = stream(1000, |_| Label::Benign);
        samples.extend((0..30).map(|i| Sample {
            features: vec![0.0, 0.0],
            label: Some(Label::Attack),
            seq_index: 1000 + i,
        }));
        let part = chronological_split("d", &samples, Mode::Unsupervised).unwrap();
        assert_eq!(part.train.len(), 395);
        assert_eq!(part.threshold_sel.len(), 395);
        assert_eq!(part.unused.len(), 10);
        assert_eq!(part.test.len(), 230);
        assert!(part.train.iter().all(|s| s.label == Some(Label::Benign)));
        assert!(part
            .threshold_sel
            .iter()
            .all(|s| s.label == Some(Label::Benign)));
        let attacks = part
            .test
            .iter()
            .filter(|s| s.label == Some(Label::Attack))
            .count();
        assert_eq!(attacks, 30);
    }

    #[test]
    fn too_few_samples_is_an_empty_part_error() {
        assert!(matches!(
            chronological_split("d", &stream(2, alternating), Mode::Supervised),
            Err(Error::EmptyPart { .. })
        ));
        assert!(matches!(
            chronological_split("d", &stream(3, |_| Label::Benign), Mode::Unsupervised),
            Err(Error::EmptyPart { .. })
        ));
    }

    #[test]
    fn split_is_a_partition() {
        let samples = stream(537, alternating);
        let part = chronological_split("d", &samples, Mode::Supervised).unwrap();
        let mut seen: Vec<u64> = part
            .train
            .iter()
            .chain(&part.unused)
            .chain(&part.test)
            .map(|s| s.seq_index)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..537).collect::<Vec<u64>>());
    }

    #[test]
    fn preset_sizes() {
        assert_eq!(
            target_part_sizes(Mode::Supervised, BalanceSpec::SUPERVISED_SAMPLES),
            [79_000, 0, 1_000, 20_000]
        );
        assert_eq!(
            target_part_sizes(Mode::Unsupervised, BalanceSpec::UNSUPERVISED_SAMPLES),
            [3_950, 3_950, 100, 2_000]
        );
    }

    fn class_counts(samples: &[Sample]) -> (usize, usize) {
        let attack = samples
            .iter()
            .filter(|s| s.label == Some(Label::Attack))
            .count();
        (samples.len() - attack, attack)
    }

    #[test]
    fn balanced_preset_hits_exact_class_counts() {
        let part = chronological_split("d", &stream(2000, alternating), Mode::Supervised).unwrap();
        let spec = BalanceSpec::new(0.5, 100_000).unwrap();
        let balanced = rebalance(&part, &spec, Mode::Supervised, 3).unwrap();
        let (tb, ta) = class_counts(&balanced.train);
        let (sb, sa) = class_counts(&balanced.test);
        assert_eq!((tb, ta), (39_500, 39_500));
        assert_eq!((sb, sa), (10_000, 10_000));
        // Unused stays as split: 50,000 per class over train and test plus the gap.
        assert_eq!(tb + sb + 500, 50_000);
    }

    #[test]
    fn upsampling_keeps_every_original() {
        // 30 benign originals, 50 needed.
        let samples = stream(38, |i| if i < 30 { Label::Benign } else { Label::Attack });
        let part = DevicePartition {
            device_id: "d".into(),
            train: samples.clone(),
            threshold_sel: vec![],
            unused: vec![],
            test: samples,
        };
        let spec = BalanceSpec::new(50.0 / 60.0, 76).unwrap();
        let out = rebalance(&part, &spec, Mode::Supervised, 11).unwrap();
        let (benign, _) = class_counts(&out.train);
        assert_eq!(out.train.len(), 60);
        assert_eq!(benign, 50);
        // Multiset oracle: count occurrences of every original benign index.
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for s in out.train.iter().filter(|s| s.label == Some(Label::Benign)) {
            *counts.entry(s.seq_index).or_default() += 1;
        }
        assert_eq!(counts.len(), 30);
        assert!(counts.values().all(|&c| c >= 1));
        assert_eq!(counts.values().sum::<usize>(), 50);
        assert!(counts.keys().all(|&k| k < 30));
    }

    #[test]
    fn missing_class_is_an_error() {
        let part =
            chronological_split("d", &stream(100, |_| Label::Benign), Mode::Supervised).unwrap();
        let spec = BalanceSpec::new(0.5, 100).unwrap();
        assert!(matches!(
            rebalance(&part, &spec, Mode::Supervised, 0),
            Err(Error::MissingClass {
                class: "attack",
                ..
            })
        ));
    }

    #[test]
    fn unsupervised_rebalance_sizes() {
        let samples = stream(3000, alternating);
        let part = chronological_split("d", &samples, Mode::Unsupervised).unwrap();
        let spec = BalanceSpec::new(0.5, BalanceSpec::UNSUPERVISED_SAMPLES).unwrap();
        let out = rebalance(&part, &spec, Mode::Unsupervised, 5).unwrap();
        assert_eq!(class_counts(&out.train), (3_950, 0));
        assert_eq!(class_counts(&out.threshold_sel), (3_950, 0));
        assert_eq!(class_counts(&out.test), (1_000, 1_000));
        let max_train = out.train.iter().map(|s| s.seq_index).max().unwrap();
        let min_test = out
            .test
            .iter()
            .filter(|s| s.label == Some(Label::Benign))
            .map(|s| s.seq_index)
            .min()
            .unwrap();
        assert!(max_train < min_test);
    }

    #[test]
    fn rejects_bad_balance() {
        assert!(BalanceSpec::new(0.0, 10).is_err());
        assert!(BalanceSpec::new(1.0, 10).is_err());
        assert!(BalanceSpec::new(0.5, 0).is_err());
    }

    #[test]
    fn synthetic_fleet_is_deterministic() {
        let spec = SyntheticSpec::new(9, 1000, 115);
        let a = generate_synthetic_fleet(&spec, 7).unwrap();
        let b = generate_synthetic_fleet(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_fleet(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_shape() {
        let fleet = generate_synthetic_fleet(&SyntheticSpec::new(2, 10, 4), 99).unwrap();
        assert_eq!(fleet.len(), 2);
        for device in &fleet {
            assert_eq!(device.samples.len(), 10);
            assert!(device
                .samples
                .iter()
                .all(|s| s.features.len() == 4 && s.label.is_some()));
        }
    }

    #[test]
    fn synthetic_config_errors() {
        assert!(generate_synthetic_fleet(&SyntheticSpec::new(1, 10, 4), 0).is_err());
        assert!(generate_synthetic_fleet(&SyntheticSpec::new(2, 10, 0), 0).is_err());
    }

    #[test]
    fn synthetic_devices_are_non_iid() {
        let fleet = generate_synthetic_fleet(&SyntheticSpec::new(9, 1000, 115), 7).unwrap();
        let means: Vec<Vec<f64>> = fleet
            .iter()
            .map(|d| {
                let benign: Vec<&Sample> = d
                    .samples
                    .iter()
                    .filter(|s| s.label == Some(Label::Benign))
                    .collect();
                (0..115)
                    .map(|j| {
                        benign.iter().map(|s| s.features[j]).sum::<f64>() / benign.len() as f64
                    })
                    .collect()
            })
            .collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.0, "devices {i} and {j} share a benign mean");
            }
        }
    }

    #[test]
    fn written_fleet_loads_back() {
        let fleet = generate_synthetic_fleet(&SyntheticSpec::new(2, 40, 3), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fleet(&fleet, dir.path()).unwrap();
        let loaded = load_manifest(&manifest, 3, true).unwrap();
        assert_eq!(loaded.len(), 2);
        for (orig, back) in fleet.iter().zip(&loaded) {
            assert_eq!(orig.device_id, back.device_id);
            let key = |s: &Sample| {
                (
                    s.label.unwrap().bit(),
                    s.features.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                )
            };
            let mut a: Vec<_> = orig.samples.iter().map(key).collect();
            let mut b: Vec<_> = back.samples.iter().map(key).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn synthetic_file_defaults() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "n_devices = 3\nseed = 11").unwrap();
        let parsed = SyntheticFile::load(file.path()).unwrap();
        assert_eq!(parsed.seed, 11);
        assert_eq!(
            parsed.spec,
            SyntheticSpec {
                n_devices: 3,
                ..SyntheticSpec::default()
            }
        );
    }
}
