//! Multi-environment dataset model: manifests, image packs, sequential
//! subsetting, and the synthetic distribution-shift generator.
//!
//! On-disk formats:
//! - Manifest: UTF-8 CSV, header `id,image_ref,<task1>,...,<taskK>`, label
//!   tokens `1`, `0`, or empty, LF line endings.
//! - Image pack: little-endian binary, magic `XRPK`, version u16 = 1,
//!   height u16, width u16, count u32, then raw u8 pixels row-major,
//!   images concatenated in index order.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_TASKS: [&str; 4] = ["Cardiomegaly", "Effusion", "Edema", "Consolidation"];

const PACK_MAGIC: &[u8; 4] = b"XRPK";
const PACK_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest header: {0}")]
    BadHeader(String),
    #[error("line {line}: expected {expected} fields, got {got}")]
    RowArity { line: usize, expected: usize, got: usize },
    #[error("line {line}: label token {token:?} outside {{0,1,\"\"}}")]
    BadLabelToken { line: usize, token: String },
    #[error("line {line}: bad image_ref {token:?}")]
    BadImageRef { line: usize, token: String },
    #[error("image_ref out of range, line {line} (ref {image_ref}, pack count {count})")]
    ImageRefRange { line: usize, image_ref: usize, count: usize },
    #[error("line {line}: duplicate record id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("malformed pack: {0}")]
    BadPack(String),
    #[error("subset size {n} exceeds record count {len}")]
    SubsetTooLarge { n: usize, len: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Ordered task identifiers; every label vector indexes into this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSet {
    names: Vec<String>,
}

impl TaskSet {
    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::BadConfig("task set must be non-empty".into()));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(DataError::BadConfig(format!("duplicate task name {a:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for TaskSet {
    fn default() -> Self {
        Self {
            names: DEFAULT_TASKS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Tri-state label: the corpora leave many pathology labels unrecorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Negative,
    Positive,
    Missing,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Negative => write!(f, "0"),
            Label::Positive => write!(f, "1"),
            Label::Missing => Ok(()),
        }
    }
}

pub type LabelVector = Vec<Label>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub image_ref: usize,
    pub labels: LabelVector,
}

/// One environment: named records plus provenance metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub region: String,
    pub tasks: TaskSet,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Contiguous 8-bit grayscale image planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePack {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImagePack {
    pub fn count(&self) -> usize {
        if self.height == 0 || self.width == 0 {
            0
        } else {
            self.pixels.len() / (self.height * self.width)
        }
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.pixels[index * plane..(index + 1) * plane]
    }
}

/// Normalize an 8-bit intensity into [-1, 1].
pub fn normalize_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn load_manifest(
    manifest_path: &Path,
    pack_path: &Path,
) -> Result<(DatasetManifest, ImagePack), DataError> {
    let pack = load_pack(pack_path)?;
    let text = fs::read_to_string(manifest_path)?;
    let name = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = parse_manifest(&text, &name, pack.count())?;
    Ok((manifest, pack))
}

pub fn parse_manifest(
    text: &str,
    name: &str,
    pack_count: usize,
) -> Result<DatasetManifest, DataError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::BadHeader("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "image_ref" {
        return Err(DataError::BadHeader(format!(
            "expected `id,image_ref,<task>,...`, got {header:?}"
        )));
    }
    let tasks = TaskSet::new(cols[2..].iter().map(|s| s.to_string()).collect())
        .map_err(|e| DataError::BadHeader(e.to_string()))?;
    let arity = 2 + tasks.len();

    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != arity {
            return Err(DataError::RowArity {
                line: lineno,
                expected: arity,
                got: fields.len(),
            });
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line: lineno, id });
        }
        let image_ref: usize = fields[1].parse().map_err(|_| DataError::BadImageRef {
            line: lineno,
            token: fields[1].to_string(),
        })?;
        if image_ref >= pack_count {
            return Err(DataError::ImageRefRange {
                line: lineno,
                image_ref,
                count: pack_count,
            });
        }
        let labels = fields[2..]
            .iter()
            .map(|tok| match *tok {
                "0" => Ok(Label::Negative),
                "1" => Ok(Label::Positive),
                "" => Ok(Label::Missing),
                other => Err(DataError::BadLabelToken {
                    line: lineno,
                    token: other.to_string(),
                }),
            })
            .collect::<Result<LabelVector, _>>()?;
        records.push(ImageRecord { id, image_ref, labels });
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        region: String::new(),
        tasks,
        records,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("id,image_ref");
    for t in manifest.tasks.names() {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&r.id);
        out.push(',');
        out.push_str(&r.image_ref.to_string());
        for l in &r.labels {
            out.push(',');
            out.push_str(&l.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_pack(path: &Path) -> Result<ImagePack, DataError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 14 {
        return Err(DataError::BadPack("file shorter than header".into()));
    }
    if &bytes[0..4] != PACK_MAGIC {
        return Err(DataError::BadPack("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PACK_VERSION {
        return Err(DataError::BadPack(format!("unsupported version {version}")));
    }
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let count = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    if height == 0 || width == 0 {
        return Err(DataError::BadPack("zero image dimension".into()));
    }
    let expected = count * height * width;
    let pixels = bytes[14..].to_vec();
    if pixels.len() != expected {
        return Err(DataError::BadPack(format!(
            "expected {expected} pixel bytes, got {}",
            pixels.len()
        )));
    }
    Ok(ImagePack { height, width, pixels })
}

pub fn write_pack(pack: &ImagePack, path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path)?;
    f.write_all(PACK_MAGIC)?;
    f.write_all(&PACK_VERSION.to_le_bytes())?;
    f.write_all(&(pack.height as u16).to_le_bytes())?;
    f.write_all(&(pack.width as u16).to_le_bytes())?;
    f.write_all(&(pack.count() as u32).to_le_bytes())?;
    f.write_all(&pack.pixels)?;
    Ok(())
}

/// First `n` records in original order.
pub fn subset_sequential(manifest: &DatasetManifest, n: usize) -> Result<DatasetManifest, DataError> {
    if n > manifest.records.len() {
        return Err(DataError::SubsetTooLarge {
            n,
            len: manifest.records.len(),
        });
    }
    Ok(DatasetManifest {
        name: manifest.name.clone(),
        region: manifest.region.clone(),
        tasks: manifest.tasks.clone(),
        records: manifest.records[..n].to_vec(),
    })
}

/// Per-task (n_positive, n_negative, n_missing).
pub fn class_counts(manifest: &DatasetManifest) -> Vec<(usize, usize, usize)> {
    let mut counts = vec![(0usize, 0usize, 0usize); manifest.tasks.len()];
    for r in &manifest.records {
        for (t, l) in r.labels.iter().enumerate() {
            match l {
                Label::Positive => counts[t].0 += 1,
                Label::Negative => counts[t].1 += 1,
                Label::Missing => counts[t].2 += 1,
            }
        }
    }
    counts
}

/// Configuration for the synthetic distribution-shift generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_envs: usize,
    pub n_per_env: usize,
    pub image_size: usize,
    /// Strength of the label-consistent center-blob signal, in [0, 1].
    pub core_strength: f64,
    /// Per-environment corner-patch correlation, each in [-1, 1].
    pub spurious_strength: Vec<f64>,
    /// Pixel noise standard deviation as a fraction of full intensity.
    pub noise_std: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_envs < 2 {
            return Err(DataError::BadConfig("n_envs must be >= 2".into()));
        }
        if self.spurious_strength.len() != self.n_envs {
            return Err(DataError::BadConfig(
                "spurious length must equal envs".into(),
            ));
        }
        if self.image_size < 4 {
            return Err(DataError::BadConfig("image_size must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.core_strength) {
            return Err(DataError::BadConfig("core_strength must be in [0,1]".into()));
        }
        for s in &self.spurious_strength {
            if !(-1.0..=1.0).contains(s) {
                return Err(DataError::BadConfig(
                    "spurious_strength entries must be in [-1,1]".into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(DataError::BadConfig("missing_rate must be in [0,1)".into()));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_envs: 2,
            n_per_env: 200,
            image_size: 16,
            core_strength: 0.6,
            spurious_strength: vec![0.8, -0.8],
            noise_std: 0.05,
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

// Per-task labels share a latent severity so that one blob intensity can
// correlate with every task at the configured strength.
const LABEL_FLIP_RATE: f64 = 0.02;

// pixel-intensity swing per unit of signal; keeps levels inside [0, 1]
// for typical signal magnitudes
const SIGNAL_AMPLITUDE: f64 = 0.2;

fn clamp_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

// Box-Muller from two uniform draws; consumes exactly two rng values.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate `n_envs` environments with a shared core signal and a
/// per-environment spurious corner patch. Pure function of the config.
pub fn generate_synthetic(
    cfg: &SynthConfig,
) -> Result<Vec<(DatasetManifest, ImagePack)>, DataError> {
    cfg.validate()?;
    let tasks = TaskSet::default();
    let s = cfg.image_size;
    let blob_lo = s / 4;
    let blob_hi = s - s / 4;
    let patch = (3 * s / 8).max(2);

    let mut envs = Vec::with_capacity(cfg.n_envs);
    for e in 0..cfg.n_envs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(e as u64 + 1)));
        let spurious = cfg.spurious_strength[e];
        let mut records = Vec::with_capacity(cfg.n_per_env);
        let mut pixels = Vec::with_capacity(cfg.n_per_env * s * s);
        for i in 0..cfg.n_per_env {
            // latent severity drives both labels and image signals
            let latent: f64 = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            let labels: LabelVector = (0..tasks.len())
                .map(|_| {
                    let flip = rng.random::<f64>() < LABEL_FLIP_RATE;
                    let pos = (latent > 0.0) != flip;
                    if rng.random::<f64>() < cfg.missing_rate {
                        Label::Missing
                    } else if pos {
                        Label::Positive
                    } else {
                        Label::Negative
                    }
                })
                .collect();

            // intensity = strength * latent + sqrt(1 - strength^2) * noise,
            // so the blob/patch mean correlates with the latent (and hence
            // each label) at exactly the configured strength
            let core_sig = cfg.core_strength * latent
                + (1.0 - cfg.core_strength * cfg.core_strength).sqrt() * gauss(&mut rng);
            let spur_sig =
                spurious * latent + (1.0 - spurious * spurious).sqrt() * gauss(&mut rng);
            let blob_level = 0.5 + SIGNAL_AMPLITUDE * core_sig;
            let patch_level = 0.5 + SIGNAL_AMPLITUDE * spur_sig;
            for y in 0..s {
                for x in 0..s {
                    let in_blob = y >= blob_lo && y < blob_hi && x >= blob_lo && x < blob_hi;
                    let in_patch = y < patch && x < patch;
                    let base = if in_patch {
                        patch_level
                    } else if in_blob {
                        blob_level
                    } else {
                        0.5
                    };
                    let v = base + cfg.noise_std * gauss(&mut rng);
                    pixels.push(clamp_u8(v));
                }
            }
            records.push(ImageRecord {
                id: format!("env{e}_{i:06}"),
                image_ref: i,
                labels,
            });
        }
        let manifest = DatasetManifest {
            name: format!("env{e}"),
            region: format!("synthetic-{e}"),
            tasks: tasks.clone(),
            records,
        };
        let pack = ImagePack {
            height: s,
            width: s,
            pixels,
        };
        envs.push((manifest, pack));
    }
    Ok(envs)
}
