//! Flat `key=value` run configuration, its canonical form and content hash,
//! and the run manifest.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default
//! except `dataset` and `n_classes`. The canonical form lists every key in
//! [`KEYS`] order with its effective value, so two configs that resolve to
//! the same settings share a hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{BarDomain, BlobParams, DomainShift};
use crate::error::{Error, Result};
use crate::training::{AdaptationConfig, Mode, DEFAULT_SEEDS};

pub struct KeySpec {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default: Some(default), help }
}

pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "dataset", default: None, help: "blobs, bars or csv" },
    KeySpec { name: "n_classes", default: None, help: "number of classes K" },
    key("mode", "rchc", "adaptation objective: shot or rchc"),
    key("r_th", "0.65", "uncertainty-ratio threshold for the conflict set"),
    key("alpha_ce", "0.3", "weight of the pseudo-label cross-entropy"),
    key("beta_rot", "0.6", "weight of the rotation loss"),
    key("alpha_smooth", "0.1", "label smoothing of the source objective"),
    key("epochs", "15", "adaptation epochs"),
    key("source_epochs", "30", "source training epochs"),
    key("batch_size", "64", "mini-batch size"),
    key("lr", "0.01", "learning rate of new layers; the feature extractor uses a tenth"),
    key("momentum", "0.9", "SGD momentum"),
    key("weight_decay", "0.001", "SGD weight decay"),
    key("seed", "2019", "seed of source training"),
    key("seeds", "2019,2020,2021", "comma-separated adaptation seeds"),
    key("rotation_enabled", "false", "add the rotation self-supervision loss"),
    key("hidden_width", "64", "width of each feature-extractor layer"),
    key("hidden_layers", "2", "number of feature-extractor layers"),
    key("embed_dim", "16", "bottleneck width d"),
    key("checkpoint_every", "0", "write an adaptation checkpoint every N epochs (0 = final only)"),
    key("data_seed", "2019", "seed of the synthetic datasets"),
    key("n_source", "600", "synthetic source samples"),
    key("n_target", "600", "synthetic target samples"),
    key("in_dim", "2", "blob dimensionality"),
    key("radius", "3", "radius of the circle the blob means sit on"),
    key("std", "0.6", "blob standard deviation"),
    key("translation", "", "comma-separated target translation (empty = none)"),
    key("rotation", "0", "target rotation of the first two coordinates, radians"),
    key("imbalance", "0", "linear target class imbalance in [0, 1)"),
    key("bar_source_thickness", "1", "source bar stroke width"),
    key("bar_source_noise", "0.1", "source bar pixel noise"),
    key("bar_target_thickness", "2", "target bar stroke width"),
    key("bar_target_noise", "0.2", "target bar pixel noise"),
    key("source_csv", "", "labeled source CSV (dataset = csv)"),
    key("target_csv", "", "target CSV (dataset = csv)"),
    key("target_has_labels", "true", "whether the target CSV ends with a label column"),
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs(BlobParams),
    Bars { n_source: usize, n_target: usize, source: BarDomain, target: BarDomain },
    Csv { source: PathBuf, target: PathBuf, target_has_labels: bool },
}

impl DatasetSpec {
    /// One-line description for manifests.
    pub fn describe(&self) -> String {
        match self {
            DatasetSpec::Blobs(p) => format!(
                "blobs k={} n_source={} n_target={} in_dim={} radius={:?} std={:?} translation={:?} rotation={:?} ratios={:?}",
                p.n_classes, p.n_source, p.n_target, p.in_dim, p.radius, p.std, p.shift.translation, p.shift.rotation,
                p.shift.class_ratios
            ),
            DatasetSpec::Bars { n_source, n_target, source, target } => format!(
                "bars n_source={n_source} n_target={n_target} source_thickness={} source_noise={:?} target_thickness={} target_noise={:?}",
                source.thickness, source.noise, target.thickness, target.noise
            ),
            DatasetSpec::Csv { source, target, target_has_labels } => format!(
                "csv source={} target={} target_has_labels={target_has_labels}",
                source.display(),
                target.display()
            ),
        }
    }
}

/// Typed view of a resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub n_classes: usize,
    pub adapt: AdaptationConfig,
    pub seeds: Vec<u64>,
    pub checkpoint_every: usize,
    pub data_seed: u64,
    values: BTreeMap<&'static str, String>,
}

/// Raw `key -> value` pairs before defaults and typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<&'static str, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_string(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let spec = key_spec(k).ok_or_else(|| err(format!("unknown key '{k}'")))?;
            if raw.values.insert(spec.name, v.to_string()).is_some() {
                return Err(err(format!("key '{k}' given twice")));
            }
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets `key`, replacing any earlier value. Used for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| Error::config(format!("unknown key '{key}'")))?;
        self.values.insert(spec.name, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Applies defaults and types every value; errors name the offending key.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for spec in KEYS {
            let v = match (self.values.get(spec.name), spec.default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.to_string(),
                (None, None) => return Err(Error::config(format!("missing required key '{}'", spec.name))),
            };
            values.insert(spec.name, v);
        }
        RunConfig::from_values(values)
    }
}

fn field<T: std::str::FromStr>(values: &BTreeMap<&'static str, String>, key: &str) -> Result<T> {
    let v = &values[key];
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse '{v}'")))
}

fn float_list(values: &BTreeMap<&'static str, String>, key: &str) -> Result<Vec<f64>> {
    let v = &values[key];
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::config(format!("{key}: cannot parse '{s}'"))))
        .collect()
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::config(format!("seeds: cannot parse '{s}'"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds: at least one seed is required"));
    }
    Ok(seeds)
}

impl RunConfig {
    fn from_values(values: BTreeMap<&'static str, String>) -> Result<Self> {
        let n_classes: usize = field(&values, "n_classes")?;
        if n_classes < 2 {
            return Err(Error::config(format!("n_classes: need at least 2, got {n_classes}")));
        }
        let adapt = AdaptationConfig {
            mode: values["mode"].parse::<Mode>()?,
            r_th: field(&values, "r_th")?,
            alpha_ce: field(&values, "alpha_ce")?,
            beta_rot: field(&values, "beta_rot")?,
            alpha_smooth: field(&values, "alpha_smooth")?,
            epochs: field(&values, "epochs")?,
            source_epochs: field(&values, "source_epochs")?,
            batch_size: field(&values, "batch_size")?,
            lr: field(&values, "lr")?,
            momentum: field(&values, "momentum")?,
            weight_decay: field(&values, "weight_decay")?,
            seed: field(&values, "seed")?,
            rotation_enabled: field(&values, "rotation_enabled")?,
            hidden_width: field(&values, "hidden_width")?,
            hidden_layers: field(&values, "hidden_layers")?,
            embed_dim: field(&values, "embed_dim")?,
        };
        adapt.validate()?;
        let n_source = field(&values, "n_source")?;
        let n_target = field(&values, "n_target")?;
        let dataset = match values["dataset"].as_str() {
            "blobs" => {
                let imbalance: f64 = field(&values, "imbalance")?;
                if !(0.0..1.0).contains(&imbalance) {
                    return Err(Error::config(format!("imbalance: {imbalance} is outside [0, 1)")));
                }
                DatasetSpec::Blobs(BlobParams {
                    n_classes,
                    n_source,
                    n_target,
                    in_dim: field(&values, "in_dim")?,
                    radius: field(&values, "radius")?,
                    std: field(&values, "std")?,
                    shift: DomainShift {
                        translation: float_list(&values, "translation")?,
                        rotation: field(&values, "rotation")?,
                        class_ratios: crate::data::linear_imbalance(n_classes, imbalance),
                    },
                })
            }
            "bars" => DatasetSpec::Bars {
                n_source,
                n_target,
                source: BarDomain {
                    thickness: field(&values, "bar_source_thickness")?,
                    noise: field(&values, "bar_source_noise")?,
                },
                target: BarDomain {
                    thickness: field(&values, "bar_target_thickness")?,
                    noise: field(&values, "bar_target_noise")?,
                },
            },
            "csv" => {
                let path = |key: &str| -> Result<PathBuf> {
                    let v = &values[key];
                    if v.is_empty() {
                        return Err(Error::config(format!("{key}: required when dataset = csv")));
                    }
                    Ok(PathBuf::from(v))
                };
                DatasetSpec::Csv {
                    source: path("source_csv")?,
                    target: path("target_csv")?,
                    target_has_labels: field(&values, "target_has_labels")?,
                }
            }
            other => return Err(Error::config(format!("dataset: expected blobs, bars or csv, got '{other}'"))),
        };
        Ok(RunConfig {
            dataset,
            n_classes,
            adapt,
            seeds: parse_seeds(&values["seeds"])?,
            checkpoint_every: field(&values, "checkpoint_every")?,
            data_seed: field(&values, "data_seed")?,
            values,
        })
    }

    /// Every key in declaration order with its effective value.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for spec in KEYS {
            let _ = writeln!(s, "{} = {}", spec.name, self.values[spec.name]);
        }
        s
    }

    /// SHA-256 over a git-style blob header and the canonical text.
    pub fn hash(&self) -> String {
        content_hash(&self.canonical())
    }
}

/// `sha256("blob <len>\0" + content)` in lowercase hex.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to rerun a command. The text form is itself a valid
/// config file: the descriptive lines are comments.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub source_checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.config.seeds.iter().map(u64::to_string).collect();
        let mut s = String::from("# rchc run manifest\n");
        let _ = writeln!(s, "# command: {}", self.command);
        let _ = writeln!(s, "# config_hash: {}", self.config.hash());
        let _ = writeln!(s, "# mode: {}", self.config.adapt.mode);
        let _ = writeln!(s, "# seeds: {}", seeds.join(","));
        let _ = writeln!(s, "# dataset: {}", self.config.dataset.describe());
        let _ = writeln!(s, "# out_dir: {}", self.out_dir.display());
        if let Some(c) = &self.source_checkpoint {
            let _ = writeln!(s, "# source_checkpoint: {}", c.display());
        }
        s.push_str(&self.config.canonical());
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn default_seeds_text() -> String {
    DEFAULT_SEEDS.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = blobs\nn_classes = 4\n";

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let c = RawConfig::parse(MINIMAL, "t").unwrap().resolve().unwrap();
        assert_eq!(c.adapt, AdaptationConfig::default());
        assert_eq!(c.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(c.n_classes, 4);
        assert_eq!(default_seeds_text(), key_spec("seeds").unwrap().default.unwrap());
    }

    #[test]
    fn missing_required_key_is_named() {
        let err = RawConfig::parse("dataset = blobs\n", "t").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("n_classes"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn bad_values_name_the_field() {
        let mut raw = RawConfig::parse(MINIMAL, "t").unwrap();
        raw.set("r_th", "1.5").unwrap();
        assert!(raw.resolve().unwrap_err().to_string().contains("r_th"));
        raw.set("r_th", "abc").unwrap();
        assert!(raw.resolve().unwrap_err().to_string().contains("r_th"));
        assert!(raw.set("nope", "1").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RawConfig::parse("dataset = blobs\nwhat\n", "cfg.txt").unwrap_err();
        assert_eq!(err.to_string(), "cfg.txt:2: expected key = value, got 'what'");
        assert!(RawConfig::parse("bogus = 1", "c").is_err());
        assert!(RawConfig::parse("seed = 1\nseed = 2", "c").is_err());
    }

    #[test]
    fn canonical_form_is_stable_and_hash_tracks_content() {
        let a = RawConfig::parse(MINIMAL, "t").unwrap().resolve().unwrap();
        let b = RawConfig::parse("# same\nn_classes=4\ndataset=blobs\nr_th = 0.65", "t").unwrap().resolve().unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.hash(), b.hash());
        let mut raw = RawConfig::parse(MINIMAL, "t").unwrap();
        raw.set("r_th", "0.6").unwrap();
        assert_ne!(raw.resolve().unwrap().hash(), a.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn known_content_hash() {
        // `printf 'blob 0\0' | sha256sum`
        assert_eq!(content_hash(""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn manifest_text_reparses_to_the_same_config() {
        let c = RawConfig::parse(MINIMAL, "t").unwrap().resolve().unwrap();
        let m = RunManifest { command: "adapt".into(), config: c.clone(), out_dir: "out".into(), source_checkpoint: None };
        let again = RawConfig::parse(&m.to_text(), "m").unwrap().resolve().unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn csv_dataset_needs_paths() {
        let err = RawConfig::parse("dataset = csv\nn_classes = 3", "t").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("source_csv"));
    }
}
