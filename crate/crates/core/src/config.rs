//! Run configuration files (TOML). Every key is optional; omitted keys take
//! the reference defaults (full-size network, Dice loss,
//! elastic augmentation). Unknown keys are rejected with the nearest valid key.
//!
//! ```toml
//! [net]
//! levels = 5
//! base_channels = 16
//! input_depth = 104
//! input_height = 352
//! input_width = 240
//!
//! [train]
//! loss = "dice"            # dice | wbce
//! augmentation = "elastic" # none | rigid | elastic
//! lr = 1e-5
//!
//! [[data.train]]
//! id = "scan01"
//! ct = "scan01_ct.vol"
//! lung = "scan01_lung.vol"
//! truth = "scan01_truth.vol"
//! ```
//!
//! Validation patches are re-augmented with fresh draws every epoch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Augmentation};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::trainer::{EarlyStop, TrainConfig};
use crate::unet::UnetConfig;

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "net",
        &[
            "levels",
            "base_channels",
            "in_channels",
            "convs_down_per_level",
            "convs_up_per_level",
            "kernel",
            "pool",
            "axial_disabled_at_deepest",
            "input_depth",
            "input_height",
            "input_width",
        ],
    ),
    (
        "train",
        &[
            "loss",
            "augmentation",
            "lr",
            "max_epochs",
            "patience",
            "early_stop",
            "seed",
            "queue_depth",
            "mask_input",
            "epsilon",
        ],
    ),
    ("patch", &["overlap", "crop_margin"]),
    ("augment", &["max_angle_deg", "elastic_sigma", "elastic_grid", "flip_axes"]),
    ("data", &["train", "val", "test"]),
    ("output", &["dir"]),
];

const SCAN_KEYS: &[&str] = &["id", "ct", "lung", "truth", "exclude"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NetSection {
    levels: usize,
    base_channels: usize,
    in_channels: usize,
    convs_down_per_level: usize,
    convs_up_per_level: usize,
    kernel: [usize; 3],
    pool: [usize; 3],
    axial_disabled_at_deepest: bool,
    input_depth: usize,
    input_height: usize,
    input_width: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let n = UnetConfig::default();
        NetSection {
            levels: n.levels,
            base_channels: n.base_channels,
            in_channels: n.in_channels,
            convs_down_per_level: n.convs_down_per_level,
            convs_up_per_level: n.convs_up_per_level,
            kernel: n.kernel,
            pool: n.pool,
            axial_disabled_at_deepest: n.axial_disabled_at_deepest,
            input_depth: n.input_shape[0],
            input_height: n.input_shape[1],
            input_width: n.input_shape[2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    loss: LossKind,
    augmentation: Augmentation,
    lr: f64,
    max_epochs: usize,
    patience: usize,
    early_stop: EarlyStop,
    seed: u64,
    queue_depth: usize,
    mask_input: bool,
    epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            loss: t.loss,
            augmentation: t.augmentation,
            lr: t.lr,
            max_epochs: t.max_epochs,
            patience: t.patience,
            early_stop: t.early_stop,
            seed: t.seed,
            queue_depth: t.queue_depth,
            mask_input: t.mask_input,
            epsilon: t.epsilon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PatchSection {
    overlap: f64,
    crop_margin: usize,
}

impl Default for PatchSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        PatchSection {
            overlap: t.overlap,
            crop_margin: t.crop_margin,
        }
    }
}

/// File locations of one scan; relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPaths {
    pub id: String,
    pub ct: PathBuf,
    pub lung: PathBuf,
    pub truth: PathBuf,
    #[serde(default)]
    pub exclude: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Vec<ScanPaths>,
    pub val: Vec<ScanPaths>,
    pub test: Vec<ScanPaths>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    net: NetSection,
    train: TrainSection,
    patch: PatchSection,
    augment: AugmentConfig,
    data: DataConfig,
    output: OutputSection,
}

/// Everything a run needs, validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

fn nearest<'a>(key: &str, valid: &[&'a str]) -> &'a str {
    valid
        .iter()
        .min_by_key(|v| strsim::levenshtein(key, v))
        .copied()
        .unwrap_or("")
}

fn unknown(field: String, key: &str, valid: &[&str]) -> Error {
    Error::config(
        field,
        format!(
            "unknown key; nearest valid key is `{}` (valid: {})",
            nearest(key, valid),
            valid.join(", ")
        ),
    )
}

fn check_keys(table: &toml::Table) -> Result<()> {
    let section_names: Vec<&str> = SECTIONS.iter().map(|s| s.0).collect();
    for (name, value) in table {
        let Some((_, keys)) = SECTIONS.iter().find(|s| s.0 == name) else {
            return Err(unknown(name.clone(), name, &section_names));
        };
        let Some(inner) = value.as_table() else {
            return Err(Error::config(name.clone(), "must be a table"));
        };
        for (k, v) in inner {
            if !keys.contains(&k.as_str()) {
                return Err(unknown(format!("{name}.{k}"), k, keys));
            }
            if name == "data" {
                for scan in v.as_array().into_iter().flatten() {
                    for sk in scan.as_table().into_iter().flat_map(|t| t.keys()) {
                        if !SCAN_KEYS.contains(&sk.as_str()) {
                            return Err(unknown(format!("data.{k}.{sk}"), sk, SCAN_KEYS));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn section<T: serde::de::DeserializeOwned + Default>(table: &toml::Table, name: &str) -> Result<T> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(name, e.message().to_string())),
    }
}

/// Parses and validates a config document. `base` resolves relative data paths.
pub fn parse_config_str(text: &str, base: Option<&Path>) -> Result<RunConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    check_keys(&table)?;
    let file = FileConfig {
        net: section(&table, "net")?,
        train: section(&table, "train")?,
        patch: section(&table, "patch")?,
        augment: section(&table, "augment")?,
        data: section(&table, "data")?,
        output: section(&table, "output")?,
    };
    let n = file.net;
    let t = file.train;
    let train = TrainConfig {
        loss: t.loss,
        augmentation: t.augmentation,
        lr: t.lr,
        max_epochs: t.max_epochs,
        patience: t.patience,
        early_stop: t.early_stop,
        seed: t.seed,
        overlap: file.patch.overlap,
        crop_margin: file.patch.crop_margin,
        queue_depth: t.queue_depth,
        mask_input: t.mask_input,
        epsilon: t.epsilon,
        augment: file.augment,
        net: UnetConfig {
            levels: n.levels,
            base_channels: n.base_channels,
            in_channels: n.in_channels,
            convs_down_per_level: n.convs_down_per_level,
            convs_up_per_level: n.convs_up_per_level,
            kernel: n.kernel,
            pool: n.pool,
            axial_disabled_at_deepest: n.axial_disabled_at_deepest,
            input_shape: [n.input_depth, n.input_height, n.input_width],
        },
    };
    train.validate_setup()?;
    let mut data = file.data;
    if let Some(base) = base {
        for s in data.train.iter_mut().chain(&mut data.val).chain(&mut data.test) {
            for p in [&mut s.ct, &mut s.lung, &mut s.truth]
                .into_iter()
                .chain(s.exclude.as_mut())
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
    let output_dir = file.output.dir.map(|d| match base {
        Some(b) if d.is_relative() => b.join(d),
        _ => d,
    });
    Ok(RunConfig {
        train,
        data,
        output_dir,
    })
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path.parent())
}

/// Renders `cfg` back into the file schema (data paths as stored).
pub fn to_toml(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let n = &t.net;
    let file = FileConfig {
        net: NetSection {
            levels: n.levels,
            base_channels: n.base_channels,
            in_channels: n.in_channels,
            convs_down_per_level: n.convs_down_per_level,
            convs_up_per_level: n.convs_up_per_level,
            kernel: n.kernel,
            pool: n.pool,
            axial_disabled_at_deepest: n.axial_disabled_at_deepest,
            input_depth: n.input_shape[0],
            input_height: n.input_shape[1],
            input_width: n.input_shape[2],
        },
        train: TrainSection {
            loss: t.loss,
            augmentation: t.augmentation,
            lr: t.lr,
            max_epochs: t.max_epochs,
            patience: t.patience,
            early_stop: t.early_stop,
            seed: t.seed,
            queue_depth: t.queue_depth,
            mask_input: t.mask_input,
            epsilon: t.epsilon,
        },
        patch: PatchSection {
            overlap: t.overlap,
            crop_margin: t.crop_margin,
        },
        augment: t.augment.clone(),
        data: cfg.data.clone(),
        output: OutputSection {
            dir: cfg.output_dir.clone(),
        },
    };
    toml::to_string(&file).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("", None).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.net.levels, 5);
        assert_eq!(c.train.net.base_channels, 16);
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.train.patience, 15);
        assert_eq!(c.train.max_epochs, 300);
    }

    #[test]
    fn depth_rule_is_named() {
        let e = parse_config_str("[net]\nlevels = 5\ninput_depth = 100\n", None).unwrap_err();
        match e {
            Error::Config { field, rule } => {
                assert_eq!(field, "net.input_depth");
                assert!(rule.contains("divisible by 8"), "{rule}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_key_names_nearest() {
        let e = parse_config_str("[train]\nlearning_rate = 0.1\npatiense = 3\n", None).unwrap_err();
        let Error::Config { field, rule } = e else { panic!() };
        assert_eq!(field, "train.learning_rate");
        assert!(rule.contains("`lr`") || rule.contains("`early_stop`"), "{rule}");
        let e = parse_config_str("[train]\npatiense = 3\n", None).unwrap_err();
        assert!(e.to_string().contains("`patience`"));
        let e = parse_config_str("[nett]\nlevels = 3\n", None).unwrap_err();
        assert!(e.to_string().contains("`net`"));
        let e = parse_config_str("[[data.train]]\nid='a'\nct='a'\nlung='b'\ntruht='c'\n", None).unwrap_err();
        assert!(e.to_string().contains("`truth`"));
    }

    #[test]
    fn bad_setup_and_types_are_config_errors() {
        let e = parse_config_str("[train]\nloss = \"wbce\"\naugmentation = \"elastic\"\n", None).unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        let e = parse_config_str("[train]\nlr = \"fast\"\n", None).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "train"));
        let c = parse_config_str("[train]\nloss = \"wBCE\"\naugmentation = \"rigid\"\n", None).unwrap();
        assert_eq!(c.train.loss, LossKind::Wbce);
    }

    #[test]
    fn round_trips_through_toml() {
        let text = "[net]\nlevels = 3\nbase_channels = 4\ninput_depth = 16\ninput_height = 32\ninput_width = 32\n\
                    [train]\nlr = 0.001\nseed = 9\n[[data.train]]\nid = \"a\"\nct = \"a_ct.vol\"\nlung = \"a_l.vol\"\ntruth = \"a_t.vol\"\n";
        let c = parse_config_str(text, None).unwrap();
        let again = parse_config_str(&to_toml(&c), None).unwrap();
        assert_eq!(c, again);
        let based = parse_config_str(text, Some(Path::new("/runs"))).unwrap();
        assert_eq!(based.data.train[0].ct, PathBuf::from("/runs/a_ct.vol"));
    }
}
