//! Flat key/value config files.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines are ignored. Keys are dot-separated paths. Model keys are
//! required; `train.*` and `dataset*` keys are optional with defaults.
//!
//! ```text
//! image_size = 32          patch_size = 4        input_dim = 64
//! mlp_factor = 1           map_dim = 128         sampler = gaussian
//! blocks = 3
//! block.0.layers = 1       block.0.heads = 2     block.0.group_tokens = 8
//! block.0.group_dim = 16   block.0.iterations = 3
//! ```
//!
//! Per-block `block.N.sampler` overrides the global `sampler`. Unknown keys
//! are rejected, and a missing required key is reported by name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grouping::GroupingConfig;
use crate::model::{BlockConfig, ModelConfig, ModelError};
use crate::samplers::SamplerKind;
use crate::tensor::Dtype;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected 'key = value', got '{content}'")]
    BadLine { line: usize, content: String },
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
    #[error("missing required key '{0}'")]
    MissingKey(String),
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': cannot parse '{value}' as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_frac: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub center_momentum: f64,
    pub prototypes: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub local_views: usize,
    pub local_size: usize,
    pub global_crop_min: f64,
    pub global_crop_max: f64,
    pub local_crop_min: f64,
    pub local_crop_max: f64,
    pub checkpoint_every: u64,
    pub entropy_every: u64,
    pub precision: Dtype,
    pub probe_train: usize,
    pub probe_test: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 64,
            lr: 1.5e-3,
            lr_min: 1e-5,
            warmup_frac: 0.1,
            weight_decay: 0.04,
            clip_norm: 3.0,
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_frac: 0.3,
            ema_start: 0.996,
            ema_end: 1.0,
            center_momentum: 0.9,
            prototypes: 256,
            head_hidden: 256,
            head_bottleneck: 64,
            local_views: 2,
            local_size: 16,
            global_crop_min: 0.5,
            global_crop_max: 1.0,
            local_crop_min: 0.25,
            local_crop_max: 0.6,
            checkpoint_every: 500,
            entropy_every: 100,
            precision: Dtype::F32,
            probe_train: 512,
            probe_test: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub enum DatasetSpec {
    Synthetic,
    Dir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub spec: DatasetSpec,
    /// Synthetic pool size addressed by the training sampler.
    pub size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            spec: DatasetSpec::Synthetic,
            size: 4096,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

struct KeyBag {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KeyBag {
    fn take(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.take(key)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parse<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected,
            }),
        }
    }

    fn parse_required<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        self.required(key)?
            .parse::<T>()
            .map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: self.map[key].clone(),
                expected,
            })
    }

    fn unused(&self) -> Option<String> {
        let used = self.used.borrow();
        self.map.keys().find(|k| !used.contains(*k)).cloned()
    }
}

pub fn parse_config(text: &str) -> Result<FileConfig, ConfigError> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: no + 1,
            content: raw.to_string(),
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if map.insert(k.clone(), v).is_some() {
            return Err(ConfigError::DuplicateKey(k));
        }
    }
    let bag = KeyBag {
        map,
        used: Default::default(),
    };

    let sampler_of = |key: &str, value: &str| -> Result<SamplerKind, ConfigError> {
        SamplerKind::parse(value).ok_or_else(|| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "gaussian | flow",
        })
    };
    let global_sampler = sampler_of("sampler", bag.required("sampler")?)?;
    let n_blocks: usize = bag.parse_required("blocks", "positive integer")?;
    let mut blocks = Vec::new();
    for i in 0..n_blocks {
        let k = |s: &str| format!("block.{i}.{s}");
        let sampler = match bag.take(&k("sampler")) {
            Some(v) => sampler_of(&k("sampler"), v)?,
            None => global_sampler,
        };
        blocks.push(BlockConfig {
            n_layers: bag.parse_required(&k("layers"), "positive integer")?,
            grouping: GroupingConfig {
                heads: bag.parse_required(&k("heads"), "positive integer")?,
                n_group_tokens: bag.parse_required(&k("group_tokens"), "positive integer")?,
                group_dim: bag.parse_required(&k("group_dim"), "positive integer")?,
                iterations: bag.parse_required(&k("iterations"), "positive integer")?,
                sampler,
            },
        });
    }
    let model = ModelConfig {
        image_size: bag.parse_required("image_size", "positive integer")?,
        patch_size: bag.parse_required("patch_size", "positive integer")?,
        input_dim: bag.parse_required("input_dim", "positive integer")?,
        mlp_factor: bag.parse_required("mlp_factor", "positive integer")?,
        map_dim: bag.parse_required("map_dim", "positive integer")?,
        readout_value_proj: bag.parse("readout_value_proj", "true | false")?.unwrap_or(true),
        blocks,
    };
    model.validate()?;

    let mut train = TrainConfig::default();
    macro_rules! opt {
        ($field:ident, $key:expr, $what:expr) => {
            if let Some(v) = bag.parse($key, $what)? {
                train.$field = v;
            }
        };
    }
    opt!(steps, "train.steps", "integer");
    opt!(batch_size, "train.batch_size", "integer");
    opt!(lr, "train.lr", "float");
    opt!(lr_min, "train.lr_min", "float");
    opt!(warmup_frac, "train.warmup_frac", "float");
    opt!(weight_decay, "train.weight_decay", "float");
    opt!(clip_norm, "train.clip_norm", "float");
    opt!(student_temp, "train.student_temp", "float");
    opt!(teacher_temp_start, "train.teacher_temp_start", "float");
    opt!(teacher_temp_end, "train.teacher_temp_end", "float");
    opt!(
        teacher_temp_warmup_frac,
        "train.teacher_temp_warmup_frac",
        "float"
    );
    opt!(ema_start, "train.ema_start", "float");
    opt!(ema_end, "train.ema_end", "float");
    opt!(center_momentum, "train.center_momentum", "float");
    opt!(prototypes, "train.prototypes", "integer");
    opt!(head_hidden, "train.head_hidden", "integer");
    opt!(head_bottleneck, "train.head_bottleneck", "integer");
    opt!(local_views, "train.local_views", "integer");
    opt!(local_size, "train.local_size", "integer");
    opt!(global_crop_min, "train.global_crop_min", "float");
    opt!(global_crop_max, "train.global_crop_max", "float");
    opt!(local_crop_min, "train.local_crop_min", "float");
    opt!(local_crop_max, "train.local_crop_max", "float");
    opt!(checkpoint_every, "train.checkpoint_every", "integer");
    opt!(entropy_every, "train.entropy_every", "integer");
    opt!(probe_train, "train.probe_train", "integer");
    opt!(probe_test, "train.probe_test", "integer");
    if let Some(v) = bag.take("train.precision") {
        train.precision = Dtype::parse(v).ok_or_else(|| ConfigError::BadValue {
            key: "train.precision".into(),
            value: v.to_string(),
            expected: "f32 | f64",
        })?;
    }

    let mut dataset = DatasetConfig::default();
    if let Some(v) = bag.take("dataset") {
        dataset.spec = match v {
            "synthetic" => DatasetSpec::Synthetic,
            path => DatasetSpec::Dir(PathBuf::from(path)),
        };
    }
    if let Some(v) = bag.parse("dataset.size", "integer")? {
        dataset.size = v;
    }

    if let Some(key) = bag.unused() {
        return Err(ConfigError::UnknownKey(key));
    }
    Ok(FileConfig {
        model,
        train,
        dataset,
    })
}

pub fn load_config(path: &Path) -> Result<FileConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MICRO: &str = "\
# desk-scale model
image_size = 32
patch_size = 4
input_dim = 64
mlp_factor = 1
map_dim = 128
sampler = gaussian
blocks = 3
block.0.layers = 1
block.0.heads = 2
block.0.group_tokens = 8
block.0.group_dim = 16
block.0.iterations = 3
block.1.layers = 1
block.1.heads = 2
block.1.group_tokens = 8
block.1.group_dim = 24
block.1.iterations = 3
block.2.layers = 1
block.2.heads = 2
block.2.group_tokens = 8
block.2.group_dim = 32
block.2.iterations = 3
train.steps = 100
";

    #[test]
    fn parses_a_full_model() {
        let cfg = parse_config(MICRO).unwrap();
        assert_eq!(cfg.model.n_patches(), 64);
        assert_eq!(cfg.model.blocks.len(), 3);
        assert_eq!(cfg.model.blocks[1].grouping.group_dim, 24);
        assert_eq!(cfg.train.steps, 100);
        assert_eq!(cfg.train.batch_size, 64); // default
    }

    #[test]
    fn missing_key_is_named() {
        let text = MICRO.replace("block.2.iterations = 3\n", "");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::MissingKey(ref k) if k == "block.2.iterations"));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MICRO}\nnot_a_key = 1\n");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "not_a_key"));
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(matches!(
            parse_config(&format!("{MICRO}train.steps = 7\n")),
            Err(ConfigError::DuplicateKey(_))
        ));
        assert!(matches!(
            parse_config("image_size 32\n"),
            Err(ConfigError::BadLine { line: 1, .. })
        ));
    }

    #[test]
    fn per_block_sampler_overrides_global() {
        let text = format!("{MICRO}block.1.sampler = flow\n");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.model.blocks[0].grouping.sampler, SamplerKind::Gaussian);
        assert_eq!(cfg.model.blocks[1].grouping.sampler, SamplerKind::Flow);
    }

    #[test]
    fn bad_values_name_key_and_expectation() {
        let text = MICRO.replace("map_dim = 128", "map_dim = lots");
        let err = parse_config(&text).unwrap_err();
        match err {
            ConfigError::BadValue { key, expected, .. } => {
                assert_eq!(key, "map_dim");
                assert_eq!(expected, "positive integer");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_spec_paths() {
        let cfg = parse_config(&format!("{MICRO}dataset = /tmp/imgs\n")).unwrap();
        assert!(matches!(cfg.dataset.spec, DatasetSpec::Dir(_)));
        let cfg = parse_config(&format!("{MICRO}dataset = synthetic\n")).unwrap();
        assert!(matches!(cfg.dataset.spec, DatasetSpec::Synthetic));
    }
}
