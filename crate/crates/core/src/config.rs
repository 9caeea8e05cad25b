//! Run configuration: one TOML document with `data`, `features`, `model`,
//! `heads`, `variant` and `training` sections.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::data::{
    GeneratorConfig, Interaction, CORE_ACTION_TYPES, DAY, HOUR, MONTH, NUM_ACTION_TYPES,
    NUM_GENRES, NUM_MOVIE_SHOW, NUM_TSR, WEEK,
};
use crate::error::{Error, Result};

/// A non-negative span of time, written as `<n><unit>` with units
/// `s`, `min`, `h`, `d`, `w` and `m` (30-day month).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Window(pub i64);

impl Window {
    pub fn secs(self) -> i64 {
        self.0
    }
}

const UNITS: [(&str, i64); 6] = [
    ("m", MONTH),
    ("w", WEEK),
    ("d", DAY),
    ("h", HOUR),
    ("min", 60),
    ("s", 1),
];

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s
            .find(|c: char| !c.is_ascii_digit())
            .ok_or_else(|| Error::config(format!("window `{s}` has no unit")))?;
        let (num, unit) = s.split_at(split);
        let n: i64 = num
            .parse()
            .map_err(|_| Error::config(format!("window `{s}` needs a leading count")))?;
        let scale = UNITS
            .iter()
            .find(|(u, _)| *u == unit)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config(format!("unknown window unit `{unit}` in `{s}`")))?;
        n.checked_mul(scale)
            .map(Window)
            .ok_or_else(|| Error::config(format!("window `{s}` overflows")))
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (unit, scale) in UNITS {
            if self.0 > 0 && self.0 % scale == 0 {
                return write!(f, "{}{unit}", self.0 / scale);
            }
        }
        write!(f, "{}s", self.0)
    }
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortEncoderKind {
    Transformer,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub d_item: usize,
    pub d_action: usize,
    pub d_genre: usize,
    pub d_movie_show: usize,
    pub d_tsr: usize,
    pub d_short: usize,
    /// Hidden width of the short-term feed-forward block.
    pub d_short_ff: usize,
    /// Trailing window for the short-term interest feature.
    pub window: Window,
    pub short_enc: ShortEncoderKind,
    /// Durations are min-max scaled into [0, 1] against `[0, duration_max]`.
    pub duration_max: f64,
    /// Keep only the latest `max_len` interactions of a user.
    pub max_len: usize,
}

/// Scalar features appended to every interaction: duration and episode position.
pub const NUM_NUMERIC_FEATURES: usize = 2;

impl FeatureConfig {
    pub fn d_full(&self) -> usize {
        self.d_item
            + self.d_action
            + self.d_genre
            + self.d_movie_show
            + self.d_tsr
            + NUM_NUMERIC_FEATURES
    }

    pub fn numerics(&self, it: &Interaction) -> [f64; NUM_NUMERIC_FEATURES] {
        [
            (it.duration / self.duration_max).clamp(0.0, 1.0),
            it.episode_position.clamp(0.0, 1.0),
        ]
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("d_item", self.d_item),
            ("d_action", self.d_action),
            ("d_genre", self.d_genre),
            ("d_movie_show", self.d_movie_show),
            ("d_tsr", self.d_tsr),
            ("d_short", self.d_short),
            ("d_short_ff", self.d_short_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::config(format!("features.{name} must be >= 1")));
        }
        if self.window.0 < 0 {
            return Err(Error::config("features.window must be >= 0"));
        }
        if self.duration_max.is_nan() || self.duration_max <= 0.0 {
            return Err(Error::config("features.duration_max must be > 0"));
        }
        Ok(())
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            d_item: 32,
            d_action: 8,
            d_genre: 8,
            d_movie_show: 4,
            d_tsr: 4,
            d_short: 16,
            d_short_ff: 32,
            window: Window(WEEK),
            short_enc: ShortEncoderKind::Transformer,
            duration_max: 4.0 * HOUR as f64,
            max_len: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of the intent encoder.
    pub d_intent: usize,
    /// Output width of the item encoder.
    pub d_item_enc: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    pub d_proj: usize,
    pub time_buckets: usize,
    /// Time from sequence start mapped onto the last bucket.
    pub max_time_delta: Window,
    pub init_scale: f64,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("d_intent", self.d_intent),
            ("d_item_enc", self.d_item_enc),
            ("layers", self.layers),
            ("attn_heads", self.attn_heads),
            ("d_ff", self.d_ff),
            ("d_proj", self.d_proj),
        ] {
            if d == 0 {
                return Err(Error::config(format!("model.{name} must be >= 1")));
            }
        }
        for (name, d) in [("d_intent", self.d_intent), ("d_item_enc", self.d_item_enc)] {
            if d % self.attn_heads != 0 {
                return Err(Error::config(format!(
                    "model.{name} = {d} is not divisible by attn_heads = {}",
                    self.attn_heads
                )));
            }
        }
        if self.time_buckets < 2 {
            return Err(Error::config("model.time_buckets must be >= 2"));
        }
        if self.max_time_delta.0 <= 0 {
            return Err(Error::config("model.max_time_delta must be > 0"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_intent: 32,
            d_item_enc: 48,
            layers: 1,
            attn_heads: 2,
            d_ff: 64,
            d_proj: 16,
            time_buckets: 64,
            max_time_delta: Window(180 * DAY),
            init_scale: 1.0,
        }
    }
}

/// Interaction field an intent head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTarget {
    ActionType,
    Genre,
    MovieShow,
    Tsr,
}

impl HeadTarget {
    pub fn labels(self, it: &Interaction) -> Vec<usize> {
        match self {
            HeadTarget::ActionType => vec![it.action_type],
            HeadTarget::Genre => it.genres.clone(),
            HeadTarget::MovieShow => vec![it.movie_show],
            HeadTarget::Tsr => vec![it.time_since_release],
        }
    }

    /// Display name used in ablation tables.
    pub fn title(self) -> &'static str {
        match self {
            HeadTarget::ActionType => "ActionType",
            HeadTarget::Genre => "Genre",
            HeadTarget::MovieShow => "Movie/Show",
            HeadTarget::Tsr => "TSR",
        }
    }
}

/// How a multi-label head turns logits into scores and a loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiLabelScoring {
    /// One softmax over labels; the loss averages `-log p` over the positives.
    #[default]
    Softmax,
    /// Independent sigmoids with binary cross-entropy on the positives only.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub target: HeadTarget,
    pub cardinality: usize,
    #[serde(default)]
    pub multi_label: bool,
    /// Ignored by single-label heads.
    #[serde(default)]
    pub scoring: MultiLabelScoring,
    /// Labels evaluated by intent MRR; other targets are skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core: Option<Vec<usize>>,
}

impl HeadSpec {
    pub fn new(name: &str, target: HeadTarget, cardinality: usize, multi_label: bool) -> Self {
        Self {
            name: name.to_string(),
            target,
            cardinality,
            multi_label,
            scoring: MultiLabelScoring::default(),
            core: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinality < 2 {
            return Err(Error::config(format!(
                "head `{}` needs cardinality >= 2",
                self.name
            )));
        }
        let expected = match self.target {
            HeadTarget::ActionType => NUM_ACTION_TYPES,
            HeadTarget::Genre => NUM_GENRES,
            HeadTarget::MovieShow => NUM_MOVIE_SHOW,
            HeadTarget::Tsr => NUM_TSR,
        };
        if self.cardinality != expected {
            return Err(Error::config(format!(
                "head `{}` predicts {:?} with {expected} labels, not {}",
                self.name, self.target, self.cardinality
            )));
        }
        if let Some(core) = &self.core {
            if core.is_empty() || core.iter().any(|&c| c >= self.cardinality) {
                return Err(Error::config(format!(
                    "head `{}` core labels must be a non-empty subset of [0, {})",
                    self.name, self.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Scores are independent per label rather than a distribution.
    pub fn sigmoid_scores(&self) -> bool {
        self.multi_label && self.scoring == MultiLabelScoring::Sigmoid
    }

    pub fn is_core(&self, label: usize) -> bool {
        self.core.as_ref().is_none_or(|c| c.contains(&label))
    }
}

/// The four intent heads: action type, genre, movie/show and recency.
pub fn default_heads() -> Vec<HeadSpec> {
    let mut action = HeadSpec::new(
        "action_type",
        HeadTarget::ActionType,
        NUM_ACTION_TYPES,
        false,
    );
    action.core = Some(CORE_ACTION_TYPES.to_vec());
    vec![
        action,
        HeadSpec::new("genre", HeadTarget::Genre, NUM_GENRES, true),
        HeadSpec::new("movie_show", HeadTarget::MovieShow, NUM_MOVIE_SHOW, false),
        HeadSpec::new("tsr", HeadTarget::Tsr, NUM_TSR, false),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Item prediction only.
    V0,
    /// One shared encoder with intent heads beside the item head.
    V1,
    /// Intent encoder feeding the intent embedding into a separate item encoder.
    V2,
    /// V2 with short-term interest features on both encoders.
    V3,
}

impl Arch {
    pub fn uses_short_term(self) -> bool {
        self == Arch::V3
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, Arch::V2 | Arch::V3)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v0" => Ok(Arch::V0),
            "v1" => Ok(Arch::V1),
            "v2" => Ok(Arch::V2),
            "v3" => Ok(Arch::V3),
            _ => Err(Error::config(format!(
                "unknown variant `{s}` (v0|v1|v2|v3)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arch::V0 => "V0",
            Arch::V1 => "V1",
            Arch::V2 => "V2",
            Arch::V3 => "V3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub arch: Arch,
    /// Active intent heads by name; `None` means every configured head
    /// (none for V0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<String>>,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            arch: Arch::V3,
            heads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationWeighting {
    /// `ln(1 + duration)` of the target interaction, rescaled to batch mean 1.
    Log1p,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads for per-user gradients; 1 is serial.
    pub threads: usize,
    pub duration_weighting: DurationWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 0.003,
            batch_size: 64,
            epochs: 10,
            seed: 1,
            threads: 1,
            duration_weighting: DurationWeighting::Log1p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: GeneratorConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub heads: Vec<HeadSpec>,
    pub variant: VariantConfig,
    pub training: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Config {
    /// Laptop-sized default: ~2k users, 500 items, sequences up to 30.
    pub fn desk() -> Self {
        Self {
            data: GeneratorConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            heads: default_heads(),
            variant: VariantConfig::default(),
            training: TrainConfig::default(),
        }
    }

    /// Production-size dimensions; far too slow for a laptop.
    pub fn full() -> Self {
        Self {
            data: GeneratorConfig {
                num_items: 35_000,
                seq_len_max: 100,
                ..GeneratorConfig::default()
            },
            features: FeatureConfig {
                d_item: 400,
                d_action: 40,
                d_genre: 41,
                d_movie_show: 20,
                d_tsr: 20,
                d_short: 200,
                d_short_ff: 512,
                max_len: 100,
                ..FeatureConfig::default()
            },
            model: ModelConfig {
                d_intent: 600,
                d_item_enc: 800,
                layers: 2,
                attn_heads: 8,
                d_ff: 512,
                d_proj: 200,
                ..ModelConfig::default()
            },
            heads: default_heads(),
            variant: VariantConfig::default(),
            training: TrainConfig {
                lambda: 1.0,
                lr: 0.0005,
                batch_size: 1024,
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }

    /// Tiny dimensions for gradient checks and overfitting tests.
    pub fn micro() -> Self {
        Self {
            data: GeneratorConfig {
                num_items: 12,
                num_users: 8,
                seq_len_min: 3,
                seq_len_max: 5,
                ..GeneratorConfig::default()
            },
            features: FeatureConfig {
                d_item: 4,
                d_action: 2,
                d_genre: 2,
                d_movie_show: 2,
                d_tsr: 2,
                d_short: 4,
                d_short_ff: 8,
                max_len: 5,
                ..FeatureConfig::default()
            },
            model: ModelConfig {
                d_intent: 8,
                d_item_enc: 8,
                layers: 1,
                attn_heads: 2,
                d_ff: 8,
                d_proj: 4,
                time_buckets: 8,
                ..ModelConfig::default()
            },
            heads: default_heads(),
            variant: VariantConfig::default(),
            training: TrainConfig {
                lr: 0.01,
                batch_size: 8,
                epochs: 200,
                ..TrainConfig::default()
            },
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::config(format!(
                "unknown profile `{name}` (desk|full|micro)"
            ))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let [a, b, c] = self.data.split;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split must sum to 1"));
        }
        self.features.validate()?;
        self.model.validate()?;
        if self.data.num_items < 2 {
            return Err(Error::config("data.num_items must be >= 2 to rank items"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.validate()?;
            if self.heads[..i].iter().any(|o| o.name == h.name) {
                return Err(Error::config(format!("duplicate head `{}`", h.name)));
            }
        }
        self.active_heads()?;
        let t = &self.training;
        if t.lambda.is_nan() || t.lambda < 0.0 {
            return Err(Error::config("training.lambda must be >= 0"));
        }
        if t.lr.is_nan() || t.lr <= 0.0 || t.batch_size == 0 || t.threads == 0 {
            return Err(Error::config(
                "training.lr > 0, batch_size >= 1 and threads >= 1 required",
            ));
        }
        Ok(())
    }

    /// Heads the variant trains, in roster order.
    pub fn active_heads(&self) -> Result<Vec<HeadSpec>> {
        let arch = self.variant.arch;
        let chosen: Vec<HeadSpec> = match (&self.variant.heads, arch) {
            (None, Arch::V0) => Vec::new(),
            (None, _) => self.heads.clone(),
            (Some(names), _) => {
                for n in names {
                    if !self.heads.iter().any(|h| &h.name == n) {
                        return Err(Error::config(format!("variant names unknown head `{n}`")));
                    }
                }
                self.heads
                    .iter()
                    .filter(|h| names.contains(&h.name))
                    .cloned()
                    .collect()
            }
        };
        match arch {
            Arch::V0 if !chosen.is_empty() => Err(Error::config(
                "variant v0 is item-only and cannot have intent heads",
            )),
            Arch::V0 => Ok(chosen),
            _ if chosen.is_empty() => Err(Error::config(format!(
                "variant {arch} needs at least one intent head"
            ))),
            _ => Ok(chosen),
        }
    }

    /// SHA-256 of the full configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// SHA-256 of everything that determines parameter shapes and the
    /// meaning of the model inputs.
    pub fn schema_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.schema_value()).expect("schema serializes"))
    }

    fn schema_value(&self) -> serde_json::Value {
        serde_json::json!({
            "data": { "num_items": self.data.num_items },
            "features": self.features,
            "model": self.model,
            "heads": self.heads,
            "variant": self.variant,
        })
    }

    /// Dotted paths of the schema fields that differ from `other`.
    pub fn schema_diff(&self, other: &Config) -> Vec<String> {
        let mut out = Vec::new();
        diff_values("", &self.schema_value(), &other.schema_value(), &mut out);
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&join(k), va, vb, out),
                    _ => out.push(join(k)),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                diff_values(&format!("{path}[{i}]"), va, vb, out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}
