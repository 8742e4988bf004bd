//! The discrete architecture space: stem, optional encoder, optional decoder
//! and head, plus validation, sampling, enumeration and exact counting.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Configuration error for a [`SearchSpaceConfig`].
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("option set `{0}` is empty")]
    EmptyOptions(&'static str),
    #[error("option set `{0}` contains duplicates")]
    DuplicateOptions(&'static str),
    #[error("option set `{field}` contains invalid value {value}")]
    InvalidOption { field: &'static str, value: u32 },
    #[error("d_model {d_model} is not divisible by 3 x {max_heads}")]
    ModelWidth { d_model: u32, max_heads: u32 },
    #[error("search-space cardinality overflows 128 bits")]
    Overflow,
}

/// A spec failed validation; each entry is one human-readable violation.
#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("invalid architecture: {}", .0.join("; "))]
pub struct SpecError(pub Vec<String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
    Both,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Max, Pooling::Avg, Pooling::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Avg => "avg",
            Pooling::Both => "both",
        }
    }
}

/// One operation inside an encoder layer. Ordering is the canonical slice
/// order: MHA first (by head count), then GRU, then CONV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Op {
    Mha { heads: u32 },
    Gru,
    Conv,
}

impl Op {
    fn kind(self) -> u8 {
        match self {
            Op::Mha { .. } => 0,
            Op::Gru => 1,
            Op::Conv => 2,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Mha { heads } => write!(f, "mha{heads}"),
            Op::Gru => f.write_str("gru"),
            Op::Conv => f.write_str("conv"),
        }
    }
}

/// Operations applied to contiguous feature slices of one encoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderLayerSpec {
    pub ops: Vec<Op>,
}

impl EncoderLayerSpec {
    /// Builds a layer with its ops in canonical order.
    pub fn new(mut ops: Vec<Op>) -> Self {
        ops.sort();
        Self { ops }
    }

    pub fn canonicalized(&self) -> Self {
        Self::new(self.ops.clone())
    }
}

impl fmt::Display for EncoderLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.ops.iter().map(|o| o.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: u32,
    pub dropout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub layers: u32,
    pub heads: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadSpec {
    pub pooling: Pooling,
    pub spatial_dropout: bool,
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub stem: StemSpec,
    pub encoder: Option<Vec<EncoderLayerSpec>>,
    pub decoder: Option<DecoderSpec>,
    pub head: HeadSpec,
}

impl ArchitectureSpec {
    /// Stem and head only.
    pub fn minimal(stem: StemSpec, head: HeadSpec) -> Self {
        Self { stem, encoder: None, decoder: None, head }
    }

    pub fn canonicalized(&self) -> Self {
        Self {
            stem: self.stem,
            encoder: self
                .encoder
                .as_ref()
                .map(|layers| layers.iter().map(EncoderLayerSpec::canonicalized).collect()),
            decoder: self.decoder,
            head: self.head,
        }
    }

    /// Sorted-key, whitespace-free JSON of the canonicalized spec.
    pub fn canonical_json(&self) -> String {
        canonical_json(&self.canonicalized())
    }
}

/// Serializes through `serde_json::Value`, whose object map is ordered by key.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("plain data serializes");
    serde_json::to_string(&value).expect("value serializes")
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a spec's canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArchId(String);

impl ArchId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("`{0}` is not a 64-character lowercase hex digest")]
pub struct ArchIdParseError(String);

impl FromStr for ArchId {
    type Err = ArchIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ok = s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if ok {
            Ok(ArchId(s.to_owned()))
        } else {
            Err(ArchIdParseError(s.to_owned()))
        }
    }
}

impl TryFrom<String> for ArchId {
    type Error = ArchIdParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ArchId> for String {
    fn from(id: ArchId) -> String {
        id.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Every block choice independently uniform.
    #[default]
    PerFactor,
    /// Every architecture equiprobable.
    ExactUniform,
}

impl FromStr for SamplingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-factor" => Ok(SamplingMode::PerFactor),
            "exact-uniform" => Ok(SamplingMode::ExactUniform),
            other => Err(format!("unknown sampling mode `{other}`")),
        }
    }
}

/// Option sets governing the space. An empty `mha_head_options` removes MHA
/// from the encoder vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpaceConfig {
    pub stem_kernel_options: Vec<u32>,
    pub stem_dropout_options: Vec<bool>,
    pub d_model: u32,
    pub encoder_enabled: bool,
    pub encoder_layer_count_options: Vec<u32>,
    pub mha_head_options: Vec<u32>,
    pub decoder_enabled: bool,
    pub decoder_layer_count_options: Vec<u32>,
    pub decoder_head_options: Vec<u32>,
    pub head_pooling_options: Vec<Pooling>,
    pub head_spatial_dropout_options: Vec<bool>,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            stem_kernel_options: vec![3, 5, 7],
            stem_dropout_options: vec![false, true],
            d_model: 192,
            encoder_enabled: true,
            encoder_layer_count_options: vec![1, 2, 4],
            mha_head_options: vec![1, 2, 4, 8],
            decoder_enabled: true,
            decoder_layer_count_options: vec![1, 2],
            decoder_head_options: vec![1, 2, 4, 8],
            head_pooling_options: Pooling::ALL.to_vec(),
            head_spatial_dropout_options: vec![false, true],
        }
    }
}

pub const PRESET_DEFAULT: &str = include_str!("../presets/default.json");
pub const PRESET_PAPER: &str = include_str!("../presets/paper.json");

#[derive(Debug, thiserror::Error)]
pub enum PresetError {
    #[error("unknown preset `{0}` (expected `default` or `paper`)")]
    Unknown(String),
    #[error("preset does not parse: {0}")]
    Parse(#[from] serde_json::Error),
}

fn check_set<T: Ord + Clone>(name: &'static str, xs: &[T]) -> Result<(), ConfigError> {
    if xs.is_empty() {
        return Err(ConfigError::EmptyOptions(name));
    }
    let uniq: BTreeSet<T> = xs.iter().cloned().collect();
    if uniq.len() != xs.len() {
        return Err(ConfigError::DuplicateOptions(name));
    }
    Ok(())
}

fn check_positive(name: &'static str, xs: &[u32]) -> Result<(), ConfigError> {
    match xs.iter().find(|&&x| x == 0) {
        Some(&value) => Err(ConfigError::InvalidOption { field: name, value }),
        None => Ok(()),
    }
}

/// Splits `d_model` into `parts` contiguous widths; the first
/// `d_model % parts` slices are one wider.
pub fn slice_widths(d_model: u32, parts: usize) -> Vec<u32> {
    let parts_u = parts as u32;
    let base = d_model / parts_u;
    let rem = d_model % parts_u;
    (0..parts_u).map(|i| base + u32::from(i < rem)).collect()
}

impl SearchSpaceConfig {
    pub fn preset(name: &str) -> Result<Self, PresetError> {
        let text = match name {
            "default" => PRESET_DEFAULT,
            "paper" => PRESET_PAPER,
            other => return Err(PresetError::Unknown(other.to_owned())),
        };
        Ok(serde_json::from_str(text)?)
    }

    /// Canonical option order: ascending numbers, `false < true`, `max < avg < both`.
    pub fn canonicalized(&self) -> Self {
        fn sorted<T: Ord + Clone>(xs: &[T]) -> Vec<T> {
            let mut v = xs.to_vec();
            v.sort();
            v
        }
        Self {
            stem_kernel_options: sorted(&self.stem_kernel_options),
            stem_dropout_options: sorted(&self.stem_dropout_options),
            d_model: self.d_model,
            encoder_enabled: self.encoder_enabled,
            encoder_layer_count_options: sorted(&self.encoder_layer_count_options),
            mha_head_options: sorted(&self.mha_head_options),
            decoder_enabled: self.decoder_enabled,
            decoder_layer_count_options: sorted(&self.decoder_layer_count_options),
            decoder_head_options: sorted(&self.decoder_head_options),
            head_pooling_options: sorted(&self.head_pooling_options),
            head_spatial_dropout_options: sorted(&self.head_spatial_dropout_options),
        }
    }

    /// SHA-256 of the canonical JSON of this configuration.
    pub fn hash(&self) -> String {
        sha256_hex(canonical_json(&self.canonicalized()).as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_set("stem_kernel_options", &self.stem_kernel_options)?;
        if let Some(&k) = self.stem_kernel_options.iter().find(|&&k| k % 2 == 0) {
            return Err(ConfigError::InvalidOption { field: "stem_kernel_options", value: k });
        }
        check_set("stem_dropout_options", &self.stem_dropout_options)?;
        check_set("encoder_layer_count_options", &self.encoder_layer_count_options)?;
        check_positive("encoder_layer_count_options", &self.encoder_layer_count_options)?;
        if !self.mha_head_options.is_empty() {
            check_set("mha_head_options", &self.mha_head_options)?;
            check_positive("mha_head_options", &self.mha_head_options)?;
        }
        check_set("decoder_layer_count_options", &self.decoder_layer_count_options)?;
        check_positive("decoder_layer_count_options", &self.decoder_layer_count_options)?;
        check_set("decoder_head_options", &self.decoder_head_options)?;
        check_positive("decoder_head_options", &self.decoder_head_options)?;
        check_set("head_pooling_options", &self.head_pooling_options)?;
        check_set("head_spatial_dropout_options", &self.head_spatial_dropout_options)?;
        let max_heads = self.mha_head_options.iter().copied().max().unwrap_or(1);
        if self.d_model == 0 || !self.d_model.is_multiple_of(3 * max_heads) {
            return Err(ConfigError::ModelWidth { d_model: self.d_model, max_heads });
        }
        Ok(())
    }

    pub fn max_encoder_layers(&self) -> u32 {
        self.encoder_layer_count_options.iter().copied().max().unwrap_or(0)
    }

    /// Every distinct encoder layer in canonical order: the MHA-bearing
    /// subsets per head count first, then `{GRU}`, `{CONV}`, `{GRU,CONV}`.
    pub fn enumerate_layer_variants(&self) -> Vec<EncoderLayerSpec> {
        let mut heads = self.mha_head_options.clone();
        heads.sort();
        let tails: [&[Op]; 4] = [&[], &[Op::Gru], &[Op::Conv], &[Op::Gru, Op::Conv]];
        let mut out = Vec::with_capacity(4 * heads.len() + 3);
        for &h in &heads {
            for tail in tails {
                let mut ops = vec![Op::Mha { heads: h }];
                ops.extend_from_slice(tail);
                out.push(EncoderLayerSpec::new(ops));
            }
        }
        for tail in &tails[1..] {
            out.push(EncoderLayerSpec::new(tail.to_vec()));
        }
        out
    }

    fn stem_count(&self) -> u128 {
        (self.stem_kernel_options.len() * self.stem_dropout_options.len()) as u128
    }

    fn head_count(&self) -> u128 {
        (self.head_pooling_options.len() * self.head_spatial_dropout_options.len()) as u128
    }

    /// Number of encoder configurations, counting "absent" as one.
    pub fn encoder_count(&self) -> Result<u128, ConfigError> {
        if !self.encoder_enabled {
            return Ok(1);
        }
        let variants = self.enumerate_layer_variants().len() as u128;
        let mut total: u128 = 1;
        for &layers in &self.encoder_layer_count_options {
            let term = variants.checked_pow(layers).ok_or(ConfigError::Overflow)?;
            total = total.checked_add(term).ok_or(ConfigError::Overflow)?;
        }
        Ok(total)
    }

    /// Number of decoder configurations, counting "absent" as one.
    pub fn decoder_count(&self) -> u128 {
        if !self.decoder_enabled {
            return 1;
        }
        1 + (self.decoder_layer_count_options.len() * self.decoder_head_options.len()) as u128
    }

    /// Exact size of the space.
    pub fn cardinality(&self) -> Result<u128, ConfigError> {
        self.validate()?;
        self.stem_count()
            .checked_mul(self.encoder_count()?)
            .and_then(|v| v.checked_mul(self.decoder_count()))
            .and_then(|v| v.checked_mul(self.head_count()))
            .ok_or(ConfigError::Overflow)
    }

    /// Checks a spec against this configuration, collecting every violation.
    pub fn validate_spec(&self, spec: &ArchitectureSpec) -> Result<(), SpecError> {
        let mut v = Vec::new();
        if !self.stem_kernel_options.contains(&spec.stem.kernel) {
            v.push(format!("stem kernel {} not in options", spec.stem.kernel));
        }
        if !self.stem_dropout_options.contains(&spec.stem.dropout) {
            v.push(format!("stem dropout {} not in options", spec.stem.dropout));
        }
        if let Some(layers) = &spec.encoder {
            if !self.encoder_enabled {
                v.push("encoder present but disabled".to_owned());
            }
            if !self.encoder_layer_count_options.contains(&(layers.len() as u32)) {
                v.push(format!("encoder layer count {} not in options", layers.len()));
            }
            for (i, layer) in layers.iter().enumerate() {
                self.validate_layer(i, layer, &mut v);
            }
        }
        if let Some(dec) = &spec.decoder {
            if !self.decoder_enabled {
                v.push("decoder present but disabled".to_owned());
            }
            if !self.decoder_layer_count_options.contains(&dec.layers) {
                v.push(format!("decoder layer count {} not in options", dec.layers));
            }
            if !self.decoder_head_options.contains(&dec.heads) {
                v.push(format!("decoder heads {} not in options", dec.heads));
            }
        }
        if !self.head_pooling_options.contains(&spec.head.pooling) {
            v.push(format!("head pooling {} not in options", spec.head.pooling.as_str()));
        }
        if !self.head_spatial_dropout_options.contains(&spec.head.spatial_dropout) {
            v.push(format!("head spatial dropout {} not in options", spec.head.spatial_dropout));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(SpecError(v))
        }
    }

    fn validate_layer(&self, index: usize, layer: &EncoderLayerSpec, v: &mut Vec<String>) {
        let n = layer.ops.len();
        if n == 0 || n > 3 {
            v.push(format!("encoder layer {index}: {n} ops, expected 1 to 3"));
            if n == 0 {
                return;
            }
        }
        let kinds: BTreeSet<u8> = layer.ops.iter().map(|o| o.kind()).collect();
        if kinds.len() != n {
            v.push(format!("encoder layer {index}: repeated operation type"));
        }
        let ops = layer.canonicalized().ops;
        let widths = slice_widths(self.d_model, n);
        for (op, width) in ops.iter().zip(widths) {
            if let Op::Mha { heads } = *op {
                if !self.mha_head_options.contains(&heads) {
                    v.push(format!("encoder layer {index}: MHA heads {heads} not in options"));
                } else if width % heads != 0 {
                    v.push(format!(
                        "encoder layer {index}: MHA slice width {width} not divisible by {heads} heads"
                    ));
                }
            }
        }
    }

    /// Draws one architecture. Identical rng state and mode give identical specs.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mode: SamplingMode,
    ) -> Result<ArchitectureSpec, ConfigError> {
        self.validate()?;
        let variants = self.enumerate_layer_variants();
        let stem = StemSpec {
            kernel: pick(rng, &self.stem_kernel_options),
            dropout: pick(rng, &self.stem_dropout_options),
        };
        let encoder = if !self.encoder_enabled {
            None
        } else {
            let counts = &self.encoder_layer_count_options;
            let choice = match mode {
                SamplingMode::PerFactor => rng.random_range(0..=counts.len()),
                SamplingMode::ExactUniform => {
                    let n = variants.len() as u128;
                    let mut weights = vec![1u128];
                    for &l in counts {
                        weights.push(n.checked_pow(l).ok_or(ConfigError::Overflow)?);
                    }
                    weighted_index(rng, &weights)
                }
            };
            (choice > 0).then(|| {
                (0..counts[choice - 1])
                    .map(|_| variants[rng.random_range(0..variants.len())].clone())
                    .collect()
            })
        };
        let decoder = if !self.decoder_enabled {
            None
        } else {
            let layers = &self.decoder_layer_count_options;
            let heads = &self.decoder_head_options;
            match mode {
                SamplingMode::PerFactor => {
                    let choice = rng.random_range(0..=layers.len());
                    (choice > 0)
                        .then(|| DecoderSpec { layers: layers[choice - 1], heads: pick(rng, heads) })
                }
                SamplingMode::ExactUniform => {
                    let choice = rng.random_range(0..=layers.len() * heads.len());
                    (choice > 0).then(|| {
                        let k = choice - 1;
                        DecoderSpec { layers: layers[k / heads.len()], heads: heads[k % heads.len()] }
                    })
                }
            }
        };
        let head = HeadSpec {
            pooling: pick(rng, &self.head_pooling_options),
            spatial_dropout: pick(rng, &self.head_spatial_dropout_options),
        };
        Ok(ArchitectureSpec { stem, encoder, decoder, head })
    }

    /// Every architecture of the space, in a deterministic order. Only
    /// practical for shrunk configurations.
    pub fn enumerate(&self) -> Result<Vec<ArchitectureSpec>, ConfigError> {
        self.validate()?;
        let variants = self.enumerate_layer_variants();
        let mut encoders: Vec<Option<Vec<EncoderLayerSpec>>> = vec![None];
        if self.encoder_enabled {
            for &l in &self.encoder_layer_count_options {
                let mut stacks: Vec<Vec<EncoderLayerSpec>> = vec![Vec::new()];
                for _ in 0..l {
                    stacks = stacks
                        .into_iter()
                        .flat_map(|s| {
                            variants.iter().map(move |v| {
                                let mut s = s.clone();
                                s.push(v.clone());
                                s
                            })
                        })
                        .collect();
                }
                encoders.extend(stacks.into_iter().map(Some));
            }
        }
        let mut decoders = vec![None];
        if self.decoder_enabled {
            for &layers in &self.decoder_layer_count_options {
                for &heads in &self.decoder_head_options {
                    decoders.push(Some(DecoderSpec { layers, heads }));
                }
            }
        }
        let mut out = Vec::new();
        for &kernel in &self.stem_kernel_options {
            for &dropout in &self.stem_dropout_options {
                for enc in &encoders {
                    for dec in &decoders {
                        for &pooling in &self.head_pooling_options {
                            for &spatial_dropout in &self.head_spatial_dropout_options {
                                out.push(ArchitectureSpec {
                                    stem: StemSpec { kernel, dropout },
                                    encoder: enc.clone(),
                                    decoder: *dec,
                                    head: HeadSpec { pooling, spatial_dropout },
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn pick<R: Rng + ?Sized, T: Copy>(rng: &mut R, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn weighted_index<R: Rng + ?Sized>(rng: &mut R, weights: &[u128]) -> usize {
    let total: u128 = weights.iter().sum();
    let mut draw = rng.random_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if draw < w {
            return i;
        }
        draw -= w;
    }
    unreachable!("draw below total weight")
}

/// Validates `spec` and returns its digest id.
pub fn canonical_id(spec: &ArchitectureSpec, cfg: &SearchSpaceConfig) -> Result<ArchId, SpecError> {
    cfg.validate_spec(spec)?;
    Ok(spec_digest(spec))
}

/// Digest id without validation, for specs already known to be valid.
pub fn spec_digest(spec: &ArchitectureSpec) -> ArchId {
    ArchId(sha256_hex(spec.canonical_json().as_bytes()))
}
