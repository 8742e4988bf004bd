//! Path-style binary encoding of architectures.
//!
//! Slot order: stem kernel one-hot, stem dropout, encoder presence, encoder
//! layer-count one-hot, per-layer op flags (layer index ascending; within a
//! layer `MHA(h)` per head option, then GRU, then CONV), decoder presence,
//! decoder layer one-hot, decoder head one-hot, pooling one-hot, spatial
//! dropout. A block or layer that is not part of the architecture leaves all
//! of its slots at zero.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::search_space::{
    ArchitectureSpec, ConfigError, DecoderSpec, EncoderLayerSpec, HeadSpec, Op, SearchSpaceConfig,
    SpecError, StemSpec, sha256_hex,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub description: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("vector has {got} entries, layout expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("slot `{slot}`: {reason}")]
    Slot { slot: String, reason: String },
    #[error("decoded architecture is invalid: {0}")]
    Invalid(#[from] SpecError),
}

/// Ordered slot names plus the offsets of each slot group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    slots: Vec<Slot>,
    cfg: SearchSpaceConfig,
    stem_kernel: Range<usize>,
    stem_dropout: usize,
    encoder: Option<EncoderSlots>,
    decoder: Option<DecoderSlots>,
    pooling: Range<usize>,
    spatial_dropout: usize,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EncoderSlots {
    present: usize,
    layer_count: Range<usize>,
    layers_start: usize,
    per_layer: usize,
    max_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DecoderSlots {
    present: usize,
    layers: Range<usize>,
    heads: Range<usize>,
}

struct Builder {
    slots: Vec<Slot>,
}

impl Builder {
    fn push(&mut self, name: String, description: String) -> usize {
        self.slots.push(Slot { name, description });
        self.slots.len() - 1
    }

    fn group<T: fmt::Display>(&mut self, prefix: &str, what: &str, xs: &[T]) -> Range<usize> {
        let start = self.slots.len();
        for x in xs {
            self.push(format!("{prefix}={x}"), format!("{what} is {x}"));
        }
        start..self.slots.len()
    }
}

impl FeatureLayout {
    pub fn new(cfg: &SearchSpaceConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let cfg = cfg.canonicalized();
        let mut b = Builder { slots: Vec::new() };

        let stem_kernel = b.group("stem.kernel", "stem kernel", &cfg.stem_kernel_options);
        let stem_dropout = b.push("stem.dropout".into(), "stem dropout enabled".into());

        let encoder = cfg.encoder_enabled.then(|| {
            let present = b.push("encoder.present".into(), "encoder block present".into());
            let layer_count =
                b.group("encoder.layers", "encoder layer count", &cfg.encoder_layer_count_options);
            let layers_start = b.slots.len();
            let max_layers = cfg.max_encoder_layers() as usize;
            for layer in 0..max_layers {
                for h in &cfg.mha_head_options {
                    b.push(
                        format!("encoder.layer{layer}.mha{h}"),
                        format!("encoder layer {layer} uses MHA with {h} heads"),
                    );
                }
                b.push(format!("encoder.layer{layer}.gru"), format!("encoder layer {layer} uses GRU"));
                b.push(format!("encoder.layer{layer}.conv"), format!("encoder layer {layer} uses CONV"));
            }
            EncoderSlots {
                present,
                layer_count,
                layers_start,
                per_layer: cfg.mha_head_options.len() + 2,
                max_layers,
            }
        });

        let decoder = cfg.decoder_enabled.then(|| {
            let present = b.push("decoder.present".into(), "decoder block present".into());
            let layers =
                b.group("decoder.layers", "decoder layer count", &cfg.decoder_layer_count_options);
            let heads = b.group("decoder.heads", "decoder head count", &cfg.decoder_head_options);
            DecoderSlots { present, layers, heads }
        });

        let pooling_names: Vec<&str> = cfg.head_pooling_options.iter().map(|p| p.as_str()).collect();
        let pooling = b.group("head.pooling", "head pooling", &pooling_names);
        let spatial_dropout =
            b.push("head.spatial_dropout".into(), "head spatial dropout enabled".into());

        let names: Vec<&str> = b.slots.iter().map(|s| s.name.as_str()).collect();
        let fingerprint = sha256_hex(names.join("\n").as_bytes());
        Ok(Self {
            slots: b.slots,
            cfg,
            stem_kernel,
            stem_dropout,
            encoder,
            decoder,
            pooling,
            spatial_dropout,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// SHA-256 over the newline-joined slot names.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn config(&self) -> &SearchSpaceConfig {
        &self.cfg
    }

    /// Slot range covering the whole encoder block, if it has one.
    pub fn encoder_region(&self) -> Option<Range<usize>> {
        self.encoder
            .as_ref()
            .map(|e| e.present..e.layers_start + e.per_layer * e.max_layers)
    }

    /// Slot range covering the whole decoder block, if it has one.
    pub fn decoder_region(&self) -> Option<Range<usize>> {
        self.decoder.as_ref().map(|d| d.present..d.heads.end)
    }

    pub fn encode(&self, spec: &ArchitectureSpec) -> Result<FeatureVector, EncodeError> {
        self.cfg.validate_spec(spec)?;
        Ok(self.encode_unchecked(spec))
    }

    pub(crate) fn encode_unchecked(&self, spec: &ArchitectureSpec) -> FeatureVector {
        let cfg = &self.cfg;
        let mut bits = vec![0u8; self.len()];
        let pos = |xs: &[u32], x: u32| xs.iter().position(|&y| y == x).expect("validated");
        bits[self.stem_kernel.start + pos(&cfg.stem_kernel_options, spec.stem.kernel)] = 1;
        bits[self.stem_dropout] = u8::from(spec.stem.dropout);
        if let (Some(slots), Some(layers)) = (&self.encoder, &spec.encoder) {
            bits[slots.present] = 1;
            let count = layers.len() as u32;
            bits[slots.layer_count.start + pos(&cfg.encoder_layer_count_options, count)] = 1;
            for (i, layer) in layers.iter().enumerate() {
                let base = slots.layers_start + i * slots.per_layer;
                for op in &layer.ops {
                    let offset = match *op {
                        Op::Mha { heads } => pos(&cfg.mha_head_options, heads),
                        Op::Gru => slots.per_layer - 2,
                        Op::Conv => slots.per_layer - 1,
                    };
                    bits[base + offset] = 1;
                }
            }
        }
        if let (Some(slots), Some(dec)) = (&self.decoder, &spec.decoder) {
            bits[slots.present] = 1;
            bits[slots.layers.start + pos(&cfg.decoder_layer_count_options, dec.layers)] = 1;
            bits[slots.heads.start + pos(&cfg.decoder_head_options, dec.heads)] = 1;
        }
        let pool = cfg.head_pooling_options.iter().position(|&p| p == spec.head.pooling);
        bits[self.pooling.start + pool.expect("validated")] = 1;
        bits[self.spatial_dropout] = u8::from(spec.head.spatial_dropout);
        FeatureVector { bits }
    }

    /// Inverse of [`encode`](Self::encode); rejects any inconsistent vector.
    pub fn decode(&self, vec: &FeatureVector) -> Result<ArchitectureSpec, DecodeError> {
        let bits = &vec.bits;
        if bits.len() != self.len() {
            return Err(DecodeError::Length { expected: self.len(), got: bits.len() });
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(self.slot_err(i, "entry is not 0 or 1"));
        }
        let cfg = &self.cfg;
        let stem = StemSpec {
            kernel: cfg.stem_kernel_options[self.one_hot(bits, &self.stem_kernel, "stem.kernel")?],
            dropout: bits[self.stem_dropout] == 1,
        };

        let encoder = match &self.encoder {
            None => None,
            Some(slots) => {
                let layers_end = slots.layers_start + slots.per_layer * slots.max_layers;
                if bits[slots.present] == 0 {
                    if let Some(i) = (slots.layer_count.start..layers_end).find(|&i| bits[i] == 1) {
                        return Err(self.slot_err(i, "set while encoder.present is 0"));
                    }
                    None
                } else {
                    let k = self.one_hot(bits, &slots.layer_count, "encoder.layers")?;
                    let count = cfg.encoder_layer_count_options[k] as usize;
                    let mut layers = Vec::with_capacity(count);
                    for layer in 0..slots.max_layers {
                        let base = slots.layers_start + layer * slots.per_layer;
                        let region = &bits[base..base + slots.per_layer];
                        if layer >= count {
                            if let Some(j) = region.iter().position(|&b| b == 1) {
                                return Err(self.slot_err(base + j, "set on an unused layer"));
                            }
                            continue;
                        }
                        layers.push(self.decode_layer(layer, base, region)?);
                    }
                    Some(layers)
                }
            }
        };

        let decoder = match &self.decoder {
            None => None,
            Some(slots) => {
                if bits[slots.present] == 0 {
                    if let Some(i) = (slots.layers.start..slots.heads.end).find(|&i| bits[i] == 1) {
                        return Err(self.slot_err(i, "set while decoder.present is 0"));
                    }
                    None
                } else {
                    let l = self.one_hot(bits, &slots.layers, "decoder.layers")?;
                    let h = self.one_hot(bits, &slots.heads, "decoder.heads")?;
                    Some(DecoderSpec {
                        layers: cfg.decoder_layer_count_options[l],
                        heads: cfg.decoder_head_options[h],
                    })
                }
            }
        };

        let head = HeadSpec {
            pooling: cfg.head_pooling_options[self.one_hot(bits, &self.pooling, "head.pooling")?],
            spatial_dropout: bits[self.spatial_dropout] == 1,
        };
        let spec = ArchitectureSpec { stem, encoder, decoder, head };
        cfg.validate_spec(&spec)?;
        Ok(spec)
    }

    fn decode_layer(
        &self,
        layer: usize,
        base: usize,
        region: &[u8],
    ) -> Result<EncoderLayerSpec, DecodeError> {
        let heads = &self.cfg.mha_head_options;
        let mha: Vec<usize> = (0..heads.len()).filter(|&j| region[j] == 1).collect();
        if mha.len() > 1 {
            return Err(DecodeError::Slot {
                slot: format!("encoder.layer{layer}.mha"),
                reason: "more than one MHA head option set".into(),
            });
        }
        let mut ops: Vec<Op> = mha.iter().map(|&j| Op::Mha { heads: heads[j] }).collect();
        if region[heads.len()] == 1 {
            ops.push(Op::Gru);
        }
        if region[heads.len() + 1] == 1 {
            ops.push(Op::Conv);
        }
        if ops.is_empty() {
            return Err(self.slot_err(base, "active layer has no operation"));
        }
        Ok(EncoderLayerSpec::new(ops))
    }

    fn one_hot(&self, bits: &[u8], group: &Range<usize>, name: &str) -> Result<usize, DecodeError> {
        let set: Vec<usize> = group.clone().filter(|&i| bits[i] == 1).collect();
        match set.as_slice() {
            [i] => Ok(i - group.start),
            [] => Err(DecodeError::Slot { slot: name.into(), reason: "no bit set in one-hot group".into() }),
            _ => Err(DecodeError::Slot {
                slot: name.into(),
                reason: format!("{} bits set in one-hot group", set.len()),
            }),
        }
    }

    fn slot_err(&self, index: usize, reason: &str) -> DecodeError {
        DecodeError::Slot { slot: self.slots[index].name.clone(), reason: reason.into() }
    }
}

/// Fixed-length 0/1 vector. Serializes as a compact `"0101..."` string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureVector {
    pub bits: Vec<u8>,
}

impl FeatureVector {
    pub fn new(bits: Vec<u8>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn hamming(&self, other: &FeatureVector) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count()
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        f.write_str(&s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid character `{0}` in feature vector string")]
pub struct ParseVectorError(char);

impl FromStr for FeatureVector {
    type Err = ParseVectorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(ParseVectorError(other)),
            })
            .collect::<Result<Vec<u8>, _>>()
            .map(FeatureVector::new)
    }
}

impl Serialize for FeatureVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
