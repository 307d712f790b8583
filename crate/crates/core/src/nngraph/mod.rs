//! Network graph: feature maps, layer definitions, validation, lowering to
//! convolution specs, the dense reference evaluator and structural counts.

mod count;
mod lower;
mod oracle;
pub mod random;
mod tensor;
mod validate;

pub use count::{count_neurons, count_synapses, count_synapses_brute, NeuronCount};
pub use lower::{lower, lower_with, ChannelMap, ConvSpec, LowerOptions, LoweredGraph, NeuronRule, Piece, PhysFm, UpdateRule};
pub use oracle::{dense_oracle, dense_oracle_with_ops, OracleError, MAX_RULE_INIT};
pub use tensor::{Tensor, TensorError};
pub use validate::validate;

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub d: u32,
    pub w: u32,
    pub h: u32,
}

impl Shape {
    pub fn new(d: u32, w: u32, h: u32) -> Self {
        Shape { d, w, h }
    }

    pub fn len(&self) -> usize {
        self.d as usize * self.w as usize * self.h as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.w, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    #[default]
    Hidden,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: i64) -> i64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub id: String,
    pub depth: u32,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub activation: Activation,
}

impl FeatureMap {
    pub fn new(id: impl Into<String>, depth: u32, width: u32, height: u32) -> Self {
        FeatureMap { id: id.into(), depth, width, height, role: Role::Hidden, activation: Activation::Identity }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.depth, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum LayerKind {
    Conv,
    Deconv,
    DepthwiseConv,
    GroupedConv,
    DilatedConv,
    AvgPool,
    MaxPool,
    GlobalAvgPool,
    Dense,
    FlattenDense,
    UpsampleNearest,
    UpsampleBilinear,
    Add,
    Multiply,
    Concat,
    Split,
    Other(String),
}

impl LayerKind {
    pub const ALL: [LayerKind; 16] = [
        LayerKind::Conv,
        LayerKind::Deconv,
        LayerKind::DepthwiseConv,
        LayerKind::GroupedConv,
        LayerKind::DilatedConv,
        LayerKind::AvgPool,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Dense,
        LayerKind::FlattenDense,
        LayerKind::UpsampleNearest,
        LayerKind::UpsampleBilinear,
        LayerKind::Add,
        LayerKind::Multiply,
        LayerKind::Concat,
        LayerKind::Split,
    ];

    pub fn name(&self) -> &str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::DepthwiseConv => "depthwise_conv",
            LayerKind::GroupedConv => "grouped_conv",
            LayerKind::DilatedConv => "dilated_conv",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::MaxPool => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense => "dense",
            LayerKind::FlattenDense => "flatten_dense",
            LayerKind::UpsampleNearest => "upsample_nearest",
            LayerKind::UpsampleBilinear => "upsample_bilinear",
            LayerKind::Add => "add",
            LayerKind::Multiply => "multiply",
            LayerKind::Concat => "concat",
            LayerKind::Split => "split",
            LayerKind::Other(s) => s,
        }
    }

    /// Kinds whose weights come from the layer definition.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv
                | LayerKind::Deconv
                | LayerKind::DepthwiseConv
                | LayerKind::GroupedConv
                | LayerKind::DilatedConv
                | LayerKind::Dense
                | LayerKind::FlattenDense
        )
    }
}

impl From<String> for LayerKind {
    fn from(s: String) -> Self {
        LayerKind::ALL.iter().find(|k| k.name() == s).cloned().unwrap_or(LayerKind::Other(s))
    }
}

impl From<LayerKind> for String {
    fn from(k: LayerKind) -> Self {
        k.name().to_string()
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Padding in neurons: left, top, right, bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Padding {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl Padding {
    pub fn uniform(p: u32) -> Self {
        Padding { left: p, top: p, right: p, bottom: p }
    }
}

impl From<[u32; 4]> for Padding {
    fn from(a: [u32; 4]) -> Self {
        Padding { left: a[0], top: a[1], right: a[2], bottom: a[3] }
    }
}

impl From<Padding> for [u32; 4] {
    fn from(p: Padding) -> Self {
        [p.left, p.top, p.right, p.bottom]
    }
}

fn one() -> u32 {
    1
}

fn unit_kernel() -> [u32; 2] {
    [1, 1]
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

/// One layer. `kernel` is `[KW, KH]`. Weights, when given inline, are laid
/// out `[c_dst][c_src][kx][ky]` with `c_src` ranging over the inputs one
/// output channel sees (one for depthwise, the group size for grouped).
/// For `deconv` the stride is the upsampling factor and padding crops the
/// full transposed output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: LayerKind,
    pub sources: Vec<String>,
    pub destination: String,
    #[serde(default = "unit_kernel")]
    pub kernel: [u32; 2],
    #[serde(default)]
    pub padding: Padding,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: u32,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub upsample: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<u32>,
    /// First source channel taken by `split`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biases: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divisor: Option<u32>,
}

impl LayerDef {
    pub fn new(kind: LayerKind, sources: &[&str], destination: &str) -> Self {
        LayerDef {
            name: None,
            kind,
            sources: sources.iter().map(|s| s.to_string()).collect(),
            destination: destination.to_string(),
            kernel: [1, 1],
            padding: Padding::default(),
            stride: 1,
            upsample: 1,
            group_size: None,
            dilation: None,
            offset: None,
            weights: None,
            weight_seed: None,
            biases: None,
            divisor: None,
        }
    }

    pub fn kernel(mut self, kw: u32, kh: u32) -> Self {
        self.kernel = [kw, kh];
        self
    }

    pub fn pad(mut self, p: u32) -> Self {
        self.padding = Padding::uniform(p);
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn stride(mut self, s: u32) -> Self {
        self.stride = s;
        self
    }

    pub fn upsample(mut self, f: u32) -> Self {
        self.upsample = f;
        self
    }

    pub fn weights(mut self, w: Vec<i32>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn seed(mut self, s: u64) -> Self {
        self.weight_seed = Some(s);
        self
    }

    pub fn biases(mut self, b: Vec<i32>) -> Self {
        self.biases = Some(b);
        self
    }

    pub fn divisor(mut self, d: u32) -> Self {
        self.divisor = Some(d);
        self
    }

    pub fn group_size(mut self, g: u32) -> Self {
        self.group_size = Some(g);
        self
    }

    pub fn dilation(mut self, r: u32) -> Self {
        self.dilation = Some(r);
        self
    }

    pub fn offset(mut self, o: u32) -> Self {
        self.offset = Some(o);
        self
    }

    pub fn named(mut self, n: impl Into<String>) -> Self {
        self.name = Some(n.into());
        self
    }

    pub fn label(&self, index: usize) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => format!("#{index}:{}->{}", self.kind, self.destination),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub feature_maps: Vec<FeatureMap>,
    pub layers: Vec<LayerDef>,
}

impl Graph {
    pub fn from_json(s: &str) -> Result<Graph, GraphError> {
        serde_json::from_str(s).map_err(|e| GraphError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn fm(&self, id: &str) -> Option<&FeatureMap> {
        self.feature_maps.iter().find(|f| f.id == id)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &FeatureMap> {
        self.feature_maps.iter().filter(|f| f.role == Role::Input)
    }

    pub fn producer(&self, fm: &str) -> Option<&LayerDef> {
        self.layers.iter().find(|l| l.destination == fm)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("layer {layer}: unknown feature map `{id}`")]
    UnknownFeatureMap { layer: String, id: String },
    #[error("layer {layer}: shape mismatch, expected {expected} got {got}")]
    ShapeMismatch { layer: String, expected: Shape, got: Shape },
    #[error("cycle detected through feature map `{0}`")]
    CycleDetected(String),
    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),
    #[error("duplicate feature map id `{0}`")]
    DuplicateFeatureMap(String),
    #[error("feature map `{fm}`: {reason}")]
    BadFeatureMap { fm: String, reason: String },
    #[error("layer {layer}: {reason}")]
    BadLayer { layer: String, reason: String },
}

impl GraphError {
    pub fn kind(&self) -> &'static str {
        match self {
            GraphError::Parse(_) => "Parse",
            GraphError::UnknownFeatureMap { .. } => "UnknownFeatureMap",
            GraphError::ShapeMismatch { .. } => "ShapeMismatch",
            GraphError::CycleDetected(_) => "CycleDetected",
            GraphError::UnsupportedLayer(_) => "UnsupportedLayer",
            GraphError::DuplicateFeatureMap(_) => "DuplicateFeatureMap",
            GraphError::BadFeatureMap { .. } => "BadFeatureMap",
            GraphError::BadLayer { .. } => "BadLayer",
        }
    }
}

/// Saturate to the signed 8-bit range.
pub fn sat8(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// Deterministic weights in `[-127, 127]` drawn from a seed.
pub fn seeded_weights(seed: u64, n: usize) -> Vec<i8> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-127i32..=127) as i8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trips_through_json() {
        for k in LayerKind::ALL.iter() {
            let s = serde_json::to_string(k).unwrap();
            let back: LayerKind = serde_json::from_str(&s).unwrap();
            assert_eq!(&back, k);
        }
        let other: LayerKind = serde_json::from_str("\"lstm\"").unwrap();
        assert_eq!(other, LayerKind::Other("lstm".into()));
    }

    #[test]
    fn layer_defaults_fill_in() {
        let l: LayerDef =
            serde_json::from_str(r#"{"kind":"conv","sources":["a"],"destination":"b"}"#).unwrap();
        assert_eq!(l.kernel, [1, 1]);
        assert_eq!(l.stride, 1);
        assert_eq!(l.padding, Padding::default());
    }

    #[test]
    fn seeded_weights_stay_in_range_and_repeat() {
        let a = seeded_weights(3, 1000);
        assert_eq!(a, seeded_weights(3, 1000));
        assert!(a.iter().all(|&w| w >= -127));
        assert_ne!(a, seeded_weights(4, 1000));
    }
}
