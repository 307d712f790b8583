//! Benchmark networks with seeded synthetic weights.
//!
//! Layer tables live in `recipes.json`, one entry per network with the
//! publication it was transcribed from.

use crate::nngraph::{Activation, FeatureMap, Graph, LayerDef, LayerKind, Padding, Role, Shape};
use serde::Deserialize;
use std::collections::BTreeMap;
use thiserror::Error;

pub const NETWORKS: [&str; 5] = ["pilotnet", "mobilenet_v1", "resnet50", "resnet101", "darknet53"];

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ZooError {
    #[error("unknown network `{0}`")]
    UnknownNetwork(String),
    #[error("network `{name}` does not fit input {input}: {reason}")]
    BadInput { name: String, input: Shape, reason: String },
}

#[derive(Clone, Debug, Deserialize)]
pub struct Recipe {
    pub citation: String,
    pub input: [u32; 3],
    pub layers: Vec<Op>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Norm,
    Conv {
        out: u32,
        k: u32,
        #[serde(default = "one")]
        s: u32,
        pad: Option<u32>,
        act: Option<String>,
    },
    Dw {
        k: u32,
        #[serde(default = "one")]
        s: u32,
    },
    Maxpool {
        k: u32,
        s: u32,
        pad: u32,
    },
    GlobalAvg,
    FlattenDense {
        out: u32,
    },
    Dense {
        out: u32,
        act: Option<String>,
    },
    Bottleneck {
        blocks: u32,
        mid: u32,
        out: u32,
        s: u32,
    },
    DarkResidual {
        blocks: u32,
        out: u32,
    },
}

fn one() -> u32 {
    1
}

pub fn recipes() -> BTreeMap<String, Recipe> {
    serde_json::from_str(include_str!("recipes.json")).expect("embedded recipes parse")
}

pub fn recipe(name: &str) -> Result<Recipe, ZooError> {
    recipes().remove(name).ok_or_else(|| ZooError::UnknownNetwork(name.to_string()))
}

#[derive(Clone, Debug, Default)]
pub struct ZooOptions {
    pub seed: u64,
    /// Keep only the first layers of the expanded network.
    pub max_layers: Option<usize>,
    /// Clamp every channel count, including the input's.
    pub max_channels: Option<u32>,
    /// Replace the input shape (channels are still clamped).
    pub input: Option<Shape>,
}

pub fn build(name: &str, seed: u64) -> Result<Graph, ZooError> {
    build_with(name, &ZooOptions { seed, ..Default::default() })
}

pub fn build_truncated(name: &str, max_layers: usize, max_channels: u32) -> Result<Graph, ZooError> {
    build_with(name, &ZooOptions { seed: 0, max_layers: Some(max_layers.max(1)), max_channels: Some(max_channels.max(1)), input: None })
}

/// Requantization divisor keeping typical sums inside int8.
pub fn divisor_for(fan_in: u32) -> u32 {
    let target = 64.0 * (fan_in.max(1) as f64).sqrt();
    (target.ceil() as u32).next_power_of_two().min(1 << 15)
}

struct Builder<'a> {
    opts: &'a ZooOptions,
    name: &'a str,
    g: Graph,
    next: usize,
}

impl Builder<'_> {
    fn full(&self) -> bool {
        self.opts.max_layers.is_some_and(|m| self.g.layers.len() >= m)
    }

    fn ch(&self, c: u32) -> u32 {
        self.opts.max_channels.map_or(c, |m| c.min(m))
    }

    fn seed(&self) -> u64 {
        self.opts.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.g.layers.len() as u64 + 1)
    }

    fn shape(&self, fm: &str) -> Shape {
        self.g.fm(fm).unwrap().shape()
    }

    /// Append a layer writing a fresh map; returns the map id.
    fn push(&mut self, l: LayerDef, shape: Shape, act: Activation) -> Result<String, ZooError> {
        if shape.w == 0 || shape.h == 0 {
            return Err(ZooError::BadInput {
                name: self.name.to_string(),
                input: self.shape("input"),
                reason: format!("layer {} has an empty output", self.g.layers.len()),
            });
        }
        self.next += 1;
        let id = format!("l{}", self.next);
        self.g.feature_maps.push(FeatureMap::new(id.clone(), shape.d, shape.w, shape.h).with_activation(act));
        let mut l = l;
        l.destination = id.clone();
        if l.kind.has_weights() {
            l.weight_seed = Some(self.seed());
        }
        self.g.layers.push(l);
        Ok(id)
    }

    fn conv(&mut self, src: &str, out: u32, k: u32, s: u32, pad: u32, act: Activation, div: bool) -> Result<String, ZooError> {
        let i = self.shape(src);
        let out = self.ch(out);
        let shape = Shape::new(out, (i.w + 2 * pad).saturating_sub(k) / s + 1, (i.h + 2 * pad).saturating_sub(k) / s + 1);
        let shape = if i.w + 2 * pad < k || i.h + 2 * pad < k { Shape::new(out, 0, 0) } else { shape };
        let mut l = LayerDef::new(LayerKind::Conv, &[src], "").kernel(k, k).pad(pad).stride(s);
        if div {
            l = l.divisor(divisor_for(i.d * k * k));
        }
        self.push(l, shape, act)
    }

    fn add(&mut self, a: &str, b: &str, fan_in: u32) -> Result<String, ZooError> {
        let shape = self.shape(a);
        let l = LayerDef::new(LayerKind::Add, &[a, b], "").divisor(divisor_for(fan_in).min(16));
        self.push(l, shape, Activation::Relu)
    }

    fn op(&mut self, cur: String, op: &Op) -> Result<String, ZooError> {
        let relu = Activation::Relu;
        let act = |a: &Option<String>| if a.as_deref() == Some("identity") { Activation::Identity } else { Activation::Relu };
        Ok(match op {
            Op::Norm => {
                let i = self.shape(&cur);
                let l = LayerDef::new(LayerKind::DepthwiseConv, &[&cur], "").divisor(128);
                self.push(l, i, Activation::Identity)?
            }
            Op::Conv { out, k, s, pad, act: a } => self.conv(&cur, *out, *k, *s, pad.unwrap_or(k / 2), act(a), true)?,
            Op::Dw { k, s } => {
                let i = self.shape(&cur);
                let p = k / 2;
                let shape = Shape::new(i.d, (i.w + 2 * p - k) / s + 1, (i.h + 2 * p - k) / s + 1);
                let l = LayerDef::new(LayerKind::DepthwiseConv, &[&cur], "").kernel(*k, *k).pad(p).stride(*s).divisor(divisor_for(k * k));
                self.push(l, shape, relu)?
            }
            Op::Maxpool { k, s, pad } => {
                let i = self.shape(&cur);
                let shape = Shape::new(i.d, (i.w + 2 * pad - k) / s + 1, (i.h + 2 * pad - k) / s + 1);
                let l = LayerDef::new(LayerKind::MaxPool, &[&cur], "").kernel(*k, *k).padding(Padding::uniform(*pad)).stride(*s);
                self.push(l, shape, relu)?
            }
            Op::GlobalAvg => {
                let i = self.shape(&cur);
                self.push(LayerDef::new(LayerKind::GlobalAvgPool, &[&cur], ""), Shape::new(i.d, 1, 1), relu)?
            }
            Op::FlattenDense { out } => {
                let i = self.shape(&cur);
                let out = self.ch(*out);
                let l = LayerDef::new(LayerKind::FlattenDense, &[&cur], "").divisor(divisor_for(i.d * i.w * i.h));
                self.push(l, Shape::new(out, 1, 1), relu)?
            }
            Op::Dense { out, act: a } => {
                let i = self.shape(&cur);
                let out = self.ch(*out);
                let l = LayerDef::new(LayerKind::Dense, &[&cur], "").divisor(divisor_for(i.d));
                self.push(l, Shape::new(out, 1, 1), act(a))?
            }
            Op::Bottleneck { blocks, mid, out, s } => {
                let mut x = cur;
                for b in 0..*blocks {
                    if self.full() {
                        break;
                    }
                    let stride = if b == 0 { *s } else { 1 };
                    let a = self.conv(&x, *mid, 1, stride, 0, relu, true)?;
                    if self.full() {
                        return Ok(a);
                    }
                    let m = self.conv(&a, *mid, 3, 1, 1, relu, true)?;
                    if self.full() {
                        return Ok(m);
                    }
                    // residual branch without its own requantization so it folds into the add
                    let r = self.conv(&m, *out, 1, 1, 0, Activation::Identity, false)?;
                    if self.full() {
                        return Ok(r);
                    }
                    let short = if b == 0 {
                        let p = self.conv(&x, *out, 1, stride, 0, Activation::Identity, true)?;
                        if self.full() {
                            return Ok(p);
                        }
                        p
                    } else {
                        x.clone()
                    };
                    let fan = self.shape(&m).d;
                    x = self.add(&r, &short, fan)?;
                }
                x
            }
            Op::DarkResidual { blocks, out } => {
                let mut x = cur;
                for _ in 0..*blocks {
                    if self.full() {
                        break;
                    }
                    let a = self.conv(&x, out / 2, 1, 1, 0, relu, true)?;
                    if self.full() {
                        return Ok(a);
                    }
                    let r = self.conv(&a, *out, 3, 1, 1, Activation::Identity, false)?;
                    if self.full() {
                        return Ok(r);
                    }
                    let fan = self.shape(&a).d * 9;
                    x = self.add(&r, &x, fan)?;
                }
                x
            }
        })
    }
}

pub fn build_with(name: &str, opts: &ZooOptions) -> Result<Graph, ZooError> {
    let r = recipe(name)?;
    let input = opts.input.unwrap_or(Shape::new(r.input[0], r.input[1], r.input[2]));
    let d = opts.max_channels.map_or(input.d, |m| input.d.min(m));
    let mut b = Builder {
        opts,
        name,
        g: Graph {
            name: Some(name.to_string()),
            feature_maps: vec![FeatureMap::new("input", d, input.w, input.h).with_role(Role::Input)],
            layers: Vec::new(),
        },
        next: 0,
    };
    let mut cur = "input".to_string();
    for op in &r.layers {
        if b.full() {
            break;
        }
        cur = b.op(cur, op)?;
    }
    if let Some(f) = b.g.feature_maps.iter_mut().find(|f| f.id == cur) {
        if f.role != Role::Input {
            f.role = Role::Output;
        }
    }
    Ok(b.g)
}
