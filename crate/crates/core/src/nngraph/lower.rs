use super::validate::{effective_divisor, topo_order, weight_count};
use super::{seeded_weights, validate, Activation, Graph, GraphError, LayerDef, LayerKind, Role, Shape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMap {
    Full,
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Accumulate,
    Max,
    MulA,
    MulB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeuronRule {
    #[default]
    Accumulate,
    Max,
    Multiply,
}

/// A feature map that owns neurons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysFm {
    pub id: String,
    pub shape: Shape,
    pub role: Role,
    pub activation: Activation,
    pub rule: NeuronRule,
    pub divisor: u32,
    pub biases: Vec<i8>,
    /// log2 of the producer's stride; uniform over all specs writing here.
    pub sl: u8,
}

/// Channels `[c0, c0 + d)` of physical feature map `fm`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub fm: usize,
    pub c0: u32,
    pub d: u32,
}

/// A convolution between channel ranges of two physical feature maps.
///
/// Destination neuron `(c, X, Y)` sums `W[c][ci][j][k] * U[ci][X*2^sl + j - xp][Y*2^sl + k - yp]`
/// where `U` is the source upsampled by `2^us` with zeros interleaved. Weights
/// are stored transposed: `Wt[ci][dx][dy][cd] = W[cd][ci][kw-1-dx][kh-1-dy]`
/// (depthwise: `Wt[c][dx][dy]`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub src: usize,
    pub src_c0: u32,
    pub src_d: u32,
    pub dst: usize,
    pub dst_c0: u32,
    pub dst_d: u32,
    pub kw: u32,
    pub kh: u32,
    pub xp: i32,
    pub yp: i32,
    pub xpr: i32,
    pub ypr: i32,
    pub sl: u8,
    pub us: u8,
    pub map: ChannelMap,
    pub rule: UpdateRule,
    pub weights: Vec<i8>,
    pub layer: usize,
    /// Carries the overflow half of weights that do not fit 8 bits; repeats
    /// the previous spec's geometry and is not counted as extra synapses.
    #[serde(default)]
    pub shadow: bool,
}

impl ConvSpec {
    #[inline]
    pub fn wt_index(&self, ci: u32, dx: u32, dy: u32, cd: u32) -> usize {
        match self.map {
            ChannelMap::Full => {
                (((ci * self.kw + dx) * self.kh + dy) * self.dst_d + cd) as usize
            }
            ChannelMap::Depthwise => ((ci * self.kw + dx) * self.kh + dy) as usize,
        }
    }

    /// Transposed-kernel weight; `cd` is ignored for depthwise specs.
    #[inline]
    pub fn wt(&self, ci: u32, dx: u32, dy: u32, cd: u32) -> i8 {
        self.weights[self.wt_index(ci, dx, dy, cd)]
    }

    /// Weight in kernel orientation (`j`, `k` are offsets into the window).
    #[inline]
    pub fn w(&self, cd: u32, ci: u32, j: u32, k: u32) -> i8 {
        self.wt(ci, self.kw - 1 - j, self.kh - 1 - k, cd)
    }

    /// Number of destination channels fed by one source channel.
    pub fn fanout_channels(&self) -> u32 {
        match self.map {
            ChannelMap::Full => self.dst_d,
            ChannelMap::Depthwise => 1,
        }
    }

    /// Weights per source channel in the transposed layout.
    pub fn block_len(&self) -> usize {
        (self.kw * self.kh * self.fanout_channels()) as usize
    }

    /// True when every source channel carries an identical weight block.
    pub fn channel_invariant(&self) -> bool {
        let n = self.block_len();
        let first = &self.weights[..n];
        self.weights.chunks(n).all(|b| b == first)
    }

    /// Stride-1 destination extent in x.
    pub fn w1(&self, src_w: u32) -> i64 {
        ((src_w as i64) << self.us) + self.xp as i64 + self.xpr as i64 - self.kw as i64 + 1
    }

    pub fn h1(&self, src_h: u32) -> i64 {
        ((src_h as i64) << self.us) + self.yp as i64 + self.ypr as i64 - self.kh as i64 + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LowerOptions {
    /// Fold a conv producer into the residual add it feeds.
    pub fuse_residual_adds: bool,
}

impl Default for LowerOptions {
    fn default() -> Self {
        LowerOptions { fuse_residual_adds: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoweredGraph {
    /// Physical feature maps in topological order.
    pub fms: Vec<PhysFm>,
    pub specs: Vec<ConvSpec>,
    /// Every surviving original feature map as a list of physical pieces.
    pub views: BTreeMap<String, Vec<Piece>>,
}

impl LoweredGraph {
    pub fn fm_index(&self, id: &str) -> Option<usize> {
        self.fms.iter().position(|f| f.id == id)
    }

    pub fn specs_into(&self, fm: usize) -> impl Iterator<Item = (usize, &ConvSpec)> {
        self.specs.iter().enumerate().filter(move |(_, s)| s.dst == fm)
    }

    pub fn specs_from(&self, fm: usize) -> impl Iterator<Item = (usize, &ConvSpec)> {
        self.specs.iter().enumerate().filter(move |(_, s)| s.src == fm)
    }

    pub fn inputs(&self) -> impl Iterator<Item = (usize, &PhysFm)> {
        self.fms.iter().enumerate().filter(|(_, f)| f.role == Role::Input)
    }
}

pub fn lower(g: &Graph) -> Result<LoweredGraph, Vec<GraphError>> {
    lower_with(g, LowerOptions::default())
}

fn log2(v: u32) -> u8 {
    debug_assert!(v.is_power_of_two());
    v.trailing_zeros() as u8
}

fn layer_weights(l: &LayerDef, index: usize, n: usize) -> Vec<i8> {
    match &l.weights {
        Some(w) => w.iter().map(|&v| v as i8).collect(),
        None => seeded_weights(l.weight_seed.unwrap_or(0x5eed_0000 + index as u64), n),
    }
}

fn is_conv_like(k: &LayerKind) -> bool {
    matches!(
        k,
        LayerKind::Conv
            | LayerKind::Deconv
            | LayerKind::DepthwiseConv
            | LayerKind::GroupedConv
            | LayerKind::DilatedConv
            | LayerKind::Dense
            | LayerKind::FlattenDense
    )
}

struct Geometry {
    kw: u32,
    kh: u32,
    xp: i32,
    yp: i32,
    xpr: i32,
    ypr: i32,
    sl: u8,
    us: u8,
}

/// Map original feature maps that are folded into a residual add to that add's destination.
fn plan_fusion(g: &Graph, virtual_fms: &BTreeMap<&str, ()>) -> BTreeMap<String, String> {
    let mut uses: BTreeMap<&str, usize> = BTreeMap::new();
    for l in &g.layers {
        for s in &l.sources {
            *uses.entry(s.as_str()).or_default() += 1;
        }
    }
    let mut fused = BTreeMap::new();
    for l in &g.layers {
        if l.kind != LayerKind::Add || l.sources[0] == l.sources[1] {
            continue;
        }
        if l.biases.as_ref().is_some_and(|b| b.iter().any(|&v| v != 0)) {
            continue;
        }
        for s in &l.sources {
            let Some(fm) = g.fm(s) else { continue };
            if fm.role != Role::Hidden || fm.activation != Activation::Identity || virtual_fms.contains_key(s.as_str()) {
                continue;
            }
            if uses[s.as_str()] != 1 || fused.contains_key(&l.destination) {
                continue;
            }
            let Some(p) = g.producer(s) else { continue };
            if !is_conv_like(&p.kind) || p.divisor.unwrap_or(1) != 1 || p.stride != 1 && p.kind != LayerKind::Deconv {
                continue;
            }
            // one producer per add destination
            if fused.values().any(|d| d == &l.destination) {
                continue;
            }
            fused.insert(s.clone(), l.destination.clone());
            break;
        }
    }
    fused
}

pub fn lower_with(g: &Graph, opts: LowerOptions) -> Result<LoweredGraph, Vec<GraphError>> {
    validate(g)?;
    let order = topo_order(g).map_err(|e| vec![e])?;
    let layer_of: BTreeMap<&str, usize> =
        g.layers.iter().enumerate().map(|(i, l)| (l.destination.as_str(), i)).collect();
    let virtual_fms: BTreeMap<&str, ()> = g
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Concat | LayerKind::Split))
        .map(|l| (l.destination.as_str(), ()))
        .collect();
    let fused = if opts.fuse_residual_adds { plan_fusion(g, &virtual_fms) } else { BTreeMap::new() };

    // physical feature maps in topological order
    let mut fms = Vec::new();
    let mut phys: BTreeMap<String, usize> = BTreeMap::new();
    for id in &order {
        if virtual_fms.contains_key(id.as_str()) || fused.contains_key(id) {
            continue;
        }
        let f = g.fm(id).unwrap();
        phys.insert(id.clone(), fms.len());
        fms.push(PhysFm {
            id: id.clone(),
            shape: f.shape(),
            role: f.role,
            activation: f.activation,
            rule: NeuronRule::Accumulate,
            divisor: 1,
            biases: vec![0; f.depth as usize],
            sl: 0,
        });
    }

    let mut views: BTreeMap<String, Vec<Piece>> = BTreeMap::new();
    let mut specs = Vec::new();
    for id in &order {
        if let Some(&p) = phys.get(id) {
            views.insert(id.clone(), vec![Piece { fm: p, c0: 0, d: fms[p].shape.d }]);
        }
        if g.fm(id).unwrap().role == Role::Input {
            continue;
        }
        let li = layer_of[id.as_str()];
        let l = &g.layers[li];
        match l.kind {
            LayerKind::Concat => {
                let pieces = l.sources.iter().flat_map(|s| views[s].clone()).collect();
                views.insert(id.clone(), pieces);
                continue;
            }
            LayerKind::Split => {
                let d = g.fm(id).unwrap().depth;
                let pieces = slice_view(&views[&l.sources[0]], l.offset.unwrap_or(0), d);
                views.insert(id.clone(), pieces);
                continue;
            }
            _ => {}
        }
        // the layer writes into `target`, which is its own FM or the add it is fused into
        let target_id = fused.get(id).unwrap_or(id);
        let dst = phys[target_id];
        let src_shape = g.fm(&l.sources[0]).unwrap().shape();
        let dst_shape = g.fm(id).unwrap().shape();
        {
            let f = &mut fms[dst];
            if let Some(b) = l.biases.as_ref().filter(|b| b.iter().any(|&v| v != 0)) {
                f.biases = b.iter().map(|&v| v as i8).collect();
            }
            if target_id == id {
                f.divisor = effective_divisor(l, src_shape) as u32;
                f.sl = if l.kind == LayerKind::Deconv { 0 } else { log2(l.stride) };
                f.rule = match l.kind {
                    LayerKind::MaxPool => NeuronRule::Max,
                    LayerKind::Multiply => NeuronRule::Multiply,
                    _ => NeuronRule::Accumulate,
                };
            }
        }
        let mut emit = |spec: ConvSpec| specs.push(spec);
        lower_layer(g, l, li, &views, dst, src_shape, dst_shape, &mut emit);
    }
    Ok(LoweredGraph { fms, specs, views })
}

fn slice_view(pieces: &[Piece], start: u32, len: u32) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut pos = 0;
    for p in pieces {
        let (a, b) = (pos.max(start), (pos + p.d).min(start + len));
        if a < b {
            out.push(Piece { fm: p.fm, c0: p.c0 + a - pos, d: b - a });
        }
        pos += p.d;
    }
    out
}

/// Pieces of a view restricted to view channels `[start, start+len)`, each
/// tagged with its position inside the view.
fn view_range(pieces: &[Piece], start: u32, len: u32) -> Vec<(u32, Piece)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for p in pieces {
        let (a, b) = (pos.max(start), (pos + p.d).min(start + len));
        if a < b {
            out.push((a, Piece { fm: p.fm, c0: p.c0 + a - pos, d: b - a }));
        }
        pos += p.d;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn lower_layer(
    g: &Graph,
    l: &LayerDef,
    li: usize,
    views: &BTreeMap<String, Vec<Piece>>,
    dst: usize,
    src_shape: Shape,
    dst_shape: Shape,
    emit: &mut dyn FnMut(ConvSpec),
) {
    let [kw, kh] = l.kernel;
    let p = l.padding;
    let conv_geom = |kw: u32, kh: u32| Geometry {
        kw,
        kh,
        xp: p.left as i32,
        yp: p.top as i32,
        xpr: p.right as i32,
        ypr: p.bottom as i32,
        sl: log2(l.stride),
        us: log2(l.upsample),
    };
    let src_view: &[Piece] = views.get(&l.sources[0]).map(|v| v.as_slice()).unwrap_or(&[]);
    let (ds, dd) = (src_shape.d, dst_shape.d);
    match l.kind {
        LayerKind::Conv | LayerKind::DilatedConv | LayerKind::Deconv | LayerKind::Dense | LayerKind::FlattenDense => {
            let w = layer_weights(l, li, weight_count(l, src_shape, dst_shape));
            let (geom, kernel): (Geometry, Box<dyn Fn(u32, u32, u32, u32) -> i8>) = match l.kind {
                LayerKind::Conv => {
                    let k = move |cd: u32, ci: u32, j: u32, k: u32| w[(((cd * ds + ci) * kw + j) * kh + k) as usize];
                    (conv_geom(kw, kh), Box::new(k))
                }
                LayerKind::DilatedConv => {
                    let r = l.dilation.unwrap_or(1);
                    let k = move |cd: u32, ci: u32, j: u32, k: u32| {
                        if !j.is_multiple_of(r) || !k.is_multiple_of(r) {
                            0
                        } else {
                            w[(((cd * ds + ci) * kw + j / r) * kh + k / r) as usize]
                        }
                    };
                    (conv_geom(r * (kw - 1) + 1, r * (kh - 1) + 1), Box::new(k))
                }
                LayerKind::Deconv => {
                    let s = l.stride as i32;
                    let geom = Geometry {
                        kw,
                        kh,
                        xp: kw as i32 - 1 - p.left as i32,
                        yp: kh as i32 - 1 - p.top as i32,
                        xpr: kw as i32 - s - p.right as i32,
                        ypr: kh as i32 - s - p.bottom as i32,
                        sl: 0,
                        us: log2(l.stride),
                    };
                    let k = move |cd: u32, ci: u32, j: u32, k: u32| {
                        w[(((cd * ds + ci) * kw + (kw - 1 - j)) * kh + (kh - 1 - k)) as usize]
                    };
                    (geom, Box::new(k))
                }
                LayerKind::Dense => {
                    let geom = Geometry { kw: 1, kh: 1, xp: 0, yp: 0, xpr: 0, ypr: 0, sl: 0, us: 0 };
                    (geom, Box::new(move |cd: u32, ci: u32, _, _| w[(cd * ds + ci) as usize]))
                }
                _ => {
                    let (sw, sh) = (src_shape.w, src_shape.h);
                    let geom = Geometry { kw: sw, kh: sh, xp: 0, yp: 0, xpr: 0, ypr: 0, sl: 0, us: 0 };
                    let k = move |cd: u32, ci: u32, j: u32, k: u32| w[(((cd * ds + ci) * sw + j) * sh + k) as usize];
                    (geom, Box::new(k))
                }
            };
            for (v0, piece) in view_range(src_view, 0, ds) {
                full_spec(li, piece, v0, dst, 0, dd, &geom, &*kernel, UpdateRule::Accumulate, emit);
            }
        }
        LayerKind::GroupedConv => {
            let gsz = l.group_size.unwrap();
            let groups = ds / gsz;
            let dg = dd / groups;
            let w = layer_weights(l, li, weight_count(l, src_shape, dst_shape));
            let geom = conv_geom(kw, kh);
            for gi in 0..groups {
                let kernel = |cd: u32, ci: u32, j: u32, k: u32| {
                    w[((((gi * dg + cd) * gsz + (ci - gi * gsz)) * kw + j) * kh + k) as usize]
                };
                for (v0, piece) in view_range(src_view, gi * gsz, gsz) {
                    full_spec(li, piece, v0, dst, gi * dg, dg, &geom, &kernel, UpdateRule::Accumulate, emit);
                }
            }
        }
        LayerKind::DepthwiseConv => {
            let w = layer_weights(l, li, weight_count(l, src_shape, dst_shape));
            let geom = conv_geom(kw, kh);
            for (v0, piece) in view_range(src_view, 0, ds) {
                let kernel = |c: u32, j: u32, k: u32| w[(((v0 + c) * kw + j) * kh + k) as usize];
                depthwise_spec(li, piece, v0, dst, &geom, &kernel, UpdateRule::Accumulate, emit);
            }
        }
        LayerKind::AvgPool | LayerKind::MaxPool => {
            let rule = if l.kind == LayerKind::MaxPool { UpdateRule::Max } else { UpdateRule::Accumulate };
            let geom = conv_geom(kw, kh);
            for (v0, piece) in view_range(src_view, 0, ds) {
                depthwise_spec(li, piece, v0, dst, &geom, &|_, _, _| 1, rule, emit);
            }
        }
        LayerKind::GlobalAvgPool => {
            let geom = Geometry { kw: src_shape.w, kh: src_shape.h, xp: 0, yp: 0, xpr: 0, ypr: 0, sl: 0, us: 0 };
            for (v0, piece) in view_range(src_view, 0, ds) {
                depthwise_spec(li, piece, v0, dst, &geom, &|_, _, _| 1, UpdateRule::Accumulate, emit);
            }
        }
        LayerKind::UpsampleNearest => {
            let f = l.upsample;
            let geom = Geometry { kw: f, kh: f, xp: f as i32 - 1, yp: f as i32 - 1, xpr: 0, ypr: 0, sl: 0, us: log2(f) };
            for (v0, piece) in view_range(src_view, 0, ds) {
                depthwise_spec(li, piece, v0, dst, &geom, &|_, _, _| 1, UpdateRule::Accumulate, emit);
            }
        }
        LayerKind::UpsampleBilinear => {
            let f = l.upsample as i32;
            let k = 2 * f as u32;
            let geom = Geometry {
                kw: k,
                kh: k,
                xp: 3 * f / 2 - 1,
                yp: 3 * f / 2 - 1,
                xpr: f / 2,
                ypr: f / 2,
                sl: 0,
                us: log2(l.upsample),
            };
            let tri = |j: u32| 2 * f - (2 * j as i32 + 1 - 2 * f).abs();
            // products above 127 are split over two specs with equal geometry
            let lo = |_: u32, j: u32, k: u32| ((tri(j) * tri(k)) / 2) as i8;
            let hi = |_: u32, j: u32, k: u32| ((tri(j) * tri(k) + 1) / 2) as i8;
            let whole = |_: u32, j: u32, k: u32| (tri(j) * tri(k)) as i8;
            let needs_split = tri(f as u32 - 1) * tri(f as u32 - 1) > 127;
            for (v0, piece) in view_range(src_view, 0, ds) {
                if needs_split {
                    depthwise_spec(li, piece, v0, dst, &geom, &hi, UpdateRule::Accumulate, emit);
                    let mut last = None;
                    depthwise_spec(li, piece, v0, dst, &geom, &lo, UpdateRule::Accumulate, &mut |s| last = Some(s));
                    emit(ConvSpec { shadow: true, ..last.unwrap() });
                } else {
                    depthwise_spec(li, piece, v0, dst, &geom, &whole, UpdateRule::Accumulate, emit);
                }
            }
        }
        LayerKind::Add | LayerKind::Multiply => {
            let geom = Geometry { kw: 1, kh: 1, xp: 0, yp: 0, xpr: 0, ypr: 0, sl: 0, us: 0 };
            for (si, s) in l.sources.iter().enumerate() {
                if l.kind == LayerKind::Add && g.producer(s).is_some() && !views.contains_key(s) {
                    continue;
                }
                let rule = match (l.kind == LayerKind::Multiply, si) {
                    (false, _) => UpdateRule::Accumulate,
                    (true, 0) => UpdateRule::MulA,
                    (true, _) => UpdateRule::MulB,
                };
                for (v0, piece) in view_range(&views[s], 0, dd) {
                    depthwise_spec(li, piece, v0, dst, &geom, &|_, _, _| 1, rule, emit);
                }
            }
        }
        LayerKind::Concat | LayerKind::Split | LayerKind::Other(_) => unreachable!(),
    }
}

#[allow(clippy::too_many_arguments)]
fn full_spec(
    layer: usize,
    piece: Piece,
    v0: u32,
    dst: usize,
    dst_c0: u32,
    dst_d: u32,
    g: &Geometry,
    kernel: &dyn Fn(u32, u32, u32, u32) -> i8,
    rule: UpdateRule,
    emit: &mut dyn FnMut(ConvSpec),
) {
    let (kw, kh) = (g.kw, g.kh);
    let mut weights = vec![0i8; (piece.d * kw * kh * dst_d) as usize];
    for ci in 0..piece.d {
        for dx in 0..kw {
            for dy in 0..kh {
                for cd in 0..dst_d {
                    weights[(((ci * kw + dx) * kh + dy) * dst_d + cd) as usize] =
                        kernel(cd, v0 + ci, kw - 1 - dx, kh - 1 - dy);
                }
            }
        }
    }
    emit(ConvSpec {
        src: piece.fm,
        src_c0: piece.c0,
        src_d: piece.d,
        dst,
        dst_c0,
        dst_d,
        kw,
        kh,
        xp: g.xp,
        yp: g.yp,
        xpr: g.xpr,
        ypr: g.ypr,
        sl: g.sl,
        us: g.us,
        map: ChannelMap::Full,
        rule,
        weights,
        layer,
        shadow: false,
    });
}

#[allow(clippy::too_many_arguments)]
fn depthwise_spec(
    layer: usize,
    piece: Piece,
    v0: u32,
    dst: usize,
    g: &Geometry,
    kernel: &dyn Fn(u32, u32, u32) -> i8,
    rule: UpdateRule,
    emit: &mut dyn FnMut(ConvSpec),
) {
    let (kw, kh) = (g.kw, g.kh);
    let mut weights = vec![0i8; (piece.d * kw * kh) as usize];
    for c in 0..piece.d {
        for dx in 0..kw {
            for dy in 0..kh {
                weights[((c * kw + dx) * kh + dy) as usize] = kernel(c, kw - 1 - dx, kh - 1 - dy);
            }
        }
    }
    emit(ConvSpec {
        src: piece.fm,
        src_c0: piece.c0,
        src_d: piece.d,
        dst,
        dst_c0: v0,
        dst_d: piece.d,
        kw,
        kh,
        xp: g.xp,
        yp: g.yp,
        xpr: g.xpr,
        ypr: g.ypr,
        sl: g.sl,
        us: g.us,
        map: ChannelMap::Depthwise,
        rule,
        weights,
        layer,
        shadow: false,
    });
}
