//! Memory requirements of a network under three connectivity schemes: the
//! axon-based images produced by the compiler, a flat per-synapse lookup
//! table, and a two-level (source tag / destination table) lookup table.

use crate::compiler::Program;
use crate::nngraph::{ChannelMap, ConvSpec, LoweredGraph, Role, Shape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidthConfig {
    pub state_bits: u64,
    pub weight_bits: u64,
    pub word_bits: u64,
    pub flat_lut_entry_bits: u64,
    pub hier_src_entry_bits: u64,
    pub hier_dst_entry_bits: u64,
    /// Neurons per core assumed by the hierarchical table.
    pub m: u64,
}

impl Default for BitWidthConfig {
    fn default() -> Self {
        BitWidthConfig {
            state_bits: 16,
            weight_bits: 8,
            word_bits: 64,
            flat_lut_entry_bits: 23,
            hier_src_entry_bits: 23,
            hier_dst_entry_bits: 15,
            m: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Proposed,
    FlatLut,
    HierLut,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::FlatLut => "flat-lut",
            Scheme::HierLut => "hier-lut",
        }
    }
}

/// Bytes per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categories {
    pub neurons: u64,
    pub connectivity: u64,
    pub parameters: u64,
}

impl Categories {
    pub fn total(&self) -> u64 {
        self.neurons + self.connectivity + self.parameters
    }

    fn add(&mut self, o: &Categories) {
        self.neurons += o.neurons;
        self.connectivity += o.connectivity;
        self.parameters += o.parameters;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMem {
    pub fm: String,
    #[serde(flatten)]
    pub bytes: Categories,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreMem {
    pub core: (u32, u32),
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemReport {
    pub scheme: Scheme,
    pub network: Option<String>,
    /// Identifies the physical feature maps the report was computed over.
    pub fingerprint: String,
    pub layers: Vec<LayerMem>,
    pub total: Categories,
    /// Proposed scheme only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cores: Vec<CoreMem>,
    /// Flat LUT only: |N|·F·log2|N| connectivity and |N|·F·B parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<Categories>,
    pub synapses: u64,
    pub neurons: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("reports describe different graphs")]
    MismatchedGraphs,
    #[error("a comparison needs at least two reports")]
    NotEnoughReports,
}

fn fingerprint<'a>(fms: impl Iterator<Item = (&'a str, Shape)>) -> String {
    // FNV-1a over ids and shapes
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (id, s) in fms {
        for b in format!("{id}:{s};").bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// Proposed scheme, read off the compiled core images.
pub fn mem_proposed(program: &Program) -> MemReport {
    let map = &program.mapping;
    let idx = program.image_index();
    let mut per_fm = vec![Categories::default(); map.fms.len()];
    for pl in &map.fragments {
        let im = &program.images[idx[&pl.core]];
        let p = pl.pop as usize;
        let pd = &im.pops[p];
        let kd_entries: u64 = im.slots.iter().filter(|s| s.pop as usize == p).map(|s| s.kd_len as u64).sum();
        let neurons = im.state_words(p) as u64;
        let connectivity = 1 + pd.axon_count as u64 + kd_entries;
        let c = &mut per_fm[pl.frag.fm];
        c.neurons += neurons * 8;
        c.connectivity += connectivity * 8;
        c.parameters += (pl.words - neurons - connectivity) * 8;
    }
    let mut total = Categories::default();
    for c in &per_fm {
        total.add(c);
    }
    debug_assert_eq!(total.total(), program.total_words() * 8);
    let neurons = map.fms.iter().filter(|f| f.role != Role::Input).map(|f| f.shape.len() as u64).sum();
    MemReport {
        scheme: Scheme::Proposed,
        network: None,
        fingerprint: fingerprint(map.fms.iter().map(|f| (f.id.as_str(), f.shape))),
        layers: map.fms.iter().zip(per_fm).map(|(f, bytes)| LayerMem { fm: f.id.clone(), bytes }).collect(),
        total,
        cores: program
            .images
            .iter()
            .map(|im| CoreMem { core: (im.core.0 as u32, im.core.1 as u32), bytes: im.occupancy_bytes() })
            .collect(),
        analytic: None,
        synapses: 0,
        neurons,
    }
}

fn synapses_into(lg: &LoweredGraph, fm: usize) -> u64 {
    lg.specs_into(fm).map(|(_, s)| crate::nngraph::count_synapses(s, lg.fms[s.src].shape, lg.fms[s.dst].shape)).sum()
}

fn lut_report(lg: &LoweredGraph, scheme: Scheme, cfg: &BitWidthConfig, conn_bits: impl Fn(usize, u64) -> u64) -> MemReport {
    let mut layers = Vec::with_capacity(lg.fms.len());
    let mut total = Categories::default();
    let mut synapses = 0;
    let mut neurons = 0;
    for (i, f) in lg.fms.iter().enumerate() {
        let syn = synapses_into(lg, i);
        synapses += syn;
        let input = f.role == Role::Input;
        let n = if input { 0 } else { f.shape.len() as u64 };
        neurons += n;
        let bias = if input { 0 } else { f.shape.d as u64 * cfg.weight_bits };
        let c = Categories {
            neurons: bytes(n * cfg.state_bits),
            connectivity: bytes(conn_bits(i, syn)),
            parameters: bytes(syn * cfg.weight_bits + bias),
        };
        total.add(&c);
        layers.push(LayerMem { fm: f.id.clone(), bytes: c });
    }
    MemReport {
        scheme,
        network: None,
        fingerprint: fingerprint(lg.fms.iter().map(|f| (f.id.as_str(), f.shape))),
        layers,
        total,
        cores: Vec::new(),
        analytic: None,
        synapses,
        neurons,
    }
}

/// One LUT entry per synapse.
pub fn mem_flat_lut(lg: &LoweredGraph, cfg: &BitWidthConfig) -> MemReport {
    let mut r = lut_report(lg, Scheme::FlatLut, cfg, |_, syn| syn * cfg.flat_lut_entry_bits);
    let all: u64 = lg.fms.iter().map(|f| f.shape.len() as u64).sum();
    let log_n = (all.max(2) as f64).log2().ceil() as u64;
    r.analytic = Some(Categories {
        neurons: r.total.neurons,
        connectivity: bytes(r.synapses * log_n),
        parameters: bytes(r.synapses * cfg.weight_bits),
    });
    r
}

/// Valid stride-1 destination count per source coordinate and tap:
/// `reach[x][j]` is true when tap `j` of source position `x` lands on a neuron.
fn axis_targets(src: u32, dst: u32, k: u32, pad: i32, sl: u8, us: u8) -> Vec<Vec<bool>> {
    (0..src)
        .map(|x| {
            (0..k)
                .map(|j| {
                    // destination P with (P << sl) + j - pad = x << us
                    let p = ((x as i64) << us) + pad as i64 - j as i64;
                    p >= 0 && p & ((1 << sl) - 1) == 0 && (p >> sl) < dst as i64
                })
                .collect()
        })
        .collect()
}

fn live_taps(spec: &ConvSpec) -> Vec<bool> {
    let n = spec.fanout_channels() as usize;
    let taps = (spec.kw * spec.kh) as usize;
    let mut live = vec![false; taps];
    for (i, w) in spec.weights.iter().enumerate() {
        if *w != 0 {
            live[(i / n) % taps] = true;
        }
    }
    live
}

/// Synaptic fan-out of every neuron of physical map `fm` (CHW order).
pub fn fanouts(lg: &LoweredGraph, fm: usize) -> Vec<u64> {
    let s = lg.fms[fm].shape;
    let plane = (s.w * s.h) as usize;
    let mut out = vec![0u64; s.len()];
    for spec in lg.specs.iter().filter(|e| e.src == fm && !e.shadow) {
        let d = lg.fms[spec.dst].shape;
        let tx = axis_targets(s.w, d.w, spec.kw, spec.xp, spec.sl, spec.us);
        let ty = axis_targets(s.h, d.h, spec.kh, spec.yp, spec.sl, spec.us);
        let live = live_taps(spec);
        let mut grid = vec![0u64; plane];
        for y in 0..s.h as usize {
            for x in 0..s.w as usize {
                let mut n = 0;
                for j in 0..spec.kw as usize {
                    if !tx[x][j] {
                        continue;
                    }
                    for k in 0..spec.kh as usize {
                        // live is indexed by transposed taps
                        let t = (spec.kw as usize - 1 - j) * spec.kh as usize + (spec.kh as usize - 1 - k);
                        if ty[y][k] && live[t] {
                            n += 1;
                        }
                    }
                }
                grid[y * s.w as usize + x] = n;
            }
        }
        let ch = match spec.map {
            ChannelMap::Full => spec.dst_d as u64,
            ChannelMap::Depthwise => 1,
        };
        for c in spec.src_c0..spec.src_c0 + spec.src_d {
            let base = c as usize * plane;
            for (o, g) in out[base..base + plane].iter_mut().zip(&grid) {
                *o += g * ch;
            }
        }
    }
    out
}

/// Per source neuron ⌈fanout/M⌉ tagged entries, plus one destination entry per synapse.
pub fn mem_hier_lut(lg: &LoweredGraph, cfg: &BitWidthConfig) -> MemReport {
    let src_entries: Vec<u64> =
        (0..lg.fms.len()).map(|i| fanouts(lg, i).iter().map(|f| f.div_ceil(cfg.m.max(1))).sum()).collect();
    let mut r = lut_report(lg, Scheme::HierLut, cfg, |_, syn| syn * cfg.hier_dst_entry_bits);
    // source entries are charged to the layer that owns the source neurons
    for (i, l) in r.layers.iter_mut().enumerate() {
        let extra = src_entries[i] * cfg.hier_src_entry_bits;
        let before = l.bytes.connectivity;
        let syn = synapses_into(lg, i);
        l.bytes.connectivity = bytes(syn * cfg.hier_dst_entry_bits + extra);
        r.total.connectivity += l.bytes.connectivity - before;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub scheme: Scheme,
    pub neurons: f64,
    pub connectivity: f64,
    pub parameters: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub network: Option<String>,
    pub reference: Scheme,
    pub reports: Vec<(Scheme, Categories)>,
    /// Baseline bytes divided by reference bytes.
    pub ratios: Vec<Ratio>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

/// Ratios of every report against the proposed one (or the first report).
pub fn compare(reports: &[MemReport]) -> Result<Comparison, MemError> {
    if reports.len() < 2 {
        return Err(MemError::NotEnoughReports);
    }
    if reports.iter().any(|r| r.fingerprint != reports[0].fingerprint) {
        return Err(MemError::MismatchedGraphs);
    }
    let reference = reports.iter().find(|r| r.scheme == Scheme::Proposed).unwrap_or(&reports[0]);
    let p = reference.total;
    let ratios = reports
        .iter()
        .filter(|r| !std::ptr::eq(*r, reference))
        .map(|r| Ratio {
            scheme: r.scheme,
            neurons: ratio(r.total.neurons, p.neurons),
            connectivity: ratio(r.total.connectivity, p.connectivity),
            parameters: ratio(r.total.parameters, p.parameters),
            total: ratio(r.total.total(), p.total()),
        })
        .collect();
    Ok(Comparison {
        network: reports.iter().find_map(|r| r.network.clone()),
        reference: reference.scheme,
        reports: reports.iter().map(|r| (r.scheme, r.total)).collect(),
        ratios,
    })
}

/// Binary-prefixed size, e.g. `3.16 kB` for 3236 bytes.
pub fn human(b: u64) -> String {
    let b = b as f64;
    if b >= 1024.0 * 1024.0 * 1024.0 {
        format!("{:.2} GB", b / (1024.0 * 1024.0 * 1024.0))
    } else if b >= 1024.0 * 1024.0 {
        format!("{:.2} MB", b / (1024.0 * 1024.0))
    } else if b >= 1024.0 {
        format!("{:.2} kB", b / 1024.0)
    } else {
        format!("{b} B")
    }
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(n) = &self.network {
            let _ = writeln!(s, "{n}");
        }
        let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>12} {:>12}", "scheme", "neurons", "connectivity", "parameters", "total");
        for (scheme, c) in &self.reports {
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>12} {:>12} {:>12}",
                scheme.name(),
                human(c.neurons),
                human(c.connectivity),
                human(c.parameters),
                human(c.total())
            );
            if let Some(r) = self.ratios.iter().find(|r| r.scheme == *scheme) {
                let _ = writeln!(
                    s,
                    "{:<10} {:>11.0}x {:>11.0}x {:>11.0}x {:>11.0}x",
                    "",
                    r.neurons,
                    r.connectivity,
                    r.parameters,
                    r.total
                );
            }
        }
        s
    }

    /// One row per (network, scheme, category).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("network,scheme,category,bytes\n");
        let net = self.network.as_deref().unwrap_or("");
        for (scheme, c) in &self.reports {
            for (cat, v) in [("neurons", c.neurons), ("connectivity", c.connectivity), ("parameters", c.parameters)] {
                let _ = writeln!(s, "{net},{},{cat},{v}", scheme.name());
            }
        }
        s
    }
}

impl MemReport {
    pub fn with_network(mut self, name: Option<String>) -> Self {
        self.network = name;
        self
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} ({})", self.network.as_deref().unwrap_or("graph"), self.scheme.name());
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>12}", "fm", "neurons", "connectivity", "parameters");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>12} {:>12}",
                l.fm,
                human(l.bytes.neurons),
                human(l.bytes.connectivity),
                human(l.bytes.parameters)
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>12} {:>12}  = {}",
            "total",
            human(self.total.neurons),
            human(self.total.connectivity),
            human(self.total.parameters),
            human(self.total.total())
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("network,scheme,category,bytes\n");
        let net = self.network.as_deref().unwrap_or("");
        for (cat, v) in [("neurons", self.total.neurons), ("connectivity", self.total.connectivity), ("parameters", self.total.parameters)] {
            let _ = writeln!(s, "{net},{},{cat},{v}", self.scheme.name());
        }
        s
    }
}

/// Per-layer report map keyed by scheme, for callers that want all three.
pub fn analyze(lg: &LoweredGraph, program: &Program, cfg: &BitWidthConfig) -> BTreeMap<Scheme, MemReport> {
    let mut m = BTreeMap::new();
    m.insert(Scheme::Proposed, mem_proposed(program));
    m.insert(Scheme::FlatLut, mem_flat_lut(lg, cfg));
    m.insert(Scheme::HierLut, mem_hier_lut(lg, cfg));
    m
}
