//! Fragmentation, placement and per-core image generation.
//!
//! A lowered graph is cut into fragments that fit one core each, the
//! fragments are placed on a mesh, and every core receives an image holding
//! population descriptors, axons, source-channel tables, weights and state.

pub mod descriptor;
pub mod fragment;
pub mod image;
pub mod place;
pub mod plan;
pub mod split;

pub use descriptor::{Axon, DescriptorError, KernelDescriptor, NeuronType, PopulationDescriptor};
pub use fragment::{Cut, CutPlan, Fragment};
pub use image::{CoreImage, ImageError, Slot};
pub use place::Mesh;

use crate::nngraph::{lower, Graph, GraphError, LoweredGraph, NeuronRule, Piece, Role, Shape};
use plan::{block_key, block_weights, compute_axon, dst_channels, outgoing, plan_destination, words_of, BlockKey, Net};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("invalid graph: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Graph(Vec<GraphError>),
    #[error("feature map `{fm}` cannot be mapped: {reason}")]
    Unmappable { fm: String, reason: String },
    #[error("no core can host fragment {fragment}")]
    PlacementFailed { fragment: String },
    #[error("invalid cut for `{fm}`: {reason}")]
    InvalidCut { fm: String, reason: String },
    #[error("sigma-delta neurons do not support the update rule of `{fm}`")]
    SigmaDeltaUnsupported { fm: String },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

impl CompileError {
    pub fn kind(&self) -> &'static str {
        match self {
            CompileError::Graph(_) => "InvalidGraph",
            CompileError::Unmappable { .. } => "Unmappable",
            CompileError::PlacementFailed { .. } => "PlacementFailed",
            CompileError::InvalidCut { .. } => "InvalidCut",
            CompileError::SigmaDeltaUnsupported { .. } => "SigmaDeltaUnsupported",
            CompileError::Descriptor(DescriptorError::FieldOverflow { .. }) => "FieldOverflow",
            CompileError::Descriptor(DescriptorError::InvalidEncoding { .. }) => "InvalidEncoding",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompileOptions {
    pub budget_bytes: u64,
    pub mesh: Mesh,
    /// Grow the mesh until placement succeeds.
    pub auto_mesh: bool,
    pub mode: NeuronType,
    /// Explicit cuts by physical feature map id.
    pub cuts: BTreeMap<String, CutPlan>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            budget_bytes: 256 * 1024,
            mesh: Mesh::new(16, 16),
            auto_mesh: false,
            mode: NeuronType::Standard,
            cuts: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmInfo {
    pub id: String,
    pub shape: Shape,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placed {
    pub frag: Fragment,
    pub core: (u32, u32),
    /// Index of the population on its core.
    pub pop: u32,
    pub words: u64,
}

/// Host-side metadata: where each fragment lives and how views map onto
/// physical feature maps. Physical maps are listed in firing order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping {
    pub mode: NeuronType,
    pub budget_bytes: u64,
    pub mesh: Mesh,
    pub fms: Vec<FmInfo>,
    pub views: BTreeMap<String, Vec<Piece>>,
    pub fragments: Vec<Placed>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    /// Images of occupied cores, ordered by (x, y).
    pub images: Vec<CoreImage>,
    pub mapping: Mapping,
}

#[derive(Debug, Error)]
pub enum ProgramIoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("mapping: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{file}: {source}")]
    Image { file: String, source: ImageError },
}

impl Program {
    pub fn image_index(&self) -> HashMap<(u32, u32), usize> {
        self.images.iter().enumerate().map(|(i, im)| ((im.core.0 as u32, im.core.1 as u32), i)).collect()
    }

    pub fn total_words(&self) -> u64 {
        self.images.iter().map(|i| i.occupancy_words()).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<(), ProgramIoError> {
        std::fs::create_dir_all(dir)?;
        for im in &self.images {
            let file = format!("core_{}_{}.axfl", im.core.0, im.core.1);
            let bytes = im.to_bytes().map_err(|source| ProgramIoError::Image { file: file.clone(), source })?;
            std::fs::write(dir.join(file), bytes)?;
        }
        std::fs::write(dir.join("mapping.json"), serde_json::to_string_pretty(&self.mapping)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Program, ProgramIoError> {
        let mapping: Mapping = serde_json::from_str(&std::fs::read_to_string(dir.join("mapping.json"))?)?;
        let mut cores: Vec<(u32, u32)> = mapping.fragments.iter().map(|p| p.core).collect();
        cores.sort();
        cores.dedup();
        let mut images = Vec::with_capacity(cores.len());
        for (x, y) in cores {
            let file = format!("core_{x}_{y}.axfl");
            let bytes = std::fs::read(dir.join(&file))?;
            images.push(CoreImage::from_bytes(&bytes).map_err(|source| ProgramIoError::Image { file, source })?);
        }
        Ok(Program { images, mapping })
    }
}

/// Lower and compile a graph.
pub fn compile_graph(g: &Graph, opts: &CompileOptions) -> Result<Program, CompileError> {
    let lg = lower(g).map_err(CompileError::Graph)?;
    compile(&lg, opts)
}

fn scale_log(divisor: u32) -> u32 {
    if divisor.is_power_of_two() && divisor <= 1 << 15 {
        divisor.trailing_zeros()
    } else {
        0
    }
}

pub fn compile(lg: &LoweredGraph, opts: &CompileOptions) -> Result<Program, CompileError> {
    if opts.mode == NeuronType::SigmaDelta {
        if let Some(f) = lg.fms.iter().find(|f| f.rule != NeuronRule::Accumulate) {
            return Err(CompileError::SigmaDeltaUnsupported { fm: f.id.clone() });
        }
    }
    let net = Net::new(lg, opts.mode);
    let mut overrides = Vec::new();
    for (id, cut) in &opts.cuts {
        let i = lg
            .fm_index(id)
            .ok_or_else(|| CompileError::InvalidCut { fm: id.clone(), reason: "unknown feature map".into() })?;
        overrides.push((i, cut.clone()));
    }
    let frags = fragment::fragment(&net, opts.budget_bytes, &overrides)?;
    let flat: Vec<Fragment> = frags.iter().flatten().copied().collect();
    let index: HashMap<Fragment, usize> = flat.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let outs: Vec<Vec<(usize, Fragment)>> = flat.iter().map(|f| outgoing(&net, &frags, f)).collect();
    let plans: Vec<_> = flat.iter().map(|f| plan_destination(&net, &frags, f)).collect();
    let words: Vec<_> = flat.iter().enumerate().map(|(i, f)| words_of(&net, f, outs[i].len() as u64, &plans[i])).collect();
    let mut edges = vec![Vec::new(); flat.len()];
    for (i, o) in outs.iter().enumerate() {
        for (_, t) in o {
            let j = index[t];
            edges[i].push((j, true));
            edges[j].push((i, false));
        }
    }

    let budget_words = (opts.budget_bytes / 8).min(1 << 15);
    let mut mesh = opts.mesh;
    if opts.auto_mesh {
        let total: u64 = words.iter().map(|w| w.words).sum();
        let need = (total as f64 / (budget_words as f64 * 0.7)).ceil() as u32;
        mesh.h = mesh.h.max(need.div_ceil(mesh.w)).min(256);
    }
    // fallback: lay fragments out on a square patch by their relative XY
    // position, so spatially connected fragments of successive layers land
    // side by side
    let natural: Vec<usize> = (0..flat.len()).collect();
    let rel = |f: &Fragment| {
        let s = lg.fms[f.fm].shape;
        ((2 * f.x0 + f.w) as f64 / (2 * s.w) as f64, (2 * f.y0 + f.h) as f64 / (2 * s.h) as f64)
    };
    let total_words: u64 = words.iter().map(|w| w.words).sum();
    let total_ports: u64 = words.iter().map(|w| w.ports).sum();
    let cores = (total_words as f64 / budget_words as f64).max(total_ports as f64 / place::SLOTS_PER_CORE as f64);
    let mut spatial = natural.clone();
    spatial.sort_by(|&a, &b| {
        let (ra, rb) = (rel(&flat[a]), rel(&flat[b]));
        (ra.1, ra.0, a).partial_cmp(&(rb.1, rb.0, b)).unwrap()
    });
    let at = loop {
        let side = ((cores * 1.5).sqrt().ceil() as u32).clamp(1, mesh.w.min(mesh.h));
        let targets: Vec<(u32, u32)> = flat
            .iter()
            .map(|f| {
                let (x, y) = rel(f);
                ((x * side as f64) as u32, (y * side as f64) as u32)
            })
            .collect();
        let tried = place::place(&natural, &flat, &words, &edges, mesh, budget_words)
            .or_else(|_| place::place_near(&spatial, &targets, &flat, &words, &edges, mesh, budget_words));
        match tried {
            Ok(at) => break at,
            Err(_) if opts.auto_mesh && (mesh.h < 256 || mesh.w < 256) => {
                if mesh.h < 256 {
                    mesh.h = (mesh.h + mesh.h.div_ceil(4)).min(256);
                } else {
                    mesh.w = (mesh.w + mesh.w.div_ceil(4)).min(256);
                }
            }
            Err(e) => return Err(e),
        }
    };

    // populations per core in fragment order
    let mut on_core: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, &c) in at.iter().enumerate() {
        on_core.entry(c).or_default().push(i);
    }
    let mut pop_of = vec![0u32; flat.len()];
    let mut slot_base = vec![0u32; flat.len()];
    for list in on_core.values() {
        let mut slots = 0;
        for (p, &i) in list.iter().enumerate() {
            pop_of[i] = p as u32;
            slot_base[i] = slots;
            slots += words[i].ports as u32;
        }
    }

    let mut images = Vec::with_capacity(on_core.len());
    for (&core, list) in &on_core {
        let is_input = |i: usize| lg.fms[flat[i].fm].role == Role::Input;
        let kd_base = list.len() as u32;
        let entries: u64 = list.iter().filter(|&&i| !is_input(i)).map(|&i| plans[i].kd_entries()).sum();
        let weight_base = kd_base + entries as u32;

        // weight blocks and side tables
        let mut weights: Vec<u64> = Vec::new();
        let mut block_addr: Vec<HashMap<BlockKey, u32>> = Vec::with_capacity(list.len());
        let mut side_ptr = Vec::with_capacity(list.len());
        let push_bytes = |weights: &mut Vec<u64>, bytes: &[u8]| -> u32 {
            let addr = weight_base + weights.len() as u32;
            for chunk in bytes.chunks(8) {
                let mut w = [0u8; 8];
                w[..chunk.len()].copy_from_slice(chunk);
                weights.push(u64::from_le_bytes(w));
            }
            addr
        };
        for &i in list {
            let mut addrs = HashMap::new();
            if is_input(i) {
                block_addr.push(addrs);
                side_ptr.push(0);
                continue;
            }
            for b in &plans[i].weight_blocks {
                let bytes: Vec<u8> = block_weights(&net.specs[b.spec], b.g, b.lo, b.n).into_iter().map(|v| v as u8).collect();
                addrs.insert(b.key, push_bytes(&mut weights, &bytes));
            }
            let f = &lg.fms[flat[i].fm];
            let mut side = (f.divisor as u16).to_le_bytes().to_vec();
            side.extend((flat[i].c0..flat[i].c0 + flat[i].d).map(|c| f.biases.get(c as usize).copied().unwrap_or(0) as u8));
            side_ptr.push(push_bytes(&mut weights, &side));
            block_addr.push(addrs);
        }
        let block_base = weight_base + weights.len() as u32;

        // population blocks: axons then states
        let mut pops = Vec::with_capacity(list.len());
        let mut axons = Vec::new();
        let mut addr = block_base;
        for &i in list {
            let s = &flat[i];
            let f = &lg.fms[s.fm];
            for (e, t) in &outs[i] {
                let j = index[t];
                let b = plans[j].block_for(*e, s.c0, s.d).expect("table block for connected pair");
                let dx = at[j].0 as i32 - core.0 as i32;
                let dy = at[j].1 as i32 - core.1 as i32;
                let a = compute_axon(&net.specs[*e], s, t, b.offset, slot_base[j] + b.port as u32, dx, dy);
                a.pack()?;
                axons.push(a);
            }
            let axon_count = outs[i].len() as u32;
            let state_ptr = addr + axon_count;
            addr = state_ptr + plan::state_words(&net, s) as u32;
            let pd = PopulationDescriptor {
                d: s.d,
                w: s.w << f.sl,
                h: s.h << f.sl,
                neuron_type: opts.mode,
                activation: f.activation,
                axon_count,
                state_ptr,
                sl: f.sl as u32,
                rule: f.rule,
            };
            pd.pack()?;
            pops.push(pd);
        }

        // source-channel tables and slot registers
        let mut kds = Vec::with_capacity(entries as usize);
        let mut slots = Vec::new();
        for (p, &j) in list.iter().enumerate() {
            if is_input(j) {
                continue;
            }
            let t = &flat[j];
            let plan = &plans[j];
            for (port, &len) in plan.ports.iter().enumerate() {
                let base = kd_base + kds.len() as u32;
                slots.push(Slot { pop: p as u32, kd_base: base, kd_len: len, side_ptr: side_ptr[p] });
                let mut table = vec![KernelDescriptor::null(1, 1, 0); len as usize];
                for b in plan.blocks.iter().filter(|b| b.port == port) {
                    let spec = &net.specs[b.spec];
                    for g in b.src_c0..b.src_c0 + b.len {
                        let at = (b.offset + g - b.src_c0) as usize;
                        table[at] = match dst_channels(spec, g, t) {
                            Some((lo, n)) => KernelDescriptor {
                                kd: n,
                                kw: spec.kw,
                                kh: spec.kh,
                                sl: spec.sl as u32,
                                weight_ptr: block_addr[p][&block_key(&net, b.spec, g, lo, n)],
                                rule: spec.rule,
                                scale_log: scale_log(lg.fms[t.fm].divisor),
                                c_base: lo - t.c0,
                            },
                            None => KernelDescriptor::null(spec.kw, spec.kh, spec.sl as u32),
                        };
                    }
                }
                for k in &table {
                    k.pack()?;
                }
                kds.extend(table);
            }
        }
        debug_assert_eq!(addr as u64, list.iter().map(|&i| words[i].words).sum::<u64>());
        images.push(CoreImage {
            core: (core.0 as u8, core.1 as u8),
            slots,
            pops,
            axons,
            kds,
            weights,
            kd_base,
            weight_base,
            block_base,
            end: addr,
        });
    }

    let mapping = Mapping {
        mode: opts.mode,
        budget_bytes: opts.budget_bytes,
        mesh,
        fms: lg.fms.iter().map(|f| FmInfo { id: f.id.clone(), shape: f.shape, role: f.role }).collect(),
        views: lg.views.clone(),
        fragments: flat
            .iter()
            .enumerate()
            .map(|(i, f)| Placed { frag: *f, core: at[i], pop: pop_of[i], words: words[i].words })
            .collect(),
    };
    Ok(Program { images, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::{FeatureMap, LayerDef, LayerKind};

    fn dense_10_5() -> Graph {
        Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 10, 1, 1).with_role(Role::Input),
                FeatureMap::new("o", 5, 1, 1).with_role(Role::Output),
            ],
            layers: vec![LayerDef::new(LayerKind::Dense, &["in"], "o").seed(3)],
        }
    }

    #[test]
    fn dense_example_layout() {
        let p = compile_graph(&dense_10_5(), &CompileOptions::default()).unwrap();
        let words: u64 = p.total_words();
        let placed: u64 = p.mapping.fragments.iter().map(|f| f.words).sum();
        assert_eq!(words, placed);
        let pops: usize = p.images.iter().map(|i| i.pops.len()).sum();
        let axons: usize = p.images.iter().map(|i| i.axons.len()).sum();
        let kds: usize = p.images.iter().map(|i| i.kds.len()).sum();
        // 2 populations, 1 axon, 10 table entries
        assert_eq!((pops, axons, kds), (2, 1, 10));
        assert_eq!((pops + axons + kds) * 8, 104);
    }

    #[test]
    fn images_round_trip_through_bytes() {
        let p = compile_graph(&dense_10_5(), &CompileOptions::default()).unwrap();
        for im in &p.images {
            let b = im.to_bytes().unwrap();
            assert_eq!(&CoreImage::from_bytes(&b).unwrap(), im);
        }
        let dir = std::env::temp_dir().join(format!("axfl-test-{}", std::process::id()));
        p.save(&dir).unwrap();
        assert_eq!(Program::load(&dir).unwrap(), p);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn sigma_delta_rejects_max() {
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 1, 4, 4).with_role(Role::Input),
                FeatureMap::new("o", 1, 2, 2).with_activation(crate::nngraph::Activation::Relu),
            ],
            layers: vec![LayerDef::new(LayerKind::MaxPool, &["in"], "o").kernel(2, 2).stride(2)],
        };
        let opts = CompileOptions { mode: NeuronType::SigmaDelta, ..Default::default() };
        assert!(matches!(compile_graph(&g, &opts), Err(CompileError::SigmaDeltaUnsupported { .. })));
    }
}
