//! Event-driven functional simulator that executes compiled core images.
//!
//! Feature maps fire layer by layer in mapping order. Before a map fires,
//! every core drains its event queue through the source-channel tables of
//! the addressed populations; firing then evaluates each neuron and sends one
//! event per outgoing axon whose target window overlaps the destination.

use crate::compiler::{Axon, CoreImage, KernelDescriptor, NeuronType, PopulationDescriptor, Program};
use crate::nngraph::{sat8, NeuronRule, Role, Shape, Tensor, UpdateRule, MAX_RULE_INIT};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, VecDeque};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("missing input tensor for `{0}`")]
    MissingInput(String),
    #[error("input `{fm}` has shape {got}, expected {expected}")]
    ShapeMismatch { fm: String, expected: Shape, got: Shape },
    #[error("event for core {core:?} population {pop} arrived after it fired")]
    LateEvent { core: (u32, u32), pop: u32 },
    #[error("{pending} events still queued after the last layer")]
    DeadlockDetected { pending: usize },
    #[error("malformed event at core {core:?}: {reason}")]
    MalformedEvent { core: (u32, u32), reason: String },
    #[error("accumulator overflow in `{0}`")]
    AccumulatorOverflow(String),
}

impl RuntimeError {
    pub fn kind(&self) -> &'static str {
        match self {
            RuntimeError::MissingInput(_) => "MissingInput",
            RuntimeError::ShapeMismatch { .. } => "ShapeMismatch",
            RuntimeError::LateEvent { .. } => "LateEvent",
            RuntimeError::DeadlockDetected { .. } => "DeadlockDetected",
            RuntimeError::MalformedEvent { .. } => "MalformedEvent",
            RuntimeError::AccumulatorOverflow(_) => "AccumulatorOverflow",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Drop events whose kernel window misses the destination population.
    pub hit_detection: bool,
    /// Shuffle each core's queue before draining it.
    pub shuffle_seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { hit_detection: true, shuffle_seed: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub events_sent: u64,
    pub events_received: u64,
    /// Suppressed by hit detection at the source.
    pub events_dropped: u64,
    /// Weight applications with a nonzero weight.
    pub synapse_updates: u64,
    pub zero_weight_skips: u64,
    /// Kernel positions that fall between strided neurons.
    pub stride_skips: u64,
    /// Updates applied to a position that holds no neuron.
    pub stride_waste: u64,
    /// Kernel positions outside the destination population.
    pub range_skips: u64,
    /// Events addressing a null table entry.
    pub null_entries: u64,
    /// Neurons that produced an outgoing spike.
    pub firings: u64,
    /// Firings that sent more events than their population has axons.
    pub fanout_violations: u64,
}

impl Stats {
    fn add(&mut self, o: &Stats) {
        self.events_sent += o.events_sent;
        self.events_received += o.events_received;
        self.events_dropped += o.events_dropped;
        self.synapse_updates += o.synapse_updates;
        self.zero_weight_skips += o.zero_weight_skips;
        self.stride_skips += o.stride_skips;
        self.stride_waste += o.stride_waste;
        self.range_skips += o.range_skips;
        self.null_entries += o.null_entries;
        self.firings += o.firings;
        self.fanout_violations += o.fanout_violations;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Event {
    pop_id: u8,
    x_min: i32,
    y_min: i32,
    ch: u32,
    kw: u8,
    kh: u8,
    value: i16,
}

struct PopState {
    acc: Vec<i64>,
    aux: Vec<i64>,
    /// Last output (sigma-delta reference, or this frame's output).
    out: Vec<i8>,
    fired: bool,
}

struct CoreState {
    queue: VecDeque<Event>,
    pops: Vec<PopState>,
}

#[derive(Clone, Debug)]
pub struct Frame {
    /// Every view of the source graph.
    pub outputs: BTreeMap<String, Tensor>,
    pub stats: Stats,
}

pub struct Simulator<'p> {
    program: &'p Program,
    opts: RunOptions,
    cores: Vec<CoreState>,
    /// Image index of each core coordinate.
    at: HashMap<(u32, u32), usize>,
    /// Fragments (image, pop) of each physical map.
    by_fm: Vec<Vec<(usize, usize, usize)>>,
    rng: Option<ChaCha8Rng>,
    stats: Stats,
}

impl<'p> Simulator<'p> {
    pub fn new(program: &'p Program, opts: RunOptions) -> Self {
        let at = program.image_index();
        let mut by_fm = vec![Vec::new(); program.mapping.fms.len()];
        for (k, p) in program.mapping.fragments.iter().enumerate() {
            by_fm[p.frag.fm].push((at[&p.core], p.pop as usize, k));
        }
        let cores = program
            .images
            .iter()
            .map(|im| CoreState {
                queue: VecDeque::new(),
                pops: im
                    .pops
                    .iter()
                    .map(|d| {
                        let n = d.neurons() as usize;
                        PopState { acc: vec![0; n], aux: vec![0; n], out: vec![0; n], fired: false }
                    })
                    .collect(),
            })
            .collect();
        let rng = opts.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
        let mut sim = Simulator { program, opts, cores, at, by_fm, rng, stats: Stats::default() };
        sim.reset();
        sim
    }

    /// Clear all neuron state, including sigma-delta references.
    pub fn reset(&mut self) {
        for (ci, c) in self.cores.iter_mut().enumerate() {
            c.queue.clear();
            for (p, s) in c.pops.iter_mut().enumerate() {
                let init = if self.program.images[ci].pops[p].rule == NeuronRule::Max { MAX_RULE_INIT } else { 0 };
                s.acc.fill(init);
                s.aux.fill(0);
                s.out.fill(0);
                s.fired = false;
            }
        }
    }

    fn sigma_delta(&self) -> bool {
        self.program.mapping.mode == NeuronType::SigmaDelta
    }

    pub fn run_frame(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<Frame, RuntimeError> {
        let map = &self.program.mapping;
        for f in &map.fms {
            if f.role != Role::Input {
                continue;
            }
            let t = inputs.get(&f.id).ok_or_else(|| RuntimeError::MissingInput(f.id.clone()))?;
            if t.shape != f.shape {
                return Err(RuntimeError::ShapeMismatch { fm: f.id.clone(), expected: f.shape, got: t.shape });
            }
        }
        let sd = self.sigma_delta();
        for (ci, c) in self.cores.iter_mut().enumerate() {
            for (p, s) in c.pops.iter_mut().enumerate() {
                s.fired = false;
                if !sd {
                    let init = if self.program.images[ci].pops[p].rule == NeuronRule::Max { MAX_RULE_INIT } else { 0 };
                    s.acc.fill(init);
                    s.aux.fill(0);
                    s.out.fill(0);
                }
            }
        }
        self.stats = Stats::default();
        for fm in 0..map.fms.len() {
            self.drain()?;
            let list = self.by_fm[fm].clone();
            for (ci, p, k) in list {
                if map.fms[fm].role == Role::Input {
                    let frag = map.fragments[k].frag;
                    let t = &inputs[&map.fms[fm].id];
                    let vals: Vec<i8> = (0..frag.d)
                        .flat_map(|c| {
                            (0..frag.h).flat_map(move |y| (0..frag.w).map(move |x| (c, x, y)))
                        })
                        .map(|(c, x, y)| t.get(frag.c0 + c, frag.x0 + x, frag.y0 + y))
                        .collect();
                    self.emit_all(ci, p, &vals)?;
                } else {
                    self.fire(ci, p, &map.fms[fm].id)?;
                }
            }
        }
        self.drain()?;
        let pending: usize = self.cores.iter().map(|c| c.queue.len()).sum();
        if pending > 0 {
            return Err(RuntimeError::DeadlockDetected { pending });
        }
        Ok(Frame { outputs: self.collect_outputs(), stats: self.stats })
    }

    pub fn run_sequence(&mut self, frames: &[BTreeMap<String, Tensor>]) -> Result<Vec<Frame>, RuntimeError> {
        frames.iter().map(|f| self.run_frame(f)).collect()
    }

    /// Emit input neuron values (or, in sigma-delta mode, their changes).
    fn emit_all(&mut self, ci: usize, p: usize, vals: &[i8]) -> Result<(), RuntimeError> {
        let sd = self.sigma_delta();
        let mut spikes = Vec::new();
        {
            let st = &mut self.cores[ci].pops[p];
            for (n, &v) in vals.iter().enumerate() {
                let e = if sd { v as i16 - st.out[n] as i16 } else { v as i16 };
                st.out[n] = v;
                if e != 0 {
                    spikes.push((n, e));
                }
            }
            st.fired = true;
        }
        for (n, v) in spikes {
            self.spike(ci, p, n, v)?;
        }
        Ok(())
    }

    fn fire(&mut self, ci: usize, p: usize, fm: &str) -> Result<(), RuntimeError> {
        let im = &self.program.images[ci];
        let desc = im.pops[p];
        let slot = im.slots.iter().find(|s| s.pop as usize == p).ok_or_else(|| RuntimeError::MalformedEvent {
            core: core_of(im),
            reason: format!("population {p} has no slot"),
        })?;
        let (div, biases) = im.side_table(slot.side_ptr, desc.d);
        if div == 0 {
            return Err(RuntimeError::MalformedEvent { core: core_of(im), reason: "zero divisor".into() });
        }
        let (w, h) = desc.true_extent();
        let plane = (w * h) as usize;
        let sd = self.sigma_delta();
        let mut spikes = Vec::new();
        {
            let st = &mut self.cores[ci].pops[p];
            for n in 0..st.acc.len() {
                let pre = match desc.rule {
                    NeuronRule::Multiply => st.acc[n].checked_mul(st.aux[n]),
                    _ => Some(st.acc[n]),
                };
                let v = pre
                    .and_then(|v| v.checked_add(biases[n / plane] as i64))
                    .ok_or_else(|| RuntimeError::AccumulatorOverflow(fm.to_string()))?
                    / div as i64;
                let out = sat8(desc.activation.apply(v));
                let e = if sd { out as i16 - st.out[n] as i16 } else { out as i16 };
                st.out[n] = out;
                if e != 0 {
                    spikes.push((n, e));
                }
            }
            st.fired = true;
        }
        for (n, v) in spikes {
            self.spike(ci, p, n, v)?;
        }
        Ok(())
    }

    /// Send the events of one neuron of population `p` on image `ci`.
    fn spike(&mut self, ci: usize, p: usize, n: usize, value: i16) -> Result<(), RuntimeError> {
        let im = &self.program.images[ci];
        let desc = im.pops[p];
        let (w, h) = desc.true_extent();
        let c = (n / (w * h) as usize) as u32;
        let y = ((n / w as usize) % h as usize) as i32;
        let x = (n % w as usize) as i32;
        self.stats.firings += 1;
        let mut sent = 0u64;
        let range = im.axon_range(p);
        for a in &im.axons[range] {
            let x_min = (x << a.us) + a.x_off;
            let y_min = (y << a.us) + a.y_off;
            if self.opts.hit_detection && !hits(a, x_min, y_min) {
                self.stats.events_dropped += 1;
                continue;
            }
            let dst = (im.core.0 as i32 + a.dx, im.core.1 as i32 + a.dy);
            let di = (dst.0 >= 0 && dst.1 >= 0).then(|| self.at.get(&(dst.0 as u32, dst.1 as u32))).flatten().copied();
            let Some(di) = di else {
                return Err(RuntimeError::MalformedEvent {
                    core: core_of(im),
                    reason: format!("axon targets unoccupied core {dst:?}"),
                });
            };
            self.cores[di].queue.push_back(Event {
                pop_id: a.pop_id as u8,
                x_min,
                y_min,
                ch: a.c_off + c,
                kw: a.kw as u8,
                kh: a.kh as u8,
                value,
            });
            sent += 1;
        }
        self.stats.events_sent += sent;
        if sent > desc.axon_count as u64 {
            self.stats.fanout_violations += 1;
        }
        Ok(())
    }

    fn drain(&mut self) -> Result<(), RuntimeError> {
        for ci in 0..self.cores.len() {
            let mut q = std::mem::take(&mut self.cores[ci].queue);
            if let Some(rng) = self.rng.as_mut() {
                q.make_contiguous().shuffle(rng);
            }
            for ev in q {
                self.deliver(ci, ev)?;
            }
        }
        Ok(())
    }

    /// Process one event through the source-channel table of its slot.
    fn deliver(&mut self, ci: usize, ev: Event) -> Result<(), RuntimeError> {
        let im: &CoreImage = &self.program.images[ci];
        let core = core_of(im);
        self.stats.events_received += 1;
        let slot = *im.slots.get(ev.pop_id as usize).ok_or_else(|| RuntimeError::MalformedEvent {
            core,
            reason: format!("pop_id {} has no slot", ev.pop_id),
        })?;
        if ev.ch >= slot.kd_len {
            return Err(RuntimeError::MalformedEvent { core, reason: format!("channel {} beyond table of {}", ev.ch, slot.kd_len) });
        }
        let kd: KernelDescriptor = im.kds[(slot.kd_base - im.kd_base + ev.ch) as usize];
        let p = slot.pop as usize;
        if self.cores[ci].pops[p].fired {
            return Err(RuntimeError::LateEvent { core, pop: slot.pop });
        }
        if kd.kd == 0 {
            self.stats.null_entries += 1;
            return Ok(());
        }
        if kd.kw != ev.kw as u32 || kd.kh != ev.kh as u32 {
            return Err(RuntimeError::MalformedEvent { core, reason: "kernel extent differs from table entry".into() });
        }
        let desc: PopulationDescriptor = im.pops[p];
        if kd.c_base + kd.kd > desc.d {
            return Err(RuntimeError::MalformedEvent { core, reason: "table entry exceeds population depth".into() });
        }
        let (tw, th) = desc.true_extent();
        let mask = (1i32 << kd.sl) - 1;
        let v = ev.value as i64;
        let fm_err = || RuntimeError::AccumulatorOverflow(format!("core {:?} population {}", core, p));
        let mut stats = Stats::default();
        let st = &mut self.cores[ci].pops[p];
        for dx in 0..kd.kw {
            let x = ev.x_min + dx as i32;
            if x < 0 || x >= desc.w as i32 {
                stats.range_skips += 1;
                continue;
            }
            if x & mask != 0 {
                stats.stride_skips += 1;
                continue;
            }
            for dy in 0..kd.kh {
                let y = ev.y_min + dy as i32;
                if y < 0 || y >= desc.h as i32 {
                    stats.range_skips += 1;
                    continue;
                }
                if y & mask != 0 {
                    stats.stride_skips += 1;
                    continue;
                }
                let (nx, ny) = ((x >> kd.sl) as u32, (y >> kd.sl) as u32);
                if nx >= tw || ny >= th || (((nx as i32) << kd.sl) != x) {
                    stats.stride_waste += 1;
                }
                let base = ((dx * kd.kh + dy) * kd.kd) as usize;
                for c in 0..kd.kd {
                    let wgt = im.byte_at(kd.weight_ptr, base + c as usize) as i8 as i64;
                    if wgt == 0 {
                        stats.zero_weight_skips += 1;
                        continue;
                    }
                    stats.synapse_updates += 1;
                    let n = (((kd.c_base + c) * th + ny) * tw + nx) as usize;
                    let prod = wgt * v;
                    match kd.rule {
                        UpdateRule::Accumulate | UpdateRule::MulA => {
                            st.acc[n] = st.acc[n].checked_add(prod).ok_or_else(fm_err)?
                        }
                        UpdateRule::MulB => st.aux[n] = st.aux[n].checked_add(prod).ok_or_else(fm_err)?,
                        UpdateRule::Max => st.acc[n] = st.acc[n].max(prod),
                    }
                }
            }
        }
        self.stats.add(&stats);
        Ok(())
    }

    fn collect_outputs(&self) -> BTreeMap<String, Tensor> {
        let map = &self.program.mapping;
        let mut phys: Vec<Tensor> = map.fms.iter().map(|f| Tensor::zeros(f.shape)).collect();
        for pl in &map.fragments {
            let f = pl.frag;
            let st = &self.cores[self.at[&pl.core]].pops[pl.pop as usize];
            let mut n = 0;
            for c in 0..f.d {
                for y in 0..f.h {
                    for x in 0..f.w {
                        phys[f.fm].set(f.c0 + c, f.x0 + x, f.y0 + y, st.out[n]);
                        n += 1;
                    }
                }
            }
        }
        let mut views = BTreeMap::new();
        for (id, pieces) in &map.views {
            let d: u32 = pieces.iter().map(|p| p.d).sum();
            let first = phys[pieces[0].fm].shape;
            let mut t = Tensor::zeros(Shape::new(d, first.w, first.h));
            let plane = (first.w * first.h) as usize;
            let mut at = 0;
            for p in pieces {
                let from = p.c0 as usize * plane;
                let len = p.d as usize * plane;
                t.data[at..at + len].copy_from_slice(&phys[p.fm].data[from..from + len]);
                at += len;
            }
            views.insert(id.clone(), t);
        }
        views
    }
}

fn core_of(im: &CoreImage) -> (u32, u32) {
    (im.core.0 as u32, im.core.1 as u32)
}

/// Whether the kernel window of an event overlaps the destination bound.
pub fn hits(a: &Axon, x_min: i32, y_min: i32) -> bool {
    x_min + a.kw as i32 > 0 && x_min < a.w as i32 && y_min + a.kh as i32 > 0 && y_min < a.h as i32
}

/// Run one frame on a fresh simulator.
pub fn run(program: &Program, inputs: &BTreeMap<String, Tensor>, opts: RunOptions) -> Result<Frame, RuntimeError> {
    Simulator::new(program, opts).run_frame(inputs)
}

/// Run frames in order on one simulator, keeping sigma-delta state between them.
pub fn run_sequence(
    program: &Program,
    frames: &[BTreeMap<String, Tensor>],
    opts: RunOptions,
) -> Result<Vec<Frame>, RuntimeError> {
    Simulator::new(program, opts).run_sequence(frames)
}
