//! Connection planning shared by fragmentation, image generation and the
//! memory model: which fragment pairs connect, how a destination's
//! source-channel tables and weight blocks are laid out, and how many words
//! each fragment occupies.

use super::descriptor::{extent_bound, Axon, NeuronType};
use super::fragment::Fragment;
use crate::nngraph::{ChannelMap, ConvSpec, LoweredGraph, NeuronRule, Role};
use std::collections::HashMap;

/// Entries per source-channel table addressed through one pop_id.
pub const PORT_ENTRIES: u32 = 1024;

/// Lowered graph plus the tiled specs and per-map spec indices.
pub struct Net<'a> {
    pub lg: &'a LoweredGraph,
    pub specs: Vec<ConvSpec>,
    pub into: Vec<Vec<usize>>,
    pub from: Vec<Vec<usize>>,
    pub invariant: Vec<bool>,
    pub mode: NeuronType,
}

impl<'a> Net<'a> {
    pub fn new(lg: &'a LoweredGraph, mode: NeuronType) -> Self {
        let specs: Vec<ConvSpec> = lg.specs.iter().flat_map(super::split::split_oversized).collect();
        let mut into = vec![Vec::new(); lg.fms.len()];
        let mut from = vec![Vec::new(); lg.fms.len()];
        for (i, s) in specs.iter().enumerate() {
            into[s.dst].push(i);
            from[s.src].push(i);
        }
        let invariant = specs.iter().map(|s| s.channel_invariant()).collect();
        Net { lg, specs, into, from, invariant, mode }
    }

    /// Largest shift applied to coordinates of this map (its own SL or the
    /// upsampling of any outgoing spec); fragment extents shifted by it must fit 8 bits.
    pub fn max_shift(&self, fm: usize) -> u32 {
        let own = self.lg.fms[fm].sl as u32;
        self.from[fm].iter().map(|&e| self.specs[e].us as u32).fold(own, u32::max)
    }

    pub fn state_bits(&self, fm: usize) -> u64 {
        let f = &self.lg.fms[fm];
        if f.role == Role::Input {
            return 0;
        }
        let slots = if f.rule == NeuronRule::Multiply { 2 } else { 1 };
        let sd = if self.mode == NeuronType::SigmaDelta { 8 } else { 0 };
        16 * slots + sd
    }
}

/// Whether some source position in `[s0, s0+sn)` reaches a destination
/// position in `[t0, t0+tn)` through a kernel of extent `k`.
pub fn axis_hit(s0: u32, sn: u32, t0: u32, tn: u32, k: u32, pad: i32, sl: u8, us: u8) -> bool {
    let step = 1i64 << sl;
    for x in s0..s0 + sn {
        let u = (x as i64) << us;
        // stride-1 positions P with u = P + j - pad for some j in [0, k)
        let lo = (u + pad as i64 - k as i64 + 1).max(t0 as i64 * step);
        let hi = (u + pad as i64).min((t0 + tn) as i64 * step - 1);
        if lo > hi {
            continue;
        }
        let first = (lo + step - 1).div_euclid(step) * step;
        if first <= hi {
            return true;
        }
    }
    false
}

fn overlap(a0: u32, an: u32, b0: u32, bn: u32) -> Option<(u32, u32)> {
    let lo = a0.max(b0);
    let hi = (a0 + an).min(b0 + bn);
    (lo < hi).then(|| (lo, hi - lo))
}

/// Transposed weights of source channel `g` towards destination channels
/// `[lo, lo+n)`, laid out `[dx][dy][c]`.
pub fn block_weights(spec: &ConvSpec, g: u32, lo: u32, n: u32) -> Vec<i8> {
    let ci = g - spec.src_c0;
    let mut out = Vec::with_capacity((spec.kw * spec.kh * n) as usize);
    for dx in 0..spec.kw {
        for dy in 0..spec.kh {
            for c in lo..lo + n {
                out.push(spec.wt(ci, dx, dy, c - spec.dst_c0));
            }
        }
    }
    out
}

/// Destination channels (global) fed by source channel `g` of a spec,
/// restricted to fragment `t`.
pub fn dst_channels(spec: &ConvSpec, g: u32, t: &Fragment) -> Option<(u32, u32)> {
    if g < spec.src_c0 || g >= spec.src_c0 + spec.src_d {
        return None;
    }
    match spec.map {
        ChannelMap::Full => overlap(spec.dst_c0, spec.dst_d, t.c0, t.d),
        ChannelMap::Depthwise => overlap(g - spec.src_c0 + spec.dst_c0, 1, t.c0, t.d),
    }
}

pub fn connected(net: &Net, e: usize, s: &Fragment, t: &Fragment) -> bool {
    let spec = &net.specs[e];
    let ch = match spec.map {
        ChannelMap::Full => {
            overlap(s.c0, s.d, spec.src_c0, spec.src_d).is_some() && overlap(t.c0, t.d, spec.dst_c0, spec.dst_d).is_some()
        }
        ChannelMap::Depthwise => match overlap(s.c0, s.d, spec.src_c0, spec.src_d) {
            Some((a, n)) => overlap(a - spec.src_c0 + spec.dst_c0, n, t.c0, t.d).is_some(),
            None => false,
        },
    };
    ch && axis_hit(s.x0, s.w, t.x0, t.w, spec.kw, spec.xp, spec.sl, spec.us)
        && axis_hit(s.y0, s.h, t.y0, t.h, spec.kh, spec.yp, spec.sl, spec.us)
}

/// A run of table entries serving one (spec, source channel range).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableBlock {
    pub spec: usize,
    pub src_c0: u32,
    pub len: u32,
    pub port: usize,
    pub offset: u32,
}

/// Key identifying weight content that may be shared inside one fragment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKey {
    /// Channel-invariant spec: content depends only on the destination range.
    Shared { spec: usize, lo: u32, n: u32, depthwise: bool },
    /// Distinct per source channel.
    Own { spec: usize, g: u32 },
}

/// Weights of one source channel `g` towards destination channels `[lo, lo+n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightBlock {
    pub key: BlockKey,
    pub spec: usize,
    pub g: u32,
    pub lo: u32,
    pub n: u32,
    pub words: u64,
}

/// Layout of one destination fragment's tables and parameter memory.
#[derive(Clone, Debug, Default)]
pub struct DstPlan {
    pub blocks: Vec<TableBlock>,
    /// Entry count of each port's table.
    pub ports: Vec<u32>,
    /// Distinct weight blocks in allocation order.
    pub weight_blocks: Vec<WeightBlock>,
    pub weight_words: u64,
}

impl DstPlan {
    pub fn block_for(&self, spec: usize, src_c0: u32, len: u32) -> Option<&TableBlock> {
        self.blocks.iter().find(|b| b.spec == spec && b.src_c0 == src_c0 && b.len == len)
    }

    pub fn kd_entries(&self) -> u64 {
        self.ports.iter().map(|&p| p as u64).sum()
    }
}

pub fn block_key(net: &Net, e: usize, g: u32, lo: u32, n: u32) -> BlockKey {
    let spec = &net.specs[e];
    if net.invariant[e] {
        match spec.map {
            ChannelMap::Full => BlockKey::Shared { spec: e, lo, n, depthwise: false },
            ChannelMap::Depthwise => BlockKey::Shared { spec: e, lo: 0, n: 1, depthwise: true },
        }
    } else {
        BlockKey::Own { spec: e, g }
    }
}

pub fn block_words(spec: &ConvSpec, kd: u32) -> u64 {
    (kd as u64 * spec.kw as u64 * spec.kh as u64).div_ceil(8)
}

pub fn plan_destination(net: &Net, frags: &[Vec<Fragment>], t: &Fragment) -> DstPlan {
    let mut plan = DstPlan::default();
    if net.lg.fms[t.fm].role == Role::Input {
        return plan;
    }
    let mut seen_weights: HashMap<BlockKey, ()> = HashMap::new();
    for &e in &net.into[t.fm] {
        let spec = &net.specs[e];
        for s in &frags[spec.src] {
            if plan.block_for(e, s.c0, s.d).is_some() || !connected(net, e, s, t) {
                continue;
            }
            // place the block in the current port or open a new one
            let port = match plan.ports.last() {
                Some(&n) if n + s.d <= PORT_ENTRIES => plan.ports.len() - 1,
                _ => {
                    plan.ports.push(0);
                    plan.ports.len() - 1
                }
            };
            plan.blocks.push(TableBlock { spec: e, src_c0: s.c0, len: s.d, port, offset: plan.ports[port] });
            plan.ports[port] += s.d;
            for g in s.c0..s.c0 + s.d {
                if let Some((lo, n)) = dst_channels(spec, g, t) {
                    let key = block_key(net, e, g, lo, n);
                    if seen_weights.insert(key, ()).is_none() {
                        let words = block_words(spec, n);
                        plan.weight_blocks.push(WeightBlock { key, spec: e, g, lo, n, words });
                        plan.weight_words += words;
                    }
                }
            }
        }
    }
    if plan.ports.is_empty() {
        // a table-less slot still carries the side table
        plan.ports.push(0);
    }
    plan
}

pub fn outgoing(net: &Net, frags: &[Vec<Fragment>], s: &Fragment) -> Vec<(usize, Fragment)> {
    let mut out = Vec::new();
    for &e in &net.from[s.fm] {
        for t in &frags[net.specs[e].dst] {
            if connected(net, e, s, t) {
                out.push((e, *t));
            }
        }
    }
    out
}

pub fn side_words(net: &Net, fm: usize, d: u32) -> u64 {
    if net.lg.fms[fm].role == Role::Input {
        0
    } else {
        (2 + d as u64).div_ceil(8)
    }
}

pub fn state_words(net: &Net, f: &Fragment) -> u64 {
    (f.neurons() * net.state_bits(f.fm)).div_ceil(64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FragmentWords {
    pub words: u64,
    pub axons: u64,
    pub ports: u64,
    /// Part that shrinks with channel cuts (states and weights).
    pub divisible: u64,
}

/// Words a fragment occupies on its core: one population descriptor, its
/// outgoing axons, its source-channel tables, weight blocks, side table and
/// neuron states.
pub fn fragment_words(net: &Net, frags: &[Vec<Fragment>], f: &Fragment) -> FragmentWords {
    let axons = outgoing(net, frags, f).len() as u64;
    let plan = plan_destination(net, frags, f);
    words_of(net, f, axons, &plan)
}

pub fn words_of(net: &Net, f: &Fragment, axons: u64, plan: &DstPlan) -> FragmentWords {
    let is_input = net.lg.fms[f.fm].role == Role::Input;
    let states = state_words(net, f);
    let divisible = states + plan.weight_words;
    let words = 1 + axons + if is_input { 0 } else { plan.kd_entries() + plan.weight_words + side_words(net, f.fm, f.d) + states };
    FragmentWords { words, axons, ports: if is_input { 0 } else { plan.ports.len() as u64 }, divisible }
}

/// Axon from source fragment `s` to destination fragment `t` via spec `e`.
#[allow(clippy::too_many_arguments)]
pub fn compute_axon(spec: &ConvSpec, s: &Fragment, t: &Fragment, c_off: u32, pop_id: u32, dx: i32, dy: i32) -> Axon {
    let sl = spec.sl as i32;
    let us = spec.us as i32;
    Axon {
        x_off: ((s.x0 as i32) << us) - spec.kw as i32 + spec.xp + 1 - ((t.x0 as i32) << sl),
        y_off: ((s.y0 as i32) << us) - spec.kh as i32 + spec.yp + 1 - ((t.y0 as i32) << sl),
        c_off,
        w: extent_bound(t.w << spec.sl),
        h: extent_bound(t.h << spec.sl),
        kw: spec.kw,
        kh: spec.kh,
        us: spec.us as u32,
        dx,
        dy,
        pop_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_hit(s0: u32, sn: u32, t0: u32, tn: u32, k: u32, pad: i32, sl: u8, us: u8) -> bool {
        for x in s0..s0 + sn {
            for xx in t0..t0 + tn {
                for j in 0..k {
                    if ((xx as i64) << sl) + j as i64 - pad as i64 == (x as i64) << us {
                        return true;
                    }
                }
            }
        }
        false
    }

    #[test]
    fn axis_hit_matches_enumeration() {
        for s0 in 0..6 {
            for sn in 1..4 {
                for t0 in 0..6 {
                    for tn in 1..4 {
                        for k in 1..5 {
                            for pad in -2..4 {
                                for sl in 0..2 {
                                    for us in 0..3 {
                                        assert_eq!(
                                            axis_hit(s0, sn, t0, tn, k, pad, sl, us),
                                            brute_hit(s0, sn, t0, tn, k, pad, sl, us),
                                            "{s0} {sn} {t0} {tn} {k} {pad} {sl} {us}"
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
