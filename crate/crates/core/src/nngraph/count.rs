use super::{ChannelMap, ConvSpec, LoweredGraph, Role, Shape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronCount {
    pub per_fm: BTreeMap<String, u64>,
    pub total: u64,
    pub non_input: u64,
}

/// Neurons of every physical feature map, inputs included.
pub fn count_neurons(lg: &LoweredGraph) -> NeuronCount {
    let mut c = NeuronCount::default();
    for f in &lg.fms {
        let n = f.shape.len() as u64;
        c.per_fm.insert(f.id.clone(), n);
        c.total += n;
        if f.role != Role::Input {
            c.non_input += n;
        }
    }
    c
}

/// Number of stride-1 destination positions each tap reaches without
/// landing in padding or on an interleaved zero.
fn tap_reach(taps: u32, dst: u32, sl: u8, pad: i32, src: u32, us: u8) -> Vec<u64> {
    let f = 1i64 << us;
    let limit = (src as i64) << us;
    (0..taps)
        .map(|j| {
            (0..dst)
                .filter(|&x| {
                    let u = ((x as i64) << sl) + j as i64 - pad as i64;
                    u >= 0 && u < limit && u & (f - 1) == 0
                })
                .count() as u64
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

/// Synapses realised by one spec: (destination neuron, source neuron) pairs
/// over taps that carry a weight in at least one channel pair.
pub fn count_synapses(spec: &ConvSpec, src: Shape, dst: Shape) -> u64 {
    if spec.shadow {
        return 0;
    }
    let cx = tap_reach(spec.kw, dst.w, spec.sl, spec.xp, src.w, spec.us);
    let cy = tap_reach(spec.kh, dst.h, spec.sl, spec.yp, src.h, spec.us);
    let live = live_taps(spec);
    let mut xy = 0u64;
    // live is indexed by transposed taps (dx, dy); reach by kernel taps (j, k)
    for dx in 0..spec.kw {
        for dy in 0..spec.kh {
            if live[(dx * spec.kh + dy) as usize] {
                xy += cx[(spec.kw - 1 - dx) as usize] * cy[(spec.kh - 1 - dy) as usize];
            }
        }
    }
    let ch = match spec.map {
        ChannelMap::Full => spec.src_d as u64 * spec.dst_d as u64,
        ChannelMap::Depthwise => spec.dst_d as u64,
    };
    xy * ch
}

/// Direct enumeration of the same quantity, for cross-checking.
pub fn count_synapses_brute(spec: &ConvSpec, src: Shape, dst: Shape) -> u64 {
    if spec.shadow {
        return 0;
    }
    let live = live_taps(spec);
    let f = 1i64 << spec.us;
    let mut n = 0;
    for y in 0..dst.h {
        for x in 0..dst.w {
            for j in 0..spec.kw {
                for k in 0..spec.kh {
                    if !live[((spec.kw - 1 - j) * spec.kh + (spec.kh - 1 - k)) as usize] {
                        continue;
                    }
                    let u = ((x as i64) << spec.sl) + j as i64 - spec.xp as i64;
                    let v = ((y as i64) << spec.sl) + k as i64 - spec.yp as i64;
                    if u < 0 || v < 0 || u >= (src.w as i64) << spec.us || v >= (src.h as i64) << spec.us {
                        continue;
                    }
                    if u % f != 0 || v % f != 0 {
                        continue;
                    }
                    n += match spec.map {
                        ChannelMap::Full => spec.src_d as u64 * spec.dst_d as u64,
                        ChannelMap::Depthwise => spec.dst_d as u64,
                    };
                }
            }
        }
    }
    n
}

impl LoweredGraph {
    pub fn synapses(&self) -> u64 {
        self.specs.iter().map(|s| count_synapses(s, self.fms[s.src].shape, self.fms[s.dst].shape)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::{lower, FeatureMap, Graph, LayerDef, LayerKind};

    #[test]
    fn same_padded_three_by_three() {
        let g = Graph {
            name: None,
            feature_maps: vec![FeatureMap::new("in", 2, 5, 4).with_role(Role::Input), FeatureMap::new("o", 3, 5, 4)],
            layers: vec![LayerDef::new(LayerKind::Conv, &["in"], "o").kernel(3, 3).pad(1).weights(vec![1; 54])],
        };
        let lg = lower(&g).unwrap();
        // per axis: 3*W - 2 in-bounds pairs
        assert_eq!(lg.synapses(), (3 * 5 - 2) * (3 * 4 - 2) * 6);
        let s = &lg.specs[0];
        assert_eq!(count_synapses_brute(s, lg.fms[0].shape, lg.fms[1].shape), lg.synapses());
        assert_eq!(count_neurons(&lg).total, 40 + 60);
    }

    #[test]
    fn dilation_holes_not_counted() {
        let g = Graph {
            name: None,
            feature_maps: vec![FeatureMap::new("in", 1, 9, 9).with_role(Role::Input), FeatureMap::new("o", 1, 5, 5)],
            layers: vec![LayerDef::new(LayerKind::DilatedConv, &["in"], "o").kernel(3, 3).dilation(2).weights(vec![1; 9])],
        };
        let lg = lower(&g).unwrap();
        assert_eq!(lg.synapses(), 25 * 9);
    }
}
