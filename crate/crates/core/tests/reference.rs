//! Direct per-kind evaluation of the unlowered graph, compared with the
//! oracle over the lowered one.

use axonflow::nngraph::random::{generator_kinds, random_graph, RandomGraphConfig};
use axonflow::nngraph::{
    dense_oracle, lower_with, sat8, seeded_weights, Activation, FeatureMap, Graph, LayerDef, LayerKind, LowerOptions, Role,
    Shape, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Dense i64 buffer indexed (c, x, y); reads outside the plane give `None`.
struct Plane {
    s: Shape,
    v: Vec<i64>,
}

impl Plane {
    fn of(t: &Tensor) -> Plane {
        Plane { s: t.shape, v: t.data.iter().map(|&x| x as i64).collect() }
    }

    fn at(&self, c: u32, x: i64, y: i64) -> Option<i64> {
        let s = self.s;
        if x < 0 || y < 0 || x >= s.w as i64 || y >= s.h as i64 {
            return None;
        }
        Some(self.v[((c as i64 * s.h as i64 + y) * s.w as i64 + x) as usize])
    }

    /// Value of the zero-inserted upsampling by `f` at (u, v).
    fn up(&self, c: u32, f: i64, u: i64, v: i64) -> Option<i64> {
        if u < 0 || v < 0 || u >= self.s.w as i64 * f || v >= self.s.h as i64 * f {
            return None;
        }
        if u % f != 0 || v % f != 0 {
            return Some(0);
        }
        self.at(c, u / f, v / f)
    }
}

fn weights(l: &LayerDef, index: usize, n: usize) -> Vec<i64> {
    match &l.weights {
        Some(w) => w.iter().map(|&v| v as i8 as i64).collect(),
        None => seeded_weights(l.weight_seed.unwrap_or(0x5eed_0000 + index as u64), n).into_iter().map(i64::from).collect(),
    }
}

/// Returns pre-activation sums (before bias and divisor) and the intrinsic divisor.
fn layer_sums(l: &LayerDef, li: usize, srcs: &[&Plane], out: &FeatureMap) -> (Vec<i64>, i64) {
    let o = out.shape();
    let mut acc = vec![0i64; o.len()];
    let idx = |c: u32, x: u32, y: u32| ((c * o.h + y) * o.w + x) as usize;
    let [kw, kh] = l.kernel;
    let (pl, pt) = (l.padding.left as i64, l.padding.top as i64);
    let s = l.stride as i64;
    let f = l.upsample as i64;
    let a = srcs[0];
    let ds = a.s.d;
    let mut intrinsic = 1;
    let each = |acc: &mut Vec<i64>, g: &mut dyn FnMut(u32, i64, i64) -> i64| {
        for c in 0..o.d {
            for y in 0..o.h {
                for x in 0..o.w {
                    acc[idx(c, x, y)] = g(c, x as i64, y as i64);
                }
            }
        }
    };
    match l.kind {
        LayerKind::Conv | LayerKind::DilatedConv | LayerKind::DepthwiseConv | LayerKind::GroupedConv => {
            let r = l.dilation.unwrap_or(1) as i64;
            let per = match l.kind {
                LayerKind::DepthwiseConv => 1,
                LayerKind::GroupedConv => l.group_size.unwrap(),
                _ => ds,
            };
            let w = weights(l, li, (o.d * per * kw * kh) as usize);
            let groups = ds / per;
            let dg = o.d / groups.max(1);
            each(&mut acc, &mut |co, x, y| {
                let first = match l.kind {
                    LayerKind::DepthwiseConv => co,
                    LayerKind::GroupedConv => co / dg * per,
                    _ => 0,
                };
                let mut sum = 0;
                for ci in 0..per {
                    for kx in 0..kw {
                        for ky in 0..kh {
                            let u = x * s + kx as i64 * r - pl;
                            let v = y * s + ky as i64 * r - pt;
                            if let Some(val) = a.up(first + ci, f, u, v) {
                                sum += w[(((co * per + ci) * kw + kx) * kh + ky) as usize] * val;
                            }
                        }
                    }
                }
                sum
            });
        }
        LayerKind::Deconv => {
            let w = weights(l, li, (o.d * ds * kw * kh) as usize);
            for co in 0..o.d {
                for ci in 0..ds {
                    for yi in 0..a.s.h as i64 {
                        for xi in 0..a.s.w as i64 {
                            let val = a.at(ci, xi, yi).unwrap();
                            for kx in 0..kw {
                                for ky in 0..kh {
                                    let (x, y) = (xi * s + kx as i64 - pl, yi * s + ky as i64 - pt);
                                    if x >= 0 && y >= 0 && x < o.w as i64 && y < o.h as i64 {
                                        acc[idx(co, x as u32, y as u32)] +=
                                            w[(((co * ds + ci) * kw + kx) * kh + ky) as usize] * val;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::AvgPool | LayerKind::MaxPool => {
            let max = l.kind == LayerKind::MaxPool;
            if !max {
                intrinsic = (kw * kh) as i64;
            }
            each(&mut acc, &mut |c, x, y| {
                let taps = (0..kw).flat_map(|kx| (0..kh).map(move |ky| (kx as i64, ky as i64)));
                let vals = taps.filter_map(|(kx, ky)| a.at(c, x * s + kx - pl, y * s + ky - pt));
                if max {
                    vals.max().unwrap_or(i32::MIN as i64)
                } else {
                    vals.sum()
                }
            });
        }
        LayerKind::GlobalAvgPool => {
            intrinsic = (a.s.w * a.s.h) as i64;
            each(&mut acc, &mut |c, _, _| (0..a.s.w as i64).flat_map(|x| (0..a.s.h as i64).map(move |y| (x, y))).map(|(x, y)| a.at(c, x, y).unwrap()).sum());
        }
        LayerKind::Dense => {
            let w = weights(l, li, (o.d * ds) as usize);
            each(&mut acc, &mut |co, _, _| (0..ds).map(|ci| w[(co * ds + ci) as usize] * a.at(ci, 0, 0).unwrap()).sum());
        }
        LayerKind::FlattenDense => {
            let (sw, sh) = (a.s.w, a.s.h);
            let w = weights(l, li, (o.d * ds * sw * sh) as usize);
            each(&mut acc, &mut |co, _, _| {
                let mut sum = 0;
                for ci in 0..ds {
                    for x in 0..sw {
                        for y in 0..sh {
                            sum += w[(((co * ds + ci) * sw + x) * sh + y) as usize] * a.at(ci, x as i64, y as i64).unwrap();
                        }
                    }
                }
                sum
            });
        }
        LayerKind::UpsampleNearest => {
            each(&mut acc, &mut |c, x, y| a.at(c, x / f, y / f).unwrap());
        }
        LayerKind::UpsampleBilinear => {
            intrinsic = 4 * f * f;
            // half-pixel centres, scaled by 2f to stay integral
            let taps = |x: i64| {
                let t = 2 * x + 1 - f;
                let i0 = t.div_euclid(2 * f);
                let frac = t - 2 * f * i0;
                [(i0, 2 * f - frac), (i0 + 1, frac)]
            };
            each(&mut acc, &mut |c, x, y| {
                let mut sum = 0;
                for (sx, wx) in taps(x) {
                    for (sy, wy) in taps(y) {
                        if let Some(v) = a.at(c, sx, sy) {
                            sum += wx * wy * v;
                        }
                    }
                }
                sum
            });
        }
        LayerKind::Add => {
            each(&mut acc, &mut |c, x, y| a.at(c, x, y).unwrap() + srcs[1].at(c, x, y).unwrap());
        }
        LayerKind::Multiply => {
            each(&mut acc, &mut |c, x, y| a.at(c, x, y).unwrap() * srcs[1].at(c, x, y).unwrap());
        }
        LayerKind::Concat | LayerKind::Split | LayerKind::Other(_) => unreachable!(),
    }
    (acc, intrinsic)
}

fn reference(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let mut done: BTreeMap<String, Tensor> = inputs.clone();
    while done.len() < g.feature_maps.len() {
        for (li, l) in g.layers.iter().enumerate() {
            if done.contains_key(&l.destination) || !l.sources.iter().all(|s| done.contains_key(s)) {
                continue;
            }
            let out = g.fm(&l.destination).unwrap();
            let shape = out.shape();
            let t = match l.kind {
                LayerKind::Concat => {
                    let data = l.sources.iter().flat_map(|s| done[s].data.clone()).collect();
                    Tensor::from_vec(shape, data)
                }
                LayerKind::Split => {
                    let src = &done[&l.sources[0]];
                    let plane = (shape.w * shape.h) as usize;
                    let off = l.offset.unwrap_or(0) as usize * plane;
                    Tensor::from_vec(shape, src.data[off..off + shape.len()].to_vec())
                }
                _ => {
                    let planes: Vec<Plane> = l.sources.iter().map(|s| Plane::of(&done[s])).collect();
                    let refs: Vec<&Plane> = planes.iter().collect();
                    let (sums, intrinsic) = layer_sums(l, li, &refs, out);
                    let div = intrinsic * l.divisor.unwrap_or(1) as i64;
                    let plane = (shape.w * shape.h) as usize;
                    let data = sums
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let b = l.biases.as_ref().map_or(0, |b| b[i / plane] as i8 as i64);
                            sat8(out.activation.apply((v + b) / div))
                        })
                        .collect();
                    Tensor::from_vec(shape, data)
                }
            };
            done.insert(l.destination.clone(), t);
        }
    }
    done
}

fn check(g: &Graph, rng: &mut ChaCha8Rng, tag: &str) {
    let lg = lower_with(g, LowerOptions { fuse_residual_adds: false })
        .unwrap_or_else(|e| panic!("{tag}: {e:?}\n{}", g.to_json()));
    let mut ins = BTreeMap::new();
    for f in g.inputs() {
        ins.insert(f.id.clone(), Tensor::random(f.shape(), rng));
    }
    let want = reference(g, &ins);
    let got = dense_oracle(&lg, &ins).unwrap();
    for (id, t) in &got {
        if let Some((c, x, y, a, b)) = want[id].first_mismatch(t) {
            panic!("{tag}: fm {id} at ({c},{x},{y}) reference {a} oracle {b}\n{}", g.to_json());
        }
    }
}

#[test]
fn every_kind_matches_its_definition() {
    let cfg = RandomGraphConfig::default();
    let kinds = generator_kinds(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..400 {
        let k = &kinds[i % kinds.len()];
        let g = random_graph(&mut rng, &cfg, Some(k));
        check(&g, &mut rng, &format!("graph {i} ({k})"));
    }
}

#[test]
fn bilinear_weights_for_every_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for f in [2, 4, 8] {
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 2, 3, 2).with_role(Role::Input),
                FeatureMap::new("out", 2, 3 * f, 2 * f).with_role(Role::Output).with_activation(Activation::Identity),
            ],
            layers: vec![LayerDef::new(LayerKind::UpsampleBilinear, &["in"], "out").upsample(f)],
        };
        check(&g, &mut rng, &format!("bilinear x{f}"));
    }
}
