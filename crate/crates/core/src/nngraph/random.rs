//! Seeded generator of small valid graphs for equivalence testing.

use super::validate::{output_shape, weight_count};
use super::{Activation, FeatureMap, Graph, LayerDef, LayerKind, Padding, Role, Shape};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct RandomGraphConfig {
    /// Upper bound on every feature map extent.
    pub max_extent: u32,
    pub max_depth: u32,
    /// Extra layers appended after the primary one.
    pub max_extra_layers: usize,
    /// Allow max pooling and multiply (not expressible under sigma-delta).
    pub allow_nonlinear_rules: bool,
}

impl Default for RandomGraphConfig {
    fn default() -> Self {
        RandomGraphConfig { max_extent: 12, max_depth: 6, max_extra_layers: 3, allow_nonlinear_rules: true }
    }
}

struct Builder<'a, R: Rng> {
    rng: &'a mut R,
    cfg: &'a RandomGraphConfig,
    g: Graph,
    /// Feature maps that may still act as sources, with their shapes.
    avail: Vec<(String, Shape)>,
    next: usize,
}

impl<R: Rng> Builder<'_, R> {
    fn fresh(&mut self) -> String {
        self.next += 1;
        format!("f{}", self.next)
    }

    fn latest(&self) -> (String, Shape) {
        self.avail.last().cloned().unwrap()
    }

    fn pick_source(&mut self) -> (String, Shape) {
        if self.rng.gen_bool(0.7) {
            self.latest()
        } else {
            self.avail.choose(self.rng).cloned().unwrap()
        }
    }

    fn weights(&mut self, n: usize) -> Vec<i32> {
        let range = *[3, 16, 127].choose(self.rng).unwrap();
        (0..n).map(|_| self.rng.gen_range(-range..=range)).collect()
    }

    fn activation(&mut self) -> Activation {
        if self.rng.gen_bool(0.5) {
            Activation::Relu
        } else {
            Activation::Identity
        }
    }

    fn push(&mut self, mut l: LayerDef, shape: Shape, act: Activation) -> String {
        let id = self.fresh();
        l.destination = id.clone();
        let src = self.g.fm(&l.sources[0]).unwrap().shape();
        if l.kind.has_weights() {
            let n = weight_count(&l, src, shape);
            l.weights = Some(self.weights(n));
        }
        let virtual_kind = matches!(l.kind, LayerKind::Concat | LayerKind::Split);
        if !virtual_kind && l.kind != LayerKind::MaxPool {
            if self.rng.gen_bool(0.5) {
                l.biases = Some((0..shape.d).map(|_| self.rng.gen_range(-20..=20)).collect());
            }
            if self.rng.gen_bool(0.5) {
                l.divisor = Some(1 << self.rng.gen_range(0..6));
            }
        }
        let fm = FeatureMap { id: id.clone(), depth: shape.d, width: shape.w, height: shape.h, role: Role::Hidden, activation: act };
        self.g.feature_maps.push(fm);
        self.g.layers.push(l);
        self.avail.push((id.clone(), shape));
        id
    }

    fn fits(&self, s: Shape) -> bool {
        s.w >= 1 && s.h >= 1 && s.w <= self.cfg.max_extent && s.h <= self.cfg.max_extent
    }

    fn depth(&mut self) -> u32 {
        self.rng.gen_range(1..=self.cfg.max_depth)
    }

    /// Try to append one layer of `kind`. Returns false when the current
    /// shapes do not admit it.
    fn add(&mut self, kind: &LayerKind) -> bool {
        let (src, s) = self.pick_source();
        match kind {
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::GroupedConv | LayerKind::DilatedConv => {
                for _ in 0..20 {
                    let mut l = LayerDef::new(kind.clone(), &[&src], "");
                    let big = self.rng.gen_bool(0.08);
                    let (kw, kh) = if big {
                        (self.rng.gen_range(15..=18), self.rng.gen_range(1..=17))
                    } else {
                        (self.rng.gen_range(1..=5), self.rng.gen_range(1..=5))
                    };
                    l.kernel = [kw, kh];
                    l.stride = self.rng.gen_range(1..=2);
                    l.upsample = *[1, 1, 1, 2, 4, 8].choose(self.rng).unwrap();
                    if *kind == LayerKind::DilatedConv {
                        l.dilation = Some(self.rng.gen_range(2..=3));
                        l.kernel = [self.rng.gen_range(2..=3), self.rng.gen_range(1..=3)];
                    }
                    let ek = |k: u32| l.dilation.unwrap_or(1) * (k - 1) + 1;
                    l.padding = Padding {
                        left: self.rng.gen_range(0..ek(l.kernel[0])),
                        top: self.rng.gen_range(0..ek(l.kernel[1])),
                        right: self.rng.gen_range(0..ek(l.kernel[0])),
                        bottom: self.rng.gen_range(0..ek(l.kernel[1])),
                    };
                    let mut d = self.depth();
                    if *kind == LayerKind::DepthwiseConv {
                        d = s.d;
                    }
                    if *kind == LayerKind::GroupedConv {
                        let divs: Vec<u32> = (1..=s.d).filter(|g| s.d % g == 0).collect();
                        let g = *divs.choose(self.rng).unwrap();
                        l.group_size = Some(g);
                        d = (s.d / g) * self.rng.gen_range(1..=2);
                    }
                    if let Ok(o) = output_shape(&l, &[s]) {
                        let o = Shape::new(d, o.w, o.h);
                        if self.fits(o) {
                            let a = self.activation();
                            self.push(l, o, a);
                            return true;
                        }
                    }
                }
                false
            }
            LayerKind::Deconv => {
                for _ in 0..20 {
                    let st = *[1, 2, 4, 8].choose(self.rng).unwrap();
                    let mut l = LayerDef::new(kind.clone(), &[&src], "");
                    l.stride = st;
                    let kw = self.rng.gen_range(1..=(2 * st + 1).min(9));
                    let kh = self.rng.gen_range(1..=(2 * st + 1).min(9));
                    l.kernel = [kw, kh];
                    l.padding = Padding {
                        left: self.rng.gen_range(0..kw),
                        top: self.rng.gen_range(0..kh),
                        right: self.rng.gen_range(0..kw),
                        bottom: self.rng.gen_range(0..kh),
                    };
                    let d = self.depth();
                    if let Ok(o) = output_shape(&l, &[s]) {
                        let o = Shape::new(d, o.w, o.h);
                        if self.fits(o) {
                            let a = self.activation();
                            self.push(l, o, a);
                            return true;
                        }
                    }
                }
                false
            }
            LayerKind::AvgPool | LayerKind::MaxPool => {
                for _ in 0..20 {
                    let mut l = LayerDef::new(kind.clone(), &[&src], "");
                    let k = self.rng.gen_range(1..=3);
                    l.kernel = [k, self.rng.gen_range(1..=3)];
                    l.stride = self.rng.gen_range(1..=2);
                    l.padding = Padding {
                        left: self.rng.gen_range(0..l.kernel[0]),
                        top: self.rng.gen_range(0..l.kernel[1]),
                        right: self.rng.gen_range(0..l.kernel[0]),
                        bottom: self.rng.gen_range(0..l.kernel[1]),
                    };
                    if let Ok(o) = output_shape(&l, &[s]) {
                        if self.fits(o) {
                            let a = if *kind == LayerKind::MaxPool { Activation::Relu } else { self.activation() };
                            self.push(l, o, a);
                            return true;
                        }
                    }
                }
                false
            }
            LayerKind::GlobalAvgPool => {
                let l = LayerDef::new(kind.clone(), &[&src], "");
                let a = self.activation();
                self.push(l, Shape::new(s.d, 1, 1), a);
                true
            }
            LayerKind::FlattenDense => {
                let l = LayerDef::new(kind.clone(), &[&src], "");
                let d = self.rng.gen_range(1..=12);
                let a = self.activation();
                self.push(l, Shape::new(d, 1, 1), a);
                true
            }
            LayerKind::Dense => {
                let src = match self.avail.iter().rev().find(|(_, sh)| sh.w == 1 && sh.h == 1) {
                    Some((id, _)) => id.clone(),
                    None => {
                        let l = LayerDef::new(LayerKind::GlobalAvgPool, &[&src], "");
                        self.push(l, Shape::new(s.d, 1, 1), Activation::Identity)
                    }
                };
                let l = LayerDef::new(kind.clone(), &[&src], "");
                let d = self.rng.gen_range(1..=12);
                let a = self.activation();
                self.push(l, Shape::new(d, 1, 1), a);
                true
            }
            LayerKind::UpsampleNearest | LayerKind::UpsampleBilinear => {
                let (mut src, mut s) = (src, s);
                while s.w * 2 > self.cfg.max_extent || s.h * 2 > self.cfg.max_extent {
                    let l = LayerDef::new(LayerKind::AvgPool, &[&src], "").kernel(s.w.min(2), s.h.min(2)).stride(2);
                    let o = output_shape(&l, &[s]).unwrap();
                    src = self.push(l, o, Activation::Identity);
                    s = o;
                }
                let fs: Vec<u32> =
                    [2, 4, 8].into_iter().filter(|f| s.w * f <= self.cfg.max_extent && s.h * f <= self.cfg.max_extent).collect();
                let f = *fs.choose(self.rng).unwrap();
                let l = LayerDef::new(kind.clone(), &[&src], "").upsample(f);
                let a = self.activation();
                self.push(l, Shape::new(s.d, s.w * f, s.h * f), a);
                true
            }
            LayerKind::Add | LayerKind::Multiply => {
                // sibling branch of the same shape; often fused into an add
                let other = match self.rng.gen_range(0..3) {
                    0 => src.clone(),
                    _ => {
                        let mut l = LayerDef::new(LayerKind::DepthwiseConv, &[&src], "").kernel(3, 3).pad(1);
                        if self.rng.gen_bool(0.5) {
                            l = LayerDef::new(LayerKind::Conv, &[&src], "").kernel(1, 1);
                        }
                        let a = if self.rng.gen_bool(0.7) { Activation::Identity } else { Activation::Relu };
                        self.push(l, s, a)
                    }
                };
                let l = if self.rng.gen_bool(0.5) {
                    LayerDef::new(kind.clone(), &[&other, &src], "")
                } else {
                    LayerDef::new(kind.clone(), &[&src, &other], "")
                };
                let a = self.activation();
                self.push(l, s, a);
                true
            }
            LayerKind::Concat => {
                let d2 = self.depth();
                let l = LayerDef::new(LayerKind::Conv, &[&src], "").kernel(1, 1);
                let other = self.push(l, Shape::new(d2, s.w, s.h), Activation::Relu);
                let mut srcs = [src.clone(), other];
                srcs.shuffle(self.rng);
                let refs: Vec<&str> = srcs.iter().map(|x| x.as_str()).collect();
                let l = LayerDef::new(LayerKind::Concat, &refs, "");
                let cat = self.push(l, Shape::new(s.d + d2, s.w, s.h), Activation::Identity);
                self.consume(&cat)
            }
            LayerKind::Split => {
                let (src, s) = if s.d < 2 {
                    let d = self.rng.gen_range(2..=self.cfg.max_depth.max(2));
                    let l = LayerDef::new(LayerKind::Conv, &[&src], "").kernel(1, 1);
                    let a = self.activation();
                    (self.push(l, Shape::new(d, s.w, s.h), a), Shape::new(d, s.w, s.h))
                } else {
                    (src, s)
                };
                let off = self.rng.gen_range(0..s.d);
                let len = self.rng.gen_range(1..=s.d - off);
                let l = LayerDef::new(LayerKind::Split, &[&src], "").offset(off);
                let part = self.push(l, Shape::new(len, s.w, s.h), Activation::Identity);
                self.consume(&part)
            }
            LayerKind::Other(_) => false,
        }
    }

    /// Follow a virtual feature map with a small conv that reads through it.
    fn consume(&mut self, id: &str) -> bool {
        let s = self.g.fm(id).unwrap().shape();
        let k = self.rng.gen_range(1..=3);
        let half = Padding { left: k / 2, top: k / 2, right: (k - 1) / 2, bottom: (k - 1) / 2 };
        let l = LayerDef::new(LayerKind::Conv, &[id], "").kernel(k, k).padding(half);
        let d = self.depth();
        let out = output_shape(&l, &[s]).unwrap();
        let a = self.activation();
        self.push(l, Shape::new(d, out.w, out.h), a);
        true
    }
}

/// Kinds a generated graph can exercise.
pub fn generator_kinds(cfg: &RandomGraphConfig) -> Vec<LayerKind> {
    LayerKind::ALL
        .iter()
        .filter(|k| cfg.allow_nonlinear_rules || !matches!(k, LayerKind::MaxPool | LayerKind::Multiply))
        .cloned()
        .collect()
}

/// A random valid graph whose first layer is `primary` (when given) followed
/// by a few random layers. The last feature map is the output.
pub fn random_graph<R: Rng>(rng: &mut R, cfg: &RandomGraphConfig, primary: Option<&LayerKind>) -> Graph {
    let kinds = generator_kinds(cfg);
    let (d, w, h) = (
        rng.gen_range(1..=cfg.max_depth.min(4)),
        rng.gen_range(1..=cfg.max_extent),
        rng.gen_range(1..=cfg.max_extent),
    );
    let input = FeatureMap::new("in", d, w, h).with_role(Role::Input);
    let mut b = Builder {
        rng,
        cfg,
        g: Graph { name: None, feature_maps: vec![input], layers: vec![] },
        avail: vec![("in".to_string(), Shape::new(d, w, h))],
        next: 0,
    };
    if let Some(k) = primary {
        let mut tries = 0;
        while !b.add(k) {
            tries += 1;
            if tries > 50 {
                break;
            }
        }
    }
    let extra = b.rng.gen_range(0..=cfg.max_extra_layers);
    let mut added = 0;
    let mut guard = 0;
    while added < extra && guard < 50 {
        guard += 1;
        let k = kinds.choose(b.rng).unwrap().clone();
        if b.add(&k) {
            added += 1;
        }
    }
    if b.g.layers.is_empty() {
        b.add(&LayerKind::Conv);
    }
    let mut g = b.g;
    let last = g.layers.last().unwrap().destination.clone();
    for f in g.feature_maps.iter_mut() {
        if f.id == last {
            f.role = Role::Output;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::validate;
    use rand::SeedableRng;

    #[test]
    fn generated_graphs_validate() {
        let cfg = RandomGraphConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for i in 0..400 {
            let k = &LayerKind::ALL[i % LayerKind::ALL.len()];
            let g = random_graph(&mut rng, &cfg, Some(k));
            if let Err(e) = validate(&g) {
                panic!("graph {i} ({k}) invalid: {e:?}\n{}", g.to_json());
            }
            assert!(g.layers.iter().any(|l| &l.kind == k), "graph {i} lacks {k}");
            for f in &g.feature_maps {
                assert!(f.width <= 12 && f.height <= 12);
            }
        }
    }
}
