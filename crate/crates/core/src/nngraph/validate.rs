use super::{Activation, Graph, GraphError, LayerDef, LayerKind, Role, Shape};
use std::collections::{BTreeMap, BTreeSet};

fn conv_extent(w: u32, up: u32, k: u32, p0: u32, p1: u32, stride: u32) -> Option<u32> {
    let full = (w * up + p0 + p1) as i64 - k as i64 + 1;
    if full < 1 {
        return None;
    }
    Some(((full + stride as i64 - 1) / stride as i64) as u32)
}

fn deconv_extent(w: u32, s: u32, k: u32, p0: u32, p1: u32) -> Option<u32> {
    let full = (w as i64 - 1) * s as i64 + k as i64 - p0 as i64 - p1 as i64;
    (full >= 1).then_some(full as u32)
}

/// Effective divisor of a layer, intrinsic pooling factor times the
/// user-given requantization divisor.
pub(crate) fn effective_divisor(l: &LayerDef, src: Shape) -> u64 {
    let user = l.divisor.unwrap_or(1) as u64;
    let intrinsic = match l.kind {
        LayerKind::AvgPool => l.kernel[0] as u64 * l.kernel[1] as u64,
        LayerKind::GlobalAvgPool => src.w as u64 * src.h as u64,
        LayerKind::UpsampleBilinear => 4 * l.upsample as u64 * l.upsample as u64,
        _ => 1,
    };
    user * intrinsic
}

/// Number of weights a layer needs, given its first source shape and the
/// declared destination shape.
pub fn weight_count(l: &LayerDef, src: Shape, dst: Shape) -> usize {
    let k = l.kernel[0] as usize * l.kernel[1] as usize;
    let (ds, dd) = (src.d as usize, dst.d as usize);
    match l.kind {
        LayerKind::Conv | LayerKind::Deconv | LayerKind::DilatedConv => dd * ds * k,
        LayerKind::DepthwiseConv => dd * k,
        LayerKind::GroupedConv => dd * l.group_size.unwrap_or(1) as usize * k,
        LayerKind::Dense => dd * ds,
        LayerKind::FlattenDense => dd * ds * src.w as usize * src.h as usize,
        _ => 0,
    }
}

/// Output shape a layer produces from its source shapes.
pub fn output_shape(l: &LayerDef, srcs: &[Shape]) -> Result<Shape, String> {
    let want = |n: usize| -> Result<(), String> {
        if srcs.len() == n {
            Ok(())
        } else {
            Err(format!("expects {n} source(s), got {}", srcs.len()))
        }
    };
    let [kw, kh] = l.kernel;
    let p = l.padding;
    let check_stride = || -> Result<(), String> {
        if l.stride == 1 || l.stride == 2 {
            Ok(())
        } else {
            Err(format!("stride {} not in {{1,2}}", l.stride))
        }
    };
    let check_up = |allow_one: bool| -> Result<(), String> {
        match l.upsample {
            1 if allow_one => Ok(()),
            2 | 4 | 8 => Ok(()),
            f => Err(format!("upsample {f} not supported")),
        }
    };
    if kw == 0 || kh == 0 {
        return Err("kernel extent must be at least 1".into());
    }
    let bad_extent = || "output extent below 1".to_string();
    match &l.kind {
        LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::GroupedConv | LayerKind::DilatedConv => {
            want(1)?;
            check_stride()?;
            check_up(true)?;
            let s = srcs[0];
            let r = if l.kind == LayerKind::DilatedConv {
                let r = l.dilation.unwrap_or(1);
                if r == 0 {
                    return Err("dilation must be at least 1".into());
                }
                r
            } else {
                1
            };
            let (ekw, ekh) = (r * (kw - 1) + 1, r * (kh - 1) + 1);
            let w = conv_extent(s.w, l.upsample, ekw, p.left, p.right, l.stride).ok_or_else(bad_extent)?;
            let h = conv_extent(s.h, l.upsample, ekh, p.top, p.bottom, l.stride).ok_or_else(bad_extent)?;
            Ok(Shape::new(0, w, h))
        }
        LayerKind::Deconv => {
            want(1)?;
            if !matches!(l.stride, 1 | 2 | 4 | 8) {
                return Err(format!("deconv stride {} not in {{1,2,4,8}}", l.stride));
            }
            if l.upsample != 1 {
                return Err("deconv takes its factor from stride".into());
            }
            let s = srcs[0];
            let w = deconv_extent(s.w, l.stride, kw, p.left, p.right).ok_or_else(bad_extent)?;
            let h = deconv_extent(s.h, l.stride, kh, p.top, p.bottom).ok_or_else(bad_extent)?;
            Ok(Shape::new(0, w, h))
        }
        LayerKind::AvgPool | LayerKind::MaxPool => {
            want(1)?;
            check_stride()?;
            if l.upsample != 1 {
                return Err("pooling cannot upsample".into());
            }
            let s = srcs[0];
            let w = conv_extent(s.w, 1, kw, p.left, p.right, l.stride).ok_or_else(bad_extent)?;
            let h = conv_extent(s.h, 1, kh, p.top, p.bottom, l.stride).ok_or_else(bad_extent)?;
            Ok(Shape::new(s.d, w, h))
        }
        LayerKind::GlobalAvgPool => {
            want(1)?;
            Ok(Shape::new(srcs[0].d, 1, 1))
        }
        LayerKind::Dense => {
            want(1)?;
            if srcs[0].w != 1 || srcs[0].h != 1 {
                return Err(format!("dense source must be Dx1x1, got {}", srcs[0]));
            }
            Ok(Shape::new(0, 1, 1))
        }
        LayerKind::FlattenDense => {
            want(1)?;
            Ok(Shape::new(0, 1, 1))
        }
        LayerKind::UpsampleNearest | LayerKind::UpsampleBilinear => {
            want(1)?;
            check_up(true)?;
            let s = srcs[0];
            Ok(Shape::new(s.d, s.w * l.upsample, s.h * l.upsample))
        }
        LayerKind::Add | LayerKind::Multiply => {
            want(2)?;
            if srcs[0] != srcs[1] {
                return Err(format!("sources differ: {} vs {}", srcs[0], srcs[1]));
            }
            Ok(srcs[0])
        }
        LayerKind::Concat => {
            if srcs.is_empty() {
                return Err("concat needs at least one source".into());
            }
            let (w, h) = (srcs[0].w, srcs[0].h);
            if srcs.iter().any(|s| s.w != w || s.h != h) {
                return Err("concat sources differ in width/height".into());
            }
            Ok(Shape::new(srcs.iter().map(|s| s.d).sum(), w, h))
        }
        LayerKind::Split => {
            want(1)?;
            Ok(Shape::new(0, srcs[0].w, srcs[0].h))
        }
        LayerKind::Other(k) => Err(format!("unsupported kind {k}")),
    }
}

fn check_layer(l: &LayerDef, label: &str, srcs: &[Shape], dst: Shape, dst_act: Activation, errs: &mut Vec<GraphError>) {
    let bad = |reason: String| GraphError::BadLayer { layer: label.to_string(), reason };
    if let LayerKind::Other(k) = &l.kind {
        errs.push(GraphError::UnsupportedLayer(k.clone()));
        return;
    }
    let mut expected = match output_shape(l, srcs) {
        Ok(s) => s,
        Err(reason) => {
            errs.push(bad(reason));
            return;
        }
    };
    let s0 = srcs[0];
    match l.kind {
        LayerKind::Conv | LayerKind::Deconv | LayerKind::DilatedConv | LayerKind::Dense | LayerKind::FlattenDense => {
            expected.d = dst.d
        }
        LayerKind::DepthwiseConv => expected.d = s0.d,
        LayerKind::GroupedConv => {
            let g = l.group_size.unwrap_or(0);
            if g == 0 || !s0.d.is_multiple_of(g) {
                errs.push(bad(format!("group size {g} must divide source depth {}", s0.d)));
                return;
            }
            let groups = s0.d / g;
            if !dst.d.is_multiple_of(groups) {
                errs.push(bad(format!("{groups} groups must divide destination depth {}", dst.d)));
                return;
            }
            expected.d = dst.d;
        }
        LayerKind::Split => {
            let off = l.offset.unwrap_or(0);
            if off + dst.d > s0.d {
                errs.push(bad(format!("split range {}..{} exceeds source depth {}", off, off + dst.d, s0.d)));
                return;
            }
            expected.d = dst.d;
        }
        _ => {}
    }
    if expected.d == 0 {
        expected.d = dst.d;
    }
    if expected != dst {
        errs.push(GraphError::ShapeMismatch { layer: label.to_string(), expected, got: dst });
        return;
    }
    let virtual_kind = matches!(l.kind, LayerKind::Concat | LayerKind::Split);
    if virtual_kind {
        if l.biases.is_some() || l.divisor.is_some() || l.weights.is_some() {
            errs.push(bad("concat/split carry no weights, biases or divisor".into()));
        }
        if dst_act != Activation::Identity {
            errs.push(bad("concat/split destination must use identity activation".into()));
        }
        return;
    }
    if l.kind.has_weights() {
        if let Some(w) = &l.weights {
            let need = weight_count(l, s0, dst);
            if w.len() != need {
                errs.push(bad(format!("expected {need} weights, got {}", w.len())));
            }
            if w.iter().any(|&v| !(-128..=127).contains(&v)) {
                errs.push(bad("weights must be 8-bit signed".into()));
            }
        }
    } else if l.weights.is_some() {
        errs.push(bad(format!("{} takes no weights", l.kind)));
    }
    if let Some(b) = &l.biases {
        if b.len() != dst.d as usize {
            errs.push(bad(format!("expected {} biases, got {}", dst.d, b.len())));
        }
        if b.iter().any(|&v| !(-128..=127).contains(&v)) {
            errs.push(bad("biases must be 8-bit signed".into()));
        }
    }
    if l.divisor == Some(0) {
        errs.push(bad("divisor must be at least 1".into()));
    }
    if effective_divisor(l, s0) > u16::MAX as u64 {
        errs.push(bad("effective divisor exceeds 16 bits".into()));
    }
    if l.kind == LayerKind::MaxPool {
        if dst_act != Activation::Relu {
            errs.push(bad("max_pool destination must use relu activation".into()));
        }
        if l.biases.as_ref().is_some_and(|b| b.iter().any(|&v| v != 0)) || l.divisor.unwrap_or(1) != 1 {
            errs.push(bad("max_pool takes no bias or divisor".into()));
        }
    }
}

/// Topological order of feature map ids (producers before consumers).
pub(crate) fn topo_order(g: &Graph) -> Result<Vec<String>, GraphError> {
    let mut indeg: BTreeMap<&str, usize> = g.feature_maps.iter().map(|f| (f.id.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for l in &g.layers {
        if !indeg.contains_key(l.destination.as_str()) {
            continue;
        }
        for s in &l.sources {
            if indeg.contains_key(s.as_str()) {
                *indeg.get_mut(l.destination.as_str()).unwrap() += 1;
                succ.entry(s.as_str()).or_default().push(l.destination.as_str());
            }
        }
    }
    let mut ready: Vec<&str> = g.feature_maps.iter().map(|f| f.id.as_str()).filter(|id| indeg[id] == 0).collect();
    ready.reverse();
    let mut order = Vec::new();
    while let Some(n) = ready.pop() {
        order.push(n.to_string());
        if let Some(ss) = succ.get(n) {
            for &d in ss.iter().rev() {
                let e = indeg.get_mut(d).unwrap();
                *e -= 1;
                if *e == 0 {
                    ready.push(d);
                }
            }
        }
    }
    if order.len() != indeg.len() {
        let stuck = g.feature_maps.iter().find(|f| !order.contains(&f.id)).map(|f| f.id.clone()).unwrap_or_default();
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}

/// Check shapes, references, producers and acyclicity. Returns every problem found.
pub fn validate(g: &Graph) -> Result<(), Vec<GraphError>> {
    let mut errs = Vec::new();
    let mut fms: BTreeMap<&str, &super::FeatureMap> = BTreeMap::new();
    for f in &g.feature_maps {
        if fms.insert(f.id.as_str(), f).is_some() {
            errs.push(GraphError::DuplicateFeatureMap(f.id.clone()));
        }
        if f.depth == 0 || f.width == 0 || f.height == 0 {
            errs.push(GraphError::BadFeatureMap { fm: f.id.clone(), reason: "extents must be at least 1".into() });
        }
    }
    let mut produced: BTreeSet<&str> = BTreeSet::new();
    for (i, l) in g.layers.iter().enumerate() {
        let label = l.label(i);
        let mut ok = true;
        for id in l.sources.iter().chain(std::iter::once(&l.destination)) {
            if !fms.contains_key(id.as_str()) {
                errs.push(GraphError::UnknownFeatureMap { layer: label.clone(), id: id.clone() });
                ok = false;
            }
        }
        if l.sources.contains(&l.destination) {
            errs.push(GraphError::CycleDetected(l.destination.clone()));
            ok = false;
        }
        if !produced.insert(l.destination.as_str()) {
            errs.push(GraphError::BadFeatureMap { fm: l.destination.clone(), reason: "produced by more than one layer".into() });
        }
        if !ok {
            continue;
        }
        let dst = fms[l.destination.as_str()];
        if dst.role == Role::Input {
            errs.push(GraphError::BadFeatureMap { fm: dst.id.clone(), reason: "input feature map cannot be a destination".into() });
        }
        let srcs: Vec<Shape> = l.sources.iter().map(|s| fms[s.as_str()].shape()).collect();
        if srcs.is_empty() {
            errs.push(GraphError::BadLayer { layer: label.clone(), reason: "no sources".into() });
            continue;
        }
        check_layer(l, &label, &srcs, dst.shape(), dst.activation, &mut errs);
    }
    for f in &g.feature_maps {
        if f.role != Role::Input && !produced.contains(f.id.as_str()) {
            errs.push(GraphError::BadFeatureMap { fm: f.id.clone(), reason: "non-input feature map has no producer".into() });
        }
    }
    if let Err(e) = topo_order(g) {
        if !errs.iter().any(|x| matches!(x, GraphError::CycleDetected(_))) {
            errs.push(e);
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::{FeatureMap, LayerDef};

    fn conv_graph(dst_w: u32) -> Graph {
        Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 3, 8, 8).with_role(Role::Input),
                FeatureMap::new("out", 4, dst_w, 4).with_role(Role::Output),
            ],
            layers: vec![LayerDef::new(LayerKind::Conv, &["in"], "out").kernel(3, 3).pad(1).stride(2)],
        }
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(validate(&Graph::default()).is_ok());
    }

    #[test]
    fn strided_conv_shape() {
        assert!(validate(&conv_graph(4)).is_ok());
        let errs = validate(&conv_graph(5)).unwrap_err();
        assert!(matches!(errs[0], GraphError::ShapeMismatch { .. }));
    }

    #[test]
    fn unknown_fm_reported() {
        let mut g = conv_graph(4);
        g.layers[0].sources = vec!["nope".into()];
        let errs = validate(&g).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, GraphError::UnknownFeatureMap { id, .. } if id == "nope")));
    }

    #[test]
    fn cycle_reported() {
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 1, 4, 4).with_role(Role::Input),
                FeatureMap::new("a", 1, 4, 4),
                FeatureMap::new("b", 1, 4, 4),
            ],
            layers: vec![
                LayerDef::new(LayerKind::Add, &["in", "b"], "a"),
                LayerDef::new(LayerKind::Conv, &["a"], "b"),
            ],
        };
        let errs = validate(&g).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, GraphError::CycleDetected(_))));
    }

    #[test]
    fn unknown_kind_unsupported() {
        let mut g = conv_graph(4);
        g.layers[0].kind = LayerKind::Other("lstm".into());
        let errs = validate(&g).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, GraphError::UnsupportedLayer(k) if k == "lstm")));
    }

    #[test]
    fn deconv_and_pool_extents() {
        assert_eq!(deconv_extent(4, 2, 4, 1, 1), Some(8));
        assert_eq!(conv_extent(7, 1, 3, 1, 1, 2), Some(4));
        assert_eq!(conv_extent(2, 1, 5, 0, 0, 1), None);
    }

    #[test]
    fn max_pool_needs_relu() {
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 2, 4, 4).with_role(Role::Input),
                FeatureMap::new("p", 2, 2, 2),
            ],
            layers: vec![LayerDef::new(LayerKind::MaxPool, &["in"], "p").kernel(2, 2).stride(2)],
        };
        assert!(validate(&g).is_err());
        let mut g2 = g.clone();
        g2.feature_maps[1].activation = Activation::Relu;
        assert!(validate(&g2).is_ok());
    }
}
