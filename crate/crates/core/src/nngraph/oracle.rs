use super::{sat8, ChannelMap, LoweredGraph, NeuronRule, Role, Shape, Tensor, UpdateRule};
use std::collections::BTreeMap;
use thiserror::Error;

/// Initial state of a max-rule neuron.
pub const MAX_RULE_INIT: i64 = i32::MIN as i64;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("missing input tensor for `{0}`")]
    MissingInput(String),
    #[error("input `{fm}` has shape {got}, expected {expected}")]
    ShapeMismatch { fm: String, expected: Shape, got: Shape },
    #[error("accumulator overflow in `{0}`")]
    AccumulatorOverflow(String),
}

pub fn dense_oracle(lg: &LoweredGraph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>, OracleError> {
    dense_oracle_with_ops(lg, inputs).map(|(t, _)| t)
}

/// Layer-by-layer integer evaluation of the lowered graph. Also returns the
/// number of synaptic operations an event-driven engine must perform: one per
/// (nonzero source value, nonzero weight, destination neuron) triple.
pub fn dense_oracle_with_ops(
    lg: &LoweredGraph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<(BTreeMap<String, Tensor>, u64), OracleError> {
    let mut phys: Vec<Option<Tensor>> = vec![None; lg.fms.len()];
    let mut ops = 0u64;
    for (i, f) in lg.fms.iter().enumerate() {
        if f.role == Role::Input {
            let t = inputs.get(&f.id).ok_or_else(|| OracleError::MissingInput(f.id.clone()))?;
            if t.shape != f.shape {
                return Err(OracleError::ShapeMismatch { fm: f.id.clone(), expected: f.shape, got: t.shape });
            }
            phys[i] = Some(t.clone());
            continue;
        }
        let n = f.shape.len();
        let init = if f.rule == NeuronRule::Max { MAX_RULE_INIT } else { 0 };
        let mut acc = vec![init; n];
        let mut aux = vec![0i64; n];
        let overflow = || OracleError::AccumulatorOverflow(f.id.clone());
        for (_, s) in lg.specs_into(i) {
            let src = phys[s.src].as_ref().expect("topological order");
            let f_up = 1i64 << s.us;
            let (uw, uh) = ((src.shape.w as i64) << s.us, (src.shape.h as i64) << s.us);
            for cd in 0..s.dst_d {
                let c = s.dst_c0 + cd;
                for yy in 0..f.shape.h {
                    for xx in 0..f.shape.w {
                        let idx = ((c * f.shape.h + yy) * f.shape.w + xx) as usize;
                        for j in 0..s.kw {
                            let u = ((xx as i64) << s.sl) + j as i64 - s.xp as i64;
                            if u < 0 || u >= uw || u & (f_up - 1) != 0 {
                                continue;
                            }
                            for k in 0..s.kh {
                                let v = ((yy as i64) << s.sl) + k as i64 - s.yp as i64;
                                if v < 0 || v >= uh || v & (f_up - 1) != 0 {
                                    continue;
                                }
                                let (sx, sy) = ((u >> s.us) as u32, (v >> s.us) as u32);
                                let cis = match s.map {
                                    ChannelMap::Full => 0..s.src_d,
                                    ChannelMap::Depthwise => cd..cd + 1,
                                };
                                for ci in cis {
                                    let w = s.w(cd, ci, j, k) as i64;
                                    let x = src.get(s.src_c0 + ci, sx, sy) as i64;
                                    if w != 0 && x != 0 {
                                        ops += 1;
                                    }
                                    let p = w * x;
                                    match s.rule {
                                        UpdateRule::Accumulate | UpdateRule::MulA => {
                                            acc[idx] = acc[idx].checked_add(p).ok_or_else(overflow)?
                                        }
                                        UpdateRule::MulB => aux[idx] = aux[idx].checked_add(p).ok_or_else(overflow)?,
                                        UpdateRule::Max => acc[idx] = acc[idx].max(p),
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(f.shape);
        for c in 0..f.shape.d {
            let bias = f.biases[c as usize] as i64;
            for yy in 0..f.shape.h {
                for xx in 0..f.shape.w {
                    let idx = ((c * f.shape.h + yy) * f.shape.w + xx) as usize;
                    let pre = match f.rule {
                        NeuronRule::Multiply => acc[idx].checked_mul(aux[idx]).ok_or_else(overflow)?,
                        _ => acc[idx],
                    };
                    let v = pre.checked_add(bias).ok_or_else(overflow)? / f.divisor as i64;
                    out.data[idx] = sat8(f.activation.apply(v));
                }
            }
        }
        phys[i] = Some(out);
    }
    let mut views = BTreeMap::new();
    for (id, pieces) in &lg.views {
        let d: u32 = pieces.iter().map(|p| p.d).sum();
        let first = &lg.fms[pieces[0].fm].shape;
        let mut t = Tensor::zeros(Shape::new(d, first.w, first.h));
        let plane = (first.w * first.h) as usize;
        let mut at = 0usize;
        for p in pieces {
            let src = phys[p.fm].as_ref().unwrap();
            let from = p.c0 as usize * plane;
            let len = p.d as usize * plane;
            t.data[at..at + len].copy_from_slice(&src.data[from..from + len]);
            at += len;
        }
        views.insert(id.clone(), t);
    }
    Ok((views, ops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nngraph::{lower, Activation, FeatureMap, Graph, LayerDef, LayerKind};

    fn run(g: &Graph, input: Tensor) -> BTreeMap<String, Tensor> {
        let lg = lower(g).unwrap();
        let mut ins = BTreeMap::new();
        ins.insert("in".to_string(), input);
        dense_oracle(&lg, &ins).unwrap()
    }

    #[test]
    fn dense_ten_to_five() {
        let w: Vec<i32> = (0..50).map(|i| (i % 7) - 3).collect();
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 10, 1, 1).with_role(Role::Input),
                FeatureMap::new("o", 5, 1, 1).with_role(Role::Output),
            ],
            layers: vec![LayerDef::new(LayerKind::Dense, &["in"], "o").weights(w.clone()).biases(vec![1, -1, 0, 2, 3])],
        };
        let x: Vec<i8> = (0..10).map(|i| i as i8 - 4).collect();
        let out = run(&g, Tensor::from_vec(Shape::new(10, 1, 1), x.clone()));
        for o in 0..5 {
            let mut s: i64 = [1, -1, 0, 2, 3][o];
            for i in 0..10 {
                s += w[o * 10 + i] as i64 * x[i] as i64;
            }
            assert_eq!(out["o"].data[o] as i64, s.clamp(-128, 127));
        }
    }

    #[test]
    fn max_pool_with_relu() {
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 1, 4, 2).with_role(Role::Input),
                FeatureMap::new("o", 1, 2, 1).with_activation(Activation::Relu),
            ],
            layers: vec![LayerDef::new(LayerKind::MaxPool, &["in"], "o").kernel(2, 2).stride(2)],
        };
        let out = run(&g, Tensor::from_vec(Shape::new(1, 4, 2), vec![-3, -1, 5, 2, -7, -2, 1, 9]));
        assert_eq!(out["o"].data, vec![0, 9]);
    }

    #[test]
    fn multiply_pairs_slots() {
        let g = Graph {
            name: None,
            feature_maps: vec![
                FeatureMap::new("in", 2, 2, 1).with_role(Role::Input),
                FeatureMap::new("sq", 2, 2, 1),
            ],
            layers: vec![LayerDef::new(LayerKind::Multiply, &["in", "in"], "sq").divisor(4)],
        };
        let out = run(&g, Tensor::from_vec(Shape::new(2, 2, 1), vec![3, -5, 20, 7]));
        assert_eq!(out["sq"].data, vec![2, 6, 100, 12]);
    }
}
