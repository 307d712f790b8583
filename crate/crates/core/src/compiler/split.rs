use crate::nngraph::ConvSpec;

/// Largest kernel extent a descriptor can encode.
pub const MAX_KERNEL: u32 = 15;

/// Tile a spec whose kernel exceeds 15 in either axis into specs with
/// kernels of at most 15. Tiles are cut in transposed-kernel coordinates; a
/// tile starting at transposed offset `a` keeps every output position and
/// ends up with an x offset `a` larger than the untiled spec.
pub fn split_oversized(spec: &ConvSpec) -> Vec<ConvSpec> {
    if spec.kw <= MAX_KERNEL && spec.kh <= MAX_KERNEL {
        return vec![spec.clone()];
    }
    let tiles = |k: u32| -> Vec<(u32, u32)> {
        (0..k).step_by(MAX_KERNEL as usize).map(|a| (a, MAX_KERNEL.min(k - a))).collect()
    };
    let mut out = Vec::new();
    for &(a, tw) in &tiles(spec.kw) {
        for &(b, th) in &tiles(spec.kh) {
            let j0 = (spec.kw - a - tw) as i32;
            let k0 = (spec.kh - b - th) as i32;
            let fan = spec.fanout_channels();
            let mut weights = Vec::with_capacity((spec.src_d * tw * th * fan) as usize);
            for ci in 0..spec.src_d {
                for dx in 0..tw {
                    for dy in 0..th {
                        for cd in 0..fan {
                            weights.push(spec.wt(ci, a + dx, b + dy, cd));
                        }
                    }
                }
            }
            out.push(ConvSpec {
                kw: tw,
                kh: th,
                xp: spec.xp - j0,
                yp: spec.yp - k0,
                xpr: spec.xpr - spec.kw as i32 + tw as i32 + j0,
                ypr: spec.ypr - spec.kh as i32 + th as i32 + k0,
                weights,
                ..spec.clone()
            });
        }
    }
    out
}
