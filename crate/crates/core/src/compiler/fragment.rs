use super::plan::{fragment_words, Net};
use super::CompileError;
use serde::{Deserialize, Serialize};

/// A cuboid of one physical feature map, mapped to a single core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fragment {
    pub fm: usize,
    pub c0: u32,
    pub x0: u32,
    pub y0: u32,
    pub d: u32,
    pub w: u32,
    pub h: u32,
}

impl Fragment {
    pub fn neurons(&self) -> u64 {
        self.d as u64 * self.w as u64 * self.h as u64
    }
}

/// Cut boundaries per axis, each list running from 0 to the extent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cut {
    pub c: Vec<u32>,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl Cut {
    pub fn whole(d: u32, w: u32, h: u32) -> Self {
        Cut { c: vec![0, d], x: vec![0, w], y: vec![0, h] }
    }

    /// Fragments in channel-major, then row, then column order.
    pub fn fragments(&self, fm: usize) -> Vec<Fragment> {
        let mut out = Vec::new();
        for c in self.c.windows(2) {
            for y in self.y.windows(2) {
                for x in self.x.windows(2) {
                    out.push(Fragment { fm, c0: c[0], x0: x[0], y0: y[0], d: c[1] - c[0], w: x[1] - x[0], h: y[1] - y[0] });
                }
            }
        }
        out
    }

    pub fn check(&self, d: u32, w: u32, h: u32) -> Result<(), String> {
        for (name, b, n) in [("c", &self.c, d), ("x", &self.x, w), ("y", &self.y, h)] {
            if b.first() != Some(&0) || b.last() != Some(&n) || b.windows(2).any(|p| p[0] >= p[1]) {
                return Err(format!("{name} boundaries {b:?} do not partition 0..{n}"));
            }
        }
        Ok(())
    }
}

/// How to cut one feature map: automatic, chunk counts, or explicit boundaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutPlan {
    Counts { c: u32, x: u32, y: u32 },
    Bounds(Cut),
}

/// Equal channel chunks.
fn channel_bounds(d: u32, k: u32) -> Vec<u32> {
    let chunk = d.div_ceil(k.max(1));
    let mut b: Vec<u32> = (0..d).step_by(chunk as usize).collect();
    b.push(d);
    b
}

/// Spatial chunks of a multiple of 8 neurons (the last may be shorter).
fn spatial_bounds(n: u32, k: u32) -> Vec<u32> {
    if k <= 1 {
        return vec![0, n];
    }
    let chunk = n.div_ceil(k).div_ceil(8).max(1) * 8;
    let mut b: Vec<u32> = (0..n).step_by(chunk as usize).collect();
    b.push(n);
    b
}

pub(crate) fn counts_cut(d: u32, w: u32, h: u32, kc: u32, kx: u32, ky: u32) -> Cut {
    Cut { c: channel_bounds(d, kc), x: spatial_bounds(w, kx), y: spatial_bounds(h, ky) }
}

/// Fewest spatial chunks keeping each chunk (shifted by `shift`) within 255.
fn min_spatial(n: u32, shift: u32) -> u32 {
    let mut k = 1;
    while spatial_bounds(n, k).windows(2).any(|p| (p[1] - p[0]) << shift > 255) {
        k += 1;
    }
    k
}

/// Fragment every physical feature map so that each fragment fits the
/// per-core budget. Cuts are grown channels first, then rows, then columns,
/// and the whole assignment is iterated until no map changes (axon and
/// kernel-table sizes depend on the neighbours' cuts).
pub fn fragment(net: &Net, budget_bytes: u64, overrides: &[(usize, CutPlan)]) -> Result<Vec<Vec<Fragment>>, CompileError> {
    let lg = net.lg;
    let n = lg.fms.len();
    let budget_words = (budget_bytes / 8).min(1 << 15);
    let mut fixed = vec![false; n];
    let mut state: Vec<(u32, u32, u32)> = Vec::with_capacity(n);
    let mut frags: Vec<Vec<Fragment>> = Vec::with_capacity(n);
    for (i, f) in lg.fms.iter().enumerate() {
        let s = f.shape;
        let shift = net.max_shift(i);
        let (kc, kx, ky) = (s.d.div_ceil(1023), min_spatial(s.w, shift), min_spatial(s.h, shift));
        state.push((kc, kx, ky));
        frags.push(counts_cut(s.d, s.w, s.h, kc, kx, ky).fragments(i));
    }
    for (i, plan) in overrides {
        let s = lg.fms[*i].shape;
        let cut = match plan {
            CutPlan::Counts { c, x, y } => Cut {
                c: channel_bounds(s.d, *c),
                x: {
                    let chunk = s.w.div_ceil((*x).max(1));
                    let mut b: Vec<u32> = (0..s.w).step_by(chunk as usize).collect();
                    b.push(s.w);
                    b
                },
                y: {
                    let chunk = s.h.div_ceil((*y).max(1));
                    let mut b: Vec<u32> = (0..s.h).step_by(chunk as usize).collect();
                    b.push(s.h);
                    b
                },
            },
            CutPlan::Bounds(c) => c.clone(),
        };
        cut.check(s.d, s.w, s.h).map_err(|reason| CompileError::InvalidCut { fm: lg.fms[*i].id.clone(), reason })?;
        let shift = net.max_shift(*i);
        if cut.c.windows(2).any(|p| p[1] - p[0] > 1023)
            || cut.x.windows(2).chain(cut.y.windows(2)).any(|p| (p[1] - p[0]) << shift > 255)
        {
            return Err(CompileError::InvalidCut { fm: lg.fms[*i].id.clone(), reason: "fragment exceeds descriptor field limits".into() });
        }
        frags[*i] = cut.fragments(*i);
        fixed[*i] = true;
    }

    let fits = |frags: &Vec<Vec<Fragment>>, i: usize| -> bool {
        frags[i].iter().all(|f| {
            let r = fragment_words(net, frags, f);
            r.words <= budget_words && r.axons <= 1023 && r.ports <= 8
        })
    };

    loop {
        let mut changed = false;
        for i in 0..n {
            if fixed[i] || fits(&frags, i) {
                continue;
            }
            let s = lg.fms[i].shape;
            let (kc0, kx0, ky0) = state[i];
            let shift = net.max_shift(i);
            let min_x = min_spatial(s.w, shift);
            let min_y = min_spatial(s.h, shift);
            // lower bound from the divisible part (states and weights)
            let whole = fragment_words(net, &frags, &Fragment { fm: i, c0: 0, x0: 0, y0: 0, d: s.d, w: s.w, h: s.h });
            let lb = whole.divisible.div_ceil(budget_words.max(1)) as u32;
            let mut found = None;
            let mut levels = vec![(kx0, ky0)];
            let mut ky = ky0;
            while spatial_bounds(s.h, ky * 2).len() > spatial_bounds(s.h, ky).len() {
                ky *= 2;
                levels.push((kx0, ky));
            }
            let mut kx = kx0;
            while spatial_bounds(s.w, kx * 2).len() > spatial_bounds(s.w, kx).len() {
                kx *= 2;
                levels.push((kx, ky));
            }
            'search: for (li, &(kx, ky)) in levels.iter().enumerate() {
                let start = if li == 0 { kc0.max(lb.min(s.d)) } else { s.d.div_ceil(1023) };
                let mut kc = start.max(1);
                let mut last_len = 0;
                while kc <= s.d {
                    let cut = counts_cut(s.d, s.w, s.h, kc, kx.max(min_x), ky.max(min_y));
                    if cut.c.len() != last_len {
                        last_len = cut.c.len();
                        let saved = std::mem::replace(&mut frags[i], cut.fragments(i));
                        if fits(&frags, i) {
                            found = Some((kc, kx.max(min_x), ky.max(min_y)));
                            break 'search;
                        }
                        frags[i] = saved;
                    }
                    // jump to the next distinct chunk size
                    let chunk = s.d.div_ceil(kc);
                    if chunk <= 1 {
                        break;
                    }
                    kc = s.d.div_ceil(chunk - 1).max(kc + 1);
                }
            }
            match found {
                Some(st) => {
                    state[i] = st;
                    changed = true;
                }
                None => {
                    return Err(CompileError::Unmappable {
                        fm: lg.fms[i].id.clone(),
                        reason: format!("no cut fits {} bytes per core", budget_bytes),
                    })
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(frags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_partition() {
        assert_eq!(channel_bounds(10, 3), vec![0, 4, 8, 10]);
        assert_eq!(spatial_bounds(66, 2), vec![0, 40, 66]);
        assert_eq!(spatial_bounds(20, 4), vec![0, 8, 16, 20]);
        assert_eq!(min_spatial(256, 0), 2);
        assert_eq!(min_spatial(200, 1), 2);
        let c = counts_cut(5, 20, 9, 2, 2, 1);
        let fr = c.fragments(0);
        assert_eq!(fr.len(), 2 * 2);
        assert_eq!(fr.iter().map(|f| f.neurons()).sum::<u64>(), 5 * 20 * 9);
    }

    #[test]
    fn cut_check_rejects_gaps() {
        let c = Cut { c: vec![0, 2], x: vec![0, 3, 3, 5], y: vec![0, 1] };
        assert!(c.check(2, 5, 1).is_err());
        assert!(Cut::whole(2, 5, 1).check(2, 5, 1).is_ok());
    }
}
