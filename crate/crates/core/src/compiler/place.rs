use super::fragment::Fragment;
use super::plan::FragmentWords;
use super::CompileError;
use serde::{Deserialize, Serialize};

/// Maximum pop_id slots per core (3-bit field).
pub const SLOTS_PER_CORE: u64 = 8;

/// Scan positions behind the last placement that may still be backfilled.
const BACKFILL_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    pub w: u32,
    pub h: u32,
}

impl Mesh {
    pub fn new(w: u32, h: u32) -> Self {
        Mesh { w, h }
    }

    /// Cores visited in bands of 8 columns; rows run down the even bands and
    /// up the odd ones, so consecutive cores stay within a short hop.
    pub fn scan_order(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity((self.w * self.h) as usize);
        for (band, x0) in (0..self.w).step_by(8).enumerate() {
            let rows: Vec<u32> = if band % 2 == 0 { (0..self.h).collect() } else { (0..self.h).rev().collect() };
            for y in rows {
                for x in x0..(x0 + 8).min(self.w) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

pub(crate) fn within_reach(from: (u32, u32), to: (u32, u32)) -> bool {
    let dx = to.0 as i64 - from.0 as i64;
    let dy = to.1 as i64 - from.1 as i64;
    (-8..=7).contains(&dx) && (-8..=7).contains(&dy)
}

struct Occupancy<'a> {
    frags: &'a [Fragment],
    words: &'a [FragmentWords],
    edges: &'a [Vec<(usize, bool)>],
    order: Vec<(u32, u32)>,
    used: Vec<u64>,
    slots: Vec<u64>,
    at: Vec<Option<(u32, u32)>>,
    budget_words: u64,
}

impl<'a> Occupancy<'a> {
    fn new(frags: &'a [Fragment], words: &'a [FragmentWords], edges: &'a [Vec<(usize, bool)>], mesh: Mesh, budget_words: u64) -> Self {
        let order = mesh.scan_order();
        let n = order.len();
        Occupancy { frags, words, edges, order, used: vec![0; n], slots: vec![0; n], at: vec![None; frags.len()], budget_words }
    }

    /// Put fragment `i` on scan position `k` when it fits and every placed
    /// neighbour is reachable with a 4-bit relative address.
    fn try_put(&mut self, i: usize, k: usize) -> bool {
        let core = self.order[k];
        let w = &self.words[i];
        if self.used[k] + w.words > self.budget_words || self.slots[k] + w.ports > SLOTS_PER_CORE {
            return false;
        }
        let ok = self.edges[i].iter().all(|&(j, i_is_src)| match self.at[j] {
            None => true,
            Some(other) if i_is_src => within_reach(core, other),
            Some(other) => within_reach(other, core),
        });
        if ok {
            self.used[k] += w.words;
            self.slots[k] += w.ports;
            self.at[i] = Some(core);
        }
        ok
    }

    fn failed(&self, i: usize) -> CompileError {
        let f = &self.frags[i];
        CompileError::PlacementFailed { fragment: format!("fm {} c{} x{} y{}", f.fm, f.c0, f.x0, f.y0) }
    }

    fn finish(self) -> Vec<(u32, u32)> {
        self.at.into_iter().map(|c| c.unwrap()).collect()
    }
}

/// Greedy first-fit placement visiting fragments in `visit` order, starting a
/// few scan positions behind the previous placement.
///
/// `edges[i]` lists `(j, i_is_source)` for every fragment `j` connected to
/// fragment `i`. A fragment goes on the first core in scan order with room
/// for its words and slots from which every already-placed neighbour is
/// reachable with a 4-bit relative address.
pub fn place(
    visit: &[usize],
    frags: &[Fragment],
    words: &[FragmentWords],
    edges: &[Vec<(usize, bool)>],
    mesh: Mesh,
    budget_words: u64,
) -> Result<Vec<(u32, u32)>, CompileError> {
    let mut occ = Occupancy::new(frags, words, edges, mesh, budget_words);
    let n = occ.order.len();
    let mut first_open = 0;
    let mut cursor = 0usize;
    for &i in visit {
        // stay near the previous fragment so that backfilling does not strand
        // later neighbours out of reach; fall back to a full scan
        let near = first_open.max(cursor.saturating_sub(BACKFILL_WINDOW));
        let k = (near..n).chain(first_open..near).find(|&k| occ.try_put(i, k)).ok_or_else(|| occ.failed(i))?;
        cursor = k;
        while first_open < n && occ.used[first_open] >= budget_words {
            first_open += 1;
        }
    }
    Ok(occ.finish())
}

/// Placement that puts each fragment as close as possible to a target core,
/// trying cores in order of Chebyshev distance from it.
pub fn place_near(
    visit: &[usize],
    targets: &[(u32, u32)],
    frags: &[Fragment],
    words: &[FragmentWords],
    edges: &[Vec<(usize, bool)>],
    mesh: Mesh,
    budget_words: u64,
) -> Result<Vec<(u32, u32)>, CompileError> {
    let mut occ = Occupancy::new(frags, words, edges, mesh, budget_words);
    let mut by_core = vec![0usize; (mesh.w * mesh.h) as usize];
    for (k, &(x, y)) in occ.order.iter().enumerate() {
        by_core[(y * mesh.w + x) as usize] = k;
    }
    for &i in visit {
        let (tx, ty) = (targets[i].0.min(mesh.w - 1) as i64, targets[i].1.min(mesh.h - 1) as i64);
        let radius = mesh.w.max(mesh.h) as i64;
        let mut done = false;
        'rings: for r in 0..radius {
            for y in ty - r..=ty + r {
                for x in tx - r..=tx + r {
                    let on_ring = (x - tx).abs() == r || (y - ty).abs() == r;
                    if !on_ring || x < 0 || y < 0 || x >= mesh.w as i64 || y >= mesh.h as i64 {
                        continue;
                    }
                    if occ.try_put(i, by_core[(y * mesh.w as i64 + x) as usize]) {
                        done = true;
                        break 'rings;
                    }
                }
            }
        }
        if !done {
            return Err(occ.failed(i));
        }
    }
    Ok(occ.finish())
}
