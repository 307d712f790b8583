//! Per-core memory images, their binary file format and a disassembler.
//!
//! On-chip word map: population descriptors, source-channel tables, weight
//! blocks and side tables, then one block per population holding its axons
//! followed by its neuron states. States are not part of the file.

use super::descriptor::{Axon, DescriptorError, KernelDescriptor, PopulationDescriptor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::ops::Range;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AXFL";
pub const VERSION: u16 = 1;

/// Per-core slot register: which population a pop_id addresses and where
/// its source-channel table and side table live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub pop: u32,
    pub kd_base: u32,
    pub kd_len: u32,
    pub side_ptr: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreImage {
    pub core: (u8, u8),
    pub slots: Vec<Slot>,
    pub pops: Vec<PopulationDescriptor>,
    /// All populations' axons, in population order.
    pub axons: Vec<Axon>,
    pub kds: Vec<KernelDescriptor>,
    /// Contents of `[weight_base, block_base)`.
    pub weights: Vec<u64>,
    pub kd_base: u32,
    pub weight_base: u32,
    pub block_base: u32,
    pub end: u32,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated image")]
    Truncated,
    #[error("inconsistent layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

impl CoreImage {
    pub fn occupancy_words(&self) -> u64 {
        self.end as u64
    }

    pub fn occupancy_bytes(&self) -> u64 {
        self.end as u64 * 8
    }

    /// Index range into `axons` for population `p`.
    pub fn axon_range(&self, p: usize) -> Range<usize> {
        let start: usize = self.pops[..p].iter().map(|d| d.axon_count as usize).sum();
        start..start + self.pops[p].axon_count as usize
    }

    /// Word address of population `p`'s axon list.
    pub fn axon_addr(&self, p: usize) -> u32 {
        self.pops[p].state_ptr - self.pops[p].axon_count
    }

    /// Number of state words of population `p`, from the address map.
    pub fn state_words(&self, p: usize) -> u32 {
        let next = if p + 1 < self.pops.len() { self.axon_addr(p + 1) } else { self.end };
        next - self.pops[p].state_ptr
    }

    /// Byte `i` counted from word address `addr` in the weight section.
    #[inline]
    pub fn byte_at(&self, addr: u32, i: usize) -> u8 {
        let word = (addr - self.weight_base) as usize + i / 8;
        (self.weights[word] >> (8 * (i % 8))) as u8
    }

    /// Divisor and per-channel biases of the side table at `addr`.
    pub fn side_table(&self, addr: u32, d: u32) -> (u32, Vec<i8>) {
        let div = self.byte_at(addr, 0) as u32 | (self.byte_at(addr, 1) as u32) << 8;
        let biases = (0..d as usize).map(|c| self.byte_at(addr, 2 + c) as i8).collect();
        (div, biases)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.core.0);
        b.push(self.core.1);
        for v in [self.kd_base, self.weight_base, self.block_base, self.end] {
            let v = u16::try_from(v).map_err(|_| ImageError::Layout(format!("offset {v} exceeds 16 bits")))?;
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(self.slots.len() as u8);
        b.push(0);
        for s in &self.slots {
            for v in [s.pop, s.kd_base, s.kd_len, s.side_ptr] {
                b.extend_from_slice(&(v as u16).to_le_bytes());
            }
        }
        while b.len() % 8 != 0 {
            b.push(0);
        }
        let mut words = Vec::new();
        for p in &self.pops {
            words.push(p.pack()?);
        }
        for a in &self.axons {
            words.push(a.pack()?);
        }
        for k in &self.kds {
            words.push(k.pack()?);
        }
        words.extend_from_slice(&self.weights);
        for w in words {
            b.extend_from_slice(&w.to_le_bytes());
        }
        Ok(b)
    }

    pub fn from_bytes(b: &[u8]) -> Result<CoreImage, ImageError> {
        if b.len() < 18 {
            return Err(ImageError::Truncated);
        }
        if &b[0..4] != MAGIC {
            return Err(ImageError::BadMagic);
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]) as u32;
        let version = u16_at(4) as u16;
        if version != VERSION {
            return Err(ImageError::Version(version));
        }
        let core = (b[6], b[7]);
        let (kd_base, weight_base, block_base, end) = (u16_at(8), u16_at(10), u16_at(12), u16_at(14));
        let nslots = b[16] as usize;
        let mut at = 18;
        let mut slots = Vec::with_capacity(nslots);
        for _ in 0..nslots {
            if b.len() < at + 8 {
                return Err(ImageError::Truncated);
            }
            slots.push(Slot { pop: u16_at(at), kd_base: u16_at(at + 2), kd_len: u16_at(at + 4), side_ptr: u16_at(at + 6) });
            at += 8;
        }
        at = at.div_ceil(8) * 8;
        if !(b.len() - at.min(b.len())).is_multiple_of(8) {
            return Err(ImageError::Truncated);
        }
        let words: Vec<u64> =
            b[at.min(b.len())..].chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        if kd_base > weight_base || weight_base > block_base || block_base > end {
            return Err(ImageError::Layout("section offsets out of order".into()));
        }
        let mut i = 0;
        let mut take = |n: usize| -> Result<&[u64], ImageError> {
            let s = words.get(i..i + n).ok_or(ImageError::Truncated)?;
            i += n;
            Ok(s)
        };
        let pops: Vec<PopulationDescriptor> =
            take(kd_base as usize)?.iter().map(|&w| PopulationDescriptor::unpack(w)).collect::<Result<_, _>>()?;
        let naxons: usize = pops.iter().map(|p| p.axon_count as usize).sum();
        let axons: Vec<Axon> = take(naxons)?.iter().map(|&w| Axon::unpack(w)).collect::<Result<_, _>>()?;
        let kds: Vec<KernelDescriptor> = take((weight_base - kd_base) as usize)?
            .iter()
            .map(|&w| KernelDescriptor::unpack(w))
            .collect::<Result<_, _>>()?;
        let weights = take((block_base - weight_base) as usize)?.to_vec();
        let img = CoreImage { core, slots, pops, axons, kds, weights, kd_base, weight_base, block_base, end };
        img.check_layout()?;
        Ok(img)
    }

    /// Population blocks must tile `[block_base, end)` in order.
    pub fn check_layout(&self) -> Result<(), ImageError> {
        let mut at = self.block_base;
        for (p, d) in self.pops.iter().enumerate() {
            if d.state_ptr < d.axon_count || self.axon_addr(p) != at {
                return Err(ImageError::Layout(format!("population {p} block misplaced")));
            }
            at = d.state_ptr;
            let next = if p + 1 < self.pops.len() {
                self.pops[p + 1].state_ptr.checked_sub(self.pops[p + 1].axon_count)
            } else {
                Some(self.end)
            };
            match next {
                Some(n) if n >= at => at = n,
                _ => return Err(ImageError::Layout(format!("population {p} overlaps its successor"))),
            }
        }
        if at != self.end {
            return Err(ImageError::Layout("blocks do not reach the end".into()));
        }
        for s in &self.slots {
            if s.pop as usize >= self.pops.len() || s.kd_base + s.kd_len > self.weight_base || s.kd_base < self.kd_base {
                return Err(ImageError::Layout("slot out of range".into()));
            }
        }
        Ok(())
    }

    pub fn disassemble(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "core ({}, {})  {} words", self.core.0, self.core.1, self.end);
        let _ = writeln!(
            s,
            "  sections: pops @0  kds @{}  weights @{}  blocks @{}",
            self.kd_base, self.weight_base, self.block_base
        );
        for (i, sl) in self.slots.iter().enumerate() {
            let _ = writeln!(
                s,
                "  slot {i}: pop {} table @{}+{} side @{}",
                sl.pop, sl.kd_base, sl.kd_len, sl.side_ptr
            );
        }
        for (p, d) in self.pops.iter().enumerate() {
            let (w, h) = d.true_extent();
            let _ = writeln!(
                s,
                "  pop {p}: d={} w={} h={} sl={} {:?} {:?} {:?} axons={} state@{} ({} words)",
                d.d,
                w,
                h,
                d.sl,
                d.neuron_type,
                d.activation,
                d.rule,
                d.axon_count,
                d.state_ptr,
                self.state_words(p)
            );
            for a in &self.axons[self.axon_range(p)] {
                let _ = writeln!(
                    s,
                    "    axon -> ({:+},{:+}) pop_id {} off=({},{},{}) bound {}x{} k {}x{} us {}",
                    a.dx, a.dy, a.pop_id, a.x_off, a.y_off, a.c_off, a.w, a.h, a.kw, a.kh, a.us
                );
            }
        }
        for (i, k) in self.kds.iter().enumerate() {
            if k.kd == 0 {
                let _ = writeln!(s, "  kd @{}: null", self.kd_base as usize + i);
            } else {
                let _ = writeln!(
                    s,
                    "  kd @{}: kd={} k {}x{} sl {} w@{} {:?} scale_log {} c_base {}",
                    self.kd_base as usize + i,
                    k.kd,
                    k.kw,
                    k.kh,
                    k.sl,
                    k.weight_ptr,
                    k.rule,
                    k.scale_log,
                    k.c_base
                );
            }
        }
        s
    }
}
