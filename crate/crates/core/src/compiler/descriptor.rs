//! 64-bit packed hardware descriptors. Fields are laid out from bit 0 upward
//! in declaration order; every layout sums to exactly 64 bits.

use crate::nngraph::{Activation, NeuronRule, UpdateRule};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("field `{field}` cannot hold {value}")]
    FieldOverflow { field: &'static str, value: i64 },
    #[error("field `{field}` has invalid encoding {value}")]
    InvalidEncoding { field: &'static str, value: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeuronType {
    #[default]
    Standard,
    SigmaDelta,
}

struct Packer {
    word: u64,
    at: u32,
}

impl Packer {
    fn new() -> Self {
        Packer { word: 0, at: 0 }
    }

    fn unsigned(&mut self, field: &'static str, v: i64, bits: u32) -> Result<(), DescriptorError> {
        if v < 0 || v >= 1i64 << bits {
            return Err(DescriptorError::FieldOverflow { field, value: v });
        }
        self.word |= (v as u64) << self.at;
        self.at += bits;
        Ok(())
    }

    fn signed(&mut self, field: &'static str, v: i64, bits: u32) -> Result<(), DescriptorError> {
        let lim = 1i64 << (bits - 1);
        if v < -lim || v >= lim {
            return Err(DescriptorError::FieldOverflow { field, value: v });
        }
        self.word |= ((v as u64) & ((1u64 << bits) - 1)) << self.at;
        self.at += bits;
        Ok(())
    }

    fn finish(self) -> u64 {
        debug_assert!(self.at <= 64);
        self.word
    }
}

struct Unpacker {
    word: u64,
    at: u32,
}

impl Unpacker {
    fn new(word: u64) -> Self {
        Unpacker { word, at: 0 }
    }

    fn unsigned(&mut self, bits: u32) -> u64 {
        let v = (self.word >> self.at) & ((1u64 << bits) - 1);
        self.at += bits;
        v
    }

    fn signed(&mut self, bits: u32) -> i64 {
        let v = self.unsigned(bits);
        ((v << (64 - bits)) as i64) >> (64 - bits)
    }

    fn reserved(&mut self, bits: u32) -> Result<(), DescriptorError> {
        match self.unsigned(bits) {
            0 => Ok(()),
            v => Err(DescriptorError::InvalidEncoding { field: "reserved", value: v }),
        }
    }
}

/// Smallest representable extent bound `>= w` for the 7-bit axon W/H code:
/// exact below 64, multiples of 8 above.
pub fn extent_bound(w: u32) -> u32 {
    if w < 64 {
        w
    } else {
        w.div_ceil(8) * 8
    }
}

fn extent_code(field: &'static str, w: u32) -> Result<i64, DescriptorError> {
    match w {
        0..=63 => Ok(w as i64),
        _ if w.is_multiple_of(8) && w / 8 + 56 <= 127 => Ok((w / 8 + 56) as i64),
        _ => Err(DescriptorError::FieldOverflow { field, value: w as i64 }),
    }
}

fn extent_decode(code: u64) -> u32 {
    if code < 64 {
        code as u32
    } else {
        8 * (code as u32 - 56)
    }
}

/// One connection from a source fragment to a destination fragment.
///
/// Layout: x_off 9s, y_off 9s, c_off 10, w 7, h 7, kw 4, kh 4, us 3,
/// core delta x 4s, core delta y 4s, pop_id 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axon {
    pub x_off: i32,
    pub y_off: i32,
    pub c_off: u32,
    /// Destination extent bound (stride-1 units) used by hit detection.
    pub w: u32,
    pub h: u32,
    pub kw: u32,
    pub kh: u32,
    pub us: u32,
    pub dx: i32,
    pub dy: i32,
    pub pop_id: u32,
}

impl Axon {
    pub fn pack(&self) -> Result<u64, DescriptorError> {
        let mut p = Packer::new();
        p.signed("x_off", self.x_off as i64, 9)?;
        p.signed("y_off", self.y_off as i64, 9)?;
        p.unsigned("c_off", self.c_off as i64, 10)?;
        p.unsigned("w", extent_code("w", self.w)?, 7)?;
        p.unsigned("h", extent_code("h", self.h)?, 7)?;
        if self.kw == 0 {
            return Err(DescriptorError::FieldOverflow { field: "kw", value: 0 });
        }
        if self.kh == 0 {
            return Err(DescriptorError::FieldOverflow { field: "kh", value: 0 });
        }
        p.unsigned("kw", self.kw as i64, 4)?;
        p.unsigned("kh", self.kh as i64, 4)?;
        p.unsigned("us", self.us as i64, 3)?;
        p.signed("dx", self.dx as i64, 4)?;
        p.signed("dy", self.dy as i64, 4)?;
        p.unsigned("pop_id", self.pop_id as i64, 3)?;
        Ok(p.finish())
    }

    pub fn unpack(word: u64) -> Result<Axon, DescriptorError> {
        let mut u = Unpacker::new(word);
        let x_off = u.signed(9) as i32;
        let y_off = u.signed(9) as i32;
        let c_off = u.unsigned(10) as u32;
        let w = extent_decode(u.unsigned(7));
        let h = extent_decode(u.unsigned(7));
        let kw = u.unsigned(4) as u32;
        let kh = u.unsigned(4) as u32;
        if kw == 0 || kh == 0 {
            return Err(DescriptorError::InvalidEncoding { field: "kw/kh", value: 0 });
        }
        let us = u.unsigned(3) as u32;
        let dx = u.signed(4) as i32;
        let dy = u.signed(4) as i32;
        let pop_id = u.unsigned(3) as u32;
        Ok(Axon { x_off, y_off, c_off, w, h, kw, kh, us, dx, dy, pop_id })
    }
}

fn update_rule_code(r: UpdateRule) -> i64 {
    match r {
        UpdateRule::Accumulate => 0,
        UpdateRule::Max => 1,
        UpdateRule::MulA => 2,
        UpdateRule::MulB => 3,
    }
}

fn update_rule_decode(v: u64) -> UpdateRule {
    match v {
        0 => UpdateRule::Accumulate,
        1 => UpdateRule::Max,
        2 => UpdateRule::MulA,
        _ => UpdateRule::MulB,
    }
}

/// One entry of a destination population's source-channel table.
///
/// Layout: kd 10, kw 4, kh 4, sl 1, weight_ptr 15, rule 2, scale_log 4,
/// c_base 10, reserved 14.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelDescriptor {
    /// Destination channels updated per kernel position; 0 marks a null entry.
    pub kd: u32,
    pub kw: u32,
    pub kh: u32,
    pub sl: u32,
    pub weight_ptr: u32,
    pub rule: UpdateRule,
    pub scale_log: u32,
    /// First destination channel (population-local) of the kd channels.
    pub c_base: u32,
}

impl KernelDescriptor {
    pub fn null(kw: u32, kh: u32, sl: u32) -> Self {
        KernelDescriptor { kd: 0, kw, kh, sl, weight_ptr: 0, rule: UpdateRule::Accumulate, scale_log: 0, c_base: 0 }
    }

    pub fn pack(&self) -> Result<u64, DescriptorError> {
        let mut p = Packer::new();
        p.unsigned("kd", self.kd as i64, 10)?;
        if self.kw == 0 || self.kh == 0 {
            return Err(DescriptorError::FieldOverflow { field: "kw/kh", value: 0 });
        }
        p.unsigned("kw", self.kw as i64, 4)?;
        p.unsigned("kh", self.kh as i64, 4)?;
        p.unsigned("sl", self.sl as i64, 1)?;
        p.unsigned("weight_ptr", self.weight_ptr as i64, 15)?;
        p.unsigned("rule", update_rule_code(self.rule), 2)?;
        p.unsigned("scale_log", self.scale_log as i64, 4)?;
        p.unsigned("c_base", self.c_base as i64, 10)?;
        Ok(p.finish())
    }

    pub fn unpack(word: u64) -> Result<Self, DescriptorError> {
        let mut u = Unpacker::new(word);
        let kd = u.unsigned(10) as u32;
        let kw = u.unsigned(4) as u32;
        let kh = u.unsigned(4) as u32;
        if kw == 0 || kh == 0 {
            return Err(DescriptorError::InvalidEncoding { field: "kw/kh", value: 0 });
        }
        let sl = u.unsigned(1) as u32;
        let weight_ptr = u.unsigned(15) as u32;
        let rule = update_rule_decode(u.unsigned(2));
        let scale_log = u.unsigned(4) as u32;
        let c_base = u.unsigned(10) as u32;
        u.reserved(14)?;
        Ok(KernelDescriptor { kd, kw, kh, sl, weight_ptr, rule, scale_log, c_base })
    }
}

/// One population (fragment) resident on a core.
///
/// Layout: d 10, w 8, h 8, neuron_type 2, activation 2, axon_count 10,
/// state_ptr 15, sl 1, rule 2, reserved 6. `w`/`h` hold the true extent
/// shifted left by `sl`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PopulationDescriptor {
    pub d: u32,
    pub w: u32,
    pub h: u32,
    pub neuron_type: NeuronType,
    pub activation: Activation,
    pub axon_count: u32,
    pub state_ptr: u32,
    pub sl: u32,
    pub rule: NeuronRule,
}

impl PopulationDescriptor {
    pub fn pack(&self) -> Result<u64, DescriptorError> {
        let mut p = Packer::new();
        p.unsigned("d", self.d as i64, 10)?;
        p.unsigned("w", self.w as i64, 8)?;
        p.unsigned("h", self.h as i64, 8)?;
        p.unsigned("neuron_type", matches!(self.neuron_type, NeuronType::SigmaDelta) as i64, 2)?;
        p.unsigned("activation", matches!(self.activation, Activation::Relu) as i64, 2)?;
        p.unsigned("axon_count", self.axon_count as i64, 10)?;
        p.unsigned("state_ptr", self.state_ptr as i64, 15)?;
        p.unsigned("sl", self.sl as i64, 1)?;
        let rule = match self.rule {
            NeuronRule::Accumulate => 0,
            NeuronRule::Max => 1,
            NeuronRule::Multiply => 2,
        };
        p.unsigned("rule", rule, 2)?;
        Ok(p.finish())
    }

    pub fn unpack(word: u64) -> Result<Self, DescriptorError> {
        let mut u = Unpacker::new(word);
        let d = u.unsigned(10) as u32;
        let w = u.unsigned(8) as u32;
        let h = u.unsigned(8) as u32;
        let neuron_type = match u.unsigned(2) {
            0 => NeuronType::Standard,
            1 => NeuronType::SigmaDelta,
            v => return Err(DescriptorError::InvalidEncoding { field: "neuron_type", value: v }),
        };
        let activation = match u.unsigned(2) {
            0 => Activation::Identity,
            1 => Activation::Relu,
            v => return Err(DescriptorError::InvalidEncoding { field: "activation", value: v }),
        };
        let axon_count = u.unsigned(10) as u32;
        let state_ptr = u.unsigned(15) as u32;
        let sl = u.unsigned(1) as u32;
        let rule = match u.unsigned(2) {
            0 => NeuronRule::Accumulate,
            1 => NeuronRule::Max,
            2 => NeuronRule::Multiply,
            v => return Err(DescriptorError::InvalidEncoding { field: "rule", value: v }),
        };
        u.reserved(6)?;
        Ok(PopulationDescriptor { d, w, h, neuron_type, activation, axon_count, state_ptr, sl, rule })
    }

    /// True (unshifted) width and height.
    pub fn true_extent(&self) -> (u32, u32) {
        (self.w >> self.sl, self.h >> self.sl)
    }

    pub fn neurons(&self) -> u32 {
        let (w, h) = self.true_extent();
        self.d * w * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_axon_rejected() {
        let a = Axon { x_off: 0, y_off: 0, c_off: 0, w: 0, h: 0, kw: 0, kh: 0, us: 0, dx: 0, dy: 0, pop_id: 0 };
        assert!(matches!(a.pack(), Err(DescriptorError::FieldOverflow { field: "kw", .. })));
        assert!(Axon::unpack(0).is_err());
    }

    #[test]
    fn axon_extremes_round_trip() {
        let a = Axon { x_off: -256, y_off: 255, c_off: 1023, w: 568, h: 63, kw: 15, kh: 1, us: 7, dx: -8, dy: 7, pop_id: 7 };
        assert_eq!(Axon::unpack(a.pack().unwrap()).unwrap(), a);
        let over = Axon { x_off: 256, ..a };
        assert!(matches!(over.pack(), Err(DescriptorError::FieldOverflow { field: "x_off", value: 256 })));
        let odd = Axon { w: 65, ..a };
        assert!(odd.pack().is_err());
        assert_eq!(extent_bound(65), 72);
        assert_eq!(extent_bound(4), 4);
    }

    #[test]
    fn kernel_descriptor_fields_in_place() {
        let k = KernelDescriptor { kd: 5, kw: 3, kh: 2, sl: 1, weight_ptr: 0x7fff, rule: UpdateRule::MulB, scale_log: 9, c_base: 17 };
        let w = k.pack().unwrap();
        assert_eq!(w & 0x3ff, 5);
        assert_eq!((w >> 10) & 0xf, 3);
        assert_eq!((w >> 19) & 1, 1);
        assert_eq!((w >> 20) & 0x7fff, 0x7fff);
        assert_eq!(w >> 50, 0);
        assert_eq!(KernelDescriptor::unpack(w).unwrap(), k);
        assert!(KernelDescriptor::unpack(w | 1 << 63).is_err());
    }

    #[test]
    fn population_descriptor_round_trip() {
        let p = PopulationDescriptor {
            d: 1023,
            w: 254,
            h: 8,
            neuron_type: NeuronType::SigmaDelta,
            activation: Activation::Relu,
            axon_count: 1023,
            state_ptr: 32767,
            sl: 1,
            rule: NeuronRule::Multiply,
        };
        assert_eq!(PopulationDescriptor::unpack(p.pack().unwrap()).unwrap(), p);
        assert_eq!(p.true_extent(), (127, 4));
        assert!(PopulationDescriptor { d: 1024, ..p }.pack().is_err());
    }
}
