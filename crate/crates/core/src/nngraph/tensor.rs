use super::Shape;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use thiserror::Error;

/// Dense int8 tensor in channel-major order: index = (c * H + y) * W + x.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<i8>,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor header: {0}")]
    Header(String),
    #[error("tensor payload has {got} bytes, shape {shape} needs {expected}")]
    Length { shape: Shape, expected: usize, got: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    fm: String,
    shape: [u32; 3],
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<i8>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data length");
        Tensor { shape, data }
    }

    pub fn random(shape: Shape, rng: &mut impl rand::Rng) -> Self {
        let data = (0..shape.len()).map(|_| rng.gen::<i8>()).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn index(&self, c: u32, x: u32, y: u32) -> usize {
        ((c as usize * self.shape.h as usize) + y as usize) * self.shape.w as usize + x as usize
    }

    #[inline]
    pub fn get(&self, c: u32, x: u32, y: u32) -> i8 {
        self.data[self.index(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: u32, x: u32, y: u32, v: i8) {
        let i = self.index(c, x, y);
        self.data[i] = v;
    }

    /// First position where two tensors differ, as `(c, x, y, self, other)`.
    pub fn first_mismatch(&self, other: &Tensor) -> Option<(u32, u32, u32, i8, i8)> {
        if self.shape != other.shape {
            return Some((0, 0, 0, 0, 0));
        }
        let i = self.data.iter().zip(&other.data).position(|(a, b)| a != b)?;
        let s = self.shape;
        let x = (i % s.w as usize) as u32;
        let y = ((i / s.w as usize) % s.h as usize) as u32;
        let c = (i / (s.w as usize * s.h as usize)) as u32;
        Some((c, x, y, self.data[i], other.data[i]))
    }

    /// One JSON header line followed by raw int8 bytes.
    pub fn write_to(&self, fm: &str, mut out: impl Write) -> Result<(), TensorError> {
        let h = Header { fm: fm.to_string(), shape: [self.shape.d, self.shape.w, self.shape.h] };
        let line = serde_json::to_string(&h).map_err(|e| TensorError::Header(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<(String, Tensor), TensorError> {
        let mut reader = std::io::BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let h: Header = serde_json::from_str(line.trim()).map_err(|e| TensorError::Header(e.to_string()))?;
        let shape = Shape::new(h.shape[0], h.shape[1], h.shape[2]);
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != shape.len() {
            return Err(TensorError::Length { shape, expected: shape.len(), got: bytes.len() });
        }
        Ok((h.fm, Tensor { shape, data: bytes.into_iter().map(|b| b as i8).collect() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn file_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::random(Shape::new(3, 5, 2), &mut rng);
        let mut buf = Vec::new();
        t.write_to("in", &mut buf).unwrap();
        let (fm, back) = Tensor::read_from(&buf[..]).unwrap();
        assert_eq!(fm, "in");
        assert_eq!(back, t);
    }

    #[test]
    fn short_payload_rejected() {
        let buf = b"{\"fm\":\"a\",\"shape\":[1,2,2]}\n\x01\x02".to_vec();
        assert!(matches!(Tensor::read_from(&buf[..]), Err(TensorError::Length { .. })));
    }

    #[test]
    fn mismatch_reports_coordinates() {
        let a = Tensor::zeros(Shape::new(2, 3, 4));
        let mut b = a.clone();
        b.set(1, 2, 3, 7);
        assert_eq!(a.first_mismatch(&b), Some((1, 2, 3, 0, 7)));
        assert_eq!(a.first_mismatch(&a), None);
    }
}
