//! Sobol sequence in Gray-code order with Joe–Kuo direction numbers.

use super::directions::DIRECTIONS;
use crate::error::{Error, Result};

pub const MAX_DIM: usize = DIRECTIONS.len();
const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4294967296.0;

/// 32-bit direction numbers `V[dim][bit]`.
#[derive(Clone, Debug)]
pub struct Directions {
    v: Vec<[u32; BITS]>,
}

impl Directions {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("Sobol dimension must be in 1..={MAX_DIM}, got {dim}")));
        }
        let v = DIRECTIONS[..dim].iter().map(|&(poly, m)| direction_numbers(poly, m)).collect();
        Ok(Directions { v })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Integer coordinates of the point with the given index: the XOR of the
    /// direction numbers selected by the bits of `gray(index)`.
    pub fn point_bits(&self, index: u64, out: &mut [u32]) {
        let gray = index ^ (index >> 1);
        for (o, v) in out.iter_mut().zip(&self.v) {
            let mut x = 0u32;
            let mut g = gray;
            let mut bit = 0;
            while g != 0 && bit < BITS {
                if g & 1 == 1 {
                    x ^= v[bit];
                }
                g >>= 1;
                bit += 1;
            }
            *o = x;
        }
    }
}

fn direction_numbers(poly: u32, m_init: &[u32]) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    let degree = (32 - poly.leading_zeros()) as usize - 1;
    if degree == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    for k in 0..degree.min(BITS) {
        v[k] = m_init[k] << (BITS - 1 - k);
    }
    for k in degree..BITS {
        let mut x = v[k - degree] ^ (v[k - degree] >> degree);
        for j in 1..degree {
            // Inner coefficient a_j, most significant first.
            if (poly >> (degree - j)) & 1 == 1 {
                x ^= v[k - j];
            }
        }
        v[k] = x;
    }
    v
}

/// Sequential stream of unshifted Sobol points starting at index 1.
#[derive(Clone, Debug)]
pub struct SobolStream {
    directions: Directions,
    index: u64,
    state: Vec<u32>,
}

impl SobolStream {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(SobolStream { directions: Directions::new(dim)?, index: 0, state: vec![0; dim] })
    }

    pub fn dim(&self) -> usize {
        self.directions.dim()
    }

    /// Index of the next point to be emitted.
    pub fn index(&self) -> u64 {
        self.index + 1
    }

    pub fn next_point(&mut self, out: &mut [f64]) {
        self.index += 1;
        // Gray codes of index-1 and index differ in bit ctz(index).
        let bit = self.index.trailing_zeros() as usize;
        for ((s, v), o) in self.state.iter_mut().zip(&self.directions.v).zip(out.iter_mut()) {
            *s ^= v[bit];
            *o = *s as f64 * SCALE;
        }
    }
}

/// `count × dim` points (row-major) from index 1, optionally XOR-shifted.
pub fn sobol_points(dim: usize, count: usize, shift: Option<&[u32]>) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument("point count must be positive".into()));
    }
    if let Some(s) = shift {
        if s.len() != dim {
            return Err(Error::shape(format!("shift of length {dim}"), format!("length {}", s.len())));
        }
    }
    let mut stream = SobolStream::new(dim)?;
    let mut out = vec![0.0; count * dim];
    for row in out.chunks_mut(dim) {
        stream.next_point(row);
        if let Some(s) = shift {
            for (x, &sh) in row.iter_mut().zip(s) {
                *x = ((*x / SCALE) as u32 ^ sh) as f64 * SCALE;
            }
        }
    }
    Ok(out)
}

pub(crate) fn to_unit(x: u32) -> f64 {
    x as f64 * SCALE
}
