//! Space-filling-curve codes over the nonnegative integer grid.
//!
//! Both encoders pack D coordinates into a single 64-bit code: 32 bits per
//! dimension in 2D, 21 in 3D. A code alone is not unique (distinct points
//! collide exactly when their coordinates coincide), so the ordering key is
//! always the pair `(code, id)`.

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Per-dimension precision in bits: the full grid is `[0, 2^bits)^D`.
pub const fn precision_bits(dims: usize) -> u32 {
    match dims {
        2 => 32,
        3 => 21,
        _ => panic!("supported dimensionalities are 2 and 3"),
    }
}

/// Which curve orders the points of a [`crate::spac::SpacTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfcKind {
    Hilbert,
    Morton,
}

/// A curve code plus the owning point's id; ordering is lexicographic, so
/// equal codes fall back to id order and every key is distinct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SfcCode {
    pub code: u64,
    pub id: u64,
}

fn check_range<const D: usize>(p: &Point<D>) -> Result<()> {
    let bits = precision_bits(D);
    for (dim, &c) in p.coords.iter().enumerate() {
        if c < 0 || (c as u64) >> bits != 0 {
            return Err(Error::CurveRange {
                id: p.id,
                dim,
                value: c,
                bits,
            });
        }
    }
    Ok(())
}

/// Spreads the low 32 bits of `v` so bit `i` lands at position `2i`.
fn spread2(v: u64) -> u64 {
    let mut x = v & 0xffff_ffff;
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Spreads the low 21 bits of `v` so bit `i` lands at position `3i`.
fn spread3(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Morton (Z-order) code: bit `i` of dimension `d` lands at output bit
/// `i*D + d`, so dimension 0 occupies the least-significant slot of each
/// group and the top `k*D` bits of a code identify the point's cell in a
/// `k`-deep midpoint subdivision of the full grid.
pub fn morton_encode<const D: usize>(p: &Point<D>) -> Result<SfcCode> {
    check_range(p)?;
    let code = match D {
        2 => spread2(p.coords[0] as u64) | spread2(p.coords[1] as u64) << 1,
        3 => {
            spread3(p.coords[0] as u64)
                | spread3(p.coords[1] as u64) << 1
                | spread3(p.coords[2] as u64) << 2
        }
        _ => unreachable!(),
    };
    Ok(SfcCode { code, id: p.id })
}

/// Hilbert code with the same precision and key shape as
/// [`morton_encode`].
///
/// The coordinate words are first folded into the transposed Hilbert form:
/// undo the per-level reflections top-down, then Gray-encode across
/// dimensions. Interleaving the transformed words (most significant plane
/// first) yields the position along the curve. One fixed orientation is
/// used everywhere; the tests pin down the properties that matter,
/// bijectivity on the full grid and unit steps between consecutive codes.
pub fn hilbert_encode<const D: usize>(p: &Point<D>) -> Result<SfcCode> {
    check_range(p)?;
    let bits = precision_bits(D);
    let mut x = [0u64; D];
    for d in 0..D {
        x[d] = p.coords[d] as u64;
    }

    // Undo excess reflections, highest bit plane first.
    let top = 1u64 << (bits - 1);
    let mut q = top;
    while q > 1 {
        let mask = q - 1;
        for i in 0..D {
            if x[i] & q != 0 {
                x[0] ^= mask;
            } else {
                let t = (x[0] ^ x[i]) & mask;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // Gray-encode across dimensions.
    for i in 1..D {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = top;
    while q > 1 {
        if x[D - 1] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for w in x.iter_mut() {
        *w ^= t;
    }

    // Interleave the transposed words into one integer, MSB plane first.
    let mut code = 0u64;
    for j in (0..bits).rev() {
        for w in x.iter() {
            code = code << 1 | (w >> j) & 1;
        }
    }
    Ok(SfcCode { code, id: p.id })
}

/// Inverse of [`hilbert_encode`] up to the id, which comes back as 0.
/// This direction exists for tests and diagnostics; the indexes never
/// decode.
pub fn hilbert_decode<const D: usize>(code: u64) -> Point<D> {
    let bits = precision_bits(D);

    // Un-interleave into transposed words, MSB plane first.
    let mut x = [0u64; D];
    let mut shift = bits * D as u32;
    for j in (0..bits).rev() {
        for w in x.iter_mut() {
            shift -= 1;
            *w |= (code >> shift & 1) << j;
        }
    }

    // Gray-decode across dimensions.
    let t0 = x[D - 1] >> 1;
    for i in (1..D).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t0;

    // Redo the reflections bottom-up.
    let mut q = 2u64;
    while q != 1 << bits {
        let mask = q - 1;
        for i in (0..D).rev() {
            if x[i] & q != 0 {
                x[0] ^= mask;
            } else {
                let t = (x[0] ^ x[i]) & mask;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }

    let mut coords = [0i64; D];
    for d in 0..D {
        coords[d] = x[d] as i64;
    }
    Point::new(coords, 0)
}

/// Encodes with the requested curve.
pub fn encode<const D: usize>(kind: SfcKind, p: &Point<D>) -> Result<SfcCode> {
    match kind {
        SfcKind::Hilbert => hilbert_encode(p),
        SfcKind::Morton => morton_encode(p),
    }
}
