//! Points, axis-aligned boxes, and the exact integer metric both index
//! families are built on.
//!
//! All distances are squared Euclidean distances carried in `u128`, so
//! comparisons are exact as long as coordinates stay within `±2^61`.
//! The data generators keep coordinates far below that.

/// A point in `D`-dimensional integer space (`D` is 2 or 3 throughout),
/// tagged with the identifier assigned at ingestion: its 0-based position
/// in the input sequence. Ids break every ordering tie in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Point<const D: usize> {
    pub coords: [i64; D],
    pub id: u64,
}

impl<const D: usize> Point<D> {
    pub fn new(coords: [i64; D], id: u64) -> Self {
        Self { coords, id }
    }
}

/// Axis-aligned box stored as its two extreme corners, or the canonical
/// empty box.
///
/// The empty box has `lo = +max` and `hi = -max` in every dimension, which
/// makes it the identity of [`box_merge`]: extending it by one point yields
/// exactly that point's degenerate box, with no special case.
///
/// Tight bounding boxes and query ranges treat both corners as inclusive.
/// The subdivision code in [`crate::sieve`] reuses the type for grid cells
/// with an exclusive `hi`; that reading is local to cell arithmetic and
/// never mixes with the inclusive operations below.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Aabb<const D: usize> {
    pub lo: [i64; D],
    pub hi: [i64; D],
}

impl<const D: usize> Aabb<D> {
    pub const EMPTY: Self = Self {
        lo: [i64::MAX; D],
        hi: [i64::MIN; D],
    };

    pub fn new(lo: [i64; D], hi: [i64; D]) -> Self {
        Self { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        (0..D).any(|d| self.lo[d] > self.hi[d])
    }

    /// Inclusive containment on both sides.
    pub fn contains(&self, p: &Point<D>) -> bool {
        (0..D).all(|d| self.lo[d] <= p.coords[d] && p.coords[d] <= self.hi[d])
    }
}

/// How box `b` sits relative to box `a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxRelation {
    Disjoint,
    Intersects,
    /// `a` fully contains `b`.
    AContainsB,
}

/// Exact squared Euclidean distance.
///
/// Each squared difference fits in `u128`; the `D`-term sum stays exact for
/// coordinates within `±2^61`.
pub fn sq_dist<const D: usize>(p: &Point<D>, q: &Point<D>) -> u128 {
    let mut acc = 0u128;
    for d in 0..D {
        let diff = (p.coords[d] as i128 - q.coords[d] as i128).unsigned_abs();
        acc += diff * diff;
    }
    acc
}

/// Smallest squared distance from `p` to any point of the non-empty box
/// `b`: clamp `p` into `b` per dimension and sum the squared gaps.
///
/// Calling this with an empty box is a bug in the caller.
pub fn min_sq_dist_to_box<const D: usize>(p: &Point<D>, b: &Aabb<D>) -> u128 {
    assert!(!b.is_empty(), "min_sq_dist_to_box on an empty box");
    let mut acc = 0u128;
    for d in 0..D {
        let c = p.coords[d];
        let gap = if c < b.lo[d] {
            (b.lo[d] as i128 - c as i128).unsigned_abs()
        } else if c > b.hi[d] {
            (c as i128 - b.hi[d] as i128).unsigned_abs()
        } else {
            0
        };
        acc += gap * gap;
    }
    acc
}

/// Classifies `b` against `a`. The empty box is `Disjoint` from everything
/// and contained by everything non-empty.
pub fn box_relate<const D: usize>(a: &Aabb<D>, b: &Aabb<D>) -> BoxRelation {
    if a.is_empty() {
        return BoxRelation::Disjoint;
    }
    if b.is_empty() {
        return BoxRelation::AContainsB;
    }
    for d in 0..D {
        if b.hi[d] < a.lo[d] || b.lo[d] > a.hi[d] {
            return BoxRelation::Disjoint;
        }
    }
    if (0..D).all(|d| a.lo[d] <= b.lo[d] && b.hi[d] <= a.hi[d]) {
        BoxRelation::AContainsB
    } else {
        BoxRelation::Intersects
    }
}

/// Tight box of a point sequence; the empty sequence yields [`Aabb::EMPTY`].
pub fn box_of<const D: usize>(points: &[Point<D>]) -> Aabb<D> {
    let mut b = Aabb::EMPTY;
    for p in points {
        box_extend(&mut b, p);
    }
    b
}

pub fn box_extend<const D: usize>(b: &mut Aabb<D>, p: &Point<D>) {
    for d in 0..D {
        b.lo[d] = b.lo[d].min(p.coords[d]);
        b.hi[d] = b.hi[d].max(p.coords[d]);
    }
}

pub fn box_merge<const D: usize>(a: &Aabb<D>, b: &Aabb<D>) -> Aabb<D> {
    let mut out = *a;
    for d in 0..D {
        out.lo[d] = out.lo[d].min(b.lo[d]);
        out.hi[d] = out.hi[d].max(b.hi[d]);
    }
    out
}
