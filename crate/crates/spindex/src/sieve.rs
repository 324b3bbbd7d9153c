//! Multi-level bucket classification and the parallel counting sieve that
//! reorders a point sequence into bucket-contiguous slices.
//!
//! Cells here are half-open boxes: `lo` inclusive, `hi` exclusive, so a
//! cell of side `2^k` splits into aligned halves and the top coordinate of
//! the root region belongs to the highest cell. A dimension of extent 1
//! cannot split further; its child bit is forced to 0 and the high-side
//! sibling cells stay permanently empty.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point};

/// Split plane of one cell: per-dimension midpoints, with degenerate
/// (extent 1) dimensions flagged instead of split.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Split<const D: usize> {
    pub mid: [i64; D],
    pub degenerate: [bool; D],
}

pub(crate) fn split_of<const D: usize>(cell: &Aabb<D>) -> Split<D> {
    let mut mid = [0i64; D];
    let mut degenerate = [false; D];
    for d in 0..D {
        let side = cell.hi[d] - cell.lo[d];
        if side <= 1 {
            degenerate[d] = true;
            mid[d] = cell.lo[d];
        } else {
            // lo + side/2 avoids overflow and keeps power-of-two cells
            // aligned with coordinate bit planes.
            mid[d] = cell.lo[d] + side / 2;
        }
    }
    Split { mid, degenerate }
}

/// Child index of `p` under `split`: bit `d` is set when `p` lies on the
/// high side of dimension `d`. Degenerate dimensions contribute 0.
pub(crate) fn child_index<const D: usize>(split: &Split<D>, p: &Point<D>) -> usize {
    let mut c = 0usize;
    for d in 0..D {
        if !split.degenerate[d] && p.coords[d] >= split.mid[d] {
            c |= 1 << d;
        }
    }
    c
}

/// Cell of child `c`. High-side children of a degenerate dimension get a
/// zero-extent cell; no point ever classifies into one.
pub(crate) fn child_cell<const D: usize>(
    cell: &Aabb<D>,
    split: &Split<D>,
    c: usize,
) -> Aabb<D> {
    let mut out = *cell;
    for d in 0..D {
        let high = c >> d & 1 == 1;
        if split.degenerate[d] {
            if high {
                out.hi[d] = out.lo[d];
            }
        } else if high {
            out.lo[d] = split.mid[d];
        } else {
            out.hi[d] = split.mid[d];
        }
    }
    out
}

/// True when every dimension has extent at most 1: such a cell hosts a
/// single grid point (duplicates included) and must not split again.
pub(crate) fn cell_fully_degenerate<const D: usize>(cell: &Aabb<D>) -> bool {
    (0..D).all(|d| cell.hi[d] - cell.lo[d] <= 1)
}

pub(crate) fn cell_contains<const D: usize>(cell: &Aabb<D>, p: &Point<D>) -> bool {
    (0..D).all(|d| cell.lo[d] <= p.coords[d] && p.coords[d] < cell.hi[d])
}

/// Anything that maps a point to one of a fixed set of buckets. The sieve
/// is generic over this so tree updates can reuse it with their own
/// partial skeletons.
pub(crate) trait BucketClassifier<const D: usize>: Sync {
    fn buckets(&self) -> usize;
    fn classify(&self, p: &Point<D>) -> Result<usize>;
}

/// The top `levels` of a midpoint subdivision of `region`, materialized as
/// one flat structure: a complete 2^D-ary tree of split planes plus the
/// `2^(D*levels)` bucket cells at the bottom.
///
/// A bucket id is the concatenation of child indices along the path, root
/// level in the most significant position, which makes it equal to the
/// leading `levels*D` bits of a Morton code when the region is the full
/// curve grid.
pub struct Skeleton<const D: usize> {
    levels: u32,
    region: Aabb<D>,
    /// Split planes of all internal nodes in level order: node `i`'s
    /// children are `i * 2^D + 1 + c`.
    splits: Vec<Split<D>>,
    /// Cells of all internal nodes, aligned with `splits`.
    cells: Vec<Aabb<D>>,
    bucket_cells: Vec<Aabb<D>>,
}

impl<const D: usize> Skeleton<D> {
    const FANOUT: usize = 1 << D;

    pub fn new(region: Aabb<D>, levels: u32) -> Self {
        let buckets = Self::FANOUT.pow(levels);
        let internal = (buckets - 1) / (Self::FANOUT - 1);
        let mut sk = Skeleton {
            levels,
            region,
            splits: Vec::with_capacity(internal),
            cells: Vec::with_capacity(internal),
            bucket_cells: vec![Aabb::EMPTY; buckets],
        };
        if levels > 0 {
            sk.splits.resize(
                internal,
                Split {
                    mid: [0; D],
                    degenerate: [false; D],
                },
            );
            sk.cells.resize(internal, Aabb::EMPTY);
            sk.fill(0, 0, region);
        } else {
            sk.bucket_cells[0] = region;
        }
        sk
    }

    fn fill(&mut self, node: usize, depth: u32, cell: Aabb<D>) {
        let split = split_of(&cell);
        self.splits[node] = split;
        self.cells[node] = cell;
        for c in 0..Self::FANOUT {
            let sub = child_cell(&cell, &split, c);
            if depth + 1 == self.levels {
                // Bucket rank: path bits, root most significant.
                let first_leaf = (Self::FANOUT.pow(self.levels - 1) - 1) / (Self::FANOUT - 1);
                let rank = (node - first_leaf) * Self::FANOUT + c;
                self.bucket_cells[rank] = sub;
            } else {
                self.fill(node * Self::FANOUT + 1 + c, depth + 1, sub);
            }
        }
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn region(&self) -> &Aabb<D> {
        &self.region
    }

    pub fn bucket_count(&self) -> usize {
        self.bucket_cells.len()
    }

    /// Half-open cell of bucket `b`; zero-extent for buckets shadowed by a
    /// degenerate dimension.
    pub fn bucket_cell(&self, b: usize) -> &Aabb<D> {
        &self.bucket_cells[b]
    }

    /// Cell of internal node `i` in level order (children of `i` are
    /// `i * 2^D + 1 + c`).
    pub(crate) fn node_cell(&self, i: usize) -> &Aabb<D> {
        &self.cells[i]
    }

    /// Descends all levels and returns the bucket id of `p`.
    ///
    /// `p` must lie inside the root region; anything else is a caller bug
    /// surfaced as an error rather than a misfiled point.
    pub fn classify(&self, p: &Point<D>) -> Result<usize> {
        if !cell_contains(&self.region, p) {
            return Err(Error::OutOfRegion { id: p.id });
        }
        let mut node = 0usize;
        let mut bucket = 0usize;
        for _ in 0..self.levels {
            let c = child_index(&self.splits[node], p);
            bucket = bucket * Self::FANOUT + c;
            node = node * Self::FANOUT + 1 + c;
        }
        Ok(bucket)
    }
}

impl<const D: usize> BucketClassifier<D> for Skeleton<D> {
    fn buckets(&self) -> usize {
        self.bucket_count()
    }

    fn classify(&self, p: &Point<D>) -> Result<usize> {
        Skeleton::classify(self, p)
    }
}

/// Result of a sieve: the input slice holds the permuted points and
/// `offsets[b]..offsets[b+1]` brackets bucket `b`.
#[derive(Clone, Debug)]
pub struct BucketSlices {
    pub offsets: Vec<usize>,
}

impl BucketSlices {
    pub fn bucket_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }
}

/// Reorders `points` in place so each skeleton bucket is contiguous, with
/// the default chunk size `2^(D * levels)`.
pub fn sieve<const D: usize>(
    points: &mut [Point<D>],
    sk: &Skeleton<D>,
) -> Result<BucketSlices> {
    sieve_chunked(points, sk, sk.bucket_count())
}

/// [`sieve`] with an explicit chunk size (any value >= 1 gives the same
/// bucket slices; only the intra-bucket order shifts with the chunking).
pub fn sieve_chunked<const D: usize>(
    points: &mut [Point<D>],
    sk: &Skeleton<D>,
    chunk: usize,
) -> Result<BucketSlices> {
    sieve_by(points, sk, chunk)
}

pub(crate) fn sieve_by<const D: usize, C: BucketClassifier<D>>(
    points: &mut [Point<D>],
    classifier: &C,
    chunk: usize,
) -> Result<BucketSlices> {
    assert!(chunk >= 1, "chunk size must be positive");
    let n = points.len();
    let buckets = classifier.buckets();
    if n == 0 {
        return Ok(BucketSlices {
            offsets: vec![0; buckets + 1],
        });
    }
    let nchunks = n.div_ceil(chunk);

    // Pass 1: per-point bucket ids and the chunk-by-bucket count matrix.
    let mut ids = vec![0u32; n];
    let mut matrix = vec![0usize; nchunks * buckets];
    points
        .par_chunks(chunk)
        .zip(ids.par_chunks_mut(chunk))
        .zip(matrix.par_chunks_mut(buckets))
        .try_for_each(|((ps, ids), row)| -> Result<()> {
            for (p, slot) in ps.iter().zip(ids) {
                let b = classifier.classify(p)?;
                *slot = b as u32;
                row[b] += 1;
            }
            Ok(())
        })?;

    // Pass 2: bucket-major exclusive prefix sum over the matrix. After
    // this, matrix[c * buckets + b] is the destination cursor for chunk
    // c's run of bucket b, and runs tile the output without gaps.
    let mut offsets = vec![0usize; buckets + 1];
    let mut acc = 0usize;
    for b in 0..buckets {
        offsets[b] = acc;
        for c in 0..nchunks {
            let cell = &mut matrix[c * buckets + b];
            let count = *cell;
            *cell = acc;
            acc += count;
        }
    }
    offsets[buckets] = acc;
    debug_assert_eq!(acc, n);

    // Pass 3: scatter into a scratch buffer, chunks in parallel. The
    // prefix sums make every (chunk, bucket) destination range disjoint,
    // which is what justifies the unchecked shared writes.
    let mut scratch: Vec<Point<D>> = vec![Point::new([0; D], 0); n];
    {
        let out = SharedWriter(scratch.as_mut_ptr());
        points
            .par_chunks(chunk)
            .zip(ids.par_chunks(chunk))
            .zip(matrix.par_chunks(buckets))
            .for_each(|((ps, ids), row)| {
                let mut cursors = row.to_vec();
                let out = &out;
                for (p, &b) in ps.iter().zip(ids) {
                    let dst = &mut cursors[b as usize];
                    debug_assert!(*dst < n);
                    unsafe { out.write(*dst, *p) };
                    *dst += 1;
                }
            });
    }
    points.copy_from_slice(&scratch);
    Ok(BucketSlices { offsets })
}

pub(crate) struct SharedWriter<T>(pub(crate) *mut T);

unsafe impl<T: Send> Sync for SharedWriter<T> {}

impl<T> SharedWriter<T> {
    /// Caller guarantees `idx` is written by exactly one thread.
    pub(crate) unsafe fn write(&self, idx: usize, value: T) {
        unsafe { self.0.add(idx).write(value) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: i64, y: i64, id: u64) -> Point<2> {
        Point::new([x, y], id)
    }

    #[test]
    fn classify_single_level() {
        let sk = Skeleton::new(Aabb::new([0, 0], [100, 100]), 1);
        assert_eq!(sk.classify(&pt(10, 10, 0)).unwrap(), 0);
        assert_eq!(sk.classify(&pt(60, 60, 1)).unwrap(), 3);
        assert_eq!(sk.classify(&pt(60, 10, 2)).unwrap(), 1);
        assert_eq!(sk.classify(&pt(10, 60, 3)).unwrap(), 2);
        // Midpoints belong to the high side.
        assert_eq!(sk.classify(&pt(50, 50, 4)).unwrap(), 3);
    }

    #[test]
    fn classify_rejects_outside() {
        let sk = Skeleton::new(Aabb::new([0, 0], [100, 100]), 1);
        assert!(matches!(
            sk.classify(&pt(100, 4, 7)),
            Err(Error::OutOfRegion { id: 7 })
        ));
        assert!(matches!(
            sk.classify(&pt(-1, 4, 8)),
            Err(Error::OutOfRegion { id: 8 })
        ));
    }

    #[test]
    fn classify_composes_level_by_level() {
        // Two levels must agree with classifying twice by hand.
        let region = Aabb::new([0, 0], [97, 64]);
        let sk2 = Skeleton::new(region, 2);
        let sk1 = Skeleton::new(region, 1);
        let mut state = 7u64;
        for i in 0..2000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let p = pt((state >> 33) as i64 % 97, (state >> 13) as i64 % 64, i);
            let top = sk1.classify(&p).unwrap();
            let cell = *sk1.bucket_cell(top);
            let inner = Skeleton::new(cell, 1).classify(&p).unwrap();
            assert_eq!(sk2.classify(&p).unwrap(), top * 4 + inner);
        }
    }

    #[test]
    fn degenerate_dimension_forces_low_bit() {
        // One-wide in x: only y splits, and the x bit stays 0.
        let sk = Skeleton::new(Aabb::new([5, 0], [6, 100]), 1);
        assert_eq!(sk.classify(&pt(5, 10, 0)).unwrap(), 0);
        assert_eq!(sk.classify(&pt(5, 80, 1)).unwrap(), 2);
        // Buckets 1 and 3 are shadowed and keep zero-extent cells.
        assert!(sk.bucket_cell(1).lo[0] >= sk.bucket_cell(1).hi[0]);
    }

    #[test]
    fn bucket_cells_partition_region() {
        let region = Aabb::new([0, 0], [101, 37]);
        let sk = Skeleton::new(region, 3);
        // Every grid point of a coarse sample lands in exactly the bucket
        // whose cell contains it.
        for x in (0..101).step_by(7) {
            for y in 0..37 {
                let p = pt(x, y, 0);
                let b = sk.classify(&p).unwrap();
                assert!(cell_contains(sk.bucket_cell(b), &p));
                let holders = (0..sk.bucket_count())
                    .filter(|&k| cell_contains(sk.bucket_cell(k), &p))
                    .count();
                assert_eq!(holders, 1);
            }
        }
    }

    fn random_points(n: usize, seed: u64, side: i64) -> Vec<Point<2>> {
        let mut state = seed;
        (0..n)
            .map(|i| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let x = (state >> 33) as i64 % side;
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let y = (state >> 33) as i64 % side;
                pt(x, y, i as u64)
            })
            .collect()
    }

    /// Reference partition: stable filter per bucket.
    fn naive_partition(points: &[Point<2>], sk: &Skeleton<2>) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); sk.bucket_count()];
        for p in points {
            out[sk.classify(p).unwrap()].push(p.id);
        }
        out
    }

    #[test]
    fn sieve_matches_naive_partition() {
        let region = Aabb::new([0, 0], [1 << 20, 1 << 20]);
        let base = random_points(20_000, 99, 1 << 20);
        for levels in [1u32, 2, 3] {
            let sk = Skeleton::new(region, levels);
            for chunk in [1usize, 64, sk.bucket_count()] {
                let mut points = base.clone();
                let slices = sieve_chunked(&mut points, &sk, chunk).unwrap();
                assert_eq!(slices.bucket_count(), sk.bucket_count());
                let expected = naive_partition(&base, &sk);
                for b in 0..sk.bucket_count() {
                    let mut got: Vec<u64> =
                        points[slices.range(b)].iter().map(|p| p.id).collect();
                    got.sort_unstable();
                    let mut want = expected[b].clone();
                    want.sort_unstable();
                    assert_eq!(got, want, "levels={levels} chunk={chunk} bucket={b}");
                }
                // Permutation of the input: same id set overall.
                let mut ids: Vec<u64> = points.iter().map(|p| p.id).collect();
                ids.sort_unstable();
                assert!(ids.iter().enumerate().all(|(i, &v)| i as u64 == v));
            }
        }
    }

    #[test]
    fn sieve_zero_levels_is_identity() {
        let region = Aabb::new([0, 0], [1000, 1000]);
        let sk = Skeleton::new(region, 0);
        let base = random_points(501, 3, 1000);
        let mut points = base.clone();
        let slices = sieve(&mut points, &sk).unwrap();
        assert_eq!(slices.offsets, vec![0, 501]);
        assert_eq!(points, base);
    }

    #[test]
    fn sieve_empty_input() {
        let sk = Skeleton::new(Aabb::new([0, 0], [8, 8]), 2);
        let slices = sieve::<2>(&mut [], &sk).unwrap();
        assert_eq!(slices.offsets.len(), 17);
        assert!(slices.offsets.iter().all(|&o| o == 0));
    }

    #[test]
    fn sieve_propagates_classification_error() {
        let sk = Skeleton::new(Aabb::new([0, 0], [8, 8]), 1);
        let mut points = vec![pt(1, 1, 0), pt(9, 1, 1)];
        assert!(matches!(
            sieve(&mut points, &sk),
            Err(Error::OutOfRegion { id: 1 })
        ));
    }

    #[test]
    fn duplicate_heavy_input_lands_in_one_bucket() {
        let sk = Skeleton::new(Aabb::new([0, 0], [1 << 10, 1 << 10]), 3);
        let mut points: Vec<Point<2>> = (0..500).map(|i| pt(700, 700, i)).collect();
        let slices = sieve(&mut points, &sk).unwrap();
        let b = sk.classify(&pt(700, 700, 0)).unwrap();
        assert_eq!(slices.range(b).len(), 500);
    }
}
