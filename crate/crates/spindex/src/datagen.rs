//! Deterministic synthetic dataset generators: uniform, sweepline (sorted
//! along the first dimension), and varden (a clustered random walk).
//!
//! All randomness comes from a counter-based generator keyed by
//! (seed, index, lane), so output depends only on the arguments, never on
//! thread count or scheduling.

use rayon::prelude::*;

use crate::geometry::{Aabb, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    Sweepline,
    Varden,
    /// Read back from a dataset file; the original generator is unknown.
    Loaded,
}

/// A generated or loaded point set, with the half-open domain box the
/// points were drawn from. Ids are the positions 0..n-1.
#[derive(Clone, Debug)]
pub struct Dataset<const D: usize> {
    pub domain: Aabb<D>,
    pub points: Vec<Point<D>>,
    pub seed: u64,
    pub distribution: Distribution,
}

impl<const D: usize> Dataset<D> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Default half-open domain: coordinates below 10^9 in 2D and below 10^6
/// in 3D, well inside the curve grid for each dimensionality.
pub fn default_domain<const D: usize>() -> Aabb<D> {
    let side = match D {
        2 => 1_000_000_000,
        3 => 1_000_000,
        _ => panic!("supported dimensionalities are 2 and 3"),
    };
    Aabb::new([0; D], [side; D])
}

/// Counter-based generator: a splitmix-style finalizer over a linear
/// combination of the counters. Lane separates independent streams for
/// the same index.
pub(crate) fn mix(seed: u64, i: u64, lane: u64) -> u64 {
    let mut z = seed
        .wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(lane.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn assert_domain<const D: usize>(domain: &Aabb<D>) {
    for d in 0..D {
        assert!(domain.hi[d] > domain.lo[d], "domain must have positive extent");
    }
}

pub(crate) fn draw_point<const D: usize>(
    domain: &Aabb<D>,
    seed: u64,
    i: u64,
    lane0: u64,
) -> [i64; D] {
    let mut coords = [0i64; D];
    for d in 0..D {
        let side = (domain.hi[d] - domain.lo[d]) as u64;
        coords[d] = domain.lo[d] + (mix(seed, i, lane0 + d as u64) % side) as i64;
    }
    coords
}

/// Independent per-dimension uniform draws.
pub fn gen_uniform<const D: usize>(n: usize, domain: Aabb<D>, seed: u64) -> Dataset<D> {
    assert_domain(&domain);
    let points: Vec<Point<D>> = (0..n)
        .into_par_iter()
        .map(|i| Point::new(draw_point(&domain, seed, i as u64, 0), i as u64))
        .collect();
    Dataset {
        domain,
        points,
        seed,
        distribution: Distribution::Uniform,
    }
}

/// Uniform draws sorted along dimension 0, with ids reassigned after the
/// sort so that consecutive id slices are spatially local.
pub fn gen_sweepline<const D: usize>(n: usize, domain: Aabb<D>, seed: u64) -> Dataset<D> {
    let mut ds = gen_uniform(n, domain, seed);
    // Stable sort: equal first coordinates keep their draw order.
    ds.points.par_sort_by_key(|p| p.coords[0]);
    for (i, p) in ds.points.iter_mut().enumerate() {
        p.id = i as u64;
    }
    ds.distribution = Distribution::Sweepline;
    ds
}

#[derive(Clone, Copy, Debug)]
pub struct VardenParams {
    /// Probability of abandoning the walk and jumping to a uniform
    /// position. Values at or above 1 degenerate to uniform draws.
    pub restart_prob: f64,
    /// Per-dimension step bound: each move is uniform in [-step, step].
    pub step: i64,
}

impl VardenParams {
    pub fn for_domain<const D: usize>(domain: &Aabb<D>) -> Self {
        let min_side = (0..D).map(|d| domain.hi[d] - domain.lo[d]).min().unwrap();
        VardenParams {
            restart_prob: 1e-3,
            step: (min_side / 10_000).max(1),
        }
    }
}

/// Clustered points from a random walk with occasional restarts. The walk
/// is inherently sequential; determinism still holds by construction.
pub fn gen_varden<const D: usize>(
    n: usize,
    domain: Aabb<D>,
    seed: u64,
    params: VardenParams,
) -> Dataset<D> {
    assert_domain(&domain);
    assert!(params.restart_prob > 0.0, "restart probability must be positive");
    assert!(params.step > 0, "step must be positive");
    let restart_threshold = (params.restart_prob * 2f64.powi(64)) as u64;
    let always_restart = params.restart_prob >= 1.0;
    let span = 2 * params.step as u64 + 1;

    let mut points = Vec::with_capacity(n);
    let mut cur = [0i64; D];
    for i in 0..n as u64 {
        let restart =
            i == 0 || always_restart || mix(seed, i, D as u64) < restart_threshold;
        if restart {
            cur = draw_point(&domain, seed, i, D as u64 + 1);
        } else {
            for (d, c) in cur.iter_mut().enumerate() {
                let delta = (mix(seed, i, d as u64) % span) as i64 - params.step;
                *c = (*c + delta).clamp(domain.lo[d], domain.hi[d] - 1);
            }
        }
        points.push(Point::new(cur, i));
    }
    Dataset {
        domain,
        points,
        seed,
        distribution: Distribution::Varden,
    }
}

/// Drops points whose coordinates repeat an earlier point's, keeping the
/// lowest id per location, then reassigns ids to 0..m-1 in the survivors'
/// original order.
pub fn dedup_points<const D: usize>(mut points: Vec<Point<D>>) -> Vec<Point<D>> {
    points.par_sort_unstable_by(|a, b| a.coords.cmp(&b.coords).then(a.id.cmp(&b.id)));
    points.dedup_by(|next, first| next.coords == first.coords);
    points.par_sort_unstable_by_key(|p| p.id);
    for (i, p) in points.iter_mut().enumerate() {
        p.id = i as u64;
    }
    points
}
