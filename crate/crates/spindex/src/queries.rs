//! Exact nearest-neighbor and range queries, shared by every index through
//! a small node-navigation trait, plus the brute-force reference scans the
//! test suites and the harness's verify mode compare against.
//!
//! Exactness contract: for k-NN the returned set is precisely the k
//! smallest (squared distance, id) pairs, so results are unique even under
//! distance ties; for ranges, membership is inclusive box containment.

use std::collections::BinaryHeap;

use arrayvec::ArrayVec;

use crate::geometry::{box_relate, min_sq_dist_to_box, sq_dist, Aabb, BoxRelation, Point};
use crate::porth::{OrthNode, OrthTree};
use crate::spac::{SpacNode, SpacTree};

/// Navigation interface a spatial index exposes to the query engine.
pub(crate) trait QueryNode<const D: usize>: Sized + Sync {
    /// Tight box of everything stored at or below this node.
    fn bbox(&self) -> &Aabb<D>;
    fn subtree_size(&self) -> usize;
    /// `None` for leaves; interiors yield their children plus an optional
    /// point stored inline at the node itself.
    fn children(&self) -> Option<(ArrayVec<&Self, 8>, Option<&Point<D>>)>;
    /// Calls `f` for each point stored directly in this node when it is a
    /// leaf; does nothing for interiors.
    fn for_leaf_points(&self, f: &mut dyn FnMut(&Point<D>));
}

impl<const D: usize> QueryNode<D> for OrthNode<D> {
    fn bbox(&self) -> &Aabb<D> {
        OrthNode::bbox(self)
    }

    fn subtree_size(&self) -> usize {
        self.size()
    }

    fn children(&self) -> Option<(ArrayVec<&Self, 8>, Option<&Point<D>>)> {
        match self {
            OrthNode::Leaf { .. } => None,
            OrthNode::Interior { children, .. } => Some((children.iter().collect(), None)),
        }
    }

    fn for_leaf_points(&self, f: &mut dyn FnMut(&Point<D>)) {
        if let OrthNode::Leaf { points, .. } = self {
            for p in points {
                f(p);
            }
        }
    }
}

impl<const D: usize> QueryNode<D> for SpacNode<D> {
    fn bbox(&self) -> &Aabb<D> {
        SpacNode::bbox(self)
    }

    fn subtree_size(&self) -> usize {
        self.size()
    }

    fn children(&self) -> Option<(ArrayVec<&Self, 8>, Option<&Point<D>>)> {
        match self {
            SpacNode::Leaf { .. } => None,
            SpacNode::Interior {
                left,
                right,
                pivot,
                ..
            } => {
                let mut kids = ArrayVec::new();
                if let Some(l) = left.as_deref() {
                    kids.push(l);
                }
                if let Some(r) = right.as_deref() {
                    kids.push(r);
                }
                Some((kids, Some(&pivot.point)))
            }
        }
    }

    fn for_leaf_points(&self, f: &mut dyn FnMut(&Point<D>)) {
        if let SpacNode::Leaf { entries, .. } = self {
            for e in entries {
                f(&e.point);
            }
        }
    }
}

impl<const D: usize> SpacTree<D> {
    /// The k nearest stored points to `q`, sorted by (squared distance,
    /// id) ascending; fewer than k only when the tree holds fewer points.
    pub fn knn(&self, q: &Point<D>, k: usize) -> Vec<Neighbor<D>> {
        match self.root() {
            Some(root) => knn_root(root, q, k),
            None => Vec::new(),
        }
    }

    /// How many stored points lie inside `query` (inclusive bounds).
    pub fn range_count(&self, query: &Aabb<D>) -> usize {
        self.root().map_or(0, |root| range_count_root(root, query))
    }

    /// The stored points inside `query` (inclusive bounds), in traversal
    /// order.
    pub fn range_list(&self, query: &Aabb<D>) -> Vec<Point<D>> {
        let mut out = Vec::new();
        if let Some(root) = self.root() {
            range_list_root(root, query, &mut out);
        }
        out
    }
}

/// One k-NN result: the point and its exact squared distance to the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor<const D: usize> {
    pub point: Point<D>,
    pub sq_dist: u128,
}

/// Heap entry ordered by (distance, id); the heap keeps the k smallest by
/// evicting its maximum.
#[derive(Clone, Copy, PartialEq, Eq)]
struct Candidate<const D: usize> {
    sq_dist: u128,
    id: u64,
    point: Point<D>,
}

impl<const D: usize> Ord for Candidate<D> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.sq_dist, self.id).cmp(&(other.sq_dist, other.id))
    }
}

impl<const D: usize> PartialOrd for Candidate<D> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn offer<const D: usize>(
    heap: &mut BinaryHeap<Candidate<D>>,
    k: usize,
    q: &Point<D>,
    p: &Point<D>,
) {
    let cand = Candidate {
        sq_dist: sq_dist(q, p),
        id: p.id,
        point: *p,
    };
    if heap.len() < k {
        heap.push(cand);
    } else if cand < *heap.peek().unwrap() {
        heap.pop();
        heap.push(cand);
    }
}

fn drain_sorted<const D: usize>(heap: BinaryHeap<Candidate<D>>) -> Vec<Neighbor<D>> {
    let mut out: Vec<Candidate<D>> = heap.into_vec();
    out.sort_unstable();
    out.into_iter()
        .map(|c| Neighbor {
            point: c.point,
            sq_dist: c.sq_dist,
        })
        .collect()
}

/// Best-first descent. Children are visited in increasing box distance and
/// a subtree is skipped only when its box distance strictly exceeds the
/// current k-th candidate, so distance ties at the cut are always
/// inspected and the exactness contract holds.
fn knn_node<const D: usize, N: QueryNode<D>>(
    node: &N,
    q: &Point<D>,
    k: usize,
    heap: &mut BinaryHeap<Candidate<D>>,
    visited: &mut usize,
) {
    *visited += 1;
    node.for_leaf_points(&mut |p| offer(heap, k, q, p));
    let Some((children, pivot)) = node.children() else {
        return;
    };
    if let Some(p) = pivot {
        offer(heap, k, q, p);
    }
    let mut order: ArrayVec<(u128, usize), 8> = ArrayVec::new();
    for (i, ch) in children.iter().enumerate() {
        if ch.subtree_size() > 0 {
            order.push((min_sq_dist_to_box(q, ch.bbox()), i));
        }
    }
    order.sort_unstable();
    for &(dist, i) in &order {
        if heap.len() == k && dist > heap.peek().unwrap().sq_dist {
            break;
        }
        knn_node(children[i], q, k, heap, visited);
    }
}

pub(crate) fn knn_root<const D: usize, N: QueryNode<D>>(
    root: &N,
    q: &Point<D>,
    k: usize,
) -> Vec<Neighbor<D>> {
    let mut visited = 0usize;
    knn_with_stats(root, q, k, &mut visited)
}

pub(crate) fn knn_with_stats<const D: usize, N: QueryNode<D>>(
    root: &N,
    q: &Point<D>,
    k: usize,
    visited: &mut usize,
) -> Vec<Neighbor<D>> {
    if k == 0 || root.subtree_size() == 0 {
        return Vec::new();
    }
    let mut heap = BinaryHeap::with_capacity(k.min(root.subtree_size()) + 1);
    knn_node(root, q, k, &mut heap, visited);
    drain_sorted(heap)
}

fn for_subtree_points<const D: usize, N: QueryNode<D>>(
    node: &N,
    f: &mut dyn FnMut(&Point<D>),
) {
    node.for_leaf_points(f);
    if let Some((children, pivot)) = node.children() {
        if let Some(p) = pivot {
            f(p);
        }
        for ch in children {
            if ch.subtree_size() > 0 {
                for_subtree_points(ch, f);
            }
        }
    }
}

pub(crate) fn range_count_root<const D: usize, N: QueryNode<D>>(
    root: &N,
    query: &Aabb<D>,
) -> usize {
    if root.subtree_size() == 0 {
        return 0;
    }
    match box_relate(query, root.bbox()) {
        BoxRelation::Disjoint => 0,
        BoxRelation::AContainsB => root.subtree_size(),
        BoxRelation::Intersects => {
            let mut n = 0usize;
            root.for_leaf_points(&mut |p| {
                if query.contains(p) {
                    n += 1;
                }
            });
            if let Some((children, pivot)) = root.children() {
                if let Some(p) = pivot {
                    if query.contains(p) {
                        n += 1;
                    }
                }
                for ch in children {
                    n += range_count_root(ch, query);
                }
            }
            n
        }
    }
}

pub(crate) fn range_list_root<const D: usize, N: QueryNode<D>>(
    root: &N,
    query: &Aabb<D>,
    out: &mut Vec<Point<D>>,
) {
    if root.subtree_size() == 0 {
        return;
    }
    match box_relate(query, root.bbox()) {
        BoxRelation::Disjoint => {}
        BoxRelation::AContainsB => for_subtree_points(root, &mut |p| out.push(*p)),
        BoxRelation::Intersects => {
            root.for_leaf_points(&mut |p| {
                if query.contains(p) {
                    out.push(*p);
                }
            });
            if let Some((children, pivot)) = root.children() {
                if let Some(p) = pivot {
                    if query.contains(p) {
                        out.push(*p);
                    }
                }
                for ch in children {
                    range_list_root(ch, query, out);
                }
            }
        }
    }
}

impl<const D: usize> OrthTree<D> {
    /// The k nearest stored points to `q`, sorted by (squared distance,
    /// id) ascending; fewer than k only when the tree holds fewer points.
    pub fn knn(&self, q: &Point<D>, k: usize) -> Vec<Neighbor<D>> {
        knn_root(self.root(), q, k)
    }

    /// How many stored points lie inside `query` (inclusive bounds).
    pub fn range_count(&self, query: &Aabb<D>) -> usize {
        range_count_root(self.root(), query)
    }

    /// The stored points inside `query` (inclusive bounds), in traversal
    /// order.
    pub fn range_list(&self, query: &Aabb<D>) -> Vec<Point<D>> {
        let mut out = Vec::new();
        range_list_root(self.root(), query, &mut out);
        out
    }
}

/// Reference k-NN: a linear scan through the same bounded-heap selection
/// the index uses.
pub fn oracle_knn<const D: usize>(points: &[Point<D>], q: &Point<D>, k: usize) -> Vec<Neighbor<D>> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for p in points {
        offer(&mut heap, k, q, p);
    }
    drain_sorted(heap)
}

/// Reference k-NN by full sort; a second, independent route used to
/// cross-check [`oracle_knn`] itself.
pub fn oracle_knn_by_sort<const D: usize>(
    points: &[Point<D>],
    q: &Point<D>,
    k: usize,
) -> Vec<Neighbor<D>> {
    let mut all: Vec<Candidate<D>> = points
        .iter()
        .map(|p| Candidate {
            sq_dist: sq_dist(q, p),
            id: p.id,
            point: *p,
        })
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all.into_iter()
        .map(|c| Neighbor {
            point: c.point,
            sq_dist: c.sq_dist,
        })
        .collect()
}

/// Reference range query: linear filter with inclusive bounds.
pub fn oracle_range_list<const D: usize>(points: &[Point<D>], query: &Aabb<D>) -> Vec<Point<D>> {
    points.iter().filter(|p| query.contains(p)).copied().collect()
}

pub fn oracle_range_count<const D: usize>(points: &[Point<D>], query: &Aabb<D>) -> usize {
    points.iter().filter(|p| query.contains(p)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::porth::OrthParams;

    fn lcg(state: &mut u64) -> u64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        *state >> 11
    }

    fn random_points(n: usize, seed: u64, side: i64) -> Vec<Point<2>> {
        let mut state = seed;
        (0..n)
            .map(|i| {
                let x = (lcg(&mut state) % side as u64) as i64;
                let y = (lcg(&mut state) % side as u64) as i64;
                Point::new([x, y], i as u64)
            })
            .collect()
    }

    fn ids(r: &[Neighbor<2>]) -> Vec<(u128, u64)> {
        r.iter().map(|n| (n.sq_dist, n.point.id)).collect()
    }

    #[test]
    fn the_two_reference_scans_agree() {
        let pts = random_points(2_000, 10, 10_000);
        let mut state = 77u64;
        for _ in 0..50 {
            let q = Point::new(
                [
                    (lcg(&mut state) % 12_000) as i64 - 1_000,
                    (lcg(&mut state) % 12_000) as i64 - 1_000,
                ],
                0,
            );
            for k in [1usize, 5, 32, 2_000, 3_000] {
                assert_eq!(
                    ids(&oracle_knn(&pts, &q, k)),
                    ids(&oracle_knn_by_sort(&pts, &q, k))
                );
            }
        }
    }

    #[test]
    fn tree_knn_matches_reference() {
        let side = 1 << 20;
        let pts = random_points(3_000, 4, side);
        let t = OrthTree::build(
            pts.clone(),
            Aabb::new([0, 0], [side, side]),
            OrthParams::for_dims(2),
        )
        .unwrap();
        let mut state = 5u64;
        for i in 0..120 {
            // Alternate between in-distribution and far-outside queries.
            let m = if i % 2 == 0 { side as u64 } else { 4 * side as u64 };
            let q = Point::new(
                [
                    (lcg(&mut state) % m) as i64 - (m as i64 / 4),
                    (lcg(&mut state) % m) as i64 - (m as i64 / 4),
                ],
                0,
            );
            for k in [1usize, 10, 100] {
                assert_eq!(ids(&t.knn(&q, k)), ids(&oracle_knn(&pts, &q, k)));
            }
        }
    }

    #[test]
    fn tree_range_matches_reference() {
        let side = 1 << 16;
        let pts = random_points(3_000, 21, side);
        let t = OrthTree::build(
            pts.clone(),
            Aabb::new([0, 0], [side, side]),
            OrthParams::for_dims(2),
        )
        .unwrap();
        let mut state = 1u64;
        for _ in 0..150 {
            let x = (lcg(&mut state) % side as u64) as i64;
            let y = (lcg(&mut state) % side as u64) as i64;
            let w = (lcg(&mut state) % (side as u64 / 2)) as i64;
            let h = (lcg(&mut state) % (side as u64 / 8)) as i64;
            let query = Aabb::new([x - w / 2, y - h / 2], [x + w / 2, y + h / 2]);
            assert_eq!(t.range_count(&query), oracle_range_count(&pts, &query));
            let mut got: Vec<u64> = t.range_list(&query).iter().map(|p| p.id).collect();
            got.sort_unstable();
            let mut want: Vec<u64> =
                oracle_range_list(&pts, &query).iter().map(|p| p.id).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
        // Whole domain and empty box.
        let all = Aabb::new([0, 0], [side - 1, side - 1]);
        assert_eq!(t.range_count(&all), pts.len());
        assert_eq!(t.range_count(&Aabb::EMPTY), 0);
    }

    #[test]
    fn curve_tree_queries_match_reference_even_with_unsorted_leaves() {
        use crate::sfc::SfcKind;
        use crate::spac::{SpacParams, SpacTree};
        let side = 1 << 22;
        let all = random_points(10_000, 14, side);
        for kind in [SfcKind::Hilbert, SfcKind::Morton] {
            // A mixed schedule with tiny batches leaves many unsorted
            // leaves behind; queries must not notice.
            let mut t = SpacTree::build(&all[..6_000], kind, SpacParams::default()).unwrap();
            for chunk in all[6_000..9_000].chunks(11) {
                t.batch_insert(chunk).unwrap();
            }
            t.batch_delete(&all[1_000..2_000]).unwrap();
            t.batch_insert(&all[9_000..]).unwrap();
            t.batch_insert(&all[1_000..2_000]).unwrap();
            t.audit().unwrap();
            assert_eq!(t.len(), all.len());

            let mut state = 3u64;
            for i in 0..60 {
                let m = if i % 2 == 0 { side as u64 } else { 3 * side as u64 };
                let q = Point::new(
                    [
                        (lcg(&mut state) % m) as i64 - (m as i64 / 4),
                        (lcg(&mut state) % m) as i64 - (m as i64 / 4),
                    ],
                    0,
                );
                for k in [1usize, 10, 100] {
                    assert_eq!(ids(&t.knn(&q, k)), ids(&oracle_knn(&all, &q, k)));
                }
                let w = (lcg(&mut state) % (side as u64 / 4)) as i64;
                let query = Aabb::new(
                    [q.coords[0] - w, q.coords[1] - w],
                    [q.coords[0] + w, q.coords[1] + w],
                );
                assert_eq!(t.range_count(&query), oracle_range_count(&all, &query));
                let mut got: Vec<u64> = t.range_list(&query).iter().map(|p| p.id).collect();
                got.sort_unstable();
                let mut want: Vec<u64> =
                    oracle_range_list(&all, &query).iter().map(|p| p.id).collect();
                want.sort_unstable();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn distance_ties_break_by_id() {
        // Four points at exactly the same distance from the origin query;
        // k = 2 must pick the two lowest ids.
        let pts = vec![
            Point::new([5, 0], 40),
            Point::new([0, 5], 17),
            Point::new([-5, 0], 23),
            Point::new([0, -5], 99),
        ];
        let t = OrthTree::build(
            pts.iter()
                .map(|p| Point::new([p.coords[0] + 100, p.coords[1] + 100], p.id))
                .collect(),
            Aabb::new([0, 0], [256, 256]),
            OrthParams::for_dims(2),
        )
        .unwrap();
        let q = Point::new([100, 100], 0);
        let got = t.knn(&q, 2);
        assert_eq!(ids(&got), vec![(25, 17), (25, 23)]);
    }

    #[test]
    fn degenerate_k_values() {
        let side = 4096;
        let pts = random_points(300, 9, side);
        let t = OrthTree::build(
            pts.clone(),
            Aabb::new([0, 0], [side, side]),
            OrthParams::for_dims(2),
        )
        .unwrap();
        let q = Point::new([17, 3_000], 0);
        assert!(t.knn(&q, 0).is_empty());
        let all = t.knn(&q, 1_000);
        assert_eq!(all.len(), 300);
        assert!(all.windows(2).all(|w| (w[0].sq_dist, w[0].point.id)
            <= (w[1].sq_dist, w[1].point.id)));
        let empty = OrthTree::build(
            Vec::new(),
            Aabb::new([0, 0], [side, side]),
            OrthParams::for_dims(2),
        )
        .unwrap();
        assert!(empty.knn(&q, 5).is_empty());
        assert_eq!(empty.range_count(&Aabb::new([0, 0], [side, side])), 0);
    }

    #[test]
    fn descent_actually_prunes() {
        // Queries inside a dense cloud must not touch most of the tree.
        let side = 1 << 20;
        let pts = random_points(50_000, 33, side);
        let t = OrthTree::build(
            pts.clone(),
            Aabb::new([0, 0], [side, side]),
            OrthParams::for_dims(2),
        )
        .unwrap();
        let node_total = count_nodes(t.root());
        let q = Point::new([side / 3, side / 3], 0);
        let mut visited = 0usize;
        let got = knn_with_stats(t.root(), &q, 10, &mut visited);
        assert_eq!(ids(&got), ids(&oracle_knn(&pts, &q, 10)));
        assert!(
            visited * 10 < node_total,
            "visited {visited} of {node_total} nodes"
        );
    }

    fn count_nodes(n: &OrthNode<2>) -> usize {
        match n {
            OrthNode::Leaf { .. } => 1,
            OrthNode::Interior { children, .. } => {
                1 + children.iter().map(count_nodes).sum::<usize>()
            }
        }
    }
}
