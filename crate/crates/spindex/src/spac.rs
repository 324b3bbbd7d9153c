//! The curve-keyed tree: a weight-balanced binary search tree over
//! space-filling-curve codes whose leaves hold up to `2 * leaf_wrap`
//! entries and may be temporarily unsorted.
//!
//! Every structural change funnels through `join`, which restores the
//! weight-balance criterion by single and double rotations along the
//! heavier spine, and through `make_node`, which re-establishes the leaf
//! wrapping: undersized subtrees flatten into one leaf, mid-sized ones are
//! redistributed into two sorted leaves around their median. Unsorted
//! leaves are an insertion fast path; queries never observe them because
//! leaf entries are scanned exhaustively.
//!
//! Keys are (code, id) pairs, so equal codes never produce ties anywhere
//! in the tree.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{box_extend, box_merge, Aabb, Point};
use crate::sfc::{encode, SfcCode, SfcKind};

#[derive(Clone, Copy, Debug)]
pub struct SpacParams {
    /// Leaf wrapping threshold φ: fresh leaves hold at most φ entries,
    /// and no leaf ever exceeds 2φ.
    pub leaf_wrap: usize,
    /// Balance parameter α as a fraction: a node with child weights
    /// (wl, wr) is balanced when each is at least α times their sum.
    pub alpha_num: u64,
    pub alpha_den: u64,
    /// A leaf plus an incoming slice of up to `rebuild_factor * leaf_wrap`
    /// entries is locally rebuilt instead of being descended into.
    pub rebuild_factor: usize,
}

impl Default for SpacParams {
    fn default() -> Self {
        SpacParams {
            leaf_wrap: 40,
            alpha_num: 1,
            alpha_den: 5,
            rebuild_factor: 4,
        }
    }
}

/// One stored element: the encoded key plus the original point.
#[derive(Clone, Copy, Debug)]
pub struct SpacEntry<const D: usize> {
    pub key: SfcCode,
    pub point: Point<D>,
}

pub type Subtree<const D: usize> = Option<Box<SpacNode<D>>>;

pub enum SpacNode<const D: usize> {
    Leaf {
        entries: Vec<SpacEntry<D>>,
        /// True only when `entries` is nondecreasing by key. False makes
        /// no ordering claim.
        sorted: bool,
        bbox: Aabb<D>,
    },
    Interior {
        left: Subtree<D>,
        right: Subtree<D>,
        /// Entry stored at this node; every key in `left` is smaller and
        /// every key in `right` larger.
        pivot: SpacEntry<D>,
        /// Tight box over the subtree including the pivot's point.
        bbox: Aabb<D>,
        /// Entry count including the pivot.
        size: usize,
    },
}

impl<const D: usize> SpacNode<D> {
    pub fn size(&self) -> usize {
        match self {
            SpacNode::Leaf { entries, .. } => entries.len(),
            SpacNode::Interior { size, .. } => *size,
        }
    }

    pub fn bbox(&self) -> &Aabb<D> {
        match self {
            SpacNode::Leaf { bbox, .. } | SpacNode::Interior { bbox, .. } => bbox,
        }
    }

    fn height(&self) -> usize {
        match self {
            SpacNode::Leaf { .. } => 1,
            SpacNode::Interior { left, right, .. } => {
                1 + sub_height(left).max(sub_height(right))
            }
        }
    }
}

fn sub_height<const D: usize>(t: &Subtree<D>) -> usize {
    t.as_ref().map_or(0, |n| n.height())
}

fn sub_size<const D: usize>(t: &Subtree<D>) -> usize {
    t.as_ref().map_or(0, |n| n.size())
}

/// Balance weight: entry count plus one, so empty subtrees weigh 1.
fn weight<const D: usize>(t: &Subtree<D>) -> u64 {
    sub_size(t) as u64 + 1
}

fn balanced_w(params: &SpacParams, wl: u64, wr: u64) -> bool {
    let total = wl + wr;
    wl * params.alpha_den >= total * params.alpha_num
        && wr * params.alpha_den >= total * params.alpha_num
}

fn balanced_t<const D: usize>(params: &SpacParams, l: &Subtree<D>, r: &Subtree<D>) -> bool {
    balanced_w(params, weight(l), weight(r))
}

fn box_over<const D: usize>(entries: &[SpacEntry<D>]) -> Aabb<D> {
    let mut b = Aabb::EMPTY;
    for e in entries {
        box_extend(&mut b, &e.point);
    }
    b
}

fn sub_bbox<const D: usize>(t: &Subtree<D>) -> Aabb<D> {
    t.as_ref().map_or(Aabb::EMPTY, |n| *n.bbox())
}

/// In-order move of every entry below `node` into `out`. `all_sorted`
/// stays true only if every traversed leaf was sorted, in which case the
/// appended run is globally sorted by the search-tree invariant.
fn drain_entries<const D: usize>(
    node: SpacNode<D>,
    out: &mut Vec<SpacEntry<D>>,
    all_sorted: &mut bool,
) {
    match node {
        SpacNode::Leaf {
            mut entries,
            sorted,
            ..
        } => {
            *all_sorted &= sorted;
            out.append(&mut entries);
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            ..
        } => {
            if let Some(l) = left {
                drain_entries(*l, out, all_sorted);
            }
            out.push(pivot);
            if let Some(r) = right {
                drain_entries(*r, out, all_sorted);
            }
        }
    }
}

fn sort_entries<const D: usize>(entries: &mut [SpacEntry<D>]) {
    entries.sort_unstable_by(|a, b| a.key.cmp(&b.key));
}

/// The only node constructor used during restructuring. Maintains the
/// leaf wrapping: more than 2φ entries keep the interior node as given;
/// φ or fewer flatten into a single leaf (sorted only if every part was);
/// in between, everything is sorted and redistributed into two leaves
/// around the median entry, which becomes the pivot.
fn make_node<const D: usize>(
    l: Subtree<D>,
    pivot: SpacEntry<D>,
    r: Subtree<D>,
    params: &SpacParams,
) -> SpacNode<D> {
    let n = sub_size(&l) + 1 + sub_size(&r);
    if n > 2 * params.leaf_wrap {
        let mut bbox = box_merge(&sub_bbox(&l), &sub_bbox(&r));
        box_extend(&mut bbox, &pivot.point);
        return SpacNode::Interior {
            left: l,
            right: r,
            pivot,
            bbox,
            size: n,
        };
    }
    let mut entries = Vec::with_capacity(n);
    let mut all_sorted = true;
    if let Some(ln) = l {
        drain_entries(*ln, &mut entries, &mut all_sorted);
    }
    entries.push(pivot);
    if let Some(rn) = r {
        drain_entries(*rn, &mut entries, &mut all_sorted);
    }
    if n <= params.leaf_wrap {
        return SpacNode::Leaf {
            bbox: box_over(&entries),
            sorted: all_sorted,
            entries,
        };
    }
    if !all_sorted {
        sort_entries(&mut entries);
    }
    let bbox = box_over(&entries);
    let m = n / 2;
    let right_part = entries.split_off(m + 1);
    let mid = entries.pop().unwrap();
    SpacNode::Interior {
        bbox,
        size: n,
        left: Some(Box::new(SpacNode::Leaf {
            bbox: box_over(&entries),
            sorted: true,
            entries,
        })),
        pivot: mid,
        right: Some(Box::new(SpacNode::Leaf {
            bbox: box_over(&right_part),
            sorted: true,
            entries: right_part,
        })),
    }
}

/// Splits a node into (left, pivot, right). Interiors yield their parts
/// as stored; a leaf is sorted if needed and split at its median, with
/// both halves rebuilt as perfectly balanced subtrees.
fn expose<const D: usize>(
    node: Box<SpacNode<D>>,
    params: &SpacParams,
) -> (Subtree<D>, SpacEntry<D>, Subtree<D>) {
    match *node {
        SpacNode::Interior {
            left,
            right,
            pivot,
            ..
        } => (left, pivot, right),
        SpacNode::Leaf {
            mut entries,
            sorted,
            ..
        } => {
            if !sorted {
                sort_entries(&mut entries);
            }
            let m = entries.len() / 2;
            let pivot = entries[m];
            let l = build_sorted_entries(&entries[..m], params);
            let r = build_sorted_entries(&entries[m + 1..], params);
            (l, pivot, r)
        }
    }
}

/// Joins two subtrees around a pivot whose key separates them. The result
/// is weight-balanced whenever the inputs are.
fn join<const D: usize>(
    l: Subtree<D>,
    pivot: SpacEntry<D>,
    r: Subtree<D>,
    params: &SpacParams,
) -> SpacNode<D> {
    if balanced_t(params, &l, &r) {
        make_node(l, pivot, r, params)
    } else if weight(&l) > weight(&r) {
        join_right(l, pivot, r, params)
    } else {
        join_left(l, pivot, r, params)
    }
}

/// Descends the right spine of the heavier left side, attaches the joint
/// where weights become comparable, and repairs balance on the way back
/// up with a single or double rotation.
fn join_right<const D: usize>(
    l: Subtree<D>,
    pivot: SpacEntry<D>,
    r: Subtree<D>,
    params: &SpacParams,
) -> SpacNode<D> {
    if balanced_t(params, &l, &r) {
        return make_node(l, pivot, r, params);
    }
    let (ll, lk, lc) = expose(l.expect("heavier side is non-empty"), params);
    let joint = join_right(lc, pivot, r, params);
    if balanced_w(params, weight(&ll), joint.size() as u64 + 1) {
        return make_node(ll, lk, Some(Box::new(joint)), params);
    }
    let (l1, k1, r1) = expose(Box::new(joint), params);
    if balanced_w(params, weight(&ll), weight(&l1))
        && balanced_w(params, weight(&ll) + weight(&l1), weight(&r1))
    {
        // Single rotation: lift k1, tuck (ll, lk, l1) under it.
        let inner = make_node(ll, lk, l1, params);
        make_node(Some(Box::new(inner)), k1, r1, params)
    } else {
        // Double rotation through l1's own split.
        let (l2, k2, r2) = expose(l1.expect("double rotation target is non-empty"), params);
        let a = make_node(ll, lk, l2, params);
        let b = make_node(r2, k1, r1, params);
        make_node(Some(Box::new(a)), k2, Some(Box::new(b)), params)
    }
}

/// Mirror of [`join_right`] along the left spine of the heavier right side.
fn join_left<const D: usize>(
    l: Subtree<D>,
    pivot: SpacEntry<D>,
    r: Subtree<D>,
    params: &SpacParams,
) -> SpacNode<D> {
    if balanced_t(params, &l, &r) {
        return make_node(l, pivot, r, params);
    }
    let (rc, rk, rr) = expose(r.expect("heavier side is non-empty"), params);
    let joint = join_left(l, pivot, rc, params);
    if balanced_w(params, joint.size() as u64 + 1, weight(&rr)) {
        return make_node(Some(Box::new(joint)), rk, rr, params);
    }
    let (l1, k1, r1) = expose(Box::new(joint), params);
    if balanced_w(params, weight(&r1), weight(&rr))
        && balanced_w(params, weight(&r1) + weight(&rr), weight(&l1))
    {
        let inner = make_node(r1, rk, rr, params);
        make_node(l1, k1, Some(Box::new(inner)), params)
    } else {
        let (l2, k2, r2) = expose(r1.expect("double rotation target is non-empty"), params);
        let a = make_node(l1, k1, l2, params);
        let b = make_node(r2, rk, rr, params);
        make_node(Some(Box::new(a)), k2, Some(Box::new(b)), params)
    }
}

/// Joins two subtrees with no middle entry by pulling the maximum entry of
/// the left side up as the pivot.
fn join2<const D: usize>(l: Subtree<D>, r: Subtree<D>, params: &SpacParams) -> Subtree<D> {
    match l {
        None => r,
        Some(ln) => {
            let (rest, max) = split_max(*ln, params);
            Some(Box::new(join(rest, max, r, params)))
        }
    }
}

/// Removes and returns the maximum-key entry. Unsorted leaves are sorted
/// first so the maximum is their last entry.
fn split_max<const D: usize>(
    node: SpacNode<D>,
    params: &SpacParams,
) -> (Subtree<D>, SpacEntry<D>) {
    match node {
        SpacNode::Leaf {
            mut entries,
            sorted,
            ..
        } => {
            if !sorted {
                sort_entries(&mut entries);
            }
            let max = entries.pop().expect("leaves are never empty");
            if entries.is_empty() {
                (None, max)
            } else {
                (
                    Some(Box::new(SpacNode::Leaf {
                        bbox: box_over(&entries),
                        sorted: true,
                        entries,
                    })),
                    max,
                )
            }
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            ..
        } => match right {
            None => (left, pivot),
            Some(rn) => {
                let (rest, max) = split_max(*rn, params);
                (Some(Box::new(join(left, pivot, rest, params))), max)
            }
        },
    }
}

/// Sequential cutoff: below this many incoming entries, recursion stays on
/// the calling thread.
const PAR_MIN: usize = 512;

/// Perfectly balanced construction from entries sorted by key: median
/// entry becomes the pivot, halves recurse in parallel.
fn build_sorted_entries<const D: usize>(
    entries: &[SpacEntry<D>],
    params: &SpacParams,
) -> Subtree<D> {
    debug_assert!(entries.windows(2).all(|w| w[0].key < w[1].key));
    let n = entries.len();
    if n == 0 {
        return None;
    }
    if n <= params.leaf_wrap {
        return Some(Box::new(SpacNode::Leaf {
            bbox: box_over(entries),
            sorted: true,
            entries: entries.to_vec(),
        }));
    }
    let m = n / 2;
    let pivot = entries[m];
    let (l, r) = if n >= PAR_MIN {
        rayon::join(
            || build_sorted_entries(&entries[..m], params),
            || build_sorted_entries(&entries[m + 1..], params),
        )
    } else {
        (
            build_sorted_entries(&entries[..m], params),
            build_sorted_entries(&entries[m + 1..], params),
        )
    };
    let mut bbox = box_merge(&sub_bbox(&l), &sub_bbox(&r));
    box_extend(&mut bbox, &pivot.point);
    Some(Box::new(SpacNode::Interior {
        left: l,
        right: r,
        pivot,
        bbox,
        size: n,
    }))
}

/// Recursive batch insertion of a key-sorted slice.
fn insert_sorted<const D: usize>(
    t: Subtree<D>,
    slice: &[SpacEntry<D>],
    params: &SpacParams,
) -> Subtree<D> {
    if slice.is_empty() {
        return t;
    }
    let Some(node) = t else {
        return build_sorted_entries(slice, params);
    };
    match *node {
        SpacNode::Leaf {
            mut entries,
            sorted: _,
            mut bbox,
        } => {
            let n = entries.len() + slice.len();
            if n <= params.leaf_wrap {
                // Fast path: append and give up the order claim.
                for e in slice {
                    box_extend(&mut bbox, &e.point);
                }
                entries.extend_from_slice(slice);
                Some(Box::new(SpacNode::Leaf {
                    entries,
                    sorted: false,
                    bbox,
                }))
            } else if n <= params.rebuild_factor * params.leaf_wrap {
                // Local rebuild: cheaper than splitting entry by entry.
                entries.extend_from_slice(slice);
                sort_entries(&mut entries);
                build_sorted_entries(&entries, params)
            } else {
                // The slice dwarfs the leaf: expand it and push down.
                let leaf = SpacNode::Leaf {
                    entries,
                    sorted: false,
                    bbox,
                };
                let (l, pivot, r) = expose(Box::new(leaf), params);
                insert_around(l, pivot, r, slice, params)
            }
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            ..
        } => insert_around(left, pivot, right, slice, params),
    }
}

fn insert_around<const D: usize>(
    l: Subtree<D>,
    pivot: SpacEntry<D>,
    r: Subtree<D>,
    slice: &[SpacEntry<D>],
    params: &SpacParams,
) -> Subtree<D> {
    // Keys equal to the pivot's cannot occur (ids are unique), so either
    // side of the split is correct for them; <= keeps the convention that
    // the left subtree owns ties.
    let cut = slice.partition_point(|e| e.key <= pivot.key);
    let (ls, rs) = slice.split_at(cut);
    let (nl, nr) = if slice.len() >= PAR_MIN {
        rayon::join(
            || insert_sorted(l, ls, params),
            || insert_sorted(r, rs, params),
        )
    } else {
        (insert_sorted(l, ls, params), insert_sorted(r, rs, params))
    };
    Some(Box::new(join(nl, pivot, nr, params)))
}

/// Recursive batch deletion of a key-sorted slice; every key is present.
fn delete_sorted<const D: usize>(
    t: Subtree<D>,
    keys: &[SpacEntry<D>],
    params: &SpacParams,
) -> Subtree<D> {
    if keys.is_empty() {
        return t;
    }
    let node = t.expect("validated keys cannot reach an empty subtree");
    match *node {
        SpacNode::Leaf {
            mut entries,
            sorted,
            ..
        } => {
            // Removal keeps relative order, so the sorted flag survives.
            entries.retain(|e| {
                keys.binary_search_by(|k| k.key.cmp(&e.key)).is_err()
            });
            if entries.is_empty() {
                None
            } else {
                Some(Box::new(SpacNode::Leaf {
                    bbox: box_over(&entries),
                    sorted,
                    entries,
                }))
            }
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            ..
        } => {
            let cut = keys.partition_point(|e| e.key < pivot.key);
            let pivot_hit = keys.get(cut).is_some_and(|e| e.key == pivot.key);
            let (ls, rs) = (&keys[..cut], &keys[cut + usize::from(pivot_hit)..]);
            let (nl, nr) = if keys.len() >= PAR_MIN {
                rayon::join(
                    || delete_sorted(left, ls, params),
                    || delete_sorted(right, rs, params),
                )
            } else {
                (
                    delete_sorted(left, ls, params),
                    delete_sorted(right, rs, params),
                )
            };
            if pivot_hit {
                join2(nl, nr, params)
            } else {
                Some(Box::new(join(nl, pivot, nr, params)))
            }
        }
    }
}

pub struct SpacTree<const D: usize> {
    root: Subtree<D>,
    kind: SfcKind,
    params: SpacParams,
}

impl<const D: usize> SpacTree<D> {
    /// Builds the tree: encodes and sorts the points with the sampling
    /// sort, then constructs a perfectly balanced tree bottom-up. Point
    /// ids must be unique.
    pub fn build(points: &[Point<D>], kind: SfcKind, params: SpacParams) -> Result<Self> {
        assert!(params.leaf_wrap >= 1, "leaf wrap must be positive");
        assert!(
            params.alpha_num >= 1 && params.alpha_den >= 4 * params.alpha_num,
            "balance parameter must satisfy 0 < alpha <= 1/4"
        );
        assert!(params.rebuild_factor >= 2, "rebuild factor must be at least 2");
        let items = hybrid_sort_items(points, kind)?;
        let entries: Vec<SpacEntry<D>> = items
            .into_iter()
            .map(|it| SpacEntry {
                key: it.key,
                point: points[it.pos as usize],
            })
            .collect();
        Ok(SpacTree {
            root: build_sorted_entries(&entries, &params),
            kind,
            params,
        })
    }

    pub fn len(&self) -> usize {
        sub_size(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    /// Height in nodes along the deepest path; the empty tree has height 0.
    pub fn height(&self) -> usize {
        sub_height(&self.root)
    }

    pub fn kind(&self) -> SfcKind {
        self.kind
    }

    pub fn params(&self) -> &SpacParams {
        &self.params
    }

    pub(crate) fn root(&self) -> Option<&SpacNode<D>> {
        self.root.as_deref()
    }

    fn contains_key(&self, key: SfcCode) -> bool {
        let mut cur = self.root.as_deref();
        while let Some(node) = cur {
            match node {
                SpacNode::Leaf { entries, .. } => {
                    return entries.iter().any(|e| e.key == key);
                }
                SpacNode::Interior {
                    left,
                    right,
                    pivot,
                    ..
                } => {
                    if key == pivot.key {
                        return true;
                    }
                    cur = if key < pivot.key {
                        left.as_deref()
                    } else {
                        right.as_deref()
                    };
                }
            }
        }
        false
    }

    /// Inserts a batch of new points. Keys already present (same id and
    /// coordinates) or repeated within the batch are rejected before
    /// anything is modified; id uniqueness beyond that is the caller's
    /// contract.
    pub fn batch_insert(&mut self, batch: &[Point<D>]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let items = hybrid_sort_items(batch, self.kind)?;
        let entries: Vec<SpacEntry<D>> = items
            .into_iter()
            .map(|it| SpacEntry {
                key: it.key,
                point: batch[it.pos as usize],
            })
            .collect();
        for w in entries.windows(2) {
            if w[0].key == w[1].key {
                return Err(Error::DuplicateId(w[0].key.id));
            }
        }
        if let Some(dup) = entries
            .par_iter()
            .find_first(|e| self.contains_key(e.key))
        {
            return Err(Error::DuplicateId(dup.key.id));
        }
        let root = self.root.take();
        self.root = insert_sorted(root, &entries, &self.params);
        Ok(())
    }

    /// Deletes the entries matching the batch points' (code, id) keys. If
    /// any key is absent the tree is left untouched and the first absent
    /// id in batch order is reported.
    pub fn batch_delete(&mut self, batch: &[Point<D>]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let keys: Vec<SfcCode> = batch
            .par_iter()
            .map(|p| encode(self.kind, p))
            .collect::<Result<_>>()?;
        for (p, key) in batch.iter().zip(&keys) {
            if !self.contains_key(*key) {
                return Err(Error::MissingId(p.id));
            }
        }
        let mut entries: Vec<SpacEntry<D>> = keys
            .into_iter()
            .zip(batch)
            .map(|(key, p)| SpacEntry { key, point: *p })
            .collect();
        sort_entries(&mut entries);
        for w in entries.windows(2) {
            // A key can be stored only once, so asking twice means the
            // second request has nothing left to delete.
            if w[0].key == w[1].key {
                return Err(Error::MissingId(w[0].key.id));
            }
        }
        let root = self.root.take();
        self.root = delete_sorted(root, &entries, &self.params);
        Ok(())
    }

    /// Sorts every leaf in place. Two trees that went through the same
    /// operation sequence dump identically after this, regardless of how
    /// the work was scheduled.
    pub fn canonicalize(&mut self) {
        fn walk<const D: usize>(t: &mut Subtree<D>) {
            if let Some(node) = t.as_deref_mut() {
                match node {
                    SpacNode::Leaf {
                        entries, sorted, ..
                    } => {
                        sort_entries(entries);
                        *sorted = true;
                    }
                    SpacNode::Interior { left, right, .. } => {
                        walk(left);
                        walk(right);
                    }
                }
            }
        }
        walk(&mut self.root);
    }

    /// (number of leaves, largest leaf size).
    pub fn leaf_stats(&self) -> (usize, usize) {
        fn walk<const D: usize>(t: &Subtree<D>, acc: &mut (usize, usize)) {
            if let Some(node) = t.as_deref() {
                match node {
                    SpacNode::Leaf { entries, .. } => {
                        acc.0 += 1;
                        acc.1 = acc.1.max(entries.len());
                    }
                    SpacNode::Interior { left, right, .. } => {
                        walk(left, acc);
                        walk(right, acc);
                    }
                }
            }
        }
        let mut acc = (0, 0);
        walk(&self.root, &mut acc);
        acc
    }

    /// In-order serialization with leaf keys printed in sorted order (the
    /// stored order is untouched).
    pub fn canonical_dump(&self) -> String {
        let mut out = String::new();
        write!(out, "kind={:?}\n", self.kind).unwrap();
        if let Some(root) = self.root.as_deref() {
            dump_node(root, &mut out);
        }
        out
    }

    /// Checks key order, balance, leaf bounds, flag truthfulness, and
    /// size/bbox aggregation; reports the first violation with the
    /// left/right path leading to it.
    pub fn audit(&self) -> Result<()> {
        if let Some(root) = self.root.as_deref() {
            audit_node(
                root,
                None,
                None,
                &self.params,
                &mut String::from("root"),
            )?;
        }
        Ok(())
    }
}

fn key_range<const D: usize>(node: &SpacNode<D>) -> (SfcCode, SfcCode) {
    match node {
        SpacNode::Leaf { entries, .. } => {
            let mut lo = entries[0].key;
            let mut hi = entries[0].key;
            for e in entries {
                lo = lo.min(e.key);
                hi = hi.max(e.key);
            }
            (lo, hi)
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            ..
        } => {
            let lo = left
                .as_deref()
                .map_or(pivot.key, |l| key_range(l).0);
            let hi = right
                .as_deref()
                .map_or(pivot.key, |r| key_range(r).1);
            (lo, hi)
        }
    }
}

fn fmt_key(k: SfcCode) -> String {
    format!("{}#{}", k.code, k.id)
}

fn fmt_box_spac<const D: usize>(b: &Aabb<D>) -> String {
    if b.is_empty() {
        return "[empty]".into();
    }
    let lo: Vec<String> = b.lo.iter().map(|v| v.to_string()).collect();
    let hi: Vec<String> = b.hi.iter().map(|v| v.to_string()).collect();
    format!("[{};{}]", lo.join(","), hi.join(","))
}

fn dump_node<const D: usize>(node: &SpacNode<D>, out: &mut String) {
    match node {
        SpacNode::Leaf {
            entries,
            sorted,
            bbox,
        } => {
            let (lo, hi) = key_range(node);
            let mut keys: Vec<SfcCode> = entries.iter().map(|e| e.key).collect();
            keys.sort_unstable();
            let keys: Vec<String> = keys.into_iter().map(fmt_key).collect();
            write!(
                out,
                "L range={}..{} size={} bbox={} sorted={} keys=[{}]\n",
                fmt_key(lo),
                fmt_key(hi),
                entries.len(),
                fmt_box_spac(bbox),
                sorted,
                keys.join(" ")
            )
            .unwrap();
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            bbox,
            size,
        } => {
            if let Some(l) = left.as_deref() {
                dump_node(l, out);
            }
            let (lo, hi) = key_range(node);
            write!(
                out,
                "I range={}..{} size={size} bbox={} pivot={}\n",
                fmt_key(lo),
                fmt_key(hi),
                fmt_box_spac(bbox),
                fmt_key(pivot.key)
            )
            .unwrap();
            if let Some(r) = right.as_deref() {
                dump_node(r, out);
            }
        }
    }
}

/// Returns (size, bbox) of the audited subtree.
fn audit_node<const D: usize>(
    node: &SpacNode<D>,
    lo: Option<SfcCode>,
    hi: Option<SfcCode>,
    params: &SpacParams,
    path: &mut String,
) -> Result<(usize, Aabb<D>)> {
    let fail = |path: &str, detail: String| Error::Audit {
        path: path.to_string(),
        detail,
    };
    let in_bounds = |k: SfcCode| lo.is_none_or(|l| l < k) && hi.is_none_or(|h| k <= h);
    match node {
        SpacNode::Leaf {
            entries,
            sorted,
            bbox,
        } => {
            if entries.is_empty() || entries.len() > 2 * params.leaf_wrap {
                return Err(fail(path, format!("leaf size {} out of bounds", entries.len())));
            }
            if let Some(e) = entries.iter().find(|e| !in_bounds(e.key)) {
                return Err(fail(path, format!("key {} escapes its range", fmt_key(e.key))));
            }
            if *sorted && entries.windows(2).any(|w| w[0].key > w[1].key) {
                return Err(fail(path, "sorted flag on an unsorted leaf".into()));
            }
            if box_over(entries) != *bbox {
                return Err(fail(path, "leaf bbox is not tight".into()));
            }
            Ok((entries.len(), *bbox))
        }
        SpacNode::Interior {
            left,
            right,
            pivot,
            bbox,
            size,
        } => {
            if !in_bounds(pivot.key) {
                return Err(fail(path, format!("pivot {} escapes its range", fmt_key(pivot.key))));
            }
            if !balanced_w(params, weight(left), weight(right)) {
                return Err(fail(
                    path,
                    format!(
                        "balance violated: weights {} / {}",
                        weight(left),
                        weight(right)
                    ),
                ));
            }
            let mut total = 1usize;
            let mut merged = Aabb::EMPTY;
            box_extend(&mut merged, &pivot.point);
            for (tag, sub, sub_lo, sub_hi) in [
                ('L', left, lo, Some(pivot.key)),
                ('R', right, Some(pivot.key), hi),
            ] {
                if let Some(child) = sub.as_deref() {
                    let len = path.len();
                    path.push('/');
                    path.push(tag);
                    let (s, b) = audit_node(child, sub_lo, sub_hi, params, path)?;
                    path.truncate(len);
                    total += s;
                    merged = box_merge(&merged, &b);
                }
            }
            if total != *size {
                return Err(fail(path, format!("size {size} but parts sum {total}")));
            }
            if merged != *bbox {
                return Err(fail(path, "interior bbox is not tight".into()));
            }
            Ok((*size, *bbox))
        }
    }
}

/// One element of the sorting phase: the key and the position of its point
/// in the input slice. Only these pairs move through the sort; coordinates
/// are fetched by position afterwards.
#[derive(Clone, Copy)]
struct SortItem {
    key: SfcCode,
    pos: u32,
}

/// Below this input size the sampling machinery costs more than it saves
/// and a direct comparison sort takes over.
const DIRECT_SORT_MIN: usize = 4096;

/// Oversampling factor: candidate pivots collected per output bucket.
const OVERSAMPLE: usize = 8;

fn block_count(n: usize) -> usize {
    ((n as f64 / 1024.0).sqrt().ceil()) as usize
}

/// Encodes `points` and returns their (key, position) pairs sorted by key.
/// Codes are computed inside the block pass, on first touch of each point.
fn hybrid_sort_items<const D: usize>(
    points: &[Point<D>],
    kind: SfcKind,
) -> Result<Vec<SortItem>> {
    let n = points.len();
    if n < DIRECT_SORT_MIN {
        let mut items = Vec::with_capacity(n);
        for (i, p) in points.iter().enumerate() {
            items.push(SortItem {
                key: encode(kind, p)?,
                pos: i as u32,
            });
        }
        items.sort_unstable_by(|a, b| a.key.cmp(&b.key));
        return Ok(items);
    }

    let blocks = block_count(n);
    let chunk = n.div_ceil(blocks);

    // Evenly spaced oversample; deterministic in n alone.
    let sample_size = OVERSAMPLE * blocks;
    let mut sample = Vec::with_capacity(sample_size);
    for j in 0..sample_size {
        sample.push(encode(kind, &points[j * n / sample_size])?);
    }
    sample.sort_unstable();
    let pivots: Vec<SfcCode> = (1..blocks).map(|i| sample[i * OVERSAMPLE]).collect();

    // Per block: encode on first touch, sort, and count the bucket runs by
    // merging the sorted block against the pivots.
    let sorted_blocks: Vec<Vec<SortItem>> = points
        .par_chunks(chunk)
        .enumerate()
        .map(|(bi, ps)| -> Result<Vec<SortItem>> {
            let base = bi * chunk;
            let mut items = Vec::with_capacity(ps.len());
            for (j, p) in ps.iter().enumerate() {
                items.push(SortItem {
                    key: encode(kind, p)?,
                    pos: (base + j) as u32,
                });
            }
            items.sort_unstable_by(|a, b| a.key.cmp(&b.key));
            Ok(items)
        })
        .collect::<Result<_>>()?;

    let counts: Vec<Vec<usize>> = sorted_blocks
        .par_iter()
        .map(|blk| {
            let mut c = vec![0usize; blocks];
            let mut start = 0usize;
            for (i, pv) in pivots.iter().enumerate() {
                let run = blk[start..].partition_point(|it| it.key <= *pv);
                c[i] = run;
                start += run;
            }
            c[blocks - 1] = blk.len() - start;
            c
        })
        .collect();

    // Bucket-major exclusive prefix sum: run (block, bucket) lands at a
    // precomputed disjoint destination.
    let rows = sorted_blocks.len();
    let mut dests = vec![0usize; rows * blocks];
    let mut bucket_bounds = vec![0usize; blocks + 1];
    let mut acc = 0usize;
    for b in 0..blocks {
        bucket_bounds[b] = acc;
        for r in 0..rows {
            dests[r * blocks + b] = acc;
            acc += counts[r][b];
        }
    }
    bucket_bounds[blocks] = acc;
    debug_assert_eq!(acc, n);

    let mut out: Vec<SortItem> = vec![
        SortItem {
            key: SfcCode { code: 0, id: 0 },
            pos: 0
        };
        n
    ];
    {
        let writer = crate::sieve::SharedWriter(out.as_mut_ptr());
        sorted_blocks
            .par_iter()
            .zip(dests.par_chunks(blocks))
            .for_each(|(blk, row)| {
                let writer = &writer;
                let mut start = 0usize;
                for (b, &dst) in row.iter().enumerate() {
                    let run = counts_run(blk, &pivots, b, &mut start);
                    for (j, it) in run.iter().enumerate() {
                        // Destinations are disjoint across (block, bucket).
                        unsafe { writer.write(dst + j, *it) };
                    }
                }
            });
    }
    drop(sorted_blocks);

    // Buckets hold disjoint key intervals; sorting each one finishes the
    // job. Large buckets recurse through the same sampling scheme.
    let mut rest: &mut [SortItem] = &mut out;
    let mut bucket_slices = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let width = bucket_bounds[b + 1] - bucket_bounds[b];
        let (head, tail) = rest.split_at_mut(width);
        bucket_slices.push(head);
        rest = tail;
    }
    bucket_slices
        .into_par_iter()
        .for_each(|s| sort_items(s, 0));
    Ok(out)
}

/// The bucket-`b` run of a sorted block, advancing `start` past it.
fn counts_run<'a>(
    blk: &'a [SortItem],
    pivots: &[SfcCode],
    b: usize,
    start: &mut usize,
) -> &'a [SortItem] {
    let end = if b < pivots.len() {
        *start + blk[*start..].partition_point(|it| it.key <= pivots[b])
    } else {
        blk.len()
    };
    let run = &blk[*start..end];
    *start = end;
    run
}

/// In-place recursive sampling sort over already-encoded items.
fn sort_items(items: &mut [SortItem], depth: u32) {
    let n = items.len();
    if n < DIRECT_SORT_MIN || depth >= 8 {
        items.sort_unstable_by(|a, b| a.key.cmp(&b.key));
        return;
    }
    let blocks = block_count(n);
    let chunk = n.div_ceil(blocks);
    let sample_size = OVERSAMPLE * blocks;
    let mut sample: Vec<SfcCode> = (0..sample_size)
        .map(|j| items[j * n / sample_size].key)
        .collect();
    sample.sort_unstable();
    let pivots: Vec<SfcCode> = (1..blocks).map(|i| sample[i * OVERSAMPLE]).collect();

    items
        .par_chunks_mut(chunk)
        .for_each(|blk| blk.sort_unstable_by(|a, b| a.key.cmp(&b.key)));

    let counts: Vec<Vec<usize>> = items
        .par_chunks(chunk)
        .map(|blk| {
            let mut c = vec![0usize; blocks];
            let mut start = 0usize;
            for (i, pv) in pivots.iter().enumerate() {
                let run = blk[start..].partition_point(|it| it.key <= *pv);
                c[i] = run;
                start += run;
            }
            c[blocks - 1] = blk.len() - start;
            c
        })
        .collect();

    let rows = counts.len();
    let mut dests = vec![0usize; rows * blocks];
    let mut bucket_bounds = vec![0usize; blocks + 1];
    let mut acc = 0usize;
    for b in 0..blocks {
        bucket_bounds[b] = acc;
        for r in 0..rows {
            dests[r * blocks + b] = acc;
            acc += counts[r][b];
        }
    }
    bucket_bounds[blocks] = acc;

    let mut scratch: Vec<SortItem> = vec![
        SortItem {
            key: SfcCode { code: 0, id: 0 },
            pos: 0
        };
        n
    ];
    {
        let writer = crate::sieve::SharedWriter(scratch.as_mut_ptr());
        items
            .par_chunks(chunk)
            .zip(dests.par_chunks(blocks))
            .for_each(|(blk, row)| {
                let writer = &writer;
                let mut start = 0usize;
                for (b, &dst) in row.iter().enumerate() {
                    let run = counts_run(blk, &pivots, b, &mut start);
                    for (j, it) in run.iter().enumerate() {
                        unsafe { writer.write(dst + j, *it) };
                    }
                }
            });
    }
    items.copy_from_slice(&scratch);
    drop(scratch);

    let mut rest: &mut [SortItem] = items;
    let mut bucket_slices = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let width = bucket_bounds[b + 1] - bucket_bounds[b];
        let (head, tail) = rest.split_at_mut(width);
        bucket_slices.push(head);
        rest = tail;
    }
    bucket_slices
        .into_par_iter()
        .for_each(|s| sort_items(s, depth + 1));
}

/// Encodes `points` under `kind` and returns the keys sorted by
/// (code, id), via the same sampling sort the tree build uses.
pub fn hybrid_sort<const D: usize>(points: &[Point<D>], kind: SfcKind) -> Result<Vec<SfcCode>> {
    Ok(hybrid_sort_items(points, kind)?
        .into_iter()
        .map(|it| it.key)
        .collect())
}
