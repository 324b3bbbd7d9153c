//! The orthant tree: a 2^D-ary midpoint subdivision built and updated by
//! counting sieves over groups of levels.
//!
//! The tree's shape is a pure function of the stored point multiset, the
//! root region, and the parameters. Builds and batch updates reach the
//! same structure because they all follow the same rules: a subtree of at
//! most `leaf_wrap` points is a leaf, a fully degenerate cell (one grid
//! point) is a leaf no matter how many duplicates sit in it, and interior
//! cells split at their per-dimension midpoints. Only the order of points
//! inside a leaf depends on operation history.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{box_merge, box_of, Aabb, Point};
use crate::sieve::{
    cell_contains, cell_fully_degenerate, child_cell, child_index, sieve_by, split_of,
    BucketClassifier, Skeleton, Split,
};

#[derive(Clone, Copy, Debug)]
pub struct OrthParams {
    /// Levels materialized per skeleton round.
    pub skeleton_levels: u32,
    /// Maximum leaf size; also the flattening threshold for subtrees.
    pub leaf_wrap: usize,
}

impl OrthParams {
    pub fn for_dims(dims: usize) -> Self {
        OrthParams {
            skeleton_levels: if dims == 2 { 3 } else { 2 },
            leaf_wrap: 32,
        }
    }
}

/// Sequential cutoff: below this many points a subtree is built or updated
/// on the calling thread.
const PAR_MIN: usize = 4096;

pub enum OrthNode<const D: usize> {
    Leaf {
        points: Vec<Point<D>>,
        bbox: Aabb<D>,
    },
    Interior {
        /// Exactly 2^D children, positionally indexed by child bits; empty
        /// children are empty leaves so the indexing never shifts.
        children: Vec<OrthNode<D>>,
        /// Half-open cell this node is responsible for.
        cell: Aabb<D>,
        /// Tight box of the points actually stored below.
        bbox: Aabb<D>,
        size: usize,
    },
}

impl<const D: usize> OrthNode<D> {
    fn empty_leaf() -> Self {
        OrthNode::Leaf {
            points: Vec::new(),
            bbox: Aabb::EMPTY,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            OrthNode::Leaf { points, .. } => points.len(),
            OrthNode::Interior { size, .. } => *size,
        }
    }

    pub fn bbox(&self) -> &Aabb<D> {
        match self {
            OrthNode::Leaf { bbox, .. } | OrthNode::Interior { bbox, .. } => bbox,
        }
    }

    fn height(&self) -> usize {
        match self {
            OrthNode::Leaf { .. } => 1,
            OrthNode::Interior { children, .. } => {
                1 + children.iter().map(|c| c.height()).max().unwrap()
            }
        }
    }
}

pub struct OrthTree<const D: usize> {
    root: OrthNode<D>,
    region: Aabb<D>,
    params: OrthParams,
}

impl<const D: usize> OrthTree<D> {
    /// Builds the tree over `points`, all of which must lie inside the
    /// half-open `region`. The region is fixed for the tree's lifetime.
    pub fn build(mut points: Vec<Point<D>>, region: Aabb<D>, params: OrthParams) -> Result<Self> {
        assert!(params.skeleton_levels >= 1, "at least one level per round");
        if let Some(stray) = points.par_iter().find_first(|p| !cell_contains(&region, p)) {
            return Err(Error::OutOfRegion { id: stray.id });
        }
        let root = build_node(&mut points, region, &params);
        Ok(OrthTree {
            root,
            region,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.root.size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Height in nodes along the deepest path; a lone leaf has height 1.
    pub fn height(&self) -> usize {
        self.root.height()
    }

    pub fn region(&self) -> &Aabb<D> {
        &self.region
    }

    pub fn params(&self) -> &OrthParams {
        &self.params
    }

    pub(crate) fn root(&self) -> &OrthNode<D> {
        &self.root
    }

    /// Inserts a batch. Points outside the root region fail the whole call
    /// before anything is touched. Duplicate coordinates and even
    /// duplicate ids are stored as given.
    pub fn batch_insert(&mut self, batch: Vec<Point<D>>) -> Result<()> {
        if let Some(stray) = batch
            .par_iter()
            .find_first(|p| !cell_contains(&self.region, p))
        {
            return Err(Error::OutOfRegion { id: stray.id });
        }
        if batch.is_empty() {
            return Ok(());
        }
        let root = std::mem::replace(&mut self.root, OrthNode::empty_leaf());
        self.root = update_node(root, batch, self.region, &self.params, UpdateKind::Insert);
        Ok(())
    }

    /// Deletes one stored point per batch entry, matching by id at the
    /// leaf the entry's coordinates route to. If any entry has no match
    /// the tree is left untouched and the first unmatched id is reported.
    pub fn batch_delete(&mut self, batch: &[Point<D>]) -> Result<()> {
        self.check_removable(batch)?;
        if batch.is_empty() {
            return Ok(());
        }
        let root = std::mem::replace(&mut self.root, OrthNode::empty_leaf());
        self.root = update_node(
            root,
            batch.to_vec(),
            self.region,
            &self.params,
            UpdateKind::Delete,
        );
        Ok(())
    }

    fn check_removable(&self, batch: &[Point<D>]) -> Result<()> {
        // Budget per leaf: how many instances of each id may still be
        // claimed. Leaves are keyed by address; the tree is not mutated
        // while the map is alive.
        let mut budgets: HashMap<usize, HashMap<u64, usize>> = HashMap::new();
        for p in batch {
            if !cell_contains(&self.region, p) {
                return Err(Error::MissingId(p.id));
            }
            let mut node = &self.root;
            loop {
                match node {
                    OrthNode::Interior { children, cell, .. } => {
                        let c = child_index(&split_of(cell), p);
                        node = &children[c];
                    }
                    OrthNode::Leaf { points, .. } => {
                        let key = node as *const OrthNode<D> as usize;
                        let budget = budgets.entry(key).or_insert_with(|| {
                            let mut m: HashMap<u64, usize> = HashMap::new();
                            for q in points {
                                *m.entry(q.id).or_default() += 1;
                            }
                            m
                        });
                        match budget.get_mut(&p.id) {
                            Some(c) if *c > 0 => *c -= 1,
                            _ => return Err(Error::MissingId(p.id)),
                        }
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    /// (number of leaves, largest leaf size). Empty sentinel leaves count
    /// toward the total.
    pub fn leaf_stats(&self) -> (usize, usize) {
        fn walk<const D: usize>(node: &OrthNode<D>, acc: &mut (usize, usize)) {
            match node {
                OrthNode::Leaf { points, .. } => {
                    acc.0 += 1;
                    acc.1 = acc.1.max(points.len());
                }
                OrthNode::Interior { children, .. } => {
                    for ch in children {
                        walk(ch, acc);
                    }
                }
            }
        }
        let mut acc = (0, 0);
        walk(&self.root, &mut acc);
        acc
    }

    /// Checks every structural invariant and reports the first violation
    /// with the path of child indices leading to it.
    pub fn audit(&self) -> Result<()> {
        audit_node(&self.root, self.region, &self.params, &mut String::from("root"))?;
        Ok(())
    }

    /// Order-independent serialization: preorder, with leaf ids sorted.
    /// Two trees holding the same multiset over the same region dump
    /// identically, whatever operation history produced them.
    pub fn canonical_dump(&self) -> String {
        let mut out = String::new();
        dump_node(&self.root, self.region, &mut out);
        out
    }
}

fn build_node<const D: usize>(
    points: &mut [Point<D>],
    cell: Aabb<D>,
    params: &OrthParams,
) -> OrthNode<D> {
    if points.len() <= params.leaf_wrap || cell_fully_degenerate(&cell) {
        return OrthNode::Leaf {
            bbox: box_of(points),
            points: points.to_vec(),
        };
    }
    let levels = params.skeleton_levels;
    let sk = Skeleton::new(cell, levels);
    let slices = sieve_by(points, &sk, sk.bucket_count())
        .expect("subtree points lie inside their cell");

    let mut parts: Vec<(usize, &mut [Point<D>])> = Vec::with_capacity(sk.bucket_count());
    let mut rest = points;
    for b in 0..sk.bucket_count() {
        let (head, tail) = rest.split_at_mut(slices.range(b).len());
        parts.push((b, head));
        rest = tail;
    }

    let total: usize = parts.iter().map(|(_, s)| s.len()).sum();
    let build_one = |(b, slice): (usize, &mut [Point<D>])| -> OrthNode<D> {
        build_node(slice, *sk.bucket_cell(b), params)
    };
    let mut subs: Vec<Option<OrthNode<D>>> = if total >= PAR_MIN {
        parts.into_par_iter().map(|p| Some(build_one(p))).collect()
    } else {
        parts.into_iter().map(|p| Some(build_one(p))).collect()
    };

    assemble(&sk, 0, 0, &mut subs, params)
}

/// Rebuilds the skeleton's internal levels as tree nodes, flattening any
/// that ended up holding `leaf_wrap` or fewer points.
fn assemble<const D: usize>(
    sk: &Skeleton<D>,
    node: usize,
    depth: u32,
    subs: &mut Vec<Option<OrthNode<D>>>,
    params: &OrthParams,
) -> OrthNode<D> {
    let fanout = 1usize << D;
    if depth == sk.levels() {
        // levels == 0 degenerates to a single pass-through bucket.
        return subs[0].take().unwrap();
    }
    let children: Vec<OrthNode<D>> = (0..fanout)
        .map(|c| {
            if depth + 1 == sk.levels() {
                let first_leaf = (fanout.pow(sk.levels() - 1) - 1) / (fanout - 1);
                let rank = (node - first_leaf) * fanout + c;
                subs[rank].take().unwrap()
            } else {
                assemble(sk, node * fanout + 1 + c, depth + 1, subs, params)
            }
        })
        .collect();
    combine(children, *sk.node_cell(node), params)
}

/// Makes the interior node over `children`, or flattens them into one leaf
/// when the subtree no longer justifies its structure. Degenerate cells
/// flatten regardless of size: a skeleton round may subdivide past the
/// one-grid-point scale, and those pass-through levels must not survive.
fn combine<const D: usize>(
    children: Vec<OrthNode<D>>,
    cell: Aabb<D>,
    params: &OrthParams,
) -> OrthNode<D> {
    let size: usize = children.iter().map(|c| c.size()).sum();
    if size <= params.leaf_wrap || cell_fully_degenerate(&cell) {
        let mut points = Vec::with_capacity(size);
        for ch in children {
            match ch {
                OrthNode::Leaf { points: mut ps, .. } => points.append(&mut ps),
                OrthNode::Interior { .. } => {
                    unreachable!("children of a flattened subtree are leaves")
                }
            }
        }
        OrthNode::Leaf {
            bbox: box_of(&points),
            points,
        }
    } else {
        let bbox = children
            .iter()
            .fold(Aabb::EMPTY, |acc, c| box_merge(&acc, c.bbox()));
        OrthNode::Interior {
            children,
            cell,
            bbox,
            size,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum UpdateKind {
    Insert,
    Delete,
}

/// Shared shape of batch insert and delete: reuse up to `skeleton_levels`
/// existing levels as the skeleton, sieve the batch through it, recurse
/// into the detached subtrees, and rebuild the traversed interior nodes
/// with fresh sizes and boxes (flattening undersized ones).
fn update_node<const D: usize>(
    node: OrthNode<D>,
    mut batch: Vec<Point<D>>,
    cell: Aabb<D>,
    params: &OrthParams,
    kind: UpdateKind,
) -> OrthNode<D> {
    if batch.is_empty() {
        return node;
    }
    match node {
        OrthNode::Leaf { mut points, .. } => match kind {
            UpdateKind::Insert => {
                points.append(&mut batch);
                build_node(&mut points, cell, params)
            }
            UpdateKind::Delete => {
                let mut victims: HashMap<u64, usize> = HashMap::new();
                for p in &batch {
                    *victims.entry(p.id).or_default() += 1;
                }
                points.retain(|p| match victims.get_mut(&p.id) {
                    Some(c) if *c > 0 => {
                        *c -= 1;
                        false
                    }
                    _ => true,
                });
                OrthNode::Leaf {
                    bbox: box_of(&points),
                    points,
                }
            }
        },
        interior => {
            let mut skel = UpdSkeleton::detach(interior, cell, params.skeleton_levels);
            let slices = sieve_by(&mut batch, &skel, 1 << (D as u32 * params.skeleton_levels))
                .expect("batch points lie inside the subtree cell");

            let mut parts: Vec<Vec<Point<D>>> = Vec::with_capacity(skel.externals.len());
            for b in 0..skel.externals.len() {
                parts.push(batch[slices.range(b)].to_vec());
            }
            let externals = std::mem::take(&mut skel.externals);
            let run = |((sub, sub_cell), part): ((OrthNode<D>, Aabb<D>), Vec<Point<D>>)| {
                Some(update_node(sub, part, sub_cell, params, kind))
            };
            let mut results: Vec<Option<OrthNode<D>>> = if batch.len() >= PAR_MIN {
                externals
                    .into_par_iter()
                    .zip(parts.into_par_iter())
                    .map(run)
                    .collect()
            } else {
                externals.into_iter().zip(parts).map(run).collect()
            };
            reattach(&skel.root, &mut results, params)
        }
    }
}

fn reattach<const D: usize>(
    frame: &UpdFrame<D>,
    results: &mut Vec<Option<OrthNode<D>>>,
    params: &OrthParams,
) -> OrthNode<D> {
    match frame {
        UpdFrame::External { bucket } => results[*bucket].take().unwrap(),
        UpdFrame::Interior { cell, children, .. } => {
            let kids: Vec<OrthNode<D>> = children
                .iter()
                .map(|ch| reattach(ch, results, params))
                .collect();
            combine(kids, *cell, params)
        }
    }
}

enum UpdFrame<const D: usize> {
    Interior {
        split: Split<D>,
        cell: Aabb<D>,
        children: Vec<UpdFrame<D>>,
    },
    External {
        bucket: usize,
    },
}

/// Skeleton borrowed from an existing subtree: interior nodes down to the
/// configured depth become classification frames, and whatever hangs below
/// (subtrees at the cut, leaves encountered early) becomes the buckets.
struct UpdSkeleton<const D: usize> {
    root: UpdFrame<D>,
    externals: Vec<(OrthNode<D>, Aabb<D>)>,
}

impl<const D: usize> UpdSkeleton<D> {
    fn detach(node: OrthNode<D>, cell: Aabb<D>, levels: u32) -> Self {
        let mut externals = Vec::new();
        let root = Self::detach_rec(node, cell, 0, levels, &mut externals);
        UpdSkeleton { root, externals }
    }

    fn detach_rec(
        node: OrthNode<D>,
        cell: Aabb<D>,
        depth: u32,
        levels: u32,
        externals: &mut Vec<(OrthNode<D>, Aabb<D>)>,
    ) -> UpdFrame<D> {
        match node {
            OrthNode::Interior { children, cell: node_cell, .. } if depth < levels => {
                debug_assert_eq!(node_cell, cell);
                let split = split_of(&cell);
                let kids = children
                    .into_iter()
                    .enumerate()
                    .map(|(c, ch)| {
                        Self::detach_rec(
                            ch,
                            child_cell(&cell, &split, c),
                            depth + 1,
                            levels,
                            externals,
                        )
                    })
                    .collect();
                UpdFrame::Interior {
                    split,
                    cell,
                    children: kids,
                }
            }
            other => {
                externals.push((other, cell));
                UpdFrame::External {
                    bucket: externals.len() - 1,
                }
            }
        }
    }
}

impl<const D: usize> BucketClassifier<D> for UpdSkeleton<D> {
    fn buckets(&self) -> usize {
        self.externals.len()
    }

    fn classify(&self, p: &Point<D>) -> Result<usize> {
        let mut frame = &self.root;
        loop {
            match frame {
                UpdFrame::External { bucket } => return Ok(*bucket),
                UpdFrame::Interior { split, children, .. } => {
                    frame = &children[child_index(split, p)];
                }
            }
        }
    }
}

fn audit_node<const D: usize>(
    node: &OrthNode<D>,
    cell: Aabb<D>,
    params: &OrthParams,
    path: &mut String,
) -> Result<(usize, Aabb<D>)> {
    let fail = |path: &str, detail: String| Error::Audit {
        path: path.to_string(),
        detail,
    };
    match node {
        OrthNode::Leaf { points, bbox } => {
            if let Some(p) = points.iter().find(|p| !cell_contains(&cell, p)) {
                return Err(fail(path, format!("point {} escapes its cell", p.id)));
            }
            if box_of(points) != *bbox {
                return Err(fail(path, "leaf bbox is not tight".into()));
            }
            if points.len() > params.leaf_wrap && !cell_fully_degenerate(&cell) {
                return Err(fail(
                    path,
                    format!("splittable leaf holds {} points", points.len()),
                ));
            }
            Ok((points.len(), *bbox))
        }
        OrthNode::Interior {
            children,
            cell: stored_cell,
            bbox,
            size,
        } => {
            if *stored_cell != cell {
                return Err(fail(path, "stored cell disagrees with position".into()));
            }
            if children.len() != 1 << D {
                return Err(fail(path, format!("{} children", children.len())));
            }
            if *size <= params.leaf_wrap {
                return Err(fail(path, format!("undersized interior ({size})")));
            }
            if cell_fully_degenerate(&cell) {
                return Err(fail(path, "interior over a degenerate cell".into()));
            }
            let split = split_of(&cell);
            let mut total = 0usize;
            let mut merged = Aabb::EMPTY;
            for (c, ch) in children.iter().enumerate() {
                let sub = child_cell(&cell, &split, c);
                let len = path.len();
                write!(path, "/{c}").unwrap();
                let (s, b) = audit_node(ch, sub, params, path)?;
                path.truncate(len);
                total += s;
                merged = box_merge(&merged, &b);
            }
            if total != *size {
                return Err(fail(path, format!("size {size} but children sum {total}")));
            }
            if merged != *bbox {
                return Err(fail(path, "interior bbox is not the merge of children".into()));
            }
            Ok((*size, *bbox))
        }
    }
}

fn fmt_box<const D: usize>(b: &Aabb<D>, out: &mut String) {
    if b.is_empty() {
        out.push_str("[empty]");
        return;
    }
    out.push('[');
    for d in 0..D {
        if d > 0 {
            out.push(',');
        }
        write!(out, "{}", b.lo[d]).unwrap();
    }
    out.push(';');
    for d in 0..D {
        if d > 0 {
            out.push(',');
        }
        write!(out, "{}", b.hi[d]).unwrap();
    }
    out.push(']');
}

fn dump_node<const D: usize>(node: &OrthNode<D>, cell: Aabb<D>, out: &mut String) {
    match node {
        OrthNode::Leaf { points, bbox } => {
            out.push_str("L cell=");
            fmt_box(&cell, out);
            out.push_str(" bbox=");
            fmt_box(bbox, out);
            let mut ids: Vec<u64> = points.iter().map(|p| p.id).collect();
            ids.sort_unstable();
            write!(out, " size={} ids={ids:?}\n", points.len()).unwrap();
        }
        OrthNode::Interior {
            children,
            cell: node_cell,
            bbox,
            size,
        } => {
            out.push_str("I cell=");
            fmt_box(node_cell, out);
            out.push_str(" bbox=");
            fmt_box(bbox, out);
            write!(out, " size={size}\n").unwrap();
            let split = split_of(node_cell);
            for (c, ch) in children.iter().enumerate() {
                dump_node(ch, child_cell(node_cell, &split, c), out);
            }
        }
    }
}
