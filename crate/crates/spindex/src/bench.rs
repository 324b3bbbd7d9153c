//! Workload harness: dataset files, a unified index handle, and phased
//! timing runs that emit CSV report rows.
//!
//! The binary dataset format is fixed so files generated on one machine can
//! be replayed on another: magic `PSIB`, a 16-bit little-endian version
//! (currently 1), a 16-bit dimension count, a 64-bit point count, then the
//! coordinates row-major as signed 64-bit little-endian integers, and
//! finally the domain box as `2 * dims` coordinates (low corner, then high
//! corner). Point ids are positional and are not stored.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::datagen::{self, Dataset, Distribution};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point};
use crate::porth::{OrthParams, OrthTree};
use crate::queries::{self, Neighbor};
use crate::sfc::SfcKind;
use crate::spac::{SpacParams, SpacTree};

const MAGIC: &[u8; 4] = b"PSIB";
const VERSION: u16 = 1;

/// Writes a dataset in the binary point format.
pub fn write_dataset<const D: usize>(path: &Path, ds: &Dataset<D>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(D as u16).to_le_bytes())?;
    w.write_all(&(ds.points.len() as u64).to_le_bytes())?;
    for p in &ds.points {
        for d in 0..D {
            w.write_all(&p.coords[d].to_le_bytes())?;
        }
    }
    for d in 0..D {
        w.write_all(&ds.domain.lo[d].to_le_bytes())?;
    }
    for d in 0..D {
        w.write_all(&ds.domain.hi[d].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Byte cursor over a loaded file that reports the failing offset on
/// truncation or malformed fields.
struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            offset: at as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(self.err(
                self.offset,
                format!(
                    "unexpected end of file: need {n} more bytes, have {}",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads just the dimension count from a dataset file header, so callers can
/// dispatch to the right const-generic instantiation before loading points.
pub fn read_dataset_dims(path: &Path) -> Result<usize> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0, path };
    check_header(&mut cur)?;
    Ok(cur.u16()? as usize)
}

fn check_header(cur: &mut Cursor<'_>) -> Result<()> {
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(cur.err(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let at = cur.offset;
    let version = cur.u16()?;
    if version != VERSION {
        return Err(cur.err(at, format!("unsupported version {version}, expected {VERSION}")));
    }
    Ok(())
}

/// Reads a dataset from the binary point format. Ids are assigned by file
/// position.
pub fn read_dataset<const D: usize>(path: &Path) -> Result<Dataset<D>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0, path };
    check_header(&mut cur)?;
    let at = cur.offset;
    let dims = cur.u16()? as usize;
    if dims != D {
        return Err(cur.err(at, format!("file has {dims} dimensions, expected {D}")));
    }
    let count = cur.u64()?;
    let mut points = Vec::with_capacity(usize::try_from(count).unwrap_or(0));
    for id in 0..count {
        let mut coords = [0i64; D];
        for c in coords.iter_mut() {
            *c = cur.i64()?;
        }
        points.push(Point::new(coords, id));
    }
    let mut lo = [0i64; D];
    for c in lo.iter_mut() {
        *c = cur.i64()?;
    }
    let mut hi = [0i64; D];
    for c in hi.iter_mut() {
        *c = cur.i64()?;
    }
    if cur.offset != bytes.len() {
        return Err(cur.err(
            cur.offset,
            format!("{} trailing bytes after domain box", bytes.len() - cur.offset),
        ));
    }
    Ok(Dataset {
        domain: Aabb::new(lo, hi),
        points,
        seed: 0,
        distribution: Distribution::Loaded,
    })
}

/// Index family selector for the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexKind {
    /// Parallel orth-tree.
    Porth,
    /// Curve-keyed balanced tree over Hilbert codes.
    SpacH,
    /// Curve-keyed balanced tree over Morton codes.
    SpacZ,
}

impl IndexKind {
    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Porth => "porth",
            IndexKind::SpacH => "spac-h",
            IndexKind::SpacZ => "spac-z",
        }
    }
}

/// A built index of any supported family, dispatching the shared operations.
pub enum AnyIndex<const D: usize> {
    Porth(OrthTree<D>),
    Spac(SpacTree<D>),
}

impl<const D: usize> AnyIndex<D> {
    pub fn build(kind: IndexKind, points: &[Point<D>], domain: Aabb<D>) -> Result<Self> {
        match kind {
            IndexKind::Porth => Ok(AnyIndex::Porth(OrthTree::build(
                points.to_vec(),
                domain,
                OrthParams::for_dims(D),
            )?)),
            IndexKind::SpacH => Ok(AnyIndex::Spac(SpacTree::build(
                points,
                SfcKind::Hilbert,
                SpacParams::default(),
            )?)),
            IndexKind::SpacZ => Ok(AnyIndex::Spac(SpacTree::build(
                points,
                SfcKind::Morton,
                SpacParams::default(),
            )?)),
        }
    }

    pub fn batch_insert(&mut self, batch: &[Point<D>]) -> Result<()> {
        match self {
            AnyIndex::Porth(t) => t.batch_insert(batch.to_vec()),
            AnyIndex::Spac(t) => t.batch_insert(batch),
        }
    }

    pub fn batch_delete(&mut self, batch: &[Point<D>]) -> Result<()> {
        match self {
            AnyIndex::Porth(t) => t.batch_delete(batch),
            AnyIndex::Spac(t) => t.batch_delete(batch),
        }
    }

    pub fn knn(&self, query: &Point<D>, k: usize) -> Vec<Neighbor<D>> {
        match self {
            AnyIndex::Porth(t) => t.knn(query, k),
            AnyIndex::Spac(t) => t.knn(query, k),
        }
    }

    pub fn range_count(&self, query: &Aabb<D>) -> usize {
        match self {
            AnyIndex::Porth(t) => t.range_count(query),
            AnyIndex::Spac(t) => t.range_count(query),
        }
    }

    pub fn range_list(&self, query: &Aabb<D>) -> Vec<Point<D>> {
        match self {
            AnyIndex::Porth(t) => t.range_list(query),
            AnyIndex::Spac(t) => t.range_list(query),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyIndex::Porth(t) => t.len(),
            AnyIndex::Spac(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        match self {
            AnyIndex::Porth(t) => t.height(),
            AnyIndex::Spac(t) => t.height(),
        }
    }

    /// (leaf count, largest leaf size).
    pub fn leaf_stats(&self) -> (usize, usize) {
        match self {
            AnyIndex::Porth(t) => t.leaf_stats(),
            AnyIndex::Spac(t) => t.leaf_stats(),
        }
    }

    pub fn audit(&self) -> Result<()> {
        match self {
            AnyIndex::Porth(t) => t.audit(),
            AnyIndex::Spac(t) => t.audit(),
        }
    }

    pub fn canonical_dump(&self) -> String {
        match self {
            AnyIndex::Porth(t) => t.canonical_dump(),
            AnyIndex::Spac(t) => t.canonical_dump(),
        }
    }
}

/// Workload shape for a harness run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Workload {
    /// Bulk build, then queries.
    Build,
    /// Build empty, insert in batches with a mid-schedule query phase.
    IncInsert,
    /// Bulk build, delete in batches with a mid-schedule query phase.
    IncDelete,
    /// Bulk build (untimed as a phase of interest), queries only.
    Query,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Build => "build",
            Workload::IncInsert => "inc-insert",
            Workload::IncDelete => "inc-delete",
            Workload::Query => "query",
        }
    }
}

/// Full configuration of one harness run.
#[derive(Clone, Debug)]
pub struct WorkloadConfig {
    pub index: IndexKind,
    pub workload: Workload,
    /// Batch size as a fraction of the dataset, for incremental workloads.
    pub batch_ratio: f64,
    /// Neighbors per query.
    pub k: usize,
    /// Number of queries per query phase (half nearest-neighbor, half range).
    pub queries: usize,
    /// Target output size of a range query on uniform data.
    pub range_size: usize,
    /// Draw query points uniformly from the domain instead of from the data.
    pub ood: bool,
    /// Run structural audits after the build and after every batch.
    pub audit: bool,
    /// Check every query result against a reference scan of the live points.
    pub verify: bool,
    /// Timed repetitions; above 1, an extra warm-up run precedes them and
    /// reported times are the mean of the timed runs.
    pub repeat: usize,
    /// Seed for query sampling.
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            index: IndexKind::Porth,
            workload: Workload::Build,
            batch_ratio: 0.01,
            k: 10,
            queries: 1000,
            range_size: 100,
            ood: false,
            audit: false,
            verify: false,
            repeat: 1,
            seed: 42,
        }
    }
}

/// One CSV row of a report.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub index: &'static str,
    pub workload: &'static str,
    pub phase: String,
    pub seconds: f64,
    pub n: usize,
    pub height: usize,
    /// Semicolon-separated `key=value` details for the phase.
    pub extra: String,
}

/// Report of one harness run, serializable as CSV.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,workload,phase,seconds,n,height,extra\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{},{}\n",
                r.index, r.workload, r.phase, r.seconds, r.n, r.height, r.extra
            ));
        }
        out
    }
}

/// Runs the configured workload over the dataset and reports per-phase rows.
///
/// Timing excludes verification and audits: each phase is clocked around the
/// index operations alone, then checks run on the side. With `repeat > 1` the
/// whole schedule re-runs; the first (warm-up) run is discarded and the
/// reported seconds are means over the timed runs, with non-timing fields
/// taken from the last run.
pub fn run<const D: usize>(cfg: &WorkloadConfig, ds: &Dataset<D>) -> Result<Report> {
    if !(cfg.batch_ratio > 0.0 && cfg.batch_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "batch ratio must be in (0, 1], got {}",
            cfg.batch_ratio
        )));
    }
    if cfg.repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let runs = if cfg.repeat > 1 { cfg.repeat + 1 } else { 1 };
    let mut kept: Vec<Vec<ReportRow>> = Vec::new();
    for r in 0..runs {
        let rows = run_once(cfg, ds)?;
        if cfg.repeat > 1 && r == 0 {
            continue;
        }
        kept.push(rows);
    }
    let mut rows = kept.pop().expect("at least one timed run");
    for (i, row) in rows.iter_mut().enumerate() {
        let mut total = row.seconds;
        for earlier in &kept {
            total += earlier[i].seconds;
        }
        row.seconds = total / (kept.len() + 1) as f64;
    }
    Ok(Report { rows })
}

fn run_once<const D: usize>(cfg: &WorkloadConfig, ds: &Dataset<D>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mkrow = |phase: &str, seconds: f64, index: &AnyIndex<D>, extra: String| ReportRow {
        index: cfg.index.name(),
        workload: cfg.workload.name(),
        phase: phase.to_string(),
        seconds,
        n: index.len(),
        height: index.height(),
        extra,
    };
    match cfg.workload {
        Workload::Build | Workload::Query => {
            let t0 = Instant::now();
            let index = AnyIndex::build(cfg.index, &ds.points, ds.domain)?;
            let dt = t0.elapsed().as_secs_f64();
            audit_phase(cfg, &index, "build")?;
            let (leaves, max_leaf) = index.leaf_stats();
            rows.push(mkrow(
                "build",
                dt,
                &index,
                format!("leaves={leaves};max_leaf={max_leaf}"),
            ));
            let qrow = query_phase(cfg, &index, &ds.points, ds, "query-final")?;
            rows.push(qrow);
        }
        Workload::IncInsert => {
            let batch = batch_size(ds.points.len(), cfg.batch_ratio);
            let batches: Vec<&[Point<D>]> = ds.points.chunks(batch).collect();
            let half = batches.len().div_ceil(2);
            let mut index = AnyIndex::build(cfg.index, &[], ds.domain)?;
            let (r1, live1) = insert_batches(cfg, &mut index, &batches[..half], 0, "insert-half1")?;
            rows.push(r1);
            rows.push(query_phase(cfg, &index, &ds.points[..live1], ds, "query-mid")?);
            let (r2, live2) =
                insert_batches(cfg, &mut index, &batches[half..], live1, "insert-half2")?;
            rows.push(r2);
            rows.push(query_phase(cfg, &index, &ds.points[..live2], ds, "query-final")?);
        }
        Workload::IncDelete => {
            let t0 = Instant::now();
            let mut index = AnyIndex::build(cfg.index, &ds.points, ds.domain)?;
            let dt = t0.elapsed().as_secs_f64();
            audit_phase(cfg, &index, "build")?;
            let (leaves, max_leaf) = index.leaf_stats();
            rows.push(mkrow(
                "build",
                dt,
                &index,
                format!("leaves={leaves};max_leaf={max_leaf}"),
            ));
            let batch = batch_size(ds.points.len(), cfg.batch_ratio);
            let batches: Vec<&[Point<D>]> = ds.points.chunks(batch).collect();
            let half = batches.len().div_ceil(2);
            let (r1, gone1) = delete_batches(cfg, &mut index, &batches[..half], "delete-half1")?;
            rows.push(r1);
            rows.push(query_phase(cfg, &index, &ds.points[gone1..], ds, "query-mid")?);
            let (r2, gone2) = delete_batches(cfg, &mut index, &batches[half..], "delete-half2")?;
            rows.push(r2);
            rows.push(query_phase(cfg, &index, &ds.points[gone1 + gone2..], ds, "query-final")?);
        }
    }
    Ok(rows)
}

fn batch_size(n: usize, ratio: f64) -> usize {
    (((n as f64) * ratio).round() as usize).max(1)
}

fn audit_phase<const D: usize>(
    cfg: &WorkloadConfig,
    index: &AnyIndex<D>,
    phase: &str,
) -> Result<()> {
    if !cfg.audit {
        return Ok(());
    }
    index.audit().map_err(|e| match e {
        Error::Audit { path, detail } => Error::Audit {
            path: format!("{phase}: {path}"),
            detail,
        },
        other => other,
    })
}

/// Applies a run of insert batches; returns the phase row and the live count.
fn insert_batches<const D: usize>(
    cfg: &WorkloadConfig,
    index: &mut AnyIndex<D>,
    batches: &[&[Point<D>]],
    live_before: usize,
    phase: &str,
) -> Result<(ReportRow, usize)> {
    let mut live = live_before;
    let mut seconds = 0.0;
    let mut peak_leaves = 0usize;
    let mut max_leaf = 0usize;
    for b in batches {
        let t0 = Instant::now();
        index.batch_insert(b)?;
        seconds += t0.elapsed().as_secs_f64();
        live += b.len();
        audit_phase(cfg, index, phase)?;
        let (leaves, biggest) = index.leaf_stats();
        peak_leaves = peak_leaves.max(leaves);
        max_leaf = max_leaf.max(biggest);
    }
    let batch = batches.first().map_or(0, |b| b.len());
    let row = ReportRow {
        index: cfg.index.name(),
        workload: cfg.workload.name(),
        phase: phase.to_string(),
        seconds,
        n: index.len(),
        height: index.height(),
        extra: format!(
            "batches={};batch_size={batch};peak_leaves={peak_leaves};max_leaf={max_leaf}",
            batches.len()
        ),
    };
    Ok((row, live))
}

/// Applies a run of delete batches; returns the phase row and points removed.
fn delete_batches<const D: usize>(
    cfg: &WorkloadConfig,
    index: &mut AnyIndex<D>,
    batches: &[&[Point<D>]],
    phase: &str,
) -> Result<(ReportRow, usize)> {
    let mut gone = 0usize;
    let mut seconds = 0.0;
    let mut peak_leaves = 0usize;
    let mut max_leaf = 0usize;
    for b in batches {
        let t0 = Instant::now();
        index.batch_delete(b)?;
        seconds += t0.elapsed().as_secs_f64();
        gone += b.len();
        audit_phase(cfg, index, phase)?;
        let (leaves, biggest) = index.leaf_stats();
        peak_leaves = peak_leaves.max(leaves);
        max_leaf = max_leaf.max(biggest);
    }
    let batch = batches.first().map_or(0, |b| b.len());
    let row = ReportRow {
        index: cfg.index.name(),
        workload: cfg.workload.name(),
        phase: phase.to_string(),
        seconds,
        n: index.len(),
        height: index.height(),
        extra: format!(
            "batches={};batch_size={batch};peak_leaves={peak_leaves};max_leaf={max_leaf}",
            batches.len()
        ),
    };
    Ok((row, gone))
}

/// Draws the i-th query point: from the live set by default, uniformly from
/// the domain when out-of-distribution queries are requested or no points
/// are live.
fn query_point<const D: usize>(
    cfg: &WorkloadConfig,
    live: &[Point<D>],
    domain: &Aabb<D>,
    i: u64,
) -> Point<D> {
    if cfg.ood || live.is_empty() {
        return Point::new(datagen::draw_point(domain, cfg.seed ^ 0x51EB, i, 0), u64::MAX);
    }
    let j = datagen::mix(cfg.seed ^ 0x51EB, i, 100) as usize % live.len();
    Point::new(live[j].coords, u64::MAX)
}

/// Range box of the configured target output size centered on a query point.
fn range_box<const D: usize>(
    cfg: &WorkloadConfig,
    center: &Point<D>,
    domain: &Aabb<D>,
    live_count: usize,
) -> Aabb<D> {
    let frac = (cfg.range_size as f64 / live_count.max(1) as f64)
        .min(1.0)
        .powf(1.0 / D as f64);
    let mut lo = [0i64; D];
    let mut hi = [0i64; D];
    for d in 0..D {
        let extent = (domain.hi[d] - domain.lo[d]) as f64;
        let side = ((extent * frac) as i64).max(1);
        lo[d] = center.coords[d].saturating_sub(side / 2);
        hi[d] = lo[d] + side;
    }
    Aabb::new(lo, hi)
}

/// Runs one query phase: timed batched queries, then optional verification
/// against reference scans of the live points.
fn query_phase<const D: usize>(
    cfg: &WorkloadConfig,
    index: &AnyIndex<D>,
    live: &[Point<D>],
    ds: &Dataset<D>,
    phase: &str,
) -> Result<ReportRow> {
    let knn_n = cfg.queries / 2;
    let range_n = cfg.queries - knn_n;
    let knn_queries: Vec<Point<D>> =
        (0..knn_n).map(|i| query_point(cfg, live, &ds.domain, i as u64)).collect();
    let range_queries: Vec<Aabb<D>> = (knn_n..knn_n + range_n)
        .map(|i| {
            let c = query_point(cfg, live, &ds.domain, i as u64);
            range_box(cfg, &c, &ds.domain, live.len())
        })
        .collect();

    let t0 = Instant::now();
    let knn_results: Vec<Vec<Neighbor<D>>> =
        knn_queries.par_iter().map(|q| index.knn(q, cfg.k)).collect();
    let knn_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let range_counts: Vec<usize> =
        range_queries.par_iter().map(|b| index.range_count(b)).collect();
    let range_secs = t1.elapsed().as_secs_f64();

    let mut checksum = 0u64;
    for res in &knn_results {
        for nb in res {
            checksum = checksum.wrapping_add(nb.sq_dist as u64).wrapping_add(nb.point.id);
        }
    }
    for c in &range_counts {
        checksum = checksum.wrapping_add(*c as u64);
    }

    if cfg.verify {
        knn_queries
            .par_iter()
            .zip(&knn_results)
            .try_for_each(|(q, got)| -> Result<()> {
                let want = queries::oracle_knn(live, q, cfg.k);
                let got_d: Vec<u128> = got.iter().map(|nb| nb.sq_dist).collect();
                let want_d: Vec<u128> = want.iter().map(|nb| nb.sq_dist).collect();
                if got_d != want_d {
                    return Err(Error::Config(format!(
                        "{phase}: neighbor distances diverge from reference scan at query {q:?}"
                    )));
                }
                Ok(())
            })?;
        range_queries
            .par_iter()
            .zip(&range_counts)
            .try_for_each(|(b, got)| -> Result<()> {
                let mut got_ids: Vec<u64> =
                    index.range_list(b).iter().map(|p| p.id).collect();
                got_ids.sort_unstable();
                let mut want_ids: Vec<u64> =
                    queries::oracle_range_list(live, b).iter().map(|p| p.id).collect();
                want_ids.sort_unstable();
                if got_ids != want_ids || *got != want_ids.len() {
                    return Err(Error::Config(format!(
                        "{phase}: range result diverges from reference scan at box {b:?}"
                    )));
                }
                Ok(())
            })?;
    }

    let knn_qps = if knn_secs > 0.0 { knn_n as f64 / knn_secs } else { 0.0 };
    let range_qps = if range_secs > 0.0 { range_n as f64 / range_secs } else { 0.0 };
    Ok(ReportRow {
        index: cfg.index.name(),
        workload: cfg.workload.name(),
        phase: phase.to_string(),
        seconds: knn_secs + range_secs,
        n: index.len(),
        height: index.height(),
        extra: format!(
            "k={};queries={};ood={};knn_qps={knn_qps:.0};range_qps={range_qps:.0};\
             verified={};checksum={checksum}",
            cfg.k, cfg.queries, cfg.ood, cfg.verify
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_domain, gen_uniform, gen_varden, VardenParams};

    fn tmpfile(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().expect("create temp dir");
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn dataset_file_round_trips_exactly() {
        let ds = gen_uniform::<2>(1_000_000, default_domain(), 7);
        let (_dir, path) = tmpfile("u2.psib");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset::<2>(&path).unwrap();
        assert_eq!(back.domain, ds.domain);
        assert_eq!(back.points, ds.points);
        assert_eq!(read_dataset_dims(&path).unwrap(), 2);

        let copy = path.with_extension("copy");
        write_dataset(&copy, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&copy).unwrap());
    }

    #[test]
    fn dataset_file_round_trips_in_3d() {
        let ds = gen_varden::<3>(5_000, default_domain(), 11, VardenParams::for_domain(&default_domain::<3>()));
        let (_dir, path) = tmpfile("v3.psib");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset::<3>(&path).unwrap();
        assert_eq!(back.points, ds.points);
        assert_eq!(read_dataset_dims(&path).unwrap(), 3);
    }

    #[test]
    fn malformed_dataset_files_report_the_failing_offset() {
        let ds = gen_uniform::<2>(10, default_domain(), 3);
        let (_dir, path) = tmpfile("m.psib");
        write_dataset(&path, &ds).unwrap();
        let good = fs::read(&path).unwrap();

        let expect_parse_at = |bytes: &[u8], offset: u64| {
            fs::write(&path, bytes).unwrap();
            match read_dataset::<2>(&path) {
                Err(Error::Parse { offset: at, .. }) => assert_eq!(at, offset),
                other => panic!("expected parse error at {offset}, got {other:?}"),
            }
        };

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Q';
        expect_parse_at(&bad_magic, 0);

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        expect_parse_at(&bad_version, 4);

        // Dimension mismatch reports at the dims field.
        fs::write(&path, &good).unwrap();
        match read_dataset::<3>(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected dims mismatch, got {other:?}"),
        }

        // Truncation mid-coordinates reports the read position.
        expect_parse_at(&good[..good.len() - 1], (good.len() - 1) as u64 / 8 * 8);

        let mut trailing = good.clone();
        trailing.push(0);
        expect_parse_at(&trailing, good.len() as u64);
    }

    fn smoke_cfg(index: IndexKind, workload: Workload) -> WorkloadConfig {
        WorkloadConfig {
            index,
            workload,
            queries: 40,
            verify: true,
            audit: true,
            ..WorkloadConfig::default()
        }
    }

    #[test]
    fn build_workload_reports_and_verifies() {
        let ds = gen_uniform::<2>(3_000, default_domain(), 21);
        for kind in [IndexKind::Porth, IndexKind::SpacH, IndexKind::SpacZ] {
            let report = run(&smoke_cfg(kind, Workload::Build), &ds).unwrap();
            let phases: Vec<&str> = report.rows.iter().map(|r| r.phase.as_str()).collect();
            assert_eq!(phases, ["build", "query-final"]);
            assert!(report.rows.iter().all(|r| r.n == 3_000));
            let csv = report.to_csv();
            assert!(csv.starts_with("index,workload,phase,seconds,n,height,extra\n"));
            assert_eq!(csv.lines().count(), 3);
        }
    }

    #[test]
    fn incremental_workloads_report_and_verify() {
        let ds = gen_uniform::<2>(2_000, default_domain(), 22);
        for kind in [IndexKind::Porth, IndexKind::SpacH] {
            let report = run(&smoke_cfg(kind, Workload::IncInsert), &ds).unwrap();
            let phases: Vec<&str> = report.rows.iter().map(|r| r.phase.as_str()).collect();
            assert_eq!(phases, ["insert-half1", "query-mid", "insert-half2", "query-final"]);
            assert_eq!(report.rows.last().unwrap().n, 2_000);

            let report = run(&smoke_cfg(kind, Workload::IncDelete), &ds).unwrap();
            let phases: Vec<&str> = report.rows.iter().map(|r| r.phase.as_str()).collect();
            assert_eq!(
                phases,
                ["build", "delete-half1", "query-mid", "delete-half2", "query-final"]
            );
            assert_eq!(report.rows.last().unwrap().n, 0);
        }
    }

    #[test]
    fn out_of_distribution_queries_verify_too() {
        let ds = gen_uniform::<3>(2_000, default_domain(), 23);
        let cfg = WorkloadConfig {
            ood: true,
            k: 5,
            ..smoke_cfg(IndexKind::SpacZ, Workload::Build)
        };
        run(&cfg, &ds).unwrap();
    }

    #[test]
    fn empty_dataset_yields_noop_rows() {
        let ds = gen_uniform::<2>(0, default_domain(), 1);
        for workload in [Workload::Build, Workload::IncInsert, Workload::IncDelete] {
            let report = run(&smoke_cfg(IndexKind::Porth, workload), &ds).unwrap();
            assert!(!report.rows.is_empty());
            assert!(report.rows.iter().all(|r| r.n == 0));
        }
    }

    #[test]
    fn repeat_averages_over_timed_runs() {
        let ds = gen_uniform::<2>(500, default_domain(), 9);
        let cfg = WorkloadConfig {
            repeat: 3,
            queries: 10,
            ..WorkloadConfig::default()
        };
        let report = run(&cfg, &ds).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.seconds >= 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = gen_uniform::<2>(10, default_domain(), 9);
        let bad_ratio = WorkloadConfig { batch_ratio: 0.0, ..WorkloadConfig::default() };
        assert!(matches!(run(&bad_ratio, &ds), Err(Error::Config(_))));
        let bad_repeat = WorkloadConfig { repeat: 0, ..WorkloadConfig::default() };
        assert!(matches!(run(&bad_repeat, &ds), Err(Error::Config(_))));
    }
}
