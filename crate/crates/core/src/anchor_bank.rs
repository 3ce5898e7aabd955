//! Prototypical anchor bank: a greedy k-center coreset of normal feature
//! vectors, queried for per-cell nearest-anchor distances.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{EmbeddingGrid, Space};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::stream;

const MAGIC: &[u8; 8] = b"ANMBANK\0";
const VERSION: u32 = 1;
/// Pools above this size are selected in a random projection.
pub const EXACT_POOL_LIMIT: usize = 100_000;
const PROJECTION_DIM: usize = 128;
const ROW_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct BankMeta {
    pub seed: u64,
    pub source_ids: Vec<String>,
    pub ratio: f64,
    pub cap: usize,
    pub pool_size: usize,
    /// Pool index of each anchor, in selection order.
    pub indices: Vec<usize>,
    pub space: Space,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorBank {
    anchors: Array2<f32>,
    anchors64: Array2<f64>,
    norms: Array1<f64>,
    meta: BankMeta,
}

/// Nearest anchor of one query cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub index: usize,
    pub distance: f64,
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Anchor count for a pool: `min(ceil(ratio * pool), cap)`, at least 1.
pub fn coreset_size(pool: usize, ratio: f64, cap: usize) -> usize {
    ((ratio * pool as f64).ceil() as usize).min(cap).clamp(1, pool.max(1))
}

/// Greedy k-center selection over the rows of `pool`, starting at `start`.
/// Returns pool indices in selection order. Ties go to the lowest index.
pub fn greedy_k_center(pool: ArrayView2<f64>, k: usize, start: usize, exec: Exec) -> Vec<usize> {
    let n = pool.nrows();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(k);
    let mut cur = start;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == k {
            break;
        }
        let c = pool.row(cur);
        exec.for_chunks_mut(&mut min_d, ROW_CHUNK, |ci, chunk| {
            for (j, d) in chunk.iter_mut().enumerate() {
                let i = ci * ROW_CHUNK + j;
                let v = sq_dist(pool.row(i), c);
                if v < *d {
                    *d = v;
                }
            }
        });
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !taken[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        cur = best;
    }
    chosen
}

impl AnchorBank {
    fn from_parts(anchors: Array2<f32>, meta: BankMeta) -> Result<Self> {
        if anchors.nrows() == 0 || anchors.ncols() == 0 {
            return Err(Error::EmptyPool);
        }
        if anchors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anchor bank".into()));
        }
        let anchors64 = anchors.mapv(|v| v as f64);
        let norms = anchors64.map_axis(Axis(1), |r| r.dot(&r));
        Ok(AnchorBank {
            anchors,
            anchors64,
            norms,
            meta,
        })
    }

    /// Bank made of the given vectors, without coreset selection.
    pub fn from_vectors(anchors: Array2<f32>, space: Space) -> Result<Self> {
        let n = anchors.nrows();
        Self::from_parts(
            anchors,
            BankMeta {
                seed: 0,
                source_ids: Vec::new(),
                ratio: 1.0,
                cap: n,
                pool_size: n,
                indices: (0..n).collect(),
                space,
            },
        )
    }

    /// Flatten every cell of `grids` into a pool and keep a greedy k-center
    /// coreset of `min(ceil(ratio * pool), cap)` vectors.
    pub fn build(
        grids: &[EmbeddingGrid],
        source_ids: &[String],
        ratio: f64,
        cap: usize,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("coreset ratio must be in (0, 1], got {ratio}")));
        }
        if cap == 0 {
            return Err(Error::Config("coreset cap must be positive".into()));
        }
        let first = grids.first().ok_or(Error::EmptyPool)?;
        let dim = first.dim();
        if let Some(g) = grids.iter().find(|g| g.dim() != dim) {
            return Err(Error::DimMismatch {
                context: "bank source grids",
                expected: dim,
                actual: g.dim(),
            });
        }
        let views: Vec<_> = grids.iter().map(|g| g.cells()).collect();
        let pool = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        let n = pool.nrows();
        if n == 0 {
            return Err(Error::EmptyPool);
        }
        let k = coreset_size(n, ratio, cap);
        let mut rng = stream(seed, &[0xba4c]);
        let start = rng.random_range(0..n);
        let indices = if n > EXACT_POOL_LIMIT && dim > PROJECTION_DIM {
            let proj = Array2::from_shape_fn((dim, PROJECTION_DIM), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (PROJECTION_DIM as f64).sqrt()
            });
            greedy_k_center(pool.dot(&proj).view(), k, start, exec)
        } else {
            greedy_k_center(pool.view(), k, start, exec)
        };
        let anchors = Array2::from_shape_fn((k, dim), |(i, d)| pool[[indices[i], d]] as f32);
        Self::from_parts(
            anchors,
            BankMeta {
                seed,
                source_ids: source_ids.to_vec(),
                ratio,
                cap,
                pool_size: n,
                indices,
                space: first.space(),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn anchors(&self) -> &Array2<f32> {
        &self.anchors
    }

    pub fn anchors_f64(&self) -> &Array2<f64> {
        &self.anchors64
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimMismatch {
                context: "anchor bank query",
                expected: self.dim(),
                actual: d,
            });
        }
        Ok(())
    }

    /// Nearest anchor for every row of `cells`.
    ///
    /// Candidates are ranked with the expanded-norm identity; the winner's
    /// distance is then recomputed directly so exact matches give exactly 0.
    pub fn nearest_cells(&self, cells: ArrayView2<f64>, exec: Exec) -> Result<Vec<Nearest>> {
        self.check_dim(cells.ncols())?;
        let n = cells.nrows();
        let chunks = n.div_ceil(ROW_CHUNK);
        let parts = exec.map_range(chunks, |c| {
            let rows = cells.slice(s![c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n), ..]);
            let cross = rows.dot(&self.anchors64.t());
            rows.outer_iter()
                .zip(cross.outer_iter())
                .map(|(v, xr)| {
                    let mut best = 0;
                    let mut best_v = f64::INFINITY;
                    for (j, (&x, &an)) in xr.iter().zip(self.norms.iter()).enumerate() {
                        let score = an - 2.0 * x;
                        if score < best_v {
                            best_v = score;
                            best = j;
                        }
                    }
                    Nearest {
                        index: best,
                        distance: sq_dist(v, self.anchors64.row(best)).sqrt(),
                    }
                })
                .collect::<Vec<_>>()
        });
        Ok(parts.into_iter().flatten().collect())
    }

    /// Per-cell Euclidean distance to the closest anchor, as an `L_H x L_W` grid.
    pub fn nearest_distance(&self, grid: &EmbeddingGrid) -> Result<Array2<f64>> {
        let near = self.nearest_cells(grid.cells(), Exec::default())?;
        Ok(Array2::from_shape_vec(
            (grid.height(), grid.width()),
            near.into_iter().map(|n| n.distance).collect(),
        )
        .expect("cell count"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.meta;
        let mut buf = Vec::with_capacity(64 + self.anchors.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&m.seed.to_le_bytes());
        buf.extend_from_slice(&(m.pool_size as u64).to_le_bytes());
        buf.extend_from_slice(&m.ratio.to_le_bytes());
        buf.extend_from_slice(&(m.cap as u64).to_le_bytes());
        buf.push(match m.space {
            Space::Raw => 0,
            Space::Adapted => 1,
        });
        buf.extend_from_slice(&(m.source_ids.len() as u32).to_le_bytes());
        for id in &m.source_ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for &i in &m.indices {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for v in self.anchors.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader { buf: &bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported bank version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let seed = r.u64()?;
        let pool_size = r.u64()? as usize;
        let ratio = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let cap = r.u64()? as usize;
        let space = match r.take(1)?[0] {
            0 => Space::Raw,
            1 => Space::Adapted,
            other => return Err(Error::format(path, format!("bad space tag {other}"))),
        };
        let n_ids = r.u32()? as usize;
        let mut source_ids = Vec::with_capacity(n_ids.min(1 << 16));
        for _ in 0..n_ids {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "source id is not utf-8"))?;
            source_ids.push(s.to_string());
        }
        let mut indices = Vec::with_capacity(count);
        for _ in 0..count {
            indices.push(r.u64()? as usize);
        }
        let raw = r.take(count * dim * 4)?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(Error::format(path, "duplicate anchor indices"));
        }
        let anchors = Array2::from_shape_vec((count, dim), data).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_parts(
            anchors,
            BankMeta {
                seed,
                source_ids,
                ratio,
                cap,
                pool_size,
                indices,
                space,
            },
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let out = &self.buf[self.pos..e];
                self.pos = e;
                Ok(out)
            }
            None => Err(Error::format(self.path, "truncated file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(cells: Array2<f64>, h: usize, w: usize) -> EmbeddingGrid {
        EmbeddingGrid::from_cells(cells, h, w, 8, Space::Raw).unwrap()
    }

    fn random_cells(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[]);
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn one_dimensional_hand_run() {
        let pool = array![[0.0], [1.0], [10.0]];
        assert_eq!(greedy_k_center(pool.view(), 2, 0, Exec::Sequential), vec![0, 2]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let cells = random_cells(12, 3, 1);
        let bank = AnchorBank::build(&[grid(cells.clone(), 3, 4)], &[], 1.0, 100, 7, Exec::default()).unwrap();
        assert_eq!(bank.len(), 12);
        let mut idx = bank.meta().indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn size_formula_and_cap() {
        assert_eq!(coreset_size(1000, 0.1, 2048), 100);
        assert_eq!(coreset_size(1001, 0.1, 2048), 101);
        assert_eq!(coreset_size(100_000, 0.1, 2048), 2048);
        assert_eq!(coreset_size(3, 0.01, 10), 1);
    }

    #[test]
    fn empty_pool_and_bad_ratio() {
        assert!(matches!(
            AnchorBank::build(&[], &[], 0.5, 10, 0, Exec::default()),
            Err(Error::EmptyPool)
        ));
        let g = grid(random_cells(4, 2, 0), 2, 2);
        assert!(AnchorBank::build(&[g.clone()], &[], 0.0, 10, 0, Exec::default()).is_err());
        assert!(AnchorBank::build(&[g], &[], 1.5, 10, 0, Exec::default()).is_err());
    }

    #[test]
    fn membership_gives_zero_distance() {
        let cells = random_cells(6, 5, 3);
        let bank = AnchorBank::from_vectors(cells.mapv(|v| v as f32), Space::Raw).unwrap();
        let q = bank.anchors_f64().slice(s![0..4, ..]).to_owned();
        let d = bank.nearest_distance(&grid(q, 2, 2)).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_anchor_distance() {
        let bank = AnchorBank::from_vectors(array![[1.0f32, 2.0, 2.0]], Space::Raw).unwrap();
        let d = bank.nearest_distance(&grid(array![[4.0, 6.0, 2.0]], 1, 1)).unwrap();
        assert_eq!(d[[0, 0]], 5.0);
    }

    #[test]
    fn matches_brute_force_min() {
        let bank = AnchorBank::from_vectors(random_cells(8, 4, 10).mapv(|v| v as f32), Space::Raw).unwrap();
        let q = random_cells(4, 4, 11);
        let d = bank.nearest_distance(&grid(q.clone(), 2, 2)).unwrap();
        for c in 0..4 {
            let mut best = f64::INFINITY;
            for a in 0..8 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += (q[[c, k]] - bank.anchors()[[a, k]] as f64).powi(2);
                }
                best = best.min(s.sqrt());
            }
            assert!((d[[c / 2, c % 2]] - best).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_fatal() {
        let bank = AnchorBank::from_vectors(array![[1.0f32, 2.0]], Space::Raw).unwrap();
        assert!(bank.nearest_distance(&grid(array![[1.0, 2.0, 3.0]], 1, 1)).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.bin");
        let g = grid(random_cells(20, 3, 5), 4, 5);
        let bank = AnchorBank::build(&[g], &["good/a".into()], 0.3, 100, 99, Exec::default()).unwrap();
        bank.save(&p).unwrap();
        let back = AnchorBank::load(&p).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.meta().seed, 99);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(AnchorBank::load(&p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(AnchorBank::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let cells = random_cells(300, 6, 8);
        let a = greedy_k_center(cells.view(), 40, 3, Exec::Sequential);
        let b = greedy_k_center(cells.view(), 40, 3, Exec::Parallel);
        assert_eq!(a, b);
        let bank = AnchorBank::from_vectors(random_cells(30, 6, 2).mapv(|v| v as f32), Space::Raw).unwrap();
        assert_eq!(
            bank.nearest_cells(cells.view(), Exec::Sequential).unwrap(),
            bank.nearest_cells(cells.view(), Exec::Parallel).unwrap()
        );
    }

    fn query_grid(v: Vec<f64>) -> EmbeddingGrid {
        EmbeddingGrid::new(Array3::from_shape_vec((1, 1, v.len()), v).unwrap(), 1, Space::Raw).unwrap()
    }

    proptest! {
        #[test]
        fn nearest_distance_is_one_lipschitz(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            seed in 0u64..1000,
        ) {
            let bank = AnchorBank::from_vectors(random_cells(5, 3, seed).mapv(|v| v as f32), Space::Raw).unwrap();
            let da = bank.nearest_distance(&query_grid(a.clone())).unwrap()[[0, 0]];
            let db = bank.nearest_distance(&query_grid(b.clone())).unwrap()[[0, 0]];
            let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!((da - db).abs() <= gap + 1e-9);
        }

        #[test]
        fn adding_an_anchor_never_increases_distance(seed in 0u64..1000, extra in proptest::collection::vec(-1.0f32..1.0, 3)) {
            let base = random_cells(4, 3, seed).mapv(|v| v as f32);
            let mut grown = base.clone();
            grown.push_row(ndarray::ArrayView1::from(&extra)).unwrap();
            let q = grid(random_cells(6, 3, seed + 1), 2, 3);
            let d0 = AnchorBank::from_vectors(base, Space::Raw).unwrap().nearest_distance(&q).unwrap();
            let d1 = AnchorBank::from_vectors(grown, Space::Raw).unwrap().nearest_distance(&q).unwrap();
            prop_assert!(d0.iter().zip(d1.iter()).all(|(a, b)| b <= a));
        }

        #[test]
        fn coverage_radius_bounds_every_point(seed in 0u64..500, k in 1usize..20) {
            let pool = random_cells(40, 3, seed);
            let sel = greedy_k_center(pool.view(), k, 0, Exec::Sequential);
            let radius = |set: &[usize]| (0..40).map(|i| {
                set.iter().map(|&j| sq_dist(pool.row(i), pool.row(j)).sqrt()).fold(f64::INFINITY, f64::min)
            }).fold(0.0, f64::max);
            // the covering radius of k anchors never exceeds that of the first k-1
            if k > 1 {
                prop_assert!(radius(&sel) <= radius(&sel[..k - 1]) + 1e-12);
            }
        }
    }
}
