//! Spatial primitives over raw coordinates.
//!
//! Every tie (equal distances in k-NN, equal min-distances in FPS) is broken
//! by ascending point index.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use crate::error::{domain, Error, Result};
use crate::tensor::Tensor;

/// Squared distance below which interpolation snaps to an anchor.
pub const EXACT_MATCH_SQ: f64 = 1e-20;

pub type Point = [f64; 3];

/// N points with optional per-point labels and an optional shape category.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point>,
    labels: Option<Vec<usize>>,
    category: Option<usize>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(domain("a point cloud needs at least one point"));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(domain("non-finite coordinate"));
        }
        Ok(Self {
            coords,
            labels: None,
            category: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(domain(format!("{} labels for {} points", labels.len(), self.coords.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = Some(category);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn category(&self) -> Option<usize> {
        self.category
    }

    /// `N x 3` tensor of the coordinates.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), 3], self.coords.iter().flatten().copied().collect()).expect("N x 3")
    }

    /// Applies `f` to every point, keeping labels.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        let mut out = Self::new(self.coords.iter().map(|&p| f(p)).collect())?;
        out.labels = self.labels.clone();
        out.category = self.category;
        Ok(out)
    }

    /// Reorders points (and labels) so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut out = Self::new(perm.iter().map(|&i| self.coords[i]).collect())?;
        out.labels = self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect());
        out.category = self.category;
        Ok(out)
    }

    /// Parses the XYZL text format: `x y z [label]` per line, `#` comments,
    /// and an optional `# category <c>` header line.
    pub fn read_xyzl(reader: impl BufRead) -> Result<Self> {
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        let mut category = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let body = match line.split_once('#') {
                Some((body, comment)) => {
                    let mut words = comment.split_whitespace();
                    if words.next() == Some("category") {
                        let c = words.next().and_then(|w| w.parse().ok());
                        category = Some(c.ok_or_else(|| fmt_err(lineno, "bad category header"))?);
                    }
                    body
                }
                None => line.as_str(),
            };
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if !(3..=4).contains(&fields.len()) {
                return Err(fmt_err(lineno, "expected `x y z [label]`"));
            }
            let mut p: Point = [0.0; 3];
            for (k, f) in fields[..3].iter().enumerate() {
                p[k] = f.parse().map_err(|_| fmt_err(lineno, "bad coordinate"))?;
                if !p[k].is_finite() {
                    return Err(fmt_err(lineno, "non-finite coordinate"));
                }
            }
            coords.push(p);
            if let Some(l) = fields.get(3) {
                labels.push(l.parse().map_err(|_| fmt_err(lineno, "bad label"))?);
            }
        }
        if !labels.is_empty() && labels.len() != coords.len() {
            return Err(Error::Format("labels must be given on every line or none".into()));
        }
        let mut cloud = Self::new(coords)?;
        if !labels.is_empty() {
            cloud = cloud.with_labels(labels)?;
        }
        cloud.category = category;
        Ok(cloud)
    }

    pub fn write_xyzl(&self, mut w: impl Write) -> Result<()> {
        if let Some(c) = self.category {
            writeln!(w, "# category {c}")?;
        }
        for (i, p) in self.coords.iter().enumerate() {
            match &self.labels {
                Some(l) => writeln!(w, "{} {} {} {}", p[0], p[1], p[2], l[i])?,
                None => writeln!(w, "{} {} {}", p[0], p[1], p[2])?,
            }
        }
        Ok(())
    }
}

fn fmt_err(lineno: usize, msg: &str) -> Error {
    Error::Format(format!("line {}: {msg}", lineno + 1))
}

/// `N x k` table of neighbor indices; row `i` starts with `i` itself and
/// continues in non-decreasing distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    idx: Vec<usize>,
    k: usize,
}

impl NeighborIndex {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(domain("neighbor rows must share a positive length"));
        }
        Ok(Self { idx: rows.concat(), k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.idx.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.idx
    }

    /// Concatenates per-cloud tables, shifting cloud `b` by `b * n`.
    pub fn stack(tables: &[NeighborIndex], n: usize) -> Result<Self> {
        let k = tables.first().map_or(0, |t| t.k);
        if tables.iter().any(|t| t.k != k || t.len() != n) {
            return Err(domain("stacked neighbor tables must share k and N"));
        }
        let idx = tables
            .iter()
            .enumerate()
            .flat_map(|(b, t)| t.idx.iter().map(move |&j| j + b * n))
            .collect();
        Ok(Self { idx, k })
    }
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Symmetric `N x N` matrix of squared distances (row-major).
pub fn pairwise_sq_dist(coords: &[Point]) -> Vec<f64> {
    let n = coords.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&coords[i], &coords[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` entries of `cands` with smallest `(distance, index)`, ascending.
fn select_k(cands: &mut Vec<(f64, usize)>, k: usize) {
    if k < cands.len() {
        if k > 0 {
            cands.select_nth_unstable_by(k - 1, by_dist_then_index);
        }
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_dist_then_index);
}

/// Self-first k-NN from a row of squared distances.
fn knn_row(i: usize, dist_row: impl Iterator<Item = f64>, k: usize, buf: &mut Vec<(f64, usize)>) -> Vec<usize> {
    buf.clear();
    buf.extend(dist_row.enumerate().filter(|&(j, _)| j != i).map(|(j, d)| (d, j)));
    select_k(buf, k - 1);
    std::iter::once(i).chain(buf.iter().map(|&(_, j)| j)).collect()
}

/// k nearest neighbors of every point (self first).
pub fn knn(coords: &[Point], k: usize) -> Result<NeighborIndex> {
    let n = coords.len();
    check_k(k, n)?;
    let mut buf = Vec::with_capacity(n);
    let mut idx = Vec::with_capacity(n * k);
    for (i, p) in coords.iter().enumerate() {
        idx.extend(knn_row(i, coords.iter().map(|q| sq_dist(p, q)), k, &mut buf));
    }
    Ok(NeighborIndex { idx, k })
}

/// k nearest neighbors over `N x dim` row-major feature vectors.
pub fn knn_features(rows: &[f64], dim: usize, k: usize) -> Result<NeighborIndex> {
    let n = rows.len() / dim;
    check_k(k, n)?;
    let norms: Vec<f64> = rows.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
    // |a|^2 + |b|^2 - 2 a.b with the Gram matrix from one product
    let gram = crate::tensor::gram(rows, n, dim);
    let mut buf = Vec::with_capacity(n);
    let mut idx = Vec::with_capacity(n * k);
    for i in 0..n {
        let g = &gram[i * n..(i + 1) * n];
        let row = g
            .iter()
            .zip(&norms)
            .map(|(dot, nj)| (norms[i] + nj - 2.0 * dot).max(0.0));
        idx.extend(knn_row(i, row, k, &mut buf));
    }
    Ok(NeighborIndex { idx, k })
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(domain(format!("k = {k} must lie in [1, {n}]")));
    }
    Ok(())
}

/// The `k` points nearest to `coords[center]`, starting with `center`.
pub fn region_members(coords: &[Point], center: usize, k: usize) -> Result<Vec<usize>> {
    check_k(k, coords.len())?;
    let mut buf = Vec::with_capacity(coords.len());
    let c = coords[center];
    Ok(knn_row(center, coords.iter().map(|q| sq_dist(&c, q)), k, &mut buf))
}

/// Indices of the `k` anchors nearest to `query`, ascending by distance.
pub fn nearest_anchors(query: &Point, anchors: &[Point], k: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = anchors.iter().enumerate().map(|(j, a)| (sq_dist(query, a), j)).collect();
    select_k(&mut cands, k);
    cands.into_iter().map(|(_, j)| j).collect()
}

/// Farthest point sampling: starts at `seed`, then repeatedly takes the
/// point with the largest distance to the chosen set.
pub fn fps(coords: &[Point], s: usize, seed: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if s == 0 || s > n {
        return Err(domain(format!("S = {s} must lie in [1, {n}]")));
    }
    if seed >= n {
        return Err(Error::Index { index: seed, extent: n });
    }
    let mut chosen = Vec::with_capacity(s);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = seed;
    for _ in 0..s {
        chosen.push(cur);
        taken[cur] = true;
        let c = coords[cur];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, p) in coords.iter().enumerate() {
            let d = sq_dist(&c, p);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if !taken[j] && min_d[j] > best.0 {
                best = (min_d[j], j);
            }
        }
        cur = best.1;
    }
    Ok(chosen)
}

/// Inverse squared-distance weights of `query` against three anchors,
/// normalized to sum to one. Snaps to a one-hot on the nearest anchor when
/// some anchor lies within `1e-10`.
pub fn idw_weights(query: &Point, anchors: &[Point; 3]) -> [f64; 3] {
    let d = anchors.map(|a| sq_dist(query, &a));
    let nearest = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))).expect("three anchors");
    if d[nearest] < EXACT_MATCH_SQ {
        let mut w = [0.0; 3];
        w[nearest] = 1.0;
        return w;
    }
    let lam = d.map(|v| 1.0 / v);
    let total: f64 = lam.iter().sum();
    lam.map(|l| l / total)
}
