//! Hard clustering and the tri-factorization algebra built on it:
//! k-means, scaled indicators, association matrices, blocks and
//! reconstruction.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Mat;
use crate::schema::{DType, MatrixId};

pub const KMEANS_RESTARTS: usize = 10;
const LLOYD_MAX_ITER: usize = 300;

/// Hard assignment of `n` instances to `k` clusters, labels `0..k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    /// Clusters left without members.
    pub empty: Vec<usize>,
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::Config(format!("cluster label {} not below k={}", bad, k)));
        }
        let mut counts = vec![0usize; k];
        for &c in &labels {
            counts[c] += 1;
        }
        let empty = (0..k).filter(|&u| counts[u] == 0).collect();
        Ok(ClusterAssignment {
            labels,
            k,
            empty,
            inertia: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Binary `n × k` indicator.
    pub fn indicator(&self) -> Mat {
        let mut m = Mat::zeros(self.labels.len(), self.k);
        for (i, &c) in self.labels.iter().enumerate() {
            m[(i, c)] = 1.0;
        }
        m
    }

    /// Member indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sq_dist(points: &Mat, i: usize, centers: &Mat, c: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..points.ncols() {
        let diff = points[(i, d)] - centers[(c, d)];
        s += diff * diff;
    }
    s
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest(points: &Mat, i: usize, centers: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.nrows() {
        let d = sq_dist(points, i, centers, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &Mat, k: usize, rng: &mut R) -> Mat {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points, i, points, chosen[0]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // rounding can leave target past the last positive weight
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // all remaining points coincide with a chosen center
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, points, next));
        }
    }
    Mat::from_fn(k, points.ncols(), |c, d| points[(chosen[c], d)])
}

/// Result of Lloyd iterations from given starting centers.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub labels: Vec<usize>,
    pub centers: Mat,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub empty: Vec<usize>,
}

/// Lloyd's algorithm. An empty cluster is reseeded once at the point
/// farthest from its own center; if it empties again it stays empty.
pub fn lloyd(points: &Mat, init: Mat) -> LloydRun {
    let n = points.nrows();
    let k = init.nrows();
    let mut centers = init;
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut reseeded = vec![false; k];
    let mut empty = Vec::new();
    for _ in 0..LLOYD_MAX_ITER {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(points, i, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dist[i] = d;
            inertia += d;
        }
        history.push(inertia);

        let mut counts = vec![0usize; k];
        let mut sums = Mat::zeros(k, points.ncols());
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = sums.row_mut(labels[i]);
            row += points.row(i);
        }
        empty.clear();
        let mut reseed = false;
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centers.row_mut(c);
                row.copy_from(&(sums.row(c) / counts[c] as f64));
            } else if !reseeded[c] {
                reseeded[c] = true;
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(far) = far {
                    centers.row_mut(c).copy_from(&points.row(far));
                    dist[far] = 0.0;
                    reseed = true;
                } else {
                    empty.push(c);
                }
            } else {
                empty.push(c);
            }
        }
        if !changed && !reseed {
            break;
        }
    }
    LloydRun {
        labels,
        centers,
        history,
        empty,
    }
}

/// k-means++ seeding and Lloyd iterations, best of
/// [`KMEANS_RESTARTS`] restarts by inertia (earliest wins ties).
pub fn kmeans(points: &Mat, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= n, got k={} n={}",
            k, n
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite point passed to k-means".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(points, k, &mut rng);
        let run = lloyd(points, init);
        let inertia = (0..n)
            .map(|i| sq_dist(points, i, &run.centers, run.labels[i]))
            .sum::<f64>();
        if best.as_ref().map_or(true, |b| inertia < b.inertia) {
            best = Some(ClusterAssignment {
                labels: run.labels,
                k,
                empty: run.empty,
                inertia,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `J_iu = I_iu / sqrt(|π_u|)`; columns of empty clusters stay zero.
pub fn vigorous(a: &ClusterAssignment) -> Mat {
    let members = a.members();
    let mut j = Mat::zeros(a.labels.len(), a.k);
    for (u, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let s = 1.0 / (m.len() as f64).sqrt();
        for &i in m {
            j[(i, u)] = s;
        }
    }
    j
}

/// `A = J_rowᵀ · X · J_col`, summed as `T = X·J_col` over columns of `X`
/// in ascending order, then `J_rowᵀ·T` over rows in ascending order.
pub fn association(x: &Mat, j_row: &Mat, j_col: &Mat) -> Result<Mat> {
    if j_row.nrows() != x.nrows() || j_col.nrows() != x.ncols() {
        return Err(Error::Shape(format!(
            "association: X is {:?}, row indicator {:?}, column indicator {:?}",
            x.shape(),
            j_row.shape(),
            j_col.shape()
        )));
    }
    let (n, m) = x.shape();
    let (ku, kv) = (j_row.ncols(), j_col.ncols());
    let mut t = Mat::zeros(n, kv);
    for i in 0..n {
        for v in 0..kv {
            let mut acc = 0.0;
            for j in 0..m {
                acc += x[(i, j)] * j_col[(j, v)];
            }
            t[(i, v)] = acc;
        }
    }
    let mut a = Mat::zeros(ku, kv);
    for u in 0..ku {
        for v in 0..kv {
            let mut acc = 0.0;
            for i in 0..n {
                acc += j_row[(i, u)] * t[(i, v)];
            }
            a[(u, v)] = acc;
        }
    }
    Ok(a)
}

/// Sub-matrix at the intersection of a row cluster and a column cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub matrix: MatrixId,
    pub u: usize,
    pub v: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Mat,
}

impl Block {
    pub fn extract(x: &Mat, matrix: MatrixId, u: usize, v: usize, rows: &[usize], cols: &[usize]) -> Self {
        Block {
            matrix,
            u,
            v,
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            values: Mat::from_fn(rows.len(), cols.len(), |i, j| x[(rows[i], cols[j])]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.cols.is_empty()
    }
}

/// All `k_row · k_col` blocks of `x`, keyed by `(u, v)`.
pub fn block_partition(
    x: &Mat,
    matrix: MatrixId,
    row: &ClusterAssignment,
    col: &ClusterAssignment,
) -> Result<BTreeMap<(usize, usize), Block>> {
    if row.len() != x.nrows() || col.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "block partition of {:?} with {} row and {} column labels",
            x.shape(),
            row.len(),
            col.len()
        )));
    }
    let rm = row.members();
    let cm = col.members();
    let mut out = BTreeMap::new();
    for (u, r) in rm.iter().enumerate() {
        for (v, c) in cm.iter().enumerate() {
            out.insert((u, v), Block::extract(x, matrix, u, v, r, c));
        }
    }
    Ok(out)
}

/// `U_row · U_colᵀ`, through the logistic function `1/(1+e^{−s})` for
/// binary data. Inner products are summed in ascending dimension order.
pub fn reconstruct(u_row: &Mat, u_col: &Mat, dtype: DType) -> Result<Mat> {
    if u_row.ncols() != u_col.ncols() {
        return Err(Error::Shape(format!(
            "reconstruct: widths {} and {}",
            u_row.ncols(),
            u_col.ncols()
        )));
    }
    let p = Mat::from_fn(u_row.nrows(), u_col.nrows(), |i, j| {
        let mut acc = 0.0;
        for d in 0..u_row.ncols() {
            acc += u_row[(i, d)] * u_col[(j, d)];
        }
        acc
    });
    Ok(match dtype {
        DType::Real => p,
        DType::Binary => p.map(|s| 1.0 / (1.0 + (-s).exp())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs() {
        let p = Mat::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.1, 10.0, 10.0, 10.0, 10.1]);
        let a = kmeans(&p, 2, 1).unwrap();
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
    }

    #[test]
    fn k_equals_n() {
        let p = Mat::from_row_slice(3, 1, &[0.0, 1.0, 5.0]);
        let a = kmeans(&p, 3, 4).unwrap();
        let mut l = a.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
        assert_eq!(a.inertia, 0.0);
        assert!(a.empty.is_empty());
    }

    #[test]
    fn too_many_clusters() {
        assert!(matches!(kmeans(&Mat::zeros(2, 2), 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn vigorous_examples() {
        let a = ClusterAssignment::from_labels(vec![0; 4], 1).unwrap();
        assert_eq!(vigorous(&a), Mat::from_element(4, 1, 0.5));
        let a = ClusterAssignment::from_labels(vec![0, 1, 2], 3).unwrap();
        assert_eq!(vigorous(&a), Mat::identity(3, 3));
        let a = ClusterAssignment::from_labels(vec![0, 0], 2).unwrap();
        assert_eq!(a.empty, vec![1]);
        assert_eq!(vigorous(&a).column(1).sum(), 0.0);
    }

    #[test]
    fn association_all_ones() {
        let a = ClusterAssignment::from_labels(vec![0, 0, 1, 1], 2).unwrap();
        let j = vigorous(&a);
        let got = association(&Mat::from_element(4, 4, 1.0), &j, &j).unwrap();
        assert!((got - Mat::from_element(2, 2, 2.0)).norm() < 1e-12);
        assert!(association(&Mat::zeros(3, 4), &j, &j).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let u = Mat::from_column_slice(2, 1, &[1.0, 2.0]);
        let v = Mat::from_column_slice(2, 1, &[3.0, 4.0]);
        assert_eq!(
            reconstruct(&u, &v, DType::Real).unwrap(),
            Mat::from_row_slice(2, 2, &[3.0, 4.0, 6.0, 8.0])
        );
        let b = reconstruct(&Mat::identity(2, 2), &Mat::identity(2, 2), DType::Binary).unwrap();
        assert_eq!(b[(0, 1)], 0.5);
        assert!(reconstruct(&u, &Mat::zeros(2, 2), DType::Real).is_err());
    }

    #[test]
    fn empty_cluster_blocks_have_no_rows() {
        let x = Mat::from_element(3, 2, 1.0);
        let r = ClusterAssignment::from_labels(vec![0, 0, 0], 2).unwrap();
        let c = ClusterAssignment::from_labels(vec![0, 0], 1).unwrap();
        let b = block_partition(&x, 0, &r, &c).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[&(1, 0)].values.nrows(), 0);
        assert_eq!(b[&(0, 0)].values, x);
    }
}
