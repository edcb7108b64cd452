//! Classical Isomap on a precomputed dissimilarity matrix, plus the landmark
//! (Nystrom) extension so queries outside the database can still be embedded.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::charting::encoder::Embedding;
use crate::error::{Error, Result};
use crate::features::DissimilarityMatrix;

/// Isomap fit artifacts: database embeddings plus everything needed to embed
/// an out-of-sample query from its input-metric distances to the database.
#[derive(Clone, Debug)]
pub struct IsomapChart {
    pub embeddings: Vec<Embedding>,
    pub k_neighbors: usize,
    /// Top eigenvalues of the double-centered squared-geodesic matrix.
    eigvals: Vec<f64>,
    /// Matching eigenvectors, each of length n.
    eigvecs: Vec<Vec<f64>>,
    /// Geodesic distances between database samples.
    geo: DissimilarityMatrix,
    /// Row means of the squared geodesic matrix.
    row_means_sq: Vec<f64>,
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.node.cmp(&other.node))
    }
}

/// k smallest off-diagonal entries of one distance row, ties by lower index.
fn k_nearest(row: &[f64], skip: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(HeapEntry { dist: 0.0, node: source }));
    while let Some(Reverse(HeapEntry { dist: d, node })) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adj[node] {
            let cand = d + w;
            if cand < dist[next] {
                dist[next] = cand;
                heap.push(Reverse(HeapEntry { dist: cand, node: next }));
            }
        }
    }
    dist
}

fn component_sizes(adj: &[Vec<(usize, f64)>]) -> Vec<usize> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0;
        while let Some(u) = stack.pop() {
            size += 1;
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

impl IsomapChart {
    /// Classical Isomap: kNN graph, all-pairs shortest paths, then classical
    /// MDS via the top eigenvectors of the double-centered squared-geodesic
    /// matrix. Errors with component sizes if the graph is disconnected.
    pub fn fit(d: &DissimilarityMatrix, k_neighbors: usize, d_out: usize) -> Result<Self> {
        let n = d.n;
        if n < 2 {
            return Err(Error::Config("isomap needs >= 2 samples".into()));
        }
        if k_neighbors < 1 || k_neighbors >= n {
            return Err(Error::Config(format!(
                "k_neighbors must be in [1, {}], got {k_neighbors}",
                n - 1
            )));
        }
        if d_out < 1 {
            return Err(Error::Config("d_out must be >= 1".into()));
        }

        // Symmetrized kNN graph.
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in k_nearest(d.row(i), i, k_neighbors) {
                if !adj[i].iter().any(|&(v, _)| v == j) {
                    adj[i].push((j, d.at(i, j)));
                }
                if !adj[j].iter().any(|&(v, _)| v == i) {
                    adj[j].push((i, d.at(i, j)));
                }
            }
        }

        let mut geo = DissimilarityMatrix::zeros(n);
        for i in 0..n {
            let row = dijkstra(&adj, i);
            if row.iter().any(|v| v.is_infinite()) {
                return Err(Error::DisconnectedGraph(component_sizes(&adj)));
            }
            geo.data[i * n..(i + 1) * n].copy_from_slice(&row);
        }

        // Double-centered B = -1/2 J G^2 J.
        let sq = |v: f64| v * v;
        let row_means_sq: Vec<f64> = (0..n)
            .map(|i| geo.row(i).iter().map(|&v| sq(v)).sum::<f64>() / n as f64)
            .collect();
        let total_mean = row_means_sq.iter().sum::<f64>() / n as f64;
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] = -0.5 * (sq(geo.at(i, j)) - row_means_sq[i] - row_means_sq[j] + total_mean);
            }
        }

        let eig = SymmetricEigen::new(b);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
        let keep: Vec<usize> = order.into_iter().take(d_out).collect();

        let mut eigvals = Vec::with_capacity(d_out);
        let mut eigvecs = Vec::with_capacity(d_out);
        for &k in &keep {
            let lambda = eig.eigenvalues[k].max(0.0);
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // Canonical sign: the entry with the largest magnitude is positive.
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if v[pivot] < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
            eigvals.push(lambda);
            eigvecs.push(v);
        }

        let embeddings = (0..n)
            .map(|i| {
                Embedding(
                    (0..d_out)
                        .map(|k| eigvecs[k][i] * eigvals[k].sqrt())
                        .collect(),
                )
            })
            .collect();

        Ok(Self {
            embeddings,
            k_neighbors,
            eigvals,
            eigvecs,
            geo,
            row_means_sq,
        })
    }

    /// Embed an out-of-sample query from its input-metric distances to every
    /// database sample: geodesics are estimated through the query's k nearest
    /// database neighbors, then the landmark-MDS projection is applied.
    pub fn extend(&self, d_query: &[f64]) -> Result<Embedding> {
        let n = self.geo.n;
        if d_query.len() != n {
            return Err(Error::Config(format!(
                "query distance vector has {} entries, database has {n}",
                d_query.len()
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| d_query[a].total_cmp(&d_query[b]).then(a.cmp(&b)));
        let anchors = &idx[..self.k_neighbors.min(n)];
        let mut delta_sq = vec![0.0; n];
        for i in 0..n {
            let mut best = f64::INFINITY;
            for &j in anchors {
                best = best.min(d_query[j] + self.geo.at(j, i));
            }
            delta_sq[i] = best * best;
        }
        let coords = (0..self.eigvals.len())
            .map(|k| {
                if self.eigvals[k] <= 0.0 {
                    return 0.0;
                }
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.eigvecs[k][i] * (self.row_means_sq[i] - delta_sq[i]);
                }
                acc / (2.0 * self.eigvals[k].sqrt())
            })
            .collect();
        Ok(Embedding(coords))
    }
}

/// Classical Isomap embeddings of the database samples.
pub fn isomap_chart(
    pairwise_d: &DissimilarityMatrix,
    k_neighbors: usize,
    d_out: usize,
) -> Result<Vec<Embedding>> {
    Ok(IsomapChart::fit(pairwise_d, k_neighbors, d_out)?.embeddings)
}

/// Residual of the best orthogonal alignment (rotation/reflection plus
/// translation) mapping `a` onto `b`: ||centered(a) R - centered(b)||_F.
pub fn procrustes_residual(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Config(format!(
            "procrustes needs equal nonempty sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].dim();
    if b[0].dim() != d {
        return Err(Error::Config("procrustes: dimension mismatch".into()));
    }
    let n = a.len();
    let center = |pts: &[Embedding]| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, d);
        let mut mean = vec![0.0; d];
        for p in pts {
            for (k, v) in p.0.iter().enumerate() {
                mean[k] += v / n as f64;
            }
        }
        for (i, p) in pts.iter().enumerate() {
            for (k, v) in p.0.iter().enumerate() {
                m[(i, k)] = v - mean[k];
            }
        }
        m
    };
    let ma = center(a);
    let mb = center(b);
    let svd = (ma.transpose() * &mb).svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let r = u * vt;
    Ok((ma * r - mb).norm())
}
