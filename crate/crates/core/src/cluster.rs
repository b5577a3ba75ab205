//! Complete-linkage agglomerative clustering on cosine distance.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{LluError, Result};
use crate::locality::AnchorSet;
use crate::vector::{check_dim, dot, normalize, UnitVector};

/// Cluster representatives plus, for every input point, the index of the
/// representative it was merged into.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub anchors: AnchorSet,
    pub assignment: Vec<usize>,
}

impl Clustering {
    pub fn into_anchors(self) -> AnchorSet {
        self.anchors
    }
}

fn cosine_distance(a: &UnitVector, b: &UnitVector) -> f64 {
    1.0 - dot(a.as_slice(), b.as_slice())
}

fn validate(points: &[UnitVector], target_k: usize) -> Result<usize> {
    let first = points.first().ok_or(LluError::EmptyInput)?;
    if target_k == 0 {
        return Err(LluError::InvalidConfig("target cluster count must be >= 1".into()));
    }
    for p in points {
        check_dim(first.dim(), p.dim())?;
    }
    Ok(first.dim())
}

/// Normalized means of `clusters` (each a sorted member list, clusters ordered
/// by smallest member) and the matching point-to-cluster map.
fn finish(points: &[UnitVector], dim: usize, clusters: &[Vec<usize>]) -> Result<Clustering> {
    let mut assignment = vec![0; points.len()];
    let mut anchors = Vec::with_capacity(clusters.len());
    for (c, members) in clusters.iter().enumerate() {
        let mut sum = vec![0.0; dim];
        for &m in members {
            assignment[m] = c;
            for (s, x) in sum.iter_mut().zip(points[m].as_slice()) {
                *s += x;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / members.len() as f64).collect();
        anchors.push(normalize(&mean).map_err(|_| LluError::DegenerateCluster { cluster: c })?);
    }
    Ok(Clustering {
        anchors: AnchorSet::new(dim, anchors)?,
        assignment,
    })
}

fn passthrough(points: &[UnitVector], dim: usize) -> Result<Clustering> {
    Ok(Clustering {
        anchors: AnchorSet::new(dim, points.to_vec())?,
        assignment: (0..points.len()).collect(),
    })
}

/// Upper-triangular pairwise distance storage.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    fn build(points: &[UnitVector]) -> Self {
        let n = points.len();
        let mut data = vec![0.0; n * (n - 1) / 2];
        let mut rows: Vec<(usize, &mut [f64])> = Vec::with_capacity(n);
        let mut rest = data.as_mut_slice();
        for i in 0..n.saturating_sub(1) {
            let (row, tail) = rest.split_at_mut(n - i - 1);
            rows.push((i, row));
            rest = tail;
        }
        rows.into_par_iter().for_each(|(i, row)| {
            for (off, slot) in row.iter_mut().enumerate() {
                *slot = cosine_distance(&points[i], &points[i + 1 + off]);
            }
        });
        Condensed { n, data }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.data[idx] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    cluster: usize,
    version: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.cluster.cmp(&other.cluster))
            .then(self.version.cmp(&other.version))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Merges `points` down to `target_k` clusters by complete linkage
/// (`max` pairwise cosine distance). Clusters are named by their smallest
/// member index; among equal linkages the pair with the lexicographically
/// smallest `(min name, max name)` merges first. Representatives are the
/// normalized member means, ordered by cluster name.
pub fn agglomerate(points: &[UnitVector], target_k: usize) -> Result<Clustering> {
    let dim = validate(points, target_k)?;
    let n = points.len();
    if n <= target_k {
        return passthrough(points, dim);
    }

    let mut dist = Condensed::build(points);
    let mut active = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Nearest neighbour of i among active j > i, ties to the smallest j.
    let mut nearest: Vec<Option<usize>> = vec![None; n];
    let mut version = vec![0u64; n];
    let mut heap = BinaryHeap::with_capacity(2 * n);

    let scan = |i: usize, active: &[bool], dist: &Condensed| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for j in (i + 1..n).filter(|&j| active[j]) {
            let d = dist.get(i, j);
            if best.map_or(true, |(_, b)| d < b) {
                best = Some((j, d));
            }
        }
        best
    };

    for i in 0..n {
        if let Some((j, d)) = scan(i, &active, &dist) {
            nearest[i] = Some(j);
            heap.push(Reverse(Candidate { dist: d, cluster: i, version: 0 }));
        }
    }

    let mut remaining = n;
    while remaining > target_k {
        let Reverse(top) = heap.pop().expect("an active pair remains");
        let a = top.cluster;
        if !active[a] || top.version != version[a] {
            continue;
        }
        let b = nearest[a].expect("candidate has a neighbour");

        for k in (0..n).filter(|&k| active[k] && k != a && k != b) {
            let merged = dist.get(a, k).max(dist.get(b, k));
            dist.set(a, k, merged);
        }
        active[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        remaining -= 1;

        // Linkages only grow, so only rows pointing at a or b can go stale.
        for i in (0..b).filter(|&i| active[i]) {
            if i == a || nearest[i] == Some(a) || nearest[i] == Some(b) {
                version[i] += 1;
                nearest[i] = None;
                if let Some((j, d)) = scan(i, &active, &dist) {
                    nearest[i] = Some(j);
                    heap.push(Reverse(Candidate {
                        dist: d,
                        cluster: i,
                        version: version[i],
                    }));
                }
            }
        }
    }

    let clusters: Vec<Vec<usize>> = (0..n)
        .filter(|&i| active[i])
        .map(|i| {
            let mut m = members[i].clone();
            m.sort_unstable();
            m
        })
        .collect();
    finish(points, dim, &clusters)
}

/// Naive reference: recomputes every complete linkage from the member lists
/// each round. Intended for small inputs in verification.
pub fn agglomerate_oracle(points: &[UnitVector], target_k: usize) -> Result<Clustering> {
    let dim = validate(points, target_k)?;
    if points.len() <= target_k {
        return passthrough(points, dim);
    }
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    while clusters.len() > target_k {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in 0..clusters.len() {
            for q in p + 1..clusters.len() {
                let mut linkage = f64::NEG_INFINITY;
                for &x in &clusters[p] {
                    for &y in &clusters[q] {
                        linkage = linkage.max(cosine_distance(&points[x], &points[y]));
                    }
                }
                if best.map_or(true, |(d, _, _)| linkage < d) {
                    best = Some((linkage, p, q));
                }
            }
        }
        let (_, p, q) = best.unwrap();
        let moved = clusters.remove(q);
        clusters[p].extend(moved);
        clusters[p].sort_unstable();
    }
    finish(points, dim, &clusters)
}
