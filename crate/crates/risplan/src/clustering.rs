//! BIRCH clustering of outage tiles.
//!
//! Points are inserted into a CF tree in canonical (lexicographic) order so
//! the result is independent of input ordering. A leaf entry absorbs a point
//! when the merged cluster radius stays within half the distance threshold;
//! the final clusters are the leaf entries, with no global refinement pass.

use crate::geometry::Vec2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("point {0} has non-finite coordinates")]
    NonFinite(usize),
    #[error("no points to cluster")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
}

/// BIRCH clustering feature: count, linear sum, and squared-norm sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringFeature {
    pub count: usize,
    pub linear_sum: Vec2,
    pub square_sum: f64,
}

impl ClusteringFeature {
    pub fn from_point(p: Vec2) -> Self {
        ClusteringFeature { count: 1, linear_sum: p, square_sum: p.dot(p) }
    }

    pub fn centroid(&self) -> Vec2 {
        Vec2::new(
            self.linear_sum.x / self.count as f64,
            self.linear_sum.y / self.count as f64,
        )
    }

    /// RMS distance of members from the centroid.
    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        (self.square_sum / self.count as f64 - c.dot(c)).max(0.0).sqrt()
    }
}

/// Componentwise CF addition.
pub fn cf_merge(a: &ClusteringFeature, b: &ClusteringFeature) -> ClusteringFeature {
    ClusteringFeature {
        count: a.count + b.count,
        linear_sum: a.linear_sum + b.linear_sum,
        square_sum: a.square_sum + b.square_sum,
    }
}

/// Final cluster: CF summary plus the indices of its member points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cluster {
    pub cf: ClusteringFeature,
    /// Indices into the caller's point list.
    pub members: Vec<usize>,
    pub centroid: Vec2,
}

/// Centroid of a cluster (linear sum over count).
pub fn cluster_centroid(c: &Cluster) -> Vec2 {
    c.cf.centroid()
}

#[derive(Debug, Clone)]
struct Entry {
    cf: ClusteringFeature,
    members: Vec<usize>,
}

#[derive(Debug)]
enum Node {
    Leaf { entries: Vec<Entry> },
    Internal { children: Vec<usize>, summaries: Vec<ClusteringFeature> },
}

struct CfTree {
    nodes: Vec<Node>,
    root: usize,
    branching: usize,
    max_radius: f64,
}

/// Result of inserting below a node: the node's new CF, plus an optional
/// sibling created by a split.
struct InsertOutcome {
    cf: ClusteringFeature,
    split: Option<(usize, ClusteringFeature)>,
}

impl CfTree {
    fn new(branching: usize, max_radius: f64) -> Self {
        CfTree { nodes: vec![Node::Leaf { entries: Vec::new() }], root: 0, branching, max_radius }
    }

    fn insert(&mut self, point: Vec2, id: usize) {
        let root = self.root;
        let outcome = self.insert_into(root, point, id);
        if let Some((sibling, sibling_cf)) = outcome.split {
            let new_root = Node::Internal {
                children: vec![root, sibling],
                summaries: vec![outcome.cf, sibling_cf],
            };
            self.nodes.push(new_root);
            self.root = self.nodes.len() - 1;
        }
    }

    fn insert_into(&mut self, node_idx: usize, point: Vec2, id: usize) -> InsertOutcome {
        match &mut self.nodes[node_idx] {
            Node::Leaf { entries } => {
                // Nearest entry by centroid; lowest index wins ties.
                let mut best: Option<(f64, usize)> = None;
                for (i, e) in entries.iter().enumerate() {
                    let d = e.cf.centroid().distance(point);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                let point_cf = ClusteringFeature::from_point(point);
                if let Some((_, i)) = best {
                    let merged = cf_merge(&entries[i].cf, &point_cf);
                    if merged.radius() <= self.max_radius {
                        entries[i].cf = merged;
                        entries[i].members.push(id);
                        return self.summarize_leaf(node_idx);
                    }
                }
                entries.push(Entry { cf: point_cf, members: vec![id] });
                if entries.len() > self.branching {
                    return self.split_leaf(node_idx);
                }
                self.summarize_leaf(node_idx)
            }
            Node::Internal { children, summaries } => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, s) in summaries.iter().enumerate() {
                    let d = s.centroid().distance(point);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                let child = children[best];
                let outcome = self.insert_into(child, point, id);
                let Node::Internal { children, summaries } = &mut self.nodes[node_idx] else {
                    unreachable!()
                };
                summaries[best] = outcome.cf;
                if let Some((sib, sib_cf)) = outcome.split {
                    children.insert(best + 1, sib);
                    summaries.insert(best + 1, sib_cf);
                    if children.len() > self.branching {
                        return self.split_internal(node_idx);
                    }
                }
                self.summarize_internal(node_idx)
            }
        }
    }

    fn summarize_leaf(&self, node_idx: usize) -> InsertOutcome {
        let Node::Leaf { entries } = &self.nodes[node_idx] else { unreachable!() };
        let cf = entries.iter().skip(1).fold(entries[0].cf, |acc, e| cf_merge(&acc, &e.cf));
        InsertOutcome { cf, split: None }
    }

    fn summarize_internal(&self, node_idx: usize) -> InsertOutcome {
        let Node::Internal { summaries, .. } = &self.nodes[node_idx] else { unreachable!() };
        let cf = summaries.iter().skip(1).fold(summaries[0], |acc, s| cf_merge(&acc, s));
        InsertOutcome { cf, split: None }
    }

    /// Farthest-pair seeding; remaining items join the nearer seed (first seed
    /// on ties). Deterministic for identical inputs.
    fn split_leaf(&mut self, node_idx: usize) -> InsertOutcome {
        let Node::Leaf { entries } = &mut self.nodes[node_idx] else { unreachable!() };
        let taken = std::mem::take(entries);
        let centroids: Vec<Vec2> = taken.iter().map(|e| e.cf.centroid()).collect();
        let (ia, ib) = farthest_pair(&centroids);
        let seed_a = centroids[ia];
        let seed_b = centroids[ib];
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (i, e) in taken.into_iter().enumerate() {
            let to_left = if i == ia {
                true
            } else if i == ib {
                false
            } else {
                centroids[i].distance(seed_a) <= centroids[i].distance(seed_b)
            };
            if to_left {
                left.push(e);
            } else {
                right.push(e);
            }
        }
        let left_cf = fold_entries(&left);
        let right_cf = fold_entries(&right);
        self.nodes[node_idx] = Node::Leaf { entries: left };
        self.nodes.push(Node::Leaf { entries: right });
        let sibling = self.nodes.len() - 1;
        InsertOutcome { cf: left_cf, split: Some((sibling, right_cf)) }
    }

    fn split_internal(&mut self, node_idx: usize) -> InsertOutcome {
        let Node::Internal { children, summaries } = &mut self.nodes[node_idx] else {
            unreachable!()
        };
        let kids = std::mem::take(children);
        let sums = std::mem::take(summaries);
        let centroids: Vec<Vec2> = sums.iter().map(|s| s.centroid()).collect();
        let (ia, ib) = farthest_pair(&centroids);
        let seed_a = centroids[ia];
        let seed_b = centroids[ib];
        let mut lk = Vec::new();
        let mut ls = Vec::new();
        let mut rk = Vec::new();
        let mut rs = Vec::new();
        for (i, (k, s)) in kids.into_iter().zip(sums).enumerate() {
            let to_left = if i == ia {
                true
            } else if i == ib {
                false
            } else {
                centroids[i].distance(seed_a) <= centroids[i].distance(seed_b)
            };
            if to_left {
                lk.push(k);
                ls.push(s);
            } else {
                rk.push(k);
                rs.push(s);
            }
        }
        let left_cf = ls.iter().skip(1).fold(ls[0], |acc, s| cf_merge(&acc, s));
        let right_cf = rs.iter().skip(1).fold(rs[0], |acc, s| cf_merge(&acc, s));
        self.nodes[node_idx] = Node::Internal { children: lk, summaries: ls };
        self.nodes.push(Node::Internal { children: rk, summaries: rs });
        let sibling = self.nodes.len() - 1;
        InsertOutcome { cf: left_cf, split: Some((sibling, right_cf)) }
    }

    /// Leaf entries in left-to-right tree order.
    fn collect(&self) -> Vec<Cluster> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        let mut ordered = Vec::new();
        while let Some(n) = stack.pop() {
            ordered.push(n);
            if let Node::Internal { children, .. } = &self.nodes[n] {
                for &c in children.iter().rev() {
                    stack.push(c);
                }
            }
        }
        for n in ordered {
            if let Node::Leaf { entries } = &self.nodes[n] {
                for e in entries {
                    out.push(Cluster {
                        cf: e.cf,
                        members: e.members.clone(),
                        centroid: e.cf.centroid(),
                    });
                }
            }
        }
        out
    }
}

fn fold_entries(entries: &[Entry]) -> ClusteringFeature {
    entries.iter().skip(1).fold(entries[0].cf, |acc, e| cf_merge(&acc, &e.cf))
}

fn farthest_pair(pts: &[Vec2]) -> (usize, usize) {
    let mut best = (0usize, 1usize.min(pts.len() - 1));
    let mut best_d = -1.0;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = pts[i].distance(pts[j]);
            if d > best_d {
                best_d = d;
                best = (i, j);
            }
        }
    }
    best
}

pub const DEFAULT_BRANCHING: usize = 50;

/// Cluster 2D points with BIRCH. `threshold_t` is the compactness parameter in
/// meters: a leaf entry absorbs a point while its radius stays within
/// `threshold_t / 2`. Member indices refer to the input slice.
pub fn birch_cluster(
    points: &[Vec2],
    threshold_t: f64,
    branching: usize,
) -> Result<Vec<Cluster>, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::Empty);
    }
    if threshold_t.is_nan() || threshold_t <= 0.0 {
        return Err(ClusterError::BadThreshold(threshold_t));
    }
    for (i, p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(ClusterError::NonFinite(i));
        }
    }
    // Canonical insertion order removes input-order sensitivity.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
            .then(a.cmp(&b))
    });
    let mut tree = CfTree::new(branching.max(2), threshold_t / 2.0);
    for &i in &order {
        tree.insert(points[i], i);
    }
    Ok(tree.collect())
}

/// Write clusters as CSV: `cluster_id,centroid_x,centroid_y,size`.
pub fn write_clusters_csv(clusters: &[Cluster], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "cluster_id,centroid_x,centroid_y,size")?;
    for (i, c) in clusters.iter().enumerate() {
        writeln!(f, "{i},{:.3},{:.3},{}", c.centroid.x, c.centroid.y, c.cf.count)?;
    }
    f.flush()
}

/// Write tile membership as CSV: `tile_row,tile_col,cluster_id`.
pub fn write_membership_csv(
    clusters: &[Cluster],
    tile_of_point: impl Fn(usize) -> (usize, usize),
    path: &Path,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "tile_row,tile_col,cluster_id")?;
    for (i, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            let (r, col) = tile_of_point(m);
            writeln!(f, "{r},{col},{i}")?;
        }
    }
    f.flush()
}

/// Reference greedy absorption in the same canonical order: used as the
/// brute-force oracle for small instances.
pub fn greedy_absorption_oracle(points: &[Vec2], threshold_t: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
            .then(a.cmp(&b))
    });
    let mut cfs: Vec<ClusteringFeature> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        let p = points[i];
        let mut best: Option<(f64, usize)> = None;
        for (k, cf) in cfs.iter().enumerate() {
            let d = cf.centroid().distance(p);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
        let pcf = ClusteringFeature::from_point(p);
        if let Some((_, k)) = best {
            let merged = cf_merge(&cfs[k], &pcf);
            if merged.radius() <= threshold_t / 2.0 {
                cfs[k] = merged;
                members[k].push(i);
                continue;
            }
        }
        cfs.push(pcf);
        members.push(vec![i]);
    }
    members
}
