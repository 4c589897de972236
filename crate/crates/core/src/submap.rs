//! Uncertainty-gated world map backed by an incremental k-d tree.
//!
//! Deleted points are only marked; a subtree is rebuilt when one child holds
//! more than `imbalance` of its nodes, and the whole tree is rebuilt once more
//! than half of its nodes are dead. Readers take cheap [`MapSnapshot`]s.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub trace: f64,
    pub rcs: f64,
    /// Insertion order, unique within a map.
    pub stamp: u64,
}

impl MapPoint {
    pub fn new(position: Vector3<f64>, cov: Matrix3<f64>, rcs: f64, stamp: u64) -> Self {
        Self { position, trace: cov.trace(), cov, rcs, stamp }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmapParams {
    /// Candidates with a larger covariance trace are never stored, m².
    pub tau_u: f64,
    /// Neighborhood radius of the replacement rule, m.
    pub r_replace: f64,
    /// Points farther than this from the current position are pruned, m.
    pub window_radius: f64,
    /// Largest allowed fraction of a subtree in one child before rebuilding.
    pub imbalance: f64,
    /// Dead fraction that triggers a full rebuild.
    pub deleted_fraction: f64,
}

impl Default for SubmapParams {
    fn default() -> Self {
        Self { tau_u: 0.5, r_replace: 0.2, window_radius: 200.0, imbalance: 0.7, deleted_fraction: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertReport {
    pub inserted: usize,
    pub replaced: usize,
    pub rejected: usize,
    pub dropped: usize,
}

impl std::ops::AddAssign for InsertReport {
    fn add_assign(&mut self, o: Self) {
        self.inserted += o.inserted;
        self.replaced += o.replaced;
        self.rejected += o.rejected;
        self.dropped += o.dropped;
    }
}

/// A neighbor with its squared distance to the query.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub point: MapPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    /// Sorted by `(dist2, stamp)`.
    pub neighbors: Vec<Neighbor>,
    /// Fewer than `k` points were available.
    pub short: bool,
}

const NONE: u32 = u32::MAX;
/// Subtrees smaller than this are never rebuilt for balance.
const MIN_REBUILD: u32 = 16;

#[derive(Clone, Debug)]
struct Node {
    point: u32,
    left: u32,
    right: u32,
    parent: u32,
    axis: u8,
    size: u32,
    alive: u32,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

/// Incremental k-d tree over [`MapPoint`]s.
#[derive(Clone, Debug, Default)]
pub struct KdTree {
    points: Vec<MapPoint>,
    dead: Vec<bool>,
    node_of: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
    alive: usize,
    imbalance: f64,
    deleted_fraction: f64,
}

/// Key ordering neighbors by distance, then insertion stamp.
#[derive(Clone, Copy, PartialEq)]
struct Key(f64, u64, u32);

impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Key {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0).then(self.1.cmp(&o.1))
    }
}

fn box_dist2(q: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> f64 {
    (0..3)
        .map(|i| {
            let d = if q[i] < lo[i] {
                lo[i] - q[i]
            } else if q[i] > hi[i] {
                q[i] - hi[i]
            } else {
                0.0
            };
            d * d
        })
        .sum()
}

impl KdTree {
    pub fn new(imbalance: f64, deleted_fraction: f64) -> Self {
        Self { root: NONE, imbalance, deleted_fraction, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.alive
    }

    pub fn is_empty(&self) -> bool {
        self.alive == 0
    }

    /// Live points in insertion order.
    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.iter().zip(&self.dead).filter(|(_, d)| !**d).map(|(p, _)| p)
    }

    fn next_stamp(&self) -> u64 {
        self.points.last().map_or(0, |p| p.stamp + 1)
    }

    /// Inserts a point, overwriting its stamp; returns the stamp.
    pub fn insert(&mut self, mut p: MapPoint) -> u64 {
        p.stamp = self.next_stamp();
        let stamp = p.stamp;
        let pos = p.position;
        let idx = self.points.len() as u32;
        self.points.push(p);
        self.dead.push(false);
        let node_idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            point: idx,
            left: NONE,
            right: NONE,
            parent: NONE,
            axis: 0,
            size: 1,
            alive: 1,
            lo: pos,
            hi: pos,
        });
        self.node_of.push(node_idx);
        self.alive += 1;

        if self.root == NONE {
            self.root = node_idx;
            return stamp;
        }
        let mut cur = self.root;
        loop {
            let n = &mut self.nodes[cur as usize];
            n.size += 1;
            n.alive += 1;
            n.lo = n.lo.inf(&pos);
            n.hi = n.hi.sup(&pos);
            let axis = n.axis as usize;
            let split = self.points[n.point as usize].position[axis];
            let go_left = pos[axis] < split;
            let child = if go_left { n.left } else { n.right };
            if child == NONE {
                let n = &mut self.nodes[cur as usize];
                if go_left {
                    n.left = node_idx;
                } else {
                    n.right = node_idx;
                }
                let leaf = &mut self.nodes[node_idx as usize];
                leaf.parent = cur;
                leaf.axis = ((axis + 1) % 3) as u8;
                break;
            }
            cur = child;
        }
        self.rebalance_from(node_idx);
        stamp
    }

    fn size_of(&self, n: u32) -> u32 {
        if n == NONE {
            0
        } else {
            self.nodes[n as usize].size
        }
    }

    /// Rebuilds the highest unbalanced ancestor of `leaf`, if any.
    fn rebalance_from(&mut self, leaf: u32) {
        let mut cur = self.nodes[leaf as usize].parent;
        let mut worst = NONE;
        while cur != NONE {
            let n = &self.nodes[cur as usize];
            let heavy = self.size_of(n.left).max(self.size_of(n.right)) as f64;
            if n.size >= MIN_REBUILD && heavy > self.imbalance * n.size as f64 {
                worst = cur;
            }
            cur = n.parent;
        }
        if worst != NONE {
            self.rebuild_subtree(worst);
        }
    }

    fn collect_alive(&self, n: u32, out: &mut Vec<u32>) {
        if n == NONE {
            return;
        }
        let node = &self.nodes[n as usize];
        if !self.dead[node.point as usize] {
            out.push(node.point);
        }
        self.collect_alive(node.left, out);
        self.collect_alive(node.right, out);
    }

    fn collect_nodes(&self, n: u32, out: &mut Vec<u32>) {
        if n == NONE {
            return;
        }
        out.push(n);
        self.collect_nodes(self.nodes[n as usize].left, out);
        self.collect_nodes(self.nodes[n as usize].right, out);
    }

    /// Rebuilds the subtree at `n` from its live points, reusing its node slots.
    fn rebuild_subtree(&mut self, n: u32) {
        let parent = self.nodes[n as usize].parent;
        let mut slots = Vec::new();
        self.collect_nodes(n, &mut slots);
        let mut pts = Vec::new();
        self.collect_alive(n, &mut pts);
        let dead_points: Vec<u32> = slots
            .iter()
            .map(|s| self.nodes[*s as usize].point)
            .filter(|p| self.dead[*p as usize])
            .collect();
        for p in dead_points {
            self.node_of[p as usize] = NONE;
        }
        slots.sort_unstable();
        slots.truncate(pts.len());
        let mut slot_iter = slots.into_iter();
        let new_root = self.build(&mut pts, parent, &mut slot_iter);
        if parent == NONE {
            self.root = new_root;
        } else {
            let p = &mut self.nodes[parent as usize];
            if p.left == n {
                p.left = new_root;
            } else {
                p.right = new_root;
            }
        }
        self.refresh_ancestors(parent);
    }

    fn refresh_ancestors(&mut self, mut cur: u32) {
        while cur != NONE {
            let (l, r, p) = {
                let n = &self.nodes[cur as usize];
                (n.left, n.right, n.point)
            };
            let pos = self.points[p as usize].position;
            let mut size = 1;
            let mut alive = u32::from(!self.dead[p as usize]);
            let mut lo = pos;
            let mut hi = pos;
            for c in [l, r] {
                if c != NONE {
                    let cn = &self.nodes[c as usize];
                    size += cn.size;
                    alive += cn.alive;
                    lo = lo.inf(&cn.lo);
                    hi = hi.sup(&cn.hi);
                }
            }
            let n = &mut self.nodes[cur as usize];
            n.size = size;
            n.alive = alive;
            n.lo = lo;
            n.hi = hi;
            cur = n.parent;
        }
    }

    fn build(&mut self, pts: &mut [u32], parent: u32, slots: &mut impl Iterator<Item = u32>) -> u32 {
        if pts.is_empty() {
            return NONE;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &p in pts.iter() {
            let pos = &self.points[p as usize].position;
            lo = lo.inf(pos);
            hi = hi.sup(pos);
        }
        let axis = (hi - lo).imax();
        let mid = pts.len() / 2;
        let points = &self.points;
        pts.select_nth_unstable_by(mid, |a, b| {
            let pa = &points[*a as usize];
            let pb = &points[*b as usize];
            pa.position[axis].total_cmp(&pb.position[axis]).then(pa.stamp.cmp(&pb.stamp))
        });
        // Points equal to the split value go right, matching insertion routing.
        let split = self.points[pts[mid] as usize].position[axis];
        let mut m = 0;
        for i in 0..mid {
            if self.points[pts[i] as usize].position[axis] < split {
                pts.swap(i, m);
                m += 1;
            }
        }
        pts.swap(m, mid);
        let slot = slots.next().expect("node slot available");
        let point = pts[m];
        self.node_of[point as usize] = slot;
        let (left_pts, rest) = pts.split_at_mut(m);
        let right_pts = &mut rest[1..];
        let left = self.build(left_pts, slot, slots);
        let right = self.build(right_pts, slot, slots);
        let node = Node {
            point,
            left,
            right,
            parent,
            axis: axis as u8,
            size: 0,
            alive: 0,
            lo,
            hi,
        };
        self.nodes[slot as usize] = node;
        let size = 1 + self.size_of(left) + self.size_of(right);
        let n = &mut self.nodes[slot as usize];
        n.size = size;
        n.alive = size;
        slot
    }

    /// Compacts storage and rebuilds the whole tree from live points.
    pub fn rebuild(&mut self) {
        let live: Vec<MapPoint> = self.points().cloned().collect();
        self.points = live;
        self.dead = vec![false; self.points.len()];
        self.node_of = vec![NONE; self.points.len()];
        self.nodes = (0..self.points.len() as u32)
            .map(|_| Node {
                point: 0,
                left: NONE,
                right: NONE,
                parent: NONE,
                axis: 0,
                size: 0,
                alive: 0,
                lo: Vector3::zeros(),
                hi: Vector3::zeros(),
            })
            .collect();
        self.alive = self.points.len();
        let mut idx: Vec<u32> = (0..self.points.len() as u32).collect();
        let mut slots = 0..self.points.len() as u32;
        self.root = self.build(&mut idx, NONE, &mut slots);
    }

    fn find_by_stamp(&self, stamp: u64) -> Option<u32> {
        let i = self.points.partition_point(|p| p.stamp < stamp);
        (i < self.points.len() && self.points[i].stamp == stamp && !self.dead[i]).then_some(i as u32)
    }

    /// Marks the point with `stamp` deleted. Returns whether it was live.
    pub fn remove(&mut self, stamp: u64) -> bool {
        let Some(idx) = self.find_by_stamp(stamp) else {
            return false;
        };
        self.dead[idx as usize] = true;
        self.alive -= 1;
        let mut cur = self.node_of[idx as usize];
        while cur != NONE {
            let n = &mut self.nodes[cur as usize];
            n.alive -= 1;
            cur = n.parent;
        }
        let total = self.nodes.len();
        if total > 0 && (total - self.alive) as f64 > self.deleted_fraction * total as f64 {
            self.rebuild();
        }
        true
    }

    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> KnnResult {
        let mut heap: BinaryHeap<Key> = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(self.root, query, k, &mut heap);
        }
        let mut keys = heap.into_vec();
        keys.sort();
        let neighbors: Vec<Neighbor> =
            keys.into_iter().map(|Key(d, _, i)| Neighbor { dist2: d, point: self.points[i as usize].clone() }).collect();
        KnnResult { short: neighbors.len() < k, neighbors }
    }

    fn knn_rec(&self, n: u32, q: &Vector3<f64>, k: usize, heap: &mut BinaryHeap<Key>) {
        if n == NONE {
            return;
        }
        let node = &self.nodes[n as usize];
        if node.alive == 0 {
            return;
        }
        if heap.len() == k && box_dist2(q, &node.lo, &node.hi) > heap.peek().unwrap().0 {
            return;
        }
        let p = &self.points[node.point as usize];
        if !self.dead[node.point as usize] {
            let key = Key((p.position - q).norm_squared(), p.stamp, node.point);
            if heap.len() < k {
                heap.push(key);
            } else if key < *heap.peek().unwrap() {
                heap.pop();
                heap.push(key);
            }
        }
        let axis = node.axis as usize;
        let (near, far) = if q[axis] < p.position[axis] { (node.left, node.right) } else { (node.right, node.left) };
        self.knn_rec(near, q, k, heap);
        self.knn_rec(far, q, k, heap);
    }

    /// All live points within `radius`, sorted by `(dist2, stamp)`.
    pub fn radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<Neighbor> {
        let mut keys = Vec::new();
        self.radius_rec(self.root, query, radius * radius, &mut keys);
        keys.sort();
        keys.into_iter().map(|Key(d, _, i)| Neighbor { dist2: d, point: self.points[i as usize].clone() }).collect()
    }

    fn radius_rec(&self, n: u32, q: &Vector3<f64>, r2: f64, out: &mut Vec<Key>) {
        if n == NONE {
            return;
        }
        let node = &self.nodes[n as usize];
        if node.alive == 0 || box_dist2(q, &node.lo, &node.hi) > r2 {
            return;
        }
        if !self.dead[node.point as usize] {
            let p = &self.points[node.point as usize];
            let d = (p.position - q).norm_squared();
            if d <= r2 {
                out.push(Key(d, p.stamp, node.point));
            }
        }
        self.radius_rec(node.left, q, r2, out);
        self.radius_rec(node.right, q, r2, out);
    }

    /// Height of the tree, for balance checks.
    pub fn depth(&self) -> usize {
        fn rec(t: &KdTree, n: u32) -> usize {
            if n == NONE {
                0
            } else {
                let node = &t.nodes[n as usize];
                1 + rec(t, node.left).max(rec(t, node.right))
            }
        }
        rec(self, self.root)
    }
}

/// Immutable view of the map; later insertions do not affect it.
#[derive(Clone, Debug)]
pub struct MapSnapshot {
    tree: Arc<KdTree>,
}

impl MapSnapshot {
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> KnnResult {
        self.tree.knn(query, k)
    }

    pub fn radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<Neighbor> {
        self.tree.radius(query, radius)
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}

/// The world map with uncertainty-aware insertion.
#[derive(Clone, Debug)]
pub struct Submap {
    tree: Arc<KdTree>,
    pub params: SubmapParams,
}

impl Submap {
    pub fn new(params: SubmapParams) -> Self {
        Self { tree: Arc::new(KdTree::new(params.imbalance, params.deleted_fraction)), params }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.tree.points()
    }

    /// Copy-on-write: the snapshot shares storage until the next mutation.
    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot { tree: Arc::clone(&self.tree) }
    }

    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> KnnResult {
        self.tree.knn(query, k)
    }

    pub fn radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<Neighbor> {
        self.tree.radius(query, radius)
    }

    fn tree_mut(&mut self) -> &mut KdTree {
        Arc::make_mut(&mut self.tree)
    }

    /// Inserts unconditionally (no gating or replacement).
    pub fn insert_raw(&mut self, p: MapPoint) -> u64 {
        self.tree_mut().insert(p)
    }

    pub fn remove(&mut self, stamp: u64) -> bool {
        self.tree_mut().remove(stamp)
    }

    /// Applies the gate and replace-on-lower-trace rule to each candidate in order.
    pub fn insert_with_replacement(&mut self, candidates: impl IntoIterator<Item = MapPoint>) -> InsertReport {
        let mut report = InsertReport::default();
        let (tau_u, r) = (self.params.tau_u, self.params.r_replace);
        for c in candidates {
            if !(c.trace <= tau_u) {
                report.rejected += 1;
                continue;
            }
            let nearby = self.tree.radius(&c.position, r);
            let mut keep_existing = false;
            for n in &nearby {
                if n.point.trace > c.trace {
                    self.tree_mut().remove(n.point.stamp);
                    report.replaced += 1;
                } else if n.point.trace < c.trace {
                    keep_existing = true;
                }
            }
            if keep_existing {
                report.dropped += 1;
            } else {
                self.tree_mut().insert(c);
                report.inserted += 1;
            }
        }
        report
    }

    /// Removes points farther than the window radius from `center`; returns the count.
    pub fn prune_outside(&mut self, center: &Vector3<f64>) -> usize {
        let r2 = self.params.window_radius.powi(2);
        let far: Vec<u64> =
            self.tree.points().filter(|p| (p.position - center).norm_squared() > r2).map(|p| p.stamp).collect();
        for s in &far {
            self.tree_mut().remove(*s);
        }
        far.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mp(p: [f64; 3], trace: f64) -> MapPoint {
        MapPoint::new(Vector3::from(p), Matrix3::identity() * (trace / 3.0), 1.0, 0)
    }

    fn brute_knn(points: &[MapPoint], q: &Vector3<f64>, k: usize) -> Vec<u64> {
        let mut v: Vec<_> = points.iter().map(|p| ((p.position - q).norm_squared(), p.stamp)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn single_point_map() {
        let mut t = KdTree::new(0.7, 0.5);
        t.insert(mp([1.0, 2.0, 3.0], 0.1));
        let r = t.knn(&Vector3::new(-5.0, 0.0, 9.0), 1);
        assert_eq!(r.neighbors.len(), 1);
        assert!(!r.short);
        let r = t.knn(&Vector3::zeros(), 4);
        assert!(r.short);
        assert_eq!(r.neighbors.len(), 1);
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut t = KdTree::new(0.7, 0.5);
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..10 {
                    t.insert(mp([x as f64, y as f64, z as f64], 0.1));
                }
            }
        }
        let all: Vec<MapPoint> = t.points().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = Vector3::from_fn(|_, _| rng.random_range(-1.0..11.0));
            let got: Vec<u64> = t.knn(&q, 5).neighbors.iter().map(|n| n.point.stamp).collect();
            assert_eq!(got, brute_knn(&all, &q, 5));
        }
        assert!(t.depth() < 40, "depth {}", t.depth());
    }

    #[test]
    fn rule_table_examples() {
        let params = SubmapParams { r_replace: 0.05, ..Default::default() };
        let mut m = Submap::new(params);
        let r = m.insert_with_replacement([mp([0.0, 0.0, 0.0], 0.4)]);
        assert_eq!(r.inserted, 1);
        let r = m.insert_with_replacement([mp([0.01, 0.0, 0.0], 0.1)]);
        assert_eq!(r, InsertReport { inserted: 1, replaced: 1, rejected: 0, dropped: 0 });
        assert_eq!(m.len(), 1);
        let r = m.insert_with_replacement([mp([0.02, 0.0, 0.0], 0.4)]);
        assert_eq!(r, InsertReport { inserted: 0, replaced: 0, rejected: 0, dropped: 1 });
        let r = m.insert_with_replacement([mp([5.0, 0.0, 0.0], 0.6)]);
        assert_eq!(r.rejected, 1);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut m = Submap::new(SubmapParams::default());
        let empty = m.snapshot();
        m.insert_with_replacement([mp([0.0, 0.0, 0.0], 0.1)]);
        assert!(empty.knn(&Vector3::zeros(), 3).neighbors.is_empty());
        let snap = m.snapshot();
        let before = snap.knn(&Vector3::zeros(), 3);
        m.insert_with_replacement([mp([0.5, 0.0, 0.0], 0.1), mp([0.3, 0.0, 0.0], 0.1)]);
        assert_eq!(snap.knn(&Vector3::zeros(), 3), before);
        assert_eq!(m.knn(&Vector3::zeros(), 3).neighbors.len(), 3);
    }

    #[test]
    fn prune_window() {
        let mut m = Submap::new(SubmapParams { window_radius: 10.0, ..Default::default() });
        m.insert_with_replacement([mp([0.0, 0.0, 0.0], 0.1), mp([20.0, 0.0, 0.0], 0.1)]);
        assert_eq!(m.prune_outside(&Vector3::zeros()), 1);
        assert_eq!(m.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn randomized_ops_match_brute_force(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = KdTree::new(0.7, 0.5);
            let mut live: Vec<MapPoint> = Vec::new();
            for _ in 0..600 {
                if !live.is_empty() && rng.random_bool(0.3) {
                    let i = rng.random_range(0..live.len());
                    let p = live.remove(i);
                    prop_assert!(t.remove(p.stamp));
                } else {
                    // Coarse coordinates produce exact ties.
                    let p = mp([rng.random_range(0..8) as f64, rng.random_range(0..8) as f64, rng.random_range(0..3) as f64 * 0.5], 0.1);
                    let stamp = t.insert(p.clone());
                    live.push(MapPoint { stamp, ..p });
                }
                prop_assert_eq!(t.len(), live.len());
                let q = Vector3::from_fn(|_, _| rng.random_range(-1.0..9.0));
                let k = rng.random_range(1..8);
                let got: Vec<u64> = t.knn(&q, k).neighbors.iter().map(|n| n.point.stamp).collect();
                prop_assert_eq!(got, brute_knn(&live, &q, k));
                let r = rng.random_range(0.0..3.0);
                let got: Vec<u64> = t.radius(&q, r).iter().map(|n| n.point.stamp).collect();
                let mut want: Vec<_> = live.iter().map(|p| ((p.position - q).norm_squared(), p.stamp)).filter(|x| x.0 <= r * r).collect();
                want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                prop_assert_eq!(got, want.into_iter().map(|x| x.1).collect::<Vec<_>>());
            }
        }
    }
}
