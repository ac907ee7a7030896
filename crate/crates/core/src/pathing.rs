//! Shortest and k-shortest loopless routes over a [`RoadNetwork`], and the
//! diversity-filtered candidate sets searched during route assignment.
//!
//! Every search breaks weight ties by the lexicographically smaller
//! segment-id sequence, so results are reproducible and equal to a sort of
//! all simple paths by `(weight, segment ids)`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::{NodeId, RoadNetwork, SegmentId};

/// Diversity threshold on the weighted Jaccard overlap between candidates.
pub const DEFAULT_DIVERSITY_THRESHOLD: f64 = 0.8;
/// Number of candidate routes kept per fix pair.
pub const DEFAULT_CANDIDATES: usize = 5;
/// Yen's algorithm is asked for this many times `m` paths before filtering.
pub const OVERSAMPLING: usize = 4;

const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("no path from node {src} to node {dst}")]
    NoPath { src: u32, dst: u32 },
    #[error("weight table has {got} entries but the network has {expected} segments")]
    WeightLength { expected: usize, got: usize },
    #[error("segment {segment} has non-positive or non-finite weight {weight}")]
    BadWeight { segment: u32, weight: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub segment_ids: Vec<SegmentId>,
    pub total_length_m: f64,
    pub total_weight_s: f64,
}

impl Route {
    pub fn empty() -> Self {
        Route {
            segment_ids: Vec::new(),
            total_length_m: 0.0,
            total_weight_s: 0.0,
        }
    }

    /// Builds a route, summing lengths and weights in traversal order.
    pub fn from_segments(net: &RoadNetwork, weights: &[f64], segment_ids: Vec<SegmentId>) -> Self {
        let total_length_m = segment_ids.iter().map(|&s| net.segment(s).length_m).sum();
        let total_weight_s = segment_ids.iter().map(|&s| weights[s.index()]).sum();
        Route {
            segment_ids,
            total_length_m,
            total_weight_s,
        }
    }

    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    /// Node sequence starting at `origin`; has `len() + 1` entries.
    pub fn nodes(&self, net: &RoadNetwork, origin: NodeId) -> Vec<NodeId> {
        let mut nodes = Vec::with_capacity(self.len() + 1);
        nodes.push(origin);
        nodes.extend(self.segment_ids.iter().map(|&s| net.segment(s).to));
        nodes
    }

    /// True when consecutive segments meet at a junction and no node repeats.
    pub fn is_consistent(&self, net: &RoadNetwork) -> bool {
        let Some(&first) = self.segment_ids.first() else {
            return true;
        };
        let nodes = self.nodes(net, net.segment(first).from);
        let joined = self
            .segment_ids
            .windows(2)
            .all(|w| net.segment(w[0]).to == net.segment(w[1]).from);
        let distinct: HashSet<NodeId> = nodes.iter().copied().collect();
        joined && distinct.len() == nodes.len()
    }
}

/// Top-`m` diverse candidate routes between two snapped nodes, plus the
/// currently assigned one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub origin: NodeId,
    pub dest: NodeId,
    pub routes: Vec<Route>,
    pub assigned_index: usize,
}

impl CandidateSet {
    pub fn assigned(&self) -> &Route {
        &self.routes[self.assigned_index]
    }
}

fn check_weights(net: &RoadNetwork, weights: &[f64]) -> Result<(), PathError> {
    if weights.len() != net.num_segments() {
        return Err(PathError::WeightLength {
            expected: net.num_segments(),
            got: weights.len(),
        });
    }
    if let Some((i, &w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w > 0.0 && w.is_finite()))
    {
        return Err(PathError::BadWeight {
            segment: i as u32,
            weight: w,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Segment and node exclusions applied during a spur search.
struct Mask {
    banned_nodes: Vec<bool>,
    banned_segments: Vec<bool>,
}

impl Mask {
    fn new(net: &RoadNetwork) -> Self {
        Mask {
            banned_nodes: vec![false; net.num_nodes()],
            banned_segments: vec![false; net.num_segments()],
        }
    }

    fn clear(&mut self) {
        self.banned_nodes.iter_mut().for_each(|b| *b = false);
        self.banned_segments.iter_mut().for_each(|b| *b = false);
    }
}

/// Single search engine reused across Yen spur computations.
struct Engine<'a> {
    net: &'a RoadNetwork,
    weights: &'a [f64],
    dist: Vec<f64>,
    heap: BinaryHeap<HeapEntry>,
}

impl<'a> Engine<'a> {
    fn new(net: &'a RoadNetwork, weights: &'a [f64]) -> Self {
        Engine {
            net,
            weights,
            dist: vec![f64::INFINITY; net.num_nodes()],
            heap: BinaryHeap::new(),
        }
    }

    /// Lexicographically smallest minimum-weight path `src -> dst` that
    /// avoids the masked nodes and segments.
    fn search(&mut self, src: NodeId, dst: NodeId, mask: &Mask) -> Option<Vec<SegmentId>> {
        let net = self.net;
        if mask.banned_nodes[src.index()] || mask.banned_nodes[dst.index()] {
            return None;
        }
        // Distances to `dst` over reversed edges.
        self.dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        self.heap.clear();
        self.dist[dst.index()] = 0.0;
        self.heap.push(HeapEntry { dist: 0.0, node: dst.0 });
        while let Some(HeapEntry { dist, node }) = self.heap.pop() {
            if dist > self.dist[node as usize] {
                continue;
            }
            if node == src.0 {
                break;
            }
            for &seg in net.incoming(NodeId(node)) {
                if mask.banned_segments[seg.index()] {
                    continue;
                }
                let prev = net.segment(seg).from;
                if mask.banned_nodes[prev.index()] {
                    continue;
                }
                let nd = dist + self.weights[seg.index()];
                if nd < self.dist[prev.index()] {
                    self.dist[prev.index()] = nd;
                    self.heap.push(HeapEntry { dist: nd, node: prev.0 });
                }
            }
        }
        if !self.dist[src.index()].is_finite() {
            return None;
        }

        // Walk forward choosing the smallest segment id that stays on a
        // shortest path.
        let mut path = Vec::new();
        let mut at = src;
        let mut visited = vec![false; net.num_nodes()];
        while at != dst {
            visited[at.index()] = true;
            let here = self.dist[at.index()];
            let next = net
                .outgoing(at)
                .iter()
                .copied()
                .filter(|s| !mask.banned_segments[s.index()])
                .filter(|s| {
                    let to = net.segment(*s).to;
                    !mask.banned_nodes[to.index()] && !visited[to.index()]
                })
                .filter(|s| {
                    let via = self.weights[s.index()] + self.dist[net.segment(*s).to.index()];
                    via <= here + TIE_TOLERANCE * here.abs().max(1.0)
                })
                .min()?;
            path.push(next);
            at = net.segment(next).to;
        }
        Some(path)
    }
}

pub fn shortest_path(
    net: &RoadNetwork,
    weights: &[f64],
    src: NodeId,
    dst: NodeId,
) -> Result<Route, PathError> {
    check_weights(net, weights)?;
    let mask = Mask::new(net);
    let mut engine = Engine::new(net, weights);
    engine
        .search(src, dst, &mask)
        .map(|segs| Route::from_segments(net, weights, segs))
        .ok_or(PathError::NoPath { src: src.0, dst: dst.0 })
}

/// Candidate ordering for Yen's pool: weight, then segment ids.
#[derive(Debug, Clone, PartialEq)]
struct Ranked(Route);

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .total_weight_s
            .total_cmp(&other.0.total_weight_s)
            .then_with(|| self.0.segment_ids.cmp(&other.0.segment_ids))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Up to `k` loopless routes in `(weight, segment ids)` order (Yen).
pub fn k_shortest_paths(
    net: &RoadNetwork,
    weights: &[f64],
    src: NodeId,
    dst: NodeId,
    k: usize,
) -> Result<Vec<Route>, PathError> {
    if k == 0 {
        return Err(PathError::InvalidArgument("k must be at least 1".into()));
    }
    check_weights(net, weights)?;
    let mut engine = Engine::new(net, weights);
    let mut mask = Mask::new(net);
    let first = engine
        .search(src, dst, &mask)
        .ok_or(PathError::NoPath { src: src.0, dst: dst.0 })?;

    let mut accepted = vec![Route::from_segments(net, weights, first)];
    let mut seen: HashSet<Vec<SegmentId>> = HashSet::new();
    seen.insert(accepted[0].segment_ids.clone());
    let mut pool: BTreeSet<Ranked> = BTreeSet::new();

    while accepted.len() < k {
        let last = accepted.last().expect("nonempty");
        let nodes = last.nodes(net, src);
        for spur_at in 0..last.len() {
            let root = &last.segment_ids[..spur_at];
            mask.clear();
            for path in &accepted {
                if path.len() > spur_at && path.segment_ids[..spur_at] == *root {
                    mask.banned_segments[path.segment_ids[spur_at].index()] = true;
                }
            }
            for node in &nodes[..spur_at] {
                mask.banned_nodes[node.index()] = true;
            }
            let Some(spur) = engine.search(nodes[spur_at], dst, &mask) else {
                continue;
            };
            let mut segs = root.to_vec();
            segs.extend(spur);
            if seen.insert(segs.clone()) {
                pool.insert(Ranked(Route::from_segments(net, weights, segs)));
            }
        }
        match pool.pop_first() {
            Some(Ranked(route)) => accepted.push(route),
            None => break,
        }
    }
    Ok(accepted)
}

/// Length-weighted intersection over union of the two routes' segment sets.
/// Two empty routes are identical by convention.
pub fn weighted_jaccard(net: &RoadNetwork, a: &Route, b: &Route) -> f64 {
    let sa: BTreeSet<SegmentId> = a.segment_ids.iter().copied().collect();
    let sb: BTreeSet<SegmentId> = b.segment_ids.iter().copied().collect();
    let len = |s: &SegmentId| net.segment(*s).length_m;
    let union: f64 = sa.union(&sb).map(len).sum();
    if union == 0.0 {
        return 1.0;
    }
    sa.intersection(&sb).map(len).sum::<f64>() / union
}

/// Greedy diversity filter over Yen's output: a route is kept when its
/// overlap with every kept route is at most `tau`.
pub fn candidate_set(
    net: &RoadNetwork,
    weights: &[f64],
    src: NodeId,
    dst: NodeId,
    m: usize,
    tau: f64,
) -> Result<CandidateSet, PathError> {
    if m == 0 {
        return Err(PathError::InvalidArgument("m must be at least 1".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(PathError::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    let pool = k_shortest_paths(net, weights, src, dst, OVERSAMPLING * m)?;
    let mut routes: Vec<Route> = Vec::with_capacity(m);
    for route in pool {
        if routes.len() == m {
            break;
        }
        if routes.iter().all(|kept| weighted_jaccard(net, kept, &route) <= tau) {
            routes.push(route);
        }
    }
    Ok(CandidateSet {
        origin: src,
        dest: dst,
        routes,
        assigned_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{NetworkFile, NodeRecord, SegmentRecord};

    /// Builds a one-way network from `(from, to, length)` edge triples.
    pub(crate) fn digraph(n: u64, edges: &[(u64, u64, f64)]) -> RoadNetwork {
        let file = NetworkFile {
            nodes: (0..n)
                .map(|i| NodeRecord {
                    id: i.into(),
                    lon: i as f64 * 0.01,
                    lat: 0.0,
                })
                .collect(),
            segments: edges
                .iter()
                .enumerate()
                .map(|(i, &(a, b, len))| SegmentRecord {
                    id: (i as u64).into(),
                    from: a.into(),
                    to: b.into(),
                    length_m: len,
                    class: "primary".into(),
                    lanes: 1,
                    oneway: true,
                    speed_limit_kph: 36.0,
                })
                .collect(),
        };
        RoadNetwork::from_records(&file).unwrap()
    }

    fn ids(v: &[u32]) -> Vec<SegmentId> {
        v.iter().map(|&i| SegmentId(i)).collect()
    }

    // A=0, B=1, C=2, D=3; A->B 3, B->D 4, A->C 2, C->D 6.
    fn diamond() -> (RoadNetwork, Vec<f64>) {
        let edges = [(0, 1, 3.0), (1, 3, 4.0), (0, 2, 2.0), (2, 3, 6.0)];
        let net = digraph(4, &edges);
        let w = edges.iter().map(|e| e.2).collect();
        (net, w)
    }

    #[test]
    fn trivial_and_single_edge() {
        let (net, w) = diamond();
        let r = shortest_path(&net, &w, NodeId(0), NodeId(0)).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.total_weight_s, 0.0);
        let r = shortest_path(&net, &w, NodeId(0), NodeId(1)).unwrap();
        assert_eq!(r.segment_ids, ids(&[0]));
        assert_eq!(r.total_weight_s, 3.0);
    }

    #[test]
    fn diamond_paths() {
        let (net, w) = diamond();
        let r = shortest_path(&net, &w, NodeId(0), NodeId(3)).unwrap();
        assert_eq!(r.segment_ids, ids(&[0, 1]));
        assert_eq!(r.total_weight_s, 7.0);
        let all = k_shortest_paths(&net, &w, NodeId(0), NodeId(3), 2).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!((all[0].segment_ids.clone(), all[0].total_weight_s), (ids(&[0, 1]), 7.0));
        assert_eq!((all[1].segment_ids.clone(), all[1].total_weight_s), (ids(&[2, 3]), 8.0));
        let all = k_shortest_paths(&net, &w, NodeId(0), NodeId(3), 5).unwrap();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn no_path_and_bad_inputs() {
        let (net, w) = diamond();
        assert_eq!(
            shortest_path(&net, &w, NodeId(3), NodeId(0)),
            Err(PathError::NoPath { src: 3, dst: 0 })
        );
        assert!(matches!(
            k_shortest_paths(&net, &w, NodeId(0), NodeId(3), 0),
            Err(PathError::InvalidArgument(_))
        ));
        let mut bad = w.clone();
        bad[2] = 0.0;
        assert!(matches!(
            shortest_path(&net, &bad, NodeId(0), NodeId(3)),
            Err(PathError::BadWeight { segment: 2, .. })
        ));
        assert!(matches!(
            shortest_path(&net, &w[..2], NodeId(0), NodeId(3)),
            Err(PathError::WeightLength { .. })
        ));
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        // Two equal-weight paths 0->1->3 (segments 2,3) and 0->2->3 (0,1).
        let edges = [(0, 2, 1.0), (2, 3, 1.0), (0, 1, 1.0), (1, 3, 1.0)];
        let net = digraph(4, &edges);
        let w: Vec<f64> = edges.iter().map(|e| e.2).collect();
        let all = k_shortest_paths(&net, &w, NodeId(0), NodeId(3), 2).unwrap();
        assert_eq!(all[0].segment_ids, ids(&[0, 1]));
        assert_eq!(all[1].segment_ids, ids(&[2, 3]));
    }

    #[test]
    fn jaccard_examples() {
        // a: 100 m, b: 200 m, c: 300 m
        let net = digraph(4, &[(0, 1, 100.0), (1, 2, 200.0), (2, 3, 300.0)]);
        let r = |v: &[u32]| Route::from_segments(&net, &[1.0, 1.0, 1.0], ids(v));
        assert_eq!(weighted_jaccard(&net, &r(&[0, 1]), &r(&[0, 1])), 1.0);
        assert_eq!(weighted_jaccard(&net, &r(&[0]), &r(&[2])), 0.0);
        let j = weighted_jaccard(&net, &r(&[0, 1]), &r(&[1, 2]));
        assert!((j - 200.0 / 600.0).abs() < 1e-12);
        assert_eq!(weighted_jaccard(&net, &r(&[]), &r(&[])), 1.0);
    }

    #[test]
    fn candidate_filter_rules() {
        let net = digraph(2, &[(0, 1, 10.0)]);
        let c = candidate_set(&net, &[1.0], NodeId(0), NodeId(1), 5, 0.8).unwrap();
        assert_eq!(c.routes.len(), 1);
        assert_eq!(c.assigned_index, 0);

        // Two routes sharing a 900 m trunk: overlap 900/1100 > 0.8.
        let net = digraph(
            4,
            &[(0, 1, 900.0), (1, 3, 100.0), (1, 2, 50.0), (2, 3, 50.0), (0, 3, 5000.0)],
        );
        let w = [9.0, 1.0, 1.0, 1.0, 50.0];
        let c = candidate_set(&net, &w, NodeId(0), NodeId(3), 5, 0.8).unwrap();
        assert_eq!(c.routes.len(), 2);
        assert_eq!(c.routes[0].segment_ids, ids(&[0, 1]));
        assert_eq!(c.routes[1].segment_ids, ids(&[4]));
        assert!(candidate_set(&net, &w, NodeId(0), NodeId(3), 5, 0.0).is_err());
        assert!(candidate_set(&net, &w, NodeId(0), NodeId(3), 0, 0.5).is_err());
    }
}
