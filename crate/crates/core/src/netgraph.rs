//! Road network model: junctions, directed road segments, the relational
//! segment adjacency consumed by the graph model, and GPS point snapping.
//!
//! Two-way roads are stored as two directed segments that share a logical
//! road id and point at each other through [`RoadSegment::twin`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean earth radius used by [`haversine_m`].
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Largest accepted distance between a GPS fix and the node it snaps to.
pub const SNAP_RADIUS_M: f64 = 100.0;

const KPH_TO_MPS: f64 = 1000.0 / 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

impl SegmentId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier as it appears in a network file. Numeric ids order before
/// named ones, numerically among themselves.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExternalId {
    Num(u64),
    Name(String),
}

impl fmt::Display for ExternalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExternalId::Num(n) => write!(f, "{n}"),
            ExternalId::Name(s) => f.write_str(s),
        }
    }
}

impl From<u64> for ExternalId {
    fn from(n: u64) -> Self {
        ExternalId::Num(n)
    }
}

impl From<&str> for ExternalId {
    fn from(s: &str) -> Self {
        ExternalId::Name(s.to_owned())
    }
}

/// The nine road classes a segment can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadClass {
    Trunk,
    TrunkLink,
    FreewayLink,
    Primary,
    PrimaryLink,
    Secondary,
    SecondaryLink,
    Tertiary,
    TertiaryLink,
}

impl RoadClass {
    pub const COUNT: usize = 9;

    pub const ALL: [RoadClass; Self::COUNT] = [
        RoadClass::Trunk,
        RoadClass::TrunkLink,
        RoadClass::FreewayLink,
        RoadClass::Primary,
        RoadClass::PrimaryLink,
        RoadClass::Secondary,
        RoadClass::SecondaryLink,
        RoadClass::Tertiary,
        RoadClass::TertiaryLink,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::Trunk => "trunk",
            RoadClass::TrunkLink => "trunk_link",
            RoadClass::FreewayLink => "freeway_link",
            RoadClass::Primary => "primary",
            RoadClass::PrimaryLink => "primary_link",
            RoadClass::Secondary => "secondary",
            RoadClass::SecondaryLink => "secondary_link",
            RoadClass::Tertiary => "tertiary",
            RoadClass::TertiaryLink => "tertiary_link",
        }
    }

    pub fn parse(s: &str) -> Option<RoadClass> {
        RoadClass::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Parses a class name, mapping anything outside the nine known classes
    /// (e.g. "residential") to tertiary.
    pub fn parse_lenient(s: &str) -> (RoadClass, bool) {
        match RoadClass::parse(s) {
            Some(c) => (c, true),
            None => (RoadClass::Tertiary, false),
        }
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub key: ExternalId,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub id: SegmentId,
    /// Logical road id shared by both directions of a two-way road.
    pub road_id: ExternalId,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub road_class: RoadClass,
    pub lanes: u32,
    pub oneway: bool,
    pub speed_limit_kph: f64,
    pub speed_limit_mps: f64,
    /// Opposite direction of a two-way road.
    pub twin: Option<SegmentId>,
    /// True for the direction synthesized from a two-way record.
    pub reversed: bool,
}

/// Free-flow traversal time `length / speed limit`, in seconds.
#[inline]
pub fn segment_base_time(seg: &RoadSegment) -> f64 {
    seg.length_m / seg.speed_limit_mps
}

/// Great-circle distance in meters between two WGS84 points given in degrees.
pub fn haversine_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed network document at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("segment record #{index} (id {id}): {message}")]
    InvalidSegment {
        index: usize,
        id: String,
        message: String,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("segments reference missing nodes: {}", .missing.join(", "))]
    DanglingNodes { missing: Vec<String> },
    #[error("network has no nodes")]
    Empty,
    #[error("no node within {radius_m} m of ({lon}, {lat}); nearest is {nearest_m:.1} m away")]
    NoNodeInRange {
        lon: f64,
        lat: f64,
        nearest_m: f64,
        radius_m: f64,
    },
}

/// On-disk node record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: ExternalId,
    pub lon: f64,
    pub lat: f64,
}

/// On-disk road record. A record with `oneway == false` describes both
/// directions of the road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: ExternalId,
    pub from: ExternalId,
    pub to: ExternalId,
    pub length_m: f64,
    pub class: String,
    pub lanes: u32,
    pub oneway: bool,
    pub speed_limit_kph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub nodes: Vec<NodeRecord>,
    pub segments: Vec<SegmentRecord>,
}

/// Directed road network. Immutable once built.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    segments: Vec<RoadSegment>,
    outgoing: Vec<Vec<SegmentId>>,
    incoming: Vec<Vec<SegmentId>>,
    key_index: HashMap<ExternalId, NodeId>,
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.segments == other.segments
    }
}

impl RoadNetwork {
    /// Builds and validates a network from file records. Two-way records
    /// expand into a forward segment followed immediately by its reverse.
    pub fn from_records(file: &NetworkFile) -> Result<Self, NetworkError> {
        let mut nodes = Vec::with_capacity(file.nodes.len());
        let mut key_index = HashMap::with_capacity(file.nodes.len());
        for rec in &file.nodes {
            let id = NodeId(nodes.len() as u32);
            if key_index.insert(rec.id.clone(), id).is_some() {
                return Err(NetworkError::DuplicateNode(rec.id.to_string()));
            }
            nodes.push(Node {
                key: rec.id.clone(),
                lon: rec.lon,
                lat: rec.lat,
            });
        }

        let missing: BTreeSet<&ExternalId> = file
            .segments
            .iter()
            .flat_map(|s| [&s.from, &s.to])
            .filter(|k| !key_index.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(NetworkError::DanglingNodes {
                missing: missing.into_iter().map(|k| k.to_string()).collect(),
            });
        }

        let mut segments: Vec<RoadSegment> = Vec::with_capacity(file.segments.len() * 2);
        for (index, rec) in file.segments.iter().enumerate() {
            let invalid = |message: String| NetworkError::InvalidSegment {
                index,
                id: rec.id.to_string(),
                message,
            };
            if !(rec.length_m > 0.0 && rec.length_m.is_finite()) {
                return Err(invalid(format!("length_m must be positive, got {}", rec.length_m)));
            }
            if !(rec.speed_limit_kph > 0.0 && rec.speed_limit_kph.is_finite()) {
                return Err(invalid(format!(
                    "speed_limit_kph must be positive, got {}",
                    rec.speed_limit_kph
                )));
            }
            if rec.lanes == 0 {
                return Err(invalid("lanes must be at least 1".into()));
            }
            let (road_class, known) = RoadClass::parse_lenient(&rec.class);
            if !known {
                warn!(
                    "segment {}: unknown road class {:?}, treating it as tertiary",
                    rec.id, rec.class
                );
            }
            let from = key_index[&rec.from];
            let to = key_index[&rec.to];
            let forward = SegmentId(segments.len() as u32);
            let base = RoadSegment {
                id: forward,
                road_id: rec.id.clone(),
                from,
                to,
                length_m: rec.length_m,
                road_class,
                lanes: rec.lanes,
                oneway: rec.oneway,
                speed_limit_kph: rec.speed_limit_kph,
                speed_limit_mps: rec.speed_limit_kph * KPH_TO_MPS,
                twin: None,
                reversed: false,
            };
            if rec.oneway {
                segments.push(base);
            } else {
                let backward = SegmentId(forward.0 + 1);
                let reverse = RoadSegment {
                    id: backward,
                    from: to,
                    to: from,
                    twin: Some(forward),
                    reversed: true,
                    ..base.clone()
                };
                segments.push(RoadSegment {
                    twin: Some(backward),
                    ..base
                });
                segments.push(reverse);
            }
        }

        let mut outgoing = vec![Vec::new(); nodes.len()];
        let mut incoming = vec![Vec::new(); nodes.len()];
        for seg in &segments {
            outgoing[seg.from.index()].push(seg.id);
            incoming[seg.to.index()].push(seg.id);
        }

        Ok(RoadNetwork {
            nodes,
            segments,
            outgoing,
            incoming,
            key_index,
        })
    }

    /// Inverse of [`RoadNetwork::from_records`].
    pub fn to_records(&self) -> NetworkFile {
        NetworkFile {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.key.clone(),
                    lon: n.lon,
                    lat: n.lat,
                })
                .collect(),
            segments: self
                .segments
                .iter()
                .filter(|s| !s.reversed)
                .map(|s| SegmentRecord {
                    id: s.road_id.clone(),
                    from: self.nodes[s.from.index()].key.clone(),
                    to: self.nodes[s.to.index()].key.clone(),
                    length_m: s.length_m,
                    class: s.road_class.as_str().to_owned(),
                    lanes: s.lanes,
                    oneway: s.oneway,
                    speed_limit_kph: s.speed_limit_kph,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let file: NetworkFile = serde_json::from_str(text).map_err(|e| NetworkError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_records(&file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_records()).expect("network records serialize")
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &RoadSegment {
        &self.segments[id.index()]
    }

    pub fn outgoing(&self, node: NodeId) -> &[SegmentId] {
        &self.outgoing[node.index()]
    }

    pub fn incoming(&self, node: NodeId) -> &[SegmentId] {
        &self.incoming[node.index()]
    }

    pub fn node_by_key(&self, key: &ExternalId) -> Option<NodeId> {
        self.key_index.get(key).copied()
    }

    /// Free-flow time of every segment, indexed by segment id.
    pub fn base_times(&self) -> Vec<f64> {
        self.segments.iter().map(segment_base_time).collect()
    }

    /// Nearest node by great-circle distance; ties go to the smaller
    /// external id so the answer does not depend on storage order.
    pub fn nearest_node(&self, lon: f64, lat: f64) -> Option<(NodeId, f64)> {
        let mut best: Option<(NodeId, f64)> = None;
        for (i, node) in self.nodes.iter().enumerate() {
            let d = haversine_m(lon, lat, node.lon, node.lat);
            let better = match best {
                None => true,
                Some((b, bd)) => d < bd || (d == bd && node.key < self.nodes[b.index()].key),
            };
            if better {
                best = Some((NodeId(i as u32), d));
            }
        }
        best
    }

    /// Snaps a GPS fix to the nearest node within [`SNAP_RADIUS_M`].
    pub fn snap_point(&self, lon: f64, lat: f64) -> Result<NodeId, NetworkError> {
        let (node, dist) = self.nearest_node(lon, lat).ok_or(NetworkError::Empty)?;
        if dist > SNAP_RADIUS_M {
            return Err(NetworkError::NoNodeInRange {
                lon,
                lat,
                nearest_m: dist,
                radius_m: SNAP_RADIUS_M,
            });
        }
        Ok(node)
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<RoadNetwork, NetworkError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RoadNetwork::from_json(&text)
}

pub fn write_network(net: &RoadNetwork, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    let path = path.as_ref();
    fs::write(path, net.to_json()).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Segment-level neighbor lists split by relation type, where the relation
/// of a neighbor is its road class.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalAdjacency {
    /// `lists[relation][segment]`, each list sorted by segment id.
    lists: Vec<Vec<Vec<SegmentId>>>,
}

impl RelationalAdjacency {
    pub const NUM_RELATIONS: usize = RoadClass::COUNT;

    pub fn num_segments(&self) -> usize {
        self.lists.first().map_or(0, Vec::len)
    }

    pub fn neighbors(&self, seg: SegmentId, relation: RoadClass) -> &[SegmentId] {
        &self.lists[relation.index()][seg.index()]
    }

    /// Normalization constant `c_{i,r}`; `None` when the list is empty.
    pub fn norm(&self, seg: SegmentId, relation: RoadClass) -> Option<f64> {
        let n = self.neighbors(seg, relation).len();
        (n > 0).then_some(n as f64)
    }

    /// All neighbors of `seg` regardless of relation, sorted.
    pub fn all_neighbors(&self, seg: SegmentId) -> Vec<SegmentId> {
        let mut out: Vec<SegmentId> = RoadClass::ALL
            .iter()
            .flat_map(|&r| self.neighbors(seg, r).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

pub fn build_relational_adjacency(net: &RoadNetwork) -> RelationalAdjacency {
    let n = net.num_segments();
    let mut lists = vec![vec![Vec::new(); n]; RelationalAdjacency::NUM_RELATIONS];
    for seg in net.segments() {
        let touching: BTreeSet<SegmentId> = [seg.from, seg.to]
            .into_iter()
            .flat_map(|node| net.outgoing(node).iter().chain(net.incoming(node)))
            .copied()
            .filter(|&j| j != seg.id)
            .collect();
        for j in touching {
            let rel = net.segment(j).road_class.index();
            lists[rel][seg.id.index()].push(j);
        }
    }
    RelationalAdjacency { lists }
}
