//! Directed road network, its line-graph view and the CSV file pair it is
//! stored in.
//!
//! `segments.csv` columns:
//! `id,from_node,to_node,length_m,speed_limit_kmh,elev_change_m,road_type,lane_count,is_bridge,start_ep_type,end_ep_type,direction_deg`
//!
//! `nodes.csv` has a single `id` column. Direction angles are degrees
//! clockwise from north.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{file}: line {line}: {msg}")]
    Parse {
        file: String,
        line: u64,
        msg: String,
    },
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("segments {0} and {1} are not consecutive")]
    NotAdjacent(SegmentId, SegmentId),
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    #[serde(rename = "length_m")]
    pub length: f64,
    #[serde(rename = "speed_limit_kmh")]
    pub speed_limit: f64,
    #[serde(rename = "elev_change_m")]
    pub elevation_change: f64,
    pub road_type: u32,
    pub lane_count: u32,
    #[serde(with = "bool_as_int")]
    pub is_bridge: bool,
    #[serde(rename = "start_ep_type")]
    pub start_endpoint_type: u32,
    #[serde(rename = "end_ep_type")]
    pub end_endpoint_type: u32,
    #[serde(rename = "direction_deg")]
    pub direction_angle: f64,
}

mod bool_as_int {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match String::deserialize(d)?.trim() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(D::Error::custom(format!("expected 0/1, got {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    id: NodeId,
}

/// Validated, immutable road network. Segments are stored in id order and
/// addressed internally by dense index.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    nodes: BTreeSet<NodeId>,
    index: HashMap<SegmentId, usize>,
    successors: Vec<Vec<usize>>,
}

impl RoadNetwork {
    /// Validates and indexes a network.
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        segments: Vec<RoadSegment>,
    ) -> Result<Self, NetworkError> {
        let nodes: BTreeSet<NodeId> = nodes.into_iter().collect();
        let mut segments = segments;
        segments.sort_by_key(|s| s.id);
        let mut index = HashMap::with_capacity(segments.len());
        let mut pairs = BTreeSet::new();
        for (i, s) in segments.iter().enumerate() {
            let fail = |msg: String| Err(NetworkError::Validation(format!("segment {}: {msg}", s.id)));
            if index.insert(s.id, i).is_some() {
                return fail("duplicate id".into());
            }
            if !(s.length > 0.0 && s.length.is_finite()) {
                return fail(format!("length must be > 0, got {}", s.length));
            }
            if !(s.speed_limit > 0.0 && s.speed_limit.is_finite()) {
                return fail(format!("speed limit must be > 0, got {}", s.speed_limit));
            }
            if !s.elevation_change.is_finite() {
                return fail("elevation change not finite".into());
            }
            if !(0.0..360.0).contains(&s.direction_angle) {
                return fail(format!("direction {} outside [0, 360)", s.direction_angle));
            }
            if s.from_node == s.to_node {
                return fail("self-loop".into());
            }
            for n in [s.from_node, s.to_node] {
                if !nodes.contains(&n) {
                    return fail(format!("dangling node reference {}", n.0));
                }
            }
            if !pairs.insert((s.from_node, s.to_node)) {
                return fail("parallel duplicate of an existing segment".into());
            }
        }
        let mut outgoing: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (i, s) in segments.iter().enumerate() {
            outgoing.entry(s.from_node).or_default().push(i);
        }
        let successors = segments
            .iter()
            .map(|s| outgoing.get(&s.to_node).cloned().unwrap_or_default())
            .collect();
        Ok(Self {
            segments,
            nodes,
            index,
            successors,
        })
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn index_of(&self, id: SegmentId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn segment(&self, id: SegmentId) -> Result<&RoadSegment, NetworkError> {
        self.index_of(id)
            .map(|i| &self.segments[i])
            .ok_or(NetworkError::UnknownSegment(id))
    }

    pub fn by_index(&self, i: usize) -> &RoadSegment {
        &self.segments[i]
    }

    /// Dense indices of segments leaving the head node of segment `i`.
    pub fn successors(&self, i: usize) -> &[usize] {
        &self.successors[i]
    }

    /// Successor lists keyed by segment id.
    pub fn adjacency(&self) -> BTreeMap<SegmentId, Vec<SegmentId>> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let next = self.successors[i].iter().map(|&j| self.segments[j].id).collect();
                (s.id, next)
            })
            .collect()
    }

    /// Edge-to-vertex dual: one vertex per segment (dense index), an edge
    /// `a -> b` whenever `to_node(a) == from_node(b)`.
    pub fn line_graph(&self) -> LineGraph {
        LineGraph {
            ids: self.segments.iter().map(|s| s.id).collect(),
            successors: self.successors.clone(),
        }
    }

    /// Checks that consecutive path segments share an intersection.
    pub fn validate_path(&self, path: &[SegmentId]) -> Result<(), NetworkError> {
        if path.is_empty() {
            return Err(NetworkError::Validation("empty path".into()));
        }
        for w in path.windows(2) {
            let a = self.segment(w[0])?;
            let b = self.segment(w[1])?;
            if a.to_node != b.from_node {
                return Err(NetworkError::NotAdjacent(a.id, b.id));
            }
        }
        self.segment(path[path.len() - 1])?;
        Ok(())
    }
}

/// Line graph over dense segment indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineGraph {
    pub ids: Vec<SegmentId>,
    pub successors: Vec<Vec<usize>>,
}

impl LineGraph {
    pub fn from_adjacency(successors: Vec<Vec<usize>>) -> Self {
        let ids = (0..successors.len() as u32).map(SegmentId).collect();
        Self { ids, successors }
    }

    pub fn vertex_count(&self) -> usize {
        self.successors.len()
    }

    pub fn edges(&self) -> Vec<(SegmentId, SegmentId)> {
        self.successors
            .iter()
            .enumerate()
            .flat_map(|(a, next)| next.iter().map(move |&b| (a, b)))
            .map(|(a, b)| (self.ids[a], self.ids[b]))
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.successors[a].contains(&b)
    }
}

/// Absolute difference of direction angles folded into `[0, 180]`.
pub fn heading_change(from_deg: f64, to_deg: f64) -> f64 {
    let d = (to_deg - from_deg).abs() % 360.0;
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Turning angle from `a` onto `b`; `b` must leave the node `a` enters.
pub fn turn_angle(a: &RoadSegment, b: &RoadSegment) -> Result<f64, NetworkError> {
    if a.to_node != b.from_node {
        return Err(NetworkError::NotAdjacent(a.id, b.id));
    }
    Ok(heading_change(a.direction_angle, b.direction_angle))
}

fn parse_error(file: &str, e: csv::Error) -> NetworkError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    NetworkError::Parse {
        file: file.to_string(),
        line,
        msg: e.to_string(),
    }
}

/// Reads `nodes.csv` and `segments.csv` from `dir`.
pub fn load_network(dir: &Path) -> Result<RoadNetwork, NetworkError> {
    let mut nodes = Vec::new();
    let mut rdr = csv::Reader::from_path(dir.join("nodes.csv")).map_err(|e| parse_error("nodes.csv", e))?;
    for row in rdr.deserialize::<NodeRow>() {
        nodes.push(row.map_err(|e| parse_error("nodes.csv", e))?.id);
    }
    let mut segments = Vec::new();
    let mut rdr =
        csv::Reader::from_path(dir.join("segments.csv")).map_err(|e| parse_error("segments.csv", e))?;
    for row in rdr.deserialize::<RoadSegment>() {
        segments.push(row.map_err(|e| parse_error("segments.csv", e))?);
    }
    RoadNetwork::new(nodes, segments)
}

/// Writes `nodes.csv` and `segments.csv` into `dir`, creating it if needed.
pub fn save_network(net: &RoadNetwork, dir: &Path) -> Result<(), NetworkError> {
    fs::create_dir_all(dir)?;
    let io = |e: csv::Error| NetworkError::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(dir.join("nodes.csv")).map_err(io)?;
    for &id in &net.nodes {
        w.serialize(NodeRow { id }).map_err(io)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("segments.csv")).map_err(io)?;
    for s in &net.segments {
        w.serialize(s).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
