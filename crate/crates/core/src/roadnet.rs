//! Road-network model: segments as graph nodes, directed connectivity
//! between them, per-segment attributes, and the normalized feature vectors
//! fed to the spatial encoder.
//!
//! A loaded [`RoadNetwork`] is immutable; shared references may be used from
//! many threads at once. Beyond the real segments there is one implicit
//! virtual start node with id `|V|`: it has a directed edge to every real
//! segment (and none back), is excluded from real-hop queries, and carries
//! an all-zero feature vector.

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Index of a real road segment, dense in `0..|V|`.
pub type SegmentId = usize;

/// Road class of a segment; the set has exactly eight members so the one-hot
/// encoding is 8-dim.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SegType {
    Motorway,
    Trunk,
    Primary,
    Secondary,
    Tertiary,
    Residential,
    Service,
    Other,
}

impl SegType {
    pub const ALL: [SegType; 8] = [
        SegType::Motorway,
        SegType::Trunk,
        SegType::Primary,
        SegType::Secondary,
        SegType::Tertiary,
        SegType::Residential,
        SegType::Service,
        SegType::Other,
    ];

    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            SegType::Motorway => "motorway",
            SegType::Trunk => "trunk",
            SegType::Primary => "primary",
            SegType::Secondary => "secondary",
            SegType::Tertiary => "tertiary",
            SegType::Residential => "residential",
            SegType::Service => "service",
            SegType::Other => "other",
        }
    }
}

impl fmt::Display for SegType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SegType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown segment type {s:?}"))
    }
}

/// Static attributes of one road segment. Degrees are derived from the edge
/// list at load time, never read from the file.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    pub length_m: f64,
    pub max_speed_kmh: f64,
    pub avg_travel_time_s: f64,
    pub direction_deg: f64,
    pub seg_type: SegType,
    pub out_degree: usize,
    pub in_degree: usize,
}

/// Directed segment graph plus attributes. Construct via [`RoadNetwork::new`]
/// or [`load_network`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    features: Vec<SegmentFeatures>,
    /// Planar segment-midpoint coordinates in meters, when the source
    /// provides them. All-or-nothing.
    coords: Option<Vec<(f64, f64)>>,
    out_edges: Vec<Vec<SegmentId>>,
    in_edges: Vec<Vec<SegmentId>>,
}

impl RoadNetwork {
    /// Assembles a network from attributes and directed edges. Degree fields
    /// in `features` are overwritten from the edge list. Rejects self-loops,
    /// dangling endpoints, and non-positive lengths; duplicate edges
    /// collapse to one.
    pub fn new(
        mut features: Vec<SegmentFeatures>,
        edges: &[(SegmentId, SegmentId)],
        coords: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        let n = features.len();
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::validation(format!(
                    "{} coordinate pairs for {} segments",
                    c.len(),
                    n
                )));
            }
        }
        for (id, f) in features.iter().enumerate() {
            if !(f.length_m > 0.0) {
                return Err(Error::validation(format!(
                    "segment {id} has non-positive length {}",
                    f.length_m
                )));
            }
            if f.max_speed_kmh < 0.0 || f.avg_travel_time_s < 0.0 {
                return Err(Error::validation(format!(
                    "segment {id} has negative speed or travel time"
                )));
            }
            if !(0.0..360.0).contains(&f.direction_deg) {
                return Err(Error::validation(format!(
                    "segment {id} direction {} outside [0, 360)",
                    f.direction_deg
                )));
            }
        }
        let mut out_sets: Vec<BTreeSet<SegmentId>> = vec![BTreeSet::new(); n];
        let mut in_sets: Vec<BTreeSet<SegmentId>> = vec![BTreeSet::new(); n];
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(Error::integrity(format!(
                    "edge ({src}, {dst}) references a segment outside 0..{n}"
                )));
            }
            if src == dst {
                return Err(Error::integrity(format!("self-loop edge on segment {src}")));
            }
            out_sets[src].insert(dst);
            in_sets[dst].insert(src);
        }
        for id in 0..n {
            features[id].out_degree = out_sets[id].len();
            features[id].in_degree = in_sets[id].len();
        }
        Ok(RoadNetwork {
            features,
            coords,
            out_edges: out_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            in_edges: in_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n_segments(&self) -> usize {
        self.features.len()
    }

    /// Id of the implicit virtual start node (`|V|`).
    pub fn virtual_id(&self) -> usize {
        self.features.len()
    }

    /// The virtual node points at every real segment.
    pub fn virtual_out_degree(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, id: SegmentId) -> &SegmentFeatures {
        &self.features[id]
    }

    pub fn features(&self) -> &[SegmentFeatures] {
        &self.features
    }

    /// Real out-neighbors, ascending. Virtual edges never appear here.
    pub fn out_neighbors(&self, id: SegmentId) -> &[SegmentId] {
        &self.out_edges[id]
    }

    /// Real in-neighbors, ascending.
    pub fn in_neighbors(&self, id: SegmentId) -> &[SegmentId] {
        &self.in_edges[id]
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        id < self.features.len()
    }

    /// Midpoint coordinates if the source carried them.
    pub fn coords(&self) -> Option<&[(f64, f64)]> {
        self.coords.as_deref()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    /// Mean real-segment length in meters (used by the masking thresholds).
    pub fn mean_length(&self) -> f64 {
        if self.features.is_empty() {
            return 0.0;
        }
        self.features.iter().map(|f| f.length_m).sum::<f64>() / self.features.len() as f64
    }
}

/// Union of the 1..=hops BFS frontiers along out-edges, ascending. The start
/// segment appears only if a cycle returns to it. Virtual edges are ignored.
pub fn neighbors(net: &RoadNetwork, id: SegmentId, hops: usize) -> Result<BTreeSet<SegmentId>> {
    if !net.contains(id) {
        return Err(Error::validation(format!(
            "segment id {id} out of range 0..{}",
            net.n_segments()
        )));
    }
    // `seen` is the result set; the start is absent from it initially, so it
    // only enters when some walk cycles back.
    let mut seen: BTreeSet<SegmentId> = BTreeSet::new();
    let mut frontier: BTreeSet<SegmentId> = [id].into();
    for _ in 0..hops {
        let mut next = BTreeSet::new();
        for &u in &frontier {
            for &v in net.out_neighbors(u) {
                if !seen.contains(&v) {
                    next.insert(v);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        seen.extend(next.iter().copied());
        frontier = next;
    }
    Ok(seen)
}

/// Min/max of the four continuous attributes over all real segments, used
/// for min-max normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureStats {
    pub speed: (f64, f64),
    pub travel_time: (f64, f64),
    pub direction: (f64, f64),
    pub length: (f64, f64),
}

impl FeatureStats {
    pub fn from_network(net: &RoadNetwork) -> Self {
        let fold = |get: fn(&SegmentFeatures) -> f64| {
            net.features().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                (lo.min(get(f)), hi.max(get(f)))
            })
        };
        FeatureStats {
            speed: fold(|f| f.max_speed_kmh),
            travel_time: fold(|f| f.avg_travel_time_s),
            direction: fold(|f| f.direction_deg),
            length: fold(|f| f.length_m),
        }
    }
}

/// Dimension of the encoder input feature vector: four normalized scalars
/// plus the 8-way type one-hot.
pub const FEATURE_DIM: usize = 4 + SegType::COUNT;

fn minmax(v: f64, (lo, hi): (f64, f64)) -> Real {
    if hi > lo {
        ((v - lo) / (hi - lo)) as Real
    } else {
        0.0 // degenerate range: all segments share the value
    }
}

/// Normalized input vector for one segment:
/// `[max_speed, avg_travel_time, direction, length]` min-max scaled to
/// `[0, 1]`, concatenated with the type one-hot. The virtual node gets all
/// zeros.
pub fn initial_feature_vector(net: &RoadNetwork, stats: &FeatureStats, id: usize) -> [Real; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    if id == net.virtual_id() {
        return out;
    }
    let f = net.feature(id);
    out[0] = minmax(f.max_speed_kmh, stats.speed);
    out[1] = minmax(f.avg_travel_time_s, stats.travel_time);
    out[2] = minmax(f.direction_deg, stats.direction);
    out[3] = minmax(f.length_m, stats.length);
    out[4 + f.seg_type.index()] = 1.0;
    out
}

/// Stacks feature vectors for all `|V| + 1` nodes (virtual last row).
pub fn initial_feature_matrix(net: &RoadNetwork, stats: &FeatureStats) -> Tensor {
    let n = net.n_segments() + 1;
    let mut data = Vec::with_capacity(n * FEATURE_DIM);
    for id in 0..n {
        data.extend_from_slice(&initial_feature_vector(net, stats, id));
    }
    Tensor::new(n, FEATURE_DIM, data)
}

/// Reads the sectioned text format written by [`save_network`]:
///
/// ```text
/// [nodes]
/// id,length_m,max_speed_kmh,avg_tt_s,direction_deg,seg_type[,x_m,y_m]
/// [edges]
/// src,dst
/// ```
///
/// `#` starts a comment; blank lines are skipped. Node ids must cover
/// `0..n` exactly. Coordinates are optional but all-or-nothing.
pub fn load_network(path: &Path) -> Result<RoadNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Nodes,
        Edges,
    }
    let mut section = Section::None;
    let mut rows: Vec<(usize, SegmentFeatures, Option<(f64, f64)>)> = Vec::new();
    let mut edges: Vec<(SegmentId, SegmentId)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[nodes]" => {
                section = Section::Nodes;
                continue;
            }
            "[edges]" => {
                section = Section::Edges;
                continue;
            }
            _ => {}
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match section {
            Section::None => {
                return Err(parse_err(lineno, "data before any [nodes]/[edges] header".into()))
            }
            Section::Nodes => {
                if fields.len() != 6 && fields.len() != 8 {
                    return Err(parse_err(
                        lineno,
                        format!("expected 6 or 8 node fields, got {}", fields.len()),
                    ));
                }
                let num = |i: usize| -> Result<f64> {
                    fields[i]
                        .parse::<f64>()
                        .map_err(|_| parse_err(lineno, format!("bad number {:?}", fields[i])))
                };
                let id = fields[0]
                    .parse::<usize>()
                    .map_err(|_| parse_err(lineno, format!("bad segment id {:?}", fields[0])))?;
                let seg_type = SegType::from_str(fields[5]).map_err(|m| parse_err(lineno, m))?;
                let feat = SegmentFeatures {
                    length_m: num(1)?,
                    max_speed_kmh: num(2)?,
                    avg_travel_time_s: num(3)?,
                    direction_deg: num(4)?,
                    seg_type,
                    out_degree: 0,
                    in_degree: 0,
                };
                let coord = if fields.len() == 8 {
                    Some((num(6)?, num(7)?))
                } else {
                    None
                };
                rows.push((id, feat, coord));
            }
            Section::Edges => {
                if fields.len() != 2 {
                    return Err(parse_err(
                        lineno,
                        format!("expected 2 edge fields, got {}", fields.len()),
                    ));
                }
                let ep = |i: usize| -> Result<usize> {
                    fields[i]
                        .parse::<usize>()
                        .map_err(|_| parse_err(lineno, format!("bad edge endpoint {:?}", fields[i])))
                };
                edges.push((ep(0)?, ep(1)?));
            }
        }
    }

    let n = rows.len();
    let mut features: Vec<Option<SegmentFeatures>> = vec![None; n];
    let mut coords: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut with_coords = 0usize;
    for (id, feat, coord) in rows {
        if id >= n {
            return Err(Error::integrity(format!(
                "segment ids are not dense: id {id} with only {n} node rows"
            )));
        }
        if features[id].is_some() {
            return Err(Error::integrity(format!("duplicate node row for segment {id}")));
        }
        if coord.is_some() {
            with_coords += 1;
        }
        features[id] = Some(feat);
        coords[id] = coord;
    }
    if with_coords != 0 && with_coords != n {
        return Err(Error::validation(format!(
            "coordinates on {with_coords} of {n} node rows; must be all or none"
        )));
    }
    let features: Vec<SegmentFeatures> = features.into_iter().map(Option::unwrap).collect();
    let coords = if with_coords == n && n > 0 {
        Some(coords.into_iter().map(Option::unwrap).collect())
    } else {
        None
    };
    RoadNetwork::new(features, &edges, coords)
}

/// Writes the format read by [`load_network`]. Floats use the shortest
/// round-trip representation, so load -> save -> load is lossless.
pub fn save_network(net: &RoadNetwork, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("# road network: segments as nodes, directed connectivity as edges\n");
    out.push_str("[nodes]\n");
    for id in 0..net.n_segments() {
        let f = net.feature(id);
        out.push_str(&format!(
            "{id},{},{},{},{},{}",
            f.length_m, f.max_speed_kmh, f.avg_travel_time_s, f.direction_deg, f.seg_type
        ));
        if let Some(c) = net.coords() {
            out.push_str(&format!(",{},{}", c[id].0, c[id].1));
        }
        out.push('\n');
    }
    out.push_str("[edges]\n");
    for src in 0..net.n_segments() {
        for &dst in net.out_neighbors(src) {
            out.push_str(&format!("{src},{dst}\n"));
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
