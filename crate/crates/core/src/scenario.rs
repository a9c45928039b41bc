//! Deployment drops and anchor selection.
//!
//! A [`Scenario`] is a static snapshot of one positioning session: every node
//! has a fixed position, a scalar speed (reported, not simulated) and a clock
//! state filled in later by [`crate::clock`]. Scenarios are either generated
//! from a [`LayoutKind`] or loaded from a hand-written JSON node list:
//!
//! ```json
//! {
//!   "dimensionality": "two_d",
//!   "nodes": [
//!     { "id": 0, "role": "target_ue", "x": 0.0,   "y": 0.0, "z": 1.5 },
//!     { "id": 1, "role": "anchor_ue", "x": 100.0, "y": 0.0, "z": 1.5, "speed_mps": 20.0 }
//!   ]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::ops::{Add, Sub};

use nalgebra::{DMatrix, Vector3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::ClockState;
use crate::{Error, NodeId, Result};

/// Antenna height used for planar (2-D) drops, meters.
pub const PLANAR_HEIGHT_M: f64 = 1.5;
/// Minimum bumper-to-bumper spacing between vehicles in one lane.
pub const MIN_VEHICLE_GAP_M: f64 = 5.0;
/// Minimum separation between UEs in the grid and factory layouts.
pub const MIN_NODE_SEPARATION_M: f64 = 1.0;

const PLACEMENT_ATTEMPTS: usize = 1000;
const KMH: f64 = 1.0 / 3.6;

/// Cartesian position in meters; right-handed, z up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (*self - *other).norm()
    }

    pub fn horizontal_distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Arithmetic mean of a non-empty set of positions.
    pub fn centroid<'a>(points: impl IntoIterator<Item = &'a Position>) -> Option<Position> {
        let mut sum = Vector3::zeros();
        let mut n = 0usize;
        for p in points {
            sum += p.to_vector();
            n += 1;
        }
        (n > 0).then(|| Position::from_vector(&(sum / n as f64)))
    }
}

impl Sub for Position {
    type Output = Vector3<f64>;

    fn sub(self, rhs: Position) -> Vector3<f64> {
        Vector3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Add<Vector3<f64>> for Position {
    type Output = Position;

    fn add(self, rhs: Vector3<f64>) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    TargetUe,
    AnchorUe,
    Rsu,
    Bs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimensionality {
    #[default]
    TwoD,
    ThreeD,
}

impl Dimensionality {
    pub fn axes(self) -> usize {
        match self {
            Dimensionality::TwoD => 2,
            Dimensionality::ThreeD => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
    #[serde(flatten)]
    pub position: Position,
    #[serde(default)]
    pub speed_mps: f64,
    /// Direction of travel in the layout plane, radians from +x (east),
    /// counter-clockwise. Also the broadside direction of the node's array.
    #[serde(default)]
    pub heading_rad: f64,
    #[serde(default)]
    pub clock: ClockState,
}

impl Node {
    pub fn new(id: NodeId, role: NodeRole, position: Position) -> Self {
        Self {
            id,
            role,
            position,
            speed_mps: 0.0,
            heading_rad: 0.0,
            clock: ClockState::default(),
        }
    }
}

/// Axis-aligned box bounding a layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Position,
    pub max: Position,
}

impl Bounds {
    pub fn contains(&self, p: &Position) -> bool {
        const SLACK: f64 = 1e-9;
        p.x >= self.min.x - SLACK
            && p.x <= self.max.x + SLACK
            && p.y >= self.min.y - SLACK
            && p.y <= self.max.y + SLACK
            && p.z >= self.min.z - SLACK
            && p.z <= self.max.z + SLACK
    }

    fn enclosing(nodes: &[Node]) -> Bounds {
        let mut min = Position::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut max = Position::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for n in nodes {
            let p = n.position;
            min = Position::new(min.x.min(p.x), min.y.min(p.y), min.z.min(p.z));
            max = Position::new(max.x.max(p.x), max.y.max(p.y), max.z.max(p.z));
        }
        Bounds { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayoutKind {
    HighwayDrop {
        num_lanes: u32,
        lane_width_m: f64,
        segment_length_m: f64,
        /// Vehicles per meter per lane.
        vehicle_density_per_m: f64,
    },
    UrbanGrid {
        block_size_m: f64,
        road_width_m: f64,
        grid_extent_m: f64,
    },
    IndoorFactory {
        hall_length_m: f64,
        hall_width_m: f64,
        /// Probability in `[0, 1]` that clutter blocks a link regardless of distance.
        clutter_density: f64,
    },
    CustomFixed {
        nodes: Vec<Node>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    #[default]
    Nearest,
    Random,
    BestGdop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub layout: LayoutKind,
    pub n_anchors: usize,
    #[serde(default)]
    pub anchor_policy: AnchorPolicy,
    #[serde(default)]
    pub dimensionality: Dimensionality,
    /// Drop seed. The harness replaces it with a per-trial derived seed.
    #[serde(default)]
    pub seed: u64,
    /// Candidate anchor count for the grid and factory layouts
    /// (default: twice `n_anchors`). Highway drops derive it from density.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_anchors: Option<usize>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a positive finite number, got {v}")))
            }
        }
        match &self.layout {
            LayoutKind::HighwayDrop {
                num_lanes,
                lane_width_m,
                segment_length_m,
                vehicle_density_per_m,
            } => {
                if *num_lanes == 0 {
                    return Err(Error::Config("num_lanes must be at least 1".into()));
                }
                positive("lane_width_m", *lane_width_m)?;
                positive("segment_length_m", *segment_length_m)?;
                positive("vehicle_density_per_m", *vehicle_density_per_m)?;
                if *vehicle_density_per_m > 1.0 {
                    return Err(Error::Config(format!(
                        "vehicle_density_per_m must lie in (0, 1], got {vehicle_density_per_m}"
                    )));
                }
            }
            LayoutKind::UrbanGrid {
                block_size_m,
                road_width_m,
                grid_extent_m,
            } => {
                positive("block_size_m", *block_size_m)?;
                positive("road_width_m", *road_width_m)?;
                positive("grid_extent_m", *grid_extent_m)?;
                if grid_extent_m < road_width_m {
                    return Err(Error::Config("grid_extent_m must be at least road_width_m".into()));
                }
            }
            LayoutKind::IndoorFactory {
                hall_length_m,
                hall_width_m,
                clutter_density,
            } => {
                positive("hall_length_m", *hall_length_m)?;
                positive("hall_width_m", *hall_width_m)?;
                if !(0.0..=1.0).contains(clutter_density) {
                    return Err(Error::Config(format!(
                        "clutter_density must lie in [0, 1], got {clutter_density}"
                    )));
                }
            }
            LayoutKind::CustomFixed { nodes } => validate_nodes(nodes)?,
        }
        if self.n_anchors == 0 {
            return Err(Error::Config("n_anchors must be at least 1".into()));
        }
        if let Some(c) = self.candidate_anchors {
            if c < self.n_anchors {
                return Err(Error::Config(format!(
                    "candidate_anchors ({c}) is smaller than n_anchors ({})",
                    self.n_anchors
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub dimensionality: Dimensionality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    /// Distance-independent LoS blocking probability (factory clutter).
    #[serde(default)]
    pub los_blockage: f64,
    pub nodes: Vec<Node>,
}

impl Scenario {
    pub fn from_nodes(nodes: Vec<Node>, dimensionality: Dimensionality) -> Result<Self> {
        validate_nodes(&nodes)?;
        Ok(Self {
            dimensionality,
            bounds: Some(Bounds::enclosing(&nodes)),
            los_blockage: 0.0,
            nodes,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut s: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario JSON: {e}")))?;
        validate_nodes(&s.nodes)?;
        if s.bounds.is_none() {
            s.bounds = Some(Bounds::enclosing(&s.nodes));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds.unwrap_or_else(|| Bounds::enclosing(&self.nodes))
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// First node with the `TargetUe` role.
    pub fn target(&self) -> Option<&Node> {
        self.nodes.iter().find(|n| n.role == NodeRole::TargetUe)
    }

    pub fn positions(&self) -> BTreeMap<NodeId, Position> {
        self.nodes.iter().map(|n| (n.id, n.position)).collect()
    }
}

fn validate_nodes(nodes: &[Node]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for n in nodes {
        if !ids.insert(n.id) {
            return Err(Error::Config(format!("duplicate node id {}", n.id)));
        }
        if !n.position.is_finite() {
            return Err(Error::Config(format!("node {} has a non-finite position", n.id)));
        }
        if !(n.speed_mps.is_finite() && n.speed_mps >= 0.0) {
            return Err(Error::Config(format!("node {} has invalid speed {}", n.id, n.speed_mps)));
        }
    }
    if !nodes.iter().any(|n| n.role == NodeRole::TargetUe) {
        return Err(Error::Config("scenario has no target_ue node".into()));
    }
    Ok(())
}

/// Builds the drop described by `config`. Same config (including seed) gives
/// the same scenario.
pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dimensionality;
    let candidates = config.candidate_anchors.unwrap_or(2 * config.n_anchors);

    let scenario = match &config.layout {
        LayoutKind::HighwayDrop {
            num_lanes,
            lane_width_m,
            segment_length_m,
            vehicle_density_per_m,
        } => highway(
            &mut rng,
            dim,
            *num_lanes as usize,
            *lane_width_m,
            *segment_length_m,
            *vehicle_density_per_m,
        )?,
        LayoutKind::UrbanGrid {
            block_size_m,
            road_width_m,
            grid_extent_m,
        } => urban_grid(&mut rng, dim, *block_size_m, *road_width_m, *grid_extent_m, candidates)?,
        LayoutKind::IndoorFactory {
            hall_length_m,
            hall_width_m,
            clutter_density,
        } => {
            let mut s = factory(&mut rng, dim, *hall_length_m, *hall_width_m, candidates)?;
            s.los_blockage = *clutter_density;
            s
        }
        LayoutKind::CustomFixed { nodes } => Scenario::from_nodes(nodes.clone(), dim)?,
    };

    let available = scenario
        .nodes
        .iter()
        .filter(|n| n.role != NodeRole::TargetUe)
        .count();
    if available < config.n_anchors {
        return Err(Error::Config(format!(
            "layout yields {available} anchor candidates, {} requested",
            config.n_anchors
        )));
    }
    Ok(scenario)
}

fn height(rng: &mut ChaCha8Rng, dim: Dimensionality, lo: f64, hi: f64) -> f64 {
    match dim {
        Dimensionality::TwoD => PLANAR_HEIGHT_M,
        Dimensionality::ThreeD => rng.random_range(lo..=hi),
    }
}

fn z_range(dim: Dimensionality, lo: f64, hi: f64) -> (f64, f64) {
    match dim {
        Dimensionality::TwoD => (PLANAR_HEIGHT_M, PLANAR_HEIGHT_M),
        Dimensionality::ThreeD => (lo, hi),
    }
}

fn highway(
    rng: &mut ChaCha8Rng,
    dim: Dimensionality,
    lanes: usize,
    lane_width: f64,
    length: f64,
    density: f64,
) -> Result<Scenario> {
    const Z: (f64, f64) = (1.0, 4.0);
    let per_lane = (density * length).round() as usize;
    let mut occupied: Vec<Vec<f64>> = vec![Vec::new(); lanes];
    let mut nodes = Vec::with_capacity(per_lane * lanes + 1);

    let fits = |lane: &Vec<f64>, x: f64| lane.iter().all(|o| (o - x).abs() >= MIN_VEHICLE_GAP_M);
    let lane_y = |lane: usize| (lane as f64 + 0.5) * lane_width;

    // target sits in the central half of the segment so it has traffic on both sides
    let target_lane = rng.random_range(0..lanes);
    let target_x = rng.random_range(0.25 * length..=0.75 * length);
    occupied[target_lane].push(target_x);
    let mut target = Node::new(
        0,
        NodeRole::TargetUe,
        Position::new(target_x, lane_y(target_lane), height(rng, dim, Z.0, Z.1)),
    );
    target.speed_mps = rng.random_range(60.0..=140.0) * KMH;
    nodes.push(target);

    let mut next_id: NodeId = 1;
    for lane in 0..lanes {
        for _ in 0..per_lane {
            let x = (0..PLACEMENT_ATTEMPTS)
                .map(|_| rng.random_range(0.0..=length))
                .find(|&x| fits(&occupied[lane], x))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "cannot place {per_lane} vehicles per lane with {MIN_VEHICLE_GAP_M} m spacing on {length} m"
                    ))
                })?;
            occupied[lane].push(x);
            let mut n = Node::new(
                next_id,
                NodeRole::AnchorUe,
                Position::new(x, lane_y(lane), height(rng, dim, Z.0, Z.1)),
            );
            n.speed_mps = rng.random_range(60.0..=140.0) * KMH;
            nodes.push(n);
            next_id += 1;
        }
    }

    let (zlo, zhi) = z_range(dim, Z.0, Z.1);
    Ok(Scenario {
        dimensionality: dim,
        bounds: Some(Bounds {
            min: Position::new(0.0, 0.0, zlo),
            max: Position::new(length, lanes as f64 * lane_width, zhi),
        }),
        los_blockage: 0.0,
        nodes,
    })
}

fn place_separated(
    rng: &mut ChaCha8Rng,
    placed: &[Node],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (Position, f64),
) -> Result<(Position, f64)> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let (p, heading) = draw(rng);
        if placed
            .iter()
            .all(|n| n.position.distance(&p) >= MIN_NODE_SEPARATION_M)
        {
            return Ok((p, heading));
        }
    }
    Err(Error::Config(format!(
        "cannot place {} distinct nodes with {MIN_NODE_SEPARATION_M} m separation",
        placed.len() + 1
    )))
}

fn urban_grid(
    rng: &mut ChaCha8Rng,
    dim: Dimensionality,
    block: f64,
    road: f64,
    extent: f64,
    candidates: usize,
) -> Result<Scenario> {
    const Z: (f64, f64) = (1.0, 10.0);
    let pitch = block + road;
    let n_roads = ((extent - road) / pitch).floor() as usize + 1;
    let mut nodes: Vec<Node> = Vec::with_capacity(candidates + 1);

    let mut draw = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(0..n_roads);
        let centre = k as f64 * pitch + road / 2.0;
        let along = rng.random_range(0.0..=extent);
        let across = centre + rng.random_range(-road / 2.0..=road / 2.0);
        let z = height(rng, dim, Z.0, Z.1);
        if rng.random_bool(0.5) {
            (Position::new(along, across, z), 0.0)
        } else {
            (Position::new(across, along, z), PI / 2.0)
        }
    };

    for id in 0..=candidates as NodeId {
        let (p, heading) = place_separated(rng, &nodes, &mut draw)?;
        let role = if id == 0 { NodeRole::TargetUe } else { NodeRole::AnchorUe };
        let mut n = Node::new(id, role, p);
        n.heading_rad = heading;
        n.speed_mps = rng.random_range(0.0..=60.0) * KMH;
        nodes.push(n);
    }

    let (zlo, zhi) = z_range(dim, Z.0, Z.1);
    Ok(Scenario {
        dimensionality: dim,
        bounds: Some(Bounds {
            min: Position::new(0.0, 0.0, zlo),
            max: Position::new(extent, extent, zhi),
        }),
        los_blockage: 0.0,
        nodes,
    })
}

fn factory(
    rng: &mut ChaCha8Rng,
    dim: Dimensionality,
    length: f64,
    width: f64,
    candidates: usize,
) -> Result<Scenario> {
    const Z: (f64, f64) = (0.5, 6.0);
    let mut nodes: Vec<Node> = Vec::with_capacity(candidates + 1);
    let mut draw = |rng: &mut ChaCha8Rng| {
        let p = Position::new(
            rng.random_range(0.0..=length),
            rng.random_range(0.0..=width),
            height(rng, dim, Z.0, Z.1),
        );
        (p, rng.random_range(-PI..PI))
    };
    for id in 0..=candidates as NodeId {
        let (p, heading) = place_separated(rng, &nodes, &mut draw)?;
        let role = if id == 0 { NodeRole::TargetUe } else { NodeRole::AnchorUe };
        let mut n = Node::new(id, role, p);
        n.heading_rad = heading;
        n.speed_mps = rng.random_range(0.0..=30.0) * KMH;
        nodes.push(n);
    }
    let (zlo, zhi) = z_range(dim, Z.0, Z.1);
    Ok(Scenario {
        dimensionality: dim,
        bounds: Some(Bounds {
            min: Position::new(0.0, 0.0, zlo),
            max: Position::new(length, width, zhi),
        }),
        los_blockage: 0.0,
        nodes,
    })
}

/// Picks `k` anchors for `target_id`.
///
/// `Nearest` orders by 3-D distance with ties going to the lower id.
/// `BestGdop` starts from the nearest anchor, completes the smallest
/// well-posed set exhaustively and then adds anchors greedily by GDOP.
/// The generator is only consumed by `Random`.
pub fn select_anchors<R: Rng + ?Sized>(
    scenario: &Scenario,
    target_id: NodeId,
    k: usize,
    policy: AnchorPolicy,
    rng: &mut R,
) -> Result<Vec<NodeId>> {
    let target = scenario
        .node(target_id)
        .ok_or_else(|| Error::Selection(format!("target {target_id} not in scenario")))?;
    let mut candidates: Vec<(f64, &Node)> = scenario
        .nodes
        .iter()
        .filter(|n| n.id != target_id && n.role != NodeRole::TargetUe)
        .map(|n| (n.position.distance(&target.position), n))
        .collect();
    if k > candidates.len() {
        return Err(Error::Selection(format!(
            "{k} anchors requested but only {} candidates",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));

    match policy {
        AnchorPolicy::Nearest => Ok(candidates.iter().take(k).map(|(_, n)| n.id).collect()),
        AnchorPolicy::Random => Ok(candidates
            .choose_multiple(rng, k)
            .map(|(_, n)| n.id)
            .collect()),
        AnchorPolicy::BestGdop => Ok(greedy_gdop(
            &candidates.iter().map(|(_, n)| (n.id, n.position)).collect::<Vec<_>>(),
            &target.position,
            k,
            scenario.dimensionality,
        )),
    }
}

/// Candidates must be sorted nearest first.
fn greedy_gdop(
    candidates: &[(NodeId, Position)],
    target: &Position,
    k: usize,
    dim: Dimensionality,
) -> Vec<NodeId> {
    const POOL_LIMIT: usize = 40;
    let seed_size = dim.axes() + 1;
    if k < seed_size || candidates.len() <= seed_size {
        return candidates.iter().take(k).map(|c| c.0).collect();
    }
    let score = |set: &[usize]| -> f64 {
        let pts: Vec<Position> = set.iter().map(|&i| candidates[i].1).collect();
        gdop(&pts, target, dim).unwrap_or(f64::INFINITY)
    };

    // exhaustive completion of the nearest anchor to a minimal determined set
    let pool = candidates.len().min(POOL_LIMIT);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for rest in combinations(1..pool, seed_size - 1) {
        let mut set = vec![0usize];
        set.extend(rest);
        let g = score(&set);
        if best.as_ref().is_none_or(|(bg, _)| g < *bg) {
            best = Some((g, set));
        }
    }
    let (g0, mut chosen) = best.expect("pool holds at least seed_size candidates");
    if !g0.is_finite() {
        return candidates.iter().take(k).map(|c| c.0).collect();
    }

    while chosen.len() < k {
        let mut pick: Option<(f64, usize)> = None;
        for i in 0..candidates.len() {
            if chosen.contains(&i) {
                continue;
            }
            chosen.push(i);
            let g = score(&chosen);
            chosen.pop();
            // strict comparison keeps the nearer candidate on ties
            if pick.is_none_or(|(pg, _)| g < pg) {
                pick = Some((g, i));
            }
        }
        chosen.push(pick.expect("k <= candidate count").1);
    }
    chosen.into_iter().map(|i| candidates[i].0).collect()
}

/// All `r`-subsets of `items` in lexicographic order.
pub(crate) fn combinations(items: impl IntoIterator<Item = usize>, r: usize) -> Vec<Vec<usize>> {
    let items: Vec<usize> = items.into_iter().collect();
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(r);
    fn rec(items: &[usize], r: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == r {
            out.push(current.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < r - current.len() {
                break;
            }
            current.push(items[i]);
            rec(items, r, i + 1, current, out);
            current.pop();
        }
    }
    rec(&items, r, 0, &mut current, &mut out);
    out
}

/// True when `points` do not span the solve dimension: all collinear in 2-D
/// (x/y only) or all coplanar in 3-D. Coincident points count as degenerate.
pub(crate) fn is_degenerate(points: &[Position], dim: Dimensionality) -> bool {
    let d = dim.axes();
    if points.len() < d {
        return true;
    }
    let Some(c) = Position::centroid(points) else {
        return true;
    };
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    for p in points {
        let v = *p - c;
        let v = [v.x, v.y, v.z];
        for i in 0..d {
            for j in 0..d {
                scatter[(i, j)] += v[i] * v[j];
            }
        }
    }
    let eig = scatter.symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= 1e-12 * max
}

/// Geometric dilution of precision for a target seen from `anchors`.
///
/// Rows of the geometry matrix are unit vectors anchor → target augmented
/// with a constant column for the unknown common clock term. Returns
/// `sqrt(trace((HᵀH)⁻¹))`.
pub fn gdop(anchors: &[Position], target: &Position, dim: Dimensionality) -> Result<f64> {
    let d = dim.axes();
    if anchors.len() < d + 1 {
        return Err(Error::Geometry(format!(
            "GDOP needs at least {} anchors, got {}",
            d + 1,
            anchors.len()
        )));
    }
    if is_degenerate(anchors, dim) {
        return Err(Error::Geometry(match dim {
            Dimensionality::TwoD => "anchors are collinear".into(),
            Dimensionality::ThreeD => "anchors are coplanar".into(),
        }));
    }
    let mut h = DMatrix::<f64>::zeros(anchors.len(), d + 1);
    for (row, a) in anchors.iter().enumerate() {
        let mut v = *target - *a;
        if dim == Dimensionality::TwoD {
            v.z = 0.0;
        }
        let norm = v.norm();
        if norm < 1e-9 {
            return Err(Error::Geometry("anchor coincides with target".into()));
        }
        let u = v / norm;
        for col in 0..d {
            h[(row, col)] = u[col];
        }
        h[(row, d)] = 1.0;
    }
    let eig = (h.transpose() * &h).symmetric_eigen().eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    if eig.iter().any(|&l| l <= 1e-12 * max) {
        return Err(Error::Geometry("singular geometry matrix".into()));
    }
    Ok(eig.iter().map(|l| 1.0 / l).sum::<f64>().sqrt())
}
