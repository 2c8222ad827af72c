//! Scenario generation.
//!
//! Single-bounce paths are produced with the mirror construction: the sender
//! is reflected across the scatterer line, the straight segment from the
//! image to the receiver crosses the line at the bounce point `C`, and the
//! path length equals the image-to-receiver distance. Measurements built this
//! way satisfy the linear steering-vector relation exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    build_edge_constraint, normalize_angle, GeometryError, GeometryTolerances, PathMeasurement, Position,
};
use crate::network::{NetworkConstraints, NetworkError, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid reflection: {0}")]
    InvalidReflection(&'static str),
    #[error("coincident nodes")]
    CoincidentNodes,
    #[error("no valid reflector found for edge {i}-{j} after {attempts} attempts")]
    ScenarioInfeasible { i: NodeId, j: NodeId, attempts: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("node {0} is not reachable from the anchor")]
    UnreachableNode(NodeId),
    #[error("edge {i}-{j}")]
    Edge {
        i: NodeId,
        j: NodeId,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// An infinite reflecting line `{p : n . p = offset}` with unit normal
/// `n = (-sin(orientation), cos(orientation))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    /// Direction of the line, radians in `[0, pi)`.
    pub orientation: f64,
    /// Signed distance of the line from the origin along its normal, meters.
    pub offset: f64,
}

impl Reflector {
    pub fn new(orientation: f64, offset: f64) -> Self {
        Self {
            orientation: orientation.rem_euclid(PI),
            offset,
        }
    }

    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.orientation.sin(), self.orientation.cos())
    }

    pub fn signed_distance(&self, p: &Position) -> f64 {
        self.normal().dot(&p.to_vector()) - self.offset
    }

    /// Mirror image of `p` across the line.
    pub fn reflect(&self, p: &Position) -> Position {
        Position::from(p.to_vector() - 2.0 * self.signed_distance(p) * self.normal())
    }
}

/// Range and AOA noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Variance of the additive Gaussian range error, m^2.
    pub sigma2_range: f64,
    /// Half-width of the uniform AOA error, radians.
    pub aoa_halfwidth: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        sigma2_range: 0.0,
        aoa_halfwidth: 0.0,
    };

    /// Range variance 3 m^2 and AOA error uniform in +-5 degrees.
    pub fn reference() -> Self {
        Self {
            sigma2_range: 3.0,
            aoa_halfwidth: 5f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma2_range >= 0.0) || !(self.aoa_halfwidth >= 0.0) {
            return Err(SimError::InvalidScenario("noise parameters must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sample_range_error<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma2_range == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.sigma2_range.sqrt())
            .expect("validated variance")
            .sample(rng)
    }

    pub fn sample_angle_error<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.aoa_halfwidth == 0.0 {
            return 0.0;
        }
        Uniform::new_inclusive(-self.aoa_halfwidth, self.aoa_halfwidth)
            .expect("validated half-width")
            .sample(rng)
    }
}

/// Single-bounce measurement at receiver `s_i` of a path from `s_j` off `reflector`.
pub fn mirror_path_measurement(
    s_i: &Position,
    s_j: &Position,
    reflector: &Reflector,
) -> Result<PathMeasurement, SimError> {
    let di = reflector.signed_distance(s_i);
    let dj = reflector.signed_distance(s_j);
    if di == 0.0 || dj == 0.0 {
        return Err(SimError::InvalidReflection("node lies on the reflector"));
    }
    if di.signum() != dj.signum() {
        return Err(SimError::InvalidReflection("nodes straddle the reflector"));
    }
    let image = reflector.reflect(s_j);
    let image_dist = reflector.signed_distance(&image);
    // fraction along image -> s_i where the segment crosses the line
    let t = image_dist / (image_dist - di);
    if !(t > 0.0 && t < 1.0) {
        return Err(SimError::InvalidReflection("bounce point outside the segment"));
    }
    let bounce = Position::from(image.to_vector() + t * (s_i.to_vector() - image.to_vector()));
    let range = s_i.distance_to(&image);
    if !(range > 0.0) {
        return Err(SimError::CoincidentNodes);
    }
    Ok(PathMeasurement::new(range, s_i.bearing_to(&bounce), s_j.bearing_to(&bounce)))
}

/// Direct-path measurement at receiver `s_i` of a signal from `s_j`.
pub fn los_path_measurement(s_i: &Position, s_j: &Position) -> Result<PathMeasurement, SimError> {
    let range = s_i.distance_to(s_j);
    if !(range > 0.0) {
        return Err(SimError::CoincidentNodes);
    }
    let toward_j = s_i.bearing_to(s_j);
    Ok(PathMeasurement::new(range, toward_j, toward_j + PI))
}

/// Adds range and AOA errors to one measurement.
pub fn apply_noise<R: Rng + ?Sized>(m: &PathMeasurement, noise: &NoiseModel, rng: &mut R) -> PathMeasurement {
    let dr = noise.sample_range_error(rng);
    let da_receiver = noise.sample_angle_error(rng);
    let da_sender = noise.sample_angle_error(rng);
    PathMeasurement {
        range: m.range + dr,
        aoa_at_receiver: normalize_angle(m.aoa_at_receiver + da_receiver),
        aoa_at_sender: normalize_angle(m.aoa_at_sender + da_sender),
    }
}

/// Reflector orientation family used when reflectors are sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterFamily {
    /// Horizontal and vertical scatterers.
    Orthogonal,
    /// Horizontal scatterers and scatterers at 45 degrees.
    Biorthogonal,
    /// Explicit orientations in degrees, used round-robin.
    Angles(Vec<f64>),
}

impl ScatterFamily {
    /// Horizontal scatterers paired with scatterers tilted by `degrees`.
    pub fn tilted(degrees: f64) -> Self {
        ScatterFamily::Angles(vec![0.0, degrees])
    }

    pub fn orientations_deg(&self) -> Vec<f64> {
        match self {
            ScatterFamily::Orthogonal => vec![0.0, 90.0],
            ScatterFamily::Biorthogonal => vec![0.0, 45.0],
            ScatterFamily::Angles(a) => a.clone(),
        }
    }
}

/// Knobs for reflector sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOptions {
    pub family: ScatterFamily,
    pub paths_per_edge: usize,
    /// Distance of a sampled reflector beyond the nearer node, meters.
    pub min_gap: f64,
    pub max_gap: f64,
    /// Draws with `|sin(separation)|` below this are resampled; when none
    /// qualifies the best valid draw is kept.
    pub min_separation_sin: f64,
    pub max_retries: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            family: ScatterFamily::Orthogonal,
            paths_per_edge: 2,
            min_gap: 0.5,
            max_gap: 4.0,
            min_separation_sin: 10f64.to_radians().sin(),
            max_retries: 1000,
        }
    }
}

impl GeneratorOptions {
    pub fn with_family(family: ScatterFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }
}

/// An undirected link and the physical paths it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub i: NodeId,
    pub j: NodeId,
    /// `None` samples reflectors from the family.
    pub reflectors: Option<Vec<Reflector>>,
    pub los: bool,
}

impl LinkSpec {
    pub fn sampled(i: NodeId, j: NodeId) -> Self {
        Self {
            i,
            j,
            reflectors: None,
            los: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSpec {
    /// Anchor at the origin plus four sensors, linked anchor-S1, anchor-S2,
    /// S1-S3, S2-S4, S3-S4.
    PaperPreset,
    /// Anchor at the origin, other nodes uniform in a centered square, linked
    /// when closer than `radius`.
    Random {
        node_count: usize,
        arena_size: f64,
        radius: f64,
    },
    Explicit {
        positions: Vec<Position>,
        anchor: NodeId,
        links: Vec<LinkSpec>,
    },
}

pub const PRESET_POSITIONS: [(f64, f64); 5] = [(0.0, 0.0), (-4.5, -1.5), (4.0, -1.0), (-1.0, -8.0), (4.2, -6.0)];
pub const PRESET_LINKS: [(NodeId, NodeId); 5] = [(0, 1), (0, 2), (1, 3), (2, 4), (3, 4)];

impl ScenarioSpec {
    pub fn preset_positions() -> Vec<Position> {
        PRESET_POSITIONS.iter().map(|&(x, y)| Position::new(x, y)).collect()
    }

    pub fn preset_links() -> Vec<LinkSpec> {
        PRESET_LINKS.iter().map(|&(i, j)| LinkSpec::sampled(i, j)).collect()
    }
}

/// A link with its reflectors fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLink {
    pub i: NodeId,
    pub j: NodeId,
    pub reflectors: Vec<Reflector>,
    pub los: bool,
}

/// Ground truth plus noiseless measurements for every directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScenario {
    pub true_positions: Vec<Position>,
    pub anchor_index: NodeId,
    pub links: Vec<ResolvedLink>,
    /// Paths observed at `to` from `from`, keyed `(from, to)`.
    pub edges: BTreeMap<(NodeId, NodeId), Vec<PathMeasurement>>,
    pub noise: NoiseModel,
    pub seed: u64,
}

fn sample_reflector<R: Rng + ?Sized>(
    s_a: &Position,
    s_b: &Position,
    orientation: f64,
    options: &GeneratorOptions,
    rng: &mut R,
) -> Option<(Reflector, f64)> {
    let probe = Reflector::new(orientation, 0.0);
    let pa = probe.signed_distance(s_a);
    let pb = probe.signed_distance(s_b);
    let gap = rng.random_range(options.min_gap..=options.max_gap);
    let offset = if rng.random_bool(0.5) {
        pa.max(pb) + gap
    } else {
        pa.min(pb) - gap
    };
    let reflector = Reflector::new(orientation, offset);
    let m = mirror_path_measurement(s_a, s_b, &reflector).ok()?;
    Some((reflector, m.separation().sin().abs()))
}

fn generate_positions<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    rng: &mut R,
) -> Result<(Vec<Position>, NodeId, Vec<LinkSpec>), SimError> {
    match spec {
        ScenarioSpec::PaperPreset => Ok((ScenarioSpec::preset_positions(), 0, ScenarioSpec::preset_links())),
        ScenarioSpec::Explicit {
            positions,
            anchor,
            links,
        } => Ok((positions.clone(), *anchor, links.clone())),
        &ScenarioSpec::Random {
            node_count,
            arena_size,
            radius,
        } => {
            if node_count < 2 || !(arena_size > 0.0) || !(radius > 0.0) {
                return Err(SimError::InvalidScenario("random scenario needs >= 2 nodes and positive sizes".into()));
            }
            let half = arena_size / 2.0;
            for _ in 0..1000 {
                let mut positions = vec![Position::ORIGIN];
                positions.extend((1..node_count).map(|_| {
                    Position::new(rng.random_range(-half..=half), rng.random_range(-half..=half))
                }));
                let mut links = Vec::new();
                for a in 0..node_count {
                    for b in a + 1..node_count {
                        if positions[a].distance_to(&positions[b]) <= radius {
                            links.push(LinkSpec::sampled(a, b));
                        }
                    }
                }
                if first_unreachable(node_count, 0, &links).is_none() {
                    return Ok((positions, 0, links));
                }
            }
            Err(SimError::InvalidScenario("could not draw a connected random network".into()))
        }
    }
}

fn first_unreachable(node_count: usize, anchor: NodeId, links: &[LinkSpec]) -> Option<NodeId> {
    let mut seen = vec![false; node_count];
    seen[anchor] = true;
    let mut stack = vec![anchor];
    while let Some(n) = stack.pop() {
        for l in links {
            let other = if l.i == n {
                l.j
            } else if l.j == n {
                l.i
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                stack.push(other);
            }
        }
    }
    seen.into_iter().position(|s| !s)
}

/// Builds a scenario: places nodes, fixes reflectors for every link and
/// generates the noiseless measurements in both directions.
pub fn build_scenario(
    spec: &ScenarioSpec,
    options: &GeneratorOptions,
    noise: NoiseModel,
    seed: u64,
) -> Result<NetworkScenario, SimError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (positions, anchor, links) = generate_positions(spec, &mut rng)?;
    if anchor >= positions.len() {
        return Err(SimError::InvalidScenario(format!("anchor {anchor} out of range")));
    }
    if positions[anchor] != Position::ORIGIN {
        return Err(SimError::InvalidScenario("the anchor must sit at the origin".into()));
    }
    if let Some(p) = positions.iter().find(|p| !p.is_finite()) {
        return Err(SimError::InvalidScenario(format!("non-finite position {p:?}")));
    }
    let orientations = options.family.orientations_deg();
    if orientations.is_empty() {
        return Err(SimError::InvalidScenario("empty scatter family".into()));
    }

    if let Some(n) = links
        .iter()
        .all(|l| l.i < positions.len() && l.j < positions.len())
        .then(|| first_unreachable(positions.len(), anchor, &links))
        .flatten()
    {
        return Err(SimError::UnreachableNode(n));
    }

    let mut resolved = Vec::with_capacity(links.len());
    let mut edges = BTreeMap::new();
    for link in &links {
        let (i, j) = (link.i, link.j);
        if i >= positions.len() || j >= positions.len() || i == j {
            return Err(SimError::InvalidScenario(format!("bad link {i}-{j}")));
        }
        if edges.contains_key(&(j, i)) {
            return Err(SimError::InvalidScenario(format!("duplicate link {i}-{j}")));
        }
        let (s_i, s_j) = (&positions[i], &positions[j]);
        let reflectors = match &link.reflectors {
            Some(r) => r.clone(),
            None => (0..options.paths_per_edge)
                .map(|r| {
                    let orientation = orientations[r % orientations.len()].to_radians();
                    let mut best: Option<(Reflector, f64)> = None;
                    for _ in 0..options.max_retries {
                        let Some(cand) = sample_reflector(s_i, s_j, orientation, options, &mut rng) else {
                            continue;
                        };
                        if cand.1 >= options.min_separation_sin {
                            best = Some(cand);
                            break;
                        }
                        if best.is_none_or(|b| cand.1 > b.1) {
                            best = Some(cand);
                        }
                    }
                    best.map(|(refl, _)| refl).ok_or(SimError::ScenarioInfeasible {
                        i,
                        j,
                        attempts: options.max_retries,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        // measurements observed at i from j
        let mut at_i = reflectors
            .iter()
            .map(|r| mirror_path_measurement(s_i, s_j, r))
            .collect::<Result<Vec<_>, _>>()?;
        if link.los {
            at_i.push(los_path_measurement(s_i, s_j)?);
        }
        if at_i.is_empty() {
            return Err(SimError::InvalidScenario(format!("link {i}-{j} carries no paths")));
        }
        let at_j = at_i.iter().map(PathMeasurement::reversed).collect();
        edges.insert((j, i), at_i);
        edges.insert((i, j), at_j);
        resolved.push(ResolvedLink {
            i,
            j,
            reflectors,
            los: link.los,
        });
    }
    Ok(NetworkScenario {
        true_positions: positions,
        anchor_index: anchor,
        links: resolved,
        edges,
        noise,
        seed,
    })
}

impl NetworkScenario {
    pub fn node_count(&self) -> usize {
        self.true_positions.len()
    }

    /// Draws one noisy realization of every measurement.
    ///
    /// A physical path is observed once and both endpoints share that
    /// observation, so the reverse direction is the exact reversal of the
    /// forward one. Independent per-direction range errors make the two edge
    /// offsets disagree, and the broadcast update keeps re-adding that
    /// disagreement around every loop.
    pub fn draw_noisy_edges<R: Rng + ?Sized>(&self, rng: &mut R) -> BTreeMap<(NodeId, NodeId), Vec<PathMeasurement>> {
        let mut out = BTreeMap::new();
        for link in &self.links {
            let (i, j) = (link.i, link.j);
            let clean = &self.edges[&(j, i)];
            let at_i: Vec<PathMeasurement> = clean.iter().map(|m| apply_noise(m, &self.noise, rng)).collect();
            let at_j = at_i.iter().map(PathMeasurement::reversed).collect();
            out.insert((j, i), at_i);
            out.insert((i, j), at_j);
        }
        out
    }

    /// Edge constraints for a given set of measurements.
    pub fn constraints(
        &self,
        measurements: &BTreeMap<(NodeId, NodeId), Vec<PathMeasurement>>,
        tol: &GeometryTolerances,
    ) -> Result<NetworkConstraints, SimError> {
        let mut edges = BTreeMap::new();
        for (&(from, to), paths) in measurements {
            let c = build_edge_constraint(paths, tol).map_err(|source| SimError::Edge {
                i: to,
                j: from,
                source,
            })?;
            edges.insert((from, to), c);
        }
        Ok(NetworkConstraints::new(
            self.node_count(),
            self.anchor_index,
            self.true_positions[self.anchor_index],
            edges,
        )?)
    }

    pub fn noiseless_constraints(&self, tol: &GeometryTolerances) -> Result<NetworkConstraints, SimError> {
        self.constraints(&self.edges, tol)
    }

    pub fn noisy_constraints<R: Rng + ?Sized>(
        &self,
        tol: &GeometryTolerances,
        rng: &mut R,
    ) -> Result<NetworkConstraints, SimError> {
        let m = self.draw_noisy_edges(rng);
        self.constraints(&m, tol)
    }
}

/// Non-cooperative baseline: each node chains the edge offset from a single
/// parent on a breadth-first tree rooted at the anchor.
///
/// Among candidate parents on the previous layer the lowest index wins.
pub fn pairwise_baseline(network: &NetworkConstraints) -> Result<Vec<Position>, SimError> {
    let depths = network.hop_depths();
    if let Some(n) = depths.iter().position(Option::is_none) {
        return Err(SimError::UnreachableNode(n));
    }
    let depths: Vec<usize> = depths.into_iter().map(|d| d.unwrap_or_default()).collect();
    let mut order: Vec<NodeId> = (0..network.node_count()).collect();
    order.sort_by_key(|&n| (depths[n], n));

    let mut estimates = vec![Vector2::zeros(); network.node_count()];
    estimates[network.anchor()] = network.anchor_position().to_vector();
    for &n in order.iter().filter(|&&n| n != network.anchor()) {
        let parent = network
            .neighbors(n)
            .into_iter()
            .filter(|&p| depths[p] + 1 == depths[n])
            .min()
            .expect("a node at depth d > 0 has a neighbor at depth d - 1");
        let edge = network.constraint(parent, n).expect("neighbor has an edge");
        estimates[n] = estimates[parent] + edge.offset;
    }
    Ok(estimates.into_iter().map(Position::from).collect())
}

/// BFS parent used by [`pairwise_baseline`] for every non-anchor node.
pub fn pairwise_parents(network: &NetworkConstraints) -> BTreeMap<NodeId, NodeId> {
    let depths = network.hop_depths();
    (0..network.node_count())
        .filter(|&n| n != network.anchor())
        .filter_map(|n| {
            let d = depths[n]?;
            network
                .neighbors(n)
                .into_iter()
                .filter(|&p| depths[p] == Some(d - 1))
                .min()
                .map(|p| (n, p))
        })
        .collect()
}

/// Deterministic per-trial generator split from a base seed.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial + 1);
    rng
}
