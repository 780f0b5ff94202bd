//! Deployment geometry: positions, bodies, and random placement of the
//! drug-loaded nanomachines (DgNs).
//!
//! All lengths are micrometers. Minimum distances are measured center to
//! center.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of candidate draws before placement gives up.
pub const DEFAULT_ATTEMPT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Euclidean distance between two points.
pub fn distance(a: Vec3, b: Vec3) -> f64 {
    (a - b).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Tissue,
    Dgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub center: Vec3,
    /// Zero for point bodies.
    pub radius: f64,
    pub role: Role,
}

impl Body {
    pub fn controller(center: Vec3) -> Self {
        Self {
            center,
            radius: 0.0,
            role: Role::Controller,
        }
    }

    pub fn tissue(center: Vec3, radius: f64) -> Self {
        Self {
            center,
            radius,
            role: Role::Tissue,
        }
    }

    pub fn dgn(center: Vec3, radius: f64) -> Self {
        Self {
            center,
            radius,
            role: Role::Dgn,
        }
    }
}

/// Axis-aligned box given by two opposite corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Vec3,
    pub max: Vec3,
}

impl Region {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.min.is_finite() && self.max.is_finite())
            || self.max.x <= self.min.x
            || self.max.y <= self.min.y
            || self.max.z <= self.min.z
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        Vec3::new(
            rng.random_range(self.min.x..self.max.x),
            rng.random_range(self.min.y..self.max.y),
            rng.random_range(self.min.z..self.max.z),
        )
    }
}

/// One deployment: fixed bodies, DgNs, and the diffusion medium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub controller: Body,
    pub tissue: Body,
    pub dgns: Vec<Body>,
    pub region: Region,
    /// Diffusion coefficient in µm²/s.
    pub diffusion_coefficient: f64,
    pub min_dgn_pair_distance: f64,
    pub min_fixed_distance: f64,
}

impl Scenario {
    pub fn dgn_centers(&self) -> Vec<Vec3> {
        self.dgns.iter().map(|b| b.center).collect()
    }
}

/// A violated scenario invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    OutsideRegion { dgn: usize, position: Vec3 },
    PairTooClose { a: usize, b: usize, distance: f64 },
    FixedTooClose { dgn: usize, body: Role, distance: f64 },
    NonFinite { what: String },
    NegativeRadius { what: String, radius: f64 },
    ControllerNotPoint { radius: f64 },
    NonPositiveDiffusion(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutsideRegion { dgn, position } => {
                write!(f, "DgN {dgn} at {position} lies outside the deployment region")
            }
            Violation::PairTooClose { a, b, distance } => {
                write!(f, "DgNs {a} and {b} are {distance:.3} µm apart")
            }
            Violation::FixedTooClose {
                dgn,
                body,
                distance,
            } => write!(f, "DgN {dgn} is {distance:.3} µm from the {body:?}"),
            Violation::NonFinite { what } => write!(f, "{what} has non-finite coordinates"),
            Violation::NegativeRadius { what, radius } => {
                write!(f, "{what} has negative radius {radius}")
            }
            Violation::ControllerNotPoint { radius } => {
                write!(f, "controller must be a point source, radius is {radius}")
            }
            Violation::NonPositiveDiffusion(d) => {
                write!(f, "diffusion coefficient must be positive, got {d}")
            }
        }
    }
}

/// Returns every broken scenario invariant; empty when the scenario is valid.
pub fn validate(scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let fixed = [&scenario.controller, &scenario.tissue];
    for body in fixed.iter().copied().chain(scenario.dgns.iter()) {
        if !body.center.is_finite() {
            out.push(Violation::NonFinite {
                what: format!("{:?} at {}", body.role, body.center),
            });
        }
        if body.radius < 0.0 {
            out.push(Violation::NegativeRadius {
                what: format!("{:?}", body.role),
                radius: body.radius,
            });
        }
    }
    if scenario.controller.radius != 0.0 {
        out.push(Violation::ControllerNotPoint {
            radius: scenario.controller.radius,
        });
    }
    if !(scenario.diffusion_coefficient > 0.0) {
        out.push(Violation::NonPositiveDiffusion(scenario.diffusion_coefficient));
    }
    for (k, dgn) in scenario.dgns.iter().enumerate() {
        if !scenario.region.contains(dgn.center) {
            out.push(Violation::OutsideRegion {
                dgn: k,
                position: dgn.center,
            });
        }
        for body in fixed {
            let d = distance(dgn.center, body.center);
            if d < scenario.min_fixed_distance {
                out.push(Violation::FixedTooClose {
                    dgn: k,
                    body: body.role,
                    distance: d,
                });
            }
        }
        for (j, other) in scenario.dgns.iter().enumerate().skip(k + 1) {
            let d = distance(dgn.center, other.center);
            if d < scenario.min_dgn_pair_distance {
                out.push(Violation::PairTooClose { a: k, b: j, distance: d });
            }
        }
    }
    out
}

/// Random sequential placement by rejection.
///
/// Candidates are drawn uniformly in `region`; a candidate is kept when it is
/// at least `min_pair` from every DgN already placed and at least `min_fixed`
/// from every fixed body. `attempt_budget` bounds the total number of draws.
pub fn place_dgns<R: Rng + ?Sized>(
    region: &Region,
    count: usize,
    min_pair: f64,
    fixed_bodies: &[Body],
    min_fixed: f64,
    attempt_budget: u64,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    if region.is_degenerate() {
        return Err(Error::Domain(format!(
            "degenerate deployment region {} .. {}",
            region.min, region.max
        )));
    }
    if !(min_pair >= 0.0) || !(min_fixed >= 0.0) {
        return Err(Error::Domain(format!(
            "minimum distances must be non-negative (pair {min_pair}, fixed {min_fixed})"
        )));
    }
    let min_pair_sq = min_pair * min_pair;
    let min_fixed_sq = min_fixed * min_fixed;
    let mut placed: Vec<Vec3> = Vec::with_capacity(count);
    let mut attempts = 0u64;
    while placed.len() < count {
        if attempts >= attempt_budget {
            return Err(Error::Placement {
                requested: count,
                placed: placed.len(),
                attempts,
            });
        }
        attempts += 1;
        let candidate = region.sample(rng);
        let clear_of_fixed = fixed_bodies
            .iter()
            .all(|b| (candidate - b.center).norm_sq() >= min_fixed_sq);
        if clear_of_fixed && placed.iter().all(|p| (candidate - *p).norm_sq() >= min_pair_sq) {
            placed.push(candidate);
        }
    }
    Ok(placed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn table_region() -> Region {
        Region::new(Vec3::new(-5.0, 18.0, -5.0), Vec3::new(65.0, 88.0, 65.0))
    }

    fn fixed() -> Vec<Body> {
        vec![
            Body::tissue(Vec3::new(30.0, 8.0, 30.0), 8.0),
            Body::controller(Vec3::new(30.0, 106.0, 30.0)),
        ]
    }

    fn scenario_with(dgns: Vec<Vec3>) -> Scenario {
        Scenario {
            controller: Body::controller(Vec3::new(30.0, 106.0, 30.0)),
            tissue: Body::tissue(Vec3::new(30.0, 8.0, 30.0), 8.0),
            dgns: dgns.into_iter().map(|c| Body::dgn(c, 5.0)).collect(),
            region: table_region(),
            diffusion_coefficient: 79.4,
            min_dgn_pair_distance: 6.0,
            min_fixed_distance: 10.0,
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(Vec3::default(), Vec3::default()), 0.0);
        assert_eq!(
            distance(Vec3::new(30.0, 8.0, 30.0), Vec3::new(30.0, 106.0, 30.0)),
            98.0
        );
        assert_eq!(distance(Vec3::default(), Vec3::new(3.0, 4.0, 0.0)), 5.0);
    }

    #[test]
    fn zero_count_is_empty() {
        let mut rng = rng_from(1);
        let p = place_dgns(&table_region(), 0, 6.0, &fixed(), 10.0, 10, &mut rng).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn table_placement_passes_validation() {
        let mut rng = rng_from(3);
        let p = place_dgns(&table_region(), 10, 6.0, &fixed(), 10.0, DEFAULT_ATTEMPT_BUDGET, &mut rng)
            .unwrap();
        assert_eq!(p.len(), 10);
        assert!(validate(&scenario_with(p)).is_empty());
    }

    #[test]
    fn overpacked_cube_fails() {
        // A 6 µm lattice fits 2 points per axis in a 10 µm cube, so at most
        // 8 mutually 6 µm-separated points exist there; 10^4 cannot.
        let lattice_per_axis = (0..).take_while(|i| f64::from(*i) * 6.0 <= 10.0).count();
        assert_eq!(lattice_per_axis.pow(3), 8);
        let region = Region::new(Vec3::default(), Vec3::new(10.0, 10.0, 10.0));
        let mut rng = rng_from(5);
        let err = place_dgns(&region, 10_000, 6.0, &[], 0.0, DEFAULT_ATTEMPT_BUDGET, &mut rng)
            .unwrap_err();
        match err {
            Error::Placement { placed, attempts, .. } => {
                assert!(placed <= 27, "placed {placed}");
                assert_eq!(attempts, DEFAULT_ATTEMPT_BUDGET);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn degenerate_region_rejected() {
        let region = Region::new(Vec3::default(), Vec3::new(0.0, 1.0, 1.0));
        let mut rng = rng_from(5);
        assert!(matches!(
            place_dgns(&region, 1, 0.0, &[], 0.0, 10, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pair_violation_reported() {
        let s = scenario_with(vec![Vec3::new(30.0, 50.0, 30.0), Vec3::new(35.0, 50.0, 30.0)]);
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::PairTooClose { a: 0, b: 1, distance } if distance == 5.0));
    }

    #[test]
    fn fixed_violation_reported() {
        let s = scenario_with(vec![Vec3::new(30.0, 17.0, 30.0)]);
        // Outside the region too (y < 18); only count the fixed-distance one.
        let v = validate(&s);
        let fixed: Vec<_> = v
            .iter()
            .filter(|v| matches!(v, Violation::FixedTooClose { .. }))
            .collect();
        assert_eq!(fixed.len(), 1);
        assert!(matches!(
            fixed[0],
            Violation::FixedTooClose { dgn: 0, body: Role::Tissue, distance } if *distance == 9.0
        ));
    }

    #[test]
    fn same_seed_same_positions() {
        let a = place_dgns(&table_region(), 10, 6.0, &fixed(), 10.0, DEFAULT_ATTEMPT_BUDGET, &mut rng_from(11)).unwrap();
        let b = place_dgns(&table_region(), 10, 6.0, &fixed(), 10.0, DEFAULT_ATTEMPT_BUDGET, &mut rng_from(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_distinct_positions() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..200u64 {
            let p = place_dgns(&table_region(), 10, 6.0, &fixed(), 10.0, DEFAULT_ATTEMPT_BUDGET, &mut rng_from(seed)).unwrap();
            let key: Vec<u64> = p.iter().flat_map(|v| v.to_array()).map(f64::to_bits).collect();
            assert!(seen.insert(key), "collision at seed {seed}");
        }
    }

    #[test]
    fn single_dgn_marginals_centered() {
        let region = table_region();
        let mut rng = rng_from(17);
        let n = 10_000;
        let mut sum = Vec3::default();
        for _ in 0..n {
            let p = place_dgns(&region, 1, 0.0, &[], 0.0, 10, &mut rng).unwrap();
            sum = sum + p[0];
        }
        let mean = sum * (1.0 / n as f64);
        let c = region.center();
        // Uniform on a 70 µm interval: sd = 70/sqrt(12).
        let se = 70.0 / 12f64.sqrt() / (n as f64).sqrt();
        for (m, c) in mean.to_array().into_iter().zip(c.to_array()) {
            assert!((m - c).abs() < 5.0 * se, "mean {m} vs center {c}");
        }
    }
}
