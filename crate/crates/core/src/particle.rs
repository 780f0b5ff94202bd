//! Particle estimator for multiple-receiver (MX) hitting probabilities.
//!
//! Independent Brownian walkers leave a point source and are absorbed by the
//! first fully absorbing sphere they touch. There is no closed form once
//! several receivers compete, so window probabilities are estimated from
//! absorption counts.
//!
//! # Path construction
//!
//! Each walker's trajectory is built with the Lévy (Brownian bridge)
//! construction: coarse increments spanning `2^segment_levels` fine steps are
//! drawn first, and midpoints are filled in recursively only where the path
//! may come near a sphere. Every random variate is keyed by
//! `(walker, segment, tree node)` rather than drawn from a sequential stream,
//! so the path is the same function of the seed whatever spheres are present
//! and whichever parts of it end up refined. Two consequences:
//!
//! * Enlarging the absorber set replays the identical path, so incumbent
//!   absorbers can only lose walkers (exact common random numbers).
//! * Far from every sphere a walker costs one draw per coarse segment.
//!
//! A segment is left unrefined for a sphere when the chord lies farther than
//! `sqrt(D·τ·REFINE_LOG_BOUND)` from it. The chord and the sphere are
//! separated by a plane at that distance, and a Brownian bridge of duration
//! `τ` crosses it with probability `exp(-REFINE_LOG_BOUND)`.
//!
//! At the finest level a hit is either an endpoint inside the sphere or a
//! bridge crossing between two outside endpoints, accepted with the
//! half-space crossing probability `exp(-d_a·d_b / (D·Δt))`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::analytic::WindowProbability;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::seed::{derive, mix64};

const REFINE_LOG_BOUND: f64 = 23.0;
/// Bridge crossings with `d_a·d_b > BRIDGE_CUTOFF·D·Δt` have probability
/// below `exp(-BRIDGE_CUTOFF)` and are not sampled.
const BRIDGE_CUTOFF: f64 = 40.0;
const BRIDGE_SALT: u64 = 0x6a09_e667_f3bc_c909;
const WALKER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Absorber {
    /// Stable identifier; bridge-crossing variates are keyed by it.
    pub id: usize,
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AbsorberSet {
    absorbers: Vec<Absorber>,
}

impl AbsorberSet {
    pub fn new(absorbers: Vec<Absorber>) -> Result<Self> {
        for (i, a) in absorbers.iter().enumerate() {
            if !(a.radius > 0.0) || !a.center.is_finite() {
                return Err(Error::Domain(format!(
                    "absorber {} needs a finite center and positive radius (r = {})",
                    a.id, a.radius
                )));
            }
            if absorbers[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::Domain(format!("duplicate absorber id {}", a.id)));
            }
        }
        if absorbers.len() > usize::from(u16::MAX) {
            return Err(Error::Domain("too many absorbers".into()));
        }
        Ok(Self { absorbers })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.absorbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.absorbers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Absorber> {
        self.absorbers.iter()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.absorbers.iter().map(|a| a.id).collect()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.absorbers.iter().position(|a| a.id == id)
    }

    /// Subset with the given ids, in this set's order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        for id in ids {
            if self.position(*id).is_none() {
                return Err(Error::Domain(format!("absorber id {id} not in set")));
            }
        }
        Ok(Self {
            absorbers: self
                .absorbers
                .iter()
                .filter(|a| ids.contains(&a.id))
                .copied()
                .collect(),
        })
    }

    fn contains_point(&self, p: Vec3) -> Option<usize> {
        self.absorbers
            .iter()
            .find(|a| (p - a.center).norm_sq() <= a.radius * a.radius)
            .map(|a| a.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerConfig {
    pub n_walkers: u64,
    /// Finest time step Δt_sim, s.
    pub step: f64,
    pub horizon: f64,
    /// Diffusion coefficient, µm²/s.
    pub diffusion: f64,
    /// A coarse segment spans `2^segment_levels` fine steps.
    pub segment_levels: u32,
}

impl WalkerConfig {
    pub fn validate(&self, sampling_interval: f64) -> Result<()> {
        if !(self.diffusion > 0.0) {
            return Err(Error::Config(format!("walker diffusion must be > 0, got {}", self.diffusion)));
        }
        if !(self.step > 0.0) || self.step > sampling_interval * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "walker step {} s must be positive and no longer than the sampling interval {} s",
                self.step, sampling_interval
            )));
        }
        let per_sample = sampling_interval / self.step;
        if (per_sample - per_sample.round()).abs() > 1e-9 * per_sample {
            return Err(Error::Config(format!(
                "sampling interval {sampling_interval} s is not a multiple of the walker step {} s",
                self.step
            )));
        }
        let samples = self.horizon / sampling_interval;
        if !(self.horizon >= 0.0) || (samples - samples.round()).abs() > 1e-9 * samples.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {} s is not a multiple of the sampling interval {sampling_interval} s",
                self.horizon
            )));
        }
        if self.segment_levels > 20 {
            return Err(Error::Config(format!(
                "segment_levels {} is too deep (max 20)",
                self.segment_levels
            )));
        }
        Ok(())
    }

    fn steps_per_sample(&self, sampling_interval: f64) -> u64 {
        (sampling_interval / self.step).round() as u64
    }

    fn horizon_steps(&self) -> u64 {
        (self.horizon / self.step).round() as u64
    }
}

/// Absorption counts per absorber and sampling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionRecord {
    pub ids: Vec<usize>,
    /// `counts[a][l]`: walkers absorbed by absorber `a` during sampling
    /// interval `l` (0-based).
    pub counts: Vec<Vec<u64>>,
    pub survivors: u64,
    pub n_walkers: u64,
    pub sampling_interval: f64,
}

impl AbsorptionRecord {
    pub fn absorbed(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn intervals(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn total_for(&self, id: usize) -> Option<u64> {
        let pos = self.ids.iter().position(|i| *i == id)?;
        Some(self.counts[pos].iter().sum())
    }
}

/// First touch of one body by one walker.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    body: u16,
    /// 1-based fine step.
    step: u32,
    /// Signed surface distance of the step endpoint; breaks same-step ties.
    key: f64,
}

fn earlier(a: &Hit, b: &Hit) -> bool {
    (a.step, a.key, a.body) < (b.step, b.key, b.body)
}

/// Per-walker first-passage steps to every body of a scene.
///
/// Walkers stop at the first terminal body and otherwise pass through.
/// Because paths do not depend on the scene, the absorption record of any
/// subset that contains all terminal bodies is exactly what
/// [`simulate_batch`] returns for that subset with the same seed.
#[derive(Debug, Clone)]
pub struct PassageProfile {
    bodies: AbsorberSet,
    terminal: Vec<bool>,
    cfg: WalkerConfig,
    offsets: Vec<u32>,
    hits: Vec<Hit>,
}

impl PassageProfile {
    pub fn bodies(&self) -> &AbsorberSet {
        &self.bodies
    }

    pub fn config(&self) -> &WalkerConfig {
        &self.cfg
    }

    /// Absorption record when only `ids` absorb (all others transparent).
    pub fn record_for(&self, ids: &[usize], sampling_interval: f64) -> Result<AbsorptionRecord> {
        self.cfg.validate(sampling_interval)?;
        let mut member = vec![None; self.bodies.len()];
        for (slot, id) in ids.iter().enumerate() {
            let pos = self
                .bodies
                .position(*id)
                .ok_or_else(|| Error::Domain(format!("absorber id {id} not traced in this profile")))?;
            member[pos] = Some(slot);
        }
        if let Some(pos) = (0..member.len()).find(|&p| self.terminal[p] && member[p].is_none()) {
            return Err(Error::Domain(format!(
                "subset must include terminal absorber {}",
                self.bodies.absorbers[pos].id
            )));
        }
        let per_sample = self.cfg.steps_per_sample(sampling_interval);
        let intervals = (self.cfg.horizon_steps() / per_sample) as usize;
        let mut counts = vec![vec![0u64; intervals]; ids.len()];
        let mut absorbed = 0u64;
        for w in 0..self.offsets.len() - 1 {
            let hits = &self.hits[self.offsets[w] as usize..self.offsets[w + 1] as usize];
            let best = hits
                .iter()
                .filter(|h| member[usize::from(h.body)].is_some())
                .fold(None::<&Hit>, |acc, h| match acc {
                    Some(b) if !earlier(h, b) => Some(b),
                    _ => Some(h),
                });
            if let Some(h) = best {
                let slot = member[usize::from(h.body)].expect("filtered");
                counts[slot][((u64::from(h.step) - 1) / per_sample) as usize] += 1;
                absorbed += 1;
            }
        }
        Ok(AbsorptionRecord {
            ids: ids.to_vec(),
            counts,
            survivors: self.cfg.n_walkers - absorbed,
            n_walkers: self.cfg.n_walkers,
            sampling_interval,
        })
    }
}

struct Tracer<'a> {
    bodies: &'a [Absorber],
    terminal: &'a [bool],
    diffusion: f64,
    dt: f64,
    horizon_steps: u64,
    /// `reach_sq[level][body]`: squared chord distance to the body's center
    /// below which a segment at `level` must be refined.
    reach_sq: Vec<Vec<f64>>,
    /// Per-axis standard deviation of a midpoint given its endpoints, per level.
    mid_sd: Vec<f64>,
    root_sd: f64,
    levels: u32,
    bridge_cut: f64,
}

struct WalkerState {
    seed: u64,
    segment: u64,
    done: Vec<bool>,
    hits: SmallVec<[Hit; 4]>,
    remaining: usize,
}

impl<'a> Tracer<'a> {
    fn new(bodies: &'a [Absorber], terminal: &'a [bool], cfg: &WalkerConfig) -> Self {
        let levels = cfg.segment_levels;
        let dt = cfg.step;
        let d = cfg.diffusion;
        let reach_sq = (0..=levels)
            .map(|l| {
                let margin = (d * dt * f64::from(1u32 << l) * REFINE_LOG_BOUND).sqrt();
                bodies.iter().map(|b| (b.radius + margin).powi(2)).collect()
            })
            .collect();
        // Midpoint of a bridge of duration τ has per-axis variance 2Dτ/4.
        let mid_sd = (0..=levels)
            .map(|l| (2.0 * d * dt * f64::from(1u32 << l) / 4.0).sqrt())
            .collect();
        Self {
            bodies,
            terminal,
            diffusion: d,
            dt,
            horizon_steps: cfg.horizon_steps(),
            reach_sq,
            mid_sd,
            root_sd: (2.0 * d * dt * f64::from(1u32 << levels)).sqrt(),
            levels,
            bridge_cut: BRIDGE_CUTOFF * d * dt,
        }
    }

    fn gaussian3(seed: u64, sd: f64) -> Vec3 {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        Vec3::new(x, y, z) * sd
    }

    fn node_seed(state: &WalkerState, node: u64) -> u64 {
        state.seed.wrapping_add(mix64((state.segment << 22) | node))
    }

    fn bridge_uniform(state: &WalkerState, step: u64, id: usize) -> f64 {
        let key = mix64(mix64(step ^ BRIDGE_SALT) ^ id as u64);
        SplitMix64::seed_from_u64(state.seed ^ key).random::<f64>()
    }

    /// Traces one walker; returns its hits in time order.
    fn trace(&self, source: Vec3, seed: u64) -> SmallVec<[Hit; 4]> {
        let mut state = WalkerState {
            seed,
            segment: 0,
            done: vec![false; self.bodies.len()],
            hits: SmallVec::new(),
            remaining: self.bodies.len(),
        };
        if self.bodies.is_empty() {
            return state.hits;
        }
        let seg_steps = 1u64 << self.levels;
        let all: SmallVec<[u16; 16]> = (0..self.bodies.len() as u16).collect();
        let mut pos = source;
        let mut step0 = 0u64;
        while step0 < self.horizon_steps {
            let end = pos + Self::gaussian3(Self::node_seed(&state, 0), self.root_sd);
            if self.visit(&mut state, pos, end, self.levels, 1, step0, &all) {
                break;
            }
            if state.remaining == 0 {
                break;
            }
            pos = end;
            step0 += seg_steps;
            state.segment += 1;
        }
        state.hits
    }

    #[allow(clippy::too_many_arguments)]
    fn visit(
        &self,
        state: &mut WalkerState,
        a: Vec3,
        b: Vec3,
        level: u32,
        node: u64,
        step0: u64,
        candidates: &[u16],
    ) -> bool {
        if step0 >= self.horizon_steps {
            return false;
        }
        if level == 0 {
            return self.fine_step(state, a, b, step0 + 1, candidates);
        }
        let reach = &self.reach_sq[level as usize];
        let near: SmallVec<[u16; 16]> = candidates
            .iter()
            .copied()
            .filter(|&i| {
                let idx = usize::from(i);
                !state.done[idx] && chord_distance_sq(a, b, self.bodies[idx].center) < reach[idx]
            })
            .collect();
        if near.is_empty() {
            return false;
        }
        let mid = (a + b) * 0.5
            + Self::gaussian3(Self::node_seed(state, node), self.mid_sd[level as usize]);
        let half = 1u64 << (level - 1);
        self.visit(state, a, mid, level - 1, node * 2, step0, &near)
            || self.visit(state, mid, b, level - 1, node * 2 + 1, step0 + half, &near)
    }

    fn fine_step(&self, state: &mut WalkerState, a: Vec3, b: Vec3, step: u64, candidates: &[u16]) -> bool {
        let mut stop = false;
        for &i in candidates {
            let idx = usize::from(i);
            if state.done[idx] {
                continue;
            }
            let body = &self.bodies[idx];
            let db = (b - body.center).norm() - body.radius;
            let hit = if db <= 0.0 {
                true
            } else {
                let da = (a - body.center).norm() - body.radius;
                let prod = da.max(0.0) * db;
                prod < self.bridge_cut
                    && Self::bridge_uniform(state, step, body.id) < (-prod / (self.diffusion * self.dt)).exp()
            };
            if hit {
                state.done[idx] = true;
                state.remaining -= 1;
                state.hits.push(Hit {
                    body: i,
                    step: step as u32,
                    key: db,
                });
                stop |= self.terminal[idx];
            }
        }
        stop
    }
}

fn chord_distance_sq(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    let t = if len_sq > 0.0 {
        ((c - a).dot(ab) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * t - c).norm_sq()
}

fn walker_seed(batch_seed: u64, walker: u64) -> u64 {
    derive(batch_seed, &[walker])
}

fn check_source(source: Vec3, bodies: &AbsorberSet) -> Result<()> {
    if !source.is_finite() {
        return Err(Error::Domain(format!("source {source} is not finite")));
    }
    if let Some(id) = bodies.contains_point(source) {
        return Err(Error::Domain(format!("source {source} lies inside absorber {id}")));
    }
    Ok(())
}

/// Traces walkers through a scene, recording first passages to every body.
/// Bodies whose id is in `terminal_ids` stop the walker.
pub fn trace_passages(
    source: Vec3,
    bodies: &AbsorberSet,
    terminal_ids: &[usize],
    cfg: &WalkerConfig,
    seed: u64,
) -> Result<PassageProfile> {
    check_source(source, bodies)?;
    cfg.validate(cfg.step)?;
    if cfg.horizon_steps() > u64::from(u32::MAX) {
        return Err(Error::Config("horizon has too many walker steps".into()));
    }
    let terminal: Vec<bool> = bodies.iter().map(|b| terminal_ids.contains(&b.id)).collect();
    let tracer = Tracer::new(&bodies.absorbers, &terminal, cfg);
    let n = cfg.n_walkers;
    let chunks: Vec<Vec<SmallVec<[Hit; 4]>>> = (0..n.div_ceil(WALKER_CHUNK as u64))
        .into_par_iter()
        .map(|c| {
            let lo = c * WALKER_CHUNK as u64;
            let hi = (lo + WALKER_CHUNK as u64).min(n);
            (lo..hi)
                .map(|w| tracer.trace(source, walker_seed(seed, w)))
                .collect()
        })
        .collect();
    let mut offsets = Vec::with_capacity(n as usize + 1);
    let mut hits = Vec::new();
    offsets.push(0u32);
    for walker_hits in chunks.into_iter().flatten() {
        hits.extend(walker_hits);
        offsets.push(hits.len() as u32);
    }
    Ok(PassageProfile {
        bodies: bodies.clone(),
        terminal,
        cfg: *cfg,
        offsets,
        hits,
    })
}

/// Releases `cfg.n_walkers` molecules at `source` and counts first
/// absorptions per absorber and sampling interval.
pub fn simulate_batch(
    source: Vec3,
    absorbers: &AbsorberSet,
    cfg: &WalkerConfig,
    sampling_interval: f64,
    seed: u64,
) -> Result<AbsorptionRecord> {
    cfg.validate(sampling_interval)?;
    let ids = absorbers.ids();
    trace_passages(source, absorbers, &ids, cfg, seed)?.record_for(&ids, sampling_interval)
}

/// Window probabilities per absorber for the slots delimited by
/// `slot_boundaries` (seconds from release, ascending, first usually 0).
pub fn estimate_window_probs(
    record: &AbsorptionRecord,
    slot_boundaries: &[f64],
) -> Result<Vec<Vec<WindowProbability>>> {
    let dt = record.sampling_interval;
    let mut edges = Vec::with_capacity(slot_boundaries.len());
    for &b in slot_boundaries {
        let l = b / dt;
        if !(b >= 0.0) || (l - l.round()).abs() > 1e-9 * l.max(1.0) {
            return Err(Error::Domain(format!(
                "slot boundary {b} s is not aligned to the sampling interval {dt} s"
            )));
        }
        let l = l.round() as usize;
        if l > record.intervals() {
            return Err(Error::Domain(format!("slot boundary {b} s lies beyond the record horizon")));
        }
        if edges.last().is_some_and(|&prev| l < prev) {
            return Err(Error::Domain("slot boundaries must be ascending".into()));
        }
        edges.push(l);
    }
    let n = record.n_walkers as f64;
    Ok(record
        .counts
        .iter()
        .map(|counts| {
            edges
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let absorbed: u64 = counts[w[0]..w[1]].iter().sum();
                    let h = if n > 0.0 { absorbed as f64 / n } else { 0.0 };
                    WindowProbability {
                        value: h,
                        slot_index: i as u32 + 1,
                        standard_error: if n > 0.0 { (h * (1.0 - h) / n).sqrt() } else { 0.0 },
                    }
                })
                .collect()
        })
        .collect())
}

/// Per-absorber, per-slot window probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MxTable {
    pub ids: Vec<usize>,
    /// `probs[a][i - 1]` is the estimate for slot `i`.
    pub probs: Vec<Vec<WindowProbability>>,
}

impl MxTable {
    pub fn for_id(&self, id: usize) -> Option<&[WindowProbability]> {
        let pos = self.ids.iter().position(|i| *i == id)?;
        Some(&self.probs[pos])
    }

    pub fn from_record(record: &AbsorptionRecord, slot_duration: f64) -> Result<Self> {
        let intervals = record.intervals() as f64 * record.sampling_interval;
        let slots = (intervals / slot_duration - 1e-9).ceil().max(0.0) as usize;
        let boundaries: Vec<f64> = (0..=slots)
            .map(|i| (i as f64 * slot_duration).min(intervals))
            .collect();
        Ok(Self {
            ids: record.ids.clone(),
            probs: estimate_window_probs(record, &boundaries)?,
        })
    }
}

/// Simulates and windows an MX channel over slots `1..=⌈horizon/T⌉`.
pub fn mx_window_probs(
    tx: Vec3,
    absorbers: &AbsorberSet,
    params: &crate::analytic::ChannelParams,
    cfg: &WalkerConfig,
    seed: u64,
) -> Result<MxTable> {
    if absorbers.is_empty() {
        return Ok(MxTable {
            ids: Vec::new(),
            probs: Vec::new(),
        });
    }
    let record = simulate_batch(tx, absorbers, cfg, params.sampling_interval, seed)?;
    MxTable::from_record(&record, params.slot_duration())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    tx: [u64; 3],
    absorbers: Vec<(usize, [u64; 4])>,
    params: [u64; 3],
    walkers: [u64; 5],
    seed: u64,
}

impl CacheKey {
    fn new(
        tx: Vec3,
        absorbers: &AbsorberSet,
        params: &crate::analytic::ChannelParams,
        cfg: &WalkerConfig,
        seed: u64,
    ) -> Self {
        let bits = |v: Vec3| v.to_array().map(f64::to_bits);
        Self {
            tx: bits(tx),
            absorbers: absorbers
                .iter()
                .map(|a| {
                    let c = bits(a.center);
                    (a.id, [c[0], c[1], c[2], a.radius.to_bits()])
                })
                .collect(),
            params: [
                params.diffusion.to_bits(),
                params.sampling_interval.to_bits(),
                u64::from(params.samples_per_slot),
            ],
            walkers: [
                cfg.n_walkers,
                cfg.step.to_bits(),
                cfg.horizon.to_bits(),
                cfg.diffusion.to_bits(),
                u64::from(cfg.segment_levels),
            ],
            seed,
        }
    }
}

/// Memoizes [`mx_window_probs`] by (transmitter, absorber set, parameters,
/// seed). Concurrent readers share a read lock.
#[derive(Debug, Default)]
pub struct ChannelCache {
    tables: RwLock<HashMap<CacheKey, Arc<MxTable>>>,
}

impl ChannelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tables.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(
        &self,
        tx: Vec3,
        absorbers: &AbsorberSet,
        params: &crate::analytic::ChannelParams,
        cfg: &WalkerConfig,
        seed: u64,
    ) -> Result<Arc<MxTable>> {
        let key = CacheKey::new(tx, absorbers, params, cfg, seed);
        if let Some(t) = self.tables.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(mx_window_probs(tx, absorbers, params, cfg, seed)?);
        let mut w = self.tables.write().expect("cache lock");
        Ok(Arc::clone(w.entry(key).or_insert(table)))
    }
}
