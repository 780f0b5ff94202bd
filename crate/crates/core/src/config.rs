//! Run configuration with flat keys. Omitted keys take the default
//! deployment values; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::ChannelParams;
use crate::error::{Error, Result};
use crate::geometry::{Body, Region, Vec3, DEFAULT_ATTEMPT_BUDGET};
use crate::particle::WalkerConfig;
use crate::protocol::{DeliveryOptions, SlotMemory};

/// Repetitions used by `--fast`.
pub const FAST_REPETITIONS: u64 = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    /// µm²/s.
    pub diffusion_coefficient: f64,
    pub num_dgns: usize,
    pub dgn_radius: f64,
    pub tissue_radius: f64,
    pub tissue_center: [f64; 3],
    pub controller_center: [f64; 3],
    pub region_min: [f64; 3],
    pub region_max: [f64; 3],
    pub min_dgn_distance: f64,
    pub min_fixed_distance: f64,
    pub placement_attempts: u64,
    /// Timeslot duration T, s.
    pub slot_duration: f64,
    /// Sampling interval Δt, s.
    pub sampling_interval: f64,
    /// Number of timeslots L, including the localization slot.
    pub num_slots: u32,
    pub drug_molecules: u64,
    pub localization_molecules: u64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub eta_step: f64,
    pub repetitions: u64,
    pub master_seed: u64,
    /// Walkers per particle channel estimate.
    pub walkers: u64,
    /// Finest walker time step, s.
    pub walker_step: f64,
    pub segment_levels: u32,
    /// Let DgNs absorb molecules released by peers in their own cluster.
    pub peer_absorption: bool,
    /// Whether releases keep delivering after their own slot.
    pub slot_memory: SlotMemory,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            diffusion_coefficient: 79.4,
            num_dgns: 10,
            dgn_radius: 5.0,
            tissue_radius: 8.0,
            tissue_center: [30.0, 8.0, 30.0],
            controller_center: [30.0, 106.0, 30.0],
            region_min: [-5.0, 18.0, -5.0],
            region_max: [65.0, 88.0, 65.0],
            min_dgn_distance: 6.0,
            min_fixed_distance: 10.0,
            placement_attempts: DEFAULT_ATTEMPT_BUDGET,
            slot_duration: 5.0,
            sampling_interval: 0.01,
            num_slots: 3,
            drug_molecules: 10_000,
            localization_molecules: 10_000,
            eta_min: 0.0,
            eta_max: 1000.0,
            eta_step: 10.0,
            repetitions: 4000,
            master_seed: 1,
            walkers: 100_000,
            walker_step: 0.01,
            segment_levels: 6,
            peer_absorption: false,
            slot_memory: SlotMemory::SlotLocal,
        }
    }
}

impl TrialConfig {
    pub fn delivery_options(&self) -> DeliveryOptions {
        DeliveryOptions {
            peer_absorption: self.peer_absorption,
            memory: self.slot_memory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.channel_params()?;
        if self.num_slots < 2 {
            return fail(format!("num_slots must be at least 2, got {}", self.num_slots));
        }
        if self.repetitions < 1 {
            return fail("repetitions must be at least 1".into());
        }
        if !(self.dgn_radius > 0.0) || !(self.tissue_radius > 0.0) {
            return fail("DgN and tissue radii must be positive".into());
        }
        if self.region().is_degenerate() {
            return fail("region_min must be below region_max on every axis".into());
        }
        if !(self.min_dgn_distance >= 0.0) || !(self.min_fixed_distance >= 0.0) {
            return fail("minimum distances must be non-negative".into());
        }
        if !(self.eta_step > 0.0) || !(self.eta_min >= 0.0) || !(self.eta_max >= self.eta_min) {
            return fail(format!(
                "η grid needs 0 <= eta_min <= eta_max and eta_step > 0 (got {}..{} step {})",
                self.eta_min, self.eta_max, self.eta_step
            ));
        }
        if self.walkers == 0 {
            return fail("walkers must be positive".into());
        }
        self.walker_config(self.slot_duration)
            .validate(self.sampling_interval)
    }

    pub fn channel_params(&self) -> Result<ChannelParams> {
        ChannelParams::new(self.diffusion_coefficient, self.sampling_interval, self.slot_duration)
    }

    pub fn walker_config(&self, horizon: f64) -> WalkerConfig {
        WalkerConfig {
            n_walkers: self.walkers,
            step: self.walker_step,
            horizon,
            diffusion: self.diffusion_coefficient,
            segment_levels: self.segment_levels,
        }
    }

    /// One-hop thresholds `eta_min, eta_min + step, …, eta_max`.
    pub fn eta_grid(&self) -> Vec<f64> {
        let n = ((self.eta_max - self.eta_min) / self.eta_step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.eta_min + i as f64 * self.eta_step).collect()
    }

    pub fn region(&self) -> Region {
        Region::new(self.region_min.into(), self.region_max.into())
    }

    pub fn tissue(&self) -> Body {
        Body::tissue(Vec3::from(self.tissue_center), self.tissue_radius)
    }

    pub fn controller(&self) -> Body {
        Body::controller(Vec3::from(self.controller_center))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrialConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a configuration file, filling omitted keys with defaults.
pub fn parse_config(path: &Path) -> Result<TrialConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrialConfig::from_toml(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TrialConfig> {
        TrialConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, TrialConfig::default());
        assert_eq!(cfg.diffusion_coefficient, 79.4);
        assert_eq!(cfg.num_dgns, 10);
        assert_eq!((cfg.dgn_radius, cfg.tissue_radius), (5.0, 8.0));
        assert_eq!((cfg.slot_duration, cfg.sampling_interval, cfg.num_slots), (5.0, 0.01, 3));
        assert_eq!((cfg.drug_molecules, cfg.localization_molecules), (10_000, 10_000));
        assert_eq!(cfg.channel_params().unwrap().samples_per_slot, 500);
    }

    #[test]
    fn fractional_slot_rejected() {
        assert!(matches!(parse("sampling_interval = 0.3\nslot_duration = 5.0"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        match parse("num_dgns = 10\nbogus = 3\n") {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("bogus"), "{message}");
                assert!(message.contains('2'), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_type_rejected() {
        assert!(matches!(parse("num_dgns = \"ten\""), Err(Error::Parse { .. })));
    }

    #[test]
    fn zero_repetitions_rejected() {
        assert!(matches!(parse("repetitions = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn slot_memory_names() {
        assert_eq!(parse("").unwrap().slot_memory, SlotMemory::SlotLocal);
        assert_eq!(parse("slot_memory = \"per-release\"").unwrap().slot_memory, SlotMemory::PerRelease);
        assert!(parse("slot_memory = \"forever\"").is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = parse("num_dgns = 4\neta_max = 200.0\nmaster_seed = 99\npeer_absorption = true").unwrap();
        let again = parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn default_grid_has_101_points() {
        let grid = TrialConfig::default().eta_grid();
        assert_eq!(grid.len(), 101);
        assert_eq!(grid[0], 0.0);
        assert_eq!(grid[100], 1000.0);
        assert_eq!(grid[3], 30.0);
    }
}
