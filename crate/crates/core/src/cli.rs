//! Subcommand bodies shared by the binary and the integration tests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::analytic::{sx_cdf, sx_table};
use crate::config::{TrialConfig, FAST_REPETITIONS};
use crate::error::Result;
use crate::experiment::{summarize, run_sweep_trials, Trial, TrialResult, SweepSummary, TISSUE_ABSORBER_ID};
use crate::geometry::{distance, Vec3};
use crate::io::{
    slot_lines, write_csv, write_json, write_ledger_jsonl, write_sweep_csv, Outputs, RunManifest,
    MX_TABLE_COLUMNS, SX_TABLE_COLUMNS,
};
use crate::particle::{mx_window_probs, simulate_batch, Absorber, AbsorberSet, MxTable};
use crate::protocol::{audit_ledger, count_links, DeliveryLedger, Thresholds};
use crate::seed::{derive, rng_from};

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub repetitions: Option<u64>,
    pub walkers: Option<u64>,
    pub fast: bool,
}

impl Overrides {
    pub fn apply(&self, mut cfg: TrialConfig) -> Result<TrialConfig> {
        if self.fast {
            cfg.repetitions = FAST_REPETITIONS;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(w) = self.walkers {
            cfg.walkers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn finish(command: &str, cfg: &TrialConfig, mut out: Outputs, start: Instant) -> Result<RunManifest> {
    let manifest_path = out.file("manifest.json");
    let outputs: Vec<PathBuf> = out.files().iter().filter(|p| **p != manifest_path).cloned().collect();
    let manifest = RunManifest::new(command, cfg, start.elapsed().as_secs_f64(), outputs);
    write_json(&manifest_path, &manifest)?;
    out.commit();
    Ok(manifest)
}

/// Writes `sweep.csv` and `manifest.json` under `out_dir`.
pub fn cmd_sweep(cfg: &TrialConfig, out_dir: &Path) -> Result<(SweepSummary, RunManifest)> {
    let start = Instant::now();
    let mut out = Outputs::create(out_dir)?;
    let summary = summarize(&run_sweep_trials(cfg, &|_| {})?)?;
    write_sweep_csv(&out.file("sweep.csv"), &summary)?;
    let manifest = finish("sweep", cfg, out, start)?;
    Ok((summary, manifest))
}

/// Runs trial 0 at threshold `eta` and dumps its ledger, one line per slot.
pub fn cmd_trial(cfg: &TrialConfig, eta: f64, out_dir: &Path) -> Result<(TrialResult, DeliveryLedger, RunManifest)> {
    let start = Instant::now();
    let mut out = Outputs::create(out_dir)?;
    let trial = Trial::prepare(cfg, 0)?;
    let (result, ledger) = trial.run(&Thresholds::one_hop(eta)?)?;
    write_ledger_jsonl(&out.file("ledger.jsonl"), &ledger)?;
    write_json(&out.file("trial.json"), &result)?;
    let manifest = finish("trial", cfg, out, start)?;
    Ok((result, ledger, manifest))
}

fn mx_rows(source: &str, table: &MxTable, name: impl Fn(usize) -> String) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (id, windows) in table.ids.iter().zip(&table.probs) {
        for (w, p) in windows.iter().enumerate() {
            rows.push(vec![
                source.to_string(),
                name(*id),
                (w + 1).to_string(),
                format!("{:.8}", p.value),
                format!("{:.8}", p.standard_error),
            ]);
        }
    }
    rows
}

/// Channel tables for the deployment of trial 0: analytic DgN-to-tissue
/// windows, the localization broadcast, and each DgN's release with every
/// other DgN and the tissue absorbing.
pub fn cmd_channel_table(cfg: &TrialConfig, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let mut out = Outputs::create(out_dir)?;
    let params = cfg.channel_params()?;
    let slots = cfg.num_slots - 1;
    let trial = Trial::prepare(cfg, 0)?;
    let scenario = trial.scenario();

    let mut sx_rows = Vec::new();
    for (k, dgn) in scenario.dgns.iter().enumerate() {
        let center = distance(dgn.center, scenario.tissue.center);
        let r = scenario.tissue.radius;
        let table = sx_table(center, r, &params, slots)?;
        for (w, p) in table.iter().enumerate() {
            let t_end = (w + 1) as f64 * params.slot_duration();
            sx_rows.push(vec![
                k.to_string(),
                format!("{center:.6}"),
                (w + 1).to_string(),
                format!("{t_end}"),
                format!("{:.10}", sx_cdf(center - r, t_end, r, params.diffusion)?),
                format!("{:.10}", p.value),
            ]);
        }
    }
    write_csv(&out.file("sx_table.csv"), &SX_TABLE_COLUMNS, &sx_rows)?;

    let name = |id: usize| {
        if id == TISSUE_ABSORBER_ID {
            "tissue".to_string()
        } else {
            format!("DgN {id}")
        }
    };
    let mut rows = mx_rows("controller", trial.localization_table(), name);
    let walkers = cfg.walker_config(f64::from(slots) * cfg.slot_duration);
    for (k, dgn) in scenario.dgns.iter().enumerate() {
        let mut bodies: Vec<Absorber> = scenario
            .dgns
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(j, b)| Absorber { id: j, center: b.center, radius: b.radius })
            .collect();
        bodies.push(Absorber {
            id: TISSUE_ABSORBER_ID,
            center: scenario.tissue.center,
            radius: scenario.tissue.radius,
        });
        let seed = derive(cfg.master_seed, &[0x7461_626c, k as u64]);
        let table = mx_window_probs(dgn.center, &AbsorberSet::new(bodies)?, &params, &walkers, seed)?;
        rows.extend(mx_rows(&format!("DgN {k}"), &table, name));
    }
    write_csv(&out.file("mx_table.csv"), &MX_TABLE_COLUMNS, &rows)?;
    finish("channel-table", cfg, out, start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Standard errors allowed between particle and closed-form hitting
/// probabilities in `validate`.
pub const VALIDATE_SX_SIGMAS: f64 = 4.0;

/// Pair enumeration used as the reference for the link-count formula.
pub fn enumerate_links(clusters: &[usize]) -> (u64, u64) {
    let mut relay = 0;
    for &a in clusters {
        for &b in clusters {
            if b > a {
                relay += 1;
            }
        }
    }
    (clusters.len() as u64 + relay, relay)
}

/// The oracle suite: single-receiver particle runs against the closed form,
/// link counting against enumeration, particle conservation, and ledger
/// recomputation on trial 0.
pub fn cmd_validate(cfg: &TrialConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let horizon = cfg.slot_duration;
    let walkers = cfg.walker_config(horizon);
    let n = walkers.n_walkers as f64;
    for (i, (d, r)) in [(10.0, 5.0), (20.0, 5.0), (30.0, 5.0), (10.0, 8.0), (20.0, 8.0), (30.0, 8.0)]
        .into_iter()
        .enumerate()
    {
        let set = AbsorberSet::new(vec![Absorber {
            id: 0,
            center: Vec3::new(d + r, 0.0, 0.0),
            radius: r,
        }])?;
        let rec = simulate_batch(Vec3::default(), &set, &walkers, cfg.sampling_interval, derive(cfg.master_seed, &[0x7378, i as u64]))?;
        let f = sx_cdf(d, horizon, r, cfg.diffusion_coefficient)?;
        let p = rec.absorbed() as f64 / n;
        let se = (f * (1.0 - f) / n).sqrt();
        checks.push(check(
            format!("single receiver d={d} r={r}"),
            (p - f).abs() <= VALIDATE_SX_SIGMAS * se,
            format!("particle {p:.5}, closed form {f:.5}, {:.2} SE", (p - f) / se),
        ));
        let conserved = rec.absorbed() + rec.survivors == rec.n_walkers;
        checks.push(check(
            format!("conservation d={d} r={r}"),
            conserved,
            format!("{} absorbed + {} surviving of {}", rec.absorbed(), rec.survivors, rec.n_walkers),
        ));
    }

    let mut rng = rng_from(derive(cfg.master_seed, &[0x6c696e6b]));
    let mut bad = 0;
    for _ in 0..100 {
        let k = rng.random_range(0..=20usize);
        let hops = rng.random_range(0..4usize);
        let clusters: Vec<usize> = (0..k).map(|_| rng.random_range(0..=hops)).collect();
        let mut sizes = vec![0; hops + 1];
        for &c in &clusters {
            sizes[c] += 1;
        }
        let links = count_links(&sizes);
        if (links.total, links.relay) != enumerate_links(&clusters) {
            bad += 1;
        }
    }
    checks.push(check("link counting", bad == 0, format!("{bad} of 100 partitions disagree")));

    let trial = Trial::prepare(cfg, 0)?;
    let grid = cfg.eta_grid();
    let picks: Vec<f64> = grid.iter().step_by((grid.len() / 5).max(1)).copied().collect();
    for eta in picks {
        let th = Thresholds::one_hop(eta)?;
        let (result, ledger) = trial.run(&th)?;
        let audit = audit_ledger(&ledger, &trial.assignment(&th));
        let lines = slot_lines(&ledger);
        let consistent = lines.iter().find(|l| l.slot == result.eval_slot).map(|l| l.tissue_absorbed) == Some(result.n_tot);
        checks.push(check(
            format!("ledger at eta={eta}"),
            audit.is_ok() && consistent,
            match audit {
                Ok(()) => format!("N_tot {} at slot {}", result.n_tot, result.eval_slot),
                Err(e) => e,
            },
        ));
    }
    Ok(checks)
}
