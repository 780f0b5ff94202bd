//! Seeded Monte Carlo harness: trials, the no-relay baseline, threshold
//! sweeps, and aggregation.
//!
//! Each trial re-randomizes the deployment. All η values and the baseline of
//! one trial share its placement, localization counts, walker paths and
//! delivery sampling stream, so comparisons across η are paired.

use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{sample_received, sx_table};
use crate::config::TrialConfig;
use crate::error::{Error, Result};
use crate::geometry::{distance, place_dgns, Body, Scenario};
use crate::particle::{simulate_batch, trace_passages, Absorber, AbsorberSet, MxTable, PassageProfile};
use crate::protocol::{
    count_links, localize, required_receivers, run_delivery, ChannelSet, ClusterAssignment,
    DeliveryLedger, LinkCount, LinkTable, Receiver, Thresholds,
};
use crate::seed::{derive, rng_from, trial_seed, Purpose};

/// Absorber id of the tissue in particle runs (DgNs use their index).
pub const TISSUE_ABSORBER_ID: usize = usize::MAX;

/// Outcome of one trial at one threshold setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_index: u64,
    pub cluster_sizes: Vec<usize>,
    pub links: LinkCount,
    /// Mean first-window probability, cluster 0 → tissue.
    pub h_first_to_tissue: Option<f64>,
    /// Mean first-window probability over (cluster 0, cluster 1) pairs.
    pub h_first_to_next: Option<f64>,
    /// Mean first-window probability, final cluster → tissue.
    pub h_last_to_tissue: Option<f64>,
    /// Molecules delivered to the tissue during `eval_slot`.
    pub n_tot: u64,
    pub eval_slot: u32,
}

/// State shared by every threshold setting of one trial.
pub struct Trial<'a> {
    cfg: &'a TrialConfig,
    index: u64,
    scenario: Scenario,
    localization: MxTable,
    counts: Vec<u64>,
    sx: Vec<Vec<f64>>,
    profiles: Mutex<Vec<Option<Arc<PassageProfile>>>>,
}

impl<'a> Trial<'a> {
    /// Places the DgNs and runs the localization broadcast.
    pub fn prepare(cfg: &'a TrialConfig, index: u64) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.channel_params()?;
        let tissue = cfg.tissue();
        let controller = cfg.controller();
        let mut rng = rng_from(trial_seed(cfg.master_seed, index, Purpose::Placement));
        let centers = place_dgns(
            &cfg.region(),
            cfg.num_dgns,
            cfg.min_dgn_distance,
            &[tissue, controller],
            cfg.min_fixed_distance,
            cfg.placement_attempts,
            &mut rng,
        )?;
        let scenario = Scenario {
            controller,
            tissue,
            dgns: centers.iter().map(|&c| Body::dgn(c, cfg.dgn_radius)).collect(),
            region: cfg.region(),
            diffusion_coefficient: cfg.diffusion_coefficient,
            min_dgn_pair_distance: cfg.min_dgn_distance,
            min_fixed_distance: cfg.min_fixed_distance,
        };

        let dgn_set = dgn_absorbers(&scenario, 0..cfg.num_dgns)?;
        let localization = if dgn_set.is_empty() {
            MxTable {
                ids: Vec::new(),
                probs: Vec::new(),
            }
        } else {
            let record = simulate_batch(
                controller.center,
                &dgn_set,
                &cfg.walker_config(cfg.slot_duration),
                cfg.sampling_interval,
                trial_seed(cfg.master_seed, index, Purpose::LocalizationWalkers),
            )?;
            MxTable::from_record(&record, params.slot_duration())?
        };
        let mut count_rng = rng_from(trial_seed(cfg.master_seed, index, Purpose::LocalizationCounts));
        let counts = (0..cfg.num_dgns)
            .map(|k| {
                let h = localization.for_id(k).map_or(0.0, |w| w[0].value);
                sample_received(cfg.localization_molecules, h, &mut count_rng)
            })
            .collect();

        let windows = cfg.num_slots - 1;
        let sx = scenario
            .dgns
            .iter()
            .map(|d| {
                let table = sx_table(distance(d.center, tissue.center), tissue.radius, &params, windows)?;
                Ok(table.into_iter().map(|w| w.value).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;

        Ok(Self {
            cfg,
            index,
            scenario,
            localization,
            counts,
            sx,
            profiles: Mutex::new(vec![None; cfg.num_dgns]),
        })
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Localization molecules counted by each DgN.
    pub fn localization_counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn localization_table(&self) -> &MxTable {
        &self.localization
    }

    /// Analytic per-window probabilities from each DgN to the tissue.
    pub fn sx_windows(&self) -> &[Vec<f64>] {
        &self.sx
    }

    /// Walker paths from `dgn` through every DgN that can ever absorb its
    /// release under some threshold setting, ending at the tissue.
    fn profile(&self, dgn: usize) -> Result<Arc<PassageProfile>> {
        if let Some(p) = &self.profiles.lock().expect("profile lock")[dgn] {
            return Ok(Arc::clone(p));
        }
        let own = self.counts[dgn];
        let candidates = (0..self.cfg.num_dgns).filter(|&j| {
            j != dgn
                && (self.counts[j] < own || (self.cfg.peer_absorption && self.counts[j] == own))
        });
        let mut bodies: Vec<Absorber> = dgn_absorbers(&self.scenario, candidates)?.iter().copied().collect();
        bodies.push(Absorber {
            id: TISSUE_ABSORBER_ID,
            center: self.scenario.tissue.center,
            radius: self.scenario.tissue.radius,
        });
        let windows = self.cfg.slot_memory.windows(2, self.cfg.num_slots);
        let horizon = f64::from(windows) * self.cfg.slot_duration;
        let seed = derive(
            trial_seed(self.cfg.master_seed, self.index, Purpose::DeliveryWalkers),
            &[dgn as u64],
        );
        let profile = Arc::new(trace_passages(
            self.scenario.dgns[dgn].center,
            &AbsorberSet::new(bodies)?,
            &[TISSUE_ABSORBER_ID],
            &self.cfg.walker_config(horizon),
            seed,
        )?);
        self.profiles.lock().expect("profile lock")[dgn] = Some(Arc::clone(&profile));
        Ok(profile)
    }

    fn link_table(&self, assignment: &ClusterAssignment, dgn: usize) -> Result<LinkTable> {
        let receivers = required_receivers(assignment, dgn, self.cfg.peer_absorption);
        if receivers.len() == 1 {
            // Tissue alone: single-receiver channel.
            return Ok(LinkTable {
                receivers,
                windows: vec![self.sx[dgn].clone()],
            });
        }
        let ids: Vec<usize> = receivers
            .iter()
            .map(|r| match r {
                Receiver::Dgn(j) => *j,
                Receiver::Tissue => TISSUE_ABSORBER_ID,
            })
            .collect();
        let record = self.profile(dgn)?.record_for(&ids, self.cfg.sampling_interval)?;
        let table = MxTable::from_record(&record, self.cfg.slot_duration)?;
        Ok(LinkTable {
            receivers,
            windows: table
                .probs
                .iter()
                .map(|w| w.iter().map(|p| p.value).collect())
                .collect(),
        })
    }

    /// Channel tables for every transmitter under `assignment`.
    pub fn channels(&self, assignment: &ClusterAssignment) -> Result<ChannelSet> {
        (0..assignment.len())
            .map(|k| Ok((k, self.link_table(assignment, k)?)))
            .collect()
    }

    pub fn assignment(&self, thresholds: &Thresholds) -> ClusterAssignment {
        localize(&self.counts, thresholds)
    }

    /// Runs the drug phase under `thresholds`; empty thresholds give the
    /// no-relay baseline.
    pub fn run(&self, thresholds: &Thresholds) -> Result<(TrialResult, DeliveryLedger)> {
        let assignment = self.assignment(thresholds);
        let channels = self.channels(&assignment)?;
        let mut rng = rng_from(trial_seed(self.cfg.master_seed, self.index, Purpose::DeliveryCounts));
        let ledger = run_delivery(
            &assignment,
            &channels,
            self.cfg.drug_molecules,
            self.cfg.num_slots,
            self.cfg.delivery_options(),
            &mut rng,
        )?;
        let sizes = assignment.sizes();
        let hops = assignment.hops();
        let first: Vec<usize> = assignment.members(0).collect();
        let last: Vec<usize> = assignment.members(hops).collect();
        let next: Vec<usize> = if hops >= 1 { assignment.members(1).collect() } else { Vec::new() };
        let h1 = |tx: usize, rx: Receiver| channels[&tx].h(rx, 1).expect("validated by run_delivery");
        let h_first_to_tissue = mean(first.iter().map(|&k| h1(k, Receiver::Tissue)));
        let h_first_to_next = mean(
            first
                .iter()
                .flat_map(|&k| next.iter().map(move |&j| (k, j)))
                .map(|(k, j)| h1(k, Receiver::Dgn(j))),
        );
        let h_last_to_tissue = mean(last.iter().map(|&k| h1(k, Receiver::Tissue)));
        let eval_slot = self.cfg.num_slots;
        let result = TrialResult {
            trial_index: self.index,
            links: count_links(&sizes),
            cluster_sizes: sizes,
            h_first_to_tissue,
            h_first_to_next: if hops >= 1 { h_first_to_next } else { None },
            h_last_to_tissue,
            n_tot: ledger.tissue_total(eval_slot),
            eval_slot,
        };
        Ok((result, ledger))
    }
}

fn dgn_absorbers(scenario: &Scenario, which: impl Iterator<Item = usize>) -> Result<AbsorberSet> {
    AbsorberSet::new(
        which
            .map(|k| Absorber {
                id: k,
                center: scenario.dgns[k].center,
                radius: scenario.dgns[k].radius,
            })
            .collect(),
    )
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn run_trial(cfg: &TrialConfig, thresholds: &Thresholds, trial_index: u64) -> Result<TrialResult> {
    Ok(Trial::prepare(cfg, trial_index)?.run(thresholds)?.0)
}

/// The same deployment without relays: every DgN sends straight to the
/// tissue over its single-receiver channel.
pub fn run_baseline(cfg: &TrialConfig, trial_index: u64) -> Result<TrialResult> {
    run_trial(cfg, &Thresholds::none(), trial_index)
}

/// Raw per-trial results of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepData {
    pub etas: Vec<f64>,
    /// `relay[e][t]`: trial `t` at threshold `etas[e]`.
    pub relay: Vec<Vec<TrialResult>>,
    pub baseline: Vec<TrialResult>,
}

impl SweepData {
    pub fn repetitions(&self) -> usize {
        self.baseline.len()
    }

    /// The first `n` trials; identical to a sweep run with `n` repetitions.
    pub fn prefix(&self, n: usize) -> SweepData {
        SweepData {
            etas: self.etas.clone(),
            relay: self.relay.iter().map(|r| r[..n.min(r.len())].to_vec()).collect(),
            baseline: self.baseline[..n.min(self.baseline.len())].to_vec(),
        }
    }
}

/// Runs `cfg.repetitions` trials over the one-hop η grid and the baseline.
/// `on_trial` is called once per finished trial.
pub fn run_sweep_trials(cfg: &TrialConfig, on_trial: &(dyn Fn(u64) + Sync)) -> Result<SweepData> {
    cfg.validate()?;
    let etas = cfg.eta_grid();
    let thresholds = etas
        .iter()
        .map(|&e| Thresholds::one_hop(e))
        .collect::<Result<Vec<_>>>()?;
    let per_trial: Vec<(TrialResult, Vec<TrialResult>)> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|t| {
            let trial = Trial::prepare(cfg, t)?;
            let base = trial.run(&Thresholds::none())?.0;
            let relay = thresholds
                .iter()
                .map(|th| Ok(trial.run(th)?.0))
                .collect::<Result<Vec<_>>>()?;
            on_trial(t);
            Ok((base, relay))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut relay = vec![Vec::with_capacity(per_trial.len()); etas.len()];
    let mut baseline = Vec::with_capacity(per_trial.len());
    for (base, rows) in per_trial {
        baseline.push(base);
        for (e, r) in rows.into_iter().enumerate() {
            relay[e].push(r);
        }
    }
    Ok(SweepData { etas, relay, baseline })
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return None;
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    /// Mean `K_0..K_N`.
    pub cluster_sizes: Vec<Estimate>,
    pub total_links: Estimate,
    pub relay_links: Estimate,
    pub h_first_to_tissue: Option<Estimate>,
    pub h_first_to_next: Option<Estimate>,
    pub h_last_to_tissue: Option<Estimate>,
    pub n_tot: Estimate,
    pub gain_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub repetitions: usize,
    pub rows: Vec<SweepRow>,
    pub baseline: Estimate,
    pub best_eta: f64,
    pub best_n_tot: f64,
}

impl SweepSummary {
    pub fn row(&self, eta: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.eta == eta)
    }
}

/// Percentage by which the best threshold beats the baseline.
pub fn gain_percent(summary: &SweepSummary) -> Result<f64> {
    gain_over(summary.best_n_tot, summary.baseline.mean)
}

pub fn gain_over(value: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (value - baseline) / baseline)
}

pub fn summarize(data: &SweepData) -> Result<SweepSummary> {
    let baseline = Estimate::of(data.baseline.iter().map(|r| r.n_tot as f64))
        .ok_or_else(|| Error::Config("sweep has no trials".into()))?;
    let rows = data
        .etas
        .iter()
        .zip(&data.relay)
        .map(|(&eta, trials)| {
            let clusters = trials.first().map_or(0, |t| t.cluster_sizes.len());
            let n_tot = Estimate::of(trials.iter().map(|t| t.n_tot as f64)).expect("non-empty");
            Ok(SweepRow {
                eta,
                cluster_sizes: (0..clusters)
                    .map(|c| Estimate::of(trials.iter().map(|t| t.cluster_sizes[c] as f64)).expect("non-empty"))
                    .collect(),
                total_links: Estimate::of(trials.iter().map(|t| t.links.total as f64)).expect("non-empty"),
                relay_links: Estimate::of(trials.iter().map(|t| t.links.relay as f64)).expect("non-empty"),
                h_first_to_tissue: Estimate::of(trials.iter().filter_map(|t| t.h_first_to_tissue)),
                h_first_to_next: Estimate::of(trials.iter().filter_map(|t| t.h_first_to_next)),
                h_last_to_tissue: Estimate::of(trials.iter().filter_map(|t| t.h_last_to_tissue)),
                gain_pct: gain_over(n_tot.mean, baseline.mean)?,
                n_tot,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .fold(None::<&SweepRow>, |acc, r| match acc {
            Some(b) if b.n_tot.mean >= r.n_tot.mean => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Config("empty η grid".into()))?;
    Ok(SweepSummary {
        repetitions: data.repetitions(),
        best_eta: best.eta,
        best_n_tot: best.n_tot.mean,
        rows,
        baseline,
    })
}

/// Runs the full sweep and aggregates it.
pub fn sweep(cfg: &TrialConfig) -> Result<SweepSummary> {
    summarize(&run_sweep_trials(cfg, &|_| {})?)
}
