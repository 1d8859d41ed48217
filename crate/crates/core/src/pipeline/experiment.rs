//! Shared simulation steps and the in-memory end-to-end experiment.

use super::analysis::{self, Analysis, CatalogEvent};
use super::config::RunConfig;
use super::injection::{self, InjectionResult};
use super::sync::{self, DropTally};
use crate::coinstat::{Measured, TaggedPulse};
use crate::combination::Combination;
use crate::detcal;
use crate::error::Result;
use crate::fluxmc::EnergySampler;
use crate::geometry::{self, CrossSectionSet, DepositionTable};
use crate::rng::{self, Domain};
use crate::streamsim::{self, EntryShots, EntryTruth, PulseRecord, SourceTag, TruthSpec};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Transport through the scene for the detector-stack sampler.
pub fn transport_detector(cfg: &RunConfig) -> Result<DepositionTable> {
    let all = Combination::from_indices(0..cfg.scene.prisms.len());
    geometry::sample_and_transport(&cfg.sampling.detector, &cfg.flux, &cfg.scene, all)
}

/// Transport through the scene for the chip sampler.
pub fn transport_chip(cfg: &RunConfig) -> Result<DepositionTable> {
    let chip = cfg.scene.labels().index_of(&cfg.chip_label).expect("validated");
    geometry::sample_and_transport(&cfg.sampling.chip, &cfg.flux, &cfg.scene, Combination::single(chip))
}

/// In-window cross-sections: detector energies are smeared to E_s and cut at V/a.
pub fn windowed_cross_sections(cfg: &RunConfig, table: &DepositionTable, seed: u64) -> Result<CrossSectionSet> {
    let smeared = detcal::smear_table(table, &cfg.responses(), seed);
    geometry::cross_sections(&smeared, &cfg.acceptance_windows(), cfg.scene.deposition.secondary_boost)
}

/// Both cross-section sets of a run.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub detector_xs: CrossSectionSet,
    pub chip_xs: CrossSectionSet,
}

pub fn prepare_geometry(cfg: &RunConfig) -> Result<Geometry> {
    let det = transport_detector(cfg)?;
    let detector_xs = windowed_cross_sections(cfg, &det, rng::child_seed(cfg.seed, 1))?;
    drop(det);
    let chip = transport_chip(cfg)?;
    let chip_xs = windowed_cross_sections(cfg, &chip, rng::child_seed(cfg.seed, 2))?;
    Ok(Geometry { detector_xs, chip_xs })
}

pub fn truth_spec<'a>(cfg: &'a RunConfig, chip_xs: &'a CrossSectionSet) -> TruthSpec<'a> {
    TruthSpec {
        scene: &cfg.scene,
        chip_xs,
        chip_label: cfg.chip_label.clone(),
        flux_model: &cfg.flux,
        detector_sampler: cfg.sampling.detector.clone(),
        chip_sampler: cfg.sampling.chip.clone(),
        flux: cfg.experiment.flux,
        r_other: cfg.experiment.r_other,
        timebase: cfg.timebase.clone(),
        entries: cfg.experiment.entries,
        n_qubits: cfg.qubits.len(),
        cosmic_amplitude: cfg.cosmic_amplitude.clone(),
        other_amplitude: cfg.other_amplitude.clone(),
        seed: cfg.seed,
    }
}

/// Raw products of one simulated entry.
pub struct EntryStreams {
    pub truth: EntryTruth,
    pub shots: EntryShots,
    pub pulses: Vec<PulseRecord>,
    pub refs: Vec<i64>,
}

pub fn simulate_streams(cfg: &RunConfig, spec: &TruthSpec<'_>, energies: &EnergySampler, entry: u32) -> Result<EntryStreams> {
    let truth = streamsim::simulate_entry(spec, energies, entry)?;
    let shots = streamsim::render_shots(entry, &truth.bursts, &cfg.qubits, &cfg.timebase, cfg.seed);
    let mut r = rng::stream(cfg.seed, Domain::Pulses, entry as u64);
    let e = &cfg.experiment;
    let pulses = streamsim::render_pulses(&truth.muons, &cfg.channels(), &cfg.timebase, &e.clock, e.jitter_ns, &mut r);
    let refs = streamsim::emit_reference_pulses(&cfg.timebase, entry, &e.clock);
    Ok(EntryStreams { truth, shots, pulses, refs })
}

/// Source of the truth burst nearest to each event, within `max_cycles`.
pub fn match_truth(events: &[CatalogEvent], truth: &EntryTruth, max_cycles: u32) -> Vec<Option<SourceTag>> {
    events
        .iter()
        .map(|e| {
            truth
                .bursts
                .iter()
                .map(|b| ((e.onset_cycle as f64 - b.onset_cycle.floor()).abs(), b.source))
                .filter(|(d, _)| *d <= max_cycles as f64)
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|x| x.1)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TruthSummary {
    pub bursts_cosmic: u64,
    pub bursts_other: u64,
    pub detected_cosmic: u64,
    pub detected_other: u64,
    pub detected_unmatched: u64,
    /// Cosmic burst rate injected (σ_Q·Φ), s⁻¹.
    pub injected_cosmic_rate: f64,
    pub injected_flux: f64,
}

impl TruthSummary {
    /// Fraction of detected, truth-matched events that were cosmic.
    pub fn detected_cosmic_fraction(&self) -> f64 {
        let n = self.detected_cosmic + self.detected_other;
        self.detected_cosmic as f64 / n.max(1) as f64
    }
}

pub struct ExperimentReport {
    pub analysis: Analysis,
    pub injection: InjectionResult,
    pub truth: TruthSummary,
    pub events: Vec<CatalogEvent>,
    pub event_truth: Vec<Option<SourceTag>>,
    pub drops: DropTally,
    pub pulses_rendered: u64,
    pub unsynchronized: Vec<u32>,
}

struct EntryResult {
    entry: u32,
    events: Vec<CatalogEvent>,
    truth_tags: Vec<Option<SourceTag>>,
    pulses: Vec<PulseRecord>,
    refs: Vec<i64>,
    bursts: (u64, u64),
}

/// Simulate, detect and analyse every entry without touching the disk.
pub fn run_experiment(cfg: &RunConfig, geo: &Geometry) -> Result<ExperimentReport> {
    cfg.validate()?;
    let spec = truth_spec(cfg, &geo.chip_xs);
    spec.validate()?;
    let energies = EnergySampler::new(&cfg.flux);
    let template = cfg.detection.template(cfg.timebase.cycle_duration)?;
    let per_entry: Vec<EntryResult> = (0..cfg.experiment.entries)
        .into_par_iter()
        .map(|entry| {
            let s = simulate_streams(cfg, &spec, &energies, entry)?;
            let events = analysis::detect_entry(&s.shots, &template, cfg);
            let truth_tags = match_truth(&events, &s.truth, cfg.injection.match_cycles);
            let nc = s.truth.bursts.iter().filter(|b| b.source == SourceTag::Cosmic).count() as u64;
            let no = s.truth.bursts.len() as u64 - nc;
            Ok(EntryResult { entry, events, truth_tags, pulses: s.pulses, refs: s.refs, bursts: (nc, no) })
        })
        .collect::<Result<_>>()?;

    let mut refs = BTreeMap::new();
    let mut pulses = Vec::new();
    let mut events = Vec::new();
    let mut event_truth = Vec::new();
    let mut truth = TruthSummary { injected_flux: cfg.experiment.flux, injected_cosmic_rate: spec.cosmic_rate()?, ..Default::default() };
    for r in per_entry {
        refs.insert(r.entry, r.refs);
        pulses.extend(r.pulses);
        truth.bursts_cosmic += r.bursts.0;
        truth.bursts_other += r.bursts.1;
        for t in &r.truth_tags {
            match t {
                Some(SourceTag::Cosmic) => truth.detected_cosmic += 1,
                Some(SourceTag::Other) => truth.detected_other += 1,
                None => truth.detected_unmatched += 1,
            }
        }
        events.extend(r.events);
        event_truth.extend(r.truth_tags);
    }
    let map = sync::build_sync(&refs, &cfg.timebase);
    let (tagged, drops) = sync::assign_pulses(&pulses, &map, &cfg.response_by_index());
    let injection = injection::run_injection(cfg, &cfg.qubits, &cfg.cosmic_amplitude, cfg.injection.bursts, rng::child_seed(cfg.seed, 3))?;
    let window_eff = cfg.coincidence.window_efficiency.map(Measured::exact).unwrap_or(injection.window_efficiency);
    let analysis = analysis::analyze(cfg, &events, &tagged, &map.entry_ids(), &geo.detector_xs, &geo.chip_xs, window_eff)?;
    Ok(ExperimentReport {
        analysis,
        injection,
        truth,
        events,
        event_truth,
        drops,
        pulses_rendered: pulses.len() as u64,
        unsynchronized: map.unsynchronized,
    })
}

/// Pulses tagged onto cycles for a set of raw pulses and reference timestamps.
pub fn tag_pulses(cfg: &RunConfig, pulses: &[PulseRecord], refs: &BTreeMap<u32, Vec<i64>>) -> (Vec<TaggedPulse>, DropTally, sync::SyncMap) {
    let map = sync::build_sync(refs, &cfg.timebase);
    let (tagged, drops) = sync::assign_pulses(pulses, &map, &cfg.response_by_index());
    (tagged, drops, map)
}
