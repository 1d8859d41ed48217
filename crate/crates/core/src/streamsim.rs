//! Synthetic ground truth: burst events, qubit shot streams and detector pulses.

use crate::combination::Combination;
use crate::detcal::ResponseParams;
use crate::error::{Error, Result};
use crate::fluxmc::{self, EnergySampler, FluxModel, SamplerConfig};
use crate::geometry::{self, CrossSectionSet, Deposits, Scene};
use crate::rng::{self, Domain};
use rand::Rng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Timing of the repeated measurement sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimebaseConfig {
    /// s
    pub cycle_duration: f64,
    pub cycles_per_entry: u32,
    /// s
    pub inter_entry_gap: f64,
    /// cycles
    pub ref_pulse_period: u32,
    /// Idle time after readout before the next preparation, s.
    pub wait_time: f64,
    /// Fraction of a cycle at which the decay rate is sampled.
    pub measure_phase: f64,
    /// Timestamp grid, ns.
    pub timestamp_resolution_ns: i64,
}

impl Default for TimebaseConfig {
    fn default() -> Self {
        TimebaseConfig {
            cycle_duration: 15.274e-6,
            cycles_per_entry: 1_000_000,
            inter_entry_gap: 12.0,
            ref_pulse_period: 100,
            wait_time: 10.2e-6,
            measure_phase: 0.9,
            timestamp_resolution_ns: 4,
        }
    }
}

impl TimebaseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_duration > 0.0) {
            return Err(Error::config("cycle_duration must be positive"));
        }
        if self.cycles_per_entry == 0 || self.ref_pulse_period == 0 || !self.cycles_per_entry.is_multiple_of(self.ref_pulse_period) {
            return Err(Error::config("cycles_per_entry must be a positive multiple of ref_pulse_period"));
        }
        if !(self.inter_entry_gap >= 0.0) || !(self.wait_time >= 0.0) {
            return Err(Error::config("gap and wait time must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.measure_phase) {
            return Err(Error::config("measure_phase must lie in [0, 1)"));
        }
        if self.timestamp_resolution_ns <= 0 {
            return Err(Error::config("timestamp resolution must be positive"));
        }
        Ok(())
    }

    /// Duration of one entry, s.
    pub fn entry_span(&self) -> f64 {
        self.cycles_per_entry as f64 * self.cycle_duration
    }

    /// Start of entry `e` on the true time axis, s.
    pub fn entry_start(&self, e: u32) -> f64 {
        e as f64 * (self.entry_span() + self.inter_entry_gap)
    }

    pub fn live_time(&self, entries: u32) -> f64 {
        entries as f64 * self.entry_span()
    }

    pub fn refs_per_entry(&self) -> u32 {
        self.cycles_per_entry / self.ref_pulse_period
    }

    /// Number of whole entries needed for at least `live` seconds.
    pub fn entries_for(&self, live: f64) -> u32 {
        (live / self.entry_span()).ceil().max(0.0) as u32
    }

    /// Round a time in seconds onto the timestamp grid, ns.
    pub fn to_grid_ns(&self, t: f64) -> i64 {
        let r = self.timestamp_resolution_ns as f64;
        ((t * 1e9 / r).round() * r) as i64
    }
}

/// Per-qubit relaxation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitParams {
    pub label: String,
    /// s⁻¹
    pub baseline_gamma: f64,
    /// s
    pub recovery_tau: f64,
    /// s
    #[serde(default = "default_delay")]
    pub effective_delay: f64,
    #[serde(default = "default_fidelity")]
    pub fidelity_a: f64,
}

fn default_delay() -> f64 {
    3e-6
}

fn default_fidelity() -> f64 {
    1.0
}

impl QubitParams {
    pub fn new(label: &str, t1: f64, recovery_tau: f64) -> Self {
        QubitParams { label: label.into(), baseline_gamma: 1.0 / t1, recovery_tau, effective_delay: 3e-6, fidelity_a: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.baseline_gamma > 0.0 && self.recovery_tau > 0.0 && self.effective_delay > 0.0) {
            return Err(Error::config(format!("qubit `{}` needs positive rates and times", self.label)));
        }
        if !(self.fidelity_a > 0.0 && self.fidelity_a <= 1.0) {
            return Err(Error::config(format!("qubit `{}` fidelity must lie in (0, 1]", self.label)));
        }
        Ok(())
    }

    /// Probability that a prepared excited state reads ground.
    pub fn decay_probability(&self, gamma: f64) -> f64 {
        1.0 - self.fidelity_a * (-gamma * self.effective_delay).exp()
    }

    /// Probability of a ground readout after an excited readout.
    pub fn unconditioned_ground(&self, gamma: f64, wait: f64) -> f64 {
        let w = 1.0 - (-gamma * wait).exp();
        (1.0 - w) + w * self.decay_probability(gamma)
    }

    /// Long-run fraction of ground readouts with constant `gamma`.
    pub fn stationary_ground(&self, gamma: f64, wait: f64) -> f64 {
        let p = self.decay_probability(gamma);
        let g = self.unconditioned_ground(gamma, wait);
        g / (1.0 - p + g)
    }
}

/// Ten-qubit array with measured T1 and recovery constants.
pub fn reference_qubits() -> Vec<QubitParams> {
    const T1_US: [f64; 10] = [53.0, 49.0, 42.0, 16.0, 40.0, 43.0, 57.0, 55.0, 69.0, 47.0];
    const TAU_MS: [f64; 10] = [5.9, 6.6, 0.8, 6.5, 6.0, 0.8, 0.7, 6.5, 0.7, 0.8];
    (0..10).map(|i| QubitParams::new(&format!("Q{}", i + 1), T1_US[i] * 1e-6, TAU_MS[i] * 1e-3)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Cosmic,
    Other,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Cosmic => "cosmic",
            SourceTag::Other => "other",
        }
    }
}

/// Ground truth for one burst.
#[derive(Debug, Clone, PartialEq)]
pub struct BurstTruth {
    /// Absolute true time, s.
    pub onset_time: f64,
    pub entry: u32,
    /// Fractional cycle position within the entry.
    pub onset_cycle: f64,
    pub source: SourceTag,
    /// Per-qubit initial rate increase, s⁻¹.
    pub dgamma: Vec<f64>,
    pub linked_muon: Option<u64>,
}

/// Distribution of per-qubit burst amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplitudeModel {
    /// s⁻¹
    pub dgamma_min: f64,
    /// s⁻¹
    pub dgamma_max: f64,
    /// Participation probability of the first qubit.
    pub participation_lo: f64,
    /// Participation probability of the last qubit.
    pub participation_hi: f64,
}

impl Default for AmplitudeModel {
    fn default() -> Self {
        AmplitudeModel { dgamma_min: 2e5, dgamma_max: 2.0e6, participation_lo: 0.47, participation_hi: 0.67 }
    }
}

impl AmplitudeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.dgamma_min > 0.0 && self.dgamma_max >= self.dgamma_min) {
            return Err(Error::config("amplitude range must satisfy 0 < min <= max"));
        }
        for p in [self.participation_lo, self.participation_hi] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("participation probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn participation(&self, q: usize, n: usize) -> f64 {
        if n <= 1 {
            return self.participation_lo;
        }
        self.participation_lo + (self.participation_hi - self.participation_lo) * q as f64 / (n - 1) as f64
    }

    /// Draw per-qubit ΔΓ: log-uniform when participating, 0 otherwise.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let (l0, l1) = (self.dgamma_min.ln(), self.dgamma_max.ln());
        (0..n)
            .map(|q| {
                let part = rng.random::<f64>() < self.participation(q, n);
                let u: f64 = rng.random();
                if part {
                    (l0 + u * (l1 - l0)).exp()
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Muon crossing with its volume deposits.
#[derive(Debug, Clone, PartialEq)]
pub struct MuonEvent {
    pub index: u64,
    /// Absolute true time, s.
    pub time: f64,
    pub deposits: Deposits,
}

/// Inputs of the truth generator.
#[derive(Debug, Clone)]
pub struct TruthSpec<'a> {
    pub scene: &'a Scene,
    /// Cross-sections providing σ of the chip.
    pub chip_xs: &'a CrossSectionSet,
    pub chip_label: String,
    pub flux_model: &'a FluxModel,
    /// Sampler covering the detectors; muons hitting the chip are discarded from it.
    pub detector_sampler: SamplerConfig,
    /// Small sampler around the chip used to draw chip-hitting muons.
    pub chip_sampler: SamplerConfig,
    /// s⁻¹cm⁻²
    pub flux: f64,
    /// s⁻¹
    pub r_other: f64,
    pub timebase: TimebaseConfig,
    pub entries: u32,
    pub n_qubits: usize,
    pub cosmic_amplitude: AmplitudeModel,
    pub other_amplitude: AmplitudeModel,
    pub seed: u64,
}

/// Truth stream of one entry, ordered by time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntryTruth {
    pub entry: u32,
    pub bursts: Vec<BurstTruth>,
    pub muons: Vec<MuonEvent>,
}

impl TruthSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(self.flux >= 0.0 && self.r_other >= 0.0) {
            return Err(Error::config("flux and r_other must be nonnegative"));
        }
        self.timebase.validate()?;
        self.cosmic_amplitude.validate()?;
        self.other_amplitude.validate()?;
        self.detector_sampler.validate()?;
        self.chip_sampler.validate()?;
        if self.scene.labels().index_of(&self.chip_label).is_none() {
            return Err(Error::config(format!("chip label `{}` not in scene", self.chip_label)));
        }
        if self.n_qubits == 0 || self.n_qubits > 16 {
            return Err(Error::config("between 1 and 16 qubits supported"));
        }
        Ok(())
    }

    pub fn cosmic_rate(&self) -> Result<f64> {
        Ok(self.chip_xs.inclusive_by_label(&self.chip_label)? * self.flux)
    }
}

/// Generate the bursts and muons of one entry.
pub fn simulate_entry(spec: &TruthSpec<'_>, energies: &EnergySampler, entry: u32) -> Result<EntryTruth> {
    let tb = &spec.timebase;
    let span = tb.entry_span();
    let t0 = tb.entry_start(entry);
    let chip = spec.scene.labels().index_of(&spec.chip_label).expect("validated");
    let chip_prism = &spec.scene.prisms[chip];
    let mut rng = rng::stream(spec.seed, Domain::Truth, entry as u64);
    let mut out = EntryTruth { entry, ..Default::default() };
    let base = (entry as u64) << 32;
    let mut next_muon = 0u64;

    let poisson = |mean: f64, rng: &mut ChaCha8Rng| -> u64 {
        if mean <= 0.0 {
            0
        } else {
            Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
        }
    };

    // Cosmic bursts, each tied to a muon crossing the chip.
    let n_cosmic = poisson(spec.cosmic_rate()? * span, &mut rng);
    for _ in 0..n_cosmic {
        let t = t0 + rng.random::<f64>() * span;
        let muon = loop {
            let m = fluxmc::throw_muon(&spec.chip_sampler, energies, &mut rng);
            if geometry::ray_path_length(m.origin, m.direction, chip_prism) > 0.0 {
                break m;
            }
        };
        let deposits = geometry::deposit(&muon, spec.scene, &mut rng);
        let index = base | next_muon;
        next_muon += 1;
        out.muons.push(MuonEvent { index, time: t, deposits });
        out.bursts.push(BurstTruth {
            onset_time: t,
            entry,
            onset_cycle: (t - t0) / tb.cycle_duration,
            source: SourceTag::Cosmic,
            dgamma: spec.cosmic_amplitude.draw(spec.n_qubits, &mut rng),
            linked_muon: Some(index),
        });
    }

    // Muons missing the chip; the ones that hit it are covered by the cosmic stream.
    let n_bg = poisson(spec.flux * spec.detector_sampler.tangent_area() * span, &mut rng);
    for _ in 0..n_bg {
        let t = t0 + rng.random::<f64>() * span;
        let m = fluxmc::throw_muon(&spec.detector_sampler, energies, &mut rng);
        let deposits = geometry::deposit(&m, spec.scene, &mut rng);
        if deposits.is_empty() || deposits.iter().any(|&(i, _)| i as usize == chip) {
            continue;
        }
        out.muons.push(MuonEvent { index: base | next_muon, time: t, deposits });
        next_muon += 1;
    }

    let n_other = poisson(spec.r_other * span, &mut rng);
    for _ in 0..n_other {
        let t = t0 + rng.random::<f64>() * span;
        out.bursts.push(BurstTruth {
            onset_time: t,
            entry,
            onset_cycle: (t - t0) / tb.cycle_duration,
            source: SourceTag::Other,
            dgamma: spec.other_amplitude.draw(spec.n_qubits, &mut rng),
            linked_muon: None,
        });
    }
    out.bursts.sort_by(|a, b| a.onset_time.total_cmp(&b.onset_time));
    out.muons.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(out)
}

/// Truth for entries `0..spec.entries`, generated in parallel.
pub fn simulate_truth(spec: &TruthSpec<'_>) -> Result<Vec<EntryTruth>> {
    spec.validate()?;
    let energies = EnergySampler::new(spec.flux_model);
    (0..spec.entries).into_par_iter().map(|e| simulate_entry(spec, &energies, e)).collect()
}

/// Readout bits of one entry: bit q of `masks[c]` is 1 when qubit q read ground in cycle c.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryShots {
    pub entry: u32,
    pub start_time_ns: i64,
    pub n_qubits: u16,
    pub masks: Vec<u16>,
}

impl EntryShots {
    pub fn n_cycles(&self) -> usize {
        self.masks.len()
    }

    pub fn bit(&self, cycle: usize, qubit: usize) -> bool {
        self.masks[cycle] >> qubit & 1 == 1
    }

    /// Header then packed bits, row-major [cycle][qubit], LSB first.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.entry.to_le_bytes())?;
        w.write_all(&(self.masks.len() as u32).to_le_bytes())?;
        w.write_all(&self.n_qubits.to_le_bytes())?;
        w.write_all(&self.start_time_ns.to_le_bytes())?;
        let nq = self.n_qubits as usize;
        let total = self.masks.len() * nq;
        let mut bytes = vec![0u8; total.div_ceil(8)];
        let mut k = 0usize;
        for &m in &self.masks {
            for q in 0..nq {
                if m >> q & 1 == 1 {
                    bytes[k >> 3] |= 1 << (k & 7);
                }
                k += 1;
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Returns `None` at a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut b4 = [0u8; 4];
        match r.read_exact(&mut b4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let entry = u32::from_le_bytes(b4);
        let n_cycles = geometry::read_u32(r)? as usize;
        let n_qubits = geometry::read_u16(r)?;
        let start_time_ns = geometry::read_u64(r)? as i64;
        if n_qubits > 16 {
            return Err(Error::Format("at most 16 qubits per shot matrix".into()));
        }
        let nq = n_qubits as usize;
        let mut bytes = vec![0u8; (n_cycles * nq).div_ceil(8)];
        r.read_exact(&mut bytes)?;
        let mut masks = vec![0u16; n_cycles];
        let mut k = 0usize;
        for m in masks.iter_mut() {
            for q in 0..nq {
                if bytes[k >> 3] >> (k & 7) & 1 == 1 {
                    *m |= 1 << q;
                }
                k += 1;
            }
        }
        Ok(Some(EntryShots { entry, start_time_ns, n_qubits, masks }))
    }
}

const U32_SCALE: f64 = 4_294_967_296.0;

fn threshold(p: f64) -> u64 {
    (p.clamp(0.0, 1.0) * U32_SCALE) as u64
}

/// Render the readout bits of one entry given the bursts affecting it.
pub fn render_shots(entry: u32, bursts: &[BurstTruth], qubits: &[QubitParams], tb: &TimebaseConfig, seed: u64) -> EntryShots {
    let n = tb.cycles_per_entry as usize;
    let t0 = tb.entry_start(entry);
    let dt = tb.cycle_duration;
    let mut masks = vec![0u16; n];
    // Shot bits dominate the random-number budget; a xoshiro stream seeded
    // from the entry's counter stream keeps them cheap and reproducible.
    let mut rng = Xoshiro256PlusPlus::from_rng(&mut rng::stream(seed, Domain::Shots, entry as u64));
    let mut draws = vec![0u32; n];
    for (q, qp) in qubits.iter().enumerate() {
        let gb = qp.baseline_gamma;
        let tau = qp.recovery_tau;
        let decay = (-dt / tau).exp();
        let base_cond = threshold(qp.decay_probability(gb));
        let base_uncond = threshold(qp.unconditioned_ground(gb, tb.wait_time));
        // Bursts sorted by time; relative onset in cycles.
        let mut events: Vec<(f64, f64)> =
            bursts.iter().filter(|b| q < b.dgamma.len() && b.dgamma[q] > 0.0).map(|b| ((b.onset_time - t0) / dt, b.dgamma[q])).collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut next = 0usize;
        let mut excess = 0.0f64;
        let phase = tb.measure_phase;
        // Carry-over from bursts before the entry start.
        while next < events.len() && events[next].0 <= phase {
            let (c, g) = events[next];
            excess += g * (-(phase - c) * dt / tau).exp();
            next += 1;
        }
        let cutoff = 1e-7 * gb;
        let mut prev_ground = false;
        // One uniform u32 per cycle.
        for pair in draws.chunks_mut(2) {
            let w = rng.next_u64();
            pair[0] = w as u32;
            if let Some(hi) = pair.get_mut(1) {
                *hi = (w >> 32) as u32;
            }
        }
        let (b_uncond, b_cond) = (base_uncond.min(u32::MAX as u64 + 1), base_cond.min(u32::MAX as u64 + 1));
        let bit = 1u16 << q;
        let mut c = 0usize;
        while c < n {
            if excess <= cutoff {
                excess = 0.0;
                // Cycle at which the next burst is first seen.
                let seen = events.get(next).map_or(n, |e| ((e.0 - phase).ceil().max(0.0) as usize).min(n));
                if seen > c {
                    // Both outcomes are computed up front so only a select depends on the previous cycle.
                    let mut prev = prev_ground as u16;
                    for (m, &u) in masks[c..seen].iter_mut().zip(&draws[c..seen]) {
                        let g_uncond = ((u as u64) < b_uncond) as u16;
                        let g_cond = ((u as u64) < b_cond) as u16;
                        let g = (g_cond & prev) | (g_uncond & (prev ^ 1));
                        *m |= bit * g;
                        prev = g;
                    }
                    prev_ground = prev == 1;
                    c = seen;
                    continue;
                }
            }
            let t = c as f64 + phase;
            if c > 0 {
                excess *= decay;
            }
            while next < events.len() && events[next].0 <= t {
                let (tc, g) = events[next];
                excess += g * (-(t - tc) * dt / tau).exp();
                next += 1;
            }
            let gamma = gb + excess;
            let p = if prev_ground { qp.decay_probability(gamma) } else { qp.unconditioned_ground(gamma, tb.wait_time) };
            let ground = (draws[c] as u64) < threshold(p);
            if ground {
                masks[c] |= bit;
            }
            prev_ground = ground;
            c += 1;
        }
    }
    EntryShots { entry, start_time_ns: tb.to_grid_ns(t0), n_qubits: qubits.len() as u16, masks }
}

/// Affine map from true time to the detector digitiser clock.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockModel {
    pub skew_ppm: f64,
    pub offset_ns: f64,
}

impl ClockModel {
    pub fn to_clock_ns(&self, t: f64) -> f64 {
        t * 1e9 * (1.0 + self.skew_ppm * 1e-6) + self.offset_ns
    }
}

/// Detector pulse on the digitiser clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseRecord {
    /// Index into the scene labels.
    pub detector: u8,
    pub timestamp_ns: i64,
    /// ADC units
    pub amplitude: f64,
}

/// Per-detector response and efficiency, indexed by scene label.
#[derive(Debug, Clone)]
pub struct DetectorChannel {
    pub index: u8,
    pub response: ResponseParams,
    pub efficiency: f64,
}

fn grid(ts: f64, res: i64) -> i64 {
    let r = res as f64;
    ((ts / r).round() * r) as i64
}

/// Pulses produced by the muons of one entry, sorted by time.
///
/// Every deposit in a detector volume produces a pulse with probability ε;
/// amplitude windows are applied later when pulses are assigned to cycles.
pub fn render_pulses(
    muons: &[MuonEvent],
    channels: &[DetectorChannel],
    tb: &TimebaseConfig,
    clock: &ClockModel,
    jitter_ns: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<PulseRecord> {
    let mut out = Vec::new();
    for m in muons {
        for &(i, e) in &m.deposits {
            let Some(ch) = channels.iter().find(|c| c.index == i) else { continue };
            if rng.random::<f64>() >= ch.efficiency {
                continue;
            }
            let es = ch.response.sample_smeared(e, rng);
            let jitter = if jitter_ns > 0.0 { rng.random::<f64>() * jitter_ns } else { 0.0 };
            let ts = grid(clock.to_clock_ns(m.time) + jitter, tb.timestamp_resolution_ns);
            out.push(PulseRecord { detector: i, timestamp_ns: ts, amplitude: ch.response.a * es });
        }
    }
    out.sort_by_key(|p| (p.timestamp_ns, p.detector));
    out
}

/// Reference pulses of entry `e`: one after every `ref_pulse_period` cycles,
/// the last at the end of the entry.
pub fn emit_reference_pulses(tb: &TimebaseConfig, entry: u32, clock: &ClockModel) -> Vec<i64> {
    let t0 = tb.entry_start(entry);
    (1..=tb.refs_per_entry())
        .map(|k| {
            let t = t0 + (k * tb.ref_pulse_period) as f64 * tb.cycle_duration;
            grid(clock.to_clock_ns(t), tb.timestamp_resolution_ns)
        })
        .collect()
}

/// Volumes of the scene that have detector channels, as a combination.
pub fn channel_set(channels: &[DetectorChannel]) -> Combination {
    Combination::from_indices(channels.iter().map(|c| c.index as usize))
}

/// Entries overlapping a time range: convenience for pulses/bursts bookkeeping.
pub fn entry_of_time(tb: &TimebaseConfig, t: f64) -> Option<u32> {
    if t < 0.0 {
        return None;
    }
    let period = tb.entry_span() + tb.inter_entry_gap;
    let e = (t / period).floor();
    let within = t - e * period;
    (within < tb.entry_span()).then_some(e as u32)
}
