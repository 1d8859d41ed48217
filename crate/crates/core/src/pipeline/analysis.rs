//! Event catalogues, detector counts and the coincidence analysis shared by
//! the file-based stages and the in-memory experiment.

use super::config::RunConfig;
use crate::burstdetect::{self, DynamicsConfig, FilterTemplate};
use crate::coinstat::{self, DetectorObservation, FluxEfficiency, LedgerInputs, Measured, RateLedger, SnrRow, TaggedPulse};
use crate::error::{Error, Result};
use crate::geometry::{self, CrossSectionSet, Efficiencies};
use crate::streamsim::{EntryShots, TimebaseConfig};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// Detected event with its participation summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatalogEvent {
    pub entry: u32,
    pub onset_cycle: u32,
    pub time_ns: i64,
    pub peak: f64,
    /// Participating qubits; `None` when the pre-trigger window leaves the entry.
    pub mask: Option<u16>,
}

impl CatalogEvent {
    pub fn multiplicity(&self) -> Option<usize> {
        self.mask.map(|m| m.count_ones() as usize)
    }
}

/// Matched filter plus participation for one entry.
pub fn detect_entry(shots: &EntryShots, template: &FilterTemplate, cfg: &RunConfig) -> Vec<CatalogEvent> {
    let counts = burstdetect::relaxation_series(shots);
    let det = burstdetect::detect_events(&counts, template, &cfg.detection, shots.entry, shots.start_time_ns, cfg.timebase.cycle_duration);
    det.events
        .iter()
        .map(|e| {
            let mask =
                burstdetect::event_dynamics(shots, e.onset_cycle as usize, &cfg.dynamics).map(|d| participation_mask(&d, &cfg.dynamics));
            CatalogEvent { entry: e.entry, onset_cycle: e.onset_cycle, time_ns: e.time_ns, peak: e.peak, mask }
        })
        .collect()
}

fn participation_mask(d: &burstdetect::EventDynamics, _cfg: &DynamicsConfig) -> u16 {
    d.qubits.iter().enumerate().filter(|(_, q)| q.participates).fold(0u16, |m, (i, _)| m | (1 << i))
}

pub fn events_csv(events: &[CatalogEvent]) -> String {
    let mut s = String::from("entry,onset_cycle,time_ns,peak,multiplicity,mask\n");
    for e in events {
        let (m, k) = match e.mask {
            Some(k) => (k.count_ones().to_string(), format!("{k:#06x}")),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(s, "{},{},{},{:.4},{},{}", e.entry, e.onset_cycle, e.time_ns, e.peak, m, k);
    }
    s
}

pub fn parse_events_csv(body: &str) -> Result<Vec<CatalogEvent>> {
    use super::io::{csv_rows, parse_field};
    csv_rows(body)
        .map(|r| {
            if r.len() != 6 {
                return Err(Error::Format(format!("event row with {} fields", r.len())));
            }
            let mask = if r[5] == "-" {
                None
            } else {
                Some(u16::from_str_radix(r[5].trim_start_matches("0x"), 16).map_err(|_| Error::Format(format!("bad mask `{}`", r[5])))?)
            };
            Ok(CatalogEvent {
                entry: parse_field(r[0], "entry")?,
                onset_cycle: parse_field(r[1], "cycle")?,
                time_ns: parse_field(r[2], "time")?,
                peak: parse_field(r[3], "peak")?,
                mask,
            })
        })
        .collect()
}

/// Per-detector pulse count and count of pulses with another detector within `window_ns`.
pub fn detector_counts(pulses: &[TaggedPulse], window_ns: i64) -> BTreeMap<u8, (u64, u64)> {
    let mut sorted: Vec<&TaggedPulse> = pulses.iter().collect();
    sorted.sort_by_key(|p| (p.timestamp_ns, p.detector));
    let mut out: BTreeMap<u8, (u64, u64)> = BTreeMap::new();
    let mut lo = 0;
    for (i, p) in sorted.iter().enumerate() {
        while sorted[lo].timestamp_ns < p.timestamp_ns - window_ns {
            lo += 1;
        }
        let mut partner = sorted[lo..i].iter().any(|q| q.detector != p.detector);
        let mut j = i + 1;
        while !partner && j < sorted.len() && sorted[j].timestamp_ns <= p.timestamp_ns + window_ns {
            partner = sorted[j].detector != p.detector;
            j += 1;
        }
        let c = out.entry(p.detector).or_default();
        c.0 += 1;
        c.1 += partner as u64;
    }
    out
}

/// Everything derived from one set of events and pulses.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub live_time: f64,
    pub entries: Vec<u32>,
    pub n_events: u64,
    pub occupied_cycles: u64,
    pub delays: Vec<Option<i64>>,
    pub coincident: Vec<bool>,
    pub detector_counts: BTreeMap<u8, (u64, u64)>,
    pub flux: Option<FluxEfficiency>,
    pub flux_error: Option<String>,
    pub efficiencies: Efficiencies,
    pub window_efficiency: Measured,
    pub ledger: RateLedger,
    pub snr: Vec<SnrRow>,
}

/// Coincidence analysis over synchronised entries.
pub fn analyze(
    cfg: &RunConfig,
    events: &[CatalogEvent],
    pulses: &[TaggedPulse],
    entries: &[u32],
    detector_xs: &CrossSectionSet,
    chip_xs: &CrossSectionSet,
    window_efficiency: Measured,
) -> Result<Analysis> {
    let tb: &TimebaseConfig = &cfg.timebase;
    let keep: BTreeSet<u32> = entries.iter().copied().collect();
    let events: Vec<CatalogEvent> = events.iter().copied().filter(|e| keep.contains(&e.entry)).collect();
    let live = tb.live_time(keep.len() as u32);
    if !(live > 0.0) {
        return Err(Error::Undefined("no synchronised entries".into()));
    }
    let tags: Vec<(u32, u32)> = events.iter().map(|e| (e.entry, e.onset_cycle)).collect();
    let delays = coinstat::nearest_delays(&tags, pulses);
    let coincident = coinstat::coincidence_flags(&delays, &cfg.coincidence.window);
    let occupied: BTreeSet<(u32, u32)> = pulses.iter().map(|p| (p.entry, p.cycle)).collect();
    let n_windows = keep.len() as u64 * tb.cycles_per_entry as u64;
    let r_s = coinstat::rate_from_counts(occupied.len() as u64, n_windows, tb.cycle_duration)?;

    let counts = detector_counts(pulses, cfg.coincidence.window.detector_window_ns);
    let labels = cfg.scene.labels();
    let obs: Vec<DetectorObservation> = cfg
        .detectors
        .iter()
        .map(|d| {
            let i = labels.index_of(&d.response.label).expect("validated") as u8;
            let (n, nc) = counts.get(&i).copied().unwrap_or_default();
            DetectorObservation { label: d.response.label.clone(), r_d: n as f64 / live, r_ds: nc as f64 / live }
        })
        .collect();
    let (flux, flux_error) = match coinstat::estimate_flux_and_efficiency(&obs, detector_xs) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let shared = |eps: f64| -> Efficiencies { cfg.detectors.iter().map(|d| (d.response.label.clone(), eps)).collect() };
    let efficiencies = match &flux {
        Some(f) => shared(f.efficiency.value.min(1.0)),
        None => cfg.efficiencies(),
    };
    let c = geometry::coverage_of(&cfg.chip_label, chip_xs, &efficiencies, window_efficiency.value)?;
    let mut c_err = c * window_efficiency.err_lo.max(window_efficiency.err_hi) / window_efficiency.value.max(f64::MIN_POSITIVE);
    if let Some(f) = &flux {
        let e = f.efficiency;
        if e.err_lo.is_finite() && e.err_lo > 0.0 {
            let up = geometry::coverage_of(&cfg.chip_label, chip_xs, &shared((e.value + e.err_hi).min(1.0)), window_efficiency.value)?;
            let dn = geometry::coverage_of(&cfg.chip_label, chip_xs, &shared((e.value - e.err_lo).max(0.0)), window_efficiency.value)?;
            c_err = c_err.hypot(0.5 * (up - dn).abs());
        }
    }
    let n_qs = coincident.iter().filter(|&&b| b).count() as u64;
    let mut ledger = coinstat::decompose_rates(&LedgerInputs {
        n_q: events.len() as u64,
        n_qs,
        n_s: occupied.len() as u64,
        r_s: Some(r_s),
        duration: live,
        window: cfg.coincidence.window.seconds(tb.cycle_duration),
        coverage: Measured::symmetric(c, c_err),
    })?;
    ledger.flux = flux.as_ref().map(|f| f.flux);
    let snr = coinstat::snr_vs_window(&delays, &cfg.coincidence.snr_windows, ledger.r_q.value, r_s, live, tb.cycle_duration)?;
    Ok(Analysis {
        live_time: live,
        entries: keep.into_iter().collect(),
        n_events: events.len() as u64,
        occupied_cycles: occupied.len() as u64,
        delays,
        coincident,
        detector_counts: counts,
        flux,
        flux_error,
        efficiencies,
        window_efficiency,
        ledger,
        snr,
    })
}

/// Text block of the flux/efficiency estimate.
pub fn flux_report(a: &Analysis) -> String {
    let mut s = String::new();
    match &a.flux {
        Some(f) => {
            let _ = writeln!(s, "efficiency = {:.5} +- {:.5}", f.efficiency.value, f.efficiency.err_hi);
            let _ = writeln!(s, "flux = {:.6e} +- {:.3e} 1/s/cm2", f.flux.value, f.flux.err_hi);
            let _ = writeln!(s, "# detector observed_coverage model_coverage flux");
            for (l, o, m, phi) in &f.per_detector {
                let _ = writeln!(s, "{l} {o:.5} {m:.5} {phi:.6e}");
            }
        }
        None => {
            let _ = writeln!(s, "estimate_failed = {}", a.flux_error.as_deref().unwrap_or("unknown"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp(det: u8, ts: i64) -> TaggedPulse {
        TaggedPulse { entry: 0, cycle: (ts / 15_274) as u32, detector: det, timestamp_ns: ts, amplitude: 100.0 }
    }

    #[test]
    fn partner_counting() {
        let p = vec![tp(1, 0), tp(2, 500), tp(1, 10_000), tp(1, 10_200), tp(3, 20_000), tp(4, 21_001)];
        let c = detector_counts(&p, 1000);
        assert_eq!(c[&1], (3, 1));
        assert_eq!(c[&2], (1, 1));
        assert_eq!(c[&3], (1, 0));
        assert_eq!(c[&4], (1, 0));
    }

    #[test]
    fn events_csv_round_trip() {
        let e = vec![
            CatalogEvent { entry: 1, onset_cycle: 5000, time_ns: 99, peak: 120.5, mask: Some(0b1011) },
            CatalogEvent { entry: 2, onset_cycle: 900, time_ns: 7, peak: 200.0, mask: None },
        ];
        let back = parse_events_csv(&events_csv(&e)).unwrap();
        assert_eq!(back, e);
        assert_eq!(back[0].multiplicity(), Some(3));
    }
}
