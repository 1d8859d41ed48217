//! Burst injection into short quiet segments: detection efficiency, onset
//! offsets relative to the muon's cycle, and per-event recovery dynamics.

use super::config::RunConfig;
use crate::burstdetect::{self, EventDynamics};
use crate::coinstat::Measured;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::streamsim::{self, AmplitudeModel, BurstTruth, QubitParams, SourceTag, TimebaseConfig};
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct InjectionResult {
    pub injected: u64,
    pub detected: u64,
    /// Detected onset minus the cycle containing the injection time.
    pub offsets: Vec<i64>,
    pub window_efficiency: Measured,
    pub dynamics: Vec<EventDynamics>,
}

impl InjectionResult {
    pub fn detection_efficiency(&self) -> f64 {
        self.detected as f64 / self.injected.max(1) as f64
    }

    pub fn offset_histogram(&self) -> BTreeMap<i64, u64> {
        let mut h = BTreeMap::new();
        for &o in &self.offsets {
            *h.entry(o).or_default() += 1;
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# injected={} detected={} window_efficiency={:.5} err={:.5}\noffset_cycles,count\n",
            self.injected, self.detected, self.window_efficiency.value, self.window_efficiency.err_hi
        );
        for (o, n) in self.offset_histogram() {
            let _ = writeln!(s, "{o},{n}");
        }
        s
    }
}

struct Outcome {
    offset: Option<i64>,
    dynamics: Option<EventDynamics>,
}

/// Inject `n` bursts drawn from `amplitude` into quiet segments of `qubits`.
pub fn run_injection(cfg: &RunConfig, qubits: &[QubitParams], amplitude: &AmplitudeModel, n: u32, seed: u64) -> Result<InjectionResult> {
    let inj = &cfg.injection;
    let tb = TimebaseConfig { cycles_per_entry: inj.segment_cycles, ..cfg.timebase.clone() };
    tb.validate()?;
    let template = cfg.detection.template(tb.cycle_duration)?;
    let half = cfg.coincidence.window.half_cycles();
    let outcomes: Vec<Outcome> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Domain::Injection, i as u64);
            let x = inj.onset_cycle as f64 + r.random::<f64>();
            let t0 = tb.entry_start(i);
            let burst = BurstTruth {
                onset_time: t0 + x * tb.cycle_duration,
                entry: i,
                onset_cycle: x,
                source: SourceTag::Cosmic,
                dgamma: amplitude.draw(qubits.len(), &mut r),
                linked_muon: None,
            };
            let shots = streamsim::render_shots(i, std::slice::from_ref(&burst), qubits, &tb, seed);
            let counts = burstdetect::relaxation_series(&shots);
            let det = burstdetect::detect_events(&counts, &template, &cfg.detection, i, shots.start_time_ns, tb.cycle_duration);
            let truth = x.floor() as i64;
            let best = det
                .events
                .iter()
                .map(|e| e.onset_cycle as i64 - truth)
                .filter(|o| o.unsigned_abs() <= inj.match_cycles as u64)
                .min_by_key(|o| o.abs());
            let dynamics = best.and_then(|o| burstdetect::event_dynamics(&shots, (truth + o) as usize, &cfg.dynamics));
            Outcome { offset: best, dynamics }
        })
        .collect();
    let offsets: Vec<i64> = outcomes.iter().filter_map(|o| o.offset).collect();
    if offsets.is_empty() {
        return Err(Error::Undefined("no injected burst was detected".into()));
    }
    let k = offsets.iter().filter(|o| o.abs() <= half).count() as f64;
    let m = offsets.len() as f64;
    let p = k / m;
    // Binomial error, floored at one count for p at 0 or 1.
    let err = (p * (1.0 - p) / m).sqrt().max(1.0 / m);
    Ok(InjectionResult {
        injected: n as u64,
        detected: offsets.len() as u64,
        offsets,
        window_efficiency: Measured::symmetric(p, err),
        dynamics: outcomes.into_iter().filter_map(|o| o.dynamics).collect(),
    })
}
