//! Reference-pulse synchronisation of detector timestamps onto qubit cycles.

use crate::coinstat::TaggedPulse;
use crate::detcal::ResponseParams;
use crate::streamsim::{PulseRecord, TimebaseConfig};
use std::collections::BTreeMap;

/// Piecewise-linear timestamp → cycle map of one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntrySync {
    pub entry: u32,
    /// Timestamp of cycle `(k + 1)·period`, ns.
    pub knots: Vec<i64>,
    pub period: u32,
}

impl EntrySync {
    /// Earliest covered timestamp: one period before the first knot.
    pub fn start_ns(&self) -> f64 {
        let k0 = self.knots[0] as f64;
        let slope = (self.knots[1] - self.knots[0]) as f64;
        k0 - slope
    }

    pub fn end_ns(&self) -> i64 {
        *self.knots.last().expect("nonempty")
    }

    /// Fractional cycle index of timestamp `ts`, or `None` outside coverage.
    pub fn cycle(&self, ts: i64) -> Option<f64> {
        let p = self.period as f64;
        if (ts as f64) < self.start_ns() || ts > self.end_ns() {
            return None;
        }
        let n = self.knots.len();
        let i = self.knots.partition_point(|&k| k <= ts);
        if i == n {
            return Some(n as f64 * p);
        }
        // Before the first knot, extrapolate along the first segment.
        let j = i.max(1) - 1;
        let (a, b) = (self.knots[j], self.knots[j + 1]);
        let ca = (j + 1) as f64 * p;
        Some(ca + (ts - a) as f64 / (b - a) as f64 * p)
    }
}

/// Synchronisation of all entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyncMap {
    pub entries: Vec<EntrySync>,
    /// Entries excluded for a wrong pulse count or non-monotone timestamps.
    pub unsynchronized: Vec<u32>,
    pub cycles_per_entry: u32,
}

/// Build the map from each entry's reference timestamps.
pub fn build_sync(refs: &BTreeMap<u32, Vec<i64>>, tb: &TimebaseConfig) -> SyncMap {
    let want = tb.refs_per_entry() as usize;
    let mut out = SyncMap { cycles_per_entry: tb.cycles_per_entry, ..Default::default() };
    for (&entry, ts) in refs {
        let ok = ts.len() == want && want >= 2 && ts.windows(2).all(|w| w[1] > w[0]);
        if ok {
            out.entries.push(EntrySync { entry, knots: ts.clone(), period: tb.ref_pulse_period });
        } else {
            log::warn!("entry {entry}: {} reference pulses (expected {want}); excluded", ts.len());
            out.unsynchronized.push(entry);
        }
    }
    out.entries.sort_by_key(|e| e.knots[0]);
    out
}

impl SyncMap {
    /// (entry, fractional cycle) of a timestamp.
    pub fn locate(&self, ts: i64) -> Option<(u32, f64)> {
        let i = self.entries.partition_point(|e| e.start_ns() <= ts as f64);
        let e = &self.entries[i.checked_sub(1)?];
        e.cycle(ts).map(|c| (e.entry, c))
    }

    pub fn is_synchronized(&self, entry: u32) -> bool {
        self.entries.iter().any(|e| e.entry == entry)
    }

    pub fn entry_ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.entries.iter().map(|e| e.entry).collect();
        v.sort_unstable();
        v
    }
}

/// Why pulses were not assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropTally {
    pub outside_entry: u64,
    pub out_of_window: u64,
    pub unknown_detector: u64,
}

impl DropTally {
    pub fn total(&self) -> u64 {
        self.outside_entry + self.out_of_window + self.unknown_detector
    }
}

/// Tag pulses with (entry, cycle); pulses outside synchronised entries or
/// outside their detector's amplitude window are dropped and tallied.
pub fn assign_pulses(pulses: &[PulseRecord], sync: &SyncMap, responses: &BTreeMap<u8, ResponseParams>) -> (Vec<TaggedPulse>, DropTally) {
    let mut tally = DropTally::default();
    let mut out = Vec::with_capacity(pulses.len());
    let last = sync.cycles_per_entry.saturating_sub(1);
    for p in pulses {
        let Some(r) = responses.get(&p.detector) else {
            tally.unknown_detector += 1;
            continue;
        };
        if !r.accepts(p.amplitude) {
            tally.out_of_window += 1;
            continue;
        }
        let Some((entry, c)) = sync.locate(p.timestamp_ns) else {
            tally.outside_entry += 1;
            continue;
        };
        let cycle = (c.floor().max(0.0) as u32).min(last);
        out.push(TaggedPulse { entry, cycle, detector: p.detector, timestamp_ns: p.timestamp_ns, amplitude: p.amplitude });
    }
    (out, tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streamsim::{emit_reference_pulses, ClockModel};
    use proptest::prelude::*;

    fn tb() -> TimebaseConfig {
        TimebaseConfig::default()
    }

    fn refs(entries: u32, clock: &ClockModel) -> BTreeMap<u32, Vec<i64>> {
        (0..entries).map(|e| (e, emit_reference_pulses(&tb(), e, clock))).collect()
    }

    fn all_window() -> BTreeMap<u8, ResponseParams> {
        (0..8).map(|i| (i, ResponseParams::new("X", 10.0, 0.0, (0.0, 1e9)))).collect()
    }

    #[test]
    fn perfect_clock_hits_knots() {
        let m = build_sync(&refs(2, &ClockModel::default()), &tb());
        assert!(m.unsynchronized.is_empty());
        let e = &m.entries[1];
        for k in [0usize, 17, 9999] {
            let (entry, c) = m.locate(e.knots[k]).unwrap();
            assert_eq!(entry, 1);
            assert_eq!(c, ((k + 1) * 100) as f64);
        }
        // Exact time/Δt on a perfect clock, within the 4 ns grid.
        let t: f64 = 123_456.5 * 15.274e-6;
        let (_, c) = m.locate((t * 1e9).round() as i64).unwrap();
        assert!((c - 123_456.5).abs() < 4.0 / 15_274.0);
    }

    #[test]
    fn wrong_pulse_count_excludes_entry() {
        let mut r = refs(3, &ClockModel::default());
        assert_eq!(r[&0].len(), 10_000);
        r.get_mut(&1).unwrap().pop();
        let m = build_sync(&r, &tb());
        assert_eq!(m.unsynchronized, vec![1]);
        assert!(!m.is_synchronized(1));
        assert!(m.is_synchronized(2));
    }

    #[test]
    fn skewed_clock_mid_interval_error() {
        let clock = ClockModel { skew_ppm: 10.0, offset_ns: 0.0 };
        let m = build_sync(&refs(1, &clock), &tb());
        let mut worst: f64 = 0.0;
        for k in (0..1_000_000).step_by(777) {
            let c = k as f64 + 0.37;
            let ts = clock.to_clock_ns(c * 15.274e-6).round() as i64;
            let (_, got) = m.locate(ts).unwrap();
            worst = worst.max((got - c).abs());
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn coarse_graining_and_conservation() {
        let clock = ClockModel::default();
        let m = build_sync(&refs(1, &clock), &tb());
        let t = 500.2 * 15.274e-6;
        let a = (t * 1e9) as i64;
        let mut pulses = vec![
            PulseRecord { detector: 1, timestamp_ns: a, amplitude: 100.0 },
            PulseRecord { detector: 2, timestamp_ns: a + 100, amplitude: 100.0 },
            PulseRecord { detector: 2, timestamp_ns: -5_000_000_000, amplitude: 100.0 },
            PulseRecord { detector: 9, timestamp_ns: a, amplitude: 100.0 },
        ];
        let mut resp = all_window();
        resp.remove(&9);
        resp.insert(3, ResponseParams::new("Y", 10.0, 0.0, (50.0, 60.0)));
        pulses.push(PulseRecord { detector: 3, timestamp_ns: a, amplitude: 100.0 });
        let (tagged, tally) = assign_pulses(&pulses, &m, &resp);
        assert_eq!(tagged.len(), 2);
        assert_eq!(tagged[0].cycle, 500);
        assert_eq!(tagged[1].cycle, 500);
        assert_eq!(tally, DropTally { outside_entry: 1, out_of_window: 1, unknown_detector: 1 });
        assert_eq!(tagged.len() as u64 + tally.total(), pulses.len() as u64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mid_cycle_pulse_keeps_its_cycle(skew in -100.0f64..100.0, k in 0u32..999_999, entry in 0u32..3) {
            let clock = ClockModel { skew_ppm: skew, offset_ns: 2500.0 };
            let t = tb();
            let r: BTreeMap<u32, Vec<i64>> = (entry..entry + 1).map(|e| (e, emit_reference_pulses(&t, e, &clock))).collect();
            let m = build_sync(&r, &t);
            let true_t = t.entry_start(entry) + (k as f64 + 0.5) * t.cycle_duration;
            let ts = clock.to_clock_ns(true_t).round() as i64;
            let p = [PulseRecord { detector: 0, timestamp_ns: ts, amplitude: 1.0 }];
            let (tagged, _) = assign_pulses(&p, &m, &all_window());
            prop_assert_eq!(tagged.len(), 1);
            prop_assert_eq!(tagged[0].cycle, k);
            prop_assert_eq!(tagged[0].entry, entry);
        }
    }
}
