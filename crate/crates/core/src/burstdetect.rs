//! Matched-filter detection of correlated relaxation bursts and per-event decay dynamics.

use crate::error::{Error, Result};
use crate::streamsim::EntryShots;
use serde::{Deserialize, Serialize};

/// Conditioned-decay count per cycle: qubits that read ground in cycle `c`
/// after a ground readout in `c − 1`. Cycle 0 has no predecessor and counts 0.
pub fn relaxation_series(shots: &EntryShots) -> Vec<u8> {
    let m = &shots.masks;
    let mut out = vec![0u8; m.len()];
    for c in 1..m.len() {
        out[c] = (m[c] & m[c - 1]).count_ones() as u8;
    }
    out
}

/// Zero-mean template: a flat run followed by a decaying exponential.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTemplate {
    pub flat_half: usize,
    /// Per-cycle decay factor of the exponential part.
    pub ratio: f64,
    /// Mean of the raw template, subtracted from every value.
    pub mean: f64,
    pub values: Vec<f64>,
}

impl FilterTemplate {
    pub fn new(length: usize, flat_half: usize, decay_tau: f64, cycle_duration: f64) -> Result<Self> {
        if flat_half >= length || !(decay_tau > 0.0) || !(cycle_duration > 0.0) {
            return Err(Error::config("template needs flat_half < length and positive time constants"));
        }
        let ratio = (-cycle_duration / decay_tau).exp();
        let raw: Vec<f64> = (0..length).map(|j| if j < flat_half { 0.0 } else { ratio.powi((j - flat_half) as i32) }).collect();
        let mean = raw.iter().sum::<f64>() / length as f64;
        let values = raw.iter().map(|v| v - mean).collect();
        Ok(FilterTemplate { flat_half, ratio, mean, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cross-correlation values for onsets `first..first + values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub first: usize,
    pub values: Vec<f64>,
}

impl Correlation {
    pub fn at(&self, k: usize) -> Option<f64> {
        k.checked_sub(self.first).and_then(|i| self.values.get(i).copied())
    }
}

/// c[k] = Σ_j x[k − H + j]·h[j] over every k where the template fits, in O(n).
pub fn cross_correlate(x: &[u8], t: &FilterTemplate) -> Correlation {
    let l = t.len();
    let h = t.flat_half;
    let n = x.len();
    if n < l {
        return Correlation { first: h, values: Vec::new() };
    }
    let m = l - h;
    let count = n - l + 1;
    let mut prefix = vec![0u64; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i] as u64;
    }
    // Truncated exponential sum E[k] = Σ_{i<m} r^i x[k+i], run backwards.
    let r = t.ratio;
    let rm = r.powi(m as i32);
    let last = n - m;
    let mut e: f64 = (0..m).rev().fold(0.0, |acc, i| acc * r + x[last + i] as f64);
    let mut values = vec![0.0; count];
    let mut k = last;
    loop {
        let total = (prefix[k + m] - prefix[k - h]) as f64;
        values[k - h] = e - t.mean * total;
        if k == h {
            break;
        }
        k -= 1;
        e = x[k] as f64 + r * e - rm * x[k + m] as f64;
    }
    Correlation { first: h, values }
}

/// Thresholds and separation of the peak search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub template_length: usize,
    pub flat_half: usize,
    /// s
    pub decay_tau: f64,
    pub candidate_threshold: f64,
    pub accept_threshold: f64,
    /// s
    pub min_separation: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            template_length: 1648,
            flat_half: 824,
            decay_tau: 5e-3,
            candidate_threshold: 50.0,
            accept_threshold: 105.0,
            min_separation: 12.5e-3,
        }
    }
}

impl DetectionConfig {
    /// Smallest allowed onset spacing in cycles (strictly more than `min_separation`).
    pub fn min_sep_cycles(&self, cycle_duration: f64) -> usize {
        (self.min_separation / cycle_duration).floor() as usize + 1
    }

    pub fn template(&self, cycle_duration: f64) -> Result<FilterTemplate> {
        FilterTemplate::new(self.template_length, self.flat_half, self.decay_tau, cycle_duration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedEvent {
    pub entry: u32,
    pub onset_cycle: u32,
    /// Onset time on the qubit clock, ns.
    pub time_ns: i64,
    pub peak: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectStatus {
    Ok,
    /// Entry shorter than the template; nothing searched.
    TooShort,
}

/// Detection output of one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryDetection {
    pub entry: u32,
    pub status: DetectStatus,
    /// Candidates surviving the height and separation rules.
    pub candidates: Vec<DetectedEvent>,
    pub events: Vec<DetectedEvent>,
}

/// Peak indices above `height` that are strict on the left and non-strict on
/// the right, thinned so kept peaks are at least `distance` apart (highest first).
pub fn find_peaks(c: &Correlation, height: f64, distance: usize) -> Vec<usize> {
    let v = &c.values;
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < v.len() {
        if v[i] >= height && v[i] > v[i - 1] {
            // Walk a plateau; a peak must drop strictly on its right.
            let mut j = i;
            while j + 1 < v.len() && v[j + 1] == v[i] {
                j += 1;
            }
            if j + 1 < v.len() && v[j + 1] < v[i] {
                peaks.push(i + (j - i) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    if distance > 1 && peaks.len() > 1 {
        let mut order: Vec<usize> = (0..peaks.len()).collect();
        order.sort_by(|&a, &b| v[peaks[b]].total_cmp(&v[peaks[a]]).then(a.cmp(&b)));
        let mut keep = vec![true; peaks.len()];
        for &p in &order {
            if !keep[p] {
                continue;
            }
            let mut q = p;
            while q > 0 && peaks[p] - peaks[q - 1] < distance {
                q -= 1;
                keep[q] = false;
            }
            let mut q = p + 1;
            while q < peaks.len() && peaks[q] - peaks[p] < distance {
                keep[q] = false;
                q += 1;
            }
        }
        peaks = peaks.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect();
    }
    peaks.into_iter().map(|p| p + c.first).collect()
}

/// Run the matched filter over one entry's counts.
pub fn detect_events(
    counts: &[u8],
    template: &FilterTemplate,
    cfg: &DetectionConfig,
    entry: u32,
    entry_start_ns: i64,
    cycle_duration: f64,
) -> EntryDetection {
    if counts.len() < template.len() {
        log::warn!("entry {entry}: {} cycles shorter than template {}", counts.len(), template.len());
        return EntryDetection { entry, status: DetectStatus::TooShort, candidates: vec![], events: vec![] };
    }
    let corr = cross_correlate(counts, template);
    let peaks = find_peaks(&corr, cfg.candidate_threshold, cfg.min_sep_cycles(cycle_duration));
    let candidates: Vec<DetectedEvent> = peaks
        .into_iter()
        .map(|k| DetectedEvent {
            entry,
            onset_cycle: k as u32,
            time_ns: entry_start_ns + (k as f64 * cycle_duration * 1e9).round() as i64,
            peak: corr.at(k).expect("peak inside correlation"),
        })
        .collect();
    let events = candidates.iter().copied().filter(|e| e.peak >= cfg.accept_threshold).collect();
    EntryDetection { entry, status: DetectStatus::Ok, candidates, events }
}

/// Conditioned preparations and decays over a cycle window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecayProbability {
    pub n_prep: u64,
    pub n_decay: u64,
}

impl DecayProbability {
    /// `None` marks an undefined probability (no preparations).
    pub fn p(&self) -> Option<f64> {
        (self.n_prep > 0).then(|| self.n_decay as f64 / self.n_prep as f64)
    }

    pub fn merge(self, o: DecayProbability) -> DecayProbability {
        DecayProbability { n_prep: self.n_prep + o.n_prep, n_decay: self.n_decay + o.n_decay }
    }
}

/// Decay statistics of `qubit` over cycles `start..end`.
pub fn decay_probability(shots: &EntryShots, start: usize, end: usize, qubit: usize) -> Result<DecayProbability> {
    if start > end || end > shots.n_cycles() {
        return Err(Error::domain(format!("window {start}..{end} outside entry of {} cycles", shots.n_cycles())));
    }
    let mut d = DecayProbability::default();
    for c in start.max(1)..end {
        if shots.bit(c - 1, qubit) {
            d.n_prep += 1;
            if shots.bit(c, qubit) {
                d.n_decay += 1;
            }
        }
    }
    Ok(d)
}

/// Rate increase from decay probabilities: ln((1 − p_pre)/(1 − p_t))/Δt_eff.
/// Saturated bins (p_t = 1) return +∞.
pub fn delta_gamma(p_t: f64, p_pre: f64, delta_eff: f64) -> f64 {
    if p_t >= 1.0 {
        return f64::INFINITY;
    }
    ((1.0 - p_pre) / (1.0 - p_t)).ln() / delta_eff
}

/// Binning and thresholds for per-event dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub bin_cycles: usize,
    pub pretrigger_cycles: usize,
    /// Cycles between the end of the pre-trigger window and the onset.
    pub pretrigger_gap: usize,
    pub pre_bins: usize,
    pub post_bins: usize,
    /// s
    pub delta_eff: f64,
    /// s⁻¹
    pub participation_threshold: f64,
    /// Pooled bins with ΔΓ·Δt_eff above this are treated as saturated in recovery fits.
    pub linear_limit: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            bin_cycles: 40,
            pretrigger_cycles: 1880,
            pretrigger_gap: 0,
            pre_bins: 10,
            post_bins: 60,
            delta_eff: 3e-6,
            participation_threshold: 2e5,
            linear_limit: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QubitDynamics {
    pub pre: DecayProbability,
    /// Pre-onset bins (oldest first) followed by post-onset bins.
    pub bins: Vec<DecayProbability>,
    pub n_pre_bins: usize,
    pub dgamma_init: Option<f64>,
    pub participates: bool,
}

impl QubitDynamics {
    pub fn p_pre(&self) -> Option<f64> {
        self.pre.p()
    }

    /// ΔΓ per bin; `None` where undefined.
    pub fn dgamma(&self, delta_eff: f64) -> Vec<Option<f64>> {
        let pp = self.pre.p();
        self.bins
            .iter()
            .map(|b| match (b.p(), pp) {
                (Some(pt), Some(pp)) => Some(delta_gamma(pt, pp, delta_eff)),
                _ => None,
            })
            .collect()
    }

    pub fn post_bins(&self) -> &[DecayProbability] {
        &self.bins[self.n_pre_bins..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventDynamics {
    pub entry: u32,
    pub onset_cycle: u32,
    pub qubits: Vec<QubitDynamics>,
}

impl EventDynamics {
    pub fn multiplicity(&self) -> usize {
        self.qubits.iter().filter(|q| q.participates).count()
    }
}

/// Per-qubit dynamics around an onset. `None` when the pre-trigger window
/// would cross the start of the entry.
pub fn event_dynamics(shots: &EntryShots, onset: usize, cfg: &DynamicsConfig) -> Option<EventDynamics> {
    let pre_end = onset.checked_sub(cfg.pretrigger_gap)?;
    let pre_start = pre_end.checked_sub(cfg.pretrigger_cycles)?;
    if pre_start == 0 || onset > shots.n_cycles() {
        return None;
    }
    let bc = cfg.bin_cycles;
    let pre_bins = cfg.pre_bins.min(onset / bc);
    let avail_post = (shots.n_cycles() - onset) / bc;
    let post_bins = cfg.post_bins.min(avail_post);
    let qubits = (0..shots.n_qubits as usize)
        .map(|q| {
            let pre = decay_probability(shots, pre_start, pre_end, q).expect("window checked");
            let mut bins = Vec::with_capacity(pre_bins + post_bins);
            for i in (1..=pre_bins).rev() {
                let s = onset - i * bc;
                bins.push(decay_probability(shots, s, s + bc, q).expect("window checked"));
            }
            for i in 0..post_bins {
                let s = onset + i * bc;
                bins.push(decay_probability(shots, s, s + bc, q).expect("window checked"));
            }
            let mut qd = QubitDynamics { pre, bins, n_pre_bins: pre_bins, dgamma_init: None, participates: false };
            qd.dgamma_init = qd.dgamma(cfg.delta_eff).get(pre_bins).copied().flatten();
            qd.participates = qd.dgamma_init.is_some_and(|g| g >= cfg.participation_threshold);
            qd
        })
        .collect();
    Some(EventDynamics { entry: shots.entry, onset_cycle: onset as u32, qubits })
}

/// Pooled post-onset decay statistics of one qubit over its participating events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PooledTrace {
    pub events: usize,
    pub pre: DecayProbability,
    pub bins: Vec<DecayProbability>,
}

impl PooledTrace {
    pub fn add(&mut self, q: &QubitDynamics) {
        self.events += 1;
        self.pre = self.pre.merge(q.pre);
        let post = q.post_bins();
        if self.bins.len() < post.len() {
            self.bins.resize(post.len(), DecayProbability::default());
        }
        for (a, b) in self.bins.iter_mut().zip(post) {
            *a = a.merge(*b);
        }
    }

    /// Event-averaged ΔΓ per post-onset bin; saturated and undefined bins are `None`.
    pub fn dgamma(&self, cfg: &DynamicsConfig) -> Vec<Option<f64>> {
        let Some(pp) = self.pre.p() else { return vec![None; self.bins.len()] };
        self.bins
            .iter()
            .map(|b| {
                let g = delta_gamma(b.p()?, pp, cfg.delta_eff);
                (g.is_finite() && g * cfg.delta_eff <= cfg.linear_limit).then_some(g)
            })
            .collect()
    }
}

/// Pool qubit `q` over events where it participates.
pub fn pool_participating(dynamics: &[EventDynamics], q: usize) -> PooledTrace {
    let mut t = PooledTrace::default();
    for d in dynamics {
        if let Some(qd) = d.qubits.get(q) {
            if qd.participates {
                t.add(qd);
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryFit {
    /// s
    pub tau: f64,
    /// s⁻¹ at t = 0
    pub amplitude: f64,
    pub rms_residual: f64,
    pub bins_used: usize,
}

/// Least-squares fit of ΔΓ(t) = A·e^(−t/τ) to bins centred at (i + 0.5)·bin_duration.
/// Returns `None` with fewer than five positive finite bins.
pub fn fit_recovery(series: &[Option<f64>], bin_duration: f64) -> Option<RecoveryFit> {
    let pts: Vec<(f64, f64)> =
        series.iter().enumerate().filter_map(|(i, g)| g.filter(|v| v.is_finite()).map(|v| ((i as f64 + 0.5) * bin_duration, v))).collect();
    let pos: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1 > 0.0).collect();
    if pos.len() < 5 {
        return None;
    }
    // Log-linear start weighted by y² (approximates equal absolute weights).
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, y) in &pos {
        let w = y * y;
        let ly = y.ln();
        sw += w;
        sx += w * t;
        sy += w * ly;
        sxx += w * t * t;
        sxy += w * t * ly;
    }
    let den = sw * sxx - sx * sx;
    let slope = if den.abs() > 0.0 { (sw * sxy - sx * sy) / den } else { -1.0 / bin_duration };
    let mut k = if slope < 0.0 { -slope } else { 1.0 / (pos.len() as f64 * bin_duration) };
    let mut amp = ((sy - slope * sx) / sw).exp();
    // Levenberg–Marquardt on (A, k).
    let sse = |a: f64, k: f64| pts.iter().map(|&(t, y)| (y - a * (-k * t).exp()).powi(2)).sum::<f64>();
    let mut cur = sse(amp, k);
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for &(t, y) in &pts {
            let e = (-k * t).exp();
            let f = amp * e;
            let j = [e, -amp * t * e];
            let r = y - f;
            for p in 0..2 {
                jtr[p] += j[p] * r;
                for q in 0..2 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut improved = false;
        for _ in 0..20 {
            let m = [[jtj[0][0] * (1.0 + lambda), jtj[0][1]], [jtj[1][0], jtj[1][1] * (1.0 + lambda)]];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let da = (jtr[0] * m[1][1] - jtr[1] * m[0][1]) / det;
            let dk = (m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let (na, nk) = (amp + da, (k + dk).max(1e-12));
            let s = sse(na, nk);
            if s < cur {
                let rel = (cur - s) / cur.max(1e-300);
                amp = na;
                k = nk;
                cur = s;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some(RecoveryFit { tau: 1.0 / k, amplitude: amp, rms_residual: (cur / pts.len() as f64).sqrt(), bins_used: pts.len() })
}

/// Participation-multiplicity histogram split into cosmic and other components.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationHistogram {
    pub total: Vec<u64>,
    pub tagged: Vec<u64>,
    pub cosmic: Vec<f64>,
    pub other: Vec<f64>,
}

pub fn participation_histogram(
    multiplicities: &[usize],
    coincident: &[bool],
    coverage: f64,
    n_qubits: usize,
) -> Result<ParticipationHistogram> {
    if multiplicities.len() != coincident.len() {
        return Err(Error::Inconsistent("one coincidence tag per event required".into()));
    }
    if !(coverage > 0.0) {
        return Err(Error::Undefined("coverage must be positive".into()));
    }
    let mut total = vec![0u64; n_qubits + 1];
    let mut tagged = vec![0u64; n_qubits + 1];
    for (&m, &t) in multiplicities.iter().zip(coincident) {
        let m = m.min(n_qubits);
        total[m] += 1;
        if t {
            tagged[m] += 1;
        }
    }
    let cosmic: Vec<f64> = tagged.iter().map(|&t| t as f64 / coverage).collect();
    let other = total.iter().zip(&cosmic).map(|(&t, &c)| t as f64 - c).collect();
    Ok(ParticipationHistogram { total, tagged, cosmic, other })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DT: f64 = 15.274e-6;

    fn direct(x: &[u8], t: &FilterTemplate, k: usize) -> f64 {
        t.values.iter().enumerate().map(|(j, &h)| x[k - t.flat_half + j] as f64 * h).sum()
    }

    fn template() -> FilterTemplate {
        DetectionConfig::default().template(DT).unwrap()
    }

    #[test]
    fn template_shape() {
        let t = template();
        assert_eq!(t.len(), 1648);
        assert!(t.values.iter().sum::<f64>().abs() < 1e-9);
        for j in 825..1648 {
            assert!(t.values[j] < t.values[j - 1]);
        }
    }

    #[test]
    fn constant_series_gives_zero() {
        let t = template();
        let c = cross_correlate(&vec![7u8; 20_000], &t);
        assert!(c.values.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn matches_direct_convolution() {
        let t = template();
        let x: Vec<u8> = (0..6000u32).map(|i| ((i.wrapping_mul(2654435761u32)) >> 28) as u8 % 11).collect();
        let c = cross_correlate(&x, &t);
        assert_eq!(c.values.len(), x.len() - t.len() + 1);
        for k in [824, 825, 2000, 3333, x.len() - 824] {
            assert!((c.at(k).unwrap() - direct(&x, &t, k)).abs() < 1e-8, "k={k}");
        }
    }

    #[test]
    fn short_entry_is_flagged() {
        let t = template();
        let d = detect_events(&[0u8; 100], &t, &DetectionConfig::default(), 0, 0, DT);
        assert_eq!(d.status, DetectStatus::TooShort);
        assert!(d.events.is_empty());
    }

    #[test]
    fn zero_counts_no_events() {
        let t = template();
        let d = detect_events(&vec![0u8; 10_000], &t, &DetectionConfig::default(), 0, 0, DT);
        assert!(d.events.is_empty() && d.candidates.is_empty());
    }

    fn burst_series(n: usize, onsets: &[usize]) -> Vec<u8> {
        let mut x = vec![0u8; n];
        for &k in onsets {
            for j in 0..1500 {
                if k + j < n {
                    let v = 10.0 * (-(j as f64) * DT / 5e-3).exp();
                    x[k + j] = x[k + j].saturating_add(v.round() as u8);
                }
            }
        }
        x
    }

    #[test]
    fn burst_onset_localised() {
        let t = template();
        let x = burst_series(10_000, &[4000]);
        let d = detect_events(&x, &t, &DetectionConfig::default(), 0, 0, DT);
        assert_eq!(d.events.len(), 1);
        assert!((d.events[0].onset_cycle as i64 - 4000).abs() <= 3);
    }

    #[test]
    fn close_bursts_merge() {
        let t = template();
        let gap = (8e-3 / DT) as usize;
        let x = burst_series(12_000, &[4000, 4000 + gap]);
        let d = detect_events(&x, &t, &DetectionConfig::default(), 0, 0, DT);
        assert_eq!(d.events.len(), 1);
        let far = burst_series(12_000, &[3000, 3000 + 2 * gap]);
        assert_eq!(detect_events(&far, &t, &DetectionConfig::default(), 0, 0, DT).events.len(), 2);
    }

    #[test]
    fn delta_gamma_inverse() {
        let p = |g: f64| 1.0 - (-g * 3e-6).exp();
        let pp = p(1.0 / 50e-6);
        assert!((pp - 0.0582).abs() < 1e-4);
        let dg = delta_gamma(p(1.0 / 1e-6), pp, 3e-6);
        let expect = 1.0 / 1e-6 - 1.0 / 50e-6;
        assert!(((dg - expect) / expect).abs() < 1e-9);
        assert_eq!(delta_gamma(0.2, 0.2, 3e-6), 0.0);
        assert!(delta_gamma(1.0, 0.1, 3e-6).is_infinite());
    }

    #[test]
    fn decay_probability_markers() {
        let shots = EntryShots { entry: 0, start_time_ns: 0, n_qubits: 1, masks: vec![0; 50] };
        let d = decay_probability(&shots, 0, 50, 0).unwrap();
        assert_eq!(d.p(), None);
        let shots = EntryShots { entry: 0, start_time_ns: 0, n_qubits: 1, masks: vec![1, 0, 1, 0, 1, 0] };
        let d = decay_probability(&shots, 0, 6, 0).unwrap();
        assert_eq!((d.n_prep, d.n_decay), (3, 0));
        assert_eq!(d.p(), Some(0.0));
        assert!(decay_probability(&shots, 0, 7, 0).is_err());
    }

    #[test]
    fn relaxation_counts() {
        let shots = EntryShots { entry: 0, start_time_ns: 0, n_qubits: 2, masks: vec![0b11, 0b11, 0b01, 0b00, 0b11] };
        assert_eq!(relaxation_series(&shots), vec![0, 2, 1, 0, 0]);
        let ground = EntryShots { entry: 0, start_time_ns: 0, n_qubits: 1, masks: vec![1; 10] };
        assert_eq!(relaxation_series(&ground).iter().map(|&v| v as u32).sum::<u32>(), 9);
    }

    #[test]
    fn exact_exponential_fit() {
        let bd = 40.0 * DT;
        let s: Vec<Option<f64>> = (0..60).map(|i| Some(3e5 * (-(i as f64 + 0.5) * bd / 6e-3).exp())).collect();
        let f = fit_recovery(&s, bd).unwrap();
        assert!((f.tau / 6e-3 - 1.0).abs() < 0.02);
        assert!((f.amplitude / 3e5 - 1.0).abs() < 0.02);
        assert!(fit_recovery(&s[..4], bd).is_none());
    }

    #[test]
    fn participation_split() {
        let h = participation_histogram(&[10; 20], &[true; 20].map(|_| false), 0.133, 10).unwrap();
        assert_eq!(h.total[10], 20);
        let tags: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let h = participation_histogram(&[10; 20], &tags, 0.133, 10).unwrap();
        assert!((h.cosmic[10] - 75.187969).abs() < 1e-5);
        let empty = participation_histogram(&[], &[], 0.133, 10).unwrap();
        assert!(empty.total.iter().all(|&c| c == 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn detection_translation_covariant(shift in 0usize..500, onset in 2000usize..5000) {
            let t = template();
            let x = burst_series(9000, &[onset]);
            let mut y = vec![0u8; shift];
            y.extend_from_slice(&x);
            let cfg = DetectionConfig::default();
            let a = detect_events(&x, &t, &cfg, 0, 0, DT);
            let b = detect_events(&y, &t, &cfg, 0, 0, DT);
            prop_assert_eq!(a.events.len(), b.events.len());
            for (p, q) in a.events.iter().zip(&b.events) {
                prop_assert_eq!(p.onset_cycle as usize + shift, q.onset_cycle as usize);
            }
        }

        #[test]
        fn peak_monotone_in_amplitude(scale in 1u8..5, onset in 1000usize..3000) {
            let t = template();
            let x = burst_series(6000, &[onset]);
            let y: Vec<u8> = x.iter().map(|v| v * scale).collect();
            let z: Vec<u8> = x.iter().map(|v| v * (scale + 1)).collect();
            let cy = cross_correlate(&y, &t).at(onset).unwrap();
            let cz = cross_correlate(&z, &t).at(onset).unwrap();
            prop_assert!(cz >= cy);
        }

        #[test]
        fn fast_correlation_equals_direct(seed in 0u32..1000) {
            let t = FilterTemplate::new(64, 32, 0.3e-3, DT).unwrap();
            let x: Vec<u8> = (0..400u32).map(|i| ((i.wrapping_add(seed)).wrapping_mul(2654435761) >> 29) as u8).collect();
            let c = cross_correlate(&x, &t);
            for k in 32..(400 - 32) {
                prop_assert!((c.at(k).unwrap() - direct(&x, &t, k)).abs() < 1e-9);
            }
        }
    }
}
