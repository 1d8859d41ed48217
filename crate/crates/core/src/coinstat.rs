//! Qubit/detector inter-arrival statistics, accidental background and rate decomposition.

use crate::combination::Combination;
use crate::error::{Error, Result};
use crate::geometry::CrossSectionSet;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Centred coincidence window in whole cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub coincidence_window: u32,
    /// Detector-detector clustering window, ns.
    pub detector_window_ns: i64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { coincidence_window: 3, detector_window_ns: 1000 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coincidence_window == 0 || self.coincidence_window.is_multiple_of(2) {
            return Err(Error::config("coincidence window must be an odd positive number of cycles"));
        }
        if self.detector_window_ns <= 0 {
            return Err(Error::config("detector window must be positive"));
        }
        Ok(())
    }

    pub fn half_cycles(&self) -> i64 {
        (self.coincidence_window / 2) as i64
    }

    pub fn seconds(&self, cycle_duration: f64) -> f64 {
        self.coincidence_window as f64 * cycle_duration
    }
}

/// r = −ln(1 − n/N)/window for n occupied windows out of N.
pub fn rate_from_counts(n: u64, n_windows: u64, window: f64) -> Result<f64> {
    if n > n_windows {
        return Err(Error::domain(format!("{n} occupied windows exceed {n_windows}")));
    }
    if n == n_windows {
        return Err(Error::domain("every window occupied; rate saturated"));
    }
    if !(window > 0.0) {
        return Err(Error::domain("window must be positive"));
    }
    Ok(-(-(n as f64) / n_windows as f64).ln_1p() / window)
}

/// Pulse mapped onto the qubit cycle grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedPulse {
    pub entry: u32,
    pub cycle: u32,
    pub detector: u8,
    pub timestamp_ns: i64,
    pub amplitude: f64,
}

/// (entry, cycle) of a qubit event.
pub type EventTag = (u32, u32);

/// Signed cycle delay to the nearest pulse (pulse − event). Ties go to the
/// earlier pulse. `None` when the event's entry has no pulses.
pub fn nearest_delays(events: &[EventTag], pulses: &[TaggedPulse]) -> Vec<Option<i64>> {
    let mut by_entry: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for p in pulses {
        by_entry.entry(p.entry).or_default().push(p.cycle);
    }
    for v in by_entry.values_mut() {
        v.sort_unstable();
    }
    events
        .iter()
        .map(|&(e, c)| {
            let v = by_entry.get(&e)?;
            let i = v.partition_point(|&x| x < c);
            let after = v.get(i).map(|&x| x as i64 - c as i64);
            let before = i.checked_sub(1).map(|j| v[j] as i64 - c as i64);
            match (before, after) {
                (Some(b), Some(a)) => Some(if -b <= a { b } else { a }),
                (b, a) => b.or(a),
            }
        })
        .collect()
}

/// Delays to any detector plus one set per detector.
#[derive(Debug, Clone, PartialEq)]
pub struct InterArrivalSet {
    pub any: Vec<Option<i64>>,
    pub per_detector: BTreeMap<u8, Vec<Option<i64>>>,
}

pub fn inter_arrivals(events: &[EventTag], pulses: &[TaggedPulse]) -> InterArrivalSet {
    let mut dets: Vec<u8> = pulses.iter().map(|p| p.detector).collect();
    dets.sort_unstable();
    dets.dedup();
    let per_detector = dets
        .into_iter()
        .map(|d| {
            let sub: Vec<TaggedPulse> = pulses.iter().copied().filter(|p| p.detector == d).collect();
            (d, nearest_delays(events, &sub))
        })
        .collect();
    InterArrivalSet { any: nearest_delays(events, pulses), per_detector }
}

/// Events whose nearest pulse lies within the window.
pub fn coincidence_flags(delays: &[Option<i64>], window: &WindowConfig) -> Vec<bool> {
    delays.iter().map(|d| d.is_some_and(|d| d.abs() <= window.half_cycles())).collect()
}

/// r_acc = (r_Q − r_QS)(e^{r_S δt} − 1).
pub fn accidental_rate(r_q: f64, r_qs: f64, r_s: f64, dt: f64) -> Result<f64> {
    if r_qs > r_q {
        return Err(Error::Inconsistent(format!("r_QS = {r_qs} exceeds r_Q = {r_q}")));
    }
    if r_q < 0.0 || r_qs < 0.0 || r_s < 0.0 || dt < 0.0 {
        return Err(Error::domain("rates and window must be nonnegative"));
    }
    Ok((r_q - r_qs) * (r_s * dt).exp_m1())
}

/// ∫ r_S e^{−2 r_S |t|} dt over [lo, hi] (seconds, signed).
pub fn nearest_delay_mass(r_s: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let half = |x: f64| {
        // Mass in [0, x] for x ≥ 0.
        0.5 * -(-2.0 * r_s * x).exp_m1()
    };
    let signed = |x: f64| if x >= 0.0 { half(x) } else { -half(-x) };
    signed(hi) - signed(lo)
}

/// Expected background counts per delay bin given as signed edges in seconds.
pub fn background_histogram(r_q: f64, r_qs_mu: f64, r_s: f64, duration: f64, edges: &[f64]) -> Vec<f64> {
    let scale = (r_q - r_qs_mu).max(0.0) * duration;
    edges.windows(2).map(|w| scale * nearest_delay_mass(r_s, w[0], w[1])).collect()
}

/// Background rate in a bin of width δt centred at Δt: (r_Q − r_QS^µ) e^{−2 r_S|Δt|} sinh(r_S δt).
pub fn background_rate_at(r_q: f64, r_qs_mu: f64, r_s: f64, delta_t: f64, width: f64) -> f64 {
    (r_q - r_qs_mu) * (-2.0 * r_s * delta_t.abs()).exp() * (r_s * width).sinh()
}

/// Central 68.27% Garwood interval for a Poisson count.
pub fn garwood(n: u64) -> (f64, f64) {
    let alpha = 1.0 - 0.682_689_492_137_086;
    let lo = if n == 0 { 0.0 } else { ChiSquared::new(2.0 * n as f64).expect("dof > 0").inverse_cdf(alpha / 2.0) / 2.0 };
    let hi = ChiSquared::new(2.0 * n as f64 + 2.0).expect("dof > 0").inverse_cdf(1.0 - alpha / 2.0) / 2.0;
    (lo, hi)
}

/// Value with asymmetric one-sigma errors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Measured {
    pub value: f64,
    pub err_lo: f64,
    pub err_hi: f64,
}

impl Measured {
    pub fn exact(value: f64) -> Self {
        Measured { value, err_lo: 0.0, err_hi: 0.0 }
    }

    pub fn symmetric(value: f64, err: f64) -> Self {
        Measured { value, err_lo: err, err_hi: err }
    }

    fn from_count(n: u64, scale: f64) -> Self {
        let (lo, hi) = garwood(n);
        Measured { value: n as f64 * scale, err_lo: (n as f64 - lo) * scale, err_hi: (hi - n as f64) * scale }
    }

    pub fn rel_lo(&self) -> f64 {
        if self.value != 0.0 {
            self.err_lo / self.value.abs()
        } else {
            0.0
        }
    }

    pub fn rel_hi(&self) -> f64 {
        if self.value != 0.0 {
            self.err_hi / self.value.abs()
        } else {
            0.0
        }
    }
}

/// Inputs of the rate decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerInputs {
    pub n_q: u64,
    pub n_qs: u64,
    /// Detector pulse count; used for r_S when `r_s` is absent.
    pub n_s: u64,
    /// Directly supplied detector rate, s⁻¹.
    pub r_s: Option<f64>,
    /// Live time, s.
    pub duration: f64,
    /// Coincidence window, s.
    pub window: f64,
    pub coverage: Measured,
}

/// All measured and derived rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RateLedger {
    pub n_q: u64,
    pub n_s: u64,
    pub n_qs: u64,
    pub duration: f64,
    pub window: f64,
    pub r_q: Measured,
    pub r_s: Measured,
    pub r_qs: Measured,
    pub r_qs_acc: Measured,
    pub r_qs_mu: Measured,
    pub r_q_mu: Measured,
    pub r_q_other: Measured,
    pub coverage: Measured,
    pub cosmic_fraction: Measured,
    pub flux: Option<Measured>,
}

fn quad(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Fill the ledger from counts and coverage.
pub fn decompose_rates(inp: &LedgerInputs) -> Result<RateLedger> {
    if !(inp.duration > 0.0) {
        return Err(Error::domain("duration must be positive"));
    }
    if !(inp.coverage.value > 0.0) {
        return Err(Error::Undefined("coverage is zero; decomposition undefined".into()));
    }
    if inp.n_qs > inp.n_q {
        return Err(Error::Inconsistent("more coincidences than qubit events".into()));
    }
    let t = inp.duration;
    let r_q = Measured::from_count(inp.n_q, 1.0 / t);
    let r_qs = Measured::from_count(inp.n_qs, 1.0 / t);
    let r_s = match inp.r_s {
        Some(r) => Measured::exact(r),
        None => Measured::from_count(inp.n_s, 1.0 / t),
    };
    let acc = accidental_rate(r_q.value, r_qs.value, r_s.value, inp.window)?;
    // First-order propagation of r_Q and r_S uncertainties into the accidental rate.
    let x = r_s.value * inp.window;
    let d_rs = if x > 0.0 { (r_q.value - r_qs.value) * inp.window * x.exp() } else { 0.0 };
    let f = x.exp_m1();
    let acc_lo = quad(f * r_q.err_lo, d_rs * r_s.err_lo);
    let acc_hi = quad(f * r_q.err_hi, d_rs * r_s.err_hi);
    let r_qs_acc = Measured { value: acc, err_lo: acc_lo, err_hi: acc_hi };
    let mu = r_qs.value - acc;
    let r_qs_mu = Measured { value: mu, err_lo: quad(r_qs.err_lo, acc_hi), err_hi: quad(r_qs.err_hi, acc_lo) };
    let c = inp.coverage;
    let qmu = mu / c.value;
    let r_q_mu = Measured {
        value: qmu,
        err_lo: qmu.abs() * quad(r_qs_mu.rel_lo(), c.rel_hi()),
        err_hi: qmu.abs() * quad(r_qs_mu.rel_hi(), c.rel_lo()),
    };
    let other = r_q.value - qmu;
    let r_q_other = Measured { value: other, err_lo: quad(r_q.err_lo, r_q_mu.err_hi), err_hi: quad(r_q.err_hi, r_q_mu.err_lo) };
    let frac = qmu / r_q.value;
    let cosmic_fraction = Measured {
        value: frac,
        err_lo: frac.abs() * quad(r_q_mu.rel_lo(), r_q.rel_hi()),
        err_hi: frac.abs() * quad(r_q_mu.rel_hi(), r_q.rel_lo()),
    };
    Ok(RateLedger {
        n_q: inp.n_q,
        n_s: inp.n_s,
        n_qs: inp.n_qs,
        duration: t,
        window: inp.window,
        r_q,
        r_s,
        r_qs,
        r_qs_acc,
        r_qs_mu,
        r_q_mu,
        r_q_other,
        coverage: c,
        cosmic_fraction,
        flux: None,
    })
}

impl RateLedger {
    /// Flat key-value report; rates also shown as mean waiting times.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, m: &Measured, unit: &str| {
            let wait = if m.value > 0.0 { format!(" # 1/({:.6} s)", 1.0 / m.value) } else { String::new() };
            let _ = writeln!(s, "{k} = {:.9e} -{:.3e} +{:.3e} {unit}{wait}", m.value, m.err_lo, m.err_hi);
        };
        line("r_Q", &self.r_q, "1/s");
        line("r_S", &self.r_s, "1/s");
        line("r_QS", &self.r_qs, "1/s");
        line("r_QS_acc", &self.r_qs_acc, "1/s");
        line("r_QS_mu", &self.r_qs_mu, "1/s");
        line("r_Q_mu", &self.r_q_mu, "1/s");
        line("r_Q_other", &self.r_q_other, "1/s");
        let mut tail = String::new();
        let _ = writeln!(tail, "C_QS = {:.6} -{:.6} +{:.6}", self.coverage.value, self.coverage.err_lo, self.coverage.err_hi);
        let _ = writeln!(
            tail,
            "cosmic_fraction = {:.6} -{:.6} +{:.6}",
            self.cosmic_fraction.value, self.cosmic_fraction.err_lo, self.cosmic_fraction.err_hi
        );
        if let Some(f) = &self.flux {
            let _ = writeln!(tail, "flux = {:.6e} -{:.3e} +{:.3e} 1/s/cm2", f.value, f.err_lo, f.err_hi);
        }
        let _ = writeln!(tail, "N_Q = {}\nN_S = {}\nN_QS = {}", self.n_q, self.n_s, self.n_qs);
        let _ = writeln!(tail, "live_time = {:.6} s", self.duration);
        let _ = writeln!(tail, "window = {:.9e} s", self.window);
        s + &tail
    }
}

/// One row of the window scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrRow {
    pub window: u32,
    pub n_qs: u64,
    pub n_acc: f64,
    pub snr: f64,
    pub is_max: bool,
}

/// SNR = N_QS/√N_acc for each odd window width (cycles).
pub fn snr_vs_window(
    delays: &[Option<i64>],
    windows: &[u32],
    r_q: f64,
    r_s: f64,
    duration: f64,
    cycle_duration: f64,
) -> Result<Vec<SnrRow>> {
    let mut rows = Vec::with_capacity(windows.len());
    for &w in windows {
        if w == 0 || w % 2 == 0 {
            return Err(Error::domain(format!("window {w} must be odd and positive")));
        }
        let half = (w / 2) as i64;
        let n_qs = delays.iter().filter(|d| d.is_some_and(|d| d.abs() <= half)).count() as u64;
        let r_qs = n_qs as f64 / duration;
        let n_acc = ((r_q - r_qs).max(0.0)) * (r_s * w as f64 * cycle_duration).exp_m1() * duration;
        let snr = if n_acc > 0.0 { n_qs as f64 / n_acc.sqrt() } else { 0.0 };
        rows.push(SnrRow { window: w, n_qs, n_acc, snr, is_max: false });
    }
    if let Some(i) = (0..rows.len()).max_by(|&a, &b| rows[a].snr.total_cmp(&rows[b].snr)) {
        if rows[i].snr > 0.0 {
            rows[i].is_max = true;
        }
    }
    Ok(rows)
}

/// Inter-arrival histogram rows: (bin centre s, observed, expected background, expected cosmic).
/// Bins are `bin_cycles` wide, centred on zero, covering ±`half_bins` bins.
pub fn inter_arrival_rows(
    delays: &[Option<i64>],
    bin_cycles: u32,
    half_bins: u32,
    ledger: &RateLedger,
    cycle_duration: f64,
) -> Vec<(f64, u64, f64, f64)> {
    let w = bin_cycles.max(1) as i64;
    let h = half_bins as i64;
    let mut obs = vec![0u64; (2 * h + 1) as usize];
    for d in delays.iter().flatten() {
        // Bin k covers delays in [(k − ½)w, (k + ½)w]; halves round away from zero.
        let k = (*d as f64 / w as f64).round() as i64;
        if k.abs() <= h {
            obs[(k + h) as usize] += 1;
        }
    }
    let mu_count = ledger.r_qs_mu.value.max(0.0) * ledger.duration;
    (-h..=h)
        .map(|k| {
            let lo = (k as f64 - 0.5) * w as f64;
            let hi = lo + w as f64;
            let bkg = (ledger.r_q.value - ledger.r_qs_mu.value).max(0.0)
                * ledger.duration
                * nearest_delay_mass(ledger.r_s.value, lo * cycle_duration, hi * cycle_duration);
            let cos = if k == 0 { mu_count } else { 0.0 };
            ((k * w) as f64 * cycle_duration, obs[(k + h) as usize], bkg, cos)
        })
        .collect()
}

pub fn inter_arrival_csv(rows: &[(f64, u64, f64, f64)]) -> String {
    let mut s = String::from("bin_center_s,observed,expected_background,expected_cosmic\n");
    for (c, o, b, m) in rows {
        let _ = writeln!(s, "{c:.9e},{o},{b:.6},{m:.6}");
    }
    s
}

pub fn snr_csv(rows: &[SnrRow]) -> String {
    let mut s = String::from("window_cycles,n_qs,n_acc,snr,is_max\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.window, r.n_qs, r.n_acc, r.snr, r.is_max as u8);
    }
    s
}

/// Observed singles and any-coincidence rates of one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorObservation {
    pub label: String,
    pub r_d: f64,
    pub r_ds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluxEfficiency {
    pub efficiency: Measured,
    pub flux: Measured,
    /// (label, observed coverage, model coverage at the estimate, per-detector flux).
    pub per_detector: Vec<(String, f64, f64, f64)>,
}

/// Exclusive σ* projected onto the detector labels (other volumes unobserved).
fn project(xs: &CrossSectionSet, detectors: Combination) -> Vec<(Combination, f64)> {
    let mut m: BTreeMap<Combination, f64> = BTreeMap::new();
    for (c, s) in xs.exclusive_nonempty() {
        let p = c.intersection(detectors);
        if !p.is_empty() {
            *m.entry(p).or_default() += s;
        }
    }
    m.into_iter().collect()
}

fn coverage_model(proj: &[(Combination, f64)], d: usize, eps: f64) -> (f64, f64) {
    let sigma_d: f64 = proj.iter().filter(|(c, _)| c.contains(d)).map(|x| x.1).sum();
    let sum: f64 =
        proj.iter().filter(|(c, _)| c.contains(d) && c.len() >= 2).map(|(c, s)| (1.0 - (1.0 - eps).powi(c.len() as i32 - 1)) * s).sum();
    (sigma_d, sum)
}

/// Shared efficiency by least squares on coverages, then flux from the coincidence rates.
pub fn estimate_flux_and_efficiency(obs: &[DetectorObservation], xs: &CrossSectionSet) -> Result<FluxEfficiency> {
    let mut idx = Vec::new();
    for o in obs {
        let i = xs.labels.index_of(&o.label).ok_or_else(|| Error::config(format!("unknown detector `{}`", o.label)))?;
        idx.push(i);
    }
    let dets = Combination::from_indices(idx.iter().copied());
    let proj = project(xs, dets);
    let usable: Vec<usize> = (0..obs.len())
        .filter(|&j| {
            let (sd, sum) = coverage_model(&proj, idx[j], 1.0);
            sd > 0.0 && sum > 0.0
        })
        .collect();
    if usable.len() < 2 {
        return Err(Error::Undefined("fewer than two detectors with coincidence coverage".into()));
    }
    if usable.iter().all(|&j| obs[j].r_d <= 0.0 || obs[j].r_ds <= 0.0) {
        return Err(Error::Undefined("no coincidence signal; flux and efficiency not estimable".into()));
    }
    let c_obs: Vec<f64> = usable.iter().map(|&j| if obs[j].r_d > 0.0 { obs[j].r_ds / obs[j].r_d } else { 0.0 }).collect();
    let model = |eps: f64, j: usize| {
        let (sd, sum) = coverage_model(&proj, idx[usable[j]], eps);
        sum / sd
    };
    let sse = |eps: f64| (0..usable.len()).map(|j| (c_obs[j] - model(eps, j)).powi(2)).sum::<f64>();
    // Golden-section search on (0, 1].
    let (mut a, mut b) = (1e-6, 1.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = sse(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = sse(x2);
        }
    }
    let mut eps = 0.5 * (a + b);
    if sse(1.0) <= sse(eps) {
        eps = 1.0;
    }
    let n = usable.len() as f64;
    let h = 1e-6;
    let slopes: Vec<f64> = (0..usable.len())
        .map(|j| (model((eps + h).min(1.0), j) - model((eps - h).max(0.0), j)) / ((eps + h).min(1.0) - (eps - h).max(0.0)))
        .collect();
    let s2 = sse(eps) / (n - 1.0);
    let ss: f64 = slopes.iter().map(|s| s * s).sum();
    let eps_err = if ss > 0.0 { (s2 / ss).sqrt() } else { f64::NAN };
    let mut per = Vec::new();
    let mut fluxes = Vec::new();
    for (j, &o) in usable.iter().enumerate() {
        let (_, sum) = coverage_model(&proj, idx[o], eps);
        let phi = obs[o].r_ds / (eps * sum);
        fluxes.push(phi);
        per.push((obs[o].label.clone(), c_obs[j], model(eps, j), phi));
    }
    let mean = fluxes.iter().sum::<f64>() / n;
    let var = fluxes.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(FluxEfficiency {
        efficiency: Measured::symmetric(eps, eps_err),
        flux: Measured::symmetric(mean, (var / n).sqrt()),
        per_detector: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combination::LabelSet;

    fn tp(entry: u32, cycle: u32) -> TaggedPulse {
        TaggedPulse { entry, cycle, detector: 0, timestamp_ns: 0, amplitude: 100.0 }
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate_from_counts(0, 100, 1.0).unwrap(), 0.0);
        assert!(rate_from_counts(100, 100, 1.0).is_err());
        let t = 266.531 * 3600.0;
        let dt = 15.274e-6;
        let n_windows = (t / dt) as u64;
        let r = rate_from_counts(9460, n_windows, dt).unwrap();
        assert!((1.0 / r - 101.4).abs() / 101.4 < 0.005);
    }

    #[test]
    fn delays_and_ties() {
        let p = vec![tp(0, 10)];
        assert_eq!(nearest_delays(&[(0, 10)], &p), vec![Some(0)]);
        let p = vec![tp(0, 8), tp(0, 12)];
        assert_eq!(nearest_delays(&[(0, 10)], &p), vec![Some(-2)]);
        assert_eq!(nearest_delays(&[(1, 10)], &p), vec![None]);
        assert_eq!(nearest_delays(&[(0, 11)], &p), vec![Some(1)]);
    }

    #[test]
    fn accidental_reference_value() {
        let r = accidental_rate(1.0 / 101.43, 1.0 / 4320.0, 1.0 / 66.616e-3, 45.821e-6).unwrap();
        assert!(((1.0 / r) / 3600.0 - 41.9).abs() / 41.9 < 0.01);
        assert_eq!(accidental_rate(0.1, 0.01, 0.0, 1e-3).unwrap(), 0.0);
        assert!(accidental_rate(0.01, 0.1, 1.0, 1e-3).is_err());
    }

    #[test]
    fn background_shape() {
        let rs = 15.0;
        let a = background_rate_at(0.01, 0.0, rs, 0.3, 0.01);
        let b = background_rate_at(0.01, 0.0, rs, -0.3, 0.01);
        assert_eq!(a, b);
        assert!(background_rate_at(0.01, 0.0, rs, 1e3, 0.01) < 1e-300);
        let edges = [-1e9, -0.01, 0.01, 1e9];
        let h = background_histogram(0.01, 0.001, rs, 1000.0, &edges);
        assert!((h.iter().sum::<f64>() - 9.0).abs() < 1e-9);
        // sinh form equals the edge integral.
        let m = 1000.0 * 0.009 * nearest_delay_mass(rs, 0.295, 0.305);
        assert!((m - 1000.0 * background_rate_at(0.01, 0.001, rs, 0.3, 0.01)).abs() < 1e-12);
    }

    #[test]
    fn garwood_known_values() {
        let (lo, hi) = garwood(0);
        assert_eq!(lo, 0.0);
        assert!((hi - 1.841).abs() < 1e-3);
        let (lo, hi) = garwood(10);
        assert!((lo - 6.891).abs() < 2e-3 && (hi - 14.267).abs() < 2e-3);
    }

    #[test]
    fn ledger_identities_and_zero_accidentals() {
        let inp = LedgerInputs {
            n_q: 1000,
            n_qs: 50,
            n_s: 0,
            r_s: Some(0.0),
            duration: 1e5,
            window: 45e-6,
            coverage: Measured::symmetric(0.13, 0.004),
        };
        let l = decompose_rates(&inp).unwrap();
        assert_eq!(l.r_qs_acc.value, 0.0);
        assert_eq!(l.r_qs_mu.value, l.r_qs.value);
        assert!((l.r_qs.value - (l.r_qs_acc.value + l.r_qs_mu.value)).abs() < 1e-18);
        assert!((l.r_q.value - (l.r_q_mu.value + l.r_q_other.value)).abs() < 1e-18);
        let bad = LedgerInputs { coverage: Measured::exact(0.0), ..inp };
        assert!(matches!(decompose_rates(&bad), Err(Error::Undefined(_))));
    }

    #[test]
    fn snr_flags_max() {
        let mut d: Vec<Option<i64>> = vec![Some(0); 30];
        d.extend(vec![Some(1); 30]);
        d.extend(vec![Some(500); 1000]);
        let rows = snr_vs_window(&d, &[1, 3, 5, 7], 1060.0 / 1e5, 15.0, 1e5, 15.274e-6).unwrap();
        assert_eq!(rows.iter().filter(|r| r.is_max).count(), 1);
        assert!(rows[1].is_max);
        assert!(snr_vs_window(&d, &[2], 0.01, 15.0, 1e5, 15.274e-6).is_err());
    }

    fn toy_xs() -> CrossSectionSet {
        let labels = LabelSet::new(["Q", "A", "B", "C"]).unwrap();
        let mut masks = Vec::new();
        masks.extend(std::iter::repeat_n(Combination(0b0010), 400));
        masks.extend(std::iter::repeat_n(Combination(0b0100), 300));
        masks.extend(std::iter::repeat_n(Combination(0b1000), 500));
        masks.extend(std::iter::repeat_n(Combination(0b0110), 200));
        masks.extend(std::iter::repeat_n(Combination(0b1100), 150));
        masks.extend(std::iter::repeat_n(Combination(0b1110), 100));
        masks.extend(std::iter::repeat_n(Combination(0b0011), 10));
        CrossSectionSet::from_masks(labels, masks.into_iter(), 100_000, 1e4, 1.0)
    }

    fn synthetic_obs(xs: &CrossSectionSet, eps: f64, phi: f64) -> Vec<DetectorObservation> {
        ["A", "B", "C"]
            .iter()
            .map(|l| {
                let mut e = crate::geometry::Efficiencies::new();
                for d in ["A", "B", "C"] {
                    e.insert(d.to_string(), eps);
                }
                let i = xs.labels.index_of(l).unwrap();
                let proj = project(xs, Combination(0b1110));
                let (sd, _) = coverage_model(&proj, i, eps);
                let r_d = eps * sd * phi;
                let r_ds = crate::geometry::any_coincidence_rate(l, xs, &e, phi).unwrap();
                DetectorObservation { label: l.to_string(), r_d, r_ds }
            })
            .collect()
    }

    #[test]
    fn estimator_recovers_noiseless_inputs() {
        let xs = toy_xs();
        for eps in [0.96, 1.0, 0.7] {
            let obs = synthetic_obs(&xs, eps, 0.0133);
            let fe = estimate_flux_and_efficiency(&obs, &xs).unwrap();
            assert!((fe.efficiency.value - eps).abs() < 1e-5, "{eps} -> {:?}", fe.efficiency);
            assert!((fe.flux.value / 0.0133 - 1.0).abs() < 1e-4);
        }
        let zero = synthetic_obs(&xs, 0.96, 0.0);
        assert!(matches!(estimate_flux_and_efficiency(&zero, &xs), Err(Error::Undefined(_))));
    }

    #[test]
    fn reference_ledger_numbers() {
        let c = crate::geometry::collective_coverage(0.94, 0.987, 0.0189, 0.131).unwrap();
        let inp = LedgerInputs {
            n_q: 9460,
            n_qs: 222,
            n_s: 0,
            r_s: Some(1.0 / 66.616e-3),
            duration: 266.531 * 3600.0,
            window: 45.821e-6,
            coverage: Measured::exact(c),
        };
        let l = decompose_rates(&inp).unwrap();
        assert!((1.0 / l.r_q.value / 101.4 - 1.0).abs() < 5e-3);
        assert!((1.0 / l.r_qs_acc.value / 3600.0 / 41.9 - 1.0).abs() < 0.02);
        assert!((1.0 / l.r_qs_mu.value / 60.0 / 74.0 - 1.0).abs() < 0.02);
        assert!((1.0 / l.r_q_mu.value / 592.0 - 1.0).abs() < 0.03);
        assert!((l.cosmic_fraction.value - 0.171).abs() < 0.005);
        assert!(l.r_q_mu.err_hi > l.r_q_mu.err_lo);
        let rep = l.to_report();
        assert!(rep.contains("r_Q_mu = ") && rep.contains("cosmic_fraction = "));
    }

    #[test]
    fn rate_estimator_unbiased() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (r, dt, n_win) = (0.01, 15.274e-6, 60_000_000u64);
        let t = n_win as f64 * dt;
        let pois = Poisson::new(r * t).unwrap();
        let trials = 10_000;
        let est: Vec<f64> = (0..trials).map(|_| rate_from_counts(pois.sample(&mut rng) as u64, n_win, dt).unwrap()).collect();
        let mean = est.iter().sum::<f64>() / trials as f64;
        let sd = (est.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0)).sqrt();
        assert!((mean - r).abs() < 3.0 * sd / (trials as f64).sqrt());
    }

    #[test]
    fn uniform_pulses_match_folded_exponential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n_cycles = 1_000_000u32;
        let p_pulse = 0.01;
        let pulses: Vec<TaggedPulse> = (0..n_cycles).filter(|_| rng.random::<f64>() < p_pulse).map(|c| tp(0, c)).collect();
        let events: Vec<EventTag> = (0..20_000).map(|_| (0, rng.random_range(2000..n_cycles - 2000))).collect();
        let d = nearest_delays(&events, &pulses);
        // Oracle: brute-force scan of the same pulse list.
        for (ev, got) in events.iter().zip(&d).take(500) {
            let best = pulses.iter().map(|p| p.cycle as i64 - ev.1 as i64).min_by_key(|x| (x.abs(), *x > 0)).unwrap();
            assert_eq!(*got, Some(best));
        }
        // P(|Δ| ≥ k) for a Bernoulli stream: (1 − p)^(2k − 1) for k ≥ 1.
        for k in [1i64, 20, 50, 100] {
            let frac = d.iter().filter(|x| x.unwrap().abs() >= k).count() as f64 / d.len() as f64;
            let want = (1.0 - p_pulse).powi(2 * k as i32 - 1);
            let se = (want * (1.0 - want) / d.len() as f64).sqrt();
            assert!((frac - want).abs() < 4.0 * se + 1e-9, "k={k} {frac} vs {want}");
        }
    }

    #[test]
    fn histogram_rows_cover_counts() {
        let l = decompose_rates(&LedgerInputs {
            n_q: 100,
            n_qs: 10,
            n_s: 0,
            r_s: Some(15.0),
            duration: 1e4,
            window: 45.821e-6,
            coverage: Measured::exact(0.13),
        })
        .unwrap();
        let d = vec![Some(0), Some(1), Some(-1), Some(150), Some(-250), None];
        let rows = inter_arrival_rows(&d, 200, 5, &l, 15.274e-6);
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[5].1, 3);
        assert_eq!(rows[6].1, 1);
        assert_eq!(rows[4].1, 1);
        assert!((rows[4].2 - rows[6].2).abs() < 1e-12);
        assert!(inter_arrival_csv(&rows).lines().count() == 12);
    }
}
