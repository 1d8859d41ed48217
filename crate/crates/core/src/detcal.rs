//! Detector energy response: forward model, Poisson deviance and calibration fit.

use crate::combination::Combination;
use crate::error::{Error, Result};
use crate::geometry::DepositionTable;
use crate::rng::{self, Domain};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::SQRT_2;

/// Reference energy of the resolution law, MeV.
pub const E0: f64 = 5.0;

/// Amplitude scale, resolution and acceptance window of one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseParams {
    pub label: String,
    /// ADC per MeV
    pub a: f64,
    /// Fractional resolution at E0.
    pub b: f64,
    /// ADC
    pub v_lo: f64,
    /// ADC
    pub v_hi: f64,
}

impl ResponseParams {
    pub fn new(label: &str, a: f64, b: f64, window: (f64, f64)) -> Self {
        ResponseParams { label: label.into(), a, b, v_lo: window.0, v_hi: window.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !(self.b >= 0.0) || !(self.v_lo < self.v_hi) {
            return Err(Error::config(format!("response of `{}` needs a > 0, b >= 0, v_lo < v_hi", self.label)));
        }
        Ok(())
    }

    /// Energy resolution σ(E) in MeV.
    pub fn sigma(&self, e: f64) -> f64 {
        self.b * (E0 * e.max(0.0)).sqrt()
    }

    /// Acceptance window converted to MeV.
    pub fn window_mev(&self) -> (f64, f64) {
        (self.v_lo / self.a, self.v_hi / self.a)
    }

    pub fn accepts(&self, amplitude: f64) -> bool {
        amplitude >= self.v_lo && amplitude <= self.v_hi
    }

    /// Smeared energy drawn from the Gaussian kernel truncated to E_s >= 0.
    pub fn sample_smeared<R: Rng + ?Sized>(&self, e: f64, rng: &mut R) -> f64 {
        let s = self.sigma(e);
        if s <= 0.0 {
            return e;
        }
        loop {
            let g: f64 = StandardNormal.sample(rng);
            let es = e + s * g;
            if es >= 0.0 {
                return es;
            }
        }
    }
}

/// Detector response of the six scintillators.
pub fn reference_responses() -> Vec<ResponseParams> {
    vec![
        ResponseParams::new("A", 14.971, 0.063, (50.0, 450.0)),
        ResponseParams::new("B", 12.219, 0.015, (35.0, 400.0)),
        ResponseParams::new("C", 14.219, 0.016, (170.0, 550.0)),
        ResponseParams::new("D", 14.832, 0.113, (170.0, 550.0)),
        ResponseParams::new("E", 17.465, 0.118, (170.0, 400.0)),
        ResponseParams::new("F", 21.700, 0.084, (200.0, 400.0)),
    ]
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Binned deposit distribution on a uniform grid over [0, e_max] plus overflow mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DepositPdf {
    pub e_max: f64,
    /// Probability mass per bin.
    pub mass: Vec<f64>,
    pub overflow: f64,
}

/// Energy-grid size used for the response convolution.
pub const ENERGY_GRID: usize = 2048;

impl DepositPdf {
    /// Normalised histogram of `energies` (MeV). Returns `None` when empty.
    pub fn from_samples(energies: impl IntoIterator<Item = f64>, e_max: f64, bins: usize) -> Option<Self> {
        let mut mass = vec![0.0; bins];
        let mut overflow = 0.0;
        let mut n = 0usize;
        let w = e_max / bins as f64;
        for e in energies {
            n += 1;
            let i = (e / w) as usize;
            if e >= e_max || i >= bins {
                overflow += 1.0;
            } else {
                mass[i] += 1.0;
            }
        }
        if n == 0 {
            return None;
        }
        let inv = 1.0 / n as f64;
        mass.iter_mut().for_each(|m| *m *= inv);
        Some(DepositPdf { e_max, mass, overflow: overflow * inv })
    }

    /// Single line at energy `e`.
    pub fn line(e: f64, e_max: f64, bins: usize) -> Self {
        Self::from_samples([e], e_max, bins).expect("one sample")
    }

    pub fn bin_width(&self) -> f64 {
        self.e_max / self.mass.len() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.bin_width()
    }

    /// Piecewise-constant density at `e`.
    pub fn density(&self, e: f64) -> f64 {
        if e < 0.0 || e >= self.e_max {
            return 0.0;
        }
        let i = ((e / self.bin_width()) as usize).min(self.mass.len() - 1);
        self.mass[i] / self.bin_width()
    }

    /// Mass of the piecewise-constant density over [lo, hi].
    fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        let w = self.bin_width();
        let (lo, hi) = (lo.max(0.0), hi.min(self.e_max));
        if hi <= lo {
            return 0.0;
        }
        let (i0, i1) = ((lo / w) as usize, ((hi / w) as usize).min(self.mass.len() - 1));
        let mut s = 0.0;
        for i in i0..=i1 {
            let a = (i as f64 * w).max(lo);
            let b = ((i + 1) as f64 * w).min(hi);
            if b > a {
                s += self.mass[i] * (b - a) / w;
            }
        }
        s
    }
}

fn truncated_norm(e: f64, s: f64) -> f64 {
    1.0 - normal_cdf(-e / s)
}

/// Amplitude density P(V) at the points `v` (ADC), up to overflow mass beyond the grid.
pub fn amplitude_pdf(pdf: &DepositPdf, params: &ResponseParams, v: &[f64]) -> Vec<f64> {
    let a = params.a;
    if params.b == 0.0 {
        return v.iter().map(|&x| pdf.density(x / a) / a).collect();
    }
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let terms: Vec<(f64, f64, f64)> = pdf
        .mass
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, &m)| {
            let e = pdf.center(i);
            let s = params.sigma(e);
            (e, s, m / truncated_norm(e, s))
        })
        .collect();
    v.iter()
        .map(|&x| {
            let es = x / a;
            if es < 0.0 {
                return 0.0;
            }
            terms
                .iter()
                .map(|&(e, s, w)| {
                    let z = (es - e) / s;
                    if z.abs() > 12.0 {
                        0.0
                    } else {
                        w * inv_sqrt_2pi / s * (-0.5 * z * z).exp()
                    }
                })
                .sum::<f64>()
                / a
        })
        .collect()
}

/// Probability mass of P(V) in each bin defined by `edges` (ADC).
pub fn bin_probabilities(pdf: &DepositPdf, params: &ResponseParams, edges: &[f64]) -> Vec<f64> {
    let a = params.a;
    let nb = edges.len().saturating_sub(1);
    if params.b == 0.0 {
        return (0..nb).map(|i| pdf.mass_between(edges[i] / a, edges[i + 1] / a)).collect();
    }
    let mut out = vec![0.0; nb];
    if nb == 0 {
        return out;
    }
    let lo = edges[0] / a;
    let hi = edges[nb] / a;
    let mut cdf = vec![0.0; nb + 1];
    for (i, &m) in pdf.mass.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        let e = pdf.center(i);
        let s = params.sigma(e);
        if e + 12.0 * s < lo || e - 12.0 * s > hi {
            continue;
        }
        let norm = m / truncated_norm(e, s);
        for (k, c) in cdf.iter_mut().enumerate() {
            let z = (edges[k] / a - e) / s;
            *c = if z < -12.0 {
                0.0
            } else if z > 12.0 {
                1.0
            } else {
                normal_cdf(z)
            };
        }
        for k in 0..nb {
            out[k] += norm * (cdf[k + 1] - cdf[k]);
        }
    }
    out
}

/// Expected counts per bin for a process of rate `rate` observed for `duration`.
pub fn expected_counts(pdf: &DepositPdf, params: &ResponseParams, rate: f64, duration: f64, edges: &[f64]) -> Vec<f64> {
    bin_probabilities(pdf, params, edges).into_iter().map(|p| p * rate * duration).collect()
}

/// Σ[E − O + O ln O − O ln E]; infinite when a bin has E = 0 and O > 0.
pub fn poisson_deviance(expected: &[f64], observed: &[f64]) -> f64 {
    expected
        .iter()
        .zip(observed)
        .map(|(&e, &o)| {
            if o > 0.0 {
                if e <= 0.0 {
                    f64::INFINITY
                } else {
                    e - o + o * (o / e).ln()
                }
            } else {
                e
            }
        })
        .sum()
}

/// Uniform bin edges over the acceptance window.
pub fn window_edges(params: &ResponseParams, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| params.v_lo + (params.v_hi - params.v_lo) * i as f64 / bins as f64).collect()
}

/// Histogram of observed (or expected) amplitudes of detector `detector`
/// among events of combination `combination`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumHistogram {
    pub combination: Combination,
    /// Index into the fit's detector list.
    pub detector: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
}

impl SpectrumHistogram {
    pub fn from_amplitudes(combination: Combination, detector: usize, edges: Vec<f64>, amps: impl IntoIterator<Item = f64>) -> Self {
        let nb = edges.len() - 1;
        let mut counts = vec![0.0; nb];
        for v in amps {
            if v < edges[0] || v > edges[nb] {
                continue;
            }
            let i = edges.partition_point(|&e| e <= v).saturating_sub(1).min(nb - 1);
            counts[i] += 1.0;
        }
        SpectrumHistogram { combination, detector, edges, counts }
    }
}

/// One fitted spectrum with its model ingredients.
#[derive(Debug, Clone)]
pub struct FitSpectrum {
    pub observed: SpectrumHistogram,
    /// Deposit distribution of the spectrum's detector given the combination.
    pub pdf: DepositPdf,
    /// Inclusive cross-section of the combination, cm².
    pub sigma: f64,
}

/// Everything the calibration fit needs.
#[derive(Debug, Clone)]
pub struct FitProblem {
    /// Initial guesses; combination bits refer to positions in this list.
    pub init: Vec<ResponseParams>,
    pub init_efficiency: Vec<f64>,
    pub init_flux: f64,
    /// s
    pub duration: f64,
    pub spectra: Vec<FitSpectrum>,
    pub max_outer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<ResponseParams>,
    pub a_err: Vec<f64>,
    pub b_err: Vec<f64>,
    pub efficiency: Vec<f64>,
    pub flux: f64,
    pub cost: f64,
    pub n_bins: usize,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Derivative-free simplex minimiser. Returns (x, f(x), iterations, converged).
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    max_iter: usize,
    ftol: f64,
) -> (Vec<f64>, f64, usize, bool) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        simplex.push(x);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut it = 0;
    let mut converged = false;
    while it < max_iter {
        it += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| fv[i].total_cmp(&fv[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fv = order.iter().map(|&i| fv[i]).collect();
        if (fv[n] - fv[0]).abs() <= ftol * (fv[0].abs() + fv[n].abs() + 1e-12) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < fv[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
        } else {
            let (xc, fc) = if fr < fv[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < fv[n].min(fr) {
                simplex[n] = xc;
                fv[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    fv[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&i, &j| fv[i].total_cmp(&fv[j])).unwrap();
    (simplex[best].clone(), fv[best], it, converged)
}

/// Solve the symmetric positive-definite system via Cholesky; returns the inverse too.
fn spd_inverse(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut inv = vec![vec![0.0; n]; n];
    for c in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let b = if i == c { 1.0 } else { 0.0 };
            y[i] = (b - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
        }
        for i in (0..n).rev() {
            inv[i][c] = (y[i] - (i + 1..n).map(|k| l[k][i] * inv[k][c]).sum::<f64>()) / l[i][i];
        }
    }
    Some(inv)
}

struct FitState<'a> {
    problem: &'a FitProblem,
    params: Vec<ResponseParams>,
    eff: Vec<f64>,
    flux: f64,
    /// Bin probabilities per spectrum at the current (a, b).
    shapes: Vec<Vec<f64>>,
}

impl<'a> FitState<'a> {
    fn rate(&self, s: &FitSpectrum) -> f64 {
        s.observed.combination.indices().map(|k| self.eff[k]).product::<f64>() * s.sigma * self.flux
    }

    fn spectrum_cost(&self, i: usize, shape: &[f64]) -> f64 {
        let s = &self.problem.spectra[i];
        let scale = self.rate(s) * self.problem.duration;
        let e: Vec<f64> = shape.iter().map(|p| p * scale).collect();
        poisson_deviance(&e, &s.observed.counts)
    }

    fn total_cost(&self) -> f64 {
        (0..self.shapes.len()).map(|i| self.spectrum_cost(i, &self.shapes[i])).sum()
    }

    fn shape_for(&self, i: usize, p: &ResponseParams) -> Vec<f64> {
        let s = &self.problem.spectra[i];
        bin_probabilities(&s.pdf, p, &s.observed.edges)
    }

    fn detector_cost(&self, k: usize, p: &ResponseParams) -> f64 {
        self.problem
            .spectra
            .iter()
            .enumerate()
            .filter(|(_, s)| s.observed.detector == k)
            .map(|(i, _)| self.spectrum_cost(i, &self.shape_for(i, p)))
            .sum()
    }

    fn refresh(&mut self, k: usize) {
        for i in 0..self.shapes.len() {
            if self.problem.spectra[i].observed.detector == k {
                self.shapes[i] = self.shape_for(i, &self.params[k]);
            }
        }
    }
}

/// Fit amplitude scales and resolutions (plus ε and Φ nuisances) to the spectra.
pub fn fit_response(problem: &FitProblem) -> Result<FitResult> {
    let nd = problem.init.len();
    if problem.spectra.is_empty() {
        return Err(Error::Fit("no spectra to fit".into()));
    }
    if problem.init_efficiency.len() != nd {
        return Err(Error::config("one initial efficiency per detector required"));
    }
    for p in &problem.init {
        p.validate()?;
    }
    for s in &problem.spectra {
        if s.observed.detector >= nd || s.observed.combination.indices().any(|k| k >= nd) {
            return Err(Error::config("spectrum refers to a detector outside the fit"));
        }
    }
    let mut st = FitState {
        problem,
        params: problem.init.clone(),
        eff: problem.init_efficiency.clone(),
        flux: problem.init_flux,
        shapes: vec![Vec::new(); problem.spectra.len()],
    };
    for k in 0..nd {
        st.refresh(k);
    }
    let mut cost = st.total_cost();
    let mut converged = false;
    let mut outer = 0;
    while outer < problem.max_outer.max(1) {
        outer += 1;
        let before = cost;
        for k in 0..nd {
            let base = st.params[k].clone();
            let f = |x: &[f64]| {
                let mut p = base.clone();
                p.a = x[0].exp();
                p.b = x[1].abs();
                st.detector_cost(k, &p)
            };
            let x0 = [base.a.ln(), base.b.max(1e-3)];
            let step = [0.02, 0.3 * base.b.max(0.01)];
            let (x, _, _, _) = nelder_mead(f, &x0, &step, 400, 1e-10);
            st.params[k].a = x[0].exp();
            st.params[k].b = x[1].abs();
            st.refresh(k);
        }
        nuisance_step(&mut st);
        cost = st.total_cost();
        if (before - cost).abs() <= 1e-7 * (1.0 + cost.abs()) {
            converged = true;
            break;
        }
    }
    let (a_err, b_err) = polish(&mut st);
    cost = st.total_cost();
    let n_bins = problem.spectra.iter().map(|s| s.observed.counts.len()).sum();
    Ok(FitResult {
        params: st.params,
        a_err,
        b_err,
        efficiency: st.eff,
        flux: st.flux,
        cost,
        n_bins,
        outer_iterations: outer,
        converged: converged && cost.is_finite(),
    })
}

fn nuisance_step(st: &mut FitState<'_>) {
    let nd = st.eff.len();
    // Per-spectrum sufficient statistics: Σ shape and Σ observed.
    let sums: Vec<(f64, f64, Combination, f64)> = st
        .problem
        .spectra
        .iter()
        .zip(&st.shapes)
        .map(|(s, sh)| {
            let m: f64 = sh.iter().sum();
            let o: f64 = s.observed.counts.iter().sum();
            (m, o, s.observed.combination, s.sigma)
        })
        .collect();
    let t = st.problem.duration;
    let cost = |x: &[f64]| -> f64 {
        let flux = x[nd].exp();
        sums.iter()
            .map(|&(m, o, c, sigma)| {
                let r = c.indices().map(|k| x[k].exp()).product::<f64>() * sigma * flux * t;
                let e = r * m;
                if o > 0.0 {
                    if e <= 0.0 {
                        f64::INFINITY
                    } else {
                        e - o * e.ln()
                    }
                } else {
                    e
                }
            })
            .sum()
    };
    let mut x0: Vec<f64> = st.eff.iter().map(|e| e.max(1e-6).ln()).collect();
    x0.push(st.flux.max(1e-300).ln());
    let step = vec![0.05; nd + 1];
    let (x, _, _, _) = nelder_mead(cost, &x0, &step, 4000, 1e-14);
    for k in 0..nd {
        st.eff[k] = x[k].exp();
    }
    st.flux = x[nd].exp();
}

/// Fisher-scoring polish over all parameters; returns standard errors of a and b.
fn polish(st: &mut FitState<'_>) -> (Vec<f64>, Vec<f64>) {
    let nd = st.params.len();
    let np = 2 * nd + nd + 1;
    let mut errs = (vec![f64::NAN; nd], vec![f64::NAN; nd]);
    for _ in 0..6 {
        // Derivatives of every expected bin count.
        let ns = st.shapes.len();
        let mut grad = vec![0.0; np];
        let mut info = vec![vec![0.0; np]; np];
        let mut dshape: Vec<[Vec<f64>; 2]> = Vec::with_capacity(ns);
        for i in 0..ns {
            let k = st.problem.spectra[i].observed.detector;
            let p = st.params[k].clone();
            let mut d = [Vec::new(), Vec::new()];
            for (j, slot) in d.iter_mut().enumerate() {
                let h = if j == 0 { 1e-5 * p.a } else { 1e-4 * p.b.max(1e-3) };
                let mut up = p.clone();
                let mut dn = p.clone();
                if j == 0 {
                    up.a += h;
                    dn.a -= h;
                } else {
                    up.b += h;
                    dn.b = (dn.b - h).max(0.0);
                }
                let width = if j == 1 { up.b - dn.b } else { 2.0 * h };
                let su = st.shape_for(i, &up);
                let sd = st.shape_for(i, &dn);
                *slot = su.iter().zip(&sd).map(|(u, d)| (u - d) / width).collect();
            }
            dshape.push(d);
        }
        for i in 0..ns {
            let s = &st.problem.spectra[i];
            let k = s.observed.detector;
            let scale = st.rate(s) * st.problem.duration;
            for (b, &o) in s.observed.counts.iter().enumerate() {
                let e = st.shapes[i][b] * scale;
                if e <= 0.0 {
                    continue;
                }
                let mut d = vec![(0usize, 0.0); 0];
                d.push((2 * k, dshape[i][0][b] * scale));
                d.push((2 * k + 1, dshape[i][1][b] * scale));
                for m in s.observed.combination.indices() {
                    d.push((2 * nd + m, e / st.eff[m]));
                }
                d.push((3 * nd, e / st.flux));
                let w = o / e - 1.0;
                for &(p, v) in &d {
                    grad[p] += w * v;
                    for &(q, u) in &d {
                        info[p][q] += v * u / e;
                    }
                }
            }
        }
        // Parameters with no information (e.g. unused detector) get a unit diagonal.
        for (p, row) in info.iter_mut().enumerate() {
            if row[p] <= 0.0 {
                row[p] = 1.0;
            }
        }
        let Some(cov) = spd_inverse(&info) else { break };
        for k in 0..nd {
            errs.0[k] = cov[2 * k][2 * k].sqrt();
            errs.1[k] = cov[2 * k + 1][2 * k + 1].sqrt();
        }
        let step: Vec<f64> = (0..np).map(|p| (0..np).map(|q| cov[p][q] * grad[q]).sum()).collect();
        let before = st.total_cost();
        let saved = (st.params.clone(), st.eff.clone(), st.flux, st.shapes.clone());
        let mut accepted = false;
        let mut lambda = 1.0;
        for _ in 0..8 {
            for k in 0..nd {
                st.params[k].a = (saved.0[k].a + lambda * step[2 * k]).max(1e-6);
                st.params[k].b = (saved.0[k].b + lambda * step[2 * k + 1]).max(0.0);
                st.eff[k] = (saved.1[k] + lambda * step[2 * nd + k]).max(1e-9);
            }
            st.flux = (saved.2 + lambda * step[3 * nd]).max(1e-300);
            for k in 0..nd {
                st.refresh(k);
            }
            if st.total_cost() <= before {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            st.params = saved.0;
            st.eff = saved.1;
            st.flux = saved.2;
            st.shapes = saved.3;
            break;
        }
        if before - st.total_cost() < 1e-9 * (1.0 + before) {
            break;
        }
    }
    errs
}

/// Deposition table with detector energies replaced by smeared energies E_s,
/// so energy windows V/a reproduce amplitude acceptance.
pub fn smear_table(table: &DepositionTable, responses: &[ResponseParams], seed: u64) -> DepositionTable {
    let n = table.labels.len();
    let map: Vec<Option<&ResponseParams>> = (0..n).map(|k| responses.iter().find(|r| r.label == table.labels.label(k))).collect();
    let mut out = table.clone();
    let mut rng = rng::stream(seed, Domain::Calibration, 0);
    for r in 0..table.len() {
        for k in 0..n {
            let e = out.energies[r * n + k];
            if e > 0.0 {
                if let Some(p) = map[k] {
                    // Keep the deposit recorded even if it smears to exactly zero.
                    out.energies[r * n + k] = p.sample_smeared(e, &mut rng).max(f64::MIN_POSITIVE);
                }
            }
        }
    }
    out
}

/// Deposit PDF of label `k` among rows where every member of `combination` deposited.
pub fn deposit_pdf_for(table: &DepositionTable, combination: Combination, k: usize, e_max: f64) -> Option<DepositPdf> {
    let n = table.labels.len();
    let energies = (0..table.len()).filter_map(|r| {
        let row = &table.energies[r * n..(r + 1) * n];
        combination.indices().all(|m| row[m] > 0.0).then_some(row[k])
    });
    DepositPdf::from_samples(energies, e_max, ENERGY_GRID)
}

/// Text table of fitted parameters.
pub fn format_fit_table(res: &FitResult) -> String {
    let mut s = String::from("# label a a_err b b_err v_lo v_hi e_lo_mev e_hi_mev efficiency\n");
    for (k, p) in res.params.iter().enumerate() {
        let (lo, hi) = p.window_mev();
        s.push_str(&format!(
            "{} {:.4} {:.4} {:.4} {:.4} {} {} {:.3} {:.3} {:.4}\n",
            p.label, p.a, res.a_err[k], p.b, res.b_err[k], p.v_lo, p.v_hi, lo, hi, res.efficiency[k]
        ));
    }
    s.push_str(&format!("# flux {:.6e}\n# cost {:.4} bins {} converged {}\n", res.flux, res.cost, res.n_bins, res.converged));
    s
}
