//! Cosmic-ray muon sampling from the Gaisser flux with tangent-square throwing.

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::vec3::Vec3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

/// Parameters of the zenith/energy flux shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluxModel {
    pub scale_c_mu: f64,
    /// GeV
    pub e_min: f64,
    /// GeV
    pub e_max: f64,
    pub spectral_index: f64,
    /// per GeV
    pub branch1_scale: f64,
    pub branch2_weight: f64,
    /// per GeV
    pub branch2_scale: f64,
}

impl Default for FluxModel {
    fn default() -> Self {
        FluxModel {
            scale_c_mu: 1.0,
            e_min: 10.0,
            e_max: 1000.0,
            spectral_index: 2.7,
            branch1_scale: 1.1 / 115.0,
            branch2_weight: 0.054,
            branch2_scale: 1.1 / 850.0,
        }
    }
}

impl FluxModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_min > 0.0 && self.e_max > self.e_min) {
            return Err(Error::config("flux energy range must satisfy 0 < e_min < e_max"));
        }
        if !(self.scale_c_mu > 0.0) || !(self.branch1_scale >= 0.0) || !(self.branch2_scale >= 0.0) {
            return Err(Error::config("flux scales must be positive"));
        }
        if !(self.branch2_weight >= 0.0) {
            return Err(Error::config("branch2_weight must be nonnegative"));
        }
        Ok(())
    }

    /// Energy factor of the intensity, without the zenith term or normalisation.
    pub fn spectrum(&self, energy: f64) -> f64 {
        energy.powf(-self.spectral_index)
            * (1.0 / (1.0 + self.branch1_scale * energy) + self.branch2_weight / (1.0 + self.branch2_scale * energy))
    }
}

/// Differential intensity per GeV per steradian, up to `scale_c_mu`.
pub fn differential_intensity(model: &FluxModel, theta: f64, energy: f64) -> Result<f64> {
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return Err(Error::domain(format!("zenith angle {theta} outside [0, pi/2]")));
    }
    if !(model.e_min..=model.e_max).contains(&energy) {
        return Err(Error::domain(format!("energy {energy} GeV outside [{}, {}]", model.e_min, model.e_max)));
    }
    // cos(pi/2) is 6e-17 in floating point; the intensity must vanish exactly there.
    let c = if theta == FRAC_PI_2 { 0.0 } else { theta.cos() };
    Ok(model.scale_c_mu * model.spectrum(energy) * c * c)
}

/// Zenith and azimuth drawn from the cos²θ·sinθ law.
pub fn sample_direction<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // CDF of cosθ on [0,1] is c³.
    let u: f64 = rng.random();
    let cos_theta = u.cbrt();
    let theta = cos_theta.clamp(0.0, 1.0).acos();
    let phi = 2.0 * PI * rng.random::<f64>();
    (theta, phi)
}

/// Number of knots in the inverse-CDF energy table.
pub const ENERGY_KNOTS: usize = 1024;

/// Tabulated inverse CDF of the energy spectrum on a log-spaced grid.
#[derive(Debug, Clone)]
pub struct EnergySampler {
    log_e: Vec<f64>,
    cdf: Vec<f64>,
}

impl EnergySampler {
    pub fn new(model: &FluxModel) -> Self {
        Self::with_knots(model, ENERGY_KNOTS)
    }

    pub fn with_knots(model: &FluxModel, knots: usize) -> Self {
        assert!(knots >= 2);
        let (l0, l1) = (model.e_min.ln(), model.e_max.ln());
        let log_e: Vec<f64> = (0..knots).map(|i| l0 + (l1 - l0) * i as f64 / (knots - 1) as f64).collect();
        // Integrate in log space: dN = S(E)·E d(lnE), 8-panel Simpson per interval.
        let f = |l: f64| {
            let e = l.exp();
            model.spectrum(e) * e
        };
        let mut cdf = vec![0.0; knots];
        for i in 1..knots {
            let (a, b) = (log_e[i - 1], log_e[i]);
            let m = 8;
            let h = (b - a) / m as f64;
            let mut s = f(a) + f(b);
            for j in 1..m {
                s += f(a + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
            }
            cdf[i] = cdf[i - 1] + s * h / 3.0;
        }
        let total = cdf[knots - 1];
        for c in &mut cdf {
            *c /= total;
        }
        cdf[knots - 1] = 1.0;
        EnergySampler { log_e, cdf }
    }

    /// Energy at cumulative probability `u` in [0, 1].
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        (self.log_e[i - 1] + t * (self.log_e[i] - self.log_e[i - 1])).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random())
    }
}

/// Draws an energy with a freshly built table. Prefer [`EnergySampler`] in loops.
pub fn sample_energy<R: Rng + ?Sized>(model: &FluxModel, rng: &mut R) -> f64 {
    EnergySampler::new(model).sample(rng)
}

/// Tangent-square throwing configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// cm
    pub hemisphere_radius: f64,
    /// Side of the tangent square, cm.
    pub tangent_side: f64,
    /// Hemisphere origin, cm.
    pub center: Vec3,
    pub sample_count: u64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            hemisphere_radius: 1500.0,
            tangent_side: 200.0,
            center: Vec3::new(0.0, 0.0, -60.0),
            sample_count: 1_000_000,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn tangent_area(&self) -> f64 {
        self.tangent_side * self.tangent_side
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hemisphere_radius > 0.0 && self.tangent_side > 0.0) {
            return Err(Error::config("hemisphere radius and tangent side must be positive"));
        }
        if self.tangent_side * std::f64::consts::FRAC_1_SQRT_2 >= self.hemisphere_radius {
            return Err(Error::config("tangent square does not fit the hemisphere"));
        }
        Ok(())
    }

    /// Side-length rule: every volume (given by its farthest corner distance
    /// `d` from the hemisphere origin) must satisfy ℓ > 2d.
    pub fn check_side_rule(&self, max_distance: f64) -> Result<()> {
        if self.tangent_side > 2.0 * max_distance {
            Ok(())
        } else {
            Err(Error::config(format!("tangent side {} cm must exceed twice the scene extent {} cm", self.tangent_side, max_distance)))
        }
    }
}

/// One thrown muon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuonSample {
    pub origin: Vec3,
    pub direction: Vec3,
    /// GeV
    pub energy: f64,
}

/// Radial unit vector at zenith `theta`, azimuth `phi`.
pub fn radial(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// Throw one muon through the square tangent to the hemisphere.
pub fn throw_muon<R: Rng + ?Sized>(cfg: &SamplerConfig, energies: &EnergySampler, rng: &mut R) -> MuonSample {
    let (theta, phi) = sample_direction(rng);
    let n = radial(theta, phi);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let e_theta = Vec3::new(ct * cp, ct * sp, -st);
    let e_phi = Vec3::new(-sp, cp, 0.0);
    let s1 = rng.random::<f64>() - 0.5;
    let s2 = rng.random::<f64>() - 0.5;
    let l = cfg.tangent_side;
    let origin = cfg.center + n * cfg.hemisphere_radius + e_theta * (s1 * l) + e_phi * (s2 * l);
    MuonSample { origin, direction: -n, energy: energies.sample(rng) }
}

/// Muons per RNG block; fixed so the stream does not depend on thread count.
pub const BLOCK: u64 = 4096;

/// Deterministic parallel batch of `cfg.sample_count` muons.
pub fn sample_batch(cfg: &SamplerConfig, model: &FluxModel) -> Vec<MuonSample> {
    let energies = EnergySampler::new(model);
    let n = cfg.sample_count;
    let blocks = n.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = rng::stream(cfg.seed, Domain::Muons, b);
            let len = BLOCK.min(n - b * BLOCK);
            let energies = &energies;
            (0..len).map(move |_| throw_muon(cfg, energies, &mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

/// Visit muons block by block without materialising the whole batch.
/// `f` receives the global muon index and the sample.
pub fn for_each_block<T, F>(cfg: &SamplerConfig, model: &FluxModel, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, &mut dyn Iterator<Item = (u64, MuonSample)>) -> T + Sync,
{
    let energies = EnergySampler::new(model);
    let n = cfg.sample_count;
    let blocks = n.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(cfg.seed, Domain::Muons, b);
            let len = BLOCK.min(n - b * BLOCK);
            let energies = &energies;
            let mut it = (0..len).map(move |i| (b * BLOCK + i, throw_muon(cfg, energies, &mut rng)));
            f(b, &mut it)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intensity_edge_cases() {
        let m = FluxModel::default();
        assert_eq!(differential_intensity(&m, FRAC_PI_2, 100.0).unwrap(), 0.0);
        let r = differential_intensity(&m, PI / 3.0, 50.0).unwrap() / differential_intensity(&m, 0.0, 50.0).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
        assert!(differential_intensity(&m, 0.1, 5.0).is_err());
        assert!(differential_intensity(&m, -0.1, 50.0).is_err());
        assert!(differential_intensity(&m, 1.6, 50.0).is_err());
    }

    #[test]
    fn throw_geometry() {
        let cfg = SamplerConfig { tangent_side: 300.0, ..Default::default() };
        let es = EnergySampler::new(&FluxModel::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = cfg.hemisphere_radius;
        let h = cfg.tangent_side * std::f64::consts::SQRT_2 / (2.0 * r);
        for _ in 0..10_000 {
            let m = throw_muon(&cfg, &es, &mut rng);
            assert!((m.direction.norm() - 1.0).abs() < 1e-12);
            assert!(m.direction.z <= 0.0);
            let d = (m.origin - cfg.center).norm();
            assert!(d >= r * (1.0 - 1e-12) && d <= r * (1.0 + h * h).sqrt() * (1.0 + 1e-12));
            // origin lies on the tangent plane through center + r·n
            let n = -m.direction;
            assert!(((m.origin - cfg.center).dot(n) - r).abs() < 1e-9);
            assert!((10.0..=1000.0).contains(&m.energy));
        }
    }

    #[test]
    fn quantile_endpoints() {
        let m = FluxModel::default();
        let es = EnergySampler::new(&m);
        assert!((es.quantile(0.0) - 10.0).abs() < 1e-9);
        assert!((es.quantile(1.0) - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn batch_is_deterministic() {
        let cfg = SamplerConfig { sample_count: 10_000, seed: 42, ..Default::default() };
        let m = FluxModel::default();
        let a = sample_batch(&cfg, &m);
        let b = sample_batch(&cfg, &m);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| sample_batch(&cfg, &m));
        assert_eq!(a, c);
    }

    #[test]
    fn side_rule() {
        let cfg = SamplerConfig { tangent_side: 100.0, ..Default::default() };
        assert!(cfg.check_side_rule(49.0).is_ok());
        assert!(cfg.check_side_rule(50.0).is_err());
    }
}
