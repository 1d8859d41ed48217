//! Run configuration: a single TOML tree defaulting to the reference setup.

use crate::burstdetect::{DetectionConfig, DynamicsConfig};
use crate::coinstat::WindowConfig;
use crate::detcal::{reference_responses, ResponseParams};
use crate::error::{Error, Result};
use crate::fluxmc::{FluxModel, SamplerConfig};
use crate::geometry::{Efficiencies, Scene, Window};
use crate::streamsim::{reference_qubits, AmplitudeModel, ClockModel, DetectorChannel, QubitParams, TimebaseConfig};
use crate::vec3::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Two tangent-square samplers: one around the detector stack, one around the chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub detector: SamplerConfig,
    pub chip: SamplerConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            detector: SamplerConfig::default(),
            chip: SamplerConfig { hemisphere_radius: 1500.0, tangent_side: 2.0, center: Vec3::ZERO, sample_count: 1_000_000, seed: 2 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(flatten)]
    pub response: ResponseParams,
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
}

fn default_efficiency() -> f64 {
    0.96
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Injected muon flux, s⁻¹cm⁻².
    pub flux: f64,
    /// Rate of bursts without a muon, s⁻¹.
    pub r_other: f64,
    pub entries: u32,
    pub clock: ClockModel,
    /// Uniform timestamp jitter added to pulses, ns.
    pub jitter_ns: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            flux: 0.0133,
            r_other: 0.0082,
            entries: 8,
            clock: ClockModel { skew_ppm: 5.0, offset_ns: 1000.0 },
            jitter_ns: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoincidenceConfig {
    #[serde(flatten)]
    pub window: WindowConfig,
    pub snr_windows: Vec<u32>,
    pub histogram_bin_cycles: u32,
    pub histogram_half_bins: u32,
    /// Fixed timing efficiency; when absent it is measured by burst injection.
    pub window_efficiency: Option<f64>,
}

impl Default for CoincidenceConfig {
    fn default() -> Self {
        CoincidenceConfig {
            window: WindowConfig::default(),
            snr_windows: vec![1, 3, 5, 7, 9, 11],
            histogram_bin_cycles: 200,
            histogram_half_bins: 50,
            window_efficiency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub bursts: u32,
    /// Cycles per injection segment.
    pub segment_cycles: u32,
    /// Nominal onset cycle inside each segment.
    pub onset_cycle: u32,
    /// Largest |detected − injected| offset still counted as a recovery, cycles.
    pub match_cycles: u32,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig { bursts: 5000, segment_cycles: 4400, onset_cycle: 1900, match_cycles: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub max_outer: usize,
    /// Upper edge of the deposit grid, MeV.
    pub e_max: f64,
    /// Detector pairs whose coincidence spectra join the singles in the fit.
    pub pairs: Vec<String>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { bins: 40, max_outer: 20, e_max: 80.0, pairs: vec!["AB".into(), "CD".into(), "EF".into()] }
    }
}

/// Complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub chip_label: String,
    pub timebase: TimebaseConfig,
    pub flux: FluxModel,
    pub sampling: SamplingConfig,
    pub scene: Scene,
    pub detectors: Vec<DetectorConfig>,
    pub qubits: Vec<QubitParams>,
    pub experiment: ExperimentConfig,
    pub cosmic_amplitude: AmplitudeModel,
    pub other_amplitude: AmplitudeModel,
    pub detection: DetectionConfig,
    pub dynamics: DynamicsConfig,
    pub coincidence: CoincidenceConfig,
    pub injection: InjectionConfig,
    pub calibration: CalibrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output_dir: PathBuf::from("out"),
            chip_label: "Q".into(),
            timebase: TimebaseConfig::default(),
            flux: FluxModel::default(),
            sampling: SamplingConfig::default(),
            scene: Scene::reference(),
            detectors: reference_responses().into_iter().map(|response| DetectorConfig { response, efficiency: 0.96 }).collect(),
            qubits: reference_qubits(),
            experiment: ExperimentConfig::default(),
            cosmic_amplitude: AmplitudeModel::default(),
            other_amplitude: AmplitudeModel::default(),
            detection: DetectionConfig::default(),
            dynamics: DynamicsConfig::default(),
            coincidence: CoincidenceConfig::default(),
            injection: InjectionConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        self.timebase.validate()?;
        self.flux.validate()?;
        self.sampling.detector.validate()?;
        self.sampling.chip.validate()?;
        self.scene.validate()?;
        self.cosmic_amplitude.validate()?;
        self.other_amplitude.validate()?;
        self.coincidence.window.validate()?;
        let labels = self.scene.labels();
        if labels.index_of(&self.chip_label).is_none() {
            return Err(Error::config(format!("chip label `{}` is not a scene volume", self.chip_label)));
        }
        let mut seen = BTreeMap::new();
        for d in &self.detectors {
            d.response.validate()?;
            let l = &d.response.label;
            if labels.index_of(l).is_none() {
                return Err(Error::config(format!("detector `{l}` is not a scene volume")));
            }
            if *l == self.chip_label {
                return Err(Error::config("the chip cannot also be a detector"));
            }
            if seen.insert(l.clone(), ()).is_some() {
                return Err(Error::config(format!("detector `{l}` listed twice")));
            }
            if !(0.0..=1.0).contains(&d.efficiency) {
                return Err(Error::config(format!("efficiency of `{l}` outside [0, 1]")));
            }
        }
        if self.qubits.is_empty() || self.qubits.len() > 16 {
            return Err(Error::config("between 1 and 16 qubits required"));
        }
        for q in &self.qubits {
            q.validate()?;
        }
        let e = &self.experiment;
        if !(e.flux >= 0.0 && e.r_other >= 0.0 && e.jitter_ns >= 0.0) {
            return Err(Error::config("experiment rates and jitter must be nonnegative"));
        }
        if e.clock.skew_ppm.abs() > 100.0 {
            return Err(Error::config("clock skew above 100 ppm is not supported"));
        }
        if self.detection.flat_half == 0 || self.detection.flat_half >= self.detection.template_length {
            return Err(Error::config("template flat half must lie inside the template"));
        }
        if self.coincidence.snr_windows.iter().any(|w| w % 2 == 0) {
            return Err(Error::config("SNR windows must be odd"));
        }
        if let Some(w) = self.coincidence.window_efficiency {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config("window efficiency outside [0, 1]"));
            }
        }
        let inj = &self.injection;
        let dyn_span = self.dynamics.pretrigger_cycles + self.dynamics.pretrigger_gap + self.dynamics.bin_cycles * self.dynamics.post_bins;
        if !inj.segment_cycles.is_multiple_of(self.timebase.ref_pulse_period) || (inj.onset_cycle as usize) < self.detection.flat_half {
            return Err(Error::config("injection segment must be a multiple of the reference period and leave room for the filter"));
        }
        if inj.bursts > 0 && (inj.segment_cycles as usize) < dyn_span {
            return Err(Error::config("injection segment shorter than the dynamics window"));
        }
        for p in &self.calibration.pairs {
            let c = labels.parse(p)?;
            if c.len() != 2 || c.indices().any(|i| !self.detectors.iter().any(|d| d.response.label == labels.label(i))) {
                return Err(Error::config(format!("calibration pair `{p}` must name two detectors")));
            }
        }
        if self.calibration.bins == 0 || !(self.calibration.e_max > 0.0) {
            return Err(Error::config("calibration needs bins > 0 and e_max > 0"));
        }
        Ok(())
    }

    pub fn responses(&self) -> Vec<ResponseParams> {
        self.detectors.iter().map(|d| d.response.clone()).collect()
    }

    pub fn channels(&self) -> Vec<DetectorChannel> {
        let labels = self.scene.labels();
        self.detectors
            .iter()
            .map(|d| DetectorChannel {
                index: labels.index_of(&d.response.label).expect("validated") as u8,
                response: d.response.clone(),
                efficiency: d.efficiency,
            })
            .collect()
    }

    /// Energy windows E_s ∈ [V_lo/a, V_hi/a] keyed by label.
    pub fn acceptance_windows(&self) -> BTreeMap<String, Window> {
        self.detectors.iter().map(|d| (d.response.label.clone(), d.response.window_mev())).collect()
    }

    pub fn efficiencies(&self) -> Efficiencies {
        self.detectors.iter().map(|d| (d.response.label.clone(), d.efficiency)).collect()
    }

    /// Response of scene volume `index`, if it is a detector.
    pub fn response_by_index(&self) -> BTreeMap<u8, ResponseParams> {
        self.channels().into_iter().map(|c| (c.index, c.response)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial = RunConfig::from_toml("seed = 9\n[experiment]\nentries = 2\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.experiment.entries, 2);
        assert_eq!(partial.detectors.len(), 6);
        assert_ne!(partial.hash(), c.hash());
    }

    #[test]
    fn rejects_inconsistent_labels() {
        let mut c = RunConfig::default();
        c.detectors[0].response.label = "Z".into();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.chip_label = "A".into();
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[coincidence]\ncoincidence_window = 4").is_err());
        assert_eq!(RunConfig::from_toml("[coincidence]\ncoincidence_window = 5").unwrap().coincidence.window.half_cycles(), 2);
    }
}
