//! File-based stages: sample → transport → xsection → simulate → detect →
//! coincide → calibrate → report.

use super::analysis::{self, CatalogEvent};
use super::config::RunConfig;
use super::experiment::{self, simulate_streams, truth_spec};
use super::injection;
use super::io::{self, Provenance};
use crate::burstdetect;
use crate::coinstat::{self, Measured};
use crate::combination::Combination;
use crate::detcal::{self, FitProblem, FitSpectrum, SpectrumHistogram};
use crate::error::{Error, Result};
use crate::fluxmc::{self, EnergySampler};
use crate::geometry::{self, CrossSectionSet, DepositionTable};
use crate::rng;
use crate::streamsim::{EntryTruth, PulseRecord, SourceTag};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Sample,
    Transport,
    Xsection,
    Simulate,
    Detect,
    Coincide,
    Calibrate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Sample,
        Stage::Transport,
        Stage::Xsection,
        Stage::Simulate,
        Stage::Detect,
        Stage::Coincide,
        Stage::Calibrate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Transport => "transport",
            Stage::Xsection => "xsection",
            Stage::Simulate => "simulate",
            Stage::Detect => "detect",
            Stage::Coincide => "coincide",
            Stage::Calibrate => "calibrate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        let s = s.trim().to_ascii_lowercase();
        let s = if s == "sample-muons" { "sample".to_string() } else { s };
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

/// Comma-separated stage list, or `all`.
pub fn parse_stages(s: &str) -> Result<BTreeSet<Stage>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Stage::ALL.into_iter().collect());
    }
    s.split(',').filter(|x| !x.trim().is_empty()).map(Stage::parse).collect()
}

/// Artifact paths under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub const MUONS: &str = "muons.bin";
pub const MUONS_CHIP: &str = "muons_chip.bin";
pub const DEPOSITIONS: &str = "depositions.bin";
pub const DEPOSITIONS_CHIP: &str = "depositions_chip.bin";
pub const XSECTIONS: &str = "xsections.txt";
pub const XSECTIONS_CHIP: &str = "xsections_chip.txt";
pub const TRUTH: &str = "truth.csv";
pub const SHOTS: &str = "shots.bin";
pub const PULSES: &str = "pulses.bin";
pub const REFS: &str = "refs.bin";
pub const EVENTS: &str = "events.csv";
pub const INJECTION: &str = "injection.csv";
pub const SYNC: &str = "sync.txt";
pub const COINCIDENCES: &str = "coincidences.csv";
pub const LEDGER: &str = "ledger.txt";
pub const FLUX: &str = "flux.txt";
pub const INTERARRIVAL: &str = "interarrival.csv";
pub const SNR: &str = "snr.csv";
pub const CALIBRATION: &str = "calibration.txt";
pub const PARTICIPATION: &str = "participation.csv";
pub const REPORT: &str = "report.txt";

type PulsesAndRefs = (Vec<PulseRecord>, BTreeMap<u32, Vec<i64>>);

/// Runs stages against one configuration and output directory.
pub struct Runner<'a> {
    pub cfg: &'a RunConfig,
    pub out: Artifacts,
    pub prov: Provenance,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Runner { cfg, out: Artifacts::new(&cfg.output_dir), prov: Provenance { seed: cfg.seed, config_hash: cfg.hash() } }
    }

    fn check(&self, p: &Provenance, what: &str) {
        if *p != self.prov {
            log::warn!("{what} was produced by a different configuration or seed");
        }
    }

    fn write_bin(&self, name: &str, f: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<PathBuf> {
        let path = self.out.path(name);
        io::write_atomic(&path, f)?;
        Ok(path)
    }

    fn write_text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.out.path(name);
        io::write_text(&path, &self.prov, body)?;
        Ok(path)
    }

    fn read_text(&self, name: &str, producer: Stage) -> Result<String> {
        let (p, body) = io::read_text(&self.out.path(name), producer.name())?;
        self.check(&p, name);
        Ok(body)
    }

    fn open(&self, name: &str, producer: Stage) -> Result<BufReader<std::fs::File>> {
        io::open_input(&self.out.path(name), producer.name())
    }

    pub fn run(&self, stages: &BTreeSet<Stage>) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for &s in stages {
            log::info!("stage {}", s.name());
            written.extend(self.run_stage(s)?);
        }
        Ok(written)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Sample => self.sample(),
            Stage::Transport => self.transport(),
            Stage::Xsection => self.xsection(),
            Stage::Simulate => self.simulate(),
            Stage::Detect => self.detect(),
            Stage::Coincide => self.coincide(),
            Stage::Calibrate => self.calibrate(),
            Stage::Report => self.report(),
        }
    }

    fn sample(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let mut out = Vec::new();
        for (name, sampler) in [(MUONS, &c.sampling.detector), (MUONS_CHIP, &c.sampling.chip)] {
            sampler.validate()?;
            let muons = fluxmc::sample_batch(sampler, &c.flux);
            out.push(self.write_bin(name, |w| io::write_muons(w, &self.prov, &muons))?);
        }
        Ok(out)
    }

    fn transport(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let chip = c.scene.labels().index_of(&c.chip_label).expect("validated");
        let all = Combination::from_indices(0..c.scene.prisms.len());
        let mut out = Vec::new();
        for (src, dst, sampler, focus) in
            [(MUONS, DEPOSITIONS, &c.sampling.detector, all), (MUONS_CHIP, DEPOSITIONS_CHIP, &c.sampling.chip, Combination::single(chip))]
        {
            let (p, muons) = io::read_muons(&mut self.open(src, Stage::Sample)?)?;
            self.check(&p, src);
            let table = geometry::run_transport(sampler, &muons, &c.scene, focus)?;
            out.push(self.write_bin(dst, |w| {
                self.prov.write_to(w)?;
                table.write_to(w)
            })?);
        }
        Ok(out)
    }

    fn read_table(&self, name: &str) -> Result<DepositionTable> {
        let mut r = self.open(name, Stage::Transport)?;
        let p = Provenance::read_from(&mut r)?;
        self.check(&p, name);
        DepositionTable::read_from(&mut r)
    }

    fn xsection(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (src, dst, tag) in [(DEPOSITIONS, XSECTIONS, 1), (DEPOSITIONS_CHIP, XSECTIONS_CHIP, 2)] {
            let table = self.read_table(src)?;
            let xs = experiment::windowed_cross_sections(self.cfg, &table, rng::child_seed(self.cfg.seed, tag))?;
            let mut body = Vec::new();
            xs.write_text(&mut body)?;
            out.push(self.write_text(dst, &String::from_utf8(body).expect("ascii"))?);
        }
        Ok(out)
    }

    fn read_xs(&self, name: &str) -> Result<CrossSectionSet> {
        let body = self.read_text(name, Stage::Xsection)?;
        CrossSectionSet::read_text(body.as_bytes())
    }

    fn simulate(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let chip_xs = self.read_xs(XSECTIONS_CHIP)?;
        let spec = truth_spec(c, &chip_xs);
        spec.validate()?;
        let energies = EnergySampler::new(&c.flux);
        let mut truth_csv = String::from("entry,onset_time_s,onset_cycle,source,linked_muon,dgamma_per_qubit\n");
        let mut shots_buf: Vec<u8> = Vec::new();
        self.prov.write_to(&mut shots_buf)?;
        let mut pulses: Vec<PulseRecord> = Vec::new();
        let mut refs = BTreeMap::new();
        // Bounded parallel batches keep memory flat while preserving entry order.
        let batch = rayon::current_num_threads().max(1) as u32 * 2;
        let mut start = 0;
        while start < c.experiment.entries {
            let end = (start + batch).min(c.experiment.entries);
            let streams = (start..end).into_par_iter().map(|e| simulate_streams(c, &spec, &energies, e)).collect::<Result<Vec<_>>>()?;
            for s in streams {
                write_truth_rows(&mut truth_csv, &s.truth);
                s.shots.write_to(&mut shots_buf)?;
                pulses.extend(s.pulses);
                refs.insert(s.truth.entry, s.refs);
            }
            start = end;
        }
        let mut out = vec![self.write_text(TRUTH, &truth_csv)?];
        out.push(self.write_bin(SHOTS, |w| Ok(w.write_all(&shots_buf)?))?);
        out.push(self.write_bin(PULSES, |w| io::write_pulses(w, &self.prov, &pulses))?);
        out.push(self.write_bin(REFS, |w| io::write_refs(w, &self.prov, &refs))?);
        Ok(out)
    }

    fn detect(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let template = c.detection.template(c.timebase.cycle_duration)?;
        let reader = io::ShotReader::new(self.open(SHOTS, Stage::Simulate)?)?;
        self.check(&reader.provenance, SHOTS);
        let mut events: Vec<CatalogEvent> = Vec::new();
        for shots in reader {
            events.extend(analysis::detect_entry(&shots?, &template, c));
        }
        Ok(vec![self.write_text(EVENTS, &analysis::events_csv(&events))?])
    }

    fn read_pulses_refs(&self) -> Result<PulsesAndRefs> {
        let (p, pulses) = io::read_pulses(&mut self.open(PULSES, Stage::Simulate)?)?;
        self.check(&p, PULSES);
        let (p, refs) = io::read_refs(&mut self.open(REFS, Stage::Simulate)?)?;
        self.check(&p, REFS);
        Ok((pulses, refs))
    }

    fn coincide(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let events = analysis::parse_events_csv(&self.read_text(EVENTS, Stage::Detect)?)?;
        let (pulses, refs) = self.read_pulses_refs()?;
        let det_xs = self.read_xs(XSECTIONS)?;
        let chip_xs = self.read_xs(XSECTIONS_CHIP)?;
        let (tagged, drops, map) = experiment::tag_pulses(c, &pulses, &refs);
        let mut out = Vec::new();
        let window_eff = match c.coincidence.window_efficiency {
            Some(w) => Measured::exact(w),
            None => {
                let inj = injection::run_injection(c, &c.qubits, &c.cosmic_amplitude, c.injection.bursts, rng::child_seed(c.seed, 3))?;
                out.push(self.write_text(INJECTION, &inj.to_csv())?);
                inj.window_efficiency
            }
        };
        let mut sync_txt = String::new();
        let _ = writeln!(sync_txt, "synchronized_entries = {}", map.entries.len());
        let _ = writeln!(sync_txt, "unsynchronized_entries = {:?}", map.unsynchronized);
        let _ = writeln!(sync_txt, "pulses_in = {}", pulses.len());
        let _ = writeln!(sync_txt, "pulses_accepted = {}", tagged.len());
        let _ = writeln!(sync_txt, "dropped_outside_entry = {}", drops.outside_entry);
        let _ = writeln!(sync_txt, "dropped_out_of_window = {}", drops.out_of_window);
        let _ = writeln!(sync_txt, "dropped_unknown_detector = {}", drops.unknown_detector);
        out.push(self.write_text(SYNC, &sync_txt)?);

        let a = analysis::analyze(c, &events, &tagged, &map.entry_ids(), &det_xs, &chip_xs, window_eff)?;
        let kept: Vec<&CatalogEvent> = events.iter().filter(|e| a.entries.binary_search(&e.entry).is_ok()).collect();
        let mut rows = String::from("entry,onset_cycle,delay_cycles,coincident\n");
        for ((e, d), f) in kept.iter().zip(&a.delays).zip(&a.coincident) {
            let d = d.map_or("inf".to_string(), |d| d.to_string());
            let _ = writeln!(rows, "{},{},{},{}", e.entry, e.onset_cycle, d, *f as u8);
        }
        out.push(self.write_text(COINCIDENCES, &rows)?);
        let mut ledger = a.ledger.to_report();
        let _ = writeln!(ledger, "window_efficiency = {:.5} +- {:.5}", a.window_efficiency.value, a.window_efficiency.err_hi);
        let _ = writeln!(ledger, "total_time = {:.6} s", c.timebase.entry_start(c.experiment.entries.max(1) - 1) + c.timebase.entry_span());
        out.push(self.write_text(LEDGER, &ledger)?);
        out.push(self.write_text(FLUX, &analysis::flux_report(&a))?);
        let hist = coinstat::inter_arrival_rows(
            &a.delays,
            c.coincidence.histogram_bin_cycles,
            c.coincidence.histogram_half_bins,
            &a.ledger,
            c.timebase.cycle_duration,
        );
        out.push(self.write_text(INTERARRIVAL, &coinstat::inter_arrival_csv(&hist))?);
        out.push(self.write_text(SNR, &coinstat::snr_csv(&a.snr))?);
        Ok(out)
    }

    fn calibrate(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let (pulses, refs) = self.read_pulses_refs()?;
        let table = self.read_table(DEPOSITIONS)?;
        let live = c.timebase.live_time(refs.len() as u32);
        let problem = calibration_problem(c, &table, &pulses, live)?;
        let res = detcal::fit_response(&problem)?;
        if !res.cost.is_finite() {
            return Err(Error::Fit("non-finite deviance at the optimum".into()));
        }
        let mut body = detcal::format_fit_table(&res);
        let _ = writeln!(body, "# spectra {} live_time {:.3} s", problem.spectra.len(), live);
        Ok(vec![self.write_text(CALIBRATION, &body)?])
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let ledger = self.read_text(LEDGER, Stage::Coincide)?;
        let flux = self.read_text(FLUX, Stage::Coincide)?;
        let truth = self.read_text(TRUTH, Stage::Simulate)?;
        let events = analysis::parse_events_csv(&self.read_text(EVENTS, Stage::Detect)?)?;
        let coinc = self.read_text(COINCIDENCES, Stage::Coincide)?;
        let calibration = match io::read_text(&self.out.path(CALIBRATION), Stage::Calibrate.name()) {
            Ok((_, b)) => Some(b),
            Err(Error::Dependency { .. }) => None,
            Err(e) => return Err(e),
        };
        let kv = parse_kv(&ledger);
        let coverage = kv.get("C_QS").copied().ok_or_else(|| Error::Format("ledger lacks C_QS".into()))?;

        // Participation stacks from events that have a dynamics window.
        let flags: BTreeMap<(u32, u32), bool> = io::csv_rows(&coinc)
            .map(|r| Ok(((io::parse_field(r[0], "entry")?, io::parse_field(r[1], "cycle")?), r[3] == "1")))
            .collect::<Result<_>>()?;
        let (mults, tags): (Vec<usize>, Vec<bool>) =
            events.iter().filter_map(|e| Some((e.multiplicity()?, *flags.get(&(e.entry, e.onset_cycle))?))).unzip();
        let hist = burstdetect::participation_histogram(&mults, &tags, coverage, c.qubits.len())?;
        let mut pcsv = String::from("multiplicity,total,tagged,cosmic,other\n");
        for m in 0..hist.total.len() {
            let _ = writeln!(pcsv, "{m},{},{},{:.3},{:.3}", hist.total[m], hist.tagged[m], hist.cosmic[m], hist.other[m]);
        }

        let (mut n_cos, mut n_oth) = (0u64, 0u64);
        for r in io::csv_rows(&truth) {
            match r.get(3).copied() {
                Some("cosmic") => n_cos += 1,
                Some(_) => n_oth += 1,
                None => {}
            }
        }
        let live = c.timebase.live_time(c.experiment.entries);
        let total = c.timebase.entry_start(c.experiment.entries.max(1) - 1) + c.timebase.entry_span();
        let mut rep = String::new();
        let _ = writeln!(rep, "[ledger]\n{ledger}");
        let _ = writeln!(rep, "[flux]\n{flux}");
        let _ = writeln!(rep, "[timing]");
        let _ = writeln!(rep, "live_time = {live:.3} s");
        let _ = writeln!(rep, "total_time = {total:.3} s");
        let _ = writeln!(rep, "# rates use live time; inter-entry gaps are excluded");
        let _ = writeln!(rep, "\n[truth]");
        let _ = writeln!(rep, "injected_flux = {:.6e}", c.experiment.flux);
        let _ = writeln!(rep, "injected_r_other = {:.6e}", c.experiment.r_other);
        let _ = writeln!(rep, "true_cosmic_bursts = {n_cos}");
        let _ = writeln!(rep, "true_other_bursts = {n_oth}");
        let _ = writeln!(rep, "true_cosmic_fraction = {:.5}", n_cos as f64 / (n_cos + n_oth).max(1) as f64);
        let _ = writeln!(rep, "events_detected = {}", events.len());
        if let Some(fr) = kv.get("cosmic_fraction") {
            let _ = writeln!(rep, "recovered_cosmic_fraction = {fr:.5}");
        }
        if let Some(cal) = calibration {
            let _ = writeln!(rep, "\n[calibration]\n{cal}");
        }
        Ok(vec![self.write_text(PARTICIPATION, &pcsv)?, self.write_text(REPORT, &rep)?])
    }
}

fn write_truth_rows(s: &mut String, t: &EntryTruth) {
    for b in &t.bursts {
        let dg: Vec<String> = b.dgamma.iter().map(|g| format!("{g:.1}")).collect();
        let link = b.linked_muon.map_or("-".to_string(), |m| m.to_string());
        let _ = writeln!(s, "{},{:.9},{:.4},{},{},{}", b.entry, b.onset_time, b.onset_cycle, b.source.as_str(), link, dg.join(";"));
    }
    let _ = SourceTag::Cosmic;
}

/// First numeric value of each `key = value` line.
pub fn parse_kv(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.split_once('=')?;
            let v = v.split_whitespace().next()?.parse().ok()?;
            Some((k.trim().to_string(), v))
        })
        .collect()
}

/// Singles and pair spectra against deposit distributions from the detector table.
pub fn calibration_problem(cfg: &RunConfig, table: &DepositionTable, pulses: &[PulseRecord], live: f64) -> Result<FitProblem> {
    let labels = cfg.scene.labels();
    let responses = cfg.responses();
    let scene_idx: Vec<usize> = responses.iter().map(|r| labels.index_of(&r.label).expect("validated")).collect();
    let fit_pos: BTreeMap<u8, usize> = scene_idx.iter().enumerate().map(|(k, &i)| (i as u8, k)).collect();
    let any = geometry::cross_sections(table, &BTreeMap::new(), cfg.scene.deposition.secondary_boost)?;

    // Cluster pulses within the detector window.
    let mut sorted: Vec<&PulseRecord> = pulses.iter().filter(|p| fit_pos.contains_key(&p.detector)).collect();
    sorted.sort_by_key(|p| (p.timestamp_ns, p.detector));
    let mut clusters: Vec<BTreeMap<usize, f64>> = Vec::new();
    let mut last = i64::MIN;
    for p in sorted {
        if clusters.is_empty() || p.timestamp_ns - last > cfg.coincidence.window.detector_window_ns {
            clusters.push(BTreeMap::new());
        }
        last = p.timestamp_ns;
        clusters.last_mut().expect("pushed").entry(fit_pos[&p.detector]).or_insert(p.amplitude);
    }

    let mut combos: Vec<Combination> = (0..responses.len()).map(Combination::single).collect();
    for pair in &cfg.calibration.pairs {
        let c = labels.parse(pair)?;
        combos.push(Combination::from_indices(c.indices().map(|i| fit_pos[&(i as u8)])));
    }
    let scene_idx = &scene_idx;
    let scene_combo = move |c: Combination| Combination::from_indices(c.indices().map(|k| scene_idx[k]));
    let spectra: Vec<FitSpectrum> = combos
        .par_iter()
        .flat_map_iter(|&combo| {
            let clusters = &clusters;
            let responses = &responses;
            let any = &any;
            combo.indices().filter_map(move |k| {
                let edges = detcal::window_edges(&responses[k], cfg.calibration.bins);
                let amps = clusters.iter().filter(|cl| combo.indices().all(|m| cl.contains_key(&m))).map(|cl| cl[&k]);
                let observed = SpectrumHistogram::from_amplitudes(combo, k, edges, amps);
                let pdf = detcal::deposit_pdf_for(table, scene_combo(combo), scene_idx[k], cfg.calibration.e_max)?;
                let sigma = any.inclusive(scene_combo(combo));
                (sigma > 0.0).then_some(FitSpectrum { observed, pdf, sigma })
            })
        })
        .collect();
    if spectra.is_empty() {
        return Err(Error::Fit("no detector spectra with nonzero cross-section".into()));
    }
    Ok(FitProblem {
        init: responses,
        init_efficiency: cfg.detectors.iter().map(|d| d.efficiency).collect(),
        init_flux: cfg.experiment.flux,
        duration: live,
        spectra,
        max_outer: cfg.calibration.max_outer,
    })
}

/// Run `stages` for `cfg`, returning the files written.
pub fn run_pipeline(cfg: &RunConfig, stages: &BTreeSet<Stage>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    Runner::new(cfg).run(stages)
}

/// Read a binary artifact's provenance block without parsing the payload.
pub fn artifact_provenance(path: &Path) -> Result<Provenance> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)?;
    let mut r = std::io::Cursor::new(head.to_vec()).chain(f);
    if &head[..6] == b"CQMUON" {
        let mut skip = [0u8; 16];
        r.read_exact(&mut skip)?;
    }
    Provenance::read_from(&mut r)
}
