//! Straight-line transport through axis-aligned prisms and cross-section estimation.

use crate::combination::{Combination, LabelSet};
use crate::error::{Error, Result};
use crate::fluxmc::{self, FluxModel, MuonSample, SamplerConfig};
use crate::rng::{self, Domain};
use crate::vec3::Vec3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// Axis-aligned box volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prism {
    pub label: String,
    pub center: Vec3,
    pub half_extents: Vec3,
    /// Material stopping power override, MeV/cm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_dx: Option<f64>,
}

impl Prism {
    /// Build from full side lengths.
    pub fn new(label: &str, center: Vec3, dims: Vec3) -> Self {
        Prism { label: label.to_string(), center, half_extents: dims * 0.5, de_dx: None }
    }

    pub fn with_de_dx(mut self, de_dx: f64) -> Self {
        self.de_dx = Some(de_dx);
        self
    }

    /// Distance from `p` to the farthest corner.
    pub fn max_distance_from(&self, p: Vec3) -> f64 {
        ((self.center - p).abs() + self.half_extents).norm()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let d = (p - self.center).abs();
        d.x <= self.half_extents.x && d.y <= self.half_extents.y && d.z <= self.half_extents.z
    }
}

/// Chord length of the ray `origin + t·direction`, t ≥ 0, inside `prism`.
pub fn ray_path_length(origin: Vec3, direction: Vec3, prism: &Prism) -> f64 {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis] - prism.center[axis];
        let d = direction[axis];
        let h = prism.half_extents[axis];
        if d == 0.0 {
            if o.abs() > h {
                return 0.0;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut a, mut b) = ((-h - o) * inv, (h - o) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 >= t1 {
            return 0.0;
        }
    }
    (t1 - t0).max(0.0)
}

/// Energy-loss parameters replacing full shower simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepositionModel {
    /// MeV/cm, used for prisms without their own override.
    pub de_dx: f64,
    pub fractional_smear: f64,
    pub secondary_boost: f64,
}

impl Default for DepositionModel {
    fn default() -> Self {
        DepositionModel { de_dx: 2.0, fractional_smear: 0.0, secondary_boost: 1.0 }
    }
}

impl DepositionModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.de_dx > 0.0) {
            return Err(Error::config("de_dx must be positive"));
        }
        if !(0.0..1.0).contains(&self.fractional_smear) {
            return Err(Error::config("fractional_smear must lie in [0, 1)"));
        }
        if !(self.secondary_boost >= 1.0) {
            return Err(Error::config("secondary_boost must be >= 1"));
        }
        Ok(())
    }
}

/// Silicon stopping power used for the chip volume.
pub const SILICON_DE_DX: f64 = 1.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub prisms: Vec<Prism>,
    #[serde(default)]
    pub deposition: DepositionModel,
}

impl Scene {
    pub fn new(prisms: Vec<Prism>, deposition: DepositionModel) -> Result<Self> {
        let s = Scene { prisms, deposition };
        s.validate()?;
        Ok(s)
    }

    /// Six scintillators A–F and the chip Q, positions relative to the chip.
    pub fn reference() -> Self {
        let v = Vec3::new;
        Scene {
            prisms: vec![
                Prism::new("Q", v(0.0, 0.0, 0.0), v(0.035, 0.5, 0.5)).with_de_dx(SILICON_DE_DX),
                Prism::new("A", v(-13.07, 6.59, -43.77), v(51.0, 7.2, 2.0)),
                Prism::new("B", v(-13.07, -0.61, -44.06), v(51.0, 7.2, 2.0)),
                Prism::new("C", v(-8.57, -0.61, -48.88), v(60.0, 7.0, 7.0)),
                Prism::new("D", v(-8.57, -0.61, -56.51), v(60.0, 7.0, 7.0)),
                Prism::new("E", v(-5.67, 5.75, -49.51), v(100.0, 5.72, 6.0)),
                Prism::new("F", v(-5.67, 5.75, -57.01), v(100.0, 5.72, 6.0)),
            ],
            deposition: DepositionModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.deposition.validate()?;
        LabelSet::new(self.prisms.iter().map(|p| p.label.clone()))?;
        for p in &self.prisms {
            let h = p.half_extents;
            if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
                return Err(Error::config(format!("prism `{}` needs positive extents", p.label)));
            }
            if let Some(d) = p.de_dx {
                if !(d > 0.0) {
                    return Err(Error::config(format!("prism `{}` needs positive de_dx", p.label)));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet::new(self.prisms.iter().map(|p| p.label.clone())).expect("validated scene")
    }

    pub fn de_dx(&self, i: usize) -> f64 {
        self.prisms[i].de_dx.unwrap_or(self.deposition.de_dx)
    }

    /// Largest corner distance from `p` among prisms in `focus`.
    pub fn max_distance_from(&self, p: Vec3, focus: Combination) -> f64 {
        self.prisms.iter().enumerate().filter(|(i, _)| focus.contains(*i)).map(|(_, pr)| pr.max_distance_from(p)).fold(0.0, f64::max)
    }
}

/// Per-volume deposits of one muon, as (volume index, MeV) pairs.
pub type Deposits = Vec<(u8, f64)>;

/// Energy deposited in every volume the muon crosses.
pub fn deposit<R: Rng + ?Sized>(muon: &MuonSample, scene: &Scene, rng: &mut R) -> Deposits {
    let smear = scene.deposition.fractional_smear;
    let mut out = Vec::new();
    for (i, p) in scene.prisms.iter().enumerate() {
        let l = ray_path_length(muon.origin, muon.direction, p);
        if l > 0.0 {
            let mut e = scene.de_dx(i) * l;
            if smear > 0.0 {
                let g: f64 = StandardNormal.sample(rng);
                e *= 1.0 + smear * g;
            }
            if e > 0.0 {
                out.push((i as u8, e));
            }
        }
    }
    out
}

/// Deposits of every muon that touched a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DepositionTable {
    pub labels: LabelSet,
    pub muon_index: Vec<u64>,
    /// Row-major, `labels.len()` columns; 0 marks no deposit.
    pub energies: Vec<f64>,
    pub total_thrown: u64,
    pub tangent_area: f64,
}

impl DepositionTable {
    pub fn empty(labels: LabelSet, total_thrown: u64, tangent_area: f64) -> Self {
        DepositionTable { labels, muon_index: Vec::new(), energies: Vec::new(), total_thrown, tangent_area }
    }

    pub fn len(&self) -> usize {
        self.muon_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.muon_index.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.labels.len();
        &self.energies[r * n..(r + 1) * n]
    }

    pub fn push(&mut self, index: u64, deposits: &[(u8, f64)]) {
        let n = self.labels.len();
        let base = self.energies.len();
        self.energies.resize(base + n, 0.0);
        for &(i, e) in deposits {
            self.energies[base + i as usize] += e;
        }
        self.muon_index.push(index);
    }

    fn append(&mut self, other: DepositionTable) {
        self.muon_index.extend(other.muon_index);
        self.energies.extend(other.energies);
    }

    /// Columnar binary layout: magic, version, counts, then (index u64, label u16, MeV f64) triples.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(DEPO_MAGIC)?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(self.labels.len() as u16).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&self.total_thrown.to_le_bytes())?;
        w.write_all(&self.tangent_area.to_le_bytes())?;
        for l in self.labels.labels() {
            let b = l.as_bytes();
            w.write_all(&(b.len() as u16).to_le_bytes())?;
            w.write_all(b)?;
        }
        let n = self.labels.len();
        let triples: u64 = self.energies.iter().filter(|&&e| e > 0.0).count() as u64;
        w.write_all(&triples.to_le_bytes())?;
        for r in 0..self.len() {
            for (k, &e) in self.row(r).iter().enumerate().take(n) {
                if e > 0.0 {
                    w.write_all(&self.muon_index[r].to_le_bytes())?;
                    w.write_all(&(k as u16).to_le_bytes())?;
                    w.write_all(&e.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DEPO_MAGIC {
            return Err(Error::Format("not a deposition table".into()));
        }
        let version = read_u16(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported deposition table version {version}")));
        }
        let n = read_u16(r)? as usize;
        let _ = read_u32(r)?;
        let total_thrown = read_u64(r)?;
        let tangent_area = f64::from_bits(read_u64(r)?);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u16(r)? as usize;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b)?;
            labels.push(String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut t = DepositionTable::empty(LabelSet::new(labels)?, total_thrown, tangent_area);
        let triples = read_u64(r)?;
        let mut last: Option<u64> = None;
        for _ in 0..triples {
            let idx = read_u64(r)?;
            let k = read_u16(r)? as usize;
            let e = f64::from_bits(read_u64(r)?);
            if k >= n {
                return Err(Error::Format("label index out of range".into()));
            }
            if last != Some(idx) {
                t.push(idx, &[]);
                last = Some(idx);
            }
            let base = (t.len() - 1) * n;
            t.energies[base + k] = e;
        }
        Ok(t)
    }
}

const DEPO_MAGIC: &[u8; 8] = b"CQDEPO\0\x01";

pub(crate) fn read_u16<R: std::io::Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: std::io::Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: std::io::Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Transport a pre-sampled batch. `focus` selects volumes the side-length rule applies to.
pub fn run_transport(cfg: &SamplerConfig, samples: &[MuonSample], scene: &Scene, focus: Combination) -> Result<DepositionTable> {
    scene.validate()?;
    cfg.check_side_rule(scene.max_distance_from(cfg.center, focus))?;
    let labels = scene.labels();
    let parts: Vec<DepositionTable> = samples
        .par_chunks(fluxmc::BLOCK as usize)
        .enumerate()
        .map(|(b, chunk)| {
            let mut rng = rng::stream(cfg.seed, Domain::Transport, b as u64);
            let mut t = DepositionTable::empty(labels.clone(), 0, 0.0);
            for (i, m) in chunk.iter().enumerate() {
                let d = deposit(m, scene, &mut rng);
                if !d.is_empty() {
                    t.push(b as u64 * fluxmc::BLOCK + i as u64, &d);
                }
            }
            t
        })
        .collect();
    let mut out = DepositionTable::empty(labels, samples.len() as u64, cfg.tangent_area());
    for p in parts {
        out.append(p);
    }
    Ok(out)
}

/// Sample and transport in one pass, never holding the full muon batch.
pub fn sample_and_transport(cfg: &SamplerConfig, model: &FluxModel, scene: &Scene, focus: Combination) -> Result<DepositionTable> {
    cfg.validate()?;
    model.validate()?;
    scene.validate()?;
    cfg.check_side_rule(scene.max_distance_from(cfg.center, focus))?;
    let labels = scene.labels();
    let parts = fluxmc::for_each_block(cfg, model, |b, it| {
        let mut rng = rng::stream(cfg.seed, Domain::Transport, b);
        let mut t = DepositionTable::empty(labels.clone(), 0, 0.0);
        for (idx, m) in it {
            let d = deposit(&m, scene, &mut rng);
            if !d.is_empty() {
                t.push(idx, &d);
            }
        }
        t
    });
    let mut out = DepositionTable::empty(labels, cfg.sample_count, cfg.tangent_area());
    for p in parts {
        out.append(p);
    }
    Ok(out)
}

/// Energy acceptance window in MeV, inclusive of both ends.
pub type Window = (f64, f64);

/// Inclusive and exclusive interaction cross-sections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionSet {
    pub labels: LabelSet,
    pub tangent_area: f64,
    pub sample_count: u64,
    pub secondary_boost: f64,
    /// Exclusive counts including the empty combination; zero entries omitted.
    pub exclusive_counts: BTreeMap<Combination, u64>,
    /// Inclusive counts tallied directly from rows; zero entries omitted.
    pub inclusive_counts: BTreeMap<Combination, u64>,
}

/// Cross-sections from a deposition table with per-label energy windows.
/// Labels missing from `acceptance` accept any deposit.
pub fn cross_sections(table: &DepositionTable, acceptance: &BTreeMap<String, Window>, secondary_boost: f64) -> Result<CrossSectionSet> {
    let n = table.labels.len();
    let mut windows = vec![(0.0, f64::INFINITY); n];
    for (label, &(lo, hi)) in acceptance {
        let i = table.labels.index_of(label).ok_or_else(|| Error::config(format!("acceptance window for unknown label `{label}`")))?;
        if !(lo < hi) || lo < 0.0 {
            return Err(Error::config(format!("acceptance window for `{label}` must satisfy 0 <= lo < hi")));
        }
        windows[i] = (lo, hi);
    }
    if !(secondary_boost >= 1.0) {
        return Err(Error::config("secondary_boost must be >= 1"));
    }
    let masks = (0..table.len()).map(|r| {
        let row = table.row(r);
        let mut m = Combination::EMPTY;
        for k in 0..n {
            let e = row[k];
            if e > 0.0 && e >= windows[k].0 && e <= windows[k].1 {
                m = m.with(k);
            }
        }
        m
    });
    Ok(CrossSectionSet::from_masks(table.labels.clone(), masks, table.total_thrown, table.tangent_area, secondary_boost))
}

impl CrossSectionSet {
    /// Build from one in-window mask per recorded row; rows beyond those are empty.
    pub fn from_masks(
        labels: LabelSet,
        masks: impl Iterator<Item = Combination>,
        total_thrown: u64,
        tangent_area: f64,
        secondary_boost: f64,
    ) -> Self {
        let mut exclusive_counts: BTreeMap<Combination, u64> = BTreeMap::new();
        let mut inclusive_counts: BTreeMap<Combination, u64> = BTreeMap::new();
        let mut nonempty = 0u64;
        for m in masks {
            if m.is_empty() {
                continue;
            }
            nonempty += 1;
            *exclusive_counts.entry(m).or_default() += 1;
            for s in m.subsets().filter(|s| !s.is_empty()) {
                *inclusive_counts.entry(s).or_default() += 1;
            }
        }
        let empty = total_thrown.saturating_sub(nonempty);
        if empty > 0 {
            exclusive_counts.insert(Combination::EMPTY, empty);
        }
        CrossSectionSet { labels, tangent_area, sample_count: total_thrown, secondary_boost, exclusive_counts, inclusive_counts }
    }

    fn per_count(&self) -> f64 {
        if self.sample_count == 0 {
            0.0
        } else {
            self.tangent_area / self.sample_count as f64
        }
    }

    /// σ_α in cm².
    pub fn inclusive(&self, c: Combination) -> f64 {
        if c.is_empty() {
            return self.tangent_area;
        }
        self.inclusive_counts.get(&c).copied().unwrap_or(0) as f64 * self.per_count() * self.secondary_boost
    }

    /// σ*_α in cm²; the empty combination absorbs the remainder of the tangent area.
    pub fn exclusive(&self, c: Combination) -> f64 {
        if c.is_empty() {
            let boosted: f64 = self.exclusive_counts.iter().filter(|(k, _)| !k.is_empty()).map(|(_, &v)| v as f64).sum::<f64>()
                * self.per_count()
                * self.secondary_boost;
            return self.tangent_area - boosted;
        }
        self.exclusive_counts.get(&c).copied().unwrap_or(0) as f64 * self.per_count() * self.secondary_boost
    }

    /// Inclusive count rebuilt from exclusive counts by superset summation.
    pub fn inclusive_count_from_exclusive(&self, c: Combination) -> u64 {
        self.exclusive_counts.iter().filter(|(k, _)| c.is_subset_of(**k)).map(|(_, &v)| v).sum()
    }

    pub fn inclusive_by_label(&self, s: &str) -> Result<f64> {
        Ok(self.inclusive(self.labels.parse(s)?))
    }

    /// Nonempty exclusive combinations with nonzero cross-section.
    pub fn exclusive_nonempty(&self) -> impl Iterator<Item = (Combination, f64)> + '_ {
        self.exclusive_counts.keys().filter(|k| !k.is_empty()).map(|&k| (k, self.exclusive(k)))
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.labels.index_of(label).ok_or_else(|| Error::config(format!("unknown label `{label}`")))
    }

    /// Two-column text export: `COMBO σ` for inclusive, `COMBO* σ*` for exclusive.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# labels={}", self.labels.labels().join(","))?;
        writeln!(
            w,
            "# tangent_area={:e} sample_count={} secondary_boost={:e}",
            self.tangent_area, self.sample_count, self.secondary_boost
        )?;
        writeln!(w, "# combination sigma_cm2")?;
        for &c in self.inclusive_counts.keys() {
            writeln!(w, "{} {:e}", self.labels.format(c), self.inclusive(c))?;
        }
        for &c in self.exclusive_counts.keys() {
            writeln!(w, "{}* {:e}", self.labels.format(c), self.exclusive(c))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut labels = None;
        let (mut area, mut count, mut boost) = (None, None, None);
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(h) = line.strip_prefix('#') {
                for kv in h.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        let bad = |_| Error::Format(format!("bad header value `{kv}`"));
                        match k {
                            "labels" => labels = Some(LabelSet::new(v.split(','))?),
                            "tangent_area" => area = Some(v.parse::<f64>().map_err(bad)?),
                            "sample_count" => count = Some(v.parse::<u64>().map_err(|_| Error::Format(kv.into()))?),
                            "secondary_boost" => boost = Some(v.parse::<f64>().map_err(bad)?),
                            _ => {}
                        }
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(c), Some(v)) = (it.next(), it.next()) else {
                return Err(Error::Format(format!("bad cross-section line `{line}`")));
            };
            let v: f64 = v.parse().map_err(|_| Error::Format(format!("bad value in `{line}`")))?;
            rows.push((c.to_string(), v));
        }
        let labels = labels.ok_or_else(|| Error::Format("missing labels header".into()))?;
        let (area, count, boost) = match (area, count, boost) {
            (Some(a), Some(c), Some(b)) => (a, c, b),
            _ => return Err(Error::Format("missing tangent_area/sample_count/secondary_boost header".into())),
        };
        let per = area / count.max(1) as f64 * boost;
        let mut set = CrossSectionSet {
            labels,
            tangent_area: area,
            sample_count: count,
            secondary_boost: boost,
            exclusive_counts: BTreeMap::new(),
            inclusive_counts: BTreeMap::new(),
        };
        let mut nonempty = 0u64;
        for (c, v) in rows {
            if let Some(ex) = c.strip_suffix('*') {
                let comb = set.labels.parse(ex)?;
                if comb.is_empty() {
                    continue;
                }
                let n = (v / per).round() as u64;
                nonempty += n;
                set.exclusive_counts.insert(comb, n);
            } else {
                let comb = set.labels.parse(&c)?;
                set.inclusive_counts.insert(comb, (v / per).round() as u64);
            }
        }
        let empty = count.saturating_sub(nonempty);
        if empty > 0 {
            set.exclusive_counts.insert(Combination::EMPTY, empty);
        }
        Ok(set)
    }
}

/// Detection efficiency per label; labels not listed are treated as ε = 0
/// for coincidence partners (they cannot be observed).
pub type Efficiencies = BTreeMap<String, f64>;

fn efficiency_vector(xs: &CrossSectionSet, eff: &Efficiencies) -> Result<Vec<f64>> {
    let mut v = vec![0.0; xs.labels.len()];
    for (l, &e) in eff {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::domain(format!("efficiency of `{l}` outside [0, 1]")));
        }
        v[xs.index(l)?] = e;
    }
    Ok(v)
}

/// Probability that at least one member of `c` other than `skip` is detected.
fn any_detected(c: Combination, skip: usize, eff: &[f64]) -> f64 {
    1.0 - c.indices().filter(|&k| k != skip).map(|k| 1.0 - eff[k]).product::<f64>()
}

/// Fraction of `target` impacts also registered by at least one other volume.
pub fn coverage_of(target: &str, xs: &CrossSectionSet, efficiencies: &Efficiencies, window_eff: f64) -> Result<f64> {
    let t = xs.index(target)?;
    let eff = efficiency_vector(xs, efficiencies)?;
    if !(0.0..=1.0).contains(&window_eff) {
        return Err(Error::domain("window efficiency outside [0, 1]"));
    }
    let sigma_t = xs.inclusive(Combination::single(t));
    if sigma_t <= 0.0 {
        return Err(Error::Undefined(format!("cross-section of `{target}` is zero; coverage undefined")));
    }
    let sum: f64 = xs.exclusive_nonempty().filter(|(c, _)| c.contains(t) && c.len() >= 2).map(|(c, s)| any_detected(c, t, &eff) * s).sum();
    Ok(window_eff * sum / sigma_t)
}

/// Rate of `target` pulses accompanied by at least one other detected volume.
pub fn any_coincidence_rate(target: &str, xs: &CrossSectionSet, efficiencies: &Efficiencies, flux: f64) -> Result<f64> {
    let t = xs.index(target)?;
    let eff = efficiency_vector(xs, efficiencies)?;
    if flux < 0.0 {
        return Err(Error::domain("flux must be nonnegative"));
    }
    let sum: f64 = xs.exclusive_nonempty().filter(|(c, _)| c.contains(t)).map(|(c, s)| any_detected(c, t, &eff) * s).sum();
    Ok(eff[t] * sum * flux)
}

/// Coverage from the collective summary numbers: ε_δt·ε_S·σ_QS/σ_Q.
pub fn collective_coverage(window_eff: f64, eps_s: f64, sigma_qs: f64, sigma_q: f64) -> Result<f64> {
    if sigma_q <= 0.0 {
        return Err(Error::Undefined("target cross-section is zero; coverage undefined".into()));
    }
    Ok(window_eff * eps_s * sigma_qs / sigma_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(side: f64) -> Prism {
        Prism::new("X", Vec3::ZERO, Vec3::new(side, side, side))
    }

    #[test]
    fn chord_cases() {
        let p = cube(2.0);
        assert!((ray_path_length(Vec3::new(-5.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), &p) - 2.0).abs() < 1e-12);
        assert_eq!(ray_path_length(Vec3::new(-5.0, 3.0, 0.0), Vec3::new(1.0, 0.0, 0.0), &p), 0.0);
        // pointing away
        assert_eq!(ray_path_length(Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), &p), 0.0);
        // starting inside
        assert!((ray_path_length(Vec3::ZERO, Vec3::new(0.0, 0.0, -1.0), &p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matches_indicator_integration() {
        let p = Prism::new("U", Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.0, 1.0, 1.0));
        let d = Vec3::new(1.0, 1.0, 1.0).normalized();
        let o = d * -1.0;
        let exact = ray_path_length(o, d, &p);
        let n = 200_000;
        let tmax = 4.0;
        let dt = tmax / n as f64;
        let integ: f64 = (0..n).map(|i| if p.contains(o + d * ((i as f64 + 0.5) * dt)) { dt } else { 0.0 }).sum();
        assert!((exact - 3f64.sqrt()).abs() < 1e-12);
        assert!((integ - exact).abs() < 1e-4);
    }

    #[test]
    fn vertical_muon_through_a() {
        let scene = Scene::reference();
        let a = &scene.prisms[1];
        let m = MuonSample { origin: a.center + Vec3::new(0.0, 0.0, 100.0), direction: Vec3::new(0.0, 0.0, -1.0), energy: 10.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = deposit(&m, &scene, &mut rng);
        let ea = d.iter().find(|(i, _)| *i == 1).unwrap().1;
        assert!((ea - 4.0).abs() < 1e-12);
        let miss = MuonSample { origin: Vec3::new(500.0, 500.0, 100.0), direction: Vec3::new(0.0, 0.0, -1.0), energy: 10.0 };
        assert!(deposit(&miss, &scene, &mut rng).is_empty());
    }

    fn toy_xs() -> CrossSectionSet {
        // Two labels, counts by exclusive mask.
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let masks = std::iter::repeat_n(Combination(1), 30)
            .chain(std::iter::repeat_n(Combination(2), 20))
            .chain(std::iter::repeat_n(Combination(3), 10));
        CrossSectionSet::from_masks(labels, masks, 1000, 100.0, 1.0)
    }

    #[test]
    fn two_label_coverage_by_hand() {
        let xs = toy_xs();
        // σA = (30+10)·0.1 = 4, σ*AB = 1
        let mut eff = Efficiencies::new();
        eff.insert("A".into(), 0.9);
        eff.insert("B".into(), 0.8);
        let c = coverage_of("A", &xs, &eff, 0.94).unwrap();
        assert!((c - 0.94 * 0.8 * 1.0 / 4.0).abs() < 1e-12);
        let r = any_coincidence_rate("A", &xs, &eff, 0.5).unwrap();
        assert!((r - 0.9 * 0.8 * 1.0 * 0.5).abs() < 1e-12);
        assert_eq!(any_coincidence_rate("A", &xs, &eff, 0.0).unwrap(), 0.0);
        eff.insert("A".into(), 0.0);
        assert_eq!(any_coincidence_rate("A", &xs, &eff, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn coverage_zero_sigma_is_error() {
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let xs = CrossSectionSet::from_masks(labels, std::iter::empty(), 10, 1.0, 1.0);
        assert!(matches!(coverage_of("A", &xs, &Efficiencies::new(), 1.0), Err(Error::Undefined(_))));
        assert!(coverage_of("Z", &xs, &Efficiencies::new(), 1.0).is_err());
    }

    #[test]
    fn collective_reference_numbers() {
        let c = collective_coverage(0.94, 0.987, 0.0189, 0.131).unwrap();
        assert!((c - 0.133).abs() < 0.001);
    }

    #[test]
    fn text_round_trip() {
        let xs = toy_xs();
        let mut buf = Vec::new();
        xs.write_text(&mut buf).unwrap();
        let back = CrossSectionSet::read_text(&buf[..]).unwrap();
        assert_eq!(back, xs);
    }

    #[test]
    fn unknown_acceptance_label() {
        let labels = LabelSet::new(["A"]).unwrap();
        let t = DepositionTable::empty(labels, 10, 1.0);
        let mut acc = BTreeMap::new();
        acc.insert("Z".to_string(), (0.0, 1.0));
        assert!(matches!(cross_sections(&t, &acc, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn deposition_table_round_trip() {
        let scene = Scene::reference();
        let cfg = SamplerConfig { sample_count: 20_000, tangent_side: 250.0, ..Default::default() };
        let t = sample_and_transport(&cfg, &FluxModel::default(), &scene, scene.labels().all()).unwrap();
        assert!(!t.is_empty());
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = DepositionTable::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn side_rule_enforced() {
        let scene = Scene::reference();
        let cfg = SamplerConfig { sample_count: 10, tangent_side: 20.0, ..Default::default() };
        assert!(sample_and_transport(&cfg, &FluxModel::default(), &scene, scene.labels().all()).is_err());
    }

    proptest! {
        #[test]
        fn chord_never_exceeds_diagonal(ox in -10.0..10.0f64, oy in -10.0..10.0f64, oz in -10.0..10.0f64,
                                        th in 0.0..std::f64::consts::PI, ph in 0.0..std::f64::consts::TAU) {
            let p = Prism::new("P", Vec3::new(0.3, -0.2, 0.1), Vec3::new(2.0, 3.0, 1.0));
            let d = fluxmc::radial(th, ph);
            let l = ray_path_length(Vec3::new(ox, oy, oz), d, &p);
            prop_assert!(l >= 0.0);
            prop_assert!(l <= (4.0f64 + 9.0 + 1.0).sqrt() + 1e-9);
        }

        #[test]
        fn identities_hold(masks in proptest::collection::vec(0u16..64, 0..300), extra in 0u64..100) {
            let labels = LabelSet::new(["Q", "A", "B", "C", "D", "E"]).unwrap();
            let total = masks.len() as u64 + extra;
            let xs = CrossSectionSet::from_masks(labels, masks.iter().map(|&m| Combination(m)), total, 50.0, 1.0);
            let s: u64 = xs.exclusive_counts.values().sum();
            prop_assert_eq!(s, total);
            for c in (1u16..64).map(Combination) {
                prop_assert_eq!(xs.inclusive_counts.get(&c).copied().unwrap_or(0), xs.inclusive_count_from_exclusive(c));
            }
        }

        #[test]
        fn tightening_window_never_increases(lo in 0.0..5.0f64, w in 0.1..10.0f64, shrink in 0.0..1.0f64) {
            let scene = Scene::reference();
            let cfg = SamplerConfig { sample_count: 4096, tangent_side: 250.0, seed: 5, ..Default::default() };
            let t = sample_and_transport(&cfg, &FluxModel::default(), &scene, scene.labels().all()).unwrap();
            let mut a = BTreeMap::new();
            a.insert("C".to_string(), (lo, lo + w));
            let wide = cross_sections(&t, &a, 1.0).unwrap();
            a.insert("C".to_string(), (lo + shrink * w * 0.4, lo + w - shrink * w * 0.4));
            let narrow = cross_sections(&t, &a, 1.0).unwrap();
            for (c, &n) in &narrow.inclusive_counts {
                prop_assert!(n <= wide.inclusive_counts.get(c).copied().unwrap_or(0));
            }
        }
    }
}
