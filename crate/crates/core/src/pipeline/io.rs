//! Artifact formats and atomic file writes.
//!
//! Binary artifacts begin with a provenance block (magic, seed, config hash);
//! text artifacts begin with a `# config_sha256=… seed=…` line.

use crate::error::{Error, Result};
use crate::fluxmc::MuonSample;
use crate::geometry::{read_u16, read_u32, read_u64};
use crate::streamsim::{EntryShots, PulseRecord};
use crate::vec3::Vec3;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const PROV_MAGIC: &[u8; 8] = b"CQPROV\0\x01";
const MUON_MAGIC: &[u8; 8] = b"CQMUONS\x01";
const MUON_VERSION: u16 = 1;

/// Seed and configuration hash stamped on every artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

impl Provenance {
    pub fn text_line(&self) -> String {
        format!("# config_sha256={} seed={}\n", hex::encode(self.config_hash), self.seed)
    }

    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(PROV_MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut m = [0u8; 8];
        r.read_exact(&mut m)?;
        if &m != PROV_MAGIC {
            return Err(Error::Format("missing provenance block".into()));
        }
        let seed = read_u64(r)?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        Ok(Provenance { seed, config_hash })
    }

    /// Parse the provenance line of a text artifact.
    pub fn from_text_line(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# config_sha256=")?;
        let (h, s) = rest.trim().split_once(" seed=")?;
        let bytes = hex::decode(h).ok()?;
        Some(Provenance { seed: s.parse().ok()?, config_hash: bytes.try_into().ok()? })
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text(path: &Path, prov: &Provenance, body: &str) -> Result<()> {
    write_atomic(path, |w| {
        w.write_all(prov.text_line().as_bytes())?;
        w.write_all(body.as_bytes())?;
        Ok(())
    })
}

/// Open an upstream artifact, mapping absence to a dependency error naming its producer.
pub fn open_input(path: &Path, producer: &str) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Dependency { stage: producer.to_string(), path: path.display().to_string() })
        }
        Err(e) => Err(e.into()),
    }
}

/// Read a text artifact, returning its provenance and the remaining lines.
pub fn read_text(path: &Path, producer: &str) -> Result<(Provenance, String)> {
    let mut r = open_input(path, producer)?;
    let mut first = String::new();
    r.read_line(&mut first)?;
    let prov = Provenance::from_text_line(&first).ok_or_else(|| Error::Format(format!("{}: missing provenance line", path.display())))?;
    let mut rest = String::new();
    r.read_to_string(&mut rest)?;
    Ok((prov, rest))
}

/// Muon file: 16-byte header, provenance, count, then 7 LE f64 per muon.
pub fn write_muons<W: Write + ?Sized>(w: &mut W, prov: &Provenance, muons: &[MuonSample]) -> Result<()> {
    w.write_all(MUON_MAGIC)?;
    w.write_all(&MUON_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    prov.write_to(w)?;
    w.write_all(&(muons.len() as u64).to_le_bytes())?;
    for m in muons {
        for v in [m.origin.x, m.origin.y, m.origin.z, m.direction.x, m.direction.y, m.direction.z, m.energy] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_muons<R: Read>(r: &mut R) -> Result<(Provenance, Vec<MuonSample>)> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != MUON_MAGIC {
        return Err(Error::Format("not a muon file".into()));
    }
    let version = read_u16(r)?;
    if version != MUON_VERSION {
        return Err(Error::Format(format!("unsupported muon file version {version}")));
    }
    let _flags = read_u16(r)?;
    let _reserved = read_u32(r)?;
    let prov = Provenance::read_from(r)?;
    let n = read_u64(r)?;
    let mut out = Vec::with_capacity(n.min(1 << 24) as usize);
    let mut buf = [0u8; 56];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let f = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        out.push(MuonSample { origin: Vec3::new(f(0), f(1), f(2)), direction: Vec3::new(f(3), f(4), f(5)), energy: f(6) });
    }
    Ok((prov, out))
}

pub fn write_pulses<W: Write + ?Sized>(w: &mut W, prov: &Provenance, pulses: &[PulseRecord]) -> Result<()> {
    prov.write_to(w)?;
    w.write_all(&(pulses.len() as u64).to_le_bytes())?;
    for p in pulses {
        w.write_all(&[p.detector])?;
        w.write_all(&p.timestamp_ns.to_le_bytes())?;
        w.write_all(&p.amplitude.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pulses<R: Read>(r: &mut R) -> Result<(Provenance, Vec<PulseRecord>)> {
    let prov = Provenance::read_from(r)?;
    let n = read_u64(r)?;
    let mut out = Vec::with_capacity(n.min(1 << 24) as usize);
    let mut buf = [0u8; 17];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(PulseRecord {
            detector: buf[0],
            timestamp_ns: i64::from_le_bytes(buf[1..9].try_into().expect("8 bytes")),
            amplitude: f64::from_le_bytes(buf[9..17].try_into().expect("8 bytes")),
        });
    }
    Ok((prov, out))
}

pub fn write_refs<W: Write + ?Sized>(w: &mut W, prov: &Provenance, refs: &BTreeMap<u32, Vec<i64>>) -> Result<()> {
    prov.write_to(w)?;
    w.write_all(&(refs.len() as u32).to_le_bytes())?;
    for (e, ts) in refs {
        w.write_all(&e.to_le_bytes())?;
        w.write_all(&(ts.len() as u32).to_le_bytes())?;
        for t in ts {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_refs<R: Read>(r: &mut R) -> Result<(Provenance, BTreeMap<u32, Vec<i64>>)> {
    let prov = Provenance::read_from(r)?;
    let n = read_u32(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let e = read_u32(r)?;
        let k = read_u32(r)?;
        let ts = (0..k).map(|_| read_u64(r).map(|v| v as i64)).collect::<Result<Vec<_>>>()?;
        out.insert(e, ts);
    }
    Ok((prov, out))
}

/// Shot file: provenance followed by entry blocks until EOF.
pub struct ShotReader<R: Read> {
    inner: R,
    pub provenance: Provenance,
}

impl<R: Read> ShotReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let provenance = Provenance::read_from(&mut inner)?;
        Ok(ShotReader { inner, provenance })
    }
}

impl<R: Read> Iterator for ShotReader<R> {
    type Item = Result<EntryShots>;
    fn next(&mut self) -> Option<Self::Item> {
        EntryShots::read_from(&mut self.inner).transpose()
    }
}

/// Columns of a CSV body (after comment lines), split on commas.
pub fn csv_rows(body: &str) -> impl Iterator<Item = Vec<&str>> {
    body.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1).map(|l| l.split(',').map(str::trim).collect())
}

pub fn parse_field<T: std::str::FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format(format!("bad {what} `{v}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance { seed: 42, config_hash: [7; 32] }
    }

    #[test]
    fn muon_round_trip_and_header() {
        let m = vec![MuonSample { origin: Vec3::new(1.0, 2.0, 3.0), direction: Vec3::new(0.0, 0.0, -1.0), energy: 4.5 }; 3];
        let mut buf = Vec::new();
        write_muons(&mut buf, &prov(), &m).unwrap();
        assert_eq!(&buf[..8], MUON_MAGIC);
        assert_eq!(buf.len(), 16 + 48 + 8 + 3 * 56);
        let (p, back) = read_muons(&mut buf.as_slice()).unwrap();
        assert_eq!(p, prov());
        assert_eq!(back, m);
        buf[8] = 9;
        assert!(read_muons(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn pulses_refs_round_trip() {
        let p = vec![PulseRecord { detector: 3, timestamp_ns: -8, amplitude: 1.25 }];
        let mut buf = Vec::new();
        write_pulses(&mut buf, &prov(), &p).unwrap();
        assert_eq!(read_pulses(&mut buf.as_slice()).unwrap().1, p);
        let refs: BTreeMap<u32, Vec<i64>> = [(2, vec![1, 5, 9])].into();
        let mut buf = Vec::new();
        write_refs(&mut buf, &prov(), &refs).unwrap();
        assert_eq!(read_refs(&mut buf.as_slice()).unwrap().1, refs);
    }

    #[test]
    fn text_provenance_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.txt");
        write_text(&path, &prov(), "a,b\n1,2\n").unwrap();
        let (p, body) = read_text(&path, "maker").unwrap();
        assert_eq!(p, prov());
        assert_eq!(csv_rows(&body).collect::<Vec<_>>(), vec![vec!["1", "2"]]);
        assert!(!dir.path().join("sub/x.txt.tmp").exists());
        match read_text(&dir.path().join("nope"), "maker") {
            Err(Error::Dependency { stage, .. }) => assert_eq!(stage, "maker"),
            other => panic!("{other:?}"),
        }
    }
}
