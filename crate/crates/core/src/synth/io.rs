use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::domain::{default_domains, validate_domains, DomainSpec};
use super::scene::{generate_scene, PointCloud};
use super::SynthError;

const CLOUD_MAGIC: &str = "doremi-cloud";
const CLOUD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

/// Domains plus per-split seed ranges. Stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub domains: Vec<DomainSpec>,
    pub train: SeedRange,
    pub eval: SeedRange,
    /// Domains excluded from joint training.
    #[serde(default)]
    pub held_out: Vec<u32>,
}

impl CorpusManifest {
    /// Desk-scale corpus: three training domains and one held-out domain.
    pub fn standard() -> Self {
        Self {
            domains: default_domains(),
            train: SeedRange { start: 0, count: 8 },
            eval: SeedRange { start: 10_000, count: 4 },
            held_out: vec![3],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        validate_domains(&self.domains)?;
        for h in &self.held_out {
            if self.domain(*h).is_none() {
                return Err(SynthError::InvalidSpec(format!("held-out domain {h} not declared")));
            }
        }
        Ok(())
    }

    pub fn domain(&self, id: u32) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.domain_id == id)
    }

    pub fn training_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.iter().filter(|d| !self.held_out.contains(&d.domain_id))
    }

    pub fn seeds(&self, split: Split) -> SeedRange {
        match split {
            Split::Train => self.train,
            Split::Eval => self.eval,
        }
    }

    /// Every scene of `domain` in `split`, in seed order.
    pub fn scenes(&self, domain: u32, split: Split) -> Result<Vec<PointCloud>, SynthError> {
        let spec = self.domain(domain).ok_or(SynthError::UnknownDomain(domain))?;
        self.seeds(split).seeds().map(|s| generate_scene(spec, s)).collect()
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        let m: Self = toml::from_str(&text).map_err(|e| SynthError::Format(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let text = toml::to_string_pretty(self).map_err(|e| SynthError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudHeader {
    magic: String,
    version: u32,
    points: u64,
    domain_id: u32,
}

/// One JSON header line, then little-endian columns: positions f64,
/// colors f64, labels u32.
pub fn write_cloud<W: Write>(mut w: W, cloud: &PointCloud) -> Result<(), SynthError> {
    let header = CloudHeader {
        magic: CLOUD_MAGIC.into(),
        version: CLOUD_VERSION,
        points: cloud.len() as u64,
        domain_id: cloud.domain_id,
    };
    let line = serde_json::to_string(&header).map_err(|e| SynthError::Format(e.to_string()))?;
    writeln!(w, "{line}")?;
    let mut buf = Vec::with_capacity(cloud.len() * 52);
    for p in &cloud.positions {
        p.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    for c in &cloud.colors {
        c.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    for l in &cloud.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cloud<R: Read>(r: R) -> Result<PointCloud, SynthError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CloudHeader = serde_json::from_str(line.trim_end()).map_err(|e| SynthError::Format(e.to_string()))?;
    if header.magic != CLOUD_MAGIC || header.version != CLOUD_VERSION {
        return Err(SynthError::Format(format!("unsupported cloud {} v{}", header.magic, header.version)));
    }
    let n = header.points as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != n * 52 {
        return Err(SynthError::Format(format!("expected {} body bytes, got {}", n * 52, body.len())));
    }
    let f64_at = |k: usize| f64::from_le_bytes(body[k * 8..k * 8 + 8].try_into().unwrap());
    let positions = (0..n).map(|i| [f64_at(3 * i), f64_at(3 * i + 1), f64_at(3 * i + 2)]).collect();
    let off = 3 * n;
    let colors = (0..n)
        .map(|i| [f64_at(off + 3 * i), f64_at(off + 3 * i + 1), f64_at(off + 3 * i + 2)])
        .collect();
    let lbase = 48 * n;
    let labels = (0..n)
        .map(|i| u32::from_le_bytes(body[lbase + 4 * i..lbase + 4 * i + 4].try_into().unwrap()))
        .collect();
    Ok(PointCloud {
        positions,
        colors,
        labels,
        domain_id: header.domain_id,
    })
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<(), SynthError> {
    let f = fs::File::create(path)?;
    write_cloud(std::io::BufWriter::new(f), cloud)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, SynthError> {
    read_cloud(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rejects_unknown_keys() {
        let mut text = toml::to_string(&CorpusManifest::standard()).unwrap();
        text.push_str("\nbogus = 1\n");
        assert!(toml::from_str::<CorpusManifest>(&text).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let m = CorpusManifest::standard();
        let back: CorpusManifest = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.training_domains().count(), 3);
    }

    #[test]
    fn truncated_cloud_rejected() {
        let c = generate_scene(&default_domains()[0], 0).unwrap();
        let mut buf = Vec::new();
        write_cloud(&mut buf, &c).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_cloud(&buf[..]).is_err());
    }
}
