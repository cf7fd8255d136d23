//! File formats: MNO1 point-set files, versioned checkpoints, flat
//! key=value manifests, and content hashing.
//!
//! All binary payloads are little-endian. Readers validate magic bytes and
//! payload sizes and report the byte offset of any truncation.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ChannelStats, PointSample};
use crate::model::{MnoConfig, ModuleMask};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MNO1_MAGIC: &[u8; 4] = b"MNO1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MNOC";
pub const CHECKPOINT_VERSION: u32 = 1;

// ---- byte cursor ----

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Cursor { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "{}: truncated at byte {}: need {} more bytes, {} available",
                self.what,
                self.pos,
                n,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::data(format!("{}: invalid UTF-8 at byte {}", self.what, self.pos)))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::data(format!(
                "{}: {} trailing bytes after byte {}",
                self.what,
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

// ---- MNO1 point-set files ----

pub fn pointset_to_bytes(sample: &PointSample) -> Vec<u8> {
    let n = sample.num_points();
    let f = sample.feature_dim();
    let o = sample.target_dim();
    let mut out = Vec::with_capacity(16 + 4 * n * (3 + f + o) + sample.name.len());
    out.extend_from_slice(MNO1_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(o as u32).to_le_bytes());
    push_f32s(&mut out, sample.positions.data());
    push_f32s(&mut out, sample.features.data());
    push_f32s(&mut out, sample.targets.data());
    push_string(&mut out, &sample.name);
    out
}

pub fn pointset_from_bytes(buf: &[u8], what: &str) -> Result<PointSample> {
    let mut cur = Cursor::new(buf, what);
    let magic = cur.take(4)?;
    if magic != MNO1_MAGIC {
        return Err(Error::data(format!(
            "{what}: bad magic {magic:?}, expected {MNO1_MAGIC:?}"
        )));
    }
    let n = cur.u32()? as usize;
    let f = cur.u32()? as usize;
    let o = cur.u32()? as usize;
    let positions = cur.f32_vec(n * 3)?;
    let features = cur.f32_vec(n * f)?;
    let targets = cur.f32_vec(n * o)?;
    let name = cur.string()?;
    cur.done()?;
    for (label, data) in [("positions", &positions), ("features", &features), ("targets", &targets)] {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{what}: non-finite {label} payload")));
        }
    }
    PointSample::new(
        Tensor::matrix(n, 3, positions)?,
        Tensor::matrix(n, f, features)?,
        Tensor::matrix(n, o, targets)?,
        name,
    )
}

pub fn write_pointset(sample: &PointSample, path: &Path) -> Result<()> {
    fs::write(path, pointset_to_bytes(sample))?;
    Ok(())
}

pub fn read_pointset(path: &Path) -> Result<PointSample> {
    let buf = fs::read(path)?;
    pointset_from_bytes(&buf, &path.display().to_string())
}

/// Load every `.mno1` file in a directory, sorted by file name.
pub fn read_pointset_dir(dir: &Path) -> Result<Vec<PointSample>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "mno1").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no .mno1 files under {}", dir.display())));
    }
    paths.iter().map(|p| read_pointset(p)).collect()
}

// ---- flat key=value manifests ----

pub fn manifest_to_string(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn manifest_from_string(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect()
}

pub fn write_manifest(entries: &[(String, String)], path: &Path) -> Result<()> {
    fs::write(path, manifest_to_string(entries))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(manifest_from_string(&fs::read_to_string(path)?))
}

pub fn manifest_get<'a>(entries: &'a [(String, String)], key: &str) -> Option<&'a str> {
    entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn manifest_parse<T: std::str::FromStr>(entries: &[(String, String)], key: &str) -> Result<T> {
    let v = manifest_get(entries, key)
        .ok_or_else(|| Error::data(format!("manifest: missing key '{key}'")))?;
    v.parse()
        .map_err(|_| Error::data(format!("manifest: cannot parse '{key}' from '{v}'")))
}

/// Model config as manifest entries (`model.*` keys).
pub fn config_to_manifest(config: &MnoConfig) -> Vec<(String, String)> {
    vec![
        ("model.blocks".into(), config.blocks.to_string()),
        ("model.latent_dim".into(), config.latent_dim.to_string()),
        ("model.modes".into(), config.modes.to_string()),
        ("model.heads".into(), config.heads.to_string()),
        ("model.k".into(), config.k.to_string()),
        ("model.mask".into(), config.mask.short()),
        ("model.feature_dim".into(), config.feature_dim.to_string()),
        ("model.output_dim".into(), config.output_dim.to_string()),
    ]
}

pub fn config_from_manifest(entries: &[(String, String)]) -> Result<MnoConfig> {
    let mask = ModuleMask::parse(
        manifest_get(entries, "model.mask")
            .ok_or_else(|| Error::data("manifest: missing key 'model.mask'"))?,
    )?;
    Ok(MnoConfig {
        blocks: manifest_parse(entries, "model.blocks")?,
        latent_dim: manifest_parse(entries, "model.latent_dim")?,
        modes: manifest_parse(entries, "model.modes")?,
        heads: manifest_parse(entries, "model.heads")?,
        k: manifest_parse(entries, "model.k")?,
        mask,
        feature_dim: manifest_parse(entries, "model.feature_dim")?,
        output_dim: manifest_parse(entries, "model.output_dim")?,
    })
}

// ---- checkpoints ----

/// A loaded checkpoint: config, single-precision parameters, the channel
/// statistics the model was trained with, and the run manifest.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: MnoConfig,
    pub params: ParamSet<f32>,
    pub stats: ChannelStats,
    pub manifest: Vec<(String, String)>,
}

pub fn checkpoint_to_bytes(
    config: &MnoConfig,
    params: &ParamSet<f32>,
    stats: &ChannelStats,
    extra_manifest: &[(String, String)],
) -> Vec<u8> {
    let mut manifest = config_to_manifest(config);
    manifest.extend(extra_manifest.iter().cloned());
    let manifest_text = manifest_to_string(&manifest);

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_string(&mut out, &manifest_text);
    for v in [&stats.feature_mean, &stats.feature_std, &stats.target_mean, &stats.target_std] {
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        push_f32s(&mut out, v);
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, t) in params.iter() {
        push_string(&mut out, path);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    out
}

pub fn checkpoint_from_bytes(buf: &[u8], what: &str) -> Result<Checkpoint> {
    let mut cur = Cursor::new(buf, what);
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::data(format!(
            "{what}: bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "{what}: unsupported checkpoint version {version}"
        )));
    }
    let manifest = manifest_from_string(&cur.string()?);
    let config = config_from_manifest(&manifest)?;
    let mut stat_vecs = Vec::with_capacity(4);
    for _ in 0..4 {
        let len = cur.u32()? as usize;
        stat_vecs.push(cur.f32_vec(len)?);
    }
    let stats = ChannelStats {
        feature_mean: stat_vecs[0].clone(),
        feature_std: stat_vecs[1].clone(),
        target_mean: stat_vecs[2].clone(),
        target_std: stat_vecs[3].clone(),
    };
    let n_params = cur.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let path = cur.string()?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = cur.f32_vec(count)?;
        params.insert(path, Tensor::new(shape, data)?);
    }
    cur.done()?;
    Ok(Checkpoint { config, params, stats, manifest })
}

pub fn save_checkpoint(
    path: &Path,
    config: &MnoConfig,
    params: &ParamSet<f32>,
    stats: &ChannelStats,
    extra_manifest: &[(String, String)],
) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(config, params, stats, extra_manifest))?;
    // Sidecar manifest for humans and reruns.
    let mut manifest = config_to_manifest(config);
    manifest.extend(extra_manifest.iter().cloned());
    write_manifest(&manifest, &path.with_extension("manifest"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    checkpoint_from_bytes(&buf, &path.display().to_string())
}

// ---- hashing ----

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
