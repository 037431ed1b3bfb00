//! Checkpoint directories: one parameter archive per network and a JSON
//! manifest.
//!
//! Archive layout (little endian): magic `SSGPARAM`, `u32` version, `u32`
//! parameter count, then per parameter a `u32`-prefixed UTF-8 name, four
//! `u32` dims and the `f32` values; then a `u32` count of spectral states,
//! each a `u32` parameter index and the `u32`-prefixed `u` and `v` vectors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stainseg_core::eval::F1Report;
use stainseg_core::nn::{ArchConfig, Discriminator, DiscriminatorSpec, NetworkId, Param, ParamStore, SpectralState};
use stainseg_core::train::{CheckpointRecord, Phase, TrainConfig, TrainState};

use crate::error::{CliError, CliResult};
use crate::io::{create_dir, read_json, write_json, FORMAT_VERSION};

const MAGIC: &[u8; 8] = b"SSGPARAM";
pub const CHECKPOINT_FORMAT: &str = "stainseg-checkpoint";
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const SEGMENTER_FILE: &str = "segmenter.bin";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    put_u32(buf, values.len());
    values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
}

pub fn encode_store(store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    put_u32(&mut buf, FORMAT_VERSION as usize);
    put_u32(&mut buf, store.params.len());
    for p in &store.params {
        put_u32(&mut buf, p.name.len());
        buf.extend_from_slice(p.name.as_bytes());
        p.shape.iter().for_each(|d| put_u32(&mut buf, *d));
        p.value.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    put_u32(&mut buf, store.spectral.len());
    for s in &store.spectral {
        put_u32(&mut buf, s.param);
        put_f32s(&mut buf, &s.u);
        put_f32s(&mut buf, &s.v);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or("truncated archive")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, String> {
        let raw = self.take(n.checked_mul(4).ok_or("oversized tensor")?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<ParamStore<f32>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a parameter archive".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(format!("unsupported archive version {version}"));
    }
    let mut store = ParamStore::default();
    for _ in 0..r.u32()? {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8")?;
        let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let value = r.f32s(shape.iter().product())?;
        store.params.push(Param { name, shape, value });
    }
    for _ in 0..r.u32()? {
        let param = r.u32()?;
        let n = r.u32()?;
        let u = r.f32s(n)?;
        let n = r.u32()?;
        let v = r.f32s(n)?;
        if param >= store.params.len() {
            return Err(format!("spectral state refers to missing parameter {param}"));
        }
        store.spectral.push(SpectralState { param, u, v });
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after archive".into());
    }
    Ok(store)
}

pub fn write_store(path: &Path, store: &ParamStore<f32>) -> CliResult<()> {
    fs::write(path, encode_store(store)).map_err(CliError::io(path))
}

pub fn read_store(path: &Path) -> CliResult<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode_store(&bytes).map_err(|m| CliError::format(path, m))
}

/// SHA-256 of the canonical JSON form of a training config.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub file: String,
    pub scalars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub iteration: u64,
    pub phase: Phase,
    pub config_hash: String,
    /// Test-split scores at this checkpoint.
    pub metrics: Option<F1Report>,
    pub arch: ArchConfig,
    /// Architecture of the standalone segmenter, when the run has one.
    pub segmenter: Option<DiscriminatorSpec>,
    pub networks: Vec<NetworkEntry>,
}

pub fn checkpoint_dir_name(iteration: u64) -> String {
    format!("iter-{iteration:08}")
}

pub fn save_checkpoint(dir: &Path, state: &TrainState<f32>, record: &CheckpointRecord, hash: &str) -> CliResult<()> {
    create_dir(dir)?;
    let mut networks = Vec::new();
    let mut save = |name: &str, file: &str, store: &ParamStore<f32>| -> CliResult<()> {
        write_store(&dir.join(file), store)?;
        networks.push(NetworkEntry { name: name.into(), file: file.into(), scalars: store.count() });
        Ok(())
    };
    for id in NetworkId::ALL {
        save(id.name(), &format!("{}.bin", id.name()), state.bundle.store(id))?;
    }
    if let Some(seg) = &state.segmenter {
        save("segmenter", SEGMENTER_FILE, &seg.store)?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        iteration: record.iteration,
        phase: record.phase,
        config_hash: hash.into(),
        metrics: record.f1,
        arch: state.config.arch.clone(),
        segmenter: state.segmenter.as_ref().map(|s| s.spec.clone()),
        networks,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> CliResult<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = read_json(&path)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(CliError::format(&path, "unsupported checkpoint format"));
    }
    Ok(manifest)
}

/// Rebuild a stored discriminator-shaped network from a checkpoint.
pub fn load_network(dir: &Path, spec: DiscriminatorSpec, file: &str) -> CliResult<Discriminator<f32>> {
    let mut model = Discriminator::new(
        spec,
        &mut <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(0),
    )?;
    model.store.load_from(&read_store(&dir.join(file))?)?;
    Ok(model)
}

/// The segmentation model of a checkpoint: the standalone segmenter if
/// present, otherwise `D_A`.
pub fn load_segmentation_model(dir: &Path) -> CliResult<Discriminator<f32>> {
    let manifest = read_manifest(dir)?;
    match manifest.segmenter {
        Some(spec) => load_network(dir, spec, SEGMENTER_FILE),
        None => load_network(dir, manifest.arch.discriminator, &format!("{}.bin", NetworkId::DA.name())),
    }
}
