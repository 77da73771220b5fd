//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `metadata.json`, one tensor file per
//! parameter group (`spatial.bin`, `temporal.bin`, ...), `queue.bin` and
//! `optimizer.bin`. Every integer and float is little-endian.
//!
//! Tensor files: magic `T2VT`, `u32` format version, `u64` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u8` dtype tag
//! (0 = f32, 1 = f64), a `u32` rank, `rank` `u64` dims and the row-major data.
//!
//! `queue.bin`: magic `T2VQ`, version, `u64` capacity, `u64` entry count,
//! `u64` dim, then per entry a `u64` video id and `dim` f64 values, oldest
//! first.
//!
//! `optimizer.bin`: magic `T2VO`, version, `u64` step count, `u64` entry
//! count, then per entry a name and two tensors (first and second moment)
//! in the tensor layout above.
//!
//! `metadata.json` records the SHA-256 of every binary file and is written
//! last, so a directory without it is not a checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{write_atomic, write_json};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::losses::NegativeQueue;
use crate::model::{ModelConfig, T2VModel};
use crate::nn::ParamGroup;
use crate::optim::Adam;
use crate::train::{Phase, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.json";
pub const QUEUE_FILE: &str = "queue.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format_version: u32,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub phase: Phase,
    pub step: u64,
    pub groups: Vec<String>,
    pub spatial_frozen: bool,
    pub optimizer_steps: u64,
    pub queue_capacity: usize,
    /// SHA-256 of each binary file, by file name.
    pub sha256: BTreeMap<String, String>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn group_file(group: ParamGroup) -> String {
    format!("{}.bin", group.name())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => out.push(0),
        DType::F64 => out.push(1),
        other => return Err(Error::State(format!("cannot store {other:?} tensors"))),
    }
    put_u32(out, t.rank() as u32);
    for &d in t.dims() {
        put_u64(out, d as u64);
    }
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    put_u32(&mut out, FORMAT_VERSION);
    out
}

/// Encodes named tensors in the tensor-file layout.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = header(b"T2VT");
    put_u64(&mut out, tensors.len() as u64);
    for (name, t) in tensors {
        put_name(&mut out, name);
        put_tensor(&mut out, t)?;
    }
    Ok(out)
}

/// Bounds-checked little-endian reader; every failure names the file.
struct Reader<'a> {
    file: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(file: &'a Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { file, bytes, pos: 0 };
        if r.take(4)? != magic {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.corrupt(&format!("unsupported format version {version}")));
        }
        Ok(r)
    }

    fn corrupt(&self, reason: &str) -> Error {
        Error::Integrity {
            path: self.file.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.corrupt("truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.corrupt("length overflows usize"))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("tensor name is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let tag = self.u8()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.corrupt("tensor size overflow"))?;
        let t = match tag {
            0 => {
                let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?)?;
                let v: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => Tensor::from_vec(self.f64s(count)?, dims, &Device::Cpu)?,
            other => return Err(self.corrupt(&format!("unknown dtype tag {other}"))),
        };
        Ok(t)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

/// Decodes a tensor file.
pub fn decode_tensors(file: &Path, bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader::new(file, bytes, b"T2VT")?;
    let n = r.usize()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = r.name()?;
        let t = r.tensor()?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.corrupt(&format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    Ok(out)
}

fn encode_queue(queue: &NegativeQueue) -> Vec<u8> {
    let mut out = header(b"T2VQ");
    put_u64(&mut out, queue.capacity() as u64);
    put_u64(&mut out, queue.len() as u64);
    put_u64(&mut out, queue.dim().unwrap_or(0) as u64);
    for (z, id) in queue.entries() {
        put_u64(&mut out, id);
        z.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

fn decode_queue(file: &Path, bytes: &[u8]) -> Result<NegativeQueue> {
    let mut r = Reader::new(file, bytes, b"T2VQ")?;
    let capacity = r.usize()?;
    let n = r.usize()?;
    let dim = r.usize()?;
    let mut entries = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = r.u64()?;
        entries.push((r.f64s(dim)?, id));
    }
    r.finish()?;
    NegativeQueue::from_entries(capacity, entries).map_err(|e| r.corrupt(&e.to_string()))
}

fn encode_optimizer(opt: &Adam) -> Result<Vec<u8>> {
    let mut out = header(b"T2VO");
    put_u64(&mut out, opt.steps());
    put_u64(&mut out, opt.moments().len() as u64);
    for (name, (m, v)) in opt.moments() {
        put_name(&mut out, name);
        put_tensor(&mut out, m)?;
        put_tensor(&mut out, v)?;
    }
    Ok(out)
}

fn decode_optimizer(file: &Path, bytes: &[u8]) -> Result<Adam> {
    let mut r = Reader::new(file, bytes, b"T2VO")?;
    let steps = r.u64()?;
    let n = r.usize()?;
    let mut moments = BTreeMap::new();
    for _ in 0..n {
        let name = r.name()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        moments.insert(name, (m, v));
    }
    r.finish()?;
    Ok(Adam::from_state(steps, moments))
}

/// Writes the full training state and the noise schedule it was trained
/// with to `dir`.
pub fn save(state: &TrainState, schedule: &ScheduleConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let model = &state.model;
    let mut sha256 = BTreeMap::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&dir.join(&name), &bytes)?;
        sha256.insert(name, hex_digest(&bytes));
        Ok(())
    };
    for group in ParamGroup::ALL {
        let tensors: Vec<(&str, Tensor)> = model
            .params()
            .group(group)
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        emit(group_file(group), encode_tensors(tensors.iter().map(|(n, t)| (*n, t)))?)?;
    }
    emit(QUEUE_FILE.into(), encode_queue(&state.queue))?;
    emit(OPTIMIZER_FILE.into(), encode_optimizer(&state.optimizer)?)?;
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        schedule: *schedule,
        seed: model.seed(),
        phase: state.phase,
        step: state.step,
        groups: ParamGroup::ALL.iter().map(|g| g.name().to_string()).collect(),
        spatial_frozen: model.is_spatial_frozen(),
        optimizer_steps: state.optimizer.steps(),
        queue_capacity: state.queue.capacity(),
        sha256,
    };
    write_json(&dir.join(METADATA_FILE), &meta)
}

fn read_checked(dir: &Path, name: &str, meta: &Metadata) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::Integrity {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let expected = meta.sha256.get(name).ok_or_else(|| Error::Integrity {
        path: path.clone(),
        reason: "no checksum recorded in metadata".into(),
    })?;
    if &hex_digest(&bytes) != expected {
        return Err(Error::Integrity {
            path,
            reason: "checksum mismatch".into(),
        });
    }
    Ok(bytes)
}

pub fn read_metadata(dir: &Path) -> Result<Metadata> {
    let path = dir.join(METADATA_FILE);
    let bad = |reason: String| Error::Integrity {
        path: path.clone(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let meta: Metadata = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", meta.format_version)));
    }
    Ok(meta)
}

/// Restores a training state saved by [`save`].
pub fn load(dir: &Path) -> Result<TrainState> {
    let meta = read_metadata(dir)?;
    let model = T2VModel::build(meta.model.clone(), meta.seed)?;
    for name in &meta.groups {
        let group = ParamGroup::from_name(name).ok_or_else(|| Error::Integrity {
            path: dir.join(METADATA_FILE),
            reason: format!("unknown parameter group {name:?}"),
        })?;
        let file = group_file(group);
        let bytes = read_checked(dir, &file, &meta)?;
        let tensors = decode_tensors(&dir.join(&file), &bytes)?;
        model.params().assign_group(group, &tensors)?;
    }
    if meta.spatial_frozen {
        model.freeze_spatial();
    }
    let queue = decode_queue(&dir.join(QUEUE_FILE), &read_checked(dir, QUEUE_FILE, &meta)?)?;
    let optimizer = decode_optimizer(&dir.join(OPTIMIZER_FILE), &read_checked(dir, OPTIMIZER_FILE, &meta)?)?;
    Ok(TrainState {
        model,
        queue,
        optimizer,
        phase: meta.phase,
        step: meta.step,
    })
}

/// [`load`], rejecting checkpoints built for a different architecture.
pub fn load_matching(dir: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let meta = read_metadata(dir)?;
    if &meta.model != expected {
        return Err(Error::ConfigMismatch(format!(
            "{} was saved with {}, expected {}",
            dir.display(),
            serde_json::to_string(&meta.model)?,
            serde_json::to_string(expected)?
        )));
    }
    load(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataConfig, Dataset};
    use crate::diffusion::NoiseSchedule;
    use crate::train::{pretrain_step, train_step, TrainConfig};

    fn setup() -> (TrainState, Dataset, NoiseSchedule, TrainConfig) {
        let cfg = ModelConfig::tiny();
        let ds = Dataset::open(&DataConfig::Synthetic { clips: 4, seed: 3 }, cfg.frames, 3, cfg.height, cfg.width).unwrap();
        let state = TrainState::new(T2VModel::build(cfg, 5).unwrap()).unwrap();
        let sched = NoiseSchedule::linear(100, 0.00085, 0.012).unwrap();
        let tc = TrainConfig {
            batch_size: 2,
            steps: 10,
            pretrain_steps: 2,
            ..Default::default()
        };
        (state, ds, sched, tc)
    }

    fn all_tensors(state: &TrainState) -> Vec<(String, Vec<u8>)> {
        ParamGroup::ALL
            .iter()
            .flat_map(|g| {
                state
                    .model
                    .params()
                    .group(*g)
                    .map(|(n, v)| {
                        let bytes = encode_tensors([(n, v.as_tensor())]).unwrap();
                        (format!("{g}/{n}"), bytes)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_and_resumes_identically() {
        let (mut state, ds, sched, tc) = setup();
        pretrain_step(&mut state, &ds, &sched, &tc).unwrap();
        state.begin_inflation().unwrap();
        for _ in 0..3 {
            train_step(&mut state, &ds, &sched, &tc).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(&state, &ScheduleConfig::default(), dir.path()).unwrap();
        let mut restored = load(dir.path()).unwrap();
        assert_eq!(all_tensors(&state), all_tensors(&restored));
        assert_eq!(restored.step, 3);
        assert_eq!(restored.phase, Phase::TrainTemporal);
        assert!(restored.model.is_spatial_frozen());
        assert_eq!(
            restored.queue.entries().collect::<Vec<_>>(),
            state.queue.entries().collect::<Vec<_>>()
        );
        let a = train_step(&mut state, &ds, &sched, &tc).unwrap().0;
        let b = train_step(&mut restored, &ds, &sched, &tc).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_names_the_file() {
        let (state, ..) = setup();
        let dir = tempfile::tempdir().unwrap();
        save(&state, &ScheduleConfig::default(), dir.path()).unwrap();
        let target = dir.path().join("temporal.bin");
        let mut bytes = fs::read(&target).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&target, bytes).unwrap();
        match load(dir.path()) {
            Err(Error::Integrity { path, .. }) => assert_eq!(path, target),
            other => panic!("{:?}", other.err()),
        }
        fs::remove_file(dir.path().join(QUEUE_FILE)).unwrap();
        fs::remove_file(&target).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Integrity { .. })));
        let empty = tempfile::tempdir().unwrap();
        match load(empty.path()) {
            Err(Error::Integrity { path, .. }) => assert!(path.ends_with(METADATA_FILE)),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn config_mismatch_is_reported() {
        let (state, ..) = setup();
        let dir = tempfile::tempdir().unwrap();
        save(&state, &ScheduleConfig::default(), dir.path()).unwrap();
        let mut other = ModelConfig::tiny();
        other.frame_tokens = 3;
        assert!(matches!(load_matching(dir.path(), &other), Err(Error::ConfigMismatch(_))));
        load_matching(dir.path(), &ModelConfig::tiny()).unwrap();
    }

    #[test]
    fn truncated_tensor_file_is_rejected() {
        let t = Tensor::new(&[1.0f32, 2.0, 3.0], &Device::Cpu).unwrap();
        let bytes = encode_tensors([("x", &t)]).unwrap();
        let p = Path::new("x.bin");
        let back = decode_tensors(p, &bytes).unwrap();
        assert_eq!(back["x"].to_vec1::<f32>().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(decode_tensors(p, &bytes[..bytes.len() - 2]), Err(Error::Integrity { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_tensors(p, &extra).is_err());
    }
}
