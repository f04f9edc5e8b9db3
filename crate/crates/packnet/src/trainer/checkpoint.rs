//! Binary checkpoint format: a JSON header describing configs, counters, and
//! parameter layout, followed by raw little-endian `f64` payloads for every
//! parameter and both Adam moment buffers. Saves are atomic
//! (write-temp-then-rename) so a crash never leaves a half-written file at
//! the destination path.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

use super::{AdamState, PackNetConfig, PoseNetConfig, TrainConfig, Trainer};

const MAGIC: [u8; 4] = *b"PNCK";
const FORMAT_VERSION: u32 = 1;

/// Name and shape of one parameter, in save order. Lets the loader verify it
/// is restoring into an identically shaped network before touching weights.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    train: TrainConfig,
    depth: PackNetConfig,
    pose: PoseNetConfig,
    epoch: usize,
    step: usize,
    adam_t: i32,
    params: Vec<ParamMeta>,
}

impl Header {
    fn of(trainer: &Trainer) -> Self {
        Header {
            train: trainer.cfg.clone(),
            depth: trainer.depth_net.config().clone(),
            pose: trainer.pose_net.config().clone(),
            epoch: trainer.epoch,
            step: trainer.step,
            adam_t: trainer.adam.t,
            params: trainer
                .all_params()
                .iter()
                .map(|p| ParamMeta { name: p.name().to_string(), shape: p.shape() })
                .collect(),
        }
    }
}

/// Write the complete training state — configs, counters, parameters, and
/// optimizer moments — to `path`, atomically.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let tmp = sibling_temp(path)?;
    let result = write_to(trainer, &tmp).and_then(|()| Ok(fs::rename(&tmp, path)?));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn sibling_temp(path: &Path) -> Result<PathBuf> {
    let Some(name) = path.file_name() else {
        return Err(Error::Checkpoint(format!(
            "checkpoint path {} has no file name",
            path.display()
        )));
    };
    let mut tmp = name.to_os_string();
    tmp.push(".tmp");
    Ok(path.with_file_name(tmp))
}

fn write_to(trainer: &Trainer, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header::of(trainer))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in trainer.all_params() {
        write_array(&mut w, &p.value())?;
    }
    for m in &trainer.adam.m {
        write_array(&mut w, m)?;
    }
    for v in &trainer.adam.v {
        write_array(&mut w, v)?;
    }
    w.flush()?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
    Ok(())
}

fn write_array(w: &mut impl Write, arr: &ArrayD<f64>) -> Result<()> {
    // Logical (row-major) order on both ends, independent of memory layout.
    for &x in arr.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Restore a previously saved state into `trainer`. The saved network
/// configs must match the trainer's exactly; parameters, Adam moments, the
/// step counters, and the training config are all replaced by the file's.
pub fn load_checkpoint(path: &Path, trainer: &mut Trainer) -> Result<()> {
    let mut r = open(path)?;
    let header = read_header(&mut r)?;
    check_compatible(&header, trainer)?;
    apply_payload(&mut r, header, trainer)
}

/// Rebuild a trainer entirely from a checkpoint, networks included.
pub(super) fn resume(path: &Path) -> Result<Trainer> {
    let mut r = open(path)?;
    let header = read_header(&mut r)?;
    let mut trainer =
        Trainer::new(header.train.clone(), header.depth.clone(), header.pose.clone())?;
    check_compatible(&header, &trainer)?;
    apply_payload(&mut r, header, &mut trainer)?;
    Ok(trainer)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut version = [0u8; 4];
    read_exact(&mut r, &mut version)?;
    let found = u32::from_le_bytes(version);
    if found != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found, expected: FORMAT_VERSION });
    }
    Ok(r)
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut len = [0u8; 8];
    read_exact(r, &mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut bytes = vec![0u8; len];
    read_exact(r, &mut bytes)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn check_compatible(header: &Header, trainer: &Trainer) -> Result<()> {
    if header.depth != *trainer.depth_net.config() {
        return Err(Error::CheckpointConfig(
            "saved depth network config differs from this trainer's".into(),
        ));
    }
    if header.pose != *trainer.pose_net.config() {
        return Err(Error::CheckpointConfig(
            "saved pose network config differs from this trainer's".into(),
        ));
    }
    let live = trainer.all_params();
    if header.params.len() != live.len() {
        return Err(Error::CheckpointConfig(format!(
            "checkpoint stores {} parameters, this trainer has {}",
            header.params.len(),
            live.len()
        )));
    }
    for (meta, p) in header.params.iter().zip(&live) {
        if meta.name != p.name() || meta.shape != p.shape() {
            return Err(Error::CheckpointConfig(format!(
                "parameter mismatch: checkpoint has {} {:?}, trainer has {} {:?}",
                meta.name,
                meta.shape,
                p.name(),
                p.shape()
            )));
        }
    }
    Ok(())
}

fn apply_payload(r: &mut impl Read, header: Header, trainer: &mut Trainer) -> Result<()> {
    // Read everything before mutating, so a truncated file can't leave the
    // trainer half restored.
    let shapes: Vec<Vec<usize>> = header.params.iter().map(|m| m.shape.clone()).collect();
    let mut values = Vec::with_capacity(shapes.len());
    for shape in &shapes {
        values.push(read_array(r, shape)?);
    }
    let mut adam = AdamState { m: Vec::new(), v: Vec::new(), t: header.adam_t };
    for shape in &shapes {
        adam.m.push(read_array(r, shape)?);
    }
    for shape in &shapes {
        adam.v.push(read_array(r, shape)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
    }

    for (p, value) in trainer.all_params().iter().zip(values) {
        p.set(value);
    }
    trainer.adam = adam;
    trainer.cfg = header.train;
    trainer.epoch = header.epoch;
    trainer.step = header.step;
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<ArrayD<f64>> {
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 8];
    read_exact(r, &mut bytes)?;
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Checkpoint(format!("bad parameter shape in checkpoint: {e}")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Checkpoint("checkpoint file is truncated".into())
        } else {
            Error::Io(e)
        }
    })
}
