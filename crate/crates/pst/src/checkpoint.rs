//! Versioned binary container for full run state.
//!
//! Layout, all little-endian: an 8-byte magic, a u32 version, run
//! counters, both trajectories, the resolved config text, then a count
//! of named tensors, each as name, rows, cols, and row-major f64 data.
//! The tensor list carries the parameter registry ("param.*"), per-layer
//! frozen state and accumulators ("aux.*"), and the optimizer moments
//! ("adam.m.*", "adam.v.*") in registry order. Masks are not stored;
//! they are a pure function of the restored scores and the schedule.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor2D;
use crate::trainer::{TrainOptions, Trainer};

const MAGIC: &[u8; 8] = b"PSTCKPT1";
const VERSION: u32 = 1;
/// Corrupt headers must not translate into huge allocations.
const MAX_NAME: usize = 4096;
const MAX_ELEMENTS: usize = 100_000_000;

pub fn save(path: &Path, trainer: &Trainer, config_text: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(trainer.step_count() as u64).to_le_bytes())?;
    out.write_all(&(trainer.optimizer().t() as u64).to_le_bytes())?;
    out.write_all(&trainer.options().seed.to_le_bytes())?;
    out.write_all(&trainer.wall_clock_secs().to_le_bytes())?;

    write_f64s(&mut out, trainer.losses())?;
    write_f64s(&mut out, trainer.sparsities())?;

    let config_bytes = config_text.as_bytes();
    out.write_all(&(config_bytes.len() as u32).to_le_bytes())?;
    out.write_all(config_bytes)?;

    let model = trainer.model();
    let params = model.params();
    let aux = model.aux_tensors();
    let moment_count = trainer.optimizer().moments().count();
    let total = params.len() + aux.len() + 2 * moment_count;
    out.write_all(&(total as u32).to_le_bytes())?;

    for entry in &params {
        write_tensor(&mut out, &format!("param.{}", entry.name), entry.value)?;
    }
    for (name, tensor) in &aux {
        write_tensor(&mut out, &format!("aux.{name}"), tensor)?;
    }
    for (name, m, v) in trainer.optimizer().moments() {
        write_tensor(&mut out, &format!("adam.m.{name}"), m)?;
        write_tensor(&mut out, &format!("adam.v.{name}"), v)?;
    }
    out.flush()?;
    Ok(())
}

/// Restores a run into a freshly built model of the same shape. Returns
/// the trainer positioned at the saved step and the stored config text.
pub fn load(path: &Path, mut model: Model, options: TrainOptions) -> Result<(Trainer, String)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let step = read_u64(&mut file)? as usize;
    let adam_t = read_u64(&mut file)? as usize;
    let seed = read_u64(&mut file)?;
    if seed != options.seed {
        return Err(Error::checkpoint(format!(
            "checkpoint was trained with seed {seed}, config says {}",
            options.seed
        )));
    }
    let wall_secs = read_f64(&mut file)?;

    let losses = read_f64s(&mut file)?;
    let sparsities = read_f64s(&mut file)?;

    let config_len = read_u32(&mut file)? as usize;
    if config_len > 1_000_000 {
        return Err(Error::checkpoint("config block implausibly large"));
    }
    let mut config_bytes = vec![0u8; config_len];
    read_exact(&mut file, &mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::checkpoint("config block is not valid UTF-8"))?;

    let tensor_count = read_u32(&mut file)? as usize;
    let mut m_moments: Vec<(String, Tensor2D)> = Vec::new();
    let mut v_moments: Vec<(String, Tensor2D)> = Vec::new();
    for _ in 0..tensor_count {
        let (name, tensor) = read_tensor(&mut file)?;
        if let Some(param) = name.strip_prefix("param.") {
            model.set_param(param, tensor)?;
        } else if let Some(aux) = name.strip_prefix("aux.") {
            model.set_aux(aux, tensor)?;
        } else if let Some(m) = name.strip_prefix("adam.m.") {
            m_moments.push((m.to_string(), tensor));
        } else if let Some(v) = name.strip_prefix("adam.v.") {
            v_moments.push((v.to_string(), tensor));
        } else {
            return Err(Error::checkpoint(format!("unrecognized tensor {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(Error::checkpoint("trailing bytes after tensor section"));
    }

    if m_moments.len() != v_moments.len() {
        return Err(Error::checkpoint(format!(
            "{} first moments but {} second moments",
            m_moments.len(),
            v_moments.len()
        )));
    }
    let moments = m_moments
        .into_iter()
        .zip(v_moments)
        .map(|((mn, m), (vn, v))| {
            if mn != vn {
                return Err(Error::checkpoint(format!(
                    "moment pair mismatch: {mn} vs {vn}"
                )));
            }
            Ok((mn, m, v))
        })
        .collect::<Result<Vec<_>>>()?;

    let trainer = Trainer::resume(
        model, options, step, losses, sparsities, adam_t, moments, wall_secs,
    )?;
    Ok((trainer, config_text))
}

fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    out.write_all(&(values.len() as u32).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor(out: &mut impl Write, name: &str, tensor: &Tensor2D) -> Result<()> {
    let bytes = name.as_bytes();
    out.write_all(&(bytes.len() as u32).to_le_bytes())?;
    out.write_all(bytes)?;
    out.write_all(&(tensor.rows() as u32).to_le_bytes())?;
    out.write_all(&(tensor.cols() as u32).to_le_bytes())?;
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// EOF inside a structure is a malformed checkpoint, not an IO failure.
fn read_exact(file: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    file.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::checkpoint("truncated checkpoint")
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(file: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(file, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(file: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(file, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(file: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(file, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64s(file: &mut impl Read) -> Result<Vec<f64>> {
    let len = read_u32(file)? as usize;
    if len > MAX_ELEMENTS {
        return Err(Error::checkpoint("trajectory implausibly long"));
    }
    (0..len).map(|_| read_f64(file)).collect()
}

fn read_tensor(file: &mut impl Read) -> Result<(String, Tensor2D)> {
    let name_len = read_u32(file)? as usize;
    if name_len > MAX_NAME {
        return Err(Error::checkpoint("tensor name implausibly long"));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(file, &mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::checkpoint("tensor name is not valid UTF-8"))?;
    let rows = read_u32(file)? as usize;
    let cols = read_u32(file)? as usize;
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > MAX_ELEMENTS {
        return Err(Error::checkpoint(format!(
            "tensor {name} has implausible shape {rows}x{cols}"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(file)?);
    }
    let tensor = Tensor2D::new(rows, cols, data)
        .map_err(|e| Error::checkpoint(format!("tensor {name}: {e}")))?;
    Ok((name, tensor))
}
