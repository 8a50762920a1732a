//! Weight checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NNW1"
//! 4       4     version, u32 LE (currently 1)
//! 8       4     architecture descriptor length A, u32 LE
//! 12      A     architecture descriptor, UTF-8 ("amc-v1" or "detector-v1")
//! ...     8     width factor, f64 LE
//! ...     4     input length, u32 LE
//! ...     4     class count, u32 LE
//! ...     8     init seed, u64 LE
//! ...     4     array count, u32 LE
//! then per array:
//!         4     name length, u32 LE
//!         *     name, UTF-8
//!         4     rank, u32 LE
//!         4*r   dims, u32 LE each
//!         8*n   data, f64 LE, row-major
//! ```
//!
//! Arrays are the 20 trainable tensors in canonical order followed by
//! `bn.run_mean` and `bn.run_var`.

use super::{AmcNetwork, Arch, DetectionNetwork, NetMeta, NetParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NNW1";
const VERSION: u32 = 1;

fn write_array(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn save(path: &Path, p: &NetParams, meta: &NetMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let arch = meta.arch.name();
    w.write_all(&(arch.len() as u32).to_le_bytes())?;
    w.write_all(arch.as_bytes())?;
    w.write_all(&meta.width.to_le_bytes())?;
    w.write_all(&(meta.input_len as u32).to_le_bytes())?;
    w.write_all(&(meta.num_classes as u32).to_le_bytes())?;
    w.write_all(&meta.seed.to_le_bytes())?;

    let named = p.trainable();
    let count = named.len() + 2;
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in named {
        write_array(&mut w, name, t)?;
    }
    write_array(&mut w, "bn.run_mean", &p.bn.run_mean)?;
    write_array(&mut w, "bn.run_var", &p.bn.run_var)?;
    w.flush()?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    at: usize,
    path: String,
}

impl Reader {
    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(self.bad("unexpected end of file"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            path: self.path.clone(),
            detail: "invalid UTF-8 in name".into(),
        })
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::new(data, shape)))
    }
}

fn load(path: &Path) -> Result<(NetParams, NetMeta)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?
        .read_to_end(&mut buf)?;
    let mut r = Reader {
        buf,
        at: 0,
        path: path.display().to_string(),
    };
    if r.bytes(4)? != MAGIC {
        return Err(r.bad("missing NNW1 magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let arch_name = r.string()?;
    let arch = match arch_name.as_str() {
        "amc-v1" => Arch::Amc,
        "detector-v1" => Arch::Detector,
        other => return Err(r.bad(format!("unknown architecture {other}"))),
    };
    let width = r.f64()?;
    let input_len = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let seed = r.u64()?;
    let count = r.u32()? as usize;

    let mut arrays = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.array()?;
        arrays.insert(name, t);
    }
    let mut take = |name: &str| -> Result<Tensor> {
        arrays
            .remove(name)
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: format!("missing array {name}"),
            })
    };

    let p = NetParams {
        conv: super::ConvParams {
            w: take("conv.w")?,
            b: take("conv.b")?,
        },
        lstm: super::LstmParams {
            w: [
                take("lstm.w_i")?,
                take("lstm.w_f")?,
                take("lstm.w_g")?,
                take("lstm.w_o")?,
            ],
            u: [
                take("lstm.u_i")?,
                take("lstm.u_f")?,
                take("lstm.u_g")?,
                take("lstm.u_o")?,
            ],
            b: [
                take("lstm.b_i")?,
                take("lstm.b_f")?,
                take("lstm.b_g")?,
                take("lstm.b_o")?,
            ],
        },
        bn: super::BnParams {
            gamma: take("bn.gamma")?,
            beta: take("bn.beta")?,
            run_mean: take("bn.run_mean")?,
            run_var: take("bn.run_var")?,
        },
        dense1: super::DenseParams {
            w: take("dense1.w")?,
            b: take("dense1.b")?,
        },
        dense2: super::DenseParams {
            w: take("dense2.w")?,
            b: take("dense2.b")?,
        },
    };
    let meta = NetMeta {
        arch,
        width,
        input_len,
        num_classes,
        seed,
    };
    Ok((p, meta))
}

pub fn save_amc(path: &Path, net: &AmcNetwork) -> Result<()> {
    save(path, &net.p, &net.meta)
}

pub fn load_amc(path: &Path) -> Result<AmcNetwork> {
    let (p, meta) = load(path)?;
    if meta.arch != Arch::Amc {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "checkpoint is not a classifier".into(),
        });
    }
    Ok(AmcNetwork { p, meta })
}

pub fn save_detector(path: &Path, net: &DetectionNetwork) -> Result<()> {
    save(path, &net.p, &net.meta)
}

pub fn load_detector(path: &Path) -> Result<DetectionNetwork> {
    let (p, meta) = load(path)?;
    if meta.arch != Arch::Detector {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "checkpoint is not a detector".into(),
        });
    }
    Ok(DetectionNetwork { p, meta })
}
