//! On-disk corpus format.
//!
//! A frames file `<stem>.iqf` holds a fixed header followed by raw samples:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IQF1"
//! 4       4     version, u32 little-endian (currently 1)
//! 8       4     frame length L, u32 LE
//! 12      4     class count M, u32 LE
//! 16      4     frame count N, u32 LE
//! 20      4     SNR grid length G, u32 LE
//! 24      4*G   SNR grid entries, i32 LE, ascending
//! ...     8*L*N frame data, f32 LE, frame-major; within a frame row-major
//!               L x 2 with (re, im) interleaved per sample
//! ```
//!
//! A sidecar index `<stem>.index.csv` carries one record per frame:
//! `frame,label,snr_db,split,attacked` with split in {train,val,test} and
//! attacked in {0,1}. Both files are byte-deterministic for a given bundle.

use super::{DatasetBundle, IQFrame, Split};
use crate::error::{Error, Result};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"IQF1";
const VERSION: u32 = 1;

pub fn index_path(frames_path: &Path) -> PathBuf {
    frames_path.with_extension("index.csv")
}

pub fn write_dataset(path: &Path, bundle: &DatasetBundle) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(bundle.frame_len as u32).to_le_bytes())?;
    w.write_all(&(bundle.num_classes as u32).to_le_bytes())?;
    w.write_all(&(bundle.frames.len() as u32).to_le_bytes())?;
    w.write_all(&(bundle.snr_grid_db.len() as u32).to_le_bytes())?;
    for &snr in &bundle.snr_grid_db {
        w.write_all(&snr.to_le_bytes())?;
    }
    for frame in &bundle.frames {
        if frame.len() != bundle.frame_len {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "frame length {} != bundle frame length {}",
                    frame.len(),
                    bundle.frame_len
                ),
            });
        }
        for &v in &frame.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut idx = BufWriter::new(fs::File::create(index_path(path))?);
    writeln!(idx, "frame,label,snr_db,split,attacked")?;
    for (i, frame) in bundle.frames.iter().enumerate() {
        writeln!(
            idx,
            "{},{},{},{},{}",
            i,
            frame.label,
            frame.snr_db,
            frame.split.name(),
            u8::from(frame.attacked)
        )?;
    }
    idx.flush()?;
    Ok(())
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

pub fn read_dataset(path: &Path) -> Result<DatasetBundle> {
    let bad = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?
        .read_to_end(&mut buf)?;
    if buf.len() < 24 || &buf[0..4] != MAGIC {
        return Err(bad("missing IQF1 magic".into()));
    }
    let version = read_u32(&buf, 4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let frame_len = read_u32(&buf, 8) as usize;
    let num_classes = read_u32(&buf, 12) as usize;
    let n_frames = read_u32(&buf, 16) as usize;
    let n_snr = read_u32(&buf, 20) as usize;
    let mut at = 24;
    if buf.len() < at + 4 * n_snr {
        return Err(bad("truncated SNR grid".into()));
    }
    let snr_grid_db: Vec<i32> = (0..n_snr)
        .map(|i| i32::from_le_bytes(buf[at + 4 * i..at + 4 * i + 4].try_into().unwrap()))
        .collect();
    at += 4 * n_snr;
    let expected = at + n_frames * frame_len * 2 * 4;
    if buf.len() != expected {
        return Err(bad(format!(
            "payload size {} != expected {}",
            buf.len(),
            expected
        )));
    }

    let index_raw = fs::read_to_string(index_path(path))
        .map_err(|_| Error::MissingArtifact(index_path(path).display().to_string()))?;
    let mut meta = Vec::with_capacity(n_frames);
    for (lineno, line) in index_raw.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(bad(format!("index line {lineno}: expected 5 fields")));
        }
        let label: usize = parts[1]
            .parse()
            .map_err(|_| bad(format!("index line {lineno}: bad label")))?;
        let snr_db: i32 = parts[2]
            .parse()
            .map_err(|_| bad(format!("index line {lineno}: bad snr")))?;
        let split = Split::parse(parts[3])
            .ok_or_else(|| bad(format!("index line {lineno}: bad split {}", parts[3])))?;
        let attacked = parts[4] == "1";
        meta.push((label, snr_db, split, attacked));
    }
    if meta.len() != n_frames {
        return Err(bad(format!(
            "index has {} records for {} frames",
            meta.len(),
            n_frames
        )));
    }

    let mut frames = Vec::with_capacity(n_frames);
    for (i, &(label, snr_db, split, attacked)) in meta.iter().enumerate() {
        let base = at + i * frame_len * 2 * 4;
        let data: Vec<f64> = (0..frame_len * 2)
            .map(|j| {
                f32::from_le_bytes(buf[base + 4 * j..base + 4 * j + 4].try_into().unwrap()) as f64
            })
            .collect();
        frames.push(IQFrame {
            data,
            label,
            snr_db,
            attacked,
            split,
        });
    }
    Ok(DatasetBundle {
        frame_len,
        num_classes,
        snr_grid_db,
        frames,
    })
}
