//! Signal and table I/O: WAV, raw float32 with a JSON sidecar, ground-truth CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::room::{Reflection, ReflectionSet};
use crate::scene::MultichannelSignal;

/// Reads every channel of a 16/24/32-bit integer or float WAV file.
pub fn read_wav(path: &Path) -> Result<MultichannelSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 {
        return Err(Error::Format(format!("{}: no channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % nch].push(v);
    }
    MultichannelSignal::new(spec.sample_rate as f64, channels)
}

/// Writes a 32-bit float WAV file.
pub fn write_wav(path: &Path, signal: &MultichannelSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: signal.num_channels() as u16,
        sample_rate: signal.fs.round() as u32,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..signal.len() {
        for c in &signal.channels {
            w.write_sample(c[i] as f32)?;
        }
    }
    w.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub fs: f64,
    pub channels: usize,
    pub frames: usize,
    /// Always "f32le", samples interleaved by frame.
    pub format: String,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes interleaved little-endian float32 to `path` and the header to
/// `path.json`.
pub fn write_raw(path: &Path, signal: &MultichannelSignal) -> Result<()> {
    let header = RawHeader {
        fs: signal.fs,
        channels: signal.num_channels(),
        frames: signal.len(),
        format: "f32le".into(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..signal.len() {
        for c in &signal.channels {
            w.write_f32::<LittleEndian>(c[i] as f32)?;
        }
    }
    w.flush()?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<MultichannelSignal> {
    let header: RawHeader = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    if header.format != "f32le" {
        return Err(Error::Format(format!("unsupported raw format `{}`", header.format)));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let expected = header.channels * header.frames * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut cursor = &bytes[..];
    let mut channels = vec![Vec::with_capacity(header.frames); header.channels];
    for _ in 0..header.frames {
        for c in channels.iter_mut() {
            c.push(cursor.read_f32::<LittleEndian>()? as f64);
        }
    }
    MultichannelSignal::new(header.fs, channels)
}

/// Reads a WAV file, or raw float32 when the extension is not `.wav`.
pub fn read_signal(path: &Path) -> Result<MultichannelSignal> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        read_wav(path)
    } else {
        read_raw(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthRow {
    order: u32,
    delay_s: f64,
    amplitude: f64,
    elevation_rad: f64,
    azimuth_rad: f64,
}

/// Ground truth as CSV, direct sound first.
pub fn write_truth_csv(path: &Path, refs: &ReflectionSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in refs.arrivals() {
        w.serialize(TruthRow {
            order: r.order,
            delay_s: r.delay,
            amplitude: r.amplitude,
            elevation_rad: r.doa.elevation,
            azimuth_rad: r.doa.azimuth,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv(path: &Path) -> Result<ReflectionSet> {
    let mut rows = csv::Reader::from_path(path)?
        .into_deserialize::<TruthRow>()
        .map(|r| {
            r.map(|t| Reflection {
                delay: t.delay_s,
                amplitude: t.amplitude,
                doa: crate::array::Direction::new(t.elevation_rad, t.azimuth_rad),
                order: t.order,
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: empty ground truth", path.display())));
    }
    let direct = rows.remove(0);
    if direct.delay != 0.0 || direct.order != 0 {
        return Err(Error::Format("first ground-truth row must be the direct sound".into()));
    }
    let mut set = ReflectionSet {
        direct,
        reflections: rows,
    };
    set.sort();
    Ok(set)
}
