//! Binary waveform container.
//!
//! Layout (little-endian): 16-byte header (`AFECGWAV` magic, u32 version,
//! u32 reserved), u32 lead count, u32 sample count, f32 sample rate, then
//! lead-major f32 samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EcgWaveform, Result, SignalError};

pub const MAGIC: &[u8; 8] = b"AFECGWAV";
pub const VERSION: u32 = 1;

pub fn encode<W: Write>(mut w: W, wave: &EcgWaveform) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&(wave.n_leads() as u32).to_le_bytes())?;
    w.write_all(&(wave.n_samples() as u32).to_le_bytes())?;
    w.write_all(&wave.sample_rate_hz().to_le_bytes())?;
    let mut buf = Vec::with_capacity(wave.samples().len() * 4);
    for s in wave.samples() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn decode<R: Read>(mut r: R) -> Result<EcgWaveform> {
    let mut head = [0u8; 28];
    r.read_exact(&mut head)
        .map_err(|_| SignalError::Format("truncated header".into()))?;
    if &head[..8] != MAGIC {
        return Err(SignalError::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != VERSION {
        return Err(SignalError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let n_leads = word(16) as usize;
    let n_samples = word(20) as usize;
    let rate = f32::from_le_bytes(head[24..28].try_into().expect("4 bytes"));
    let mut raw = vec![0u8; n_leads * n_samples * 4];
    r.read_exact(&mut raw)
        .map_err(|_| SignalError::Format("truncated samples".into()))?;
    let samples = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EcgWaveform::new(n_leads, rate, samples)
}

pub fn write_waveform(path: &Path, wave: &EcgWaveform) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, wave)?;
    w.flush()?;
    Ok(())
}

pub fn read_waveform(path: &Path) -> Result<EcgWaveform> {
    decode(BufReader::new(File::open(path)?))
}
