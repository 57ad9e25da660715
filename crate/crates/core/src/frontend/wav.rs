use std::fs;
use std::path::Path;

use super::AudioSignal;
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

struct FmtChunk {
    audio_format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a mono PCM16 RIFF/WAVE file. Samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

pub(crate) fn parse_wav(bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("chunk extends past end of file".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some(FmtChunk {
                    audio_format: u16_at(body, 0),
                    channels: u16_at(body, 2),
                    sample_rate: u32_at(body, 4),
                    bits_per_sample: u16_at(body, 14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if fmt.audio_format != 1 || fmt.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "only PCM16 is supported (format tag {}, {} bits)",
            fmt.audio_format, fmt.bits_per_sample
        )));
    }
    if fmt.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "only mono is supported, file has {} channels",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::Format("sample rate of zero".into()));
    }
    if data.len() % 2 != 0 {
        return Err(Error::Format("data chunk has odd length".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / PCM_SCALE)
        .collect();
    Ok(AudioSignal {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

/// Quantizes to PCM16 (round to nearest, clipped) and writes a mono WAVE file.
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    fs::write(path, encode_wav(signal)).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_wav(signal: &AudioSignal) -> Vec<u8> {
    let data_len = (signal.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &signal.samples {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
