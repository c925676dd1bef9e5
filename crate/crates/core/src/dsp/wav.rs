//! Minimal WAV ingestion and export.
//!
//! Reads mono PCM 16-bit and IEEE-float 32-bit files; anything else is
//! rejected with an explicit error. Writes either format. Unknown RIFF
//! chunks are skipped on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path)
        .map_err(|e| Error::NotFound(format!("cannot open {}: {e}", path.display())))?;
    read_wav_from(BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_wav_from<R: Read>(mut r: R) -> Result<Waveform> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None; // (audio_format, channels, rate, bits)
    let mut data: Option<Vec<u8>> = None;
    let mut chunk_header = [0u8; 8];
    loop {
        match r.read_exact(&mut chunk_header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id = [chunk_header[0], chunk_header[1], chunk_header[2], chunk_header[3]];
        let size = u32::from_le_bytes([chunk_header[4], chunk_header[5], chunk_header[6], chunk_header[7]]) as usize;
        let padded = size + (size & 1); // RIFF chunks are word-aligned
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk too small".into()));
                }
                let mut body = vec![0u8; padded];
                r.read_exact(&mut body)?;
                format = Some((
                    u16::from_le_bytes([body[0], body[1]]),
                    u16::from_le_bytes([body[2], body[3]]),
                    u32::from_le_bytes([body[4], body[5], body[6], body[7]]),
                    u16::from_le_bytes([body[14], body[15]]),
                ));
            }
            b"data" => {
                let mut body = vec![0u8; padded];
                r.read_exact(&mut body)?;
                body.truncate(size);
                data = Some(body);
            }
            _ => {
                let mut skip = vec![0u8; padded];
                r.read_exact(&mut skip)?;
            }
        }
        if format.is_some() && data.is_some() {
            break;
        }
    }

    let (audio_format, channels, sample_rate, bits) =
        format.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if channels != 1 {
        return Err(Error::Format(format!(
            "multichannel WAV not supported: got {channels} channels, need mono"
        )));
    }

    let samples = match (audio_format, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "unsupported WAV encoding: format {fmt}, {bits} bits (need PCM 16-bit or float 32-bit)"
            )))
        }
    };
    Waveform::new(samples, sample_rate)
}

/// Write a mono 32-bit IEEE-float WAV. Values outside [-1, 1] are preserved.
pub fn write_wav_f32(path: &Path, wave: &Waveform) -> Result<()> {
    let file = File::create(path)?;
    write_wav_f32_to(BufWriter::new(file), wave)
}

pub fn write_wav_f32_to<W: Write>(mut w: W, wave: &Waveform) -> Result<()> {
    let n = wave.len() as u32;
    let data_len = n * 4;
    // fmt (8+16) + fact (8+4) + data (8+len)
    let riff_len = 4 + 24 + 12 + 8 + data_len;
    w.write_all(b"RIFF")?;
    w.write_all(&riff_len.to_le_bytes())?;
    w.write_all(b"WAVE")?;
    write_fmt(&mut w, FORMAT_IEEE_FLOAT, wave.sample_rate(), 32)?;
    w.write_all(b"fact")?;
    w.write_all(&4u32.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in wave.samples() {
        w.write_all(&(s as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Write a mono 16-bit PCM WAV. Values are clamped to [-1, 1] and rounded.
pub fn write_wav_i16(path: &Path, wave: &Waveform) -> Result<()> {
    let file = File::create(path)?;
    write_wav_i16_to(BufWriter::new(file), wave)
}

pub fn write_wav_i16_to<W: Write>(mut w: W, wave: &Waveform) -> Result<()> {
    let n = wave.len() as u32;
    let data_len = n * 2;
    let riff_len = 4 + 24 + 8 + data_len;
    w.write_all(b"RIFF")?;
    w.write_all(&riff_len.to_le_bytes())?;
    w.write_all(b"WAVE")?;
    write_fmt(&mut w, FORMAT_PCM, wave.sample_rate(), 16)?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in wave.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_fmt<W: Write>(w: &mut W, audio_format: u16, sample_rate: u32, bits: u16) -> Result<()> {
    let block_align = bits / 8; // mono
    let byte_rate = sample_rate * block_align as u32;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&audio_format.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&block_align.to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    Ok(())
}
