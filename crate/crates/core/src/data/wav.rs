//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads PCM 16/24-bit and 32-bit float, one or two channels; writes 32-bit
//! float so that a write/read round trip is bit-exact.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

fn read_exact_wav(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::MalformedWav(format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn u16le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Read a WAV file into per-channel `f64` buffers plus its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 12];
    read_exact_wav(&mut r, &mut hdr, "RIFF header")?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE signature".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut chunk_hdr = [0u8; 8];
        match r.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::Io(e)),
        }
        let id = &chunk_hdr[0..4];
        let size = u32le(&chunk_hdr[4..8]) as usize;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav("fmt chunk too small".into()));
                }
                let mut body = vec![0u8; size];
                read_exact_wav(&mut r, &mut body, "fmt chunk")?;
                fmt = Some((
                    u16le(&body[0..2]),
                    u16le(&body[2..4]),
                    u32le(&body[4..8]),
                    u16le(&body[14..16]),
                ));
            }
            b"data" => {
                let mut body = vec![0u8; size];
                read_exact_wav(&mut r, &mut body, "data chunk")?;
                data = Some(body);
            }
            _ => {
                // Skip unknown chunks (padded to even length).
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                read_exact_wav(&mut r, &mut sink, "chunk body")?;
                continue;
            }
        }
        if size & 1 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }

    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| Error::MalformedWav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedWav("no data chunk".into()))?;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedWav(format!("{channels} channels")));
    }
    let ch = channels as usize;
    let decode: fn(&[u8]) -> f64;
    let bytes_per_sample: usize;
    match (tag, bits) {
        (1, 16) => {
            bytes_per_sample = 2;
            decode = |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0;
        }
        (1, 24) => {
            bytes_per_sample = 3;
            decode = |b| {
                let raw = ((b[2] as i32) << 16 | (b[1] as i32) << 8 | b[0] as i32) << 8 >> 8;
                raw as f64 / 8_388_608.0
            };
        }
        (3, 32) => {
            bytes_per_sample = 4;
            decode = |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        (tag, bits) => {
            return Err(Error::UnsupportedWav(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    }
    let frame = bytes_per_sample * ch;
    if data.len() % frame != 0 {
        return Err(Error::MalformedWav(
            "data chunk is not a whole number of frames".into(),
        ));
    }
    let frames = data.len() / frame;
    let mut out = vec![Vec::with_capacity(frames); ch];
    for f in 0..frames {
        for c in 0..ch {
            let off = f * frame + c * bytes_per_sample;
            out[c].push(decode(&data[off..off + bytes_per_sample]));
        }
    }
    Ok((out, rate))
}

/// Read a WAV file and insist on an exact channel count.
pub fn read_wav_channels(path: &Path, expected: usize) -> Result<(Vec<Vec<f64>>, u32)> {
    let (buffers, rate) = read_wav(path)?;
    if buffers.len() != expected {
        return Err(Error::ChannelCount {
            expected,
            got: buffers.len(),
        });
    }
    Ok((buffers, rate))
}

/// Write per-channel buffers as 32-bit float WAV.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    if channels.is_empty() || channels.len() > 2 {
        return Err(Error::UnsupportedWav(format!(
            "{} channels on write",
            channels.len()
        )));
    }
    let frames = channels[0].len();
    if channels.iter().any(|c| c.len() != frames) {
        return Err(Error::InvalidInput(
            "write_wav: channels have different lengths".into(),
        ));
    }
    let ch = channels.len() as u32;
    let bits: u32 = 32;
    let byte_rate = sample_rate * ch * bits / 8;
    let block_align = (ch * bits / 8) as u16;
    let data_size = (frames as u32) * ch * bits / 8;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_size).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&3u16.to_le_bytes())?; // IEEE float
    w.write_all(&(ch as u16).to_le_bytes())?;
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&block_align.to_le_bytes())?;
    w.write_all(&(bits as u16).to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_size.to_le_bytes())?;
    for f in 0..frames {
        for c in channels {
            w.write_all(&(c[f] as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
