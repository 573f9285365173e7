use super::Waveform;
use crate::{Error, Result, Scalar};
use std::fs;
use std::io::Write as _;
use std::path::Path;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Read a mono RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
/// When `expected_rate` is given, any other sample rate is rejected.
pub fn read_wav<T: Scalar>(path: &Path, expected_rate: Option<u32>) -> Result<Waveform<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::MalformedWav {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| malformed("chunk extends past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("no data chunk"))?;
    if channels != 1 {
        return Err(malformed(&format!("{channels} channels, expected mono")));
    }
    if let Some(expected) = expected_rate {
        if rate != expected {
            return Err(Error::SampleRate {
                path: path.to_path_buf(),
                found: rate,
                expected,
            });
        }
    }

    let samples: Vec<T> = match (format, bits) {
        (FORMAT_PCM, 16) => {
            if data.len() % 2 != 0 {
                return Err(malformed("odd PCM16 data size"));
            }
            data.chunks_exact(2)
                .map(|c| T::of(i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0))
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            if data.len() % 4 != 0 {
                return Err(malformed("float32 data size not a multiple of 4"));
            }
            data.chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect()
        }
        _ => {
            return Err(malformed(&format!(
                "unsupported encoding (format {format}, {bits}-bit)"
            )))
        }
    };
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(malformed("non-finite sample value"));
    }
    Waveform::new(samples, rate)
}

/// Write a mono 32-bit float RIFF/WAVE file.
pub fn write_wav<T: Scalar>(path: &Path, wave: &Waveform<T>) -> Result<()> {
    let n = wave.len();
    let data_size = 4 * n as u32;
    let riff_size = 4 + (8 + 16) + (8 + 4) + (8 + data_size as usize);

    let mut out = Vec::with_capacity(riff_size + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(riff_size as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");

    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate().to_le_bytes());
    let byte_rate = wave.sample_rate() * 4;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes()); // block align
    out.extend_from_slice(&32u16.to_le_bytes()); // bits per sample

    // Non-PCM encodings carry a fact chunk with the sample count.
    out.extend_from_slice(b"fact");
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());

    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in wave.samples() {
        out.extend_from_slice(&(s.as_f64() as f32).to_le_bytes());
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
