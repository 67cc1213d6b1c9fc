use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Decodes a RIFF/WAV byte stream (PCM 8/16/24-bit or 32-bit float, mono or
/// stereo), averages channels and resamples to `target_rate`.
pub fn load_audio(bytes: &[u8], target_rate: u32) -> Result<AudioBuffer> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedCodec(format!(
            "{} channels",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(map_hound)?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedCodec(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(Error::ZeroLength);
    }
    let channels = spec.channels as usize;
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(Error::ZeroLength);
    }
    let samples = if spec.sample_rate == target_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate, target_rate)
    };
    AudioBuffer::new(samples, target_rate)
}

pub fn load_audio_file(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_audio(&bytes, target_rate)
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::MalformedWav(io.to_string()),
        hound::Error::FormatError(msg) => Error::MalformedWav(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedCodec("unsupported WAV feature".into()),
        other => Error::MalformedWav(other.to_string()),
    }
}

/// Encodes the buffer as mono 16-bit little-endian PCM.
///
/// Samples map to `round(x · 32768)` clamped to the i16 range, the inverse of the
/// `v / 32768` used by [`load_audio`], so 16-bit files survive a round trip bit-exactly.
pub fn write_wav(audio: &AudioBuffer) -> Vec<u8> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::with_capacity(44 + audio.samples.len() * 2));
    {
        let mut writer = WavWriter::new(&mut cursor, spec).expect("in-memory WAV header");
        let mut pcm = writer.get_i16_writer(audio.samples.len() as u32);
        for &s in &audio.samples {
            pcm.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16);
        }
        pcm.flush().expect("in-memory WAV body");
        writer.finalize().expect("in-memory WAV finalize");
    }
    cursor.into_inner()
}

pub fn write_wav_file(audio: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_wav(audio)).map_err(|e| Error::io(path, e))
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 24.0;
const RESAMPLE_KAISER_BETA: f64 = 9.0;
const RESAMPLE_ROLLOFF: f64 = 0.94;

/// Band-limited resampling by Kaiser-windowed sinc interpolation.
///
/// The kernel cutoff sits at `0.94 ×` the lower of the two Nyquist rates, so
/// downsampling removes aliases before decimation.
pub fn resample(input: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (input.len() as f64 * ratio).round() as usize;
    // cutoff as a fraction of the input Nyquist
    let cutoff = RESAMPLE_ROLLOFF * ratio.min(1.0);
    let half_width = RESAMPLE_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);

    (0..out_len)
        .map(|m| {
            let pos = m as f64 / ratio;
            let lo = (pos - half_width).ceil().max(0.0) as usize;
            let hi = ((pos + half_width).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let u = pos - k as f64;
                let r = u / half_width;
                let w = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += x * cutoff * sinc(cutoff * u) * w;
            }
            acc
        })
        .collect()
}

pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn pcm16_wav(samples: &[i16], rate: u32, channels: u16) -> Vec<u8> {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut cursor = Cursor::new(Vec::new());
        let mut w = WavWriter::new(&mut cursor, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        cursor.into_inner()
    }

    #[test]
    fn one_second_mono_16k_is_not_resampled() {
        let samples: Vec<i16> = (0..16_000).map(|i| ((i % 100) * 50) as i16).collect();
        let audio = load_audio(&pcm16_wav(&samples, 16_000, 1), 16_000).unwrap();
        assert_eq!(audio.len(), 16_000);
        assert_eq!(audio.sample_rate, 16_000);
    }

    #[test]
    fn stereo_48k_sine_resamples_with_high_snr() {
        let n = 24_000;
        let mut interleaved = Vec::with_capacity(2 * n);
        for i in 0..n {
            let v = (0.5 * (2.0 * PI * 1000.0 * i as f64 / 48_000.0).sin() * 32767.0).round() as i16;
            interleaved.push(v);
            interleaved.push(v);
        }
        let audio = load_audio(&pcm16_wav(&interleaved, 48_000, 2), 16_000).unwrap();
        assert_eq!(audio.len(), 8000);
        // analytic oracle: the same sine generated directly at 16 kHz
        let edge = 160;
        let (mut sig, mut err) = (0.0, 0.0);
        for (i, &y) in audio.samples.iter().enumerate().take(8000 - edge).skip(edge) {
            let r = 0.5 * (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin();
            sig += r * r;
            err += (y - r) * (y - r);
        }
        let snr = 10.0 * (sig / err).log10();
        assert!(snr >= 40.0, "snr {snr}");
    }

    #[test]
    fn empty_payload_is_rejected() {
        assert!(matches!(
            load_audio(&pcm16_wav(&[], 16_000, 1), 16_000),
            Err(Error::ZeroLength)
        ));
    }

    #[test]
    fn garbage_header_is_malformed() {
        assert!(matches!(
            load_audio(b"RIFFnope", 16_000),
            Err(Error::MalformedWav(_))
        ));
    }

    #[test]
    fn float_and_24_bit_inputs_decode() {
        for (fmt, bits) in [(SampleFormat::Float, 32u16), (SampleFormat::Int, 24)] {
            let spec = WavSpec {
                channels: 1,
                sample_rate: 16_000,
                bits_per_sample: bits,
                sample_format: fmt,
            };
            let mut cursor = Cursor::new(Vec::new());
            let mut w = WavWriter::new(&mut cursor, spec).unwrap();
            for _ in 0..10 {
                match fmt {
                    SampleFormat::Float => w.write_sample(0.25f32).unwrap(),
                    SampleFormat::Int => w.write_sample(1i32 << 21).unwrap(),
                }
            }
            w.finalize().unwrap();
            let audio = load_audio(&cursor.into_inner(), 16_000).unwrap();
            assert!((audio.samples[3] - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn own_writer_round_trips_bit_exactly() {
        let pcm: Vec<i16> = (0..4000).map(|i| ((i * 7919) % 65536 - 32768) as i16).collect();
        let bytes = pcm16_wav(&pcm, 16_000, 1);
        let audio = load_audio(&bytes, 16_000).unwrap();
        let rewritten = write_wav(&audio);
        let again = load_audio(&rewritten, 16_000).unwrap();
        assert_eq!(audio, again);
        assert_eq!(bytes, rewritten);
    }
}
