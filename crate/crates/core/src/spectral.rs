//! Audio I/O, STFT analysis and synthesis, and spectrogram patch tiling.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stereo audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        let clip = AudioClip { sample_rate, channels };
        clip.validate()?;
        Ok(clip)
    }

    pub fn silence(sample_rate: u32, channels: usize, len: usize) -> Self {
        AudioClip {
            sample_rate,
            channels: vec![vec![0.0; len]; channels],
        }
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.channels.first() else {
            return Err(Error::Audio("clip has no channels".into()));
        };
        if self.channels.iter().any(|c| c.len() != first.len()) {
            return Err(Error::Audio("channels have different lengths".into()));
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio sample".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate)
    }

    /// Sample-wise sum of clips with identical layout.
    pub fn sum<'a>(clips: impl IntoIterator<Item = &'a AudioClip>) -> Result<AudioClip> {
        let mut iter = clips.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| Error::invalid("cannot sum an empty set of clips"))?
            .clone();
        for c in iter {
            acc.check_compatible(c)?;
            for (a, b) in acc.channels.iter_mut().zip(&c.channels) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        Ok(acc)
    }

    pub fn check_compatible(&self, other: &AudioClip) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::Audio(format!(
                "sample rate mismatch: {} Hz vs {} Hz",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.num_channels() != other.num_channels() || self.len() != other.len() {
            return Err(Error::Audio(format!(
                "layout mismatch: {}x{} vs {}x{} (channels x samples)",
                self.num_channels(),
                self.len(),
                other.num_channels(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            sample_rate: self.sample_rate,
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|v| v * gain).collect())
                .collect(),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> AudioClip {
        let end = (start + len).min(self.len());
        AudioClip {
            sample_rate: self.sample_rate,
            channels: self.channels.iter().map(|c| c[start.min(end)..end].to_vec()).collect(),
        }
    }
}

/// Sample format used when writing WAV files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PcmBits {
    #[default]
    Sixteen,
    ThirtyTwo,
}

/// Read 16- or 32-bit integer PCM with one or two channels; mono is
/// duplicated into both stereo channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::from(other),
    })?;
    let spec = reader.spec();
    let scale = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => 32768.0,
        (hound::SampleFormat::Int, 32) => 2147483648.0,
        (hound::SampleFormat::Int, b) => {
            return Err(Error::UnsupportedEncoding(format!("{b}-bit integer PCM")));
        }
        (hound::SampleFormat::Float, b) => {
            return Err(Error::UnsupportedEncoding(format!("{b}-bit IEEE float")));
        }
    };
    let ch = usize::from(spec.channels);
    if !(1..=2).contains(&ch) {
        return Err(Error::UnsupportedEncoding(format!("{ch} channels")));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .samples::<i32>()
        .map(|s| s.map(|v| f64::from(v) / scale))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    if samples.len() != expected {
        return Err(Error::Audio(format!(
            "{}: truncated data ({} of {expected} samples)",
            path.display(),
            samples.len()
        )));
    }
    let frames = samples.len() / ch;
    let mut channels = vec![Vec::with_capacity(frames); ch];
    for frame in samples.chunks_exact(ch) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    if ch == 1 {
        channels.push(channels[0].clone());
    }
    AudioClip::new(spec.sample_rate, channels)
}

/// Write integer PCM; samples are clipped to the representable range.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>, bits: PcmBits) -> Result<()> {
    clip.validate()?;
    let (bits_per_sample, scale, lo, hi) = match bits {
        PcmBits::Sixteen => (16, 32768.0, -32768.0, 32767.0),
        PcmBits::ThirtyTwo => (32, 2147483648.0, -2147483648.0, 2147483647.0),
    };
    let spec = hound::WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..clip.len() {
        for c in &clip.channels {
            let v = (c[i] * scale).round().clamp(lo, hi);
            match bits {
                PcmBits::Sixteen => w.write_sample(v as i16)?,
                PcmBits::ThirtyTwo => w.write_sample(v as i32)?,
            }
        }
    }
    w.finalize()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    /// 4096-sample windows with 75% overlap.
    fn default() -> Self {
        StftConfig {
            window: 4096,
            hop: 1024,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Frame count for a signal of `len` samples: `len / hop + 1`.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Signal length that yields exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop
    }

    fn validate(&self) -> Result<()> {
        if self.window < 2 || !self.window.is_multiple_of(2) || self.hop == 0 || self.hop > self.window / 2 {
            return Err(Error::invalid(format!(
                "STFT needs an even window and 0 < hop <= window/2, got {}/{}",
                self.window, self.hop
            )));
        }
        Ok(())
    }

    /// Periodic square-root Hann window.
    pub fn window_fn(&self) -> Vec<f64> {
        let n = self.window as f64;
        (0..self.window)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()).sqrt())
            .collect()
    }
}

/// Complex spectrogram `[channels, frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stft {
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length of the analysed signal, restored by [`istft`].
    pub signal_len: usize,
    pub channels: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Stft {
    pub fn zeros_like(other: &Stft) -> Stft {
        Stft {
            data: vec![Complex64::new(0.0, 0.0); other.data.len()],
            ..other.clone()
        }
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn index(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.frames + t) * self.bins() + f
    }

    pub fn at(&self, c: usize, t: usize, f: usize) -> Complex64 {
        self.data[self.index(c, t, f)]
    }

    /// Magnitudes as a `[channels, frames, bins]` tensor.
    pub fn magnitude(&self) -> Tensor {
        Tensor::new(
            &[self.channels, self.frames, self.bins()],
            self.data.iter().map(|z| z.norm()).collect(),
        )
        .expect("consistent stft layout")
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Mirror an out-of-range index back into `0..len` (no edge repeat).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Analysis with a square-root Hann window and orthonormal FFT scaling. The
/// signal is reflect-padded by half a window on both sides, so frame `t` is
/// centred on sample `t * hop`.
pub fn stft(clip: &AudioClip, config: StftConfig) -> Result<Stft> {
    config.validate()?;
    clip.validate()?;
    let len = clip.len();
    if len == 0 {
        return Err(Error::invalid("cannot analyse an empty clip"));
    }
    let (n, half, bins) = (config.window, config.window / 2, config.bins());
    let frames = config.frames(len);
    let window = config.window_fn();
    let plans = plans(n);
    let norm = 1.0 / (n as f64).sqrt();
    let mut data = Vec::with_capacity(clip.num_channels() * frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];
    for ch in &clip.channels {
        for t in 0..frames {
            let start = (t * config.hop) as isize - half as isize;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(ch[reflect(start + j as isize, len)] * window[j], 0.0);
            }
            plans.forward.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..bins].iter().map(|z| z * norm));
        }
    }
    Ok(Stft {
        config,
        sample_rate: clip.sample_rate,
        signal_len: len,
        channels: clip.num_channels(),
        frames,
        data,
    })
}

/// Weighted overlap-add synthesis, normalized by the summed squared window
/// actually applied at every sample.
pub fn istft(spec: &Stft) -> Result<AudioClip> {
    let config = spec.config;
    config.validate()?;
    let (n, half, bins) = (config.window, config.window / 2, config.bins());
    if spec.data.len() != spec.channels * spec.frames * bins {
        return Err(Error::invalid("stft data does not match its declared layout"));
    }
    let window = config.window_fn();
    let plans = plans(n);
    let norm = 1.0 / (n as f64).sqrt();
    let padded = (spec.frames - 1) * config.hop + n;
    let mut envelope = vec![0.0; padded];
    for t in 0..spec.frames {
        for (j, w) in window.iter().enumerate() {
            envelope[t * config.hop + j] += w * w;
        }
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.inverse.get_inplace_scratch_len()];
    let mut channels = Vec::with_capacity(spec.channels);
    for c in 0..spec.channels {
        let mut acc = vec![0.0; padded];
        for t in 0..spec.frames {
            let row = &spec.data[spec.index(c, t, 0)..spec.index(c, t, 0) + bins];
            buf[..bins].copy_from_slice(row);
            // Hermitian completion; DC and Nyquist must be real.
            buf[0].im = 0.0;
            buf[half].im = 0.0;
            for k in 1..half {
                buf[n - k] = row[k].conj();
            }
            plans.inverse.process_with_scratch(&mut buf, &mut scratch);
            for (j, z) in buf.iter().enumerate() {
                acc[t * config.hop + j] += z.re * norm * window[j];
            }
        }
        let out = (0..spec.signal_len)
            .map(|i| {
                let e = envelope[i + half];
                if e > 1e-10 {
                    acc[i + half] / e
                } else {
                    0.0
                }
            })
            .collect();
        channels.push(out);
    }
    AudioClip::new(spec.sample_rate, channels)
}

/// A window of spectrogram frames and where it sits in the parent.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramPatch {
    pub offset: usize,
    /// `[channels, patch_frames, bins]`; frames past the parent's end are zero.
    pub data: Tensor,
}

fn copy_frames(plane: &Tensor, offset: usize, frames: usize) -> Result<Tensor> {
    let [c, t, f] = dims3(plane)?;
    let mut out = Tensor::zeros(&[c, frames, f]);
    let avail = t.saturating_sub(offset).min(frames);
    for ci in 0..c {
        let src = &plane.data()[(ci * t + offset) * f..(ci * t + offset + avail) * f];
        out.data_mut()[ci * frames * f..ci * frames * f + avail * f].copy_from_slice(src);
    }
    Ok(out)
}

fn dims3(x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [c, t, f] => Ok([c, t, f]),
        _ => Err(Error::invalid(format!(
            "expected a [channels, frames, bins] plane, got {:?}",
            x.shape()
        ))),
    }
}

/// Tile `plane` (`[channels, frames, bins]`) into patches starting every
/// `hop_frames`, until a patch reaches the last frame.
pub fn patchify(plane: &Tensor, patch_frames: usize, hop_frames: usize) -> Result<Vec<SpectrogramPatch>> {
    if patch_frames == 0 || hop_frames == 0 || hop_frames > patch_frames {
        return Err(Error::invalid(format!(
            "patching needs 0 < hop ({hop_frames}) <= patch length ({patch_frames})"
        )));
    }
    let [_, t, _] = dims3(plane)?;
    let mut out = Vec::new();
    let mut offset = 0;
    loop {
        out.push(SpectrogramPatch {
            offset,
            data: copy_frames(plane, offset, patch_frames)?,
        });
        if offset + patch_frames >= t {
            return Ok(out);
        }
        offset += hop_frames;
    }
}

/// Average overlapping patches back into a `[channels, frames, bins]` plane.
pub fn overlap_merge(patches: &[SpectrogramPatch], frames: usize) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::invalid("no patches to merge"))?;
    let [c, p, f] = dims3(&first.data)?;
    let mut sum = Tensor::zeros(&[c, frames, f]);
    let mut count = vec![0usize; frames];
    for patch in patches {
        if dims3(&patch.data)? != [c, p, f] {
            return Err(Error::ShapeMismatch {
                op: "overlap_merge",
                left: first.data.shape().to_vec(),
                right: patch.data.shape().to_vec(),
            });
        }
        for ti in 0..p {
            let t = patch.offset + ti;
            if t >= frames {
                break;
            }
            count[t] += 1;
            for ci in 0..c {
                let src = &patch.data.data()[(ci * p + ti) * f..(ci * p + ti + 1) * f];
                let dst = &mut sum.data_mut()[(ci * frames + t) * f..(ci * frames + t + 1) * f];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    if let Some(t) = count.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("frame {t} is not covered by any patch")));
    }
    for ci in 0..c {
        for (t, &n) in count.iter().enumerate() {
            for v in &mut sum.data_mut()[(ci * frames + t) * f..(ci * frames + t + 1) * f] {
                *v /= n as f64;
            }
        }
    }
    Ok(sum)
}

/// A patch at a uniformly random offset (zero-padded when the plane is short).
pub fn random_patch<R: Rng + ?Sized>(plane: &Tensor, patch_frames: usize, rng: &mut R) -> Result<SpectrogramPatch> {
    let [_, t, _] = dims3(plane)?;
    let offset = if t > patch_frames {
        rng.gen_range(0..=t - patch_frames)
    } else {
        0
    };
    Ok(SpectrogramPatch {
        offset,
        data: copy_frames(plane, offset, patch_frames)?,
    })
}

/// Energy of every analysis frame in the time domain and in the spectrum,
/// for checking Parseval consistency.
pub fn frame_energies(clip: &AudioClip, spec: &Stft) -> Vec<(f64, f64)> {
    let config = spec.config;
    let (n, half, bins) = (config.window, config.window / 2, config.bins());
    let window = config.window_fn();
    let len = clip.len();
    let mut out = Vec::new();
    for (c, ch) in clip.channels.iter().enumerate() {
        for t in 0..spec.frames {
            let start = (t * config.hop) as isize - half as isize;
            let time: f64 = (0..n)
                .map(|j| (ch[reflect(start + j as isize, len)] * window[j]).powi(2))
                .sum();
            let row = &spec.data[spec.index(c, t, 0)..spec.index(c, t, 0) + bins];
            let freq =
                row[0].norm_sqr() + row[half].norm_sqr() + 2.0 * row[1..half].iter().map(|z| z.norm_sqr()).sum::<f64>();
            out.push((time, freq));
        }
    }
    out
}
