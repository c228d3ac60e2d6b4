//! Synthetic two-source scenes used as a small stand-in for a music corpus.
//!
//! "tonal" stems are harmonic notes with vibrato and an ADSR envelope,
//! "percussive" stems are band-limited noise bursts with fast exponential
//! decay. Both stay below 650 Hz so a model looking at the lowest 64 bins of a
//! 4096-point STFT at 44.1 kHz sees all of their energy.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};
use crate::spectral::AudioClip;

pub const RECIPE: &str = "tonal-percussive-v1";
pub const SOURCES: [&str; 2] = ["tonal", "percussive"];
pub const SAMPLE_RATE: u32 = 44_100;
pub const SCENE_SECONDS: f64 = 6.0;
const TARGET_RMS: f64 = 0.1;
const BAND_HZ: (f64, f64) = (40.0, 650.0);

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub name: String,
    pub mixture: AudioClip,
    pub stems: Vec<(String, AudioClip)>,
    pub recipe: &'static str,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn stem(&self, source: &str) -> Option<&AudioClip> {
        self.stems.iter().find(|(n, _)| n == source).map(|(_, c)| c)
    }
}

/// Scenes `first..first + n` of the dataset identified by `seed`.
pub fn synth_range(seed: u64, first: usize, n: usize) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one scene"));
    }
    (first..first + n).map(|i| synth_scene(seed, i)).collect()
}

pub fn synth_dataset(seed: u64, n_scenes: usize) -> Result<Vec<SyntheticScene>> {
    synth_range(seed, 0, n_scenes)
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn synth_scene(seed: u64, index: usize) -> Result<SyntheticScene> {
    let mut rng = scene_rng(seed, index);
    let len = (SCENE_SECONDS * f64::from(SAMPLE_RATE)) as usize;
    let tonal = pan(&tonal_line(&mut rng, len), rng.gen_range(0.15..0.85));
    let percussive = pan(&percussive_line(&mut rng, len), rng.gen_range(0.15..0.85));
    let stems = vec![("tonal".to_string(), tonal), ("percussive".to_string(), percussive)];
    let mixture = AudioClip::sum(stems.iter().map(|(_, c)| c))?;
    Ok(SyntheticScene {
        name: format!("scene_{index:03}"),
        mixture,
        stems,
        recipe: RECIPE,
        seed,
    })
}

fn pan(mono: &[f64], position: f64) -> AudioClip {
    let rms = (mono.iter().map(|v| v * v).sum::<f64>() / mono.len() as f64).sqrt();
    let g = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    // constant-power pan
    let (l, r) = ((position * PI / 2.0).cos(), (position * PI / 2.0).sin());
    let left = mono.iter().map(|v| v * g * l * 2f64.sqrt()).collect();
    let right = mono.iter().map(|v| v * g * r * 2f64.sqrt()).collect();
    AudioClip::new(SAMPLE_RATE, vec![left, right]).expect("two equal-length channels")
}

fn adsr(t: f64, dur: f64) -> f64 {
    let (a, d, s, r) = (0.02, 0.1, 0.7, 0.1);
    let body = if t < a {
        t / a
    } else if t < a + d {
        1.0 - (1.0 - s) * (t - a) / d
    } else {
        s
    };
    let release = if t > dur - r { ((dur - t) / r).max(0.0) } else { 1.0 };
    body * release
}

fn tonal_line(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let mut out = vec![0.0; len];
    let mut start = (rng.gen_range(0.0..0.2) * sr) as usize;
    while start < len {
        let dur = rng.gen_range(0.4..1.2);
        let n = ((dur * sr) as usize).min(len - start);
        let f0 = rng.gen_range(90.0..200.0);
        let depth = rng.gen_range(0.005..0.015);
        let harmonics = (BAND_HZ.1 / (f0 * (1.0 + depth))).floor() as usize;
        let mut phase = 0.0;
        for i in 0..n {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + depth * (2.0 * PI * 5.0 * t).sin());
            phase += 2.0 * PI * f / sr;
            let env = adsr(t, dur);
            let v: f64 = (1..=harmonics).map(|h| (h as f64 * phase).sin() / h as f64).sum();
            out[start + i] += env * v;
        }
        start += n + (rng.gen_range(0.0..0.15) * sr) as usize;
    }
    out
}

/// Zero every FFT bin outside `band` (in Hz).
fn band_limit(signal: &mut [f64], band: (f64, f64)) {
    let n = signal.len();
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let hz = f64::from(SAMPLE_RATE) / n as f64;
    for (k, z) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * hz;
        if f < band.0 || f > band.1 {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (s, z) in signal.iter_mut().zip(&buf) {
        *s = z.re / n as f64;
    }
}

fn percussive_line(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let mut noise: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    band_limit(&mut noise, BAND_HZ);
    let mut env = vec![0.0; len];
    let mut onset = rng.gen_range(0.0..0.25) * sr;
    while (onset as usize) < len {
        let tau = rng.gen_range(0.02..0.06) * sr;
        let amp = rng.gen_range(0.5..1.0);
        let start = onset as usize;
        let attack = 0.001 * sr;
        for (i, e) in env[start..len.min(start + (8.0 * tau) as usize)].iter_mut().enumerate() {
            let x = i as f64;
            let a = if x < attack { x / attack } else { 1.0 };
            *e += amp * a * (-x / tau).exp();
        }
        onset += rng.gen_range(0.12..0.4) * sr;
    }
    noise.iter().zip(&env).map(|(n, e)| n * e).collect()
}

/// Mean spectral flatness (geometric over arithmetic mean of power) of the
/// louder half of the frames, measured over STFT bins in `bins`.
pub fn spectral_flatness(clip: &AudioClip, window: usize, bins: std::ops::Range<usize>) -> Result<f64> {
    let cfg = crate::spectral::StftConfig {
        window,
        hop: window / 4,
    };
    let spec = crate::spectral::stft(clip, cfg)?;
    let mut frames: Vec<(f64, f64)> = (0..spec.frames)
        .map(|t| {
            let p: Vec<f64> = bins
                .clone()
                .map(|f| (0..spec.channels).map(|c| spec.at(c, t, f).norm_sqr()).sum::<f64>() + 1e-20)
                .collect();
            let arith = p.iter().sum::<f64>() / p.len() as f64;
            let geo = (p.iter().map(|v| v.ln()).sum::<f64>() / p.len() as f64).exp();
            (arith, geo / arith)
        })
        .collect();
    frames.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = &frames[..frames.len().div_ceil(2)];
    Ok(top.iter().map(|f| f.1).sum::<f64>() / top.len() as f64)
}
