//! Analyze and resynthesize a stereo chirp with the 4096-sample, 75%-overlap
//! STFT and report the reconstruction error.

use d3net::spectral::{istft, stft, AudioClip, StftConfig};

fn main() -> d3net::Result<()> {
    let sr = 44_100;
    let len = 3 * sr as usize;
    let chirp = |phase: f64| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let t = i as f64 / sr as f64;
                0.3 * (2.0 * std::f64::consts::PI * (100.0 * t + 400.0 * t * t) + phase).sin()
            })
            .collect()
    };
    let clip = AudioClip::new(sr, vec![chirp(0.0), chirp(1.0)])?;
    let cfg = StftConfig::default();
    let spec = stft(&clip, cfg)?;
    println!(
        "{} samples -> {} frames x {} bins per channel",
        clip.len(),
        spec.frames,
        spec.bins()
    );
    let back = istft(&spec)?;
    let (mut err, mut energy) = (0.0, 0.0);
    for (a, b) in clip.channels.iter().flatten().zip(back.channels.iter().flatten()) {
        err += (a - b) * (a - b);
        energy += a * a;
    }
    println!("relative reconstruction error {:.3e}", (err / energy).sqrt());
    Ok(())
}
