//! Separate two panned tones with the multichannel Wiener filter given oracle
//! magnitudes, and check that the estimates add back up to the mixture.

use d3net::separation::{mwf, sdr, MwfConfig};
use d3net::spectral::{istft, stft, AudioClip, StftConfig};

fn tone(sr: u32, len: usize, freq: f64, pan: f64) -> d3net::Result<AudioClip> {
    let s: Vec<f64> = (0..len)
        .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(sr)).sin())
        .collect();
    AudioClip::new(
        sr,
        vec![
            s.iter().map(|v| v * pan).collect(),
            s.iter().map(|v| v * (1.0 - pan)).collect(),
        ],
    )
}

fn main() -> d3net::Result<()> {
    let (sr, len) = (16_000, 48_000);
    let a = tone(sr, len, 220.0, 0.8)?;
    let b = tone(sr, len, 1760.0, 0.3)?;
    let mix = AudioClip::sum([&a, &b])?;
    let cfg = StftConfig { window: 1024, hop: 256 };
    let x = stft(&mix, cfg)?;
    let oracle = [stft(&a, cfg)?.magnitude(), stft(&b, cfg)?.magnitude()];
    let est = mwf(&x, &oracle, MwfConfig::default())?;

    let worst = x
        .data
        .iter()
        .enumerate()
        .map(|(k, xv)| (est[0].data[k] + est[1].data[k] - xv).norm() / xv.norm().max(1e-300))
        .fold(0.0, f64::max);
    println!("largest relative conservation error over all bins: {worst:.2e}");
    for (name, (e, r)) in ["220 Hz", "1760 Hz"].iter().zip(est.iter().zip([&a, &b])) {
        println!("{name}: SDR {:.1} dB", sdr(&istft(e)?, r)?);
    }
    Ok(())
}
