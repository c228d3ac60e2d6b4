//! Windowed signal-to-distortion ratio.
//!
//! This is the plain energy ratio `10 log10(|s|^2 / |s_hat - s|^2)` on
//! one-second windows, without the distortion-filter projection of BSS-eval.

use crate::error::{Error, Result};
use crate::spectral::AudioClip;

/// Value reported when the estimate matches the reference exactly.
pub const SDR_CAP_DB: f64 = 100.0;

/// Reference windows with less energy than this are treated as silent.
const SILENCE: f64 = 1e-20;

/// SDR of every non-silent one-second window (the whole clip if shorter).
pub fn window_sdrs(estimate: &AudioClip, reference: &AudioClip) -> Result<Vec<f64>> {
    estimate.check_compatible(reference)?;
    let len = reference.len();
    let win = (reference.sample_rate as usize).min(len).max(1);
    let mut out = Vec::new();
    for start in (0..len).step_by(win) {
        let end = start + win;
        if end > len && start > 0 {
            break;
        }
        let end = end.min(len);
        let (mut sig, mut err) = (0.0, 0.0);
        for (e, r) in estimate.channels.iter().zip(&reference.channels) {
            for i in start..end {
                sig += r[i] * r[i];
                err += (e[i] - r[i]).powi(2);
            }
        }
        if sig <= SILENCE {
            continue;
        }
        let db = if err == 0.0 {
            SDR_CAP_DB
        } else {
            (10.0 * (sig / err).log10()).min(SDR_CAP_DB)
        };
        out.push(db);
    }
    Ok(out)
}

/// Median over one-second windows.
pub fn sdr(estimate: &AudioClip, reference: &AudioClip) -> Result<f64> {
    median(&window_sdrs(estimate, reference)?).ok_or_else(|| Error::Audio("reference is silent in every window".into()))
}

/// Median of finite values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64, amp: f64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = (0..2)
            .map(|_| (0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        AudioClip::new(1000, ch).unwrap()
    }

    #[test]
    fn closed_forms() {
        let r = noise(5000, 0, 0.5);
        assert_eq!(sdr(&r, &r).unwrap(), SDR_CAP_DB);
        let half = r.scaled(0.5);
        assert!((sdr(&half, &r).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        let zero = r.scaled(0.0);
        assert!(sdr(&zero, &r).unwrap().abs() < 1e-12);
        assert_eq!(window_sdrs(&r, &r).unwrap().len(), 5);
    }

    #[test]
    fn silent_windows_are_skipped() {
        let mut r = noise(3000, 1, 0.5);
        for c in &mut r.channels {
            c[1000..2000].fill(0.0);
        }
        let e = r.scaled(0.5);
        assert_eq!(window_sdrs(&e, &r).unwrap().len(), 2);
        let silent = r.scaled(0.0);
        assert!(sdr(&e, &silent).is_err());
    }

    #[test]
    fn more_noise_means_lower_sdr() {
        let r = noise(4000, 2, 0.5);
        let n = noise(4000, 3, 1.0);
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let g = 0.05 * k as f64;
            let est = AudioClip::sum([&r, &n.scaled(g)]).unwrap();
            let s = sdr(&est, &r).unwrap();
            assert!(s < last);
            last = s;
        }
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
