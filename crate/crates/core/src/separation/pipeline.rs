//! Mixture-to-stems inference, dataset directories and SDR scoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::spectral::{
    istft, overlap_merge, patchify, read_wav, stft, write_wav, AudioClip, PcmBits, SpectrogramPatch, StftConfig,
};
use crate::tensor::Tensor;

use super::mwf::{mwf, MwfConfig};
use super::sdr::{median, sdr};
use super::synth::SyntheticScene;

/// Patch length used when a checkpoint does not record one.
pub const DEFAULT_PATCH_FRAMES: usize = 256;
/// Patches evaluated per forward pass.
const INFER_BATCH: usize = 4;

pub fn source_name(model: &Model, index: usize) -> String {
    model.meta.source.clone().unwrap_or_else(|| format!("source{index}"))
}

/// Magnitude estimate `[2, frames, bins]` for a mixture magnitude plane of the
/// same shape, tiled into half-overlapping patches.
pub fn estimate_magnitude(model: &Model, mixture_mag: &Tensor) -> Result<Tensor> {
    let (c, frames, bins) = match *mixture_mag.shape() {
        [c, t, f] => (c, t, f),
        _ => return Err(Error::invalid("magnitude plane must be [channels, frames, bins]")),
    };
    let (_, hi) = model.modeled_range();
    if bins < hi {
        return Err(Error::invalid(format!(
            "mixture has {bins} bins, the network needs {hi}"
        )));
    }
    let p = model.meta.patch_frames.unwrap_or(DEFAULT_PATCH_FRAMES);
    // Only the modeled bins are fed to the network; the rest of the output is zero anyway.
    let narrow = Tensor::from_fn(&[c, frames, hi], |i| {
        let (row, f) = (i / hi, i % hi);
        mixture_mag.data()[row * bins + f]
    });
    let patches = patchify(&narrow, p, (p / 2).max(1))?;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFER_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * c * p * hi);
        for patch in chunk {
            data.extend_from_slice(patch.data.data());
        }
        let y = model.infer(&Tensor::new(&[chunk.len(), c, p, hi], data)?)?;
        let per = c * p * hi;
        for (k, patch) in chunk.iter().enumerate() {
            out.push(SpectrogramPatch {
                offset: patch.offset,
                data: Tensor::new(&[c, p, hi], y.data()[k * per..(k + 1) * per].to_vec())?,
            });
        }
    }
    let merged = overlap_merge(&out, frames)?;
    Ok(Tensor::from_fn(&[c, frames, bins], |i| {
        let (row, f) = (i / bins, i % bins);
        if f < hi {
            merged.data()[row * hi + f]
        } else {
            0.0
        }
    }))
}

/// Separate `mixture` with one network per source, then refine with the
/// multichannel Wiener filter. Returns `(source, stem)` pairs.
pub fn separate(mixture: &AudioClip, models: &[Model], stft_config: StftConfig) -> Result<Vec<(String, AudioClip)>> {
    if models.is_empty() {
        return Err(Error::invalid("separation needs at least one network"));
    }
    if mixture.num_channels() != 2 {
        return Err(Error::ChannelMismatch {
            op: "separate",
            expected: 2,
            actual: mixture.num_channels(),
        });
    }
    let names: Vec<String> = models.iter().enumerate().map(|(i, m)| source_name(m, i)).collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::invalid(format!("two networks both estimate '{n}'")));
        }
    }
    for (m, n) in models.iter().zip(&names) {
        if let Some(sr) = m.meta.sample_rate {
            if sr != mixture.sample_rate {
                return Err(Error::Audio(format!(
                    "network for '{n}' was trained at {sr} Hz, mixture is {} Hz",
                    mixture.sample_rate
                )));
            }
        }
    }
    let spec = stft(mixture, stft_config)?;
    let mag = spec.magnitude();
    let estimates = models
        .iter()
        .map(|m| estimate_magnitude(m, &mag))
        .collect::<Result<Vec<_>>>()?;
    let complex = mwf(&spec, &estimates, MwfConfig::default())?;
    names
        .into_iter()
        .zip(complex)
        .map(|(n, s)| Ok((n, istft(&s)?)))
        .collect()
}

/// Contents of one `scene_<id>` directory.
#[derive(Clone, Debug)]
pub struct SceneFiles {
    pub name: String,
    pub mixture: Option<AudioClip>,
    pub stems: Vec<(String, AudioClip)>,
}

pub const MIXTURE_FILE: &str = "mixture.wav";

pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<PathBuf> {
    let d = dir.join(&scene.name);
    fs::create_dir_all(&d)?;
    write_wav(&scene.mixture, d.join(MIXTURE_FILE), PcmBits::Sixteen)?;
    for (n, clip) in &scene.stems {
        write_wav(clip, d.join(format!("{n}.wav")), PcmBits::Sixteen)?;
    }
    Ok(d)
}

pub fn write_stems(dir: &Path, stems: &[(String, AudioClip)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (n, clip) in stems {
        write_wav(clip, dir.join(format!("{n}.wav")), PcmBits::Sixteen)?;
    }
    Ok(())
}

fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Audio(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!(
            "{} contains no scene_<id> directories",
            root.display()
        )));
    }
    Ok(dirs)
}

/// Read every `scene_<id>` directory below `root`. Every `*.wav` other than
/// `mixture.wav` is a stem named after its file stem.
pub fn read_dataset(root: &Path) -> Result<Vec<SceneFiles>> {
    scene_dirs(root)?
        .into_iter()
        .map(|d| {
            let name = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let mut wavs: Vec<PathBuf> = fs::read_dir(&d)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "wav"))
                .collect();
            wavs.sort();
            let mut scene = SceneFiles {
                name,
                mixture: None,
                stems: Vec::new(),
            };
            for w in wavs {
                let clip = read_wav(&w)?;
                let stem = w.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                if w.file_name().is_some_and(|n| n == MIXTURE_FILE) {
                    scene.mixture = Some(clip);
                } else {
                    scene.stems.push((stem, clip));
                }
            }
            Ok(scene)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub scene: String,
    pub source: String,
    /// `estimate`, or `mixture` for the mixture-as-estimate baseline.
    pub method: String,
    pub sdr_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "scene,source,method,sdr_db";

    pub fn push(&mut self, scene: &str, source: &str, method: &str, sdr_db: f64) {
        self.rows.push(EvalRow {
            scene: scene.into(),
            source: source.into(),
            method: method.into(),
            sdr_db,
        });
    }

    /// Score one estimate and, when given, the mixture baseline.
    pub fn score(
        &mut self,
        scene: &str,
        source: &str,
        estimate: &AudioClip,
        reference: &AudioClip,
        mixture: Option<&AudioClip>,
    ) -> Result<()> {
        let s = sdr(estimate, reference).map_err(|e| Error::Audio(format!("{scene}/{source}: {e}")))?;
        self.push(scene, source, "estimate", s);
        if let Some(mix) = mixture {
            let b = sdr(mix, reference).map_err(|e| Error::Audio(format!("{scene}/{source}: {e}")))?;
            self.push(scene, source, "mixture", b);
        }
        Ok(())
    }

    /// Median over scenes, per `(source, method)`.
    pub fn medians(&self) -> BTreeMap<(String, String), f64> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.source.clone(), r.method.clone()))
                .or_default()
                .push(r.sdr_db);
        }
        groups
            .into_iter()
            .filter_map(|(k, v)| median(&v).map(|m| (k, m)))
            .collect()
    }

    pub fn median(&self, source: &str, method: &str) -> Option<f64> {
        self.medians().get(&(source.to_string(), method.to_string())).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s += &format!("{},{},{},{:.4}\n", r.scene, r.source, r.method, r.sdr_db);
        }
        for ((source, method), m) in self.medians() {
            s += &format!("median,{source},{method},{m:.4}\n");
        }
        s
    }
}

/// Compare `est_root/scene_<id>/<source>.wav` against the same files under
/// `ref_root`. When the reference scene has a `mixture.wav`, the
/// mixture-as-estimate baseline is scored too.
pub fn evaluate_dirs(est_root: &Path, ref_root: &Path) -> Result<EvalReport> {
    let refs = read_dataset(ref_root)?;
    let mut missing = Vec::new();
    for r in &refs {
        let d = est_root.join(&r.name);
        for (src, _) in &r.stems {
            let p = d.join(format!("{src}.wav"));
            if !p.is_file() {
                missing.push(format!("{}/{src}.wav", r.name));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "estimates missing for {} stem(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut report = EvalReport::default();
    for r in &refs {
        for (src, reference) in &r.stems {
            let est = read_wav(est_root.join(&r.name).join(format!("{src}.wav")))?;
            report.score(&r.name, src, &est, reference, r.mixture.as_ref())?;
        }
    }
    Ok(report)
}

/// Separate every scene in memory and score the result.
pub fn evaluate_scenes(models: &[Model], scenes: &[SyntheticScene], stft_config: StftConfig) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for scene in scenes {
        let stems = separate(&scene.mixture, models, stft_config)?;
        for (src, est) in &stems {
            let reference = scene
                .stem(src)
                .ok_or_else(|| Error::invalid(format!("{} has no '{src}' stem", scene.name)))?;
            report.score(&scene.name, src, est, reference, Some(&scene.mixture))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::builtin;
    use crate::separation::synth::synth_scene;

    fn short_scene(index: usize) -> SyntheticScene {
        let mut s = synth_scene(0, index).unwrap();
        let len = 44_100;
        s.mixture = s.mixture.slice(0, len);
        for (_, c) in &mut s.stems {
            *c = c.slice(0, len);
        }
        s
    }

    fn untrained(source: &str, seed: u64) -> Model {
        let mut m = Model::build(&builtin::builtin("tiny").unwrap(), seed).unwrap();
        m.meta.source = Some(source.into());
        m.meta.patch_frames = Some(16);
        m.meta.sample_rate = Some(44_100);
        m
    }

    #[test]
    fn untrained_models_still_conserve_the_mixture() {
        let scene = short_scene(0);
        let models = [untrained("tonal", 1), untrained("percussive", 2)];
        let stems = separate(&scene.mixture, &models, StftConfig::default()).unwrap();
        assert_eq!(stems.len(), 2);
        assert_eq!(stems[0].0, "tonal");
        let total = AudioClip::sum(stems.iter().map(|(_, c)| c)).unwrap();
        assert_eq!(total.len(), scene.mixture.len());
        let err = total
            .channels
            .iter()
            .flatten()
            .zip(scene.mixture.channels.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn estimate_covers_every_frame_and_zeroes_unmodeled_bins() {
        let m = untrained("tonal", 0);
        let mag = Tensor::from_fn(&[2, 37, 80], |i| (i % 7) as f64 * 0.1);
        let est = estimate_magnitude(&m, &mag).unwrap();
        assert_eq!(est.shape(), &[2, 37, 80]);
        assert!(est.data().iter().enumerate().all(|(i, v)| i % 80 < 64 || *v == 0.0));
        assert!(est.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn separation_checks_inputs() {
        let scene = short_scene(1);
        let mono = AudioClip::new(44_100, vec![scene.mixture.channels[0].clone()]).unwrap();
        let models = [untrained("tonal", 1)];
        assert!(matches!(
            separate(&mono, &models, StftConfig::default()),
            Err(Error::ChannelMismatch { .. })
        ));
        let mut slow = scene.mixture.clone();
        slow.sample_rate = 22_050;
        assert!(separate(&slow, &models, StftConfig::default()).is_err());
        let twins = [untrained("tonal", 1), untrained("tonal", 2)];
        assert!(separate(&scene.mixture, &twins, StftConfig::default()).is_err());
    }

    #[test]
    fn directory_round_trip_and_eval() {
        let tmp = tempfile::tempdir().unwrap();
        let (refs, ests) = (tmp.path().join("ref"), tmp.path().join("est"));
        let scenes = [short_scene(0), short_scene(1)];
        for s in &scenes {
            write_scene(&refs, s).unwrap();
            // the references themselves as estimates
            write_stems(&ests.join(&s.name), &s.stems).unwrap();
        }
        let data = read_dataset(&refs).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(
            data[0].stems.iter().map(|s| s.0.as_str()).collect::<Vec<_>>(),
            ["percussive", "tonal"]
        );
        assert!(data[0].mixture.is_some());

        let report = evaluate_dirs(&ests, &refs).unwrap();
        assert_eq!(report.median("tonal", "estimate"), Some(100.0));
        let baseline = report.median("tonal", "mixture").unwrap();
        assert!(baseline.abs() < 10.0, "{baseline}");
        let csv = report.to_csv();
        assert!(csv.starts_with(EvalReport::CSV_HEADER));
        assert!(csv.contains("median,tonal,mixture,"));

        fs::remove_file(ests.join("scene_001").join("tonal.wav")).unwrap();
        let err = evaluate_dirs(&ests, &refs).unwrap_err().to_string();
        assert!(err.contains("scene_001/tonal.wav"), "{err}");
    }

    #[test]
    fn mixture_as_estimate_matches_baseline_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let (refs, ests) = (tmp.path().join("ref"), tmp.path().join("est"));
        let s = short_scene(2);
        write_scene(&refs, &s).unwrap();
        let mix = read_wav(refs.join(&s.name).join(MIXTURE_FILE)).unwrap();
        write_stems(
            &ests.join(&s.name),
            &[("tonal".into(), mix.clone()), ("percussive".into(), mix)],
        )
        .unwrap();
        let r = evaluate_dirs(&ests, &refs).unwrap();
        for src in ["tonal", "percussive"] {
            assert_eq!(r.median(src, "estimate"), r.median(src, "mixture"));
        }
    }
}
