//! Train-and-evaluate runs on synthetic scenes, including the dilation ablation.

use crate::blocks::{Model, NetworkConfig};
use crate::error::Result;
use crate::spectral::StftConfig;

use super::pipeline::{evaluate_scenes, EvalReport};
use super::synth::{synth_range, SyntheticScene};
use super::train::{train, EpochStats, TrainConfig, TrainReport, TrainingSet};

/// Held-out scenes start at this index so they never overlap training scenes.
pub const HELD_OUT_FIRST: usize = 10_000;

#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

impl SyntheticSplit {
    pub fn generate(seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        Ok(SyntheticSplit {
            train: synth_range(seed, 0, n_train)?,
            test: synth_range(seed, HELD_OUT_FIRST, n_test)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainedSource {
    pub model: Model,
    pub report: TrainReport,
}

/// Train one network per source of `data`, all from the same initial seed.
pub fn train_sources(
    network: &NetworkConfig,
    data: &TrainingSet,
    cfg: &TrainConfig,
    model_seed: u64,
    mut on_epoch: impl FnMut(&str, &EpochStats),
) -> Result<Vec<TrainedSource>> {
    data.sources
        .iter()
        .map(|src| {
            let mut model = Model::build(network, model_seed)?;
            let report = train(&mut model, data, src, cfg, |e| on_epoch(src, e))?;
            Ok(TrainedSource { model, report })
        })
        .collect()
}

pub fn models(trained: &[TrainedSource]) -> Vec<Model> {
    trained.iter().map(|t| t.model.clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub source: String,
    pub sdr_db: f64,
    pub mixture_db: f64,
    pub final_loss: f64,
}

impl AblationRow {
    pub fn improvement_db(&self) -> f64 {
        self.sdr_db - self.mixture_db
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "variant,source,median_sdr_db,mixture_sdr_db,improvement_db,final_train_loss";

    /// Append the per-source medians of one variant.
    pub fn add(&mut self, variant: &str, eval: &EvalReport, trained: &[TrainedSource]) {
        for t in trained {
            let src = &t.report.source;
            self.rows.push(AblationRow {
                variant: variant.into(),
                source: src.clone(),
                sdr_db: eval.median(src, "estimate").unwrap_or(f64::NAN),
                mixture_db: eval.median(src, "mixture").unwrap_or(f64::NAN),
                final_loss: t.report.losses().last().copied().unwrap_or(f64::NAN),
            });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# SDR: median over 1 s windows, then over scenes; no BSS-eval projection\n");
        s += Self::CSV_HEADER;
        s.push('\n');
        for r in &self.rows {
            s += &format!(
                "{},{},{:.4},{:.4},{:.4},{:.6e}\n",
                r.variant,
                r.source,
                r.sdr_db,
                r.mixture_db,
                r.improvement_db(),
                r.final_loss
            );
        }
        s
    }
}

/// Train every variant on the same data and seeds, evaluate on the held-out
/// scenes and collect one report.
pub fn run_ablation(
    variants: &[(String, NetworkConfig)],
    split: &SyntheticSplit,
    bins: usize,
    stft: StftConfig,
    cfg: &TrainConfig,
    model_seed: u64,
    mut on_epoch: impl FnMut(&str, &str, &EpochStats),
) -> Result<(AblationReport, Vec<Vec<TrainedSource>>)> {
    let data = TrainingSet::from_synthetic(&split.train, bins, stft)?;
    let mut report = AblationReport::default();
    let mut all = Vec::new();
    for (name, network) in variants {
        let trained = train_sources(network, &data, cfg, model_seed, |s, e| on_epoch(name, s, e))?;
        let eval = evaluate_scenes(&models(&trained), &split.test, stft)?;
        report.add(name, &eval, &trained);
        all.push(trained);
    }
    Ok((report, all))
}
