//! Per-skip-connection weight norms of one multidilated layer.

use crate::blocks::Model;
use crate::error::{Error, Result};

/// Which layer to inspect. The defaults pick the last layer of the first D3
/// block of the full-band stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSelector {
    pub band: String,
    /// Index among the band's D3 blocks.
    pub d3: usize,
    /// Index of the D2 block inside the D3 block; `None` means the last one.
    pub d2: Option<usize>,
    /// Layer index inside the D2 block; `None` means the last one.
    pub layer: Option<usize>,
}

impl Default for LayerSelector {
    fn default() -> Self {
        LayerSelector {
            band: "full".into(),
            d3: 0,
            d2: None,
            layer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormRow {
    /// Source of the group: 0 is the block input, `i` the output of layer `i`.
    pub skip: usize,
    pub dilation: usize,
    pub channels: usize,
    pub l1: f64,
    pub mean_abs: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightNormReport {
    /// Parameter-name prefix of the inspected layer.
    pub layer: String,
    pub rows: Vec<NormRow>,
}

impl WeightNormReport {
    pub const CSV_HEADER: &'static str = "skip,dilation,channels,l1,mean_abs,normalized";

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# layer {}; normalized = mean |w| of the group / mean |w| of the group with the highest skip index (the path without a skip connection)\n{}\n",
            self.layer,
            Self::CSV_HEADER
        );
        for r in &self.rows {
            s += &format!(
                "{},{},{},{:.10e},{:.10e},{:.10}\n",
                r.skip, r.dilation, r.channels, r.l1, r.mean_abs, r.normalized
            );
        }
        s
    }
}

/// L1 norms of the kernel groups of the selected layer.
///
/// Groups see different channel counts (the block input is usually wider than
/// one layer's growth), so the comparison uses the mean absolute weight of
/// each group. Both the raw L1 norm and the mean are reported.
pub fn weight_norm_report(model: &Model, sel: &LayerSelector) -> Result<WeightNormReport> {
    let band = model
        .band(&sel.band)
        .ok_or_else(|| Error::invalid(format!("no band named '{}'", sel.band)))?;
    let (d3_name, d3) = band
        .d3_blocks()
        .nth(sel.d3)
        .ok_or_else(|| Error::invalid(format!("band '{}' has no D3 block #{}", sel.band, sel.d3)))?;
    let d2_idx = sel.d2.unwrap_or(d3.blocks.len() - 1);
    let d2 = d3
        .blocks
        .get(d2_idx)
        .ok_or_else(|| Error::invalid(format!("{d3_name} has no D2 block #{d2_idx}")))?;
    let layer_idx = sel.layer.unwrap_or(d2.layers.len() - 1);
    let layer = d2
        .layers
        .get(layer_idx)
        .ok_or_else(|| Error::invalid(format!("{d3_name}.d2_{d2_idx} has no layer #{layer_idx}")))?;

    let store = model.store();
    let mut rows: Vec<NormRow> = layer
        .conv
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let w = store.get(g.kernel);
            let l1: f64 = w.data().iter().map(|v| v.abs()).sum();
            NormRow {
                skip: i,
                dilation: g.dilation,
                channels: g.in_channels,
                l1,
                mean_abs: l1 / w.numel() as f64,
                normalized: 0.0,
            }
        })
        .collect();
    let reference = rows.last().map(|r| r.mean_abs).unwrap_or(0.0);
    if reference <= 0.0 {
        return Err(Error::invalid(
            "the no-skip group has all-zero weights; cannot normalize",
        ));
    }
    for r in &mut rows {
        r.normalized = r.mean_abs / reference;
    }
    if let Some(last) = rows.last_mut() {
        last.normalized = 1.0;
    }
    Ok(WeightNormReport {
        layer: format!("{}.{d3_name}.d2_{d2_idx}.layer{layer_idx}", band.name),
        rows,
    })
}
