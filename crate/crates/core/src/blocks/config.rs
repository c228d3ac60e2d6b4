//! Declarative block and network descriptions, with validation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How dilation factors are assigned inside a dense block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DilationScheme {
    /// Skip source `i` is convolved with dilation `base^i`.
    #[default]
    Multi,
    /// Every input of layer `l` shares dilation `base^(l-1)`.
    #[serde(alias = "standard")]
    Naive,
    /// Dilation 1 everywhere.
    None,
}

impl DilationScheme {
    /// Dilation applied at layer `layer` (1-based) to skip source `skip` (0-based).
    pub fn dilation(self, layer: usize, skip: usize, base: usize) -> usize {
        match self {
            DilationScheme::Multi => base.pow(skip as u32),
            DilationScheme::Naive => base.pow(layer as u32 - 1),
            DilationScheme::None => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DilationScheme::Multi => "multi",
            DilationScheme::Naive => "naive",
            DilationScheme::None => "none",
        }
    }
}

impl fmt::Display for DilationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DilationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(DilationScheme::Multi),
            "naive" | "standard" => Ok(DilationScheme::Naive),
            "none" => Ok(DilationScheme::None),
            other => Err(Error::invalid(format!(
                "unknown dilation scheme '{other}' (expected naive, multi or none)"
            ))),
        }
    }
}

fn default_kernel() -> [usize; 2] {
    [3, 3]
}

fn default_base() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct D2BlockConfig {
    pub growth_rate: usize,
    pub layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    #[serde(default = "default_base")]
    pub dilation_base: usize,
    /// Per-block override of the network-wide scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<DilationScheme>,
    /// Number of trailing layer outputs passed on; defaults to `layers`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<usize>,
}

impl D2BlockConfig {
    pub fn new(growth_rate: usize, layers: usize) -> Self {
        D2BlockConfig {
            growth_rate,
            layers,
            kernel: default_kernel(),
            dilation_base: default_base(),
            dilation: None,
            reduce: None,
        }
    }

    pub fn reduce_n(&self) -> usize {
        self.reduce.unwrap_or(self.layers)
    }

    pub fn out_channels(&self) -> usize {
        self.reduce_n() * self.growth_rate
    }

    /// Dilations of the input groups of layer `layer` (1-based).
    pub fn layer_dilations(&self, layer: usize, scheme: DilationScheme) -> Vec<usize> {
        let scheme = self.dilation.unwrap_or(scheme);
        (0..layer)
            .map(|i| scheme.dilation(layer, i, self.dilation_base))
            .collect()
    }

    fn validate(&self, what: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{what}: {msg}")));
        if self.growth_rate == 0 || self.layers == 0 {
            return bad("growth rate and layer count must be positive".into());
        }
        let n = self.reduce_n();
        if n == 0 || n > self.layers {
            return bad(format!("channel reduction N={n} must lie in 1..={}", self.layers));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel {:?} must have odd extents", self.kernel));
        }
        if self.dilation_base == 0 {
            return bad("dilation base must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct D3BlockConfig {
    pub name: String,
    pub growth_rate: usize,
    pub layers: usize,
    /// Number of nested D2 blocks.
    pub blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<DilationScheme>,
}

impl D3BlockConfig {
    pub fn new(name: &str, growth_rate: usize, layers: usize, blocks: usize) -> Self {
        D3BlockConfig {
            name: name.into(),
            growth_rate,
            layers,
            blocks,
            reduce: None,
            kernel: default_kernel(),
            dilation: None,
        }
    }

    pub fn d2(&self) -> D2BlockConfig {
        D2BlockConfig {
            growth_rate: self.growth_rate,
            layers: self.layers,
            kernel: self.kernel,
            dilation_base: default_base(),
            dilation: self.dilation,
            reduce: self.reduce,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.d2().out_channels()
    }

    /// Input channels of the `m`-th (0-based) nested D2 block.
    pub fn d2_input_channels(&self, in_ch: usize, m: usize) -> usize {
        in_ch + m * self.out_channels()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Stage {
    D3(D3BlockConfig),
    /// 2x2 average pooling.
    Down,
    /// 2x2 stride-2 transposed convolution, channel count preserved.
    Up,
    /// Channel concatenation with the output of an earlier D3 stage.
    Concat {
        with: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub name: String,
    /// Half-open, zero-based frequency-bin range `[start, end)`.
    pub bins: [usize; 2],
    pub init_conv: ConvConfig,
    pub stages: Vec<Stage>,
}

impl BandConfig {
    pub fn width(&self) -> usize {
        self.bins[1] - self.bins[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    /// Bands concatenated along frequency, listed low to high.
    #[serde(default)]
    pub freq: Vec<String>,
    /// Common channel count for the frequency merge; bands with a different
    /// output width get a bias-free 1x1 projection. Defaults to the widest band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_channels: Option<usize>,
    /// Bands concatenated along channels with the frequency-merged stream.
    #[serde(default)]
    pub channel: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    pub source: String,
    /// Frequency bins of the expected input (window / 2 + 1).
    pub input_bins: usize,
    #[serde(default)]
    pub dilation: DilationScheme,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
    pub bands: Vec<BandConfig>,
    pub merge: MergeConfig,
    pub final_block: D2BlockConfig,
    pub gate: ConvConfig,
}

/// Channel and scale bookkeeping derived while validating a band.
#[derive(Clone, Debug)]
pub(crate) struct BandPlan {
    pub out_channels: usize,
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable short hash of the canonical serialized form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The frequency range `[start, end)` actually modeled by the network.
    pub fn modeled_range(&self) -> (usize, usize) {
        let start = self.bands.iter().map(|b| b.bins[0]).min().unwrap_or(0);
        let end = self.bands.iter().map(|b| b.bins[1]).max().unwrap_or(0);
        (start, end)
    }

    pub fn band(&self, name: &str) -> Option<&BandConfig> {
        self.bands.iter().find(|b| b.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub(crate) fn plan(&self) -> Result<HashMap<String, BandPlan>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_bins == 0 {
            return bad("input_bins must be positive".into());
        }
        if self.bands.is_empty() {
            return bad("at least one band is required".into());
        }
        if !(self.batch_norm.eps > 0.0) || !(0.0..=1.0).contains(&self.batch_norm.momentum) {
            return bad("batch_norm needs eps > 0 and momentum in [0, 1]".into());
        }
        let mut plans = HashMap::new();
        for band in &self.bands {
            if plans.contains_key(&band.name) {
                return bad(format!("duplicate band name '{}'", band.name));
            }
            let [s, e] = band.bins;
            if s >= e || e > self.input_bins {
                return bad(format!(
                    "band '{}': bins [{s}, {e}) must be non-empty and within {} input bins",
                    band.name, self.input_bins
                ));
            }
            plans.insert(band.name.clone(), self.plan_band(band)?);
        }

        let m = &self.merge;
        let mut seen = HashSet::new();
        for name in m.freq.iter().chain(&m.channel) {
            if !plans.contains_key(name) {
                return bad(format!("merge references unknown band '{name}'"));
            }
            if !seen.insert(name) {
                return bad(format!("band '{name}' is merged more than once"));
            }
        }
        if seen.len() != self.bands.len() {
            return bad("every band must appear exactly once in the merge".into());
        }
        if m.freq.len() == 1 {
            return bad("frequency merge needs at least two bands (or none)".into());
        }
        let mut range: Option<[usize; 2]> = None;
        for pair in m.freq.windows(2) {
            let (a, b) = (self.band(&pair[0]).unwrap(), self.band(&pair[1]).unwrap());
            if a.bins[1] != b.bins[0] {
                return bad(format!(
                    "frequency-merged bands '{}' and '{}' are not contiguous",
                    a.name, b.name
                ));
            }
        }
        if let (Some(first), Some(last)) = (m.freq.first(), m.freq.last()) {
            range = Some([self.band(first).unwrap().bins[0], self.band(last).unwrap().bins[1]]);
        }
        for name in &m.channel {
            let bins = self.band(name).unwrap().bins;
            match range {
                Some(r) if r != bins => {
                    return bad(format!(
                        "channel-merged band '{name}' covers {bins:?} but the merged stream covers {r:?}"
                    ))
                }
                _ => range = Some(bins),
            }
        }
        if m.freq_channels == Some(0) {
            return bad("freq_channels must be positive".into());
        }
        self.final_block.validate("final block")?;
        if self.gate.channels != 2 {
            return bad(format!(
                "gate conv must emit 2 channels (stereo estimate), got {}",
                self.gate.channels
            ));
        }
        if self.gate.kernel.iter().any(|k| k % 2 == 0) {
            return bad("gate kernel must have odd extents".into());
        }
        Ok(plans)
    }

    fn plan_band(&self, band: &BandConfig) -> Result<BandPlan> {
        let bad = |msg: String| Err(Error::Config(format!("band '{}': {msg}", band.name)));
        if band.init_conv.channels == 0 || band.init_conv.kernel.iter().any(|k| k % 2 == 0) {
            return bad("initial conv needs positive channels and an odd kernel".into());
        }
        let mut channels = band.init_conv.channels;
        let mut scale = 0usize;
        // D3 name -> (scale, channels)
        let mut saved: HashMap<&str, (usize, usize)> = HashMap::new();
        for stage in &band.stages {
            match stage {
                Stage::D3(d3) => {
                    if d3.blocks == 0 {
                        return bad(format!("D3 block '{}' needs at least one D2 block", d3.name));
                    }
                    d3.d2().validate(&format!("band '{}' block '{}'", band.name, d3.name))?;
                    channels = d3.out_channels();
                    if saved.insert(&d3.name, (scale, channels)).is_some() {
                        return bad(format!("duplicate stage name '{}'", d3.name));
                    }
                }
                Stage::Down => scale += 1,
                Stage::Up => {
                    if scale == 0 {
                        return bad("upsampling above the input resolution".into());
                    }
                    scale -= 1;
                }
                Stage::Concat { with } => match saved.get(with.as_str()) {
                    None => return bad(format!("concat references unknown or later stage '{with}'")),
                    Some(&(s, c)) if s == scale => channels += c,
                    Some(&(s, _)) => {
                        return bad(format!(
                            "concat with '{with}' mixes scale 1/{} with scale 1/{}",
                            1 << scale,
                            1 << s
                        ))
                    }
                },
            }
        }
        if scale != 0 {
            return bad(format!(
                "stream ends at scale 1/{} instead of full resolution",
                1 << scale
            ));
        }
        Ok(BandPlan { out_channels: channels })
    }
}
