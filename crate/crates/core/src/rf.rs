//! Exact receptive-field coverage of dense blocks under different dilation schemes.
//!
//! Every chain of layers from the block input to the last layer is a path.
//! Along a path, each hop convolves with a dilated kernel, so the input
//! offsets one output unit depends on are the Minkowski sum of the hops'
//! tap sets. Offsets inside the span that no path reaches are blind spots.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::blocks::{BatchNormConfig, D2Block, D2BlockConfig, DilationScheme};
use crate::error::{Error, Result};
use crate::layers::{Axis, Forward, Mode, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// One convolution on a path: layer `layer` reads the output of layer `source`
/// (0 is the block input).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hop {
    pub layer: usize,
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathSpec {
    hops: Vec<Hop>,
}

impl PathSpec {
    /// Build from the visited nodes, input first: `[0, 2, 3]` is `3<-2<-0`.
    pub fn from_nodes(nodes: &[usize]) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0 || nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "path nodes {nodes:?} must start at 0 and strictly increase"
            )));
        }
        Ok(PathSpec {
            hops: nodes
                .windows(2)
                .map(|w| Hop {
                    layer: w[1],
                    source: w[0],
                })
                .collect(),
        })
    }

    pub fn hops(&self) -> &[Hop] {
        &self.hops
    }

    pub fn output_layer(&self) -> usize {
        self.hops.last().map_or(0, |h| h.layer)
    }

    /// A path that passes through every layer.
    pub fn is_full(&self) -> bool {
        self.hops.iter().all(|h| h.layer == h.source + 1)
    }
}

impl fmt::Display for PathSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.output_layer())?;
        for h in self.hops.iter().rev() {
            write!(f, "<-{}", h.source)?;
        }
        Ok(())
    }
}

/// All `2^(L-1)` chains from the input to layer `L`, ordered by the bitmask of
/// intermediate layers visited.
pub fn enumerate_paths(layers: usize) -> Result<Vec<PathSpec>> {
    if layers == 0 || layers > 30 {
        return Err(Error::invalid(format!("layer count {layers} outside 1..=30")));
    }
    let inner = layers - 1;
    (0u32..1 << inner)
        .map(|mask| {
            let mut nodes = vec![0];
            nodes.extend((1..layers).filter(|l| mask & (1 << (l - 1)) != 0));
            nodes.push(layers);
            PathSpec::from_nodes(&nodes)
        })
        .collect()
}

/// Dilation of the kernel group a hop passes through.
pub fn hop_dilation(hop: Hop, scheme: DilationScheme) -> usize {
    scheme.dilation(hop.layer, hop.source, 2)
}

/// Input offsets, relative to the output position, touched along one axis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoverageMap {
    offsets: Vec<i64>,
}

impl CoverageMap {
    pub fn from_offsets(offsets: impl IntoIterator<Item = i64>) -> Self {
        let set: BTreeSet<i64> = offsets.into_iter().collect();
        CoverageMap {
            offsets: set.into_iter().collect(),
        }
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn covered(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn span(&self) -> Option<(i64, i64)> {
        Some((*self.offsets.first()?, *self.offsets.last()?))
    }

    /// `max - min + 1`, or 0 when nothing is covered.
    pub fn width(&self) -> usize {
        self.span().map_or(0, |(a, b)| (b - a + 1) as usize)
    }

    pub fn blind_spots(&self) -> usize {
        self.width() - self.covered()
    }

    /// Longest run of consecutive uncovered offsets inside the span.
    pub fn max_gap(&self) -> usize {
        self.offsets
            .windows(2)
            .map(|w| (w[1] - w[0] - 1) as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn union(&self, other: &CoverageMap) -> CoverageMap {
        CoverageMap::from_offsets(self.offsets.iter().chain(&other.offsets).copied())
    }

    /// Minkowski sum with the taps of a dilated kernel.
    fn convolve(&self, kernel: usize, dilation: usize) -> CoverageMap {
        let r = (kernel / 2) as i64;
        let d = dilation as i64;
        CoverageMap::from_offsets(self.offsets.iter().flat_map(|&o| (-r..=r).map(move |j| o + j * d)))
    }

    /// One character per offset across the span: `#` covered, `.` blind.
    pub fn render(&self) -> String {
        let Some((lo, hi)) = self.span() else {
            return String::new();
        };
        let set: BTreeSet<i64> = self.offsets.iter().copied().collect();
        (lo..=hi).map(|o| if set.contains(&o) { '#' } else { '.' }).collect()
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel size {kernel} must be odd")));
    }
    Ok(())
}

pub fn path_coverage(path: &PathSpec, kernel: usize, scheme: DilationScheme) -> Result<CoverageMap> {
    check_kernel(kernel)?;
    Ok(path.hops.iter().fold(CoverageMap::from_offsets([0]), |cov, &hop| {
        cov.convolve(kernel, hop_dilation(hop, scheme))
    }))
}

/// Blind spots of the direct skip from the input into layer `layer` under
/// naive dilation: `(k - 1) * (2^(layer-1) - 1)`.
pub fn naive_direct_skip_blind_spots(layer: usize, kernel: usize) -> usize {
    (kernel - 1) * ((1usize << (layer - 1)) - 1)
}

#[derive(Clone, Debug)]
pub struct PathCoverage {
    pub path: PathSpec,
    pub coverage: CoverageMap,
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub scheme: DilationScheme,
    pub layers: usize,
    pub kernel: usize,
    pub paths: Vec<PathCoverage>,
    pub union: CoverageMap,
}

pub fn block_report(layers: usize, kernel: usize, scheme: DilationScheme) -> Result<BlockReport> {
    check_kernel(kernel)?;
    let paths = enumerate_paths(layers)?
        .into_iter()
        .map(|path| {
            let coverage = path_coverage(&path, kernel, scheme)?;
            Ok(PathCoverage { path, coverage })
        })
        .collect::<Result<Vec<_>>>()?;
    let union = paths.iter().fold(CoverageMap::default(), |u, p| u.union(&p.coverage));
    Ok(BlockReport {
        scheme,
        layers,
        kernel,
        paths,
        union,
    })
}

impl BlockReport {
    pub fn total_blind_spots(&self) -> usize {
        self.paths.iter().map(|p| p.coverage.blind_spots()).sum()
    }

    pub fn max_gap(&self) -> usize {
        self.paths.iter().map(|p| p.coverage.max_gap()).max().unwrap_or(0)
    }

    pub fn paths_with_gaps(&self) -> usize {
        self.paths.iter().filter(|p| p.coverage.blind_spots() > 0).count()
    }

    pub const CSV_HEADER: &'static str = "scheme,L,kernel,path_id,path_hops,span_min,span_max,covered,blind_spots";

    /// One row per path plus a final `union` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let mut row = |id: &str, hops: &str, cov: &CoverageMap| {
            let (lo, hi) = cov.span().unwrap_or((0, 0));
            let _ = writeln!(
                out,
                "{},{},{},{id},{hops},{lo},{hi},{},{}",
                self.scheme,
                self.layers,
                self.kernel,
                cov.covered(),
                cov.blind_spots()
            );
        };
        for (i, p) in self.paths.iter().enumerate() {
            row(&i.to_string(), &p.path.to_string(), &p.coverage);
        }
        row("union", "*", &self.union);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} dilation, L={}, kernel {}: {} paths, {} with blind spots",
            self.scheme,
            self.layers,
            self.kernel,
            self.paths.len(),
            self.paths_with_gaps()
        );
        let width = self.paths.iter().map(|p| p.path.to_string().len()).max().unwrap_or(0);
        let (ulo, _) = self.union.span().unwrap_or((0, 0));
        for p in &self.paths {
            let (lo, _) = p.coverage.span().unwrap_or((0, 0));
            let pad = " ".repeat((lo - ulo) as usize);
            let _ = writeln!(
                out,
                "  {:<width$}  {pad}{}  blind={}",
                p.path.to_string(),
                p.coverage.render(),
                p.coverage.blind_spots()
            );
        }
        let _ = writeln!(
            out,
            "  {:<width$}  {}  width={} blind={}",
            "union",
            self.union.render(),
            self.union.width(),
            self.union.blind_spots()
        );
        let _ = writeln!(
            out,
            "total blind spots {}, largest gap {}",
            self.total_blind_spots(),
            self.max_gap()
        );
        out
    }
}

/// Coverage seen by layer `layer` through its skip from `source`: the union
/// receptive field of `source` spread by that group's dilated kernel.
#[derive(Clone, Debug)]
pub struct SkipCoverage {
    pub layer: usize,
    pub source: usize,
    pub dilation: usize,
    pub coverage: CoverageMap,
}

/// Union receptive field of every layer output, `x_0` (a single tap) first.
pub fn layer_coverage(layers: usize, kernel: usize, scheme: DilationScheme) -> Result<Vec<CoverageMap>> {
    check_kernel(kernel)?;
    let mut cov = vec![CoverageMap::from_offsets([0])];
    for l in 1..=layers {
        let next = (0..l).fold(CoverageMap::default(), |u, i| {
            u.union(&cov[i].convolve(kernel, hop_dilation(Hop { layer: l, source: i }, scheme)))
        });
        cov.push(next);
    }
    Ok(cov)
}

/// Every (layer, skip) pair of the block, each judged against the full
/// receptive field of the feature it reads.
pub fn skip_coverage(layers: usize, kernel: usize, scheme: DilationScheme) -> Result<Vec<SkipCoverage>> {
    let cov = layer_coverage(layers, kernel, scheme)?;
    let mut out = Vec::new();
    for layer in 1..=layers {
        for (source, reach) in cov.iter().enumerate().take(layer) {
            let dilation = hop_dilation(Hop { layer, source }, scheme);
            out.push(SkipCoverage {
                layer,
                source,
                dilation,
                coverage: reach.convolve(kernel, dilation),
            });
        }
    }
    Ok(out)
}

/// A D2 block whose kernels are random but strictly positive, with batch norm
/// left at its identity initialization. Every connection then carries a
/// positive gradient, so the probe sees exactly the geometric coverage.
pub fn probe_block(layers: usize, kernel: usize, scheme: DilationScheme, seed: u64) -> Result<(D2Block, ParamStore)> {
    check_kernel(kernel)?;
    let mut cfg = D2BlockConfig::new(2, layers);
    cfg.kernel = [kernel, kernel];
    cfg.dilation = Some(scheme);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = D2Block::new(
        &mut store,
        "probe",
        1,
        &cfg,
        scheme,
        BatchNormConfig::default(),
        &mut rng,
    );
    let kernels: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Trainable && e.name.ends_with(".kernel"))
        .map(|(id, _)| id)
        .collect();
    for id in kernels {
        for v in store.get_mut(id).data_mut() {
            *v = v.abs() + 1e-3;
        }
    }
    Ok((block, store))
}

/// Offsets whose input influences the centre output unit, found by autodiff.
///
/// The input is a single positive line along frequency; the gradient of the
/// sum over output channels at the centre is thresholded at `1e-12`.
pub fn empirical_coverage(block: &D2Block, store: &ParamStore) -> Result<CoverageMap> {
    let radius = block
        .layers
        .iter()
        .map(|l| {
            let k = l.conv.groups.first().map_or(1, |_| block.config.kernel[1]);
            (k / 2) * l.conv.dilations().into_iter().max().unwrap_or(1)
        })
        .sum::<usize>();
    let width = 4 * radius + 1;
    let centre = 2 * radius;
    let tape = Tape::new();
    let fw = Forward::new(&tape, store, Mode::Eval);
    let x = tape.leaf(Tensor::full(&[1, block.in_channels, 1, width], 1.0));
    let y = block.forward(&fw, &x)?;
    let unit = tape.narrow(&y, Axis::Frequency, centre, 1)?;
    let grads = tape.backward(&tape.sum(&unit))?;
    let g = grads.wrt(&x);
    let offsets = (0..width).filter_map(|f| {
        let mag: f64 = (0..block.in_channels).map(|c| g.data()[c * width + f].abs()).sum();
        (mag > 1e-12).then_some(f as i64 - centre as i64)
    });
    Ok(CoverageMap::from_offsets(offsets))
}
