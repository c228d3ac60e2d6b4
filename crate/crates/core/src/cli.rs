//! Command-line front end. [`run`] parses arguments, dispatches to the library
//! and maps failures onto exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::blocks::{builtin, load_checkpoint, save_checkpoint, DilationScheme, Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_layers, check_model};
use crate::rf::block_report;
use crate::separation::pipeline::{evaluate_dirs, read_dataset, separate, write_scene, write_stems};
use crate::separation::synth::synth_range;
use crate::separation::weights::{weight_norm_report, LayerSelector};
use crate::separation::{train, TrainConfig, TrainingSet};
use crate::spectral::{read_wav, StftConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub const SEED_ENV: &str = "D3NET_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "d3net",
    version,
    about = "Multidilated dense networks for spectrogram source separation"
)]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Receptive-field coverage of every path through one dense block.
    RfAnalyze(RfArgs),
    /// Train one network per source.
    Train(TrainArgs),
    /// Split a stereo mixture into stems.
    Separate(SeparateArgs),
    /// Score estimated stems against references.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Per-skip-connection weight norms of one dense layer.
    WeightNorms(WeightNormArgs),
    /// Write synthetic scenes as a dataset directory.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RfArgs {
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value = "multi")]
    pub scheme: DilationScheme,
    /// CSV destination; the text rendering always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Shipped config name or path to a JSON config.
    #[arg(long)]
    pub config: String,
    /// Dataset directory, or `synth` for generated scenes.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Number of generated scenes when `--data synth`.
    #[arg(long, default_value_t = 32)]
    pub scenes: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sources to train; all sources of the dataset by default.
    #[arg(long = "source")]
    pub sources: Vec<String>,
    /// Output directory for `<source>.ckpt` and `<source>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` overrides; `train.<field>` keys change training settings,
    /// other keys are dotted paths into the network config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long = "ckpt", num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub config: String,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Time frames of the end-to-end probe input.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Coordinates sampled per parameter tensor in the end-to-end check.
    #[arg(long, default_value_t = 2)]
    pub per_tensor: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct WeightNormArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub ckpt: Option<PathBuf>,
    /// Report on a freshly initialized network instead of a checkpoint.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value = "full")]
    pub band: String,
    #[arg(long, default_value_t = 0)]
    pub d3: usize,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    /// Index of the first scene to write.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parse `args` (program name first), run the subcommand and return the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            EXIT_CHECK
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let seed = cli.seed;
    match &cli.command {
        Command::RfAnalyze(a) => rf_analyze(a, out),
        Command::Train(a) => train_cmd(a, seed, out, err),
        Command::Separate(a) => separate_cmd(a, out, err),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed, out, err),
        Command::WeightNorms(a) => weight_norms_cmd(a, seed, out, err),
        Command::Synth(a) => synth_cmd(a, seed, out),
    }
}

fn log_run(err: &mut dyn Write, config: &NetworkConfig, seed: u64) {
    let _ = writeln!(
        err,
        "config {} fingerprint {} seed {seed}",
        config.name,
        config.fingerprint()
    );
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> CmdResult {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn rf_analyze(a: &RfArgs, out: &mut dyn Write) -> CmdResult {
    if a.layers == 0 || a.kernel == 0 {
        return Err(Failure::Usage("--layers and --kernel must be positive".into()));
    }
    let report = block_report(a.layers, a.kernel, a.scheme).map_err(|e| Failure::Usage(e.to_string()))?;
    out.write_all(report.to_text().as_bytes())?;
    if let Some(p) = &a.out {
        write_or_print(Some(p), &report.to_csv(), out)?;
    }
    Ok(())
}

type Overrides = Vec<(String, String)>;

/// Split `key=value` overrides into training and network ones.
fn split_overrides(raw: &[String]) -> std::result::Result<(Overrides, Overrides), Failure> {
    let mut train = Vec::new();
    let mut net = Vec::new();
    for o in raw {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override '{o}' is not of the form key=value")))?;
        match k.strip_prefix("train.") {
            Some(field) => train.push((field.to_string(), v.to_string())),
            None => net.push((k.to_string(), v.to_string())),
        }
    }
    Ok((train, net))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set a dotted path (`a.b.0.c`) inside a JSON document.
fn set_path(doc: &mut Value, path: &str, value: Value) -> std::result::Result<(), String> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    // unknown keys are rejected when the document is deserialized
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| format!("no key '{part}' in '{path}'"))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("'{part}' in '{path}' is not an index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| format!("index {idx} out of range ({len}) in '{path}'"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("'{path}' descends into a scalar")),
        };
    }
    Ok(())
}

fn apply_network_overrides(
    config: NetworkConfig,
    overrides: &[(String, String)],
) -> std::result::Result<NetworkConfig, Failure> {
    if overrides.is_empty() {
        return Ok(config);
    }
    let mut doc = serde_json::to_value(&config).map_err(Error::from)?;
    for (k, v) in overrides {
        set_path(&mut doc, k, parse_value(v)).map_err(Failure::Usage)?;
    }
    let cfg: NetworkConfig =
        serde_json::from_value(doc).map_err(|e| Failure::Usage(format!("override produced an invalid config: {e}")))?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn apply_train_overrides(
    cfg: TrainConfig,
    overrides: &[(String, String)],
) -> std::result::Result<TrainConfig, Failure> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut doc = serde_json::to_value(&cfg).map_err(Error::from)?;
    for (k, v) in overrides {
        let Value::Object(map) = &mut doc else {
            unreachable!("TrainConfig is a struct")
        };
        if !map.contains_key(k) {
            return Err(Failure::Usage(format!(
                "unknown training setting '{k}' (have {})",
                map.keys().cloned().collect::<Vec<_>>().join(", ")
            )));
        }
        map.insert(k.clone(), parse_value(v));
    }
    serde_json::from_value(doc).map_err(|e| Failure::Usage(format!("bad training override: {e}")))
}

fn resolve_config(name: &str, overrides: &[(String, String)]) -> std::result::Result<NetworkConfig, Failure> {
    let cfg = builtin::resolve(name).map_err(|e| Failure::Usage(e.to_string()))?;
    apply_network_overrides(cfg, overrides)
}

fn train_cmd(a: &TrainArgs, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let (train_over, net_over) = split_overrides(&a.overrides)?;
    let network = resolve_config(&a.config, &net_over)?;
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        if e == 0 {
            return Err(Failure::Usage("--epochs must be at least 1".into()));
        }
        cfg = cfg.with_epochs(e);
    }
    let cfg = apply_train_overrides(cfg, &train_over)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    log_run(err, &network, seed);

    let bins = network.modeled_range().1;
    let stft_cfg = StftConfig::default();
    let data = if a.data == "synth" {
        if a.scenes == 0 {
            return Err(Failure::Usage("--scenes must be at least 1".into()));
        }
        TrainingSet::from_synthetic(&synth_range(seed, 0, a.scenes)?, bins, stft_cfg)?
    } else {
        let scenes = read_dataset(Path::new(&a.data))?;
        let mut sources: Vec<String> = scenes[0].stems.iter().map(|(n, _)| n.clone()).collect();
        sources.sort();
        let mut set = TrainingSet::new(sources, bins, stft_cfg)?;
        for s in &scenes {
            set.push_scene(&s.name, &s.stems)?;
        }
        set
    };
    let sources = if a.sources.is_empty() {
        data.sources.clone()
    } else {
        a.sources.clone()
    };
    for s in &sources {
        data.source_index(s).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    fs::create_dir_all(&a.out)?;
    for src in &sources {
        let mut model = Model::build(&network, seed)?;
        let _ = writeln!(
            err,
            "training '{src}': {} parameters, {} scenes",
            model.param_count(),
            data.len()
        );
        let report = train(&mut model, &data, src, &cfg, |e| {
            let _ = writeln!(err, "  {src} epoch {} lr {} loss {:.6}", e.epoch, e.lr, e.mean_loss);
        })?;
        let ckpt = a.out.join(format!("{src}.ckpt"));
        save_checkpoint(&model, &ckpt)?;
        fs::write(a.out.join(format!("{src}.loss.csv")), report.to_csv())?;
        let _ = writeln!(out, "{}", ckpt.display());
    }
    Ok(())
}

fn separate_cmd(a: &SeparateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let models = a.checkpoints.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    for m in &models {
        log_run(err, m.config(), m.meta.seed);
    }
    let mixture = read_wav(&a.input)?;
    let stems = separate(&mixture, &models, StftConfig::default())?;
    write_stems(&a.out, &stems)?;
    for (n, _) in &stems {
        let _ = writeln!(out, "{}", a.out.join(format!("{n}.wav")).display());
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let report = evaluate_dirs(&a.est, &a.reference)?;
    write_or_print(a.out.as_deref(), &report.to_csv(), out)
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    if !(a.tol >= 0.0) || !(a.step > 0.0) {
        return Err(Failure::Usage("--tol must be >= 0 and --step > 0".into()));
    }
    let (_, net_over) = split_overrides(&a.overrides)?;
    let network = resolve_config(&a.config, &net_over)?;
    log_run(err, &network, seed);
    let mut results = check_layers(seed, a.step)?;
    let model = Model::build(&network, seed)?;
    results.push(check_model(&model, a.frames, a.per_tensor, seed, a.step)?);
    let _ = writeln!(out, "check,max_rel_error,coordinates,skipped,status");
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed(a.tol);
        let _ = writeln!(
            out,
            "{},{:.3e},{},{},{}",
            r.name,
            r.max_rel_error,
            r.coordinates,
            r.skipped,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} above tolerance {}: {}",
            failed.len(),
            a.tol,
            failed.join(", ")
        )))
    }
}

fn weight_norms_cmd(a: &WeightNormArgs, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let model = match (&a.ckpt, &a.config) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, Some(c)) => Model::build(&resolve_config(c, &[])?, seed)?,
        (None, None) => return Err(Failure::Usage("give --ckpt or --config".into())),
    };
    log_run(err, model.config(), model.meta.seed);
    let sel = LayerSelector {
        band: a.band.clone(),
        d3: a.d3,
        d2: a.d2,
        layer: a.layer,
    };
    let report = weight_norm_report(&model, &sel).map_err(|e| Failure::Usage(e.to_string()))?;
    write_or_print(a.out.as_deref(), &report.to_csv(), out)
}

fn synth_cmd(a: &SynthArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    if a.scenes == 0 {
        return Err(Failure::Usage("--scenes must be at least 1".into()));
    }
    for scene in synth_range(seed, a.first, a.scenes)? {
        let d = write_scene(&a.out, &scene)?;
        let _ = writeln!(out, "{}", d.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("d3net").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn overrides_reach_network_and_training() {
        let (t, n) = split_overrides(&["train.epochs=3".into(), "dilation=naive".into()]).unwrap();
        let cfg = apply_train_overrides(TrainConfig::default(), &t).unwrap();
        assert_eq!(cfg.epochs, 3);
        let net = apply_network_overrides(builtin::builtin("tiny").unwrap(), &n).unwrap();
        assert_eq!(net.dilation, DilationScheme::Naive);
        let deep = apply_network_overrides(
            builtin::builtin("tiny").unwrap(),
            &[("bands.0.init_conv.channels".into(), "6".into())],
        )
        .unwrap();
        assert_eq!(deep.bands[0].init_conv.channels, 6);
        assert!(apply_train_overrides(TrainConfig::default(), &[("nope".into(), "1".into())]).is_err());
        assert!(
            apply_network_overrides(builtin::builtin("tiny").unwrap(), &[("dilation".into(), "wide".into())]).is_err()
        );
        assert!(split_overrides(&["novalue".into()]).is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_capture(&["rf-analyze", "--scheme", "wide"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(
            run_capture(&["train", "--config", "/no/such.json", "--out", "/tmp/x"]).0,
            EXIT_USAGE
        );
        assert_eq!(run_capture(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn rf_analyze_naive_reports_direct_skip() {
        let tmp = tempfile::tempdir().unwrap();
        let csv = tmp.path().join("r.csv");
        let (code, text, _) = run_capture(&[
            "rf-analyze",
            "--layers",
            "3",
            "--scheme",
            "naive",
            "--out",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(text.contains("3<-0"));
        let csv = fs::read_to_string(csv).unwrap();
        assert!(
            csv.lines()
                .any(|l| l.starts_with("naive,3,3,") && l.contains(",3<-0,") && l.ends_with(",3,6")),
            "{csv}"
        );
        let (code, text, _) = run_capture(&["rf-analyze", "--layers", "1"]);
        assert_eq!(code, 0);
        assert!(text.contains("1 paths, 0 with blind spots"), "{text}");
    }

    #[test]
    fn gradcheck_zero_tolerance_fails_with_3() {
        let (code, out, err) = run_capture(&["gradcheck", "--tol", "0", "--frames", "4", "--per-tensor", "1"]);
        assert_eq!(code, EXIT_CHECK, "{out}{err}");
        assert!(err.contains("fingerprint"));
    }

    #[test]
    fn weight_norms_on_untrained_config() {
        let (code, out, _) = run_capture(&["weight-norms", "--config", "tiny"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 2 + 2);
        assert!(out.lines().last().unwrap().ends_with(",1.0000000000"));
        assert_eq!(
            run_capture(&["weight-norms", "--config", "tiny", "--band", "mid"]).0,
            EXIT_USAGE
        );
        assert_eq!(run_capture(&["weight-norms"]).0, EXIT_USAGE);
    }
}
