//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails when a criterion fails unless it is listed in
//! `KNOWN_UNATTAINABLE`, whose entries are reported as FAIL but tolerated.

use std::fmt::Write as _;
use std::time::Instant;

use d3net::blocks::{builtin, DilationScheme, Model};
use d3net::gradcheck::{check_layers, check_model};
use d3net::rf::{block_report, empirical_coverage, probe_block, skip_coverage, CoverageMap, PathSpec};
use d3net::separation::experiment::{models, train_sources, AblationReport, SyntheticSplit, TrainedSource};
use d3net::separation::{
    evaluate_scenes, mwf, weight_norm_report, LayerSelector, MwfConfig, TrainConfig, TrainingSet, WeightNormReport,
};
use d3net::spectral::{istft, stft, AudioClip, StftConfig};
use d3net::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criterion 1 asks for zero blind spots on every path of a multidilated
/// block. Paths that hop over non-adjacent layers have holes under any
/// power-of-two assignment (e.g. 3<-2<-0 with L=3), so that half cannot hold.
const KNOWN_UNATTAINABLE: &[usize] = &[1];

/// Held-out improvement of the tiny multidilation network over the mixture
/// baseline. The pilot run (32 training scenes, 8 held-out, 10 epochs,
/// 64-frame patches, seed 0) reached +17.81 dB (tonal) and +17.55 dB
/// (percussive); the bound keeps half a decibel of slack below the weaker one.
const PILOT_EPOCHS: usize = 10;
const REGRESSION_BOUND_DB: f64 = 17.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let naive = block_report(3, 3, DilationScheme::Naive).expect("L=3 report");
    let direct = PathSpec::from_nodes(&[0, 3]).expect("valid path");
    let cov = naive
        .paths
        .iter()
        .find(|p| p.path == direct)
        .map(|p| p.coverage.clone())
        .unwrap_or_default();
    let naive_ok = cov == CoverageMap::from_offsets([-4, 0, 4]) && cov.blind_spots() == 6;

    let (mut paths, mut gappy, mut first_gap) = (0, 0, None);
    let mut skip_holes = 0;
    for layers in 1..=8 {
        let r = block_report(layers, 3, DilationScheme::Multi).expect("multi report");
        paths += r.paths.len();
        for p in &r.paths {
            if p.coverage.blind_spots() > 0 {
                gappy += 1;
                first_gap.get_or_insert_with(|| format!("L={layers} {} ({} blind)", p.path, p.coverage.blind_spots()));
            }
        }
        skip_holes += skip_coverage(layers, 3, DilationScheme::Multi)
            .expect("skip coverage")
            .iter()
            .map(|s| s.coverage.blind_spots())
            .sum::<usize>();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        naive_ok && gappy == 0 && secs < 1.0,
        format!(
            "naive 3<-0 covers {:?} with {} blind spots [{}]; multi L<=8: {gappy} of {paths} paths have blind spots{} [{}]; \
             multi skip coverage L<=8: {skip_holes} blind spots; {secs:.3} s",
            cov.offsets(),
            cov.blind_spots(),
            if naive_ok { "ok" } else { "wrong" },
            first_gap.map(|g| format!(", first {g}")).unwrap_or_default(),
            if gappy == 0 { "ok" } else { "not met" },
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut ok = true;
    for layers in 1..=6 {
        let expect = (1usize << (layers + 1)) - 1;
        let analytic = block_report(layers, 3, DilationScheme::Multi)
            .expect("report")
            .union
            .width();
        let (block, store) = probe_block(layers, 3, DilationScheme::Multi, layers as u64).expect("probe");
        let probe = empirical_coverage(&block, &store).expect("probe coverage");
        ok &= analytic == expect && probe.width() == expect && probe.blind_spots() == 0;
        rows.push(format!("L{layers}:{analytic}/{}", probe.width()));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ok && secs < 30.0,
        format!("analytic/probe widths {} ; {secs:.1} s", rows.join(" ")),
    )
}

/// Direct definition of a "same"-padded 2-D convolution.
fn oracle_conv(x: &Tensor, w: &Tensor) -> Tensor {
    let [n, c, t, f] = x.dims4().unwrap();
    let [o, _, kt, kf] = w.dims4().unwrap();
    let mut out = Tensor::zeros(&[n, o, t, f]);
    for ni in 0..n {
        for oi in 0..o {
            for ti in 0..t {
                for fi in 0..f {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for a in 0..kt {
                            for b in 0..kf {
                                let (r, q) = (
                                    ti as isize + a as isize - (kt / 2) as isize,
                                    fi as isize + b as isize - (kf / 2) as isize,
                                );
                                if r >= 0 && q >= 0 && (r as usize) < t && (q as usize) < f {
                                    s += x.data()[((ni * c + ci) * t + r as usize) * f + q as usize]
                                        * w.data()[((oi * c + ci) * kt + a) * kf + b];
                                }
                            }
                        }
                    }
                    out.data_mut()[((ni * o + oi) * t + ti) * f + fi] = s;
                }
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let groups = rng.gen_range(1..=4);
        let widths: Vec<usize> = (0..groups).map(|_| rng.gen_range(1..=3)).collect();
        let (n, o, t, f) = (
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(3..=8),
            rng.gen_range(3..=8),
        );
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let xs: Vec<Tensor> = widths
            .iter()
            .map(|&c| Tensor::uniform(&[n, c, t, f], -1.0, 1.0, &mut rng))
            .collect();
        let ws: Vec<Tensor> = widths
            .iter()
            .map(|&c| Tensor::uniform(&[o, c, k, k], -1.0, 1.0, &mut rng))
            .collect();
        let tape = Tape::no_grad();
        let xv: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let wv: Vec<_> = ws.iter().map(|w| tape.leaf(w.clone())).collect();
        let y = tape
            .multidilated_conv(
                &xv.iter().collect::<Vec<_>>(),
                &wv.iter().collect::<Vec<_>>(),
                &vec![(1, 1); groups],
                None,
            )
            .expect("conv");
        // concatenate along channels for the single-convolution oracle
        let c_total: usize = widths.iter().sum();
        let x_cat = Tensor::from_fn(&[n, c_total, t, f], |i| {
            let (ni, rest) = (i / (c_total * t * f), i % (c_total * t * f));
            let (mut ci, pos) = (rest / (t * f), rest % (t * f));
            for (g, &c) in widths.iter().enumerate() {
                if ci < c {
                    return xs[g].data()[(ni * c + ci) * t * f + pos];
                }
                ci -= c;
            }
            unreachable!()
        });
        let w_cat = Tensor::from_fn(&[o, c_total, k, k], |i| {
            let (oi, rest) = (i / (c_total * k * k), i % (c_total * k * k));
            let (mut ci, pos) = (rest / (k * k), rest % (k * k));
            for (g, &c) in widths.iter().enumerate() {
                if ci < c {
                    return ws[g].data()[(oi * c + ci) * k * k + pos];
                }
                ci -= c;
            }
            unreachable!()
        });
        worst = worst.max(y.value().max_abs_diff(&oracle_conv(&x_cat, &w_cat)));
    }
    outcome(worst <= 1e-12, format!("max abs diff over 10 random cases {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let tol = 1e-6;
    let mut results = check_layers(0, 1e-6).expect("layer checks");
    let tiny = Model::build(&builtin::builtin("tiny").unwrap(), 0).unwrap();
    results.push(check_model(&tiny, 4, 2, 0, 1e-6).expect("model check"));
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed(tol))
        .map(|r| r.name.as_str())
        .collect();
    let e2e = results.last().unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failing.is_empty() && secs < 300.0,
        format!(
            "{} checks, worst rel err {worst:.2e}, end-to-end {:.2e} ({} coords, {} skipped at kinks){}; {secs:.0} s",
            results.len(),
            e2e.max_rel_error,
            e2e.coordinates,
            e2e.skipped,
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failing.join(","))
            }
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let len = 5 * 44_100;
    let ch = (0..2)
        .map(|_| (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let clip = AudioClip::new(44_100, ch).unwrap();
    let cfg = StftConfig::default();
    let back = istft(&stft(&clip, cfg).unwrap()).unwrap();
    let (lo, hi) = (cfg.window, len - cfg.window);
    let (mut err, mut energy) = (0.0, 0.0);
    for c in 0..2 {
        for i in lo..hi {
            err += (clip.channels[c][i] - back.channels[c][i]).powi(2);
            energy += clip.channels[c][i].powi(2);
        }
    }
    let rel = (err / energy).sqrt();
    outcome(
        rel <= 1e-6,
        format!(
            "window {} hop {}: interior relative error {rel:.2e}",
            cfg.window, cfg.hop
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let ch = (0..2)
            .map(|_| (0..8000).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = stft(&AudioClip::new(8000, ch).unwrap(), StftConfig { window: 256, hop: 64 }).unwrap();
        let sources = rng.gen_range(2..=4);
        let est: Vec<Tensor> = (0..sources)
            .map(|_| {
                Tensor::from_fn(&[2, x.frames, x.bins()], |_| {
                    if rng.gen_bool(0.05) {
                        0.0
                    } else {
                        rng.gen_range(0.0..3.0)
                    }
                })
            })
            .collect();
        let out = mwf(&x, &est, MwfConfig::default()).unwrap();
        for (k, xv) in x.data.iter().enumerate() {
            let s: rustfft::num_complex::Complex64 = out.iter().map(|o| o.data[k]).sum();
            worst = worst.max((s - xv).norm() / xv.norm().max(1e-300));
        }
    }
    outcome(
        worst <= 1e-8,
        format!("max relative |sum - mixture| over all TF bins {worst:.2e}"),
    )
}

fn criterion_7() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["vocals-table1", "drums-table1", "bass-table1", "other-table1"] {
        let start = Instant::now();
        let cfg = builtin::builtin(name).unwrap();
        let res = cfg.validate().and_then(|_| Model::build(&cfg, 0)).and_then(|m| {
            let y = m.infer(&Tensor::full(&[1, 2, 256, 1600], 0.25))?;
            Ok((m.param_count(), y))
        });
        match res {
            Ok((params, y)) => {
                let good = y.shape() == [1, 2, 256, 1600] && y.is_finite();
                ok &= good;
                parts.push(format!("{name} {params} params {:.0} s", start.elapsed().as_secs_f64()));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(ok, parts.join("; "))
}

fn improvement(report: &AblationReport, variant: &str) -> Vec<(String, f64)> {
    report
        .rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.source.clone(), r.improvement_db()))
        .collect()
}

fn criterion_8(report: &AblationReport, secs: f64) -> Outcome {
    let gains = improvement(report, "tiny");
    let floor = REGRESSION_BOUND_DB.max(3.0);
    let ok = gains.len() == 2 && gains.iter().all(|(_, g)| *g >= floor);
    outcome(
        ok && secs < 900.0,
        format!(
            "tiny, 32 train / 8 held-out scenes, {PILOT_EPOCHS} epochs: {} (bound {floor:.1} dB); training+eval of this variant {secs:.0} s",
            gains.iter().map(|(s, g)| format!("{s} +{g:.2} dB")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_9(report: &AblationReport) -> Outcome {
    let variants = ["tiny-no-dilation", "tiny-standard-dilation", "tiny"];
    let ok = report.rows.len() == 6
        && variants
            .iter()
            .all(|v| report.rows.iter().filter(|r| r.variant == *v).count() == 2)
        && report
            .rows
            .iter()
            .all(|r| r.sdr_db.is_finite() && r.mixture_db.is_finite());
    let mut summary = String::new();
    for v in variants {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.variant == v).collect();
        let mean = rows.iter().map(|r| r.sdr_db).sum::<f64>() / rows.len().max(1) as f64;
        let _ = write!(summary, "{v} {mean:.2} dB; ");
    }
    outcome(
        ok,
        format!("average SDR per variant (trend only, not asserted): {summary}"),
    )
}

fn norms_ok(r: &WeightNormReport) -> bool {
    let csv = r.to_csv();
    let mut lines = csv.lines();
    let header_ok =
        lines.next().is_some_and(|l| l.starts_with("# layer ")) && lines.next() == Some(WeightNormReport::CSV_HEADER);
    let rows: Vec<&str> = lines.collect();
    header_ok
        && !r.rows.is_empty()
        && rows.len() == r.rows.len()
        && rows.iter().all(|l| l.split(',').count() == 6)
        && r.rows.last().unwrap().normalized == 1.0
        && r.rows
            .iter()
            .all(|row| row.normalized.is_finite() && row.normalized > 0.0)
}

fn criterion_10(trained: &[(String, Vec<TrainedSource>)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in ["tiny-standard-dilation", "tiny"] {
        let Some((_, models)) = trained.iter().find(|(n, _)| n == variant) else {
            return outcome(false, format!("{variant} was not trained"));
        };
        for t in models {
            let r = weight_norm_report(&t.model, &LayerSelector::default()).expect("report");
            ok &= norms_ok(&r);
            let vals: Vec<String> = r.rows.iter().map(|row| format!("{:.3}", row.normalized)).collect();
            parts.push(format!("{variant}/{} [{}]", t.report.source, vals.join(" ")));
        }
    }
    outcome(ok, format!("normalized norms by skip: {}", parts.join("; ")))
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!(
            "criterion {n:>2}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());

    let variants: Vec<_> = ["tiny-no-dilation", "tiny-standard-dilation", "tiny"]
        .iter()
        .map(|n| (n.to_string(), builtin::builtin(n).unwrap()))
        .collect();
    let split = SyntheticSplit::generate(0, 32, 8).expect("synthetic scenes");
    let cfg = TrainConfig {
        patch_frames: 64,
        patches_per_scene: 2,
        ..TrainConfig::default()
    }
    .with_epochs(PILOT_EPOCHS);
    let data = TrainingSet::from_synthetic(&split.train, 64, StftConfig::default()).expect("training set");
    let mut ablation = AblationReport::default();
    let mut named: Vec<(String, Vec<TrainedSource>)> = Vec::new();
    let mut tiny_secs = f64::NAN;
    for (name, network) in &variants {
        let started = Instant::now();
        let trained = train_sources(network, &data, &cfg, 0, |_, _| {}).expect("training");
        let eval = evaluate_scenes(&models(&trained), &split.test, StftConfig::default()).expect("evaluation");
        ablation.add(name, &eval, &trained);
        if name == "tiny" {
            tiny_secs = started.elapsed().as_secs_f64();
        }
        named.push((name.clone(), trained));
    }

    report(8, criterion_8(&ablation, tiny_secs));
    report(9, criterion_9(&ablation));
    report(10, criterion_10(&named));

    println!("\nablation report:\n{}", ablation.to_csv());
    println!("acceptance run took {:.0} s", total.elapsed().as_secs_f64());

    let unexpected: Vec<usize> = results
        .iter()
        .filter(|(n, o)| !o.pass && !KNOWN_UNATTAINABLE.contains(n))
        .map(|(n, _)| *n)
        .collect();
    let tolerated: Vec<usize> = results
        .iter()
        .filter(|(n, o)| !o.pass && KNOWN_UNATTAINABLE.contains(n))
        .map(|(n, _)| *n)
        .collect();
    if !tolerated.is_empty() {
        println!("failing as expected (not attainable as stated): {tolerated:?}");
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
