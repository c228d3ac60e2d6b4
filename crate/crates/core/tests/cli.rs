use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d3net::blocks::{builtin, save_checkpoint, Model};
use d3net::spectral::read_wav;

fn d3net(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d3net"))
        .args(args)
        .env_remove("D3NET_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Train both synthetic sources on two short runs into `dir`.
fn quick_train(dir: &Path, seed: &str) -> Output {
    d3net(&[
        "train",
        "--config",
        "tiny",
        "--data",
        "synth",
        "--scenes",
        "2",
        "--epochs",
        "2",
        "--seed",
        seed,
        "--set",
        "train.patch_frames=16",
        "--set",
        "train.batch_size=2",
        "--out",
        s(dir),
    ])
}

#[test]
fn rf_analyze_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("naive.csv");
    let o = d3net(&["rf-analyze", "--layers", "3", "--scheme", "naive", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let row = text
        .lines()
        .find(|l| l.split(',').nth(4) == Some("3<-0"))
        .expect("direct skip row");
    assert_eq!(row.rsplit(',').next(), Some("6"));

    let o = d3net(&["rf-analyze", "--layers", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1 paths, 0 with blind spots"));

    let csv = tmp.path().join("multi.csv");
    let o = d3net(&["rf-analyze", "--layers", "5", "--scheme", "multi", "--out", s(&csv)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 16 + 1);
    // The union of all paths is gap-free; single paths that jump over
    // non-adjacent layers are not.
    let union = rows.last().unwrap();
    assert!(union.contains(",union,") && union.ends_with(",0"), "{union}");

    assert_eq!(d3net(&["rf-analyze", "--scheme", "sideways"]).status.code(), Some(1));
}

#[test]
fn train_writes_checkpoints_and_repeatable_loss_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = quick_train(&a, "5");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("fingerprint"));
    assert!(quick_train(&b, "5").status.success());
    for src in ["tonal", "percussive"] {
        let la = std::fs::read_to_string(a.join(format!("{src}.loss.csv"))).unwrap();
        let lb = std::fs::read_to_string(b.join(format!("{src}.loss.csv"))).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.lines().count(), 1 + 2);
        assert!(a.join(format!("{src}.ckpt")).is_file());
    }

    let o = d3net(&["train", "--config", "no-such-config", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = d3net(&[
        "train",
        "--config",
        "tiny",
        "--set",
        "train.lr_switch_epoch=99",
        "--out",
        s(&tmp.path().join("c")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &PathBuf, env_seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_d3net"))
            .args(["synth", "--scenes", "1", "--out", s(dir)])
            .env("D3NET_SEED", env_seed)
            .output()
            .unwrap()
    };
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(run(&a, "3").status.success());
    assert!(run(&b, "3").status.success());
    assert!(run(&c, "4").status.success());
    let read = |d: &PathBuf| std::fs::read(d.join("scene_000").join("mixture.wav")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn separate_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpts = tmp.path().join("ckpt");
    assert!(quick_train(&ckpts, "0").status.success());
    let data = tmp.path().join("data");
    let o = d3net(&["synth", "--scenes", "1", "--first", "40", "--out", s(&data)]);
    assert!(o.status.success());
    let scene = data.join("scene_040");

    let est_root = tmp.path().join("est");
    let est = est_root.join("scene_040");
    let o = d3net(&[
        "separate",
        "--ckpt",
        s(&ckpts.join("tonal.ckpt")),
        s(&ckpts.join("percussive.ckpt")),
        "--in",
        s(&scene.join("mixture.wav")),
        "--out",
        s(&est),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mix = read_wav(scene.join("mixture.wav")).unwrap();
    let t = read_wav(est.join("tonal.wav")).unwrap();
    let p = read_wav(est.join("percussive.wav")).unwrap();
    let lsb = 1.0 / 32768.0;
    let worst = (0..2)
        .flat_map(|c| (0..mix.len()).map(move |i| (c, i)))
        .map(|(c, i)| (t.channels[c][i] + p.channels[c][i] - mix.channels[c][i]).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 2.0 * lsb, "stems miss the mixture by {worst}");

    let scores = tmp.path().join("scores.csv");
    let o = d3net(&["eval", "--est", s(&est_root), "--ref", s(&data), "--out", s(&scores)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&scores).unwrap();
    assert!(csv.starts_with("scene,source,method,sdr_db"));
    assert!(csv.contains("median,tonal,mixture,"));
    assert!(csv.contains("median,percussive,estimate,"));

    // references scored against themselves hit the cap
    let o = d3net(&["eval", "--est", s(&data), "--ref", s(&data)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("median,tonal,estimate,100.0000"));

    std::fs::remove_file(est.join("percussive.wav")).unwrap();
    let o = d3net(&["eval", "--est", s(&est_root), "--ref", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scene_040/percussive.wav"), "{}", stderr(&o));

    let o = d3net(&["weight-norms", "--ckpt", s(&ckpts.join("tonal.ckpt"))]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2 + 2);
    assert!(out.lines().last().unwrap().ends_with(",1.0000000000"));
}

#[test]
fn separate_rejects_bad_inputs_but_tolerates_untrained_networks() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = Model::build(&builtin::builtin("tiny").unwrap(), 1).unwrap();
    model.meta.source = Some("tonal".into());
    model.meta.patch_frames = Some(16);
    let ckpt = tmp.path().join("untrained.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();

    let wav = |name: &str, channels: u16, rate: u32| {
        let path = tmp.path().join(name);
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..(8192 * channels as usize) {
            w.write_sample(((i * 37 % 2000) as i16) - 1000).unwrap();
        }
        w.finalize().unwrap();
        path
    };
    let good = wav("good.wav", 2, 44_100);
    let out = tmp.path().join("out");
    let o = d3net(&["separate", "--ckpt", s(&ckpt), "--in", s(&good), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(out.join("tonal.wav")).unwrap().len(), 8192);

    let three = wav("three.wav", 3, 44_100);
    assert_eq!(
        d3net(&["separate", "--ckpt", s(&ckpt), "--in", s(&three), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );

    model.meta.sample_rate = Some(44_100);
    save_checkpoint(&model, &ckpt).unwrap();
    let slow = wav("slow.wav", 2, 22_050);
    let o = d3net(&["separate", "--ckpt", s(&ckpt), "--in", s(&slow), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Hz"));
}

#[test]
fn gradcheck_passes_on_tiny_and_fails_at_zero_tolerance() {
    let o = d3net(&["gradcheck", "--config", "tiny"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with(",pass")));
    let o = d3net(&["gradcheck", "--config", "tiny", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(3));
}
