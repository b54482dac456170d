use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aualign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aualign"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SHORT: [&str; 6] = [
    "--set",
    "train.stages.0.epochs=1",
    "--set",
    "train.stages.1.epochs=1",
    "--set",
    "train.stages.2.epochs=1",
];

fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let mut newlines = 0;
    let start = bytes
        .iter()
        .position(|&b| {
            newlines += usize::from(b == b'\n');
            newlines == 3
        })
        .unwrap();
    bytes[start + 1..].to_vec()
}

#[test]
fn help_works_everywhere_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        None,
        Some("train"),
        Some("eval"),
        Some("gradcheck"),
        Some("synth"),
        Some("attention"),
    ] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let text = ok(&aualign(&args, dir.path()));
        assert!(text.contains("Usage"), "{text}");
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn synth_train_eval_attention_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&aualign(
        &["synth", "--out", "data", "--subjects", "3", "--frames", "4"],
        d,
    ));
    assert!(d.join("data/manifest.csv").exists());
    assert!(d.join("data/synth.toml").exists());

    let mut train = vec![
        "train",
        "--manifest",
        "data/manifest.csv",
        "--out",
        "run",
        "--seed",
        "3",
    ];
    train.extend(SHORT);
    let text = ok(&aualign(&train, d));
    assert!(text.contains("trained 3 epochs"), "{text}");
    for f in [
        "config.toml",
        "metrics.log",
        "model.ckpt",
        "stage1.ckpt",
        "stage2.ckpt",
        "stage3.ckpt",
    ] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let snapshot = fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(snapshot.contains("seed = 3"));
    assert_eq!(
        fs::read_to_string(d.join("run/metrics.log"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let report = ok(&aualign(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "ev",
        ],
        d,
    ));
    assert!(report.contains("au=avg f1="), "{report}");
    assert!(report.contains("failure_rate="), "{report}");
    assert!(d.join("ev/metrics.txt").exists());

    ok(&aualign(
        &[
            "attention",
            "--checkpoint",
            "run/model.ckpt",
            "--manifest",
            "data/manifest.csv",
            "--index",
            "2",
            "--source",
            "ground-truth",
            "--set",
            "net.xi=0",
            "--out",
            "maps",
        ],
        d,
    ));
    let initial = pgm_pixels(&d.join("maps/au1_initial.pgm"));
    assert_eq!(initial.len(), (8 * 4) * (8 * 4));
    assert!(initial.iter().all(|&p| p == 0 || p == 255));
    assert!(initial.contains(&255));
    assert!(d.join("maps/au26_pair.pgm").exists());
}

#[test]
fn identical_seeds_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&aualign(
        &["synth", "--out", "data", "--subjects", "2", "--frames", "4"],
        d,
    ));
    for out in ["a", "b"] {
        let mut args = vec!["train", "--manifest", "data/manifest.csv", "--out", out];
        args.extend(SHORT);
        ok(&aualign(&args, d));
    }
    let a = fs::read_to_string(d.join("a/metrics.log")).unwrap();
    let b = fs::read_to_string(d.join("b/metrics.log")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn attention_accepts_explicit_landmarks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&aualign(
        &["synth", "--out", "data", "--subjects", "1", "--frames", "1"],
        d,
    ));
    let lm = "10,10,12,10,14,10,16,12,16,16,18,18,20,20,22,20,16,24,16,26";
    ok(&aualign(
        &[
            "attention",
            "--image",
            "data/images/s00_f00.ppm",
            "--landmarks",
            lm,
            "--source",
            "ground-truth",
            "--scale",
            "1",
            "--out",
            "m",
        ],
        d,
    ));
    assert_eq!(pgm_pixels(&d.join("m/au6_refined.pgm")).len(), 64);
    let bad = aualign(
        &[
            "attention",
            "--image",
            "data/images/s00_f00.ppm",
            "--landmarks",
            "1,2",
            "--out",
            "m2",
        ],
        d,
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&aualign(&["gradcheck", "--seeds", "4"], dir.path()));
    assert!(text.contains("0 failures"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[net]\nbogus = 1\n").unwrap();
    let out = aualign(
        &[
            "train",
            "--config",
            "bad.toml",
            "--manifest",
            "x.csv",
            "--out",
            "r",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = aualign(
        &[
            "train",
            "--set",
            "net.l=30",
            "--manifest",
            "x.csv",
            "--out",
            "r",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));

    let out = aualign(&["train", "--out", "r"], d);
    assert_eq!(out.status.code(), Some(1));

    let out = aualign(
        &[
            "eval",
            "--checkpoint",
            "missing.ckpt",
            "--manifest",
            "x.csv",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("m.csv"), "image,subject,x0,y0,au1\na.ppm,s,1,2,0\n").unwrap();
    let out = aualign(&["train", "--manifest", "m.csv", "--out", "r"], d);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
