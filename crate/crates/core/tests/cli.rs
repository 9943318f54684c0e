use std::path::Path;
use std::process::{Command, Output};

use iaml::checkpoint;
use iaml::metrics::{LpipsLite, MetricsReport};
use iaml::train::read_log;

const TINY: [&str; 12] = [
    "--set",
    "model.depth=2",
    "--set",
    "model.base_channels=4",
    "--set",
    "train.crop=16",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.epochs=2",
    "--set",
    "train.checkpoint_every=3",
];

fn iaml(args: &[&str], data_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_iaml"));
    cmd.args(args)
        .env_remove("IAML_DATA_ROOT")
        .env("RUST_LOG", "warn");
    if let Some(root) = data_root {
        cmd.env("IAML_DATA_ROOT", root);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(root: &Path) {
    let r = root.to_str().unwrap();
    ok(&iaml(
        &[
            "synth", "--out", r, "--split", "our485", "--count", "4", "--height", "24", "--width",
            "24",
        ],
        None,
    ));
    ok(&iaml(
        &[
            "synth", "--out", r, "--split", "eval15", "--count", "2", "--height", "20", "--width",
            "28", "--seed", "50",
        ],
        None,
    ));
}

#[test]
fn train_evaluate_enhance_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let mut args = vec!["train", "--run-dir", run_s, "--seed", "3"];
    args.extend(TINY);
    let stdout = ok(&iaml(&args, Some(&data)));
    assert!(stdout.contains("checkpoint:"));
    let log = read_log(&run.join("log.jsonl")).unwrap();
    assert_eq!(log.len(), 4);
    assert!(run.join("config.echo").is_file());
    assert!(run.join("checkpoints/step_00000003.ckpt").is_file());
    let ckpt = run.join("checkpoints/step_00000004.ckpt");
    let state = checkpoint::load(&ckpt).unwrap();
    assert_eq!((state.step, state.config.train.seed), (4, 3));

    // Resuming a finished run from its step-3 checkpoint replays only step 4.
    let rerun = tmp.path().join("rerun");
    let mid = run.join("checkpoints/step_00000003.ckpt");
    ok(&iaml(
        &[
            "train",
            "--run-dir",
            rerun.to_str().unwrap(),
            "--checkpoint",
            mid.to_str().unwrap(),
        ],
        Some(&data),
    ));
    let replay = read_log(&rerun.join("log.jsonl")).unwrap();
    assert_eq!(replay.len(), 1);
    assert_eq!(replay[0].step, 4);
    assert_eq!(replay[0].loss.total, log[3].loss.total);

    let lpips = tmp.path().join("lpips.json");
    LpipsLite::random(1, &[4, 8]).save(&lpips).unwrap();
    let table = ok(&iaml(
        &[
            "evaluate",
            "--run-dir",
            run_s,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--lpips-model",
            lpips.to_str().unwrap(),
        ],
        Some(&data),
    ));
    assert!(table.contains("LPIPS"));
    let id = checkpoint::checkpoint_id(&ckpt).unwrap();
    let report = MetricsReport::load_json(&run.join(format!("reports/eval_{id}.json"))).unwrap();
    assert_eq!(report.images.len(), 2);
    assert_eq!(report.checkpoint_id, id);
    assert!(report.mean_lpips.is_some());
    assert!(run.join(format!("reports/eval_{id}.csv")).is_file());

    let enhanced = tmp.path().join("enhanced");
    let input = data.join("eval15/low");
    let out = ok(&iaml(
        &[
            "enhance",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            enhanced.to_str().unwrap(),
        ],
        None,
    ));
    assert_eq!(out.lines().count(), 2);
    let img = iaml::data::load_image(&enhanced.join("1.png")).unwrap();
    assert_eq!(img.shape(), &[1, 3, 20, 28]);
}

#[test]
fn lpips_is_optional() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--run-dir",
        run.to_str().unwrap(),
        "--set",
        "train.max_steps=1",
    ];
    args.extend(TINY);
    ok(&iaml(&args, Some(&data)));
    let ckpt = run.join("checkpoints/step_00000001.ckpt");
    let broken = tmp.path().join("broken.json");
    std::fs::write(&broken, "{\"name\": 3}").unwrap();
    let out = iaml(
        &[
            "evaluate",
            "--run-dir",
            run.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--lpips-model",
            broken.to_str().unwrap(),
        ],
        Some(&data),
    );
    let table = ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("LPIPS disabled"));
    let mean = table.lines().find(|l| l.contains("mean")).unwrap();
    assert!(
        mean.trim_end()
            .trim_end_matches('|')
            .trim_end()
            .ends_with('-'),
        "{mean}"
    );
    let json = std::fs::read_dir(run.join("reports"))
        .unwrap()
        .find_map(|e| {
            let p = e.unwrap().path();
            (p.extension().unwrap() == "json").then_some(p)
        });
    let report = MetricsReport::load_json(&json.unwrap()).unwrap();
    assert!(report.mean_lpips.is_none());
    assert!(report.images.iter().all(|i| i.lpips.is_none()));
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["--set", "loss.lambdaa=0.5"], "loss.lambdaa"),
        (&["--set", "train.lr=fast"], "train.lr"),
        (&["--set", "loss.iaml.beta=-1"], "loss.iaml.beta"),
        (&["--set", "train.crop=17"], "train.crop"),
    ];
    for (extra, key) in cases {
        let mut args = vec!["train"];
        args.extend_from_slice(extra);
        let err = failed(&iaml(&args, Some(tmp.path())));
        assert!(err.contains(key), "{key}: {err}");
    }

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = \"many\"\n").unwrap();
    let err = failed(&iaml(&["train", "--config", cfg.to_str().unwrap()], None));
    assert!(err.contains("train.epochs"), "{err}");

    let err = failed(&iaml(&["train", "--set", "model.depth=2"], None));
    assert!(err.contains("IAML_DATA_ROOT"), "{err}");
}

#[test]
fn file_then_override_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = tmp.path().join("c.toml");
    let run = tmp.path().join("run");
    std::fs::write(
        &cfg,
        format!(
            "[data]\nroot = {:?}\n[train]\nseed = 11\nlr = 0.01\nmax_steps = 1\n[loss]\nlambda = 0.3\n",
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "loss.lambda=0.7",
        "--run-dir",
        run.to_str().unwrap(),
    ];
    args.extend(TINY);
    ok(&iaml(&args, None));
    let state = checkpoint::load(&run.join("checkpoints/step_00000001.ckpt")).unwrap();
    assert_eq!(state.config.loss.lambda, 0.7);
    assert_eq!(state.config.train.lr, 0.01);
    assert_eq!(state.config.train.seed, 11);
    let echo = std::fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("lambda = 0.7"));

    let again = tmp.path().join("again");
    let echo_path = run.join("config.echo");
    ok(&iaml(
        &[
            "train",
            "--config",
            echo_path.to_str().unwrap(),
            "--run-dir",
            again.to_str().unwrap(),
        ],
        None,
    ));
    let a = read_log(&run.join("log.jsonl")).unwrap();
    let b = read_log(&again.join("log.jsonl")).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            (x.step, &x.batch, x.loss.total),
            (y.step, &y.batch, y.loss.total)
        );
    }
}

#[test]
fn ablate_writes_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let mut args = vec![
        "ablate",
        "--steps",
        "2",
        "--eval-on",
        "train",
        "--run-dir",
        run.to_str().unwrap(),
    ];
    args.extend(TINY);
    let table = ok(&iaml(&args, Some(&data)));
    for label in ["Configuration", "SSIM", "PSNR"] {
        assert!(table.contains(label));
    }
    let json = std::fs::read_to_string(run.join("reports/ablation.json")).unwrap();
    let report: iaml::ablation::AblationReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.rows.len(), 5);
    assert!(report
        .rows
        .iter()
        .all(|r| r.order_digest == report.rows[0].order_digest));
    assert_eq!(
        std::fs::read_to_string(run.join("reports/ablation.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}
