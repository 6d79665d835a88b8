use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iced_core::env::LevelParams;

const SMALL: &str = r#"
[dataset]
train_levels = 8
test_levels = 6
edge_levels = 3
large_levels = 2
large_scale = 4

[vae]
latent = 8
dense = 32
bottleneck = 16
decoder_dim = 32
epochs = 2

[train]
eval_every = 10
eval_episodes = 1
final_eval_episodes = 1
probe_workers = 2
shift_samples = 4
generative_every = 5

[train.agent]
hidden = 8

[train.ppo]
workers = 4
horizon = 16
epochs = 1
minibatches = 1
"#;

fn iced(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iced"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("run iced")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_levels(path: &Path) -> Vec<LevelParams> {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(iced(dir.path(), &["gen-dataset", "--config", "small.toml", "--seed", "3", "--out-dir", "data"]));
    dir
}

#[test]
fn gen_dataset_writes_every_set() {
    let dir = setup();
    let data = dir.path().join("data");
    let train = read_levels(&data.join("train.json"));
    let test = read_levels(&data.join("test.json"));
    assert_eq!(train.len(), 8);
    assert_eq!(test.len(), 6);
    assert!(test.iter().all(|l| !train.contains(l)));
    assert_eq!(read_levels(&data.join("edge_low_moss.json")).len(), 3);
    assert_eq!(read_levels(&data.join("edge_low_moss_high_lava.json")).len(), 3);
    let large = read_levels(&data.join("large.json"));
    assert_eq!((large[0].height, large[0].width), (18, 18));
    assert_eq!((train[0].height, train[0].width), (9, 9));
}

#[test]
fn train_reruns_give_identical_metrics() {
    let dir = setup();
    for out in ["a", "b"] {
        ok(iced(
            dir.path(),
            &[
                "train", "--config", "small.toml", "--method", "uniform", "--levels", "data/train.json",
                "--eval-sets", "data/test.json", "--updates", "20", "--seed", "1", "--out-dir", out,
            ],
        ));
    }
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("update,train_return,test_return,gen_gap,shift_gap,mi_estimate,probe_acc,bound,jsd,"));
    assert_eq!(text.lines().count(), 3);
    // The persisted config reproduces the run.
    let cfg: iced_core::driver::TrainConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!((cfg.updates, cfg.seed, cfg.ppo.workers), (20, 1, 4));
}

#[test]
fn flags_override_the_config_file() {
    let dir = setup();
    ok(iced(
        dir.path(),
        &[
            "train", "--config", "small.toml", "--method", "plr", "--levels", "data/train.json", "--updates", "3",
            "--workers", "2", "--smi-sign", "-", "--dump-buffer-every", "1", "--out-dir", "run",
        ],
    ));
    let cfg: iced_core::driver::TrainConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/config.json")).unwrap()).unwrap();
    assert_eq!(cfg.ppo.workers, 2);
    assert_eq!(cfg.ppo.horizon, 16);
    assert_eq!(cfg.smi_sign, iced_core::driver::SmiSign::Minus);
    assert!(dir.path().join("run/buffer_000003.json").exists());
}

#[test]
fn unknown_config_keys_are_named() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[train.ppo]\nhorizn = 3\n").unwrap();
    let out = iced(dir.path(), &["train", "--config", "bad.toml", "--levels", "data/train.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("horizn"), "{err}");

    let out = iced(dir.path(), &["train", "--levels", "data/missing.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn evaluate_on_unsolvable_levels_reports_zero() {
    let dir = setup();
    ok(iced(
        dir.path(),
        &["train", "--config", "small.toml", "--levels", "data/train.json", "--updates", "2", "--out-dir", "run"],
    ));
    let walled = vec![LevelParams::from_ascii(&["#####", "#S#G#", "#####"]).unwrap(); 3];
    fs::write(dir.path().join("walled.json"), serde_json::to_string(&walled).unwrap()).unwrap();
    let out = ok(iced(dir.path(), &["evaluate", "--run-dir", "run", "--eval-sets", "walled=walled.json"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("walled\treturn 0.0000\tsolved 0.0000"), "{stdout}");
    assert!(dir.path().join("run/evaluation.json").exists());
}

#[test]
fn report_has_a_row_per_method_seed_and_set() {
    let dir = setup();
    ok(iced(
        dir.path(),
        &["pretrain-vae", "--config", "small.toml", "--levels", "data/train.json", "--out-dir", "vae"],
    ));
    assert!(dir.path().join("vae/pretrain_report.json").exists());
    let mut runs = Vec::new();
    for method in ["uniform", "plr", "iced"] {
        for seed in ["0", "1"] {
            let out = format!("runs/{method}-{seed}");
            ok(iced(
                dir.path(),
                &[
                    "train", "--config", "small.toml", "--method", method, "--levels", "data/train.json",
                    "--vae", "vae/vae.bin", "--eval-sets", "test=data/test.json,data/edge_low_moss.json",
                    "--updates", "5", "--seed", seed, "--out-dir", &out,
                ],
            ));
            runs.push(out);
        }
    }
    let mut args = vec!["report", "--out", "cmp.csv"];
    args.extend(runs.iter().map(String::as_str));
    ok(iced(dir.path(), &args));
    let mut rdr = csv::Reader::from_path(dir.path().join("cmp.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(header.iter().take(3).collect::<Vec<_>>(), ["method", "seed", "eval_set"]);
    let keys: Vec<(String, String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string(), r[2].to_string())
        })
        .collect();
    assert_eq!(keys.len(), 3 * 2 * 2);
    let unique: std::collections::HashSet<_> = keys.iter().collect();
    assert_eq!(unique.len(), keys.len());
    assert!(keys.contains(&("iced".into(), "1".into(), "edge_low_moss".into())));
}
