use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use earlysnn::cli::{self, read_manifest, RunConfig, CHECKPOINT_NAME, METRICS_NAME};
use earlysnn::earlybench::read_curve_csv;
use earlysnn::event_io::{read_stream, synthetic_dataset, write_stream, EventStream, Pattern};
use earlysnn::network::{load_checkpoint, Network};
use earlysnn::training::evaluate;

const TINY: &str = r#"
seed = 3
[data.synthetic]
patterns = ["bar_left", "bar_right"]
per_class = 4
test_per_class = 2
duration_us = 60000
rate = 20000.0
[network]
input = [2, 32, 32]
num_classes = 2
bin_us = 2000
common_width = 2
ventral_widths = [4, 4, 8, 8]
dorsal_widths = [2, 4, 4, 2]
fusion_width = 8
[train]
epochs = 1
batch_size = 4
window_us = 40000
eval_window_us = 60000
[eval]
duration_us = 60000
batch_size = 4
chunk_steps = 7
table_times_s = [0.01, 0.02, 0.06, 1.0]
"#;

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    let text = format!("output_dir = {:?}\n{TINY}{extra}", out.display().to_string());
    fs::write(&path, text).unwrap();
    path
}

fn exe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_eevact"));
    c.env_remove(cli::SEED_ENV);
    c
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["eevact"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generate_writes_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.toml");
    fs::write(
        &cfg,
        "seed = 11\n[data.synthetic]\npatterns = [\"dot_cw\", \"bar_right\"]\nper_class = 10\ntest_per_class = 0\nduration_us = 50000\n",
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(run(&["generate", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]), 0);
    }
    let rows = read_manifest(&a.join(cli::MANIFEST_NAME)).unwrap();
    assert_eq!(rows.len(), 20);
    assert_eq!(fs::read_dir(&a).unwrap().count(), 21);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    // labels and patterns agree with the generator run directly
    let direct = synthetic_dataset(&[Pattern::DotCw, Pattern::BarRight], 10, (32, 32), 50_000, 20_000.0, 11).unwrap();
    for (row, s) in rows.iter().zip(&direct) {
        assert_eq!(Some(row.label), s.label);
        assert_eq!(row.pattern, ["dot_cw", "bar_right"][row.label]);
        let loaded = row.load(&a).unwrap();
        assert_eq!(&loaded, s);
    }
}

#[test]
fn generate_refuses_non_empty_dir_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    assert_eq!(run(&["generate", "--out", out.to_str().unwrap()]), 1);
    assert_eq!(run(&["generate", "--out", out.to_str().unwrap(), "--force"]), 0);
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let gen = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut c = exe();
        c.args(["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(v) = env {
            c.env(cli::SEED_ENV, v);
        }
        assert!(c.status().unwrap().success());
        dir_bytes(&out)
    };
    let by_env = gen("env", Some("9"), None);
    let by_flag = gen("flag", None, Some("9"));
    let by_file = gen("file", None, None);
    assert_eq!(by_env, by_flag);
    assert_ne!(by_env, by_file);
    let status = exe()
        .args(["generate", "--out", tmp.path().join("bad").to_str().unwrap()])
        .env(cli::SEED_ENV, "nope")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = exe().args(["train", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert_eq!(exe().args(["frobnicate"]).status().unwrap().code(), Some(1));
}

#[test]
fn train_smoke_then_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "");
    let start = Instant::now();
    assert_eq!(run(&["train", "--config", cfg_path.to_str().unwrap()]), 0);
    assert!(start.elapsed().as_secs() < 60);
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let model = cfg.output_dir.join("model");
    let ckpt = model.join(CHECKPOINT_NAME);
    let metrics = fs::read_to_string(model.join(METRICS_NAME)).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,eval_top1,eval_top5,wall_seconds"));
    assert_eq!(metrics.lines().count(), 2);

    // the checkpoint reproduces the logged accuracy
    let logged: f64 = metrics.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let mut net = load_checkpoint(&ckpt).unwrap();
    let (_, test) = cfg.datasets().unwrap();
    let (top1, _) = evaluate(&mut net, &test, cfg.train.eval_window_us, cfg.train.batch_size).unwrap();
    assert_eq!(top1, logged);

    // resuming continues from the saved weights
    let resumed = tmp.path().join("resumed");
    let code = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(resumed.join("model").join(CHECKPOINT_NAME).is_file());

    // reports
    let report = tmp.path().join("report");
    let eval = |dir: &Path| run(&["eval", "--config", cfg_path.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(eval(&report), 0);
    let (header, rows) = read_curve_csv(&report.join("curve.csv")).unwrap();
    assert_eq!(header, ["time_s", "top1", "top3", "top5", "macs_g", "acs_g"]);
    assert_eq!(rows.len(), 30);
    let table = fs::read_to_string(report.join("table.md")).unwrap();
    assert!(table.contains("| 0.01s | 0.02s | 0.06s | 1.0s |"), "{table}");
    assert!(table.contains("n/a"));
    for svg in ["accuracy_over_time.svg", "accuracy_over_synops.svg"] {
        roxmltree::Document::parse(&fs::read_to_string(report.join(svg)).unwrap()).unwrap();
    }
    let again = tmp.path().join("report2");
    assert_eq!(eval(&again), 0);
    assert_eq!(dir_bytes(&report), dir_bytes(&again));

    // a checkpoint from a different topology is refused
    let egru = tmp.path().join("egru.toml");
    let text = fs::read_to_string(&cfg_path).unwrap().replace("fusion_width = 8", "fusion_width = 8\nfusion = \"egru\"");
    fs::write(&egru, text).unwrap();
    let out = exe()
        .args(["eval", "--config", egru.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("network.fusion"));
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "");
    let text = fs::read_to_string(&cfg_path).unwrap().replace("epochs = 1", "epochs = 1\nlr = 0.0\nlr_min = 0.0");
    fs::write(&cfg_path, text).unwrap();
    assert_eq!(run(&["train", "--config", cfg_path.to_str().unwrap()]), 0);
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let trained = load_checkpoint(&cfg.output_dir.join("model").join(CHECKPOINT_NAME)).unwrap();
    let init = Network::build(cfg.network.clone(), cfg.seed).unwrap();
    let a: Vec<_> = trained.params.iter().map(|p| p.value.data().to_vec()).collect();
    let b: Vec<_> = init.params.iter().map(|p| p.value.data().to_vec()).collect();
    assert_eq!(a, b);
}

#[test]
fn sweep_emits_one_curve_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        "[[sweep]]\nname = \"tet\"\nloss = \"tet\"\n[[sweep]]\nname = \"cem-last\"\nloss = \"cem\"\nreadout = \"last\"\n",
    );
    assert_eq!(run(&["train", "--config", cfg_path.to_str().unwrap()]), 0);
    let report = tmp.path().join("report");
    assert_eq!(run(&["eval", "--config", cfg_path.to_str().unwrap(), "--out", report.to_str().unwrap()]), 0);
    assert!(report.join("curve_tet.csv").is_file());
    assert!(report.join("curve_cem-last.csv").is_file());
    let svg = fs::read_to_string(report.join("accuracy_over_time.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    // three ks per variant
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 6);
    let table = fs::read_to_string(report.join("table.md")).unwrap();
    assert!(table.contains("| tet | Top-1 (%) |") && table.contains("| cem-last | ACs (G) |"));
}

#[test]
fn inspect_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.eeva");
    write_stream(&EventStream::empty(32, 32), &empty).unwrap();
    let out = exe().args(["inspect", empty.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("events: 0"));

    let s = earlysnn::event_io::generate_synthetic(Pattern::BarLeft, (32, 24), 100_000, 10_000.0, 4).unwrap();
    let known = tmp.path().join("known.eeva");
    write_stream(&s, &known).unwrap();
    let out = exe().args(["inspect", known.to_str().unwrap(), "--bins", "4"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let [off, on] = s.polarity_counts();
    assert!(text.contains("geometry: 32x24"));
    assert!(text.contains(&format!("events: {}", s.event_count())));
    assert!(text.contains(&format!("polarity: on={on} off={off}")));
    let hist: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("event rate")).skip(1).collect();
    assert_eq!(hist.len(), 4);
    assert_eq!(read_stream(&known).unwrap().stream.event_count(), s.event_count());

    let corrupt = tmp.path().join("corrupt.eeva");
    fs::write(&corrupt, b"NOPE0000000000000000").unwrap();
    let out = exe().args(["inspect", corrupt.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn readme_example_config_parses() {
    let readme = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = RunConfig::from_toml(block).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.variants().len(), 2);
    assert_eq!(cfg.train.target_accuracy, Some(0.95));
}
