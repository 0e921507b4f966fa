use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freqmoe::checkpoint::Checkpoint;
use freqmoe::params::Parameterized;

const BIN: &str = env!("CARGO_BIN_EXE_freqmoe");

const TINY: &str = "seed = 4
allow_offgrid = true
[data.synthetic]
total_len = 1200
segment_len = 120
n_segments = 10
[model]
lookback = 24
horizon = 12
experts = 2
[train]
epochs = 2
[sweep]
experts = [0, 3]
blocks = [1, 2, 3]
";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn train_tiny(dir: &Path, extra: &str) -> PathBuf {
    std::fs::write(dir.join("run.toml"), format!("{TINY}{extra}")).unwrap();
    let out = run(&["train", "--config", "run.toml", "--out", "run"], dir);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("run/model.ckpt")
}

#[test]
fn train_writes_checkpoint_and_history() {
    let (dir, _) = setup(TINY);
    let out = run(&["train", "--config", "run.toml", "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("val_mse"));
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("epoch,train_mse,val_mse,lr"));
    assert_eq!(lines.count(), 2);
    assert!(dir.path().join("run/model.ckpt").exists());
}

#[test]
fn negative_horizon_is_a_config_error_naming_the_field() {
    let (dir, _) = setup("[model]\nhorizon = -1\n");
    let out = run(&["train", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("horizon"), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
}

#[test]
fn unknown_keys_and_offgrid_values_are_rejected() {
    let (dir, _) = setup("[model]\nexpert = 3\n");
    let out = run(&["report", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("expert"));

    std::fs::write(dir.path().join("run.toml"), "[model]\nblocks = 5\n").unwrap();
    let out = run(&["report", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model.blocks"));
    let out = run(&["report", "--config", "run.toml", "--allow-offgrid"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("71,932 complex-counted parameters"));
}

#[test]
fn report_prints_both_conventions() {
    let (dir, _) = setup("[model]\nblocks = 1\n");
    let out = run(&["report", "--config", "run.toml", "--channels", "7"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("14,508 complex-counted parameters"), "{text}");
    assert!(text.contains("real-valued parameters"));
    assert!(text.contains("99,134 linear MACs"));
    assert!(text.contains("convention:"));

    std::fs::write(dir.path().join("run.toml"), "[model]\nblocks = 3\n").unwrap();
    let out = run(&["report", "--config", "run.toml"], dir.path());
    assert!(stdout(&out).contains("43,220 complex-counted parameters"));
}

#[test]
fn synth_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(&["synth", "--out", "a.csv"], d).status.success());
    assert!(run(&["synth", "--out", "b.csv"], d).status.success());
    assert!(run(&["synth", "--out", "c.csv", "--seed", "9"], d).status.success());
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 10_001);

    // Without Gaussian noise the seed has nothing to change.
    std::fs::write(d.join("quiet.toml"), "[data.synthetic]\nnoise_sigma = 0.0\n").unwrap();
    run(&["synth", "--config", "quiet.toml", "--out", "q1.csv", "--seed", "1"], d);
    run(&["synth", "--config", "quiet.toml", "--out", "q2.csv", "--seed", "2"], d);
    assert_eq!(std::fs::read(d.join("q1.csv")).unwrap(), std::fs::read(d.join("q2.csv")).unwrap());
}

#[test]
fn eval_is_repeatable_and_checks_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let ckpt = ckpt.to_str().unwrap();
    let a = run(&["eval", "--checkpoint", ckpt, "--out", "m.csv"], dir.path());
    let b = run(&["eval", "--checkpoint", ckpt], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let mse: f64 = row[5].parse().unwrap();
    let rmse: f64 = row[8].parse().unwrap();
    assert!(mse.is_finite() && (rmse * rmse - mse).abs() < 1e-12);

    let bad = run(&["eval", "--checkpoint", ckpt, "--horizon", "96"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("incompatible"));
}

#[test]
fn eval_on_a_written_dataset_matches_the_generated_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let ckpt = ckpt.to_str().unwrap();
    std::fs::write(
        dir.path().join("spec.toml"),
        "[data.synthetic]\ntotal_len = 1200\nsegment_len = 120\nn_segments = 10\n",
    )
    .unwrap();
    assert!(run(&["synth", "--config", "spec.toml", "--out", "syn.csv"], dir.path())
        .status
        .success());
    let generated = run(&["eval", "--checkpoint", ckpt], dir.path());
    let from_file = run(&["eval", "--checkpoint", ckpt, "--dataset", "syn.csv"], dir.path());
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    let metric = |o: &Output| stdout(o).lines().find(|l| l.starts_with("MSE")).unwrap().to_string();
    assert_eq!(metric(&generated), metric(&from_file));
}

#[test]
fn data_and_io_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("missing.toml"), "[data]\nsource = \"nope.csv\"\n").unwrap();
    assert_eq!(run(&["train", "--config", "missing.toml"], d).status.code(), Some(3));

    let mut csv = String::from("date,a\n");
    for t in 0..400 {
        csv.push_str(&format!("{t},{}\n", if t == 50 { "x".into() } else { t.to_string() }));
    }
    std::fs::write(d.join("bad.csv"), csv).unwrap();
    std::fs::write(
        d.join("bad.toml"),
        "allow_offgrid = true\n[data]\nsource = \"bad.csv\"\n[model]\nlookback = 24\nhorizon = 12\n",
    )
    .unwrap();
    let out = run(&["train", "--config", "bad.toml"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 52"), "{}", stderr(&out));

    assert_eq!(run(&["eval", "--checkpoint", "absent.ckpt"], d).status.code(), Some(3));
    assert_eq!(run(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(run(&["--help"], d).status.code(), Some(0));
}

#[test]
fn csv_datasets_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("date,a,b,OT\n");
    for t in 0..600 {
        let x = t as f64;
        csv.push_str(&format!("{t},{},{},{}\n", (x * 0.2).sin(), (x * 0.05).cos() * 3.0, x * 0.01));
    }
    std::fs::write(d.join("multi.csv"), csv).unwrap();
    std::fs::write(
        d.join("m.toml"),
        "allow_offgrid = true\n[data]\nsource = \"multi.csv\"\n[model]\nlookback = 24\nhorizon = 12\n\
         blocks = 2\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let out = run(&["train", "--config", "m.toml", "--out", "o"], d);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["eval", "--checkpoint", "o/model.ckpt"], d);
    assert!(stdout(&out).contains("dataset   multi"));
    let report = run(&["report", "--config", "m.toml"], d);
    assert!(stdout(&report).contains("over 3 channel(s)"));
}

#[test]
fn plugin_checkpoint_lists_gate_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    std::fs::write(
        dir.path().join("run.toml"),
        TINY.replace("experts = 2\n", "experts = 2\nkind = \"dlinear+moe\"\n"),
    )
    .unwrap();
    let out = run(&["train", "--config", "run.toml", "--out", "plug"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let names: Vec<String> = Checkpoint::load(dir.path().join("plug/model.ckpt"))
        .unwrap()
        .model
        .manifest()
        .into_iter()
        .map(|e| e.name)
        .collect();
    assert!(names.contains(&"moe.gate.weight".to_string()), "{names:?}");
    assert!(names.contains(&"linear.weight".to_string()));
    assert!(ckpt.exists());
}

#[test]
fn checkpoint_echo_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let first = Checkpoint::load(&ckpt).unwrap();
    std::fs::write(dir.path().join("echo.toml"), first.config.to_toml()).unwrap();
    let out = run(&["train", "--config", "echo.toml", "--out", "replay"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let replay = std::fs::read(dir.path().join("replay/model.ckpt")).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), replay);
    let val = |dir: &str| {
        let h = std::fs::read_to_string(Path::new(dir)).unwrap();
        h.lines().last().unwrap().split(',').nth(2).unwrap().parse::<f64>().unwrap()
    };
    let a = val(dir.path().join("run/history.csv").to_str().unwrap());
    let b = val(dir.path().join("replay/history.csv").to_str().unwrap());
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let out = run(&["train", "--config", "run.toml", "--out", "other", "--seed", "5"], dir.path());
    assert!(out.status.success());
    assert_ne!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(dir.path().join("other/model.ckpt")).unwrap()
    );
    assert_eq!(Checkpoint::load(dir.path().join("other/model.ckpt")).unwrap().config.seed, 5);
}

#[test]
fn sweep_is_resumable() {
    let (dir, _) = setup(TINY);
    let d = dir.path();
    let out = run(&["sweep", "--config", "run.toml", "--axis", "experts", "--out", "s.csv"], d);
    assert!(out.status.success(), "{}", stderr(&out));
    let first = std::fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "axis_value,mse,mae");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("3,"));

    let again = run(&["sweep", "--config", "run.toml", "--axis", "experts", "--out", "s.csv"], d);
    assert!(again.status.success());
    assert!(stdout(&again).is_empty());
    assert_eq!(std::fs::read_to_string(d.join("s.csv")).unwrap(), first);

    // A partial file picks up where it stopped.
    std::fs::write(d.join("p.csv"), format!("{}\n{}\n", lines[0], lines[1])).unwrap();
    run(&["sweep", "--config", "run.toml", "--axis", "experts", "--out", "p.csv"], d);
    assert_eq!(std::fs::read_to_string(d.join("p.csv")).unwrap(), first);
}

#[test]
fn sweep_over_blocks_matches_sequential_in_parallel() {
    let (dir, _) = setup(TINY);
    let d = dir.path();
    let seq = run(&["sweep", "--config", "run.toml", "--axis", "blocks", "--out", "seq.csv"], d);
    assert!(seq.status.success(), "{}", stderr(&seq));
    let par = run(
        &["sweep", "--config", "run.toml", "--axis", "blocks", "--out", "par.csv", "--parallel"],
        d,
    );
    assert!(par.status.success());
    let seq = std::fs::read_to_string(d.join("seq.csv")).unwrap();
    assert_eq!(seq.lines().count(), 4);
    assert_eq!(seq, std::fs::read_to_string(d.join("par.csv")).unwrap());
}

#[test]
fn gatetrace_rows_are_on_the_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let out = run(&["gatetrace", "--checkpoint", ckpt.to_str().unwrap(), "--out", "g.csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("window_index,expert_0,expert_1"));
    let mut rows = 0;
    let mut bandwidth = 0.0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells[0].starts_with("bandwidth_") {
            let w: f64 = cells[1].parse().unwrap();
            assert!(w >= 0.0);
            bandwidth += w;
        } else if cells[0].parse::<usize>().is_ok() {
            let sum: f64 = cells[1..].iter().map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            rows += 1;
        }
    }
    assert!(rows > 0);
    assert!((bandwidth - 1.0).abs() < 1e-9);
    for tag in ["boundary_0", "boundary_2", "mean_coeff_1"] {
        assert!(text.contains(tag));
    }
}

#[test]
fn gatetrace_single_expert_and_fixed_gate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let one = TINY.replace("experts = 2\n", "experts = 1\n");
    std::fs::write(d.join("one.toml"), one).unwrap();
    assert!(run(&["train", "--config", "one.toml", "--out", "one"], d).status.success());
    run(&["gatetrace", "--checkpoint", "one/model.ckpt", "--out", "one.csv"], d);
    let text = std::fs::read_to_string(d.join("one.csv")).unwrap();
    for line in text.lines().skip(1).filter(|l| l.chars().next().unwrap().is_ascii_digit()) {
        assert_eq!(line.split(',').nth(1), Some("1"));
    }

    let fixed = TINY.replace("experts = 2\n", "experts = 3\ngate_mode = \"fixed\"\n");
    std::fs::write(d.join("fixed.toml"), fixed).unwrap();
    assert!(run(&["train", "--config", "fixed.toml", "--out", "fixed"], d).status.success());
    run(&["gatetrace", "--checkpoint", "fixed/model.ckpt", "--out", "fixed.csv"], d);
    let text = std::fs::read_to_string(d.join("fixed.csv")).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| l.chars().next().unwrap().is_ascii_digit())
        .map(|l| l.split_once(',').unwrap().1)
        .collect();
    assert!(rows.len() > 1 && rows.iter().all(|r| *r == rows[0]));
}
