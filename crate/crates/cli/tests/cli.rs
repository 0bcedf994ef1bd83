use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use grasp_core::identify::IdentifyRow;
use grasp_core::metrics::{parse_csv, SelectivityRow};
use grasp_core::trainkit::{Checkpoint, Stage};

const SMALL: &str = r#"
seed = 4

[synth]
d_out = 16
d_in = 12
n = 40
r_t = 4
tau = 0.0

[model]
d_in = 8
d_out = 8
sites = 2
rank = 2

[data]
n_train = 128
n_eval = 64
task_rank = 2

[optim]
kind = "sgd"
lr = 0.01
epochs = 2
batch_size = 32

[sweep]
seeds = 2
samples = 20
"#;

fn grasp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grasp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in output:\n{text}"))
        .trim()
        .parse()
        .unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), format!("{SMALL}\n{extra}")).unwrap();
    dir
}

#[test]
fn gen_is_deterministic_and_refuses_overwrite() {
    let dir = setup("");
    let a = grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "a"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "b"]);
    assert!(b.status.success());
    let fa = fs::read(dir.path().join("a/stream_4.grasp")).unwrap();
    assert_eq!(fa, fs::read(dir.path().join("b/stream_4.grasp")).unwrap());

    let again = grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "a"]);
    assert_eq!(again.status.code(), Some(5));
    assert!(stderr(&again).contains("stream_4.grasp"));
    let forced = grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "a", "--force"]);
    assert!(forced.status.success());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = setup("");
    let o = grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "o", "--seed", "9"]);
    assert!(o.status.success());
    assert!(dir.path().join("o/stream_9.grasp").exists());
    let a = fs::read(dir.path().join("o/stream_9.grasp")).unwrap();
    grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "o"]);
    assert_ne!(a, fs::read(dir.path().join("o/stream_4.grasp")).unwrap());
}

#[test]
fn single_sample_stream() {
    let dir = setup("");
    fs::write(dir.path().join("one.toml"), SMALL.replace("n = 40", "n = 1")).unwrap();
    let o = grasp(dir.path(), &["gen", "--config", "one.toml", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "samples"), 1.0);
    let id = grasp(dir.path(), &["identify", "o/stream_4.grasp"]);
    assert_eq!(field(&stdout(&id), "samples"), 1.0);
}

#[test]
fn noiseless_stream_meets_the_bound() {
    let dir = setup("");
    grasp(dir.path(), &["gen", "--config", "c.toml", "--out", "o"]);
    let o = grasp(dir.path(), &["identify", "o/stream_4.grasp", "--check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let alignment = field(&text, "alignment");
    let bound = field(&text, "bound");
    assert_eq!(field(&text, "noise_term"), 0.0);
    assert!((bound - (1.0 - field(&text, "structural_term"))).abs() < 1e-9);
    assert!(alignment >= bound, "{alignment} < {bound}");
}

#[test]
fn malformed_file_reports_offset() {
    let dir = setup("");
    fs::write(dir.path().join("bad.grasp"), b"GRASPLAX\nrest").unwrap();
    let o = grasp(dir.path(), &["identify", "bad.grasp"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("at byte 7"), "{}", stderr(&o));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = setup("");
    let o = grasp(dir.path(), &["identify", "nope.grasp"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("nope.grasp"));
}

#[test]
fn exit_codes_for_usage_and_config() {
    let dir = setup("");
    assert_eq!(grasp(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(grasp(dir.path(), &["frobnicate"]).status.code(), Some(2));
    fs::write(dir.path().join("typo.toml"), "[synth]\nalpha = 3.0\n").unwrap();
    let o = grasp(dir.path(), &["gen", "--config", "typo.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("alpha"));
}

#[test]
fn naive_then_grasp_pipeline() {
    let dir = setup("");
    let naive = grasp(
        dir.path(),
        &["train", "--mode", "naive", "--config", "c.toml", "--out", "o"],
    );
    assert!(naive.status.success(), "{}", stderr(&naive));
    let ck = Checkpoint::load(&dir.path().join("o/naive_4.grasp")).unwrap();
    assert_eq!(ck.stage(), Stage::Naive);
    assert!(ck.probes().is_none());

    let id = grasp(dir.path(), &["identify", "o/naive_4.grasp"]);
    assert!(id.status.success());
    assert!(stdout(&id).contains("alignment: n/a"));
    assert!(stdout(&id).contains("site 1: sigma_1"));

    let g = grasp(
        dir.path(),
        &[
            "train",
            "--mode",
            "grasp",
            "--naive",
            "o/naive_4.grasp",
            "--config",
            "c.toml",
            "--out",
            "o",
            "--check",
        ],
    );
    assert!(g.status.success(), "{}", stderr(&g));
    let ck = Checkpoint::load(&dir.path().join("o/projected_4.grasp")).unwrap();
    assert_eq!(ck.stage(), Stage::Projected);
    assert_eq!(ck.probes().unwrap().len(), 2);

    // a naive checkpoint from another config is rejected
    let other = grasp(
        dir.path(),
        &[
            "train",
            "--mode",
            "grasp",
            "--naive",
            "o/naive_4.grasp",
            "--config",
            "c.toml",
            "--seed",
            "5",
            "--out",
            "p",
        ],
    );
    assert_eq!(other.status.code(), Some(3));
}

#[test]
fn grasp_mode_runs_all_stages_and_holds_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sgd.toml"),
        "[optim]\nkind = \"sgd\"\nlr = 0.01\nepochs = 5\n",
    )
    .unwrap();
    let o = grasp(
        dir.path(),
        &[
            "train", "--mode", "grasp", "--config", "sgd.toml", "--out", "o", "--check",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("o/naive_0.grasp").exists());
    assert!(dir.path().join("o/projected_0.grasp").exists());
    let text = stdout(&o);
    let components: Vec<f64> = text
        .lines()
        .filter_map(|l| l.split("probe component of update ").nth(1))
        .map(|v| v.trim().parse().unwrap())
        .collect();
    assert_eq!(components.len(), 4);
    assert!(components.iter().all(|c| c.abs() <= 1e-9), "{components:?}");
}

#[test]
fn identical_checkpoints_reduce_by_one() {
    let dir = setup("");
    grasp(
        dir.path(),
        &["train", "--mode", "naive", "--config", "c.toml", "--out", "o"],
    );
    let o = grasp(
        dir.path(),
        &[
            "leakage",
            "o/naive_4.grasp",
            "o/naive_4.grasp",
            "--config",
            "c.toml",
            "--out",
            "o",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reduction (mean ratio)   1.00x"));
    let csv = fs::read_to_string(dir.path().join("o/leakage_4.csv")).unwrap();
    assert!(csv.starts_with("row,mean,median,max,saturated\n"));
    assert!(csv.contains("reduction,1.0,1.0,1.0,false"));

    // the same pair fails the leakage check
    let o = grasp(
        dir.path(),
        &[
            "leakage",
            "o/naive_4.grasp",
            "o/naive_4.grasp",
            "--config",
            "c.toml",
            "--out",
            "o",
            "--force",
            "--check",
        ],
    );
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn projected_sgd_leakage_saturates() {
    let dir = setup("");
    let t = grasp(
        dir.path(),
        &["train", "--mode", "grasp", "--config", "c.toml", "--out", "o"],
    );
    assert!(t.status.success(), "{}", stderr(&t));
    let o = grasp(
        dir.path(),
        &[
            "leakage",
            "o/naive_4.grasp",
            "o/projected_4.grasp",
            "--config",
            "c.toml",
            "--out",
            "o",
            "--format",
            "text",
        ],
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains(">="), "{}", stdout(&o));
    let text = fs::read_to_string(dir.path().join("o/leakage_sites_4.toml")).unwrap();
    assert!(text.contains("saturated = true"));
    assert!(!text.contains("inf"));
}

#[test]
fn identify_sweep_over_n_is_monotone() {
    let dir = setup("[sweep]\n");
    let cfg = SMALL
        .replace("tau = 0.0", "tau = 2.0")
        .replace("seeds = 2", "seeds = 4\nn = [10, 100, 1000]");
    fs::write(dir.path().join("n.toml"), cfg).unwrap();
    let o = grasp(dir.path(), &["sweep", "identify", "--config", "n.toml", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<IdentifyRow> = parse_csv(&fs::read_to_string(dir.path().join("o/identify_4.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 12);
    let mis: Vec<f64> = rows
        .chunks(4)
        .map(|c| c.iter().map(|r| r.misalignment()).sum::<f64>() / 4.0)
        .collect();
    assert!(mis[0] > mis[1] && mis[1] > mis[2], "{mis:?}");
}

#[test]
fn selectivity_sweep_over_r_t_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL
        .replace("seeds = 2", "seeds = 3\nr_t = [2, 8]")
        .replace("tau = 0.0", "tau = 0.0\noverlap = \"tilted\"");
    fs::write(dir.path().join("s.toml"), cfg).unwrap();
    let o = grasp(
        dir.path(),
        &["sweep", "selectivity", "--config", "s.toml", "--out", "o"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<SelectivityRow> =
        parse_csv(&fs::read_to_string(dir.path().join("o/selectivity_4.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].selectivity_ratio >= rows[0].selectivity_ratio, "{rows:?}");
}

#[test]
fn empty_grid_is_an_error_not_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("e.toml"), "[sweep]\nn = []\n").unwrap();
    let o = grasp(dir.path(), &["sweep", "identify", "--config", "e.toml", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("o").exists());
    fs::write(dir.path().join("z.toml"), "[sweep]\nseeds = 0\n").unwrap();
    let o = grasp(
        dir.path(),
        &["sweep", "selectivity", "--config", "z.toml", "--out", "o"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn reports_are_reproducible() {
    let dir = setup("");
    for out in ["a", "b"] {
        let o = grasp(dir.path(), &["sweep", "leakage", "--config", "c.toml", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read_to_string(dir.path().join("a/leakage_sweep_4.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b/leakage_sweep_4.csv")).unwrap());
    assert_eq!(a.lines().count(), 1 + 2 * 2);
}
