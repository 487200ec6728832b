use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use t1t2_lab::config::parse_config;
use t1t2_lab::idx::{self, IdxImages};
use t1t2_lab::runner;

const SMALL: &str = "\
[experiment]
mode = t1t2
log_interval = 3

[data]
source = synth
samples = 260
dims = 6
classes = 3
test_size = 60
t2_size = 60

[model]
hidden = 12, 8

[regularization]
noise = 0.2, 0.1, 0
l2 = 0.001

[optim]
epochs = 3
batch_size = 20
lr = 0.01

[hyperopt]
interval = 2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_t1t2"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).env("T1T2_OUT", out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let mut rows = vec![header];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

fn assert_well_formed(text: &str) {
    assert!(text.ends_with('\n'));
    let rows = csv_rows(text);
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));
}

#[test]
fn train_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.ini", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train", "--config", cfg.to_str().unwrap()], out);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectory.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let traj = read(&a.join("trajectory.csv"));
    assert_well_formed(&traj);
    let rows = csv_rows(&traj);
    assert_eq!(&rows[0][..7], ["step", "epoch", "c1_batch", "c2_batch", "noise_0", "noise_1", "noise_2"]);
    assert!(rows[0].contains(&"g_l2_3".to_string()));

    let summary: serde_json::Value = serde_json::from_str(&read(&a.join("summary.json"))).unwrap();
    for key in [
        "initial_hypers",
        "final_hypers",
        "final_val_error",
        "final_test_error",
        "final_val_xent",
        "final_test_xent",
        "hyper_update_count",
        "pass_counters",
        "wallclock_s",
        "config",
    ] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    // the last row carries the final hyperparameters
    let last = rows.last().unwrap();
    for (i, name) in rows[0].iter().enumerate().skip(4).take(6) {
        let v: f64 = last[i].parse().unwrap();
        assert_eq!(v, summary["final_hypers"][name].as_f64().unwrap(), "{name}");
    }
    // 140 T1 samples, batch 20, 3 epochs, K = 2
    assert_eq!(summary["hyper_update_count"], 10);
}

#[test]
fn echoed_config_reproduces_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.ini", SMALL);
    let o = run(&["train", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(code(&o), 0);
    let summary: serde_json::Value = serde_json::from_str(&read(&dir.path().join("a/summary.json"))).unwrap();
    let echo = write_config(dir.path(), "echo.ini", summary["config"].as_str().unwrap());
    let o = run(&["train", "--config", echo.to_str().unwrap()], &dir.path().join("b"));
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(dir.path().join("a/summary.json")).unwrap(),
        fs::read(dir.path().join("b/summary.json")).unwrap()
    );
}

#[test]
fn zero_hyper_rates_keep_hyper_columns_constant() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("interval = 2\n", "interval = 2\nnoise_lr = 0\nl2_lr = 0\n");
    let cfg = write_config(dir.path(), "c.ini", &text);
    assert_eq!(code(&run(&["train", "--config", cfg.to_str().unwrap()], dir.path())), 0);
    let rows = csv_rows(&read(&dir.path().join("trajectory.csv")));
    for row in &rows[2..] {
        assert_eq!(row[4..10], rows[1][4..10]);
    }
}

#[test]
fn fixed_mode_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.ini", SMALL);
    assert_eq!(code(&run(&["train", "--config", cfg.to_str().unwrap(), "--mode", "fixed"], dir.path())), 0);
    let summary: serde_json::Value = serde_json::from_str(&read(&dir.path().join("summary.json"))).unwrap();
    assert_eq!(summary["hyper_update_count"], 0);
    assert_eq!(summary["pass_counters"]["tangent"], 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["train"], &out)), 1);
    assert_eq!(code(&run(&["frobnicate"], &out)), 1);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent.ini"], &out)), 1);

    let bad = write_config(dir.path(), "bad.ini", &SMALL.replace("batch_size = 20", "batch_size = ten"));
    let o = run(&["train", "--config", bad.to_str().unwrap()], &out);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("batch_size") && err.contains("line 22"), "{err}");

    let blowup = SMALL.replace("lr = 0.01", "lr = 1e200\noptimizer = sgd");
    let blowup = write_config(dir.path(), "blowup.ini", &blowup);
    let o = run(&["train", "--config", blowup.to_str().unwrap()], &out);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let check = write_config(dir.path(), "check.ini", &SMALL.replace("mode = t1t2", "mode = hypercheck"));
    let o = run(&["hypercheck", "--config", check.to_str().unwrap()], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["hypercheck", "--config", check.to_str().unwrap(), "--corrupt-sign"], &out);
    assert_eq!(code(&o), 3);
    let table = read(&out.join("hypercheck.csv"));
    assert_well_formed(&table);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",false")));

    let big = write_config(dir.path(), "big.ini", &check_config_with_hidden("200, 200"));
    let o = run(&["hypercheck", "--config", big.to_str().unwrap()], &out);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at most 10000"));
}

fn check_config_with_hidden(hidden: &str) -> String {
    SMALL
        .replace("mode = t1t2", "mode = hypercheck")
        .replace("hidden = 12, 8", &format!("hidden = {hidden}"))
}

#[test]
fn hypercheck_passes_with_batch_norm_and_l2_only() {
    let bn = check_config_with_hidden("10, 10").replace("[model]", "[model]\nbatch_norm = true");
    let l2_only = check_config_with_hidden("10, 10").replace("noise = 0.2, 0.1, 0", "noise = 0");
    for text in [bn, l2_only] {
        let cfg = parse_config(&text).unwrap();
        let split = runner::load_split(&cfg).unwrap();
        let rows = runner::hypercheck_rows(&cfg, &split, false).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows {
            assert!(r.pass, "{r:?}");
        }
    }
}

const GRID: &str = "
[grid]
axis1 = noise_0 : 0, 0.3
axis2 = l2_1 : 0, 0.01
";

#[test]
fn grid_rows_sorted_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("mode = t1t2", "mode = grid") + GRID;
    let spec = write_config(dir.path(), "g.ini", &text);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["grid", "--spec", spec.to_str().unwrap(), "--workers", "1"], &a)), 0);
    assert_eq!(code(&run(&["grid", "--spec", spec.to_str().unwrap(), "--workers", "3"], &b)), 0);
    let ga = read(&a.join("grid.csv"));
    assert_eq!(ga, read(&b.join("grid.csv")));
    assert_eq!(read(&a.join("grid_meta.json")), read(&b.join("grid_meta.json")));
    assert_well_formed(&ga);
    let rows = csv_rows(&ga);
    assert_eq!(rows.len(), 5);
    assert_eq!(
        rows[0],
        [
            "axis1_value",
            "axis2_value",
            "seed",
            "final_test_xent",
            "final_test_error",
            "final_val_xent",
            "final_val_error",
            "wallclock_s",
            "error"
        ]
    );
    let keys: Vec<(String, String)> = rows[1..].iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    assert_eq!(keys, [("0", "0"), ("0", "0.01"), ("0.3", "0"), ("0.3", "0.01")].map(|(x, y)| (x.into(), y.into())));
    // derived seeds: seed_base + cell index
    let seeds: Vec<&str> = rows[1..].iter().map(|r| r[2].as_str()).collect();
    assert_eq!(seeds, ["1", "2", "3", "4"]);
    assert_eq!(code(&run(&["grid", "--spec", spec.to_str().unwrap(), "--workers", "0"], &a)), 1);
}

#[test]
fn failed_cells_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("mode = t1t2", "mode = grid").replace("lr = 0.01", "lr = 0.01\noptimizer = sgd")
        + "[grid]\naxis1 = l2_1 : 0, 1e300\naxis2 = l2_2 : 0\n";
    let spec = write_config(dir.path(), "g.ini", &text);
    let o = run(&["grid", "--spec", spec.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&read(&dir.path().join("grid.csv")));
    assert!(rows[1][8].is_empty());
    assert!(!rows[2][8].is_empty() && rows[2][3].is_empty(), "{:?}", rows[2]);
}

#[test]
fn trajectory_and_grid_share_axis_names() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("mode = t1t2", "mode = grid") + GRID;
    let spec = write_config(dir.path(), "g.ini", &text);
    assert_eq!(code(&run(&["grid", "--spec", spec.to_str().unwrap()], dir.path())), 0);
    assert_eq!(code(&run(&["train", "--config", spec.to_str().unwrap(), "--mode", "t1t2"], dir.path())), 0);
    let meta: serde_json::Value = serde_json::from_str(&read(&dir.path().join("grid_meta.json"))).unwrap();
    let traj = csv_rows(&read(&dir.path().join("trajectory.csv")));
    let grid = csv_rows(&read(&dir.path().join("grid.csv")));
    let col = |name: &str| traj[0].iter().position(|h| h == name).unwrap();
    let (c1, c2) = (col(meta["axis1"]["name"].as_str().unwrap()), col(meta["axis2"]["name"].as_str().unwrap()));
    // every trajectory point has a nearest grid cell with a finite cost
    for row in &traj[1..] {
        let (x, y): (f64, f64) = (row[c1].parse().unwrap(), row[c2].parse().unwrap());
        let nearest = grid[1..]
            .iter()
            .min_by(|a, b| {
                let d = |r: &Vec<String>| {
                    (r[0].parse::<f64>().unwrap() - x).powi(2) + (r[1].parse::<f64>().unwrap() - y).powi(2)
                };
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert!(nearest[3].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn paired_with_frozen_hypers_and_same_seed_is_bit_equal() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("interval = 2\n", "interval = 2\nnoise_lr = 0\nl2_lr = 0\n");
    let cfg = parse_config(&text).unwrap();
    let runs = runner::run_paired(&cfg, 2, 0, dir.path()).unwrap();
    for r in &runs {
        assert_eq!(r.t1t2.final_eval, r.rerun.final_eval);
        assert_eq!(r.test_error_difference(), 0.0);
    }
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join("paired.json"))).unwrap();
    let entry = &json["runs"][0];
    assert!(entry["t1t2"]["final_hypers"].is_object() && entry["rerun"]["final_hypers"].is_object());
    assert_eq!(entry["val_test_error_pairs"].as_array().unwrap().len(), 2);
    assert_well_formed(&read(&dir.path().join("paired.csv")));

    let cfg_path = write_config(dir.path(), "p.ini", SMALL);
    let o = run(&["paired", "--config", cfg_path.to_str().unwrap(), "--seeds", "2"], &dir.path().join("cli"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&read(&dir.path().join("cli/paired.csv"))).len(), 3);
}

#[test]
fn idx_round_trip_through_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let img = IdxImages {
        count: 3,
        rows: 2,
        cols: 2,
        pixels: vec![0, 255, 51, 102, 1, 2, 3, 4, 9, 9, 9, 9],
    };
    let labels = vec![7u8, 0, 3];
    for ext in ["", ".gz"] {
        let ip = dir.path().join(format!("img{ext}"));
        let lp = dir.path().join(format!("lab{ext}"));
        idx::write_images(&ip, &img).unwrap();
        idx::write_labels(&lp, &labels).unwrap();
        assert_eq!(idx::read_images(&ip).unwrap(), img);
        let (x, y) = idx::load_idx(&ip, &lp).unwrap();
        assert_eq!(x.shape(), &[3, 4]);
        assert_eq!(x.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(y, vec![7, 0, 3]);
    }
    let short = dir.path().join("short");
    idx::write_labels(&short, &labels[..2]).unwrap();
    let err = idx::load_idx(&dir.path().join("img"), &short).unwrap_err();
    assert!(err.to_string().contains("2 labels for 3 images"), "{err}");
}

fn mnist_path(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k").join(file)
}

#[test]
fn bundled_subset_loads() {
    let (x, y) = idx::load_idx(
        &mnist_path("images-idx3-ubyte.gz"),
        &mnist_path("labels-idx1-ubyte.gz"),
    )
    .unwrap();
    assert_eq!(x.shape(), &[10_000, 784]);
    assert!(y.iter().all(|&l| l < 10));
    let mut counts = [0usize; 10];
    y.iter().for_each(|&l| counts[l] += 1);
    assert!(counts.iter().all(|&c| c > 800), "{counts:?}");
}

#[test]
fn input_noise_helps_the_tiny_overfit_net() {
    let text = format!(
        "[experiment]\nmode = grid\n[data]\nsource = idx\nimages = {}\nlabels = {}\ntest_size = 1500\nt2_size = 1500\nt1_size = 200\n\
         [model]\nhidden = 64, 64\n[optim]\nepochs = 50\nbatch_size = 20\n\
         [grid]\naxis1 = noise_0 : 0, 0.5, 1.0\naxis2 = l2_1 : 0\nseed_policy = shared\n",
        mnist_path("images-idx3-ubyte.gz").display(),
        mnist_path("labels-idx1-ubyte.gz").display()
    );
    let dir = tempfile::tempdir().unwrap();
    let run = runner::run_grid(&parse_config(&text).unwrap(), 3, dir.path()).unwrap();
    let xent: Vec<f64> = run
        .cells
        .iter()
        .map(|(_, r)| r.as_ref().unwrap().final_eval.t2.xent)
        .collect();
    let min = xent.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(xent[0] > min, "{xent:?}");
}
