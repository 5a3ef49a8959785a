use std::path::PathBuf;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkp-sim"))
        .args(args)
        .env_remove("GKP_SIM_SEED")
        .output()
        .expect("spawn gkp-sim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value(csv: &str, name: &str) -> String {
    csv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("no row {name} in {csv}"))
        .to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn params_exit_codes() {
    let ok = run(&["params", "--sp", "c/40", "--sg", "c/40", "--sm", "c/40"]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(value(&stdout(&ok), "feasible"), "1");
    let edge = run(&["params", "--sp", "c/38", "--sg", "c/38", "--sm", "c/38"]);
    assert_eq!(edge.status.code(), Some(1));
    assert_eq!(value(&stdout(&edge), "margin_gate").parse::<f64>().unwrap(), 0.0);
    let bad = run(&["params", "--sp", "zz", "--sg", "0", "--sm", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = run(&["params", "--sp", "0.1"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_is_byte_identical_per_seed() {
    let args = ["sweep", "--sigma-range", "0.25:0.35:0.05", "--trials", "2000", "--seed", "11"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sigma_or_s,eps,trials,logical_x_rate,logical_z_rate,stderr,seed"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[2], "2000");
        assert_eq!(f[6], "11");
    }
    let other = run(&["sweep", "--sigma-range", "0.25:0.35:0.05", "--trials", "2000", "--seed", "12"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn seed_comes_from_environment() {
    let args = ["sweep", "--sigma-range", "0.3:0.3:0.1", "--trials", "500"];
    let env = Command::new(env!("CARGO_BIN_EXE_gkp-sim")).args(args).env("GKP_SIM_SEED", "99").output().unwrap();
    let flag = run(&["sweep", "--sigma-range", "0.3:0.3:0.1", "--trials", "500", "--seed", "99"]);
    assert_eq!(env.stdout, flag.stdout);
}

#[test]
fn flags_override_config() {
    let cfg = scratch("sweep.cfg");
    std::fs::write(&cfg, "# sweep defaults\ntrials = 300\nseed = 5\nsigma-range = 0.3:0.3:0.1\n").unwrap();
    let from_cfg = run(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(from_cfg.status.code(), Some(0), "{}", String::from_utf8_lossy(&from_cfg.stderr));
    let row = stdout(&from_cfg).lines().nth(1).unwrap().to_string();
    assert!(row.contains(",300,"), "{row}");
    assert!(row.ends_with(",5"), "{row}");
    let over = run(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "6"]);
    assert!(stdout(&over).lines().nth(1).unwrap().ends_with(",6"));
}

#[test]
fn out_flag_writes_file() {
    let path = scratch("bounds.csv");
    let o = run(&["bounds", "--kind", "range", "--energy", "3", "--b", "0.1", "--gamma", "0.01", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("kind,params,bound\n"), "{text}");
}

#[test]
fn verify_meas_suite_passes() {
    let o = run(&["verify", "--suite", "meas"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().last(), Some("summary=PASS"));
    assert!(text.lines().any(|l| l.contains("expected=FAIL")));
}

#[test]
fn state_emits_normalized_csv() {
    let o = run(&["state", "--target", "zero", "--s", "0.3", "--n", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (x, d) = l.split_once(',').unwrap();
            (x.parse().unwrap(), d.parse().unwrap())
        })
        .collect();
    assert_eq!(text.lines().next(), Some("x,density"));
    let dx = rows[1].0 - rows[0].0;
    let total: f64 = rows.iter().map(|r| r.1).sum::<f64>() * dx;
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}
