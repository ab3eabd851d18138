use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mlcausal"));
    c.env_remove("MLCAUSAL_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small semicolon-delimited notification extract across 8 cities.
fn write_tb(dir: &Path) -> (PathBuf, PathBuf) {
    let header =
        "NU_NOTIFIC;SITUA_ENCE;TRATSUP_AT;NU_IDADE_N;ID_MN_RESI;AGRAVAIDS;AGRAVALCOO;AGRAVDIABE;\
AGRAVDROGA;POP_RUA;CS_SEXO;AGRAVDOENC;POP_LIBER;AGRAVTABAC;FORMA;IDH";
    let mut text = String::from(header);
    text.push('\n');
    for i in 0..320u64 {
        let h = i.wrapping_mul(2654435761) % 1000;
        let city = 3500 + (i % 8);
        let dot = if (h + 37 * (i % 8)) % 10 < 6 { 1 } else { 2 };
        let cured = if dot == 1 { h % 10 < 8 } else { h % 10 < 5 };
        let closure = if i % 41 == 0 {
            9
        } else if cured {
            1
        } else {
            2
        };
        let age = 4000 + 8 + (h % 60);
        let flag = |k: u64| if (h / k).is_multiple_of(7) { 1 } else { 2 };
        let sex = if h % 2 == 0 { "M" } else { "F" };
        let form = 1 + (h % 3);
        let hdi = format!("0,{}", 650 + 10 * (i % 8));
        text.push_str(&format!(
            "{i};{closure};{dot};{age};{city};{};{};{};{};{};{sex};{};{};{};{form};{hdi}\n",
            flag(3),
            flag(5),
            flag(11),
            flag(13),
            flag(17),
            flag(19),
            flag(23),
            flag(29),
        ));
    }
    let data = dir.join("tb.csv");
    fs::write(&data, text).unwrap();
    let mut cent = String::from("city_id,x,y\n");
    for c in 0..8 {
        cent.push_str(&format!(
            "{},{},{}\n",
            3500 + c,
            (c % 4) as f64 * 0.7,
            (c / 4) as f64 * 0.9
        ));
    }
    let centroids = dir.join("centroids.csv");
    fs::write(&centroids, cent).unwrap();
    (data, centroids)
}

const SHORT: [&str; 8] = [
    "--chains",
    "2",
    "--iterations",
    "300",
    "--warmup",
    "100",
    "--gate",
    "warn",
];

#[test]
fn simulate_linear_is_deterministic_and_guards_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let args = |o: &Path, workers: &str| {
        vec![
            "simulate-linear".to_string(),
            "--seed".into(),
            "4".into(),
            "--n".into(),
            "2,20".into(),
            "--sigma2".into(),
            "0.3,3.0".into(),
            "--replicates".into(),
            "10".into(),
            "--workers".into(),
            workers.into(),
            "--out".into(),
            s(o).into(),
        ]
    };
    let a: Vec<String> = args(&out, "1");
    let o = bin().args(&a).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(out.join("linear_grid.csv")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("linear_grid.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["seed"], 4);

    let o = bin().args(&a).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));

    let other = dir.path().join("b");
    let o = bin().args(args(&other, "3")).output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(first, fs::read(other.join("linear_grid.csv")).unwrap());

    let mut forced = a.clone();
    forced.push("--force".into());
    assert_eq!(code(&bin().args(&forced).output().unwrap()), 0);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("MLCAUSAL_OUT_DIR", dir.path())
        .args([
            "simulate-linear",
            "--seed",
            "1",
            "--n",
            "2",
            "--sigma2",
            "1.0",
            "--replicates",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("linear_grid.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let cases: &[&[&str]] = &[
        &["simulate-binary", "--seed", "1", "--tw-case", "4"],
        &["simulate-binary", "--seed", "1", "--x-scenario", "0"],
        &["simulate-linear"],
        &["simulate-linear", "--seed", "1", "--rho", "1.5"],
        &["compare", "--data", "x.csv", "--seed", "1", "--models", ""],
        &[
            "compare", "--data", "x.csv", "--seed", "1", "--models", "M99",
        ],
        &[
            "fit",
            "--data",
            "x.csv",
            "--seed",
            "1",
            "--outcome",
            "M10",
            "--ps",
            "PS1",
        ],
        &[
            "fit",
            "--data",
            "x.csv",
            "--seed",
            "1",
            "--outcome",
            "M1",
            "--ps",
            "PS1",
        ],
        &["no-such-command"],
    ];
    for args in cases {
        assert_eq!(code(&run(args)), 2, "{args:?}");
    }
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "fit",
        "--data",
        "/nonexistent/tb.csv",
        "--outcome",
        "M1",
        "--seed",
        "1",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/tb.csv"));
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        "seed = 9\nreplicates = 4\nn = 2\nsigma2 = 1.0\nrho = 0.0\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "simulate-linear",
        "--config",
        s(&conf),
        "--replicates",
        "6",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("linear_grid.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["replicates"], 6);
    assert_eq!(m["config"]["rho_set"], serde_json::json!([0.0]));
}

#[test]
fn fit_balance_compare_on_small_extract() {
    let dir = tempfile::tempdir().unwrap();
    let (data, centroids) = write_tb(dir.path());
    let out = dir.path().join("out");
    let tb = [
        "--data",
        s(&data),
        "--centroids",
        s(&centroids),
        "--standardize",
    ];

    let mut a = vec![
        "fit",
        "--outcome",
        "M10",
        "--seed",
        "2",
        "--save-draws",
        "--out",
        s(&out),
    ];
    a.extend(tb);
    a.extend(SHORT);
    let o = run(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("fit_M10.json")).unwrap()).unwrap();
    let ate = r["report"]["ate"]["mean"].as_f64().unwrap();
    assert!(ate.is_finite() && ate.abs() < 1.0);
    assert_eq!(r["cohort"]["clusters"], 8);
    assert!(out.join("fit_M10.draws.csv").exists());

    let mut a = vec![
        "balance",
        "--ps",
        "PS1,PS3",
        "--seed",
        "2",
        "--out",
        s(&out),
    ];
    a.extend(tb);
    a.extend(SHORT);
    let o = run(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bal = fs::read_to_string(out.join("balance.csv")).unwrap();
    assert!(bal.lines().count() > 13);
    assert!(bal.lines().next().unwrap().contains("PS3"));

    let mut a = vec![
        "compare",
        "--models",
        "PS1,PS2,M1,M4",
        "--seed",
        "2",
        "--out",
        s(&out),
    ];
    a.extend(tb);
    a.extend(SHORT);
    let o = run(&a);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cmp = fs::read_to_string(out.join("compare.csv")).unwrap();
    let labels: Vec<&str> = cmp
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["PS1", "PS2", "M1", "M4"]);
}
