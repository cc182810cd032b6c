use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mftd");

const SMALL: &str = r#""random_mdp": {"n_states": 3, "n_actions": 2, "gamma": 0.8, "reward_scale": 1.0, "embed_dim": 3, "seed": 4},
    "run": {"alpha": 4.0, "epsilon": 0.1, "horizon": 1.0, "dynamics": "td", "m": 8, "seed": 21}"#;

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn mftd(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_owned()
}

#[test]
fn missing_or_malformed_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("absent.json");
    assert_eq!(mftd(&["run", "--config", path_str(&missing), "--out", path_str(&out)]).status.code(), Some(2));

    let unknown = write_config(tmp.path(), "unknown.json", &format!("{{{SMALL}, \"bogus\": 1}}"));
    assert_eq!(mftd(&["run", "--config", path_str(&unknown), "--out", path_str(&out)]).status.code(), Some(2));

    let no_grid = write_config(tmp.path(), "nogrid.json", &format!("{{{SMALL}}}"));
    assert_eq!(mftd(&["alpha-sweep", "--config", path_str(&no_grid), "--out", path_str(&out)]).status.code(), Some(2));

    let no_out = write_config(tmp.path(), "noout.json", &format!("{{{SMALL}}}"));
    assert_eq!(mftd(&["run", "--config", path_str(&no_out)]).status.code(), Some(2));
}

#[test]
fn overflowing_run_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "blow.json",
        r#"{"mdp": {"n_states": 1, "n_actions": 1, "gamma": 0.99, "transition": [[[1.0]]],
                    "reward_mean": [[1.0]], "embedding": [[[0.6, 0.8]]]},
            "run": {"alpha": 2.0, "eta": 1e308, "epsilon": 10.0, "horizon": 100.0, "dynamics": "td", "m": 8, "seed": 1}}"#,
    );
    let out = tmp.path().join("out");
    let res = mftd(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let status = fs::read_to_string(out.join("status.json")).unwrap();
    assert!(status.contains("\"blown_up\""), "{status}");
}

#[test]
fn zero_horizon_writes_only_the_initial_row() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{{{}}}", SMALL.replace("\"horizon\": 1.0", "\"horizon\": 0.0"));
    let cfg = write_config(tmp.path(), "zero.json", &body);
    let out = tmp.path().join("out");
    assert!(mftd(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]).status.success());
    let text = fs::read_to_string(out.join("records.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[1].starts_with("0,0.0,"), "{}", lines[1]);
}

#[test]
fn output_dir_falls_back_to_config_and_seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &format!("{{{SMALL}, \"output_dir\": \"from-config\"}}"));
    assert!(mftd(&["run", "--config", path_str(&cfg)]).status.success());
    let base = fs::read(tmp.path().join("from-config/records.csv")).unwrap();
    let other = tmp.path().join("seeded");
    assert!(mftd(&["run", "--config", path_str(&cfg), "--out", path_str(&other), "--seed", "5"]).status.success());
    assert_ne!(base, fs::read(other.join("records.csv")).unwrap());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "all.json",
        &format!(
            "{{{SMALL}, \"repetitions\": 2, \"epsilon_grid\": [0.2, 0.1, 0.05], \"m_grid\": [4, 8, 16], \
             \"alpha_grid\": [1, 2, 4], \"kappa_samples\": 8}}"
        ),
    );
    for cmd in ["run", "coupling", "alpha-sweep", "m-sweep", "epsilon-sweep", "kappa"] {
        let a = tmp.path().join(format!("{cmd}-a"));
        let b = tmp.path().join(format!("{cmd}-b"));
        assert!(mftd(&[cmd, "--config", path_str(&cfg), "--out", path_str(&a)]).status.success(), "{cmd}");
        assert!(mftd(&[cmd, "--config", path_str(&cfg), "--out", path_str(&b)]).status.success(), "{cmd}");
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{cmd}: {name:?}");
        }
    }
}

#[test]
fn csv_headers_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "all.json",
        &format!(
            "{{{SMALL}, \"epsilon_grid\": [0.2, 0.1, 0.05], \"m_grid\": [4, 8, 16], \"alpha_grid\": [1, 2, 4], \
             \"kappa_samples\": 4}}"
        ),
    );
    let sweep =
        "param,value,repetition,seed,min_gap,plateau_gap,terminal_gap,terminal_w2_drift,terminal_kernel_drift,status";
    let summary = "param,value,runs,mean_min_gap,mean_plateau_gap,mean_terminal_w2_drift,mean_terminal_kernel_drift,\
                   w2_drift_times_alpha";
    let fit = "param,model,n_points,coefficient,intercept,r_squared,status";
    let expected: [(&str, &str, &str); 13] = [
        ("run", "records.csv", "step,t,optimality_gap,bellman_residual,w2_drift,kernel_drift_fro,delta_abs_mean"),
        ("run", "checkpoint.csv", "m,D,alpha,seed,step"),
        ("coupling", "coupling.csv", "pair,grid_param,grid_value,repetition,seed,distance"),
        ("coupling", "coupling_fit.csv", "pair,grid_param,n_points,slope,intercept,r_squared,status"),
        ("alpha-sweep", "alpha_sweep.csv", sweep),
        ("alpha-sweep", "alpha_sweep_summary.csv", summary),
        ("alpha-sweep", "alpha_sweep_fit.csv", fit),
        ("m-sweep", "m_sweep.csv", sweep),
        ("m-sweep", "m_sweep_fit.csv", fit),
        ("epsilon-sweep", "epsilon_sweep.csv", sweep),
        ("epsilon-sweep", "epsilon_sweep_summary.csv", summary),
        ("kappa", "kappa.csv", "index,numerator,denominator,kappa"),
        ("kappa", "kappa_summary.csv", "kappa,n_samples,skipped,seed,mode,beta"),
    ];
    let mut done = std::collections::HashSet::new();
    for (cmd, file, head) in expected {
        let out = tmp.path().join(cmd);
        if done.insert(cmd) {
            assert!(mftd(&[cmd, "--config", path_str(&cfg), "--out", path_str(&out)]).status.success(), "{cmd}");
        }
        assert_eq!(header(&out.join(file)), head, "{cmd} {file}");
    }
}

#[test]
fn single_state_td_converges() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "one.json",
        r#"{"mdp": {"n_states": 1, "n_actions": 1, "gamma": 0.5, "transition": [[[1.0]]],
                    "reward_mean": [[0.7]], "embedding": [[[0.6, 0.8]]]},
            "stride": 100, "run": {"alpha": 8.0, "epsilon": 0.05, "horizon": 50.0, "dynamics": "td", "m": 32, "seed": 3}}"#,
    );
    let out = tmp.path().join("out");
    assert!(mftd(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]).status.success());
    let text = fs::read_to_string(out.join("records.csv")).unwrap();
    let last = text.lines().last().unwrap();
    let gap: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(gap < 1e-2, "terminal gap {gap}");
}
