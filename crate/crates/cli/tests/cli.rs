use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn gqsgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gqsgd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn perf_reports_the_bandwidth_threshold() {
    let o = gqsgd(&["perf", "--omega", "0.01266", "--rho", "4", "--gamma", "2e12"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("= 0.0800 gamma"), "{}", stdout(&o));

    let o = gqsgd(&["perf", "--omega", "1", "--rho", "4"]);
    assert!(stdout(&o).contains("every bandwidth"));
}

#[test]
fn perf_json_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("perf.json");
    let o = gqsgd(&["perf", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["prediction"]["threshold"]["verdict"], "below");
    assert!(dir.path().join("perf.json.manifest.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(gqsgd(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(gqsgd(&["allreduce", "--topo", "star"]).status.code(), Some(2));
    assert_eq!(gqsgd(&[]).status.code(), Some(2));
    // 8-bit integers cannot hold a standard sum over 8 workers
    let o = gqsgd(&["allreduce", "--scheme", "standard", "--width", "8", "--d", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(gqsgd(&["allreduce", "--width", "12"]).status.code(), Some(2));
    assert_eq!(gqsgd(&["perf", "--workers", "1"]).status.code(), Some(2));
    assert_eq!(gqsgd(&["allreduce", "--topo", "ring", "--d", "8"]).status.code(), Some(2));
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = gqsgd(&[
            "train", "--task", "quadratic", "--n", "8", "--scheme", "exponential", "--s", "7",
            "--d", "32", "--steps", "20", "--seed", seed, "--out", path(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (
            fs::read(&out).unwrap(),
            fs::read(dir.path().join(format!("{name}.manifest.json"))).unwrap(),
        )
    };
    let a = run("a.csv", "3");
    let b = run("b.csv", "3");
    let c = run("c.csv", "4");
    assert_eq!(a.0, b.0);
    assert_ne!(a.0, c.0);
    let text = String::from_utf8(a.0).unwrap();
    assert!(text.starts_with("step,loss,bytes,grad_var\n"));
    assert_eq!(text.lines().count(), 22);
    let manifest: serde_json::Value = serde_json::from_slice(&a.1).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["scheme"], "exponential");
}

#[test]
fn train_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "task = \"logistic\"\nn = 4\nd = 16\nrows = 32\nsteps = 5\nscheme = \"none\"\n").unwrap();
    let o = gqsgd(&["train", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 7);

    fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(gqsgd(&["train", "--config", path(&cfg)]).status.code(), Some(2));
}

#[test]
fn transports_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut bodies = Vec::new();
    for t in ["inproc", "threads", "tcp"] {
        let out = dir.path().join(format!("{t}.csv"));
        let o = gqsgd(&[
            "allreduce", "--workers", "5", "--d", "40", "--topo", "ring", "--norm", "l2", "--scheme", "standard",
            "--transport", t, "--seed", "11", "--out", path(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        bodies.push(fs::read(&out).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
    assert_eq!(bodies[0], bodies[2]);
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

#[test]
fn one_process_per_worker_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let peers: Vec<String> = (0..3).map(|_| free_addr()).collect();
    let list = peers.join(",");
    let children: Vec<_> = peers
        .iter()
        .enumerate()
        .map(|(r, addr)| {
            Command::new(env!("CARGO_BIN_EXE_gqsgd"))
                .args([
                    "allreduce", "--transport", "tcp", "--workers", "3", "--d", "24", "--seed", "9",
                    "--listen", addr, "--peers", &list, "--out",
                ])
                .arg(dir.path().join(format!("rank{r}.csv")))
                .stderr(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    let local = dir.path().join("local.csv");
    let o = gqsgd(&["allreduce", "--workers", "3", "--d", "24", "--seed", "9", "--out", path(&local)]);
    assert_eq!(o.status.code(), Some(0));
    let want = fs::read(&local).unwrap();
    for r in 0..3 {
        assert_eq!(fs::read(dir.path().join(format!("rank{r}.csv"))).unwrap(), want);
    }
}

#[test]
fn listen_must_be_a_peer() {
    let o = gqsgd(&[
        "allreduce", "--transport", "tcp", "--workers", "2", "--listen", "127.0.0.1:1",
        "--peers", "127.0.0.1:2,127.0.0.1:3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn quantize_from_an_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.csv");
    fs::write(&input, "1.0, -0.5, 0\n0.25, 0, -2\n").unwrap();
    let out = dir.path().join("q.csv");
    let o = gqsgd(&[
        "quantize", "--workers", "2", "--input", path(&input), "--scheme", "standard", "--s", "4",
        "--out", path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    // zeros stay zero and the largest entry sits on the top level
    assert!(rows[2].ends_with(",4,0e0"), "{}", rows[2]);
    assert_eq!(rows[5], "1,2,-2e0,-1,0,-2e0");

    let o = gqsgd(&["quantize", "--workers", "3", "--input", path(&input)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_quick_pass_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("verify.csv");
    let o = gqsgd(&["verify", "--seed", "7", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("name,empirical,bound,radius,trials,pass\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn bench_handles_a_one_byte_payload() {
    let o = gqsgd(&["bench", "--size", "1", "--workers", "2", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("1 f32 elements"));
    assert!(text.contains("steps: tree 2, ring 2"), "{text}");
}
