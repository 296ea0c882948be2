use std::path::Path;
use std::process::{Command, Output};

fn fedzoo(args: &[&str], env_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedzoo"));
    cmd.args(args).arg("--quiet").env_remove("FEDZOO_OUTPUT_DIR");
    if let Some(d) = env_dir {
        cmd.env("FEDZOO_OUTPUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn minimal(out: &Path) -> String {
    format!(
        "dim = 2\nclients = 2\nrounds = 2\nlocal_iterations = 2\nalgorithms = [\"fedzo\"]\nseeds = [1]\n\
         output_dir = {:?}\n",
        out.to_string_lossy()
    )
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_run_writes_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &minimal(&out));
    let o = fedzoo(&["run", &cfg], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(listing(&out), vec!["comparison.csv", "summary.csv", "trace_fedzo_1.csv"]);
    let trace = std::fs::read_to_string(out.join("trace_fedzo_1.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,cum_queries,cum_scalars_tx,F_value,conv_error,mean_disparity,gamma"
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn negative_learning_rate_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = minimal(&tmp.path().join("out")) + "learning_rate = -1.0\n";
    let cfg = write_config(tmp.path(), &body);
    for cmd in ["run", "validate"] {
        let o = fedzoo(&[cmd, &cfg], None);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    }
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = minimal(&tmp.path().join("out")) + "learnig_rate = 0.1\n";
    let o = fedzoo(&["validate", &write_config(tmp.path(), &body)], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnig_rate"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = fedzoo(&["validate", "/nonexistent/fedzoo.toml"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_algorithm_in_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &minimal(&tmp.path().join("out")));
    let o = fedzoo(&["compare", &cfg, "--algorithms", "fedzo,gradient-descent"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("algorithms"));
}

#[test]
fn compare_writes_wide_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let body = minimal(&out).replace("seeds = [1]", "seeds = [1, 2]");
    let cfg = write_config(tmp.path(), &body);
    let o = fedzoo(&["compare", &cfg, "--algorithms", "fedzo,SCAFFOLD-2"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let wide = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(
        wide.lines().next().unwrap(),
        "round,fedzo_1,fedzo_2,scaffold2_1,scaffold2_2"
    );
    assert_eq!(wide.lines().count(), 4);
}

#[test]
fn environment_overrides_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let configured = tmp.path().join("configured");
    let overridden = tmp.path().join("overridden");
    let cfg = write_config(tmp.path(), &minimal(&configured));
    let o = fedzoo(&["run", &cfg], Some(&overridden));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!configured.exists());
    assert!(overridden.join("summary.csv").exists());
}

#[test]
fn write_failure_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir_all(out.join("summary.csv/blocker")).unwrap();
    let cfg = write_config(tmp.path(), &minimal(&out));
    let o = fedzoo(&["run", &cfg], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let base = "dim = 3\nclients = 3\nrounds = 2\nlocal_iterations = 3\nfeatures = 64\nseeds = [4]\n\
                heterogeneity = 5.0\nemit_plots = true\ndiagnostics = \"iteration\"\ndump_coefficients = true\n";
    let mut outputs = Vec::new();
    for workers in [1, 3] {
        let out = tmp.path().join(format!("w{workers}"));
        let body = format!("{base}workers = {workers}\noutput_dir = {:?}\n", out.to_string_lossy());
        let cfg = write_config(tmp.path(), &body);
        let o = fedzoo(&["run", &cfg], None);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push(out);
    }
    let names = listing(&outputs[0]);
    assert_eq!(names, listing(&outputs[1]));
    assert!(names.contains(&"convergence_rounds.svg".to_string()));
    assert!(names.contains(&"diagnostics_fzoos_4.csv".to_string()));
    assert!(names.contains(&"coefficients_4.csv".to_string()));
    assert_eq!(names.iter().filter(|n| n.starts_with("trace_")).count(), 5);
    for n in names {
        let a = std::fs::read(outputs[0].join(&n)).unwrap();
        let b = std::fs::read(outputs[1].join(&n)).unwrap();
        assert!(a == b, "{n} differs between worker counts");
    }
}
