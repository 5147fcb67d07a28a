use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alas_core::config::Config;
use alas_core::provider::sim::SimWorld;
use tempfile::TempDir;

fn write_config(dir: &Path, mutate: impl FnOnce(&mut Config)) -> PathBuf {
    let mut config = Config::default();
    config.storage.root = dir.join("store").display().to_string();
    config.provider.requests_per_second = 100_000.0;
    mutate(&mut config);
    let path = dir.join("alas.toml");
    std::fs::write(&path, toml::to_string(&config).unwrap()).unwrap();
    path
}

fn alas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alas")).args(args).output().unwrap()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn only_session(store: &Path) -> String {
    let mut names: Vec<String> = std::fs::read_dir(store.join("sessions"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 1, "expected one session, found {names:?}");
    names.pop().unwrap()
}

#[test]
fn run_converges_and_reports() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), |_| {});
    let config = config.to_str().unwrap();

    let run = alas(&["run", "--domain", "python releases", "--config", config]);
    assert_eq!(run.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let text = stdout(&run);
    assert!(text.contains("status: Converged"), "report was: {text}");
    assert!(text.contains("baseline accuracy"));

    let session = only_session(&dir.path().join("store"));
    let report = alas(&["report", "--session", &session, "--config", config]);
    assert_eq!(report.status.code(), Some(0));
    let text = stdout(&report);
    assert!(text.contains("iteration 0:"), "report was: {text}");
    assert!(text.contains("promoted"));

    let resume = alas(&["resume", "--session", &session, "--config", config]);
    assert_eq!(resume.status.code(), Some(0), "resuming a converged session is a no-op success");
}

#[test]
fn exhausted_token_budget_exits_two() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), |c| c.budget.max_total_tokens = 2_000);

    let run = alas(&["run", "--domain", "python releases", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stdout(&run).contains("status: Suspended"));
}

#[test]
fn failing_node_exits_three() {
    let dir = TempDir::new().unwrap();
    let mut world = SimWorld::grid("python releases", 4, 4, 6);
    world.model_knowledge.remove("sim:base");
    let world_path = dir.path().join("world.json");
    std::fs::write(&world_path, serde_json::to_vec(&world).unwrap()).unwrap();

    let config = write_config(dir.path(), |c| {
        c.simulation.world_path = Some(world_path.display().to_string());
        c.budget.max_topics = 4;
        c.curriculum.min_topics = 4;
    });

    let run = alas(&["run", "--domain", "python releases", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(3));
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("i0-sft"), "stderr was: {err}");
}

#[test]
fn dry_run_prepares_data_without_any_training() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), |_| {});

    let run = alas(&["dry-run", "--domain", "python releases", "--config", config.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&run.stderr));

    let store = dir.path().join("store");
    assert!(store.join("data").join("training_data").is_dir());
    assert!(store.join("data").join("curricula").is_dir());
    assert!(
        !store.join("sim").join("provider_state.json").exists(),
        "dry run must not reach fine-tuning, which is what persists provider state"
    );
}

#[test]
fn report_on_unknown_session_exits_one_and_names_the_alternatives() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), |_| {});
    let config = config.to_str().unwrap();

    let seed = alas(&["dry-run", "--domain", "python releases", "--config", config]);
    assert_eq!(seed.status.code(), Some(0));
    let existing = only_session(&dir.path().join("store"));

    let report = alas(&["report", "--session", "nope", "--config", config]);
    assert_eq!(report.status.code(), Some(1));
    let err = String::from_utf8_lossy(&report.stderr);
    assert!(err.contains("available sessions"), "stderr was: {err}");
    assert!(err.contains(&existing));
}

#[test]
fn simulate_accepts_a_world_file() {
    let dir = TempDir::new().unwrap();
    let world = SimWorld::grid("embedded dbs", 4, 4, 17);
    let world_path = dir.path().join("world.json");
    std::fs::write(&world_path, serde_json::to_vec(&world).unwrap()).unwrap();

    let config = write_config(dir.path(), |c| {
        c.budget.max_topics = 4;
        c.curriculum.min_topics = 4;
    });

    let run = alas(&[
        "simulate",
        "--world",
        world_path.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let text = stdout(&run);
    assert!(text.contains("domain: embedded dbs"), "report was: {text}");
    assert!(text.contains("status: Converged"));
}
