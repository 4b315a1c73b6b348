//! Kept in its own test binary: it sets a process-wide environment variable.

use crg_cli::{run, EXIT_OK, WORKSPACE_ENV};

#[test]
fn environment_workspace_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (env_ws, flag_ws) = (dir.path().join("env"), dir.path().join("flag"));
    std::env::set_var(WORKSPACE_ENV, &env_ws);
    let code = run(["crg", "--workspace", flag_ws.to_str().unwrap(), "synth-gen", "--n", "2", "--resolution", "32"]);
    std::env::remove_var(WORKSPACE_ENV);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read_dir(env_ws.join("datasets")).unwrap().count(), 1);
    assert!(!flag_ws.exists());
}
