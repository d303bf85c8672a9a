//! Compiles and runs a small C client against the generated header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const CLIENT: &str = r#"
#include <stdio.h>
#include <string.h>
#include "biasopt.h"

int main(void) {
    double x[2] = {1.0, -0.05}, g[2] = {0.0, 0.0}, out[2];
    if (biasopt_prox_step(x, g, 2, 0.1, BIASOPT_REGULARIZER_KIND_L1, 1.0, out) != BIASOPT_STATUS_OK) return 1;
    if (out[0] != 0.9 || out[1] != 0.0) return 2;
    BiasoptExperiment *exp = NULL;
    if (biasopt_experiment_load("/nonexistent.json", &exp) != BIASOPT_STATUS_CONFIG) return 3;
    if (strstr(biasopt_last_error(), "nonexistent") == NULL) return 4;
    printf("%s\n", biasopt_version());
    return 0;
}
"#;

fn staticlib() -> Option<PathBuf> {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libbiasopt_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_client_links_and_runs() {
    let Some(lib) = staticlib() else {
        eprintln!("static library not found; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, CLIENT).unwrap();
    let bin = dir.path().join("client");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to build");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C client exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
