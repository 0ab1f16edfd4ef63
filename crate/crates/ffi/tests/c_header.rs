//! Compiles and runs a small C program against the generated header and the
//! static library. Skipped when no C compiler is on PATH.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "patnet.h"

int main(void) {
    uint64_t params = 0;
    if (patnet_count_params("T0", &params) != PATNET_STATUS_OK) return 1;
    if (patnet_count_params("nope", &params) != PATNET_STATUS_UNKNOWN_VARIANT) return 2;
    if (patnet_last_error() == NULL) return 3;
    PatnetModel *m = NULL;
    if (patnet_model_init("T0", 32, 1, &m) != PATNET_STATUS_OK) return 4;
    static float x[3 * 32 * 32];
    static float y[1000];
    if (patnet_model_forward(m, x, 1, 32, 32, y, 1000) != PATNET_STATUS_OK) return 5;
    patnet_model_free(m);
    printf("%llu\n", (unsigned long long)params);
    return 0;
}
"#;

fn staticlib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libpatnet_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn header_compiles_and_links() {
    let Some(lib) = staticlib() else {
        eprintln!("skipped: static library not built");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipped: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "smoke program exited with {:?}", out.status.code());
    let expected = patnet::model::count_params(&patnet::model::build_variant("T0").unwrap());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), expected.to_string());
}
