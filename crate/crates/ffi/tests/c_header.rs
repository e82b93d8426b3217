//! Compiles and runs a small C program against the generated header and the
//! static library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "cbs.h"

int main(void) {
    double data[] = {3, 0.1, 3, 0.2, 3, 0.3, -3, 0.1, -3, 0.2, -3, 0.3};
    CbsFeatureStore *raw = NULL, *unit = NULL;
    CbsSelection *sel = NULL;
    if (cbs_store_from_matrix(data, 6, 2, &raw) != CBS_STATUS_OK) return 1;
    if (cbs_select(raw, 2, 2, 0, &sel) != CBS_STATUS_NOT_NORMALIZED) return 2;
    if (cbs_last_error_message() == NULL) return 3;
    if (cbs_store_normalize(raw, &unit) != CBS_STATUS_OK) return 4;
    if (cbs_select(unit, 2, 2, 0, &sel) != CBS_STATUS_OK) return 5;
    uint64_t ids[2];
    if (cbs_selection_ids(sel, ids, 2) != CBS_STATUS_OK) return 6;
    if ((ids[0] < 3) == (ids[1] < 3)) return 7;
    printf("%s %zu\n", cbs_version(), cbs_selection_len(sel));
    cbs_selection_free(sel);
    cbs_store_free(unit);
    cbs_store_free(raw);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libcbs_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status.code()
    );
    assert!(String::from_utf8_lossy(&out.stdout).ends_with(" 2\n"));
}
