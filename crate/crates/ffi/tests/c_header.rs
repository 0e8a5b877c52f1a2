//! Compiles and runs a C program against the generated header and the
//! static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include "duplex.h"
#include <stdio.h>

int main(void) {
    uint64_t src[] = {0, 1, 2};
    uint64_t dst[] = {1, 2, 3};
    DuplexGraph *g = NULL;
    if (duplex_graph_from_edges(4, src, dst, 3, &g) != DUPLEX_STATUS_OK) return 10;
    if (duplex_graph_num_edges(g) != 3) return 11;
    uint64_t id;
    if (duplex_graph_original_id(g, 7, &id) != DUPLEX_STATUS_BOUNDS) return 12;
    if (duplex_last_error_message() == NULL) return 13;
    double amp[] = {1.0, 1.0}, phase[] = {0.0, 1.0};
    DuplexEmbedding *e = NULL;
    if (duplex_embedding_from_arrays(2, 1, amp, phase, &e) != DUPLEX_STATUS_OK) return 14;
    double probs[4];
    if (duplex_embedding_relation_probs(e, 1, 0, DUPLEX_DISTANCE_L2, probs) != DUPLEX_STATUS_OK) return 15;
    printf("%s %.6f\n", duplex_version(), probs[0]);
    duplex_embedding_free(e);
    duplex_graph_free(g);
    return 0;
}
"#;

/// `target/<profile>` holding the library artifacts for this test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_builds_and_runs() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = artifact_dir().join("libduplex_ffi.a");
    assert!(include.join("duplex.h").is_file(), "header not generated");
    assert!(lib.is_file(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .output()
        .expect("run the C compiler");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));

    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.starts_with(env!("CARGO_PKG_VERSION")), "{stdout}");
}
