use std::path::{Path, PathBuf};
use std::process::Command;

fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn header() -> PathBuf {
    crate_dir().join("include/protoglyph.h")
}

/// Directory holding the built static library, next to the test binary's
/// `deps/` directory.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_declares_the_interface() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct PgDataset PgDataset;",
        "typedef struct PgModel PgModel;",
        "PG_STATUS_OK = 0",
        "PG_STATUS_PANIC",
        "pg_last_error(void)",
        "pg_dataset_generate_triangles(",
        "pg_dataset_load_tu(",
        "pg_model_load(",
        "pg_model_embed(",
        "pg_model_evaluate(",
        "pg_model_free(",
        "double mean_accuracy;",
    ] {
        assert!(text.contains(name), "missing `{name}`");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    for lang in ["c", "c++"] {
        let out = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(header())
            .output()
            .expect("C compiler");
        assert!(out.status.success(), "{lang}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = lib_dir().join("libprotoglyph_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(crate_dir().join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("C compiler");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("graphs 30 classes 3"), "{stdout}");
    assert!(stdout.contains("missing model: status 7"), "{stdout}");
}
