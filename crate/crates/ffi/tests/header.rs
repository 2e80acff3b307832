//! Validates the committed C header: it must declare every exported
//! symbol, pass a C compile, and drive a real C consumer end to end.

use std::env;
use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn header_path() -> PathBuf {
    crate_dir().join("include").join("metasched.h")
}

/// target/debug (or release), derived from the test executable location
/// target/{profile}/deps/<name>-<hash>.
fn artifact_dir() -> PathBuf {
    let exe = env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

const EXPORTED: &[&str] = &[
    "msd_last_error",
    "msd_version",
    "msd_checkpoint_load",
    "msd_checkpoint_free",
    "msd_checkpoint_hidden_size",
    "msd_checkpoint_gamma",
    "msd_checkpoint_num_params",
    "msd_checkpoint_step",
    "msd_checkpoint_seed",
    "msd_schedule_from_checkpoint",
    "msd_schedule_from_json",
    "msd_schedule_free",
    "msd_schedule_lr",
    "msd_schedule_lr_with_grad",
];

#[test]
fn header_declares_every_export() {
    let text = fs::read_to_string(header_path()).unwrap();
    for symbol in EXPORTED {
        assert!(text.contains(symbol), "header is missing {symbol}");
    }
    assert!(text.contains("MSD_STATUS_OK"));
    assert!(text.contains("typedef struct MsdCheckpoint MsdCheckpoint;"));
    assert!(text.contains("typedef struct MsdSchedule MsdSchedule;"));
}

#[test]
fn header_compiles_as_c() {
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-xc"])
        .arg(header_path())
        .status()
        .expect("cc not runnable");
    assert!(status.success(), "header failed C syntax check");
}

#[test]
fn c_consumer_links_and_runs() {
    let dir = tempfile::tempdir().unwrap();

    // A checkpoint for the C program to load.
    let mut rng = metasched::numcore::RngStream::new(42);
    let params = metasched::mlrsnet::MLRSNetParams::init(6, 0.75, &mut rng).unwrap();
    let meta = metasched::mlrsnet::CheckpointMeta {
        step: 11,
        seed: 42,
        config_hash: "smoke".into(),
    };
    let ckpt_path = dir.path().join("net.json");
    metasched::mlrsnet::save_checkpoint(&params, &meta, &ckpt_path).unwrap();

    let src = r#"
#include <stdio.h>
#include <string.h>
#include "metasched.h"

int main(int argc, char **argv) {
    if (argc != 2) return 10;

    MsdCheckpoint *ck = NULL;
    if (msd_checkpoint_load(argv[1], &ck) != MSD_STATUS_OK) {
        fprintf(stderr, "load: %s\n", msd_last_error());
        return 1;
    }
    size_t hidden = 0;
    double gamma = 0.0;
    if (msd_checkpoint_hidden_size(ck, &hidden) != MSD_STATUS_OK) return 2;
    if (msd_checkpoint_gamma(ck, &gamma) != MSD_STATUS_OK) return 3;
    if (hidden != 6 || gamma != 0.75) return 4;

    MsdSchedule *sched = NULL;
    if (msd_schedule_from_checkpoint(ck, &sched) != MSD_STATUS_OK) return 5;
    for (int step = 0; step < 5; step++) {
        double lr = 0.0;
        if (msd_schedule_lr(sched, step, 0, 1.5, &lr) != MSD_STATUS_OK) return 6;
        if (!(lr > 0.0 && lr < gamma)) return 7;
    }
    msd_schedule_free(sched);
    msd_checkpoint_free(ck);

    MsdCheckpoint *missing = NULL;
    if (msd_checkpoint_load("/no/such/file.json", &missing) != MSD_STATUS_IO) return 8;
    if (strlen(msd_last_error()) == 0) return 9;

    printf("ok\n");
    return 0;
}
"#;
    let c_path = dir.path().join("smoke.c");
    fs::write(&c_path, src).unwrap();

    let exe = dir.path().join("smoke");
    let lib_dir = artifact_dir();
    let compile = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(&c_path)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lmetasched_ffi", "-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .output()
        .expect("cc not runnable");
    assert!(
        compile.status.success(),
        "compile failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&exe)
        .arg(&ckpt_path)
        .output()
        .expect("smoke binary not runnable");
    assert!(
        run.status.success(),
        "smoke exited {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
