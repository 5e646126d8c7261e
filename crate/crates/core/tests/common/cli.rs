//! Helpers for running the `abc` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn abc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abc"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawning abc")
}

pub fn abc_ok(args: &[&str]) -> Output {
    let out = abc(args);
    assert!(
        out.status.success(),
        "abc {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `dir` keyed by its relative path.
pub fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Golden frames as (file name, side, seed, joints).
pub const GOLDEN_FRAMES: [(&str, &str, u64, &str); 3] = [
    ("left_seed0_home.ppm", "left", 0, "0,0,0,0,0,1"),
    ("right_seed0_home.ppm", "right", 0, "0,0,0,0,0,1"),
    ("left_seed0_approach.ppm", "left", 0, "0.24,0.5,0,0,0,1"),
];

pub fn golden_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden"))
}
