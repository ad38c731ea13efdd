#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_patchgat");

/// Flags for a model small enough to train in well under a second.
pub const TINY_MODEL: [&str; 8] = [
    "--epochs",
    "15",
    "--hidden-dim",
    "8",
    "--latent-dim",
    "8",
    "--g-hidden-dim",
    "8",
];

pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(BIN).args(args).output().expect("binary runs")
}

pub fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Writes a small synthetic benchmark under `dir` and returns its path.
pub fn small_benchmark(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&run([
        "synth",
        "--out-dir",
        &s(&data),
        "--seed",
        &seed.to_string(),
        "--rows",
        "6",
        "--cols",
        "6",
        "--dim",
        "8",
        "--normal",
        "4",
        "--anomalous",
        "4",
        "--block",
        "2",
    ]));
    data
}

/// Sorted `.gadt` files of a benchmark split.
pub fn split_files(data: &Path, split: &str) -> Vec<String> {
    let mut files: Vec<String> = std::fs::read_dir(data.join(split))
        .unwrap()
        .map(|e| s(&e.unwrap().path()))
        .filter(|p| p.ends_with(".gadt"))
        .collect();
    files.sort();
    files
}

/// `file,value` rows of a two-column CSV, header skipped.
pub fn csv_pairs(path: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.to_string(), b.to_string())
        })
        .collect()
}
