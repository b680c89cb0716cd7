#![allow(dead_code)]

use std::path::Path;

use ember_core::sim::IgnitionKind;
use ember_pipeline::config::Settings;

/// A sweep small enough to train in a few seconds.
pub fn tiny(out: &Path) -> Settings {
    Settings {
        out: out.to_path_buf(),
        rows: 10,
        cols: 10,
        steps: 8,
        epochs: 2,
        hidden: 2,
        layers: 2,
        patterns: vec![IgnitionKind::StripSouth, IgnitionKind::Outward],
        speeds: vec![1.0, 8.0],
        directions: vec![230.0, 330.0],
        timing_reps: 1,
        ..Settings::default()
    }
}

pub fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
