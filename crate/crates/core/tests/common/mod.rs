#![allow(dead_code)]

use std::io::BufReader;

use brachiation::trajopt::Behavior;
use brachiation::{ModelParams, Trajectory};

/// Bundled nominal for `b`, as written by `brachiate optimize`.
pub fn nominal(p: &ModelParams, b: Behavior) -> Trajectory {
    let path = format!("{}/assets/{}.csv", env!("CARGO_MANIFEST_DIR"), b.to_string().to_lowercase());
    let f = std::fs::File::open(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    Trajectory::read_csv(p, BufReader::new(f)).unwrap()
}
