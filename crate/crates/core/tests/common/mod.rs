#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use fedtrinet::data::idx::{encode_images, encode_labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 12;

/// 12x12 digits-like images: class `c` lights a 3x3 block at cell `c` of a 4x3 grid.
pub fn synthetic_bytes(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..10u8);
        let (by, bx) = (usize::from(label / 4) * 4, usize::from(label % 4) * 3);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let lit = (by..by + 3).contains(&y) && (bx..bx + 3).contains(&x);
                let v: u8 = if lit { rng.gen_range(150..=255) } else { rng.gen_range(0..60) };
                pixels.push(v);
            }
        }
        labels.push(label);
    }
    (pixels, labels)
}

pub struct Files {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

pub fn write_idx_pair(dir: &Path, name: &str, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (pixels, labels) = synthetic_bytes(n, seed);
    let img = dir.join(format!("{name}-images-idx3-ubyte"));
    let lbl = dir.join(format!("{name}-labels-idx1-ubyte"));
    fs::write(&img, encode_images(SIDE, SIDE, &pixels)).unwrap();
    fs::write(&lbl, encode_labels(&labels)).unwrap();
    (img, lbl)
}

pub fn write_dataset(dir: &Path, n_train: usize, n_test: usize) -> Files {
    let (train_images, train_labels) = write_idx_pair(dir, "train", n_train, 1);
    let (test_images, test_labels) = write_idx_pair(dir, "test", n_test, 2);
    Files {
        train_images,
        train_labels,
        test_images,
        test_labels,
    }
}

/// A small, fast config over `files`; `extra` lines are appended verbatim.
/// Base config for the synthetic set; keys in `extra` replace the defaults.
pub fn config_text(files: &Files, out: &Path, extra: &str) -> String {
    let base = format!(
        "train_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n\
         dataset = other\narchitecture = compact\nnum_clients = 4\nlabeled_total = 40\n\
         phase1_rounds = 2\nphase2_rounds = 2\nlocal_epochs = 1\nbatch_size_labeled = 10\n\
         batch_size_pseudo = 20\neta = 0.1\nseed = 5\noutput_dir = {}\n",
        files.train_images.display(),
        files.train_labels.display(),
        files.test_images.display(),
        files.test_labels.display(),
        out.display(),
    );
    let key = |line: &str| line.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    text
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(format!("{name}.cfg"));
    fs::write(&path, text).unwrap();
    path
}
