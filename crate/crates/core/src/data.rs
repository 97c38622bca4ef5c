//! Training data sources.
//!
//! Two procedural datasets generate images on demand as pure functions of
//! (seed, split, index), so any example can be revisited exactly — the
//! basis of deterministic held-out evaluation and bit-reproducible runs. A
//! folder source loads PGM/PPM files, taking each file's class from a
//! leading `<digit>_` in its name.
//!
//! All images are channel-major [C,H,W] in [−1, 1].

use crate::error::{Error, Result};
use crate::image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Which example pool to draw from; they never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// Dataset selector, as it appears in run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Gradient background with 0–4 gradient-filled rectangles; the label
    /// is the rectangle count.
    BlocksAndEdges { image_hw: usize },
    /// Two-shade checkerboards of cell size 2 or 4; the label indexes the
    /// cell size.
    Checkerboard { image_hw: usize },
    /// PGM/PPM files from disk; label from a `<digit>_` filename prefix.
    Folder { path: PathBuf, image_hw: usize },
}

impl DataConfig {
    pub fn image_hw(&self) -> usize {
        match *self {
            DataConfig::BlocksAndEdges { image_hw }
            | DataConfig::Checkerboard { image_hw }
            | DataConfig::Folder { image_hw, .. } => image_hw,
        }
    }
}

/// An open data source.
pub struct Dataset {
    config: DataConfig,
    seed: u64,
    channels: usize,
    num_classes: usize,
    /// Folder sources only: eagerly loaded (values, label) pairs.
    loaded: Vec<(Vec<f64>, usize)>,
}

impl Dataset {
    pub fn open(config: &DataConfig, seed: u64) -> Result<Dataset> {
        if config.image_hw() < 4 {
            return Err(Error::invalid("dataset: image size must be at least 4"));
        }
        match config {
            DataConfig::BlocksAndEdges { .. } => Ok(Dataset {
                config: config.clone(),
                seed,
                channels: 1,
                num_classes: 5,
                loaded: Vec::new(),
            }),
            DataConfig::Checkerboard { .. } => Ok(Dataset {
                config: config.clone(),
                seed,
                channels: 1,
                num_classes: 2,
                loaded: Vec::new(),
            }),
            DataConfig::Folder { path, image_hw } => {
                let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("pgm") | Some("ppm")
                        )
                    })
                    .collect();
                entries.sort();
                if entries.is_empty() {
                    return Err(Error::invalid(format!(
                        "dataset: no .pgm/.ppm files in {}",
                        path.display()
                    )));
                }
                let mut loaded = Vec::with_capacity(entries.len());
                let mut channels = None;
                let mut max_label = 0usize;
                for p in &entries {
                    let img = image::read_pnm(p)?;
                    if img.height != *image_hw || img.width != *image_hw {
                        return Err(Error::Image(format!(
                            "{}: expected {image_hw}x{image_hw}, got {}x{}",
                            p.display(),
                            img.height,
                            img.width
                        )));
                    }
                    match channels {
                        None => channels = Some(img.channels),
                        Some(c) if c != img.channels => {
                            return Err(Error::Image(format!(
                                "{}: mixed channel counts in folder",
                                p.display()
                            )))
                        }
                        _ => {}
                    }
                    let label = p
                        .file_name()
                        .and_then(|n| n.to_str())
                        .and_then(|n| {
                            let mut chars = n.chars();
                            match (chars.next(), chars.next()) {
                                (Some(d), Some('_')) if d.is_ascii_digit() => {
                                    Some(d as usize - '0' as usize)
                                }
                                _ => None,
                            }
                        })
                        .unwrap_or(0);
                    max_label = max_label.max(label);
                    loaded.push((img.values, label));
                }
                Ok(Dataset {
                    config: config.clone(),
                    seed,
                    channels: channels.unwrap(),
                    num_classes: max_label + 1,
                    loaded,
                })
            }
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_hw(&self) -> usize {
        self.config.image_hw()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Size of a split. Procedural pools are practically unbounded; folder
    /// sources split 90/10 deterministically by position.
    pub fn len(&self, split: Split) -> usize {
        match &self.config {
            DataConfig::Folder { .. } => {
                // folders below ten files keep everything in training
                let held = self.loaded.len() / 10;
                match split {
                    Split::Train => self.loaded.len() - held,
                    Split::Heldout => held,
                }
            }
            _ => 1 << 40,
        }
    }

    /// The (image, label) at `index` within `split`; pure and repeatable.
    pub fn example(&self, split: Split, index: u64) -> (Vec<f64>, usize) {
        match &self.config {
            DataConfig::Folder { .. } => {
                let held = self.len(Split::Heldout);
                let train = self.len(Split::Train);
                let i = match split {
                    // held-out files are the tail of the sorted listing
                    Split::Train => index as usize % train,
                    Split::Heldout => {
                        assert!(held > 0, "folder too small to hold out examples");
                        train + index as usize % held
                    }
                };
                self.loaded[i].clone()
            }
            DataConfig::BlocksAndEdges { image_hw } => {
                let mut rng = self.example_rng(split, index);
                blocks_and_edges(*image_hw, &mut rng)
            }
            DataConfig::Checkerboard { image_hw } => {
                let mut rng = self.example_rng(split, index);
                checkerboard(*image_hw, &mut rng)
            }
        }
    }

    fn example_rng(&self, split: Split, index: u64) -> ChaCha8Rng {
        let salt = match split {
            Split::Train => 0x747261696e_u64,
            Split::Heldout => 0x68656c64_u64,
        };
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&salt.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

fn blocks_and_edges(hw: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let mut v = vec![0.0; hw * hw];
    // dark background gradient along a random axis
    let horizontal = rng.gen_bool(0.5);
    let b0 = rng.gen_range(-1.0..-0.4);
    let b1 = rng.gen_range(-1.0..-0.4);
    for y in 0..hw {
        for x in 0..hw {
            let f = if horizontal {
                x as f64 / (hw - 1) as f64
            } else {
                y as f64 / (hw - 1) as f64
            };
            v[y * hw + x] = b0 + (b1 - b0) * f;
        }
    }
    let count = rng.gen_range(0..=4usize);
    for _ in 0..count {
        let min_side = 3.min(hw / 4).max(2);
        let max_side = hw / 2;
        let rh = rng.gen_range(min_side..=max_side);
        let rw = rng.gen_range(min_side..=max_side);
        let ry = rng.gen_range(0..=hw - rh);
        let rx = rng.gen_range(0..=hw - rw);
        let u0 = rng.gen_range(0.2..1.0);
        let u1 = rng.gen_range(0.2..1.0);
        let along_x = rng.gen_bool(0.5);
        for y in ry..ry + rh {
            for x in rx..rx + rw {
                let f = if along_x {
                    (x - rx) as f64 / (rw - 1).max(1) as f64
                } else {
                    (y - ry) as f64 / (rh - 1).max(1) as f64
                };
                v[y * hw + x] = u0 + (u1 - u0) * f;
            }
        }
    }
    (v, count)
}

fn checkerboard(hw: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let label = rng.gen_range(0..2usize);
    let cell = if label == 0 { 2 } else { 4 };
    let phase_x = rng.gen_range(0..cell);
    let phase_y = rng.gen_range(0..cell);
    let lo = rng.gen_range(-1.0..-0.3);
    let hi = rng.gen_range(0.3..1.0);
    let mut v = vec![0.0; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let parity = ((x + phase_x) / cell + (y + phase_y) / cell) % 2;
            v[y * hw + x] = if parity == 0 { lo } else { hi };
        }
    }
    (v, label)
}
