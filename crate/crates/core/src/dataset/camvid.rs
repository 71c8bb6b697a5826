//! Loader for CamVid-style directories: labeled frames named by sequence and
//! frame number, with the prior frame located by subtracting a fixed frame
//! offset within the same sequence.
//!
//! Expected layout:
//!
//! ```text
//! root/
//!   images/   0001TP_006690.png  0001TP_006660.png  ...
//!   labels/   0001TP_006690.png  (or 0001TP_006690_L.png)
//! ```
//!
//! Every file in `labels/` is a candidate item; its current frame is the
//! image with the same stem (modulo a trailing `_L`), and its prior is the
//! image whose frame number is `prior_offset` lower, zero-padded to the same
//! width. Candidates whose prior frame does not exist are dropped and
//! counted, not errored — the first labeled frame of each sequence has no
//! past. Label colors map through the class table; colors outside the
//! palette become void (lenient mode) so partially annotated sets still
//! load.

use std::path::{Path, PathBuf};

use crate::dataset::{image_io, ClassTable, Dataset, LabeledFramePair, PairMeta};
use crate::error::DataError;

/// Splits a stem into (sequence prefix, frame number, digit width), using
/// the trailing run of ASCII digits as the frame number.
fn parse_stem(stem: &str) -> Option<(&str, u64, usize)> {
    let digits = stem.chars().rev().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let split = stem.len() - digits;
    let frame: u64 = stem[split..].parse().ok()?;
    Some((&stem[..split], frame, digits))
}

struct Item {
    prior: PathBuf,
    current: PathBuf,
    label: PathBuf,
    sequence: String,
    frame: u64,
}

/// Lazily loading dataset over a CamVid-style directory tree.
pub struct CamvidDataset {
    items: Vec<Item>,
    table: ClassTable,
    prior_offset: u32,
    candidates: usize,
    dropped: usize,
}

impl CamvidDataset {
    /// Scans `root` and pairs every label file with its current and prior
    /// frames. Errors if the directories are missing or no item survives.
    pub fn open(
        root: &Path,
        prior_offset: u32,
        table: ClassTable,
    ) -> Result<CamvidDataset, DataError> {
        if prior_offset == 0 {
            return Err(DataError::Invalid(
                "prior_offset must be at least 1 frame".into(),
            ));
        }
        let images_dir = root.join("images");
        let labels_dir = root.join("labels");
        for d in [&images_dir, &labels_dir] {
            if !d.is_dir() {
                return Err(DataError::Invalid(format!(
                    "{} is not a directory (expected images/ and labels/ under {})",
                    d.display(),
                    root.display()
                )));
            }
        }
        let mut label_files: Vec<PathBuf> = std::fs::read_dir(&labels_dir)
            .map_err(|e| DataError::Io {
                path: labels_dir.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "ppm")
                )
            })
            .collect();
        label_files.sort();

        let mut items = Vec::new();
        let mut candidates = 0usize;
        let mut dropped = 0usize;
        for label in label_files {
            let Some(stem) = label.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let stem = stem.strip_suffix("_L").unwrap_or(stem);
            let Some((seq, frame, width)) = parse_stem(stem) else {
                continue;
            };
            candidates += 1;
            let current = match find_image(&images_dir, stem) {
                Some(p) => p,
                None => {
                    dropped += 1;
                    continue;
                }
            };
            let Some(prior_frame) = frame.checked_sub(prior_offset as u64) else {
                dropped += 1;
                continue;
            };
            let prior_stem = format!("{seq}{prior_frame:0width$}");
            let prior = match find_image(&images_dir, &prior_stem) {
                Some(p) => p,
                None => {
                    dropped += 1;
                    continue;
                }
            };
            let sequence = seq.to_string();
            items.push(Item {
                prior,
                current,
                label,
                sequence,
                frame,
            });
        }
        if items.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(CamvidDataset {
            items,
            table,
            prior_offset,
            candidates,
            dropped,
        })
    }

    /// Labeled frames found before prior-availability filtering.
    pub fn candidates(&self) -> usize {
        self.candidates
    }

    /// Candidates dropped because the prior (or current) frame is missing.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "ppm"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

impl Dataset for CamvidDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<LabeledFramePair, DataError> {
        let item = self.items.get(index).ok_or(DataError::BadIndex {
            index,
            len: self.items.len(),
        })?;
        let prior = image_io::read_image_tensor(&item.prior)?;
        let current = image_io::read_image_tensor(&item.current)?;
        let (w, h, rgb) = image_io::read_image(&item.label)?;
        let (labels, _unknown) =
            crate::dataset::rgb_to_labels(&rgb, h, w, &self.table, false, &item.label)?;
        LabeledFramePair::new(
            prior,
            current,
            labels,
            PairMeta {
                source: item.sequence.clone(),
                frame_index: item.frame as i64,
                prior_offset: self.prior_offset,
                pad_rows: 0,
                pad_cols: 0,
            },
        )
    }
}
