//! Data supply: (prior, current, label) frame pairs.
//!
//! Sources: a deterministic synthetic scene generator ([`synth`]), a
//! manifest-based loader for exported datasets, and a CamVid-style directory
//! loader ([`camvid`]). All sources produce [`LabeledFramePair`]s; the crop
//! and padding protocol lives here so every source shares it.

pub mod camvid;
pub mod image_io;
pub mod synth;

pub use camvid::CamvidDataset;
pub use synth::{generate_synthetic, generate_synthetic_with, make_scene, SceneScript, SynthConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::{IntTensor, Tensor, VOID};

/// Whether a class names something that stays put or something that moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassGroup {
    Static,
    Dynamic,
}

/// Ordered class list with palette colors and the static/dynamic partition.
#[derive(Debug, Clone)]
pub struct ClassTable {
    names: Vec<String>,
    palette: Vec<[u8; 3]>,
    groups: Vec<ClassGroup>,
    by_color: BTreeMap<[u8; 3], u8>,
}

/// Color reserved for void/unlabeled pixels in rendered label images.
pub const VOID_COLOR: [u8; 3] = [0, 0, 0];

impl ClassTable {
    pub fn new(entries: Vec<(String, [u8; 3], ClassGroup)>) -> Result<ClassTable, DataError> {
        if entries.is_empty() || entries.len() >= VOID as usize {
            return Err(DataError::Invalid(format!(
                "class table must have 1..{} classes, got {}",
                VOID,
                entries.len()
            )));
        }
        let mut by_color = BTreeMap::new();
        let mut names = Vec::new();
        let mut palette = Vec::new();
        let mut groups = Vec::new();
        for (i, (name, color, group)) in entries.into_iter().enumerate() {
            if names.contains(&name) {
                return Err(DataError::Invalid(format!("duplicate class name {name}")));
            }
            if color == VOID_COLOR {
                return Err(DataError::Invalid(format!(
                    "class {name} uses the void color {VOID_COLOR:?}"
                )));
            }
            if by_color.insert(color, i as u8).is_some() {
                return Err(DataError::Invalid(format!(
                    "duplicate palette color {color:?}"
                )));
            }
            names.push(name);
            palette.push(color);
            groups.push(group);
        }
        Ok(ClassTable {
            names,
            palette,
            groups,
            by_color,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: u8) -> &str {
        &self.names[class as usize]
    }

    pub fn color(&self, class: u8) -> [u8; 3] {
        self.palette[class as usize]
    }

    pub fn group(&self, class: u8) -> ClassGroup {
        self.groups[class as usize]
    }

    pub fn is_dynamic(&self, class: u8) -> bool {
        self.groups[class as usize] == ClassGroup::Dynamic
    }

    /// One flag per class, true = dynamic. Matches [`crate::metrics`] usage.
    pub fn dynamic_flags(&self) -> Vec<bool> {
        self.groups
            .iter()
            .map(|g| *g == ClassGroup::Dynamic)
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    /// Class id for an exact palette color; void color and unknown colors
    /// return `None`.
    pub fn index_of_color(&self, color: [u8; 3]) -> Option<u8> {
        self.by_color.get(&color).copied()
    }
}

/// The standard 11-class street-scene evaluation set with the conventional
/// palette. Static: sky, building, pole, road, sidewalk, tree, sign, fence.
/// Dynamic: car, pedestrian, bicyclist.
pub fn default_class_table() -> ClassTable {
    use ClassGroup::{Dynamic, Static};
    let entries = vec![
        ("sky", [128, 128, 128], Static),
        ("building", [128, 0, 0], Static),
        ("pole", [192, 192, 128], Static),
        ("road", [128, 64, 128], Static),
        ("sidewalk", [60, 40, 222], Static),
        ("tree", [128, 128, 0], Static),
        ("sign", [192, 128, 128], Static),
        ("fence", [64, 64, 128], Static),
        ("car", [64, 0, 128], Dynamic),
        ("pedestrian", [64, 64, 0], Dynamic),
        ("bicyclist", [0, 128, 192], Dynamic),
    ];
    ClassTable::new(
        entries
            .into_iter()
            .map(|(n, c, g)| (n.to_string(), c, g))
            .collect(),
    )
    .expect("built-in class table is valid")
}

/// Provenance and padding bookkeeping for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMeta {
    /// Scene or sequence identifier.
    pub source: String,
    /// Frame number of the *current* frame within its sequence.
    pub frame_index: i64,
    /// How many frames earlier the prior was captured.
    pub prior_offset: u32,
    /// Rows/cols of zero/void padding appended at bottom/right.
    pub pad_rows: usize,
    pub pad_cols: usize,
}

/// One training/evaluation item: the prior frame, the current frame, and the
/// current frame's label map. Images are 3xHxW in [0,1]; labels are HxW with
/// class ids or [`VOID`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFramePair {
    pub prior: Tensor<f32>,
    pub current: Tensor<f32>,
    pub labels: IntTensor,
    pub meta: PairMeta,
}

impl LabeledFramePair {
    pub fn new(
        prior: Tensor<f32>,
        current: Tensor<f32>,
        labels: IntTensor,
        meta: PairMeta,
    ) -> Result<LabeledFramePair, DataError> {
        let (h, w) = match prior.shape() {
            &[3, h, w] => (h, w),
            other => {
                return Err(DataError::Invalid(format!(
                    "prior must be 3xHxW, got {other:?}"
                )))
            }
        };
        if current.shape() != [3, h, w] {
            return Err(DataError::Invalid(format!(
                "current shape {:?} does not match prior {:?}",
                current.shape(),
                prior.shape()
            )));
        }
        if labels.shape() != [h, w] {
            return Err(DataError::Invalid(format!(
                "labels shape {:?} does not match frames {h}x{w}",
                labels.shape()
            )));
        }
        Ok(LabeledFramePair {
            prior,
            current,
            labels,
            meta,
        })
    }

    /// (height, width) of the frames.
    pub fn dims(&self) -> (usize, usize) {
        (self.prior.shape()[1], self.prior.shape()[2])
    }
}

/// Anything that can serve items for training or evaluation. Implementations
/// must be deterministic: `get(i)` always returns the same item.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<LabeledFramePair, DataError>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory dataset, the synthetic generator's natural output form.
pub struct MemoryDataset {
    items: Vec<LabeledFramePair>,
}

impl MemoryDataset {
    pub fn new(items: Vec<LabeledFramePair>) -> MemoryDataset {
        MemoryDataset { items }
    }

    pub fn items(&self) -> &[LabeledFramePair] {
        &self.items
    }
}

impl Dataset for MemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<LabeledFramePair, DataError> {
        self.items.get(index).cloned().ok_or(DataError::BadIndex {
            index,
            len: self.items.len(),
        })
    }
}

fn crop_image(t: &Tensor<f32>, r: usize, c: usize, size: usize) -> Tensor<f32> {
    let (ch, _h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[ch, size, size], |i| {
        let (cc, rest) = (i / (size * size), i % (size * size));
        let (rr, ww) = (rest / size, rest % size);
        t.data()[(cc * t.shape()[1] + (r + rr)) * w + (c + ww)]
    })
}

/// Next multiple of 16 at or above `n`.
pub fn round_up_16(n: usize) -> usize {
    n.div_ceil(16) * 16
}

/// Pads images with zeros and labels with void at the bottom/right edges so
/// extents become multiples of 16; records the padding in meta. No-op for
/// already-divisible frames.
pub fn pad_pair_to_16(pair: &LabeledFramePair) -> LabeledFramePair {
    let (h, w) = pair.dims();
    let (ph, pw) = (round_up_16(h), round_up_16(w));
    if ph == h && pw == w {
        return pair.clone();
    }
    let pad_image = |t: &Tensor<f32>| {
        Tensor::from_fn(&[3, ph, pw], |i| {
            let (c, rest) = (i / (ph * pw), i % (ph * pw));
            let (r, cc) = (rest / pw, rest % pw);
            if r < h && cc < w {
                t.data()[(c * h + r) * w + cc]
            } else {
                0.0
            }
        })
    };
    let mut labels = IntTensor::full(&[ph, pw], VOID);
    for r in 0..h {
        labels.data_mut()[r * pw..][..w].copy_from_slice(&pair.labels.data()[r * w..][..w]);
    }
    LabeledFramePair {
        prior: pad_image(&pair.prior),
        current: pad_image(&pair.current),
        labels,
        meta: PairMeta {
            pad_rows: pair.meta.pad_rows + (ph - h),
            pad_cols: pair.meta.pad_cols + (pw - w),
            ..pair.meta.clone()
        },
    }
}

/// Draws one uniform crop window from `seed` and applies it to prior,
/// current, and labels alike, then pads to the next multiple of 16 (zeros
/// for images, void for labels) so the result can be batched directly.
pub fn random_crop_pair(
    pair: &LabeledFramePair,
    crop: usize,
    seed: u64,
) -> Result<LabeledFramePair, DataError> {
    let (h, w) = pair.dims();
    if crop == 0 || crop > h || crop > w {
        return Err(DataError::CropTooLarge { crop, h, w });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(0..=h - crop);
    let c = rng.random_range(0..=w - crop);
    crop_pair_at(pair, r, c, crop)
}

/// Deterministic variant of [`random_crop_pair`] with an explicit window.
pub fn crop_pair_at(
    pair: &LabeledFramePair,
    r: usize,
    c: usize,
    crop: usize,
) -> Result<LabeledFramePair, DataError> {
    let (h, w) = pair.dims();
    if crop == 0 || r + crop > h || c + crop > w {
        return Err(DataError::CropTooLarge { crop, h, w });
    }
    let mut labels = vec![0u8; crop * crop];
    for rr in 0..crop {
        labels[rr * crop..][..crop]
            .copy_from_slice(&pair.labels.data()[(r + rr) * w + c..][..crop]);
    }
    let cropped = LabeledFramePair {
        prior: crop_image(&pair.prior, r, c, crop),
        current: crop_image(&pair.current, r, c, crop),
        labels: IntTensor::new(vec![crop, crop], labels).expect("crop extents positive"),
        meta: pair.meta.clone(),
    };
    Ok(pad_pair_to_16(&cropped))
}

/// Quantizes a `[3,H,W]` image in `[0,1]` to interleaved 8-bit RGB rows.
pub fn image_to_rgb_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = vec![0u8; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = t.data()[(ch * h + r) * w + c];
                out[(r * w + c) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Renders a label map as palette colors (void -> [`VOID_COLOR`]).
pub fn labels_to_rgb(labels: &IntTensor, table: &ClassTable) -> Vec<u8> {
    labels
        .data()
        .iter()
        .flat_map(|&id| {
            if id == VOID {
                VOID_COLOR
            } else {
                table.color(id)
            }
        })
        .collect()
}

/// Decodes a palette-colored label image. Unknown colors map to void when
/// `strict` is false and raise [`DataError::PaletteMismatch`] otherwise; the
/// void color always maps to void. Returns the unknown-pixel count.
pub fn rgb_to_labels(
    rgb: &[u8],
    h: usize,
    w: usize,
    table: &ClassTable,
    strict: bool,
    path: &Path,
) -> Result<(IntTensor, usize), DataError> {
    let mut data = vec![0u8; h * w];
    let mut unknown = 0usize;
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        let color = [px[0], px[1], px[2]];
        data[i] = if color == VOID_COLOR {
            VOID
        } else {
            match table.index_of_color(color) {
                Some(id) => id,
                None if strict => {
                    return Err(DataError::PaletteMismatch {
                        path: path.to_path_buf(),
                        color,
                    })
                }
                None => {
                    unknown += 1;
                    VOID
                }
            }
        };
    }
    Ok((
        IntTensor::new(vec![h, w], data).expect("label extents positive"),
        unknown,
    ))
}

/// Writes items as PPM files plus a `manifest.csv` (one line per item:
/// `id,prior,current,labels,offset`; paths relative to `dir`). Returns the
/// manifest path. Pixel values survive the u8 round trip exactly because
/// sources quantize to u8 before building tensors.
pub fn export_dataset(
    items: &[LabeledFramePair],
    table: &ClassTable,
    dir: &Path,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut manifest = String::new();
    for (i, item) in items.iter().enumerate() {
        let (h, w) = item.dims();
        let names = [
            format!("{i:04}-prior.ppm"),
            format!("{i:04}-current.ppm"),
            format!("{i:04}-labels.ppm"),
        ];
        image_io::write_ppm(&dir.join(&names[0]), w, h, &image_to_rgb_bytes(&item.prior))?;
        image_io::write_ppm(&dir.join(&names[1]), w, h, &image_to_rgb_bytes(&item.current))?;
        image_io::write_ppm(&dir.join(&names[2]), w, h, &labels_to_rgb(&item.labels, table))?;
        writeln!(
            manifest,
            "{i:04},{},{},{},{}",
            names[0], names[1], names[2], item.meta.prior_offset
        )
        .expect("string write cannot fail");
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| DataError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

struct ManifestRow {
    id: String,
    prior: PathBuf,
    current: PathBuf,
    labels: PathBuf,
    offset: u32,
}

/// Lazy loader for a directory written by [`export_dataset`].
pub struct ManifestDataset {
    rows: Vec<ManifestRow>,
    table: ClassTable,
}

impl ManifestDataset {
    /// `path` may be the manifest file or its directory.
    pub fn open(path: &Path, table: ClassTable) -> Result<ManifestDataset, DataError> {
        let manifest = if path.is_dir() {
            path.join("manifest.csv")
        } else {
            path.to_path_buf()
        };
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let text = std::fs::read_to_string(&manifest).map_err(|e| DataError::Io {
            path: manifest.clone(),
            source: e,
        })?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(DataError::BadManifest {
                    path: manifest.clone(),
                    line: lineno + 1,
                    detail: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let offset = fields[4].parse::<u32>().map_err(|e| DataError::BadManifest {
                path: manifest.clone(),
                line: lineno + 1,
                detail: format!("bad offset: {e}"),
            })?;
            rows.push(ManifestRow {
                id: fields[0].to_string(),
                prior: root.join(fields[1]),
                current: root.join(fields[2]),
                labels: root.join(fields[3]),
                offset,
            });
        }
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(ManifestDataset { rows, table })
    }
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn get(&self, index: usize) -> Result<LabeledFramePair, DataError> {
        let row = self.rows.get(index).ok_or(DataError::BadIndex {
            index,
            len: self.rows.len(),
        })?;
        let prior = image_io::read_image_tensor(&row.prior)?;
        let current = image_io::read_image_tensor(&row.current)?;
        let (w, h, rgb) = image_io::read_image(&row.labels)?;
        // We wrote these files, so every color must be in the palette.
        let (labels, _) = rgb_to_labels(&rgb, h, w, &self.table, true, &row.labels)?;
        LabeledFramePair::new(
            prior,
            current,
            labels,
            PairMeta {
                source: row.id.clone(),
                frame_index: 0,
                prior_offset: row.offset,
                pad_rows: 0,
                pad_cols: 0,
            },
        )
    }
}
