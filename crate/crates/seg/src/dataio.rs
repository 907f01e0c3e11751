//! Dataset layout, sample loading, batching and the synthetic corpus.
//!
//! A dataset is a directory holding `manifest.json` and
//! `{train,val,test}/{images/<id>.ppm, labels/<id>.pgm}`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revhrnet_core::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::netpbm::{self, Image8};
use crate::spec::INPUT_DIVISOR;

pub const IGNORE_INDEX: u32 = 255;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_MEAN: [f64; 3] = [0.5; 3];
pub const DEFAULT_STD: [f64; 3] = [0.5; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SegError::Invalid(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Directory the manifest was loaded from; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
    pub num_classes: usize,
    pub ignore_index: u32,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub splits: Splits,
}

impl DatasetManifest {
    /// Accepts either the dataset directory or the manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = std::fs::read_to_string(&file).map_err(|e| SegError::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| SegError::Invalid(format!("{}: {e}", file.display())))?;
        m.root = root;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&file, text).map_err(|e| SegError::io(&file, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.num_classes) {
            return Err(SegError::Invalid(format!("num_classes {} outside 2..=255", self.num_classes)));
        }
        if self.ignore_index != IGNORE_INDEX {
            return Err(SegError::Invalid(format!(
                "ignore_index must be {IGNORE_INDEX}, got {}",
                self.ignore_index
            )));
        }
        if let Some(s) = self.std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(SegError::Invalid(format!("std {s} must be positive")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(SegError::Invalid("mean must be finite".into()));
        }
        for split in Split::ALL {
            let ids = self.ids(split);
            let mut sorted: Vec<&String> = ids.iter().collect();
            sorted.sort();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                return Err(SegError::Invalid(format!("{split} lists {} twice", w[0])));
            }
            if let Some(id) = ids.iter().find(|id| id.is_empty() || id.contains(['/', '\\'])) {
                return Err(SegError::Invalid(format!("{split} has invalid sample id {id:?}")));
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn image_path(&self, split: Split, id: &str) -> PathBuf {
        self.root.join(split.as_str()).join("images").join(format!("{id}.ppm"))
    }

    pub fn label_path(&self, split: Split, id: &str) -> PathBuf {
        self.root.join(split.as_str()).join("labels").join(format!("{id}.pgm"))
    }
}

/// One loaded, normalised and padded image/label pair.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    /// `[3, H, W]`, H and W padded to multiples of 32.
    pub image: Tensor<T>,
    /// `H * W` row-major class ids, padding set to the ignore index.
    pub labels: Vec<u32>,
    /// Size before padding.
    pub original_size: (usize, usize),
}

impl<T: Scalar> Sample<T> {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

pub fn padded_size(height: usize, width: usize) -> (usize, usize) {
    (height.next_multiple_of(INPUT_DIVISOR), width.next_multiple_of(INPUT_DIVISOR))
}

/// Scales a P6 raster to `[0, 1]`, normalises per channel and zero-pads
/// right and bottom. Returns `[3, H', W']`.
pub fn image_to_tensor<T: Scalar>(img: &Image8, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<T>> {
    if img.channels != 3 {
        return Err(SegError::Invalid(format!("expected an RGB image, got {} channel(s)", img.channels)));
    }
    let (h, w) = (img.height, img.width);
    let (ph, pw) = padded_size(h, w);
    let scale = f64::from(img.maxval);
    let mut data = vec![T::zero(); 3 * ph * pw];
    for c in 0..3 {
        let plane = &mut data[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..h {
            for x in 0..w {
                let v = f64::from(img.data[(y * w + x) * 3 + c]) / scale;
                plane[y * pw + x] = T::lit((v - mean[c]) / std[c]);
            }
        }
    }
    Ok(Tensor::new(&[3, ph, pw], data)?)
}

/// Reads an RGB image for inference: `[1, 3, H', W']` plus its unpadded size.
pub fn load_image<T: Scalar>(path: &Path, mean: [f64; 3], std: [f64; 3]) -> Result<(Tensor<T>, (usize, usize))> {
    let img = netpbm::read(path)?;
    if img.channels != 3 {
        return Err(SegError::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "expected a binary PPM (P6) image".into(),
        });
    }
    let t = image_to_tensor::<T>(&img, mean, std)?;
    let s = t.shape().to_vec();
    Ok((t.reshape(&[1, s[0], s[1], s[2]])?, (img.height, img.width)))
}

pub fn load_sample<T: Scalar>(manifest: &DatasetManifest, split: Split, id: &str) -> Result<Sample<T>> {
    let image_path = manifest.image_path(split, id);
    let label_path = manifest.label_path(split, id);
    let img = netpbm::read(&image_path)?;
    if img.channels != 3 {
        return Err(SegError::Format {
            path: image_path,
            offset: 0,
            reason: "expected a binary PPM (P6) image".into(),
        });
    }
    let bytes = std::fs::read(&label_path).map_err(|e| SegError::io(&label_path, e))?;
    let (lab, raster_at) = netpbm::decode_with_offset(&bytes, &label_path)?;
    if lab.channels != 1 {
        return Err(SegError::Format {
            path: label_path,
            offset: 0,
            reason: "expected a binary PGM (P5) label map".into(),
        });
    }
    if (lab.width, lab.height) != (img.width, img.height) {
        return Err(SegError::Invalid(format!(
            "size mismatch: {} is {}x{}, {} is {}x{}",
            image_path.display(),
            img.width,
            img.height,
            label_path.display(),
            lab.width,
            lab.height
        )));
    }
    let k = manifest.num_classes as u32;
    if let Some(i) = lab
        .data
        .iter()
        .position(|&v| u32::from(v) >= k && u32::from(v) != manifest.ignore_index)
    {
        return Err(SegError::Format {
            path: label_path,
            offset: raster_at + i,
            reason: format!("label id {} is not below {k} or {}", lab.data[i], manifest.ignore_index),
        });
    }
    let (h, w) = (img.height, img.width);
    let (ph, pw) = padded_size(h, w);
    let mut labels = vec![manifest.ignore_index; ph * pw];
    for y in 0..h {
        for x in 0..w {
            labels[y * pw + x] = u32::from(lab.data[y * w + x]);
        }
    }
    Ok(Sample {
        id: id.to_string(),
        image: image_to_tensor(&img, manifest.mean, manifest.std)?,
        labels,
        original_size: (h, w),
    })
}

pub fn load_split<T: Scalar>(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample<T>>> {
    manifest.ids(split).iter().map(|id| load_sample(manifest, split, id)).collect()
}

/// Stacked samples of one batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `[N, 3, H, W]`.
    pub images: Tensor<T>,
    /// `N * H * W` class ids.
    pub labels: Vec<u32>,
}

pub fn collate<T: Scalar>(samples: &[&Sample<T>]) -> Result<Batch<T>> {
    let first = samples
        .first()
        .ok_or_else(|| SegError::Invalid("cannot collate an empty batch".into()))?;
    if let Some(s) = samples.iter().find(|s| s.size() != first.size()) {
        return Err(SegError::Invalid(format!(
            "batch mixes sizes {:?} ({}) and {:?} ({})",
            first.size(),
            first.id,
            s.size(),
            s.id
        )));
    }
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.clone()).collect();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::stack(&images)?,
        labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
    })
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Sample indices of every batch in one epoch: a seeded shuffle of
/// `0..len` cut into runs of `batch_size`, the last one possibly short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(SegError::Invalid("no samples to batch".into()));
    }
    if batch_size == 0 {
        return Err(SegError::Invalid("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Endless epoch-by-epoch batch schedule over preloaded samples.
pub struct BatchSchedule<'a, T> {
    samples: &'a [Sample<T>],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<'a, T: Scalar> BatchSchedule<'a, T> {
    pub fn new(samples: &'a [Sample<T>], batch_size: usize, seed: u64) -> Result<Self> {
        let pending = epoch_batches(samples.len(), batch_size, seed, 0)?.into_iter();
        Ok(Self {
            samples,
            batch_size,
            seed,
            epoch: 0,
            pending,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<Batch<T>> {
        let idx = match self.pending.next() {
            Some(idx) => idx,
            None => {
                self.epoch += 1;
                self.pending = epoch_batches(self.samples.len(), self.batch_size, self.seed, self.epoch)?.into_iter();
                self.pending.next().expect("non-empty epoch")
            }
        };
        let picked: Vec<&Sample<T>> = idx.iter().map(|&i| &self.samples[i]).collect();
        collate(&picked)
    }
}

/// Colour of class `c` in synthetic images and rendered predictions.
/// The first 20 entries are fixed; later classes are derived from the id.
pub fn class_color(c: u32) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 20] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
        [128, 128, 0],
        [255, 215, 180],
        [0, 0, 128],
    ];
    if let Some(rgb) = PALETTE.get(c as usize) {
        return *rgb;
    }
    if c == IGNORE_INDEX {
        return [255, 255, 255];
    }
    let h = c.wrapping_mul(2_654_435_761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

/// Background colour of synthetic images. Distinct from every class colour
/// so the background reads as class 0 by context, not by palette lookup.
const SYNTH_BACKGROUND: [u8; 3] = [96, 96, 96];
const SYNTH_NOISE: i32 = 12;

fn synth_color(class: u32) -> [u8; 3] {
    if class == 0 {
        SYNTH_BACKGROUND
    } else {
        class_color(class)
    }
}

/// One synthetic image/label pair: 1 to 4 axis-aligned rectangles or discs
/// of random foreground classes over a class-0 background, with mild
/// per-pixel noise on the image. Shapes span at most 40% of each side, so
/// background always remains.
pub fn synthetic_sample(seed: u64, index: usize, size: usize, num_classes: usize) -> (Image8, Image8) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut labels = vec![0u8; size * size];
    let max_side = (size * 2 / 5).max(2);
    let min_side = (size / 8).max(1);
    let shapes = rng.gen_range(1..=4);
    for _ in 0..shapes {
        let class = rng.gen_range(1..num_classes) as u8;
        let sh = rng.gen_range(min_side..=max_side);
        let sw = rng.gen_range(min_side..=max_side);
        let y0 = rng.gen_range(0..=size - sh);
        let x0 = rng.gen_range(0..=size - sw);
        if rng.gen_bool(0.5) {
            for y in y0..y0 + sh {
                labels[y * size + x0..y * size + x0 + sw].fill(class);
            }
        } else {
            let r = sh.min(sw) as f64 / 2.0;
            let (cy, cx) = (y0 as f64 + r, x0 as f64 + r);
            for y in y0..y0 + sh.min(sw) {
                for x in x0..x0 + sh.min(sw) {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        labels[y * size + x] = class;
                    }
                }
            }
        }
    }
    let mut rgb = Vec::with_capacity(size * size * 3);
    for &l in &labels {
        for ch in synth_color(u32::from(l)) {
            let v = i32::from(ch) + rng.gen_range(-SYNTH_NOISE..=SYNTH_NOISE);
            rgb.push(v.clamp(0, 255) as u8);
        }
    }
    let image = Image8 {
        width: size,
        height: size,
        channels: 3,
        maxval: 255,
        data: rgb,
    };
    let label = Image8 {
        width: size,
        height: size,
        channels: 1,
        maxval: 255,
        data: labels,
    };
    (image, label)
}

/// Writes `count` synthetic samples into the train split of `out` along with
/// a manifest. Val and test directories are created empty.
pub fn generate_synthetic(
    seed: u64,
    count: usize,
    size: usize,
    num_classes: usize,
    out: &Path,
) -> Result<DatasetManifest> {
    if size == 0 || size % INPUT_DIVISOR != 0 {
        return Err(SegError::Invalid(format!(
            "size {size} is not a positive multiple of {INPUT_DIVISOR}"
        )));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(SegError::Invalid(format!("num_classes {num_classes} outside 2..=255")));
    }
    if count == 0 {
        return Err(SegError::Invalid("count must be at least 1".into()));
    }
    let mut manifest = DatasetManifest {
        root: out.to_path_buf(),
        num_classes,
        ignore_index: IGNORE_INDEX,
        mean: DEFAULT_MEAN,
        std: DEFAULT_STD,
        splits: Splits::default(),
    };
    for split in Split::ALL {
        for sub in ["images", "labels"] {
            let dir = out.join(split.as_str()).join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| SegError::io(&dir, e))?;
        }
    }
    for i in 0..count {
        let id = format!("synth_{i:04}");
        let (image, label) = synthetic_sample(seed, i, size, num_classes);
        let ip = manifest.image_path(Split::Train, &id);
        std::fs::write(&ip, netpbm::encode(&image)).map_err(|e| SegError::io(&ip, e))?;
        let lp = manifest.label_path(Split::Train, &id);
        std::fs::write(&lp, netpbm::encode(&label)).map_err(|e| SegError::io(&lp, e))?;
        manifest.splits.train.push(id);
    }
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_arithmetic() {
        assert_eq!(padded_size(80, 100), (96, 128));
        assert_eq!(padded_size(64, 64), (64, 64));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(8, 3, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(8, 3, 1, 0).unwrap());
        assert!(epoch_batches(0, 3, 1, 0).is_err());
        assert!(epoch_batches(3, 0, 1, 0).is_err());
    }

    #[test]
    fn synthetic_samples_keep_background() {
        for i in 0..32 {
            let (img, lab) = synthetic_sample(7, i, 64, 3);
            assert_eq!(img.data.len(), 64 * 64 * 3);
            assert!(lab.data.iter().all(|&v| v < 3));
            assert!(lab.data.contains(&0));
        }
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
