//! Loading monocular sequences from a directory.
//!
//! A sequence lives in one directory:
//!
//! ```text
//! <root>/
//!   calibration.txt    one `key value` pair per line: fx fy cx cy width height
//!   000000.png         numbered RGB frames, 8- or 16-bit
//!   000001.png
//!   depth/000001.png   optional 16-bit grayscale, value = depth_m * 256, 0 = no data
//!   speeds.txt         optional, per line: frame_index timestamp_s speed_mps
//!   exclude.txt        optional, one frame index per line (static frames)
//! ```
//!
//! Frame numbers come from the file stems and need not be contiguous; a
//! frame is usable as a training target when both numeric neighbors exist
//! on disk and it is not excluded. Timestamps come from `speeds.txt` when
//! present, otherwise the frame number is taken as the time in seconds.
//!
//! All reads are deterministic and go through `&self`, so one dataset can
//! feed several workers concurrently; samples own their pixel data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;

use super::{DepthMap, ImageFrame, SampleSource, SequenceSample};

/// Photometric jitter and mirroring, applied identically to the target and
/// all of its context frames so the warp consistency they are trained on
/// survives augmentation. Mirroring also mirrors the principal point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Mirror the sample horizontally with probability one half.
    pub horizontal_flip: bool,
    /// Additive brightness offset, drawn uniformly from `±brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`, about the frame mean.
    pub contrast: f64,
    /// Saturation factor drawn from `1 ± saturation`, about per-pixel gray.
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { horizontal_flip: true, brightness: 0.2, contrast: 0.2, saturation: 0.2 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} jitter must be in [0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loader configuration.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    /// Training resolution `(height, width)`; frames are resampled to it and
    /// the intrinsics rescaled accordingly. `None` keeps the native size.
    pub resolution: Option<(usize, usize)>,
    /// Augmentation for [`DiskDataset::load_augmented`]; `None` disables it.
    pub augment: Option<AugmentConfig>,
}

/// A monocular sequence on disk. Opening scans the directory and parses the
/// side tables once; pixel data is read lazily per sample.
#[derive(Debug, Clone)]
pub struct DiskDataset {
    root: PathBuf,
    cfg: DatasetConfig,
    native: CameraIntrinsics,
    frames: BTreeMap<u64, PathBuf>,
    /// frame number -> (timestamp s, speed m/s)
    speeds: Option<BTreeMap<u64, (f64, f64)>>,
    excluded: BTreeSet<u64>,
    usable: Vec<u64>,
}

impl DiskDataset {
    pub fn open(root: impl AsRef<Path>, cfg: DatasetConfig) -> Result<Self> {
        if let Some(a) = &cfg.augment {
            a.validate()?;
        }
        if let Some((h, w)) = cfg.resolution {
            if h == 0 || w == 0 {
                return Err(Error::InvalidConfig(format!(
                    "training resolution {w}x{h} must be nonzero"
                )));
            }
        }
        let root = root.as_ref().to_path_buf();
        let native = parse_calibration(&root.join("calibration.txt"))?;

        let mut frames = BTreeMap::new();
        for entry in std::fs::read_dir(&root).map_err(|e| io_at(&root, e))? {
            let path = entry.map_err(|e| io_at(&root, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            if let Some(number) = numeric_stem(&path) {
                frames.insert(number, path);
            }
        }
        if frames.is_empty() {
            return Err(Error::Dataset {
                path: root.clone(),
                message: "no numbered .png frames found".into(),
            });
        }

        let speeds_path = root.join("speeds.txt");
        let speeds = if speeds_path.exists() { Some(parse_speeds(&speeds_path)?) } else { None };

        let exclude_path = root.join("exclude.txt");
        let excluded = if exclude_path.exists() {
            parse_exclusions(&exclude_path)?
        } else {
            BTreeSet::new()
        };

        let usable = frames
            .keys()
            .copied()
            .filter(|&f| {
                f > 0
                    && frames.contains_key(&(f - 1))
                    && frames.contains_key(&(f + 1))
                    && !excluded.contains(&f)
            })
            .collect();

        Ok(Self { root, cfg, native, frames, speeds, excluded, usable })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.cfg
    }

    /// Intrinsics at the training resolution.
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        match self.cfg.resolution {
            None => Ok(self.native),
            Some((h, w)) => self
                .native
                .scaled(w as f64 / self.native.width as f64, h as f64 / self.native.height as f64),
        }
    }

    /// Frame numbers usable as training targets.
    pub fn usable_frames(&self) -> &[u64] {
        &self.usable
    }

    /// Load the sample whose target is frame `number`, without augmentation.
    /// The same number always yields bit-identical pixel data.
    pub fn load(&self, number: u64) -> Result<SequenceSample> {
        let target_path = self.frames.get(&number).ok_or(Error::IndexOutOfRange {
            index: number as usize,
            len: self.frames.len(),
        })?;
        if self.excluded.contains(&number) {
            return Err(Error::Dataset {
                path: self.root.join("exclude.txt"),
                message: format!("frame {number} is excluded as static"),
            });
        }
        let prev_path = (number > 0)
            .then(|| self.frames.get(&(number - 1)))
            .flatten()
            .ok_or(Error::MissingContext { index: number as usize, side: "previous" })?;
        let next_path = self
            .frames
            .get(&(number + 1))
            .ok_or(Error::MissingContext { index: number as usize, side: "posterior" })?;

        let (ts, speed) = self.clock(number)?;
        let (ts_prev, _) = self.clock(number - 1)?;
        let (ts_next, _) = self.clock(number + 1)?;

        let target = ImageFrame::new(self.load_rgb(target_path)?, ts)?;
        let prev = ImageFrame::new(self.load_rgb(prev_path)?, ts_prev)?;
        let next = ImageFrame::new(self.load_rgb(next_path)?, ts_next)?;

        let depth_path = self.root.join("depth").join(format!("{number:06}.png"));
        let gt_depth =
            if depth_path.exists() { Some(self.load_depth(&depth_path)?) } else { None };

        let sample = SequenceSample {
            target,
            contexts: vec![(prev, ts_prev - ts), (next, ts_next - ts)],
            intrinsics: self.intrinsics()?,
            gt_depth,
            speed,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Load with the configured augmentation. Flip and jitter draws come
    /// from `rng`, so a stored RNG state reproduces the exact sample.
    pub fn load_augmented(&self, number: u64, rng: &mut ChaCha8Rng) -> Result<SequenceSample> {
        let mut sample = self.load(number)?;
        let Some(aug) = &self.cfg.augment else {
            return Ok(sample);
        };
        if aug.horizontal_flip && rng.gen_bool(0.5) {
            flip_sample(&mut sample)?;
        }
        let brightness = rng.gen_range(-aug.brightness..=aug.brightness);
        let contrast = rng.gen_range(1.0 - aug.contrast..=1.0 + aug.contrast);
        let saturation = rng.gen_range(1.0 - aug.saturation..=1.0 + aug.saturation);
        jitter_frame(&mut sample.target, brightness, contrast, saturation);
        for (frame, _) in &mut sample.contexts {
            jitter_frame(frame, brightness, contrast, saturation);
        }
        Ok(sample)
    }

    /// Timestamp and speed of a frame: from the speed table when present,
    /// otherwise the frame number doubles as the time in seconds.
    fn clock(&self, number: u64) -> Result<(f64, Option<f64>)> {
        match &self.speeds {
            None => Ok((number as f64, None)),
            Some(table) => {
                let (ts, speed) = table.get(&number).ok_or_else(|| Error::Dataset {
                    path: self.root.join("speeds.txt"),
                    message: format!("no row for frame {number}"),
                })?;
                Ok((*ts, Some(*speed)))
            }
        }
    }

    fn load_rgb(&self, path: &Path) -> Result<ArrayD<f64>> {
        let decoded = image::open(path)?.into_rgb16();
        if (decoded.width() as usize, decoded.height() as usize)
            != (self.native.width, self.native.height)
        {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!(
                    "frame is {}x{} but calibration says {}x{}",
                    decoded.width(),
                    decoded.height(),
                    self.native.width,
                    self.native.height
                ),
            });
        }
        let resized = match self.cfg.resolution {
            Some((h, w)) if (h, w) != (self.native.height, self.native.width) => {
                image::imageops::resize(&decoded, w as u32, h as u32, FilterType::Triangle)
            }
            _ => decoded,
        };
        let (h, w) = (resized.height() as usize, resized.width() as usize);
        let mut pixels = ArrayD::zeros(IxDyn(&[3, h, w]));
        for (x, y, p) in resized.enumerate_pixels() {
            for c in 0..3 {
                pixels[[c, y as usize, x as usize]] = p.0[c] as f64 / 65535.0;
            }
        }
        Ok(pixels)
    }

    fn load_depth(&self, path: &Path) -> Result<DepthMap> {
        let decoded = match image::open(path)? {
            image::DynamicImage::ImageLuma16(buf) => buf,
            other => {
                return Err(Error::Dataset {
                    path: path.to_path_buf(),
                    message: format!(
                        "depth rasters must be 16-bit single-channel, got {:?}",
                        other.color()
                    ),
                })
            }
        };
        let (sh, sw) = (decoded.height() as usize, decoded.width() as usize);
        if (sw, sh) != (self.native.width, self.native.height) {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!(
                    "depth raster is {sw}x{sh} but calibration says {}x{}",
                    self.native.width, self.native.height
                ),
            });
        }
        let (h, w) = self.cfg.resolution.unwrap_or((sh, sw));
        // Nearest-neighbor with the same linear coordinate convention as
        // the intrinsics rescaling: no-data zeros must survive unblended
        // and sampled values must stay geometrically consistent.
        let mut values = Array2::zeros((h, w));
        for v in 0..h {
            for u in 0..w {
                let sv = ((v as f64 * sh as f64 / h as f64).round() as usize).min(sh - 1);
                let su = ((u as f64 * sw as f64 / w as f64).round() as usize).min(sw - 1);
                values[[v, u]] = decoded.get_pixel(su as u32, sv as u32).0[0] as f64 / 256.0;
            }
        }
        DepthMap::new(values)
    }
}

impl SampleSource for DiskDataset {
    fn len(&self) -> usize {
        self.usable.len()
    }

    fn get(&self, index: usize) -> Result<SequenceSample> {
        let number = *self
            .usable
            .get(index)
            .ok_or(Error::IndexOutOfRange { index, len: self.usable.len() })?;
        self.load(number)
    }
}

/// Open `root` with default configuration and load one sample; see
/// [`DiskDataset::load`].
pub fn load_sample(root: impl AsRef<Path>, index: u64) -> Result<SequenceSample> {
    DiskDataset::open(root, DatasetConfig::default())?.load(index)
}

/// Decode one color image into a `[3, H, W]` array of `[0, 1]` intensities,
/// independent of any dataset directory.
pub fn read_image(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let decoded = image::open(path.as_ref())?.into_rgb16();
    let (h, w) = (decoded.height() as usize, decoded.width() as usize);
    let mut pixels = ArrayD::zeros(IxDyn(&[3, h, w]));
    for (x, y, p) in decoded.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f64 / 65535.0;
        }
    }
    Ok(pixels)
}

/// Decode a standalone 16-bit depth raster: meters are stored as
/// `depth * 256`, zero marks pixels without a measurement.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let decoded = match image::open(path)? {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!(
                    "depth rasters must be 16-bit single-channel, got {:?}",
                    other.color()
                ),
            })
        }
    };
    let (h, w) = (decoded.height() as usize, decoded.width() as usize);
    let values =
        Array2::from_shape_fn((h, w), |(v, u)| decoded.get_pixel(u as u32, v as u32).0[0] as f64 / 256.0);
    DepthMap::new(values)
}

/// Encode a depth map as the 16-bit raster [`read_depth`] decodes: values
/// quantize to 1/256 m and saturate at `u16::MAX / 256` (just under 256 m);
/// depths that round to zero become no-data pixels.
pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.values.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        w as u32,
        h as u32,
        |u, v| {
            let coded = (depth.values[[v as usize, u as usize]] * 256.0).round();
            image::Luma([coded.clamp(0.0, u16::MAX as f64) as u16])
        },
    );
    buf.save(path.as_ref())?;
    Ok(())
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn numeric_stem(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn parse_calibration(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    let mut fields: BTreeMap<&str, f64> = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Dataset {
            path: path.to_path_buf(),
            message: format!("line {}: expected `key value`, got {line:?}", line_no + 1),
        };
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(bad)?;
        let value: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        if fields.insert(key, value).is_some() {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!("duplicate key {key:?}"),
            });
        }
    }
    let mut want = |key: &str| {
        fields.remove(key).ok_or_else(|| Error::Dataset {
            path: path.to_path_buf(),
            message: format!("missing key {key:?}"),
        })
    };
    let (fx, fy, cx, cy) = (want("fx")?, want("fy")?, want("cx")?, want("cy")?);
    let (width, height) = (want("width")?, want("height")?);
    if !fields.is_empty() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            message: format!("unknown keys: {:?}", fields.keys().collect::<Vec<_>>()),
        });
    }
    if width.fract() != 0.0 || height.fract() != 0.0 || width <= 0.0 || height <= 0.0 {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            message: format!("width/height must be positive integers, got {width} x {height}"),
        });
    }
    CameraIntrinsics::new(fx, fy, cx, cy, width as usize, height as usize)
}

fn parse_speeds(path: &Path) -> Result<BTreeMap<u64, (f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    let mut table = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Dataset {
            path: path.to_path_buf(),
            message: format!(
                "line {}: expected `frame_index timestamp_s speed_mps`, {what}: {line:?}",
                line_no + 1
            ),
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(bad("wrong column count"));
        }
        let frame: u64 = cols[0].parse().map_err(|_| bad("bad frame index"))?;
        let ts: f64 = cols[1].parse().map_err(|_| bad("bad timestamp"))?;
        let speed: f64 = cols[2].parse().map_err(|_| bad("bad speed"))?;
        if speed < 0.0 || !speed.is_finite() || !ts.is_finite() {
            return Err(bad("values must be finite, speed >= 0"));
        }
        if table.insert(frame, (ts, speed)).is_some() {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!("duplicate row for frame {frame}"),
            });
        }
    }
    Ok(table)
}

fn parse_exclusions(path: &Path) -> Result<BTreeSet<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    let mut set = BTreeSet::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let frame: u64 = line.parse().map_err(|_| Error::Dataset {
            path: path.to_path_buf(),
            message: format!("line {}: expected a frame index, got {line:?}", line_no + 1),
        })?;
        set.insert(frame);
    }
    Ok(set)
}

/// Mirror every raster horizontally and the principal point with them.
fn flip_sample(sample: &mut SequenceSample) -> Result<()> {
    let flip_pixels = |p: &mut ArrayD<f64>| {
        p.invert_axis(ndarray::Axis(2));
    };
    flip_pixels(&mut sample.target.pixels);
    for (frame, _) in &mut sample.contexts {
        flip_pixels(&mut frame.pixels);
    }
    if let Some(depth) = &mut sample.gt_depth {
        depth.values.invert_axis(ndarray::Axis(1));
    }
    let k = sample.intrinsics;
    sample.intrinsics =
        CameraIntrinsics::new(k.fx, k.fy, (k.width - 1) as f64 - k.cx, k.cy, k.width, k.height)?;
    Ok(())
}

/// Saturation about per-pixel gray, then contrast about the frame mean,
/// then a brightness offset; the result is clamped back into `[0, 1]`.
fn jitter_frame(frame: &mut ImageFrame, brightness: f64, contrast: f64, saturation: f64) {
    let (h, w) = (frame.height(), frame.width());
    let mean = frame.pixels.iter().sum::<f64>() / frame.pixels.len() as f64;
    for v in 0..h {
        for u in 0..w {
            let gray = (0..3).map(|c| frame.pixels[[c, v, u]]).sum::<f64>() / 3.0;
            for c in 0..3 {
                let x = frame.pixels[[c, v, u]];
                let x = gray + (x - gray) * saturation;
                let x = mean + (x - mean) * contrast;
                frame.pixels[[c, v, u]] = (x + brightness).clamp(0.0, 1.0);
            }
        }
    }
}
