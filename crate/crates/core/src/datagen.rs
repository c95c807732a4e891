//! Synthetic moving-shape clips, VSPW-layout directory loading/export, and
//! paired crop/flip augmentation.
//!
//! Frames are planar `[3, H, W]` arrays in `[0, 1]`; labels are `[H, W]`
//! class-id maps where [`IGNORE_INDEX`] marks unlabeled pixels.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IGNORE_INDEX: u8 = 255;

pub type Frame = Array3<f32>;
pub type LabelMap = Array2<u8>;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub labels: Vec<LabelMap>,
    pub fps: f32,
}

impl FrameClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim().1)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim().2)
    }

    /// Check the clip invariants against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.frames.is_empty() || self.frames.len() != self.labels.len() {
            return Err(Error::data(format!(
                "clip `{}`: {} frames vs {} labels",
                self.clip_id,
                self.frames.len(),
                self.labels.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        for (i, (f, l)) in self.frames.iter().zip(&self.labels).enumerate() {
            if f.dim() != (3, h, w) || l.dim() != (h, w) {
                return Err(Error::data(format!(
                    "clip `{}` frame {i}: shape {:?}/{:?}, expected [3,{h},{w}]",
                    self.clip_id,
                    f.dim(),
                    l.dim()
                )));
            }
            if let Some(&bad) = l
                .iter()
                .find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes)
            {
                return Err(Error::data(format!(
                    "clip `{}` frame {i}: label {bad} outside 0..{num_classes}",
                    self.clip_id
                )));
            }
        }
        Ok(())
    }
}

/// Stack frames into a `[B, 3, H, W]` f64 tensor.
pub fn frames_to_tensor(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("no frames to stack"))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.dim() != (c, h, w) {
            return Err(Error::contract("frames to stack differ in shape"));
        }
        data.extend(f.iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(data, (frames.len(), c, h, w), &crate::nn::device())?)
}

fn default_noise_sigma() -> f64 {
    0.02
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Pixels per frame.
    pub motion_speed: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_clips: 8,
            frames_per_clip: 12,
            height: 64,
            width: 64,
            num_classes: 4,
            seed: 0,
            motion_speed: 1.0,
            noise_sigma: default_noise_sigma(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.frames_per_clip < 10 {
            return Err(Error::config(format!(
                "frames_per_clip must be at least 10, got {}",
                self.frames_per_clip
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::config(format!(
                "frames must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.motion_speed.is_finite() && self.motion_speed >= 0.0) {
            return Err(Error::config("motion_speed must be finite and non-negative"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Constant RGB colour of a class. Background is dark grey; foreground
/// classes are spread over the hue circle.
pub fn class_color(class: usize, num_classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.1, 0.1, 0.1];
    }
    let hue = (class - 1) as f32 / (num_classes - 1).max(1) as f32 * 6.0;
    let (s, v) = (0.85f32, 0.9f32);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rect { half_h: f64, half_w: f64 },
    Circle { radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct MovingShape {
    class: u8,
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
}

/// Signed toroidal offset in `[-size/2, size/2)`.
fn wrap(d: f64, size: f64) -> f64 {
    (d + size / 2.0).rem_euclid(size) - size / 2.0
}

impl MovingShape {
    fn covers(&self, y: f64, x: f64, t: usize, h: f64, w: f64) -> bool {
        let cy = self.cy + self.vy * t as f64;
        let cx = self.cx + self.vx * t as f64;
        let dy = wrap(y - cy, h);
        let dx = wrap(x - cx, w);
        match self.kind {
            ShapeKind::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            ShapeKind::Circle { radius } => dy * dy + dx * dx <= radius * radius,
        }
    }
}

/// Render clip `clip_index` of `spec`; a pure function of both arguments.
pub fn generate_clip(spec: &DatasetSpec, clip_index: usize) -> Result<FrameClip> {
    spec.validate()?;
    if clip_index >= spec.num_clips {
        return Err(Error::config(format!(
            "clip index {clip_index} out of range for {} clips",
            spec.num_clips
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(clip_index as u64 + 1);
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let min_side = hf.min(wf);

    let shapes: Vec<MovingShape> = (1..spec.num_classes)
        .map(|class| {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect {
                    half_h: rng.random_range(min_side / 8.0..min_side / 4.0),
                    half_w: rng.random_range(min_side / 8.0..min_side / 4.0),
                }
            } else {
                ShapeKind::Circle {
                    radius: rng.random_range(min_side / 8.0..min_side / 4.0),
                }
            };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            MovingShape {
                class: class as u8,
                kind,
                cy: rng.random_range(0.0..hf),
                cx: rng.random_range(0.0..wf),
                vy: spec.motion_speed * angle.sin(),
                vx: spec.motion_speed * angle.cos(),
            }
        })
        .collect();

    let palette: Vec<[f32; 3]> = (0..spec.num_classes)
        .map(|c| class_color(c, spec.num_classes))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::config(format!("noise sigma: {e}")))?;

    let mut frames = Vec::with_capacity(spec.frames_per_clip);
    let mut labels = Vec::with_capacity(spec.frames_per_clip);
    for t in 0..spec.frames_per_clip {
        let mut label = LabelMap::zeros((h, w));
        for ((i, j), v) in label.indexed_iter_mut() {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            // later classes are painted on top
            for shape in &shapes {
                if shape.covers(y, x, t, hf, wf) {
                    *v = shape.class;
                }
            }
        }
        let mut frame = Frame::zeros((3, h, w));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let base = palette[label[[i, j]] as usize][c];
                    let n: f64 = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    frame[[c, i, j]] = (base + n as f32).clamp(0.0, 1.0);
                }
            }
        }
        frames.push(frame);
        labels.push(label);
    }
    Ok(FrameClip {
        clip_id: format!("synth_{:04}", clip_index),
        frames,
        labels,
        fps: 15.0,
    })
}

/// All clips of a synthetic dataset, in clip-index order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<FrameClip>> {
    (0..spec.num_clips).map(|i| generate_clip(spec, i)).collect()
}

/// A clip on disk; frames are read on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipDescriptor {
    pub clip_id: String,
    pub frame_paths: Vec<PathBuf>,
    /// `None` where a frame has no mask: it loads as all-ignore.
    pub mask_paths: Vec<Option<PathBuf>>,
}

impl ClipDescriptor {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }

    /// A single clip directory: frames in `origin/` (or the directory itself)
    /// and optional masks in `mask/`, matched by file stem.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "clip directory not found"),
            ));
        }
        let origin = dir.join("origin");
        let frames_dir = if origin.is_dir() { origin } else { dir.to_path_buf() };
        let frame_paths = list_images(&frames_dir)?;
        if frame_paths.is_empty() {
            return Err(Error::data(format!("no frames found in {}", frames_dir.display())));
        }
        let masks = list_images(&dir.join("mask"))?;
        let mask_paths = frame_paths
            .iter()
            .map(|f| masks.iter().find(|m| m.file_stem() == f.file_stem()).cloned())
            .collect();
        let clip_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        Ok(Self {
            clip_id,
            frame_paths,
            mask_paths,
        })
    }

    pub fn load_frame(&self, index: usize) -> Result<(Frame, LabelMap)> {
        let path = self
            .frame_paths
            .get(index)
            .ok_or_else(|| Error::data(format!("clip `{}` has no frame {index}", self.clip_id)))?;
        let frame = read_rgb(path)?;
        let (_, h, w) = frame.dim();
        let label = match &self.mask_paths[index] {
            Some(mask_path) => {
                let m = read_mask(mask_path)?;
                if m.dim() != (h, w) {
                    return Err(Error::data(format!(
                        "mask {} is {}x{} but frame {} is {h}x{w}",
                        mask_path.display(),
                        m.dim().0,
                        m.dim().1,
                        path.display()
                    )));
                }
                m
            }
            None => LabelMap::from_elem((h, w), IGNORE_INDEX),
        };
        Ok((frame, label))
    }

    pub fn load(&self, num_classes: usize) -> Result<FrameClip> {
        let mut frames = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let (f, l) = self.load_frame(i)?;
            frames.push(f);
            labels.push(l);
        }
        let clip = FrameClip {
            clip_id: self.clip_id.clone(),
            frames,
            labels,
            fps: 15.0,
        };
        clip.validate(num_classes)?;
        Ok(clip)
    }
}

fn read_rgb(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Frame::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            frame[[c, y as usize, x as usize]] = p[c] as f32 / 255.0;
        }
    }
    Ok(frame)
}

/// Read an 8-bit grayscale or palette PNG without palette expansion, so pixel
/// values are raw class ids.
fn read_mask(path: &Path) -> Result<LabelMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(format!("cannot decode mask {}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(format!("mask {} too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(format!("cannot decode mask {}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(
            info.color_type,
            png::ColorType::Grayscale | png::ColorType::Indexed
        )
    {
        return Err(Error::data(format!(
            "mask {} must be single-channel 8-bit, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = LabelMap::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w];
        for (x, &v) in row.iter().enumerate() {
            out[[y, x]] = v;
        }
    }
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Index a VSPW-layout tree: `<root>/<split>.txt` lists video ids, frames in
/// `<root>/<id>/origin/`, masks in `<root>/<id>/mask/` matched by file stem.
pub fn load_vspw_dir(root: &Path, split: &str) -> Result<Vec<ClipDescriptor>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let split_path = root.join(format!("{split}.txt"));
    let listing = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let mut ids: Vec<&str> = listing
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    ids.sort_unstable();
    ids.dedup();

    let mut clips = Vec::with_capacity(ids.len());
    for id in ids {
        let video = root.join(id);
        if !video.is_dir() {
            return Err(Error::io(
                &video,
                std::io::Error::new(std::io::ErrorKind::NotFound, "video directory not found"),
            ));
        }
        let frame_paths = list_images(&video.join("origin"))?;
        let masks = list_images(&video.join("mask"))?;
        let mask_paths = frame_paths
            .iter()
            .map(|f| {
                let stem = f.file_stem();
                masks.iter().find(|m| m.file_stem() == stem).cloned()
            })
            .collect();
        clips.push(ClipDescriptor {
            clip_id: id.to_string(),
            frame_paths,
            mask_paths,
        });
    }
    Ok(clips)
}

/// Write clips in the VSPW layout and list their ids in `<split>.txt`.
pub fn export_vspw(clips: &[FrameClip], root: &Path, split: &str) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for clip in clips {
        let origin = root.join(&clip.clip_id).join("origin");
        let mask = root.join(&clip.clip_id).join("mask");
        fs::create_dir_all(&origin).map_err(|e| Error::io(&origin, e))?;
        fs::create_dir_all(&mask).map_err(|e| Error::io(&mask, e))?;
        for (t, (frame, label)) in clip.frames.iter().zip(&clip.labels).enumerate() {
            let name = format!("{t:05}.png");
            let (_, h, w) = frame.dim();
            let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |c: usize| {
                    (frame[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            });
            let p = origin.join(&name);
            rgb.save(&p)
                .map_err(|e| Error::data(format!("cannot write {}: {e}", p.display())))?;
            write_mask(&mask.join(&name), label)?;
        }
    }
    let split_path = root.join(format!("{split}.txt"));
    let mut listing = String::new();
    for clip in clips {
        listing.push_str(&clip.clip_id);
        listing.push('\n');
    }
    fs::write(&split_path, listing).map_err(|e| Error::io(&split_path, e))?;
    Ok(())
}

pub fn write_mask(path: &Path, label: &LabelMap) -> Result<()> {
    let (h, w) = label.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([label[[y as usize, x as usize]]])
    });
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// A sampled spatial transform, reusable across the frames of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropParams {
    pub crop_h: usize,
    pub crop_w: usize,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl CropParams {
    pub fn sample<R: Rng + ?Sized>(
        h: usize,
        w: usize,
        crop_h: usize,
        crop_w: usize,
        rng: &mut R,
    ) -> Self {
        let (ph, pw) = (h.max(crop_h), w.max(crop_w));
        let top = rng.random_range(0..=ph - crop_h);
        let left = rng.random_range(0..=pw - crop_w);
        let flip = rng.random_bool(0.5);
        Self {
            crop_h,
            crop_w,
            top,
            left,
            flip,
        }
    }

    /// Source pixel `(row, col)` of output pixel `(i, j)` in padded
    /// coordinates; positions past the original extent are padding.
    pub fn source(&self, i: usize, j: usize) -> (usize, usize) {
        let jj = if self.flip { self.crop_w - 1 - j } else { j };
        (self.top + i, self.left + jj)
    }

    pub fn apply_frame(&self, frame: &Frame) -> Frame {
        let (c, h, w) = frame.dim();
        let mut out = Frame::zeros((c, self.crop_h, self.crop_w));
        for i in 0..self.crop_h {
            for j in 0..self.crop_w {
                let (si, sj) = self.source(i, j);
                if si < h && sj < w {
                    for ch in 0..c {
                        out[[ch, i, j]] = frame[[ch, si, sj]];
                    }
                }
            }
        }
        out
    }

    pub fn apply_label(&self, label: &LabelMap) -> LabelMap {
        let (h, w) = label.dim();
        LabelMap::from_shape_fn((self.crop_h, self.crop_w), |(i, j)| {
            let (si, sj) = self.source(i, j);
            if si < h && sj < w {
                label[[si, sj]]
            } else {
                IGNORE_INDEX
            }
        })
    }
}

/// Random crop (with zero / ignore padding when the image is smaller than the
/// crop) and horizontal flip with probability 0.5, applied identically to the
/// frame and its label.
pub fn crop_and_flip<R: Rng + ?Sized>(
    frame: &Frame,
    label: &LabelMap,
    crop_h: usize,
    crop_w: usize,
    rng: &mut R,
) -> (Frame, LabelMap) {
    let (_, h, w) = frame.dim();
    let params = CropParams::sample(h, w, crop_h, crop_w, rng);
    (params.apply_frame(frame), params.apply_label(label))
}

/// Add clamped Gaussian noise to every frame, leaving labels untouched.
pub fn add_frame_noise(clip: &FrameClip, sigma: f64, seed: u64) -> FrameClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = clip.clone();
    for f in &mut out.frames {
        f.mapv_inplace(|v| (v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0));
    }
    out
}

/// Per-class pixel counts of a label map (ignore excluded).
pub fn label_histogram(label: &LabelMap, num_classes: usize) -> Vec<usize> {
    let mut hist = vec![0; num_classes];
    for &v in label.iter() {
        if (v as usize) < num_classes {
            hist[v as usize] += 1;
        }
    }
    hist
}

/// Mean absolute per-pixel difference between two frames.
pub fn mean_abs_diff(a: &Frame, b: &Frame) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / n
}

/// Crop a prediction-size window out of a larger padded map.
pub fn crop_label(label: &LabelMap, h: usize, w: usize) -> LabelMap {
    label.slice(s![..h, ..w]).to_owned()
}
