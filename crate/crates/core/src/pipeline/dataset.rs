//! On-disk dataset layout and preprocessing.
//!
//! ```text
//! <root>[/<split>]/<video>/frames/NNNNN.png
//! <root>[/<split>]/<video>/flow/NNNNN.png
//! <root>[/<split>]/<video>/gt/NNNNN.png      (optional)
//! ```
//!
//! When `<root>/<split>` exists it is used, otherwise `<root>` itself holds the videos, so
//! train/val/test separation is always by whole video directories.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GenericImageView};
use stdmmf_tensor::kernels::resize_plane;

use crate::error::{Error, Result};

/// Per-channel mean and standard deviation applied after scaling pixels to `[0,1]`.
pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video_id: String,
    pub frame_index: usize,
    /// File stem shared by the frame, flow and mask files.
    pub stem: String,
    /// Standardized `[3,S,S]`.
    pub frame: Vec<f64>,
    /// Standardized `[3,S,S]`.
    pub flow: Vec<f64>,
    /// `[S,S]` in {0,1}.
    pub gt: Option<Vec<f64>>,
    /// `(height, width)` of the frame on disk.
    pub original_size: (usize, usize),
    pub frame_path: PathBuf,
}

/// Scales 8-bit RGB to `[0,1]`, resizes bilinearly to `size×size` and standardizes.
pub fn preprocess_rgb(img: &DynamicImage, size: usize) -> Vec<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = vec![0.0; 3 * size * size];
    let mut plane = vec![0.0; h * w];
    for c in 0..3 {
        for (i, p) in rgb.pixels().enumerate() {
            plane[i] = p[c] as f64 / 255.0;
        }
        let dst = &mut out[c * size * size..(c + 1) * size * size];
        resize_plane(&plane, h, w, size, size, dst);
        for v in dst.iter_mut() {
            *v = (*v - NORM_MEAN[c]) / NORM_STD[c];
        }
    }
    out
}

/// Inverse of the standardization in [`preprocess_rgb`] for one pixel value of channel `c`.
pub fn destandardize(v: f64, c: usize) -> f64 {
    v * NORM_STD[c] + NORM_MEAN[c]
}

/// Standardizes `[0,1]` RGB planes in place.
pub fn standardize(planes: &mut [f64], size: usize) {
    for (c, plane) in planes.chunks_mut(size * size).enumerate() {
        for v in plane {
            *v = (*v - NORM_MEAN[c]) / NORM_STD[c];
        }
    }
}

/// Nearest-neighbour resize of a mask to `size×size`, binarised at 128 (255 → 1, 0 → 0).
pub fn preprocess_mask(img: &DynamicImage, size: usize) -> Vec<f64> {
    let l = img.to_luma8();
    let (w, h) = (l.width() as usize, l.height() as usize);
    let src = |o: usize, n: usize| (((o as f64 + 0.5) * n as f64 / size as f64).floor() as usize).min(n - 1);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let sy = src(y, h);
        for x in 0..size {
            out[y * size + x] = if l.get_pixel(src(x, w) as u32, sy as u32)[0] >= 128 { 1.0 } else { 0.0 };
        }
    }
    out
}

pub fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect())
}

/// Resolves the directory holding the videos of `split`.
pub fn split_root(root: &Path, split: Split) -> PathBuf {
    let sub = root.join(split.dir_name());
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Loads every video under the split root. Frames without a flow image are skipped with a
/// warning; masks are required unless `split` is [`Split::Test`].
pub fn load_dataset(root: &Path, split: Split, input_size: usize) -> Result<Vec<Sample>> {
    if input_size == 0 {
        return Err(Error::config("input_size", "must be positive"));
    }
    let base = split_root(root, split);
    if !base.is_dir() {
        return Err(Error::io(&base, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory does not exist")));
    }
    let mut samples = Vec::new();
    for video_dir in read_dir_sorted(&base)?.into_iter().filter(|p| p.is_dir()) {
        let frames_dir = video_dir.join("frames");
        if !frames_dir.is_dir() {
            continue;
        }
        let video_id = video_dir.file_name().unwrap().to_string_lossy().into_owned();
        let flow_dir = video_dir.join("flow");
        let gt_dir = video_dir.join("gt");
        for (frame_index, stem) in png_stems(&frames_dir)?.into_iter().enumerate() {
            let flow_path = flow_dir.join(format!("{stem}.png"));
            if !flow_path.is_file() {
                log::warn!("{video_id}/{stem}: no flow image, frame skipped");
                continue;
            }
            let frame_path = frames_dir.join(format!("{stem}.png"));
            let frame_img = open_image(&frame_path)?;
            let (w, h) = frame_img.dimensions();
            let flow_img = open_image(&flow_path)?;
            if flow_img.dimensions() != (w, h) {
                return Err(Error::Data(format!("{video_id}/{stem}: flow is {:?}, frame is {:?}", flow_img.dimensions(), (w, h))));
            }
            let gt_path = gt_dir.join(format!("{stem}.png"));
            let gt = if gt_path.is_file() {
                let m = open_image(&gt_path)?;
                if m.dimensions() != (w, h) {
                    return Err(Error::Data(format!("{video_id}/{stem}: mask is {:?}, frame is {:?}", m.dimensions(), (w, h))));
                }
                Some(preprocess_mask(&m, input_size))
            } else if split == Split::Test {
                None
            } else {
                return Err(Error::Data(format!("{video_id}/{stem}: missing mask {}", gt_path.display())));
            };
            samples.push(Sample {
                video_id: video_id.clone(),
                frame_index,
                stem,
                frame: preprocess_rgb(&frame_img, input_size),
                flow: preprocess_rgb(&flow_img, input_size),
                gt,
                original_size: (h as usize, w as usize),
                frame_path,
            });
        }
    }
    if samples.is_empty() {
        log::warn!("no samples found under {}", base.display());
    }
    Ok(samples)
}

/// Splits samples into runs of at most `clip_len` consecutive frames of one video.
pub fn group_clips(samples: &[Sample], clip_len: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let mut end = start + 1;
        while end < samples.len() && end - start < clip_len && samples[end].video_id == samples[start].video_id {
            end += 1;
        }
        groups.push((start..end).collect());
        start = end;
    }
    groups
}

/// Batched network inputs for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n: usize,
    pub size: usize,
    pub frames: Vec<f64>,
    pub flows: Vec<f64>,
    pub gt: Option<Vec<f64>>,
}

pub fn make_batch(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
    let first = samples.get(*indices.first().ok_or_else(|| Error::Data("empty batch".into()))?).ok_or_else(|| Error::Data("batch index out of range".into()))?;
    let size = ((first.frame.len() / 3) as f64).sqrt() as usize;
    let mut b = Batch { n: indices.len(), size, frames: Vec::new(), flows: Vec::new(), gt: Some(Vec::new()) };
    for &i in indices {
        let s = &samples[i];
        if s.frame.len() != 3 * size * size || s.flow.len() != 3 * size * size {
            return Err(Error::Data(format!("{}/{}: sample size differs from the rest of the batch", s.video_id, s.stem)));
        }
        b.frames.extend_from_slice(&s.frame);
        b.flows.extend_from_slice(&s.flow);
        match (&mut b.gt, &s.gt) {
            (Some(acc), Some(g)) => acc.extend_from_slice(g),
            _ => b.gt = None,
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    #[test]
    fn mask_mapping() {
        let mut m = GrayImage::new(4, 4);
        m.put_pixel(1, 1, Luma([255]));
        let v = preprocess_mask(&DynamicImage::ImageLuma8(m), 4);
        assert_eq!(v[5], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn nearest_upsampling_of_mask() {
        let mut m = GrayImage::new(2, 2);
        m.put_pixel(1, 0, Luma([255]));
        let v = preprocess_mask(&DynamicImage::ImageLuma8(m), 4);
        assert_eq!(&v[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(v[8..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grouping_respects_video_boundaries() {
        let mk = |v: &str, i: usize| Sample {
            video_id: v.into(),
            frame_index: i,
            stem: format!("{i:05}"),
            frame: vec![],
            flow: vec![],
            gt: None,
            original_size: (1, 1),
            frame_path: PathBuf::new(),
        };
        let s: Vec<Sample> = (0..5).map(|i| mk("a", i)).chain((0..3).map(|i| mk("b", i))).collect();
        assert_eq!(group_clips(&s, 4), vec![vec![0, 1, 2, 3], vec![4], vec![5, 6, 7]]);
        assert_eq!(group_clips(&s, 1).len(), 8);
    }
}
