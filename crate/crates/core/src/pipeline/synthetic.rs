//! Synthetic moving-disk videos: a bright disk on a dark background, and a flow image that
//! paints the disk at its displaced position in a fixed flow colour.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::dataset::{standardize, Sample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disk {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// One rendered frame as 8-bit images.
pub struct RenderedFrame {
    pub frame: RgbImage,
    pub flow: RgbImage,
    pub gt: GrayImage,
}

const BG: [u8; 3] = [30, 30, 40];
const FG: [u8; 3] = [230, 220, 200];
const FLOW_BG: [u8; 3] = [255, 255, 255];
const FLOW_FG: [u8; 3] = [220, 60, 160];

pub fn render(size: usize, disk: Disk, displacement: (f64, f64), noise: &mut impl Rng) -> RenderedFrame {
    let s = size as u32;
    let moved = Disk { cx: disk.cx + displacement.0, cy: disk.cy + displacement.1, r: disk.r };
    let mut frame = RgbImage::new(s, s);
    let mut flow = RgbImage::new(s, s);
    let mut gt = GrayImage::new(s, s);
    for y in 0..size {
        for x in 0..size {
            let inside = disk.contains(x, y);
            let base = if inside { FG } else { BG };
            let jitter: i16 = noise.random_range(-8..=8);
            let px = base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8);
            frame.put_pixel(x as u32, y as u32, Rgb(px));
            flow.put_pixel(x as u32, y as u32, Rgb(if moved.contains(x, y) { FLOW_FG } else { FLOW_BG }));
            gt.put_pixel(x as u32, y as u32, Luma([if inside { 255 } else { 0 }]));
        }
    }
    RenderedFrame { frame, flow, gt }
}

fn rgb_planes(img: &RgbImage) -> Vec<f64> {
    let n = (img.width() * img.height()) as usize;
    let mut out = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = p[c] as f64 / 255.0;
        }
    }
    out
}

/// Disk trajectory of one video: a random start and a constant per-frame velocity.
fn trajectory(rng: &mut ChaCha8Rng, size: usize, frames: usize) -> (Vec<Disk>, (f64, f64)) {
    let s = size as f64;
    let r = rng.random_range(0.15..0.25) * s;
    let v = (rng.random_range(-0.06..0.06) * s, rng.random_range(-0.06..0.06) * s);
    let margin = r + 1.0;
    let cx0 = rng.random_range(margin..s - margin);
    let cy0 = rng.random_range(margin..s - margin);
    let disks = (0..frames)
        .map(|k| Disk { cx: (cx0 + v.0 * k as f64).clamp(margin, s - margin), cy: (cy0 + v.1 * k as f64).clamp(margin, s - margin), r })
        .collect();
    (disks, v)
}

/// In-memory samples of `videos` videos with `frames` frames each, already at `size×size`.
pub fn disk_samples(videos: usize, frames: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(videos * frames);
    for v in 0..videos {
        let (disks, vel) = trajectory(&mut rng, size, frames);
        for (k, disk) in disks.into_iter().enumerate() {
            let r = render(size, disk, vel, &mut rng);
            let mut frame = rgb_planes(&r.frame);
            let mut flow = rgb_planes(&r.flow);
            standardize(&mut frame, size);
            standardize(&mut flow, size);
            out.push(Sample {
                video_id: format!("video{v:02}"),
                frame_index: k,
                stem: format!("{k:05}"),
                frame,
                flow,
                gt: Some(r.gt.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect()),
                original_size: (size, size),
                frame_path: PathBuf::new(),
            });
        }
    }
    out
}

/// Writes the dataset layout under `root`. Frame 0 of each video gets no flow image.
pub fn write_disk_dataset(root: &Path, videos: usize, frames: usize, size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in 0..videos {
        let vid = root.join(format!("video{v:02}"));
        for sub in ["frames", "flow", "gt"] {
            let d = vid.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let (disks, vel) = trajectory(&mut rng, size, frames);
        for (k, disk) in disks.into_iter().enumerate() {
            let r = render(size, disk, vel, &mut rng);
            let name = format!("{k:05}.png");
            let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, p: PathBuf| img(&p).map_err(|e| Error::Image { path: p.clone(), message: e.to_string() });
            save(&|p| r.frame.save(p), vid.join("frames").join(&name))?;
            save(&|p| r.gt.save(p), vid.join("gt").join(&name))?;
            if k > 0 {
                save(&|p| r.flow.save(p), vid.join("flow").join(&name))?;
            }
        }
    }
    Ok(())
}
