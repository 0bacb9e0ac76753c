//! Inference to 8-bit PNG saliency maps, and saliency overlays.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use stdmmf_tensor::kernels::resize_plane;
use stdmmf_tensor::{Graph, Mode};

use crate::error::{Error, Result, Stage};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::dataset::{group_clips, make_batch, open_image, Sample};
use super::model::{ModelConfig, Stdmmf};

/// Rebuilds the configuration and model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, Stdmmf)> {
    let mut cfg = TrainConfig::default();
    for (k, v) in &ckpt.config {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let mut model = Stdmmf::new(ModelConfig::from_train(&cfg), cfg.seed)?;
    ckpt.apply(&mut model.store, None)?;
    Ok((cfg, model))
}

/// OUT maps (`S×S` each) for the given samples, evaluated without gradients and with
/// batch-norm running statistics.
pub fn predict(model: &mut Stdmmf, samples: &[Sample], indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let batch = make_batch(samples, indices)?;
    let shape = [batch.n, 3, batch.size, batch.size];
    let Stdmmf { store, net } = model;
    let mut g = Graph::new(store, Mode::EVAL);
    let frames = g.input(shape, batch.frames).stage("input")?;
    let flows = g.input(shape, batch.flows).stage("input")?;
    let fwd = net.forward(&mut g, frames, flows)?;
    let out = g.to_vec(fwd.out);
    let hw = batch.size * batch.size;
    Ok(out.chunks(hw).map(<[f64]>::to_vec).collect())
}

/// `round(v·255)` with halves rounded away from zero, clamped to `[0,255]`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize of an `S×S` map to `(h, w)` and quantization.
pub fn to_png(map: &[f64], size: usize, (h, w): (usize, usize)) -> GrayImage {
    let mut dst = vec![0.0; h * w];
    resize_plane(map, size, size, h, w, &mut dst);
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([quantize(dst[y as usize * w + x as usize])]))
}

/// Red alpha blend: `out = (1 − α)·frame + α·(255,0,0)` with `α = 0.6·saliency`.
pub fn overlay(frame: &RgbImage, sal: &GrayImage) -> Result<RgbImage> {
    if frame.dimensions() != sal.dimensions() {
        return Err(Error::Data(format!("overlay: frame {:?} vs saliency {:?}", frame.dimensions(), sal.dimensions())));
    }
    Ok(RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let a = 0.6 * sal.get_pixel(x, y)[0] as f64 / 255.0;
        let f = frame.get_pixel(x, y);
        let mix = |c: u8, t: f64| ((1.0 - a) * c as f64 + a * t).round().clamp(0.0, 255.0) as u8;
        Rgb([mix(f[0], 255.0), mix(f[1], 0.0), mix(f[2], 0.0)])
    }))
}

fn save_png(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    f(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    })
}

/// Writes `<out>/<video>/<stem>.png` for every sample, and `<out>/overlay/<video>/<stem>.png`
/// when `with_overlay` is set. Returns the written saliency paths.
pub fn infer(model: &mut Stdmmf, samples: &[Sample], clip_len: usize, out_dir: &Path, with_overlay: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(samples.len());
    for group in group_clips(samples, clip_len.max(1)) {
        let maps = predict(model, samples, &group)?;
        let size = ((maps[0].len()) as f64).sqrt() as usize;
        for (&i, map) in group.iter().zip(&maps) {
            let s = &samples[i];
            let png = to_png(map, size, s.original_size);
            let path = out_dir.join(&s.video_id).join(format!("{}.png", s.stem));
            save_png(&path, |p| png.save(p))?;
            if with_overlay {
                let frame = open_image(&s.frame_path)?.to_rgb8();
                let ov = overlay(&frame, &png)?;
                save_png(&out_dir.join("overlay").join(&s.video_id).join(format!("{}.png", s.stem)), |p| ov.save(p))?;
            }
            written.push(path);
        }
    }
    Ok(written)
}

/// Blends every `<pred>/<video>/<stem>.png` onto its frame, found at
/// `<frames>/<video>/frames/<stem>.png` or `<frames>/<video>/<stem>.png`.
pub fn export_overlay(pred_dir: &Path, frames_dir: &Path, out_dir: &Path) -> Result<usize> {
    let mut count = 0;
    for rel in super::evaluate::png_files(pred_dir)? {
        if rel.components().next().is_some_and(|c| c.as_os_str() == "overlay") {
            continue;
        }
        let (Some(video), Some(name)) = (rel.parent(), rel.file_name()) else { continue };
        let candidates = [frames_dir.join(video).join("frames").join(name), frames_dir.join(&rel)];
        let Some(frame_path) = candidates.iter().find(|p| p.is_file()) else {
            log::warn!("{}: no matching frame", rel.display());
            continue;
        };
        let frame = open_image(frame_path)?.to_rgb8();
        let mut sal = open_image(&pred_dir.join(&rel))?.to_luma8();
        if sal.dimensions() != frame.dimensions() {
            let (w, h) = sal.dimensions();
            let src: Vec<f64> = sal.pixels().map(|p| p[0] as f64 / 255.0).collect();
            let mut dst = vec![0.0; (frame.width() * frame.height()) as usize];
            resize_plane(&src, h as usize, w as usize, frame.height() as usize, frame.width() as usize, &mut dst);
            sal = GrayImage::from_fn(frame.width(), frame.height(), |x, y| Luma([quantize(dst[(y * frame.width() + x) as usize])]));
        }
        let ov = overlay(&frame, &sal)?;
        save_png(&out_dir.join(&rel), |p| ov.save(p))?;
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_of_half_rounds_away_from_zero() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(to_png(&[0.5; 4], 2, (3, 5)).pixels().map(|p| p[0]).collect::<Vec<_>>(), vec![128; 15]);
    }

    #[test]
    fn overlay_of_zero_saliency_is_the_frame() {
        let f = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 50, 7]));
        assert_eq!(overlay(&f, &GrayImage::new(3, 2)).unwrap(), f);
    }
}
