//! Directory-level evaluation of saliency maps against ground-truth masks.
//!
//! Files are paired by relative path with any `gt` path component removed, so
//! `<pred>/<video>/00001.png` matches `<gt>/<video>/gt/00001.png`. When a tree contains `gt`
//! directories only the files inside them are considered; an `overlay` directory at the top
//! of the prediction tree is ignored.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use stdmmf_tensor::kernels::resize_plane;

use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_frame, Aggregate, FrameScores, MeanFMode};

use super::dataset::open_image;

/// Relative paths of all `.png` files below `root`, sorted.
pub fn png_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

fn has_gt(rel: &Path) -> bool {
    rel.components().any(|c| c.as_os_str() == "gt")
}

/// Pairing key: the relative path without `gt` components.
pub fn pair_key(rel: &Path) -> String {
    let parts: Vec<String> =
        rel.components().filter(|c| c.as_os_str() != "gt").filter_map(|c| if let Component::Normal(s) = c { Some(s.to_string_lossy().into_owned()) } else { None }).collect();
    parts.join("/")
}

fn index(root: &Path, is_pred: bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = png_files(root)?;
    if is_pred {
        files.retain(|r| r.components().next().is_none_or(|c| c.as_os_str() != "overlay"));
    }
    if files.iter().any(|r| has_gt(r)) {
        files.retain(|r| has_gt(r));
    }
    Ok(files.into_iter().map(|r| (pair_key(&r), root.join(r))).collect())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub aggregate: Aggregate,
    /// Keys present on only one side.
    pub unmatched_pred: Vec<String>,
    pub unmatched_gt: Vec<String>,
}

impl Evaluation {
    pub fn complete(&self) -> bool {
        self.unmatched_pred.is_empty() && self.unmatched_gt.is_empty()
    }
}

/// Loads one pair: prediction scaled to `[0,1]` and resized bilinearly to the mask size,
/// mask binarised at 128.
pub fn load_pair(pred: &Path, gt: &Path) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let g = open_image(gt)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let gv: Vec<f64> = g.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    let p = open_image(pred)?.to_luma8();
    let (pw, ph) = (p.width() as usize, p.height() as usize);
    let pv: Vec<f64> = p.pixels().map(|q| q[0] as f64 / 255.0).collect();
    let pv = if (pw, ph) == (w, h) {
        pv
    } else {
        let mut dst = vec![0.0; w * h];
        resize_plane(&pv, ph, pw, h, w, &mut dst);
        dst
    };
    Ok((pv, gv, h, w))
}

/// Scores every matched pair in parallel and aggregates them in key order.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, mean_f: MeanFMode) -> Result<Evaluation> {
    let preds = index(pred_dir, true)?;
    let gts = index(gt_dir, false)?;
    let unmatched_pred: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    let unmatched_gt: Vec<String> = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    for k in unmatched_pred.iter().chain(&unmatched_gt) {
        log::warn!("unmatched file {k}");
    }
    let pairs: Vec<(&PathBuf, &PathBuf)> = preds.iter().filter_map(|(k, p)| gts.get(k).map(|g| (p, g))).collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("no matching prediction/mask pairs between {} and {}", pred_dir.display(), gt_dir.display())));
    }
    let scores: Vec<FrameScores> = pairs
        .par_iter()
        .map(|(p, g)| {
            let (pv, gv, h, w) = load_pair(p, g)?;
            score_frame(&pv, &gv, h, w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { aggregate: aggregate(&scores, mean_f)?, unmatched_pred, unmatched_gt })
}
