//! On-disk corpus: `<root>/<split>/<id>/{gt,incomplete,guidance,mask}.png`
//! plus `transform.txt`, and one `manifest.jsonl` per split.

use std::fs;
use std::path::{Path, PathBuf};

use guided_inpaint_core::datagen::{example_rng, make_example, DatagenConfig};
use guided_inpaint_core::domain::{make_incomplete, normalize};
use guided_inpaint_core::{AffineTransform, BoxRegion, ImageTensor, TrainingExample};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::hash_json;
use crate::error::{data, io_at, CliResult};
use crate::io::{self, ensure_dir, rgb_to_unit, square_crop, write_atomic};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub original: String,
    pub target: String,
    pub seed: u64,
    pub index: u64,
    pub hole_box: BoxRegion,
    pub patch_box: BoxRegion,
    pub patch_box_in_guidance: BoxRegion,
    pub transform: [f64; 6],
    pub config_hash: String,
}

/// Regular files of `dir` in name order.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data(format!("{}: directory is empty", dir.display())));
    }
    Ok(files)
}

/// Every readable image of `files`, square-cropped to `side`; unreadable
/// files are skipped with a warning. Entries keep their listing position.
fn load_squares(files: &[PathBuf], side: u32) -> Vec<(usize, &Path, ImageTensor)> {
    let mut out = Vec::new();
    for (i, f) in files.iter().enumerate() {
        match io::load_rgb(f).and_then(|img| rgb_to_unit(&square_crop(&img, side))) {
            Ok(u) => out.push((i, f.as_path(), normalize(&u))),
            Err(e) => log::warn!("skipping unreadable image {}: {e}", f.display()),
        }
    }
    out
}

pub fn example_dir(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(id)
}

/// Generates `pairs` examples per readable image of `image_dir`, each with a
/// target drawn from `target_dir`. Example `i * pairs + j` (image `i` in
/// name order, pair `j`) is a pure function of `(config.seed, index)`.
pub fn build_corpus(
    image_dir: &Path,
    target_dir: &Path,
    out: &Path,
    split: &str,
    pairs: usize,
    config: &DatagenConfig,
) -> CliResult<Vec<ManifestRecord>> {
    config.validate()?;
    if pairs == 0 {
        return Err(crate::error::usage("--pairs must be >= 1"));
    }
    let side = config.resolution as u32;
    let image_files = list_images(image_dir)?;
    let target_files = list_images(target_dir)?;
    let originals = load_squares(&image_files, side);
    let targets = load_squares(&target_files, side);
    if originals.is_empty() {
        return Err(data(format!("{}: no readable images", image_dir.display())));
    }
    if targets.is_empty() {
        return Err(data(format!("{}: no readable images", target_dir.display())));
    }
    let hash = hash_json(config);
    let split_dir = out.join(split);
    ensure_dir(&split_dir)?;
    let mut records = Vec::with_capacity(originals.len() * pairs);
    for (i, orig_path, orig) in &originals {
        for j in 0..pairs {
            let index = (*i * pairs + j) as u64;
            let mut rng = example_rng(config.seed, index);
            // The target is drawn first; an image is never its own target
            // unless it is the only candidate.
            let mut t = rng.random_range(0..targets.len());
            if targets.len() > 1 && same_file(targets[t].1, orig_path) {
                t = (t + 1 + rng.random_range(0..targets.len() - 1)) % targets.len();
            }
            let (_, target_path, target) = &targets[t];
            let (ex, _) = make_example(orig, target, &mut rng, config)?;
            let id = format!("{index:06}");
            write_example(&example_dir(out, split, &id), &ex)?;
            records.push(ManifestRecord {
                id,
                split: split.to_string(),
                original: orig_path.display().to_string(),
                target: target_path.display().to_string(),
                seed: config.seed,
                index,
                hole_box: ex.hole.bbox(),
                patch_box: ex.patch_box,
                patch_box_in_guidance: ex.patch_box_in_guidance,
                transform: ex.gt_transform.theta,
                config_hash: hash.clone(),
            });
        }
    }
    write_manifest(&split_dir.join(MANIFEST), &records)?;
    Ok(records)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

pub fn write_example(dir: &Path, ex: &TrainingExample) -> CliResult<()> {
    ensure_dir(dir)?;
    io::save_network_image(&dir.join("gt.png"), &ex.ground_truth)?;
    io::save_network_image(&dir.join("incomplete.png"), &ex.incomplete)?;
    io::save_network_image(&dir.join("guidance.png"), &ex.guidance)?;
    io::save_mask(&dir.join("mask.png"), &ex.hole)?;
    io::write_transform(&dir.join("transform.txt"), &ex.gt_transform)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> CliResult<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| data(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

fn load_rgb_tensor(path: &Path) -> CliResult<(RgbImage, ImageTensor)> {
    let img = io::load_rgb(path)?;
    let t = normalize(&rgb_to_unit(&img)?);
    Ok((img, t))
}

/// Loads one example directory. The incomplete image is rebuilt from the
/// ground truth and the mask, so its hole holds exact mid-gray rather than
/// the 8-bit rounding of it.
pub fn load_example(dir: &Path, record: &ManifestRecord) -> CliResult<TrainingExample> {
    let (_, gt) = load_rgb_tensor(&dir.join("gt.png"))?;
    let (_, guidance) = load_rgb_tensor(&dir.join("guidance.png"))?;
    let hole = io::load_mask(&dir.join("mask.png"))?;
    let gt_transform: AffineTransform = io::read_transform(&dir.join("transform.txt"))?;
    if hole.height() != gt.height() || hole.width() != gt.width() {
        return Err(data(format!("{}: mask size differs from gt.png", dir.display())));
    }
    Ok(TrainingExample {
        incomplete: make_incomplete(&gt, &hole),
        ground_truth: gt,
        guidance,
        hole,
        gt_transform,
        patch_box: record.patch_box,
        patch_box_in_guidance: record.patch_box_in_guidance,
    })
}

/// All examples of `split`, in manifest order, keyed by id.
pub fn load_split(root: &Path, split: &str) -> CliResult<Vec<(String, TrainingExample)>> {
    let manifest = root.join(split).join(MANIFEST);
    if !manifest.is_file() {
        return Err(data(format!("{}: no {MANIFEST} for split {split:?}", root.display())));
    }
    let records = read_manifest(&manifest)?;
    if records.is_empty() {
        return Err(data(format!("{}: manifest lists no examples", manifest.display())));
    }
    records
        .iter()
        .map(|r| Ok((r.id.clone(), load_example(&example_dir(root, split, &r.id), r)?)))
        .collect()
}

/// Checks that every example matches the network resolution.
pub fn check_resolution(examples: &[(String, TrainingExample)], resolution: usize) -> CliResult<()> {
    for (id, ex) in examples {
        let (h, w) = (ex.ground_truth.height(), ex.ground_truth.width());
        if h != resolution || w != resolution || ex.guidance.height() != resolution || ex.guidance.width() != resolution {
            return Err(data(format!("example {id} is {w}x{h}; the model expects {resolution}x{resolution}")));
        }
    }
    Ok(())
}
