//! Re-ID image directory layout: `root/{train,query,gallery}/` folders of
//! PNG files whose names carry the labels using the standard grammar
//! `{pid}_c{camid}...`, e.g. `0001_c1s1_000151_00.png` → pid 1, camera 1.
//! A negative pid marks a junk/distractor image and is excluded.

use std::fs;
use std::path::{Path, PathBuf};

use adp_core::data::{ImageRecord, Split, SyntheticDataset};
use adp_core::matrix::Matrix;
use anyhow::{bail, Context, Result};

pub fn split_dir_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Query => "query",
        Split::Gallery => "gallery",
    }
}

/// Parse `{pid}_c{camid}…` from a file stem. `None` means the name does not
/// follow the grammar; a negative pid parses but marks a distractor.
fn parse_stem(stem: &str) -> Option<(i64, usize)> {
    let (pid_part, rest) = stem.split_once('_')?;
    let pid: i64 = pid_part.parse().ok()?;
    let after_c = rest.strip_prefix('c')?;
    let cam_digits: String = after_c.chars().take_while(|c| c.is_ascii_digit()).collect();
    if cam_digits.is_empty() {
        return None;
    }
    let camid: usize = cam_digits.parse().ok()?;
    Some((pid, camid))
}

/// Load an 8-bit RGB image file into the row-major H x (W*3) matrix layout
/// with values scaled to [0,1].
fn load_image(path: &Path) -> Result<Matrix> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode image {}", path.display()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut m = Matrix::zeros(h as usize, w as usize * 3);
    for (x, y, px) in img.enumerate_pixels() {
        let row = m.row_mut(y as usize);
        for ch in 0..3 {
            row[x as usize * 3 + ch] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(m)
}

/// Quantize a [0,1] matrix image to 8-bit RGB and write it as PNG.
pub fn save_image(path: &Path, img: &Matrix) -> Result<()> {
    let h = img.rows();
    let w = img.cols() / 3;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let row = img.row(y as usize);
        for ch in 0..3 {
            let v = row[x as usize * 3 + ch].clamp(0.0, 1.0);
            px.0[ch] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path).with_context(|| format!("cannot write image {}", path.display()))?;
    Ok(())
}

/// Scan one split directory into records sorted by filename. Files that do
/// not follow the grammar are skipped with a warning; distractor files
/// (negative pid) are excluded silently per protocol.
pub fn scan_reid_directory(root: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    let dir = root.join(split_dir_name(split));
    if !dir.is_dir() {
        bail!("dataset split directory {} does not exist", dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut records = Vec::new();
    let mut saw_any_file = false;
    for path in paths {
        saw_any_file = true;
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            eprintln!("warning: skipping {} (unreadable name)", path.display());
            continue;
        };
        let Some((pid, camid)) = parse_stem(stem) else {
            eprintln!(
                "warning: skipping {} (name does not follow {{pid}}_c{{camid}}…)",
                path.display()
            );
            continue;
        };
        if pid < 0 {
            continue;
        }
        records.push(ImageRecord { image: load_image(&path)?, pid: pid as usize, camid, split });
    }
    if records.is_empty() {
        if saw_any_file {
            bail!("no parseable re-ID images in {}", dir.display());
        }
        bail!("no images in {}", dir.display());
    }
    Ok(records)
}

/// Write a dataset as the standard three-folder layout; file names encode
/// pid and camid in the scanning grammar.
pub fn write_dataset(root: &Path, ds: &SyntheticDataset) -> Result<()> {
    for (records, split) in
        [(&ds.train, Split::Train), (&ds.query, Split::Query), (&ds.gallery, Split::Gallery)]
    {
        let dir = root.join(split_dir_name(split));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (i, rec) in records.iter().enumerate() {
            let name = format!("{:04}_c{}s1_{:06}_00.png", rec.pid, rec.camid, i);
            save_image(&dir.join(name), &rec.image)?;
        }
    }
    Ok(())
}
