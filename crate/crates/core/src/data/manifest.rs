//! Clip datasets listed in a CSV manifest with header `path,caption`. Each
//! path names a directory of PNG frames whose file names sort in frame order
//! (zero-padded). Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::artifacts::{dequantize, read_png, video_to_images, write_frames, Image8};
use crate::error::{Error, Result};
use crate::video::{ValueRange, VideoBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub dir: PathBuf,
    pub caption: String,
    pub frames: Vec<PathBuf>,
}

/// Rows are validated on load; frames are decoded on access.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    rows: Vec<ManifestRow>,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
}

fn png_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads and validates a manifest for clips of `frames × channels × height ×
/// width`.
pub fn load_manifest(path: &Path, frames: usize, channels: usize, height: usize, width: usize) -> Result<ManifestDataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::Manifest(format!("clips must have 1 or 3 channels, got {channels}")));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["path", "caption"] {
        return Err(Error::Manifest(format!(
            "{}: header must be \"path,caption\", got {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let bad = |reason: String| Error::Ingestion { row, reason };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let (Some(p), Some(caption)) = (record.get(0), record.get(1)) else {
            return Err(bad("expected two fields".into()));
        };
        let dir = base.join(p);
        if !dir.is_dir() {
            return Err(bad(format!("frame directory {} does not exist", dir.display())));
        }
        let files = png_files(&dir).map_err(|e| bad(format!("{}: {e}", dir.display())))?;
        if files.len() < frames {
            return Err(bad(format!(
                "{} has {} frames, need {frames}",
                dir.display(),
                files.len()
            )));
        }
        rows.push(ManifestRow {
            row,
            dir,
            caption: caption.to_string(),
            frames: files.into_iter().take(frames).collect(),
        });
    }
    Ok(ManifestDataset {
        rows,
        frames,
        channels,
        height,
        width,
    })
}

/// Center crop to the target aspect ratio, then nearest-neighbor resize.
pub fn fit_image(img: &Image8, height: usize, width: usize) -> Image8 {
    let (sh, sw) = (img.height, img.width);
    let (crop_h, crop_w) = if sh * width > sw * height {
        (sw * height / width, sw)
    } else {
        (sh, sh * width / height)
    };
    let (crop_h, crop_w) = (crop_h.max(1), crop_w.max(1));
    let (y0, x0) = ((sh - crop_h) / 2, (sw - crop_w) / 2);
    let c = img.channels;
    let mut data = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let sy = y0 + (y * crop_h + crop_h / 2) / height;
        for x in 0..width {
            let sx = x0 + (x * crop_w + crop_w / 2) / width;
            let i = (sy * sw + sx) * c;
            data.extend_from_slice(&img.data[i..i + c]);
        }
    }
    Image8 {
        width,
        height,
        channels: c,
        data,
    }
}

impl ManifestDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    /// Clip `index` as `(F, C, H, W)` in `[-1, 1]` with its caption.
    pub fn get(&self, index: usize) -> Result<(Tensor, String)> {
        let row = self
            .rows
            .get(index)
            .ok_or_else(|| Error::param(format!("clip {index} out of range")))?;
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = Vec::with_capacity(self.frames * c * h * w);
        for path in &row.frames {
            let img = read_png(path).map_err(|e| Error::Ingestion {
                row: row.row,
                reason: e.to_string(),
            })?;
            let img = fit_image(&img, h, w);
            let mut planes = vec![0f32; c * h * w];
            for p in 0..h * w {
                let px = &img.data[p * img.channels..(p + 1) * img.channels];
                if c == img.channels {
                    for ch in 0..c {
                        planes[ch * h * w + p] = dequantize(px[ch]);
                    }
                } else if c == 1 {
                    let mean = px.iter().map(|&v| v as f32).sum::<f32>() / px.len() as f32;
                    planes[p] = mean / 127.5 - 1.0;
                } else {
                    for ch in 0..c {
                        planes[ch * h * w + p] = dequantize(px[0]);
                    }
                }
            }
            data.extend(planes);
        }
        let t = Tensor::from_vec(data, (self.frames, c, h, w), &Device::Cpu)?;
        Ok((t, row.caption.clone()))
    }
}

/// Writes a clean `(F, C, H, W)` clip as `frame_0001.png`, ... in `dir`.
pub fn write_clip_pngs(dir: &Path, clip: &Tensor) -> Result<Vec<PathBuf>> {
    let batch = VideoBatch::new(clip.unsqueeze(0)?, ValueRange::Clean)?;
    write_frames(dir, &video_to_images(&batch, 0)?)
}
