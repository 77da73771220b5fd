//! File outputs: atomic writes, JSON reports, PNG frames, GIF clips and
//! attention heatmap grids.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::video::VideoBatch;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::param(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(
        ".{name}.tmp-{}-{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn to_rgb(&self) -> Vec<u8> {
        match self.channels {
            3 => self.data.clone(),
            _ => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}

/// Maps `[-1, 1]` to `0..=255`.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Maps `0..=255` back to `[-1, 1]`.
pub fn dequantize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Frames of video `index` of a clean batch as 8-bit images.
pub fn video_to_images(video: &VideoBatch, index: usize) -> Result<Vec<Image8>> {
    let (_, f, c, h, w) = video.dims();
    if c != 1 && c != 3 {
        return Err(Error::Image(format!("cannot render {c}-channel frames")));
    }
    let values = video.video(index)?.to_vec()?;
    let plane = h * w;
    Ok((0..f)
        .map(|j| {
            let frame = &values[j * c * plane..(j + 1) * c * plane];
            let mut data = Vec::with_capacity(c * plane);
            for p in 0..plane {
                for ch in 0..c {
                    data.push(quantize(frame[ch * plane + p]));
                }
            }
            Image8 {
                width: w,
                height: h,
                channels: c,
                data,
            }
        })
        .collect())
}

pub fn encode_png(image: &Image8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(match image.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Image(format!("unsupported channel count {c}"))),
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&image.data)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Image8) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// Reads an 8-bit PNG as gray or RGB; alpha channels are dropped.
pub fn read_png(path: &Path) -> Result<Image8> {
    let file = fs::File::open(path)?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let (keep, stride) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        png::ColorType::Indexed => {
            return Err(Error::Image(format!("{}: palette images are not supported", path.display())))
        }
    };
    let data = buf
        .chunks_exact(stride)
        .flat_map(|px| px[..keep].iter().copied())
        .collect();
    Ok(Image8 {
        width: info.width as usize,
        height: info.height as usize,
        channels: keep,
        data,
    })
}

/// Writes `frame_0001.png`, `frame_0002.png`, ... into `dir`.
pub fn write_frames(dir: &Path, frames: &[Image8]) -> Result<Vec<PathBuf>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("frame_{:04}.png", i + 1));
            write_png(&path, img)?;
            Ok(path)
        })
        .collect()
}

/// Looping GIF with a fixed per-frame delay in hundredths of a second.
pub fn encode_gif(frames: &[Image8], delay: u16) -> Result<Vec<u8>> {
    let first = frames.first().ok_or_else(|| Error::Image("no frames to encode".into()))?;
    let (w, h) = (first.width as u16, first.height as u16);
    let mut out = Vec::new();
    {
        let mut enc = gif::Encoder::new(&mut out, w, h, &[]).map_err(|e| Error::Image(e.to_string()))?;
        enc.set_repeat(gif::Repeat::Infinite)
            .map_err(|e| Error::Image(e.to_string()))?;
        for img in frames {
            if (img.width, img.height) != (first.width, first.height) {
                return Err(Error::Image("GIF frames differ in size".into()));
            }
            let mut frame = gif::Frame::from_rgb(w, h, &img.to_rgb());
            frame.delay = delay;
            enc.write_frame(&frame).map_err(|e| Error::Image(e.to_string()))?;
        }
    }
    Ok(out)
}

pub fn write_gif(path: &Path, frames: &[Image8], delay: u16) -> Result<()> {
    write_atomic(path, &encode_gif(frames, delay)?)
}

/// Tiles `rows × cols` maps of size `map_h × map_w` into one RGB image,
/// each cell upscaled by `scale` and separated by a one-pixel border. Values
/// are normalized to the global min/max and drawn on a dark-to-bright ramp.
pub fn heatmap_grid(maps: &[Vec<Vec<f64>>], map_h: usize, map_w: usize, scale: usize) -> Result<Image8> {
    let rows = maps.len();
    let cols = maps.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || maps.iter().any(|r| r.len() != cols) {
        return Err(Error::Image("heatmap grid must be a non-empty rectangle".into()));
    }
    if maps.iter().flatten().any(|m| m.len() != map_h * map_w) {
        return Err(Error::Image("heatmap cell has the wrong size".into()));
    }
    let (lo, hi) = maps
        .iter()
        .flatten()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell_w = map_w * scale + 1;
    let cell_h = map_h * scale + 1;
    let width = cols * cell_w + 1;
    let height = rows * cell_h + 1;
    let mut data = vec![255u8; width * height * 3];
    for (r, row) in maps.iter().enumerate() {
        for (c, map) in row.iter().enumerate() {
            for y in 0..map_h * scale {
                for x in 0..map_w * scale {
                    let v = (map[(y / scale) * map_w + x / scale] - lo) / span;
                    let px = 1 + r * cell_h + y;
                    let py = 1 + c * cell_w + x;
                    let i = (px * width + py) * 3;
                    data[i..i + 3].copy_from_slice(&ramp(v));
                }
            }
        }
    }
    Ok(Image8 {
        width,
        height,
        channels: 3,
        data,
    })
}

fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * v).min(1.0)).round() as u8;
    let g = (255.0 * (2.0 * v - 0.6).clamp(0.0, 1.0)).round() as u8;
    let b = (255.0 * (0.4 + 0.6 * (1.0 - (2.0 * v - 0.5).abs())).clamp(0.0, 1.0) * (1.0 - v)).round() as u8;
    [r, g, b]
}
