//! Synthetic moving-shape clips with captions from the closed vocabulary.

use candle_core::{Device, Tensor};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::caption_for;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Grow,
    Shrink,
    Still,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Square, Self::Circle, Self::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Circle => "circle",
            Self::Triangle => "triangle",
        }
    }

    /// Whether the pixel at integer offset `(dx, dy)` from the center lies
    /// inside a shape of half-extent `r`.
    fn contains(self, dx: i64, dy: i64, r: i64) -> bool {
        match self {
            Self::Square => dx.abs() <= r && dy.abs() <= r,
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    /// RGB in `[-1, 1]`.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [1.0, -1.0, -1.0],
            Self::Green => [-1.0, 1.0, -1.0],
            Self::Blue => [-1.0, -1.0, 1.0],
            Self::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 7] = [
        Self::Left,
        Self::Right,
        Self::Up,
        Self::Down,
        Self::Grow,
        Self::Shrink,
        Self::Still,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Up => "up",
            Self::Down => "down",
            Self::Grow => "grow",
            Self::Shrink => "shrink",
            Self::Still => "still",
        }
    }

    /// Per-frame center displacement `(dx, dy)` in units of speed.
    fn direction(self) -> (i64, i64) {
        match self {
            Self::Left => (-1, 0),
            Self::Right => (1, 0),
            Self::Up => (0, -1),
            Self::Down => (0, 1),
            _ => (0, 0),
        }
    }

    /// Per-frame change of the half-extent in units of speed.
    fn growth(self) -> i64 {
        match self {
            Self::Grow => 1,
            Self::Shrink => -1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub motion: Motion,
    /// Pixels per frame: center shift for translations, half-extent change
    /// for grow/shrink.
    pub speed: usize,
    /// Background gray level in `[-1, 1]`.
    pub background: f32,
    /// Chooses the starting position among all placements that keep the
    /// object inside the frame.
    pub seed: u64,
}

impl ClipSpec {
    pub fn caption(&self) -> String {
        caption_for(self.color.word(), self.shape.word(), self.motion.word())
    }

    /// A random spec with speed 1 on a mid-gray background.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            shape: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            motion: Motion::ALL[rng.random_range(0..Motion::ALL.len())],
            speed: 1,
            background: 0.0,
            seed: rng.random(),
        }
    }
}

/// A rendered clip `(F, C, H, W)` with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Tensor,
    pub caption: String,
    /// Object center `(x, y)` in pixel coordinates for each frame.
    pub centers: Vec<(i64, i64)>,
}

fn base_extent(h: usize, w: usize) -> i64 {
    (h.min(w) as i64 / 6).max(1)
}

/// Renders `spec` into a clip of `frames` frames of `channels × height ×
/// width`. Three channels give RGB; one channel gives the mean of RGB.
pub fn generate_clip(spec: &ClipSpec, frames: usize, channels: usize, height: usize, width: usize) -> Result<Clip> {
    if frames < 1 || height < 1 || width < 1 {
        return Err(Error::Spec("clip dimensions must be positive".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Spec(format!("clips have 1 or 3 channels, got {channels}")));
    }
    if !(-1.0..=1.0).contains(&spec.background) {
        return Err(Error::Spec(format!("background {} outside [-1, 1]", spec.background)));
    }
    let (h, w) = (height as i64, width as i64);
    let last = frames as i64 - 1;
    let s = spec.speed as i64;
    let (dx, dy) = spec.motion.direction();
    let g = spec.motion.growth();
    let r0 = match spec.motion {
        Motion::Shrink => base_extent(height, width) + s * last,
        _ => base_extent(height, width),
    };
    let r_max = r0.max(r0 + g * s * last);
    // Centers (cx + dx*s*j, cy + dy*s*j) must keep [c - r, c + r] inside the frame.
    let span = |d: i64, size: i64| -> Option<(i64, i64)> {
        let shift = d * s * last;
        let lo = r_max - shift.min(0);
        let hi = size - 1 - r_max - shift.max(0);
        (lo <= hi).then_some((lo, hi))
    };
    let (Some((x_lo, x_hi)), Some((y_lo, y_hi))) = (span(dx, w), span(dy, h)) else {
        return Err(Error::Spec(format!(
            "{} at speed {} leaves a {height}x{width} frame within {frames} frames",
            spec.caption(),
            spec.speed
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cx = rng.random_range(x_lo..=x_hi);
    let cy = rng.random_range(y_lo..=y_hi);

    let rgb = spec.color.rgb();
    let color: Vec<f32> = if channels == 3 {
        rgb.to_vec()
    } else {
        vec![rgb.iter().sum::<f32>() / 3.0]
    };
    let plane = height * width;
    let mut data = vec![spec.background; frames * channels * plane];
    let mut centers = Vec::with_capacity(frames);
    for j in 0..frames as i64 {
        let (fx, fy) = (cx + dx * s * j, cy + dy * s * j);
        let r = r0 + g * s * j;
        centers.push((fx, fy));
        for y in (fy - r).max(0)..=(fy + r).min(h - 1) {
            for x in (fx - r).max(0)..=(fx + r).min(w - 1) {
                if spec.shape.contains(x - fx, y - fy, r) {
                    for (c, &v) in color.iter().enumerate() {
                        data[(j as usize * channels + c) * plane + (y * w + x) as usize] = v;
                    }
                }
            }
        }
    }
    Ok(Clip {
        frames: Tensor::from_vec(data, (frames, channels, height, width), &Device::Cpu)?,
        caption: spec.caption(),
        centers,
    })
}

/// A fixed list of rendered clips.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub clips: Vec<Clip>,
    pub specs: Vec<ClipSpec>,
}

impl SyntheticSet {
    /// `n` random clips; specs that cannot fit the frame are redrawn.
    pub fn generate(n: usize, seed: u64, frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clips = Vec::with_capacity(n);
        let mut specs = Vec::with_capacity(n);
        let mut attempts = 0;
        while clips.len() < n {
            attempts += 1;
            if attempts > 100 * n.max(1) {
                return Err(Error::Spec(format!(
                    "no clip fits a {height}x{width} frame over {frames} frames"
                )));
            }
            let spec = ClipSpec::random(&mut rng);
            match generate_clip(&spec, frames, channels, height, width) {
                Ok(clip) => {
                    clips.push(clip);
                    specs.push(spec);
                }
                Err(Error::Spec(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(Self { clips, specs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn spec(shape: ShapeKind, motion: Motion, speed: usize) -> ClipSpec {
        ClipSpec {
            shape,
            color: Color::Red,
            motion,
            speed,
            background: 0.0,
            seed: 5,
        }
    }

    fn frames(clip: &Clip) -> Vec<Vec<f32>> {
        let f = clip.frames.dim(0).unwrap();
        (0..f)
            .map(|j| clip.frames.get(j).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect()
    }

    /// Centroid of object pixels (red channel at 1) by pixel moments.
    fn centroid(frame: &[f32], h: usize, w: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if frame[y * w + x] == 1.0 {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn still_frames_identical() {
        let c = generate_clip(&spec(ShapeKind::Circle, Motion::Still, 1), 6, 3, 16, 16).unwrap();
        let f = frames(&c);
        assert!(f.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn translation_is_exact() {
        for shape in ShapeKind::ALL {
            let c = generate_clip(&spec(shape, Motion::Right, 2), 5, 3, 24, 24).unwrap();
            let cents: Vec<(f64, f64)> = frames(&c).iter().map(|f| centroid(f, 24, 24)).collect();
            for p in cents.windows(2) {
                assert!((p[1].0 - p[0].0 - 2.0).abs() < 1e-12);
                assert!((p[1].1 - p[0].1).abs() < 1e-12);
            }
            let c = generate_clip(&spec(shape, Motion::Up, 1), 5, 3, 24, 24).unwrap();
            let cents: Vec<(f64, f64)> = frames(&c).iter().map(|f| centroid(f, 24, 24)).collect();
            for p in cents.windows(2) {
                assert!((p[1].1 - p[0].1 + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn growth_changes_area() {
        let count = |f: &[f32]| f[..256].iter().filter(|&&v| v == 1.0).count();
        let g = frames(&generate_clip(&spec(ShapeKind::Square, Motion::Grow, 1), 4, 3, 16, 16).unwrap());
        assert!(g.windows(2).all(|p| count(&p[1]) > count(&p[0])));
        let s = frames(&generate_clip(&spec(ShapeKind::Square, Motion::Shrink, 1), 4, 3, 16, 16).unwrap());
        assert!(s.windows(2).all(|p| count(&p[1]) < count(&p[0])));
    }

    #[test]
    fn deterministic_and_in_range() {
        let s = spec(ShapeKind::Triangle, Motion::Down, 1);
        let a = generate_clip(&s, 4, 3, 16, 16).unwrap();
        let b = generate_clip(&s, 4, 3, 16, 16).unwrap();
        assert_eq!(frames(&a), frames(&b));
        assert_eq!(a.caption, "red triangle moving down");
        let v = a.frames.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn leaving_frame_is_rejected() {
        let err = generate_clip(&spec(ShapeKind::Square, Motion::Right, 5), 8, 3, 16, 16);
        assert!(matches!(err, Err(Error::Spec(_))));
    }

    #[test]
    fn object_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = ClipSpec::random(&mut rng);
            if let Ok(c) = generate_clip(&s, 4, 3, 16, 16) {
                // Every frame shows the full object: pixel count never drops
                // below the smallest shape's area.
                for (f, (cx, cy)) in frames(&c).iter().zip(&c.centers) {
                    assert!((0..16).contains(cx) && (0..16).contains(cy));
                    assert!(f.iter().any(|&v| v != 0.0));
                }
            }
        }
    }

    #[test]
    fn synthetic_set_size() {
        let set = SyntheticSet::generate(4, 0, 4, 3, 16, 16).unwrap();
        assert_eq!(set.clips.len(), 4);
        assert_eq!(set.clips[0].frames.dims(), &[4, 3, 16, 16]);
    }
}
