use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const MOTIONS: [&str; 7] = ["left", "right", "up", "down", "grow", "shrink", "still"];
pub const MOVING: &str = "moving";

/// Closed caption vocabulary. Id 0 is the end-of-sequence / padding token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Colors, shapes, motions and the word "moving".
    pub fn synthetic() -> Self {
        let mut words = vec![EOS.to_string(), MOVING.to_string()];
        words.extend(COLORS.iter().map(|s| s.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(MOTIONS.iter().map(|s| s.to_string()));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn eos_id(&self) -> u32 {
        0
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Vocabulary {
                word: word.to_string(),
            })
    }

    /// Word ids padded with EOS to exactly `max_len` slots. An empty caption
    /// is the unconditional stream (all EOS).
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = caption
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect::<Result<Vec<_>>>()?;
        if ids.len() > max_len {
            return Err(Error::param(format!(
                "caption has {} words but only {max_len} token slots",
                ids.len()
            )));
        }
        ids.resize(max_len, self.eos_id());
        Ok(ids)
    }
}

/// `"<color> <shape> moving <motion>"`.
pub fn caption_for(color: &str, shape: &str, motion: &str) -> String {
    format!("{color} {shape} {MOVING} {motion}")
}

/// Every caption of the synthetic grid, shape-major.
pub fn caption_grid() -> Vec<String> {
    let mut out = Vec::new();
    for shape in SHAPES {
        for color in COLORS {
            for motion in MOTIONS {
                out.push(caption_for(color, shape, motion));
            }
        }
    }
    out
}
