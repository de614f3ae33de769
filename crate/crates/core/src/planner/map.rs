//! Plain-text grid maps.
//!
//! ```text
//! W H resolution
//! <H rows of exactly W characters>
//! ```
//!
//! `#` blocked, `.` free, `B` charging base, `C` room center, `0`-`9` gem
//! spawn slots. The first row is the top of the map (largest y).

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Vec2;

use super::NavGrid;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("map io error: {0}")]
    Io(String),
}

fn syntax(line: usize, message: impl Into<String>) -> MapError {
    MapError::Syntax {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub blocked: Vec<bool>,
    pub base: Option<Vec2>,
    /// Room centers in file scan order (top row first, left to right).
    pub room_centers: Vec<Vec2>,
    pub gem_slots: BTreeMap<u8, Vec2>,
    text: String,
}

impl MapFile {
    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut lines = text.split('\n');
        let header = lines.next().ok_or_else(|| syntax(1, "missing header"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 3 {
            return Err(syntax(1, "header must be \"W H resolution\""));
        }
        let width: usize = fields[0]
            .parse()
            .map_err(|_| syntax(1, format!("bad width {:?}", fields[0])))?;
        let height: usize = fields[1]
            .parse()
            .map_err(|_| syntax(1, format!("bad height {:?}", fields[1])))?;
        let resolution: f64 = fields[2]
            .parse()
            .map_err(|_| syntax(1, format!("bad resolution {:?}", fields[2])))?;
        if width == 0 || height == 0 {
            return Err(syntax(1, "width and height must be positive"));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(syntax(1, "resolution must be positive"));
        }

        let mut blocked = vec![false; width * height];
        let mut base = None;
        let mut room_centers = Vec::new();
        let mut gem_slots = BTreeMap::new();
        let center = |i: usize, j: usize| {
            Vec2::new((i as f64 + 0.5) * resolution, (j as f64 + 0.5) * resolution)
        };

        for r in 0..height {
            let line_no = r + 2;
            let row = lines
                .next()
                .ok_or_else(|| syntax(line_no, format!("expected {height} rows, found {r}")))?;
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(syntax(
                    line_no,
                    format!("row has {} characters, expected {width}", chars.len()),
                ));
            }
            let j = height - 1 - r;
            for (i, ch) in chars.into_iter().enumerate() {
                match ch {
                    '#' => blocked[j * width + i] = true,
                    '.' => {}
                    'B' => {
                        if base.replace(center(i, j)).is_some() {
                            return Err(syntax(line_no, "more than one charging base"));
                        }
                    }
                    'C' => room_centers.push(center(i, j)),
                    '0'..='9' => {
                        let slot = ch as u8 - b'0';
                        if gem_slots.insert(slot, center(i, j)).is_some() {
                            return Err(syntax(line_no, format!("duplicate gem slot {slot}")));
                        }
                    }
                    other => {
                        return Err(syntax(
                            line_no,
                            format!("unexpected character {other:?} at column {}", i + 1),
                        ))
                    }
                }
            }
        }
        for (k, rest) in lines.enumerate() {
            if !rest.is_empty() {
                return Err(syntax(height + 2 + k, "trailing content after last row"));
            }
        }

        Ok(Self {
            width,
            height,
            resolution,
            blocked,
            base,
            room_centers,
            gem_slots,
            text: text.to_owned(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MapError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Source text exactly as parsed.
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Map rows, top first, as they appear in the file.
    pub fn rows(&self) -> Vec<String> {
        self.text
            .split('\n')
            .skip(1)
            .take(self.height)
            .map(str::to_owned)
            .collect()
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.text.as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn nav_grid(&self, inflation_radius: f64) -> NavGrid {
        NavGrid::new(
            self.width,
            self.height,
            self.resolution,
            self.blocked.clone(),
            inflation_radius,
        )
        .expect("parsed map is a valid grid")
    }
}
