//! Semantic change masks and the pixel statistics the QA rules are built on.

use std::fmt;

use crate::error::MaskError;

/// Per-pixel change state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Intact = 1,
    Damaged = 2,
    Destroyed = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Background,
        Label::Intact,
        Label::Damaged,
        Label::Destroyed,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Intact),
            2 => Some(Label::Damaged),
            3 => Some(Label::Destroyed),
            _ => None,
        }
    }

    pub fn is_building(self) -> bool {
        !matches!(self, Label::Background)
    }

    /// Damaged or destroyed.
    pub fn is_destruction(self) -> bool {
        matches!(self, Label::Damaged | Label::Destroyed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Intact => "intact",
            Label::Damaged => "damaged",
            Label::Destroyed => "destroyed",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Column/row position inside a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    pub x: usize,
    pub y: usize,
}

/// A row-major `height × width` grid of labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl SemanticMask {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyDimensions { width, height });
        }
        if labels.len() != width * height {
            return Err(MaskError::SizeMismatch {
                expected: width * height,
                actual: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Builds a mask from raw integer codes, rejecting anything outside `0..=3`.
    pub fn from_codes(width: usize, height: usize, codes: &[u8]) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyDimensions { width, height });
        }
        if codes.len() != width * height {
            return Err(MaskError::SizeMismatch {
                expected: width * height,
                actual: codes.len(),
            });
        }
        let labels = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Label::from_code(c).ok_or(MaskError::InvalidLabel {
                    value: c,
                    x: i % width,
                    y: i / width,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Convenience constructor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self, MaskError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut codes = Vec::with_capacity(width * height);
        for row in rows {
            if row.len() != width {
                return Err(MaskError::RaggedRows);
            }
            codes.extend_from_slice(row);
        }
        Self::from_codes(width, height, &codes)
    }

    pub fn filled(width: usize, height: usize, label: Label) -> Result<Self, MaskError> {
        Self::new(width, height, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    /// Nearest-neighbour resampling to `width × height`.
    ///
    /// Source index for destination `i` is `floor(i · src / dst)`, so integer
    /// upscaling replicates every pixel exactly `k` times per axis.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyDimensions { width, height });
        }
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                labels.push(self.get(sx, sy));
            }
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }
}

/// Pixel tallies per label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ClassCounts {
    pub n_background: u64,
    pub n_intact: u64,
    pub n_damaged: u64,
    pub n_destroyed: u64,
    pub n_total: u64,
}

impl ClassCounts {
    /// Builds counts from the four per-label tallies; `n_total` is their sum.
    pub fn new(n_background: u64, n_intact: u64, n_damaged: u64, n_destroyed: u64) -> Self {
        Self {
            n_background,
            n_intact,
            n_damaged,
            n_destroyed,
            n_total: n_background + n_intact + n_damaged + n_destroyed,
        }
    }

    pub fn get(&self, label: Label) -> u64 {
        match label {
            Label::Background => self.n_background,
            Label::Intact => self.n_intact,
            Label::Damaged => self.n_damaged,
            Label::Destroyed => self.n_destroyed,
        }
    }

    pub fn n_building(&self) -> u64 {
        self.n_intact + self.n_damaged + self.n_destroyed
    }

    /// Damaged plus destroyed pixels.
    pub fn n_destruction(&self) -> u64 {
        self.n_damaged + self.n_destroyed
    }
}

pub fn count_labels(mask: &SemanticMask) -> ClassCounts {
    let mut tally = [0u64; 4];
    for &l in mask.labels() {
        tally[l as usize] += 1;
    }
    ClassCounts {
        n_background: tally[0],
        n_intact: tally[1],
        n_damaged: tally[2],
        n_destroyed: tally[3],
        n_total: mask.labels().len() as u64,
    }
}

/// Share of damaged-or-destroyed pixels in percent, unfloored.
///
/// `n_total` must be positive; every mask-derived count satisfies this.
pub fn destruction_percentage(counts: &ClassCounts) -> f64 {
    debug_assert!(counts.n_total > 0);
    (100.0 * counts.n_destruction() as f64) / counts.n_total as f64
}

/// Coordinates of every damaged or destroyed pixel in row-major order.
pub fn destruction_pixels(mask: &SemanticMask) -> Vec<PixelCoord> {
    let w = mask.width();
    mask.labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_destruction())
        .map(|(i, _)| PixelCoord { x: i % w, y: i / w })
        .collect()
}
