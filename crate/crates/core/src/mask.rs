//! Integer label grids, bounding boxes and their PGM encoding.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("label grid {grid_h}x{grid_w} needs {expected} labels, got {actual}")]
    Shape {
        grid_h: usize,
        grid_w: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid box ({row0},{col0})-({row1},{col1}) for a {grid_h}x{grid_w} grid")]
    InvalidBox {
        row0: usize,
        col0: usize,
        row1: usize,
        col1: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A row-major grid of cluster labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<usize>,
    pub k_found: usize,
}

impl LabelMask {
    pub fn new(grid_h: usize, grid_w: usize, labels: Vec<usize>) -> Result<Self, MaskError> {
        if grid_h == 0 || grid_w == 0 || labels.len() != grid_h * grid_w {
            return Err(MaskError::Shape {
                grid_h,
                grid_w,
                expected: grid_h * grid_w,
                actual: labels.len(),
            });
        }
        let k_found = count_distinct(&labels);
        Ok(Self {
            grid_h,
            grid_w,
            labels,
            k_found,
        })
    }

    pub fn uniform(grid_h: usize, grid_w: usize, label: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            labels: vec![label; grid_h * grid_w],
            k_found: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.grid_w + col]
    }

    /// Sorted set of labels present in the mask.
    pub fn label_set(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Writes the mask as binary PGM (`P5`, maxval 255).
    ///
    /// Present labels are ranked in ascending order and each rank is scaled by
    /// `floor(255 / max(1, k_found - 1))`, so the output always spans `0..=255`
    /// regardless of the raw label ids.
    pub fn write_pgm<W: Write>(&self, mut sink: W) -> io::Result<()> {
        let present = self.label_set();
        let scale = 255 / present.len().saturating_sub(1).max(1);
        write!(sink, "P5\n{} {}\n255\n", self.grid_w, self.grid_h)?;
        let bytes: Vec<u8> = self
            .labels
            .iter()
            .map(|label| {
                let rank = present.binary_search(label).unwrap_or(0);
                (rank * scale).min(255) as u8
            })
            .collect();
        sink.write_all(&bytes)
    }

    /// Foreground mask as PGM: label 0 is written as 0, every other label as 255.
    pub fn write_binary_pgm<W: Write>(&self, mut sink: W) -> io::Result<()> {
        write!(sink, "P5\n{} {}\n255\n", self.grid_w, self.grid_h)?;
        let bytes: Vec<u8> = self.labels.iter().map(|&l| if l == 0 { 0 } else { 255 }).collect();
        sink.write_all(&bytes)
    }

    /// Reads a binary PGM; pixel values are taken as labels verbatim.
    pub fn read_pgm<R: Read>(mut source: R) -> Result<Self, MaskError> {
        let mut data = Vec::new();
        source.read_to_end(&mut data)?;
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(MaskError::Pgm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(MaskError::Pgm(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| MaskError::Pgm(format!("bad header field {s:?}")))
        };
        let width = parse(&fields[1])?;
        let height = parse(&fields[2])?;
        let maxval = parse(&fields[3])?;
        if maxval == 0 || maxval > 255 {
            return Err(MaskError::Pgm(format!("unsupported maxval {maxval}")));
        }
        let raster = data.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(MaskError::Pgm(format!(
                "expected {} raster bytes, found {}",
                width * height,
                raster.len()
            )));
        }
        Self::new(height, width, raster.iter().map(|&b| b as usize).collect())
    }
}

pub(crate) fn count_distinct(labels: &[usize]) -> usize {
    labels.iter().collect::<BTreeSet<_>>().len()
}

/// Axis-aligned box with inclusive coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        debug_assert!(row0 <= row1 && col0 <= col1);
        Self {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }

    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<(), MaskError> {
        if self.row0 > self.row1 || self.col0 > self.col1 || self.row1 >= grid_h || self.col1 >= grid_w
        {
            return Err(MaskError::InvalidBox {
                row0: self.row0,
                col0: self.col0,
                row1: self.row1,
                col1: self.col1,
                grid_h,
                grid_w,
            });
        }
        Ok(())
    }

    /// Tight box around the `true` cells of a row-major grid.
    pub fn enclosing(cells: &[bool], grid_w: usize) -> Option<Self> {
        let mut bbox: Option<Self> = None;
        for (idx, _) in cells.iter().enumerate().filter(|(_, &on)| on) {
            let (r, c) = (idx / grid_w, idx % grid_w);
            bbox = Some(match bbox {
                None => Self::new(r, c, r, c),
                Some(b) => Self::new(b.row0.min(r), b.col0.min(c), b.row1.max(r), b.col1.max(c)),
            });
        }
        bbox
    }
}
