//! Patch-pair sampling for relative position prediction.

use rand::Rng;

use super::{Image, PretextError};

/// `(d_row, d_col)` of the second patch relative to the first, by label.
pub const OFFSETS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

pub fn label_of(d_row: i64, d_col: i64) -> Option<u8> {
    OFFSETS.iter().position(|&o| o == (d_row, d_col)).map(|p| p as u8)
}

/// Label seen when the two patches trade places.
pub fn swapped_label(label: u8) -> u8 {
    (label + 4) % 8
}

pub type Cell = (usize, usize);

/// Every ordered pair of 8-adjacent cells on a `grid x grid` lattice.
pub fn adjacent_pairs(grid: usize) -> Vec<(Cell, Cell, u8)> {
    let mut out = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            for (label, &(dr, dc)) in OFFSETS.iter().enumerate() {
                let (r2, c2) = (r as i64 + dr, c as i64 + dc);
                if (0..grid as i64).contains(&r2) && (0..grid as i64).contains(&c2) {
                    out.push(((r, c), (r2 as usize, c2 as usize), label as u8));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub grid: usize,
    pub patch: usize,
    pub jitter: usize,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            grid: 3,
            patch: 8,
            jitter: 1,
        }
    }
}

impl GridGeometry {
    fn cell_extent(&self, image: &Image) -> Result<(usize, usize), PretextError> {
        self.check_size(image.height, image.width)
    }

    /// Cell size for an image of this size, or why patches do not fit.
    pub fn check_size(&self, height: usize, width: usize) -> Result<(usize, usize), PretextError> {
        let (ch, cw) = (height / self.grid.max(1), width / self.grid.max(1));
        let need = self.patch + 2 * self.jitter;
        if self.grid < 2 || self.patch == 0 || ch < need || cw < need {
            return Err(PretextError::ImageTooSmall {
                height,
                width,
                detail: format!(
                    "{0}x{0} grid of {1}px patches with ±{2}px jitter needs {3}px cells",
                    self.grid, self.patch, self.jitter, need
                ),
            });
        }
        Ok((ch, cw))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPairBatch {
    pub first: Vec<Image>,
    pub second: Vec<Image>,
    pub labels: Vec<u8>,
    pub cells: Vec<(Cell, Cell)>,
    /// Top-left pixel of each patch, for tracing patches back to the source.
    pub origins: Vec<((usize, usize), (usize, usize))>,
}

impl PatchPairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The same pairs with patch order reversed.
    pub fn swapped(&self) -> PatchPairBatch {
        PatchPairBatch {
            first: self.second.clone(),
            second: self.first.clone(),
            labels: self.labels.iter().map(|&l| swapped_label(l)).collect(),
            cells: self.cells.iter().map(|&(a, b)| (b, a)).collect(),
            origins: self.origins.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }
}

/// Samples `count` adjacent patch pairs from `image`.
pub fn sample_relative_position_batch(
    image: &Image,
    geometry: GridGeometry,
    count: usize,
    rng: &mut impl Rng,
) -> Result<PatchPairBatch, PretextError> {
    let (ch, cw) = geometry.cell_extent(image)?;
    let pairs = adjacent_pairs(geometry.grid);
    let j = geometry.jitter as i64;
    let origin = |cell: Cell, rng: &mut dyn rand::RngCore| {
        let dy = rng.random_range(-j..=j);
        let dx = rng.random_range(-j..=j);
        let top = (cell.0 * ch + (ch - geometry.patch) / 2) as i64 + dy;
        let left = (cell.1 * cw + (cw - geometry.patch) / 2) as i64 + dx;
        (top as usize, left as usize)
    };
    let mut batch = PatchPairBatch {
        first: Vec::with_capacity(count),
        second: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        cells: Vec::with_capacity(count),
        origins: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let (a, b, label) = pairs[rng.random_range(0..pairs.len())];
        let oa = origin(a, rng);
        let ob = origin(b, rng);
        batch.first.push(image.crop(oa.0, oa.1, geometry.patch, geometry.patch));
        batch.second.push(image.crop(ob.0, ob.1, geometry.patch, geometry.patch));
        batch.labels.push(label);
        batch.cells.push((a, b));
        batch.origins.push((oa, ob));
    }
    Ok(batch)
}
