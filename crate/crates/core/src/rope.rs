//! Rotary position encodings.
//!
//! Temporal attention rotates query/key pairs by the frame index (1-D);
//! spatial attention rotates the first half of each head by the patch row and
//! the second half by the patch column (2-D). Rotations preserve vector norms
//! and make attention logits a function of relative position only.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::RopeAngles;
use crate::tensor::Tensor;

/// Precomputed cos/sin per (position, frequency pair).
///
/// Pair `j` of a `dim`-wide vector rotates by `position / base^(2j/dim)`.
/// Position 0 is exactly the identity rotation.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    base: f64,
    dim: usize,
    max_positions: usize,
    cos: Vec<f64>, // [position][pair]
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(base: f64, dim: usize, max_positions: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary dimension must be even and positive, got {dim}"
            )));
        }
        if base <= 0.0 {
            return Err(Error::Config(format!("rotary base must be positive, got {base}")));
        }
        let pairs = dim / 2;
        let mut cos = Vec::with_capacity(max_positions * pairs);
        let mut sin = Vec::with_capacity(max_positions * pairs);
        for pos in 0..max_positions {
            for j in 0..pairs {
                let freq = base.powf(-2.0 * j as f64 / dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(RotaryTable {
            base,
            dim,
            max_positions,
            cos,
            sin,
        })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn entry(&self, pos: usize, pair: usize) -> (f64, f64) {
        let i = pos * (self.dim / 2) + pair;
        (self.cos[i], self.sin[i])
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(bad) = positions.iter().find(|p| **p >= self.max_positions) {
            return Err(Error::Config(format!(
                "position {bad} outside table range 0..{}",
                self.max_positions
            )));
        }
        Ok(())
    }
}

/// Per-coordinate angles for rotating a `positions.len() x (heads*dim)` matrix
/// where every head repeats the same 1-D pattern.
pub fn tiled_angles_1d(
    table: &RotaryTable,
    positions: &[usize],
    heads: usize,
) -> Result<Arc<RopeAngles>> {
    table.check_positions(positions)?;
    let cols = heads * table.dim;
    let pairs_per_head = table.dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * cols);
    let mut sin = Vec::with_capacity(positions.len() * cols);
    for &pos in positions {
        for _ in 0..heads {
            for j in 0..pairs_per_head {
                let (c, s) = table.entry(pos, j);
                cos.extend_from_slice(&[c, c]);
                sin.extend_from_slice(&[s, s]);
            }
        }
    }
    Ok(Arc::new(RopeAngles {
        rows: positions.len(),
        cols,
        cos,
        sin,
    }))
}

/// Per-coordinate angles for the 2-D variant: within each head of width
/// `2*table.dim`, the first `table.dim` coordinates rotate by the row
/// position and the remaining ones by the column position.
pub fn tiled_angles_2d(
    table: &RotaryTable,
    row_positions: &[usize],
    col_positions: &[usize],
    heads: usize,
) -> Result<Arc<RopeAngles>> {
    if row_positions.len() != col_positions.len() {
        return Err(Error::Config(format!(
            "row/column position lists differ in length: {} vs {}",
            row_positions.len(),
            col_positions.len()
        )));
    }
    table.check_positions(row_positions)?;
    table.check_positions(col_positions)?;
    let head_dim = 2 * table.dim;
    if head_dim % 4 != 0 {
        return Err(Error::Config(format!(
            "2-D rotary encoding requires head dimension divisible by 4, got {head_dim}"
        )));
    }
    let cols = heads * head_dim;
    let pairs_per_axis = table.dim / 2;
    let mut cos = Vec::with_capacity(row_positions.len() * cols);
    let mut sin = Vec::with_capacity(row_positions.len() * cols);
    for (&rp, &cp) in row_positions.iter().zip(col_positions) {
        for _ in 0..heads {
            for &pos in &[rp, cp] {
                for j in 0..pairs_per_axis {
                    let (c, s) = table.entry(pos, j);
                    cos.extend_from_slice(&[c, c]);
                    sin.extend_from_slice(&[s, s]);
                }
            }
        }
    }
    Ok(Arc::new(RopeAngles {
        rows: row_positions.len(),
        cols,
        cos,
        sin,
    }))
}

fn rotate(x: &Tensor, angles: &RopeAngles) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    crate::tape::rotate_pairs(x.data(), &angles.cos, &angles.sin, out.data_mut(), false);
    out
}

/// Rotates each row of `x` (shape len(positions) x table.dim) by its position.
pub fn apply_rope_1d(x: &Tensor, positions: &[usize], table: &RotaryTable) -> Result<Tensor> {
    let (rows, cols) = x.dims2();
    if rows != positions.len() || cols != table.dim {
        return Err(Error::ShapeMismatch {
            op: "apply_rope_1d",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), table.dim],
        });
    }
    let angles = tiled_angles_1d(table, positions, 1)?;
    Ok(rotate(x, &angles))
}

/// Rotates each row of `x` (shape len(rows) x 2*table.dim): first half by the
/// patch-row position, second half by the patch-column position.
pub fn apply_rope_2d(
    x: &Tensor,
    row_positions: &[usize],
    col_positions: &[usize],
    table: &RotaryTable,
) -> Result<Tensor> {
    let (rows, cols) = x.dims2();
    if cols % 4 != 0 {
        return Err(Error::Config(format!(
            "2-D rotary encoding requires head dimension divisible by 4, got {cols}"
        )));
    }
    if rows != row_positions.len() || cols != 2 * table.dim {
        return Err(Error::ShapeMismatch {
            op: "apply_rope_2d",
            lhs: x.shape().to_vec(),
            rhs: vec![row_positions.len(), 2 * table.dim],
        });
    }
    let angles = tiled_angles_2d(table, row_positions, col_positions, 1)?;
    Ok(rotate(x, &angles))
}
