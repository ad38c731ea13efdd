//! Fixed 8-connected grid topology with self-loops.

use crate::error::{Error, Result};

/// Neighbor lists for every node of a rows × cols grid, stored CSR-style.
///
/// `N(i)` holds every node within Chebyshev distance 1 of `i`, including `i`
/// itself, sorted ascending so that every sum over a neighborhood runs in
/// the same order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridTopology {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl GridTopology {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_nodes(&self) -> usize {
        self.rows * self.cols
    }

    /// Total number of (i, j) entries across all neighbor lists.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// Start offsets into the flat neighbor array; length `num_nodes + 1`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn flat_neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    /// Unchecked neighbor slice; panics if `i` is out of range.
    #[inline]
    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

pub fn build_grid_topology(rows: usize, cols: usize) -> Result<GridTopology> {
    if rows < 2 || cols < 2 {
        return Err(Error::dim(format!(
            "grid topology needs rows, cols >= 2, got {rows}x{cols}"
        )));
    }
    let n = rows * cols;
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbors = Vec::with_capacity(9 * n);
    offsets.push(0);
    for r in 0..rows {
        for c in 0..cols {
            // row-major traversal of the 3x3 window is already ascending in node index
            for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    neighbors.push(nr * cols + nc);
                }
            }
            offsets.push(neighbors.len());
        }
    }
    Ok(GridTopology {
        rows,
        cols,
        offsets,
        neighbors,
    })
}

pub fn neighbors(topo: &GridTopology, i: usize) -> Result<&[usize]> {
    if i >= topo.num_nodes() {
        return Err(Error::Index {
            index: i,
            len: topo.num_nodes(),
        });
    }
    Ok(topo.neighbors_of(i))
}
