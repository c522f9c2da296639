use crate::error::{Error, Result};

use super::{GroupConvSpec, PermutationSpec};

/// Integer path-count matrix, `rows` output channels by `cols` input channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StructureMask {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
}

impl StructureMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        StructureMask {
            rows,
            cols,
            counts: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| u64::from(i == j))
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> u64) -> Self {
        let mut counts = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                counts.push(f(i, j));
            }
        }
        StructureMask { rows, cols, counts }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: u64) {
        self.counts[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.cols..(i + 1) * self.cols]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut sums = vec![0; self.cols];
        for i in 0..self.rows {
            for (s, &c) in sums.iter_mut().zip(self.row(i)) {
                *s += c;
            }
        }
        sums
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn min_count(&self) -> u64 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn covered_fraction(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.nonzero_count() as f64 / self.counts.len() as f64
    }

    pub fn is_dense(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }

    pub fn is_exactly_one_path(&self) -> bool {
        self.counts.iter().all(|&c| c == 1)
    }

    /// Plain triple-loop integer product `self * rhs` with overflow checks.
    pub fn matmul(&self, rhs: &StructureMask) -> Result<StructureMask> {
        if self.cols != rhs.rows {
            return Err(Error::structural(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = StructureMask::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    let idx = i * rhs.cols + j;
                    let term = a.checked_mul(rhs.get(k, j)).ok_or(Error::PathOverflow)?;
                    out.counts[idx] = out.counts[idx]
                        .checked_add(term)
                        .ok_or(Error::PathOverflow)?;
                }
            }
        }
        Ok(out)
    }

    /// `mask(spec) * self` without materializing the block-diagonal mask:
    /// output row `i` is the sum of the rows of `self` in `i`'s branch.
    pub fn left_apply_group(&self, spec: &GroupConvSpec) -> Result<StructureMask> {
        if spec.channels_in != self.rows {
            return Err(Error::structural(format!(
                "factor expects {} channels, mask has {} rows",
                spec.channels_in, self.rows
            )));
        }
        let mut out = StructureMask::zeros(spec.channels_out, self.cols);
        for g in 0..spec.branches {
            let mut acc = vec![0u64; self.cols];
            for k in spec.branch_inputs(g) {
                for (a, &c) in acc.iter_mut().zip(self.row(k)) {
                    *a = a.checked_add(c).ok_or(Error::PathOverflow)?;
                }
            }
            for i in spec.branch_outputs(g) {
                out.counts[i * self.cols..(i + 1) * self.cols].copy_from_slice(&acc);
            }
        }
        Ok(out)
    }

    /// `mask(perm) * self`: row `j` moves to row `perm.dest(j)`.
    pub fn left_apply_permutation(&self, perm: &PermutationSpec) -> StructureMask {
        let mut out = StructureMask::zeros(self.rows, self.cols);
        for j in 0..self.rows {
            let d = perm.dest(j);
            out.counts[d * self.cols..(d + 1) * self.cols].copy_from_slice(self.row(j));
        }
        out
    }
}
