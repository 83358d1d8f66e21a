//! The dihedral group D4: the eight symmetries of a square acting on image
//! planes by exact pixel permutation.

use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum D4Element {
    Identity,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left-right.
    FlipHorizontal,
    /// Mirror top-bottom.
    FlipVertical,
    /// Mirror about the main diagonal.
    Transpose,
    /// Mirror about the anti-diagonal.
    AntiTranspose,
}

/// Signed permutation matrix on centered `(row, col)` coordinates mapping an
/// output position to the source position it reads from.
type Mat = [[i8; 2]; 2];

impl D4Element {
    pub const ALL: [D4Element; 8] = [
        D4Element::Identity,
        D4Element::Rot90,
        D4Element::Rot180,
        D4Element::Rot270,
        D4Element::FlipHorizontal,
        D4Element::FlipVertical,
        D4Element::Transpose,
        D4Element::AntiTranspose,
    ];

    fn source_matrix(self) -> Mat {
        match self {
            D4Element::Identity => [[1, 0], [0, 1]],
            // out[i][j] = in[j][n-1-i]
            D4Element::Rot90 => [[0, 1], [-1, 0]],
            D4Element::Rot180 => [[-1, 0], [0, -1]],
            // out[i][j] = in[n-1-j][i]
            D4Element::Rot270 => [[0, -1], [1, 0]],
            D4Element::FlipHorizontal => [[1, 0], [0, -1]],
            D4Element::FlipVertical => [[-1, 0], [0, 1]],
            D4Element::Transpose => [[0, 1], [1, 0]],
            D4Element::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: Mat) -> Self {
        *Self::ALL.iter().find(|g| g.source_matrix() == m).expect("signed permutation matrices are closed")
    }

    /// True when the element swaps the row and column axes.
    pub fn swaps_axes(self) -> bool {
        self.source_matrix()[0][0] == 0
    }

    pub fn inverse(self) -> Self {
        let m = self.source_matrix();
        Self::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// The element equal to applying `self` first and then `next`.
    pub fn then(self, next: D4Element) -> Self {
        // out = next(self(x)): out[p] = x[S_self · S_next · p]
        let a = self.source_matrix();
        let b = next.source_matrix();
        let mut m = [[0i8; 2]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        Self::from_matrix(m)
    }

    /// Source index in an `h x w` input for output position `(i, j)`; output
    /// dims are `(w, h)` when the element swaps axes.
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> usize {
        // output dims
        let (oh, ow) = if self.swaps_axes() { (w, h) } else { (h, w) };
        let m = self.source_matrix();
        // doubled centered coordinates keep everything integral
        let ci = 2 * i as i64 - (oh as i64 - 1);
        let cj = 2 * j as i64 - (ow as i64 - 1);
        let si = m[0][0] as i64 * ci + m[0][1] as i64 * cj;
        let sj = m[1][0] as i64 * ci + m[1][1] as i64 * cj;
        let r = ((si + h as i64 - 1) / 2) as usize;
        let c = ((sj + w as i64 - 1) / 2) as usize;
        r * w + c
    }

    /// Applies the symmetry to one row-major `h x w` plane.
    pub fn apply_plane<T: Copy>(self, plane: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        if plane.len() != h * w {
            bail!(Shape, "plane of {} values is not {}x{}", plane.len(), h, w);
        }
        if self.swaps_axes() && h != w {
            bail!(Shape, "{:?} needs a square plane, got {}x{}", self, h, w);
        }
        let mut out = Vec::with_capacity(h * w);
        let (oh, ow) = if self.swaps_axes() { (w, h) } else { (h, w) };
        for i in 0..oh {
            for j in 0..ow {
                out.push(plane[self.source(i, j, h, w)]);
            }
        }
        Ok(out)
    }

    /// Applies the symmetry to every plane of a planar `(c, h, w)` buffer.
    pub fn apply_planes<T: Copy>(self, data: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        let n = h * w;
        if n == 0 || data.len() % n != 0 {
            bail!(Shape, "buffer of {} values is not a stack of {}x{} planes", data.len(), h, w);
        }
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks_exact(n) {
            out.extend(self.apply_plane(plane, h, w)?);
        }
        Ok(out)
    }
}
