//! Sliding-window geometry shared by convolution, pooling and the estimators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel, stride and zero-padding of a 2-D window, as (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window2d {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
}

impl Window2d {
    pub fn new(kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        Ok(Window2d { kernel, stride, padding })
    }

    /// Square kernel, unit stride, no padding.
    pub fn square(k: usize) -> Self {
        Window2d { kernel: [k, k], stride: [1, 1], padding: [0, 0] }
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = [p, p];
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = [s, s];
        self
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |n: usize, axis: usize| -> Result<usize> {
            let padded = n + 2 * self.padding[axis];
            if self.kernel[axis] > padded {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {:?} larger than padded input {}x{}",
                    self.kernel,
                    h + 2 * self.padding[0],
                    w + 2 * self.padding[1]
                )));
            }
            Ok((padded - self.kernel[axis]) / self.stride[axis] + 1)
        };
        Ok((out(h, 0)?, out(w, 1)?))
    }

    /// Input rows (or cols, `axis = 1`) covered by output index `o` that fall
    /// inside an input of extent `n`, as a half-open kernel-offset range.
    pub fn taps_in_bounds(&self, axis: usize, o: usize, n: usize) -> std::ops::Range<usize> {
        let start = (o * self.stride[axis]) as isize - self.padding[axis] as isize;
        let k = self.kernel[axis] as isize;
        let lo = (-start).clamp(0, k);
        let hi = (n as isize - start).clamp(0, k);
        lo as usize..hi.max(lo) as usize
    }

    /// Input coordinate of kernel offset `q` for output index `o`; only valid
    /// for offsets returned by [`Window2d::taps_in_bounds`].
    pub fn input_index(&self, axis: usize, o: usize, q: usize) -> usize {
        o * self.stride[axis] + q - self.padding[axis]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(Window2d::square(3).output_hw(5, 5).unwrap(), (3, 3));
        assert_eq!(Window2d::square(3).with_padding(1).output_hw(5, 7).unwrap(), (5, 7));
        assert_eq!(Window2d::square(2).with_stride(2).output_hw(6, 5).unwrap(), (3, 2));
        assert!(Window2d::square(4).output_hw(3, 3).is_err());
    }

    #[test]
    fn in_bounds_taps_at_edges() {
        let w = Window2d::square(3).with_padding(1);
        assert_eq!(w.taps_in_bounds(0, 0, 4), 1..3);
        assert_eq!(w.taps_in_bounds(0, 1, 4), 0..3);
        assert_eq!(w.taps_in_bounds(0, 3, 4), 0..2);
        assert_eq!(w.input_index(0, 0, 1), 0);
    }
}
