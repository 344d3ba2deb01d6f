//! Low-level periodic geometry and binning kernels shared by graph construction,
//! the radial distribution histograms and the differentiable tape ops.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Wraps a coordinate into `[0, box_len)`.
#[inline]
pub fn wrap_coordinate<S: Scalar>(x: S, box_len: S) -> S {
    let w = x - box_len * (x / box_len).floor();
    // floor can leave w == box_len when x is a tiny negative number
    if w >= box_len || w < S::zero() {
        S::zero()
    } else {
        w
    }
}

/// Minimum-image component `((x + L/2) mod L) - L/2`, in `[-L/2, L/2)`.
#[inline]
pub fn min_image_component<S: Scalar>(x: S, box_len: S) -> S {
    let half = box_len * S::lit(0.5);
    let shifted = x + half;
    let mut m = shifted - box_len * (shifted / box_len).floor();
    if m >= box_len {
        m -= box_len;
    }
    if m < S::zero() {
        m += box_len;
    }
    m - half
}

#[inline]
pub fn min_image_vector<S: Scalar>(ri: &[S; 3], rj: &[S; 3], box_lengths: &[S; 3]) -> [S; 3] {
    [
        min_image_component(ri[0] - rj[0], box_lengths[0]),
        min_image_component(ri[1] - rj[1], box_lengths[1]),
        min_image_component(ri[2] - rj[2], box_lengths[2]),
    ]
}

#[inline]
pub fn norm3<S: Scalar>(v: &[S; 3]) -> S {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Uniform bins on `(0, r_max]` with a Gaussian smoothing width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BinGrid<S: Scalar> {
    pub r_max: S,
    pub bins: usize,
    pub sigma: S,
}

impl<S: Scalar> BinGrid<S> {
    pub fn bin_width(&self) -> S {
        self.r_max / S::from_usize_lossy(self.bins)
    }

    pub fn center(&self, b: usize) -> S {
        (S::from_usize_lossy(b) + S::lit(0.5)) * self.bin_width()
    }

    pub fn centers(&self) -> Vec<S> {
        (0..self.bins).map(|b| self.center(b)).collect()
    }

    /// Whether a pair at distance `d` is counted at all.
    #[inline]
    pub fn counts(&self, d: S) -> bool {
        d > S::zero() && d <= self.r_max
    }

    /// Index of the right-closed bin `(k w, (k+1) w]` holding `d`.
    pub fn hard_bin(&self, d: S) -> Option<usize> {
        if !self.counts(d) {
            return None;
        }
        let k = (d / self.bin_width()).ceil().to_usize()?;
        Some(k.saturating_sub(1).min(self.bins - 1))
    }

    /// Normalized Gaussian weights of one pair distance over all bins, written into
    /// `out`; they sum to one. Returns the per-bin exponent slopes `-(d - c_b) / sigma^2`
    /// needed for the derivative.
    pub fn soft_weights(&self, d: S, out: &mut [S], slopes: &mut [S]) {
        debug_assert_eq!(out.len(), self.bins);
        let inv_two_var = S::one() / (S::lit(2.0) * self.sigma * self.sigma);
        let inv_var = S::one() / (self.sigma * self.sigma);
        let mut max_q = S::neg_infinity();
        for b in 0..self.bins {
            let diff = d - self.center(b);
            let q = -diff * diff * inv_two_var;
            out[b] = q;
            slopes[b] = -diff * inv_var;
            if q > max_q {
                max_q = q;
            }
        }
        let mut total = S::zero();
        for w in out.iter_mut() {
            *w = (*w - max_q).exp();
            total += *w;
        }
        for w in out.iter_mut() {
            *w /= total;
        }
    }
}
