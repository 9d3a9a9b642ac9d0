//! Row-major 2D grids, binary masks and probability vectors.
//!
//! Cell `(x, y)` is column `x` (rightward) and row `y` (downward); it lives at
//! index `y * width + x`. Moments, rasterization and metrics all use these
//! integer cell coordinates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> Grid2D<T> {
    /// Builds a grid, rejecting empty shapes, wrong lengths and non-finite values.
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyGrid);
        }
        if values.len() != width * height {
            return Err(Error::BadGridLength {
                width,
                height,
                values: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be positive");
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be positive");
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.len())
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape(), other.shape());
        self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Grid2D<U> {
        Grid2D {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Bilinear resampling with half-pixel cell centers and edge clamping.
pub fn resize_bilinear<T: Scalar>(g: &Grid2D<T>, out_w: usize, out_h: usize) -> Result<Grid2D<T>> {
    if g.is_empty() || out_w == 0 || out_h == 0 {
        return Err(Error::EmptyGrid);
    }
    let xs = sample_positions(g.width(), out_w);
    let ys = sample_positions(g.height(), out_h);
    let mut values = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &xs {
            let fx = T::lit(fx);
            let top = lerp(g.get(x0, y0), g.get(x1, y0), fx);
            let bottom = lerp(g.get(x0, y1), g.get(x1, y1), fx);
            values.push(lerp(top, bottom, fy));
        }
    }
    Grid2D::new(out_w, out_h, values)
}

// exact when a == b, so constant grids stay constant
#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: T) -> T {
    a + (b - a) * f
}

/// For every output index: the two source indices and the weight of the second.
pub(crate) fn sample_positions(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Block mean over non-overlapping `factor x factor` tiles.
pub fn avg_pool<T: Scalar>(g: &Grid2D<T>, factor: usize) -> Result<Grid2D<T>> {
    if factor == 0 {
        return Err(Error::NotDivisible {
            factor,
            size: g.width(),
        });
    }
    for size in [g.width(), g.height()] {
        if size % factor != 0 {
            return Err(Error::NotDivisible { factor, size });
        }
    }
    let (ow, oh) = (g.width() / factor, g.height() / factor);
    let norm = T::from_usize_lossy(factor * factor);
    Ok(Grid2D::from_fn(ow, oh, |x, y| {
        let mut s = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                s += g.get(x * factor + dx, y * factor + dy);
            }
        }
        s / norm
    }))
}

/// Binary grid with the same layout as [`Grid2D`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyGrid);
        }
        if bits.len() != width * height {
            return Err(Error::BadGridLength {
                width,
                height,
                values: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    /// Cells whose value is at least `threshold`.
    pub fn threshold<T: Scalar>(g: &Grid2D<T>, threshold: T) -> Self {
        Self {
            width: g.width(),
            height: g.height(),
            bits: g.values().iter().map(|&v| v >= threshold).collect(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Coordinates of set cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize> {
        self.check_same_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    pub fn union_count(&self, other: &Self) -> Result<usize> {
        self.check_same_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count())
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_grid<T: Scalar>(&self) -> Grid2D<T> {
        Grid2D {
            width: self.width,
            height: self.height,
            values: self
                .bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }

    /// Nearest-neighbour upsampling: every cell becomes a `factor x factor` block.
    pub fn block_fill(&self, factor: usize) -> Self {
        Self::from_fn(self.width * factor, self.height * factor, |x, y| {
            self.get(x / factor, y / factor)
        })
    }

    /// A coarse cell is set when any fine cell inside its block is set.
    pub fn block_any(&self, factor: usize) -> Result<Self> {
        for size in [self.width, self.height] {
            if factor == 0 || size % factor != 0 {
                return Err(Error::NotDivisible { factor, size });
            }
        }
        let mut out = Self::new(self.width / factor, self.height / factor);
        for (x, y) in self.cells() {
            out.set(x / factor, y / factor, true);
        }
        Ok(out)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    /// Normalizes nonnegative finite weights with a positive total.
    pub fn normalized(entries: Vec<T>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Distribution("empty vector".into()));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Distribution("negative or non-finite entry".into()));
        }
        let total: T = entries.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::Distribution("zero total".into()));
        }
        Ok(Self(entries.into_iter().map(|v| v / total).collect()))
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        let v = T::one() / T::from_usize_lossy(len);
        Self(vec![v; len])
    }

    /// Adds `eps` to every entry and renormalizes.
    pub fn smoothed(&self, eps: T) -> Self {
        let total = self.0.iter().copied().sum::<T>() + eps * T::from_usize_lossy(self.0.len());
        Self(self.0.iter().map(|&v| (v + eps) / total).collect())
    }

    #[inline]
    pub fn entries(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> AsRef<[T]> for ProbVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_bad_input() {
        assert_eq!(Grid2D::<f64>::new(0, 3, vec![]), Err(Error::EmptyGrid));
        assert!(matches!(
            Grid2D::new(2, 2, vec![1.0f64; 3]),
            Err(Error::BadGridLength { .. })
        ));
        assert_eq!(
            Grid2D::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite("grid"))
        );
    }

    #[test]
    fn resize_constant_grid() {
        let g = Grid2D::filled(2, 2, 3.0f64);
        let r = resize_bilinear(&g, 4, 4).unwrap();
        assert_eq!(r.shape(), (4, 4));
        assert!(r.values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn resize_single_cell_broadcasts() {
        let g = Grid2D::filled(1, 1, 7.0f32);
        let r = resize_bilinear(&g, 8, 8).unwrap();
        assert!(r.values().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn resize_two_cells_to_four() {
        // source centres at 0 and 1; outputs sample at -0.25, 0.25, 0.75, 1.25 (clamped)
        let g = Grid2D::new(2, 1, vec![0.0f64, 1.0]).unwrap();
        let r = resize_bilinear(&g, 4, 1).unwrap();
        assert_eq!(r.values(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn avg_pool_examples() {
        let ones = Grid2D::filled(4, 4, 1.0f64);
        assert_eq!(avg_pool(&ones, 2).unwrap(), Grid2D::filled(2, 2, 1.0));
        let g = Grid2D::new(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool(&g, 2).unwrap().values(), &[2.5]);
        assert_eq!(
            avg_pool(&ones, 3),
            Err(Error::NotDivisible { factor: 3, size: 4 })
        );
    }

    #[test]
    fn mask_block_helpers() {
        let mut m = Mask::new(4, 4);
        m.set(3, 1, true);
        let coarse = m.block_any(2).unwrap();
        assert_eq!(coarse.cells().collect::<Vec<_>>(), vec![(1, 0)]);
        let fine = coarse.block_fill(2);
        assert_eq!(fine.count(), 4);
        assert!(m.is_subset_of(&fine));
    }

    #[test]
    fn prob_vector_smoothing_keeps_normalization() {
        let p = ProbVector::normalized(vec![1.0f64, 0.0, 3.0]).unwrap();
        let s = p.smoothed(1e-8);
        assert!((s.entries().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(s.entries().iter().all(|&v| v > 0.0));
        assert!(ProbVector::<f64>::normalized(vec![0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn avg_pool_preserves_mean(vals in proptest::collection::vec(-10.0f64..10.0, 36)) {
            let g = Grid2D::new(6, 6, vals).unwrap();
            for f in [1usize, 2, 3, 6] {
                let p = avg_pool(&g, f).unwrap();
                prop_assert!((p.mean() - g.mean()).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_resize_round_trip(v in -5.0f64..5.0, w in 1usize..9, h in 1usize..9, ow in 1usize..17, oh in 1usize..17) {
            let g = Grid2D::filled(w, h, v);
            let up = resize_bilinear(&g, ow, oh).unwrap();
            let back = resize_bilinear(&up, w, h).unwrap();
            for &x in back.values() {
                prop_assert_eq!(x, v);
            }
        }
    }
}
