//! Scribble propagation: multi-resolution self-attention aggregation, anchor
//! pooling, symmetric KL distance and the top-k neighbour merge.

use crate::error::{Error, Result};
use crate::grid::{resize_bilinear, Grid2D, Mask};
use crate::scalar::Scalar;
use crate::scribble::{boundary_anchors, neighbors8};

/// Smoothing added to every entry before taking logarithms.
pub const KL_SMOOTHING: f64 = 1e-8;

/// Self-attention at one resolution: `r*r` query rows over `r*r` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLevel<T> {
    resolution: usize,
    rows: Vec<T>,
}

impl<T: Scalar> AttentionLevel<T> {
    /// `rows` is row-major `(query, key)`, both indexed `y * r + x`.
    pub fn new(resolution: usize, rows: Vec<T>) -> Result<Self> {
        let n = resolution * resolution;
        if resolution == 0 {
            return Err(Error::EmptyGrid);
        }
        if rows.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{} attention entries for resolution {resolution}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Distribution("negative or non-finite attention".into()));
        }
        Ok(Self { resolution, rows })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn row(&self, query: usize) -> &[T] {
        let n = self.resolution * self.resolution;
        &self.rows[query * n..(query + 1) * n]
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionStack<T> {
    levels: Vec<AttentionLevel<T>>,
}

impl<T: Scalar> SelfAttentionStack<T> {
    pub fn new(levels: Vec<AttentionLevel<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("empty self-attention stack".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[AttentionLevel<T>] {
        &self.levels
    }
}

/// Self-attention over a single `resolution x resolution` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention<T> {
    resolution: usize,
    rows: Vec<T>,
}

impl<T: Scalar> AggregatedAttention<T> {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn row(&self, query: usize) -> &[T] {
        let n = self.resolution * self.resolution;
        &self.rows[query * n..(query + 1) * n]
    }

    pub fn as_level(&self) -> AttentionLevel<T> {
        AttentionLevel {
            resolution: self.resolution,
            rows: self.rows.clone(),
        }
    }
}

/// Resizes every level's key distributions onto `target x target`, maps each
/// target query to its coarse parent by integer division, and mixes the levels
/// with `weights` (normalized here).
pub fn aggregate_self_attention<T: Scalar>(
    stack: &SelfAttentionStack<T>,
    weights: &[f64],
    target: usize,
) -> Result<AggregatedAttention<T>> {
    if weights.len() != stack.levels.len() {
        return Err(Error::Config(format!(
            "{} weights for {} resolutions",
            weights.len(),
            stack.levels.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("negative aggregation weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("aggregation weights sum to zero".into()));
    }
    if target == 0 {
        return Err(Error::EmptyGrid);
    }
    let n = target * target;
    let mut rows = vec![T::zero(); n * n];
    for (level, &w) in stack.levels.iter().zip(weights) {
        let r = level.resolution;
        if target % r != 0 {
            return Err(Error::NotDivisible { factor: r, size: target });
        }
        let delta = target / r;
        let w = T::lit(w / total);
        if w == T::zero() {
            continue;
        }
        for query in 0..r * r {
            let resized = if r == target {
                level.row(query).to_vec()
            } else {
                let key_grid = Grid2D::new(r, r, level.row(query).to_vec())?;
                let up = resize_bilinear(&key_grid, target, target)?;
                let s = up.sum();
                if s <= T::zero() {
                    return Err(Error::Distribution("resized attention row has zero mass".into()));
                }
                up.into_values().into_iter().map(|v| v / s).collect()
            };
            let (qx, qy) = (query % r, query / r);
            for dy in 0..delta {
                for dx in 0..delta {
                    let fine = (qy * delta + dy) * target + qx * delta + dx;
                    let out = &mut rows[fine * n..(fine + 1) * n];
                    for (o, &v) in out.iter_mut().zip(&resized) {
                        *o += w * v;
                    }
                }
            }
        }
    }
    Ok(AggregatedAttention {
        resolution: target,
        rows,
    })
}

/// Pooled anchor distributions over the aggregated key grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid<T> {
    width: usize,
    height: usize,
    key_len: usize,
    rows: Vec<T>,
}

impl<T: Scalar> AnchorGrid<T> {
    /// Builds a grid from explicit (nonnegative) anchor rows, normalizing each.
    pub fn new(width: usize, height: usize, key_len: usize, rows: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || key_len == 0 {
            return Err(Error::EmptyGrid);
        }
        if rows.len() != width * height * key_len {
            return Err(Error::ShapeMismatch(format!(
                "{} anchor entries for {width}x{height}x{key_len}",
                rows.len()
            )));
        }
        let mut rows = rows;
        for chunk in rows.chunks_mut(key_len) {
            normalize_in_place(chunk)?;
        }
        Ok(Self {
            width,
            height,
            key_len,
            rows,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn row(&self, x: usize, y: usize) -> &[T] {
        let i = y * self.width + x;
        &self.rows[i * self.key_len..(i + 1) * self.key_len]
    }
}

fn normalize_in_place<T: Scalar>(row: &mut [T]) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::Distribution("negative or non-finite entry".into()));
    }
    let s: T = row.iter().copied().sum();
    if s <= T::zero() {
        return Err(Error::Distribution("zero-mass row".into()));
    }
    row.iter_mut().for_each(|v| *v /= s);
    Ok(())
}

/// Each anchor is the renormalized mean of its `factor x factor` query rows.
pub fn pool_anchors<T: Scalar>(agg: &AggregatedAttention<T>, factor: usize) -> Result<AnchorGrid<T>> {
    let r = agg.resolution;
    if factor == 0 || r % factor != 0 {
        return Err(Error::NotDivisible { factor, size: r });
    }
    let a = r / factor;
    let n = r * r;
    let mut rows = vec![T::zero(); a * a * n];
    for ay in 0..a {
        for ax in 0..a {
            let out = &mut rows[(ay * a + ax) * n..(ay * a + ax + 1) * n];
            for dy in 0..factor {
                for dx in 0..factor {
                    let q = (ay * factor + dy) * r + ax * factor + dx;
                    for (o, &v) in out.iter_mut().zip(agg.row(q)) {
                        *o += v;
                    }
                }
            }
        }
    }
    AnchorGrid::new(a, a, n, rows)
}

/// Smoothed distribution with cached logarithms.
#[derive(Debug, Clone)]
pub struct SmoothedDist<T> {
    p: Vec<T>,
    ln_p: Vec<T>,
}

impl<T: Scalar> SmoothedDist<T> {
    pub fn new(entries: &[T]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Distribution("empty vector".into()));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Distribution("negative or non-finite entry".into()));
        }
        let eps = T::lit(KL_SMOOTHING);
        let total = entries.iter().copied().sum::<T>() + eps * T::from_usize_lossy(entries.len());
        let p: Vec<T> = entries.iter().map(|&v| (v + eps) / total).collect();
        let ln_p = p.iter().map(|v| v.ln()).collect();
        Ok(Self { p, ln_p })
    }

    pub fn probs(&self) -> &[T] {
        &self.p
    }

    /// `KL(a||b)/2 + KL(b||a)/2`, written as one sum so both properties hold
    /// bit-exactly: swapping arguments negates both factors of every term.
    pub fn symmetric_kl(&self, other: &Self) -> Result<T> {
        if self.p.len() != other.p.len() {
            return Err(Error::ShapeMismatch(format!(
                "distributions of length {} and {}",
                self.p.len(),
                other.p.len()
            )));
        }
        let half = T::lit(0.5);
        let s: T = self
            .p
            .iter()
            .zip(&other.p)
            .zip(self.ln_p.iter().zip(&other.ln_p))
            .map(|((&a, &b), (&la, &lb))| (a - b) * (la - lb))
            .sum();
        Ok(half * s)
    }
}

/// Symmetric KL distance between two distributions after smoothing.
pub fn symmetric_kl<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    SmoothedDist::new(p)?.symmetric_kl(&SmoothedDist::new(q)?)
}

/// Anchor-level scribble regions.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState {
    regions: Vec<Mask>,
    /// Anchors owned by any region; never re-evaluated.
    visited: Mask,
}

impl PropagationState {
    pub fn new(regions: Vec<Mask>) -> Result<Self> {
        let first = regions.first().ok_or(Error::EmptyScribbleSet)?;
        let mut visited = Mask::new(first.width(), first.height());
        for r in &regions {
            if r.is_empty() {
                return Err(Error::EmptyMask);
            }
            visited = visited.union(r)?;
        }
        Ok(Self { regions, visited })
    }

    pub fn regions(&self) -> &[Mask] {
        &self.regions
    }

    pub fn visited(&self) -> &Mask {
        &self.visited
    }

    pub fn cell_counts(&self) -> Vec<usize> {
        self.regions.iter().map(Mask::count).collect()
    }
}

/// One anchor absorbed into a scribble region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge<T> {
    pub scribble: usize,
    pub anchor: (usize, usize),
    pub distance: T,
}

/// Evaluates every unvisited 8-neighbour of each region's boundary against the
/// region's mean anchor distribution and absorbs the `top_k` closest ones with
/// distance below `tau`, ranked over all scribbles together.
///
/// Ranking is lexicographic on (distance, anchor row-major index, scribble index);
/// an anchor claimed by several scribbles goes to its first claim in that order.
pub fn merge_neighbors<T: Scalar>(
    state: &PropagationState,
    anchors: &AnchorGrid<T>,
    tau: T,
    top_k: usize,
) -> Result<(PropagationState, Vec<Merge<T>>)> {
    let (w, h) = (anchors.width(), anchors.height());
    if state.visited.shape() != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "regions {:?} vs anchors {w}x{h}",
            state.visited.shape()
        )));
    }
    // best claim per anchor: (distance, scribble)
    let mut best: Vec<Option<(T, usize)>> = vec![None; w * h];
    let mut anchor_cache: Vec<Option<SmoothedDist<T>>> = vec![None; w * h];
    for (s, region) in state.regions.iter().enumerate() {
        let mean = region_mean(region, anchors)?;
        let mean = SmoothedDist::new(&mean)?;
        let mut evaluated = Mask::new(w, h);
        for (bx, by) in boundary_anchors(region)? {
            for (nx, ny) in neighbors8(bx, by, w, h).flatten() {
                if state.visited.get(nx, ny) || evaluated.get(nx, ny) {
                    continue;
                }
                evaluated.set(nx, ny, true);
                let idx = ny * w + nx;
                if anchor_cache[idx].is_none() {
                    anchor_cache[idx] = Some(SmoothedDist::new(anchors.row(nx, ny))?);
                }
                let d = mean.symmetric_kl(anchor_cache[idx].as_ref().expect("cached"))?;
                if d < tau {
                    let replace = match best[idx] {
                        None => true,
                        Some((bd, bs)) => (d, s) < (bd, bs),
                    };
                    if replace {
                        best[idx] = Some((d, s));
                    }
                }
            }
        }
    }
    let mut candidates: Vec<(T, usize, usize)> = best
        .iter()
        .enumerate()
        .filter_map(|(idx, b)| b.map(|(d, s)| (d, idx, s)))
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    candidates.truncate(top_k);

    let mut next = state.clone();
    let merges = candidates
        .into_iter()
        .map(|(distance, idx, s)| {
            let anchor = (idx % w, idx / w);
            next.regions[s].set(anchor.0, anchor.1, true);
            next.visited.set(anchor.0, anchor.1, true);
            Merge {
                scribble: s,
                anchor,
                distance,
            }
        })
        .collect();
    Ok((next, merges))
}

/// Mean anchor distribution inside a region.
pub fn region_mean<T: Scalar>(region: &Mask, anchors: &AnchorGrid<T>) -> Result<Vec<T>> {
    if region.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut acc = vec![T::zero(); anchors.key_len()];
    let mut count = 0usize;
    for (x, y) in region.cells() {
        for (a, &v) in acc.iter_mut().zip(anchors.row(x, y)) {
            *a += v;
        }
        count += 1;
    }
    let c = T::from_usize_lossy(count);
    acc.iter_mut().for_each(|v| *v /= c);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform_level(r: usize) -> AttentionLevel<f64> {
        let n = r * r;
        AttentionLevel::new(r, vec![1.0 / n as f64; n * n]).unwrap()
    }

    #[test]
    fn single_level_at_target_is_identity() {
        let r = 4;
        let n = r * r;
        let rows: Vec<f64> = (0..n)
            .flat_map(|q| {
                let raw: Vec<f64> = (0..n).map(|k| ((q * 7 + k * 3) % 11) as f64 + 0.5).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(move |v| v / s)
            })
            .collect();
        let stack = SelfAttentionStack::new(vec![AttentionLevel::new(r, rows.clone()).unwrap()]).unwrap();
        let agg = aggregate_self_attention(&stack, &[1.0], r).unwrap();
        assert_eq!(agg.rows, rows);
    }

    #[test]
    fn uniform_levels_stay_uniform() {
        let stack = SelfAttentionStack::new(vec![uniform_level(2), uniform_level(4)]).unwrap();
        let agg = aggregate_self_attention(&stack, &[0.3, 0.7], 4).unwrap();
        for v in &agg.rows {
            assert_abs_diff_eq!(*v, 1.0 / 16.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn aggregation_errors() {
        let stack = SelfAttentionStack::new(vec![uniform_level(3)]).unwrap();
        assert!(matches!(aggregate_self_attention(&stack, &[1.0], 4), Err(Error::NotDivisible { .. })));
        assert!(matches!(aggregate_self_attention(&stack, &[0.5, 0.5], 3), Err(Error::Config(_))));
    }

    #[test]
    fn pool_factor_one_and_full() {
        let stack = SelfAttentionStack::new(vec![uniform_level(2), uniform_level(4)]).unwrap();
        let agg = aggregate_self_attention(&stack, &[0.5, 0.5], 4).unwrap();
        let same = pool_anchors(&agg, 1).unwrap();
        for q in 0..16 {
            for (a, b) in same.row(q % 4, q / 4).iter().zip(agg.row(q)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
            }
        }
        let global = pool_anchors(&agg, 4).unwrap();
        assert_eq!((global.width(), global.height()), (1, 1));
        assert!(matches!(pool_anchors(&agg, 3), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(symmetric_kl(&[0.2f64, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let d = symmetric_kl(&[0.5f64, 0.5], &[0.25, 0.75]).unwrap();
        let exact = 0.5 * (0.5 * (2f64).ln() + 0.5 * (2.0f64 / 3.0).ln())
            + 0.5 * (0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln());
        assert_abs_diff_eq!(d, exact, epsilon = 1e-7);
        assert!((d - 0.1373).abs() < 5e-5);
        let far = symmetric_kl(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert!((far - (1e8f64).ln()).abs() < 1e-3, "{far}");
        assert!(matches!(symmetric_kl(&[1.0f64], &[0.5, 0.5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn merge_respects_threshold() {
        // 3x3 anchors, identical rows except the far corner
        let key = 4;
        let mut rows = Vec::new();
        for i in 0..9 {
            if i == 8 {
                rows.extend([0.97, 0.01, 0.01, 0.01]);
            } else {
                rows.extend([0.25; 4]);
            }
        }
        let anchors = AnchorGrid::new(3, 3, key, rows).unwrap();
        let mut region = Mask::new(3, 3);
        region.set(1, 1, true);
        let state = PropagationState::new(vec![region]).unwrap();

        let (same, merges) = merge_neighbors(&state, &anchors, 1e-12, 20).unwrap();
        assert_eq!(merges.len(), 7);
        assert!(!same.regions()[0].get(2, 2));

        let (_, none) = merge_neighbors(&state, &anchors, -1.0, 20).unwrap();
        assert!(none.is_empty());

        let (limited, two) = merge_neighbors(&state, &anchors, 1e-12, 2).unwrap();
        assert_eq!(two.len(), 2);
        // ties broken by row-major anchor index
        assert_eq!(two[0].anchor, (0, 0));
        assert_eq!(two[1].anchor, (1, 0));
        assert_eq!(limited.regions()[0].count(), 3);
    }

    #[test]
    fn empty_region_is_rejected() {
        assert_eq!(PropagationState::new(vec![Mask::new(2, 2)]), Err(Error::EmptyMask));
    }
}
