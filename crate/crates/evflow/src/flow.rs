//! Dense flow maps, per-window flow sequences, bilinear sampling, pyramid
//! up/downsampling, and displacement reconstruction along flow trajectories.
//!
//! Flow is stored in px/partition: multiplying by a time span in partition
//! units gives pixels.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{CameraGeometry, PartitionScheme};
use crate::scalar::{sc, Scalar};

/// Bilinear footprint of a (clamped) sample position on an H×W grid.
///
/// `x0..x1`/`y0..y1` are always valid indices; `fx`/`fy` are the fractional
/// weights toward `x1`/`y1`. `d_active_*` is false where the position was
/// clamped to the border, in which case the spatial derivative of the sampled
/// value is zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bilin<T> {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub fx: T,
    pub fy: T,
    pub d_active_x: bool,
    pub d_active_y: bool,
}

impl<T: Scalar> Bilin<T> {
    pub(crate) fn new(width: usize, height: usize, x: T, y: T) -> Self {
        let (x0, x1, fx, d_active_x) = Self::axis(width, x);
        let (y0, y1, fy, d_active_y) = Self::axis(height, y);
        Bilin { y0, y1, x0, x1, fx, fy, d_active_x, d_active_y }
    }

    fn axis(n: usize, c: T) -> (usize, usize, T, bool) {
        let max = sc::<T>((n - 1) as f64);
        let inside = c >= T::zero() && c <= max;
        let c = c.max(T::zero()).min(max);
        if n == 1 {
            return (0, 0, T::zero(), false);
        }
        let i0 = c.floor().to_f64_s() as usize;
        let i0 = i0.min(n - 2);
        let f = c - sc::<T>(i0 as f64);
        (i0, i0 + 1, f, inside)
    }

    /// Interpolated value of `g` at the footprint.
    pub(crate) fn sample(&self, g: &Array2<T>) -> T {
        let one = T::one();
        let top = g[(self.y0, self.x0)] * (one - self.fx) + g[(self.y0, self.x1)] * self.fx;
        let bot = g[(self.y1, self.x0)] * (one - self.fx) + g[(self.y1, self.x1)] * self.fx;
        top * (one - self.fy) + bot * self.fy
    }

    /// The four (row, col, weight) deposits of this footprint.
    pub(crate) fn weights(&self) -> [(usize, usize, T); 4] {
        let one = T::one();
        [
            (self.y0, self.x0, (one - self.fy) * (one - self.fx)),
            (self.y0, self.x1, (one - self.fy) * self.fx),
            (self.y1, self.x0, self.fy * (one - self.fx)),
            (self.y1, self.x1, self.fy * self.fx),
        ]
    }

    /// d(sample)/dx; zero in the clamp region.
    pub(crate) fn d_dx(&self, g: &Array2<T>) -> T {
        if !self.d_active_x {
            return T::zero();
        }
        let one = T::one();
        let top = g[(self.y0, self.x1)] - g[(self.y0, self.x0)];
        let bot = g[(self.y1, self.x1)] - g[(self.y1, self.x0)];
        top * (one - self.fy) + bot * self.fy
    }

    /// d(sample)/dy; zero in the clamp region.
    pub(crate) fn d_dy(&self, g: &Array2<T>) -> T {
        if !self.d_active_y {
            return T::zero();
        }
        let one = T::one();
        let left = g[(self.y1, self.x0)] - g[(self.y0, self.x0)];
        let right = g[(self.y1, self.x1)] - g[(self.y0, self.x1)];
        left * (one - self.fx) + right * self.fx
    }
}

/// Dense per-pixel flow for one input partition, px/partition.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap<T> {
    pub u: Array2<T>,
    pub v: Array2<T>,
}

impl<T: Scalar> FlowMap<T> {
    /// Wrap two equally shaped, finite grids.
    pub fn new(u: Array2<T>, v: Array2<T>) -> Result<Self> {
        if u.dim() != v.dim() {
            return Err(Error::GeometryMismatch(format!(
                "u is {:?} but v is {:?}",
                u.dim(),
                v.dim()
            )));
        }
        if u.iter().chain(v.iter()).any(|c| !c.is_finite()) {
            return Err(Error::Config("flow map contains non-finite values".into()));
        }
        Ok(FlowMap { u, v })
    }

    pub fn zeros(geometry: CameraGeometry) -> Self {
        let shape = (geometry.height as usize, geometry.width as usize);
        FlowMap { u: Array2::zeros(shape), v: Array2::zeros(shape) }
    }

    pub fn constant(geometry: CameraGeometry, u: T, v: T) -> Self {
        let shape = (geometry.height as usize, geometry.width as usize);
        FlowMap { u: Array2::from_elem(shape, u), v: Array2::from_elem(shape, v) }
    }

    pub fn width(&self) -> usize {
        self.u.ncols()
    }

    pub fn height(&self) -> usize {
        self.u.nrows()
    }

    pub fn geometry(&self) -> CameraGeometry {
        CameraGeometry { width: self.width() as u32, height: self.height() as u32 }
    }

    /// Convert the scalar type (f32 ↔ f64) through f64.
    pub fn cast<U: Scalar>(&self) -> FlowMap<U> {
        FlowMap {
            u: self.u.mapv(|c| U::from_f64_s(c.to_f64_s())),
            v: self.v.mapv(|c| U::from_f64_s(c.to_f64_s())),
        }
    }
}

/// Bilinear flow lookup with clamp-to-edge border policy.
///
/// Exact at integer in-frame coordinates; outside the frame the position is
/// clamped to the border cell, keeping warps defined for drifting events.
pub fn sample_flow<T: Scalar>(map: &FlowMap<T>, x: T, y: T) -> (T, T) {
    let bl = Bilin::new(map.width(), map.height(), x, y);
    (bl.sample(&map.u), bl.sample(&map.v))
}

/// R flow maps covering one training window, map k for partition k.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence<T> {
    maps: Vec<FlowMap<T>>,
    scheme: PartitionScheme,
}

impl<T: Scalar> FlowSequence<T> {
    pub fn new(maps: Vec<FlowMap<T>>, scheme: PartitionScheme) -> Result<Self> {
        if maps.len() != scheme.r {
            return Err(Error::Config(format!(
                "flow sequence needs R = {} maps, got {}",
                scheme.r,
                maps.len()
            )));
        }
        if let Some(first) = maps.first() {
            if maps.iter().any(|m| m.u.dim() != first.u.dim()) {
                return Err(Error::GeometryMismatch(
                    "flow maps in a sequence must share geometry".into(),
                ));
            }
        }
        Ok(FlowSequence { maps, scheme })
    }

    pub fn zeros(geometry: CameraGeometry, scheme: PartitionScheme) -> Self {
        let maps = (0..scheme.r).map(|_| FlowMap::zeros(geometry)).collect();
        FlowSequence { maps, scheme }
    }

    pub fn constant(geometry: CameraGeometry, scheme: PartitionScheme, u: T, v: T) -> Self {
        let maps = (0..scheme.r).map(|_| FlowMap::constant(geometry, u, v)).collect();
        FlowSequence { maps, scheme }
    }

    pub fn maps(&self) -> &[FlowMap<T>] {
        &self.maps
    }

    pub fn map(&self, k: usize) -> &FlowMap<T> {
        &self.maps[k]
    }

    pub fn into_maps(self) -> Vec<FlowMap<T>> {
        self.maps
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    pub fn r(&self) -> usize {
        self.scheme.r
    }

    pub fn geometry(&self) -> CameraGeometry {
        self.maps[0].geometry()
    }

    pub fn cast<U: Scalar>(&self) -> FlowSequence<U> {
        FlowSequence { maps: self.maps.iter().map(|m| m.cast()).collect(), scheme: self.scheme }
    }
}

/// Bilinearly upsample `coarse` to `target`, multiplying magnitudes by
/// `scale_factor` (pixel units rescale with resolution).
///
/// Fine value at (x, y) interpolates the coarse grid at (x/f, y/f), so fine
/// samples at multiples of f reproduce (scaled) coarse values exactly.
pub fn upsample_flow<T: Scalar>(
    coarse: &FlowMap<T>,
    target: CameraGeometry,
    scale_factor: T,
) -> Result<FlowMap<T>> {
    let (cw, ch) = (coarse.width(), coarse.height());
    let (tw, th) = (target.width as usize, target.height as usize);
    if tw % cw != 0 || th % ch != 0 || tw / cw != th / ch || tw < cw {
        return Err(Error::GeometryMismatch(format!(
            "target {tw}x{th} is not an integer multiple of coarse {cw}x{ch}"
        )));
    }
    let f = sc::<T>((tw / cw) as f64);
    let mut u = Array2::zeros((th, tw));
    let mut v = Array2::zeros((th, tw));
    for y in 0..th {
        for x in 0..tw {
            let bl = Bilin::new(cw, ch, sc::<T>(x as f64) / f, sc::<T>(y as f64) / f);
            u[(y, x)] = bl.sample(&coarse.u) * scale_factor;
            v[(y, x)] = bl.sample(&coarse.v) * scale_factor;
        }
    }
    Ok(FlowMap { u, v })
}

/// Average-pool `fine` by `factor` and divide magnitudes by `factor`; the
/// inverse of [`upsample_flow`] with `scale_factor = factor` on constant maps.
pub fn downsample_flow<T: Scalar>(fine: &FlowMap<T>, factor: usize) -> Result<FlowMap<T>> {
    let (fw, fh) = (fine.width(), fine.height());
    if factor == 0 || fw % factor != 0 || fh % factor != 0 {
        return Err(Error::GeometryMismatch(format!(
            "cannot pool {fw}x{fh} by factor {factor}"
        )));
    }
    let (cw, ch) = (fw / factor, fh / factor);
    let inv_mass = sc::<T>(1.0 / (factor * factor) as f64);
    let inv_mag = sc::<T>(1.0 / factor as f64);
    let mut u = Array2::zeros((ch, cw));
    let mut v = Array2::zeros((ch, cw));
    for cy in 0..ch {
        for cx in 0..cw {
            let mut su = T::zero();
            let mut sv = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    su += fine.u[(cy * factor + dy, cx * factor + dx)];
                    sv += fine.v[(cy * factor + dy, cx * factor + dx)];
                }
            }
            u[(cy, cx)] = su * inv_mass * inv_mag;
            v[(cy, cx)] = sv * inv_mass * inv_mag;
        }
    }
    Ok(FlowMap { u, v })
}

/// Per-pixel displacement over a ground-truth interval, px.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementMap<T> {
    pub dx: Array2<T>,
    pub dy: Array2<T>,
    /// False where the trajectory left the frame.
    pub valid: Array2<bool>,
}

impl<T: Scalar> DisplacementMap<T> {
    pub fn geometry(&self) -> CameraGeometry {
        CameraGeometry { width: self.dx.ncols() as u32, height: self.dx.nrows() as u32 }
    }

    pub fn cast<U: Scalar>(&self) -> DisplacementMap<U> {
        DisplacementMap {
            dx: self.dx.mapv(|c| U::from_f64_s(c.to_f64_s())),
            dy: self.dy.mapv(|c| U::from_f64_s(c.to_f64_s())),
            valid: self.valid.clone(),
        }
    }
}

/// Integrate each pixel's trajectory through the first `n_gt_partitions` maps
/// and report the total displacement (mean sampled flow × n).
///
/// The trace starts at the pixel center at the window start; positions are
/// advanced one partition at a time, sampling flow at the current (moved)
/// position. Pixels whose trace leaves [0,W−1]×[0,H−1] after any step are
/// marked invalid.
pub fn reconstruct_displacement<T: Scalar>(
    seq: &FlowSequence<T>,
    n_gt_partitions: usize,
) -> Result<DisplacementMap<T>> {
    if n_gt_partitions < 1 {
        return Err(Error::Config("need at least one partition to reconstruct".into()));
    }
    if n_gt_partitions > seq.r() {
        return Err(Error::Config(format!(
            "n_gt_partitions {} exceeds R = {}",
            n_gt_partitions,
            seq.r()
        )));
    }
    let geom = seq.geometry();
    let (w, h) = (geom.width as usize, geom.height as usize);
    let rows: Vec<(Vec<T>, Vec<T>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut dx_row = vec![T::zero(); w];
            let mut dy_row = vec![T::zero(); w];
            let mut valid_row = vec![true; w];
            for x in 0..w {
                let mut px = sc::<T>(x as f64);
                let mut py = sc::<T>(y as f64);
                let mut sum_u = T::zero();
                let mut sum_v = T::zero();
                let mut ok = true;
                for k in 0..n_gt_partitions {
                    let (fu, fv) = sample_flow(seq.map(k), px, py);
                    sum_u += fu;
                    sum_v += fv;
                    px += fu;
                    py += fv;
                    if !geom.contains_point(px.to_f64_s(), py.to_f64_s()) {
                        ok = false;
                        break;
                    }
                }
                dx_row[x] = sum_u;
                dy_row[x] = sum_v;
                valid_row[x] = ok;
            }
            (dx_row, dy_row, valid_row)
        })
        .collect();

    let mut dx = Array2::zeros((h, w));
    let mut dy = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), true);
    for (y, (dx_row, dy_row, valid_row)) in rows.into_iter().enumerate() {
        for x in 0..w {
            dx[(y, x)] = dx_row[x];
            dy[(y, x)] = dy_row[x];
            valid[(y, x)] = valid_row[x];
        }
    }
    Ok(DisplacementMap { dx, dy, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn geom(w: u32, h: u32) -> CameraGeometry {
        CameraGeometry::new(w, h).unwrap()
    }

    fn scheme(r: usize) -> PartitionScheme {
        PartitionScheme::new(1000, r, 0).unwrap()
    }

    #[test]
    fn constant_map_samples_constant_everywhere() {
        let map = FlowMap::constant(geom(8, 6), 2.0f64, -1.0);
        for &(x, y) in &[(0.0, 0.0), (3.7, 2.2), (-5.0, 100.0), (7.0, 5.0)] {
            assert_eq!(sample_flow(&map, x, y), (2.0, -1.0));
        }
    }

    #[test]
    fn sampling_reproduces_grid_values_at_integer_points() {
        let mut map = FlowMap::zeros(geom(6, 5));
        map.u[(4, 3)] = 7.25;
        map.v[(4, 3)] = -0.5;
        assert_eq!(sample_flow(&map, 3.0f64, 4.0), (7.25, -0.5));
        // border corner is exact as well
        map.u[(4, 5)] = 2.0;
        assert_eq!(sample_flow(&map, 5.0f64, 4.0).0, 2.0);
    }

    #[test]
    fn hand_bilinear_on_2x2_grid() {
        // corners (x,y): (0,0)=0, (1,0)=1, (0,1)=2, (1,1)=3
        let u = ndarray::array![[0.0f64, 1.0], [2.0, 3.0]];
        let v = Array2::zeros((2, 2));
        let map = FlowMap::new(u, v).unwrap();
        assert_abs_diff_eq!(sample_flow(&map, 0.5, 0.5).0, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn flow_map_rejects_non_finite_and_mismatched() {
        let mut u = Array2::zeros((3, 3));
        let v = Array2::zeros((3, 3));
        u[(1, 1)] = f64::NAN;
        assert!(FlowMap::new(u, v.clone()).is_err());
        assert!(FlowMap::new(Array2::zeros((3, 4)), v).is_err());
    }

    #[test]
    fn upsample_constant_doubles_magnitude() {
        let coarse = FlowMap::constant(geom(4, 4), 1.5f64, -2.0);
        let fine = upsample_flow(&coarse, geom(8, 8), 2.0).unwrap();
        assert!(fine.u.iter().all(|&c| c == 3.0));
        assert!(fine.v.iter().all(|&c| c == -4.0));
    }

    #[test]
    fn upsample_then_pool_is_identity_on_constant_maps() {
        let coarse = FlowMap::constant(geom(4, 4), 0.75f64, 0.25);
        let fine = upsample_flow(&coarse, geom(16, 16), 4.0).unwrap();
        let back = downsample_flow(&fine, 4).unwrap();
        for (a, b) in back.u.iter().zip(coarse.u.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsample_matches_direct_bilinear_oracle_at_even_coordinates() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut coarse = FlowMap::zeros(geom(4, 4));
        for c in coarse.u.iter_mut().chain(coarse.v.iter_mut()) {
            *c = rng.gen_range(-3.0..3.0);
        }
        let fine = upsample_flow(&coarse, geom(8, 8), 2.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_abs_diff_eq!(
                    fine.u[(2 * y, 2 * x)],
                    2.0 * coarse.u[(y, x)],
                    epsilon = 1e-12
                );
                assert_abs_diff_eq!(
                    fine.v[(2 * y, 2 * x)],
                    2.0 * coarse.v[(y, x)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn upsample_rejects_non_integer_factor() {
        let coarse = FlowMap::<f64>::zeros(geom(4, 4));
        assert!(upsample_flow(&coarse, geom(10, 8), 2.0).is_err());
        assert!(upsample_flow(&coarse, geom(8, 12), 2.0).is_err());
    }

    #[test]
    fn zero_flow_reconstructs_zero_displacement() {
        let seq = FlowSequence::<f64>::zeros(geom(8, 8), scheme(4));
        let disp = reconstruct_displacement(&seq, 4).unwrap();
        assert!(disp.dx.iter().all(|&d| d == 0.0));
        assert!(disp.dy.iter().all(|&d| d == 0.0));
        assert!(disp.valid.iter().all(|&v| v));
    }

    #[test]
    fn constant_flow_displacement_is_n_times_c() {
        let seq = FlowSequence::constant(geom(24, 8), scheme(10), 1.0f64, 0.0);
        let disp = reconstruct_displacement(&seq, 10).unwrap();
        // pixels at least 10 px from the right border stay in frame
        for x in 0..13 {
            assert_abs_diff_eq!(disp.dx[(4, x)], 10.0, epsilon = 1e-12);
            assert_abs_diff_eq!(disp.dy[(4, x)], 0.0, epsilon = 1e-12);
            assert!(disp.valid[(4, x)]);
        }
        // near the right border the trace leaves the frame
        assert!(!disp.valid[(4, 20)]);
    }

    #[test]
    fn piecewise_flow_displacement_follows_the_trajectory() {
        let g = geom(16, 16);
        let s = scheme(10);
        let mut maps = Vec::new();
        for _ in 0..5 {
            maps.push(FlowMap::constant(g, 1.0f64, 0.0));
        }
        for _ in 0..5 {
            maps.push(FlowMap::constant(g, 0.0f64, 1.0));
        }
        let seq = FlowSequence::new(maps, s).unwrap();
        let disp = reconstruct_displacement(&seq, 10).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_abs_diff_eq!(disp.dx[(y, x)], 5.0, epsilon = 1e-12);
                assert_abs_diff_eq!(disp.dy[(y, x)], 5.0, epsilon = 1e-12);
                assert!(disp.valid[(y, x)]);
            }
        }
    }

    #[test]
    fn displacement_invariant_to_splitting_constant_maps() {
        let g = geom(32, 32);
        let whole = FlowSequence::constant(g, scheme(2), 0.5f64, -0.25);
        let halves = FlowSequence::constant(g, scheme(4), 0.25f64, -0.125);
        let d2 = reconstruct_displacement(&whole, 2).unwrap();
        let d4 = reconstruct_displacement(&halves, 4).unwrap();
        let mut compared = 0;
        for y in 0..32 {
            for x in 0..32 {
                // the split checks more intermediate points, so its validity
                // can only shrink
                if d4.valid[(y, x)] {
                    assert!(d2.valid[(y, x)]);
                    assert_abs_diff_eq!(d2.dx[(y, x)], d4.dx[(y, x)], epsilon = 1e-12);
                    assert_abs_diff_eq!(d2.dy[(y, x)], d4.dy[(y, x)], epsilon = 1e-12);
                    compared += 1;
                }
            }
        }
        assert!(compared > 900, "expected most pixels valid, got {compared}");
    }

    #[test]
    fn reconstruct_validates_partition_count() {
        let seq = FlowSequence::<f64>::zeros(geom(4, 4), scheme(4));
        assert!(reconstruct_displacement(&seq, 0).is_err());
        assert!(reconstruct_displacement(&seq, 5).is_err());
    }

    proptest! {
        #[test]
        fn sample_stays_within_grid_extremes(
            cells in proptest::collection::vec(-10.0f64..10.0, 12),
            x in -2.0f64..7.0,
            y in -2.0f64..5.0,
        ) {
            let u = Array2::from_shape_vec((3, 4), cells.clone()).unwrap();
            let map = FlowMap::new(u, Array2::zeros((3, 4))).unwrap();
            let lo = cells.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (s, _) = sample_flow(&map, x, y);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }

        #[test]
        fn sample_is_continuous(
            cells in proptest::collection::vec(-5.0f64..5.0, 12),
            x in 0.0f64..3.0,
            y in 0.0f64..2.0,
            delta in -1e-6f64..1e-6,
        ) {
            let u = Array2::from_shape_vec((3, 4), cells).unwrap();
            let map = FlowMap::new(u, Array2::zeros((3, 4))).unwrap();
            let (a, _) = sample_flow(&map, x, y);
            let (b, _) = sample_flow(&map, x + delta, y);
            // slope is bounded by the largest neighbor difference (< 10 here)
            prop_assert!((a - b).abs() <= 20.0 * delta.abs() + 1e-12);
        }
    }
}
