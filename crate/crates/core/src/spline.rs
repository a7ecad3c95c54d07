//! Univariate B-spline bases and their centered versions.
//!
//! A basis of dimension `k` and order `ℓ` (degree `ℓ - 1`) on `[lo, hi]` uses
//! `k - ℓ` interior knots and clamped boundaries (each endpoint repeated `ℓ`
//! times). The centered basis subtracts from every element its mean over the
//! interval and drops the last element, leaving `k - 1` functions that each
//! integrate to zero.

use crate::error::{PlamError, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Highest spline order supported by the stack-allocated evaluator.
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnotPlacement {
    Uniform,
    Quantile,
}

impl std::str::FromStr for KnotPlacement {
    type Err = PlamError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(KnotPlacement::Uniform),
            "quantile" => Ok(KnotPlacement::Quantile),
            other => Err(PlamError::InvalidConfig(format!("unknown knot placement '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    interior: Vec<f64>,
    lo: f64,
    hi: f64,
    order: usize,
}

impl KnotVector {
    /// Builds a knot vector on an explicit interval. `x` is only read for quantile placement.
    pub fn on_interval(lo: f64, hi: f64, x: &[f64], k: usize, order: usize, placement: KnotPlacement) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(PlamError::InvalidOrder(order));
        }
        if k < order {
            return Err(PlamError::InvalidBasisDimension { k, order });
        }
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(PlamError::DegenerateSample(format!("interval [{lo}, {hi}] has no width")));
        }
        let n_interior = k - order;
        let interior: Vec<f64> = match placement {
            KnotPlacement::Uniform => {
                let step = (hi - lo) / (n_interior + 1) as f64;
                (1..=n_interior).map(|i| lo + step * i as f64).collect()
            }
            KnotPlacement::Quantile => {
                let mut sorted: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                sorted.dedup();
                if sorted.len() < k {
                    return Err(PlamError::DegenerateSample(format!(
                        "{} distinct values cannot support {} basis functions",
                        sorted.len(),
                        k
                    )));
                }
                let mut all: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (1..=n_interior).map(|i| quantile_sorted(&all, i as f64 / (n_interior + 1) as f64)).collect()
            }
        };
        for (i, &t) in interior.iter().enumerate() {
            if t <= lo || t >= hi || (i > 0 && t <= interior[i - 1]) {
                return Err(PlamError::DegenerateSample(format!(
                    "interior knots {interior:?} are not strictly increasing inside ({lo}, {hi})"
                )));
            }
        }
        Ok(KnotVector { interior, lo, hi, order })
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of (uncentered) basis functions.
    pub fn dim(&self) -> usize {
        self.interior.len() + self.order
    }

    /// Full padded knot sequence.
    pub fn knots(&self) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.interior.len() + 2 * self.order);
        u.extend(std::iter::repeat_n(self.lo, self.order));
        u.extend_from_slice(&self.interior);
        u.extend(std::iter::repeat_n(self.hi, self.order));
        u
    }

    /// Breakpoints `lo, interior..., hi`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.interior.len() + 2);
        b.push(self.lo);
        b.extend_from_slice(&self.interior);
        b.push(self.hi);
        b
    }

    /// Knot at padded position `i`, without allocating the padded vector.
    #[inline]
    fn knot(&self, i: usize) -> f64 {
        if i < self.order {
            self.lo
        } else if i < self.order + self.interior.len() {
            self.interior[i - self.order]
        } else {
            self.hi
        }
    }

    /// Evaluates the nonzero basis functions at `t` (which must lie in the interval).
    /// Writes `order` values into `vals` and returns the index of the first one.
    #[inline]
    fn local_basis(&self, t: f64, vals: &mut [f64; MAX_ORDER]) -> usize {
        let p = self.order - 1;
        let dim = self.dim();
        // span index i in [p, dim-1] with knot(i) <= t < knot(i+1)
        let span = if t >= self.hi {
            dim - 1
        } else {
            let pos = self.interior.partition_point(|&u| u <= t);
            p + pos
        };
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knot(span + 1 - j);
            right[j] = self.knot(span + j) - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        span - p
    }

    /// Writes all `dim()` basis values at `t` into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(t >= self.lo && t <= self.hi) {
            return Err(PlamError::OutOfRange { t, lo: self.lo, hi: self.hi });
        }
        debug_assert_eq!(out.len(), self.dim());
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut vals = [0.0; MAX_ORDER];
        let first = self.local_basis(t, &mut vals);
        out[first..first + self.order].copy_from_slice(&vals[..self.order]);
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }
}

/// Builds a knot vector on the observed range `[min(x), max(x)]`.
pub fn make_knots(x: &[f64], k: usize, order: usize, placement: KnotPlacement) -> Result<KnotVector> {
    if order < 1 {
        return Err(PlamError::InvalidOrder(order));
    }
    if x.is_empty() {
        return Err(PlamError::DegenerateSample("empty covariate sample".into()));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(PlamError::DegenerateSample("all covariate values are equal".into()));
    }
    KnotVector::on_interval(lo, hi, x, k, order, placement)
}

/// Sample quantile of a sorted slice with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mf = m as f64;
    for i in 0..m.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..m {
                let p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j as f64 + 1.0) * z * p1 - j as f64 * p2) / (j as f64 + 1.0);
            }
            dp = mf * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[m - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// Node count that integrates the product of two centered elements of the given order exactly.
pub fn quadrature_nodes_for_order(order: usize) -> usize {
    let degree = 2 * (order - 1);
    (degree + 1).div_ceil(2) + 1
}

/// Centered B-spline basis with its Gram matrix.
///
/// Element `s` is `B̃_s(t) - offset_s` with `offset_s` the mean of `B̃_s` over the
/// interval; the last uncentered element is dropped. The Gram matrix holds
/// `(1/|I|) ∫_I B_s B_s'`, which on `[0, 1]` is the plain integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredSplineBasis {
    knots: KnotVector,
    offsets: Vec<f64>,
    gram: DMatrix<f64>,
}

impl CenteredSplineBasis {
    pub fn new(knots: KnotVector) -> Self {
        let k = knots.dim();
        let order = knots.order();
        let (gl_x, gl_w) = gauss_legendre(quadrature_nodes_for_order(order));
        let width = knots.hi() - knots.lo();
        let breaks = knots.breakpoints();

        // quadrature nodes (scaled to a probability measure on I) and the full basis at each node
        let mut nodes = Vec::new();
        for seg in breaks.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let half = 0.5 * (b - a);
            for (&xi, &wi) in gl_x.iter().zip(&gl_w) {
                nodes.push((a + half * (xi + 1.0), wi * half / width));
            }
        }
        let mut buf = vec![0.0; k];
        let mut offsets = vec![0.0; k - 1];
        let mut evals = Vec::with_capacity(nodes.len());
        for &(t, w) in &nodes {
            knots.eval_into(t, &mut buf).expect("quadrature node inside interval");
            for s in 0..k - 1 {
                offsets[s] += w * buf[s];
            }
            evals.push(buf[..k - 1].to_vec());
        }
        let mut gram = DMatrix::zeros(k - 1, k - 1);
        for (vals, &(_, w)) in evals.iter().zip(&nodes) {
            for s in 0..k - 1 {
                let bs = vals[s] - offsets[s];
                for r in s..k - 1 {
                    gram[(s, r)] += w * bs * (vals[r] - offsets[r]);
                }
            }
        }
        for s in 0..k - 1 {
            for r in 0..s {
                gram[(s, r)] = gram[(r, s)];
            }
        }
        CenteredSplineBasis { knots, offsets, gram }
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    /// Number of centered elements, `k - 1`.
    pub fn dim(&self) -> usize {
        self.offsets.len()
    }

    /// Uncentered basis dimension `k`.
    pub fn k(&self) -> usize {
        self.knots.dim()
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Centered values at a point inside the interval.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(t >= self.knots.lo() && t <= self.knots.hi()) {
            return Err(PlamError::OutOfRange { t, lo: self.knots.lo(), hi: self.knots.hi() });
        }
        self.fill(t, out);
        Ok(())
    }

    /// Centered values with `t` clamped to the interval. Returns true when clamping happened.
    pub fn eval_clamped_into(&self, t: f64, out: &mut [f64]) -> bool {
        let (lo, hi) = (self.knots.lo(), self.knots.hi());
        let clamped = if t.is_nan() { lo } else { t.clamp(lo, hi) };
        self.fill(clamped, out);
        clamped != t
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    #[inline]
    fn fill(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut vals = [0.0; MAX_ORDER];
        let first = self.knots.local_basis(t, &mut vals);
        for (o, off) in out.iter_mut().zip(&self.offsets) {
            *o = -off;
        }
        for (r, &v) in vals[..self.knots.order()].iter().enumerate() {
            let s = first + r;
            if s < out.len() {
                out[s] += v;
            }
        }
    }

    /// `‖d‖_H = sqrt(dᵀ H d)`.
    pub fn norm(&self, d: &[f64]) -> f64 {
        gram_norm(&self.gram, d)
    }
}

pub fn gram_norm(h: &DMatrix<f64>, d: &[f64]) -> f64 {
    let n = d.len();
    let mut acc = 0.0;
    for s in 0..n {
        let mut row = 0.0;
        for r in 0..n {
            row += h[(s, r)] * d[r];
        }
        acc += d[s] * row;
    }
    acc.max(0.0).sqrt()
}

/// Centers a knot vector; same as [`CenteredSplineBasis::new`].
pub fn center(knots: KnotVector) -> CenteredSplineBasis {
    CenteredSplineBasis::new(knots)
}

/// Gram matrix of a centered basis.
pub fn gram(basis: &CenteredSplineBasis) -> DMatrix<f64> {
    basis.gram().clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform01(k: usize, order: usize) -> KnotVector {
        KnotVector::on_interval(0.0, 1.0, &[], k, order, KnotPlacement::Uniform).unwrap()
    }

    // midpoint rule on [lo, hi], scaled to a probability measure
    fn riemann_mean<F: Fn(f64) -> f64>(lo: f64, hi: f64, n: usize, f: F) -> f64 {
        let h = (hi - lo) / n as f64;
        (0..n).map(|i| f(lo + (i as f64 + 0.5) * h)).sum::<f64>() / n as f64
    }

    #[test]
    fn minimal_cubic_basis_has_no_interior_knots() {
        let x: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let kv = make_knots(&x, 4, 4, KnotPlacement::Uniform).unwrap();
        assert!(kv.interior().is_empty());
        assert_eq!(kv.dim(), 4);
        assert_eq!(kv.knots().len(), 2 * 4);
    }

    #[test]
    fn dimension_counts_interior_plus_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let kv = make_knots(&x, 6, 4, KnotPlacement::Uniform).unwrap();
        assert_eq!(kv.interior().len(), 2);
        // count functions with nonempty support directly
        let u = kv.knots();
        let count = (0..u.len() - 4).filter(|&i| u[i + 4] > u[i]).count();
        assert_eq!(count, 6);
        assert_eq!(kv.dim(), 6);
        let w = kv.hi() - kv.lo();
        assert!((kv.interior()[0] - (kv.lo() + w / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        assert!(matches!(make_knots(&[0.3; 10], 5, 4, KnotPlacement::Uniform), Err(PlamError::DegenerateSample(_))));
        assert!(matches!(make_knots(&[0.0, 1.0], 5, 0, KnotPlacement::Uniform), Err(PlamError::InvalidOrder(0))));
        assert!(matches!(
            make_knots(&[0.0, 1.0], 3, 4, KnotPlacement::Uniform),
            Err(PlamError::InvalidBasisDimension { .. })
        ));
        assert!(matches!(
            make_knots(&[0.0, 1.0, 0.0, 1.0], 6, 4, KnotPlacement::Quantile),
            Err(PlamError::DegenerateSample(_))
        ));
    }

    #[test]
    fn piecewise_constant_is_indicator() {
        let kv = uniform01(4, 1);
        assert_eq!(kv.eval(0.3).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(kv.eval(1.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamped_endpoints_interpolate() {
        let kv = uniform01(7, 4);
        let v = kv.eval(0.0).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&b| b == 0.0));
        let v = kv.eval(1.0).unwrap();
        assert_eq!(v[6], 1.0);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let kv = uniform01(5, 3);
        assert!(matches!(kv.eval(1.2), Err(PlamError::OutOfRange { .. })));
        assert!(matches!(kv.eval(f64::NAN), Err(PlamError::OutOfRange { .. })));
        let basis = CenteredSplineBasis::new(kv);
        let mut out = vec![0.0; basis.dim()];
        assert!(basis.eval_clamped_into(1.2, &mut out));
        assert_eq!(out, basis.eval(1.0).unwrap());
        assert!(!basis.eval_clamped_into(0.5, &mut out));
    }

    #[test]
    fn partition_of_unity_all_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for order in 1..=4 {
            for k in order..order + 6 {
                let kv = uniform01(k, order);
                for _ in 0..200 {
                    let t: f64 = rng.random();
                    let v = kv.eval(t).unwrap();
                    assert!(v.iter().all(|&b| b >= 0.0));
                    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for m in 1..10 {
            let (x, w) = gauss_legendre(m);
            for deg in 0..2 * m {
                let num: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((num - exact).abs() < 1e-13, "m={m} deg={deg}");
            }
        }
    }

    #[test]
    fn indicator_offsets_are_segment_widths() {
        let basis = CenteredSplineBasis::new(uniform01(4, 1));
        assert_eq!(basis.dim(), 3);
        for &o in basis.offsets() {
            assert!((o - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn offsets_match_closed_form_integral() {
        // ∫ B̃_s = (u_{s+ℓ} - u_s)/ℓ
        for order in 1..=4 {
            let kv = KnotVector::on_interval(-1.0, 3.0, &[], order + 5, order, KnotPlacement::Uniform).unwrap();
            let u = kv.knots();
            let basis = CenteredSplineBasis::new(kv);
            for (s, &o) in basis.offsets().iter().enumerate() {
                let exact = (u[s + order] - u[s]) / order as f64 / 4.0;
                assert!((o - exact).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn indicator_gram_matches_riemann_sum() {
        let basis = CenteredSplineBasis::new(uniform01(4, 1));
        let h = basis.gram();
        assert_eq!(h.nrows(), 3);
        let kv = uniform01(4, 1);
        for s in 0..3 {
            for r in 0..3 {
                let oracle = riemann_mean(0.0, 1.0, 1_000_000, |t| {
                    let v = kv.eval(t).unwrap();
                    (v[s] - 0.25) * (v[r] - 0.25)
                });
                assert!((h[(s, r)] - oracle).abs() < 1e-6);
            }
        }
        // closed form: 0.25·δ - 1/16
        assert!((h[(0, 0)] - 0.1875).abs() < 1e-14);
        assert!((h[(0, 1)] + 0.0625).abs() < 1e-14);
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..300).map(|_| rng.random::<f64>().powi(2) * 4.0).collect();
        for order in 1..=4 {
            for placement in [KnotPlacement::Uniform, KnotPlacement::Quantile] {
                let basis = CenteredSplineBasis::new(make_knots(&x, order + 4, order, placement).unwrap());
                let h = basis.gram();
                assert_eq!(h, &h.transpose());
                let eig = h.clone().symmetric_eigenvalues();
                assert!(eig.iter().all(|&e| e >= -1e-10));
            }
        }
    }

    #[test]
    fn quantile_matches_uniform_on_equispaced_sample() {
        let x: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        for k in 4..10 {
            let a = make_knots(&x, k, 4, KnotPlacement::Uniform).unwrap();
            let b = make_knots(&x, k, 4, KnotPlacement::Quantile).unwrap();
            for (u, v) in a.interior().iter().zip(b.interior()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantile_knots_follow_sample() {
        let x: Vec<f64> = (1..=9).map(|i| (i * i) as f64).collect();
        let kv = make_knots(&x, 5, 4, KnotPlacement::Quantile).unwrap();
        assert_eq!(kv.interior(), &[25.0]);
    }
}
