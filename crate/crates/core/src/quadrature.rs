//! Adaptive cubature over axis-aligned boxes.
//!
//! Each cell is integrated with the degree-7 Genz-Malik rule and its embedded
//! degree-5 companion; the difference of the two is the cell error. The
//! global loop bisects the worst cell along the axis with the largest fourth
//! difference until the summed error meets the tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("tolerance not met after {evaluations} evaluations (estimate {value:e}, error {error:e})")]
    NotConverged {
        value: f64,
        error: f64,
        evaluations: usize,
    },
    #[error("degenerate integration box")]
    EmptyBox,
}

#[derive(Clone, Debug)]
pub struct CubatureOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_evaluations: usize,
    /// Initial uniform split per axis before adaptation starts.
    pub initial_divisions: usize,
}

impl Default for CubatureOptions {
    fn default() -> Self {
        CubatureOptions {
            rel_tol: 1e-4,
            abs_tol: 0.0,
            max_evaluations: 3_000_000,
            initial_divisions: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubatureResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Clone, Copy, Debug)]
struct Cell<const D: usize> {
    center: [f64; D],
    half: [f64; D],
    value: f64,
    error: f64,
    split_axis: usize,
    order: u64,
}

impl<const D: usize> PartialEq for Cell<D> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<const D: usize> Eq for Cell<D> {}
impl<const D: usize> PartialOrd for Cell<D> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<const D: usize> Ord for Cell<D> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.order.cmp(&self.order))
    }
}

struct Rule<const D: usize> {
    l2: f64,
    l3: f64,
    l4: f64,
    l5: f64,
    w7: [f64; 5],
    w5: [f64; 4],
    ratio: f64,
}

impl<const D: usize> Rule<D> {
    const EVALS_PER_CELL: usize = 1 + 4 * D + 2 * D * (D - 1) + (1 << D);

    fn genz_malik() -> Self {
        let n = D as f64;
        let l2 = (9.0_f64 / 70.0).sqrt();
        let l3 = (9.0_f64 / 10.0).sqrt();
        let l4 = (9.0_f64 / 10.0).sqrt();
        let l5 = (9.0_f64 / 19.0).sqrt();
        Rule {
            l2,
            l3,
            l4,
            l5,
            w7: [
                (12824.0 - 9120.0 * n + 400.0 * n * n) / 19683.0,
                980.0 / 6561.0,
                (1820.0 - 400.0 * n) / 19683.0,
                200.0 / 19683.0,
                6859.0 / 19683.0 / 2f64.powi(D as i32),
            ],
            w5: [
                (729.0 - 950.0 * n + 50.0 * n * n) / 729.0,
                245.0 / 486.0,
                (265.0 - 100.0 * n) / 1458.0,
                25.0 / 729.0,
            ],
            ratio: (l2 * l2) / (l3 * l3),
        }
    }

    fn apply<F: Fn(&[f64; D]) -> f64>(&self, f: &F, center: [f64; D], half: [f64; D]) -> (f64, f64, usize) {
        // returns (degree-7 estimate, error, split axis)
        let at = |offsets: [f64; D]| {
            let mut p = center;
            for k in 0..D {
                p[k] += offsets[k] * half[k];
            }
            f(&p)
        };
        let f0 = at([0.0; D]);
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        let mut fourth = [0.0; D];
        for i in 0..D {
            let mut e = [0.0; D];
            e[i] = self.l2;
            let a = at(e);
            e[i] = -self.l2;
            let b = at(e);
            e[i] = self.l3;
            let c = at(e);
            e[i] = -self.l3;
            let d = at(e);
            s2 += a + b;
            s3 += c + d;
            fourth[i] = ((a + b - 2.0 * f0) - self.ratio * (c + d - 2.0 * f0)).abs();
        }
        let mut s4 = 0.0;
        for i in 0..D {
            for j in (i + 1)..D {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut e = [0.0; D];
                    e[i] = si * self.l4;
                    e[j] = sj * self.l4;
                    s4 += at(e);
                }
            }
        }
        let mut s5 = 0.0;
        for mask in 0..(1usize << D) {
            let mut e = [0.0; D];
            for (k, slot) in e.iter_mut().enumerate() {
                *slot = if mask & (1 << k) != 0 { self.l5 } else { -self.l5 };
            }
            s5 += at(e);
        }
        let volume: f64 = half.iter().map(|h| 2.0 * h).product();
        let i7 = volume
            * (self.w7[0] * f0 + self.w7[1] * s2 + self.w7[2] * s3 + self.w7[3] * s4 + self.w7[4] * s5);
        let i5 = volume * (self.w5[0] * f0 + self.w5[1] * s2 + self.w5[2] * s3 + self.w5[3] * s4);

        // split along the roughest axis; ties go to the widest one
        let mut axis = 0;
        for k in 1..D {
            let better = fourth[k] > fourth[axis] * (1.0 + 1e-12)
                || (fourth[k] >= fourth[axis] * (1.0 - 1e-12) && half[k] > half[axis]);
            if better {
                axis = k;
            }
        }
        (i7, (i7 - i5).abs(), axis)
    }
}

/// Integrates `f` over the box `[lower, upper]` in `D ≥ 2` dimensions.
pub fn integrate_box<const D: usize, F>(
    f: F,
    lower: [f64; D],
    upper: [f64; D],
    opts: &CubatureOptions,
) -> Result<CubatureResult, QuadratureError>
where
    F: Fn(&[f64; D]) -> f64,
{
    assert!(D >= 2, "the Genz-Malik rule needs at least two dimensions");
    if (0..D).any(|k| !(upper[k] > lower[k])) {
        return Err(QuadratureError::EmptyBox);
    }
    let rule = Rule::<D>::genz_malik();
    let evals_per_cell = Rule::<D>::EVALS_PER_CELL;
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut evaluations = 0usize;

    let mut push = |heap: &mut BinaryHeap<Cell<D>>, center: [f64; D], half: [f64; D]| -> (f64, f64) {
        let (value, error, split_axis) = rule.apply(&f, center, half);
        heap.push(Cell {
            center,
            half,
            value,
            error,
            split_axis,
            order,
        });
        order += 1;
        (value, error)
    };

    let div = opts.initial_divisions.max(1);
    let mut half0 = [0.0; D];
    for k in 0..D {
        half0[k] = (upper[k] - lower[k]) / (2.0 * div as f64);
    }
    let mut total = 0.0;
    let mut total_err = 0.0;
    let mut idx = [0usize; D];
    loop {
        let mut c = [0.0; D];
        for k in 0..D {
            c[k] = lower[k] + (2 * idx[k] + 1) as f64 * half0[k];
        }
        let (v, e) = push(&mut heap, c, half0);
        total += v;
        total_err += e;
        evaluations += evals_per_cell;
        // odometer over the initial grid
        let mut k = 0;
        while k < D {
            idx[k] += 1;
            if idx[k] < div {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == D {
            break;
        }
    }

    let mut splits = 0usize;
    loop {
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        if total_err <= tol {
            break;
        }
        if evaluations >= opts.max_evaluations {
            return Err(QuadratureError::NotConverged {
                value: total,
                error: total_err,
                evaluations,
            });
        }
        let worst = heap.pop().expect("heap never empties");
        let mut half = worst.half;
        half[worst.split_axis] *= 0.5;
        let mut lo = worst.center;
        let mut hi = worst.center;
        lo[worst.split_axis] -= half[worst.split_axis];
        hi[worst.split_axis] += half[worst.split_axis];
        let (v1, e1) = push(&mut heap, lo, half);
        let (v2, e2) = push(&mut heap, hi, half);
        evaluations += 2 * evals_per_cell;
        splits += 1;
        if splits.is_multiple_of(2048) {
            // running sums drift; refresh them from the cells
            total = heap.iter().map(|c| c.value).sum();
            total_err = heap.iter().map(|c| c.error).sum();
        } else {
            total += v1 + v2 - worst.value;
            total_err += e1 + e2 - worst.error;
        }
    }

    let mut cells: Vec<Cell<D>> = heap.into_vec();
    cells.sort_by_key(|c| c.order);
    let value = cells.iter().map(|c| c.value).sum();
    let error = cells.iter().map(|c| c.error).sum();
    Ok(CubatureResult {
        value,
        error,
        evaluations,
    })
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_of_degree_seven_is_exact() {
        let f = |p: &[f64; 3]| p[0].powi(6) * p[1] + p[2].powi(4) + 3.0 * p[0] * p[1] * p[2] + 1.0;
        // over [0,1]x[0,2]x[-1,1]
        let exact = (1.0 / 7.0) * 2.0 * 2.0 + 1.0 * 2.0 * (2.0 / 5.0) + 0.0 + 4.0;
        let r = integrate_box(f, [0.0, 0.0, -1.0], [1.0, 2.0, 1.0], &CubatureOptions::default()).unwrap();
        assert!((r.value - exact).abs() < 1e-12, "{} vs {}", r.value, exact);
    }

    #[test]
    fn gaussian_product() {
        let f = |p: &[f64; 3]| (-(p[0] * p[0] + 2.0 * p[1] * p[1] + 0.5 * p[2] * p[2])).exp();
        let pi = std::f64::consts::PI;
        let exact = pi.sqrt() * (pi / 2.0).sqrt() * (2.0 * pi).sqrt();
        let opts = CubatureOptions {
            rel_tol: 1e-8,
            ..Default::default()
        };
        let r = integrate_box(f, [-9.0; 3], [9.0; 3], &opts).unwrap();
        assert!((r.value / exact - 1.0).abs() < 1e-7);
    }

    #[test]
    fn kinked_paraboloid_cap() {
        // ∫ max(0, 1 - r²) over a ball of radius 1 = 8π/15. The kink makes the
        // rule-difference estimate optimistic, so only 1e-3 is asserted.
        let f = |p: &[f64; 3]| (1.0 - p[0] * p[0] - p[1] * p[1] - p[2] * p[2]).max(0.0);
        let exact = 8.0 * std::f64::consts::PI / 15.0;
        let r = integrate_box(f, [-1.2; 3], [1.1; 3], &CubatureOptions::default()).unwrap();
        assert!((r.value / exact - 1.0).abs() < 1e-3, "{}", r.value / exact - 1.0);
    }

    #[test]
    fn two_dimensional_disc() {
        // area of the unit disc via its indicator-free form ∫ 2√(1-x²) dx on a
        // square: integrate max(0, 1 - x² - y²) over [-1,1]² = π/2
        let f = |p: &[f64; 2]| (1.0 - p[0] * p[0] - p[1] * p[1]).max(0.0);
        let r = integrate_box(f, [-1.0; 2], [1.0; 2], &CubatureOptions::default()).unwrap();
        assert!((r.value / std::f64::consts::FRAC_PI_2 - 1.0).abs() < 2e-4);
        let g = |p: &[f64; 2]| (p[0] * 3.0).sin() * p[1].exp();
        let exact = (1.0 - 3f64.cos()) / 3.0 * (2f64.exp() - 1.0);
        let opts = CubatureOptions {
            rel_tol: 1e-10,
            ..Default::default()
        };
        let r = integrate_box(g, [0.0; 2], [1.0, 2.0], &opts).unwrap();
        assert!((r.value / exact - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1, 2, 5, 16] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            let deg = 2 * n - 1;
            let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert!((approx - exact).abs() < 1e-13, "n={} {} vs {}", n, approx, exact);
        }
    }

    #[test]
    fn empty_box_rejected() {
        let r = integrate_box(|_| 1.0, [0.0; 3], [1.0, 0.0, 1.0], &CubatureOptions::default());
        assert_eq!(r, Err(QuadratureError::EmptyBox));
    }

    #[test]
    fn budget_exhaustion_reported() {
        let opts = CubatureOptions {
            rel_tol: 1e-14,
            max_evaluations: 2_000,
            ..Default::default()
        };
        let f = |p: &[f64; 3]| (1.0 - p[0] * p[0] - p[1] * p[1] - p[2] * p[2]).max(0.0);
        assert!(matches!(
            integrate_box(f, [-1.0; 3], [1.0; 3], &opts),
            Err(QuadratureError::NotConverged { .. })
        ));
    }
}
