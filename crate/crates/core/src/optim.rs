//! Small derivative-free optimizers: Nelder-Mead simplex and bisection.

/// Nelder-Mead settings. Coordinates are whatever units the caller works in.
#[derive(Clone, Debug)]
pub struct NelderMead {
    pub initial_step: f64,
    /// Stop once every vertex is within `xtol` of the best one (per coordinate).
    pub xtol: f64,
    /// ... and the spread of function values is at most `ftol` (infinite by default).
    pub ftol: f64,
    pub max_iter: usize,
    /// Number of restarts from the converged point with a fresh simplex.
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            initial_step: 0.1,
            xtol: 1e-9,
            ftol: f64::INFINITY,
            max_iter: 20_000,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimplexResult<const N: usize> {
    pub x: [f64; N],
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn minimize<const N: usize, F>(&self, f: F, start: [f64; N]) -> SimplexResult<N>
    where
        F: Fn(&[f64; N]) -> f64,
    {
        let mut res = self.run(&f, start, self.initial_step);
        for _ in 0..self.restarts {
            let step = (self.initial_step * 1e-2).max(self.xtol * 100.0);
            let next = self.run(&f, res.x, step);
            let iterations = res.iterations + next.iterations;
            res = if next.f <= res.f { next } else { res };
            res.iterations = iterations;
        }
        res
    }

    fn run<const N: usize, F>(&self, f: &F, start: [f64; N], step: f64) -> SimplexResult<N>
    where
        F: Fn(&[f64; N]) -> f64,
    {
        let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
        simplex.push((start, f(&start)));
        for i in 0..N {
            let mut v = start;
            v[i] += step;
            simplex.push((v, f(&v)));
        }

        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iter {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (best, fbest) = simplex[0];
            let spread_x = simplex[1..]
                .iter()
                .flat_map(|(v, _)| v.iter().zip(best.iter()).map(|(a, b)| (a - b).abs()))
                .fold(0.0_f64, f64::max);
            let spread_f = simplex[N].1 - fbest;
            if spread_x <= self.xtol && spread_f <= self.ftol {
                converged = true;
                break;
            }
            iterations += 1;

            let mut centroid = [0.0; N];
            for (v, _) in &simplex[..N] {
                for k in 0..N {
                    centroid[k] += v[k] / N as f64;
                }
            }
            let worst = simplex[N];
            let along = |t: f64| {
                let mut p = [0.0; N];
                for k in 0..N {
                    p[k] = centroid[k] + t * (worst.0[k] - centroid[k]);
                }
                p
            };

            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < fbest {
                let xe = along(-2.0);
                let fe = f(&xe);
                simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[N - 1].1 {
                simplex[N] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < worst.1 {
                let xc = along(-0.5);
                (xc, f(&xc))
            } else {
                let xc = along(0.5);
                (xc, f(&xc))
            };
            if fc < worst.1.min(fr) {
                simplex[N] = (xc, fc);
                continue;
            }
            // shrink towards the best vertex
            for vertex in simplex.iter_mut().skip(1) {
                for k in 0..N {
                    vertex.0[k] = best[k] + 0.5 * (vertex.0[k] - best[k]);
                }
                vertex.1 = f(&vertex.0);
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        SimplexResult {
            x: simplex[0].0,
            f: simplex[0].1,
            iterations,
            converged,
        }
    }
}

/// Outcome of evaluating a bracketing function at a trial point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sign {
    Below,
    Above,
    Hit,
}

/// Bisection on `[lo, hi]` where `side(lo) == Below` and `side(hi) == Above`.
///
/// `side` may fail; the error is returned as-is. Iteration stops when
/// `done(lo, hi)` holds or `side` reports an exact hit.
pub fn bisect<E>(
    mut lo: f64,
    mut hi: f64,
    mut side: impl FnMut(f64) -> Result<Sign, E>,
    done: impl Fn(f64, f64) -> bool,
    max_iter: usize,
) -> Result<f64, E> {
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if done(lo, hi) || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        match side(mid)? {
            Sign::Below => lo = mid,
            Sign::Above => hi = mid,
            Sign::Hit => return Ok(mid),
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_minimum() {
        let nm = NelderMead {
            initial_step: 0.5,
            xtol: 1e-10,
            ..Default::default()
        };
        let r = nm.minimize(
            |p: &[f64; 2]| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2),
            [-1.2, 1.0],
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7, "{:?}", r.x);
        assert!((r.x[1] - 1.0).abs() < 1e-7, "{:?}", r.x);
    }

    #[test]
    fn anisotropic_quadratic_3d() {
        let nm = NelderMead::default();
        let r = nm.minimize(
            |p: &[f64; 3]| 3.0 * (p[0] - 0.3).powi(2) + 50.0 * (p[1] + 0.1).powi(2) + (p[2] - 2.0).powi(2),
            [0.0; 3],
        );
        assert!((r.x[0] - 0.3).abs() < 1e-8);
        assert!((r.x[1] + 0.1).abs() < 1e-8);
        assert!((r.x[2] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn bisection_finds_sqrt_two() {
        let r: Result<f64, ()> = bisect(
            1.0,
            2.0,
            |x| Ok(if x * x < 2.0 { Sign::Below } else { Sign::Above }),
            |lo, hi| hi - lo < 1e-14,
            200,
        );
        assert!((r.unwrap() - 2f64.sqrt()).abs() < 1e-13);
    }
}
