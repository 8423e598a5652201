//! Derivative-free minimization used by the logit-scaling searches.

/// Box-constrained Nelder–Mead.
#[derive(Clone, Debug)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop once the spread of simplex values drops below this.
    pub ftol: f64,
    /// ... and the simplex diameter drops below this.
    pub xtol: f64,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 200,
            ftol: 1e-4,
            xtol: 1e-3,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

impl NelderMead {
    fn clamp(&self, x: &mut [f64]) {
        if let Some(lo) = &self.lower {
            for (v, l) in x.iter_mut().zip(lo) {
                *v = v.max(*l);
            }
        }
        if let Some(hi) = &self.upper {
            for (v, h) in x.iter_mut().zip(hi) {
                *v = v.min(*h);
            }
        }
    }

    /// Minimizes `f` from `x0` with an axis-aligned initial simplex of size `step`.
    /// Non-finite objective values count as +∞ (the candidate is rejected).
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], step: f64) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut start = x0.to_vec();
        self.clamp(&mut start);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let v0 = eval(&start, &mut evals);
        simplex.push((start.clone(), v0));
        for i in 0..n {
            let mut x = start.clone();
            x[i] += step;
            self.clamp(&mut x);
            if x[i] == start[i] {
                // pinned at the upper bound: step inward instead
                x[i] -= step;
                self.clamp(&mut x);
            }
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }

        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let diameter = simplex
                .iter()
                .skip(1)
                .map(|(x, _)| {
                    x.iter()
                        .zip(&simplex[0].0)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if (worst - best).abs() < self.ftol && diameter < self.xtol {
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                let mut x: Vec<f64> = centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect();
                self.clamp(&mut x);
                x
            };

            let xr = along(1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(2.0);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let x = along(0.5);
                    let v = eval(&x, &mut evals);
                    (x, v)
                } else {
                    let x = along(-0.5);
                    let v = eval(&x, &mut evals);
                    (x, v)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    // shrink toward the best vertex
                    let best_x = simplex[0].0.clone();
                    for vertex in simplex.iter_mut().skip(1) {
                        let mut x: Vec<f64> = vertex
                            .0
                            .iter()
                            .zip(&best_x)
                            .map(|(v, b)| b + 0.5 * (v - b))
                            .collect();
                        self.clamp(&mut x);
                        let v = eval(&x, &mut evals);
                        *vertex = (x, v);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, value) = simplex.swap_remove(0);
        Minimum { x, value, evals }
    }
}

/// `count` points log-uniformly spaced over `[lo, hi]` (inclusive).
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let nm = NelderMead {
            max_evals: 500,
            ftol: 1e-12,
            xtol: 1e-8,
            ..Default::default()
        };
        let m = nm.minimize(|x| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2), &[0.0, 0.0], 0.5);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] + 2.0).abs() < 1e-4, "{m:?}");
    }

    #[test]
    fn rosenbrock() {
        let nm = NelderMead {
            max_evals: 2000,
            ftol: 1e-14,
            xtol: 1e-9,
            ..Default::default()
        };
        let m = nm.minimize(
            |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
            &[-1.2, 1.0],
            0.3,
        );
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{m:?}");
    }

    #[test]
    fn respects_bounds_and_budget() {
        let nm = NelderMead {
            max_evals: 60,
            lower: Some(vec![0.5]),
            upper: Some(vec![2.0]),
            ..Default::default()
        };
        let m = nm.minimize(|x| (x[0] - 5.0).powi(2), &[1.0], 0.2);
        assert!((m.x[0] - 2.0).abs() < 1e-6);
        assert!(m.evals <= 60 + 2);
    }

    #[test]
    fn nan_candidates_are_rejected() {
        let nm = NelderMead::default();
        let m = nm.minimize(
            |x| if x[0] > 1.5 { f64::NAN } else { (x[0] - 1.0).powi(2) },
            &[0.0],
            1.0,
        );
        assert!(m.value.is_finite());
        assert!((m.x[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn log_space_endpoints() {
        let v = log_space(0.01, 200.0, 50);
        assert_eq!(v.len(), 50);
        assert!((v[0] - 0.01).abs() < 1e-15);
        assert!((v[49] - 200.0).abs() < 1e-9);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }
}
