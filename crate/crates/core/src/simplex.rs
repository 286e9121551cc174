//! Nelder–Mead simplex search on the unit box `[0, 1]^d`.
//!
//! Trial points are projected back onto the box, so callers map their
//! parameter box onto the unit cube and never see an infeasible point.

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SimplexOptions {
    /// Stop once every vertex is within `xtol` (sup norm) of the best one.
    pub xtol: f64,
    pub max_iter: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Fresh simplices built around the best point after convergence. A
    /// simplex pressed against a face of the box can collapse onto it; a
    /// restart lets it leave again.
    pub restarts: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            xtol: 1e-8,
            max_iter: 2000,
            initial_step: 0.05,
            restarts: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn clamp_unit(x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi = xi.clamp(0.0, 1.0);
    }
}

/// `a + t (b - a)`, projected onto the box.
fn along(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect();
    clamp_unit(&mut out);
    out
}

/// Minimizes `f` over `[0, 1]^d` from `start`. Non-finite values of `f` are
/// treated as `+∞`.
pub fn minimize(mut f: impl FnMut(&[f64]) -> f64, start: &[f64], options: SimplexOptions) -> SimplexResult {
    let mut result = single_run(&mut f, start, options, options.max_iter);
    for _ in 0..options.restarts {
        if !result.converged || result.iterations >= options.max_iter {
            break;
        }
        let next = single_run(&mut f, &result.x, options, options.max_iter - result.iterations);
        let improved = next.value < result.value;
        let moved = next
            .x
            .iter()
            .zip(&result.x)
            .any(|(a, b)| (a - b).abs() >= options.xtol);
        result = SimplexResult {
            iterations: result.iterations + next.iterations,
            evaluations: result.evaluations + next.evaluations,
            converged: next.converged,
            ..if improved { next } else { result }
        };
        if !improved || !moved {
            break;
        }
    }
    result
}

fn single_run(f: &mut impl FnMut(&[f64]) -> f64, start: &[f64], options: SimplexOptions, max_iter: usize) -> SimplexResult {
    let d = start.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut x0 = start.to_vec();
    clamp_unit(&mut x0);
    let mut simplex = vec![x0.clone()];
    for j in 0..d {
        let mut x = x0.clone();
        x[j] += if x[j] + options.initial_step <= 1.0 {
            options.initial_step
        } else {
            -options.initial_step
        };
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

    let mut iterations = 0;
    let mut converged = false;
    loop {
        // order vertices best first; ties keep their earlier position
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let diameter = simplex[1..]
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&simplex[0])
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0f64, f64::max);
        if diameter < options.xtol {
            converged = true;
            break;
        }
        if iterations == max_iter {
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|x| x[j]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let fw = values[d];

        let xr = along(&centroid, &worst, -1.0);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(&centroid, &worst, -2.0);
            let fe = eval(&xe);
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
            continue;
        }
        if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
            continue;
        }
        // contraction, outside if the reflection improved on the worst point
        let (xc, fc) = if fr < fw {
            let xc = along(&centroid, &worst, -0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(&centroid, &worst, 0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < fw.min(fr) {
            simplex[d] = xc;
            values[d] = fc;
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].clone();
        for i in 1..=d {
            simplex[i] = along(&best, &simplex[i], 0.5);
            values[i] = eval(&simplex[i]);
        }
    }
    SimplexResult {
        x: simplex[0].clone(),
        value: values[0],
        iterations,
        evaluations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl() {
        let r = minimize(
            |x| (x[0] - 0.3).powi(2) + 4.0 * (x[1] - 0.7).powi(2),
            &[0.9, 0.1],
            SimplexOptions::default(),
        );
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 0.3, epsilon = 1e-7);
        assert_abs_diff_eq!(r.x[1], 0.7, epsilon = 1e-7);
    }

    #[test]
    fn rosenbrock_in_the_box() {
        // minimum at (0.5, 0.25) after rescaling
        let f = |x: &[f64]| {
            let (a, b) = (2.0 * x[0], 4.0 * x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = minimize(f, &[0.1, 0.9], SimplexOptions::default());
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r.x[1], 0.25, epsilon = 1e-6);
    }

    #[test]
    fn minimum_on_the_boundary() {
        let r = minimize(|x| x[0] + (x[1] - 0.5).powi(2), &[0.5, 0.5], SimplexOptions::default());
        assert_abs_diff_eq!(r.x[0], 0.0, epsilon = 1e-7);
        assert!(r.x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nan_is_avoided() {
        let r = minimize(
            |x| if x[0] > 0.6 { f64::NAN } else { (x[0] - 0.5).powi(2) },
            &[0.2],
            SimplexOptions::default(),
        );
        assert_abs_diff_eq!(r.x[0], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn iteration_cap() {
        let r = minimize(
            |x| (x[0] - 0.3).powi(2),
            &[0.9],
            SimplexOptions {
                max_iter: 3,
                ..Default::default()
            },
        );
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }
}
