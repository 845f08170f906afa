//! Box-constrained quasi-Newton minimization (projected L-BFGS).

use std::collections::VecDeque;

const MEMORY: usize = 8;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Minimizes `objective` over the box `[lower, upper]`.
///
/// `objective` returns the value and gradient, or `None` when the point cannot be
/// evaluated; such points are treated as infinitely bad by the line search.
pub fn minimize_box<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    max_iterations: usize,
    gradient_tolerance: f64,
) -> Result<Minimum, String>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n);
    let project = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };

    let mut x = x0.to_vec();
    project(&mut x);
    let (mut f, mut g) = objective(&x)
        .filter(|(v, g)| v.is_finite() && g.iter().all(|d| d.is_finite()))
        .ok_or_else(|| "objective not evaluable at the starting point".to_string())?;

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut stalls = 0;

    for _ in 0..max_iterations {
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0))
            .collect();
        let pg_norm = (0..n)
            .filter(|&i| !active[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm < gradient_tolerance {
            return Ok(Minimum { x, value: f });
        }

        let mut dir = two_loop(&g, &history, &active);
        let slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            history.clear();
            dir = (0..n)
                .map(|i| if active[i] { 0.0 } else { -g[i] })
                .collect();
        }

        let mut step = if history.is_empty() {
            (1.0 / pg_norm).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            project(&mut trial);
            let decrease: f64 = trial
                .iter()
                .zip(&x)
                .zip(&g)
                .map(|((t, x), g)| g * (t - x))
                .sum();
            if let Some((ft, gt)) = objective(&trial) {
                if ft.is_finite()
                    && gt.iter().all(|d| d.is_finite())
                    && ft <= f + ARMIJO * decrease.min(0.0)
                {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if history.is_empty() {
                return Ok(Minimum { x, value: f });
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        if (f - f_new).abs() <= 1e-10 * (1.0 + f.abs()) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        if stalls >= 3 {
            return Ok(Minimum { x, value: f });
        }
    }
    Ok(Minimum { x, value: f })
}

/// L-BFGS two-loop recursion restricted to the free coordinates.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, active: &[bool]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(active)
            .map(|(x, a)| if *a { 0.0 } else { *x })
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(active)
            .filter(|(_, a)| !**a)
            .map(|((x, y), _)| x * y)
            .sum()
    };

    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    let gamma = history
        .back()
        .map(|(s, y, _)| {
            let yy = dot(y, y);
            if yy > 0.0 {
                dot(s, y) / yy
            } else {
                1.0
            }
        })
        .filter(|v| *v > 0.0 && v.is_finite())
        .unwrap_or(1.0);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += (a - b) * s[i];
        }
    }
    mask(&q).into_iter().map(|v| -v).collect()
}
