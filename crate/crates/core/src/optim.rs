//! Box-constrained quasi-Newton minimizer for small parameter vectors.

/// Result of a local minimization.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct Settings {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_rel_tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            max_iter: 200,
            grad_tol: 1e-7,
            f_rel_tol: 1e-13,
        }
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Components pinned at a bound with the gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0))
        .collect()
}

/// Projected BFGS with Armijo backtracking. `fg` returns the objective and
/// its gradient, or `None` where the objective is undefined.
pub fn minimize<F>(mut fg: F, x0: &[f64], lo: &[f64], hi: &[f64], settings: &Settings) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut f, mut g) = fg(&x)?;
    let mut h = identity(n);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..settings.max_iter {
        iterations = it + 1;
        let active = active_set(&x, &g, lo, hi);
        let pg: f64 = g
            .iter()
            .zip(&active)
            .map(|(gi, &a)| if a { 0.0 } else { gi * gi })
            .sum::<f64>()
            .sqrt();
        if pg < settings.grad_tol {
            converged = true;
            break;
        }

        // d = −H g on the free components
        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                continue;
            }
            for j in 0..n {
                if !active[j] {
                    d[i] -= h[i][j] * g[j];
                }
            }
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h = identity(n);
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut trial, lo, hi);
            let moved: f64 = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
            if moved == 0.0 {
                break;
            }
            if let Some((ft, gt)) = fg(&trial) {
                let decrease: f64 = trial.iter().zip(&x).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum();
                if ft.is_finite() && ft <= f + 1e-4 * decrease.min(step * slope).min(0.0) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            // no progress possible along any direction we can produce
            converged = pg < settings.grad_tol.sqrt();
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let f_change = (f - fnew).abs();
        x = xn;
        g = gn;
        let f_old = f;
        f = fnew;
        if sy > 1e-12 * norm(&s) * norm(&y) {
            bfgs_update(&mut h, &s, &y, sy);
        }
        if f_change <= settings.f_rel_tol * (1.0 + f_old.abs()) {
            converged = true;
            break;
        }
    }
    Some(Minimum { x, f, iterations, converged })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Inverse-Hessian BFGS update.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
