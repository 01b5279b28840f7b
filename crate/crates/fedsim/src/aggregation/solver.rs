//! Simplex-constrained weighted least squares.
//!
//! Solves `min_x sum_c (target_c - (A x)_c)^2 / denom_c` subject to
//! `x >= 0, sum_k x_k = budget`. This is the aggregation-weight subproblem:
//! columns of `A` are class distributions of the free contributors, the
//! target is what remains of the global distribution after the fixed
//! contributions, and `denom` is the global distribution itself.
//!
//! The driver is projected gradient with fixed step `1/L` (Lipschitz bound
//! from the diagonally scaled Gram matrix) and Euclidean projection onto the
//! scaled simplex. Because the problem is a convex QP, the KKT conditions
//! certify global optimality; periodic "support polish" solves the
//! equality-constrained system on the current support exactly, and a subset
//! enumeration fallback covers small instances the iteration has not pinned
//! down by the iteration cap.

use crate::error::SimError;
use crate::Result;

/// One weight-optimization instance.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    /// Class-distribution columns, one per free weight (each `len() == target.len()`).
    pub columns: Vec<Vec<f64>>,
    /// Residual target per class (global proportion minus fixed part).
    pub target: Vec<f64>,
    /// Per-class denominators (strictly positive global proportions).
    pub denom: Vec<f64>,
    /// The free weights must sum to this.
    pub budget: f64,
}

/// Solver output.
#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Fixed-point residual `||x - P(x - grad f(x))||_inf`; zero at a KKT point.
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl WlsProblem {
    fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(SimError::parameter("no free weights to optimize"));
        }
        let c = self.target.len();
        if self.denom.len() != c || self.columns.iter().any(|col| col.len() != c) {
            return Err(SimError::parameter("column/target length mismatch"));
        }
        if self.denom.iter().any(|&d| !(d > 0.0)) {
            return Err(SimError::parameter(
                "denominators must be strictly positive",
            ));
        }
        if !(self.budget >= 0.0) {
            return Err(SimError::parameter("budget must be nonnegative"));
        }
        Ok(())
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for c in 0..self.target.len() {
            let mut fit = 0.0;
            for (k, col) in self.columns.iter().enumerate() {
                fit += x[k] * col[c];
            }
            let r = self.target[c] - fit;
            total += r * r / self.denom[c];
        }
        total
    }
}

/// Euclidean projection onto `{x >= 0, sum x = budget}` (Duchi et al. style).
pub fn project_simplex(y: &[f64], budget: f64) -> Vec<f64> {
    let n = y.len();
    if n == 0 {
        return Vec::new();
    }
    if budget <= 0.0 {
        return vec![0.0; n];
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - budget) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    y.iter().map(|&v| (v - theta).max(0.0)).collect()
}

struct Quadratic {
    /// Gram matrix `A^T D A`, row-major n x n.
    m: Vec<f64>,
    /// Linear part `A^T D target`.
    q: Vec<f64>,
    n: usize,
}

impl Quadratic {
    fn new(p: &WlsProblem) -> Self {
        let n = p.columns.len();
        let c = p.target.len();
        let mut m = vec![0.0; n * n];
        let mut q = vec![0.0; n];
        for k in 0..n {
            for l in k..n {
                let mut acc = 0.0;
                for r in 0..c {
                    acc += p.columns[k][r] * p.columns[l][r] / p.denom[r];
                }
                m[k * n + l] = acc;
                m[l * n + k] = acc;
            }
            let mut acc = 0.0;
            for r in 0..c {
                acc += p.columns[k][r] * p.target[r] / p.denom[r];
            }
            q[k] = acc;
        }
        Self { m, q, n }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                let mut acc = -self.q[k];
                for l in 0..self.n {
                    acc += self.m[k * self.n + l] * x[l];
                }
                2.0 * acc
            })
            .collect()
    }

    /// Lipschitz bound of the gradient: `2 ||M||_inf` dominates `2 ||M||_2`
    /// for the symmetric Gram matrix.
    fn lipschitz(&self) -> f64 {
        let mut max_row = 0.0f64;
        for k in 0..self.n {
            let row: f64 = self.m[k * self.n..(k + 1) * self.n]
                .iter()
                .map(|v| v.abs())
                .sum();
            max_row = max_row.max(row);
        }
        2.0 * max_row
    }
}

fn fixed_point_residual(quad: &Quadratic, x: &[f64], budget: f64) -> f64 {
    let g = quad.gradient(x);
    let stepped: Vec<f64> = x.iter().zip(&g).map(|(&xi, &gi)| xi - gi).collect();
    let projected = project_simplex(&stepped, budget);
    x.iter()
        .zip(&projected)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Solves the equality-constrained KKT system restricted to `support`:
/// `2 M x - 2 q = nu 1, sum x = budget`. Returns `(x_support, nu)`.
fn solve_support_system(
    quad: &Quadratic,
    support: &[usize],
    budget: f64,
) -> Option<(Vec<f64>, f64)> {
    let s = support.len();
    let dim = s + 1;
    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    for (row, &k) in support.iter().enumerate() {
        for (col, &l) in support.iter().enumerate() {
            a[row * dim + col] = 2.0 * quad.m[k * quad.n + l];
        }
        a[row * dim + s] = -1.0; // -nu
        b[row] = 2.0 * quad.q[k];
    }
    for col in 0..s {
        a[s * dim + col] = 1.0;
    }
    b[s] = budget;
    gaussian_solve(&mut a, &mut b, dim).map(|sol| (sol[..s].to_vec(), sol[s]))
}

/// Gaussian elimination with partial pivoting; `None` on singular systems.
fn gaussian_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * x[k];
        }
        x[col] = acc / a[col * n + col];
    }
    Some(x)
}

/// Attempts an exact KKT solution on `support`. Returns a full-length
/// feasible point when primal and dual feasibility both hold.
fn try_support(
    quad: &Quadratic,
    support: &[usize],
    budget: f64,
    grad_scale: f64,
) -> Option<Vec<f64>> {
    let (mut xs, nu) = solve_support_system(quad, support, budget)?;
    if xs.iter().any(|&v| v < -1e-11) {
        return None;
    }
    // Clamp floating-point dust and restore the exact budget.
    let mut deficit = 0.0;
    for v in xs.iter_mut() {
        if *v < 0.0 {
            deficit += *v;
            *v = 0.0;
        }
    }
    if deficit != 0.0 {
        if let Some(max) = xs.iter_mut().max_by(|a, b| a.partial_cmp(b).unwrap()) {
            *max += deficit;
            if *max < 0.0 {
                return None;
            }
        }
    }
    let mut x = vec![0.0; quad.n];
    for (&k, &v) in support.iter().zip(&xs) {
        x[k] = v;
    }
    let grad = quad.gradient(&x);
    let dual_tol = 1e-10 * grad_scale.max(1.0);
    for k in 0..quad.n {
        if !support.contains(&k) && grad[k] < nu - dual_tol {
            return None;
        }
    }
    Some(x)
}

/// Solves the constrained weighted least squares problem to `tolerance`
/// (fixed-point KKT residual), giving up after `max_iterations` projected
/// gradient steps plus the exact fallback.
pub fn solve_constrained_wls(
    problem: &WlsProblem,
    tolerance: f64,
    max_iterations: usize,
) -> Result<WlsSolution> {
    problem.validate()?;
    let n = problem.columns.len();
    let quad = Quadratic::new(problem);

    if problem.budget == 0.0 {
        let x = vec![0.0; n];
        return Ok(WlsSolution {
            objective: problem.objective(&x),
            kkt_residual: 0.0,
            weights: x,
            iterations: 0,
        });
    }

    let lipschitz = quad.lipschitz();
    let mut x = vec![problem.budget / n as f64; n];
    if lipschitz == 0.0 {
        // Zero columns: the objective ignores x entirely.
        return Ok(WlsSolution {
            objective: problem.objective(&x),
            kkt_residual: 0.0,
            weights: x,
            iterations: 0,
        });
    }
    let step = 1.0 / lipschitz;
    let grad_scale = quad.gradient(&x).iter().fold(0.0f64, |a, g| a.max(g.abs()));

    let mut iterations = 0;
    let mut residual = fixed_point_residual(&quad, &x, problem.budget);
    while residual > tolerance && iterations < max_iterations {
        let grad = quad.gradient(&x);
        let stepped: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(&xi, &gi)| xi - step * gi)
            .collect();
        x = project_simplex(&stepped, problem.budget);
        iterations += 1;

        if iterations % 25 == 0 || iterations == max_iterations {
            let support: Vec<usize> = (0..n)
                .filter(|&k| x[k] > 1e-14 * problem.budget.max(1.0))
                .collect();
            if !support.is_empty() {
                if let Some(polished) = try_support(&quad, &support, problem.budget, grad_scale) {
                    if problem.objective(&polished) <= problem.objective(&x) + 1e-15 {
                        x = polished;
                    }
                }
            }
        }
        residual = fixed_point_residual(&quad, &x, problem.budget);
    }

    // Exact fallback for small instances the iteration did not certify.
    if residual > tolerance && n <= 16 {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1u32 << n) {
            let support: Vec<usize> = (0..n).filter(|&k| mask & (1 << k) != 0).collect();
            if let Some(candidate) = try_support(&quad, &support, problem.budget, grad_scale) {
                let obj = problem.objective(&candidate);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, candidate));
                }
            }
        }
        if let Some((_, candidate)) = best {
            if problem.objective(&candidate) <= problem.objective(&x) {
                x = candidate;
                residual = fixed_point_residual(&quad, &x, problem.budget);
            }
        }
    }

    Ok(WlsSolution {
        objective: problem.objective(&x),
        kkt_residual: residual,
        weights: x,
        iterations,
    })
}
