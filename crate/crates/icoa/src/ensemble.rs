//! Covariance math for residual-weighted ensembles.
//!
//! The inner problem is min_a aᵀAa subject to 1ᵀa = 1, with closed form
//! a = A⁻¹1 / (1ᵀA⁻¹1) and optimal value η = 1/(1ᵀA⁻¹1); the outer loop
//! maximizes Q = 1ᵀA⁻¹1 over the residuals, for which the gradient has the
//! closed form ∂Q/∂f_i = (2 g_i / N) R g with g = A⁻¹1. When the
//! off-diagonal covariance entries are only known inside a uniform box of
//! radius δ, the worst case is A₀ + δ·sgn(a_i a_j) off-diagonal, and the
//! protected weights minimize ζ(a) = aᵀ(A₀ − δI)a + δ(Σ|a_i|)².

use crate::error::{IcoaError, Result};
use nalgebra::{DMatrix, DVector};

/// Condition-number cap above which a covariance matrix is treated as
/// singular even after jitter.
pub const CONDITION_CAP: f64 = 1e12;

/// Tolerance on the weight-sum constraint Σa = 1.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// A D×D residual covariance estimate (exact or subsample-noisy).
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
    /// Sample count behind the off-diagonal entries (equals the full N when
    /// not subsampled).
    pub n_samples_used: usize,
    pub is_subsampled: bool,
}

impl CovarianceEstimate {
    /// Wraps an explicit matrix, enforcing symmetry and nonnegative
    /// diagonals.
    pub fn from_matrix(
        matrix: DMatrix<f64>,
        n_samples_used: usize,
        is_subsampled: bool,
    ) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(IcoaError::ShapeMismatch {
                expected: "square nonempty matrix".into(),
                got: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        for i in 0..matrix.nrows() {
            if matrix[(i, i)] < 0.0 {
                return Err(IcoaError::InvalidSpec(format!(
                    "negative diagonal entry at {i}"
                )));
            }
            for j in 0..i {
                if matrix[(i, j)] != matrix[(j, i)] {
                    return Err(IcoaError::InvalidSpec(format!(
                        "asymmetric entries at ({i},{j})"
                    )));
                }
            }
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(IcoaError::NonFinite("covariance matrix".into()));
        }
        Ok(CovarianceEstimate {
            matrix,
            n_samples_used,
            is_subsampled,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Mutable access for in-place row/column refreshes during the sweep;
    /// callers are responsible for keeping the matrix symmetric.
    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.matrix
    }

    pub fn d(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.d())
            .map(|i| self.matrix[(i, i)])
            .fold(0.0, f64::max)
    }
}

/// Uniform off-diagonal uncertainty radius; diagonal radii are fixed at 0
/// because agents estimate their own residual variances locally from all
/// their data.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyBox {
    pub delta: f64,
}

impl UncertaintyBox {
    pub fn new(delta: f64) -> Result<Self> {
        if !delta.is_finite() || delta < 0.0 {
            return Err(IcoaError::InvalidSpec(
                "uncertainty radius must be finite and >= 0".into(),
            ));
        }
        Ok(UncertaintyBox { delta })
    }
}

/// Combination coefficients constrained to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(IcoaError::InvalidSpec("empty weight vector".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(IcoaError::NonFinite("weight vector".into()));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(IcoaError::InvalidSpec(format!(
                "weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}"
            )));
        }
        Ok(WeightVector(a))
    }

    pub fn uniform(d: usize) -> Self {
        WeightVector(vec![1.0 / d as f64; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Confidence policy behind the automatic uncertainty radius.
#[derive(Debug, Clone, Copy)]
pub struct DeltaPolicy {
    /// Largest locally estimated residual variance at the moment the policy
    /// is created.
    pub sigma_max_sq: f64,
    /// Confidence multiplier; 1.96 matches a 95% normal interval.
    pub z: f64,
}

impl DeltaPolicy {
    pub fn new(sigma_max_sq: f64, z: f64) -> Result<Self> {
        if !(sigma_max_sq.is_finite() && sigma_max_sq > 0.0) {
            return Err(IcoaError::InvalidSpec("sigma_max_sq must be > 0".into()));
        }
        if !(z.is_finite() && z > 0.0) {
            return Err(IcoaError::InvalidSpec("z must be > 0".into()));
        }
        Ok(DeltaPolicy { sigma_max_sq, z })
    }
}

/// Index subsets for the off-diagonal covariance entries: one shared subset,
/// or one per unordered pair (i < j), covering all of 0..D.
#[derive(Debug, Clone)]
pub enum PairSample {
    Shared(Vec<usize>),
    PerPair { d: usize, samples: Vec<Vec<usize>> },
}

impl PairSample {
    /// Builds the per-pair variant from subsets listed in (i,j) lexicographic
    /// order for i < j; requires exactly D(D−1)/2 subsets.
    pub fn per_pair(d: usize, samples: Vec<Vec<usize>>) -> Result<Self> {
        let expected = d * (d - 1) / 2;
        if samples.len() != expected {
            return Err(IcoaError::ShapeMismatch {
                expected: format!("{expected} pair subsets"),
                got: format!("{}", samples.len()),
            });
        }
        Ok(PairSample::PerPair { d, samples })
    }

    pub fn subset(&self, i: usize, j: usize) -> &[usize] {
        match self {
            PairSample::Shared(s) => s,
            PairSample::PerPair { d, samples } => {
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                // rank of (lo, hi) in lexicographic pair order
                let offset = lo * (2 * d - lo - 1) / 2 + (hi - lo - 1);
                &samples[offset]
            }
        }
    }
}

fn pair_dot(a: &[f64], b: &[f64], idx: Option<&[usize]>) -> (f64, usize) {
    match idx {
        None => (a.iter().zip(b).map(|(x, y)| x * y).sum(), a.len()),
        Some(s) => (s.iter().map(|&n| a[n] * b[n]).sum(), s.len()),
    }
}

fn pair_mean(v: &[f64], idx: Option<&[usize]>) -> f64 {
    match idx {
        None => v.iter().sum::<f64>() / v.len() as f64,
        Some(s) => s.iter().map(|&n| v[n]).sum::<f64>() / s.len() as f64,
    }
}

/// Estimates the residual covariance A_ij = (1/N') r_iᵀ r_j.
///
/// Diagonals always use all N instances (each agent knows its own residual in
/// full); off-diagonals use the per-pair subsample when one is given. Raw
/// (uncentered) products by default, matching the estimator's zero-mean
/// assumption.
pub fn estimate_covariance(
    residual_cols: &[Vec<f64>],
    pair_sample: Option<&PairSample>,
) -> Result<CovarianceEstimate> {
    estimate_covariance_with(residual_cols, pair_sample, false)
}

/// [`estimate_covariance`] with an explicit mean-centering switch.
pub fn estimate_covariance_with(
    residual_cols: &[Vec<f64>],
    pair_sample: Option<&PairSample>,
    centered: bool,
) -> Result<CovarianceEstimate> {
    let d = residual_cols.len();
    if d == 0 {
        return Err(IcoaError::InvalidSpec("no residual columns".into()));
    }
    let n = residual_cols[0].len();
    for (i, c) in residual_cols.iter().enumerate() {
        if c.len() != n {
            return Err(IcoaError::ShapeMismatch {
                expected: format!("residual column of length {n}"),
                got: format!("column {i} of length {}", c.len()),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(IcoaError::NonFinite(format!("residual column {i}")));
        }
    }
    if n < 2 {
        return Err(IcoaError::InsufficientSamples { i: 0, j: 0, got: n });
    }
    if let Some(ps) = pair_sample {
        let check = |s: &[usize], i: usize, j: usize| -> Result<()> {
            if s.len() < 2 {
                return Err(IcoaError::InsufficientSamples { i, j, got: s.len() });
            }
            if let Some(&bad) = s.iter().find(|&&ix| ix >= n) {
                return Err(IcoaError::InvalidSpec(format!(
                    "subsample index {bad} out of range for {n} instances"
                )));
            }
            Ok(())
        };
        match ps {
            PairSample::Shared(s) => check(s, 0, 0)?,
            PairSample::PerPair { d: pd, .. } => {
                if *pd != d {
                    return Err(IcoaError::ShapeMismatch {
                        expected: format!("pair samples for D={d}"),
                        got: format!("D={pd}"),
                    });
                }
                for i in 0..d {
                    for j in (i + 1)..d {
                        check(ps.subset(i, j), i, j)?;
                    }
                }
            }
        }
    }

    let mut m = DMatrix::zeros(d, d);
    let mut off_n = n;
    for i in 0..d {
        let (dot, cnt) = pair_dot(&residual_cols[i], &residual_cols[i], None);
        let mut v = dot / cnt as f64;
        if centered {
            let mu = pair_mean(&residual_cols[i], None);
            v -= mu * mu;
        }
        m[(i, i)] = v;
        for j in (i + 1)..d {
            let idx = pair_sample.map(|ps| ps.subset(i, j));
            let (dot, cnt) = pair_dot(&residual_cols[i], &residual_cols[j], idx);
            let mut v = dot / cnt as f64;
            if centered {
                v -= pair_mean(&residual_cols[i], idx) * pair_mean(&residual_cols[j], idx);
            }
            m[(i, j)] = v;
            m[(j, i)] = v;
            off_n = cnt;
        }
    }
    CovarianceEstimate::from_matrix(m, if d > 1 { off_n } else { n }, pair_sample.is_some())
}

/// Solves M g = 1 under the jitter policy and returns (g, 1ᵀg).
///
/// An exact solve is accepted when it is finite and the symmetric condition
/// estimate stays below the cap; otherwise jitter λ = 1e−9·trace/D is added,
/// retried once at 10λ, and then the matrix is declared singular.
fn solve_ones(a: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    let d = a.nrows();
    let ones = DVector::from_element(d, 1.0);
    let base_jitter = 1e-9 * a.trace() / d as f64;
    let mut last_cond = f64::INFINITY;
    for jitter in [0.0, base_jitter, 10.0 * base_jitter] {
        let m = if jitter > 0.0 {
            let mut m = a.clone();
            for i in 0..d {
                m[(i, i)] += jitter;
            }
            m
        } else {
            a.clone()
        };
        let eig = m.clone().symmetric_eigen();
        let abs_max = eig
            .eigenvalues
            .iter()
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
        let abs_min = eig
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |acc, &v| acc.min(v.abs()));
        let cond = if abs_min > 0.0 {
            abs_max / abs_min
        } else {
            f64::INFINITY
        };
        last_cond = cond;
        if cond > CONDITION_CAP {
            continue;
        }
        if let Some(g) = m.lu().solve(&ones) {
            if g.iter().all(|v| v.is_finite()) {
                let s = g.sum();
                return Ok((g, s));
            }
        }
    }
    Err(IcoaError::SingularCovariance {
        condition: last_cond,
    })
}

/// The raw solution g = A⁻¹1 and its sum Q = 1ᵀg, under the jitter policy.
pub fn ones_solution(a: &CovarianceEstimate) -> Result<(DVector<f64>, f64)> {
    solve_ones(a.matrix())
}

/// Closed-form constrained minimizer: a = A⁻¹1/(1ᵀA⁻¹1), η = 1/(1ᵀA⁻¹1).
pub fn optimal_weights(a: &CovarianceEstimate) -> Result<(WeightVector, f64)> {
    let (g, s) = solve_ones(a.matrix())?;
    if s == 0.0 || !s.is_finite() {
        return Err(IcoaError::SingularCovariance {
            condition: f64::INFINITY,
        });
    }
    let w: Vec<f64> = g.iter().map(|v| v / s).collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(IcoaError::NonFinite("optimal weights".into()));
    }
    // Exact feasibility despite rounding in the division.
    let w = project_to_simplex_plane(&w);
    Ok((WeightVector(w), 1.0 / s))
}

fn project_to_simplex_plane(a: &[f64]) -> Vec<f64> {
    let shift = (a.iter().sum::<f64>() - 1.0) / a.len() as f64;
    a.iter().map(|v| v - shift).collect()
}

/// Gradient of Q = 1ᵀA⁻¹1 with respect to each agent's prediction vector:
/// column i is (2 g_i / N) R g, g = A⁻¹1. Depends only on the residuals.
pub fn eta_gradient(residual_cols: &[Vec<f64>], a: &CovarianceEstimate) -> Result<Vec<Vec<f64>>> {
    let d = residual_cols.len();
    if d != a.d() {
        return Err(IcoaError::ShapeMismatch {
            expected: format!("{} residual columns", a.d()),
            got: format!("{d}"),
        });
    }
    let n = residual_cols[0].len();
    let (g, _) = solve_ones(a.matrix())?;
    // v = R g, one pass over the residual columns
    let mut v = vec![0.0_f64; n];
    for (i, col) in residual_cols.iter().enumerate() {
        let gi = g[i];
        for (vn, rn) in v.iter_mut().zip(col) {
            *vn += gi * rn;
        }
    }
    Ok((0..d)
        .map(|i| {
            let scale = 2.0 * g[i] / n as f64;
            v.iter().map(|&vn| scale * vn).collect()
        })
        .collect())
}

fn quadratic_form(m: &DMatrix<f64>, a: &[f64]) -> f64 {
    let d = a.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * a[j];
        }
        acc += a[i] * row;
    }
    acc
}

/// The adversarial covariance inside the box and its value: off-diagonals
/// move by δ·sgn(a_i a_j), sgn(0) := +1, so ζ = aᵀA₀a + 2δ Σ_{i<j} |a_i a_j|.
pub fn worst_case_covariance(
    a0: &CovarianceEstimate,
    boxr: &UncertaintyBox,
    a: &WeightVector,
) -> Result<(CovarianceEstimate, f64)> {
    let d = a0.d();
    if a.len() != d {
        return Err(IcoaError::ShapeMismatch {
            expected: format!("weight vector of length {d}"),
            got: format!("{}", a.len()),
        });
    }
    let w = a.as_slice();
    let mut m = a0.matrix().clone();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let prod = w[i] * w[j];
                let sign = if prod >= 0.0 { 1.0 } else { -1.0 };
                m[(i, j)] += boxr.delta * sign;
            }
        }
    }
    let zeta = quadratic_form(&m, w);
    let worst = CovarianceEstimate {
        matrix: m,
        n_samples_used: a0.n_samples_used,
        is_subsampled: a0.is_subsampled,
    };
    Ok((worst, zeta))
}

/// The protected objective ζ(a) = aᵀ(A₀ − δI)a + δ(Σ|a_i|)².
fn protected_objective(a0: &DMatrix<f64>, delta: f64, a: &[f64]) -> f64 {
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let sq: f64 = a.iter().map(|v| v * v).sum();
    quadratic_form(a0, a) - delta * sq + delta * l1 * l1
}

const MINIMAX_MAX_ITERS: usize = 10_000;
const MINIMAX_REL_TOL: f64 = 1e-9;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

/// Minimizes the protected objective over Σa = 1 by projected subgradient
/// descent with backtracking; the subgradient of |a_i| at 0 is taken as 0.
/// Descends from `init`, then scans the simplex vertices: once δ outweighs
/// the covariance spread the global minimum sits on a vertex (where the L1
/// surcharge vanishes and the value is just A_kk), a basin the descent from a
/// mixed start routinely misses. The best vertex is polished by a second
/// descent and the better of the two results wins. Always returns a feasible
/// point whose value never exceeds the init's. δ = 0 reduces to the closed
/// form.
pub fn minimax_weights(
    a0: &CovarianceEstimate,
    boxr: &UncertaintyBox,
    init: &WeightVector,
) -> Result<(WeightVector, f64)> {
    let d = a0.d();
    if init.len() != d {
        return Err(IcoaError::ShapeMismatch {
            expected: format!("init of length {d}"),
            got: format!("{}", init.len()),
        });
    }
    let delta = boxr.delta;
    if delta == 0.0 {
        if let Ok((w, eta)) = optimal_weights(a0) {
            // Global minimum of the unprotected quadratic; still guard the
            // "never worse than init" contract in case of indefiniteness.
            let m = a0.matrix();
            if quadratic_form(m, w.as_slice()) <= quadratic_form(m, init.as_slice()) {
                return Ok((w, eta));
            }
        }
    }

    let m = a0.matrix();
    let (a1, v1) = descend_protected(m, delta, init.as_slice().to_vec());

    let mut vertex = vec![0.0_f64; d];
    let mut best_k = 0usize;
    let mut best_vertex_value = f64::INFINITY;
    for k in 0..d {
        vertex.fill(0.0);
        vertex[k] = 1.0;
        let v = protected_objective(m, delta, &vertex);
        if v < best_vertex_value {
            best_vertex_value = v;
            best_k = k;
        }
    }
    if best_vertex_value < v1 {
        vertex.fill(0.0);
        vertex[best_k] = 1.0;
        let (a2, v2) = descend_protected(m, delta, vertex);
        if v2 < v1 {
            return finish_minimax(a2, v2);
        }
    }
    finish_minimax(a1, v1)
}

/// One projected subgradient run; returns its best iterate.
fn descend_protected(m: &DMatrix<f64>, delta: f64, start: Vec<f64>) -> (Vec<f64>, f64) {
    let d = start.len();
    let mut a = start;
    let mut value = protected_objective(m, delta, &a);
    let mut best_a = a.clone();
    let mut best_value = value;

    for _ in 0..MINIMAX_MAX_ITERS {
        // subgradient: 2(A0 − δI)a + 2δ‖a‖₁ sign(a), sign(0) = 0
        let l1: f64 = a.iter().map(|v| v.abs()).sum();
        let mut gr = vec![0.0_f64; d];
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += m[(i, j)] * a[j];
            }
            let sign = if a[i] > 0.0 {
                1.0
            } else if a[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            gr[i] = 2.0 * (row - delta * a[i]) + 2.0 * delta * l1 * sign;
        }
        // project the direction onto the constraint plane 1ᵀd = 0
        let mean = gr.iter().sum::<f64>() / d as f64;
        for g in gr.iter_mut() {
            *g -= mean;
        }
        let norm_sq: f64 = gr.iter().map(|g| g * g).sum();
        if norm_sq == 0.0 || !norm_sq.is_finite() {
            break;
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = a.iter().zip(&gr).map(|(ai, gi)| ai - step * gi).collect();
            let cand = project_to_simplex_plane(&cand);
            let cv = protected_objective(m, delta, &cand);
            if cv.is_finite() && cv <= value - ARMIJO * step * norm_sq {
                let rel = (value - cv).abs() / value.abs().max(1.0);
                a = cand;
                value = cv;
                if value < best_value {
                    best_value = value;
                    best_a = a.clone();
                }
                accepted = true;
                if rel < MINIMAX_REL_TOL {
                    return (best_a, best_value);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (best_a, best_value)
}

fn finish_minimax(a: Vec<f64>, value: f64) -> Result<(WeightVector, f64)> {
    if a.iter().any(|v| !v.is_finite()) || !value.is_finite() {
        return Err(IcoaError::NonFinite("minimax weights".into()));
    }
    Ok((WeightVector(project_to_simplex_plane(&a)), value))
}

/// True iff the protected objective is convex: δ ≤ λ_min(A₀) within 1e−10.
pub fn convexity_check(a0: &CovarianceEstimate, delta: f64) -> bool {
    let eig = a0.matrix().clone().symmetric_eigen();
    let lambda_min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    delta <= lambda_min + 1e-10
}

/// The confidence-derived uncertainty radius
/// δ_opt(α) = min{ z·σ²_max / √(N/α), 2σ²_max }.
pub fn delta_opt(policy: &DeltaPolicy, n: usize, alpha: f64) -> Result<f64> {
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(IcoaError::InvalidSpec("alpha must be >= 1".into()));
    }
    let eff = n as f64 / alpha;
    if eff < 1.0 {
        return Err(IcoaError::InvalidSpec(format!(
            "N/alpha = {eff} < 1; nothing to transmit"
        )));
    }
    Ok((policy.z * policy.sigma_max_sq / eff.sqrt()).min(2.0 * policy.sigma_max_sq))
}

/// Worst-case training second moment achievable with protection δ, computed
/// on the covariance of the initial (non-cooperative) residuals: the minimax
/// value starting from the closed-form weights (uniform when singular).
pub fn upper_bound(a_ini: &CovarianceEstimate, delta: f64) -> Result<f64> {
    let boxr = UncertaintyBox::new(delta)?;
    let init = match optimal_weights(a_ini) {
        Ok((w, _)) => w,
        Err(_) => WeightVector::uniform(a_ini.d()),
    };
    let (_, value) = minimax_weights(a_ini, &boxr, &init)?;
    Ok(value)
}
