//! Oracle checks for the covariance math: every reference value here is
//! computed by test-local code that shares no linear algebra with the
//! library (hand-rolled Gaussian elimination, explicit enumeration, dense
//! grids), so agreement is evidence rather than tautology.

use icoa::ensemble::{
    convexity_check, delta_opt, estimate_covariance, estimate_covariance_with, eta_gradient,
    minimax_weights, optimal_weights, upper_bound, worst_case_covariance, CovarianceEstimate,
    DeltaPolicy, PairSample, UncertaintyBox, WeightVector,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// test-local reference implementations

/// Solves M x = b by Gaussian elimination with partial pivoting.
// plain textbook elimination on purpose: the oracle should be obviously right
#[allow(clippy::needless_range_loop)]
fn gauss_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv =
            (col..n).max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// aᵀMa with the same loop shape the library uses, so enumeration oracles
/// can demand bit equality.
fn qform_vec(m: &[Vec<f64>], a: &[f64]) -> f64 {
    let d = a.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[i][j] * a[j];
        }
        acc += a[i] * row;
    }
    acc
}

/// min aᵀMa subject to 1ᵀa = 1 via the bordered KKT system
/// [[2M, 1], [1ᵀ, 0]] [a; λ] = [0; 1].
fn kkt_weights(m: &[Vec<f64>]) -> Option<(Vec<f64>, f64)> {
    let d = m.len();
    let mut big = vec![vec![0.0; d + 1]; d + 1];
    for i in 0..d {
        for j in 0..d {
            big[i][j] = 2.0 * m[i][j];
        }
        big[i][d] = 1.0;
        big[d][i] = 1.0;
    }
    let mut rhs = vec![0.0; d + 1];
    rhs[d] = 1.0;
    let sol = gauss_solve(big, rhs)?;
    let a = sol[..d].to_vec();
    let eta = qform_vec(m, &a);
    Some((a, eta))
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize, ridge: f64) -> Vec<Vec<f64>> {
    let k = d + 2;
    let b: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for row in &b {
                acc += row[i] * row[j];
            }
            m[i][j] = acc;
        }
        m[i][i] += ridge;
    }
    m
}

fn to_estimate(m: &[Vec<f64>]) -> CovarianceEstimate {
    let d = m.len();
    let dm = DMatrix::from_fn(d, d, |i, j| m[i][j]);
    CovarianceEstimate::from_matrix(dm, 100, false).unwrap()
}

/// ζ(a) = aᵀ(A₀ − δI)a + δ(Σ|a_i|)², written independently of the library.
fn protected_value(m: &[Vec<f64>], delta: f64, a: &[f64]) -> f64 {
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    let sq: f64 = a.iter().map(|v| v * v).sum();
    qform_vec(m, a) - delta * sq + delta * l1 * l1
}

/// Random weight vector on the plane Σa = 1, entries allowed negative.
fn random_plane_weights(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        if s.abs() > 0.3 {
            let mut w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let drift = (w.iter().sum::<f64>() - 1.0) / d as f64;
            for v in &mut w {
                *v -= drift;
            }
            return w;
        }
    }
}

// ---------------------------------------------------------------------------
// closed-form weights

#[test]
fn optimal_weights_match_kkt_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let d = 2 + case % 4;
        let m = random_spd(&mut rng, d, 0.1);
        let (oracle_a, oracle_eta) = kkt_weights(&m).unwrap();
        let (a, eta) = optimal_weights(&to_estimate(&m)).unwrap();
        let scale = oracle_a.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        for (got, want) in a.as_slice().iter().zip(&oracle_a) {
            assert!(
                (got - want).abs() <= 1e-8 * scale,
                "case {case}: weight {got} vs oracle {want}"
            );
        }
        assert!(
            (eta - oracle_eta).abs() <= 1e-8 * oracle_eta.abs().max(1.0),
            "case {case}: eta {eta} vs oracle {oracle_eta}"
        );
    }
}

#[test]
fn optimal_weights_hand_examples() {
    // Identity: uniform weights, eta = 1/D.
    let eye = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let (a, eta) = optimal_weights(&to_estimate(&eye)).unwrap();
    for v in a.as_slice() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    assert!((eta - 1.0 / 3.0).abs() < 1e-12);

    // diag(1, 2): weights proportional to (1, 1/2), eta = 2/3.
    let diag = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
    let (a, eta) = optimal_weights(&to_estimate(&diag)).unwrap();
    assert!((a.as_slice()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((a.as_slice()[1] - 1.0 / 3.0).abs() < 1e-12);
    assert!((eta - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn random_feasible_perturbations_never_beat_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for d in 2..=5 {
        let m = random_spd(&mut rng, d, 0.1);
        let (a, eta) = optimal_weights(&to_estimate(&m)).unwrap();
        let a = a.as_slice().to_vec();
        for _ in 0..1000 {
            // direction with zero sum keeps the candidate feasible
            let mut u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = u.iter().sum::<f64>() / d as f64;
            for v in &mut u {
                *v -= mean;
            }
            let t = rng.gen_range(-0.5..0.5);
            let cand: Vec<f64> = a.iter().zip(&u).map(|(ai, ui)| ai + t * ui).collect();
            let val = qform_vec(&m, &cand);
            assert!(
                val >= eta - 1e-10 * eta.abs().max(1.0),
                "D={d}: perturbed value {val} beat optimum {eta}"
            );
        }
    }
}

#[test]
fn eta_agrees_with_both_closed_forms() {
    // eta must equal both 1/(1ᵀA⁻¹1) and aᵀAa at the returned weights.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..50 {
        let d = rng.gen_range(2..=5);
        let m = random_spd(&mut rng, d, 0.05);
        let (a, eta) = optimal_weights(&to_estimate(&m)).unwrap();
        let g = gauss_solve(m.clone(), vec![1.0; d]).unwrap();
        let q: f64 = g.iter().sum();
        assert!((eta - 1.0 / q).abs() <= 1e-10 * eta.abs().max(1.0));
        let direct = qform_vec(&m, a.as_slice());
        assert!((eta - direct).abs() <= 1e-10 * eta.abs().max(1.0));
    }
}

// ---------------------------------------------------------------------------
// gradient of the training objective

#[test]
fn eta_gradient_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-5;
    for case in 0..20 {
        let d = rng.gen_range(2..=5);
        let n = rng.gen_range(8..=50);
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = estimate_covariance(&cols, None).unwrap();
        let grad = eta_gradient(&cols, &a).unwrap();

        // Q(residuals) through the test-local covariance and solver only.
        let q_of = |cols: &[Vec<f64>]| -> f64 {
            let mut m = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    let acc: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                    m[i][j] = acc / n as f64;
                }
            }
            gauss_solve(m, vec![1.0; d]).unwrap().iter().sum()
        };

        let gmax = grad
            .iter()
            .flat_map(|c| c.iter())
            .fold(1.0_f64, |s, v| s.max(v.abs()));
        // probe a handful of entries per instance to keep this quick
        for i in 0..d {
            for t in (0..n).step_by(1 + n / 5) {
                let mut pert = cols.clone();
                // raising a prediction lowers the residual
                pert[i][t] = cols[i][t] - h;
                let plus = q_of(&pert);
                pert[i][t] = cols[i][t] + h;
                let minus = q_of(&pert);
                let fd = (plus - minus) / (2.0 * h);
                assert!(
                    (grad[i][t] - fd).abs() <= 1e-5 * gmax,
                    "case {case}, entry ({i},{t}): analytic {} vs FD {fd}",
                    grad[i][t]
                );
            }
        }
    }
}

#[test]
fn gradient_columns_identical_when_covariance_is_scaled_identity() {
    // A = cI makes g = A⁻¹1 uniform, so every agent gets the same column.
    let cols = vec![vec![0.5, -0.5, 0.5, -0.5], vec![0.5, 0.5, -0.5, -0.5]];
    let a = estimate_covariance(&cols, None).unwrap();
    assert!((a.matrix()[(0, 1)]).abs() < 1e-15);
    let grad = eta_gradient(&cols, &a).unwrap();
    let combined: Vec<f64> = (0..4).map(|t| cols[0][t] + cols[1][t]).collect();
    for (i, col) in grad.iter().enumerate() {
        for t in 0..4 {
            // (2 g_i / N) (R g) with g_i = 1/c = 4, N = 4, c = 0.25
            let want = 2.0 * 4.0 / 4.0 * 4.0 * combined[t];
            assert!(
                (col[t] - want).abs() < 1e-12,
                "agent {i} entry {t}: {} vs {want}",
                col[t]
            );
        }
    }
}

#[test]
fn gradient_reduces_to_single_agent_formula() {
    // D = 1: column is (2/N) r / A₁₁².
    let r = vec![0.4, -0.2, 0.9, 0.1, -0.6];
    let a = estimate_covariance(std::slice::from_ref(&r), None).unwrap();
    let a11 = a.matrix()[(0, 0)];
    let grad = eta_gradient(std::slice::from_ref(&r), &a).unwrap();
    for t in 0..r.len() {
        let want = 2.0 / r.len() as f64 * r[t] / (a11 * a11);
        assert!((grad[0][t] - want).abs() < 1e-14);
    }
}

// ---------------------------------------------------------------------------
// covariance estimation

#[test]
fn covariance_matches_direct_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let d = 4;
    let n = 37;
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let a = estimate_covariance(&cols, None).unwrap();
    assert_eq!(a.n_samples_used, n);
    assert!(!a.is_subsampled);
    for i in 0..d {
        for j in 0..d {
            let acc: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            let want = acc / n as f64;
            assert!(
                (a.matrix()[(i, j)] - want).abs() <= 1e-12 * want.abs().max(1.0),
                "entry ({i},{j})"
            );
        }
    }
}

#[test]
fn subsampled_covariance_keeps_full_diagonals() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let d = 3;
    let n = 24;
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let subset: Vec<usize> = vec![1, 4, 9, 16, 23];
    let ps = PairSample::Shared(subset.clone());
    let a = estimate_covariance(&cols, Some(&ps)).unwrap();
    assert!(a.is_subsampled);
    for i in 0..d {
        // diagonal over all N
        let full: f64 = cols[i].iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((a.matrix()[(i, i)] - full).abs() < 1e-14);
        for j in (i + 1)..d {
            let sub: f64 =
                subset.iter().map(|&t| cols[i][t] * cols[j][t]).sum::<f64>() / subset.len() as f64;
            assert!((a.matrix()[(i, j)] - sub).abs() < 1e-14, "entry ({i},{j})");
            assert_eq!(a.matrix()[(i, j)], a.matrix()[(j, i)]);
        }
    }
}

#[test]
fn per_pair_subsets_land_on_their_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let d = 3;
    let n = 30;
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // distinct subsets per pair, (0,1), (0,2), (1,2) in order
    let subsets = vec![vec![0, 1, 2], vec![10, 11, 12, 13], vec![20, 25, 29]];
    let ps = PairSample::per_pair(d, subsets.clone()).unwrap();
    let a = estimate_covariance(&cols, Some(&ps)).unwrap();
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let want: f64 = subsets[p]
            .iter()
            .map(|&t| cols[i][t] * cols[j][t])
            .sum::<f64>()
            / subsets[p].len() as f64;
        assert!((a.matrix()[(i, j)] - want).abs() < 1e-14, "pair ({i},{j})");
    }
}

#[test]
fn centered_covariance_subtracts_subset_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let d = 2;
    let n = 20;
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let subset = vec![2, 3, 5, 7, 11, 13];
    let ps = PairSample::Shared(subset.clone());
    let a = estimate_covariance_with(&cols, Some(&ps), true).unwrap();

    let mean_full = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    let m0 = mean_full(&cols[0]);
    let want_diag = cols[0].iter().map(|v| v * v).sum::<f64>() / n as f64 - m0 * m0;
    assert!((a.matrix()[(0, 0)] - want_diag).abs() < 1e-14);

    let msub = |c: &[f64]| subset.iter().map(|&t| c[t]).sum::<f64>() / subset.len() as f64;
    let raw: f64 =
        subset.iter().map(|&t| cols[0][t] * cols[1][t]).sum::<f64>() / subset.len() as f64;
    let want_off = raw - msub(&cols[0]) * msub(&cols[1]);
    assert!((a.matrix()[(0, 1)] - want_off).abs() < 1e-14);
}

// ---------------------------------------------------------------------------
// worst case inside the uncertainty box

#[test]
fn worst_case_matches_sign_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for case in 0..100 {
        let d = 2 + case % 3; // 2..=4
        let m = random_spd(&mut rng, d, 0.2);
        let delta = rng.gen_range(0.01..0.5);
        let mut w = random_plane_weights(&mut rng, d);
        if case % 7 == 0 {
            // exercise the zero-product convention now and then
            w[0] = 0.0;
            let s: f64 = w.iter().sum();
            let fix = (s - 1.0) / (d - 1) as f64;
            for v in w.iter_mut().skip(1) {
                *v -= fix;
            }
        }
        let weights = WeightVector::new(w.clone()).unwrap();
        let boxr = UncertaintyBox::new(delta).unwrap();
        let (_, zeta) = worst_case_covariance(&to_estimate(&m), &boxr, &weights).unwrap();

        // enumerate every off-diagonal sign pattern
        let pairs: Vec<(usize, usize)> = (0..d)
            .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
            .collect();
        let mut best = f64::NEG_INFINITY;
        for mask in 0..(1u32 << pairs.len()) {
            let mut cand = m.clone();
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let s = if mask >> p & 1 == 1 { 1.0 } else { -1.0 };
                cand[i][j] += delta * s;
                cand[j][i] += delta * s;
            }
            best = best.max(qform_vec(&cand, &w));
        }
        assert_eq!(
            zeta, best,
            "case {case}: library worst case differs from enumeration"
        );
    }
}

#[test]
fn zero_weight_products_push_entries_up() {
    let m = vec![
        vec![1.0, 0.1, 0.2],
        vec![0.1, 1.0, 0.3],
        vec![0.2, 0.3, 1.0],
    ];
    let w = WeightVector::new(vec![0.0, 0.5, 0.5]).unwrap();
    let boxr = UncertaintyBox::new(0.25).unwrap();
    let (worst, zeta) = worst_case_covariance(&to_estimate(&m), &boxr, &w).unwrap();
    // pairs involving the zero weight still move in the +delta direction
    assert_eq!(worst.matrix()[(0, 1)], 0.1 + 0.25);
    assert_eq!(worst.matrix()[(0, 2)], 0.2 + 0.25);
    assert_eq!(worst.matrix()[(1, 2)], 0.3 + 0.25);
    // and the value only feels the live pair
    let want = qform_vec(
        &[
            vec![1.0, 0.35, 0.45],
            vec![0.35, 1.0, 0.55],
            vec![0.45, 0.55, 1.0],
        ],
        &[0.0, 0.5, 0.5],
    );
    assert_eq!(zeta, want);
}

// ---------------------------------------------------------------------------
// minimax weighting

#[test]
fn minimax_reduces_to_closed_form_without_uncertainty() {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    for _ in 0..30 {
        let d = rng.gen_range(2..=5);
        let m = random_spd(&mut rng, d, 0.1);
        let est = to_estimate(&m);
        let (closed, eta) = optimal_weights(&est).unwrap();
        let boxr = UncertaintyBox::new(0.0).unwrap();
        let init = WeightVector::uniform(d);
        let (a, value) = minimax_weights(&est, &boxr, &init).unwrap();
        assert!((value - eta).abs() <= 1e-8 * eta.abs().max(1.0));
        for (got, want) in a.as_slice().iter().zip(closed.as_slice()) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn minimax_identity_example() {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let boxr = UncertaintyBox::new(0.2).unwrap();
    let init = WeightVector::uniform(2);
    let (a, value) = minimax_weights(&to_estimate(&eye), &boxr, &init).unwrap();
    // symmetric problem: equal weights, value 0.8*0.5 + 0.2*1 = 0.6
    assert!((a.as_slice()[0] - 0.5).abs() < 1e-6);
    assert!((a.as_slice()[1] - 0.5).abs() < 1e-6);
    assert!((value - 0.6).abs() < 1e-9);
}

#[test]
fn minimax_matches_dense_grid_on_two_agents() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for case in 0..10 {
        let delta = rng.gen_range(0.02..0.3);
        // ridge keeps lambda_min above delta, the convex regime
        let m = random_spd(&mut rng, 2, delta + 0.25);
        let est = to_estimate(&m);
        let boxr = UncertaintyBox::new(delta).unwrap();
        let init = WeightVector::uniform(2);
        let (_, value) = minimax_weights(&est, &boxr, &init).unwrap();

        let mut best = f64::INFINITY;
        let steps = 30_000usize;
        for k in 0..=steps {
            let t = -1.0 + 3.0 * k as f64 / steps as f64;
            let cand = [t, 1.0 - t];
            best = best.min(protected_value(&m, delta, &cand));
        }
        assert!(
            (value - best).abs() <= 1e-4 * best.abs().max(1.0),
            "case {case}: {value} vs grid {best}"
        );
    }
}

#[test]
fn minimax_value_is_the_protected_objective_at_its_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1313);
    for _ in 0..20 {
        let d = rng.gen_range(2..=4);
        let m = random_spd(&mut rng, d, 0.05);
        let delta = rng.gen_range(0.0..0.6);
        let est = to_estimate(&m);
        let boxr = UncertaintyBox::new(delta).unwrap();
        let init = WeightVector::uniform(d);
        let (a, value) = minimax_weights(&est, &boxr, &init).unwrap();
        let w = a.as_slice();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let direct = protected_value(&m, delta, w);
        assert!(
            (value - direct).abs() <= 1e-10 * direct.abs().max(1.0),
            "{value} vs {direct}"
        );
        // and the adversary formulation gives the same number
        let (_, zeta) = worst_case_covariance(&est, &boxr, &a).unwrap();
        assert!((value - zeta).abs() <= 1e-10 * zeta.abs().max(1.0));
    }
}

// ---------------------------------------------------------------------------
// protection radius and bound

#[test]
fn delta_opt_examples() {
    let policy = DeltaPolicy::new(1.0, 1.96).unwrap();
    // N = 4000: full sample and a 100x subsample
    let full = delta_opt(&policy, 4000, 1.0).unwrap();
    assert!((full - 0.030990).abs() < 2e-6, "{full}");
    let sub = delta_opt(&policy, 4000, 100.0).unwrap();
    assert!((sub - 0.309903).abs() < 2e-5, "{sub}");
    assert!((sub - 1.96 / (40.0_f64).sqrt()).abs() < 1e-12);

    // cap branch: z > 2 and one effective sample
    let wide = DeltaPolicy::new(1.0, 3.0).unwrap();
    assert_eq!(delta_opt(&wide, 4, 4.0).unwrap(), 2.0);

    // scales linearly in the variance
    let scaled = DeltaPolicy::new(2.5, 1.96).unwrap();
    let v = delta_opt(&scaled, 4000, 100.0).unwrap();
    assert!((v - 2.5 * sub).abs() < 1e-12);
}

#[test]
fn delta_opt_rejects_empty_subsample() {
    let policy = DeltaPolicy::new(1.0, 1.96).unwrap();
    assert!(delta_opt(&policy, 10, 20.0).is_err());
    assert!(delta_opt(&policy, 10, 0.5).is_err());
}

#[test]
fn upper_bound_monotone_and_tight_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1414);
    for _ in 0..10 {
        let d = rng.gen_range(2..=4);
        let m = random_spd(&mut rng, d, 0.1);
        let est = to_estimate(&m);
        let (_, eta) = optimal_weights(&est).unwrap();
        let b0 = upper_bound(&est, 0.0).unwrap();
        assert!((b0 - eta).abs() <= 1e-8 * eta.abs().max(1.0));
        let mut prev = b0;
        for delta in [0.01, 0.05, 0.1, 0.3, 0.8] {
            let b = upper_bound(&est, delta).unwrap();
            assert!(
                b >= prev - 1e-10,
                "bound fell from {prev} to {b} at {delta}"
            );
            prev = b;
        }
    }
}

#[test]
fn bound_grows_with_coarser_subsampling() {
    // delta_opt grows in alpha and the bound grows in delta, so protecting a
    // coarser estimate can only cost more. Stated for the convex regime
    // (delta below the smallest eigenvalue), where the solver is exact; a
    // near-identity covariance keeps every radius on that side.
    let mut rng = ChaCha8Rng::seed_from_u64(1515);
    let (p, q, r) = (
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.02..0.02),
    );
    let m = vec![vec![1.0, p, q], vec![p, 1.0, r], vec![q, r, 1.0]];
    let est = to_estimate(&m);
    let policy = DeltaPolicy::new(est.max_diagonal(), 1.96).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for alpha in [1.0, 10.0, 50.0, 200.0, 800.0] {
        let delta = delta_opt(&policy, 4000, alpha).unwrap();
        assert!(
            convexity_check(&est, delta),
            "alpha {alpha} left the convex regime"
        );
        let b = upper_bound(&est, delta).unwrap();
        assert!(
            b >= prev - 1e-8,
            "alpha {alpha}: bound fell from {prev} to {b}"
        );
        prev = b;
    }
}

#[test]
fn convexity_check_uses_smallest_eigenvalue() {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(convexity_check(&to_estimate(&eye), 0.9));
    assert!(!convexity_check(&to_estimate(&eye), 1.1));
}

// ---------------------------------------------------------------------------
// properties

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn prop_optimal_weights_beat_plane_perturbations(seed in any::<u64>(), d in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_spd(&mut rng, d, 0.1);
        let (a, eta) = optimal_weights(&to_estimate(&m)).unwrap();
        let a = a.as_slice();
        for _ in 0..50 {
            let mut u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = u.iter().sum::<f64>() / d as f64;
            for v in &mut u { *v -= mean; }
            let t = rng.gen_range(-1.0..1.0);
            let cand: Vec<f64> = a.iter().zip(&u).map(|(ai, ui)| ai + t * ui).collect();
            prop_assert!(qform_vec(&m, &cand) >= eta - 1e-10 * eta.abs().max(1.0));
        }
    }

    #[test]
    fn prop_minimax_never_beats_its_init(seed in any::<u64>(), d in 2usize..=4, delta in 0.0f64..1.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_spd(&mut rng, d, 0.05);
        let est = to_estimate(&m);
        let boxr = UncertaintyBox::new(delta).unwrap();
        let init = WeightVector::uniform(d);
        let init_value = protected_value(&m, delta, init.as_slice());
        let (_, value) = minimax_weights(&est, &boxr, &init).unwrap();
        prop_assert!(value <= init_value + 1e-9 * init_value.abs().max(1.0));
    }

    #[test]
    fn prop_worst_case_dominates_nominal(seed in any::<u64>(), d in 2usize..=4, delta in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_spd(&mut rng, d, 0.05);
        let w = random_plane_weights(&mut rng, d);
        let weights = WeightVector::new(w.clone()).unwrap();
        let boxr = UncertaintyBox::new(delta).unwrap();
        let (_, zeta) = worst_case_covariance(&to_estimate(&m), &boxr, &weights).unwrap();
        let nominal = qform_vec(&m, &w);
        prop_assert!(zeta >= nominal - 1e-12 * nominal.abs().max(1.0));
    }
}
