//! Agent orchestration: non-cooperative initialization, the iterative
//! covariance optimization loop with optional minimax protection, the
//! residual-refitting and averaging baselines, ensemble prediction, and
//! exact transmission accounting.
//!
//! One sweep visits every agent once: compute the objective gradient with
//! respect to the agent's prediction vector, back-search a step size, refit
//! the agent on the shifted target, and accept the refit only if the
//! current inner objective actually improved (Q = 1ᵀA⁻¹1 rises when minimax
//! is off; the protected value ζ* falls when it is on). Evaluating the
//! candidate after the refit, rather than at the raw shifted target, is what
//! makes the objective trace monotone end-to-end: the refit is part of the
//! state transition, so a step is only worth taking if it survives the
//! projection onto the agent's hypothesis space.

use crate::datagen::{Dataset, N_ATTRIBUTES};
use crate::ensemble::{
    delta_opt, estimate_covariance, minimax_weights, ones_solution, optimal_weights,
    CovarianceEstimate, DeltaPolicy, PairSample, UncertaintyBox, WeightVector,
};
use crate::error::{IcoaError, Result};
use crate::exec::ExecMode;
use crate::learner::{fit, predict, FittedModel, LearnerSpec};
use crate::seed::{self, STREAM_RUN};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::HashSet;

/// One agent: its attribute subset, fitted learner, and training-side state.
/// `residual + train_predictions = outcomes` elementwise at all times.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub attributes: Vec<usize>,
    pub learner_spec: LearnerSpec,
    /// None means the zero predictor (the refitting baseline starts there).
    pub model: Option<FittedModel>,
    pub train_predictions: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackSearch {
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    #[serde(default = "default_max_halvings")]
    pub max_halvings: usize,
}

fn default_initial_step() -> f64 {
    1.0
}
fn default_shrink() -> f64 {
    0.5
}
fn default_max_halvings() -> usize {
    30
}

impl Default for BackSearch {
    fn default() -> Self {
        BackSearch {
            initial_step: default_initial_step(),
            shrink: default_shrink(),
            max_halvings: default_max_halvings(),
        }
    }
}

/// δ can be pinned or resolved from the confidence policy at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaSetting {
    Fixed(f64),
    Auto,
}

impl<'de> Deserialize<'de> for DeltaSetting {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(DeltaSetting::Fixed(v)),
            Raw::Word(w) if w == "auto" => Ok(DeltaSetting::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "delta must be a number or \"auto\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    #[default]
    Ascending,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSampling {
    #[default]
    Shared,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central finite differences of the live objective with respect to each
    /// target entry. O(N) solves per agent per sweep; a cross-checking
    /// reference for small problems, not a production path.
    Perturbation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default)]
    pub backsearch: BackSearch,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: DeltaSetting,
    #[serde(default)]
    pub minimax_enabled: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub update_order: UpdateOrder,
    #[serde(default)]
    pub pair_sampling: PairSampling,
    #[serde(default = "default_delta_z")]
    pub delta_z: f64,
    #[serde(default)]
    pub gradient_mode: GradientMode,
}

fn default_epsilon() -> f64 {
    1e-6
}
fn default_max_sweeps() -> usize {
    200
}
fn default_alpha() -> f64 {
    1.0
}
fn default_delta() -> DeltaSetting {
    DeltaSetting::Fixed(0.0)
}
fn default_delta_z() -> f64 {
    1.96
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epsilon: default_epsilon(),
            max_sweeps: default_max_sweeps(),
            backsearch: BackSearch::default(),
            alpha: default_alpha(),
            delta: default_delta(),
            minimax_enabled: false,
            seed: 0,
            update_order: UpdateOrder::default(),
            pair_sampling: PairSampling::default(),
            delta_z: default_delta_z(),
            gradient_mode: GradientMode::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(IcoaError::InvalidSpec("epsilon must be > 0".into()));
        }
        if self.max_sweeps < 1 {
            return Err(IcoaError::InvalidSpec("max_sweeps must be >= 1".into()));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(IcoaError::InvalidSpec("alpha must be >= 1".into()));
        }
        if !self.minimax_enabled && self.alpha != 1.0 {
            return Err(IcoaError::InvalidSpec(
                "alpha > 1 requires minimax_enabled (subsampling without protection is undefined here)"
                    .into(),
            ));
        }
        if self.minimax_enabled && subsample_size(n_train, self.alpha) < 2 {
            return Err(IcoaError::InvalidSpec(format!(
                "ceil(N/alpha) = {} < 2 with N = {n_train}, alpha = {}",
                subsample_size(n_train, self.alpha),
                self.alpha
            )));
        }
        if let DeltaSetting::Fixed(d) = self.delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(IcoaError::InvalidSpec(
                    "delta must be finite and >= 0".into(),
                ));
            }
        }
        if !(self.backsearch.initial_step > 0.0 && self.backsearch.initial_step.is_finite()) {
            return Err(IcoaError::InvalidSpec(
                "backsearch.initial_step must be > 0".into(),
            ));
        }
        if !(self.backsearch.shrink > 0.0 && self.backsearch.shrink < 1.0) {
            return Err(IcoaError::InvalidSpec(
                "backsearch.shrink must lie in (0,1)".into(),
            ));
        }
        if !(self.delta_z > 0.0 && self.delta_z.is_finite()) {
            return Err(IcoaError::InvalidSpec("delta_z must be > 0".into()));
        }
        Ok(())
    }
}

fn subsample_size(n: usize, alpha: f64) -> usize {
    (n as f64 / alpha).ceil() as usize
}

/// One trace row; `eta` is the inner objective value (protected worst-case
/// second moment when minimax is on, 1/(1ᵀA⁻¹1) otherwise; the refitting
/// baseline records its ensemble training MSE there).
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub sweep: usize,
    pub eta: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub weights: Vec<f64>,
    pub scalars_transmitted: u64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub trace: Vec<SweepRecord>,
    /// Agent states as of the last completed sweep, usable with
    /// [`ensemble_predict`] to score new data.
    pub agents: Vec<AgentState>,
    pub final_weights: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    pub scalars_transmitted: u64,
    /// Full-sample covariance of the residuals right after initialization.
    pub a_ini: CovarianceEstimate,
    /// The protection radius actually used (0 when minimax was off).
    pub delta_used: f64,
}

impl TrainResult {
    pub fn final_test_mse(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.test_mse)
    }

    pub fn final_train_mse(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.train_mse)
    }

    pub fn min_test_mse(&self) -> f64 {
        self.trace
            .iter()
            .map(|r| r.test_mse)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn validate_partition(partition: &[Vec<usize>]) -> Result<()> {
    if partition.is_empty() {
        return Err(IcoaError::InvalidSpec("empty partition".into()));
    }
    for (j, attrs) in partition.iter().enumerate() {
        if attrs.is_empty() {
            return Err(IcoaError::InvalidSpec(format!(
                "agent {j} has no attributes"
            )));
        }
        for (pos, &a) in attrs.iter().enumerate() {
            if a >= N_ATTRIBUTES {
                return Err(IcoaError::InvalidSpec(format!(
                    "agent {j}: attribute index {a} out of range"
                )));
            }
            if attrs[..pos].contains(&a) {
                return Err(IcoaError::InvalidSpec(format!(
                    "agent {j}: attribute {a} listed twice"
                )));
            }
        }
    }
    Ok(())
}

fn mse(errors: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in errors {
        sum += e * e;
        n += 1;
    }
    sum / n as f64
}

/// Fits every agent non-cooperatively on the outcomes and snapshots the
/// full-sample residual covariance.
pub fn init_agents(
    train: &Dataset,
    partition: &[Vec<usize>],
    spec: &LearnerSpec,
    mode: ExecMode,
) -> Result<(Vec<AgentState>, CovarianceEstimate)> {
    validate_partition(partition)?;
    spec.validate()?;
    let y = train.outcomes();
    let fitted: Vec<Result<AgentState>> = mode.map(partition.to_vec(), |attrs| {
        let cols = train.columns(&attrs);
        let model = fit(spec, &cols, y)?;
        let preds = predict(&model, &cols)?;
        let residual: Vec<f64> = y.iter().zip(&preds).map(|(yi, p)| yi - p).collect();
        Ok(AgentState {
            attributes: attrs,
            learner_spec: *spec,
            model: Some(model),
            train_predictions: preds,
            residual,
        })
    });
    let agents: Vec<AgentState> = fitted.into_iter().collect::<Result<_>>()?;
    let residcols: Vec<Vec<f64>> = agents.iter().map(|a| a.residual.clone()).collect();
    let a_ini = estimate_covariance(&residcols, None)?;
    Ok((agents, a_ini))
}

/// Weighted ensemble prediction Σ a_i f_i(X_{F_i}) over a dataset.
pub fn ensemble_predict(
    agents: &[AgentState],
    weights: &[f64],
    data: &Dataset,
) -> Result<Vec<f64>> {
    if weights.len() != agents.len() {
        return Err(IcoaError::ShapeMismatch {
            expected: format!("{} weights", agents.len()),
            got: format!("{}", weights.len()),
        });
    }
    let mut out = vec![0.0_f64; data.n()];
    for (agent, &w) in agents.iter().zip(weights) {
        if let Some(model) = &agent.model {
            let p = predict(model, &data.columns(&agent.attributes))?;
            for (o, v) in out.iter_mut().zip(&p) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The main loop

struct SolveCache {
    weights: Vec<f64>,
    /// Q = 1ᵀA⁻¹1 on the plain path, ζ* on the protected path.
    objective: f64,
}

/// Evaluates weights and the inner objective on the given covariance.
fn solve_weights(a: &CovarianceEstimate, delta: f64, minimax: bool) -> Result<SolveCache> {
    if minimax {
        let boxr = UncertaintyBox::new(delta)?;
        let init = match optimal_weights(a) {
            Ok((w, _)) => w,
            Err(_) => WeightVector::uniform(a.d()),
        };
        let (w, value) = minimax_weights(a, &boxr, &init)?;
        Ok(SolveCache {
            weights: w.into_vec(),
            objective: value,
        })
    } else {
        let (w, eta) = optimal_weights(a)?;
        Ok(SolveCache {
            weights: w.into_vec(),
            objective: 1.0 / eta,
        })
    }
}

/// True when `candidate` strictly improves on `current` for the active path.
fn improves(candidate: f64, current: f64, minimax: bool) -> bool {
    candidate.is_finite()
        && if minimax {
            candidate < current
        } else {
            candidate > current
        }
}

fn eta_from_objective(objective: f64, minimax: bool) -> f64 {
    if minimax {
        objective
    } else {
        1.0 / objective
    }
}

/// Recomputes row/column `i` of the covariance in place, matching
/// `estimate_covariance` bit-for-bit: diagonal over all N, off-diagonals over
/// the pair subsample.
fn refresh_covariance_column(
    m: &mut DMatrix<f64>,
    residcols: &[Vec<f64>],
    i: usize,
    ps: Option<&PairSample>,
) {
    let n = residcols[i].len();
    let ri = &residcols[i];
    m[(i, i)] = ri.iter().map(|v| v * v).sum::<f64>() / n as f64;
    for j in 0..residcols.len() {
        if j == i {
            continue;
        }
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let (a, b) = (&residcols[lo], &residcols[hi]);
        let v = match ps.map(|p| p.subset(lo, hi)) {
            None => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n as f64,
            Some(s) => s.iter().map(|&k| a[k] * b[k]).sum::<f64>() / s.len() as f64,
        };
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
}

fn draw_sorted_sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    // Floyd's algorithm keeps the draw count at k regardless of n.
    let mut seen: HashSet<usize> = HashSet::with_capacity(k);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for j in (n - k)..n {
        let t = rng.gen_range(0..=j);
        let pick = if seen.insert(t) { t } else { j };
        if pick != t {
            seen.insert(pick);
        }
        chosen.push(pick);
    }
    chosen.sort_unstable();
    chosen
}

/// Runs the iterative covariance optimization loop (with minimax protection
/// when enabled) until |η_n − η_{n−1}| ≤ ε or `max_sweeps`.
///
/// Divergence (any non-finite trace value, or training MSE above 10× its
/// post-initialization value) is reported in the result, never thrown; a
/// mid-run covariance breakdown also flags divergence and truncates the run.
pub fn run_icoa(
    train: &Dataset,
    test: &Dataset,
    partition: &[Vec<usize>],
    spec: &LearnerSpec,
    cfg: &TrainerConfig,
    mode: ExecMode,
) -> Result<TrainResult> {
    cfg.validate(train.n())?;
    let (mut agents, a_ini) = init_agents(train, partition, spec, mode)?;
    let d = agents.len();
    let n = train.n();
    let y = train.outcomes().to_vec();
    let y_test = test.outcomes().to_vec();

    let delta = if cfg.minimax_enabled {
        match cfg.delta {
            DeltaSetting::Fixed(v) => v,
            DeltaSetting::Auto => {
                let policy = DeltaPolicy::new(a_ini.max_diagonal(), cfg.delta_z)?;
                delta_opt(&policy, n, cfg.alpha)?
            }
        }
    } else {
        0.0
    };

    let mut test_preds: Vec<Vec<f64>> = Vec::with_capacity(d);
    for agent in &agents {
        let model = agent.model.as_ref().expect("initialized agent");
        test_preds.push(predict(model, &test.columns(&agent.attributes))?);
    }
    let mut residcols: Vec<Vec<f64>> = agents.iter().map(|a| a.residual.clone()).collect();

    let k_sub = subsample_size(n, cfg.alpha);
    let per_sweep_scalars = (d * (d - 1) * k_sub) as u64;
    let mut rng = seed::rng_from(&[cfg.seed, STREAM_RUN]);

    let mut trace: Vec<SweepRecord> = Vec::with_capacity(cfg.max_sweeps + 1);
    let mut diverged = false;
    let mut converged = false;
    let mut scalars: u64 = 0;

    // Sweep 0: post-initialization state on the exact covariance.
    let cache0 = solve_weights(&a_ini, delta, cfg.minimax_enabled)?;
    let record = |sweep: usize,
                  cache: &SolveCache,
                  residcols: &[Vec<f64>],
                  test_preds: &[Vec<f64>],
                  scalars: u64,
                  minimax: bool| {
        let w = &cache.weights;
        let train_mse = mse((0..n).map(|row| {
            w.iter()
                .zip(residcols)
                .map(|(wi, rc)| wi * rc[row])
                .sum::<f64>()
        }));
        let test_mse = mse((0..y_test.len()).map(|row| {
            y_test[row]
                - w.iter()
                    .zip(test_preds)
                    .map(|(wi, tp)| wi * tp[row])
                    .sum::<f64>()
        }));
        SweepRecord {
            sweep,
            eta: eta_from_objective(cache.objective, minimax),
            train_mse,
            test_mse,
            weights: w.clone(),
            scalars_transmitted: scalars,
        }
    };
    let row0 = record(
        0,
        &cache0,
        &residcols,
        &test_preds,
        scalars,
        cfg.minimax_enabled,
    );
    let train_ref = row0.train_mse;
    let mut prev_eta = row0.eta;
    if !row0.eta.is_finite() || !row0.train_mse.is_finite() || !row0.test_mse.is_finite() {
        diverged = true;
    }
    trace.push(row0);

    let mut cache = cache0;

    'sweeps: for sweep in 1..=cfg.max_sweeps {
        // Fresh pair subsample for this sweep when protection is on.
        let pair_sample = if cfg.minimax_enabled {
            Some(match cfg.pair_sampling {
                PairSampling::Shared => PairSample::Shared(draw_sorted_sample(&mut rng, n, k_sub)),
                PairSampling::Independent => {
                    let mut samples = Vec::with_capacity(d * (d - 1) / 2);
                    for _ in 0..d * (d - 1) / 2 {
                        samples.push(draw_sorted_sample(&mut rng, n, k_sub));
                    }
                    PairSample::per_pair(d, samples)?
                }
            })
        } else {
            None
        };
        let order: Vec<usize> = match cfg.update_order {
            UpdateOrder::Ascending => (0..d).collect(),
            UpdateOrder::Random => {
                let mut o: Vec<usize> = (0..d).collect();
                for i in (1..d).rev() {
                    let j = rng.gen_range(0..=i);
                    o.swap(i, j);
                }
                o
            }
        };

        // Re-estimate on this sweep's sample and refresh the working state.
        let (mut a_cur, sweep_cache) = match estimate_covariance(&residcols, pair_sample.as_ref())
            .and_then(|a| solve_weights(&a, delta, cfg.minimax_enabled).map(|c| (a, c)))
        {
            Ok(v) => v,
            Err(_) => {
                diverged = true;
                break 'sweeps;
            }
        };
        cache = sweep_cache;

        for &i in &order {
            let direction = match gradient_direction(
                &residcols,
                &a_cur,
                i,
                delta,
                cfg.minimax_enabled,
                cfg.gradient_mode,
                pair_sample.as_ref(),
            ) {
                Ok(dir) => dir,
                Err(_) => continue, // no usable direction, skip this agent
            };
            let cols_i = train.columns(&agents[i].attributes);
            let old_residual = residcols[i].clone();
            let mut step = cfg.backsearch.initial_step;
            for _ in 0..=cfg.backsearch.max_halvings {
                let target: Vec<f64> = agents[i]
                    .train_predictions
                    .iter()
                    .zip(&direction)
                    .map(|(f, g)| f + step * g)
                    .collect();
                let candidate = try_refit(
                    &cols_i,
                    &target,
                    &agents[i].learner_spec,
                    &y,
                    i,
                    &mut residcols,
                    &mut a_cur,
                    pair_sample.as_ref(),
                    &old_residual,
                    delta,
                    cfg.minimax_enabled,
                );
                match candidate {
                    Some((model, preds, new_cache))
                        if improves(new_cache.objective, cache.objective, cfg.minimax_enabled) =>
                    {
                        test_preds[i] = match predict(&model, &test.columns(&agents[i].attributes))
                        {
                            Ok(p) => p,
                            Err(_) => {
                                // roll back; the model cannot score the test side
                                residcols[i] = old_residual.clone();
                                refresh_covariance_column(
                                    a_cur.matrix_mut(),
                                    &residcols,
                                    i,
                                    pair_sample.as_ref(),
                                );
                                break;
                            }
                        };
                        agents[i].residual = residcols[i].clone();
                        agents[i].train_predictions = preds;
                        agents[i].model = Some(model);
                        cache = new_cache;
                        break;
                    }
                    _ => {
                        step *= cfg.backsearch.shrink;
                    }
                }
            }
            // make sure a rejected final candidate left no trace
            if residcols[i] != agents[i].residual {
                residcols[i] = agents[i].residual.clone();
                refresh_covariance_column(a_cur.matrix_mut(), &residcols, i, pair_sample.as_ref());
            }
        }

        scalars += per_sweep_scalars;
        let row = record(
            sweep,
            &cache,
            &residcols,
            &test_preds,
            scalars,
            cfg.minimax_enabled,
        );
        let finite = row.eta.is_finite() && row.train_mse.is_finite() && row.test_mse.is_finite();
        if !finite || row.train_mse > 10.0 * train_ref {
            diverged = true;
        }
        let eta_n = row.eta;
        trace.push(row);
        if (eta_n - prev_eta).abs() <= cfg.epsilon {
            converged = true;
            break;
        }
        prev_eta = eta_n;
    }

    let final_weights = cache.weights.clone();
    Ok(TrainResult {
        final_weights,
        agents,
        converged,
        diverged,
        scalars_transmitted: scalars,
        a_ini,
        delta_used: delta,
        trace,
    })
}

/// Refits agent `i` on `target`, installs the candidate residual into the
/// working matrix, and evaluates the resulting weights/objective. On any
/// failure the working state is rolled back and None is returned; the caller
/// rolls back after inspecting the objective if it rejects the candidate.
#[allow(clippy::too_many_arguments)]
fn try_refit(
    cols_i: &[Vec<f64>],
    target: &[f64],
    spec: &LearnerSpec,
    y: &[f64],
    i: usize,
    residcols: &mut [Vec<f64>],
    a_cur: &mut CovarianceEstimate,
    ps: Option<&PairSample>,
    old_residual: &[f64],
    delta: f64,
    minimax: bool,
) -> Option<(FittedModel, Vec<f64>, SolveCache)> {
    if target.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let model = fit(spec, cols_i, target).ok()?;
    let preds = predict(&model, cols_i).ok()?;
    let new_residual: Vec<f64> = y.iter().zip(&preds).map(|(yi, p)| yi - p).collect();
    if new_residual.iter().any(|v| !v.is_finite()) {
        return None;
    }
    residcols[i].copy_from_slice(&new_residual);
    refresh_covariance_column(a_cur.matrix_mut(), residcols, i, ps);
    match solve_weights(a_cur, delta, minimax) {
        Ok(cache) => Some((model, preds, cache)),
        Err(_) => {
            residcols[i].copy_from_slice(old_residual);
            refresh_covariance_column(a_cur.matrix_mut(), residcols, i, ps);
            None
        }
    }
}

/// Direction in which agent i's target is shifted. Analytic: the closed-form
/// gradient of Q = 1ᵀA⁻¹1 (an ascent direction for both paths; at δ = 0 the
/// protected objective is 1/Q, so descending it is ascending Q).
/// Perturbation: central differences of the live objective, negated on the
/// protected path so the direction always points toward improvement.
#[allow(clippy::too_many_arguments)]
fn gradient_direction(
    residcols: &[Vec<f64>],
    a_cur: &CovarianceEstimate,
    i: usize,
    delta: f64,
    minimax: bool,
    mode: GradientMode,
    ps: Option<&PairSample>,
) -> Result<Vec<f64>> {
    match mode {
        GradientMode::Analytic => {
            let (g, _) = ones_solution(a_cur)?;
            let n = residcols[0].len();
            let mut v = vec![0.0_f64; n];
            for (idx, col) in residcols.iter().enumerate() {
                let gi = g[idx];
                for (vn, rn) in v.iter_mut().zip(col) {
                    *vn += gi * rn;
                }
            }
            let scale = 2.0 * g[i] / n as f64;
            Ok(v.into_iter().map(|vn| scale * vn).collect())
        }
        GradientMode::Perturbation => {
            let n = residcols[0].len();
            let h = 1e-5;
            let mut dir = vec![0.0_f64; n];
            let mut work = a_cur.clone();
            let mut cols: Vec<Vec<f64>> = residcols.to_vec();
            for row in 0..n {
                let orig = cols[i][row];
                // shifting the prediction up shifts the residual down
                cols[i][row] = orig - h;
                refresh_covariance_column(work.matrix_mut(), &cols, i, ps);
                let plus = solve_weights(&work, delta, minimax)?.objective;
                cols[i][row] = orig + h;
                refresh_covariance_column(work.matrix_mut(), &cols, i, ps);
                let minus = solve_weights(&work, delta, minimax)?.objective;
                cols[i][row] = orig;
                let fd = (plus - minus) / (2.0 * h);
                dir[row] = if minimax { -fd } else { fd };
            }
            Ok(dir)
        }
    }
}

/// Round-robin residual refitting: agent i fits the ensemble residual
/// y − Σ_{j≠i} f_j and its refit replaces f_i unconditionally; the ensemble
/// is the unweighted sum. Starts from the zero predictor.
pub fn run_residual_refit(
    train: &Dataset,
    test: &Dataset,
    partition: &[Vec<usize>],
    spec: &LearnerSpec,
    max_sweeps: usize,
    mode: ExecMode,
) -> Result<TrainResult> {
    validate_partition(partition)?;
    spec.validate()?;
    if max_sweeps < 1 {
        return Err(IcoaError::InvalidSpec("max_sweeps must be >= 1".into()));
    }
    let _ = mode; // the sweep is sequential by construction
    let n = train.n();
    let y = train.outcomes().to_vec();
    let y_test = test.outcomes().to_vec();
    let d = partition.len();

    let mut agents: Vec<AgentState> = partition
        .iter()
        .map(|attrs| AgentState {
            attributes: attrs.clone(),
            learner_spec: *spec,
            model: None,
            train_predictions: vec![0.0; n],
            residual: y.clone(),
        })
        .collect();
    let residcols: Vec<Vec<f64>> = agents.iter().map(|a| a.residual.clone()).collect();
    let a_ini = estimate_covariance(&residcols, None)?;

    let mut ens_train = vec![0.0_f64; n];
    let mut ens_test = vec![0.0_f64; y_test.len()];
    let mut test_preds: Vec<Vec<f64>> = vec![vec![0.0; y_test.len()]; d];

    let weights = vec![1.0_f64; d];
    let mut trace = Vec::with_capacity(max_sweeps + 1);
    let row = |sweep: usize, ens_train: &[f64], ens_test: &[f64], scalars: u64| {
        let train_mse = mse(y.iter().zip(ens_train).map(|(yi, p)| yi - p));
        let test_mse = mse(y_test.iter().zip(ens_test).map(|(yi, p)| yi - p));
        SweepRecord {
            sweep,
            eta: train_mse,
            train_mse,
            test_mse,
            weights: weights.clone(),
            scalars_transmitted: scalars,
        }
    };
    let row0 = row(0, &ens_train, &ens_test, 0);
    let train_ref = row0.train_mse;
    let mut diverged = false;
    trace.push(row0);

    let per_sweep = (d * n) as u64;
    let mut scalars = 0u64;
    for sweep in 1..=max_sweeps {
        for i in 0..d {
            let target: Vec<f64> = (0..n)
                .map(|r| y[r] - (ens_train[r] - agents[i].train_predictions[r]))
                .collect();
            let cols = train.columns(&agents[i].attributes);
            let model = fit(spec, &cols, &target)?;
            let preds = predict(&model, &cols)?;
            let tpreds = predict(&model, &test.columns(&agents[i].attributes))?;
            for r in 0..n {
                ens_train[r] += preds[r] - agents[i].train_predictions[r];
            }
            for r in 0..y_test.len() {
                ens_test[r] += tpreds[r] - test_preds[i][r];
            }
            agents[i].residual = y.iter().zip(&preds).map(|(yi, p)| yi - p).collect();
            agents[i].train_predictions = preds;
            test_preds[i] = tpreds;
            agents[i].model = Some(model);
        }
        scalars += per_sweep;
        let r = row(sweep, &ens_train, &ens_test, scalars);
        if !r.train_mse.is_finite() || !r.test_mse.is_finite() || r.train_mse > 10.0 * train_ref {
            diverged = true;
        }
        trace.push(r);
    }
    Ok(TrainResult {
        trace,
        agents,
        final_weights: weights,
        converged: false,
        diverged,
        scalars_transmitted: scalars,
        a_ini,
        delta_used: 0.0,
    })
}

/// Non-cooperative fits combined with fixed weights 1/D; transmits nothing.
#[allow(clippy::needless_range_loop)]
pub fn run_averaging(
    train: &Dataset,
    test: &Dataset,
    partition: &[Vec<usize>],
    spec: &LearnerSpec,
    mode: ExecMode,
) -> Result<TrainResult> {
    let (agents, a_ini) = init_agents(train, partition, spec, mode)?;
    let d = agents.len();
    let weights = vec![1.0 / d as f64; d];
    let y = train.outcomes();
    let y_test = test.outcomes();
    let mut ens_train = vec![0.0_f64; train.n()];
    let w = 1.0 / d as f64;
    for agent in &agents {
        for (o, p) in ens_train.iter_mut().zip(&agent.train_predictions) {
            *o += w * p;
        }
    }
    let ens_test = ensemble_predict(&agents, &weights, test)?;
    let train_mse = mse(y.iter().zip(&ens_train).map(|(yi, p)| yi - p));
    let test_mse = mse(y_test.iter().zip(&ens_test).map(|(yi, p)| yi - p));
    let record = SweepRecord {
        sweep: 0,
        eta: train_mse,
        train_mse,
        test_mse,
        weights: weights.clone(),
        scalars_transmitted: 0,
    };
    let diverged = !train_mse.is_finite() || !test_mse.is_finite();
    Ok(TrainResult {
        trace: vec![record],
        agents,
        final_weights: weights,
        converged: true,
        diverged,
        scalars_transmitted: 0,
        a_ini,
        delta_used: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, split, ProblemSpec, Rule};

    fn tiny_dataset() -> (Dataset, Dataset) {
        let spec = ProblemSpec {
            rule: Rule::Friedman1,
            n_instances: 120,
            noise_std: 0.5,
            seed: 7,
        };
        let all = generate(&spec).unwrap();
        split(&all, 0.75, 7).unwrap()
    }

    #[test]
    fn sorted_sample_is_unique_in_range_and_deterministic() {
        let mut rng = seed::rng_from(&[3, STREAM_RUN]);
        let s = draw_sorted_sample(&mut rng, 50, 12);
        assert_eq!(s.len(), 12);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&i| i < 50));
        let mut rng2 = seed::rng_from(&[3, STREAM_RUN]);
        assert_eq!(s, draw_sorted_sample(&mut rng2, 50, 12));
        let mut rng3 = seed::rng_from(&[3, STREAM_RUN]);
        assert_eq!(
            draw_sorted_sample(&mut rng3, 9, 9),
            (0..9).collect::<Vec<_>>()
        );
    }

    #[test]
    fn subsample_size_ceils() {
        assert_eq!(subsample_size(4000, 7.0), 572);
        assert_eq!(subsample_size(4000, 1.0), 4000);
        assert_eq!(subsample_size(10, 3.0), 4);
    }

    #[test]
    fn config_validation_rejects_unprotected_subsampling() {
        let cfg = TrainerConfig {
            alpha: 2.0,
            ..TrainerConfig::default()
        };
        assert!(cfg.validate(100).is_err());
        let ok = TrainerConfig {
            alpha: 2.0,
            minimax_enabled: true,
            ..TrainerConfig::default()
        };
        assert!(ok.validate(100).is_ok());
        let too_deep = TrainerConfig {
            alpha: 100.0,
            minimax_enabled: true,
            ..TrainerConfig::default()
        };
        // ceil(100/100) = 1 < 2: nothing to correlate
        assert!(too_deep.validate(100).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(validate_partition(&[vec![0], vec![1], vec![2]]).is_ok());
        assert!(validate_partition(&[vec![0, 1], vec![1, 2]]).is_ok()); // overlap allowed
        assert!(validate_partition(&[]).is_err());
        assert!(validate_partition(&[vec![]]).is_err());
        assert!(validate_partition(&[vec![5]]).is_err());
        assert!(validate_partition(&[vec![2, 2]]).is_err());
    }

    #[test]
    fn refit_keeps_residual_identity_and_counts_scalars() {
        let (train, test) = tiny_dataset();
        let spec = LearnerSpec::tree(4, 5);
        let partition: Vec<Vec<usize>> = (0..N_ATTRIBUTES).map(|i| vec![i]).collect();
        let res =
            run_residual_refit(&train, &test, &partition, &spec, 3, ExecMode::Sequential).unwrap();
        assert_eq!(res.trace.len(), 4);
        assert_eq!(res.scalars_transmitted, 3 * 5 * train.n() as u64);
        assert_eq!(res.trace[2].scalars_transmitted, 2 * 5 * train.n() as u64);
        assert!(!res.converged);
        // training error of the growing ensemble falls across early sweeps
        assert!(res.trace[1].train_mse < res.trace[0].train_mse);
        for row in &res.trace {
            assert_eq!(row.eta, row.train_mse);
            assert_eq!(row.weights, vec![1.0; 5]);
        }
    }

    #[test]
    fn averaging_transmits_nothing() {
        let (train, test) = tiny_dataset();
        let spec = LearnerSpec::tree(4, 5);
        let partition: Vec<Vec<usize>> = (0..N_ATTRIBUTES).map(|i| vec![i]).collect();
        let res = run_averaging(&train, &test, &partition, &spec, ExecMode::Sequential).unwrap();
        assert_eq!(res.scalars_transmitted, 0);
        assert_eq!(res.trace.len(), 1);
        assert!(res.converged);
        assert_eq!(res.final_weights, vec![0.2; 5]);
    }

    #[test]
    fn icoa_single_agent_gets_unit_weight() {
        let (train, test) = tiny_dataset();
        let spec = LearnerSpec::tree(4, 5);
        let cfg = TrainerConfig {
            max_sweeps: 3,
            ..TrainerConfig::default()
        };
        let res = run_icoa(
            &train,
            &test,
            &[vec![0, 1, 2, 3, 4]],
            &spec,
            &cfg,
            ExecMode::Sequential,
        )
        .unwrap();
        for row in &res.trace {
            assert_eq!(row.weights.len(), 1);
            assert!((row.weights[0] - 1.0).abs() < 1e-12);
        }
        assert_eq!(res.a_ini.d(), 1);
    }

    #[test]
    fn icoa_eta_trace_monotone_without_subsampling() {
        let (train, test) = tiny_dataset();
        let spec = LearnerSpec::tree(3, 5);
        let partition: Vec<Vec<usize>> = (0..N_ATTRIBUTES).map(|i| vec![i]).collect();
        let cfg = TrainerConfig {
            max_sweeps: 6,
            ..TrainerConfig::default()
        };
        let res = run_icoa(&train, &test, &partition, &spec, &cfg, ExecMode::Sequential).unwrap();
        assert!(!res.diverged);
        for w in res.trace.windows(2) {
            assert!(
                w[1].eta <= w[0].eta + 1e-12,
                "eta rose from {} to {}",
                w[0].eta,
                w[1].eta
            );
        }
        let d = partition.len();
        let per = (d * (d - 1) * train.n()) as u64;
        assert_eq!(res.scalars_transmitted, per * (res.trace.len() as u64 - 1));
    }

    /// The perturbation mode differentiates the live objective numerically,
    /// so on the unprotected path it must reproduce the analytic column, and
    /// on the protected path with delta = 0 it must reproduce the analytic
    /// column divided by Q^2 (the chain rule through zeta = 1/Q).
    #[test]
    fn perturbation_gradient_matches_analytic() {
        let (train, _) = tiny_dataset();
        let partition: Vec<Vec<usize>> = vec![vec![0], vec![1], vec![2]];
        let spec = LearnerSpec::polynomial(2);
        let (agents, a) = init_agents(&train, &partition, &spec, ExecMode::Sequential).unwrap();
        let residcols: Vec<Vec<f64>> = agents.iter().map(|ag| ag.residual.clone()).collect();

        let rel_l2 = |u: &[f64], v: &[f64]| {
            let num: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = v.iter().map(|b| b * b).sum();
            (num / den.max(1e-300)).sqrt()
        };

        for i in 0..3 {
            let an =
                gradient_direction(&residcols, &a, i, 0.0, false, GradientMode::Analytic, None)
                    .unwrap();
            let fd = gradient_direction(
                &residcols,
                &a,
                i,
                0.0,
                false,
                GradientMode::Perturbation,
                None,
            )
            .unwrap();
            assert!(rel_l2(&fd, &an) < 1e-3, "agent {i}: {}", rel_l2(&fd, &an));
        }

        let (_, q) = ones_solution(&a).unwrap();
        let an = gradient_direction(&residcols, &a, 0, 0.0, false, GradientMode::Analytic, None)
            .unwrap();
        let fd_mm = gradient_direction(
            &residcols,
            &a,
            0,
            0.0,
            true,
            GradientMode::Perturbation,
            None,
        )
        .unwrap();
        let scaled: Vec<f64> = fd_mm.iter().map(|v| v * q * q).collect();
        assert!(rel_l2(&scaled, &an) < 1e-3, "{}", rel_l2(&scaled, &an));
    }
}
