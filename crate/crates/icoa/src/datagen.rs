//! Synthetic attribute-distributed regression benchmarks.
//!
//! Three classic hidden rules over five covariates each; outcomes are
//! affinely normalized to [0,1] on whatever data the normalization is fit on
//! (the whole set in [`generate`], the training side in [`split`]).

use crate::error::{IcoaError, Result};
use crate::seed::{self, STREAM_SPLIT};
use rand::Rng;
use serde::Deserialize;
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};

pub const N_ATTRIBUTES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Friedman1,
    Friedman2,
    Friedman3,
}

impl Rule {
    /// Inclusive support of covariate column `j`.
    pub fn support(self, j: usize) -> (f64, f64) {
        match self {
            Rule::Friedman1 => (0.0, 1.0),
            Rule::Friedman2 | Rule::Friedman3 => match j {
                0 => (1.0, 100.0),
                1 => (40.0 * PI, 560.0 * PI),
                3 => (1.0, 11.0),
                _ => (0.0, 1.0),
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub rule: Rule,
    pub n_instances: usize,
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances < 1 {
            return Err(IcoaError::InvalidSpec("n_instances must be >= 1".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(IcoaError::InvalidSpec(
                "noise_std must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// N instances of five covariates plus a normalized outcome, with the affine
/// map that produced the outcomes recorded in `norm_min`/`norm_max`.
#[derive(Debug, Clone)]
pub struct Dataset {
    covariates: Vec<f64>, // row-major N x 5
    outcomes: Vec<f64>,
    pub norm_min: f64,
    pub norm_max: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn x(&self, i: usize, j: usize) -> f64 {
        self.covariates[i * N_ATTRIBUTES + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * N_ATTRIBUTES..(i + 1) * N_ATTRIBUTES]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Extracts the given attribute columns, each of length N.
    pub fn columns(&self, attrs: &[usize]) -> Vec<Vec<f64>> {
        attrs
            .iter()
            .map(|&j| (0..self.n()).map(|i| self.x(i, j)).collect())
            .collect()
    }

    /// Writes `x1,...,x5,y` rows with 17-significant-digit formatting so a
    /// reload reproduces every f64 bit-exactly.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x1,x2,x3,x4,x5,y")?;
        for i in 0..self.n() {
            for j in 0..N_ATTRIBUTES {
                write!(w, "{:.16e},", self.x(i, j))?;
            }
            writeln!(w, "{:.16e}", self.outcomes[i])?;
        }
        Ok(())
    }

    /// Reads a dump produced by [`Dataset::write_csv`]. The normalization
    /// metadata is not serialized; the loaded dataset carries the identity
    /// map (outcomes are taken exactly as stored).
    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| IcoaError::Parse("empty file".into()))??;
        if header.trim() != "x1,x2,x3,x4,x5,y" {
            return Err(IcoaError::Parse(format!("unexpected header: {header}")));
        }
        let mut covariates = Vec::new();
        let mut outcomes = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != N_ATTRIBUTES + 1 {
                return Err(IcoaError::Parse(format!(
                    "line {}: expected 6 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            for f in &fields[..N_ATTRIBUTES] {
                covariates.push(parse_f64(f, lineno)?);
            }
            outcomes.push(parse_f64(fields[N_ATTRIBUTES], lineno)?);
        }
        if outcomes.is_empty() {
            return Err(IcoaError::Parse("no data rows".into()));
        }
        Ok(Dataset {
            covariates,
            outcomes,
            norm_min: 0.0,
            norm_max: 1.0,
        })
    }
}

fn parse_f64(s: &str, lineno: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| IcoaError::Parse(format!("line {}: {e}", lineno + 2)))
}

/// Evaluates the hidden rule at one point, with no noise.
pub fn eval_rule(rule: Rule, x: &[f64; N_ATTRIBUTES]) -> Result<f64> {
    for (j, &v) in x.iter().enumerate() {
        let (lo, hi) = rule.support(j);
        if !v.is_finite() || v < lo || v > hi {
            return Err(IcoaError::OutOfSupport(format!(
                "x{} = {v} outside [{lo}, {hi}]",
                j + 1
            )));
        }
    }
    Ok(match rule {
        Rule::Friedman1 => {
            10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
        }
        Rule::Friedman2 => {
            let t = x[1] * x[2] - 1.0 / (x[1] * x[3]);
            (x[0] * x[0] + t * t).sqrt()
        }
        Rule::Friedman3 => {
            let t = x[1] * x[2] - 1.0 / (x[1] * x[3]);
            (t / x[0]).atan()
        }
    })
}

fn normalize_in_place(values: &mut [f64], min: f64, max: f64) {
    let span = max - min;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - min) / span } else { 0.0 };
    }
}

/// Draws a dataset: covariates i.i.d. uniform on their supports, outcomes
/// rule value plus Gaussian noise, then normalized so min maps to 0 and max
/// to 1 (a single point maps to 0). Bit-reproducible from the `ProblemSpec` alone.
pub fn generate(spec: &ProblemSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng_from(&[spec.seed, seed::STREAM_DATA]);
    let n = spec.n_instances;
    let mut covariates = Vec::with_capacity(n * N_ATTRIBUTES);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = [0.0_f64; N_ATTRIBUTES];
        for (j, xj) in x.iter_mut().enumerate() {
            let (lo, hi) = spec.rule.support(j);
            *xj = rng.gen_range(lo..=hi);
        }
        let mut y = eval_rule(spec.rule, &x).expect("sampled inside support");
        if spec.noise_std > 0.0 {
            y += spec.noise_std * standard_normal(&mut rng);
        }
        covariates.extend_from_slice(&x);
        outcomes.push(y);
    }
    let min = outcomes.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = outcomes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    normalize_in_place(&mut outcomes, min, max);
    Ok(Dataset {
        covariates,
        outcomes,
        norm_min: min,
        norm_max: max,
    })
}

/// Box-Muller standard normal; two uniform draws per call keeps the RNG
/// stream layout independent of any cached spare value.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Splits into disjoint train/test parts and re-fits the outcome
/// normalization on the training side only; test outcomes may fall outside
/// [0,1].
pub fn split(d: &Dataset, train_fraction: f64, split_seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IcoaError::InvalidSpec(
            "train_fraction must lie in (0,1)".into(),
        ));
    }
    let n = d.n();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(IcoaError::InvalidSpec(format!(
            "split of {n} instances at fraction {train_fraction} leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng_from(&[split_seed, STREAM_SPLIT]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    // Undo the parent normalization, then re-fit on the raw training outcomes.
    let span = d.norm_max - d.norm_min;
    let raw = |i: usize| {
        if span > 0.0 {
            d.outcomes[i] * span + d.norm_min
        } else {
            d.norm_min
        }
    };
    let train_raw: Vec<f64> = train_idx.iter().map(|&i| raw(i)).collect();
    let min = train_raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = train_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let take = |idx: &[usize]| -> Dataset {
        let mut covariates = Vec::with_capacity(idx.len() * N_ATTRIBUTES);
        let mut outcomes = Vec::with_capacity(idx.len());
        for &i in idx {
            covariates.extend_from_slice(d.row(i));
            outcomes.push(raw(i));
        }
        normalize_in_place(&mut outcomes, min, max);
        Dataset {
            covariates,
            outcomes,
            norm_min: min,
            norm_max: max,
        }
    };
    Ok((take(&train_idx), take(&test_idx)))
}
