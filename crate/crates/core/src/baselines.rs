//! Comparison merge operators: task arithmetic, DARE, TIES, and SCE.
//!
//! All five operate on f64 task vectors Δ_k = θ_k − θ_base and are
//! deterministic given (inputs, config, seed). Coordinates whose merged
//! contribution is exactly zero keep the base's stored value bit-for-bit
//! (no `x + 0.0` trip that would flip a negative zero).

use thiserror::Error;

use crate::checkpoint::TensorEntry;
use crate::rng::CounterRng;
use crate::stats::{l2_norm, CompensatedSum};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("shape mismatch: delta {0} has {1} elements, base has {2}")]
    ShapeMismatch(usize, usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("at least one task vector required")]
    NoDeltas,
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    TaskArithmetic,
    DareLinear,
    Ties,
    DareTies,
    Sce,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::TaskArithmetic => "task-arithmetic",
            BaselineMethod::DareLinear => "dare-linear",
            BaselineMethod::Ties => "ties",
            BaselineMethod::DareTies => "dare-ties",
            BaselineMethod::Sce => "sce",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "task-arithmetic" => Some(BaselineMethod::TaskArithmetic),
            "dare-linear" => Some(BaselineMethod::DareLinear),
            "ties" => Some(BaselineMethod::Ties),
            "dare-ties" => Some(BaselineMethod::DareTies),
            "sce" => Some(BaselineMethod::Sce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Scale on the merged task vector.
    pub lambda: f64,
    /// Fraction of coordinates kept by trim/select steps.
    pub density: f64,
    /// DARE per-element drop probability.
    pub drop_rate: f64,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        BaselineConfig {
            method,
            lambda: 1.0,
            density: 0.5,
            drop_rate: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.density.is_finite() || self.density <= 0.0 || self.density > 1.0 {
            return Err(BaselineError::InvalidConfig("density must be in (0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(BaselineError::InvalidConfig("drop_rate must be in [0,1)".into()));
        }
        if !self.lambda.is_finite() {
            return Err(BaselineError::InvalidConfig("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Task vectors for one tensor, one per parent, all base-shaped.
#[derive(Debug, Clone)]
pub struct DeltaSet {
    deltas: Vec<Vec<f64>>,
}

impl DeltaSet {
    pub fn from_parents(base: &[f64], parents: &[&[f64]]) -> Result<Self> {
        let mut deltas = Vec::with_capacity(parents.len());
        for (k, parent) in parents.iter().enumerate() {
            if parent.len() != base.len() {
                return Err(BaselineError::ShapeMismatch(k, parent.len(), base.len()));
            }
            deltas.push(parent.iter().zip(base).map(|(p, b)| p - b).collect());
        }
        if deltas.is_empty() {
            return Err(BaselineError::NoDeltas);
        }
        Ok(DeltaSet { deltas })
    }

    pub fn from_deltas(deltas: Vec<Vec<f64>>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(BaselineError::NoDeltas);
        }
        let n = deltas[0].len();
        for (k, d) in deltas.iter().enumerate() {
            if d.len() != n {
                return Err(BaselineError::ShapeMismatch(k, d.len(), n));
            }
        }
        Ok(DeltaSet { deltas })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    fn dim(&self) -> usize {
        self.deltas[0].len()
    }
}

// ── shared pieces ───────────────────────────────────────────────────────────

/// Indices of the top ⌈density·n⌉ coordinates by `score`, as a keep mask.
/// Ties at the cutoff score keep the later index (fixed so results are
/// reproducible on exactly tied inputs).
fn top_fraction_mask(scores: &[f64], density: f64) -> Vec<bool> {
    let n = scores.len();
    let k = ((density * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(j.cmp(&i)));
    let mut keep = vec![false; n];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Magnitude trim: zero everything outside the top ⌈density·n⌉ by |value|.
fn trim_by_magnitude(delta: &[f64], density: f64) -> Vec<f64> {
    let mags: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    let keep = top_fraction_mask(&mags, density);
    delta
        .iter()
        .zip(keep)
        .map(|(&v, k)| if k { v } else { 0.0 })
        .collect()
}

fn add_contribution(base: &[f64], contribution: impl Fn(usize) -> f64) -> Vec<f64> {
    base.iter()
        .enumerate()
        .map(|(j, &b)| {
            let c = contribution(j);
            if c == 0.0 {
                b
            } else {
                b + c
            }
        })
        .collect()
}

// ── operators ───────────────────────────────────────────────────────────────

/// θ_base + λ·Σ_k Δ_k.
pub fn task_arithmetic(base: &[f64], deltas: &DeltaSet, lambda: f64) -> Result<Vec<f64>> {
    check_dims(base, deltas)?;
    Ok(add_contribution(base, |j| {
        let sum: f64 = deltas.deltas.iter().map(|d| d[j]).sum();
        lambda * sum
    }))
}

/// Drop-and-rescale: keep each element with probability 1 − drop_rate
/// (decided by a counter RNG keyed on seed, tensor name, and flat index)
/// and divide survivors by 1 − drop_rate.
pub fn dare_prune(delta: &[f64], drop_rate: f64, seed: u64, tensor_name: &str) -> Vec<f64> {
    dare_prune_with(&CounterRng::new(seed, tensor_name), delta, drop_rate)
}

fn dare_prune_with(rng: &CounterRng, delta: &[f64], drop_rate: f64) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - drop_rate);
    delta
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if rng.uniform_at(j as u64) >= drop_rate {
                v * keep_scale
            } else {
                0.0
            }
        })
        .collect()
}

/// Trim–elect–merge:
/// 1. per delta keep the top ⌈density·n⌉ by magnitude,
/// 2. elect each coordinate's sign from the sum of trimmed deltas
///    (sum exactly zero → no contribution, keep base),
/// 3. average the trimmed deltas that are nonzero and agree with the
///    elected sign,
/// 4. θ_base + λ·merged.
pub fn ties_merge(base: &[f64], deltas: &DeltaSet, density: f64, lambda: f64) -> Result<Vec<f64>> {
    check_dims(base, deltas)?;
    let trimmed: Vec<Vec<f64>> = deltas
        .deltas
        .iter()
        .map(|d| trim_by_magnitude(d, density))
        .collect();
    Ok(add_contribution(base, |j| {
        let sum: f64 = trimmed.iter().map(|t| t[j]).sum();
        if sum == 0.0 {
            return 0.0;
        }
        let sign = sum.signum();
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in &trimmed {
            let v = t[j];
            if v != 0.0 && v.signum() == sign {
                acc += v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            lambda * (acc / count as f64)
        }
    }))
}

/// DARE-prune every delta (independent substream per parent), then TIES.
pub fn dare_ties(
    base: &[f64],
    deltas: &DeltaSet,
    drop_rate: f64,
    density: f64,
    lambda: f64,
    seed: u64,
    tensor_name: &str,
) -> Result<Vec<f64>> {
    let rng = CounterRng::new(seed, tensor_name);
    let pruned: Vec<Vec<f64>> = deltas
        .deltas
        .iter()
        .enumerate()
        .map(|(k, d)| dare_prune_with(&rng.substream(k as u64), d, drop_rate))
        .collect();
    ties_merge(base, &DeltaSet { deltas: pruned }, density, lambda)
}

/// Select–calculate–erase:
/// 1. select the top ⌈density·n⌉ coordinates by cross-parent variance
///    and zero the rest in every delta,
/// 2. weight parents by their energy on the selected set,
/// 3. per coordinate, drop contributions whose sign disagrees with the
///    weighted sum (weighted sum zero → keep base),
/// 4. θ_base + Σ_k w_k·Δ_k over survivors.
///
/// A single parent degenerates to a plain magnitude trim.
pub fn sce_merge(base: &[f64], deltas: &DeltaSet, density: f64) -> Result<Vec<f64>> {
    check_dims(base, deltas)?;
    let kp = deltas.len();
    if kp == 1 {
        let trimmed = trim_by_magnitude(&deltas.deltas[0], density);
        return Ok(add_contribution(base, |j| trimmed[j]));
    }

    let n = base.len();
    let mut variance = vec![0.0; n];
    for j in 0..n {
        let mean: f64 = deltas.deltas.iter().map(|d| d[j]).sum::<f64>() / kp as f64;
        variance[j] = deltas
            .deltas
            .iter()
            .map(|d| (d[j] - mean) * (d[j] - mean))
            .sum::<f64>()
            / kp as f64;
    }
    let selected = top_fraction_mask(&variance, density);

    let mut energy = vec![0.0; kp];
    for (k, d) in deltas.deltas.iter().enumerate() {
        let mut acc = CompensatedSum::new();
        for j in 0..n {
            if selected[j] {
                acc.add(d[j] * d[j]);
            }
        }
        energy[k] = acc.total();
    }
    let total: f64 = energy.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        energy.iter().map(|e| e / total).collect()
    } else {
        vec![1.0 / kp as f64; kp]
    };

    Ok(add_contribution(base, |j| {
        if !selected[j] {
            return 0.0;
        }
        let s: f64 = deltas
            .deltas
            .iter()
            .zip(&weights)
            .map(|(d, w)| w * d[j])
            .sum();
        if s == 0.0 {
            return 0.0;
        }
        let sign = s.signum();
        deltas
            .deltas
            .iter()
            .zip(&weights)
            .filter(|(d, _)| d[j] != 0.0 && d[j].signum() == sign)
            .map(|(d, w)| w * d[j])
            .sum()
    }))
}

fn check_dims(base: &[f64], deltas: &DeltaSet) -> Result<()> {
    if deltas.dim() != base.len() {
        return Err(BaselineError::ShapeMismatch(0, deltas.dim(), base.len()));
    }
    Ok(())
}

// ── per-tensor driver ───────────────────────────────────────────────────────

/// What a baseline did to one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTensorStats {
    pub name: String,
    pub total: usize,
    /// Elements whose stored value differs from the base's.
    pub changed: usize,
    /// ‖fused − base‖₂ in working precision.
    pub update_l2: f64,
}

/// Apply a baseline to one tensor given the base entry and every parent's
/// matching entry. Output stays in the base dtype; elements with a zero
/// update keep the base's exact stored bytes.
pub fn baseline_merge_tensor(
    name: &str,
    base: &TensorEntry,
    parents: &[&TensorEntry],
    cfg: &BaselineConfig,
) -> Result<(TensorEntry, BaselineTensorStats)> {
    cfg.validate()?;
    let wb = base.working();
    let parent_views: Vec<Vec<f64>> = parents.iter().map(|p| p.working()).collect();
    let parent_slices: Vec<&[f64]> = parent_views.iter().map(|v| v.as_slice()).collect();
    let deltas = DeltaSet::from_parents(&wb, &parent_slices)?;

    let merged = match cfg.method {
        BaselineMethod::TaskArithmetic => task_arithmetic(&wb, &deltas, cfg.lambda)?,
        BaselineMethod::DareLinear => {
            let rng = CounterRng::new(cfg.seed, name);
            let pruned: Vec<Vec<f64>> = deltas
                .deltas
                .iter()
                .enumerate()
                .map(|(k, d)| dare_prune_with(&rng.substream(k as u64), d, cfg.drop_rate))
                .collect();
            task_arithmetic(&wb, &DeltaSet { deltas: pruned }, cfg.lambda)?
        }
        BaselineMethod::Ties => ties_merge(&wb, &deltas, cfg.density, cfg.lambda)?,
        BaselineMethod::DareTies => dare_ties(
            &wb,
            &deltas,
            cfg.drop_rate,
            cfg.density,
            cfg.lambda,
            cfg.seed,
            name,
        )?,
        BaselineMethod::Sce => sce_merge(&wb, &deltas, cfg.density)?,
    };

    let dtype = base.dtype();
    let mut raw = Vec::with_capacity(base.raw().len());
    let mut changed = 0usize;
    for (j, (&m, &b)) in merged.iter().zip(&wb).enumerate() {
        if m.to_bits() == b.to_bits() {
            raw.extend_from_slice(base.element_bytes(j));
        } else {
            changed += 1;
            dtype.encode_into(m, &mut raw);
        }
    }
    let update_l2 = l2_norm(merged.iter().zip(&wb).map(|(m, b)| m - b));
    let entry = TensorEntry::from_raw(dtype, base.shape().to_vec(), raw)
        .expect("baseline output matches base layout");
    Ok((
        entry,
        BaselineTensorStats {
            name: name.into(),
            total: wb.len(),
            changed,
            update_l2,
        },
    ))
}
