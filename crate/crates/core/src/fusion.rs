//! Sparse complementary fusion driven by reverse-KL saliency.
//!
//! Per tensor: interpret each last-axis slice of the base and secondary
//! parameters as softmax distributions q and p, score every coordinate
//! with I = |θ_s − θ_b| · RKL(q‖p), threshold at τ = med(I) + α·IQR(I),
//! and adopt the secondary's stored value wherever I ≥ τ. The fused
//! tensor is a pure per-element select, so every output element
//! bit-equals one of its parents.

use thiserror::Error;

use crate::checkpoint::{align, CheckpointError, TensorEntry, TensorMap};
use crate::stats::{quantile_sorted, sort_total, CompensatedSum};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in tensor '{0}'")]
    NonFinite(String),
    #[error("slice length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("nonpositive distribution entry {0}")]
    NonpositiveEntry(f64),
    #[error("empty importance field")]
    EmptyField,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no tensor names in common between the two checkpoints")]
    EmptyIntersection,
    #[error("tensor '{0}' present only in the secondary checkpoint")]
    UnmatchedSecondary(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

// ── configuration ───────────────────────────────────────────────────────────

/// Which slices form softmax distributions. The last axis of each tensor
/// is one distribution per leading multi-index; a rank-1 tensor is a
/// single slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxAxis {
    #[default]
    Last,
}

/// What to do when the importance IQR collapses to zero: keep applying
/// τ = median (`FollowFormula`, which can select everything) or retain
/// the base tensor untouched (`ForceBase`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegenerateIqrPolicy {
    #[default]
    FollowFormula,
    ForceBase,
}

/// Hyperparameters of the sparse fusion rule. The mask comparison is
/// fixed as inclusive `I ≥ τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Smoothing added to each softmax output (no renormalization).
    pub epsilon: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub q_center: f64,
    /// IQR scale α in τ = med + α·(Q3 − Q1).
    pub alpha: f64,
    pub softmax_axis: SoftmaxAxis,
    pub degenerate_iqr_policy: DegenerateIqrPolicy,
    /// Above this element count quantiles use a fixed-stride subsample
    /// and the stats row is flagged approximate.
    pub quantile_budget: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            epsilon: 1e-8,
            q_low: 0.25,
            q_high: 0.75,
            q_center: 0.5,
            alpha: 1.5,
            softmax_axis: SoftmaxAxis::Last,
            degenerate_iqr_policy: DegenerateIqrPolicy::FollowFormula,
            quantile_budget: 1 << 27,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(FusionError::InvalidConfig("epsilon must be positive".into()));
        }
        for (name, q) in [
            ("q_low", self.q_low),
            ("q_center", self.q_center),
            ("q_high", self.q_high),
        ] {
            if !q.is_finite() || q <= 0.0 || q >= 1.0 {
                return Err(FusionError::InvalidConfig(format!("{name} must be in (0,1)")));
            }
        }
        if !(self.q_low < self.q_center && self.q_center < self.q_high) {
            return Err(FusionError::InvalidConfig(
                "quantiles must satisfy q_low < q_center < q_high".into(),
            ));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(FusionError::InvalidConfig("alpha must be nonnegative".into()));
        }
        if self.quantile_budget == 0 {
            return Err(FusionError::InvalidConfig("quantile budget must be > 0".into()));
        }
        Ok(())
    }
}

// ── importance field ────────────────────────────────────────────────────────

/// Per-coordinate saliency scores plus the per-slice reverse-KL factors
/// they were broadcast from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceField {
    values: Vec<f64>,
    shape: Vec<usize>,
    per_row_rkl: Vec<f64>,
}

impl ImportanceField {
    /// Wrap precomputed scores (per_row_rkl left empty). Used when the
    /// field comes from somewhere other than `importance`.
    pub fn from_values(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count != values.len() {
            return Err(FusionError::ShapeMismatch {
                context: "importance values".into(),
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(ImportanceField {
            values,
            shape,
            per_row_rkl: Vec::new(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn per_row_rkl(&self) -> &[f64] {
        &self.per_row_rkl
    }
}

/// Binary selection mask with the parameter tensor's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMask {
    bits: Vec<bool>,
    shape: Vec<usize>,
}

impl FusionMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn selected(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Threshold numbers for one tensor (the quantile portion of the full
/// per-tensor stats).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdStats {
    pub q1: f64,
    pub q3: f64,
    pub median: f64,
    pub tau: f64,
    pub degenerate_iqr: bool,
    pub approximate: bool,
}

/// Per-tensor record of what the fusion rule did.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFusionStats {
    pub name: String,
    pub q1: f64,
    pub q3: f64,
    pub median: f64,
    pub tau: f64,
    pub selected: usize,
    pub total: usize,
    /// selected / total.
    pub sparsity: f64,
    /// ‖θ_s − θ_b‖₂ in working precision.
    pub delta_l2: f64,
    /// ‖M ⊙ (θ_s − θ_b)‖₂.
    pub masked_delta_l2: f64,
    pub degenerate_iqr: bool,
    pub approximate_quantiles: bool,
    /// Secondary values that could not be re-encoded exactly into the
    /// base dtype (mixed-dtype parents only).
    pub lossy_reencodes: usize,
}

// ── operations ──────────────────────────────────────────────────────────────

fn slice_dims(shape: &[usize]) -> (usize, usize) {
    let slice_len = *shape.last().expect("rank >= 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    (rows, slice_len)
}

/// Shifted-exponential softmax along the axis policy, plus `epsilon` on
/// every output (no renormalization). Each slice of the result sums to
/// 1 + n·ε.
pub fn stable_softmax(
    values: &[f64],
    shape: &[usize],
    _axis: SoftmaxAxis,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if shape.is_empty() || shape.iter().product::<usize>() != values.len() {
        return Err(FusionError::ShapeMismatch {
            context: "softmax input".into(),
            left: shape.to_vec(),
            right: vec![values.len()],
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite("softmax input".into()));
    }
    let (rows, n) = slice_dims(shape);
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        let src = &values[r * n..(r + 1) * n];
        let dst = &mut out[r * n..(r + 1) * n];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(src) {
            let e = (x - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = *d / sum + epsilon;
        }
    }
    Ok(out)
}

/// RKL(q‖p) = Σᵢ qᵢ·ln(qᵢ/pᵢ), compensated summation. Requires strictly
/// positive entries (callers pass ε-smoothed softmax outputs).
pub fn reverse_kl(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(FusionError::LengthMismatch(q.len(), p.len()));
    }
    let mut acc = CompensatedSum::new();
    for (&qi, &pi) in q.iter().zip(p) {
        // NaN fails both guards
        if qi.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(FusionError::NonpositiveEntry(qi));
        }
        if pi.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(FusionError::NonpositiveEntry(pi));
        }
        acc.add(qi * (qi / pi).ln());
    }
    Ok(acc.total())
}

/// I = |θ_s − θ_b| ⊙ broadcast(RKL per slice).
pub fn importance(
    theta_b: &[f64],
    theta_s: &[f64],
    shape: &[usize],
    cfg: &FusionConfig,
) -> Result<ImportanceField> {
    if theta_b.len() != theta_s.len() {
        return Err(FusionError::LengthMismatch(theta_b.len(), theta_s.len()));
    }
    let q = stable_softmax(theta_b, shape, cfg.softmax_axis, cfg.epsilon)?;
    let p = stable_softmax(theta_s, shape, cfg.softmax_axis, cfg.epsilon)?;

    let (rows, n) = slice_dims(shape);
    let mut per_row_rkl = Vec::with_capacity(rows);
    for r in 0..rows {
        per_row_rkl.push(reverse_kl(&q[r * n..(r + 1) * n], &p[r * n..(r + 1) * n])?);
    }

    let mut values = Vec::with_capacity(theta_b.len());
    for (r, &rkl) in per_row_rkl.iter().enumerate() {
        for j in r * n..(r + 1) * n {
            values.push((theta_s[j] - theta_b[j]).abs() * rkl);
        }
    }

    Ok(ImportanceField {
        values,
        shape: shape.to_vec(),
        per_row_rkl,
    })
}

/// τ = med(I) + α·(Q3 − Q1) over the flattened field, with exact
/// sort-based interpolated quantiles (strided subsample above the
/// element budget).
pub fn iqr_threshold(field: &ImportanceField, cfg: &FusionConfig) -> Result<ThresholdStats> {
    let values = field.values();
    if values.is_empty() {
        return Err(FusionError::EmptyField);
    }
    let approximate = values.len() > cfg.quantile_budget;
    let mut sample: Vec<f64> = if approximate {
        let stride = values.len().div_ceil(cfg.quantile_budget);
        values.iter().copied().step_by(stride).collect()
    } else {
        values.to_vec()
    };
    sort_total(&mut sample);

    let q1 = quantile_sorted(&sample, cfg.q_low);
    let q3 = quantile_sorted(&sample, cfg.q_high);
    let median = quantile_sorted(&sample, cfg.q_center);
    let tau = median + cfg.alpha * (q3 - q1);

    Ok(ThresholdStats {
        q1,
        q3,
        median,
        tau,
        degenerate_iqr: q3 - q1 == 0.0,
        approximate,
    })
}

/// M = 1[I ≥ τ], inclusive.
pub fn build_mask(field: &ImportanceField, tau: f64) -> FusionMask {
    FusionMask {
        bits: field.values().iter().map(|&v| v >= tau).collect(),
        shape: field.shape().to_vec(),
    }
}

/// Fuse one tensor. Selected elements take the secondary's stored value,
/// the rest keep the base's stored value; nothing is recomputed, so the
/// output is a bit-exact per-element select. With mixed parent dtypes
/// the output stays in the base dtype and inexact re-encodes of selected
/// secondary values are counted in the stats.
pub fn fuse_tensor(
    name: &str,
    base: &TensorEntry,
    secondary: &TensorEntry,
    cfg: &FusionConfig,
) -> Result<(TensorEntry, TensorFusionStats)> {
    cfg.validate()?;
    if base.shape() != secondary.shape() {
        return Err(FusionError::ShapeMismatch {
            context: format!("fuse '{name}'"),
            left: base.shape().to_vec(),
            right: secondary.shape().to_vec(),
        });
    }

    let wb = base.working();
    let ws = secondary.working();
    if wb.iter().chain(ws.iter()).any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite(name.into()));
    }

    let field = importance(&wb, &ws, base.shape(), cfg)?;
    let thr = iqr_threshold(&field, cfg)?;
    let mut mask = build_mask(&field, thr.tau);
    if thr.degenerate_iqr && cfg.degenerate_iqr_policy == DegenerateIqrPolicy::ForceBase {
        mask.bits.iter_mut().for_each(|b| *b = false);
    }

    let mut delta_sq = CompensatedSum::new();
    let mut masked_sq = CompensatedSum::new();
    for (j, &m) in mask.bits().iter().enumerate() {
        let d = ws[j] - wb[j];
        delta_sq.add(d * d);
        if m {
            masked_sq.add(d * d);
        }
    }

    let out_dtype = base.dtype();
    let width = out_dtype.byte_width();
    let mut raw = Vec::with_capacity(base.raw().len());
    let mut lossy = 0usize;
    if secondary.dtype() == out_dtype {
        for (j, &m) in mask.bits().iter().enumerate() {
            let src = if m { secondary } else { base };
            raw.extend_from_slice(src.element_bytes(j));
        }
    } else {
        for (j, &m) in mask.bits().iter().enumerate() {
            if m {
                let before = raw.len();
                out_dtype.encode_into(ws[j], &mut raw);
                if out_dtype.decode_at(&raw[before..], 0).to_bits() != ws[j].to_bits() {
                    lossy += 1;
                }
            } else {
                raw.extend_from_slice(base.element_bytes(j));
            }
        }
    }
    debug_assert_eq!(raw.len(), base.element_count() * width);

    let fused = TensorEntry::from_raw(out_dtype, base.shape().to_vec(), raw)?;
    let selected = mask.selected();
    let total = base.element_count();
    let stats = TensorFusionStats {
        name: name.into(),
        q1: thr.q1,
        q3: thr.q3,
        median: thr.median,
        tau: thr.tau,
        selected,
        total,
        sparsity: selected as f64 / total as f64,
        delta_l2: delta_sq.total().sqrt(),
        masked_delta_l2: masked_sq.total().sqrt(),
        degenerate_iqr: thr.degenerate_iqr,
        approximate_quantiles: thr.approximate,
        lossy_reencodes: lossy,
    };
    Ok((fused, stats))
}

// ── checkpoint-level fusion ─────────────────────────────────────────────────

/// Handling of tensors that exist only in the secondary checkpoint (and,
/// under `Skip`, of shape mismatches, which then keep the base version).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnmatchedPolicy {
    #[default]
    Error,
    CopySecondary,
    Skip,
}

impl UnmatchedPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            UnmatchedPolicy::Error => "error",
            UnmatchedPolicy::CopySecondary => "copy-secondary",
            UnmatchedPolicy::Skip => "skip",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "error" => Some(UnmatchedPolicy::Error),
            "copy-secondary" => Some(UnmatchedPolicy::CopySecondary),
            "skip" => Some(UnmatchedPolicy::Skip),
            _ => None,
        }
    }
}

/// Output of a checkpoint-level fuse: the merged map, one stats row per
/// fused tensor, and human-readable warnings (skips, lossy re-encodes).
#[derive(Debug)]
pub struct CheckpointFusion {
    pub map: TensorMap,
    pub stats: Vec<TensorFusionStats>,
    pub warnings: Vec<String>,
}

/// Fuse every matched tensor with its own per-tensor threshold;
/// base-only tensors are copied through.
pub fn fuse_checkpoint(
    base: &TensorMap,
    secondary: &TensorMap,
    cfg: &FusionConfig,
    policy: UnmatchedPolicy,
) -> Result<CheckpointFusion> {
    cfg.validate()?;
    let report = align(base, secondary);
    if report.matched.is_empty() && report.shape_mismatch.is_empty() {
        return Err(FusionError::EmptyIntersection);
    }
    if !report.shape_mismatch.is_empty() && policy != UnmatchedPolicy::Skip {
        let (name, b, s) = report.shape_mismatch[0].clone();
        return Err(FusionError::ShapeMismatch {
            context: format!("tensor '{name}'"),
            left: b,
            right: s,
        });
    }

    let mut out = TensorMap::new();
    out.set_metadata(base.metadata().cloned());
    let mut stats = Vec::new();
    let mut warnings = Vec::new();

    for name in &report.matched {
        let (fused, st) = fuse_tensor(name, &base[name], &secondary[name], cfg)?;
        if st.lossy_reencodes > 0 {
            warnings.push(format!(
                "tensor '{name}': {} selected values re-encoded inexactly into {}",
                st.lossy_reencodes,
                base[name].dtype().as_str()
            ));
        }
        out.insert(name.clone(), fused)?;
        stats.push(st);
    }
    for name in &report.base_only {
        out.insert(name.clone(), base[name].clone())?;
    }
    for (name, ..) in &report.shape_mismatch {
        warnings.push(format!("tensor '{name}': shape mismatch, kept base version"));
        out.insert(name.clone(), base[name].clone())?;
    }
    for name in &report.secondary_only {
        match policy {
            UnmatchedPolicy::Error => {
                return Err(FusionError::UnmatchedSecondary(name.clone()))
            }
            UnmatchedPolicy::CopySecondary => {
                out.insert(name.clone(), secondary[name].clone())?;
            }
            UnmatchedPolicy::Skip => {
                warnings.push(format!("tensor '{name}': secondary-only, skipped"));
            }
        }
    }

    Ok(CheckpointFusion {
        map: out,
        stats,
        warnings,
    })
}

impl std::ops::Index<&str> for TensorMap {
    type Output = TensorEntry;
    fn index(&self, name: &str) -> &TensorEntry {
        self.get(name).expect("tensor present")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::TensorEntry;
    use crate::dtype::DType;

    fn cfg() -> FusionConfig {
        FusionConfig::default()
    }

    #[test]
    fn softmax_uniform_slice() {
        let out = stable_softmax(&[0.0, 0.0, 0.0, 0.0], &[4], SoftmaxAxis::Last, 0.0).unwrap();
        assert_eq!(out, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_extreme_logits_do_not_overflow() {
        let out = stable_softmax(&[1000.0, 0.0], &[2], SoftmaxAxis::Last, 0.0).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // mpmath at 40 digits for softmax([0.1, 0.2, 0.3]) + 1e-8
        let expected = [
            0.3006096153557273,
            0.3322250035333473,
            0.36716541111092543,
        ];
        let out = stable_softmax(&[0.1, 0.2, 0.3], &[3], SoftmaxAxis::Last, 1e-8).unwrap();
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() / e < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn softmax_slices_sum_to_one_plus_n_eps() {
        let eps = 1e-3;
        let x = [0.3, -1.2, 0.7, 2.0, -0.4, 0.0];
        let out = stable_softmax(&x, &[2, 3], SoftmaxAxis::Last, eps).unwrap();
        for r in 0..2 {
            let sum: f64 = out[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - (1.0 + 3.0 * eps)).abs() < 1e-12, "row {r}: {sum}");
            for &v in &out[r * 3..(r + 1) * 3] {
                assert!(v > eps && v <= 1.0 + eps);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            stable_softmax(&[f64::NAN, 0.0], &[2], SoftmaxAxis::Last, 0.0),
            Err(FusionError::NonFinite(_))
        ));
    }

    #[test]
    fn reverse_kl_zero_on_identical_slices() {
        let q = [0.3, 0.2, 0.5];
        assert_eq!(reverse_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn reverse_kl_scalar_oracles() {
        // mpmath at 40 digits
        let r = reverse_kl(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((r - 0.3680642071684971).abs() < 1e-15);
        // asymmetry: swapping the arguments gives a different value
        let r2 = reverse_kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((r2 - 0.5108256237659907).abs() < 1e-15);
        assert!((r - r2).abs() > 0.1);
    }

    #[test]
    fn reverse_kl_rejects_bad_input() {
        assert!(matches!(
            reverse_kl(&[0.5, 0.5], &[0.5]),
            Err(FusionError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            reverse_kl(&[0.5, 0.0], &[0.5, 0.5]),
            Err(FusionError::NonpositiveEntry(_))
        ));
    }

    #[test]
    fn importance_zero_when_parents_equal() {
        let t = [0.4, -0.2, 1.0];
        let field = importance(&t, &t, &[3], &cfg()).unwrap();
        assert!(field.values().iter().all(|&v| v == 0.0));
        assert_eq!(field.per_row_rkl(), &[0.0]);
    }

    #[test]
    fn importance_rank1_matches_composed_oracles() {
        let ln9 = 9.0f64.ln();
        let field = importance(&[0.0, 0.0], &[ln9, 0.0], &[2], &cfg()).unwrap();
        // mpmath: RKL([.5+ε,.5+ε] ‖ [.9+ε,.1+ε]) and ln9 · that
        assert!((field.per_row_rkl()[0] - 0.5108255984269493).abs() < 1e-14);
        assert!((field.values()[0] - 1.1223985595961752).abs() < 1e-13);
        assert_eq!(field.values()[1], 0.0);
    }

    #[test]
    fn importance_broadcasts_one_rkl_per_row() {
        let b = [0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let s = [0.5, 0.0, 0.0, 1.0, 2.5, 3.0];
        let field = importance(&b, &s, &[2, 3], &cfg()).unwrap();
        assert_eq!(field.per_row_rkl().len(), 2);
        let v = field.values();
        let r0 = field.per_row_rkl()[0];
        assert_eq!(v[0], 0.5 * r0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn iqr_threshold_hand_example() {
        let field =
            ImportanceField::from_values(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5]).unwrap();
        let thr = iqr_threshold(&field, &cfg()).unwrap();
        assert_eq!(thr.q1, 2.0);
        assert_eq!(thr.q3, 4.0);
        assert_eq!(thr.median, 3.0);
        assert_eq!(thr.tau, 6.0);
        assert!(!thr.degenerate_iqr);

        let mask = build_mask(&field, thr.tau);
        assert_eq!(mask.selected(), 0);
    }

    #[test]
    fn iqr_threshold_constant_field_is_degenerate() {
        let field = ImportanceField::from_values(vec![7.5; 9], vec![9]).unwrap();
        let thr = iqr_threshold(&field, &cfg()).unwrap();
        assert_eq!(thr.tau, 7.5);
        assert!(thr.degenerate_iqr);
    }

    #[test]
    fn iqr_threshold_empty_errors() {
        let field = ImportanceField {
            values: vec![],
            shape: vec![1],
            per_row_rkl: vec![],
        };
        assert!(matches!(
            iqr_threshold(&field, &cfg()),
            Err(FusionError::EmptyField)
        ));
    }

    #[test]
    fn mask_is_inclusive_at_tau() {
        let field = ImportanceField::from_values(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let mask = build_mask(&field, 0.0);
        assert_eq!(mask.selected(), 3);

        let field =
            ImportanceField::from_values(vec![1.0, 2.0, 3.0, 4.0, 100.0], vec![5]).unwrap();
        let thr = iqr_threshold(&field, &cfg()).unwrap();
        assert_eq!(thr.tau, 6.0); // med 3, IQR 2
        let mask = build_mask(&field, thr.tau);
        assert_eq!(mask.bits(), &[false, false, false, false, true]);
    }

    #[test]
    fn fuse_tensor_is_idempotent_bitwise() {
        for dtype in [DType::F64, DType::F32, DType::F16, DType::BF16] {
            let entry =
                TensorEntry::from_f64(dtype, vec![2, 3], &[0.5, -1.25, 2.0, 0.0, 3.5, -0.75])
                    .unwrap();
            let (fused, stats) = fuse_tensor("t", &entry, &entry, &cfg()).unwrap();
            assert_eq!(fused.raw(), entry.raw(), "{dtype:?}");
            assert!(stats.selected <= stats.total);
            assert_eq!(stats.delta_l2, 0.0);
        }
    }

    #[test]
    fn fuse_tensor_selects_the_outlier() {
        // brute-force trace of the fusion rule on this 5-vector:
        // delta only at index 4, single slice, so I = [0,0,0,0,x] with
        // x > 0; quantiles of I give Q1=med=Q3=0, tau=0, mask all-true,
        // output = secondary everywhere = [1,1,1,1,9]
        let base = TensorEntry::from_f64(DType::F64, vec![5], &[1.0; 5]).unwrap();
        let sec =
            TensorEntry::from_f64(DType::F64, vec![5], &[1.0, 1.0, 1.0, 1.0, 9.0]).unwrap();
        let (fused, stats) = fuse_tensor("v", &base, &sec, &cfg()).unwrap();
        assert_eq!(fused.working(), vec![1.0, 1.0, 1.0, 1.0, 9.0]);
        assert_eq!(stats.tau, 0.0);
        assert!(stats.degenerate_iqr);
        assert!(stats.masked_delta_l2 <= stats.delta_l2);
    }

    #[test]
    fn fuse_tensor_every_element_comes_from_a_parent() {
        let rng = crate::rng::CounterRng::new(3, "prov");
        let n = 257;
        let b: Vec<f64> = (0..n).map(|i| rng.normal_at(i)).collect();
        let s: Vec<f64> = (0..n)
            .map(|i| b[i as usize] + 0.1 * rng.substream(1).normal_at(i))
            .collect();
        let base = TensorEntry::from_f64(DType::F32, vec![n as usize], &b).unwrap();
        let sec = TensorEntry::from_f64(DType::F32, vec![n as usize], &s).unwrap();
        let (fused, _) = fuse_tensor("t", &base, &sec, &cfg()).unwrap();
        for j in 0..n as usize {
            let f = fused.value_at(j).to_bits();
            assert!(
                f == base.value_at(j).to_bits() || f == sec.value_at(j).to_bits(),
                "element {j} from neither parent"
            );
        }
    }

    #[test]
    fn fuse_tensor_force_base_policy() {
        let base = TensorEntry::from_f64(DType::F64, vec![5], &[1.0; 5]).unwrap();
        let sec =
            TensorEntry::from_f64(DType::F64, vec![5], &[1.0, 1.0, 1.0, 1.0, 9.0]).unwrap();
        let cfg = FusionConfig {
            degenerate_iqr_policy: DegenerateIqrPolicy::ForceBase,
            ..FusionConfig::default()
        };
        let (fused, stats) = fuse_tensor("v", &base, &sec, &cfg).unwrap();
        assert_eq!(fused.raw(), base.raw());
        assert_eq!(stats.selected, 0);
        assert!(stats.degenerate_iqr);
    }

    #[test]
    fn fuse_tensor_mixed_dtypes_reports_lossy() {
        // secondary f64 value 0.1 is not f16-representable; when selected
        // it must be re-encoded (lossily) into the base dtype
        let base = TensorEntry::from_f64(DType::F16, vec![4], &[1.0; 4]).unwrap();
        let sec =
            TensorEntry::from_f64(DType::F64, vec![4], &[1.0, 1.0, 1.0, 1.0 + 0.1]).unwrap();
        let (fused, stats) = fuse_tensor("w", &base, &sec, &cfg()).unwrap();
        assert_eq!(fused.dtype(), DType::F16);
        assert!(stats.lossy_reencodes >= 1);
    }

    #[test]
    fn fuse_tensor_shape_mismatch() {
        let a = TensorEntry::from_f64(DType::F32, vec![2], &[1.0, 2.0]).unwrap();
        let b = TensorEntry::from_f64(DType::F32, vec![3], &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            fuse_tensor("x", &a, &b, &cfg()),
            Err(FusionError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fuse_checkpoint_copies_base_only_and_respects_policy() {
        let mut base = TensorMap::new();
        base.insert(
            "shared",
            TensorEntry::from_f64(DType::F32, vec![4], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        base.insert(
            "extra",
            TensorEntry::from_f64(DType::F32, vec![2], &[5.0, 6.0]).unwrap(),
        )
        .unwrap();
        let mut sec = TensorMap::new();
        sec.insert(
            "shared",
            TensorEntry::from_f64(DType::F32, vec![4], &[1.0, 2.0, 3.0, 14.0]).unwrap(),
        )
        .unwrap();
        sec.insert(
            "sec_only",
            TensorEntry::from_f64(DType::F32, vec![1], &[7.0]).unwrap(),
        )
        .unwrap();

        assert!(matches!(
            fuse_checkpoint(&base, &sec, &cfg(), UnmatchedPolicy::Error),
            Err(FusionError::UnmatchedSecondary(_))
        ));

        let fused = fuse_checkpoint(&base, &sec, &cfg(), UnmatchedPolicy::Skip).unwrap();
        assert_eq!(
            fused.map.get("extra").unwrap().raw(),
            base.get("extra").unwrap().raw()
        );
        assert!(fused.map.get("sec_only").is_none());
        assert_eq!(fused.stats.len(), 1);

        let fused =
            fuse_checkpoint(&base, &sec, &cfg(), UnmatchedPolicy::CopySecondary).unwrap();
        assert!(fused.map.get("sec_only").is_some());
    }

    #[test]
    fn fuse_checkpoint_identical_is_bit_identical() {
        let mut base = TensorMap::new();
        let rng = crate::rng::CounterRng::new(9, "ck");
        for (t, name) in ["a.weight", "b.weight", "c.bias"].iter().enumerate() {
            let vals: Vec<f64> = (0..24).map(|i| rng.substream(t as u64).normal_at(i)).collect();
            base.insert(
                *name,
                TensorEntry::from_f64(DType::F32, vec![24], &vals).unwrap(),
            )
            .unwrap();
        }
        let fused =
            fuse_checkpoint(&base, &base.clone(), &cfg(), UnmatchedPolicy::Error).unwrap();
        for (name, entry) in base.iter() {
            assert_eq!(fused.map.get(name).unwrap().raw(), entry.raw());
        }
    }

    #[test]
    fn fuse_checkpoint_empty_intersection_errors() {
        let mut base = TensorMap::new();
        base.insert(
            "a",
            TensorEntry::from_f64(DType::F32, vec![1], &[1.0]).unwrap(),
        )
        .unwrap();
        let mut sec = TensorMap::new();
        sec.insert(
            "b",
            TensorEntry::from_f64(DType::F32, vec![1], &[1.0]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            fuse_checkpoint(&base, &sec, &cfg(), UnmatchedPolicy::Skip),
            Err(FusionError::EmptyIntersection)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(FusionConfig {
            epsilon: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            q_low: 0.6,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            alpha: -1.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
