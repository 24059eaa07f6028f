//! Synthetic MLP-shaped checkpoint pairs for tests and demos.
//!
//! The base checkpoint is Gaussian-initialized. The secondary adds a
//! structured perturbation: most rows get dense Gaussian noise plus a
//! rare heavy-tailed (truncated power-law) outlier component, so sparse
//! selection has genuine outliers to find; the remaining rows instead
//! drift by a per-row constant offset. A constant logit offset leaves
//! the row's softmax unchanged, so that mass is informationally inert —
//! dense interpolation absorbs it while divergence-guided selection
//! rejects it, which is the behavioral gap the diagnostics measure.
//! Generation is counter-seeded and uses only basic arithmetic and
//! sqrt, so files are bit-identical across platforms.

use std::path::Path;

use fusekit_core::checkpoint::{save_checkpoint, TensorEntry, TensorMap};
use fusekit_core::dtype::DType;
use fusekit_core::rng::CounterRng;

use crate::error::{ToolError, ToolResult};

/// Dense noise standard deviation at perturbation scale 1.
const DENSE_SIGMA: f64 = 0.01;
/// Probability that a coordinate carries an outlier.
const OUTLIER_PROB: f64 = 0.004;
/// Outlier magnitude = OUTLIER_BASE / sqrt(max(u, OUTLIER_U_FLOOR)),
/// i.e. a Pareto(α=2) tail truncated at 5× its minimum.
const OUTLIER_BASE: f64 = 0.05;
const OUTLIER_U_FLOOR: f64 = 0.04;
/// Fraction of weight-matrix rows that drift by a constant offset
/// instead of receiving noise.
const ROW_SHIFT_PROB: f64 = 0.4;
const ROW_SHIFT_SIGMA: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub layers: usize,
    pub width: usize,
    pub seed: u64,
    pub perturbation_scale: f64,
    pub dtype: DType,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            layers: 4,
            width: 64,
            seed: 0,
            perturbation_scale: 1.0,
            dtype: DType::F32,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> ToolResult<()> {
        if self.layers == 0 || self.width < 2 {
            return Err(ToolError::config("fixture needs layers ≥ 1 and width ≥ 2"));
        }
        if !self.perturbation_scale.is_finite() || self.perturbation_scale < 0.0 {
            return Err(ToolError::config("perturbation scale must be ≥ 0"));
        }
        Ok(())
    }

    /// Tensor names and shapes: per layer a [w,w] weight and [w] bias,
    /// plus one [w,w] head weight.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let mut out = Vec::with_capacity(2 * self.layers + 1);
        for i in 0..self.layers {
            out.push((format!("layers.{i}.weight"), vec![w, w]));
            out.push((format!("layers.{i}.bias"), vec![w]));
        }
        out.push(("head.weight".to_string(), vec![w, w]));
        out
    }
}

/// Build the (base, secondary) pair in memory.
pub fn fixture_maps(spec: &FixtureSpec) -> ToolResult<(TensorMap, TensorMap)> {
    spec.validate()?;
    let mut base = TensorMap::new();
    let mut secondary = TensorMap::new();
    let weight_sigma = 1.0 / (spec.width as f64).sqrt();

    for (name, shape) in spec.tensor_shapes() {
        let count: usize = shape.iter().product();
        let row_len = *shape.last().expect("rank >= 1") as u64;
        let rng = CounterRng::new(spec.seed, &name);
        let init = rng.substream(0);
        let dense = rng.substream(1);
        let sparse = rng.substream(2);
        let row_gate = rng.substream(3);
        let row_shift = rng.substream(4);
        let sigma = if shape.len() == 1 { 0.1 * weight_sigma } else { weight_sigma };

        let mut base_vals = Vec::with_capacity(count);
        let mut sec_vals = Vec::with_capacity(count);
        for j in 0..count as u64 {
            let b = sigma * init.normal_at(j);
            // rank-1 tensors (biases) are a single noise row
            let row = j / row_len;
            let row_shifted =
                shape.len() >= 2 && row_gate.uniform_at(row) < ROW_SHIFT_PROB;
            let mut delta = if row_shifted {
                ROW_SHIFT_SIGMA * row_shift.normal_at(row)
            } else {
                let mut d = DENSE_SIGMA * dense.normal_at(j);
                if sparse.uniform_at(2 * j) < OUTLIER_PROB {
                    let u = sparse.uniform_at(2 * j + 1).max(OUTLIER_U_FLOOR);
                    let sign = if sparse.u64_at(2 * j) & 1 == 0 { 1.0 } else { -1.0 };
                    d += sign * OUTLIER_BASE / u.sqrt();
                }
                d
            };
            delta *= spec.perturbation_scale;
            base_vals.push(b);
            // exact-zero delta keeps the identical f64, so scale 0 stays
            // bit-identical after encoding in any dtype
            sec_vals.push(if delta == 0.0 { b } else { b + delta });
        }

        let be = TensorEntry::from_f64(spec.dtype, shape.clone(), &base_vals)
            .map_err(|e| ToolError::internal(e.to_string()))?;
        let se = TensorEntry::from_f64(spec.dtype, shape, &sec_vals)
            .map_err(|e| ToolError::internal(e.to_string()))?;
        base.insert(name.clone(), be).map_err(ToolError::from)?;
        secondary.insert(name, se).map_err(ToolError::from)?;
    }
    Ok((base, secondary))
}

/// Write the pair to disk.
pub fn write_fixture_pair(
    spec: &FixtureSpec,
    out_base: &Path,
    out_secondary: &Path,
) -> ToolResult<()> {
    let (base, secondary) = fixture_maps(spec)?;
    save_checkpoint(&base, out_base)?;
    save_checkpoint(&secondary, out_secondary)?;
    Ok(())
}
