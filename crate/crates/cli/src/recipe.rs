//! Merge recipes: what to merge, with which method and hyperparameters.
//!
//! A recipe is a single JSON document; CLI flags override any field.
//! The manifest embeds the fully resolved recipe so a run can be
//! reproduced from its report alone.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fusekit_core::baselines::{BaselineConfig, BaselineMethod};
use fusekit_core::fusion::{FusionConfig, UnmatchedPolicy};

use crate::error::{ToolError, ToolResult};

pub const SCF_RKL: &str = "scf-rkl";

/// All merge method identifiers, in the order `compare` reports them.
pub const ALL_METHODS: [&str; 6] = [
    SCF_RKL,
    "task-arithmetic",
    "dare-linear",
    "ties",
    "dare-ties",
    "sce",
];

/// On-disk recipe; every field optional so flags can fill the gaps.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeFile {
    pub method: Option<String>,
    pub base_path: Option<PathBuf>,
    #[serde(default)]
    pub secondary_paths: Vec<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub unmatched_policy: Option<String>,
    pub report_path: Option<PathBuf>,
    pub threads: Option<usize>,
    pub epsilon: Option<f64>,
    pub q_low: Option<f64>,
    pub q_high: Option<f64>,
    pub q_center: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub density: Option<f64>,
    pub drop_rate: Option<f64>,
    pub seed: Option<u64>,
}

impl RecipeFile {
    pub fn load(path: &Path) -> ToolResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolError::io(format!("cannot read recipe {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ToolError::config(format!("invalid recipe {}: {e}", path.display())))
    }

    /// Layer `other`'s set fields on top of this one.
    pub fn overlay(mut self, other: RecipeFile) -> RecipeFile {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if other.$field.is_some() { self.$field = other.$field; })*
            };
        }
        take!(
            method, base_path, output_path, unmatched_policy, report_path, threads, epsilon,
            q_low, q_high, q_center, alpha, lambda, density, drop_rate, seed
        );
        if !other.secondary_paths.is_empty() {
            self.secondary_paths = other.secondary_paths;
        }
        self
    }
}

/// Method plus its fully resolved configuration.
#[derive(Debug, Clone)]
pub enum MethodSpec {
    ScfRkl(FusionConfig),
    Baseline(BaselineConfig),
}

impl MethodSpec {
    pub fn id(&self) -> &'static str {
        match self {
            MethodSpec::ScfRkl(_) => SCF_RKL,
            MethodSpec::Baseline(cfg) => cfg.method.as_str(),
        }
    }
}

/// A validated, fully concrete merge plan.
#[derive(Debug, Clone)]
pub struct ResolvedRecipe {
    pub method: MethodSpec,
    pub base_path: PathBuf,
    pub secondary_paths: Vec<PathBuf>,
    pub output_path: PathBuf,
    pub unmatched_policy: UnmatchedPolicy,
    pub report_path: Option<PathBuf>,
    pub threads: usize,
    pub seed: u64,
}

/// The recipe as echoed into manifests: every field concrete.
#[derive(Debug, Clone, Serialize)]
pub struct RecipeEcho {
    pub method: String,
    pub base_path: PathBuf,
    pub secondary_paths: Vec<PathBuf>,
    pub output_path: PathBuf,
    pub unmatched_policy: String,
    pub threads: usize,
    pub epsilon: f64,
    pub q_low: f64,
    pub q_high: f64,
    pub q_center: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub density: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

pub fn default_threads() -> usize {
    std::env::var("FUSEKIT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn resolve(file: RecipeFile) -> ToolResult<(ResolvedRecipe, RecipeEcho)> {
    let method_id = file
        .method
        .clone()
        .ok_or_else(|| ToolError::config("missing method"))?;
    let base_path = file
        .base_path
        .clone()
        .ok_or_else(|| ToolError::config("missing base checkpoint path"))?;
    let output_path = file
        .output_path
        .clone()
        .ok_or_else(|| ToolError::config("missing output path"))?;
    if file.secondary_paths.is_empty() {
        return Err(ToolError::config("at least one secondary checkpoint required"));
    }

    // all involved paths must be distinct
    let mut seen = BTreeSet::new();
    for p in std::iter::once(&base_path)
        .chain(file.secondary_paths.iter())
        .chain(std::iter::once(&output_path))
    {
        if !seen.insert(p.clone()) {
            return Err(ToolError::config(format!(
                "path used twice in recipe: {}",
                p.display()
            )));
        }
    }

    let policy_str = file.unmatched_policy.as_deref().unwrap_or("error");
    let unmatched_policy = UnmatchedPolicy::from_str_opt(policy_str).ok_or_else(|| {
        ToolError::config(format!(
            "unknown unmatched-policy '{policy_str}' (error|copy-secondary|skip)"
        ))
    })?;

    let fusion = FusionConfig {
        epsilon: file.epsilon.unwrap_or(1e-8),
        q_low: file.q_low.unwrap_or(0.25),
        q_high: file.q_high.unwrap_or(0.75),
        q_center: file.q_center.unwrap_or(0.5),
        alpha: file.alpha.unwrap_or(1.5),
        ..FusionConfig::default()
    };
    let seed = file.seed.unwrap_or(0);
    let lambda = file.lambda.unwrap_or(1.0);
    let density = file.density.unwrap_or(0.5);
    let drop_rate = file.drop_rate.unwrap_or(0.5);

    let method = if method_id == SCF_RKL {
        fusion
            .validate()
            .map_err(|e| ToolError::config(e.to_string()))?;
        MethodSpec::ScfRkl(fusion)
    } else if let Some(m) = BaselineMethod::from_str_opt(&method_id) {
        let cfg = BaselineConfig {
            method: m,
            lambda,
            density,
            drop_rate,
            seed,
        };
        cfg.validate().map_err(|e| ToolError::config(e.to_string()))?;
        MethodSpec::Baseline(cfg)
    } else {
        return Err(ToolError::config(format!(
            "unknown method '{method_id}' (expected one of {})",
            ALL_METHODS.join(", ")
        )));
    };

    let threads = file.threads.unwrap_or_else(default_threads).max(1);

    let echo = RecipeEcho {
        method: method_id,
        base_path: base_path.clone(),
        secondary_paths: file.secondary_paths.clone(),
        output_path: output_path.clone(),
        unmatched_policy: unmatched_policy.as_str().to_string(),
        threads,
        epsilon: fusion.epsilon,
        q_low: fusion.q_low,
        q_high: fusion.q_high,
        q_center: fusion.q_center,
        alpha: fusion.alpha,
        lambda,
        density,
        drop_rate,
        seed,
    };

    Ok((
        ResolvedRecipe {
            method,
            base_path,
            secondary_paths: file.secondary_paths,
            output_path,
            unmatched_policy,
            report_path: file.report_path,
            threads,
            seed,
        },
        echo,
    ))
}
