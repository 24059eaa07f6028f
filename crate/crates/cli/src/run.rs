//! Command implementations: merge, diagnose, compare, gen-fixture.
//!
//! Merging streams tensor-by-tensor: the output header is written up
//! front (sizes are known from the input TOCs), then payloads are
//! produced in lexicographic name order, a bounded chunk at a time with
//! a rayon pool doing the per-tensor math. Chunk results are written in
//! plan order, so outputs are byte-identical for any thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fusekit_core::baselines::{baseline_merge_tensor, BaselineConfig};
use fusekit_core::checkpoint::{CheckpointReader, CheckpointWriter, TensorEntry};
use fusekit_core::diagnostics::{
    entropy_probe, layer_index, provenance, spectral_report, stability_probe, DiagnosticsError,
};
use fusekit_core::dtype::DType;
use fusekit_core::fusion::{fuse_tensor, FusionConfig, FusionError, SoftmaxAxis, UnmatchedPolicy};
use fusekit_core::stats::CompensatedSum;

use crate::error::{ToolError, ToolResult};
use crate::fixture::FixtureSpec;
use crate::recipe::{MethodSpec, RecipeEcho, ResolvedRecipe};
use crate::report::{
    fmt_f64, CsvDoc, DiagnosticsReport, DiagnosticsSummary, EntropyRow, ManifestRow,
    ProvenanceRow, RunManifest, Sig17, SpectralRow, StabilityRow, SCHEMA_VERSION,
};

// ── merge planning ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum Action {
    /// Matched in base and every parent.
    Merge,
    CopyBase,
    CopySecondary(usize),
}

struct Plan {
    /// (name, action), lexicographic by name.
    actions: Vec<(String, Action)>,
    metas: Vec<(String, DType, Vec<usize>)>,
    warnings: Vec<String>,
}

fn plan_merge(
    base: &CheckpointReader,
    parents: &[CheckpointReader],
    policy: UnmatchedPolicy,
) -> ToolResult<Plan> {
    let mut names: Vec<String> = base.tensor_names();
    for p in parents {
        for n in p.tensor_names() {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    names.sort();

    let mut plan = Plan {
        actions: Vec::new(),
        metas: Vec::new(),
        warnings: Vec::new(),
    };
    let mut matched = 0usize;

    for name in names {
        if let Some(base_shape) = base.shape(&name) {
            let present: Vec<bool> = parents.iter().map(|p| p.contains(&name)).collect();
            let all_present = present.iter().all(|&b| b);
            let any_present = present.iter().any(|&b| b);
            let shapes_agree = parents
                .iter()
                .filter(|p| p.contains(&name))
                .all(|p| p.shape(&name) == Some(base_shape));

            let action = if all_present && shapes_agree {
                matched += 1;
                Action::Merge
            } else if !any_present {
                Action::CopyBase
            } else if !shapes_agree {
                if policy != UnmatchedPolicy::Skip {
                    let other = parents
                        .iter()
                        .find_map(|p| p.shape(&name).filter(|s| *s != base_shape))
                        .unwrap_or(&[]);
                    return Err(FusionError::ShapeMismatch {
                        context: format!("tensor '{name}'"),
                        left: base_shape.to_vec(),
                        right: other.to_vec(),
                    }
                    .into());
                }
                plan.warnings
                    .push(format!("tensor '{name}': shape mismatch, kept base version"));
                Action::CopyBase
            } else {
                // in base but missing from some parent
                if policy == UnmatchedPolicy::Error {
                    return Err(ToolError::shape(format!(
                        "tensor '{name}' missing from a secondary checkpoint"
                    )));
                }
                plan.warnings.push(format!(
                    "tensor '{name}': missing from a secondary, kept base version"
                ));
                Action::CopyBase
            };
            plan.metas.push((
                name.clone(),
                base.dtype(&name).expect("toc entry"),
                base_shape.to_vec(),
            ));
            plan.actions.push((name, action));
        } else {
            // secondary-only
            match policy {
                UnmatchedPolicy::Error => {
                    return Err(FusionError::UnmatchedSecondary(name).into());
                }
                UnmatchedPolicy::CopySecondary => {
                    let idx = parents
                        .iter()
                        .position(|p| p.contains(&name))
                        .expect("name came from some parent");
                    plan.metas.push((
                        name.clone(),
                        parents[idx].dtype(&name).expect("toc entry"),
                        parents[idx].shape(&name).expect("toc entry").to_vec(),
                    ));
                    plan.actions.push((name, Action::CopySecondary(idx)));
                }
                UnmatchedPolicy::Skip => {
                    plan.warnings
                        .push(format!("tensor '{name}': secondary-only, skipped"));
                }
            }
        }
    }

    if matched == 0 {
        return Err(FusionError::EmptyIntersection.into());
    }
    Ok(plan)
}

// ── streaming merge pass ────────────────────────────────────────────────────

enum TensorOp<'a> {
    Fuse(&'a FusionConfig),
    Baseline(&'a BaselineConfig),
}

struct PassOutput {
    rows: Vec<ManifestRow>,
    warnings: Vec<String>,
}

fn merge_pass(
    base_path: &Path,
    parent_paths: &[PathBuf],
    out_path: &Path,
    op: TensorOp,
    policy: UnmatchedPolicy,
    threads: usize,
) -> ToolResult<PassOutput> {
    let base = CheckpointReader::open(base_path)?;
    let parents: Vec<CheckpointReader> = parent_paths
        .iter()
        .map(CheckpointReader::open)
        .collect::<Result<_, _>>()?;

    let plan = plan_merge(&base, &parents, policy)?;
    let mut writer = CheckpointWriter::create(out_path, &plan.metas, base.metadata().cloned())?;
    let mut rows = Vec::with_capacity(plan.actions.len());
    let mut warnings = plan.warnings;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ToolError::internal(format!("thread pool: {e}")))?;
    let chunk_size = threads.max(1) * 2;

    type TensorResult = (TensorEntry, ManifestRow, Vec<String>);
    for chunk in plan.actions.chunks(chunk_size) {
        let produced: Vec<TensorResult> = pool.install(|| {
            use rayon::prelude::*;
            chunk
                .par_iter()
                .map(|(name, action)| -> ToolResult<TensorResult> {
                    match action {
                        Action::Merge => {
                            let b = base.read_entry(name)?;
                            let ps: Vec<TensorEntry> = parents
                                .iter()
                                .map(|p| p.read_entry(name))
                                .collect::<Result<_, _>>()?;
                            match &op {
                                TensorOp::Fuse(cfg) => {
                                    let (fused, st) = fuse_tensor(name, &b, &ps[0], cfg)?;
                                    let mut warns = Vec::new();
                                    if st.lossy_reencodes > 0 {
                                        warns.push(format!(
                                            "tensor '{name}': {} selected values re-encoded inexactly into {}",
                                            st.lossy_reencodes,
                                            b.dtype().as_str()
                                        ));
                                    }
                                    Ok((fused, ManifestRow::fused(&st), warns))
                                }
                                TensorOp::Baseline(cfg) => {
                                    let refs: Vec<&TensorEntry> = ps.iter().collect();
                                    let (fused, st) =
                                        baseline_merge_tensor(name, &b, &refs, cfg)?;
                                    Ok((fused, ManifestRow::baseline(&st), Vec::new()))
                                }
                            }
                        }
                        Action::CopyBase => {
                            let b = base.read_entry(name)?;
                            let row = ManifestRow::copied(name, b.element_count(), "base");
                            Ok((b, row, Vec::new()))
                        }
                        Action::CopySecondary(idx) => {
                            let s = parents[*idx].read_entry(name)?;
                            let row =
                                ManifestRow::copied(name, s.element_count(), "secondary");
                            Ok((s, row, Vec::new()))
                        }
                    }
                })
                .collect::<ToolResult<Vec<_>>>()
        })?;

        for ((name, _), (entry, row, warns)) in chunk.iter().zip(produced) {
            writer.write_entry(name, &entry)?;
            rows.push(row);
            warnings.extend(warns);
        }
    }

    writer.finish()?;
    Ok(PassOutput { rows, warnings })
}

/// Removes leftover intermediate files even on the error path.
struct TempFiles(Vec<PathBuf>);

impl Drop for TempFiles {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = std::fs::remove_file(p);
        }
    }
}

pub fn cmd_merge(
    recipe: &ResolvedRecipe,
    echo: &RecipeEcho,
    write_manifest: bool,
) -> ToolResult<()> {
    let started = Instant::now();

    let (output, fold_order) = match &recipe.method {
        MethodSpec::Baseline(cfg) => (
            merge_pass(
                &recipe.base_path,
                &recipe.secondary_paths,
                &recipe.output_path,
                TensorOp::Baseline(cfg),
                recipe.unmatched_policy,
                recipe.threads,
            )?,
            None,
        ),
        MethodSpec::ScfRkl(cfg) => {
            if recipe.secondary_paths.len() == 1 {
                (
                    merge_pass(
                        &recipe.base_path,
                        &recipe.secondary_paths,
                        &recipe.output_path,
                        TensorOp::Fuse(cfg),
                        recipe.unmatched_policy,
                        recipe.threads,
                    )?,
                    None,
                )
            } else {
                // sequential left fold: fuse each secondary into the
                // running base
                let mut temps = TempFiles(Vec::new());
                let mut stage_in = recipe.base_path.clone();
                let mut last_output = None;
                let n = recipe.secondary_paths.len();
                for (i, sec) in recipe.secondary_paths.iter().enumerate() {
                    let stage_out = if i + 1 == n {
                        recipe.output_path.clone()
                    } else {
                        let tmp = recipe
                            .output_path
                            .with_file_name(format!(
                                ".{}.fold{i}",
                                recipe
                                    .output_path
                                    .file_name()
                                    .map(|s| s.to_string_lossy().into_owned())
                                    .unwrap_or_else(|| "out".into())
                            ));
                        temps.0.push(tmp.clone());
                        tmp
                    };
                    let out = merge_pass(
                        &stage_in,
                        std::slice::from_ref(sec),
                        &stage_out,
                        TensorOp::Fuse(cfg),
                        recipe.unmatched_policy,
                        recipe.threads,
                    )?;
                    stage_in = stage_out;
                    last_output = Some(out);
                }
                (
                    last_output.expect("≥1 secondary"),
                    Some(recipe.secondary_paths.clone()),
                )
            }
        }
    };

    if write_manifest {
        let manifest = RunManifest {
            schema: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            recipe: echo.clone(),
            fold_order,
            tensors: output.rows,
            warnings: output.warnings,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        };
        let path = recipe
            .report_path
            .clone()
            .unwrap_or_else(|| manifest_default_path(&recipe.output_path));
        crate::report::write_json(&path, &manifest)?;
    }
    Ok(())
}

pub fn manifest_default_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".manifest.json");
    output.with_file_name(name)
}

// ── diagnose ────────────────────────────────────────────────────────────────

pub struct DiagnoseOptions {
    pub selector: String,
    pub rank_k: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            selector: "*".to_string(),
            rank_k: 16,
        }
    }
}

pub fn cmd_diagnose(
    base_path: &Path,
    secondary_path: &Path,
    fused_path: &Path,
    out_dir: &Path,
    opts: &DiagnoseOptions,
) -> ToolResult<DiagnosticsSummary> {
    let base = CheckpointReader::open(base_path)?;
    let secondary = CheckpointReader::open(secondary_path)?;
    let fused = CheckpointReader::open(fused_path)?;

    let mut warnings = Vec::new();
    let mut matched: Vec<String> = Vec::new();
    for name in base.tensor_names() {
        let shape = base.shape(&name);
        if secondary.shape(&name) == shape && fused.shape(&name) == shape {
            matched.push(name);
        } else {
            warnings.push(format!(
                "tensor '{name}': not present with matching shape in all three checkpoints"
            ));
        }
    }
    if matched.is_empty() {
        return Err(ToolError::config(
            "no tensor is present with matching shapes in all three checkpoints",
        ));
    }

    // spectral sweep over selector-matched rank-2 tensors in layer order
    let mut spectral_names: Vec<&String> = matched
        .iter()
        .filter(|n| fusekit_core::diagnostics::glob_match(&opts.selector, n))
        .filter(|n| base.shape(n).map(|s| s.len() >= 2).unwrap_or(false))
        .collect();
    if spectral_names.is_empty() {
        return Err(DiagnosticsError::EmptySelection(opts.selector.clone()).into());
    }
    spectral_names.sort_by_key(|n| (layer_index(n).unwrap_or(usize::MAX), n.to_string()));

    let mut spectral = Vec::with_capacity(spectral_names.len());
    for name in &spectral_names {
        let b = base.read_entry(name)?;
        let s = secondary.read_entry(name)?;
        let f = fused.read_entry(name)?;
        let report = spectral_report(name, &b, &s, &f, opts.rank_k)?;
        spectral.push(SpectralRow::from_report(&report));
    }

    // element provenance and softmax probes over every matched tensor
    let mut prov_rows = Vec::with_capacity(matched.len());
    let mut entropy_rows = Vec::with_capacity(matched.len());
    let mut stability_rows = Vec::with_capacity(matched.len());
    for name in &matched {
        let b = base.read_entry(name)?;
        let s = secondary.read_entry(name)?;
        let f = fused.read_entry(name)?;
        prov_rows.push(ProvenanceRow::new(name, &provenance(&b, &s, &f)?));
        entropy_rows.push(EntropyRow::new(
            name,
            &entropy_probe(&b, &f, SoftmaxAxis::Last)?,
        ));
        stability_rows.push(StabilityRow::new(
            name,
            &stability_probe(&b, &s, &f, SoftmaxAxis::Last)?,
        ));
    }

    let mean = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        let mut acc = CompensatedSum::new();
        let mut n = 0usize;
        for x in it {
            acc.add(x);
            n += 1;
        }
        if n == 0 {
            f64::NAN
        } else {
            acc.total() / n as f64
        }
    };

    let applicable = spectral.iter().filter(|r| r.wedin_applicable).count();
    let holds = spectral
        .iter()
        .filter(|r| r.wedin_applicable && r.wedin_holds)
        .count();
    let neither: usize = prov_rows.iter().map(|r| r.from_neither).sum();
    let total: usize = prov_rows.iter().map(|r| r.total).sum();

    let summary = DiagnosticsSummary {
        mean_nss_vs_base: Sig17(mean(&mut spectral.iter().map(|r| r.nss_vs_base.0))),
        mean_nss_vs_secondary: Sig17(mean(&mut spectral.iter().map(|r| r.nss_vs_secondary.0))),
        mean_max_angle_vs_base_deg: Sig17(mean(
            &mut spectral.iter().map(|r| r.max_angle_vs_base_deg.0),
        )),
        mean_max_angle_vs_secondary_deg: Sig17(mean(
            &mut spectral.iter().map(|r| r.max_angle_vs_secondary_deg.0),
        )),
        wedin_holds_fraction: Sig17(if applicable == 0 {
            f64::NAN
        } else {
            holds as f64 / applicable as f64
        }),
        neither_fraction: Sig17(neither as f64 / total as f64),
        mean_entropy_drop: Sig17(mean(&mut entropy_rows.iter().map(|r| r.entropy_drop.0))),
        mean_rkl_base_to_fused: Sig17(mean(
            &mut stability_rows.iter().map(|r| r.rkl_base_to_fused.0),
        )),
        mean_rkl_base_to_secondary: Sig17(mean(
            &mut stability_rows.iter().map(|r| r.rkl_base_to_secondary.0),
        )),
        mean_violation_rate: Sig17(mean(
            &mut stability_rows.iter().map(|r| r.violation_rate.0),
        )),
    };

    let report = DiagnosticsReport {
        schema: SCHEMA_VERSION,
        base: base_path.to_path_buf(),
        secondary: secondary_path.to_path_buf(),
        fused: fused_path.to_path_buf(),
        selector: opts.selector.clone(),
        rank_k: opts.rank_k,
        spectral,
        provenance: prov_rows,
        entropy: entropy_rows,
        stability: stability_rows,
        summary: summary.clone(),
        warnings,
    };
    report.write_all(out_dir)?;
    Ok(summary)
}

// ── compare ─────────────────────────────────────────────────────────────────

pub struct CompareArgs {
    pub base: PathBuf,
    pub secondary: PathBuf,
    pub methods: Vec<String>,
    pub out_dir: PathBuf,
    pub overrides: crate::recipe::RecipeFile,
    pub rank_k: usize,
}

pub fn cmd_compare(args: &CompareArgs) -> ToolResult<()> {
    if args.methods.len() < 2 {
        return Err(ToolError::config("compare needs at least 2 methods"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for m in &args.methods {
        if !seen.insert(m) {
            return Err(ToolError::config(format!("method '{m}' listed twice")));
        }
    }
    std::fs::create_dir_all(&args.out_dir)?;

    let mut summaries: Vec<(String, DiagnosticsSummary)> = Vec::new();
    for method in &args.methods {
        let output = args.out_dir.join(format!("{method}.safetensors"));
        let file = crate::recipe::RecipeFile {
            method: Some(method.clone()),
            base_path: Some(args.base.clone()),
            secondary_paths: vec![args.secondary.clone()],
            output_path: Some(output.clone()),
            ..Default::default()
        }
        .overlay(args.overrides.clone());
        let (recipe, echo) = crate::recipe::resolve(file)?;
        cmd_merge(&recipe, &echo, false)?;

        let summary = cmd_diagnose(
            &args.base,
            &args.secondary,
            &output,
            &args.out_dir.join(method),
            &DiagnoseOptions {
                selector: "*".to_string(),
                rank_k: args.rank_k,
            },
        )?;
        summaries.push((method.clone(), summary));
    }

    let mut csv = CsvDoc::new(&["method", "metric", "value"]);
    for (method, summary) in &summaries {
        for (metric, value) in summary.metrics() {
            csv.row(&[method.clone(), metric.to_string(), fmt_f64(value)]);
        }
    }
    csv.write(&args.out_dir.join("compare.csv"))?;
    Ok(())
}

// ── gen-fixture ─────────────────────────────────────────────────────────────

pub fn cmd_gen_fixture(
    spec: &FixtureSpec,
    out_base: &Path,
    out_secondary: &Path,
) -> ToolResult<()> {
    crate::fixture::write_fixture_pair(spec, out_base, out_secondary)
}
