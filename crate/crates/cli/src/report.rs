//! Machine-readable outputs: manifest JSON, diagnostics JSON, and CSVs.
//!
//! Every float is serialized with 17 significant digits (`{:.16e}`), the
//! shortest width that always round-trips f64, so identical runs produce
//! byte-identical files that can be diffed directly. Non-finite values
//! serialize as JSON null.

use std::borrow::Cow;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fusekit_core::baselines::BaselineTensorStats;
use fusekit_core::diagnostics::{
    EntropyProbe, ProvenanceHistogram, SpectralReport, StabilityProbe,
};
use fusekit_core::fusion::TensorFusionStats;

use crate::error::{ToolError, ToolResult};
use crate::recipe::RecipeEcho;

pub const SCHEMA_VERSION: u32 = 1;

/// f64 wrapper serializing as a raw JSON number with 17 significant
/// digits (requires serde_json's arbitrary_precision).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

impl Serialize for Sig17 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            let num: serde_json::Number = fmt_f64(self.0)
                .parse()
                .map_err(serde::ser::Error::custom)?;
            num.serialize(s)
        } else {
            s.serialize_none()
        }
    }
}

/// 17 significant digits, scientific notation.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Quote a CSV field when needed.
pub fn csv_field(s: &str) -> Cow<'_, str> {
    if s.contains([',', '"', '\n']) {
        Cow::Owned(format!("\"{}\"", s.replace('"', "\"\"")))
    } else {
        Cow::Borrowed(s)
    }
}

/// Write bytes to a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> ToolResult<()> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| ToolError::io(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{file_name}.partial"));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> ToolResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| ToolError::internal(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

// ── merge manifest ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct ManifestRow {
    pub name: String,
    /// "fused", "baseline", or "copied".
    pub kind: &'static str,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q1: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q3: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_l2: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_delta_l2: Option<Sig17>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_iqr: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approximate_quantiles: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lossy_reencodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub changed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_l2: Option<Sig17>,
}

impl ManifestRow {
    pub fn fused(st: &TensorFusionStats) -> Self {
        ManifestRow {
            name: st.name.clone(),
            kind: "fused",
            total: st.total,
            source: None,
            selected: Some(st.selected),
            sparsity: Some(Sig17(st.sparsity)),
            q1: Some(Sig17(st.q1)),
            q3: Some(Sig17(st.q3)),
            median: Some(Sig17(st.median)),
            tau: Some(Sig17(st.tau)),
            delta_l2: Some(Sig17(st.delta_l2)),
            masked_delta_l2: Some(Sig17(st.masked_delta_l2)),
            degenerate_iqr: Some(st.degenerate_iqr),
            approximate_quantiles: Some(st.approximate_quantiles),
            lossy_reencodes: Some(st.lossy_reencodes),
            changed: None,
            update_l2: None,
        }
    }

    pub fn baseline(st: &BaselineTensorStats) -> Self {
        ManifestRow {
            name: st.name.clone(),
            kind: "baseline",
            total: st.total,
            source: None,
            selected: None,
            sparsity: None,
            q1: None,
            q3: None,
            median: None,
            tau: None,
            delta_l2: None,
            masked_delta_l2: None,
            degenerate_iqr: None,
            approximate_quantiles: None,
            lossy_reencodes: None,
            changed: Some(st.changed),
            update_l2: Some(Sig17(st.update_l2)),
        }
    }

    pub fn copied(name: &str, total: usize, source: &str) -> Self {
        ManifestRow {
            name: name.to_string(),
            kind: "copied",
            total,
            source: Some(source.to_string()),
            selected: None,
            sparsity: None,
            q1: None,
            q3: None,
            median: None,
            tau: None,
            delta_l2: None,
            masked_delta_l2: None,
            degenerate_iqr: None,
            approximate_quantiles: None,
            lossy_reencodes: None,
            changed: None,
            update_l2: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: &'static str,
    pub recipe: RecipeEcho,
    /// Secondary paths in the order they were folded in (multi-parent
    /// sparse fusion applies them left to right).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_order: Option<Vec<PathBuf>>,
    pub tensors: Vec<ManifestRow>,
    pub warnings: Vec<String>,
    pub wall_clock_ms: u64,
}

// ── diagnostics report ──────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct SpectralRow {
    pub tensor: String,
    pub rank_k: usize,
    pub nss_vs_base: Sig17,
    pub nss_vs_secondary: Sig17,
    pub max_angle_vs_base_deg: Sig17,
    pub max_angle_vs_secondary_deg: Sig17,
    pub parent_max_angle_deg: Sig17,
    pub wedin_lhs: Sig17,
    pub wedin_rhs: Sig17,
    pub wedin_holds: bool,
    pub wedin_applicable: bool,
    pub wedin_gap: Sig17,
    pub sigma_base: Vec<Sig17>,
    pub sigma_secondary: Vec<Sig17>,
    pub sigma_fused: Vec<Sig17>,
}

impl SpectralRow {
    pub fn from_report(r: &SpectralReport) -> Self {
        let wrap = |v: &[f64]| v.iter().map(|&x| Sig17(x)).collect();
        SpectralRow {
            tensor: r.tensor_name.clone(),
            rank_k: r.rank_k,
            nss_vs_base: Sig17(r.nss_vs_base),
            nss_vs_secondary: Sig17(r.nss_vs_secondary),
            max_angle_vs_base_deg: Sig17(r.max_angle_vs_base_deg),
            max_angle_vs_secondary_deg: Sig17(r.max_angle_vs_secondary_deg),
            parent_max_angle_deg: Sig17(r.parent_max_angle_deg),
            wedin_lhs: Sig17(r.wedin.lhs),
            wedin_rhs: Sig17(r.wedin.rhs),
            wedin_holds: r.wedin.holds,
            wedin_applicable: r.wedin.applicable,
            wedin_gap: Sig17(r.wedin.gap),
            sigma_base: wrap(&r.sigma_base),
            sigma_secondary: wrap(&r.sigma_secondary),
            sigma_fused: wrap(&r.sigma_fused),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ProvenanceRow {
    pub tensor: String,
    pub from_base: usize,
    pub from_secondary: usize,
    pub from_both: usize,
    pub from_neither: usize,
    pub total: usize,
}

impl ProvenanceRow {
    pub fn new(tensor: &str, h: &ProvenanceHistogram) -> Self {
        ProvenanceRow {
            tensor: tensor.to_string(),
            from_base: h.from_base,
            from_secondary: h.from_secondary,
            from_both: h.from_both,
            from_neither: h.from_neither,
            total: h.total,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EntropyRow {
    pub tensor: String,
    pub h_base: Sig17,
    pub h_fused: Sig17,
    pub entropy_drop: Sig17,
    pub masked_delta_l2: Sig17,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub implied_lipschitz: Option<Sig17>,
}

impl EntropyRow {
    pub fn new(tensor: &str, p: &EntropyProbe) -> Self {
        EntropyRow {
            tensor: tensor.to_string(),
            h_base: Sig17(p.h_base),
            h_fused: Sig17(p.h_fused),
            entropy_drop: Sig17(p.entropy_drop),
            masked_delta_l2: Sig17(p.masked_delta_l2),
            implied_lipschitz: p.implied_lipschitz.map(Sig17),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct StabilityRow {
    pub tensor: String,
    pub rkl_base_to_fused: Sig17,
    pub rkl_base_to_secondary: Sig17,
    pub violation_rate: Sig17,
}

impl StabilityRow {
    pub fn new(tensor: &str, p: &StabilityProbe) -> Self {
        StabilityRow {
            tensor: tensor.to_string(),
            rkl_base_to_fused: Sig17(p.rkl_base_to_fused),
            rkl_base_to_secondary: Sig17(p.rkl_base_to_secondary),
            violation_rate: Sig17(p.violation_rate),
        }
    }
}

/// Aggregates for method-vs-method comparison. The (metric, value)
/// pairs drive compare.csv with a stable metric order.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsSummary {
    pub mean_nss_vs_base: Sig17,
    pub mean_nss_vs_secondary: Sig17,
    pub mean_max_angle_vs_base_deg: Sig17,
    pub mean_max_angle_vs_secondary_deg: Sig17,
    pub wedin_holds_fraction: Sig17,
    pub neither_fraction: Sig17,
    pub mean_entropy_drop: Sig17,
    pub mean_rkl_base_to_fused: Sig17,
    pub mean_rkl_base_to_secondary: Sig17,
    pub mean_violation_rate: Sig17,
}

impl DiagnosticsSummary {
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("mean_nss_vs_base", self.mean_nss_vs_base.0),
            ("mean_nss_vs_secondary", self.mean_nss_vs_secondary.0),
            ("mean_max_angle_vs_base_deg", self.mean_max_angle_vs_base_deg.0),
            (
                "mean_max_angle_vs_secondary_deg",
                self.mean_max_angle_vs_secondary_deg.0,
            ),
            ("wedin_holds_fraction", self.wedin_holds_fraction.0),
            ("neither_fraction", self.neither_fraction.0),
            ("mean_entropy_drop", self.mean_entropy_drop.0),
            ("mean_rkl_base_to_fused", self.mean_rkl_base_to_fused.0),
            (
                "mean_rkl_base_to_secondary",
                self.mean_rkl_base_to_secondary.0,
            ),
            ("mean_violation_rate", self.mean_violation_rate.0),
        ]
    }
}

#[derive(Debug, Serialize)]
pub struct DiagnosticsReport {
    pub schema: u32,
    pub base: PathBuf,
    pub secondary: PathBuf,
    pub fused: PathBuf,
    pub selector: String,
    pub rank_k: usize,
    pub spectral: Vec<SpectralRow>,
    pub provenance: Vec<ProvenanceRow>,
    pub entropy: Vec<EntropyRow>,
    pub stability: Vec<StabilityRow>,
    pub summary: DiagnosticsSummary,
    pub warnings: Vec<String>,
}

// ── CSV emission ────────────────────────────────────────────────────────────

pub struct CsvDoc {
    text: String,
}

impl CsvDoc {
    pub fn new(header: &[&str]) -> Self {
        CsvDoc {
            text: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        let escaped: Vec<String> = fields.iter().map(|f| csv_field(f).into_owned()).collect();
        self.text.push_str(&escaped.join(","));
        self.text.push('\n');
    }

    pub fn write(self, path: &Path) -> ToolResult<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

impl DiagnosticsReport {
    /// report.json plus one CSV per metric family, stable column order.
    pub fn write_all(&self, dir: &Path) -> ToolResult<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), self)?;

        let mut spectra = CsvDoc::new(&[
            "tensor",
            "index",
            "sigma_base",
            "sigma_secondary",
            "sigma_fused",
        ]);
        for row in &self.spectral {
            for i in 0..row.sigma_base.len() {
                spectra.row(&[
                    row.tensor.clone(),
                    i.to_string(),
                    fmt_f64(row.sigma_base[i].0),
                    fmt_f64(row.sigma_secondary.get(i).map_or(f64::NAN, |s| s.0)),
                    fmt_f64(row.sigma_fused.get(i).map_or(f64::NAN, |s| s.0)),
                ]);
            }
        }
        spectra.write(&dir.join("spectra.csv"))?;

        let mut angles = CsvDoc::new(&[
            "tensor",
            "rank_k",
            "max_angle_vs_base_deg",
            "max_angle_vs_secondary_deg",
            "parent_max_angle_deg",
            "wedin_lhs",
            "wedin_rhs",
            "wedin_holds",
            "wedin_applicable",
            "wedin_gap",
        ]);
        for row in &self.spectral {
            angles.row(&[
                row.tensor.clone(),
                row.rank_k.to_string(),
                fmt_f64(row.max_angle_vs_base_deg.0),
                fmt_f64(row.max_angle_vs_secondary_deg.0),
                fmt_f64(row.parent_max_angle_deg.0),
                fmt_f64(row.wedin_lhs.0),
                fmt_f64(row.wedin_rhs.0),
                row.wedin_holds.to_string(),
                row.wedin_applicable.to_string(),
                fmt_f64(row.wedin_gap.0),
            ]);
        }
        angles.write(&dir.join("angles.csv"))?;

        let mut nss = CsvDoc::new(&["tensor", "nss_vs_base", "nss_vs_secondary"]);
        for row in &self.spectral {
            nss.row(&[
                row.tensor.clone(),
                fmt_f64(row.nss_vs_base.0),
                fmt_f64(row.nss_vs_secondary.0),
            ]);
        }
        nss.write(&dir.join("nss.csv"))?;

        let mut prov = CsvDoc::new(&[
            "tensor",
            "from_base",
            "from_secondary",
            "from_both",
            "from_neither",
            "total",
        ]);
        for row in &self.provenance {
            prov.row(&[
                row.tensor.clone(),
                row.from_base.to_string(),
                row.from_secondary.to_string(),
                row.from_both.to_string(),
                row.from_neither.to_string(),
                row.total.to_string(),
            ]);
        }
        prov.write(&dir.join("provenance.csv"))?;

        let mut entropy = CsvDoc::new(&[
            "tensor",
            "h_base",
            "h_fused",
            "entropy_drop",
            "masked_delta_l2",
            "implied_lipschitz",
        ]);
        for row in &self.entropy {
            entropy.row(&[
                row.tensor.clone(),
                fmt_f64(row.h_base.0),
                fmt_f64(row.h_fused.0),
                fmt_f64(row.entropy_drop.0),
                fmt_f64(row.masked_delta_l2.0),
                row.implied_lipschitz
                    .map_or_else(|| "".to_string(), |s| fmt_f64(s.0)),
            ]);
        }
        entropy.write(&dir.join("entropy.csv"))?;

        let mut stability = CsvDoc::new(&[
            "tensor",
            "rkl_base_to_fused",
            "rkl_base_to_secondary",
            "violation_rate",
        ]);
        for row in &self.stability {
            stability.row(&[
                row.tensor.clone(),
                fmt_f64(row.rkl_base_to_fused.0),
                fmt_f64(row.rkl_base_to_secondary.0),
                fmt_f64(row.violation_rate.0),
            ]);
        }
        stability.write(&dir.join("stability.csv"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig17_serializes_raw_numbers() {
        #[derive(Serialize)]
        struct Row {
            x: Sig17,
            none: Option<Sig17>,
        }
        let json = serde_json::to_string(&Row {
            x: Sig17(0.1),
            none: None,
        })
        .unwrap();
        assert_eq!(json, r#"{"x":1.0000000000000001e-1,"none":null}"#);

        // round-trips to the identical f64
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["x"].as_f64().unwrap().to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn sig17_nonfinite_is_null() {
        let json = serde_json::to_string(&Sig17(f64::NAN)).unwrap();
        assert_eq!(json, "null");
    }

    #[test]
    fn fmt_f64_has_17_digits() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(-0.0), "-0.0000000000000000e0");
        // 17 significant digits always parse back to the same f64
        let x = 2.34106561356211f64;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        let y = 0.1f64;
        assert_eq!(fmt_f64(y).parse::<f64>().unwrap().to_bits(), y.to_bits());
    }

    #[test]
    fn csv_field_quotes_when_needed() {
        assert_eq!(csv_field("plain.weight"), "plain.weight");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
