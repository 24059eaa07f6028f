//! Geometric and information-theoretic probes over (base, secondary,
//! fused) checkpoint triples: singular spectra, principal angles between
//! singular subspaces, normalized spectral shift, a sin Θ perturbation
//! bound check, element provenance, and softmax entropy/divergence
//! probes.

use thiserror::Error;

use crate::checkpoint::{TensorEntry, TensorMap};
use crate::fusion::SoftmaxAxis;
use crate::linalg::{self, svd, LinalgError, Mat, Svd};
use crate::stats::{l2_norm, CompensatedSum};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("basis columns are not orthonormal (deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("rank k={k} out of range (matrix has {available} singular vectors)")]
    RankOutOfRange { k: usize, available: usize },
    #[error("base matrix is zero")]
    ZeroBaseMatrix,
    #[error("selector '{0}' matches no rank-2 tensor")]
    EmptySelection(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// Computed principal angles carry arccos noise of ~√(2·1e-16) ≈ 1.5e-8
/// even for identical subspaces, so the bound check allows this much
/// absolute slack on top of the relative term.
const ANGLE_NOISE_FLOOR: f64 = 1e-7;

// ── report types ────────────────────────────────────────────────────────────

/// Where each fused element's bits came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProvenanceHistogram {
    pub from_base: usize,
    pub from_secondary: usize,
    /// base and secondary agree and the fused value equals both.
    pub from_both: usize,
    /// matches neither parent (interpolated value).
    pub from_neither: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProbe {
    /// Mean Shannon entropy over softmax slices (natural log).
    pub h_base: f64,
    pub h_fused: f64,
    /// h_base − h_fused.
    pub entropy_drop: f64,
    /// ‖θ_fused − θ_base‖₂.
    pub masked_delta_l2: f64,
    /// entropy_drop / masked_delta_l2 when the perturbation is nonzero.
    pub implied_lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityProbe {
    /// Mean over slices of RKL(softmax(base) ‖ softmax(fused)).
    pub rkl_base_to_fused: f64,
    pub rkl_base_to_secondary: f64,
    /// Fraction of slices where the fused divergence exceeds the
    /// secondary divergence (the bound is first-order, so a rate is
    /// reported instead of a per-slice assertion).
    pub violation_rate: f64,
}

/// sin Θ bound check for the rank-k left singular subspace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WedinCheck {
    /// sin of the largest principal angle between the subspaces.
    pub lhs: f64,
    /// ‖E‖₂ / δ with δ = σ_k(base) − σ_{k+1}(base).
    pub rhs: f64,
    pub holds: bool,
    /// False when the spectral gap is (numerically) zero; lhs/rhs are
    /// then not meaningful.
    pub applicable: bool,
    pub gap: f64,
}

/// Spectral comparison of one fused weight matrix against its parents.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub tensor_name: String,
    pub sigma_base: Vec<f64>,
    pub sigma_secondary: Vec<f64>,
    pub sigma_fused: Vec<f64>,
    pub nss_vs_base: f64,
    pub nss_vs_secondary: f64,
    pub max_angle_vs_base_deg: f64,
    pub max_angle_vs_secondary_deg: f64,
    /// Max principal angle between the two parents' subspaces (the
    /// reference gap the fused angles can be compared against).
    pub parent_max_angle_deg: f64,
    pub wedin: WedinCheck,
    /// Subspace dimension actually used.
    pub rank_k: usize,
}

// ── spectral operations ─────────────────────────────────────────────────────

/// Reshape a tensor entry to a [d0, rest] matrix for spectral analysis.
pub fn entry_to_matrix(entry: &TensorEntry) -> Mat {
    let shape = entry.shape();
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product::<usize>().max(1);
    Mat::from_row_major(rows, cols, &entry.working())
}

/// Full thin SVD with descending singular values.
pub fn svd_spectrum(w: &Mat) -> Result<Svd> {
    Ok(svd(w)?)
}

/// Principal angles (degrees, descending) between the spans of the first
/// k columns of two orthonormal bases: θ_i = arccos(σ_i(U_aᵀ U_b)),
/// clamped to [0, 1]. Small angles are refined through the sine route
/// (σ of U_b − U_a(U_aᵀU_b), Björck–Golub), since arccos near 1 loses
/// half the working precision.
pub fn principal_angles(u_a: &Mat, u_b: &Mat, k: usize) -> Result<Vec<f64>> {
    if u_a.rows() != u_b.rows() {
        return Err(DiagnosticsError::ShapeMismatch(
            vec![u_a.rows(), u_a.cols()],
            vec![u_b.rows(), u_b.cols()],
        ));
    }
    if k == 0 || k > u_a.cols() || k > u_b.cols() {
        return Err(DiagnosticsError::RankOutOfRange {
            k,
            available: u_a.cols().min(u_b.cols()),
        });
    }
    let a = u_a.leading_columns(k);
    let b = u_b.leading_columns(k);
    check_orthonormal(&a)?;
    check_orthonormal(&b)?;

    let cross = a.transpose().matmul(&b);
    let mut cosines = svd(&cross)?.sigma;
    for c in cosines.iter_mut() {
        *c = c.clamp(0.0, 1.0);
    }

    // residual of b against span(a); its singular values are the sines,
    // ascending where the cosines are descending
    let proj = a.matmul(&cross);
    let mut resid = b.clone();
    for c in 0..k {
        for r in 0..resid.rows() {
            resid[(r, c)] -= proj[(r, c)];
        }
    }
    let mut sines = svd(&resid)?.sigma;
    for s in sines.iter_mut() {
        *s = s.clamp(0.0, 1.0);
    }
    sines.reverse();

    // angles ascending; cos route for large, sin route for small
    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            if c * c < 0.5 {
                c.acos().to_degrees()
            } else {
                s.asin().to_degrees()
            }
        })
        .collect();
    angles.reverse();
    Ok(angles)
}

fn check_orthonormal(u: &Mat) -> Result<()> {
    let gram = u.transpose().matmul(u);
    let mut dev = 0.0f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let want = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - want).abs());
        }
    }
    if dev > ORTHONORMAL_TOL {
        return Err(DiagnosticsError::NotOrthonormal(dev));
    }
    Ok(())
}

/// Normalized spectral shift ‖σ(W_f) − σ(W_b)‖₂ / ‖σ(W_b)‖₂ on
/// descending spectra (shorter spectrum zero-padded).
pub fn nss(w_base: &Mat, w_fused: &Mat) -> Result<f64> {
    let sb = svd(w_base)?.sigma;
    let sf = svd(w_fused)?.sigma;
    nss_from_spectra(&sb, &sf)
}

pub fn nss_from_spectra(sigma_base: &[f64], sigma_fused: &[f64]) -> Result<f64> {
    let len = sigma_base.len().max(sigma_fused.len());
    let at = |s: &[f64], i: usize| s.get(i).copied().unwrap_or(0.0);
    let denom = l2_norm(sigma_base.iter().copied());
    if denom == 0.0 {
        return Err(DiagnosticsError::ZeroBaseMatrix);
    }
    let num = l2_norm((0..len).map(|i| at(sigma_fused, i) - at(sigma_base, i)));
    Ok(num / denom)
}

/// Check sin Θ_max ≤ ‖E‖₂/δ for the rank-k left subspaces of base vs
/// fused, with E = W_fused − W_base and δ = σ_k(base) − σ_{k+1}(base).
pub fn wedin_check(w_base: &Mat, w_fused: &Mat, k: usize) -> Result<WedinCheck> {
    if (w_base.rows(), w_base.cols()) != (w_fused.rows(), w_fused.cols()) {
        return Err(DiagnosticsError::ShapeMismatch(
            vec![w_base.rows(), w_base.cols()],
            vec![w_fused.rows(), w_fused.cols()],
        ));
    }
    let sb = svd(w_base)?;
    let r = sb.sigma.len();
    if k == 0 || k > r {
        return Err(DiagnosticsError::RankOutOfRange { k, available: r });
    }
    let sigma_k = sb.sigma[k - 1];
    let sigma_k1 = sb.sigma.get(k).copied().unwrap_or(0.0);
    let gap = sigma_k - sigma_k1;
    let sigma_1 = sb.sigma[0];
    if gap.partial_cmp(&(1e-9 * sigma_1)) != Some(std::cmp::Ordering::Greater) || sigma_1 == 0.0 {
        return Ok(WedinCheck {
            lhs: f64::NAN,
            rhs: f64::NAN,
            holds: true,
            applicable: false,
            gap,
        });
    }

    let sfu = svd(w_fused)?;
    let angles = principal_angles(&sb.u, &sfu.u, k)?;
    let lhs = angles[0].to_radians().sin();

    let mut e = Mat::zeros(w_base.rows(), w_base.cols());
    for c in 0..w_base.cols() {
        for row in 0..w_base.rows() {
            e[(row, c)] = w_fused[(row, c)] - w_base[(row, c)];
        }
    }
    let rhs = linalg::spectral_norm(&e)? / gap;
    Ok(WedinCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-9) + ANGLE_NOISE_FLOOR,
        applicable: true,
        gap,
    })
}

// ── element provenance ──────────────────────────────────────────────────────

/// Classify every fused element by bit-comparing its f64 promotion with
/// both parents'.
pub fn provenance(
    base: &TensorEntry,
    secondary: &TensorEntry,
    fused: &TensorEntry,
) -> Result<ProvenanceHistogram> {
    if base.shape() != secondary.shape() || base.shape() != fused.shape() {
        return Err(DiagnosticsError::ShapeMismatch(
            base.shape().to_vec(),
            fused.shape().to_vec(),
        ));
    }
    let mut hist = ProvenanceHistogram {
        total: base.element_count(),
        ..Default::default()
    };
    for j in 0..hist.total {
        let f = fused.value_at(j).to_bits();
        let b = base.value_at(j).to_bits();
        let s = secondary.value_at(j).to_bits();
        match (f == b, f == s) {
            (true, true) => hist.from_both += 1,
            (true, false) => hist.from_base += 1,
            (false, true) => hist.from_secondary += 1,
            (false, false) => hist.from_neither += 1,
        }
    }
    Ok(hist)
}

// ── softmax probes ──────────────────────────────────────────────────────────

fn slice_dims(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / n, n)
}

/// Softmax of one slice without smoothing (probes use ε = 0; softmax
/// outputs are strictly positive up to underflow).
fn softmax_slice(src: &[f64], out: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &x) in out.iter_mut().zip(src) {
        *d = (x - max).exp();
        sum += *d;
    }
    for d in out.iter_mut() {
        *d /= sum;
    }
}

fn shannon_entropy(p: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for &x in p {
        if x > 0.0 {
            acc.add(-x * x.ln());
        }
    }
    acc.total()
}

/// RKL with ε = 0 semantics: terms with q_i = 0 contribute 0; q_i > 0
/// against p_i = 0 diverges.
fn rkl_slice(q: &[f64], p: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for (&qi, &pi) in q.iter().zip(p) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return f64::INFINITY;
        }
        acc.add(qi * (qi / pi).ln());
    }
    acc.total()
}

/// Mean softmax-slice entropy of base vs fused, the perturbation norm,
/// and the Lipschitz ratio they imply.
pub fn entropy_probe(
    base: &TensorEntry,
    fused: &TensorEntry,
    _axis: SoftmaxAxis,
) -> Result<EntropyProbe> {
    if base.shape() != fused.shape() {
        return Err(DiagnosticsError::ShapeMismatch(
            base.shape().to_vec(),
            fused.shape().to_vec(),
        ));
    }
    let wb = base.working();
    let wf = fused.working();
    let (rows, n) = slice_dims(base.shape());
    let mut buf_b = vec![0.0; n];
    let mut buf_f = vec![0.0; n];
    let mut hb = CompensatedSum::new();
    let mut hf = CompensatedSum::new();
    for r in 0..rows {
        softmax_slice(&wb[r * n..(r + 1) * n], &mut buf_b);
        softmax_slice(&wf[r * n..(r + 1) * n], &mut buf_f);
        hb.add(shannon_entropy(&buf_b));
        hf.add(shannon_entropy(&buf_f));
    }
    let h_base = hb.total() / rows as f64;
    let h_fused = hf.total() / rows as f64;
    let masked_delta_l2 = l2_norm(wf.iter().zip(&wb).map(|(f, b)| f - b));
    let entropy_drop = h_base - h_fused;
    Ok(EntropyProbe {
        h_base,
        h_fused,
        entropy_drop,
        masked_delta_l2,
        implied_lipschitz: (masked_delta_l2 > 0.0).then(|| entropy_drop / masked_delta_l2),
    })
}

/// Mean RKL from the base's softmax slices to the fused and secondary
/// ones, plus the per-slice violation rate of fused ≤ secondary.
pub fn stability_probe(
    base: &TensorEntry,
    secondary: &TensorEntry,
    fused: &TensorEntry,
    _axis: SoftmaxAxis,
) -> Result<StabilityProbe> {
    if base.shape() != secondary.shape() || base.shape() != fused.shape() {
        return Err(DiagnosticsError::ShapeMismatch(
            base.shape().to_vec(),
            fused.shape().to_vec(),
        ));
    }
    let wb = base.working();
    let ws = secondary.working();
    let wf = fused.working();
    let (rows, n) = slice_dims(base.shape());
    let mut q = vec![0.0; n];
    let mut pf = vec![0.0; n];
    let mut ps = vec![0.0; n];
    let mut to_fused = CompensatedSum::new();
    let mut to_secondary = CompensatedSum::new();
    let mut violations = 0usize;
    for r in 0..rows {
        let span = r * n..(r + 1) * n;
        softmax_slice(&wb[span.clone()], &mut q);
        softmax_slice(&wf[span.clone()], &mut pf);
        softmax_slice(&ws[span], &mut ps);
        let rf = rkl_slice(&q, &pf);
        let rs = rkl_slice(&q, &ps);
        to_fused.add(rf);
        to_secondary.add(rs);
        if rf > rs + 1e-12 {
            violations += 1;
        }
    }
    Ok(StabilityProbe {
        rkl_base_to_fused: to_fused.total() / rows as f64,
        rkl_base_to_secondary: to_secondary.total() / rows as f64,
        violation_rate: violations as f64 / rows as f64,
    })
}

// ── layer sweep ─────────────────────────────────────────────────────────────

/// Glob match supporting `*` (any substring) and `?` (any one char).
pub fn glob_match(pattern: &str, name: &str) -> bool {
    fn rec(p: &[u8], n: &[u8]) -> bool {
        match p.first() {
            None => n.is_empty(),
            Some(b'*') => (0..=n.len()).any(|i| rec(&p[1..], &n[i..])),
            Some(b'?') => !n.is_empty() && rec(&p[1..], &n[1..]),
            Some(&c) => n.first() == Some(&c) && rec(&p[1..], &n[1..]),
        }
    }
    rec(pattern.as_bytes(), name.as_bytes())
}

/// First run of decimal digits in a tensor name, used as its layer index.
pub fn layer_index(name: &str) -> Option<usize> {
    let bytes = name.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |i| start + i);
    name[start..end].parse().ok()
}

/// One SpectralReport per selected rank-≥2 tensor present with equal
/// shapes in all three maps, ordered by parsed layer index then name.
pub fn layer_sweep(
    base: &TensorMap,
    secondary: &TensorMap,
    fused: &TensorMap,
    selector: &str,
    k: usize,
) -> Result<Vec<SpectralReport>> {
    let mut names: Vec<&str> = base
        .names()
        .filter(|n| glob_match(selector, n))
        .filter(|n| {
            let b = base.get(n).expect("name from base");
            b.shape().len() >= 2
                && secondary.get(n).is_some_and(|s| s.shape() == b.shape())
                && fused.get(n).is_some_and(|f| f.shape() == b.shape())
        })
        .collect();
    if names.is_empty() {
        return Err(DiagnosticsError::EmptySelection(selector.to_string()));
    }
    names.sort_by_key(|n| (layer_index(n).unwrap_or(usize::MAX), n.to_string()));

    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        reports.push(spectral_report(
            name,
            &base[name],
            &secondary[name],
            &fused[name],
            k,
        )?);
    }
    Ok(reports)
}

/// Full spectral comparison of one (base, secondary, fused) triple.
pub fn spectral_report(
    name: &str,
    base: &TensorEntry,
    secondary: &TensorEntry,
    fused: &TensorEntry,
    k: usize,
) -> Result<SpectralReport> {
    let wb = entry_to_matrix(base);
    let ws = entry_to_matrix(secondary);
    let wf = entry_to_matrix(fused);
    let sb = svd(&wb)?;
    let ss = svd(&ws)?;
    let sf = svd(&wf)?;
    let rank_k = k.min(sb.sigma.len()).max(1);

    let angle = |a: &Svd, b: &Svd| -> Result<f64> {
        Ok(principal_angles(&a.u, &b.u, rank_k)?[0])
    };

    Ok(SpectralReport {
        tensor_name: name.to_string(),
        nss_vs_base: nss_from_spectra(&sb.sigma, &sf.sigma)?,
        nss_vs_secondary: nss_from_spectra(&ss.sigma, &sf.sigma)?,
        max_angle_vs_base_deg: angle(&sb, &sf)?,
        max_angle_vs_secondary_deg: angle(&ss, &sf)?,
        parent_max_angle_deg: angle(&sb, &ss)?,
        wedin: wedin_check(&wb, &wf, rank_k)?,
        sigma_base: sb.sigma,
        sigma_secondary: ss.sigma,
        sigma_fused: sf.sigma,
        rank_k,
    })
}
