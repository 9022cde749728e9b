//! Domain types shared across the crate.
//!
//! Pattern indices are zero-based throughout: column `k` of a [`MemoryMatrix`]
//! is pattern `k`, and [`VariantSample::origin`] refers to that column.

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

/// Stored patterns, one column per pattern, `d` rows by `n` columns.
///
/// Columns are stored contiguously so that `column(k)` is a plain slice.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryMatrix {
    d: usize,
    n: usize,
    data: Vec<f64>,
}

impl MemoryMatrix {
    /// Builds a matrix from column-major data (`data[k * d + i]` is entry `i` of pattern `k`).
    pub fn new(d: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Empty("pattern dimension"));
        }
        if n == 0 {
            return Err(Error::Empty("memory"));
        }
        check_len("memory data", d * n, data.len())?;
        check_finite("memory", &data)?;
        Ok(Self { d, n, data })
    }

    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let first = columns.first().ok_or(Error::Empty("memory"))?;
        let d = first.as_ref().len();
        let mut data = Vec::with_capacity(d * columns.len());
        for c in columns {
            check_len("memory column", d, c.as_ref().len())?;
            data.extend_from_slice(c.as_ref());
        }
        Self::new(d, columns.len(), data)
    }

    /// Pattern dimensionality.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of stored patterns.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn columns(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `Ξ p`: the convex (or arbitrary linear) combination of columns weighted by `weights`.
    pub fn combine(&self, weights: &[f64]) -> Vec<f64> {
        debug_assert_eq!(weights.len(), self.n);
        let mut out = vec![0.0; self.d];
        for (col, &p) in self.columns().zip(weights) {
            if p == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(col) {
                *o += p * v;
            }
        }
        out
    }

    pub(crate) fn check_query(&self, what: &'static str, x: &[f64]) -> Result<()> {
        check_len(what, self.d, x.len())
    }
}

/// A query (or retrieved) vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite("query", &data)?;
        Ok(Self(data))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    // Internal constructor for values produced by finite arithmetic on finite inputs.
    pub(crate) fn from_finite(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self(data)
    }
}

impl Deref for QueryVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for QueryVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QueryVector> for Vec<f64> {
    fn from(q: QueryVector) -> Self {
        q.0
    }
}

/// A draw `(origin, query)` from a variant distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSample {
    pub origin: usize,
    pub query: QueryVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Noisy,
    Masked,
    Biased,
    Mixed,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Noisy => "noisy",
            VariantKind::Masked => "masked",
            VariantKind::Biased => "biased",
            VariantKind::Mixed => "mixed",
        }
    }
}

pub const DEFAULT_MATCH_TOL: f64 = 1e-12;

fn default_mask_low() -> f64 {
    -1.0
}

fn default_mask_high() -> f64 {
    1.0
}

fn default_match_tol() -> f64 {
    DEFAULT_MATCH_TOL
}

/// Parameters of a variant distribution.
///
/// `sigma` holds noise variances (the diagonal of the covariance); a single
/// entry broadcasts over every dimension. `drift` is the constant additive
/// bias. For [`VariantKind::Mixed`] the noise variance, mask fraction and bias
/// magnitude come from `mixed_triplet = (d_mask, d_noise, d_bias)`, and the
/// per-dimension bias signs are frozen in `sign_vector` when the spec is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub p_masked: f64,
    #[serde(default = "default_mask_low")]
    pub mask_low: f64,
    #[serde(default = "default_mask_high")]
    pub mask_high: f64,
    #[serde(default)]
    pub drift: Vec<f64>,
    #[serde(default)]
    pub mixed_triplet: [f64; 3],
    #[serde(default)]
    pub sign_vector: Vec<i8>,
    #[serde(default = "default_match_tol")]
    pub match_tol: f64,
}

impl VariantSpec {
    fn blank(kind: VariantKind) -> Self {
        Self {
            kind,
            sigma: Vec::new(),
            p_masked: 0.0,
            mask_low: default_mask_low(),
            mask_high: default_mask_high(),
            drift: Vec::new(),
            mixed_triplet: [0.0; 3],
            sign_vector: Vec::new(),
            match_tol: DEFAULT_MATCH_TOL,
        }
    }

    /// Gaussian noise with per-dimension variances `sigma`.
    pub fn noisy(sigma: Vec<f64>) -> Self {
        Self {
            sigma,
            ..Self::blank(VariantKind::Noisy)
        }
    }

    /// Gaussian noise with the same variance in every dimension.
    pub fn noisy_isotropic(sigma: f64) -> Self {
        Self::noisy(vec![sigma])
    }

    /// Each dimension replaced by a `Uniform(-1, 1)` draw with probability `p_masked`.
    pub fn masked(p_masked: f64) -> Self {
        Self {
            p_masked,
            ..Self::blank(VariantKind::Masked)
        }
    }

    pub fn masked_with_range(p_masked: f64, low: f64, high: f64) -> Self {
        Self {
            p_masked,
            mask_low: low,
            mask_high: high,
            ..Self::blank(VariantKind::Masked)
        }
    }

    pub fn biased(drift: Vec<f64>) -> Self {
        Self {
            drift,
            ..Self::blank(VariantKind::Biased)
        }
    }

    /// Mixed variant with bias signs drawn once from `rng`.
    pub fn mixed<R: Rng + ?Sized>(d: usize, triplet: [f64; 3], rng: &mut R) -> Self {
        let signs = (0..d)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Self::mixed_with_signs(triplet, signs)
    }

    pub fn mixed_with_signs(triplet: [f64; 3], sign_vector: Vec<i8>) -> Self {
        let drift = sign_vector
            .iter()
            .map(|&s| f64::from(s) * triplet[2])
            .collect();
        Self {
            mixed_triplet: triplet,
            sign_vector,
            drift,
            ..Self::blank(VariantKind::Mixed)
        }
    }

    pub fn d_mask(&self) -> f64 {
        self.mixed_triplet[0]
    }

    pub fn d_noise(&self) -> f64 {
        self.mixed_triplet[1]
    }

    pub fn d_bias(&self) -> f64 {
        self.mixed_triplet[2]
    }

    /// Noise variance of dimension `i` (scalar `sigma` broadcasts).
    pub fn sigma_at(&self, i: usize) -> f64 {
        if self.sigma.len() == 1 {
            self.sigma[0]
        } else {
            self.sigma[i]
        }
    }

    /// Number of dimensions a mixed variant overwrites: `round(d * d_mask)`, ties to even.
    pub fn mixed_mask_count(&self, d: usize) -> usize {
        ((d as f64) * self.d_mask()).round_ties_even() as usize
    }

    /// Density of the masking generator `G` (uniform on `[mask_low, mask_high]`).
    pub fn mask_density(&self) -> f64 {
        1.0 / (self.mask_high - self.mask_low)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.match_tol >= 0.0 && self.match_tol.is_finite()) {
            return bad(format!("match_tol must be finite and >= 0, got {}", self.match_tol));
        }
        match self.kind {
            VariantKind::Noisy => {
                if self.sigma.len() != 1 {
                    check_len("sigma", d, self.sigma.len())?;
                }
                if !self.sigma.iter().all(|&s| s > 0.0 && s.is_finite()) {
                    return bad("noisy variant needs strictly positive finite sigma".into());
                }
            }
            VariantKind::Masked => {
                if !(0.0..1.0).contains(&self.p_masked) {
                    return bad(format!("p_masked must lie in [0, 1), got {}", self.p_masked));
                }
                if !(self.mask_low < self.mask_high)
                    || !self.mask_low.is_finite()
                    || !self.mask_high.is_finite()
                {
                    return bad(format!(
                        "mask range must satisfy low < high, got [{}, {}]",
                        self.mask_low, self.mask_high
                    ));
                }
            }
            VariantKind::Biased => {
                check_len("drift", d, self.drift.len())?;
                check_finite("drift", &self.drift)?;
            }
            VariantKind::Mixed => {
                if !self.mixed_triplet.iter().all(|t| (0.0..=1.0).contains(t)) {
                    return bad(format!(
                        "mixed triplet entries must lie in [0, 1], got {:?}",
                        self.mixed_triplet
                    ));
                }
                check_len("sign_vector", d, self.sign_vector.len())?;
                if !self.sign_vector.iter().all(|&s| s == 1 || s == -1) {
                    return bad("sign_vector entries must be -1 or +1".into());
                }
                check_len("drift", d, self.drift.len())?;
                let consistent = self
                    .drift
                    .iter()
                    .zip(&self.sign_vector)
                    .all(|(&b, &s)| b == f64::from(s) * self.d_bias());
                if !consistent {
                    return bad("mixed drift must equal sign_vector * d_bias".into());
                }
            }
        }
        Ok(())
    }
}

/// Base similarity of a footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// Negative squared Euclidean distance, `q_i = -(ξ_i - x_i)^2`.
    Dis,
    /// Dot product, `q_i = ξ_i x_i`.
    Dot,
}

/// Dense square matrix, row-major. Serialized as a list of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Lower-left triangle of ones: `U[i][j] = 1` iff `j <= i`.
    pub fn lower_triangular_ones(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                m.data[i * n + j] = 1.0;
            }
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        check_len("square matrix", n * n, data.len())?;
        check_finite("square matrix", &data)?;
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `M v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, &vi) in self.data.chunks_exact(self.n).zip(v) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

impl TryFrom<Vec<Vec<f64>>> for SquareMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            check_len("square matrix row", n, r.len())?;
            data.extend(r);
        }
        Self::from_row_major(n, data)
    }
}

impl From<SquareMatrix> for Vec<Vec<f64>> {
    fn from(m: SquareMatrix) -> Self {
        m.data.chunks_exact(m.n).map(<[f64]>::to_vec).collect()
    }
}

/// The matrix applied to the (sorted) dimension-wise vector before weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UMode {
    /// Cumulative sums: lower-left triangle of ones.
    FixedTriangular,
    /// No mixing; the weights see `q` directly.
    Identity,
    /// A fixed user-supplied matrix.
    Fixed(SquareMatrix),
    /// A trainable matrix, initialised to the stored value.
    Learnable(SquareMatrix),
}

impl UMode {
    pub fn is_learnable(&self) -> bool {
        matches!(self, UMode::Learnable(_))
    }

    pub fn matrix(&self) -> Option<&SquareMatrix> {
        match self {
            UMode::Fixed(m) | UMode::Learnable(m) => Some(m),
            _ => None,
        }
    }

    /// `Mᵀ w`, the weights seen by the raw (sorted) dimension-wise vector.
    pub fn effective_weights(&self, w: &[f64]) -> Vec<f64> {
        match self {
            UMode::FixedTriangular => {
                // (wᵀU)_j = Σ_{i >= j} w_i
                let mut u = w.to_vec();
                for j in (0..u.len().saturating_sub(1)).rev() {
                    u[j] += u[j + 1];
                }
                u
            }
            UMode::Identity => w.to_vec(),
            UMode::Fixed(m) | UMode::Learnable(m) => m.tr_mul_vec(w),
        }
    }

    /// `M v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            UMode::FixedTriangular => {
                let mut acc = 0.0;
                v.iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect()
            }
            UMode::Identity => v.to_vec(),
            UMode::Fixed(m) | UMode::Learnable(m) => m.mul_vec(v),
        }
    }
}

/// One footprint term `β · wᵀ M q̃` of the adaptive similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub base: BaseKind,
    pub w: Vec<f64>,
    pub beta: f64,
    /// Sort the dimension-wise vector in descending order before mixing.
    pub sorted: bool,
    pub u_mode: UMode,
}

impl BaseConfig {
    /// `w = e_d`, `β = 1`, sorted, cumulative sums: degenerates to the base similarity.
    pub fn degenerate(base: BaseKind, d: usize) -> Self {
        let mut w = vec![0.0; d];
        if let Some(last) = w.last_mut() {
            *last = 1.0;
        }
        Self {
            base,
            w,
            beta: 1.0,
            sorted: true,
            u_mode: UMode::FixedTriangular,
        }
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        self.u_mode.effective_weights(&self.w)
    }
}

/// Learnable parameters of the adaptive similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSet {
    pub bases: Vec<BaseConfig>,
}

impl WeightSet {
    /// Distance and dot-product footprints, each starting at its base similarity.
    pub fn adaptive(d: usize) -> Self {
        Self {
            bases: vec![
                BaseConfig::degenerate(BaseKind::Dis, d),
                BaseConfig::degenerate(BaseKind::Dot, d),
            ],
        }
    }

    pub fn single(base: BaseKind, d: usize) -> Self {
        Self {
            bases: vec![BaseConfig::degenerate(base, d)],
        }
    }

    /// Dimension of the weights (`None` when there are no bases).
    pub fn dim(&self) -> Option<usize> {
        self.bases.first().map(|b| b.w.len())
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.bases.is_empty() {
            return Err(Error::Empty("weight set"));
        }
        for b in &self.bases {
            check_len("weights", d, b.w.len())?;
            check_finite("weights", &b.w)?;
            if !b.beta.is_finite() {
                return Err(Error::NonFinite("beta"));
            }
            if let Some(m) = b.u_mode.matrix() {
                check_len("mixing matrix", d, m.n())?;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bases.iter().all(|b| {
            b.beta.is_finite()
                && b.w.iter().all(|v| v.is_finite())
                && b
                    .u_mode
                    .matrix()
                    .is_none_or(|m| m.as_slice().iter().all(|v| v.is_finite()))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationKind {
    Softmax,
    /// One-hot at the first maximal score.
    Argmax,
}

/// Iterates of an energy descent, with the energy at each iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterates: Vec<QueryVector>,
    pub energies: Vec<f64>,
    pub converged: bool,
    pub steps: usize,
}

impl Trajectory {
    /// `‖x^{t+1} - x^t‖₂` for each step; the first entry is 0.
    pub fn step_norms(&self) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(self.iterates.windows(2).map(|w| {
                w[0].iter()
                    .zip(w[1].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_rejects_bad_shapes() {
        assert!(MemoryMatrix::new(0, 1, vec![]).is_err());
        assert!(MemoryMatrix::new(2, 0, vec![]).is_err());
        assert!(MemoryMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(MemoryMatrix::new(1, 1, vec![f64::NAN]).is_err());
        let m = MemoryMatrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.column(1), &[3.0, 4.0]);
        assert_eq!(m.combine(&[0.5, 0.5]), vec![2.0, 3.0]);
    }

    #[test]
    fn triangular_effective_weights_are_suffix_sums() {
        let w = [1.0, 2.0, 3.0];
        let u = UMode::FixedTriangular.effective_weights(&w);
        assert_eq!(u, vec![6.0, 5.0, 3.0]);
        let explicit = UMode::Fixed(SquareMatrix::lower_triangular_ones(3));
        assert_eq!(explicit.effective_weights(&w), u);
        assert_eq!(UMode::FixedTriangular.apply(&w), vec![1.0, 3.0, 6.0]);
        assert_eq!(explicit.apply(&w), vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn variant_validation() {
        assert!(VariantSpec::noisy(vec![1.0, 0.0]).validate(2).is_err());
        assert!(VariantSpec::noisy_isotropic(0.5).validate(7).is_ok());
        assert!(VariantSpec::masked(1.0).validate(2).is_err());
        assert!(VariantSpec::masked_with_range(0.5, 1.0, 1.0).validate(2).is_err());
        assert!(VariantSpec::biased(vec![0.1]).validate(2).is_err());
        let mixed = VariantSpec::mixed_with_signs([0.1, 0.2, 0.3], vec![1, -1]);
        assert!(mixed.validate(2).is_ok());
        assert_eq!(mixed.drift, vec![0.3, -0.3]);
        let mut broken = mixed.clone();
        broken.drift[0] = 0.0;
        assert!(broken.validate(2).is_err());
    }

    #[test]
    fn mask_count_rounds_half_to_even() {
        let spec = VariantSpec::mixed_with_signs([0.5, 0.0, 0.0], vec![1; 5]);
        // 2.5 -> 2
        assert_eq!(spec.mixed_mask_count(5), 2);
        let spec = VariantSpec::mixed_with_signs([0.4, 0.0, 0.0], vec![1; 64]);
        // 25.6 -> 26
        assert_eq!(spec.mixed_mask_count(64), 26);
    }

    #[test]
    fn json_keys() {
        let ws = WeightSet::single(BaseKind::Dis, 2);
        let v = serde_json::to_value(&ws).unwrap();
        let base = &v["bases"][0];
        for key in ["base", "w", "beta", "sorted", "u_mode"] {
            assert!(base.get(key).is_some(), "missing {key}");
        }
        assert_eq!(base["u_mode"], "fixed_triangular");
        let spec = VariantSpec::mixed_with_signs([0.1, 0.2, 0.3], vec![1, -1]);
        let v = serde_json::to_value(&spec).unwrap();
        for key in [
            "kind",
            "sigma",
            "p_masked",
            "mask_low",
            "mask_high",
            "drift",
            "mixed_triplet",
            "sign_vector",
            "match_tol",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let learnable = UMode::Learnable(SquareMatrix::identity(2));
        let v = serde_json::to_value(&learnable).unwrap();
        assert_eq!(v["learnable"], serde_json::json!([[1.0, 0.0], [0.0, 1.0]]));
    }
}
