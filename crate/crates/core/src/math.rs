//! Numeric primitives on the probability simplex.
//!
//! Everything here is pure: simplex projections, KL divergence, a max-shifted
//! log-sum-exp, and row-stochastic matrix validation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default lower bound kept by [`project_to_interior_simplex`].
pub const DEFAULT_INTERIOR_EPS: f64 = 1e-9;

/// Row sums must match 1 within this absolute slack.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return invalid("simplex point must have at least one entry");
        }
        if let Some((i, v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return invalid(format!("simplex entry {i} is {v}"));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return invalid(format!("simplex entries sum to {sum}"));
        }
        Ok(SimplexPoint(entries))
    }

    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        debug_assert!(!entries.is_empty());
        SimplexPoint(entries)
    }

    /// Uniform distribution over `len` outcomes.
    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform simplex point needs len >= 1");
        SimplexPoint(vec![1.0 / len as f64; len])
    }

    /// Point mass on `index`.
    pub fn vertex(len: usize, index: usize) -> Self {
        assert!(index < len);
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        SimplexPoint(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexPoint::new(v)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for SimplexPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Absolute/relative tolerance pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerance {
    pub fn new(abs: f64, rel: f64) -> Result<Self> {
        if !(abs > 0.0 && rel > 0.0) {
            return invalid(format!("tolerances must be positive, got abs={abs} rel={rel}"));
        }
        Ok(Tolerance { abs, rel })
    }

    /// Whether `value` is within tolerance of `target`.
    pub fn accepts(&self, value: f64, target: f64) -> bool {
        (value - target).abs() <= self.abs + self.rel * target.abs()
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { abs: SIMPLEX_SUM_TOL, rel: 1e-12 }
    }
}

/// Square row-stochastic matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct StochasticMatrix {
    size: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    /// Builds a matrix from rows, checking that every row lies on the simplex.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let report = validate_stochastic(&rows, Tolerance::default(), None);
        if !report.passed {
            return invalid(format!("not a stochastic matrix: {}", report.summary()));
        }
        let size = rows.len();
        Ok(StochasticMatrix { size, data: rows.into_iter().flatten().collect() })
    }

    /// Like [`from_rows`](Self::from_rows) but also requires every entry in `(eps, 1 - eps)`.
    pub fn from_rows_interior(rows: Vec<Vec<f64>>, eps: f64) -> Result<Self> {
        let report = validate_stochastic(&rows, Tolerance::default(), Some(eps));
        if !report.passed {
            return invalid(format!("not an interior stochastic matrix: {}", report.summary()));
        }
        let size = rows.len();
        Ok(StochasticMatrix { size, data: rows.into_iter().flatten().collect() })
    }

    pub(crate) fn from_flat_unchecked(size: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), size * size);
        StochasticMatrix { size, data }
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size > 0);
        StochasticMatrix { size, data: vec![1.0 / size as f64; size * size] }
    }

    /// Rows taken from a list of simplex points.
    pub fn from_simplex_rows(rows: Vec<SimplexPoint>) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return invalid("rows must have length equal to the row count");
        }
        Ok(StochasticMatrix { size, data: rows.into_iter().flat_map(|r| r.0).collect() })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.size)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }

    /// `Pᵀ x`: the distribution after one transition from `x`.
    pub fn transpose_apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.size);
        let mut out = vec![0.0; self.size];
        for (xi, row) in x.iter().zip(self.rows()) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += xi * p;
            }
        }
        out
    }

    pub fn validate(&self, tol: Tolerance, interior_eps: Option<f64>) -> StochasticReport {
        validate_stochastic(&self.to_rows(), tol, interior_eps)
    }

    /// Frobenius distance to another matrix of the same size.
    pub fn frobenius_distance(&self, other: &StochasticMatrix) -> f64 {
        assert_eq!(self.size, other.size);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &StochasticMatrix) -> f64 {
        assert_eq!(self.size, other.size);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<Vec<f64>>> for StochasticMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        StochasticMatrix::from_rows(rows)
    }
}

impl From<StochasticMatrix> for Vec<Vec<f64>> {
    fn from(m: StochasticMatrix) -> Self {
        m.to_rows()
    }
}

/// Diagnostic output of [`validate_stochastic`].
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticReport {
    /// `sum(row) - 1` for every row.
    pub row_sum_deviation: Vec<f64>,
    /// `(row, col)` of negative or non-finite entries.
    pub negative_entries: Vec<(usize, usize)>,
    /// `(row, col)` of entries outside `(eps, 1 - eps)` when an interior check was requested.
    pub boundary_entries: Vec<(usize, usize)>,
    /// Set when the input is not square.
    pub shape_error: Option<String>,
    pub passed: bool,
}

impl StochasticReport {
    pub fn summary(&self) -> String {
        if let Some(e) = &self.shape_error {
            return e.clone();
        }
        let worst = self
            .row_sum_deviation
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        let mut s = match worst {
            Some((i, d)) => format!("max row-sum deviation {d:+.3e} at row {i}"),
            None => "empty matrix".to_string(),
        };
        if !self.negative_entries.is_empty() {
            s.push_str(&format!(", {} negative entries", self.negative_entries.len()));
        }
        if !self.boundary_entries.is_empty() {
            s.push_str(&format!(", {} boundary entries", self.boundary_entries.len()));
        }
        s
    }
}

/// Checks that `rows` is a square row-stochastic matrix.
///
/// With `interior_eps = Some(eps)` every entry must also lie in `(eps, 1 - eps)`.
pub fn validate_stochastic(
    rows: &[Vec<f64>],
    tol: Tolerance,
    interior_eps: Option<f64>,
) -> StochasticReport {
    let n = rows.len();
    let mut report = StochasticReport {
        row_sum_deviation: Vec::with_capacity(n),
        negative_entries: Vec::new(),
        boundary_entries: Vec::new(),
        shape_error: None,
        passed: true,
    };
    if n == 0 {
        report.shape_error = Some("matrix has no rows".into());
        report.passed = false;
        return report;
    }
    if let Some(i) = rows.iter().position(|r| r.len() != n) {
        report.shape_error = Some(format!("row {i} has length {} but matrix has {n} rows", rows[i].len()));
        report.passed = false;
        return report;
    }
    for (i, row) in rows.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        report.row_sum_deviation.push(sum - 1.0);
        if !tol.accepts(sum, 1.0) {
            report.passed = false;
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                report.negative_entries.push((i, j));
                report.passed = false;
            } else if let Some(eps) = interior_eps {
                if v <= eps || v >= 1.0 - eps {
                    report.boundary_entries.push((i, j));
                    report.passed = false;
                }
            }
        }
    }
    report
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = mass}` (sort-based).
fn project_onto_scaled_simplex(v: &[f64], mass: f64) -> Vec<f64> {
    // uniform shift suffices when it clips nothing
    let shift = (v.iter().sum::<f64>() - mass) / v.len() as f64;
    if v.iter().all(|&x| x - shift >= 0.0) {
        return v.iter().map(|&x| x - shift).collect();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - mass) / (k + 1) as f64;
        if u - t > 0.0 {
            threshold = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| (x - threshold).max(0.0)).collect()
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return invalid("cannot project an empty vector");
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return invalid(format!("entry {i} is not finite ({})", v[i]));
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex.
///
/// Inputs that already lie on the simplex (sum within 1e-12) come back unchanged.
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexPoint> {
    check_finite(v)?;
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
        return Ok(SimplexPoint(v.to_vec()));
    }
    Ok(SimplexPoint(project_onto_scaled_simplex(v, 1.0)))
}

/// Euclidean projection onto `{x >= eps, sum x = 1}`.
///
/// Equivalent to shifting by `eps` and projecting onto the simplex of mass
/// `1 - S*eps`, so every output entry is at least `eps`.
pub fn project_to_interior_simplex(v: &[f64], eps: f64) -> Result<SimplexPoint> {
    check_finite(v)?;
    let s = v.len() as f64;
    if !(eps > 0.0 && eps < 1.0 / s) {
        return invalid(format!("interior eps must lie in (0, 1/{s}), got {eps}"));
    }
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= eps) && (sum - 1.0).abs() <= 1e-12 {
        return Ok(SimplexPoint(v.to_vec()));
    }
    let shifted: Vec<f64> = v.iter().map(|x| x - eps).collect();
    let projected = project_onto_scaled_simplex(&shifted, 1.0 - s * eps);
    Ok(SimplexPoint(projected.into_iter().map(|x| x + eps).collect()))
}

/// In-place [`project_to_interior_simplex`] for hot loops; `eps` is not checked.
///
/// Uses Michelot's active-set iteration instead of sorting: each pass drops
/// the entries that the current shift would push below the floor.
pub(crate) fn project_interior_in_place(v: &mut [f64], eps: f64, active: &mut Vec<f64>) {
    let n = v.len();
    let mass = 1.0 - n as f64 * eps;
    let mut shift = (v.iter().sum::<f64>() - n as f64 * eps - mass) / n as f64;
    if v.iter().all(|&x| x - eps - shift > 0.0) {
        v.iter_mut().for_each(|x| *x -= shift);
        return;
    }
    // Michelot: drop entries at or below the shift until none drops
    active.clear();
    active.extend(v.iter().map(|x| x - eps));
    let mut len = n;
    loop {
        let (mut kept, mut total) = (0, 0.0);
        // branch-free compaction; the comparison is unpredictable
        for i in 0..len {
            let w = active[i];
            let keep = w > shift;
            active[kept] = w;
            kept += keep as usize;
            total += if keep { w } else { 0.0 };
        }
        if kept == len || kept == 0 {
            break;
        }
        len = kept;
        shift = (total - mass) / len as f64;
    }
    v.iter_mut().for_each(|x| *x = (*x - eps - shift).max(0.0) + eps);
}

/// `KL(p || q) = sum_j p_j ln(p_j / q_j)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return invalid(format!("length mismatch {} vs {}", p.len(), q.len()));
    }
    let mut total = 0.0;
    for (index, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj <= 0.0 {
            continue;
        }
        if qj <= 0.0 {
            return Err(Error::DivergenceUndefined { index, p: pj });
        }
        total += pj * (pj / qj).ln();
    }
    // rounding can leave tiny negatives when p == q
    Ok(total.max(0.0))
}

/// `ln sum_j exp(v_j)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return invalid("log_sum_exp of an empty vector");
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return invalid(format!("log_sum_exp entry {i} is not finite"));
    }
    Ok(lse(values))
}

/// Unchecked log-sum-exp for internal callers with finite, nonempty input.
pub(crate) fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized `exp(values)`, max-shifted.
pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_simplex(&[0.6, 0.6]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(project_to_simplex(&[0.2, 0.3, 0.5]).unwrap().as_slice(), &[0.2, 0.3, 0.5]);
        let p = project_to_simplex(&[1.2, -0.2]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn projection_rejects_non_finite() {
        assert!(matches!(project_to_simplex(&[f64::NAN, 1.0]), Err(Error::InvalidArgument(_))));
        assert!(project_to_simplex(&[]).is_err());
        assert!(project_to_simplex(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn interior_projection_examples() {
        let p = project_to_interior_simplex(&[0.5, 0.5], 1e-9).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = project_to_interior_simplex(&[1.2, -0.2], 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.1, epsilon = 1e-12);

        let p = project_to_interior_simplex(&[2.0, 0.0, 0.0], 0.1).unwrap();
        assert!(p.as_slice().iter().all(|&x| x >= 0.0833));
        assert_abs_diff_eq!(p.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn interior_projection_rejects_bad_eps() {
        assert!(project_to_interior_simplex(&[0.5, 0.5], 0.0).is_err());
        assert!(project_to_interior_simplex(&[0.5, 0.5], 0.5).is_err());
        assert!(project_to_interior_simplex(&[0.2, 0.3, 0.5], 0.34).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap(), 0.130812, epsilon = 1e-6);
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::DivergenceUndefined { index: 1, .. })
        ));
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, -1.0]).unwrap(), 0.313262, epsilon = 1e-6);
        assert_abs_diff_eq!(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        for c in [-1e6, -3.5, 0.0, 42.0, 1e6] {
            assert_eq!(log_sum_exp(&[c]).unwrap(), c);
        }
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn validate_examples() {
        let tol = Tolerance::default();
        let r = validate_stochastic(&[vec![0.99, 0.01], vec![0.01, 0.99]], tol, Some(1e-9));
        assert!(r.passed);

        let r = validate_stochastic(&[vec![0.5, 0.6], vec![0.5, 0.5]], tol, None);
        assert!(!r.passed);
        assert_abs_diff_eq!(r.row_sum_deviation[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.row_sum_deviation[1], 0.0, epsilon = 1e-12);

        let r = validate_stochastic(&[vec![1.0, 0.0], vec![0.5, 0.5]], tol, Some(1e-9));
        assert!(!r.passed);
        assert_eq!(r.boundary_entries, vec![(0, 0), (0, 1)]);
        assert!(r.negative_entries.is_empty());
    }

    #[test]
    fn validate_reports_shape_and_negatives() {
        let tol = Tolerance::default();
        let r = validate_stochastic(&[vec![0.5, 0.5, 0.0], vec![0.5, 0.5]], tol, None);
        assert!(!r.passed && r.shape_error.is_some());
        let r = validate_stochastic(&[vec![1.5, -0.5], vec![0.5, 0.5]], tol, None);
        assert_eq!(r.negative_entries, vec![(0, 1)]);
    }

    #[test]
    fn tolerance_requires_positive() {
        assert!(Tolerance::new(0.0, 1e-9).is_err());
        assert!(Tolerance::new(1e-9, -1.0).is_err());
        assert!(Tolerance::new(1e-9, 1e-9).is_ok());
    }

    #[test]
    fn matrix_serde_uses_nested_rows() {
        let m = StochasticMatrix::from_rows(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[0.3,0.7],[0.6,0.4]]");
        let back: StochasticMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<StochasticMatrix>("[[0.3,0.8],[0.6,0.4]]").is_err());
    }

    #[test]
    fn transpose_apply_moves_mass() {
        let m = StochasticMatrix::from_rows(vec![vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap();
        assert_eq!(m.transpose_apply(&[1.0, 0.0]), vec![0.7, 0.3]);
    }

    #[test]
    fn in_place_projection_matches_sorting_projection() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut active = Vec::new();
        for _ in 0..2000 {
            let n = rng.random_range(1..12);
            let eps = 1e-3 / n as f64;
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let expected = project_to_interior_simplex(&v, eps).unwrap();
            let mut got = v.clone();
            project_interior_in_place(&mut got, eps, &mut active);
            for (a, b) in got.iter().zip(expected.as_slice()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}
