//! Two-sample training objectives and test statistics: energy and
//! kernelized energy scores, 1-D CRPS, check score, sliced objectives,
//! and the Hotelling / Fréchet / Kolmogorov-Smirnov baselines.

pub mod diff;

use crate::diffcore::{sym_eigen, sym_sqrt, lu_decompose, lu_solve, Matrix, Tape};
use crate::error::{Error, Result};
use crate::rng;

/// Which side of a two-sample comparison a batch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    Model,
    Data,
}

/// A set of m points in R^d representing an empirical distribution.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub points: Matrix,
    pub source: SourceTag,
}

impl SampleBatch {
    pub fn new(points: Matrix, source: SourceTag) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::SampleSize("sample batch must contain at least one point".into()));
        }
        points.require_finite("sample batch")?;
        Ok(SampleBatch { points, source })
    }

    pub fn model(points: Matrix) -> Result<Self> {
        Self::new(points, SourceTag::Model)
    }

    pub fn data(points: Matrix) -> Result<Self> {
        Self::new(points, SourceTag::Data)
    }

    pub fn m(&self) -> usize {
        self.points.rows()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

/// Kernel used by energy-style objectives and MMD.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// Distance kernel ‖x−y‖₂^β with β in (0,2).
    EuclideanBeta(f64),
    /// K(x,y) = exp(−γ‖x−y‖²).
    Rbf(f64),
    /// Sum of exp(−‖x−y‖²/(2σ²)) over the bandwidth list σ.
    RbfMixture(Vec<f64>),
}

/// Bandwidths used throughout for mixture-kernel MMD and the
/// kernelized energy loss.
pub const DEFAULT_BANDWIDTHS: [f64; 6] = [2.0, 5.0, 10.0, 20.0, 40.0, 80.0];

impl KernelSpec {
    pub fn default_mixture() -> Self {
        KernelSpec::RbfMixture(DEFAULT_BANDWIDTHS.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::EuclideanBeta(beta) => {
                if !(*beta > 0.0 && *beta < 2.0) {
                    return Err(Error::Domain(format!("energy exponent must lie in (0,2), got {beta}")));
                }
            }
            KernelSpec::Rbf(gamma) => {
                if *gamma <= 0.0 {
                    return Err(Error::Domain(format!("rbf gamma must be positive, got {gamma}")));
                }
            }
            KernelSpec::RbfMixture(bw) => {
                if bw.is_empty() {
                    return Err(Error::Domain("rbf mixture needs at least one bandwidth".into()));
                }
                if bw.iter().any(|b| *b <= 0.0) {
                    return Err(Error::Domain("rbf mixture bandwidths must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Similarity-kernel value on a squared distance; distance kernels
    /// are rejected (they belong to `energy_score`).
    pub fn similarity(&self, sq_dist: f64) -> Result<f64> {
        match self {
            KernelSpec::EuclideanBeta(_) => Err(Error::Contract(
                "euclidean_beta is a distance kernel; use energy_score".into(),
            )),
            KernelSpec::Rbf(gamma) => Ok((-gamma * sq_dist).exp()),
            KernelSpec::RbfMixture(bw) => {
                Ok(bw.iter().map(|b| (-sq_dist / (2.0 * b * b)).exp()).sum())
            }
        }
    }
}

/// Monte-Carlo slicing configuration; projections are standard normal,
/// normalized to unit length before projecting.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceConfig {
    pub n_projections: usize,
    pub seed: u64,
}

impl SliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_projections == 0 {
            return Err(Error::Domain("slice needs at least one projection".into()));
        }
        Ok(())
    }

    /// Unit projection directions as d×n columns.
    pub fn directions(&self, d: usize) -> Matrix {
        let mut rng = crate::rng::SeedStream::new(self.seed).derive("slice");
        projection_directions(&mut rng, d, self.n_projections)
    }
}

/// Draw n unit-norm standard-normal directions as d×n columns.
pub fn projection_directions(rng: &mut rand_chacha::ChaCha8Rng, d: usize, n: usize) -> Matrix {
    let raw = rng::normal_matrix(rng, n, d);
    let mut out = Matrix::zeros(d, n);
    for k in 0..n {
        let row = raw.row(k);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            out.set(0, k, 1.0);
        } else {
            for j in 0..d {
                out.set(j, k, row[j] / norm);
            }
        }
    }
    out
}

/// 1-D base objective of a sliced loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlicedBase {
    Energy { beta: f64 },
    Ks,
    Hotelling1d,
    Frechet1d,
}

/// How the intra-model expectation is estimated: U-statistic over
/// distinct pairs, or matched pairs of two independent sample copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    UStatistic,
    Paired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Energy,
    KernelizedEnergy,
    SlicedEnergy,
    SlicedKs,
    SlicedHotelling,
    SlicedFrechet,
    Hotelling,
    Frechet,
    Quantile,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Energy => "energy",
            Objective::KernelizedEnergy => "kernelized_energy",
            Objective::SlicedEnergy => "sliced_energy",
            Objective::SlicedKs => "sliced_ks",
            Objective::SlicedHotelling => "sliced_hotelling",
            Objective::SlicedFrechet => "sliced_frechet",
            Objective::Hotelling => "hotelling",
            Objective::Frechet => "frechet",
            Objective::Quantile => "quantile",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "energy" => Objective::Energy,
            "kernelized_energy" => Objective::KernelizedEnergy,
            "sliced_energy" => Objective::SlicedEnergy,
            "sliced_ks" => Objective::SlicedKs,
            "sliced_hotelling" => Objective::SlicedHotelling,
            "sliced_frechet" => Objective::SlicedFrechet,
            "hotelling" => Objective::Hotelling,
            "frechet" => Objective::Frechet,
            "quantile" => Objective::Quantile,
            other => return Err(Error::Config(format!("unknown objective '{other}'"))),
        })
    }

    pub fn is_sliced(self) -> bool {
        matches!(
            self,
            Objective::SlicedEnergy | Objective::SlicedKs | Objective::SlicedHotelling | Objective::SlicedFrechet
        )
    }
}

/// Full objective selection for a training run.
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub objective: Objective,
    pub kernel: KernelSpec,
    pub slice: Option<SliceConfig>,
    pub pairing: Pairing,
}

impl LossSpec {
    pub fn energy(beta: f64) -> Self {
        LossSpec {
            objective: Objective::Energy,
            kernel: KernelSpec::EuclideanBeta(beta),
            slice: None,
            pairing: Pairing::UStatistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.objective.is_sliced() {
            match &self.slice {
                Some(s) => s.validate()?,
                None => {
                    return Err(Error::Config(format!(
                        "objective {} requires a slice configuration",
                        self.objective.name()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        match self.kernel {
            KernelSpec::EuclideanBeta(b) => b,
            _ => 1.0,
        }
    }
}

fn row_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ── Energy and kernelized energy scores ─────────────────────────────

/// Energy score of a model sample set against one datum, in the
/// minimization form −½·Ê‖Y−Y′‖^β + Ê‖Y−y′‖^β with a U-statistic
/// intra-model term.
pub fn energy_score(model: &SampleBatch, datum: &[f64], beta: f64) -> Result<f64> {
    let tape = Tape::new();
    let points = tape.constant(&model.points)?;
    diff::energy_score_t(&tape, points, datum, beta)?.scalar()
}

/// Energy score in the matched-pair form over two independent sample
/// copies: intra term (1/m)Σ‖yᵢ−y′ᵢ‖^β, fit term averaged over both
/// copies.
pub fn energy_score_paired(copy_a: &Matrix, copy_b: &Matrix, datum: &[f64], beta: f64) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(copy_a)?;
    let b = tape.constant(copy_b)?;
    diff::energy_score_paired_t(&tape, a, b, datum, beta)?.scalar()
}

/// Kernelized energy loss +½·ÊK(Y,Y′) − ÊK(Y,y′); minimizing it
/// minimizes squared MMD against the data distribution.
pub fn kernelized_energy_loss(model: &SampleBatch, datum: &[f64], kernel: &KernelSpec) -> Result<f64> {
    let tape = Tape::new();
    let points = tape.constant(&model.points)?;
    diff::kernelized_energy_t(&tape, points, datum, kernel)?.scalar()
}

/// Sample CRPS in the biased V-statistic form
/// (1/m)Σ|xᵢ−y| − (1/(2m²))ΣΣ|xᵢ−xⱼ|.
pub fn crps_1d(samples: &[f64], datum: f64) -> Result<f64> {
    let m = samples.len();
    if m == 0 {
        return Err(Error::SampleSize("crps_1d needs at least one sample".into()));
    }
    let fit: f64 = samples.iter().map(|x| (x - datum).abs()).sum::<f64>() / m as f64;
    let mut intra = 0.0;
    for xi in samples {
        for xj in samples {
            intra += (xi - xj).abs();
        }
    }
    Ok(fit - intra / (2.0 * (m * m) as f64))
}

/// Check score ρ_τ: τ·(y−q) when y ≥ q, else (1−τ)·(q−y).
pub fn check_score(predicted_quantile: f64, tau: f64, y: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("quantile level must lie in [0,1], got {tau}")));
    }
    Ok(if y >= predicted_quantile {
        tau * (y - predicted_quantile)
    } else {
        (1.0 - tau) * (predicted_quantile - y)
    })
}

// ── Two-sample statistics ────────────────────────────────────────────

fn column_mean(points: &Matrix) -> Vec<f64> {
    let (m, d) = (points.rows(), points.cols());
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for (j, v) in mean.iter_mut().enumerate() {
            *v += points.get(i, j);
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    mean
}

/// Sample covariance with 1/(m−1) normalization.
pub(crate) fn covariance(points: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (m, d) = (points.rows(), points.cols());
    if m < 2 {
        return Err(Error::SampleSize("covariance needs at least two samples".into()));
    }
    let mean = column_mean(points);
    let mut s = Matrix::zeros(d, d);
    for i in 0..m {
        for j in 0..d {
            let cj = points.get(i, j) - mean[j];
            for k in j..d {
                let ck = points.get(i, k) - mean[k];
                let v = s.get(j, k) + cj * ck;
                s.set(j, k, v);
            }
        }
    }
    let denom = (m - 1) as f64;
    for j in 0..d {
        for k in j..d {
            let v = s.get(j, k) / denom;
            s.set(j, k, v);
            s.set(k, j, v);
        }
    }
    Ok((mean, s))
}

/// Hotelling two-sample statistic (m_F−m_G)ᵀ S⁻¹ (m_F−m_G) with the
/// pooled covariance S = (S_F+S_G)/2, solved via LU.
pub fn hotelling_statistic(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("hotelling on d={} vs d={}", a.dim(), b.dim())));
    }
    let (mean_a, cov_a) = covariance(&a.points)?;
    let (mean_b, cov_b) = covariance(&b.points)?;
    let pooled = cov_a.add(&cov_b)?.scale(0.5);
    let delta: Vec<f64> = mean_a.iter().zip(&mean_b).map(|(x, y)| x - y).collect();
    let factors = lu_decompose(&pooled)
        .map_err(|_| Error::Singular("singular pooled covariance".into()))?;
    let rhs = Matrix::from_vec(delta.len(), 1, delta.clone())?;
    let solved = lu_solve(&factors, &rhs)?;
    Ok(delta.iter().zip(solved.data()).map(|(d, s)| d * s).sum())
}

/// Fréchet two-sample statistic
/// ‖m_F−m_G‖² + tr(S_F + S_G − 2(S_F·S_G)^{1/2}).
pub fn frechet_statistic(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("frechet on d={} vs d={}", a.dim(), b.dim())));
    }
    let (mean_a, cov_a) = covariance(&a.points)?;
    let (mean_b, cov_b) = covariance(&b.points)?;
    let mean_term: f64 = mean_a.iter().zip(&mean_b).map(|(x, y)| (x - y) * (x - y)).sum();

    // tr((S_F S_G)^{1/2}) via the symmetrized product S_G^{1/2} S_F S_G^{1/2}.
    let g_half = sym_sqrt(&cov_b, 1e-8)?;
    let product = g_half.matmul(&cov_a)?.matmul(&g_half)?;
    let sym = product.add(&product.transpose())?.scale(0.5);
    let (vals, _) = sym_eigen(&sym)?;
    let mut tr_sqrt = 0.0;
    for &lam in &vals {
        if lam < -1e-8 {
            return Err(Error::Numeric(format!("frechet cross term eigenvalue {lam:.3e} below tolerance")));
        }
        tr_sqrt += lam.max(0.0).sqrt();
    }
    let trace = |m: &Matrix| (0..m.rows()).map(|i| m.get(i, i)).sum::<f64>();
    Ok(mean_term + trace(&cov_a) + trace(&cov_b) - 2.0 * tr_sqrt)
}

/// Kolmogorov-Smirnov statistic sup |F̂ − Ĝ| over empirical CDFs,
/// computed by one merged sorted sweep. Always in [0, 1].
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::SampleSize("ks_statistic needs nonempty samples".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < n || j < m {
        let v = match (xs.get(i), ys.get(j)) {
            (Some(x), Some(y)) => x.min(*y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => break,
        };
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        sup = sup.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    Ok(sup)
}

fn mean_and_var(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(Error::SampleSize("variance needs at least two samples".into()));
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64;
    Ok((m, v))
}

/// Univariate Hotelling objective (m_F − m_G)² / s² with
/// s² = (s_F² + s_G²)/2.
pub fn hotelling_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, va) = mean_and_var(a)?;
    let (mb, vb) = mean_and_var(b)?;
    let s2 = 0.5 * (va + vb);
    if s2 <= 1e-12 {
        return Err(Error::Domain("degenerate variance in hotelling_1d".into()));
    }
    Ok((ma - mb) * (ma - mb) / s2)
}

/// Univariate Fréchet objective (m_F − m_G)² + (s_F² − s_G²)².
pub fn frechet_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, va) = mean_and_var(a)?;
    let (mb, vb) = mean_and_var(b)?;
    Ok((ma - mb) * (ma - mb) + (va - vb) * (va - vb))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmdEstimator {
    Unbiased,
    Biased,
}

/// Squared maximum mean discrepancy between two batches. The unbiased
/// estimator excludes diagonal terms and may be negative.
pub fn mmd_squared(
    a: &SampleBatch,
    b: &SampleBatch,
    kernel: &KernelSpec,
    estimator: MmdEstimator,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("mmd on d={} vs d={}", a.dim(), b.dim())));
    }
    kernel.validate()?;
    let (m, n) = (a.m(), b.m());
    if estimator == MmdEstimator::Unbiased && (m < 2 || n < 2) {
        return Err(Error::SampleSize("unbiased mmd needs at least two samples per batch".into()));
    }
    let mut kaa = 0.0;
    let mut kaa_diagless = 0.0;
    for i in 0..m {
        for j in 0..m {
            let k = kernel.similarity(row_sq_dist(a.points.row(i), a.points.row(j)))?;
            kaa += k;
            if i != j {
                kaa_diagless += k;
            }
        }
    }
    let mut kbb = 0.0;
    let mut kbb_diagless = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = kernel.similarity(row_sq_dist(b.points.row(i), b.points.row(j)))?;
            kbb += k;
            if i != j {
                kbb_diagless += k;
            }
        }
    }
    let mut kab = 0.0;
    for i in 0..m {
        for j in 0..n {
            kab += kernel.similarity(row_sq_dist(a.points.row(i), b.points.row(j)))?;
        }
    }
    let cross = 2.0 * kab / (m * n) as f64;
    Ok(match estimator {
        MmdEstimator::Unbiased => {
            kaa_diagless / (m * (m - 1)) as f64 + kbb_diagless / (n * (n - 1)) as f64 - cross
        }
        MmdEstimator::Biased => kaa / (m * m) as f64 + kbb / (n * n) as f64 - cross,
    })
}

/// Monte-Carlo sliced two-sample loss: project both batches onto unit
/// normal directions and average the 1-D base objective.
pub fn sliced_loss(
    base: SlicedBase,
    model: &SampleBatch,
    data: &SampleBatch,
    slice: &SliceConfig,
) -> Result<f64> {
    if model.dim() != data.dim() {
        return Err(Error::Dimension(format!(
            "sliced loss on d={} vs d={}",
            model.dim(),
            data.dim()
        )));
    }
    slice.validate()?;
    let dirs = slice.directions(model.dim());
    let project = |points: &Matrix, k: usize| -> Vec<f64> {
        (0..points.rows())
            .map(|i| {
                points
                    .row(i)
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * dirs.get(j, k))
                    .sum()
            })
            .collect()
    };
    let mut total = 0.0;
    for k in 0..slice.n_projections {
        let mp = project(&model.points, k);
        let dp = project(&data.points, k);
        total += match base {
            SlicedBase::Energy { beta } => {
                let mp_mat = Matrix::from_vec(mp.len(), 1, mp.clone())?;
                let batch = SampleBatch::model(mp_mat)?;
                let mut acc = 0.0;
                for y in &dp {
                    acc += energy_score(&batch, &[*y], beta)?;
                }
                acc / dp.len() as f64
            }
            SlicedBase::Ks => ks_statistic(&mp, &dp)?,
            SlicedBase::Hotelling1d => hotelling_1d(&mp, &dp)?,
            SlicedBase::Frechet1d => frechet_1d(&mp, &dp)?,
        };
    }
    Ok(total / slice.n_projections as f64)
}

#[cfg(test)]
mod tests;
