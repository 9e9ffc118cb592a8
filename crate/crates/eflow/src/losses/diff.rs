//! Differentiable (tape-recorded) forms of the training objectives.
//! The value-domain functions in the parent module are thin wrappers
//! over these builders, so hand-value tests exercise the same formulas
//! the optimizer differentiates.

use crate::diffcore::{sym_sqrt, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{covariance, ks_statistic, KernelSpec, SlicedBase};

/// Ordered index lists for the i<j pairs of a batch of m samples.
pub fn pair_indices(m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::with_capacity(m * (m - 1) / 2);
    let mut right = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            left.push(i);
            right.push(j);
        }
    }
    (left, right)
}

fn validate_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 2.0) {
        return Err(Error::Domain(format!("energy exponent must lie in (0,2), got {beta}")));
    }
    Ok(())
}

fn pow_beta<'t>(norms: Var<'t>, beta: f64) -> Var<'t> {
    if beta == 1.0 {
        norms
    } else {
        norms.powf(beta)
    }
}

fn datum_tile(datum: &[f64], rows: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * datum.len());
    for _ in 0..rows {
        data.extend_from_slice(datum);
    }
    Matrix::from_vec(rows, datum.len(), data)
}

/// U-statistic energy score of a model batch against one datum.
pub fn energy_score_t<'t>(
    tape: &'t Tape,
    model: Var<'t>,
    datum: &[f64],
    beta: f64,
) -> Result<Var<'t>> {
    validate_beta(beta)?;
    let m = model.rows();
    if m < 2 {
        return Err(Error::SampleSize(format!(
            "u-statistic energy score needs m >= 2 model samples, got {m}"
        )));
    }
    if datum.len() != model.cols() {
        return Err(Error::Dimension(format!(
            "datum of dimension {} against model dimension {}",
            datum.len(),
            model.cols()
        )));
    }
    let (li, ri) = pair_indices(m);
    let diffs = model.gather_rows(&li)?.sub(model.gather_rows(&ri)?)?;
    let intra = pow_beta(diffs.l2_norm_rows()?, beta).mean()?;
    let dev = model.sub(tape.constant(&datum_tile(datum, m)?)?)?;
    let fit = pow_beta(dev.l2_norm_rows()?, beta).mean()?;
    intra.scale(-0.5).add(fit)
}

/// Matched-pair energy score from two independent sample copies, the
/// literal two-copy estimator of the blockwise training loop.
pub fn energy_score_paired_t<'t>(
    tape: &'t Tape,
    copy_a: Var<'t>,
    copy_b: Var<'t>,
    datum: &[f64],
    beta: f64,
) -> Result<Var<'t>> {
    validate_beta(beta)?;
    if copy_a.rows() != copy_b.rows() || copy_a.cols() != copy_b.cols() {
        return Err(Error::Dimension(format!(
            "paired copies {}x{} vs {}x{}",
            copy_a.rows(),
            copy_a.cols(),
            copy_b.rows(),
            copy_b.cols()
        )));
    }
    let tile = tape.constant(&datum_tile(datum, copy_a.rows())?)?;
    let intra = pow_beta(copy_a.sub(copy_b)?.l2_norm_rows()?, beta).mean()?;
    let fit_a = pow_beta(copy_a.sub(tile)?.l2_norm_rows()?, beta).mean()?;
    let fit_b = pow_beta(copy_b.sub(tile)?.l2_norm_rows()?, beta).mean()?;
    intra.scale(-0.5).add(fit_a.add(fit_b)?.scale(0.5))
}

/// Apply a similarity kernel to a column of squared distances.
fn kernel_of_sq<'t>(sq: Var<'t>, kernel: &KernelSpec) -> Result<Var<'t>> {
    kernel.validate()?;
    match kernel {
        KernelSpec::EuclideanBeta(_) => Err(Error::Contract(
            "euclidean_beta is a distance kernel; use energy_score".into(),
        )),
        KernelSpec::Rbf(gamma) => Ok(sq.scale(-gamma).exp()),
        KernelSpec::RbfMixture(bandwidths) => {
            let mut acc: Option<Var> = None;
            for b in bandwidths {
                let term = sq.scale(-1.0 / (2.0 * b * b)).exp();
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            Ok(acc.expect("nonempty bandwidth list"))
        }
    }
}

/// Kernelized energy loss +½·ÊK(Y,Y′) − ÊK(Y,y′) with a U-statistic
/// intra-model term.
pub fn kernelized_energy_t<'t>(
    tape: &'t Tape,
    model: Var<'t>,
    datum: &[f64],
    kernel: &KernelSpec,
) -> Result<Var<'t>> {
    let m = model.rows();
    if m < 2 {
        return Err(Error::SampleSize(format!(
            "kernelized energy loss needs m >= 2 model samples, got {m}"
        )));
    }
    if datum.len() != model.cols() {
        return Err(Error::Dimension(format!(
            "datum of dimension {} against model dimension {}",
            datum.len(),
            model.cols()
        )));
    }
    let (li, ri) = pair_indices(m);
    let pair_sq = model
        .gather_rows(&li)?
        .sub(model.gather_rows(&ri)?)?
        .square()
        .row_sum()?;
    let intra = kernel_of_sq(pair_sq, kernel)?.mean()?;
    let dev_sq = model
        .sub(tape.constant(&datum_tile(datum, m)?)?)?
        .square()
        .row_sum()?;
    let fit = kernel_of_sq(dev_sq, kernel)?.mean()?;
    intra.scale(0.5).sub(fit)
}

/// Matched-pair kernelized energy loss.
pub fn kernelized_energy_paired_t<'t>(
    tape: &'t Tape,
    copy_a: Var<'t>,
    copy_b: Var<'t>,
    datum: &[f64],
    kernel: &KernelSpec,
) -> Result<Var<'t>> {
    if copy_a.rows() != copy_b.rows() || copy_a.cols() != copy_b.cols() {
        return Err(Error::Dimension("paired copies of different shapes".into()));
    }
    let tile = tape.constant(&datum_tile(datum, copy_a.rows())?)?;
    let intra = kernel_of_sq(copy_a.sub(copy_b)?.square().row_sum()?, kernel)?.mean()?;
    let fit_a = kernel_of_sq(copy_a.sub(tile)?.square().row_sum()?, kernel)?.mean()?;
    let fit_b = kernel_of_sq(copy_b.sub(tile)?.square().row_sum()?, kernel)?.mean()?;
    intra.scale(0.5).sub(fit_a.add(fit_b)?.scale(0.5))
}

/// Check score of a column of predicted quantiles against a column of
/// outcomes: ρ = max(τ·(y−q), (τ−1)·(y−q)) elementwise, averaged.
pub fn check_score_t<'t>(
    tape: &'t Tape,
    predicted: Var<'t>,
    tau: f64,
    outcomes: &Matrix,
) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("quantile level must lie in [0,1], got {tau}")));
    }
    let y = tape.constant(outcomes)?;
    let diff = y.sub(predicted)?;
    diff.scale(tau).max(diff.scale(tau - 1.0))?.mean()
}

/// Sliced energy score of one model sample group against one datum,
/// vectorized over all projection directions (d×P unit columns).
pub fn sliced_energy_group_t<'t>(
    tape: &'t Tape,
    group: Var<'t>,
    datum: &[f64],
    directions: &Matrix,
    beta: f64,
) -> Result<Var<'t>> {
    validate_beta(beta)?;
    let m = group.rows();
    if m < 2 {
        return Err(Error::SampleSize(format!(
            "sliced energy score needs m >= 2 model samples, got {m}"
        )));
    }
    if directions.rows() != group.cols() || datum.len() != group.cols() {
        return Err(Error::Dimension(format!(
            "projections {}x{} against model dimension {}",
            directions.rows(),
            directions.cols(),
            group.cols()
        )));
    }
    let proj = group.matmul(tape.constant(directions)?)?;
    let n_proj = directions.cols();
    let mut y_proj = vec![0.0; n_proj];
    for (k, y) in y_proj.iter_mut().enumerate() {
        *y = datum.iter().enumerate().map(|(j, v)| v * directions.get(j, k)).sum();
    }
    let neg_y = Matrix::from_vec(1, n_proj, y_proj.iter().map(|v| -v).collect())?;

    let (li, ri) = pair_indices(m);
    let pair_abs = pow_beta(proj.gather_rows(&li)?.sub(proj.gather_rows(&ri)?)?.abs(), beta);
    let intra_row = pair_abs.col_mean()?;
    let fit_row = pow_beta(proj.add_bias(tape.constant(&neg_y)?)?.abs(), beta).col_mean()?;
    intra_row.scale(-0.5).add(fit_row)?.mean()
}

/// Differentiable multivariate Hotelling statistic of a model batch
/// against a fixed data batch.
pub fn hotelling_t<'t>(tape: &'t Tape, model: Var<'t>, data: &Matrix) -> Result<Var<'t>> {
    if data.cols() != model.cols() {
        return Err(Error::Dimension(format!(
            "hotelling on d={} vs d={}",
            model.cols(),
            data.cols()
        )));
    }
    let m = model.rows();
    if m < 2 {
        return Err(Error::SampleSize("hotelling needs m >= 2 model samples".into()));
    }
    let (mean_g, cov_g) = covariance(data)?;
    let mean_f = model.col_mean()?;
    let centered = model.add_bias(mean_f.scale(-1.0))?;
    let cov_f = centered
        .transpose()
        .matmul(centered)?
        .scale(1.0 / (m - 1) as f64);
    let pooled = cov_f.add(tape.constant(&cov_g)?)?.scale(0.5);
    let delta = mean_f.sub(tape.constant(&Matrix::row_vector(&mean_g))?)?;
    let solved = delta
        .solve_right(pooled)
        .map_err(|e| match e {
            Error::Singular(_) => Error::Singular("singular pooled covariance".into()),
            other => other,
        })?;
    solved.mul(delta)?.row_sum()
}

/// Differentiable multivariate Fréchet statistic against a fixed data
/// batch; only the model-side covariance carries gradients.
pub fn frechet_t<'t>(tape: &'t Tape, model: Var<'t>, data: &Matrix) -> Result<Var<'t>> {
    if data.cols() != model.cols() {
        return Err(Error::Dimension(format!(
            "frechet on d={} vs d={}",
            model.cols(),
            data.cols()
        )));
    }
    let m = model.rows();
    if m < 2 {
        return Err(Error::SampleSize("frechet needs m >= 2 model samples".into()));
    }
    let d = model.cols();
    let (mean_g, cov_g) = covariance(data)?;
    let g_half = sym_sqrt(&cov_g, 1e-8)?;
    let mean_f = model.col_mean()?;
    let centered = model.add_bias(mean_f.scale(-1.0))?;
    let cov_f = centered
        .transpose()
        .matmul(centered)?
        .scale(1.0 / (m - 1) as f64);

    let delta = mean_f.sub(tape.constant(&Matrix::row_vector(&mean_g))?)?;
    let mean_term = delta.square().row_sum()?;
    let tr_f = cov_f.mul(tape.constant(&Matrix::identity(d))?)?.sum()?;
    let tr_g: f64 = (0..d).map(|i| cov_g.get(i, i)).sum();
    let cross = cov_f.trace_sqrt_product(&g_half)?;
    mean_term
        .add(tr_f)?
        .add_const(tr_g)
        .sub(cross.scale(2.0))
}

/// Differentiable sliced two-sample statistic (KS contributes no
/// gradient: the statistic is piecewise constant in the samples).
pub fn sliced_statistic_t<'t>(
    tape: &'t Tape,
    model: Var<'t>,
    data: &Matrix,
    directions: &Matrix,
    base: SlicedBase,
) -> Result<Var<'t>> {
    if data.cols() != model.cols() || directions.rows() != model.cols() {
        return Err(Error::Dimension("sliced statistic dimension mismatch".into()));
    }
    let m = model.rows();
    if m < 2 {
        return Err(Error::SampleSize("sliced statistic needs m >= 2 model samples".into()));
    }
    let proj = model.matmul(tape.constant(directions)?)?;
    let n_proj = directions.cols();
    let mut acc: Option<Var> = None;
    for k in 0..n_proj {
        let col = proj.slice_cols(k, 1)?;
        let dp: Vec<f64> = (0..data.rows())
            .map(|i| {
                data.row(i)
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * directions.get(j, k))
                    .sum()
            })
            .collect();
        let term = match base {
            SlicedBase::Energy { .. } => {
                return Err(Error::Contract(
                    "sliced energy uses the per-datum group builder".into(),
                ))
            }
            SlicedBase::Ks => {
                let stat = ks_statistic(col.value().data(), &dp)?;
                tape.scalar_constant(stat)?
            }
            SlicedBase::Hotelling1d => {
                let (mg, vg) = data_mean_var(&dp)?;
                let mean_f = col.mean()?;
                let var_f = col
                    .add_scalar(mean_f.scale(-1.0))?
                    .square()
                    .sum()?
                    .scale(1.0 / (m - 1) as f64);
                let s2 = var_f.add_const(vg).scale(0.5);
                if s2.scalar()? <= 1e-12 {
                    return Err(Error::Domain("degenerate variance in sliced hotelling".into()));
                }
                mean_f.add_const(-mg).square().mul(s2.recip()?)?
            }
            SlicedBase::Frechet1d => {
                let (mg, vg) = data_mean_var(&dp)?;
                let mean_f = col.mean()?;
                let var_f = col
                    .add_scalar(mean_f.scale(-1.0))?
                    .square()
                    .sum()?
                    .scale(1.0 / (m - 1) as f64);
                mean_f.add_const(-mg).square().add(var_f.add_const(-vg).square())?
            }
        };
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one projection").scale(1.0 / n_proj as f64))
}

fn data_mean_var(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(Error::SampleSize("data side needs at least two samples".into()));
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64;
    Ok((m, v))
}
