use super::*;
use crate::diffcore::grad_check;
use crate::rng::SeedStream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn batch_1d(values: &[f64]) -> SampleBatch {
    SampleBatch::model(Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()).unwrap()
}

// ── Hand values ──────────────────────────────────────────────────────

#[test]
fn energy_score_hand_values() {
    let model = batch_1d(&[0.0, 2.0]);
    // intra = 2, fit at y'=1 is 1: −1 + 1 = 0.
    assert!((energy_score(&model, &[1.0], 1.0).unwrap() - 0.0).abs() < 1e-12);
    // fit at y'=3 is (3+1)/2 = 2: −1 + 2 = 1.
    assert!((energy_score(&model, &[3.0], 1.0).unwrap() - 1.0).abs() < 1e-12);
    // Point mass at the datum scores zero.
    let point = batch_1d(&[0.7, 0.7]);
    assert_eq!(energy_score(&point, &[0.7], 1.0).unwrap(), 0.0);
}

#[test]
fn energy_score_rejects_bad_inputs() {
    let model = batch_1d(&[0.0]);
    assert!(matches!(
        energy_score(&model, &[1.0], 1.0),
        Err(Error::SampleSize(_))
    ));
    let model = batch_1d(&[0.0, 2.0]);
    assert!(matches!(energy_score(&model, &[1.0], 2.5), Err(Error::Domain(_))));
    assert!(matches!(energy_score(&model, &[1.0], 0.0), Err(Error::Domain(_))));
}

#[test]
fn energy_score_singleton_point_mass_is_fit_term_only() {
    // One sample duplicated across the two paired copies: the intra
    // term vanishes and the score reduces to ‖y − y′‖^β.
    let copy = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
    let got = energy_score_paired(&copy, &copy, &[4.0, 6.0], 1.0).unwrap();
    assert!((got - 5.0).abs() < 1e-12);
}

#[test]
fn kernelized_energy_hand_values() {
    let a = 0.3;
    let model = batch_1d(&[a, a]);
    let single = KernelSpec::Rbf(1.0);
    // K(a,a) = 1 everywhere: ½·1 − 1 = −0.5.
    assert!((kernelized_energy_loss(&model, &[a], &single).unwrap() + 0.5).abs() < 1e-12);
    // Datum at infinite distance: fit term → 0, leaving +0.5.
    assert!((kernelized_energy_loss(&model, &[1e9], &single).unwrap() - 0.5).abs() < 1e-12);
    // Six unit kernels in the default mixture: ½·6 − 6 = −3.
    let mix = KernelSpec::default_mixture();
    assert!((kernelized_energy_loss(&model, &[a], &mix).unwrap() + 3.0).abs() < 1e-12);
}

#[test]
fn kernelized_energy_rejects_distance_kernel() {
    let model = batch_1d(&[0.0, 1.0]);
    assert!(matches!(
        kernelized_energy_loss(&model, &[0.5], &KernelSpec::EuclideanBeta(1.0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn crps_1d_hand_values() {
    assert!((crps_1d(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(crps_1d(&[0.4, 0.4], 0.4).unwrap(), 0.0);
    assert!((crps_1d(&[0.0], 1.0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn check_score_hand_values() {
    assert!((check_score(0.0, 0.5, 2.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((check_score(0.0, 0.5, -2.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((check_score(0.0, 0.9, 1.0).unwrap() - 0.9).abs() < 1e-12);
    assert!(matches!(check_score(0.0, 1.5, 1.0), Err(Error::Domain(_))));
}

#[test]
fn hotelling_hand_values() {
    let a = batch_1d(&[0.0, 2.0]);
    let b = batch_1d(&[1.0, 3.0]);
    assert!((hotelling_statistic(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    assert!(hotelling_statistic(&a, &a).unwrap().abs() < 1e-12);
    let za = batch_1d(&[0.0, 0.0]);
    let zb = batch_1d(&[2.0, 2.0]);
    assert!(matches!(hotelling_statistic(&za, &zb), Err(Error::Singular(_))));
}

#[test]
fn frechet_hand_values() {
    let a = batch_1d(&[0.0, 2.0]);
    let b = batch_1d(&[1.0, 3.0]);
    assert!((frechet_statistic(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    assert!(frechet_statistic(&a, &a).unwrap().abs() < 1e-12);
    // Equal means, variances 1 vs 4: tr(1 + 4 − 2·2) = 1.
    let s = 1.0 / 2.0f64.sqrt();
    let va = batch_1d(&[-s, s]);
    let vb = batch_1d(&[-(2.0f64.sqrt()), 2.0f64.sqrt()]);
    assert!((frechet_statistic(&va, &vb).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ks_hand_values() {
    assert_eq!(ks_statistic(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
    assert_eq!(ks_statistic(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert!((ks_statistic(&[0.0, 2.0], &[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn hotelling_1d_hand_values() {
    assert!((hotelling_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(hotelling_1d(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
    assert!(matches!(
        hotelling_1d(&[0.0, 0.0], &[1.0, 1.0]),
        Err(Error::Domain(_))
    ));
}

#[test]
fn frechet_1d_hand_values() {
    assert!((frechet_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(frechet_1d(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
    let s = 1.0 / 2.0f64.sqrt();
    assert!((frechet_1d(&[-s, s], &[-1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn mmd_hand_values() {
    let a = batch_1d(&[0.0, 1.0]);
    let kernel = KernelSpec::Rbf(1.0);
    let got = mmd_squared(&a, &a, &kernel, MmdEstimator::Unbiased).unwrap();
    let expect = (-1.0f64).exp() - 1.0;
    assert!((got - expect).abs() < 1e-12, "unbiased self-mmd {got}");
    assert!(got < 0.0, "unbiased estimate may legally be negative");
    assert!(mmd_squared(&a, &a, &kernel, MmdEstimator::Biased).unwrap().abs() < 1e-12);
    let single = batch_1d(&[0.0]);
    assert!(matches!(
        mmd_squared(&single, &a, &kernel, MmdEstimator::Unbiased),
        Err(Error::SampleSize(_))
    ));
}

// ── Sliced losses ────────────────────────────────────────────────────

#[test]
fn sliced_reduces_to_raw_objective_in_1d() {
    let model = batch_1d(&[0.1, -0.4, 0.9, 2.0]);
    let data = batch_1d(&[0.3, 1.1, -0.2]);
    let slice = SliceConfig { n_projections: 4, seed: 11 };
    let sliced = sliced_loss(SlicedBase::Energy { beta: 1.0 }, &model, &data, &slice).unwrap();
    let mut direct = 0.0;
    for i in 0..data.m() {
        direct += energy_score(&model, data.points.row(i), 1.0).unwrap();
    }
    direct /= data.m() as f64;
    assert!((sliced - direct).abs() < 1e-12, "sliced {sliced} direct {direct}");
}

#[test]
fn sliced_ks_identical_batches_zero() {
    let model = batch_1d(&[0.5, 1.5, -0.5]);
    let slice = SliceConfig { n_projections: 8, seed: 3 };
    assert_eq!(sliced_loss(SlicedBase::Ks, &model, &model, &slice).unwrap(), 0.0);
}

#[test]
fn sliced_is_deterministic_and_permutation_invariant() {
    let mut rng = SeedStream::new(5).derive("test");
    let pts = Matrix::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let dat = Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let model = SampleBatch::model(pts.clone()).unwrap();
    let data = SampleBatch::data(dat).unwrap();
    let slice = SliceConfig { n_projections: 16, seed: 77 };
    let a = sliced_loss(SlicedBase::Energy { beta: 1.0 }, &model, &data, &slice).unwrap();
    let b = sliced_loss(SlicedBase::Energy { beta: 1.0 }, &model, &data, &slice).unwrap();
    assert_eq!(a.to_bits(), b.to_bits(), "same seed gives identical losses");

    // Reverse the model rows.
    let rev_rows: Vec<Vec<f64>> = (0..pts.rows()).rev().map(|i| pts.row(i).to_vec()).collect();
    let model_rev = SampleBatch::model(Matrix::from_rows(&rev_rows).unwrap()).unwrap();
    let c = sliced_loss(SlicedBase::Energy { beta: 1.0 }, &model_rev, &data, &slice).unwrap();
    assert!((a - c).abs() < 1e-12, "permutation changed loss: {a} vs {c}");
}

#[test]
fn sliced_dimension_mismatch_rejected() {
    let model = batch_1d(&[0.0, 1.0]);
    let data = SampleBatch::data(Matrix::zeros(2, 2)).unwrap();
    let slice = SliceConfig { n_projections: 1, seed: 0 };
    assert!(matches!(
        sliced_loss(SlicedBase::Ks, &model, &data, &slice),
        Err(Error::Dimension(_))
    ));
}

// ── Dual-route checks: tape builders against value statistics ───────

#[test]
fn hotelling_builder_matches_statistic() {
    let mut rng = SeedStream::new(9).derive("test");
    for _ in 0..20 {
        let m = 4 + rng.gen_range(0..5);
        let d = 1 + rng.gen_range(0..3);
        let a = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tape = Tape::new();
        let av = tape.constant(&a).unwrap();
        let via_tape = diff::hotelling_t(&tape, av, &b).unwrap().scalar().unwrap();
        let via_stat = hotelling_statistic(
            &SampleBatch::model(a.clone()).unwrap(),
            &SampleBatch::data(b.clone()).unwrap(),
        )
        .unwrap();
        assert!((via_tape - via_stat).abs() < 1e-10, "{via_tape} vs {via_stat}");
    }
}

#[test]
fn frechet_builder_matches_statistic() {
    let mut rng = SeedStream::new(10).derive("test");
    for _ in 0..20 {
        let m = 5 + rng.gen_range(0..4);
        let d = 1 + rng.gen_range(0..3);
        let a = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tape = Tape::new();
        let av = tape.constant(&a).unwrap();
        let via_tape = diff::frechet_t(&tape, av, &b).unwrap().scalar().unwrap();
        let via_stat = frechet_statistic(
            &SampleBatch::model(a.clone()).unwrap(),
            &SampleBatch::data(b.clone()).unwrap(),
        )
        .unwrap();
        assert!((via_tape - via_stat).abs() < 1e-9, "{via_tape} vs {via_stat}");
    }
}

// ── Theorem-style algebra: kernelized loss vs squared MMD ───────────

#[test]
fn kernelized_loss_is_half_mmd_plus_constant() {
    let mut rng = SeedStream::new(21).derive("test");
    let kernel = KernelSpec::Rbf(0.7);
    let m = 6;
    let n = 5;
    let d = 2;
    let model_pts =
        Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let data_pts =
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let model = SampleBatch::model(model_pts.clone()).unwrap();
    let data = SampleBatch::data(data_pts.clone()).unwrap();

    let ksq = |x: &[f64], y: &[f64]| kernel.similarity(row_sq_dist(x, y)).unwrap();

    // U-statistic route: averaged loss + ½·(data self-kernel U-stat)
    // equals ½·unbiased MMD².
    let mut loss_avg = 0.0;
    for i in 0..n {
        loss_avg += kernelized_energy_loss(&model, data_pts.row(i), &kernel).unwrap();
    }
    loss_avg /= n as f64;
    let mut kdd_u = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kdd_u += ksq(data_pts.row(i), data_pts.row(j));
            }
        }
    }
    kdd_u /= (n * (n - 1)) as f64;
    let mmd_u = mmd_squared(&model, &data, &kernel, MmdEstimator::Unbiased).unwrap();
    assert!(
        (loss_avg + 0.5 * kdd_u - 0.5 * mmd_u).abs() < 1e-12,
        "u-statistic identity violated"
    );

    // Biased route: all-pairs loss + ½·(data self-kernel V-stat)
    // equals ½·biased MMD².
    let mut kff = 0.0;
    for i in 0..m {
        for j in 0..m {
            kff += ksq(model_pts.row(i), model_pts.row(j));
        }
    }
    kff /= (m * m) as f64;
    let mut kfd = 0.0;
    for i in 0..m {
        for j in 0..n {
            kfd += ksq(model_pts.row(i), data_pts.row(j));
        }
    }
    kfd /= (m * n) as f64;
    let mut kdd = 0.0;
    for i in 0..n {
        for j in 0..n {
            kdd += ksq(data_pts.row(i), data_pts.row(j));
        }
    }
    kdd /= (n * n) as f64;
    let loss_biased = 0.5 * kff - kfd;
    let mmd_b = mmd_squared(&model, &data, &kernel, MmdEstimator::Biased).unwrap();
    assert!(
        (loss_biased + 0.5 * kdd - 0.5 * mmd_b).abs() < 1e-12,
        "biased identity violated"
    );
}

// ── Gradient checks ──────────────────────────────────────────────────

#[test]
fn energy_score_gradient_matches_finite_differences() {
    let mut rng = SeedStream::new(31).derive("test");
    for _ in 0..10 {
        let m = 3 + rng.gen_range(0..4);
        let d = 1 + rng.gen_range(0..3);
        let pts = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let datum: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let err = grad_check(
            |t, vs| diff::energy_score_t(t, vs[0], &datum, 1.0),
            &[pts],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }
}

#[test]
fn kernelized_gradient_matches_finite_differences() {
    let mut rng = SeedStream::new(32).derive("test");
    let kernel = KernelSpec::default_mixture();
    for _ in 0..5 {
        let m = 4;
        let d = 2;
        let pts = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let datum: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let err = grad_check(
            |t, vs| diff::kernelized_energy_t(t, vs[0], &datum, &kernel),
            &[pts],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }
}

#[test]
fn sliced_energy_gradient_matches_finite_differences() {
    let mut rng = SeedStream::new(33).derive("test");
    let d = 3;
    let dirs = projection_directions(&mut rng, d, 7);
    let pts = Matrix::from_vec(5, d, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let datum: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let err = grad_check(
        |t, vs| diff::sliced_energy_group_t(t, vs[0], &datum, &dirs, 1.0),
        &[pts],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn hotelling_and_frechet_gradients_match_finite_differences() {
    let mut rng = SeedStream::new(34).derive("test");
    let d = 2;
    let m = 6;
    let pts = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let data = Matrix::from_vec(8, d, (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let err = grad_check(|t, vs| diff::hotelling_t(t, vs[0], &data), &[pts.clone()], 1e-5).unwrap();
    assert!(err <= 1e-5, "hotelling relative error {err}");
    let err = grad_check(|t, vs| diff::frechet_t(t, vs[0], &data), &[pts], 1e-5).unwrap();
    assert!(err <= 1e-5, "frechet relative error {err}");
}

#[test]
fn check_score_gradient_matches_finite_differences() {
    let q = Matrix::from_vec(3, 1, vec![0.2, -0.7, 1.4]).unwrap();
    let y = Matrix::from_vec(3, 1, vec![0.9, -1.5, 2.2]).unwrap();
    let err = grad_check(|t, vs| diff::check_score_t(t, vs[0], 0.7, &y), &[q], 1e-5).unwrap();
    assert!(err <= 1e-5, "relative error {err}");
}

// ── Properness at desk scale ─────────────────────────────────────────

/// Sorted-sample evaluator for the 1-D energy score, used as a fast
/// independent oracle: intra term from order statistics, fit term from
/// prefix sums.
struct SortedEnergy {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
    intra: f64,
}

impl SortedEnergy {
    fn new(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = sorted.len();
        let mut prefix = Vec::with_capacity(m);
        let mut acc = 0.0;
        for &v in &sorted {
            acc += v;
            prefix.push(acc);
        }
        let mut weighted = 0.0;
        for (k, &v) in sorted.iter().enumerate() {
            weighted += (2.0 * k as f64 - (m as f64 - 1.0)) * v;
        }
        let intra = 2.0 * weighted / (m as f64 * (m as f64 - 1.0));
        SortedEnergy { sorted, prefix, intra }
    }

    fn fit(&self, y: f64) -> f64 {
        let m = self.sorted.len();
        let idx = self.sorted.partition_point(|&v| v <= y);
        let below = if idx == 0 { 0.0 } else { self.prefix[idx - 1] };
        let above = self.prefix[m - 1] - below;
        let sum = (idx as f64 * y - below) + (above - (m - idx) as f64 * y);
        sum / m as f64
    }

    fn score_vs(&self, data: &[f64]) -> f64 {
        let fit: f64 = data.iter().map(|&y| self.fit(y)).sum::<f64>() / data.len() as f64;
        -0.5 * self.intra + fit
    }
}

#[test]
fn sorted_energy_oracle_matches_production_score() {
    let mut rng = SeedStream::new(41).derive("test");
    let samples: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let fast = SortedEnergy::new(&samples).score_vs(&data);
    let batch = batch_1d(&samples);
    let mut direct = 0.0;
    for &y in &data {
        direct += energy_score(&batch, &[y], 1.0).unwrap();
    }
    direct /= data.len() as f64;
    assert!((fast - direct).abs() < 1e-12, "{fast} vs {direct}");
}

#[test]
fn energy_score_argmin_recovers_location() {
    let stream = SeedStream::new(4242);
    let mut zrng = stream.derive("model");
    let mut drng = stream.derive("data");
    let m = 4096;
    let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut zrng)).collect();
    let mu_star = 3.0;
    let data: Vec<f64> = (0..2048)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut drng);
            mu_star + e
        })
        .collect();

    let mut best = (f64::INFINITY, f64::NAN);
    let mut theta = 2.0;
    while theta <= 4.0 + 1e-9 {
        let shifted: Vec<f64> = z.iter().map(|v| v + theta).collect();
        let score = SortedEnergy::new(&shifted).score_vs(&data);
        if score < best.0 {
            best = (score, theta);
        }
        theta += 0.025;
    }
    assert!(
        (best.1 - mu_star).abs() <= 0.05,
        "argmin {} too far from {}",
        best.1,
        mu_star
    );
}
