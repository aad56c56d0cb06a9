//! Statistical primitives for small-sample ablation effects.
//!
//! The t-distribution CDF is exact (regularized incomplete beta via
//! Lentz's continued fraction), not a normal approximation: trial
//! samples here are tiny (typically n = 3) and the normal tail is badly
//! wrong at that size. Permutation tests switch to exhaustive
//! enumeration whenever the assignment space is small enough to walk.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Assignment-count ceiling below which permutation tests enumerate the
/// full null distribution instead of sampling it.
pub const EXHAUSTIVE_LIMIT: u128 = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("sample `{0}` needs at least {1} values")]
    TooFewValues(String, usize),
    #[error("sample `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("both samples (`{0}`, `{1}`) have zero variance")]
    DegenerateSamples(String, String),
    #[error("degrees of freedom must be positive and finite, got {0}")]
    InvalidDf(f64),
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("FDR level q={0} outside (0, 1)")]
    InvalidQ(f64),
    #[error("permutation data has fewer than two label classes")]
    DegenerateLabels,
    #[error("labels and values have different lengths ({0} vs {1})")]
    MismatchedLengths(usize, usize),
    #[error("zero variance in `{0}`")]
    ZeroVariance(String),
}

/// A labelled vector of finite observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: String,
    pub values: Vec<f64>,
}

impl Sample {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, StatsError> {
        let label = label.into();
        if values.is_empty() {
            return Err(StatsError::TooFewValues(label, 1));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(label));
        }
        Ok(Self { label, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

/// Outcome of a two-sided hypothesis test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub method: String,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance (divide by n), via Welford's online update.
///
/// The cross-linguistic variance tables treat the observed languages as
/// the whole population under study, so the divisor is n, not n-1.
pub fn variance(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewValues("variance".into(), 2));
    }
    Ok(welford_m2(values) / values.len() as f64)
}

/// Unbiased sample variance (divide by n-1), as the Welch test requires.
pub fn sample_variance(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewValues("sample_variance".into(), 2));
    }
    Ok(welford_m2(values) / (values.len() - 1) as f64)
}

fn welford_m2(values: &[f64]) -> f64 {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    m2
}

/// Two-sided Welch's t-test with exact t-distribution CDF.
///
/// Degrees of freedom follow Welch-Satterthwaite. When both samples are
/// constant the statistic is undefined; the caller gets
/// [`StatsError::DegenerateSamples`] and should record the raw delta
/// without a p-value (a deterministic probe, not a measurement failure).
pub fn welch_t(a: &Sample, b: &Sample) -> Result<TestResult, StatsError> {
    if a.len() < 2 {
        return Err(StatsError::TooFewValues(a.label.clone(), 2));
    }
    if b.len() < 2 {
        return Err(StatsError::TooFewValues(b.label.clone(), 2));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sample_variance(&a.values)?;
    let vb = sample_variance(&b.values)?;
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::DegenerateSamples(
            a.label.clone(),
            b.label.clone(),
        ));
    }
    let sa = va / na;
    let sb = vb / nb;
    let se = (sa + sb).sqrt();
    let t = (a.mean() - b.mean()) / se;
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = 2.0 * (1.0 - t_cdf(t.abs(), df)?);
    Ok(TestResult {
        statistic: t,
        df,
        p_value: p.clamp(0.0, 1.0),
        method: "welch_t".into(),
    })
}

/// Exact CDF of Student's t-distribution.
///
/// Maps to the regularized incomplete beta: for x = df / (df + t²),
/// F(t) = 1 - I_x(df/2, 1/2) / 2 for t >= 0, and I_x(df/2, 1/2) / 2 for
/// t < 0. The tail route avoids cancellation, so relative accuracy
/// survives far into the tails.
pub fn t_cdf(t: f64, df: f64) -> Result<f64, StatsError> {
    if !(df.is_finite() && df > 0.0) {
        return Err(StatsError::InvalidDf(df));
    }
    if t.is_nan() {
        return Err(StatsError::InvalidDf(f64::NAN));
    }
    if t == 0.0 {
        return Ok(0.5);
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let x = df / (df + t * t);
    let ib = regularized_incomplete_beta(x, 0.5 * df, 0.5);
    Ok(if t > 0.0 { 1.0 - 0.5 * ib } else { 0.5 * ib })
}

/// ln Γ(z) by the Lanczos approximation (g = 7, 9 coefficients).
pub fn ln_gamma(z: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection: Γ(z)Γ(1-z) = π / sin(πz)
        let s = (std::f64::consts::PI * z).sin();
        return std::f64::consts::PI.ln() - s.abs().ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction,
/// with the symmetry switch that keeps the fraction convergent.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x < (a + 1.0) / (a + b + 2.0) {
        let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
        (ln_front.exp() * beta_cf(x, a, b)) / a
    } else {
        let ln_front = b * (1.0 - x).ln() + a * x.ln() - ln_beta(b, a);
        1.0 - (ln_front.exp() * beta_cf(1.0 - x, b, a)) / b
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 600;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Benjamini-Hochberg step-up adjustment at FDR level `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhAdjustment {
    /// Rejection flag per input index.
    pub rejected: Vec<bool>,
    /// Monotone BH-adjusted p-value per input index.
    pub adjusted_p: Vec<f64>,
    /// Number of rejected hypotheses (the step-up k*).
    pub k_star: usize,
}

/// Standard BH step-up: reject the k* smallest p-values where
/// k* = max{k : p_(k) <= (k/m) q}. Adjusted p-values are the monotone
/// cumulative minimum of m·p_(k)/k, capped at 1.
pub fn bh_adjust(p_values: &[f64], q: f64) -> Result<BhAdjustment, StatsError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(StatsError::InvalidQ(q));
    }
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(StatsError::InvalidPValue(p));
        }
    }
    let m = p_values.len();
    if m == 0 {
        return Ok(BhAdjustment {
            rejected: vec![],
            adjusted_p: vec![],
            k_star: 0,
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].partial_cmp(&p_values[j]).unwrap());

    let mut k_star = 0;
    for (rank0, &idx) in order.iter().enumerate() {
        let k = rank0 + 1;
        if p_values[idx] <= (k as f64 / m as f64) * q {
            k_star = k;
        }
    }

    let mut adjusted_sorted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for rank0 in (0..m).rev() {
        let k = rank0 + 1;
        let raw = (m as f64 * p_values[order[rank0]]) / k as f64;
        running_min = running_min.min(raw);
        adjusted_sorted[rank0] = running_min.min(1.0);
    }

    let mut rejected = vec![false; m];
    let mut adjusted_p = vec![0.0; m];
    for (rank0, &idx) in order.iter().enumerate() {
        rejected[idx] = rank0 < k_star;
        adjusted_p[idx] = adjusted_sorted[rank0];
    }
    Ok(BhAdjustment {
        rejected,
        adjusted_p,
        k_star,
    })
}

/// How a permutation p-value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PermutationMode {
    /// Every distinct label assignment was enumerated; p is exact.
    Exhaustive,
    /// Monte Carlo sampling with +1 smoothing: p = (1 + extreme) / (1 + N).
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationOutcome {
    pub p_value: f64,
    pub mode: PermutationMode,
    /// Assignments enumerated (exhaustive) or permutations drawn (MC).
    pub draws: u64,
}

/// Permutation test of `observed` against the null that labels are
/// exchangeable. `stat` maps (values, labels) to the test statistic;
/// extremeness is two-sided (|stat| >= |observed|).
///
/// When the number of distinct label arrangements is at most
/// [`EXHAUSTIVE_LIMIT`] the test enumerates all of them and reports the
/// exact unsmoothed proportion; otherwise it draws `n_perm` seeded
/// shuffles and applies +1 smoothing so p is never zero.
pub fn permutation_test<F>(
    observed: f64,
    stat: F,
    values: &[f64],
    labels: &[u32],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationOutcome, StatsError>
where
    F: Fn(&[f64], &[u32]) -> f64,
{
    if values.len() != labels.len() {
        return Err(StatsError::MismatchedLengths(values.len(), labels.len()));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(StatsError::DegenerateLabels);
    }

    let threshold = observed.abs();
    // Tiny slack so ties count as extreme despite float noise.
    let tol = 1e-12 * threshold.max(1.0);

    if let Some(total) = distinct_arrangements(labels) {
        if total <= EXHAUSTIVE_LIMIT {
            let mut perm: Vec<u32> = labels.to_vec();
            perm.sort_unstable();
            let mut extreme = 0u64;
            let mut count = 0u64;
            loop {
                count += 1;
                if stat(values, &perm).abs() >= threshold - tol {
                    extreme += 1;
                }
                if !next_permutation(&mut perm) {
                    break;
                }
            }
            debug_assert_eq!(count as u128, total);
            return Ok(PermutationOutcome {
                p_value: extreme as f64 / count as f64,
                mode: PermutationMode::Exhaustive,
                draws: count,
            });
        }
    }

    permutation_test_monte_carlo(observed, stat, values, labels, n_perm, seed)
}

/// Monte Carlo permutation test, regardless of how small the
/// assignment space is. Exposed so the sampled estimator can be checked
/// against the exhaustive one on the same data; p uses +1 smoothing and
/// is therefore never zero.
pub fn permutation_test_monte_carlo<F>(
    observed: f64,
    stat: F,
    values: &[f64],
    labels: &[u32],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationOutcome, StatsError>
where
    F: Fn(&[f64], &[u32]) -> f64,
{
    if values.len() != labels.len() {
        return Err(StatsError::MismatchedLengths(values.len(), labels.len()));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(StatsError::DegenerateLabels);
    }
    let threshold = observed.abs();
    let tol = 1e-12 * threshold.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<u32> = labels.to_vec();
    let mut extreme = 0u64;
    for _ in 0..n_perm {
        perm.shuffle(&mut rng);
        if stat(values, &perm).abs() >= threshold - tol {
            extreme += 1;
        }
    }
    Ok(PermutationOutcome {
        p_value: (1.0 + extreme as f64) / (1.0 + n_perm as f64),
        mode: PermutationMode::MonteCarlo,
        draws: n_perm as u64,
    })
}

/// Convenience statistic: difference of group means, label 0 minus label 1.
pub fn mean_difference(values: &[f64], labels: &[u32]) -> f64 {
    let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0u64, 0.0, 0u64);
    for (&v, &l) in values.iter().zip(labels) {
        if l == 0 {
            s0 += v;
            n0 += 1;
        } else {
            s1 += v;
            n1 += 1;
        }
    }
    s0 / n0.max(1) as f64 - s1 / n1.max(1) as f64
}

/// Number of distinct arrangements of the label multiset, or None once
/// it clearly exceeds the exhaustive ceiling.
fn distinct_arrangements(labels: &[u32]) -> Option<u128> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut total: u128 = 1;
    // n! / prod(c_i!) built incrementally as a product of binomials,
    // so every intermediate value is an integer.
    let mut placed: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let class_count = (j - i) as u128;
        for k in 1..=class_count {
            placed += 1;
            total = total.checked_mul(placed)?;
            total /= k;
            if total > EXHAUSTIVE_LIMIT.saturating_mul(1_000_000) {
                return None;
            }
        }
        i = j;
    }
    Some(total)
}

/// Lexicographic next permutation over a slice; false once exhausted.
fn next_permutation(seq: &mut [u32]) -> bool {
    if seq.len() < 2 {
        return false;
    }
    let mut i = seq.len() - 1;
    while i > 0 && seq[i - 1] >= seq[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = seq.len() - 1;
    while seq[j] <= seq[i - 1] {
        j -= 1;
    }
    seq.swap(i - 1, j);
    seq[i..].reverse();
    true
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::MismatchedLengths(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewValues("pearson_r".into(), 2));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x".into()));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
