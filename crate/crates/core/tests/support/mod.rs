//! Shared oracles and fixture builders for the integration suites.
//!
//! The oracles here deliberately avoid the library's own numerics: the
//! t-distribution CDF is integrated directly (no gamma functions, no
//! incomplete beta), and the BH oracle walks the step-up definition
//! literally. They exist to catch the implementation lying.

#![allow(dead_code)]

use ablate_core::corpus::{Block, Corpus, Encoding, Modality, Register, Tier, Variant};
use ablate_core::probes::{JudgePolicy, Probe, ScorerSpec};

/// Adaptive Simpson integration with a relative-accuracy target.
///
/// Two passes: a coarse pass pins the integral's magnitude, then a
/// second pass refines with an absolute budget scaled to it. The
/// Richardson term (delta/15) buys two extra orders.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let scan: f64 = (0..=64)
        .map(|i| f(a + (b - a) * i as f64 / 64.0).abs())
        .sum::<f64>()
        / 65.0
        * (b - a).abs();
    let eps1 = scan * 1e-6 + 1e-280;
    let pass1 = simpson_adaptive(&f, a, b, eps1, 48);
    let eps2 = pass1.abs() * rel_tol + 1e-300;
    simpson_adaptive(&f, a, b, eps2, 52)
}

fn simpson_adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    asr(f, a, fa, m, fm, b, fb, whole, eps, depth)
}

#[allow(clippy::too_many_arguments)]
fn asr<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    fa: f64,
    m: f64,
    fm: f64,
    b: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        asr(f, a, fa, lm, flm, m, fm, left, 0.5 * eps, depth - 1)
            + asr(f, m, fm, rm, frm, b, fb, right, 0.5 * eps, depth - 1)
    }
}

/// Student-t CDF by quadrature alone.
///
/// Substituting x = sqrt(df) * tan(theta) turns the t density into a
/// power of cosine over a finite interval, so no gamma-function
/// normalization is needed:
///   F(t) = 0.5 + I(0, atan(t/sqrt(df))) / Z      for t >= 0
///   F(t) = I_sin(0, atan(sqrt(df)/|t|)) / Z      for t < 0
/// with integrand cos(theta)^(df-1) (or sin for the reflected tail)
/// and Z the full-interval integral.
pub fn oracle_t_cdf(t: f64, df: f64) -> f64 {
    assert!(df > 0.0);
    if t == 0.0 {
        return 0.5;
    }
    let p = df - 1.0;
    let cos_pow = move |x: f64| x.cos().max(0.0).powf(p);
    let sin_pow = move |x: f64| x.sin().max(0.0).powf(p);
    let z = 2.0 * integrate(cos_pow, 0.0, std::f64::consts::FRAC_PI_2, 1e-13);
    if t > 0.0 {
        let phi = (t / df.sqrt()).atan();
        0.5 + integrate(cos_pow, 0.0, phi, 1e-13) / z
    } else {
        let u = (df.sqrt() / -t).atan();
        integrate(sin_pow, 0.0, u, 1e-13) / z
    }
}

/// Literal step-up BH: scan ranks from the top, the first k with
/// p_(k) <= (k/m) q fixes the rejection count.
pub fn oracle_bh_rejections(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].partial_cmp(&p_values[j]).unwrap());
    let mut k_star = 0;
    for k in (1..=m).rev() {
        if p_values[order[k - 1]] <= (k as f64 / m as f64) * q {
            k_star = k;
            break;
        }
    }
    let mut rejected = vec![false; m];
    for &idx in order.iter().take(k_star) {
        rejected[idx] = true;
    }
    rejected
}

// ---------------------------------------------------------------------------
// Fixture builders
// ---------------------------------------------------------------------------

pub fn block(id: &str, text: &str, ablatable: bool) -> Block {
    Block {
        id: id.into(),
        text: text.into(),
        tier: Tier::Application,
        category: "test".into(),
        modality: Modality::Guidance,
        ablatable,
        encoding: Encoding::Unlabeled,
        register: Register::Unlabeled,
        source_file: None,
    }
}

pub fn corpus(language: &str, blocks: Vec<Block>) -> Corpus {
    Corpus {
        family: "fixture".into(),
        language: language.into(),
        variant: Variant::Original,
        separator: "\n\n".into(),
        blocks,
    }
}

/// A corpus of k ablatable blocks (ids blk-0..blk-k-1) plus one
/// constrained anchor, each block's text unique and non-overlapping.
pub fn ablation_corpus(language: &str, k: usize) -> Corpus {
    let mut blocks = vec![block(
        "anchor",
        &format!("[{language}] constrained anchor rules."),
        false,
    )];
    for i in 0..k {
        blocks.push(block(
            &format!("blk-{i}"),
            &format!("[{language}] instruction unit number {i} stands here."),
            true,
        ));
    }
    corpus(language, blocks)
}

pub fn length_probe(id: &str, target: &str, baseline_chars: u32) -> Probe {
    Probe {
        id: id.into(),
        target_block: target.into(),
        user_message: format!("[probe:{id}] user question"),
        scorer: ScorerSpec::Length { baseline_chars },
        expected: String::new(),
        violation: String::new(),
    }
}

pub fn judge_probe(id: &str, target: &str) -> Probe {
    Probe {
        id: id.into(),
        target_block: target.into(),
        user_message: format!("[probe:{id}] judged question"),
        scorer: ScorerSpec::LlmJudge {
            criteria: "The response follows the instruction.".into(),
            judge_policy: JudgePolicy::SameModel,
        },
        expected: String::new(),
        violation: String::new(),
    }
}
