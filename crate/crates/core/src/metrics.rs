//! ROC AUC and Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};

use crate::error::{IhanError, Result};

/// Area under the ROC curve as the Mann–Whitney concordance: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(IhanError::dim("auc", (scores.len(), 1), (labels.len(), 1)));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(IhanError::UndefinedMetric(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(IhanError::UndefinedMetric(
            "auc needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of midranks of the positives.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.len() < 2 {
        return (xs.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let (m, v) = mean_var(xs);
    (m, v.sqrt())
}

/// Welch's t-test with Welch–Satterthwaite degrees of freedom.
///
/// When both samples have zero variance the result is `p = 1` for equal means
/// and `p = 0` otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(IhanError::Degenerate(format!(
            "t-test needs at least two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let dof = na + nb - 2.0;
        return Ok(if ma == mb {
            TTest { t: 0.0, dof, p: 1.0 }
        } else {
            TTest {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                dof,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TTest {
        t,
        dof,
        p: student_t_two_sided(t, dof),
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(x, dof / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_fixed_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(IhanError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_matches_pair_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auc(&scores, &labels).unwrap();
            assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn welch_reference_example() {
        let a = [0.0, 0.1, 0.2, 0.3, 0.4];
        let b = [1.0, 1.1, 1.2, 1.3, 1.4];
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.t + 10.0).abs() < 1e-9);
        assert!((r.dof - 8.0).abs() < 1e-9);
        // scipy.stats.ttest_ind(a, b, equal_var=False)
        assert!((r.p - 8.488181527628472e-06).abs() < 1e-12);
        let s = welch_t_test(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn welch_unequal_sizes() {
        let a = [0.81, 0.83, 0.80, 0.85, 0.84, 0.82];
        let b = [0.90, 0.88, 0.91, 0.89];
        let r = welch_t_test(&a, &b).unwrap();
        // scipy reference values
        assert!((r.t + 6.999999999999988).abs() < 1e-9);
        assert!((r.dof - 7.941176470588232).abs() < 1e-9);
        assert!((r.p - 0.00011671088430205923).abs() < 1e-10);
    }

    #[test]
    fn welch_conventions() {
        let r = welch_t_test(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = welch_t_test(&[0.5, 0.5], &[0.7, 0.7]).unwrap();
        assert_eq!(r.p, 0.0);
        let r = welch_t_test(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert!(welch_t_test(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn t_tail_reference_values() {
        // scipy: 2 * t.sf(t, df)
        for (t, df, p) in [
            (1.0, 1.0, 0.49999999999999956),
            (2.0, 3.5, 0.1261385225759135),
            (0.5, 30.0, 0.6207230048851273),
            (4.0, 12.0, 0.0017616962443950251),
        ] {
            assert!((student_t_two_sided(t, df) - p).abs() < 1e-8, "{t} {df}");
        }
    }

    #[test]
    fn incomplete_beta_reference_values() {
        // scipy.special.betainc
        assert!((regularized_incomplete_beta(0.3, 2.5, 0.5) - 0.018927124071945658).abs() < 1e-12);
        assert!((regularized_incomplete_beta(0.9, 10.0, 3.0) - 0.889130022255).abs() < 1e-11);
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact: f64 = 1.0;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12);
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }
}
