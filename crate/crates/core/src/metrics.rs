//! Rank and linear correlation between predictions and labels.

use crate::error::{Error, Result};

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need two equal-length series of at least 2 values",
        ));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "correlation input".into(),
        });
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need two equal-length series of at least 2 values",
        ));
    }
    plcc(&average_ranks(pred), &average_ranks(target)).map_err(|e| match e {
        Error::UndefinedCorrelation(_) => Error::UndefinedCorrelation("zero rank variance"),
        e => e,
    })
}

/// Order-statistic median (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srcc_examples() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((srcc(&[1.0, 2.0, 3.0, 5.0, 4.0], &t).unwrap() - 0.9).abs() < 1e-12);
        assert!((srcc(&[0.1, 0.5, 0.7, 3.0, 9.0], &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&[5.0, 4.0, 3.0, 2.0, 1.0], &t).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
        assert!(matches!(
            srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn plcc_examples() {
        let t = [0.3, -1.0, 2.5, 4.0];
        let affine: Vec<f64> = t.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&affine, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((plcc(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        // mean 2 and 7/3; cov = 3, var_p = 2, var_t = 14/3
        let expect = 3.0 / (2f64.sqrt() * (14.0f64 / 3.0).sqrt());
        assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - expect).abs() < 1e-12);
        assert!(plcc(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(plcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn median_order_statistic() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
