//! Ranking and calibration metrics over per-edge scores.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("labels need at least one positive and one negative")]
    DegenerateLabels,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Mann–Whitney area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::DegenerateLabels);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Indices sorted by descending score; ties keep ascending index order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Number of top edges evaluated at `fraction` of all candidate edges (at least one).
pub fn k_for_fraction(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).round() as usize).clamp(1, total)
}

/// Fraction of true edges among the top `round(fraction · N)` scores.
pub fn precision_at_fraction(scores: &[f64], labels: &[bool], fraction: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricError::DegenerateInput(format!("fraction {fraction}")));
    }
    if !labels.iter().any(|&l| l) {
        return Err(MetricError::DegenerateLabels);
    }
    let k = k_for_fraction(scores.len(), fraction);
    let hits = ranking(scores).iter().take(k).filter(|&&e| labels[e]).count();
    Ok(hits as f64 / k as f64)
}

/// Count-weighted binned calibration error over equal-width bins.
pub fn calibration_error(probs: &[f64], labels: &[bool], bins: usize) -> f64 {
    assert_eq!(probs.len(), labels.len());
    assert!(bins >= 1);
    let mut sum_p = vec![0.0; bins];
    let mut pos = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        sum_p[b] += p;
        count[b] += 1;
        pos[b] += y as usize;
    }
    let n = probs.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (sum_p[b] / c - pos[b] as f64 / c).abs()
        })
        .sum()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::DegenerateInput("constant vector".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&midranks(a), &midranks(b))
}

/// Mean Spearman correlation over all unordered pairs of score vectors.
pub fn spearman_stability(vectors: &[Vec<f64>]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(MetricError::DegenerateInput("need at least two vectors".into()));
    }
    let ranks: Vec<Vec<f64>> = vectors.iter().map(|v| midranks(v)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..ranks.len() {
        for b in a + 1..ranks.len() {
            total += pearson(&ranks[a], &ranks[b])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
