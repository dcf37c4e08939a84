//! Reference implementations used as independent test oracles.

use ant_core::cluster::ConditionLabel;

/// Minimum within-cluster squared error over every assignment of `points`
/// to at most `k` groups (exhaustive `k^n` enumeration).
pub fn exhaustive_partition_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    let mut labels = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut sse = 0.0;
        for g in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(sse);
    }
    best
}

/// Per-dimension z-scores with population std (zero-variance dims left unscaled).
pub fn zscore(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mut out = points.to_vec();
    for d in 0..dim {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let std = (points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n).sqrt();
        let s = if std > 1e-12 { std } else { 1.0 };
        for p in out.iter_mut() {
            p[d] = (p[d] - mean) / s;
        }
    }
    out
}

/// Literal reading of the 2-of-3 admission rule over a sequence of
/// recognition results. The first `warmup` results only fill the queue and
/// the General model stays active; afterwards a result is admitted when it
/// equals at least two of the (up to) three results queued before it,
/// otherwise the Uncertain model takes over.
pub fn confidence_reference(results: &[ConditionLabel], warmup: usize) -> Vec<ConditionLabel> {
    let mut active = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if i < warmup {
            active.push(ConditionLabel::General);
            continue;
        }
        let past = &results[i.saturating_sub(3)..i];
        let agree = past.iter().filter(|p| *p == r).count();
        active.push(if agree >= 2 { *r } else { ConditionLabel::Uncertain });
    }
    active
}
