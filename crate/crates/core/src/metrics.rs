//! Segmentation metrics over pooled pixels, cross-domain GAP, and the
//! Fréchet Semantic Distance between latent populations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param, Error, Result};
use crate::linalg::{frobenius, matmul_sq, sym_eigen};
use crate::math;
use crate::synthdata::DomainId;

/// Default binarization threshold.
pub const THRESHOLD: f64 = 0.5;
/// Covariance regularization added to the diagonal.
pub const COV_EPS: f64 = 1e-6;

/// Pooled confusion counts. Merging is associative, so shards reduce exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_maps(prediction: &[f64], mask: &[f64], threshold: f64) -> Result<Self> {
        if prediction.len() != mask.len() {
            return Err(param(format!(
                "confusion_metrics shape mismatch: {} vs {} pixels",
                prediction.len(),
                mask.len()
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(param(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        let mut c = Confusion::default();
        for (&p, &m) in prediction.iter().zip(mask) {
            match (p >= threshold, m >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `None` when the mask has no positive pixels.
    pub fn se(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn acc(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// `None` when the mask has no positive pixels.
    pub fn f1(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| 2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64)
    }

    /// Mean of foreground and background IoU. An empty union counts as 1.
    pub fn miou(&self) -> f64 {
        let iou = |hit: u64, union: u64| if union == 0 { 1.0 } else { hit as f64 / union as f64 };
        let fg = iou(self.tp, self.tp + self.fp + self.fn_);
        let bg = iou(self.tn, self.tn + self.fp + self.fn_);
        0.5 * (fg + bg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub se: Option<f64>,
    pub acc: f64,
    pub f1: Option<f64>,
    pub miou: f64,
}

pub fn confusion_metrics(prediction: &[f64], mask: &[f64], threshold: f64) -> Result<SegMetrics> {
    let c = Confusion::from_maps(prediction, mask, threshold)?;
    Ok(SegMetrics {
        se: c.se(),
        acc: c.acc(),
        f1: c.f1(),
        miou: c.miou(),
    })
}

/// ROC AUC by the rank-sum statistic with midranks for ties.
/// `None` if only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(param(format!("auc length mismatch: {} vs {}", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("auc scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: i+1 ..= j+1
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)))
}

pub fn gap(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// Symmetric PSD square root of a row-major `n×n` matrix.
pub fn matrix_sqrt(m: &[f64], n: usize) -> Result<Vec<f64>> {
    if m.len() != n * n {
        return Err(param(format!("matrix_sqrt expects {} entries, got {}", n * n, m.len())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix_sqrt input is not finite".into()));
    }
    let norm = frobenius(m);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-6 * norm.max(1.0) {
                return Err(Error::Numeric(format!("matrix_sqrt input is not symmetric at ({i}, {j})")));
            }
        }
    }
    let (vals, vecs) = sym_eigen(m, n);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-4 * norm {
        return Err(Error::Numeric(format!("matrix_sqrt input is indefinite (eigenvalue {min})")));
    }
    let roots: Vec<f64> = vals.iter().map(|&v| math::sqrt(v.max(0.0))).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| vecs[i * n + k] * roots[k] * vecs[j * n + k]).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(out)
}

/// Sample mean and unbiased, regularized covariance of a latent population.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major C × C.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        Self::from_samples_eps(samples, COV_EPS)
    }

    /// As [`GaussianStats::from_samples`] with an explicit diagonal `eps`.
    pub fn from_samples_eps(samples: &[Vec<f64>], eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(param(format!("covariance eps must be finite and >= 0, got {eps}")));
        }
        if samples.len() < 2 {
            return Err(param("GaussianStats needs at least 2 samples"));
        }
        let c = samples[0].len();
        if c == 0 || samples.iter().any(|s| s.len() != c) {
            return Err(param("GaussianStats samples must share a positive width"));
        }
        let n = samples.len();
        let mut mean = vec![0.0; c];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; c * c];
        for s in samples {
            for i in 0..c {
                let di = s[i] - mean[i];
                for j in i..c {
                    cov[i * c + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..c {
            for j in i..c {
                let v = cov[i * c + j] / (n - 1) as f64 + if i == j { eps } else { 0.0 };
                cov[i * c + j] = v;
                cov[j * c + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fréchet distance between two Gaussians (squared mean term).
pub fn fsd_stats(x: &GaussianStats, y: &GaussianStats) -> Result<f64> {
    let c = x.dim();
    if y.dim() != c {
        return Err(param(format!("fsd width mismatch: {} vs {}", c, y.dim())));
    }
    let mean_term: f64 = x.mean.iter().zip(&y.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let trace = |m: &[f64]| (0..c).map(|i| m[i * c + i]).sum::<f64>();
    let sx = matrix_sqrt(&x.cov, c)?;
    let mut inner = matmul_sq(&matmul_sq(&sx, &y.cov, c), &sx, c);
    for i in 0..c {
        for j in (i + 1)..c {
            let v = 0.5 * (inner[i * c + j] + inner[j * c + i]);
            inner[i * c + j] = v;
            inner[j * c + i] = v;
        }
    }
    let cross = matrix_sqrt(&inner, c)?;
    Ok(mean_term + trace(&x.cov) + trace(&y.cov) - 2.0 * trace(&cross))
}

/// FSD between two latent populations; each needs at least C + 1 samples.
pub fn fsd(latents_model: &[Vec<f64>], latents_psae: &[Vec<f64>]) -> Result<f64> {
    fsd_eps(latents_model, latents_psae, COV_EPS)
}

pub fn fsd_eps(latents_model: &[Vec<f64>], latents_psae: &[Vec<f64>], eps: f64) -> Result<f64> {
    let c = latents_model.first().map_or(0, Vec::len);
    let need = c + 1;
    for (name, set) in [("model", latents_model), ("psae", latents_psae)] {
        if set.len() < need {
            return Err(param(format!(
                "fsd needs at least {need} {name} latents for width {c}, got {}",
                set.len()
            )));
        }
    }
    fsd_stats(
        &GaussianStats::from_samples_eps(latents_model, eps)?,
        &GaussianStats::from_samples_eps(latents_psae, eps)?,
    )
}

/// Pools pixels of a split for confusion counts and AUC.
#[derive(Clone, Debug, Default)]
pub struct SegEvaluator {
    pub confusion: Confusion,
    scores: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
}

impl SegEvaluator {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn add(&mut self, prediction: &[f64], mask: &[f64]) -> Result<()> {
        let c = Confusion::from_maps(prediction, mask, self.threshold)?;
        self.confusion = self.confusion.merge(c);
        self.scores.extend_from_slice(prediction);
        self.labels.extend(mask.iter().map(|&m| m >= 0.5));
        Ok(())
    }

    pub fn finish(&self, domain: DomainId, fsd: Option<f64>) -> Result<MetricsReport> {
        let c = &self.confusion;
        Ok(MetricsReport {
            domain,
            se: c.se(),
            acc: c.acc(),
            auc: auc(&self.scores, &self.labels)?,
            f1: c.f1(),
            miou: c.miou(),
            fsd: fsd.map(|v| v.max(0.0)),
        })
    }
}

/// One evaluation row. `None` marks an undefined metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub domain: DomainId,
    pub se: Option<f64>,
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub miou: f64,
    pub fsd: Option<f64>,
}

/// Column names in report order.
pub const METRIC_NAMES: [&str; 6] = ["SE", "ACC", "AUC", "F1", "mIoU", "FSD"];

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.se, Some(self.acc), self.auc, self.f1, Some(self.miou), self.fsd]
    }

    /// Per-metric `|a − b|`; undefined where either side is.
    pub fn gap_row(a: &MetricsReport, b: &MetricsReport) -> [Option<f64>; 6] {
        let (va, vb) = (a.values(), b.values());
        core::array::from_fn(|i| match (va[i], vb[i]) {
            (Some(x), Some(y)) => Some(gap(x, y)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        // TP=2, FP=1, FN=1, TN=4
        let pred = [0.9, 0.8, 0.7, 0.1, 0.2, 0.1, 0.3, 0.0];
        let mask = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let m = confusion_metrics(&pred, &mask, THRESHOLD).unwrap();
        assert!((m.se.unwrap() - 0.6667).abs() < 1e-4);
        assert!((m.acc - 0.75).abs() < 1e-4);
        assert!((m.f1.unwrap() - 0.6667).abs() < 1e-4);
        assert!((m.miou - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_empty() {
        let mask = [1.0, 0.0, 1.0, 0.0];
        let m = confusion_metrics(&mask, &mask, THRESHOLD).unwrap();
        assert_eq!((m.se, m.acc, m.f1, m.miou), (Some(1.0), 1.0, Some(1.0), 1.0));
        let m = confusion_metrics(&[0.2; 4], &[0.0; 4], THRESHOLD).unwrap();
        assert_eq!((m.se, m.f1), (None, None));
        assert!(confusion_metrics(&[0.2; 3], &[0.0; 4], THRESHOLD).is_err());
    }

    #[test]
    fn auc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), Some(0.75));
        assert_eq!(auc(&[0.1, 0.2, 0.7, 0.8], &l).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.3; 4], &l).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.3; 2], &[true, true]).unwrap(), None);
    }

    #[test]
    fn gap_examples() {
        assert!((gap(0.9451, 0.8251) - 0.1200).abs() < 1e-12);
        assert!((gap(0.9613, 0.8356) - 0.1257).abs() < 1e-12);
        assert_eq!(gap(0.4, 0.4), 0.0);
    }

    #[test]
    fn sqrt_diagonal_and_identity() {
        let r = matrix_sqrt(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        for (a, b) in r.iter().zip([2.0, 0.0, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = matrix_sqrt(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12);
        assert!(matrix_sqrt(&[1.0, 0.0, 0.0, -1.0], 2).is_err());
    }

    #[test]
    fn fsd_one_dimensional_closed_forms() {
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let x = [vec![-h], vec![h]];
        let y = [vec![1.0 - h], vec![1.0 + h]];
        assert!((fsd(&x, &y).unwrap() - 1.0).abs() < 1e-6);
        let y = [vec![-2.0 * h], vec![2.0 * h]];
        assert!((fsd(&x, &y).unwrap() - 1.0).abs() < 1e-6);
        assert!(fsd(&x, &x).unwrap().abs() < 1e-5);
    }

    #[test]
    fn fsd_names_required_count() {
        let x = vec![vec![0.0, 1.0, 2.0]; 3];
        let err = fsd(&x, &x).unwrap_err();
        assert!(format!("{err}").contains("at least 4"));
    }
}
