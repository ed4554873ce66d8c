//! Evaluation metrics, percentile bootstrap intervals, operating tables and
//! the stratified next-visit report.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{recurrence_stratum, PatientRecord, RecurrenceStratum};
use crate::error::{Error, Result};
use crate::inference::Prediction;
use crate::rng;

/// `|pred ∩ gold| / |pred ∪ gold|`, with two empty sets scoring 1.
pub fn jaccard<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> f64 {
    let inter = pred.intersection(gold).count();
    let union = pred.len() + gold.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {bad} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// Zero when nothing is predicted positive (see `no_predicted_positive`).
    pub ppv: f64,
    /// `None` without positives.
    pub sensitivity: Option<f64>,
    /// `None` without negatives.
    pub specificity: Option<f64>,
    pub f1: f64,
    pub no_predicted_positive: bool,
}

/// Threshold metrics; a score `>= threshold` is a positive prediction.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_ = pos - tp;
    let tn = neg - fp;
    let flagged = tp + fp;
    let ppv = if flagged == 0 { 0.0 } else { tp as f64 / flagged as f64 };
    let sensitivity = (pos > 0).then(|| tp as f64 / pos as f64);
    let specificity = (neg > 0).then(|| tn as f64 / neg as f64);
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        ppv,
        sensitivity,
        specificity,
        f1,
        no_predicted_positive: flagged == 0,
    })
}

/// Indices sorted by descending score; equal scores keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve as the Mann–Whitney concordance probability,
/// ties counted one half (midranks).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled midranks of positives keeps everything integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled midrank = i + j + 2
        let doubled = (i + j + 2) as u128;
        let p = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_sum += p * doubled;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: `Σ precision(t) · Δrecall(t)` over the distinct score
/// thresholds in descending order. Tied scores form one threshold step, so
/// the result does not depend on the order of tied inputs; without ties this
/// is the mean of precision at the rank of each positive.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let idx = descending(scores);
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let group_tp = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += group_tp;
        if group_tp > 0 {
            ap += (group_tp as f64 / pos as f64) * (tp as f64 / (j + 1) as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Resamples discarded because the metric was undefined on them.
    pub redrawn: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over items (patients). Replicate `b` draws from the
/// stream `(seed, b)`; a resample on which `metric` fails is redrawn, at
/// most `100 · n_boot` times in total.
pub fn bootstrap_ci<F>(metric: F, scores: &[f64], labels: &[u8], n_boot: usize, level: f64, seed: u64) -> Result<Interval>
where
    F: Fn(&[f64], &[u8]) -> Result<f64>,
{
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be >= 1".into()));
    }
    metric(scores, labels)?;
    let n = scores.len();
    let mut values = Vec::with_capacity(n_boot);
    let mut redrawn = 0;
    let mut s = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    for b in 0..n_boot {
        let mut r = rng::derived(seed, b as u64);
        loop {
            s.clear();
            l.clear();
            for _ in 0..n {
                let k = r.random_range(0..n);
                s.push(scores[k]);
                l.push(labels[k]);
            }
            match metric(&s, &l) {
                Ok(v) => {
                    values.push(v);
                    break;
                }
                Err(_) => {
                    redrawn += 1;
                    if redrawn > 100 * n_boot {
                        return Err(Error::UndefinedMetric(format!(
                            "metric undefined on {redrawn} bootstrap resamples"
                        )));
                    }
                }
            }
        }
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        low: quantile(&values, alpha),
        high: quantile(&values, 1.0 - alpha),
        redrawn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub top_fraction: f64,
    pub n_flagged: usize,
    pub true_positives: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.01, 0.05, 0.10, 0.20];

/// `ceil(fraction · n)`, robust to the representation error of products
/// such as `0.1 · 100`.
pub fn n_flagged(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let c = libm::ceil(x - 1e-9 * x.max(1.0));
    (c.max(0.0) as usize).min(n)
}

/// Flags the top `ceil(f · n)` scores (ties in input order) for each
/// fraction `f`.
pub fn operating_table(scores: &[f64], labels: &[u8], fractions: &[f64]) -> Result<Vec<OperatingPoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "operating table needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let idx = descending(scores);
    let n = scores.len();
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("fraction {f} outside [0, 1]")));
            }
            let k = n_flagged(f, n);
            let tp = idx[..k].iter().filter(|&&i| labels[i] == 1).count();
            let fp = k - tp;
            Ok(OperatingPoint {
                top_fraction: f,
                n_flagged: k,
                true_positives: tp,
                sensitivity: tp as f64 / pos as f64,
                specificity: (neg - fp) as f64 / neg as f64,
                ppv: if k == 0 { 0.0 } else { tp as f64 / k as f64 },
            })
        })
        .collect()
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} x values vs {} y values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("Pearson r needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("Pearson r with zero variance".into()));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// One reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub stratum: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n: usize,
    pub prevalence: Option<f64>,
    pub metrics: Vec<MetricValue>,
    #[serde(default)]
    pub operating_points: Vec<OperatingPoint>,
    #[serde(default)]
    pub bootstrap_redrawn: usize,
}

impl EvalReport {
    pub fn get(&self, metric: &str, stratum: &str) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.metric == metric && m.stratum == stratum)
    }

    /// Flat CSV: `task,metric,value,ci_low,ci_high,stratum,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,value,ci_low,ci_high,stratum,n\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.task, m.metric, m.value, m.ci_low, m.ci_high, m.stratum, m.n
            ));
        }
        out
    }
}

fn metric_value(metric: &str, stratum: &str, value: f64, ci: Option<Interval>, n: usize) -> MetricValue {
    // A percentile interval can exclude the point estimate on skewed
    // resampling distributions; it is widened to contain it.
    let (low, high) = ci.map_or((value, value), |c| (c.low.min(value), c.high.max(value)));
    MetricValue {
        metric: metric.into(),
        stratum: stratum.into(),
        value,
        ci_low: low,
        ci_high: high,
        n,
    }
}

/// Settings shared by the report builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            n_boot: 1000,
            level: 0.95,
            seed: 0,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            threshold: 0.5,
        }
    }
}

/// AUROC and AUPRC with bootstrap intervals, threshold metrics and the
/// operating table for one binary task.
pub fn task_report(task: &str, scores: &[f64], labels: &[u8], cfg: &ReportConfig) -> Result<EvalReport> {
    let (pos, _) = check_inputs(scores, labels)?;
    let n = scores.len();
    let mut metrics = Vec::new();
    let mut redrawn = 0;
    let roc = auroc(scores, labels)?;
    let roc_ci = bootstrap_ci(auroc, scores, labels, cfg.n_boot, cfg.level, cfg.seed)?;
    redrawn += roc_ci.redrawn;
    metrics.push(metric_value("auroc", "all", roc, Some(roc_ci), n));
    let pr = auprc(scores, labels)?;
    let pr_ci = bootstrap_ci(auprc, scores, labels, cfg.n_boot, cfg.level, cfg.seed.wrapping_add(1))?;
    redrawn += pr_ci.redrawn;
    metrics.push(metric_value("auprc", "all", pr, Some(pr_ci), n));
    let c = confusion_metrics(scores, labels, cfg.threshold)?;
    metrics.push(metric_value("ppv", "all", c.ppv, None, n));
    if let Some(s) = c.sensitivity {
        metrics.push(metric_value("sensitivity", "all", s, None, n));
    }
    if let Some(s) = c.specificity {
        metrics.push(metric_value("specificity", "all", s, None, n));
    }
    metrics.push(metric_value("f1", "all", c.f1, None, n));
    let operating_points = operating_table(scores, labels, &cfg.fractions)?;
    for op in &operating_points {
        let stratum = format!("top_{}", op.top_fraction);
        metrics.push(metric_value("sensitivity", &stratum, op.sensitivity, None, op.n_flagged));
        metrics.push(metric_value("specificity", &stratum, op.specificity, None, op.n_flagged));
        metrics.push(metric_value("ppv", &stratum, op.ppv, None, op.n_flagged));
    }
    Ok(EvalReport {
        task: task.into(),
        n,
        prevalence: Some(pos as f64 / n as f64),
        metrics,
        operating_points,
        bootstrap_redrawn: redrawn,
    })
}

/// Tracked diagnosis codes for the stratified next-visit report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeSets {
    pub common: Vec<String>,
    pub rare: Vec<String>,
}

/// Per-pair Jaccard plus, for every tracked code in the gold set, its
/// recurrence stratum.
struct PairScore {
    jaccard: f64,
    cells: Vec<(usize, RecurrenceStratum)>,
}

fn stratum_index(s: RecurrenceStratum) -> usize {
    match s {
        RecurrenceStratum::H => 0,
        RecurrenceStratum::L => 1,
        RecurrenceStratum::Zero => 2,
    }
}

/// `[code][stratum or 3 = any] -> (sum, count)` over a multiset of pairs.
type Cells = Vec<[(f64, usize); 4]>;

fn accumulate(pairs: &[PairScore], weights: impl Iterator<Item = usize>, n_codes: usize) -> (f64, usize, Cells) {
    let mut cells: Cells = alloc::vec![[(0.0, 0); 4]; n_codes];
    let mut total = 0.0;
    let mut count = 0;
    for (p, w) in pairs.iter().zip(weights) {
        if w == 0 {
            continue;
        }
        total += p.jaccard * w as f64;
        count += w;
        for &(c, s) in &p.cells {
            for k in [stratum_index(s), 3] {
                cells[c][k].0 += p.jaccard * w as f64;
                cells[c][k].1 += w;
            }
        }
    }
    (total, count, cells)
}

/// Named aggregates: overall, per code set and stratum (macro mean over
/// codes whose cell is non-empty), per code and stratum.
fn aggregates(total: f64, count: usize, cells: &Cells, sets: &CodeSets) -> BTreeMap<(String, String), (f64, usize)> {
    const NAMES: [&str; 4] = ["H", "L", "0", "all"];
    let mut out = BTreeMap::new();
    if count > 0 {
        out.insert(("jaccard".to_string(), "overall".to_string()), (total / count as f64, count));
    }
    let n_common = sets.common.len();
    let groups: [(&str, core::ops::Range<usize>); 3] = [
        ("common", 0..n_common),
        ("rare", n_common..n_common + sets.rare.len()),
        ("tracked", 0..n_common + sets.rare.len()),
    ];
    for (group, range) in groups {
        for (k, sname) in NAMES.iter().enumerate() {
            let means: Vec<f64> = range
                .clone()
                .filter(|&c| cells[c][k].1 > 0)
                .map(|c| cells[c][k].0 / cells[c][k].1 as f64)
                .collect();
            let pairs: usize = range.clone().map(|c| cells[c][k].1).sum();
            if !means.is_empty() {
                let stratum = if *sname == "all" { group.to_string() } else { format!("{group}/{sname}") };
                out.insert(
                    ("jaccard".to_string(), stratum),
                    (means.iter().sum::<f64>() / means.len() as f64, pairs),
                );
            }
        }
    }
    for (c, code) in sets.common.iter().chain(&sets.rare).enumerate() {
        for (k, sname) in NAMES.iter().enumerate() {
            if cells[c][k].1 > 0 {
                out.insert(
                    (format!("jaccard:{code}"), sname.to_string()),
                    (cells[c][k].0 / cells[c][k].1 as f64, cells[c][k].1),
                );
            }
        }
    }
    out
}

/// Next-visit prediction report.
///
/// The score of a (patient, visit) pair is the Jaccard of its whole
/// predicted and gold code sets. `overall` averages all pairs. A tracked
/// code's cell averages the pairs whose gold set contains the code,
/// stratified by how often the code occurred in the patient's earlier
/// visits (H / L / 0). Group rows (`common`, `rare`, `tracked`, each
/// optionally `/H`, `/L`, `/0`) are unweighted means over the codes whose
/// cell is non-empty; empty cells are omitted rather than reported as zero.
/// Intervals are percentile bootstraps over pairs.
pub fn daop_report(
    task: &str,
    predictions: &[Prediction],
    cohort: &[PatientRecord],
    sets: &CodeSets,
    cfg: &ReportConfig,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let by_id: BTreeMap<&str, &PatientRecord> = cohort.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let tracked: Vec<&String> = sets.common.iter().chain(&sets.rare).collect();
    let mut pairs = Vec::with_capacity(predictions.len());
    for p in predictions {
        let record = by_id
            .get(p.patient_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("prediction for unknown patient {}", p.patient_id)))?;
        if p.visit_idx == 0 || p.visit_idx >= record.visits.len() {
            return Err(Error::OutOfRange {
                what: "prediction visit_idx",
                index: p.visit_idx,
                len: record.visits.len(),
            });
        }
        let cells = tracked
            .iter()
            .enumerate()
            .filter(|(_, code)| p.gold.contains(code.as_str()))
            .map(|(c, code)| (c, recurrence_stratum(record, p.visit_idx, code)))
            .collect();
        pairs.push(PairScore {
            jaccard: jaccard(&p.predicted, &p.gold),
            cells,
        });
    }
    let (total, count, cells) = accumulate(&pairs, core::iter::repeat(1), tracked.len());
    let point = aggregates(total, count, &cells, sets);

    let mut replicates: BTreeMap<&(String, String), Vec<f64>> = point.keys().map(|k| (k, Vec::new())).collect();
    let n = pairs.len();
    for b in 0..cfg.n_boot {
        let mut r = rng::derived(cfg.seed, b as u64);
        let mut w = alloc::vec![0usize; n];
        for _ in 0..n {
            w[r.random_range(0..n)] += 1;
        }
        let (t, c, cl) = accumulate(&pairs, w.into_iter(), tracked.len());
        let agg = aggregates(t, c, &cl, sets);
        for (k, v) in replicates.iter_mut() {
            if let Some(x) = agg.get(*k) {
                v.push(x.0);
            }
        }
    }
    let alpha = (1.0 - cfg.level) / 2.0;
    let metrics = point
        .iter()
        .map(|(key, &(value, n))| {
            let mut reps = replicates.remove(key).unwrap_or_default();
            reps.sort_by(f64::total_cmp);
            let ci = (!reps.is_empty()).then(|| Interval {
                low: quantile(&reps, alpha),
                high: quantile(&reps, 1.0 - alpha),
                redrawn: 0,
            });
            metric_value(&key.0, &key.1, value, ci, n)
        })
        .collect();
    Ok(EvalReport {
        task: task.into(),
        n,
        prevalence: None,
        metrics,
        operating_points: Vec::new(),
        bootstrap_redrawn: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Demographics, Sex, Visit};
    use alloc::vec;
    use proptest::prelude::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard(&set(&["A", "B", "C"]), &set(&["B", "C", "D"])), 0.5);
        assert_eq!(jaccard(&set(&["A"]), &set(&["A"])), 1.0);
        assert_eq!(jaccard(&set(&["A"]), &set(&["B"])), 0.0);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 1.0);
        assert_eq!(jaccard(&set(&[]), &set(&["B"])), 0.0);
    }

    #[test]
    fn confusion_examples() {
        let scores: Vec<f64> = (0..20).map(|i| if i < 10 { 0.9 } else { 0.1 }).collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i < 3 || i == 15)).collect();
        let c = confusion_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(c.ppv, 0.3);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (3, 7, 9, 1));
        let all_pos = confusion_metrics(&[0.2, 0.3], &[1, 1], 0.0).unwrap();
        assert_eq!(all_pos.sensitivity, Some(1.0));
        assert_eq!(all_pos.specificity, None);
        let perfect = confusion_metrics(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.5).unwrap();
        assert_eq!(perfect.f1, 1.0);
        let none = confusion_metrics(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert!(none.no_predicted_positive);
        assert_eq!((none.ppv, none.f1), (0.0, 0.0));
        assert!(confusion_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        let ap = auprc(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + (2.0 / 3.0) * 0.5)).abs() < 1e-12);
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!(auprc(&[0.9, 0.8], &[0, 0]).is_err());
    }

    #[test]
    fn auprc_of_random_scores_is_prevalence() {
        let mut r = rng::seeded(1);
        let n = 100_000;
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random::<f64>() < 0.1)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let pi = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        let ap = auprc(&scores, &labels).unwrap();
        assert!((ap - pi).abs() < 0.02, "{ap} vs {pi}");
    }

    #[test]
    fn bootstrap_behaviour() {
        let mut r = rng::seeded(2);
        let scores: Vec<f64> = (0..200).map(|_| r.random()).collect();
        let labels: Vec<u8> = scores.iter().map(|&s| u8::from(s + 0.3 * r.random::<f64>() > 0.7)).collect();
        let a = bootstrap_ci(auroc, &scores, &labels, 200, 0.95, 9).unwrap();
        let b = bootstrap_ci(auroc, &scores, &labels, 200, 0.95, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.low < a.high);
        let constant = bootstrap_ci(|_, _| Ok(0.25), &scores, &labels, 50, 0.95, 1).unwrap();
        assert_eq!((constant.low, constant.high), (0.25, 0.25));
        assert!(bootstrap_ci(auroc, &[0.1, 0.2], &[1, 1], 10, 0.95, 1).is_err());
    }

    #[test]
    fn bootstrap_redraws_undefined_resamples() {
        // One positive in five: about a third of resamples miss it.
        let scores = [0.9, 0.1, 0.2, 0.3, 0.4];
        let labels = [1, 0, 0, 0, 0];
        let ci = bootstrap_ci(auroc, &scores, &labels, 100, 0.95, 3).unwrap();
        assert!(ci.redrawn > 0);
        assert_eq!((ci.low, ci.high), (1.0, 1.0));
    }

    #[test]
    fn operating_table_rules() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0];
        let labels = [1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let t = operating_table(&scores, &labels, &[0.2, 1.0, 0.1]).unwrap();
        assert_eq!(t[0].ppv, 1.0);
        assert_eq!(t[0].sensitivity, 1.0);
        assert_eq!(t[1].ppv, 0.2);
        assert_eq!(t[1].sensitivity, 1.0);
        assert_eq!(t[1].specificity, 0.0);
        assert_eq!(t[2].n_flagged, 1);
        assert_eq!(n_flagged(0.1, 100), 10);
        assert_eq!(n_flagged(0.01, 150), 2);
        assert_eq!(n_flagged(0.05, 5000), 250);
        assert!(operating_table(&scores, &[0; 10], &[0.1]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson_r(&x, &[3.0; 4]).is_err());
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    fn record(id: &str, visits: &[&[&str]]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            demographics: Demographics {
                age_years: 50,
                sex: Sex::F,
            },
            visits: visits.iter().map(|v| Visit::new(v.iter().copied())).collect(),
        }
    }

    fn pred(r: &PatientRecord, v: usize, predicted: &[&str]) -> Prediction {
        Prediction {
            patient_id: r.patient_id.clone(),
            visit_idx: v,
            predicted: set(predicted),
            gold: r.visits[v].codes.iter().cloned().collect(),
        }
    }

    fn sets() -> CodeSets {
        CodeSets {
            common: vec!["A".into(), "B".into()],
            rare: vec!["Z".into()],
        }
    }

    #[test]
    fn daop_perfect_predictions_score_one_everywhere() {
        let a = record("a", &[&["A"], &["A", "B"], &["A", "Z"]]);
        let b = record("b", &[&["B"], &["Z"], &["A", "B", "Z"]]);
        let cohort = vec![a.clone(), b.clone()];
        let mut preds = Vec::new();
        for r in &cohort {
            for v in 1..3 {
                let gold: Vec<&str> = r.visits[v].codes.iter().map(String::as_str).collect();
                preds.push(pred(r, v, &gold));
            }
        }
        let cfg = ReportConfig {
            n_boot: 20,
            ..ReportConfig::default()
        };
        let rep = daop_report("t", &preds, &cohort, &sets(), &cfg).unwrap();
        assert!(!rep.metrics.is_empty());
        for m in &rep.metrics {
            assert_eq!((m.value, m.ci_low, m.ci_high), (1.0, 1.0, 1.0), "{m:?}");
        }
        assert!(rep.get("jaccard", "common/0").is_some());
        assert!(rep.get("jaccard", "common/H").is_some());
    }

    #[test]
    fn daop_strata_and_absent_cells() {
        // A is new at visit 1 (stratum 0) and seen in half the prior visits
        // at visit 2 (L, since H needs more than half).
        let r = record("a", &[&["X"], &["A", "Y"], &["A"]]);
        let preds = vec![pred(&r, 1, &["X"]), pred(&r, 2, &["A", "Y"])];
        let cfg = ReportConfig {
            n_boot: 10,
            ..ReportConfig::default()
        };
        let rep = daop_report("copy", &preds, &[r.clone()], &sets(), &cfg).unwrap();
        assert_eq!(rep.get("jaccard", "overall").unwrap().value, 0.25);
        assert_eq!(rep.get("jaccard", "common/0").unwrap().value, 0.0);
        assert_eq!(rep.get("jaccard", "common/L").unwrap().value, 0.5);
        assert!(rep.get("jaccard", "rare").is_none());
        assert!(rep.get("jaccard", "common/H").is_none());
        assert!(rep.to_csv().starts_with("task,metric,value,ci_low,ci_high,stratum,n\ncopy,"));
        let unknown = Prediction {
            patient_id: "nobody".into(),
            ..preds[0].clone()
        };
        assert!(daop_report("t", &[unknown], &[r], &sets(), &cfg).is_err());
    }

    #[test]
    fn task_report_contents() {
        let mut r = rng::seeded(4);
        let labels: Vec<u8> = (0..300).map(|_| u8::from(r.random::<f64>() < 0.2)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| 0.3 * l as f64 + 0.7 * r.random::<f64>()).collect();
        let cfg = ReportConfig {
            n_boot: 100,
            ..ReportConfig::default()
        };
        let rep = task_report("t", &scores, &labels, &cfg).unwrap();
        for m in &rep.metrics {
            assert!(m.ci_low <= m.value && m.value <= m.ci_high);
            assert!((0.0..=1.0).contains(&m.value));
        }
        assert_eq!(rep.operating_points.len(), 4);
        assert!(task_report("t", &scores, &vec![0; 300], &cfg).is_err());
    }

    fn brute_auroc(s: &[f64], l: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn brute_auprc(s: &[f64], l: &[u8]) -> f64 {
        let pos = l.iter().filter(|&&x| x == 1).count() as f64;
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let flagged = s.iter().filter(|&&x| x >= t).count() as f64;
            let tp = s.iter().zip(l).filter(|(&x, &y)| x >= t && y == 1).count() as f64;
            let recall = tp / pos;
            ap += (recall - prev_recall) * (tp / flagged);
            prev_recall = recall;
        }
        ap
    }

    proptest! {
        #[test]
        fn ranking_metrics_match_brute_force(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 20.0).collect();
            let labels: Vec<u8> = raw.iter().map(|&(_, l)| u8::from(l)).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos > 0 && pos < labels.len() {
                prop_assert!((auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs() <= 1e-12);
            }
            if pos > 0 {
                prop_assert!((auprc(&scores, &labels).unwrap() - brute_auprc(&scores, &labels)).abs() <= 1e-12);
            }
        }

        #[test]
        fn operating_identity(
            raw in proptest::collection::vec((0u8..50, any::<bool>()), 2..100),
            f in 0.0f64..=1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<u8> = raw.iter().map(|&(_, l)| u8::from(l)).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let t = operating_table(&scores, &labels, &[f, 1.0]).unwrap();
            let op = t[0];
            prop_assert_eq!(op.n_flagged, n_flagged(f, labels.len()));
            prop_assert!((op.sensitivity * pos as f64 - op.ppv * op.n_flagged as f64).abs() < 1e-9);
            prop_assert_eq!(t[1].ppv, pos as f64 / labels.len() as f64);
        }

        #[test]
        fn jaccard_symmetry(a in proptest::collection::btree_set(0u8..10, 0..6), b in proptest::collection::btree_set(0u8..10, 0..6)) {
            prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
            let j = jaccard(&a, &b);
            prop_assert!((0.0..=1.0).contains(&j));
            if !a.is_empty() {
                prop_assert_eq!(jaccard(&a, &a), 1.0);
            }
        }
    }
}
