//! Study-level aggregation, ranking metrics and bootstrap inference.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_REPLICATES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyPrediction {
    pub study_id: String,
    pub video_probs: Vec<f64>,
    pub study_prob: f64,
    pub label: bool,
}

/// Mean video probability per study, in study-id order.
pub fn aggregate_to_study(
    video_probs: &BTreeMap<String, Vec<f64>>,
    labels: &HashMap<String, bool>,
) -> Result<Vec<StudyPrediction>> {
    video_probs
        .iter()
        .map(|(id, probs)| {
            if probs.is_empty() {
                return Err(Error::EmptyStudy(id.clone()));
            }
            let label = *labels
                .get(id)
                .ok_or_else(|| Error::Config(format!("no label for study {id}")))?;
            Ok(StudyPrediction {
                study_id: id.clone(),
                video_probs: probs.clone(),
                study_prob: probs.iter().sum::<f64>() / probs.len() as f64,
                label,
            })
        })
        .collect()
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Indices sorted by score, with runs of equal scores reported as ranges.
fn tie_groups(scores: &[f64], descending: bool) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=idx.len() {
        if i == idx.len() || scores[idx[i]] != scores[idx[start]] {
            groups.push((start, i));
            start = i;
        }
    }
    (idx, groups)
}

/// Mann-Whitney AUROC: P(score of a positive > score of a negative), ties worth 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 {
        return Err(Error::AurocUndefined("no positive labels"));
    }
    if neg == 0 {
        return Err(Error::AurocUndefined("no negative labels"));
    }
    let (idx, groups) = tie_groups(scores, false);
    // twice the number of (positive, negative) pairs won, ties counting once
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    for (s, e) in groups {
        let p = idx[s..e].iter().filter(|&&i| labels[i]).count() as u64;
        let n = (e - s) as u64 - p;
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Average precision: mean over positives of the precision at their score
/// threshold. Tied scores form one threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::AuprUndefined);
    }
    let (idx, groups) = tie_groups(scores, true);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (s, e) in groups {
        let p = idx[s..e].iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += e - s;
        if p > 0 {
            ap += p as f64 * tp as f64 / seen as f64;
        }
    }
    Ok(ap / pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Aupr,
}

impl Metric {
    pub fn eval(self, scores: &[f64], labels: &[bool]) -> Result<f64> {
        match self {
            Metric::Auroc => roc_auc(scores, labels),
            Metric::Aupr => pr_auc(scores, labels),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Aupr => "aupr",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auroc" => Ok(Metric::Auroc),
            "aupr" => Ok(Metric::Aupr),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub point: f64,
    pub ci: [f64; 2],
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub n_discarded: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Replicate statistics from resampling `n` units with replacement.
///
/// Replicate `r` draws from stream `(seed, r)`, so results do not depend on
/// scheduling. Replicates where `stat` fails are dropped and counted.
pub fn bootstrap_replicates<F>(n: usize, b: usize, seed: u64, stat: F) -> (Vec<f64>, usize)
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    let values: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, &[rng::tag("bootstrap"), r as u64]);
            let idx: Vec<usize> = (0..n).map(|_| g.gen_range(0..n)).collect();
            stat(&idx).ok().filter(|v| v.is_finite())
        })
        .collect();
    let discarded = values.iter().filter(|v| v.is_none()).count();
    (values.into_iter().flatten().collect(), discarded)
}

/// Percentile interval over the replicates of `stat`.
pub fn bootstrap_interval<F>(n: usize, b: usize, level: f64, seed: u64, stat: F) -> Result<([f64; 2], usize)>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n == 0 || b == 0 || !(0.0 < level && level < 1.0) {
        return Err(Error::Config(
            "bootstrap needs data, replicates and a level in (0, 1)".into(),
        ));
    }
    let (mut values, discarded) = bootstrap_replicates(n, b, seed, stat);
    if 2 * discarded > b || values.is_empty() {
        return Err(Error::DegenerateBootstrap { discarded, total: b });
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((
        [
            percentile_sorted(&values, alpha),
            percentile_sorted(&values, 1.0 - alpha),
        ],
        discarded,
    ))
}

/// Study-resampled percentile CI for `metric`.
pub fn bootstrap_ci(
    metric: Metric,
    predictions: &[StudyPrediction],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let scores: Vec<f64> = predictions.iter().map(|p| p.study_prob).collect();
    let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
    let point = metric.eval(&scores, &labels)?;
    let (ci, n_discarded) = bootstrap_interval(scores.len(), b, level, seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        metric.eval(&s, &l)
    })?;
    Ok(MetricsReport {
        metric: metric.as_str().into(),
        point,
        ci,
        b,
        seed,
        n_discarded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub d: f64,
    pub sd: f64,
    pub z: f64,
    pub p: f64,
    pub n_discarded: usize,
}

/// One-sided bootstrap test of H1: AUROC(a) > AUROC(b) on paired scores.
///
/// `Z = D / sd(D*)` with the replicate standard deviation using `n - 1`;
/// `p = 1 - Phi(Z)`. With `stratified`, positives and negatives are
/// resampled separately so every replicate keeps both classes.
pub fn paired_auc_test(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    b: usize,
    seed: u64,
    stratified: bool,
) -> Result<PairedTest> {
    check_lengths(scores_a, labels)?;
    check_lengths(scores_b, labels)?;
    let d = roc_auc(scores_a, labels)? - roc_auc(scores_b, labels)?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let stat = |idx: &[usize]| -> Result<f64> {
        let rows: Vec<usize> = if stratified {
            // first |pos| draws index positives, the rest negatives
            idx.iter()
                .enumerate()
                .map(|(j, &k)| {
                    if j < pos.len() {
                        pos[k % pos.len()]
                    } else {
                        neg[k % neg.len()]
                    }
                })
                .collect()
        } else {
            idx.to_vec()
        };
        let l: Vec<bool> = rows.iter().map(|&i| labels[i]).collect();
        let sa: Vec<f64> = rows.iter().map(|&i| scores_a[i]).collect();
        let sb: Vec<f64> = rows.iter().map(|&i| scores_b[i]).collect();
        Ok(roc_auc(&sa, &l)? - roc_auc(&sb, &l)?)
    };
    let (values, discarded) = if stratified {
        stratified_replicates(pos.len(), neg.len(), b, seed, stat)
    } else {
        bootstrap_replicates(labels.len(), b, seed, stat)
    };
    if 2 * discarded > b || values.len() < 2 {
        return Err(Error::DegenerateBootstrap { discarded, total: b });
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    let sd = var.sqrt();
    let (z, p) = if sd > 0.0 {
        let z = d / sd;
        (z, 1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(z))
    } else if d > 0.0 {
        (f64::INFINITY, 0.0)
    } else if d < 0.0 {
        (f64::NEG_INFINITY, 1.0)
    } else {
        (0.0, 0.5)
    };
    Ok(PairedTest {
        d,
        sd,
        z,
        p,
        n_discarded: discarded,
    })
}

fn stratified_replicates<F>(n_pos: usize, n_neg: usize, b: usize, seed: u64, stat: F) -> (Vec<f64>, usize)
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    let values: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, &[rng::tag("bootstrap-stratified"), r as u64]);
            let mut idx: Vec<usize> = (0..n_pos).map(|_| g.gen_range(0..n_pos)).collect();
            idx.extend((0..n_neg).map(|_| g.gen_range(0..n_neg)));
            stat(&idx).ok().filter(|v| v.is_finite())
        })
        .collect();
    let discarded = values.iter().filter(|v| v.is_none()).count();
    (values.into_iter().flatten().collect(), discarded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0u64, 0u64);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 2;
                    num += if scores[i] > scores[j] {
                        2
                    } else if scores[i] == scores[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        num as f64 / den as f64
    }

    /// Average precision from the explicit definition over distinct thresholds.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut total = 0.0;
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            let at = scores.iter().filter(|&&s| s >= scores[i]).count() as f64;
            let tp = (0..scores.len())
                .filter(|&j| labels[j] && scores[j] >= scores[i])
                .count() as f64;
            total += tp / at;
        }
        total / pos
    }

    #[test]
    fn aggregation() {
        let mut probs = BTreeMap::new();
        probs.insert("a".to_string(), vec![0.2, 0.4]);
        probs.insert("b".to_string(), vec![0.9]);
        let labels: HashMap<String, bool> = [("a".to_string(), true), ("b".to_string(), false)].into();
        let s = aggregate_to_study(&probs, &labels).unwrap();
        assert!((s[0].study_prob - 0.3).abs() < 1e-15);
        assert_eq!(s[1].study_prob, 0.9);
        probs.insert("a".to_string(), vec![0.4, 0.2]);
        assert!((aggregate_to_study(&probs, &labels).unwrap()[0].study_prob - 0.3).abs() < 1e-15);
        probs.insert("a".to_string(), vec![]);
        assert!(matches!(aggregate_to_study(&probs, &labels), Err(Error::EmptyStudy(_))));
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert_eq!(
            roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
        let e = roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert!(e.to_string().contains("AUROC undefined"));
    }

    #[test]
    fn aupr_cases() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let mut s: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
        let mut l = vec![false; 10];
        l[0] = true;
        assert_eq!(pr_auc(&s, &l).unwrap(), 1.0);
        s.truncate(4);
        let v = pr_auc(&s, &[true, false, true, false]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(pr_auc(&s, &[false; 4]), Err(Error::AuprUndefined)));
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let preds: Vec<StudyPrediction> = (0..20)
            .map(|i| StudyPrediction {
                study_id: format!("{i}"),
                video_probs: vec![i as f64],
                study_prob: i as f64,
                label: i >= 10,
            })
            .collect();
        // separable everywhere it is defined
        let r = bootstrap_ci(Metric::Auroc, &preds, 500, 0.95, 3).unwrap();
        assert_eq!(r.ci, [1.0, 1.0]);
        let again = bootstrap_ci(Metric::Auroc, &preds, 500, 0.95, 3).unwrap();
        assert_eq!(r, again);
        // 1 positive of 4: a resample lacks it with probability 0.75^4
        let few: Vec<StudyPrediction> = preds[7..11].to_vec();
        let r = bootstrap_ci(Metric::Auroc, &few, 2000, 0.95, 3).unwrap();
        let rate = r.n_discarded as f64 / 2000.0;
        assert!((rate - 0.75f64.powi(4) - 0.25f64.powi(4)).abs() < 0.04, "{rate}");
        // a statistic undefined on most resamples is rejected
        let e = bootstrap_interval(10, 400, 0.95, 3, |idx| {
            if idx[0] < 7 {
                Err(Error::AuprUndefined)
            } else {
                Ok(1.0)
            }
        });
        assert!(matches!(e, Err(Error::DegenerateBootstrap { .. })), "{e:?}");
    }

    #[test]
    fn paired_test_cases() {
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let a: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
        let b: Vec<f64> = labels.iter().map(|&l| if l { 0.1 } else { 0.9 }).collect();
        let same = paired_auc_test(&a, &a, &labels, 200, 1, false).unwrap();
        assert_eq!(same.p, 0.5);
        let dom = paired_auc_test(&a, &b, &labels, 200, 1, false).unwrap();
        assert!(dom.p < 0.001, "{dom:?}");

        let noisy_a: Vec<f64> = (0..100)
            .map(|i| ((i * 37) % 101) as f64 + if i % 2 == 0 { 30.0 } else { 0.0 })
            .collect();
        let noisy_b: Vec<f64> = (0..100).map(|i| ((i * 53) % 97) as f64).collect();
        let ab = paired_auc_test(&noisy_a, &noisy_b, &labels, 500, 4, false).unwrap();
        let ba = paired_auc_test(&noisy_b, &noisy_a, &labels, 500, 4, false).unwrap();
        assert!((ab.p + ba.p - 1.0).abs() < 1e-12);
        let strat = paired_auc_test(&noisy_a, &noisy_b, &labels, 500, 4, true).unwrap();
        assert_eq!(strat.n_discarded, 0);
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 1.0), 4.0);
        assert!((percentile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=8).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..5, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 4.0).collect()),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn auroc_matches_pair_counting((scores, labels) in dataset()) {
            match roc_auc(&scores, &labels) {
                Ok(v) => prop_assert_eq!(v, pair_count_oracle(&scores, &labels)),
                Err(_) => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)),
            }
        }

        #[test]
        fn aupr_matches_definition((scores, labels) in dataset()) {
            if labels.iter().any(|&l| l) {
                prop_assert!((pr_auc(&scores, &labels).unwrap() - ap_oracle(&scores, &labels)).abs() < 1e-12);
            }
        }

        #[test]
        fn auroc_rank_invariances(seed in any::<u64>()) {
            let mut g = rng::seeded(seed);
            let scores: Vec<f64> = (0..12).map(|_| g.gen_range(-3.0..3.0)).collect();
            let labels: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let mono: Vec<f64> = scores.iter().map(|s| s.exp() * 2.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&mono, &labels).unwrap(), a);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((roc_auc(&neg, &labels).unwrap() + a - 1.0).abs() < 1e-12);
        }
    }
}
