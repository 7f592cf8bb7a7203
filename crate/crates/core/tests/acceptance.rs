//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 9 and 11 share one desk-scale experiment run (hours on a
//! single core); set `ECHOCLR_ACCEPTANCE_SKIP_SLOW=1` to skip both, which is
//! reported as SKIP and still fails the run.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use echoclr::datamodel::titration_count;
use echoclr::evaluate::{bootstrap_interval, paired_auc_test, roc_auc};
use echoclr::experiment::{assess_claims, run_label_efficiency, LabelEfficiencyConfig};
use echoclr::explain::{gradcam_volume, temporal_max, upsample_volume};
use echoclr::model::{EchoNet, ModelConfig};
use echoclr::nn::Tensor;
use echoclr::pretrain::{nt_xent_loss, reorder_ce_loss, PretrainMode};
use echoclr::rng;
use echoclr::sampleaug::{factorial, perm_decode, perm_encode};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

/// Direct evaluation of the contrastive loss: rows `i` and `i + N` are
/// positives, every other row is a negative, averaged over all 2N anchors.
fn nt_xent_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let m = z.len();
    let n = m / 2;
    let mut total = 0.0;
    for i in 0..m {
        let j = (i + n) % m;
        let num = (cos(&z[i], &z[j]) / tau).exp();
        let den: f64 = (0..m)
            .filter(|&k| k != i)
            .map(|k| (cos(&z[i], &z[k]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / m as f64
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut r = rng::seeded(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=8);
        let d = r.gen_range(1..=16);
        let tau = [0.1, 0.5, 1.0][r.gen_range(0..3)];
        let z: Vec<Vec<f64>> = (0..2 * n)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect();
        let got = nt_xent_loss(&z, tau).unwrap();
        worst = worst.max((got - nt_xent_oracle(&z, tau)).abs());
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-6 && within(Duration::from_secs(10), t),
        format!("max |diff| {worst:.2e} over 1000 batches, {:.2} s", t.as_secs_f64()),
    )
}

fn criterion_2() -> Verdict {
    let single = nt_xent_loss(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.7]], 0.5).unwrap();
    let basis = |k: usize| (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let ortho = nt_xent_loss(&[basis(0), basis(1), basis(2), basis(3)], 0.5).unwrap();
    let uniform = reorder_ce_loss(&[vec![0.7; 24], vec![-3.0; 24]], &[5, 23]).unwrap();
    let pass = single == 0.0 && (ortho - 3f64.ln()).abs() <= 1e-9 && (uniform - 24f64.ln()).abs() <= 1e-9;
    verdict(
        pass,
        format!(
            "single pair {single:e}, orthogonal {:.2e} from log 3, uniform logits {:.2e} from log 24",
            (ortho - 3f64.ln()).abs(),
            (uniform - 24f64.ln()).abs()
        ),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut total = 0;
    let mut pass = true;
    for k in 1..=6 {
        let mut seen = HashSet::new();
        for rank in 0..factorial(k) {
            let order = perm_decode(rank, k).unwrap();
            let mut sorted = order.clone();
            sorted.sort_unstable();
            pass &= sorted == (0..k).collect::<Vec<_>>();
            pass &= perm_encode(&order).unwrap() == rank;
            pass &= seen.insert(order);
            total += 1;
        }
        pass &= perm_decode(factorial(k), k).is_err();
    }
    let t = start.elapsed();
    pass &= total == 873 && within(Duration::from_secs(1), t);
    verdict(pass, format!("{total} ranks round-trip, {:.3} s", t.as_secs_f64()))
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let (worst, n) = common::max_rel_error(PretrainMode::EchoClr);
    let t = start.elapsed();
    verdict(
        worst <= 1e-4 && within(Duration::from_secs(60), t),
        format!(
            "max relative error {worst:.2e} over {n} parameters, {:.1} s",
            t.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Verdict {
    let ratios = [0.01, 0.05, 0.10, 0.25, 0.50, 1.00];
    let expected = [
        (5194, [51, 259, 519, 1298, 2597, 5194]),
        (5311, [53, 265, 531, 1327, 2655, 5311]),
    ];
    let mut mismatches = Vec::new();
    for (total, counts) in expected {
        for (r, c) in ratios.iter().zip(counts) {
            let got = titration_count(total, *r);
            if got != c {
                mismatches.push(format!("{total}x{r}={got} (want {c})"));
            }
        }
    }
    let detail = if mismatches.is_empty() {
        "12/12 counts exact".to_string()
    } else {
        mismatches.join(", ")
    };
    verdict(mismatches.is_empty(), detail)
}

fn criterion_6() -> Verdict {
    let mut r = rng::seeded(606);
    let mut done = 0;
    let mut bad = 0;
    while done < 1000 {
        let n = r.gen_range(2..=8);
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64 / 4.0).collect();
        let (mut credit, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                credit += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        if roc_auc(&scores, &labels).unwrap() != credit / pairs {
            bad += 1;
        }
        done += 1;
    }
    verdict(bad == 0, format!("{} of {done} datasets agree exactly", done - bad))
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let (n, b, sims, p) = (200, 10_000, 200, 0.3);
    let mut covered = 0;
    for s in 0..sims {
        let mut r = rng::stream(707, &[rng::tag("coverage-data"), s as u64]);
        let x: Vec<f64> = (0..n).map(|_| if r.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        let stat = |idx: &[usize]| Ok(idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64);
        let ([lo, hi], _) = bootstrap_interval(n, b, 0.95, rng::tag("coverage") ^ s as u64, stat).unwrap();
        if lo <= p && p <= hi {
            covered += 1;
        }
    }
    let coverage = covered as f64 / sims as f64;
    let t = start.elapsed();
    verdict(
        (0.92..=0.98).contains(&coverage) && within(Duration::from_secs(300), t),
        format!(
            "coverage {coverage:.3} over {sims} simulations, {:.1} s",
            t.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Verdict {
    let mut r = rng::seeded(808);
    let labels: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
    let strong: Vec<f64> = labels
        .iter()
        .map(|&y| r.gen::<f64>() + if y { 0.8 } else { 0.0 })
        .collect();
    let weak: Vec<f64> = labels
        .iter()
        .map(|&y| r.gen::<f64>() + if y { 0.1 } else { 0.0 })
        .collect();
    let same = paired_auc_test(&strong, &strong, &labels, 2000, 1, false).unwrap();
    let dom = paired_auc_test(&strong, &weak, &labels, 10_000, 8, false).unwrap();
    verdict(
        (same.p - 0.5).abs() <= 1e-9 && dom.p < 0.01,
        format!(
            "identical p={}, dominating d={:.4} z={:.3} p={:.3e}",
            same.p, dom.d, dom.z, dom.p
        ),
    )
}

fn criteria_9_and_11() -> (Verdict, Verdict) {
    let start = Instant::now();
    let config = LabelEfficiencyConfig::standard();
    let work = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_label_efficiency");
    std::fs::create_dir_all(&work).unwrap();
    let log_path = work.join("run.jsonl");
    let mut log = std::fs::File::create(&log_path).unwrap();
    let report = match run_label_efficiency(&config, &work, Some(&mut log)) {
        Ok(r) => r,
        Err(e) => {
            let v = || verdict(false, format!("experiment failed: {e}"));
            return (v(), v());
        }
    };
    let t = start.elapsed();
    std::fs::write(work.join("report.json"), serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let nine = match assess_claims(&report, 0.05, 1.0, 0.05, 0.02) {
        Some(c) => verdict(
            c.beats_random && c.ordering && c.saturates && within(Duration::from_secs(4 * 3600), t),
            format!(
                "medians over {} seeds: gain@0.05 {:+.3} (min 0.05), gain@1.0 {:+.3}, echoclr {:.3} / mi_simclr {:.3} / simclr {:.3} at 0.05; (a) {} (b) {} (c) {}; {:.0} min",
                config.seeds.len(),
                c.gain_at_low,
                c.gain_at_full,
                c.echoclr_low,
                c.mi_simclr_low,
                c.simclr_low,
                c.beats_random,
                c.ordering,
                c.saturates,
                t.as_secs_f64() / 60.0
            ),
        ),
        None => verdict(false, "missing arms or ratios in the report".into()),
    };
    let acc = &report.reorder_accuracy;
    let chance3 = 3.0 / factorial(config.pretrain.k) as f64;
    let eleven = verdict(
        !acc.is_empty() && acc.iter().all(|&a| a > chance3),
        format!(
            "held-out reorder accuracy per seed {:?} (need > {chance3:.3} each)",
            acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    );
    (nine, eleven)
}

fn criterion_10() -> Verdict {
    let start = Instant::now();
    let net = EchoNet::<f32>::random(ModelConfig::full(), 10).unwrap();
    let mut r = rng::seeded(1010);
    let x = Tensor::from_vec(
        &[1, 1, 32, 112, 112],
        (0..32 * 112 * 112).map(|_| r.gen::<f32>()).collect(),
    )
    .unwrap();
    let vol = gradcam_volume(&net, &x).unwrap();
    let up = upsample_volume(&vol, (112, 112, 32)).unwrap();
    let map = temporal_max(&up);
    let t = start.elapsed();
    let nonneg = vol
        .values
        .iter()
        .chain(&up.values)
        .chain(&map.values)
        .all(|&v| v >= 0.0);
    let pass = vol.shape() == (7, 7, 4)
        && up.shape() == (112, 112, 32)
        && (map.height, map.width) == (112, 112)
        && nonneg
        && within(Duration::from_secs(30), t);
    verdict(
        pass,
        format!(
            "{:?} -> {:?} -> {}x{}, non-negative {nonneg}, {:.1} s",
            vol.shape(),
            up.shape(),
            map.height,
            map.width,
            t.as_secs_f64()
        ),
    )
}

fn main() {
    let skip_slow = std::env::var("ECHOCLR_ACCEPTANCE_SKIP_SLOW").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut report = |id: u32, name: &str, v: Option<Verdict>| {
        let (tag, detail) = match v {
            Some(v) if v.pass => ("PASS", v.detail),
            Some(v) => {
                failed += 1;
                ("FAIL", v.detail)
            }
            None => {
                failed += 1;
                ("SKIP", "skipped by ECHOCLR_ACCEPTANCE_SKIP_SLOW".to_string())
            }
        };
        println!("criterion {id:>2} {tag} {name}: {detail}");
    };
    report(1, "NT-Xent oracle equivalence", Some(criterion_1()));
    report(2, "closed-form loss cases", Some(criterion_2()));
    report(3, "permutation codec", Some(criterion_3()));
    report(4, "gradient check", Some(criterion_4()));
    report(5, "titration counts", Some(criterion_5()));
    report(6, "AUROC oracle", Some(criterion_6()));
    report(7, "bootstrap coverage", Some(criterion_7()));
    report(8, "paired test sanity", Some(criterion_8()));
    report(10, "Grad-CAM shape chain", Some(criterion_10()));
    let (nine, eleven) = if skip_slow {
        (None, None)
    } else {
        let (a, b) = criteria_9_and_11();
        (Some(a), Some(b))
    };
    report(9, "desk-scale label efficiency", nine);
    report(11, "pretext learnability", eleven);
    if failed > 0 {
        println!("{failed} criteria not passed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
