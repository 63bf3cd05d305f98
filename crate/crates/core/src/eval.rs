//! Metrics: per-class and macro AUC for the drug-class task, head / tail /
//! average accuracy for the combination task, and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ehr::{ComboLabel, DrugClass, DrugComboVocab, DrugSet};
use crate::error::{Error, Result};
use crate::models::{Model, Prediction, Task};
use crate::preprocess::{PatientSeq, Position};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Mann–Whitney AUC with average ranks for ties: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
/// `None` when either class is empty.
pub fn auc(scores: &[(f64, bool)]) -> Option<f64> {
    let pos = scores.iter().filter(|(_, y)| *y).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| scores[k].1).count();
        rank_sum_pos += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Plain mean of the defined values.
pub fn macro_average(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub class: String,
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub per_class: Vec<ClassAuc>,
    /// Mean over classes with a defined AUC.
    pub macro_average: Option<f64>,
    pub warnings: Vec<String>,
}

/// Per-class AUC over `(scores, label)` pairs with 7 scores each.
pub fn auc_report(rows: &[(Vec<f64>, DrugSet)]) -> Result<AucReport> {
    let mut per_class = Vec::with_capacity(DrugClass::COUNT);
    let mut warnings = Vec::new();
    for class in DrugClass::ALL {
        let j = class.ordinal();
        let pairs = rows
            .iter()
            .map(|(s, y)| {
                if s.len() != DrugClass::COUNT {
                    return Err(Error::Shape {
                        op: "auc_report",
                        left: (1, DrugClass::COUNT),
                        right: (1, s.len()),
                    });
                }
                Ok((s[j], y.contains(class)))
            })
            .collect::<Result<Vec<_>>>()?;
        let positives = pairs.iter().filter(|(_, y)| *y).count();
        let value = auc(&pairs);
        if value.is_none() {
            let msg = format!(
                "AUC undefined for {} ({positives} positives, {} negatives); excluded from the average",
                class.name(),
                pairs.len() - positives
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        per_class.push(ClassAuc {
            class: class.name().to_string(),
            auc: value,
            positives,
            negatives: pairs.len() - positives,
        });
    }
    let macro_average = macro_average(&per_class.iter().map(|c| c.auc).collect::<Vec<_>>());
    Ok(AucReport {
        per_class,
        macro_average,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub hits: usize,
    pub samples: usize,
}

impl Accuracy {
    pub fn value(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.hits as f64 / self.samples as f64)
    }

    fn record(&mut self, hit: bool) {
        self.samples += 1;
        self.hits += usize::from(hit);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccReport {
    pub head: Accuracy,
    pub tail: Accuracy,
    pub average: Accuracy,
}

/// Head / tail / average accuracy. `predicted[i] = None` is an abstention:
/// a head-case abstention is left out of the head row, every abstention is
/// a miss in the average. An unknown true label is always a miss.
pub fn accuracy_breakdown(predicted: &[Option<usize>], truth: &[(ComboLabel, Position)]) -> Result<AccReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} cases",
            predicted.len(),
            truth.len()
        )));
    }
    let mut r = AccReport::default();
    for (p, &(label, pos)) in predicted.iter().zip(truth) {
        let hit = matches!((p, label), (Some(a), Some(b)) if *a == b);
        r.average.record(hit);
        match pos {
            Position::Head if p.is_some() => r.head.record(hit),
            Position::Tail => r.tail.record(hit),
            _ => {}
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub model: String,
    pub task: String,
    pub mode: String,
    pub split: String,
    pub cases: usize,
    pub vocab_fingerprint: String,
    pub run_config: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<AucReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<AccReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table: class rows plus "Average" for AUC, or
    /// Head / Tail / Average rows for accuracy.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "--".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            out,
            "{} {} ({}, {} split, {} cases)",
            self.model, self.task, self.mode, self.split, self.cases
        );
        if let Some(a) = &self.auc {
            let _ = writeln!(out, "{:<14} {:>8} {:>8} {:>8}", "Class", "AUC", "Pos", "Neg");
            for c in &a.per_class {
                let _ = writeln!(
                    out,
                    "{:<14} {:>8} {:>8} {:>8}",
                    c.class,
                    fmt(c.auc),
                    c.positives,
                    c.negatives
                );
            }
            let _ = writeln!(out, "{:<14} {:>8}", "Average", fmt(a.macro_average));
        }
        if let Some(a) = &self.accuracy {
            let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>9}", "", "Hit", "Sample", "Accuracy");
            for (name, acc) in [("Head", a.head), ("Tail", a.tail), ("Average", a.average)] {
                let _ = writeln!(
                    out,
                    "{:<10} {:>8} {:>8} {:>9}",
                    name,
                    acc.hits,
                    acc.samples,
                    fmt(acc.value())
                );
            }
        }
        out
    }
}

/// Per-case outputs of a model over a set of patients, in patient then
/// case order.
pub fn collect_predictions(model: &Model, patients: &[PatientSeq], combos: &DrugComboVocab) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for pat in patients {
        let idx: Vec<usize> = (0..pat.cases.len()).collect();
        out.extend(model.predict_patient(pat, &idx, Some(combos))?);
    }
    Ok(out)
}

/// Metrics of the task the model was trained for.
pub fn evaluate_model(
    model: &Model,
    patients: &[PatientSeq],
    combos: &DrugComboVocab,
) -> Result<(Option<AucReport>, Option<AccReport>)> {
    let preds = collect_predictions(model, patients, combos)?;
    let metas: Vec<_> = patients.iter().flat_map(|p| p.cases.iter().copied()).collect();
    match model.spec().task {
        Task::Dc => {
            let rows = preds
                .iter()
                .zip(&metas)
                .map(|(p, m)| {
                    let scores = p
                        .probs()
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; DrugClass::COUNT]);
                    (scores, m.label_dc)
                })
                .collect::<Vec<_>>();
            Ok((Some(auc_report(&rows)?), None))
        }
        Task::Dcc => {
            let predicted: Vec<Option<usize>> = preds.iter().map(Prediction::top).collect();
            let truth: Vec<_> = metas.iter().map(|m| (m.label_dcc, m.position)).collect();
            Ok((None, Some(accuracy_breakdown(&predicted, &truth)?)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(scores: &[(f64, bool)]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for &(sp, yp) in scores {
            for &(sn, yn) in scores {
                if yp && !yn {
                    pairs += 1.0;
                    if sp > sn {
                        num += 1.0;
                    } else if sp == sn {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| num / pairs)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.1, false), (0.2, false), (0.8, true), (0.9, true)]), Some(1.0));
        assert_eq!(auc(&[(0.5, false), (0.5, true), (0.5, true)]), Some(0.5));
        assert_eq!(auc(&[(0.5, true)]), None);
        let six = [
            (0.1, false),
            (0.4, true),
            (0.35, false),
            (0.8, true),
            (0.65, true),
            (0.2, false),
        ];
        assert_eq!(auc(&six), brute(&six));
        assert!((auc(&six).unwrap() - 1.0).abs() < 1e-15);
        let inv = [
            (0.1, false),
            (0.3, true),
            (0.35, false),
            (0.8, true),
            (0.65, true),
            (0.2, false),
        ];
        assert!((auc(&inv).unwrap() - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(2..=50);
            let s: Vec<(f64, bool)> = (0..n)
                .map(|_| ((rng.random_range(0..10) as f64) / 10.0, rng.random_bool(0.4)))
                .collect();
            assert_eq!(auc(&s), brute(&s));
        }
    }

    #[test]
    fn oracle_scores_give_perfect_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<(Vec<f64>, DrugSet)> = (0..200)
            .map(|_| {
                let y = DrugSet::from_bits(rng.random_range(1..128)).unwrap();
                (y.to_vec().to_vec(), y)
            })
            .collect();
        let r = auc_report(&rows).unwrap();
        for c in &r.per_class {
            assert_eq!(c.auc, Some(1.0));
        }
    }

    #[test]
    fn undefined_class_is_excluded() {
        let y = DrugSet::from_classes(&[DrugClass::Insulin]);
        let z = DrugSet::from_classes(&[DrugClass::Biguanides]);
        let rows = vec![(vec![0.3; 7], y), (vec![0.6; 7], z)];
        let r = auc_report(&rows).unwrap();
        let defined: Vec<_> = r.per_class.iter().filter(|c| c.auc.is_some()).collect();
        assert_eq!(defined.len(), 2);
        assert_eq!(r.warnings.len(), 5);
        assert_eq!(r.macro_average, Some(0.5));
    }

    #[test]
    fn macro_average_of_reference_column() {
        let col = [0.9259, 0.9433, 0.9339, 0.9229, 0.9133, 0.9051, 0.9435];
        let avg = macro_average(&col.map(Some)).unwrap();
        assert!((avg - 0.9268).abs() < 1e-4);
        assert_eq!(macro_average(&[None, None]), None);
    }

    #[test]
    fn accuracy_rows() {
        use Position::*;
        let truth = vec![(Some(0), Head), (Some(1), Mid), (Some(1), Tail), (None, Tail)];
        let r = accuracy_breakdown(&[Some(0), Some(1), Some(1), Some(0)], &truth).unwrap();
        assert_eq!(r.head, Accuracy { hits: 1, samples: 1 });
        assert_eq!(r.tail, Accuracy { hits: 1, samples: 2 });
        assert_eq!(r.average, Accuracy { hits: 3, samples: 4 });
        let r = accuracy_breakdown(&[None, Some(1), None, None], &truth).unwrap();
        assert_eq!(r.head.samples, 0);
        assert_eq!(r.head.value(), None);
        assert_eq!(r.average, Accuracy { hits: 1, samples: 4 });
        assert!(accuracy_breakdown(&[None], &truth).is_err());
    }

    #[test]
    fn prev_style_counting_matches_reference_ratio() {
        // 400,684 stays over 620,633 cases, scaled 1:1000
        let total = 621;
        let stays = 401;
        let truth: Vec<_> = (0..total).map(|_| (Some(0), Position::Mid)).collect();
        let pred: Vec<_> = (0..total).map(|i| Some(usize::from(i >= stays))).collect();
        let r = accuracy_breakdown(&pred, &truth).unwrap();
        assert!((r.average.value().unwrap() - 0.6456).abs() < 0.002);
    }

    #[test]
    fn table_rendering() {
        let rep = Report {
            schema_version: REPORT_SCHEMA_VERSION,
            model: "rnn".into(),
            task: "dcc".into(),
            mode: "with_prev".into(),
            split: "test".into(),
            cases: 3,
            vocab_fingerprint: "x".into(),
            run_config: String::new(),
            auc: None,
            accuracy: Some(AccReport::default()),
        };
        let t = rep.to_table();
        assert!(t.contains("Head") && t.contains("Average") && t.contains("--"));
        assert_eq!(rep.to_json(), rep.to_json());
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(s in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)) {
            let t: Vec<(f64, bool)> = s.iter().map(|&(x, y)| (x.exp() * 3.0 + 1.0, y)).collect();
            let (a, b) = (auc(&s), auc(&t));
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn head_plus_rest_partition(n in 1usize..60, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<_> = (0..n).map(|_| {
                let pos = [Position::Head, Position::Mid, Position::Tail][rng.random_range(0..3)];
                (Some(rng.random_range(0..3)), pos)
            }).collect();
            let pred: Vec<_> = (0..n).map(|_| Some(rng.random_range(0..3))).collect();
            let r = accuracy_breakdown(&pred, &truth).unwrap();
            let mid_hits = pred.iter().zip(&truth).filter(|(p, t)| t.1 == Position::Mid && **p == t.0).count();
            prop_assert_eq!(r.head.hits + r.tail.hits + mid_hits, r.average.hits);
        }
    }
}
