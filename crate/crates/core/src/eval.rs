//! Accuracy and recall-at-precision metrics, evaluation reports and the
//! variant ablation harness.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{dataset_digest, hex, DatasetSplit};
use crate::error::{Error, Result};
use crate::fusion::{FusionVariant, TaskSpec};
use crate::model::{FusionModel, ModelConfig};
use crate::training::{argmax, run_full_schedule, LabeledInputs, TrainConfig, TrainReport};

/// Fraction of labelled examples whose prediction matches.
pub fn accuracy(predictions: &[usize], labels: &[Option<usize>]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, y) in predictions.iter().zip(labels) {
        if let Some(y) = y {
            n += 1;
            hit += usize::from(p == y);
        }
    }
    if n == 0 {
        return Err(Error::Empty("set of labelled examples".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// One operating point: examples scoring at least `threshold` are called
/// positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Operating points at every distinct score, from the highest threshold
/// down.
pub fn pr_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<PRPoint>> {
    if scores.len() != positives.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {bad} is not a number")));
    }
    let total_pos = positives.iter().filter(|&&b| b).count();
    if total_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PRPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_pos as f64,
            tp,
            fp,
            fn_: total_pos - tp,
        });
    }
    Ok(points)
}

/// Largest recall over thresholds whose precision reaches `p`; zero when
/// no threshold does.
pub fn recall_at_precision(scores: &[f64], positives: &[bool], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("precision target {p} outside (0, 1]")));
    }
    Ok(pr_curve(scores, positives)?
        .iter()
        .filter(|pt| pt.precision >= p)
        .map(|pt| pt.recall)
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskEval {
    pub task: String,
    /// Examples carrying a label for this task.
    pub n_labelled: usize,
    pub accuracy: f64,
    /// One-vs-rest recall at the target precision; `None` for classes
    /// without positives, which are left out of the macro average.
    pub per_class_recall: Vec<Option<f64>>,
    pub macro_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision_target: f64,
    pub n_examples: usize,
    pub tasks: Vec<TaskEval>,
    pub mean_accuracy: f64,
    pub mean_macro_recall: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Builds a report from `[task][example][class]` probabilities.
pub fn report_from_scores(
    tasks: &[TaskSpec],
    probs: &[Vec<Vec<f64>>],
    labels: &[Vec<Option<usize>>],
    p: f64,
) -> Result<EvalReport> {
    let n_examples = labels.first().map_or(0, Vec::len);
    if n_examples == 0 {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut out = Vec::with_capacity(tasks.len());
    for (t, spec) in tasks.iter().enumerate() {
        let rows: Vec<usize> = (0..n_examples).filter(|&i| labels[t][i].is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        let preds: Vec<usize> = rows.iter().map(|&i| argmax(&probs[t][i])).collect();
        let ys: Vec<Option<usize>> = rows.iter().map(|&i| labels[t][i]).collect();
        let acc = accuracy(&preds, &ys)?;
        let mut per_class = Vec::with_capacity(spec.n_classes);
        for k in 0..spec.n_classes {
            let scores: Vec<f64> = rows.iter().map(|&i| probs[t][i][k]).collect();
            let pos: Vec<bool> = ys.iter().map(|&y| y == Some(k)).collect();
            per_class.push(match recall_at_precision(&scores, &pos, p) {
                Ok(r) => Some(r),
                Err(Error::NoPositives) => None,
                Err(e) => return Err(e),
            });
        }
        out.push(TaskEval {
            task: spec.name.clone(),
            n_labelled: rows.len(),
            accuracy: acc,
            macro_recall: mean(per_class.iter().flatten().copied()),
            per_class_recall: per_class,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("set of labelled examples".into()));
    }
    Ok(EvalReport {
        precision_target: p,
        n_examples,
        mean_accuracy: mean(out.iter().map(|t| t.accuracy)),
        mean_macro_recall: mean(out.iter().map(|t| t.macro_recall)),
        tasks: out,
    })
}

/// Inference over `data`: softmax confidences per task, accuracy and macro
/// recall at precision `p`.
pub fn evaluate(model: &FusionModel, data: &LabeledInputs, p: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let probs = model.predict_proba(&data.inputs, 256)?;
    report_from_scores(model.tasks(), &probs, &data.labels, p)
}

// ----- ablation --------------------------------------------------------------------------

pub struct AblationSetup<'a> {
    pub split: &'a DatasetSplit,
    pub tasks: Vec<TaskSpec>,
    /// The variant field is overridden per run.
    pub model: ModelConfig,
    /// The seed field is overridden per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub precision: f64,
    /// Tasks on which the full model should lead the fixed-weight variant.
    pub low_relevance: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub dataset_digest: String,
    pub reports: Vec<EvalReport>,
    pub mean_macro_recall: f64,
    pub mean_accuracy: f64,
    /// Macro recall per task, averaged over seeds.
    pub task_macro_recall: BTreeMap<String, f64>,
    pub low_relevance_macro_recall: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub precision_target: f64,
    pub seeds: Vec<u64>,
    pub train_digest: String,
    pub validation_digest: String,
    pub test_digest: String,
    pub variants: Vec<VariantSummary>,
    pub low_relevance_tasks: Vec<String>,
    /// `full − no_ma` macro recall on the low-relevance tasks.
    pub low_relevance_gap: f64,
    /// `full ≥ no_ma ≥ no_ma_no_sa` on mean macro recall.
    pub ordering_holds: bool,
}

/// Progress callback: variant, seed, and the finished training report.
pub type AblationHook<'a> = &'a mut dyn FnMut(FusionVariant, u64, &TrainReport, &EvalReport);

/// Trains every variant from the same seeds on the same data and compares
/// test-split metrics.
pub fn run_ablation(setup: &AblationSetup<'_>, mut hook: Option<AblationHook<'_>>) -> Result<AblationReport> {
    if setup.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    for name in &setup.low_relevance {
        if !setup.tasks.iter().any(|t| &t.name == name) {
            return Err(Error::InvalidArgument(format!("unknown task `{name}`")));
        }
    }
    let enc = &setup.model.encoder;
    let train = LabeledInputs::from_pairs(&setup.split.train, &setup.tasks, enc)?;
    let val = LabeledInputs::from_pairs(&setup.split.validation, &setup.tasks, enc)?;
    let test = LabeledInputs::from_pairs(&setup.split.test, &setup.tasks, enc)?;
    let digests = [
        hex(&dataset_digest(&setup.split.train)),
        hex(&dataset_digest(&setup.split.validation)),
        hex(&dataset_digest(&setup.split.test)),
    ];

    let variants = [FusionVariant::Full, FusionVariant::NoMa, FusionVariant::NoMaNoSa];
    let mut summaries = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg = setup.model.clone().with_variant(variant);
        let mut reports = Vec::with_capacity(setup.seeds.len());
        for &seed in &setup.seeds {
            let mut model = FusionModel::new(cfg.clone(), seed)?;
            let tc = TrainConfig {
                seed,
                ..setup.train.clone()
            };
            let (_, train_report) = run_full_schedule(&mut model, &train, &val, &tc, None)?;
            let report = evaluate(&model, &test, setup.precision)?;
            if let Some(h) = hook.as_mut() {
                h(variant, seed, &train_report, &report);
            }
            reports.push(report);
        }
        let mut task_macro_recall = BTreeMap::new();
        for t in &setup.tasks {
            let vals = reports
                .iter()
                .filter_map(|r| r.tasks.iter().find(|x| x.task == t.name).map(|x| x.macro_recall));
            task_macro_recall.insert(t.name.clone(), mean(vals));
        }
        summaries.push(VariantSummary {
            variant: variant.as_str().to_string(),
            dataset_digest: hex(&dataset_digest(
                &[&setup.split.train[..], &setup.split.validation[..], &setup.split.test[..]].concat(),
            )),
            mean_macro_recall: mean(reports.iter().map(|r| r.mean_macro_recall)),
            mean_accuracy: mean(reports.iter().map(|r| r.mean_accuracy)),
            low_relevance_macro_recall: mean(setup.low_relevance.iter().map(|n| task_macro_recall[n])),
            task_macro_recall,
            reports,
        });
    }
    if summaries.windows(2).any(|w| w[0].dataset_digest != w[1].dataset_digest) {
        return Err(Error::InvalidArgument("variants saw different datasets".into()));
    }
    let m: Vec<f64> = summaries.iter().map(|s| s.mean_macro_recall).collect();
    Ok(AblationReport {
        precision_target: setup.precision,
        seeds: setup.seeds.clone(),
        train_digest: digests[0].clone(),
        validation_digest: digests[1].clone(),
        test_digest: digests[2].clone(),
        low_relevance_gap: summaries[0].low_relevance_macro_recall - summaries[1].low_relevance_macro_recall,
        low_relevance_tasks: setup.low_relevance.clone(),
        ordering_holds: m[0] >= m[1] && m[1] >= m[2],
        variants: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 2], &[Some(0), Some(1), Some(2)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[Some(0), Some(0)]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[Some(0), Some(1), Some(2), Some(0)]).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 5], &[Some(0), None]).unwrap(), 1.0);
        assert!(accuracy(&[0], &[None]).is_err());
        assert!(accuracy(&[0], &[]).is_err());
    }

    #[test]
    fn recall_at_precision_degenerate_cases() {
        let sep = recall_at_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false], 1.0).unwrap();
        assert_eq!(sep, 1.0);
        let flat = recall_at_precision(&[0.5; 4], &[true, false, true, false], 0.9).unwrap();
        assert_eq!(flat, 0.0);
        assert!(matches!(recall_at_precision(&[0.1], &[false], 0.9), Err(Error::NoPositives)));
        assert!(recall_at_precision(&[0.1], &[true], 0.0).is_err());
    }

    #[test]
    fn pr_curve_points() {
        let pts = pr_curve(&[0.9, 0.7, 0.7, 0.1], &[true, false, true, false]).unwrap();
        let summary: Vec<(usize, usize, usize)> = pts.iter().map(|p| (p.tp, p.fp, p.fn_)).collect();
        assert_eq!(summary, [(1, 0, 1), (2, 1, 0), (2, 2, 0)]);
        assert_eq!(pts[1].precision, 2.0 / 3.0);
    }
}
