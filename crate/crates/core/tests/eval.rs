use cmaclip::eval::{accuracy, pr_curve, recall_at_precision, report_from_scores};
use cmaclip::{Error, TaskSpec};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

// Twelve examples over three classes; the expected recalls were worked out
// by hand from the sorted per-class scores.
fn fixture() -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
    let probs = vec![
        vec![0.7, 0.2, 0.1],
        vec![0.6, 0.3, 0.1],
        vec![0.4, 0.5, 0.1],
        vec![0.2, 0.1, 0.7],
        vec![0.1, 0.8, 0.1],
        vec![0.5, 0.4, 0.1],
        vec![0.2, 0.6, 0.2],
        vec![0.3, 0.45, 0.25],
        vec![0.1, 0.1, 0.8],
        vec![0.15, 0.25, 0.6],
        vec![0.05, 0.2, 0.75],
        vec![0.45, 0.3, 0.25],
    ];
    let labels = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2].map(Some).to_vec();
    (probs, labels)
}

fn column(probs: &[Vec<f64>], k: usize) -> Vec<f64> {
    probs.iter().map(|r| r[k]).collect()
}

#[test]
fn hand_computed_fixture() {
    let (probs, labels) = fixture();
    let pos = |k| labels.iter().map(|&y| y == Some(k)).collect::<Vec<_>>();
    let expected = [(0.7, [0.5, 1.0, 0.75]), (0.9, [0.5, 0.5, 0.5]), (0.6, [0.75, 1.0, 1.0])];
    for (p, recalls) in expected {
        for (k, want) in recalls.iter().enumerate() {
            let got = recall_at_precision(&column(&probs, k), &pos(k), p).unwrap();
            assert!(close(got, *want), "class {k} at {p}: {got} != {want}");
        }
    }

    let tasks = vec![TaskSpec { name: "t".into(), n_classes: 3 }];
    let report = report_from_scores(&tasks, &[probs], &[labels], 0.7).unwrap();
    let t = &report.tasks[0];
    assert_eq!(t.n_labelled, 12);
    assert!(close(t.accuracy, 8.0 / 12.0));
    assert_eq!(t.per_class_recall, vec![Some(0.5), Some(1.0), Some(0.75)]);
    assert!(close(t.macro_recall, 0.75));
    assert!(close(report.mean_macro_recall, 0.75));
}

#[test]
fn curve_groups_tied_scores() {
    let (probs, labels) = fixture();
    let pos: Vec<bool> = labels.iter().map(|&y| y == Some(0)).collect();
    let curve = pr_curve(&column(&probs, 0), &pos).unwrap();
    let at = |t: f64| curve.iter().find(|p| p.threshold == t).unwrap();
    let tie = at(0.2);
    assert_eq!((tie.tp, tie.fp, tie.fn_), (4, 4, 0));
    assert!(close(at(0.4).precision, 0.6));
    assert_eq!(curve.len(), 10);
    assert!(curve.windows(2).all(|w| w[0].threshold > w[1].threshold && w[0].recall <= w[1].recall));
}

#[test]
fn macro_average_skips_classes_without_positives() {
    let (probs, _) = fixture();
    let labels: Vec<Option<usize>> = (0..12).map(|i| (i < 6).then_some(0)).collect();
    let two: Vec<Vec<f64>> = probs.iter().map(|r| vec![r[0], 1.0 - r[0]]).collect();
    let tasks = vec![TaskSpec { name: "b".into(), n_classes: 2 }];
    let report = report_from_scores(&tasks, &[two], &[labels], 0.9).unwrap();
    let t = &report.tasks[0];
    assert_eq!(t.n_labelled, 6);
    assert_eq!(t.per_class_recall, vec![Some(1.0), None]);
    assert!(close(t.macro_recall, 1.0));
}

#[test]
fn macro_recall_is_mean_of_per_class_values() {
    let (probs, labels) = fixture();
    let tasks = vec![TaskSpec { name: "t".into(), n_classes: 3 }];
    for p in [0.5, 0.6, 0.75, 0.8, 1.0] {
        let r = report_from_scores(&tasks, &[probs.clone()], &[labels.clone()], p).unwrap();
        let t = &r.tasks[0];
        let mean = t.per_class_recall.iter().flatten().sum::<f64>() / 3.0;
        assert!(close(t.macro_recall, mean));
    }
}

#[test]
fn metric_edge_cases() {
    assert!(matches!(recall_at_precision(&[0.1, 0.2], &[false, false], 0.5), Err(Error::NoPositives)));
    assert!(recall_at_precision(&[0.1], &[true], 0.0).is_err());
    assert!(recall_at_precision(&[0.1], &[true], 1.5).is_err());
    assert!(recall_at_precision(&[f64::NAN], &[true], 0.5).is_err());
    assert!(recall_at_precision(&[0.1, 0.2], &[true], 0.5).is_err());
    assert_eq!(recall_at_precision(&[0.9, 0.1], &[false, true], 0.9).unwrap(), 0.0);
    assert_eq!(recall_at_precision(&[0.9, 0.1], &[true, false], 1.0).unwrap(), 1.0);

    assert_eq!(accuracy(&[1, 0, 2], &[Some(1), None, Some(0)]).unwrap(), 0.5);
    assert!(matches!(accuracy(&[1], &[None]), Err(Error::Empty(_))));
    assert!(accuracy(&[1, 2], &[Some(1)]).is_err());
}
