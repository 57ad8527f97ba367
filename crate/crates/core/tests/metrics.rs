mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use vxlab::datagen::gen_target;
use vxlab::metrics::{
    confusion, evaluate, f1_score, read_predictions_csv, roc_auc, roc_curve, write_predictions_csv,
    ConfusionMatrix, MetricsReport, MALIGNANT,
};
use vxlab::{CaptureSpec, MiniResNet, Mode};

#[test]
fn direct_counting_oracles_agree_on_random_sets() {
    let (bad, worst) = metric_oracle_failures(2, 1000);
    assert!(bad.is_empty(), "{bad:?}");
    assert!(worst < 1e-9);
}

#[test]
fn worked_example() {
    let cm = confusion(&[1, 0, 1, 0, 1], &[1, 1, 1, 0, 0], 1).unwrap();
    assert_eq!(cm, ConfusionMatrix { tp: 2, fp: 1, fn_: 1, tn: 1 });
    assert_eq!(cm.accuracy(), 0.6);
    for v in [cm.precision(), cm.recall(), cm.f1()] {
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }
    assert!(confusion(&[1], &[1, 0], 1).is_err());
    let perfect = confusion(&[0, 1, 1], &[0, 1, 1], 1).unwrap();
    assert_eq!([perfect.accuracy(), perfect.precision(), perfect.recall(), perfect.f1()], [1.0; 4]);
    let all_pos = confusion(&[1, 1, 1], &[0, 1, 0], 1).unwrap();
    assert_eq!((all_pos.fn_, all_pos.tn), (0, 0));
}

#[test]
fn f1_from_precision_and_recall() {
    let f1 = f1_score(0.516, 0.110);
    assert!((f1 - 0.182).abs() <= 0.002, "{f1}");
    assert_eq!(f1_score(0.0, 0.0), 0.0);
}

#[test]
fn auc_examples() {
    let auc = roc_auc(&[0.9, 0.4, 0.5, 0.1], &[1, 1, 0, 0], 1).unwrap();
    assert_eq!(auc, 0.75);
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 1).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1], 1).unwrap(), 0.5);
    assert!(roc_auc(&[0.1, 0.2], &[1, 1], 1).is_err());
    let roc = roc_curve(&[0.9, 0.4, 0.5, 0.1], &[1, 1, 0, 0], 1).unwrap();
    assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
    let last = roc.last().unwrap();
    assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
}

proptest! {
    #[test]
    fn class_swap_properties(tp in 0usize..50, fp in 0usize..50, fneg in 0usize..50, tn in 0usize..50) {
        prop_assume!(tp + fp + fneg + tn > 0);
        let cm = ConfusionMatrix { tp, fp, fn_: fneg, tn };
        let sw = cm.swapped();
        prop_assert_eq!(cm.accuracy(), sw.accuracy());
        prop_assert_eq!(sw.precision(), ratio(tn, tn + fneg));
        prop_assert_eq!(sw.recall(), ratio(tn, tn + fp));
        prop_assert_eq!(sw.swapped(), cm);
        let (p, r) = (cm.precision(), cm.recall());
        if p + r > 0.0 {
            prop_assert!((cm.f1() - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }
        for v in [cm.accuracy(), p, r, cm.f1(), sw.precision(), sw.recall(), sw.f1()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn auc_is_the_pair_statistic(seed in any::<u64>(), n in 2usize..200) {
        let mut r = rng(seed);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
        let auc = roc_auc(&scores, &labels, 1).unwrap();
        prop_assert!((auc - pair_auc(&scores, &labels, 1)).abs() < 1e-9);
    }
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let mut r = rng(41);
    let n = 500;
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 0)).collect();
    // Scores that separate the true labels well.
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64 * 0.5 + r.random_range(0.0..0.6)).collect();
    assert!(roc_auc(&scores, &labels, 1).unwrap() > 0.9);
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut r);
    let auc = roc_auc(&scores, &shuffled, 1).unwrap();
    assert!((auc - 0.5).abs() < 0.1, "{auc}");
}

#[test]
fn report_recomputes_from_exported_predictions() {
    let samples = gen_target(80, 5).unwrap();
    let mut model = MiniResNet::build(2, 3).unwrap();
    // A few train-mode passes give the running statistics realistic values.
    let norm = vxlab::train::Normalization::default();
    let refs: Vec<_> = samples.iter().take(32).collect();
    let x = vxlab::train::normalize_batch(&refs, None, &norm).unwrap();
    for _ in 0..3 {
        model.forward(&x, Mode::Train, &CaptureSpec::none()).unwrap();
    }
    let eval = evaluate(&model, &samples, 7).unwrap();
    assert_eq!(eval.report.n_samples, 80);
    let repeat = evaluate(&model, &samples, 7).unwrap();
    assert_eq!(repeat.predictions, eval.predictions);
    assert_eq!(repeat.report.values(), eval.report.values());

    let mut csv = Vec::new();
    write_predictions_csv(&mut csv, &eval.predictions).unwrap();
    let header = String::from_utf8(csv.clone()).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "id,label,pred,score_malignant");
    let back = read_predictions_csv(csv.as_slice()).unwrap();
    let labels: Vec<usize> = back.iter().map(|p| p.label).collect();
    let preds: Vec<usize> = back.iter().map(|p| p.pred).collect();
    let scores: Vec<f64> = back.iter().map(|p| p.score_malignant).collect();

    // Offline recomputation with the direct-counting oracles.
    let (tp, fp, fneg, tn) = count_confusion(&preds, &labels, MALIGNANT);
    let r = &eval.report;
    assert_eq!(r.accuracy, ratio(tp + tn, 80));
    assert_eq!(r.precision[1], ratio(tp, tp + fp));
    assert_eq!(r.recall[1], ratio(tp, tp + fneg));
    assert_eq!(r.precision[0], ratio(tn, tn + fneg));
    assert_eq!(r.recall[0], ratio(tn, tn + fp));
    assert!((r.auc - pair_auc(&scores, &labels, MALIGNANT)).abs() < 1e-9);
    for (p, s) in back.iter().zip(&samples) {
        assert_eq!(p.id, s.id);
        assert_eq!(p.label, s.label);
    }
    let again = MetricsReport::from_predictions(&preds, &labels, &scores, 7).unwrap();
    assert_eq!(again.values(), r.values());
    assert!(evaluate(&MiniResNet::build(3, 1).unwrap(), &samples, 1).is_err());
}
