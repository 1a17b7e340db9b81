use canet::metrics::*;
use canet::rng::RngState;
use canet::Error;

/// All-pairs Mann–Whitney count.
fn auc_pairs(scores: &[f64], pos: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn auc_hand_cases() {
    assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(auc(&[0.1], &[true, false]), Err(Error::Usage(_))));
}

#[test]
fn auc_matches_pair_oracle() {
    let mut rng = RngState::new(4);
    for _ in 0..50 {
        let n = 50;
        // Coarse scores force many ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(8) as f64) / 8.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let a = auc(&scores, &pos).unwrap();
        assert!((a - auc_pairs(&scores, &pos)).abs() < 1e-12);
    }
}

#[test]
fn auc_ovr_binary_uses_positive_class() {
    let probs = [0.8, 0.2, 0.3, 0.7, 0.6, 0.4];
    let labels = [0, 1, 1];
    let want = auc(&[0.2, 0.7, 0.4], &[false, true, true]).unwrap();
    assert_eq!(auc_ovr(&probs, &labels, 2).unwrap(), want);
    // Three classes, class 2 absent: averaged over the two defined classes.
    let p3 = [0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.6, 0.3, 0.1];
    let l3 = [0, 1, 0];
    let v = auc_ovr(&p3, &l3, 3).unwrap();
    assert_eq!(v, 1.0);
}

#[test]
fn joint_accuracy_hand_count() {
    let preds = [(1, 0), (1, 2), (0, 0)];
    let labels = [(1, 0), (1, 1), (1, 0)];
    assert!((joint_accuracy(&preds, &labels).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(joint_accuracy(&labels, &labels).unwrap(), 1.0);
    assert!(matches!(joint_accuracy(&preds[..2], &labels), Err(Error::Usage(_))));
}

#[test]
fn joint_accuracy_matches_loop() {
    let mut rng = RngState::new(8);
    for _ in 0..100 {
        let n = 1 + rng.below(40);
        let p: Vec<(usize, usize)> = (0..n).map(|_| (rng.below(2), rng.below(3))).collect();
        let l: Vec<(usize, usize)> = (0..n).map(|_| (rng.below(2), rng.below(3))).collect();
        let mut hits = 0;
        for i in 0..n {
            if p[i].0 == l[i].0 && p[i].1 == l[i].1 {
                hits += 1;
            }
        }
        assert_eq!(joint_accuracy(&p, &l).unwrap(), hits as f64 / n as f64);
    }
}

#[test]
fn prf1_binary_half() {
    let r = prf1_confusion(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
}

#[test]
fn prf1_perfect_and_three_class_fixture() {
    let r = prf1_confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);

    // labels 0 0 1 1 2 2, preds 0 1 1 1 0 2
    // class 0: tp 1, pred 2, support 2 → P .5 R .5
    // class 1: tp 2, pred 3, support 2 → P 2/3 R 1
    // class 2: tp 1, pred 1, support 2 → P 1 R .5
    let r = prf1_confusion(&[0, 1, 1, 1, 0, 2], &[0, 0, 1, 1, 2, 2], 3).unwrap();
    let p = (0.5 + 2.0 / 3.0 + 1.0) / 3.0;
    let rc = (0.5 + 1.0 + 0.5) / 3.0;
    let f = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
    assert!((r.precision - p).abs() < 1e-12);
    assert!((r.recall - rc).abs() < 1e-12);
    assert!((r.f1 - f).abs() < 1e-12);
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 6);
    for (c, row) in r.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), r.per_class[c].support);
    }
}

#[test]
fn prf1_flags_zero_support_and_range() {
    let r = prf1_confusion(&[0, 0], &[0, 0], 3).unwrap();
    assert_eq!(r.zero_support, vec![1, 2]);
    assert!((r.precision - 1.0 / 3.0).abs() < 1e-12);
    assert!(matches!(prf1_confusion(&[3], &[0], 3), Err(Error::Data(_))));
}

#[test]
fn report_serializes() {
    let a = DiseaseMetrics::compute(&[0, 1], &[0.9, 0.1, 0.2, 0.8], &[0, 1], 2).unwrap();
    assert_eq!(a.auc, Some(1.0));
    assert_eq!(a.precision_pos, Some(1.0));
    let one = DiseaseMetrics::compute(&[0, 0], &[0.9, 0.1, 0.6, 0.4], &[0, 0], 2).unwrap();
    assert_eq!(one.auc, None);
    let rep = MetricsReport {
        n: 2,
        joint_accuracy: Some(1.0),
        a: Some(a),
        b: None,
    };
    let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(v["joint_accuracy"], 1.0);
    assert_eq!(rep.csv_row().split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
}
