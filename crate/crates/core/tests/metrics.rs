use bnn_core::metrics::{auroc, ece, entropy_ecdf, ood_auroc, write_calibration_csv};
use bnn_core::Tensor;
use proptest::prelude::*;

#[test]
fn ece_cases() {
    let p = Tensor::matrix(4, 2, vec![0.75, 0.25, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75]).unwrap();
    let r = ece(&p, &[0, 1, 1, 0], 10).unwrap();
    assert!((r.ece - 0.25).abs() < 1e-12);
    let perfect = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(ece(&perfect, &[0, 2], 10).unwrap().ece.abs() < 1e-12);
    let bad = Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap();
    assert!(ece(&bad, &[0], 10).is_err());
}

#[test]
fn calibration_csv_layout() {
    let p = Tensor::matrix(2, 2, vec![0.95, 0.05, 0.05, 0.95]).unwrap();
    let r = ece(&p, &[0, 0], 10).unwrap();
    let mut buf = Vec::new();
    write_calibration_csv(&r, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bin_center,confidence,accuracy,count"));
    assert_eq!(lines.count(), 10);
}

#[test]
fn auroc_cases() {
    assert_eq!(auroc(&[0.9, 0.8], &[0.85, 0.1]).unwrap(), 0.75);
    assert_eq!(auroc(&[0.3, 0.5, 0.5], &[0.5, 0.3, 0.5]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.9, 0.95], &[0.1, 0.2]).unwrap(), 1.0);
    assert!(auroc(&[], &[0.1]).is_err());

    let id = Tensor::matrix(2, 2, vec![0.99, 0.01, 0.02, 0.98]).unwrap();
    let ood = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.6, 0.4]).unwrap();
    assert_eq!(ood_auroc(&id, &ood).unwrap(), 1.0);
}

#[test]
fn ecdf_cases() {
    let mixed = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
    let e = entropy_ecdf(&mixed).unwrap();
    assert_eq!(e[0], (0.0, 0.5));
    assert!((e[1].0 - 2f64.ln()).abs() < 1e-15);
    assert_eq!(e[1].1, 1.0);
    let uniform = Tensor::full(&[3, 4], 0.25);
    assert!(entropy_ecdf(&uniform).unwrap().iter().all(|(h, _)| (h - 4f64.ln()).abs() < 1e-12));
}

fn simplex_rows(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), 1..40).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn ece_is_permutation_invariant(rows in simplex_rows(3), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| (seed as usize + i * 7) % 3).collect();
        let t = Tensor::from_rows(&rows)?;
        let base = ece(&t, &labels, 10)?.ece;
        let rev_rows: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let rev_labels: Vec<usize> = labels.iter().rev().copied().collect();
        let rev = ece(&Tensor::from_rows(&rev_rows)?, &rev_labels, 10)?.ece;
        prop_assert!((base - rev).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn single_bin_ece_is_accuracy_gap(rows in simplex_rows(4), offset in 0usize..4) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| (i + offset) % 4).collect();
        let t = Tensor::from_rows(&rows)?;
        let n = rows.len() as f64;
        let mut conf = 0.0;
        let mut acc = 0.0;
        for (row, &l) in rows.iter().zip(&labels) {
            let (arg, c) = row.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            conf += c;
            acc += (arg == l) as u8 as f64;
        }
        let expect = (acc / n - conf / n).abs();
        let r = ece(&t, &labels, 1)?;
        prop_assert!((r.ece - expect).abs() < 1e-12);
        prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), rows.len());
    }

    #[test]
    fn auroc_is_antisymmetric(
        a in prop::collection::vec(prop::sample::select(vec![0.1, 0.2, 0.3, 0.5, 0.8]), 1..30),
        b in prop::collection::vec(prop::sample::select(vec![0.1, 0.2, 0.4, 0.5, 0.9]), 1..30),
    ) {
        prop_assert_eq!(auroc(&a, &b)? + auroc(&b, &a)?, 1.0);
    }
}
