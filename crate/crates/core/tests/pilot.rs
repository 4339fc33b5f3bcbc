//! Sanity bound on the synthetic benchmark: a linear softmax classifier on
//! the raw features, trained with plain cross-entropy.

use lll_core::data_gen::{exponential_profile, gaussian_mixture};
use lll_core::losses::{balanced_ce, ClassProfile};
use lll_core::metrics_report::{group_accuracy, Thresholds};
use lll_core::numerics::Mat;
use lll_core::trainer::argmax;

/// Measured Many accuracy of this pilot (seed 0), kept as a regression
/// baseline.
const PILOT_MANY: f64 = 0.915;

fn with_bias(x: &Mat) -> Mat {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| [r, &[1.0]].concat()).collect();
    Mat::from_rows(&rows).unwrap()
}

#[test]
fn linear_plain_ce_pilot() {
    let profile = exponential_profile(10, 500, 100.0).unwrap();
    let (train, test) = gaussian_mixture(&profile, 16, 3.0, 0).unwrap();
    // equal counts make the balanced loss plain cross-entropy
    let flat = ClassProfile::new(vec![1; 10]).unwrap();
    let x = with_bias(&train.features);
    let mut theta = Mat::zeros(x.cols(), 10);
    for _ in 0..300 {
        let r = balanced_ce(&x, &theta, &train.labels, &flat).unwrap();
        theta.add_scaled(-0.5, &r.grad_theta).unwrap();
    }
    let logits = with_bias(&test.features).matmul(&theta).unwrap();
    let mut hits = [0usize; 10];
    let mut totals = [0usize; 10];
    for (row, &y) in logits.row_iter().zip(&test.labels) {
        totals[y] += 1;
        hits[y] += usize::from(argmax(row) == y);
    }
    let acc: Vec<f64> = hits.iter().zip(&totals).map(|(h, t)| *h as f64 / *t as f64).collect();
    let groups = group_accuracy(&acc, &profile, Thresholds::default()).unwrap();
    let many = groups.many.unwrap();
    println!("pilot: Many {many:.4} Medium {:.4} Few {:.4}", groups.medium.unwrap(), groups.few.unwrap());
    assert!(many > 0.8, "Many accuracy {many}");
    assert!((many - PILOT_MANY).abs() < 1e-9, "pilot baseline moved: {many}");
}
