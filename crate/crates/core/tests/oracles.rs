use efh::training::boxes::{giou, iou};
use efh::training::eval::evaluate_ap;
use efh::training::matching::hungarian;
use efh::training::GroundTruth;
use efh::Detection;
use efh_numcore::seeded_rng;
use rand::Rng;

/// Minimum total cost over every injective row → column map.
fn brute_force_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(r: usize, rows: usize, cols: usize, used: &mut Vec<bool>, cost: &[f64]) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(r + 1, rows, cols, used, cost));
                used[c] = false;
            }
        }
        best
    }
    go(0, rows, cols, &mut vec![false; cols], cost)
}

#[test]
fn hungarian_is_optimal_on_small_instances() {
    let mut rng = seeded_rng(101);
    for _ in 0..500 {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(rows..=6);
        // Integer costs make ties common and the optimum exact.
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0..10) as f64).collect();
        let a = hungarian(&cost, rows, cols).unwrap();
        let mut seen = vec![false; cols];
        for &c in &a {
            assert!(!seen[c], "column {c} assigned twice");
            seen[c] = true;
        }
        let got: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum();
        assert_eq!(got, brute_force_cost(&cost, rows, cols));
    }
}

#[test]
fn hungarian_rejects_bad_input() {
    assert!(hungarian(&[1.0, 2.0], 2, 1).is_err());
    assert!(hungarian(&[f64::NAN, 1.0], 1, 2).is_err());
}

/// Area of the overlap of two intervals, by clipping one against the other.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ax = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let ay = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let bx = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let by = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let inter = overlap(ax.0, ax.1, bx.0, bx.1) * overlap(ay.0, ay.1, by.0, by.1);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let hull = (ax.1.max(bx.1) - ax.0.min(bx.0)) * (ay.1.max(by.1) - ay.0.min(by.0));
    inter / union - (hull - union) / hull
}

#[test]
fn giou_matches_interval_oracle() {
    let mut rng = seeded_rng(102);
    for _ in 0..2000 {
        let mut b = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.01..0.5), rng.random_range(0.01..0.5)];
        let (x, y) = (b(), b());
        let got = giou(&x, &y).unwrap();
        assert!((got - giou_oracle(x, y)).abs() < 1e-10);
        assert!(got > -1.0 && got <= 1.0);
        assert!((giou(&y, &x).unwrap() - got).abs() < 1e-15);
        assert!(iou(&x, &y) >= got);
    }
    let a = [0.5, 0.5, 0.2, 0.2];
    assert_eq!(giou(&a, &a).unwrap(), 1.0);
    assert!(giou(&a, &[0.5, 0.5, 0.0, 0.2]).is_err());
}

#[test]
fn ap_of_a_perfect_detector_is_one() {
    let mut rng = seeded_rng(103);
    let gts: Vec<GroundTruth> = (0..10)
        .map(|i| {
            let n = rng.random_range(1..4);
            let boxes = (0..n)
                .map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), 0.1, 0.1])
                .collect();
            let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
            GroundTruth::new(&format!("img{i}"), boxes, labels).unwrap()
        })
        .collect();
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| {
            g.boxes
                .iter()
                .zip(&g.labels)
                .map(|(&bbox, &label)| Detection { bbox, score: 0.9, label })
                .collect()
        })
        .collect();
    let r = evaluate_ap(&dets, &gts, 3, 0.5);
    assert_eq!(r.mean, 1.0);
}
