//! `losses selftest`: closed-form checks of the training losses.

use reid_debias::trainmath::{
    batch_hard_triplets, label_smooth_ce, soft_margin_triplet, softplus, DEFAULT_EPSILON,
};
use reid_debias::DistanceMatrix;

struct Row {
    name: &'static str,
    value: f64,
    expected: f64,
    tol: f64,
}

impl Row {
    fn passed(&self) -> bool {
        self.value.is_finite() && (self.value - self.expected).abs() <= self.tol
    }
}

fn check_rows() -> Vec<Row> {
    let h = 1e-4;
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let triplet = |a: f64, n: f64| soft_margin_triplet(a, n).unwrap_or(f64::NAN);
    let ce = |logits: &[f64]| {
        label_smooth_ce(logits, 0, DEFAULT_EPSILON, logits.len()).unwrap_or(f64::NAN)
    };
    let fd_ce = (ce(&[1.0 + h, 0.0, 0.0, 0.0]) - ce(&[1.0 - h, 0.0, 0.0, 0.0])) / (2.0 * h);
    let e1 = 1f64.exp();
    let p0 = e1 / (e1 + 3.0);

    // Sample 4 is a flagged singleton: it must never be an anchor or positive.
    let points = [0.0f32, 0.5, 3.0, 3.4, 0.1];
    let n = points.len();
    let values = (0..n * n)
        .map(|k| (points[k / n] - points[k % n]).abs())
        .collect();
    let ids: Vec<u64> = (0..n as u64).collect();
    let mined = DistanceMatrix::new(n, n, values, ids.clone(), ids)
        .ok()
        .and_then(|d| {
            batch_hard_triplets(&d, &[0, 0, 1, 1, 2], &[false, false, false, false, true]).ok()
        });
    let anchors = mined.as_ref().map_or(f64::NAN, |t| t.len() as f64);
    let hardest_negative = mined.as_ref().map_or(f64::NAN, |t| t[1].d_an);

    vec![
        Row {
            name: "ce uniform logits, N=4",
            value: ce(&[0.7; 4]),
            expected: 4f64.ln(),
            tol: 1e-6,
        },
        Row {
            name: "ce logits (2,0,0,0)",
            value: ce(&[2.0, 0.0, 0.0, 0.0]),
            expected: 0.490_752_953_913_131_2,
            tol: 1e-9,
        },
        Row {
            name: "ce d/dz true class",
            value: fd_ce,
            expected: p0 - (1.0 - DEFAULT_EPSILON + DEFAULT_EPSILON / 4.0),
            tol: 1e-3,
        },
        Row {
            name: "triplet(d, d)",
            value: triplet(1.5, 1.5),
            expected: 2f64.ln(),
            tol: 1e-9,
        },
        Row {
            name: "triplet d/d_ap",
            value: (triplet(1.0 + h, 0.4) - triplet(1.0 - h, 0.4)) / (2.0 * h),
            expected: sigmoid(0.6),
            tol: 1e-3,
        },
        Row {
            name: "softplus(500)",
            value: softplus(500.0),
            expected: 500.0,
            tol: 1e-9,
        },
        Row {
            name: "softplus(-500)",
            value: softplus(-500.0),
            expected: (-500f64).exp(),
            tol: 1e-300,
        },
        Row {
            name: "batch-hard anchors",
            value: anchors,
            expected: 4.0,
            tol: 0.0,
        },
        Row {
            name: "batch-hard flagged negative",
            value: hardest_negative,
            expected: 0.4,
            tol: 1e-6,
        },
    ]
}

/// Prints the check table; true when every row passes.
pub fn run() -> bool {
    let rows = check_rows();
    println!("{:<30} {:>22} {:>22}  status", "check", "value", "expected");
    let mut ok = true;
    for r in &rows {
        let passed = r.passed();
        ok &= passed;
        println!(
            "{:<30} {:>22.15e} {:>22.15e}  {}",
            r.name,
            r.value,
            r.expected,
            if passed { "pass" } else { "FAIL" }
        );
    }
    ok
}
