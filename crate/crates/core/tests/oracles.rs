mod common;

use embedded_mpc::linalg::Mat;
use embedded_mpc::lti::discretize;

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[test]
fn double_integrator_matches_its_closed_form() {
    for tau in [0.01, 0.1, 1.0, 3.7] {
        let d = discretize(&common::double_integrator(), tau).unwrap();
        let a = Mat::from_row_slice(2, 2, &[1.0, tau, 0.0, 1.0]);
        let b = Mat::from_row_slice(2, 1, &[tau * tau / 2.0, tau]);
        assert!(max_abs_diff(&d.a, &a) < 1e-13, "tau {tau}");
        assert!(max_abs_diff(&d.b, &b) < 1e-13, "tau {tau}");
    }
}

/// Clohessy-Wiltshire state transition and its input integral, written with
/// half-angle forms so small `w·t` keeps full precision.
fn cw_closed_form(w: f64, t: f64) -> (Mat, Mat) {
    let (s, c) = (w * t).sin_cos();
    let omc = 2.0 * (w * t / 2.0).sin().powi(2);
    #[rustfmt::skip]
    let a = Mat::from_row_slice(6, 6, &[
        4.0 - 3.0 * c, 0.0, 0.0, s / w, 2.0 * omc / w, 0.0,
        6.0 * (s - w * t), 1.0, 0.0, -2.0 * omc / w, (4.0 * s - 3.0 * w * t) / w, 0.0,
        0.0, 0.0, c, 0.0, 0.0, s / w,
        3.0 * w * s, 0.0, 0.0, c, 2.0 * s, 0.0,
        -6.0 * w * omc, 0.0, 0.0, -2.0 * s, 4.0 * c - 3.0, 0.0,
        0.0, 0.0, -w * s, 0.0, 0.0, c,
    ]);
    let wt = w * t;
    let w2 = w * w;
    #[rustfmt::skip]
    let b = Mat::from_row_slice(6, 3, &[
        omc / w2, 2.0 * (wt - s) / w2, 0.0,
        -2.0 * (wt - s) / w2, (4.0 * omc - 1.5 * wt * wt) / w2, 0.0,
        0.0, 0.0, omc / w2,
        s / w, 2.0 * omc / w, 0.0,
        -2.0 * omc / w, (4.0 * s - 3.0 * wt) / w, 0.0,
        0.0, 0.0, s / w,
    ]);
    (a, b)
}

#[test]
fn hcw_matches_the_clohessy_wiltshire_solution() {
    for (w, tau) in [(0.0011, 30.0), (0.0011, 1.0), (0.5, 0.7), (1.0, 2.0)] {
        let d = discretize(&common::hcw(w), tau).unwrap();
        let (a, b) = cw_closed_form(w, tau);
        let scale_a = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let scale_b = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(&d.a, &a) < 1e-10 * scale_a, "A at w {w} tau {tau}: {}", max_abs_diff(&d.a, &a));
        assert!(max_abs_diff(&d.b, &b) < 1e-10 * scale_b, "B at w {w} tau {tau}: {}", max_abs_diff(&d.b, &b));
    }
}
