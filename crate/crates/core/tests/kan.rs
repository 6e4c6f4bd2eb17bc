use std::sync::Arc;

use quadkan::diff::{Activation, DenseArray, ParamStore, Tape};
use quadkan::kan::{KanLayer, SplineRegConfig, HIST_BINS};
use quadkan::spline::SplineBasis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Cox–de Boor, with the last interval closed on the right.
fn cox_de_boor(knots: &[f64], q: usize, i: usize, u: f64) -> f64 {
    if q == 0 {
        let last = knots[knots.len() - 1];
        let inside = knots[i] <= u && u < knots[i + 1];
        let at_end = u == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + q] - knots[i];
    if d1 > 0.0 {
        v += (u - knots[i]) / d1 * cox_de_boor(knots, q - 1, i, u);
    }
    let d2 = knots[i + q + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + q + 1] - u) / d2 * cox_de_boor(knots, q - 1, i + 1, u);
    }
    v
}

fn layer(d_in: usize, d_out: usize, basis: &Arc<SplineBasis>, act: Activation, seed: u64) -> (ParamStore, KanLayer) {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = KanLayer::new(&mut s, "k", d_in, d_out, basis, act, &mut rng).unwrap();
    let ids: Vec<_> = s.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        s.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    (s, l)
}

fn forward_rows(s: &ParamStore, l: &KanLayer, x: &[f64]) -> Vec<f64> {
    let rows = x.len() / l.d_in;
    let mut t = Tape::new(s);
    let xi = t.input(DenseArray::from_vec(&[rows, l.d_in], x.to_vec()).unwrap());
    let o = l.forward(&mut t, xi).unwrap();
    t.value(o.y).data().to_vec()
}

fn regularizer(s: &ParamStore, l: &KanLayer, x: &[f64], cfg: &SplineRegConfig) -> f64 {
    let rows = x.len() / l.d_in;
    let mut t = Tape::new(s);
    let xi = t.input(DenseArray::from_vec(&[rows, l.d_in], x.to_vec()).unwrap());
    let o = l.forward(&mut t, xi).unwrap();
    let r = l.regularizer(&mut t, &o, cfg).unwrap();
    t.scalar(r)
}

#[test]
fn forward_matches_scalar_loop_oracle() {
    let basis = Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).unwrap());
    let knots = basis.knots().to_vec();
    for seed in 0..5 {
        let (s, l) = layer(5, 4, &basis, Activation::Silu, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x: Vec<f64> = (0..7 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = forward_rows(&s, &l, &x);
        let a = s.value(l.proj_id()).data();
        let c = s.value(l.offset_id()).data();
        let w = s.value(l.coef_id()).data();
        let b = s.value(l.bias_id()).data();
        for (r, row) in x.chunks(5).enumerate() {
            for j in 0..4 {
                let mut sj = c[j];
                for i in 0..5 {
                    sj += a[j * 5 + i] * row[i];
                }
                let u = 3.0 * sj.tanh();
                let mut z = b[j];
                for m in 0..8 {
                    z += w[j * 8 + m] * cox_de_boor(&knots, 3, m, u);
                }
                let want = z / (1.0 + (-z).exp());
                assert!((got[r * 4 + j] - want).abs() < 1e-12, "row {r} unit {j}: {} vs {want}", got[r * 4 + j]);
            }
        }
    }
}

#[test]
fn coefficient_perturbation_is_local() {
    let basis = Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).unwrap());
    let knots = basis.knots().to_vec();
    let (mut s, l) = layer(1, 1, &basis, Activation::Identity, 7);
    // Identity projection so the spline input is 3·tanh(x).
    s.value_mut(l.proj_id()).data_mut()[0] = 1.0;
    s.value_mut(l.offset_id()).data_mut()[0] = 0.0;
    let xs: Vec<f64> = (0..400).map(|i| -4.0 + 8.0 * i as f64 / 399.0).collect();
    let before = forward_rows(&s, &l, &xs);
    let m = 4;
    s.value_mut(l.coef_id()).data_mut()[m] += 0.5;
    let after = forward_rows(&s, &l, &xs);
    let (lo, hi) = (knots[m], knots[m + 4]);
    let mut changed = 0;
    for (i, x) in xs.iter().enumerate() {
        let u = 3.0 * x.tanh();
        if u <= lo || u >= hi {
            assert!((after[i] - before[i]).abs() < 1e-12, "x={x} u={u} outside [{lo},{hi}] moved");
        } else if (after[i] - before[i]).abs() > 1e-9 {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn curvature_hand_case_and_affine_identity() {
    let basis = Arc::new(SplineBasis::clamped_uniform(2, 3, -1.0, 1.0).unwrap());
    let (mut s, l) = layer(2, 1, &basis, Activation::Silu, 1);
    s.value_mut(l.coef_id()).data_mut().copy_from_slice(&[0.0, 1.0, 0.0]);
    let x = [0.3, -0.2, 0.1, 0.4];
    let cfg = SplineRegConfig { lambda_c: 1.0, lambda_l: 0.0, jac_max_rows: 0 };
    assert_eq!(regularizer(&s, &l, &x, &cfg), 4.0);

    let basis8 = Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).unwrap());
    let (mut s, l) = layer(3, 5, &basis8, Activation::Silu, 2);
    let w = s.value_mut(l.coef_id()).data_mut();
    for j in 0..5 {
        for m in 0..8 {
            // Small integers keep every second difference exactly zero.
            w[j * 8 + m] = (j as f64 - 2.0) + (m as f64) * (j as f64 + 1.0);
        }
    }
    let x = [0.1; 6];
    assert_eq!(regularizer(&s, &l, &x, &cfg), 0.0);
}

#[test]
fn jacobian_penalty_vanishes_for_constant_units() {
    let basis = Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).unwrap());
    let cfg = SplineRegConfig { lambda_c: 0.0, lambda_l: 1.0, jac_max_rows: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();

    let (mut s, l) = layer(4, 3, &basis, Activation::Silu, 3);
    s.value_mut(l.proj_id()).data_mut().fill(0.0);
    assert_eq!(regularizer(&s, &l, &x, &cfg), 0.0);

    let (mut s, l) = layer(4, 3, &basis, Activation::Silu, 4);
    s.value_mut(l.coef_id()).data_mut().fill(0.7);
    assert!(regularizer(&s, &l, &x, &cfg).abs() < 1e-24);
}

#[test]
fn analytic_jacobian_matches_finite_differences() {
    let basis = Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).unwrap());
    for seed in 0..5 {
        let (s, l) = layer(6, 4, &basis, Activation::Silu, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
        let jac = l.jacobian(&s, &x);
        let h = 1e-6;
        for i in 0..6 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let (yp, ym) = (l.eval(&s, &xp), l.eval(&s, &xm));
            for j in 0..4 {
                let fd = (yp[j] - ym[j]) / (2.0 * h);
                assert!((jac[j * 6 + i] - fd).abs() < 1e-6, "d{j}/dx{i}: {} vs {fd}", jac[j * 6 + i]);
            }
        }
    }
}

#[test]
fn spline_stats_cases() {
    let basis = Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).unwrap());
    let (mut s, l) = layer(3, 4, &basis, Activation::Silu, 5);
    s.value_mut(l.coef_id()).data_mut().fill(0.0);
    let st = l.stats(&s);
    assert!(st.unit_norms.iter().all(|&n| n == 0.0));
    assert_eq!(st.hist.len(), HIST_BINS);
    assert_eq!(st.hist.iter().sum::<u64>(), 32);
    assert_eq!(st.hist.iter().filter(|&&c| c > 0).count(), 1);
    assert_eq!(st.abs_max, 0.0);
    assert_eq!(st.curves.len(), 4);
    assert_eq!(st.curves[0].len(), 256);

    let b2 = Arc::new(SplineBasis::clamped_uniform(1, 2, -1.0, 1.0).unwrap());
    let (mut s, l) = layer(2, 1, &b2, Activation::Identity, 6);
    s.value_mut(l.coef_id()).data_mut().copy_from_slice(&[3.0, 4.0]);
    assert_eq!(l.stats(&s).unit_norms, vec![5.0]);

    let (s, l) = layer(5, 6, &basis, Activation::Silu, 8);
    assert_eq!(l.stats(&s), l.stats(&s));
}
