use quadkan::diff::gradcheck::check;
use quadkan::diff::{Activation, ParamStore, Tape};
use quadkan::perception::{NetConfig, Network, ObsBatch, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> NetConfig {
    NetConfig { d: 6, d_h: 7, hidden: 5, proprio_dim: 9, action_dim: 3, img: 16, cnn_channels: [3, 4], ..NetConfig::default() }
}

fn random_obs(cfg: &NetConfig, b: usize, rng: &mut ChaCha8Rng) -> ObsBatch {
    let p: Vec<f64> = (0..b * cfg.proprio_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let d: Vec<f32> = (0..b * 4 * cfg.img * cfg.img).map(|_| rng.random_range(0.3f32..10.0)).collect();
    ObsBatch::from_raw(cfg, &p, &d).unwrap()
}

/// Moves every parameter off its structured initial value (zero biases
/// leave ReLU inputs sitting exactly on the kink).
fn jitter(s: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = s.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        s.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
}

#[test]
fn full_size_parameter_counts() {
    let cfg = NetConfig::default();
    let mut counts = std::collections::HashMap::new();
    for v in Variant::ALL {
        let mut s = ParamStore::new();
        let net = Network::new(v, &cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = net.param_counts(&s);
        println!("{v}: {} {:?} hidden={}", c.total, c.rows, net.mlp_hidden);
        counts.insert(v, c.total as f64);
    }
    let close = |a: f64, b: f64| (a / b - 1.0).abs() <= 0.10;
    assert!(close(counts[&Variant::VisionOnlyMlp], counts[&Variant::VisionOnlyKan]));
    assert!(close(counts[&Variant::MlpFusion], counts[&Variant::QuadKan]));
}

#[test]
fn forward_shapes_and_timing() {
    let cfg = NetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in Variant::ALL {
        let mut s = ParamStore::new();
        let net = Network::new(v, &cfg, &mut s, &mut rng).unwrap();
        let obs = random_obs(&cfg, 64, &mut rng);
        let t0 = std::time::Instant::now();
        let mut t = Tape::new(&s);
        let out = net.forward(&mut t, &obs).unwrap();
        let t1 = t0.elapsed();
        assert_eq!(t.shape(out.mu), &[64, 12]);
        assert_eq!(t.shape(out.log_std), &[64, 12]);
        assert_eq!(t.shape(out.value), &[64, 1]);
        assert_eq!(t.shape(out.h)[1], if v == Variant::ProprioOnly { 84 } else { 256 });
        let reg = net.spline_reg(&mut t, &out, &Default::default()).unwrap();
        let l = t.sum(out.value);
        let m = t.sum(out.mu);
        let loss = t.weighted_sum(&[(l, 1.0), (m, 1.0), (reg, 1.0)]).unwrap();
        let g = t.backward(loss).unwrap();
        s.accumulate(&g).unwrap();
        println!("{v}: fwd {:?} total {:?}", t1, t0.elapsed());
    }
}

#[test]
fn gradients_match_finite_differences() {
    for v in Variant::ALL {
        for seed in 0..5u64 {
            let cfg = small_cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            let net = Network::new(v, &cfg, &mut s, &mut rng).unwrap();
            jitter(&mut s, &mut rng);
            let obs = random_obs(&cfg, 2, &mut rng);
            let r = check(&mut s, 1e-5, 1, |t| {
                let out = net.forward(t, &obs)?;
                let reg = net.spline_reg(t, &out, &quadkan::kan::SplineRegConfig { lambda_c: 0.1, lambda_l: 0.1, jac_max_rows: 4 })?;
                let a = t.activation(out.mu, Activation::Tanh);
                let a = t.mul(a, a)?;
                let a = t.sum(a);
                let ls = t.sum(out.log_std);
                let v2 = t.mul(out.value, out.value)?;
                let v2 = t.sum(v2);
                t.weighted_sum(&[(a, 1.0), (ls, 0.3), (v2, 0.7), (reg, 1.0)])
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{v} seed {seed}: {r:?}");
            assert!(r.skipped_fraction() < 0.1, "{v} seed {seed}: {r:?}");
        }
    }
}
