use proptest::prelude::*;
use quadkan::diff::ParamStore;
use quadkan::envsim::{Env, EnvConfig};
use quadkan::mmdr::{block_indices, sample_episode_delay, DelayState, EpisodeDelay, MmdrConfig};
use quadkan::perception::{NetConfig, Network, Variant};
use quadkan::train::infer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_latency_is_bit_identical_to_the_direct_pipeline() {
    let base = EnvConfig { randomize: true, depth_dropout: true, ..EnvConfig::default() };
    let delayed = EnvConfig { mmdr: MmdrConfig { enabled: true, delta_max: 0.0, k_vis: 1, ..MmdrConfig::default() }, ..base.clone() };
    let direct = EnvConfig { mmdr: MmdrConfig { enabled: false, delta_max: 0.0, k_vis: 1, ..MmdrConfig::default() }, ..base };
    let mut store = ParamStore::new();
    let net = Network::new(Variant::QuadKan, &NetConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let (mut a, mut b) = (Env::new(delayed, 77), Env::new(direct, 77));
    let (mut oa, mut ob) = (a.reset(), b.reset());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..25 {
        assert_eq!(oa, ob, "observation differs at step {step}");
        let pa = infer(&net, &store, &[&oa]).unwrap();
        let pb = infer(&net, &store, &[&ob]).unwrap();
        assert_eq!(pa, pb);
        let act: Vec<f64> = (0..12).map(|_| rng.random_range(-0.3..0.3)).collect();
        let (ra, rb) = (a.step(&act).unwrap(), b.step(&act).unwrap());
        assert_eq!(ra.reward, rb.reward);
        if ra.done {
            break;
        }
        (oa, ob) = (ra.obs, rb.obs);
    }
}

#[test]
fn delay_decomposition_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_episode_delay(&mut rng, 0.0, 0.0025), EpisodeDelay::ZERO);
    let d = EpisodeDelay::from_latency(0.00625, 0.0025);
    assert_eq!(d.k, 2);
    assert!((d.alpha - 0.5).abs() < 1e-12);
    let mut max_k = 0;
    for _ in 0..100_000 {
        let d = sample_episode_delay(&mut rng, 0.04, 1.0 / 400.0);
        assert!((0.0..=0.04).contains(&d.delta_prop));
        assert!((0.0..1.0).contains(&d.alpha));
        max_k = max_k.max(d.k);
    }
    assert!(max_k <= 16);
    assert!(max_k >= 15);
}

#[test]
fn block_frequencies_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [[0usize; 3]; 4];
    for _ in 0..n {
        let idx = block_indices(&mut rng, 3);
        for (j, &i) in idx.iter().enumerate() {
            assert!(j * 3 <= i && i < (j + 1) * 3);
            counts[j][i - 3 * j] += 1;
        }
    }
    for block in counts {
        for c in block {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.01, "{f}");
        }
    }
}

#[test]
fn frame_stack_reads_the_sampled_ring_positions() {
    let cfg = MmdrConfig { k_vis: 3, ..MmdrConfig::default() };
    let mut st: DelayState<usize> = DelayState::new(cfg, 4);
    st.reset(0.0, &[0.0], Some(0));
    for f in 1..=20 {
        st.push_frame(f);
    }
    // Newest frame is 20, so ring position i holds frame 20 − i.
    for _ in 0..200 {
        let s = st.delayed_frames().unwrap();
        for j in 0..4 {
            let i = 20 - s[j];
            assert!(3 * j <= i && i < 3 * (j + 1));
        }
        assert!(s[0] > s[1] && s[1] > s[2] && s[2] > s[3]);
    }
    let mut unit: DelayState<usize> = DelayState::new(MmdrConfig { k_vis: 1, ..MmdrConfig::default() }, 4);
    unit.reset(0.0, &[0.0], Some(0));
    for f in 1..=6 {
        unit.push_frame(f);
    }
    assert_eq!(unit.delayed_frames(), Some([6, 5, 4, 3]));
}

#[test]
fn warm_fill_and_constant_buffer() {
    let cfg = MmdrConfig::default();
    let mut st: DelayState<()> = DelayState::new(cfg.clone(), 0);
    st.reset(0.0399, &[0.25, -1.0], None);
    assert!(st.fifo_len() >= st.delay().k + 2);
    assert_eq!(st.delayed_proprio(), vec![0.25, -1.0]);
    assert!(st.delayed_frames().is_none());
}

proptest! {
    #[test]
    fn delayed_proprio_is_a_convex_combination(
        delta in 0.0f64..0.04,
        hist in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 20..40),
    ) {
        let mut st: DelayState<()> = DelayState::new(MmdrConfig::default(), 1);
        st.reset(delta, &[0.0; 3], None);
        for s in &hist {
            st.push_slice(s.clone());
        }
        let d = st.delay();
        let n = hist.len();
        let (s0, s1) = (&hist[n - 1 - d.k], &hist[n - 2 - d.k]);
        let out = st.delayed_proprio();
        for i in 0..3 {
            let want = (1.0 - d.alpha) * s0[i] + d.alpha * s1[i];
            prop_assert!((out[i] - want).abs() < 1e-12);
            prop_assert!(out[i] >= s0[i].min(s1[i]) - 1e-12 && out[i] <= s0[i].max(s1[i]) + 1e-12);
        }
        if d.alpha == 0.0 {
            prop_assert_eq!(&out, s0);
        }
    }
}
