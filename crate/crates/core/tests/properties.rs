use dyadic_core::checkpoint::Checkpoint;
use dyadic_core::config::{format_kv, parse_kv, KvMap};
use dyadic_core::encoder::{build_window_mask, AudioEncoder, EncoderConfig};
use dyadic_core::engine::{
    cfg_combine, euler_sample, read_framed_packets, write_framed_packets, GuidanceWeights, GuidedPredictions,
    SamplerConfig, SlidingWindow,
};
use dyadic_core::generator::LrSchedule;
use dyadic_core::kernel::{RngState, Tensor};
use dyadic_core::metrics::{drift_metric, entropy, frechet_distance, mse_metric, pearson, variance_metric, KMeans};
use dyadic_core::world::{audio_to_wire, generate_episode, Dataset, WorldConfig};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn weights() -> impl Strategy<Value = GuidanceWeights> {
    (-2.0f64..3.0, -2.0f64..3.0, -2.0f64..3.0, -2.0f64..3.0).prop_map(|(s, l, r, a)| GuidanceWeights::new(s, l, r, a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_coefficients_sum_to_one(w in weights()) {
        let total: f64 = w.coefficients().iter().map(|&(_, c)| c).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_of_agreeing_branches_is_that_prediction(w in weights(), x in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let p = GuidedPredictions {
            uncond: Some(x.clone()),
            speaker: Some(x.clone()),
            listener: Some(x.clone()),
            anchor: Some(x.clone()),
            all: Some(x.clone()),
        };
        let out = cfg_combine(&p, &w).unwrap();
        for (a, b) in out.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + w.sum().abs() * 8.0));
        }
    }

    #[test]
    fn sampler_lands_on_a_constant_prediction(steps in 1usize..20, seed in any::<u64>(), c in prop::collection::vec(-4.0f64..4.0, 1..5)) {
        let cfg = SamplerConfig { steps, ..SamplerConfig::default() };
        let mut rng = RngState::new(seed);
        let out = euler_sample(&cfg, c.len(), &mut rng, |_, _| Ok(c.clone())).unwrap();
        for (a, b) in out.iter().zip(&c) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn window_mask_matches_its_definition(frames in 1usize..24, past in prop::option::of(0usize..8), look in 0usize..5) {
        let m = build_window_mask(frames, past, look);
        for i in 0..frames {
            for j in 0..frames {
                let expect = j <= i + look && past.is_none_or(|p| j + p >= i);
                prop_assert_eq!(m.is_allowed(i, j), expect);
            }
        }
    }

    #[test]
    fn lr_factor_is_bounded_and_non_increasing(steps in 1usize..500) {
        let mut prev = f64::INFINITY;
        for s in 0..steps {
            let f = LrSchedule::Cosine.factor(s, steps);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&f));
            prop_assert!(f <= prev + 1e-15);
            prev = f;
        }
        prop_assert_eq!(LrSchedule::Constant.factor(steps / 2, steps), 1.0);
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some(r) = pearson(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((pearson(&b, &a).unwrap() - r).abs() < 1e-12);
            // Invariant under positive affine maps of one side.
            let a2: Vec<f64> = a.iter().map(|v| v * scale + shift).collect();
            prop_assert!((pearson(&a2, &b).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn frechet_distance_is_a_symmetric_nonnegative_gap(a in matrix(12, 3), b in matrix(9, 3)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn frechet_distance_of_a_shift_is_its_squared_norm(a in matrix(10, 2), dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
        let data = (0..a.rows()).flat_map(|i| [a.row(i)[0] + dx, a.row(i)[1] + dy]).collect();
        let b = Tensor::matrix(a.rows(), 2, data).unwrap();
        let fd = frechet_distance(&a, &b).unwrap();
        prop_assert!((fd - (dx * dx + dy * dy)).abs() < 1e-7);
    }

    #[test]
    fn entropy_lies_between_zero_and_log_bins(counts in prop::collection::vec(0usize..50, 1..12)) {
        let h = entropy(&counts);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn variance_ignores_constant_shifts(m in matrix(20, 4), shift in -10.0f64..10.0) {
        let shifted = Tensor::matrix(20, 4, m.data().iter().map(|v| v + shift).collect()).unwrap();
        let chans = [0, 2, 3];
        let v = variance_metric(&m, &chans).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((variance_metric(&shifted, &chans).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn drift_measures_only_pose_channels(m in matrix(15, 4), offset in prop::collection::vec(-2.0f64..2.0, 2), noise in -9.0f64..9.0) {
        // Every frame sits at `anchor + offset` on the pose channels; the
        // mouth channels carry arbitrary values.
        let anchor = m.row(0).to_vec();
        let data = (0..15)
            .flat_map(|i| [m.row(i)[0] + noise, m.row(i)[1], anchor[2] + offset[0], anchor[3] + offset[1]])
            .collect();
        let motion = Tensor::matrix(15, 4, data).unwrap();
        let d = drift_metric(&motion, &anchor, &[2, 3]).unwrap();
        prop_assert!((d - offset[0].hypot(offset[1])).abs() < 1e-12);
    }

    #[test]
    fn mse_is_symmetric_and_zero_on_equal(a in matrix(6, 3), b in matrix(6, 3)) {
        prop_assert_eq!(mse_metric(&a, &b).unwrap(), mse_metric(&b, &a).unwrap());
        prop_assert_eq!(mse_metric(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn kmeans_assigns_to_the_nearest_centroid(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 6..30),
        probe in prop::collection::vec(-6.0f64..6.0, 2),
        k in 1usize..5,
    ) {
        let model = KMeans::fit(&pts, k, 0).unwrap();
        let dist = |c: &[f64]| c.iter().zip(&probe).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = dist(&model.centroids[model.assign(&probe)]);
        for c in &model.centroids {
            prop_assert!(best <= dist(c));
        }
    }

    #[test]
    fn sliding_window_keeps_the_latest_frames(cap in 2usize..10, pushes in 0usize..25) {
        let mut w = SlidingWindow::new(cap, &[-1.0]).unwrap();
        for k in 0..pushes {
            w.push(vec![k as f64]);
        }
        prop_assert_eq!(w.len(), cap - 1);
        let h = w.history();
        for (slot, age) in (0..cap - 1).rev().enumerate() {
            let expect = if age < pushes { (pushes - 1 - age) as f64 } else { -1.0 };
            prop_assert_eq!(h.row(slot)[0], expect);
        }
    }

    #[test]
    fn kv_text_round_trips(entries in prop::collection::btree_map("[a-z][a-z_.]{0,12}", "[A-Za-z0-9_.+-]{0,12}", 0..10)) {
        let kv: KvMap = entries;
        prop_assert_eq!(parse_kv(&format_kv(&kv)).unwrap(), kv);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        vals in prop::collection::vec(-1e3f64..1e3, 1..40),
        cfg in prop::collection::btree_map("[a-z.]{1,8}", "[a-z0-9]{1,8}", 0..5),
    ) {
        // Values on the f32 grid survive storage exactly.
        let data: Vec<f64> = vals.iter().map(|&v| f64::from(v as f32)).collect();
        let ck = Checkpoint {
            config: cfg,
            tensors: vec![("w".into(), Tensor::new(vec![data.len()], data).unwrap())],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn packets_cover_the_audio_and_survive_framing(seed in 0u64..1000, frames in 5usize..40, per in 1usize..7) {
        let cfg = WorldConfig::default();
        let ep = generate_episode(&cfg, frames, &mut RngState::new(seed)).unwrap();
        let frame_ms = cfg.audio_frame_seconds() * 1000.0;
        let packets = audio_to_wire(&cfg, &ep.audio, per as f64 * frame_ms).unwrap();
        let spk: Vec<f64> = packets.iter().flat_map(|p| p.speaker.clone()).collect();
        let lst: Vec<f64> = packets.iter().flat_map(|p| p.listener.clone()).collect();
        prop_assert_eq!(&spk[..], ep.audio.speaker.data());
        prop_assert_eq!(&lst[..], ep.audio.listener.data());

        let d = cfg.audio_feature_dim;
        let mut buf = Vec::new();
        write_framed_packets(&mut buf, &packets, d).unwrap();
        let back = read_framed_packets(&mut buf.as_slice(), d, frame_ms).unwrap();
        prop_assert_eq!(back.len(), packets.len());
        for (a, b) in back.iter().zip(&packets) {
            prop_assert_eq!(&a.speaker, &b.speaker);
            prop_assert_eq!(&a.listener, &b.listener);
        }
    }

    #[test]
    fn datasets_are_seed_determined(seed in 0u64..1000) {
        let cfg = WorldConfig::default();
        let a = Dataset::generate(&cfg, 2, 12, &RngState::new(seed)).unwrap().to_bytes();
        let b = Dataset::generate(&cfg, 2, 12, &RngState::new(seed)).unwrap().to_bytes();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(Dataset::from_bytes(&a).unwrap().to_bytes(), a);
    }

    #[test]
    fn encoder_rows_ignore_audio_beyond_the_lookahead(seed in 0u64..1000, look in 0usize..4, frame in 0usize..20, delta in 1usize..6) {
        let cfg = EncoderConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            lookahead: Some(look),
            context: Some(4),
            ..EncoderConfig::default()
        };
        let mut rng = RngState::new(seed);
        let enc = AudioEncoder::new(cfg.clone(), &mut rng).unwrap();
        let frames = 32;
        let audio = Tensor::matrix(frames, cfg.input_dim, rng.normals(frames * cfg.input_dim)).unwrap();
        let base = enc.encode(&audio).unwrap();
        let j = (frame + look + delta).min(frames - 1);
        prop_assume!(j > frame + look);
        let mut data = audio.data().to_vec();
        for v in &mut data[j * cfg.input_dim..(j + 1) * cfg.input_dim] {
            *v += 1.0;
        }
        let moved = enc.encode(&Tensor::matrix(frames, cfg.input_dim, data).unwrap()).unwrap();
        for i in 0..=frame {
            prop_assert_eq!(base.row(i), moved.row(i));
        }
    }
}
