use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semcom_core::bra::{gather_kv, region_routing, token_attention, top_k_routing, RegionTokens, TokenLayout};
use semcom_core::channel::{equalize_demodulate, modulate, ChannelRealization};
use semcom_core::codec::{ModelConfig, ModelPair};
use semcom_core::config::{Scheme, SensingConfig};
use semcom_core::frames::{load_frames, normalize_byte, quantize, save_frames_png, Frame, FrameLabel, VideoSequence};
use semcom_core::kan::{CrClass, SemanticEncoding};
use semcom_core::metrics::{iou_loss, ms_ssim, objective_score, psnr_from_mse, transmission_rate};
use semcom_core::osms::{decode_boxes, mask_difference, BoundingBox, DetectionSet, SensingMask};
use semcom_core::pipeline::{augment_static_ratio, compute_reduction, derive_labels, run_transmission, PipelineConfig};
use semcom_core::records::{load_records, save_records};
use semcom_core::synth::{constant_video, moving_square_video, SquareVideoConfig};
use semcom_core::training::{kd_loss, task_loss};
use semcom_core::{ChannelConfig, SemanticRepresentation};

fn frame_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Frame> {
    vec(0.0f32..1.0, h * w * c).prop_map(move |px| Frame::new(h, w, c, 1, px).unwrap())
}

fn tokens(layout: TokenLayout, dim: usize, data: Vec<f64>) -> RegionTokens {
    RegionTokens::new(layout, dim, data).unwrap()
}

fn mask(h: usize, w: usize, bits: Vec<bool>) -> SensingMask {
    let mut m = SensingMask::zeros(h, w);
    m.mask = bits.into_iter().map(u8::from).collect();
    m
}

fn small_models() -> ModelPair {
    ModelPair::new(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn pipeline_cfg(snr_db: f64, seed: u64) -> PipelineConfig {
    PipelineConfig {
        channel: ChannelConfig {
            snr_db,
            seed,
            ..ChannelConfig::default()
        },
        sensing: SensingConfig::default(),
        zeta: 0.01,
    }
}

fn square_video(frames: usize, seed: u64) -> VideoSequence {
    moving_square_video(&SquareVideoConfig {
        frames,
        height: 16,
        width: 16,
        square: 4,
        step: 1,
        min_run: 1,
        max_run: 4,
        seed,
        ..SquareVideoConfig::default()
    })
    .unwrap()
}

#[test]
fn byte_normalization_is_bijective() {
    for b in 0..=255u8 {
        assert_eq!(quantize(normalize_byte(b)), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn png_roundtrip_is_identity(bytes in vec(any::<u8>(), 2 * 6 * 5 * 3)) {
        let frames: Vec<Frame> = bytes
            .chunks(6 * 5 * 3)
            .enumerate()
            .map(|(i, b)| Frame::from_bytes(6, 5, 3, i + 1, b).unwrap())
            .collect();
        let video = VideoSequence::new(frames, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_frames_png(&video, dir.path()).unwrap();
        let back = load_frames(dir.path(), (6, 5)).unwrap();
        for (a, b) in video.frames.iter().zip(&back.frames) {
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(
        q in vec(-3.0f64..3.0, 16 * 4),
        k in vec(-3.0f64..3.0, 16 * 4),
        c in -5.0f64..5.0,
        top_k in 1usize..=4,
    ) {
        // With every value equal to c, unit-sum softmax rows return exactly c.
        let layout = TokenLayout::new(4, 4, 2, 2).unwrap();
        let (q, k, v) = (tokens(layout, 4, q), tokens(layout, 4, k), tokens(layout, 4, vec![c; 16 * 4]));
        let routing = region_routing(&q, &k, top_k).unwrap();
        let out = token_attention(&q, &gather_kv(&k, &v, &routing).unwrap(), &v, None, 2).unwrap();
        for x in out.data {
            prop_assert!((x - c).abs() <= 1e-9 * c.abs().max(1.0));
        }
    }

    #[test]
    fn routing_rows_are_distinct(adj in vec(-1.0f64..1.0, 36), k in 1usize..=6) {
        let r = top_k_routing(&adj, 6, k).unwrap();
        prop_assert_eq!(r.rows.len(), 6);
        for row in &r.rows {
            prop_assert_eq!(row.len(), k);
            let mut sorted = row.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), k);
        }
    }

    #[test]
    fn routing_commutes_with_region_permutation(
        adj in vec(-1.0f64..1.0, 25),
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        k in 1usize..=5,
    ) {
        // permuted[i][j] = adj[perm[i]][perm[j]]; routing must follow the relabelling.
        let n = 5;
        let permuted: Vec<f64> = (0..n * n).map(|idx| adj[perm[idx / n] * n + perm[idx % n]]).collect();
        let base = top_k_routing(&adj, n, k).unwrap();
        let moved = top_k_routing(&permuted, n, k).unwrap();
        for i in 0..n {
            let mapped: Vec<usize> = moved.rows[i].iter().map(|&j| perm[j]).collect();
            prop_assert_eq!(&mapped, &base.rows[perm[i]]);
        }
    }

    #[test]
    fn modulation_has_unit_power_and_inverts(values in vec(-10.0f64..10.0, 1..40)) {
        prop_assume!(values.iter().any(|v| *v != 0.0));
        let e = SemanticEncoding { values: values.clone(), cr: CrClass::DynamicLowCr, frame_index: 1 };
        let m = modulate(&e);
        prop_assert!((m.symbols.power() - 1.0).abs() <= 1e-6);
        prop_assert_eq!(m.symbols.symbols.len(), values.len().div_ceil(2));
        let ideal = ChannelRealization::ideal(m.symbols.symbols.len());
        let back = equalize_demodulate(&m.symbols, &ideal, m.scale, m.len).unwrap();
        for (a, b) in back.iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn kd_loss_is_nonnegative_and_zero_on_identity(
        a in vec(-4.0f64..4.0, 4 * 3),
        b in vec(-4.0f64..4.0, 4 * 3),
        tau in 0.5f64..10.0,
        mentor_loss in 1e-6f64..1.0,
    ) {
        let rep = |data: Vec<f64>| SemanticRepresentation { tokens: 4, dim: 3, data, frame_index: 1 };
        let (sa, sb) = (rep(a), rep(b));
        prop_assert!(kd_loss(&sa, &sb, mentor_loss, tau).unwrap().value >= 0.0);
        prop_assert!(kd_loss(&sa, &sa, mentor_loss, tau).unwrap().value.abs() <= 1e-12);
    }

    #[test]
    fn mask_difference_is_a_bounded_symmetric_distance(
        a in vec(any::<bool>(), 8 * 6),
        b in vec(any::<bool>(), 8 * 6),
    ) {
        let (ma, mb) = (mask(8, 6, a), mask(8, 6, b));
        let ab = mask_difference(&ma, &mb).unwrap();
        prop_assert_eq!(ab, mask_difference(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(mask_difference(&ma, &ma).unwrap(), 0.0);
    }

    #[test]
    fn decode_boxes_is_monotone(t in vec(-5.0f64..5.0, 4), dt in 0.01f64..2.0) {
        let base = [t[0], t[1], t[2], t[3]];
        let wider = [t[0] + dt, t[1], t[2] + dt, t[3]];
        let out = decode_boxes(&[base, wider], &[(2.0, 3.0); 2], &[(1.0, 1.0); 2]).unwrap();
        prop_assert!(out[1].x > out[0].x);
        prop_assert!(out[1].w > out[0].w);
    }

    #[test]
    fn psnr_decreases_with_mse(m1 in 1e-6f64..1.0, extra in 1e-6f64..1.0) {
        let lo = psnr_from_mse(m1, 1.0).unwrap().db();
        let hi = psnr_from_mse(m1 + extra, 1.0).unwrap().db();
        prop_assert!(hi < lo);
    }

    #[test]
    fn iou_loss_is_bounded(
        raw in vec((0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0), 0..5),
        raw2 in vec((0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0), 0..5),
    ) {
        let set = |r: &[(f64, f64, f64, f64)]| DetectionSet {
            frame_index: 1,
            boxes: r.iter().map(|&(x, y, w, h)| BoundingBox::new(x, y, w, h)).collect(),
        };
        let (a, b) = (set(&raw), set(&raw2));
        let l = iou_loss(&a, &b);
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!(iou_loss(&a, &a).abs() <= 1e-12);
    }

    #[test]
    fn rate_is_increasing_in_snr_and_linear_in_bandwidth(
        snr in -10.0f64..30.0,
        step in 0.01f64..5.0,
        b in 1.0f64..1e6,
        scale in 0.1f64..10.0,
    ) {
        prop_assert!(transmission_rate(b, snr + step).unwrap() > transmission_rate(b, snr).unwrap());
        let lin = transmission_rate(b * scale, snr).unwrap() / transmission_rate(b, snr).unwrap();
        prop_assert!((lin - scale).abs() <= 1e-9 * scale);
    }

    #[test]
    fn augmentation_hits_the_ratio(n in 1usize..30, s in 1u32..9, d in 1u32..9, seed in 0u64..100) {
        let video = square_video(n, seed);
        let out = augment_static_ratio(&video, [s as f64, d as f64]).unwrap();
        prop_assert!(out.len() >= video.len());
        let labels = out.labels.clone().unwrap();
        prop_assert_eq!(&labels, &derive_labels(&out));
        let n_static = labels.iter().filter(|l| **l == FrameLabel::Static).count() as f64;
        let n_dyn = labels.len() as f64 - n_static;
        let target = n_dyn * s as f64 / d as f64;
        // Frames are only ever added, so an already static-heavy video may overshoot.
        prop_assert!(n_static + 1.0 >= target);
        if out.len() > video.len() {
            prop_assert!((n_static - target).abs() <= 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ms_ssim_is_symmetric_and_reflexive(x in frame_strategy(24, 24, 3), y in frame_strategy(24, 24, 3)) {
        prop_assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
        let (xy, yx) = (ms_ssim(&x, &y).unwrap(), ms_ssim(&y, &x).unwrap());
        prop_assert!((xy - yx).abs() <= 1e-12);
    }

    #[test]
    fn objective_without_delay_or_compression_is_mean_task_loss(
        xs in vec(frame_strategy(4, 4, 3), 1..6),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<Frame> = xs
            .iter()
            .map(|x| {
                let px = x.pixels.iter().map(|p| (p + rand::Rng::gen_range(&mut rng, -0.2f32..0.2)).clamp(0.0, 1.0)).collect();
                Frame::new(4, 4, 3, 1, px).unwrap()
            })
            .collect();
        let obj = objective_score(&xs, &ys, &vec![0; xs.len()], 123.0, 0.0).unwrap();
        let mean: f64 = xs.iter().zip(&ys).map(|(x, y)| task_loss(x, y).unwrap()).sum::<f64>() / xs.len() as f64;
        prop_assert!((obj - mean).abs() <= 1e-9);
    }

    #[test]
    fn encodings_have_the_configured_length(frame in frame_strategy(16, 16, 3), seed in 0u64..1000) {
        let pair = small_models();
        let geom = pair.config.geometry().unwrap();
        let channel = ChannelConfig::default();
        for cr in [CrClass::StaticHighCr, CrClass::DynamicLowCr] {
            let tx = pair
                .codec(cr)
                .transmit_frame(&frame, &geom, &pair.config.lengths, &channel, &mut ChaCha8Rng::seed_from_u64(seed), pair.shared_extractor(cr))
                .unwrap();
            prop_assert_eq!(tx.encoding.values.len(), pair.config.lengths.length(cr));
            prop_assert_eq!(tx.encoding.cr, cr);
        }
    }

    #[test]
    fn constant_video_is_static_after_the_first_frame(n in 2usize..15, value in 0.0f32..1.0) {
        let video = constant_video(n, 16, 16, 3, value).unwrap();
        let out = run_transmission(&video, &small_models(), &pipeline_cfg(10.0, 0), Scheme::Sccvs, None).unwrap();
        prop_assert_eq!(out.records[0].cr, CrClass::DynamicLowCr);
        prop_assert!(out.records[1..].iter().all(|r| r.cr == CrClass::StaticHighCr));
    }

    #[test]
    fn moved_frames_are_dynamic(n in 2usize..40, seed in 0u64..500) {
        let video = square_video(n, seed);
        let out = run_transmission(&video, &small_models(), &pipeline_cfg(10.0, seed), Scheme::Sccvs, None).unwrap();
        for (i, (r, l)) in out.records.iter().zip(video.labels.as_ref().unwrap()).enumerate() {
            if i > 0 && *l == FrameLabel::Dynamic {
                prop_assert!(video.frames[i].pixels != video.frames[i - 1].pixels);
                prop_assert_eq!(r.cr, CrClass::DynamicLowCr);
            }
        }
    }

    #[test]
    fn pipeline_ledger_and_ablation_bounds(n in 1usize..25, seed in 0u64..500, snr in 0.0f64..25.0) {
        let video = square_video(n, seed);
        let models = small_models();
        let cfg = pipeline_cfg(snr, seed);
        let full = run_transmission(&video, &models, &cfg, Scheme::Sccvs, None).unwrap();
        let ablated = run_transmission(&video, &models, &cfg, Scheme::NoOsms, None).unwrap();
        full.summary.check_closure(&full.records).unwrap();
        ablated.summary.check_closure(&ablated.records).unwrap();
        prop_assert!(ablated.summary.total_bits >= full.summary.total_bits);

        let lengths = models.config.lengths;
        prop_assert_eq!(ablated.summary.total_symbols, (n * lengths.dynamic_low) as u64);
        prop_assert_eq!(compute_reduction(&ablated.records, lengths.dynamic_low).unwrap(), 0.0);
        let red = compute_reduction(&full.records, lengths.dynamic_low).unwrap();
        let ceiling = 100.0 * (1.0 - lengths.static_high as f64 / lengths.dynamic_low as f64);
        prop_assert!((0.0..=ceiling).contains(&red));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        save_records(&path, &full.records, Some(&full.summary)).unwrap();
        let (records, summary) = load_records(&path).unwrap();
        prop_assert_eq!(&records, &full.records);
        prop_assert_eq!(summary.as_ref(), Some(&full.summary));
    }
}
