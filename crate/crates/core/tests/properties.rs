use aod::aodnet::{forward_rollout, init_params, Actions, AodConfig};
use aod::backbone::{extract_features, roi_pool, FeatureMap};
use aod::diffcore::{forward, Op, Tensor};
use aod::eval::{average_precision, nms, ApProtocol, Detection, EvalGt};
use aod::geometry::{iou, BoundingBox, GlimpseDelta};
use aod::reinforce::{normalize_returns, policy_gradient};
use proptest::prelude::*;

fn arb_box(extent: f64) -> impl Strategy<Value = BoundingBox> {
    (0.0..extent, 0.0..extent, 1.0..extent / 2.0, 1.0..extent / 2.0)
        .prop_map(|(x, y, w, h)| BoundingBox::from_corners(x, y, x + w, y + h).unwrap())
}

fn spread_returns() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 2..=16).prop_filter("non-degenerate", |r| {
        let m = r.iter().sum::<f64>() / r.len() as f64;
        r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64 > 1e-6
    })
}

fn arb_detections(images: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0..images, arb_box(20.0), 0.01..1.0f64), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(image_id, bbox, score)| Detection {
                image_id,
                class: 0,
                score,
                bbox,
            })
            .collect()
    })
}

fn arb_gts(images: usize) -> impl Strategy<Value = Vec<Vec<EvalGt>>> {
    prop::collection::vec(
        prop::collection::vec((arb_box(20.0), prop::bool::weighted(0.2)), 0..4).prop_map(|v| {
            v.into_iter()
                .map(|(bbox, difficult)| EvalGt {
                    bbox,
                    class: 0,
                    difficult,
                })
                .collect()
        }),
        images,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_returns_are_standardized(r in spread_returns()) {
        let z = normalize_returns(&r).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() <= 1e-9);
        prop_assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn normalization_ignores_shift_and_positive_scale(r in spread_returns(), shift in -1e3..1e3f64, scale in 0.01..100.0f64) {
        let z = normalize_returns(&r).unwrap();
        let moved: Vec<f64> = r.iter().map(|v| scale * v + shift).collect();
        let w = normalize_returns(&moved).unwrap();
        for (a, b) in z.iter().zip(&w) {
            prop_assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn policy_gradient_is_linear_in_returns(
        noise in prop::collection::vec(prop::array::uniform4(-1.0..1.0f64), 4),
        a in prop::collection::vec(-3.0..3.0f64, 4),
        b in prop::collection::vec(-3.0..3.0f64, 4),
        alpha in -2.0..2.0f64,
    ) {
        let noise: Vec<Vec<GlimpseDelta>> = noise.into_iter().map(|d| vec![GlimpseDelta::from_array(d)]).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let ga = policy_gradient(&noise, &a, 0.2, 0.1, 4).unwrap();
        let gb = policy_gradient(&noise, &b, 0.2, 0.1, 4).unwrap();
        let gm = policy_gradient(&noise, &mix, 0.2, 0.1, 4).unwrap();
        for i in 0..4 {
            let want = ga[i][0].to_array().map(|v| v * alpha);
            let got = gm[i][0].to_array();
            let extra = gb[i][0].to_array();
            for k in 0..4 {
                prop_assert!((got[k] - (want[k] + extra[k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ap_is_bounded_and_invariant_to_monotone_rescoring(gts in arb_gts(3), dets in arb_detections(3)) {
        let ap = average_precision(&dets, &gts, 0.5, ApProtocol::Voc07ElevenPoint);
        prop_assert!((0.0..=1.0).contains(&ap));
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: (3.0 * d.score).tanh() * 0.5 + d.score.powi(3), ..*d })
            .collect();
        prop_assert_eq!(ap, average_precision(&squashed, &gts, 0.5, ApProtocol::Voc07ElevenPoint));
        let all = average_precision(&dets, &gts, 0.5, ApProtocol::AllPoint);
        prop_assert!((0.0..=1.0).contains(&all));
    }

    #[test]
    fn stricter_matching_never_raises_ap(gts in arb_gts(2), dets in arb_detections(2)) {
        let loose = average_precision(&dets, &gts, 0.3, ApProtocol::Voc07ElevenPoint);
        let strict = average_precision(&dets, &gts, 0.7, ApProtocol::Voc07ElevenPoint);
        prop_assert!(strict <= loose + 1e-12);
    }

    #[test]
    fn nms_keeps_separated_boxes_and_is_idempotent(dets in arb_detections(1), thresh in 0.1..0.9f64) {
        let kept = nms(&dets, thresh);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thresh);
            }
        }
        prop_assert_eq!(nms(&kept, thresh), kept.clone());
        prop_assert!(kept.len() <= dets.len());
        prop_assert_eq!(kept.is_empty(), dets.is_empty());
    }

    #[test]
    fn roi_output_shape_ignores_roi_size(b in arb_box(40.0), gh in 1usize..5, gw in 1usize..5) {
        let fm = FeatureMap {
            tensor: Tensor::<f64>::from_f64(&[3, 10, 10], &(0..300).map(|i| (i % 17) as f64).collect::<Vec<_>>()).unwrap(),
            stride: 4,
        };
        let (out, _) = roi_pool(&fm, &b, gh, gw).unwrap();
        prop_assert_eq!(out.len(), gh * gw * 3);
    }

    #[test]
    fn single_cell_roi_repeats_the_cell(cy in 0usize..10, cx in 0usize..10, gh in 1usize..5, gw in 1usize..5) {
        let data: Vec<f64> = (0..200).map(|i| ((i * 7919) % 101) as f64).collect();
        let fm = FeatureMap { tensor: Tensor::<f64>::from_f64(&[2, 10, 10], &data).unwrap(), stride: 4 };
        let b = BoundingBox::from_corners(4.0 * cx as f64 + 0.5, 4.0 * cy as f64 + 0.5, 4.0 * cx as f64 + 3.5, 4.0 * cy as f64 + 3.5).unwrap();
        let (out, _) = roi_pool(&fm, &b, gh, gw).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            prop_assert_eq!(*v, data[(i % 2) * 100 + cy * 10 + cx]);
        }
    }

    #[test]
    fn eltwise_max_is_order_independent(v in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 2..5), rot in 0usize..5) {
        let tensors: Vec<Tensor<f64>> = v.iter().map(|x| Tensor::from_vec(x.clone())).collect();
        let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
        let mut shuffled = refs.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let (a, _) = forward(&Op::EltwiseMax, &refs).unwrap();
        let (b, _) = forward(&Op::EltwiseMax, &shuffled).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rollout_outputs_are_distributions(seed in 0u64..1000, b in arb_box(40.0), steps in 1usize..4) {
        let cfg = AodConfig { steps, ..AodConfig::default() };
        let params = init_params::<f64>(&cfg, seed).unwrap();
        let pixels: Vec<f64> = (0..48 * 48).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0).collect();
        let image = Tensor::new(vec![1, 48, 48], pixels).unwrap();
        let (fm, _) = extract_features(&image, &cfg.backbone, &params.backbone).unwrap();
        let r = forward_rollout(&fm, (48, 48), &b, &params, &cfg, Actions::Mean, None).unwrap();
        let p = &r.output.class_probs;
        prop_assert_eq!(p.len(), cfg.num_classes + 1);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(r.output.bbox_deltas.len(), cfg.num_classes);
        prop_assert_eq!(r.steps.len(), steps);
    }
}
