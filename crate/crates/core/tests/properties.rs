use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Array4, Axis};
use proptest::prelude::*;

use concept_em::attention::{aggregate_token_map, min_max_normalize, AttentionLayer, AttentionStack};
use concept_em::config::RunConfig;
use concept_em::diffusion::make_schedule;
use concept_em::eval::{compare_runs, cosine, smooth, EvalReport, MetricRecord, COMPARED_METRICS};
use concept_em::mask::{binarize, crf_refine, iou, CrfParams, DenseKernel};
use concept_em::personalize::Cadence;
use concept_em::scene::{generate_corpus, CorpusSpec};

fn small_spec(heldout_sprites: usize) -> CorpusSpec {
    CorpusSpec { train_size: 3, heldout_size: 2, image_size: 16, heldout_sprites, ..Default::default() }
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Array3<f32>> {
    prop::collection::vec(0.0f32..=1.0, h * w * 3).prop_map(move |v| Array3::from_shape_vec((h, w, 3), v).unwrap())
}

fn distribution(h: usize, w: usize, l: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(0.01f64..1.0, h * w * l).prop_map(move |v| {
        let mut q = Array3::from_shape_vec((h, w, l), v).unwrap();
        for mut row in q.lanes_mut(Axis(2)) {
            let s = row.sum();
            row /= s;
        }
        q
    })
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<bool>> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn stack(heads: usize, h: usize, w: usize, n: usize) -> impl Strategy<Value = AttentionStack> {
    prop::collection::vec(0.01f64..1.0, heads * h * w * n).prop_map(move |v| {
        let mut maps = Array4::from_shape_vec((heads, h, w, n), v).unwrap();
        for mut row in maps.lanes_mut(Axis(3)) {
            let s = row.sum();
            row /= s;
        }
        AttentionStack { t: 0, layers: vec![AttentionLayer { layer_id: "l".into(), height: h, width: w, maps }] }
    })
}

fn blend(a: &AttentionStack, b: &AttentionStack, alpha: f64) -> AttentionStack {
    let mut out = a.clone();
    for (lo, (la, lb)) in out.layers.iter_mut().zip(a.layers.iter().zip(&b.layers)) {
        lo.maps = &la.maps * alpha + &lb.maps * (1.0 - alpha);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn gt_masks_partition_every_scene(seed in any::<u64>(), sprites in 0usize..=4) {
        let corpus = generate_corpus(&small_spec(sprites), seed).unwrap();
        for s in corpus.train.iter().chain(&corpus.heldout) {
            let mut count = Array2::<u32>::zeros((16, 16));
            for m in s.gt_masks.values() {
                count += &m.mapv(u32::from);
            }
            prop_assert!(count.iter().all(|&c| c == 1));
            for label in s.caption.positions.keys() {
                prop_assert!(s.gt_masks[label].iter().any(|&v| v), "{label} has an empty mask");
            }
        }
    }

    #[test]
    fn corpus_is_a_pure_function_of_seed(seed in any::<u64>()) {
        prop_assert_eq!(generate_corpus(&small_spec(2), seed).unwrap(), generate_corpus(&small_spec(2), seed).unwrap());
    }

    #[test]
    fn alpha_bars_strictly_decrease(steps in 2usize..300, lo in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = make_schedule(steps, lo, lo + span).unwrap();
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn aggregation_is_linear(a in stack(2, 4, 4, 5), b in stack(2, 4, 4, 5), alpha in 0.0f64..=1.0, p in 0usize..5) {
        let mixed = aggregate_token_map(&blend(&a, &b, alpha), p, (8, 8)).unwrap();
        let sep = aggregate_token_map(&a, p, (8, 8)).unwrap() * alpha + aggregate_token_map(&b, p, (8, 8)).unwrap() * (1.0 - alpha);
        let err = mixed.iter().zip(sep.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12, "{err}");
        let n = min_max_normalize(&mixed);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mean_field_keeps_distributions_normalized(
        img in image(4, 5),
        q in distribution(4, 5, 3),
        u in distribution(4, 5, 3),
        w_app in 0.0f64..5.0,
        theta in 0.5f64..6.0,
    ) {
        let params = CrfParams { w_appearance: w_app, theta_alpha: theta, ..Default::default() };
        let kernel = DenseKernel::new(&img, &params).unwrap();
        let unary = u.mapv(|v| -v.ln());
        let mut cur = q;
        for _ in 0..5 {
            cur = kernel.step(&cur, &unary).unwrap();
            for row in cur.lanes(Axis(2)) {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn crf_refine_is_deterministic_and_disjoint(img in image(6, 6), a in mask(6, 6), b in mask(6, 6)) {
        let p = CrfParams::default();
        let x = crf_refine(&img, &[a.clone(), b.clone()], &p).unwrap();
        let y = crf_refine(&img, &[a, b], &p).unwrap();
        prop_assert_eq!(&x, &y);
        prop_assert!(x.masks[0].iter().zip(x.masks[1].iter()).all(|(u, v)| !(*u && *v)));
    }

    #[test]
    fn iou_properties(a in mask(5, 5), b in mask(5, 5)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        if a.iter().any(|&v| v) {
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }

    #[test]
    fn higher_threshold_gives_subset(v in prop::collection::vec(0.0f64..=1.0, 36), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
        let soft = Array2::from_shape_vec((6, 6), v).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (ml, mh) = (binarize(&soft, lo), binarize(&soft, hi));
        prop_assert!(mh.iter().zip(ml.iter()).all(|(h, l)| !*h || *l));
    }

    #[test]
    fn cadence_and_config_overrides_round_trip(n in 1usize..10_000, lambda in 0.0f64..10.0) {
        let c = if n % 7 == 0 { Cadence::Never } else { Cadence::Every(n) };
        let json = serde_json::to_string(&c).unwrap();
        prop_assert_eq!(serde_json::from_str::<Cadence>(&json).unwrap(), c);
        let cfg = RunConfig::default()
            .with_overrides(vec![("CEM_PERSONALIZE__LAMBDA_ATTN".to_string(), format!("{lambda:?}"))])
            .unwrap();
        prop_assert_eq!(cfg.personalize.lambda_attn, lambda);
    }

    #[test]
    fn report_round_trips_losslessly(values in prop::collection::vec((0usize..3, 0usize..4, prop::option::of(0.0f64..1.0)), 1..30)) {
        let mut r = EvalReport::default();
        r.meta.insert("k".into(), "v".into());
        for (scene, m, v) in values {
            r.push(MetricRecord::new(&format!("s{scene}"), COMPARED_METRICS[m], v).concept("c").seed(m as u64)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        r.write_jsonl(&path).unwrap();
        prop_assert_eq!(&EvalReport::read_jsonl(&path).unwrap(), &r);
        prop_assert!(compare_runs(&r, &r).unwrap().iter().all(|row| row.delta.is_none_or(|d| d == 0.0)));
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        let c = cosine(&a, &b);
        prop_assert_eq!(c, cosine(&b, &a));
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn smoothing_preserves_constants_and_length(v in 0.0f64..=1.0, n in 1usize..40) {
        let series: Vec<(usize, f64)> = (0..n).map(|i| (i * 25, v)).collect();
        let s = smooth(&series, 3);
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.iter().all(|&(_, x)| (x - v).abs() < 1e-15));
    }
}

#[test]
fn empty_history_maps_are_rejected() {
    assert!(concept_em::eval::iou_curve_from(&[], &BTreeSet::new()).is_err());
}
