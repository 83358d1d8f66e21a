use proptest::prelude::*;
use sslseg_core::crf::{crf_refine, CrfParams};
use sslseg_core::data::Split;
use sslseg_core::ensemble::ProbabilityMap;
use sslseg_core::metrics::iou_flooded;
use sslseg_core::pseudo::{filter_decision, ConfidenceFilterConfig, Prediction};
use sslseg_core::synth::{generate_synthetic_dataset, GeneratorSpec, RegionProfile};

fn softened(mask: &[u8], h: usize, w: usize, p: f64) -> ProbabilityMap {
    let n = h * w;
    let mut data = vec![0.0; 2 * n];
    for (i, &l) in mask.iter().enumerate() {
        let f = if l == 1 { p } else { 1.0 - p };
        data[i] = 1.0 - f;
        data[n + i] = f;
    }
    ProbabilityMap::new(h, w, data).unwrap()
}

#[test]
fn default_crf_stays_close_to_a_correct_soft_prediction() {
    let spec = GeneratorSpec {
        tile_size: 32,
        tile_count: 6,
        flood_proportion: 1.0,
        swath_gap_rate: 0.0,
        region: RegionProfile::region_c(),
        split: Split::Val,
        ..GeneratorSpec::default()
    };
    let index = generate_synthetic_dataset(&spec, 11).unwrap();
    for ex in index.examples() {
        let m = ex.mask();
        let probs = softened(m.labels(), m.height(), m.width(), 0.7);
        let refined = crf_refine(&probs, ex.image(), &CrfParams::default()).unwrap();
        let iou = iou_flooded(&refined.labels, m).unwrap();
        assert!(iou > 0.6, "{}: IoU after refinement {iou}", ex.id());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_thresholds_never_admits_more(
        flooded in proptest::collection::vec(0.0f64..1.0, 64),
        c in 0.05f64..0.95,
        p in 0.05f64..0.95,
        dc in 0.0f64..0.04,
        dp in 0.0f64..0.04,
    ) {
        let n = flooded.len();
        let data: Vec<f64> = flooded.iter().map(|f| 1.0 - f).chain(flooded.iter().copied()).collect();
        let pred = Prediction::from_probs("t", ProbabilityMap::new(8, 8, data).unwrap()).unwrap();
        let loose = filter_decision(&pred, &ConfidenceFilterConfig { c, p }, None).unwrap();
        let strict = filter_decision(&pred, &ConfidenceFilterConfig { c: c + dc, p: p + dp }, None).unwrap();
        prop_assert!(strict.confident_pixel_count <= loose.confident_pixel_count);
        prop_assert!(!strict.kept || loose.kept);
        prop_assert_eq!(loose.considered_pixels, n);
    }

    #[test]
    fn invalid_pixels_never_count(
        flooded in proptest::collection::vec(0.0f64..1.0, 64),
        valid in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let data: Vec<f64> = flooded.iter().map(|f| 1.0 - f).chain(flooded.iter().copied()).collect();
        let pred = Prediction::from_probs("t", ProbabilityMap::new(8, 8, data).unwrap()).unwrap();
        let d = filter_decision(&pred, &ConfidenceFilterConfig::default(), Some(&valid)).unwrap();
        let expected = pred.confidence().iter().zip(&valid).filter(|(&q, &v)| v && q > 0.9).count();
        prop_assert_eq!(d.confident_pixel_count, expected);
        prop_assert_eq!(d.considered_pixels, valid.iter().filter(|&&v| v).count());
    }
}
