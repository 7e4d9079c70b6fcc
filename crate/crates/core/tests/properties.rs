use bcsnet_core::data::{derive_boundary, split_dataset, BinaryMap, CtSlice, DatasetRecord, SegMask};
use bcsnet_core::losses::{boundary_bce, make_weight_map, wbce, wiou};
use bcsnet_core::metrics::{confusion, dsc, e_measure, mae, precision_recall, s_measure};
use proptest::prelude::*;

fn binary(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, len)
}

fn probs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, len)
}

fn flip_h(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| v[(i / w) * w + (w - 1 - i % w)]).collect()
}

fn flip_v(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|i| v[(h - 1 - i / w) * w + i % w]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn boundary_is_inside_mask_and_idempotent(px in binary(9 * 7)) {
        let mask = SegMask(BinaryMap::new(9, 7, px).unwrap());
        let b = derive_boundary(&mask);
        for (bv, mv) in b.0.pixels().iter().zip(mask.0.pixels()) {
            prop_assert!(*bv <= *mv);
        }
        let again = derive_boundary(&SegMask(b.0.clone()));
        prop_assert_eq!(again.0, b.0);
    }

    #[test]
    fn split_is_a_partition(n in 2usize..30, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let recs: Vec<DatasetRecord> = (0..n)
            .map(|i| {
                let plane = vec![i as f64 / n as f64; 4];
                let slice = CtSlice::from_plane(2, 2, &plane, format!("r{i}")).unwrap();
                DatasetRecord::new(format!("r{i}"), slice, SegMask(BinaryMap::zeros(2, 2))).unwrap()
            })
            .collect();
        let s = split_dataset(&recs, frac, seed).unwrap();
        prop_assert!(!s.train.is_empty() && !s.test.is_empty());
        let mut ids: Vec<String> = s.train.iter().chain(&s.test).map(|r| r.id.clone()).collect();
        ids.sort();
        let mut want: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
    }

    #[test]
    fn overlap_metrics_ignore_pixel_order(p in binary(64), g in binary(64), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..64).collect();
        let mut s = seed;
        for i in (1..64).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pp: Vec<u8> = order.iter().map(|&i| p[i]).collect();
        let gp: Vec<u8> = order.iter().map(|&i| g[i]).collect();
        let (a, b) = (confusion(&p, &g).unwrap(), confusion(&pp, &gp).unwrap());
        prop_assert_eq!(a, b);
        prop_assert_eq!(dsc(&a), dsc(&b));
        prop_assert_eq!(precision_recall(&a), precision_recall(&b));
        let f = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        prop_assert_eq!(mae(&f(&p), &f(&g)).unwrap(), mae(&f(&pp), &f(&gp)).unwrap());
    }

    #[test]
    fn measures_stay_in_unit_interval(p in probs(12 * 10), g in binary(12 * 10)) {
        let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let sm = s_measure(&p, &gf, 12, 10, 0.5).unwrap();
        let em = e_measure(&p, &gf).unwrap();
        prop_assert!((0.0..=1.0).contains(&sm));
        prop_assert!((0.0..=1.0).contains(&em));
    }

    #[test]
    fn e_measure_and_object_term_survive_flips(p in probs(8 * 6), g in binary(8 * 6)) {
        let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let base = e_measure(&p, &gf).unwrap();
        for f in [flip_h, flip_v] {
            let e = e_measure(&f(&p, 8, 6), &f(&gf, 8, 6)).unwrap();
            prop_assert!((e - base).abs() <= 1e-12);
            // α = 1 keeps only the object term
            let so = s_measure(&p, &gf, 8, 6, 1.0).unwrap();
            let sf = s_measure(&f(&p, 8, 6), &f(&gf, 8, 6), 8, 6, 1.0).unwrap();
            prop_assert!((so - sf).abs() <= 1e-12);
        }
    }

    #[test]
    fn seg_losses_are_symmetric_and_bounded(p in probs(6 * 6), g in binary(6 * 6)) {
        let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let eps = make_weight_map(&gf, 6, 6, 3, 5.0).unwrap();
        let inv_p: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let inv_g: Vec<f64> = gf.iter().map(|v| 1.0 - v).collect();
        let inv_eps = make_weight_map(&inv_g, 6, 6, 3, 5.0).unwrap();
        for (a, b) in eps.values.iter().zip(&inv_eps.values) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let a = wbce(&p, &gf, &eps).unwrap();
        let b = wbce(&inv_p, &inv_g, &eps).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(a >= 0.0 && a.is_finite());
        let i = wiou(&p, &gf, &eps).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
        let bb = boundary_bce(&p, &gf).unwrap();
        prop_assert!(bb >= 0.0 && bb.is_finite());
    }
}
