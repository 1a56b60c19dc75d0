use dsc_core::data::vocab::{CaptionField, BOS, RESERVED_COUNT};
use dsc_core::data::{BoundarySample, CaptionTriplet, DatasetHeader};
use dsc_core::gradcheck::GradCheckSetup;
use dsc_core::model::network::{build_streams, encode_layer, project_features, LayerMasks, StreamKind};
use dsc_core::model::{DualStreamModel, ModelConfig, ModelParams, Profile};
use dsc_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D_APP: usize = 6;
const D_MOT: usize = 5;
const D_REG: usize = 7;
const D_TYP: usize = 4;

fn desk(vocab: usize) -> ModelConfig {
    let header = DatasetHeader {
        d_app: D_APP,
        d_mot: D_MOT,
        d_reg: D_REG,
        d_typ: D_TYP,
        boundary_types: vec!["a".into(), "b".into(), "c".into()],
        ..DatasetHeader::default()
    };
    ModelConfig::for_dataset(Profile::Desk, &header, vocab)
}

fn features(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sample(seed: u64, t_a: usize, t_m: usize, k: usize) -> BoundarySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BoundarySample {
        boundary_id: format!("s{seed}"),
        appearance: features(&mut rng, t_a, D_APP),
        motion: features(&mut rng, t_m, D_MOT),
        regions: features(&mut rng, k, D_REG),
        boundary_type_id: (seed % 3) as usize,
        captions: CaptionTriplet::from_text("a", "b", "c"),
    }
}

/// Model with every parameter perturbed, so heads are not uniform.
fn model(seed: u64, vocab: usize) -> DualStreamModel {
    let mut m = DualStreamModel::new(desk(vocab), seed).unwrap();
    m.params.jitter(seed + 100, 0.2);
    m
}

fn prefix(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut p = vec![BOS, CaptionField::ALL[rng.random_range(0..3)].tag()];
    while p.len() < len {
        p.push(rng.random_range(RESERVED_COUNT..vocab));
    }
    p
}

#[test]
fn projection_shapes() {
    let m = model(1, 20);
    let s = sample(1, 4, 2, 10);
    let mut g = Graph::new();
    let pv = m.params.register(&mut g, false);
    let x = project_features(&mut g, &pv, &m.params, &m.config, &s, &[BOS, 4, 9]).unwrap();
    assert_eq!(g.shape(x.appearance), &[4, 32]);
    assert_eq!(g.shape(x.motion), &[2, 32]);
    assert_eq!(g.shape(x.regions), &[10, 32]);
    assert_eq!(g.shape(x.boundary_type), &[1, 32]);
    assert_eq!(g.shape(x.caption), &[3, 32]);

    let streams = build_streams(&mut g, &x).unwrap();
    assert_eq!(g.shape(streams.local), &[14, 32]);
    assert_eq!(g.shape(streams.global), &[10, 32]);
    assert_eq!(streams.local_layout.caption_rows(), 11..14);
    assert_eq!(streams.global_layout.caption_rows(), 7..10);

    let masks = LayerMasks::new(&streams.local_layout, &streams.global_layout);
    let mut probes = Vec::new();
    let (l, gl) = encode_layer(
        &mut g,
        &pv,
        &m.params.layout.layers[0],
        0,
        m.config.heads,
        streams.local,
        streams.global,
        &masks,
        &mut probes,
    )
    .unwrap();
    assert_eq!(g.shape(l), &[14, 32]);
    assert_eq!(g.shape(gl), &[10, 32]);
    assert_eq!(probes.len(), 4 * m.config.heads);

    let single = project_features(&mut g, &pv, &m.params, &m.config, &s, &[BOS]).unwrap();
    assert_eq!(g.shape(single.caption), &[1, 32]);
}

#[test]
fn width_mismatch_and_bad_prefix_rejected() {
    let m = model(2, 20);
    let mut s = sample(2, 3, 2, 4);
    assert!(m.forward(&s, &[BOS, 4]).is_ok());
    assert!(m.forward(&s, &[4, BOS]).is_err());
    assert!(m.forward(&s, &[BOS]).is_err());
    assert!(m.forward(&s, &[BOS, 4, 20]).is_err());
    assert!(
        m.forward(&s, &[BOS, 4, 9, 9, 9, 9, 9, 9, 9]).is_err(),
        "longer than max_caption_len"
    );
    s.motion = Tensor::zeros(&[2, D_MOT + 1]).unwrap();
    assert!(m.forward(&s, &[BOS, 4]).is_err());
}

#[test]
fn projected_regions_follow_row_permutation() {
    let m = model(3, 20);
    let s = sample(3, 3, 2, 5);
    let perm = [3, 0, 4, 1, 2];
    let mut t = s.clone();
    t.regions = s.regions.permute_rows(&perm).unwrap();
    let regions = |s: &BoundarySample| {
        let mut g = Graph::new();
        let pv = m.params.register(&mut g, false);
        let x = project_features(&mut g, &pv, &m.params, &m.config, s, &[BOS, 4]).unwrap();
        g.value(x.regions)
    };
    let (a, b) = (regions(&s), regions(&t));
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(i), a.row(p));
    }
}

#[test]
fn encode_layer_is_region_equivariant() {
    let m = model(4, 20);
    let s = sample(4, 3, 2, 10);
    let perm: Vec<usize> = (0..10).rev().collect();
    let mut t = s.clone();
    t.regions = s.regions.permute_rows(&perm).unwrap();
    let run = |s: &BoundarySample| {
        let mut g = Graph::new();
        let pv = m.params.register(&mut g, false);
        let x = project_features(&mut g, &pv, &m.params, &m.config, s, &[BOS, 5, 8]).unwrap();
        let st = build_streams(&mut g, &x).unwrap();
        let masks = LayerMasks::new(&st.local_layout, &st.global_layout);
        let mut probes = Vec::new();
        let layer = &m.params.layout.layers[0];
        let (l, gl) = encode_layer(
            &mut g,
            &pv,
            layer,
            0,
            m.config.heads,
            st.local,
            st.global,
            &masks,
            &mut probes,
        )
        .unwrap();
        (g.value(l), g.value(gl))
    };
    let ((la, ga), (lb, gb)) = (run(&s), run(&t));
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in lb.row(i).iter().zip(la.row(p)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    for r in 10..la.rows() {
        for (x, y) in la.row(r).iter().zip(lb.row(r)) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    assert!(ga.max_abs_diff(&gb) < 1e-9);
}

#[test]
fn stream_order_matters() {
    let m = model(5, 20);
    let a = sample(5, 3, 3, 4);
    let mut b = a.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    b.appearance = features(&mut rng, 3, D_APP);
    let p = [BOS, 4, 9];
    assert_ne!(m.forward(&a, &p).unwrap(), m.forward(&b, &p).unwrap());
}

#[test]
fn degenerate_fusion_weights_select_local_head() {
    let mut m = model(6, 20);
    m.config.lambda1 = 1.0;
    m.config.lambda2 = 0.0;
    let out = m.forward(&sample(6, 3, 2, 4), &[BOS, 6, 10, 11]).unwrap();
    assert_eq!(out.p_fused, out.p_local);
    assert_ne!(out.p_fused, out.p_global);
}

#[test]
fn padding_regions_changes_nothing() {
    let m = model(7, 20);
    let s = sample(7, 3, 2, 4);
    let mut tight = m.clone();
    tight.config.max_regions = 4;
    let p = [BOS, 5, 12, 8];
    assert_eq!(m.forward(&s, &p).unwrap(), tight.forward(&s, &p).unwrap());
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let c = desk(30);
    let a = ModelParams::init(&c, 1).unwrap();
    let b = ModelParams::init(&c, 2).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert_eq!(a.parameter_count(), dsc_core::model::params::parameter_count(&c));
    assert_ne!(a, b);
}

#[test]
fn one_layer_gradients_match_finite_differences() {
    let r = GradCheckSetup {
        seed: 3,
        d: 16,
        heads: 2,
        layers: 1,
        ..GradCheckSetup::default()
    }
    .run()
    .unwrap();
    assert!(r.max_rel_error() < 1e-5, "{r:#?}");
}

#[test]
fn attention_weights_respect_masks() {
    let m = model(8, 20);
    let s = sample(8, 4, 2, 3);
    let mut g = Graph::new();
    let pv = m.params.register(&mut g, false);
    let out = m.forward_graph(&mut g, &pv, &s, &[BOS, 4, 9, 10]).unwrap();
    assert_eq!(out.attention.len(), m.config.layers * 4 * m.config.heads);
    assert!(out.attention.iter().any(|p| p.stream == StreamKind::Global));
    for probe in &out.attention {
        let w = g.value(probe.weights);
        let (rows, cols) = w.dims2().unwrap();
        for i in 0..rows {
            for j in 0..cols {
                if !probe.mask.allows(i, j) {
                    assert_eq!(w.get2(i, j), 0.0);
                }
            }
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_normalized(seed in 0u64..1000, t_a in 1usize..6, t_m in 1usize..4, k in 1usize..11, len in 2usize..9) {
        let m = model(seed % 4, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = prefix(&mut rng, len, 24);
        let out = m.forward(&sample(seed, t_a, t_m, k), &p).unwrap();
        for t in [&out.p_local, &out.p_global, &out.p_fused] {
            prop_assert_eq!(t.shape(), &[len, 24]);
            for r in 0..len {
                prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rows_before_a_change_are_bit_identical(seed in 0u64..1000, len in 3usize..9, pos_frac in 0.0f64..1.0) {
        let m = model(seed % 4, 24);
        let s = sample(seed, 3, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = prefix(&mut rng, len, 24);
        let t = 2 + ((len - 2) as f64 * pos_frac) as usize;
        let t = t.min(len - 1);
        let mut b = a.clone();
        b[t] = RESERVED_COUNT + (a[t] + 1 - RESERVED_COUNT) % (24 - RESERVED_COUNT);
        let (oa, ob) = (m.forward(&s, &a).unwrap(), m.forward(&s, &b).unwrap());
        for (x, y) in [(&oa.p_local, &ob.p_local), (&oa.p_global, &ob.p_global), (&oa.p_fused, &ob.p_fused)] {
            for r in 0..t {
                prop_assert_eq!(x.row(r), y.row(r));
            }
        }
        prop_assert_ne!(oa.p_fused.row(t), ob.p_fused.row(t));
    }

    #[test]
    fn region_permutation_keeps_fused_probabilities(seed in 0u64..1000, k in 2usize..11) {
        let m = model(seed % 4, 24);
        let s = sample(seed, 3, 2, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut t = s.clone();
        t.regions = s.regions.permute_rows(&perm).unwrap();
        let p = prefix(&mut rng, 5, 24);
        let d = m.forward(&s, &p).unwrap().p_fused.max_abs_diff(&m.forward(&t, &p).unwrap().p_fused);
        prop_assert!(d <= 1e-9, "{}", d);
    }
}
