use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsod_core::moe::{
    load_balance_loss, route_logits, top_k_indices, ExpertGroupKind, GateStatistics, LoraMoeConfig, LoraMoeLayer,
    Modality,
};
use vsod_core::nn::Linear;
use vsod_core::{Graph, ParamGroup, ParamStore, Session, Tensor};

const DIM: usize = 16;
const SPATIAL: (usize, usize) = (4, 4);

fn layer(seed: u64, top_k: usize) -> (ParamStore<f64>, LoraMoeLayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "proj", DIM, DIM, true, ParamGroup::Frozen, &mut rng);
    let config = LoraMoeConfig {
        rank: 4,
        top_k,
        experts: true,
    };
    let layer = LoraMoeLayer::new(&mut store, "proj", base, config, &mut rng).unwrap();
    (store, layer)
}

fn randomize_b(store: &mut ParamStore<f64>, layer: &LoraMoeLayer, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = store.value(layer.lora_b).shape().to_vec();
    store.set(layer.lora_b, Tensor::uniform(&shape, -0.5, 0.5, &mut rng)).unwrap();
}

fn input(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[DIM, SPATIAL.0 * SPATIAL.1], -1.0, 1.0, &mut rng)
}

fn forward(store: &ParamStore<f64>, layer: &LoraMoeLayer, x: &Tensor<f64>, modality: Modality) -> Tensor<f64> {
    let g = Graph::new();
    let s = Session::new(&g, store);
    let x = s.constant(x.clone());
    layer.moe_lora_forward(&s, x, SPATIAL, modality).unwrap().value()
}

#[test]
fn zero_b_matches_frozen_projection() {
    let (store, layer) = layer(1, 2);
    let x = input(2);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let frozen = layer.frozen_forward(&s, s.constant(x.clone())).unwrap().value();
    for m in [Modality::Rgb, Modality::Depth] {
        let adapted = forward(&store, &layer, &x, m);
        assert!(adapted.max_abs_diff(&frozen).unwrap() <= 1e-12);
    }
}

#[test]
fn nonzero_b_departs_from_frozen_projection() {
    let (mut store, layer) = layer(1, 2);
    randomize_b(&mut store, &layer, 3);
    let x = input(2);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let frozen = layer.frozen_forward(&s, s.constant(x.clone())).unwrap().value();
    assert!(forward(&store, &layer, &x, Modality::Rgb).max_abs_diff(&frozen).unwrap() > 1e-6);
}

#[test]
fn routing_is_exclusive_over_random_passes() {
    let (store, layer) = layer(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let count = |k: ExpertGroupKind| layer.group(k).invocations();
    let (mut rgb_passes, mut depth_passes) = (0, 0);
    for pass in 0..100 {
        let modality = if rng.gen_bool(0.5) { Modality::Rgb } else { Modality::Depth };
        let before = ExpertGroupKind::ALL.map(count);
        forward(&store, &layer, &input(100 + pass), modality);
        let after = ExpertGroupKind::ALL.map(count);
        let delta: Vec<usize> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
        match modality {
            Modality::Rgb => {
                rgb_passes += 1;
                assert_eq!(delta, [1, 0, 1]);
            }
            Modality::Depth => {
                depth_passes += 1;
                assert_eq!(delta, [0, 1, 1]);
            }
        }
    }
    assert_eq!(count(ExpertGroupKind::Rgb), rgb_passes);
    assert_eq!(count(ExpertGroupKind::Depth), depth_passes);
    assert_eq!(count(ExpertGroupKind::Fusion), 100);
}

#[test]
fn fusion_experts_affect_both_modalities() {
    let (mut store, layer) = layer(6, 3);
    randomize_b(&mut store, &layer, 7);
    let x = input(8);
    let before = [Modality::Rgb, Modality::Depth].map(|m| forward(&store, &layer, &x, m));
    let id = layer.group(ExpertGroupKind::Fusion).experts[0].convs[0].weight;
    store.value_mut(id).data_mut()[0] += 0.5;
    let after = [Modality::Rgb, Modality::Depth].map(|m| forward(&store, &layer, &x, m));
    for (b, a) in before.iter().zip(&after) {
        assert!(b.max_abs_diff(a).unwrap() > 1e-9);
    }
}

#[test]
fn rgb_experts_do_not_affect_depth_pass() {
    let (mut store, layer) = layer(6, 3);
    randomize_b(&mut store, &layer, 7);
    let x = input(8);
    let before = forward(&store, &layer, &x, Modality::Depth);
    let id = layer.group(ExpertGroupKind::Rgb).experts[0].convs[0].weight;
    store.value_mut(id).data_mut()[0] += 0.5;
    assert_eq!(forward(&store, &layer, &x, Modality::Depth), before);
}

#[test]
fn trainable_count_matches_enumeration() {
    let (store, layer) = layer(9, 2);
    let enumerated: usize = store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Adapter)
        .map(|(_, p)| p.value.len())
        .sum();
    assert_eq!(layer.trainable_count(), enumerated);
    assert_eq!(store.count(ParamGroup::Frozen), DIM * DIM + DIM);
}

#[test]
fn one_dimensional_token_layout_is_rejected() {
    let (store, layer) = layer(10, 2);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let x = s.constant(input(11));
    assert!(layer.moe_lora_forward(&s, x, (1, 16), Modality::Rgb).is_err());
    assert!(layer.moe_lora_forward(&s, x, (3, 5), Modality::Rgb).is_err());
}

#[test]
fn gate_arithmetic_matches_hand_derivation() {
    let g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_f64(&[3], &[0.0, 2f64.ln(), 4f64.ln()]).unwrap());
    let d = route_logits(logits, 2).unwrap();
    // Experts 3 and 2 in 1-based numbering: e^{ln4}/(4+2) and 2/(4+2).
    assert_eq!(d.selected, vec![2, 1]);
    let w = d.weights.value();
    assert!((w.data()[0] - 2.0 / 3.0).abs() < 1e-9);
    assert!((w.data()[1] - 1.0 / 3.0).abs() < 1e-9);
    assert_eq!(d.dense_weights.value().data(), &[0.0, w.data()[1], w.data()[0]]);
}

#[test]
fn ties_break_toward_lower_index() {
    assert_eq!(top_k_indices(&[0.5f64, 0.5, 0.5], 2), vec![0, 1]);
    assert_eq!(top_k_indices(&[0.1f64, 0.9, 0.9], 1), vec![1]);
}

#[test]
fn load_balance_reference_values() {
    let g = Graph::<f64>::new();
    let uniform = GateStatistics::from_values(&g, &[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(load_balance_loss(&uniform, 1e-2).unwrap().item(), 0.0);
    // Population variance of [1, 3] is 1 and its mean is 2: cv² = 1/4.
    let skewed = GateStatistics::from_values(&g, &[1.0, 3.0], &[2.0, 2.0]).unwrap();
    assert!((load_balance_loss(&skewed, 1e-2).unwrap().item() - 2.5e-3).abs() < 1e-9);
}

fn cv_squared_oracle(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    var / (mean * mean)
}

proptest! {
    #[test]
    fn gate_weights_are_sparse_and_normalized(
        logits in prop::collection::vec(-5.0f64..5.0, 3),
        k in 1usize..=3,
    ) {
        let g = Graph::<f64>::new();
        let d = route_logits(g.constant(Tensor::from_f64(&[3], &logits).unwrap()), k).unwrap();
        let dense = d.dense_weights.value();
        let nonzero = dense.data().iter().filter(|&&w| w != 0.0).count();
        prop_assert!(nonzero <= k);
        prop_assert!((dense.sum() - 1.0).abs() < 1e-6);
        prop_assert_eq!(d.selected, top_k_indices(&logits, k));
    }

    #[test]
    fn balance_loss_is_scale_invariant(
        importance in prop::collection::vec(0.1f64..5.0, 3),
        load in prop::collection::vec(0.1f64..5.0, 3),
        scale in 0.1f64..10.0,
    ) {
        let g = Graph::<f64>::new();
        let base = GateStatistics::from_values(&g, &importance, &load).unwrap();
        let scaled_i: Vec<f64> = importance.iter().map(|v| v * scale).collect();
        let scaled = GateStatistics::from_values(&g, &scaled_i, &load).unwrap();
        let a = load_balance_loss(&base, 1e-2).unwrap().item();
        let b = load_balance_loss(&scaled, 1e-2).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
        let oracle = 1e-2 * (cv_squared_oracle(&importance) + cv_squared_oracle(&load));
        prop_assert!((a - oracle).abs() < 1e-12);
    }
}
