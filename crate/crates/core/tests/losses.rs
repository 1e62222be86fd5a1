#![allow(clippy::needless_range_loop)] // oracles index on purpose

use proptest::prelude::*;
use vsod_core::decoder::DecoderOutputs;
use vsod_core::losses::{aux_loss, boundary_weights, sobel_edges, structure_loss, total_loss};
use vsod_core::{Graph, ParamStore, Session, Tensor};

const GT: [f64; 16] = [
    0.0, 0.0, 0.0, 0.0, //
    0.0, 1.0, 1.0, 0.0, //
    0.0, 1.0, 1.0, 1.0, //
    0.0, 0.0, 1.0, 1.0,
];
const LOGITS: [f64; 16] = [
    -2.0, -1.5, 0.3, -0.7, //
    -0.2, 1.8, 0.9, -1.1, //
    0.4, 2.2, -0.3, 1.4, //
    -1.9, 0.1, 1.2, 0.6,
];

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, g: f64) -> f64 {
    -(g * sigmoid(z).ln() + (1.0 - g) * (1.0 - sigmoid(z)).ln())
}

fn weights_oracle(gt: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            for dy in -7..=7 {
                for dx in -7..=7 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        sum += gt[yy as usize * w + xx as usize];
                    }
                }
            }
            let i = y as usize * w + x as usize;
            out[i] = 1.0 + 5.0 * (sum / 225.0 - gt[i]).abs();
        }
    }
    out
}

fn structure_oracle(logits: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let wt = weights_oracle(gt, h, w);
    let (mut wbce, mut wsum, mut inter, mut union) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let p = sigmoid(logits[i]);
        wbce += wt[i] * bce(logits[i], gt[i]);
        wsum += wt[i];
        inter += wt[i] * p * gt[i];
        union += wt[i] * (p + gt[i]);
    }
    wbce / wsum + 1.0 - (inter + 1.0) / (union - inter + 1.0)
}

fn downsample_oracle(gt: &[f64], side: usize, out: usize) -> Vec<f64> {
    let f = side / out;
    let mut res = Vec::new();
    for y in 0..out {
        for x in 0..out {
            let mut sum = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    sum += gt[(y * f + dy) * side + x * f + dx];
                }
            }
            res.push(if sum / (f * f) as f64 >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    res
}

fn sobel_oracle(gt: &[f64], side: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| gt[y.clamp(0, side as isize - 1) as usize * side + x.clamp(0, side as isize - 1) as usize];
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut mag = Vec::new();
    for y in 0..side as isize {
        for x in 0..side as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = at(y + i as isize - 1, x + j as isize - 1);
                    gx += kx[i][j] * v;
                    gy += kx[j][i] * v;
                }
            }
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    mag.iter().map(|&m| if max > 0.0 && m / max >= 0.5 { 1.0 } else { 0.0 }).collect()
}

fn t(side: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[1, side, side], data).unwrap()
}

fn decoder_outputs<'g>(g: &'g Graph<f64>) -> (DecoderOutputs<'g, f64>, [Vec<f64>; 3], [Vec<f64>; 3]) {
    let coarse = [LOGITS.to_vec(), vec![0.5, -1.0, 0.2, 1.5], vec![0.8]];
    let edges = [LOGITS.iter().map(|v| -0.5 * v).collect(), vec![-0.3, 0.4, 1.1, -2.0], vec![-0.6]];
    let side = |v: &Vec<f64>| (v.len() as f64).sqrt() as usize;
    let out = DecoderOutputs {
        features: Vec::new(),
        coarse: coarse.iter().map(|v| g.variable(t(side(v), v))).collect(),
        edges: edges.iter().map(|v| g.variable(t(side(v), v))).collect(),
    };
    (out, coarse, edges)
}

fn aux_oracle(coarse: &[Vec<f64>; 3], edges: &[Vec<f64>; 3]) -> f64 {
    let mut total = 0.0;
    for (c, e) in coarse.iter().zip(edges) {
        let side = (c.len() as f64).sqrt() as usize;
        let level_gt = downsample_oracle(&GT, 4, side);
        total += structure_oracle(c, &level_gt, side, side);
        let edge_gt = sobel_oracle(&level_gt, side);
        total += e.iter().zip(&edge_gt).map(|(&z, &g)| bce(z, g)).sum::<f64>() / e.len() as f64;
    }
    total
}

#[test]
fn boundary_weights_match_window_sum() {
    let w = boundary_weights(&t(4, &GT)).unwrap();
    for (a, b) in w.data().iter().zip(weights_oracle(&GT, 4, 4)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn structure_loss_matches_scalar_loop() {
    let store = ParamStore::new();
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let loss = structure_loss(&s, s.constant(t(4, &LOGITS)), &t(4, &GT)).unwrap().item();
    assert!((loss - structure_oracle(&LOGITS, &GT, 4, 4)).abs() < 1e-6);
}

#[test]
fn structure_loss_rejects_soft_targets_and_shape_mismatch() {
    let store = ParamStore::new();
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let mut soft = GT;
    soft[0] = 0.5;
    assert!(structure_loss(&s, s.constant(t(4, &LOGITS)), &t(4, &soft)).is_err());
    assert!(structure_loss(&s, s.constant(t(4, &LOGITS)), &t(2, &[0.0; 4])).is_err());
}

#[test]
fn aux_loss_matches_scalar_loop() {
    let store = ParamStore::new();
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let (outputs, coarse, edges) = decoder_outputs(&g);
    let aux = aux_loss(&s, &outputs, &t(4, &GT)).unwrap();
    assert!((aux.total.item() - aux_oracle(&coarse, &edges)).abs() < 1e-6);
    let parts: f64 = aux.coarse.iter().chain(&aux.edge).map(|v| v.item()).sum();
    assert!((parts - aux.total.item()).abs() < 1e-12);
}

#[test]
fn breakdown_is_additive_and_nonnegative() {
    let store = ParamStore::new();
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let (outputs, _, _) = decoder_outputs(&g);
    let logits = s.constant(t(4, &LOGITS));
    let moe = g.scalar(0.0123);
    let gt = vec![t(4, &GT), t(4, &GT)];
    let b = total_loss(&s, &[(logits, &outputs), (logits, &outputs)], &gt, moe).unwrap();
    let v = b.values();
    assert!((v.total - (v.pred + v.aux + v.moe)).abs() < 1e-6);
    assert!(v.pred >= 0.0 && v.aux >= 0.0 && v.moe >= 0.0);
    assert!((v.pred - structure_oracle(&LOGITS, &GT, 4, 4)).abs() < 1e-6);
    let per_level: f64 = b.aux_coarse.iter().chain(&b.aux_edge).map(|x| x.item()).sum();
    assert!((per_level - v.aux).abs() < 1e-6);
}

#[test]
fn mismatched_frame_count_is_rejected() {
    let store = ParamStore::new();
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let (outputs, _, _) = decoder_outputs(&g);
    let logits = s.constant(t(4, &LOGITS));
    assert!(total_loss(&s, &[(logits, &outputs)], &[], g.scalar(0.0)).is_err());
}

fn binary_map(side: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| f64::from(u8::from(b))), side * side)
}

proptest! {
    #[test]
    fn weight_field_stays_in_range(gt in binary_map(6)) {
        let w = boundary_weights(&t(6, &gt)).unwrap();
        prop_assert!(w.data().iter().all(|&v| (1.0..=6.0).contains(&v)));
    }

    #[test]
    fn sobel_edges_ignore_complement(gt in binary_map(5)) {
        let inverse: Vec<f64> = gt.iter().map(|v| 1.0 - v).collect();
        prop_assert_eq!(sobel_edges(&t(5, &gt)).unwrap(), sobel_edges(&t(5, &inverse)).unwrap());
        let oracle = sobel_oracle(&gt, 5);
        prop_assert_eq!(sobel_edges(&t(5, &gt)).unwrap().into_data(), oracle);
    }

    #[test]
    fn structure_loss_is_nonnegative(
        logits in prop::collection::vec(-6.0f64..6.0, 16),
        gt in binary_map(4),
    ) {
        let store = ParamStore::new();
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let loss = structure_loss(&s, s.constant(t(4, &logits)), &t(4, &gt)).unwrap().item();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - structure_oracle(&logits, &gt, 4, 4)).abs() < 1e-9);
    }
}
