#![allow(clippy::needless_range_loop)] // oracles index on purpose

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsod_core::memory::{EntryTag, MemoryBank, MemoryEntry, TemporalMemory};
use vsod_core::{Graph, ParamStore, Session, Tensor};

const IN_CH: usize = 6;
const KEY_DIM: usize = 8;
const VALUE_DIM: usize = 5;

fn memory(seed: u64) -> (ParamStore<f64>, TemporalMemory) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = TemporalMemory::new(&mut store, IN_CH, KEY_DIM, VALUE_DIM, false, &mut rng);
    (store, m)
}

fn map(channels: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[channels, h, w], -1.0, 1.0, &mut rng)
}

fn prob(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[1, h, w], 0.0, 1.0, &mut rng)
}

fn tagged<'g>(g: &'g Graph<f64>, tag: EntryTag) -> MemoryEntry<'g, f64> {
    MemoryEntry {
        tag,
        key: g.constant(Tensor::zeros(&[2, 3])),
        value: g.constant(Tensor::zeros(&[2, 3])),
    }
}

proptest! {
    #[test]
    fn bank_is_a_bounded_fifo(capacity in 1usize..6, extra in 0usize..13) {
        let writes = (capacity * 3).min(capacity + extra);
        let g = Graph::new();
        let mut bank = MemoryBank::new(capacity).unwrap();
        bank.push(tagged(&g, EntryTag::Pseudo)).unwrap();
        let mut all = vec![EntryTag::Pseudo];
        for n in 0..writes {
            bank.push(tagged(&g, EntryTag::Frame(n))).unwrap();
            all.push(EntryTag::Frame(n));
            prop_assert_eq!(bank.len(), all.len().min(capacity));
            let kept = all.len() - bank.len();
            prop_assert_eq!(bank.tags(), all[kept..].to_vec());
            prop_assert_eq!(bank.evicted(), &all[..kept]);
        }
    }
}

#[test]
fn zero_capacity_is_rejected() {
    assert!(MemoryBank::<f64>::new(0).is_err());
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, m) = memory(1);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let mut bank = MemoryBank::new(3).unwrap();
    let x0 = s.constant(map(IN_CH, 3, 4, 2));
    m.pseudo_init(&s, &mut bank, x0, s.constant(prob(3, 4, 3))).unwrap();
    for t in 0..5 {
        let x = s.constant(map(IN_CH, 3, 4, 10 + t as u64));
        let read = m.read(&s, &bank, x).unwrap();
        let att = read.attention.value();
        assert_eq!(att.shape(), &[12, 12 * bank.len()]);
        for row in att.data().chunks(12 * bank.len()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&a| a > 0.0));
        }
        m.write(&s, &mut bank, t, read.query, x, s.constant(prob(3, 4, 20 + t as u64))).unwrap();
    }
    assert_eq!(bank.len(), 3);
}

#[test]
fn reading_an_empty_bank_fails() {
    let (store, m) = memory(1);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let bank = MemoryBank::new(2).unwrap();
    assert!(m.read(&s, &bank, s.constant(map(IN_CH, 2, 2, 0))).is_err());
}

#[test]
fn pseudo_init_requires_an_empty_bank() {
    let (store, m) = memory(1);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let mut bank = MemoryBank::new(2).unwrap();
    let x = s.constant(map(IN_CH, 2, 2, 0));
    let p = s.constant(prob(2, 2, 1));
    m.pseudo_init(&s, &mut bank, x, p).unwrap();
    assert!(m.pseudo_init(&s, &mut bank, x, p).is_err());
}

#[test]
fn value_encoder_is_one_shared_projection() {
    let (mut store, m) = memory(4);
    let names: Vec<_> = store.iter().map(|(_, p)| p.name.clone()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("memory.value.")).count(), 2);
    assert_eq!(m.value_encoder.weight, store.id("memory.value.weight").unwrap());

    let x = map(IN_CH, 2, 3, 5);
    let p = prob(2, 3, 6);
    let values = |store: &ParamStore<f64>| {
        let g = Graph::new();
        let s = Session::new(&g, store);
        let mut bank = MemoryBank::new(4).unwrap();
        let xv = s.constant(x.clone());
        m.pseudo_init(&s, &mut bank, xv, s.constant(p.clone())).unwrap();
        let q = m.project_query(&s, xv).unwrap();
        m.write(&s, &mut bank, 0, q, xv, s.constant(p.clone())).unwrap();
        bank.entries().map(|e| e.value.value()).collect::<Vec<_>>()
    };
    let before = values(&store);
    store.value_mut(m.value_encoder.weight).data_mut()[0] += 0.25;
    let after = values(&store);
    assert_eq!(after.len(), 2);
    for (b, a) in before.iter().zip(&after) {
        assert!(b.max_abs_diff(a).unwrap() > 1e-9, "pseudo and frame values both depend on the shared encoder");
    }
}

#[test]
fn noisy_pseudo_keys_draw_low_attention() {
    let (store, m) = memory(7);
    let g = Graph::new();
    let s = Session::new(&g, &store);
    let (h, w) = (2, 2);
    let x0 = s.constant(map(IN_CH, h, w, 8));
    let q0 = m.project_query(&s, x0).unwrap();

    // Large random keys with every query direction of both frames projected
    // out, so their logits vanish.
    let mut x1_data = map(IN_CH, h, w, 8);
    for v in x1_data.data_mut() {
        *v *= 1.05;
    }
    let x1 = s.constant(x1_data);
    let q1 = m.project_query(&s, x1).unwrap().value();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut noise = Tensor::<f64>::uniform(&[KEY_DIM, h * w], -1.0, 1.0, &mut rng);
    let qs = [q0.value(), q1];
    let tokens = h * w;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for q in &qs {
        for t in 0..tokens {
            let mut v: Vec<f64> = (0..KEY_DIM).map(|d| q.data()[d * tokens + t]).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
    }
    for t in 0..tokens {
        let mut col: Vec<f64> = (0..KEY_DIM).map(|d| noise.data()[d * tokens + t]).collect();
        for b in &basis {
            let dot: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        for d in 0..KEY_DIM {
            noise.data_mut()[d * tokens + t] = 50.0 * col[d];
        }
    }

    let mut bank = MemoryBank::new(4).unwrap();
    let value = m.encode_value(&s, x0, s.constant(prob(h, w, 10))).unwrap();
    bank.push(MemoryEntry {
        tag: EntryTag::Pseudo,
        key: s.constant(noise),
        value: value.reshape(&[VALUE_DIM, tokens]).unwrap(),
    })
    .unwrap();
    m.write(&s, &mut bank, 0, q0, x0, s.constant(prob(h, w, 11))).unwrap();

    let att = m.read(&s, &bank, x1).unwrap().attention.value();
    let (mut pseudo, mut frame) = (0.0, 0.0);
    for row in att.data().chunks(2 * tokens) {
        pseudo += row[..tokens].iter().sum::<f64>();
        frame += row[tokens..].iter().sum::<f64>();
    }
    assert!(pseudo < frame, "pseudo {pseudo} vs previous frame {frame}");
}
