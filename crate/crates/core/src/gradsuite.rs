//! The registered gradient checks: every model-specific operation, run in
//! `f64` on small random inputs, differentiated with respect to both its
//! inputs and the trainable parameters it binds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::decoder::DecoderOutputs;
use crate::encoder::{FeaturePyramid, PyramidSource};
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::losses::{aux_loss, structure_loss};
use crate::memory::{GatedMlf, MemoryBank, MemoryDecoder, MemoryDecoderState, TemporalMemory};
use crate::moe::{load_balance_loss, GateStatistics, LoraMoeConfig, LoraMoeLayer, Modality};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::tensor::Tensor;

/// Step of the central difference.
pub const EPS: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

type Forward = Box<dyn for<'g> Fn(&Session<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + Send + Sync>;

/// A scalar-valued function of some input tensors and the parameters in
/// `store`.
pub struct OpCheck {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    forward: Forward,
}

impl OpCheck {
    pub fn new<F>(name: &'static str, store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, forward: F) -> Self
    where
        F: for<'g> Fn(&Session<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + Send + Sync + 'static,
    {
        Self {
            name,
            store,
            inputs,
            forward: Box::new(forward),
        }
    }

    fn value(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
        let graph = Graph::new();
        let s = Session::new(&graph, store);
        let vars: Vec<_> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
        let y = (self.forward)(&s, &vars)?;
        if y.numel() != 1 {
            return Err(Error::NonScalarLoss(y.shape()));
        }
        graph.check_finite()?;
        Ok(y.item())
    }

    /// Worst relative error over every input entry and every trainable
    /// parameter entry the function touches.
    pub fn run(&self, eps: f64) -> Result<OpReport> {
        let graph = Graph::new();
        let s = Session::new(&graph, &self.store);
        let vars: Vec<_> = self.inputs.iter().map(|t| graph.variable(t.clone())).collect();
        let y = (self.forward)(&s, &vars)?;
        y.backward()?;
        let input_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let param_grads = s.param_grads();
        drop(s);

        let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * eps);
        let mut report = OpReport {
            name: self.name,
            max_rel_error: 0.0,
            checked: 0,
        };
        let mut probe = self.inputs.clone();
        for (which, grad) in input_grads.iter().enumerate() {
            for i in 0..grad.len() {
                let orig = probe[which].data()[i];
                probe[which].data_mut()[i] = orig + eps;
                let plus = self.value(&self.store, &probe)?;
                probe[which].data_mut()[i] = orig - eps;
                let minus = self.value(&self.store, &probe)?;
                probe[which].data_mut()[i] = orig;
                report.record(grad.data()[i], central(plus, minus));
            }
        }
        let mut store = self.store.clone();
        for (id, grad) in &param_grads {
            for i in 0..grad.len() {
                let orig = store.value(*id).data()[i];
                store.value_mut(*id).data_mut()[i] = orig + eps;
                let plus = self.value(&store, &self.inputs)?;
                store.value_mut(*id).data_mut()[i] = orig - eps;
                let minus = self.value(&store, &self.inputs)?;
                store.value_mut(*id).data_mut()[i] = orig;
                report.record(grad.data()[i], central(plus, minus));
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Gradient entries compared.
    pub checked: usize,
}

impl OpReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.checked += 1;
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::from_f64(shape, &data).expect("sized")
}

/// `Σ x·w` for a fixed weight map, so no gradient entry is trivially
/// symmetric.
fn project<'g>(s: &Session<'g, f64>, x: Var<'g, f64>, w: &Tensor<f64>) -> Result<Var<'g, f64>> {
    Ok(x.mul(s.constant(w.clone()))?.sum())
}

/// Replaces every parameter of `group` with noise; a zero `B` would
/// leave the expert path without gradient.
fn randomize_group(store: &mut ParamStore<f64>, group: ParamGroup, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let noise = uniform(&shape, -0.5, 0.5, rng);
        store.set(id, noise).expect("same shape");
    }
}

fn moe_lora(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "base", 8, 8, true, ParamGroup::Frozen, rng);
    let config = LoraMoeConfig {
        rank: 2,
        top_k: 2,
        experts: true,
    };
    let layer = LoraMoeLayer::new(&mut store, "layer", base, config, rng).expect("valid rank");
    randomize_group(&mut store, ParamGroup::Adapter, rng);
    let weights = uniform(&[8, 16], -1.0, 1.0, rng);
    let x = uniform(&[8, 16], -1.0, 1.0, rng);
    OpCheck::new("moe_lora_forward", store, vec![x], move |s, v| {
        let y = layer.moe_lora_forward(s, v[0], (4, 4), Modality::Depth)?;
        project(s, y, &weights)
    })
}

fn widths() -> [usize; 4] {
    [4, 4, 6, 6]
}

fn pyramid_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let w = widths();
    vec![
        uniform(&[w[0], 8, 8], -1.0, 1.0, rng),
        uniform(&[w[1], 4, 4], -1.0, 1.0, rng),
        uniform(&[w[2], 2, 2], -1.0, 1.0, rng),
        uniform(&[w[3], 1, 1], -1.0, 1.0, rng),
    ]
}

fn fuse<'g>(module: &GatedMlf, s: &Session<'g, f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    let pyramid = FeaturePyramid::new(v[..4].to_vec(), PyramidSource::Fused)?;
    Ok(module.forward(s, &pyramid, &v[4..], None)?.memory_input)
}

/// Outputs of `forward` at the unperturbed point. Checks with many output
/// entries project the change from these rather than the raw outputs, so
/// `f` stays near zero and its last-bit rounding does not swamp the
/// smallest gradients. The offset is constant, so the gradients are those
/// of the plain projection.
fn reference_outputs<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], forward: F) -> Vec<Tensor<f64>>
where
    F: for<'g> Fn(&Session<'g, f64>, &[Var<'g, f64>]) -> Result<Vec<Var<'g, f64>>>,
{
    let graph = Graph::new();
    let s = Session::new(&graph, store);
    let vars: Vec<_> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    let outputs = forward(&s, &vars).expect("registered check runs at its own inputs");
    outputs.iter().map(|o| o.value()).collect()
}

fn change_from<'g>(s: &Session<'g, f64>, x: Var<'g, f64>, reference: &Tensor<f64>) -> Result<Var<'g, f64>> {
    x.sub(s.constant(reference.clone()))
}

fn gated_mlf(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut store = ParamStore::new();
    let module = GatedMlf::new(&mut store, &widths(), rng);
    let mut inputs = pyramid_inputs(rng);
    inputs.push(uniform(&[3, 4, 4], -1.0, 1.0, rng));
    let weights = uniform(&[widths()[0] + 3, 8, 8], -1.0, 1.0, rng);
    let reference = reference_outputs(&store, &inputs, |s, v| Ok(vec![fuse(&module, s, v)?]));
    OpCheck::new("gated_mlf", store, inputs, move |s, v| {
        let change = change_from(s, fuse(&module, s, v)?, &reference[0])?;
        project(s, change, &weights)
    })
}

const MEM_CH: usize = 4;
const KEY_DIM: usize = 3;
const VALUE_DIM: usize = 3;

fn memory_module(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> TemporalMemory {
    TemporalMemory::new(store, MEM_CH, KEY_DIM, VALUE_DIM, false, rng)
}

fn feature(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(&[MEM_CH, 4, 4], -1.0, 1.0, rng)
}

fn prob(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(&[1, 4, 4], 0.1, 0.9, rng)
}

/// `Σ key·wk + Σ value·wv` over every bank entry.
fn bank_value<'g>(s: &Session<'g, f64>, bank: &MemoryBank<'g, f64>, wk: &Tensor<f64>, wv: &Tensor<f64>) -> Result<Var<'g, f64>> {
    let mut total: Option<Var<'g, f64>> = None;
    for e in bank.entries() {
        let term = project(s, e.key, wk)?.add(project(s, e.value, wv)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyMemory)
}

fn pseudo_init(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut store = ParamStore::new();
    let memory = memory_module(&mut store, rng);
    let (wk, wv) = (uniform(&[KEY_DIM, 16], -1.0, 1.0, rng), uniform(&[VALUE_DIM, 16], -1.0, 1.0, rng));
    let inputs = vec![feature(rng), prob(rng)];
    OpCheck::new("pseudo_init", store, inputs, move |s, v| {
        let mut bank = MemoryBank::new(2)?;
        memory.pseudo_init(s, &mut bank, v[0], v[1])?;
        bank_value(s, &bank, &wk, &wv)
    })
}

fn memory_write(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut store = ParamStore::new();
    let memory = memory_module(&mut store, rng);
    let (wk, wv) = (uniform(&[KEY_DIM, 16], -1.0, 1.0, rng), uniform(&[VALUE_DIM, 16], -1.0, 1.0, rng));
    let seed = (feature(rng), prob(rng));
    let inputs = vec![uniform(&[KEY_DIM, 4, 4], -1.0, 1.0, rng), feature(rng), prob(rng)];
    OpCheck::new("memory_write", store, inputs, move |s, v| {
        let mut bank = MemoryBank::new(2)?;
        memory.pseudo_init(s, &mut bank, s.constant(seed.0.clone()), s.constant(seed.1.clone()))?;
        memory.write(s, &mut bank, 1, v[0], v[1], v[2])?;
        bank_value(s, &bank, &wk, &wv)
    })
}

fn memory_read(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut store = ParamStore::new();
    let memory = memory_module(&mut store, rng);
    let wc = uniform(&[VALUE_DIM, 4, 4], -1.0, 1.0, rng);
    let wa = uniform(&[16, 32], -1.0, 1.0, rng);
    let inputs = vec![feature(rng), prob(rng), feature(rng), prob(rng), feature(rng)];
    OpCheck::new("memory_read", store, inputs, move |s, v| {
        let mut bank = MemoryBank::new(2)?;
        memory.pseudo_init(s, &mut bank, v[0], v[1])?;
        let q1 = memory.project_query(s, v[2])?;
        memory.write(s, &mut bank, 1, q1, v[2], v[3])?;
        let read = memory.read(s, &bank, v[4])?;
        project(s, read.context, &wc)?.add(project(s, read.attention, &wa)?)
    })
}

fn decode_twice<'g>(decoder: &MemoryDecoder, s: &Session<'g, f64>, v: &[Var<'g, f64>]) -> Result<Vec<Var<'g, f64>>> {
    let (first, state) = decoder.step(s, v[0], v[1], &MemoryDecoderState::default(), None)?;
    let (second, _) = decoder.step(s, v[2], v[3], &state, None)?;
    Ok(vec![first, second])
}

fn memory_decode(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut store = ParamStore::new();
    let decoder = MemoryDecoder::new(&mut store, MEM_CH, VALUE_DIM, 3, rng);
    let weights = uniform(&[1, 4, 4], -1.0, 1.0, rng);
    let inputs = vec![
        feature(rng),
        uniform(&[VALUE_DIM, 4, 4], -1.0, 1.0, rng),
        feature(rng),
        uniform(&[VALUE_DIM, 4, 4], -1.0, 1.0, rng),
    ];
    let reference = reference_outputs(&store, &inputs, |s, v| decode_twice(&decoder, s, v));
    OpCheck::new("memory_decode", store, inputs, move |s, v| {
        let outputs = decode_twice(&decoder, s, v)?;
        let first = change_from(s, outputs[0], &reference[0])?;
        let second = change_from(s, outputs[1], &reference[1])?;
        project(s, first, &weights)?.add(project(s, second, &weights)?)
    })
}

fn structure(rng: &mut ChaCha8Rng) -> OpCheck {
    let gt = binary(&[1, 8, 8], rng);
    let logits = uniform(&[1, 8, 8], -2.0, 2.0, rng);
    OpCheck::new("structure_loss", ParamStore::new(), vec![logits], move |s, v| structure_loss(s, v[0], &gt))
}

fn aux(rng: &mut ChaCha8Rng) -> OpCheck {
    let mut gt = Tensor::zeros(&[1, 8, 8]);
    for y in 2..7 {
        for x in 1..5 {
            gt.data_mut()[y * 8 + x] = 1.0;
        }
    }
    let sizes = [8, 4, 2];
    let mut inputs: Vec<Tensor<f64>> = sizes.iter().map(|&n| uniform(&[1, n, n], -2.0, 2.0, rng)).collect();
    inputs.extend(sizes.iter().map(|&n| uniform(&[1, n, n], -2.0, 2.0, rng)));
    OpCheck::new("aux_loss", ParamStore::new(), inputs, move |s, v| {
        let outputs = DecoderOutputs {
            features: v[..3].to_vec(),
            coarse: v[..3].to_vec(),
            edges: v[3..].to_vec(),
        };
        Ok(aux_loss(s, &outputs, &gt)?.total)
    })
}

fn load_balance(rng: &mut ChaCha8Rng) -> OpCheck {
    let inputs = vec![uniform(&[3], 0.5, 2.0, rng), uniform(&[3], 0.5, 2.0, rng)];
    OpCheck::new("load_balance_loss", ParamStore::new(), inputs, |_, v| {
        let stats = GateStatistics {
            importance: v[0],
            load: v[1],
            hard_load: vec![1; 3],
            events: 1,
        };
        load_balance_loss(&stats, 1e-2)
    })
}

/// Every registered check, built from `seed`.
pub fn registered_ops(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        moe_lora(&mut rng),
        gated_mlf(&mut rng),
        memory_read(&mut rng),
        memory_write(&mut rng),
        pseudo_init(&mut rng),
        memory_decode(&mut rng),
        structure(&mut rng),
        aux(&mut rng),
        load_balance(&mut rng),
    ]
}

/// A deliberately wrong op: sigmoid whose backward rule has its sign
/// flipped. The suite must reject it.
pub fn mutant_op() -> OpCheck {
    let x = Tensor::from_f64(&[4], &[0.3, -0.7, 1.1, -0.2]).expect("sized");
    OpCheck::new("mutant_sigmoid", ParamStore::new(), vec![x], |_, v| {
        Ok(v[0]
            .map_unary("mutant_sigmoid", crate::autodiff::sigmoid_scalar, |_, y| -y * (1.0 - y))
            .sum())
    })
}
