#![allow(dead_code)]

use catt_core::biasing::BiasingBlock;
use catt_core::config::{Activation, BiasingConfig};
use catt_core::gradcheck::finite_diff_check_many;
use catt_core::loss::LogProbLattice;
use catt_core::{Binder, ModelConfig, ParamStore, Result, Tape, Tensor, Var, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values with magnitude in [0.2, 1], kept away from the relu kink.
pub fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `v` with fixed pseudo-random weights into a scalar.
pub fn project<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&v.shape(), &mut rng);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

/// Random normalized lattice; each (t, u) row is a log-softmax.
pub fn random_lattice(t: usize, u: usize, vocab: usize, rng: &mut ChaCha8Rng) -> LogProbLattice {
    let symbols = vocab + 1;
    let mut data = Vec::with_capacity(t * (u + 1) * symbols);
    for _ in 0..t * (u + 1) {
        let logits: Vec<f64> = (0..symbols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = catt_core::tensor::log_sum_exp(&logits);
        data.extend(logits.iter().map(|x| x - lse));
    }
    LogProbLattice::new(t, u + 1, symbols, vocab, data).unwrap()
}

pub fn random_target(u: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..u).map(|_| rng.gen_range(0..vocab)).collect()
}

type Primitive = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

/// Named primitive cases: input shapes and the function under test.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |x| x[0].matmul(x[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |x| x[0].add(x[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |x| x[0].add(x[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |x| x[0].sub(x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |x| x[0].mul(x[1])),
        ("scale", vec![vec![3, 4]], |x| Ok(x[0].scale(-1.7))),
        ("tanh", vec![vec![3, 4]], |x| Ok(x[0].tanh())),
        ("relu", vec![vec![3, 4]], |x| Ok(x[0].relu())),
        ("sigmoid", vec![vec![3, 4]], |x| Ok(x[0].sigmoid())),
        ("concat", vec![vec![3, 2], vec![3, 3]], |x| Var::concat(&[x[0], x[1]])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |x| Var::concat_rows(&[x[0], x[1]])),
        ("softmax", vec![vec![3, 4]], |x| x[0].softmax()),
        ("log_softmax", vec![vec![3, 4]], |x| x[0].log_softmax()),
        ("logsumexp", vec![vec![3, 4]], |x| x[0].logsumexp()),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |x| x[0].layer_norm(x[1], x[2])),
        ("slice_cols", vec![vec![3, 5]], |x| x[0].slice_cols(1, 3)),
        ("slice_rows", vec![vec![4, 3]], |x| x[0].slice_rows(1, 2)),
        ("gather_rows", vec![vec![4, 3]], |x| x[0].gather_rows(&[2, 0, 2, 3])),
        ("transpose", vec![vec![3, 4]], |x| x[0].transpose()),
        ("sum", vec![vec![3, 4]], |x| Ok(x[0].sum())),
        ("reshape", vec![vec![3, 4]], |x| x[0].reshape(vec![2, 6])),
    ]
}

/// Worst relative gradient error of every primitive, by name.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let xs: Vec<Tensor> = shapes.iter().map(|s| off_zero(s, &mut rng)).collect();
            let err = finite_diff_check_many(|_, v| project(f(v)?, i as u64), &xs, EPS).unwrap();
            (name, err)
        })
        .collect()
}

/// Central-difference check of `f` against the gradients of every stored
/// parameter. `per_tensor` caps the coordinates probed in each tensor.
pub fn store_gradcheck<F>(store: &ParamStore, f: F, per_tensor: Option<usize>, seed: u64) -> f64
where
    F: for<'t> Fn(&Binder<'t, '_>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let p = Binder::new(&tape, store, true);
        let loss = f(&p).unwrap();
        tape.backward(loss).unwrap();
        p.gradients()
    };
    let eval = |s: &ParamStore| {
        let tape = Tape::new();
        let p = Binder::new(&tape, s, false);
        f(&p).unwrap().value().item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match per_tensor {
            Some(m) if m < n => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + EPS;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - EPS;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max((analytic[k].data()[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

pub fn block_config(activation: Activation) -> BiasingConfig {
    BiasingConfig {
        d: 4,
        heads: 2,
        blocks: 1,
        ffn_dim: 6,
        activation,
        d_ca: 4,
    }
}

/// Worst gradient error of one biasing block, over its parameters and
/// over the query and context inputs.
pub fn biasing_block_error(activation: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = BiasingBlock::new(&mut store, "b", 5, 3, &block_config(activation), &mut rng);
    // Fresh blocks have zero value projections, right on the relu kink.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = off_zero(&shape, &mut rng);
    }
    let x = random(&[4, 5], &mut rng);
    let c = random(&[3, 3], &mut rng);
    let wrt_params = store_gradcheck(
        &store,
        |p| {
            let t = p.tape();
            let (h, _) = block.forward(p, t.constant(x.clone()), t.constant(c.clone()))?;
            project(h, 7)
        },
        None,
        seed,
    );
    let wrt_inputs = finite_diff_check_many(
        |tape, v| {
            let p = Binder::new(tape, &store, false);
            let (h, _) = block.forward(&p, v[0], v[1])?;
            project(h, 7)
        },
        &[x.clone(), c.clone()],
        EPS,
    )
    .unwrap();
    wrt_params.max(wrt_inputs)
}

/// A small CATT-audioQ configuration with the trainable phrase encoder.
pub fn desk_config(variant: Variant, vocab: usize, input_dim: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        variant,
        vocab_size: vocab,
        input_dim,
        ..ModelConfig::default()
    };
    cfg.audio.d_model = 8;
    cfg.audio.heads = 2;
    cfg.audio.ffn_dim = 12;
    cfg.label.d_model = 8;
    cfg.label.heads = 2;
    cfg.label.ffn_dim = 12;
    cfg.context.d_c = 6;
    cfg.context.embed_dim = 4;
    cfg.biasing.d = 8;
    cfg.biasing.ffn_dim = 12;
    cfg.biasing.d_ca = 8;
    cfg.joint_dim = 8;
    cfg
}

/// A small catalog with token ids from a tokenizer trained on its phrases.
pub fn tokenized_catalog(names: usize, seed: u64) -> catt_core::data::ContextCatalog {
    let spec = catt_core::data::CatalogSpec {
        device_names: names,
        named_entities: names,
        name_syllables: 2,
        ..Default::default()
    };
    let mut cat = catt_core::data::build_catalog(&spec, seed).unwrap();
    let texts: Vec<String> = cat.entries.iter().map(|e| e.text.clone()).collect();
    let tok = catt_core::Tokenizer::train(&texts, 40).unwrap();
    cat.tokenize(&tok).unwrap();
    cat
}

/// Adds uniform noise of width `scale` to every parameter, so zero-started
/// layers carry gradient to the ones before them.
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x += scale * rng.gen_range(-1.0..1.0));
    }
}
