//! Scalar-loop and compositional oracles for fixed-seed cases.

mod common;

use catt_core::biasing::{cross_attention, BiasingBranch};
use catt_core::config::{Activation, AudioEncoderConfig, LabelEncoderConfig};
use catt_core::context::{BlstmEncoder, ContextEncoder};
use catt_core::loss::{occupancy, LogProbLattice};
use catt_core::transducer::{AudioEncoder, LabelEncoder};
use catt_core::{Binder, CattModel, ParamId, ParamStore, Tape, Tensor, Variant};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    t.to_rows()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn close(a: &Mat, b: &Tensor, tol: f64) {
    assert_eq!(a.len(), b.rows());
    for (i, r) in a.iter().enumerate() {
        for (j, x) in r.iter().enumerate() {
            assert!((x - b.at(i, j)).abs() <= tol, "({i},{j}): {x} vs {}", b.at(i, j));
        }
    }
}

fn param(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.get(id);
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        rows(t)
    }
}

fn vector(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

/// Replaces every parameter with random values so no layer is degenerate.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&shape, &mut rng);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn blstm_matches_unrolled_recurrence() {
    let (vocab, e, d_c) = (12, 4, 6);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = BlstmEncoder::new(&mut store, "ctx", vocab, e, d_c, &mut rng).unwrap();
    randomize(&mut store, 1);
    // "living room" as two tokens.
    let phrase = [7usize, 3];
    let [embed, fw, fb, bw, bb] = enc.param_ids();
    let table = param(&store, embed);
    let half = d_c / 2;
    let run = |w: &Mat, b: &[f64], order: &[usize]| -> Vec<f64> {
        let (mut h, mut c) = (vec![0.0; half], vec![0.0; half]);
        for &tok in order {
            let input: Vec<f64> = table[tok].iter().chain(h.iter()).copied().collect();
            let mut gates = b.to_vec();
            for (p, x) in input.iter().enumerate() {
                for (j, g) in gates.iter_mut().enumerate() {
                    *g += x * w[p][j];
                }
            }
            for j in 0..half {
                let (i, f, g, o) = (
                    sigmoid(gates[j]),
                    sigmoid(gates[half + j]),
                    gates[2 * half + j].tanh(),
                    sigmoid(gates[3 * half + j]),
                );
                c[j] = f * c[j] + i * g;
                h[j] = o * c[j].tanh();
            }
        }
        h
    };
    let fwd = run(&param(&store, fw), &vector(&store, fb), &phrase);
    let bwd = run(&param(&store, bw), &vector(&store, bb), &[phrase[1], phrase[0]]);
    let want: Vec<f64> = fwd.into_iter().chain(bwd).collect();
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, false);
    let got = enc.encode(&p, &[&phrase]).unwrap().value();
    close(&vec![want], &got, 1e-12);
}

#[test]
fn full_window_makes_every_frame_see_every_frame() {
    let t = 6;
    let cfg = AudioEncoderConfig {
        layers: 1,
        d_model: 4,
        heads: 2,
        window_left: t,
        window_right: t,
        ffn_dim: 6,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = AudioEncoder::new(&mut store, 3, &cfg, &mut rng);
    let frames = random(&[t, 3], &mut rng);
    let run = |x: &Tensor| {
        let tape = Tape::new();
        let p = Binder::new(&tape, &store, false);
        (*enc.forward(&p, tape.constant(x.clone())).unwrap().0.value()).clone()
    };
    let base = run(&frames);
    for src in 0..t {
        let mut moved = frames.clone();
        moved.data_mut()[src * 3] += 1e-4;
        let out = run(&moved);
        for row in 0..t {
            let delta: f64 = (0..4).map(|j| (out.at(row, j) - base.at(row, j)).abs()).sum();
            assert!(delta > 1e-12, "row {row} blind to frame {src}");
        }
    }
    // A zero-width window isolates the frames.
    let narrow = AudioEncoderConfig { window_left: 0, window_right: 0, ..cfg };
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, 3, &narrow, &mut ChaCha8Rng::seed_from_u64(4));
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, false);
    let a = enc.forward(&p, tape.constant(frames.clone())).unwrap().0.value();
    let mut moved = frames.clone();
    moved.data_mut()[0] += 1.0;
    let b = enc.forward(&p, tape.constant(moved)).unwrap().0.value();
    assert_eq!(a.row(3), b.row(3));
}

#[test]
fn label_encoder_is_causal() {
    let cfg = LabelEncoderConfig {
        layers: 2,
        d_model: 4,
        heads: 2,
        history: 3,
        ffn_dim: 6,
    };
    let mut store = ParamStore::new();
    let enc = LabelEncoder::new(&mut store, 7, &cfg, &mut ChaCha8Rng::seed_from_u64(6));
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, false);
    let out = |prefix: &[usize]| (*enc.forward(&p, prefix).unwrap().value()).clone();
    let base = out(&[1, 2, 3]);
    assert_ne!(base, out(&[1, 2, 4]), "last token must matter");
    let all = enc.all_prefixes(&p, &[1, 2, 3, 5, 6]).unwrap().value();
    assert_eq!(all.row(3), base.row(0));
    assert_eq!(all.row(0), out(&[]).row(0));
}

#[test]
fn qkv_projection_matches_dense_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
        let mut store = ParamStore::new();
        let block = catt_core::biasing::BiasingBlock::new(&mut store, "b", 5, 3, &block_config(act), &mut rng);
        randomize(&mut store, 2);
        let x = random(&[3, 5], &mut rng);
        let c = random(&[4, 3], &mut rng);
        let f = |v: f64| match act {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        };
        let lin = |l: &catt_core::nn::Linear, input: &Tensor| {
            map(&add_row(&mm(&rows(input), &param(&store, l.w)), &vector(&store, l.b.unwrap())), f)
        };
        let tape = Tape::new();
        let p = Binder::new(&tape, &store, false);
        let (q, k, v) = block.project_qkv(&p, tape.constant(x.clone()), tape.constant(c.clone())).unwrap();
        close(&lin(&block.wq, &x), &q.value(), 1e-12);
        close(&lin(&block.wk, &c), &k.value(), 1e-12);
        close(&lin(&block.wv, &c), &v.value(), 1e-12);
    }
}

#[test]
fn cross_attention_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (t, k, d, heads) = (2, 3, 4, 2);
    let (q, key, v) = (random(&[t, d], &mut rng), random(&[k, d], &mut rng), random(&[k, d], &mut rng));
    let dh = d / heads;
    let mut want = vec![vec![0.0; d]; t];
    let mut want_w = vec![vec![vec![0.0; k]; t]; heads];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..k)
                .map(|j| (0..dh).map(|c| q.at(i, h * dh + c) * key.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..k {
                let w = (scores[j] - m).exp() / z;
                want_w[h][i][j] = w;
                for c in 0..dh {
                    want[i][h * dh + c] += w * v.at(j, h * dh + c);
                }
            }
        }
    }
    let tape = Tape::new();
    let (out, w) = cross_attention(tape.constant(q), tape.constant(key), tape.constant(v), heads).unwrap();
    close(&want, &out.value(), 1e-12);
    for h in 0..heads {
        close(&want_w[h], &w[h], 1e-12);
    }
}

fn branch(store: &mut ParamStore, d_query: usize, blocks: usize, seed: u64) -> BiasingBranch {
    let mut cfg = block_config(Activation::Tanh);
    cfg.blocks = blocks;
    cfg.d_ca = 3;
    let b = BiasingBranch::new(store, "br", d_query, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    randomize(store, seed + 1);
    b
}

#[test]
fn combiner_matches_scalar_oracle() {
    let mut store = ParamStore::new();
    let br = branch(&mut store, 5, 1, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (x, h) = (random(&[3, 5], &mut rng), random(&[3, 4], &mut rng));
    let lx = layer_norm(&rows(&x), &vector(&store, br.ln_query.gamma), &vector(&store, br.ln_query.beta));
    let lh = layer_norm(&rows(&h), &vector(&store, br.ln_context.gamma), &vector(&store, br.ln_context.beta));
    let joined: Mat = lx.iter().zip(&lh).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    let want = add_row(&mm(&joined, &param(&store, br.project.w)), &vector(&store, br.project.b.unwrap()));
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, false);
    let got = br.combine(&p, tape.constant(x), tape.constant(h)).unwrap().value();
    close(&want, &got, 1e-12);
}

#[test]
fn stacked_blocks_compose() {
    let mut store = ParamStore::new();
    let br = branch(&mut store, 5, 2, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (x, c) = (random(&[3, 5], &mut rng), random(&[4, 3], &mut rng));
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, false);
    let (xv, cv) = (tape.constant(x), tape.constant(c));
    let (h1, _) = br.blocks[0].forward(&p, xv, cv).unwrap();
    let (h2, _) = br.blocks[1].forward(&p, h1, cv).unwrap();
    let manual = br.combine(&p, xv, h2).unwrap().value();
    let out = br.forward(&p, xv, cv).unwrap();
    assert_eq!(*out.out.value(), *manual);
    assert_eq!(out.attention.len(), 2);
}

#[test]
fn two_branch_joint_composes() {
    let cfg = desk_config(Variant::CattAudioLabel, 6, 3);
    let mut model = CattModel::new(cfg, 5, None).unwrap();
    randomize(&mut model.store, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let frames = random(&[4, 3], &mut rng);
    let target = [2usize, 5];
    let phrases = vec![
        catt_core::ContextPhrase::new("p", vec![2, 5], catt_core::Category::NamedEntity, true).unwrap(),
        catt_core::ContextPhrase::new("q", vec![1], catt_core::Category::DeviceLocation, false).unwrap(),
    ];
    let tape = Tape::new();
    let p = Binder::new(&tape, &model.store, false);
    let Some(ContextEncoder::Blstm(enc)) = &model.context else { panic!("trainable encoder expected") };
    let ids: Vec<&[usize]> = phrases.iter().map(|ph| ph.token_ids.as_slice()).collect();
    let c = enc.encode(&p, &ids).unwrap();
    let (x, _) = model.audio.forward(&p, tape.constant(frames.clone())).unwrap();
    let h_ca = model.audio_bias.as_ref().unwrap().forward(&p, x, c).unwrap().out;
    let prefixes: Vec<&[usize]> = (0..=target.len()).map(|u| &target[..u]).collect();
    let y = model.label.forward_prefixes(&p, &prefixes).unwrap();
    let h_cl = model.label_bias.as_ref().unwrap().forward(&p, y, c).unwrap().out;
    let manual = model.joint.lattice(&p, h_ca, h_cl).unwrap().value();
    let got = model.lattice_values(&frames, &target, &phrases).unwrap();
    assert!(manual.max_abs_diff(&got) <= 1e-12);
}

#[test]
fn occupancy_matches_hand_forward_backward() {
    // T = 2, U = 1 over one label and blank.
    let lp = |a: f64| [a.ln(), (1.0 - a).ln()];
    // Label probability at (t, u); blank takes the rest.
    let probs = [[0.6, 0.3], [0.2, 0.7]];
    let mut data = Vec::new();
    for t in 0..2 {
        for u in 0..2 {
            data.extend(lp(probs[t][u]));
        }
    }
    let lat = LogProbLattice::new(2, 2, 2, 1, data).unwrap();
    let p = |t: usize, u: usize, k: usize| lat.logp(t, u, k).exp();
    // Paths: emit at t=0 then blank, blank; or blank at t=0, emit at t=1, blank.
    let path_a = p(0, 0, 0) * p(0, 1, 1) * p(1, 1, 1);
    let path_b = p(0, 0, 1) * p(1, 0, 0) * p(1, 1, 1);
    let total = path_a + path_b;
    let (nll, occ) = occupancy(&lat, &[0]).unwrap();
    assert!((nll + total.ln()).abs() < 1e-12);
    let at = |t: usize, u: usize, k: usize| occ[(t * 2 + u) * 2 + k];
    assert!((at(0, 0, 0) - path_a / total).abs() < 1e-12);
    assert!((at(0, 0, 1) - path_b / total).abs() < 1e-12);
    assert!((at(1, 0, 0) - path_b / total).abs() < 1e-12);
    assert!((at(0, 1, 1) - path_a / total).abs() < 1e-12);
    assert!((at(1, 1, 1) - 1.0).abs() < 1e-12);
    assert!(occ.iter().all(|g| (0.0..=1.0).contains(g)));
}

#[test]
fn uniform_lattice_counts_paths() {
    let (t, u) = (3, 2);
    let data = vec![(1.0f64 / 3.0).ln(); t * (u + 1) * 3];
    let lat = LogProbLattice::new(t, u + 1, 3, 2, data).unwrap();
    let nll = catt_core::loss::forward_loss(&lat, &[0, 1]).unwrap();
    let want = -(6.0f64 * 3f64.powi(-((t + u) as i32))).ln();
    assert!((nll - want).abs() < 1e-12);
    assert!((catt_core::loss::brute_force_loss(&lat, &[0, 1]).unwrap() - want).abs() < 1e-12);
}
