use super::*;
use crate::autograd::Tape;
use alloc::vec;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_init: 5,
        d_g: 4,
        d_e: 3,
        heads: 2,
        layers: 2,
        gru_layers: 2,
        history: 2,
        leaky_slope: 0.2,
        ablation: Ablation::None,
    }
}

/// `m` topics with `per_doc[t]` knowledge vertices each, self loops,
/// `sent_j` edges and a few random extra edges.
fn random_topology(rng: &mut ChaCha8Rng, per_doc: &[usize], types: usize) -> Topology {
    let m = per_doc.len();
    let mut kinds = vec![VertexKind::Topic; m];
    let mut edges = Vec::new();
    for (t, &k) in per_doc.iter().enumerate() {
        for j in 0..k {
            let v = kinds.len();
            let sent_type = 1 + j.min(types - 2);
            kinds.push(VertexKind::Knowledge { parent: t, sent_type });
            edges.push(Edge::new(t, v, sent_type));
            edges.push(Edge::new(v, t, sent_type));
        }
    }
    let n = kinds.len();
    for v in 0..n {
        edges.push(Edge::new(v, v, 0));
    }
    for _ in 0..2 * n {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            edges.push(Edge::new(a, b, rng.gen_range(0..types)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Topology {
        kinds,
        edges,
        num_edge_types: types,
    }
}

fn randomize(model: &mut Model, rng: &mut ChaCha8Rng) {
    for p in model.params.values_mut() {
        for x in p.data_mut() {
            *x = rng.gen_range(-0.8..0.8);
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn get(model: &Model, name: &str) -> Matrix {
    model.params.get(name).unwrap().clone()
}

// Loop-based re-implementation of one Res-RGAT layer.
fn oracle_layer(model: &Model, l: usize, topo: &Topology, h: &Matrix) -> Matrix {
    let c = &model.config;
    let (d_in, d_out) = c.layer_dims(l);
    let n = topo.num_vertices();
    let r = get(model, "edge_embedding");
    let mut msg = vec![vec![0.0; d_in]; n];
    for hd in 0..c.heads {
        let p = get(model, &format!("rgat.{l}.head.{hd}.p"));
        let q = get(model, &format!("rgat.{l}.head.{hd}.q"));
        let a_dst = get(model, &format!("rgat.{l}.head.{hd}.a_dst"));
        let a_src = get(model, &format!("rgat.{l}.head.{hd}.a_src"));
        let a_edge = get(model, &format!("rgat.{l}.head.{hd}.a_edge"));
        let proj = |x: &[f64]| -> Vec<f64> {
            (0..d_in).map(|j| (0..d_in).map(|k| x[k] * p.get(k, j)).sum()).collect()
        };
        let eproj = |ty: usize| -> Vec<f64> {
            (0..d_in).map(|j| (0..c.d_e).map(|k| r.get(ty, k) * q.get(k, j)).sum()).collect()
        };
        let dot = |a: &Matrix, x: &[f64]| -> f64 { (0..d_in).map(|k| a.get(k, 0) * x[k]).sum() };
        for i in 0..n {
            let xi = proj(h.row(i));
            let incoming: Vec<&Edge> = topo.edges.iter().filter(|e| e.dst == i).collect();
            let logits: Vec<f64> = incoming
                .iter()
                .map(|e| {
                    let s = dot(&a_dst, &xi) + dot(&a_src, &proj(h.row(e.src))) + dot(&a_edge, &eproj(e.ty));
                    if s > 0.0 {
                        s
                    } else {
                        c.leaky_slope * s
                    }
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
            for (e, lg) in incoming.iter().zip(&logits) {
                let alpha = (lg - mx).exp() / z;
                let xj = proj(h.row(e.src));
                let re = eproj(e.ty);
                for k in 0..d_in {
                    msg[i][k] += alpha * (xj[k] + re[k]) / c.heads as f64;
                }
            }
        }
    }
    let w = get(model, &format!("rgat.{l}.w"));
    let mut out = Matrix::zeros(n, d_out);
    for i in 0..n {
        for o in 0..d_out {
            let mut s = 0.0;
            for k in 0..d_in {
                s += h.get(i, k) * w.get(k, o) + msg[i][k] * w.get(d_in + k, o);
            }
            out.set(i, o, s);
        }
    }
    out
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Step-by-step recurrent oracle for one vertex.
fn oracle_gru(model: &Model, inputs: &[Vec<f64>]) -> Vec<f64> {
    let c = &model.config;
    let d = c.d_g;
    let mut hidden = vec![vec![0.0; d]; c.gru_layers];
    for x0 in inputs {
        let mut x = x0.clone();
        for k in 0..c.gru_layers {
            let wi = get(model, &format!("gru.{k}.w_i"));
            let wh = get(model, &format!("gru.{k}.w_h"));
            let bi = get(model, &format!("gru.{k}.b_i"));
            let bh = get(model, &format!("gru.{k}.b_h"));
            let h = &hidden[k];
            let gi = |j: usize| bi.get(0, j) + (0..x.len()).map(|m| x[m] * wi.get(m, j)).sum::<f64>();
            let gh = |j: usize| bh.get(0, j) + (0..d).map(|m| h[m] * wh.get(m, j)).sum::<f64>();
            let mut next = vec![0.0; d];
            for j in 0..d {
                let r = sigm(gi(j) + gh(j));
                let z = sigm(gi(d + j) + gh(d + j));
                let nn = (gi(2 * d + j) + r * gh(2 * d + j)).tanh();
                next[j] = (1.0 - z) * nn + z * h[j];
            }
            hidden[k] = next.clone();
            x = next;
        }
    }
    hidden[c.gru_layers - 1].clone()
}

fn instance(seed: u64, config: ModelConfig) -> (Model, Topology, Matrix, Targets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types = 6;
    let topo = random_topology(&mut rng, &[2, 3, 2], types);
    let mut model = Model::new(config, types, seed).unwrap();
    randomize(&mut model, &mut rng);
    let h0 = random_matrix(&mut rng, topo.num_vertices(), model.config.d_init);
    let history = History {
        topic_seq: vec![Some(0), Some(1)],
        knowledge_seq: vec![Some(3), Some(6)],
        slots: vec![Some((1, 6)), Some((0, 3))],
    };
    let targets = Targets {
        topic: 1,
        knowledge: 5,
        history,
    };
    (model, topo, h0, targets)
}

#[test]
fn rgat_matches_dense_oracle() {
    let (model, topo, h0, _) = instance(3, small_config());
    let mut expect = h0.clone();
    for l in 0..model.config.layers {
        expect = oracle_layer(&model, l, &topo, &expect);
    }
    let got = model.propagate(&topo, &h0).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn single_vertex_attends_to_itself() {
    let topo = Topology {
        kinds: vec![VertexKind::Topic],
        edges: vec![Edge::new(0, 0, 0)],
        num_edge_types: 1,
    };
    let model = Model::new(small_config(), 1, 1).unwrap();
    let h0 = Matrix::filled(1, 5, 0.3);
    for layer in model.attention_weights(&topo, &h0).unwrap() {
        for head in layer {
            assert_eq!(head, vec![1.0]);
        }
    }
}

#[test]
fn residual_identity_is_exact() {
    let mut cfg = small_config();
    cfg.d_init = 4;
    let (mut model, topo, h0, _) = instance(5, cfg);
    for l in 0..model.config.layers {
        let w = model.params.get_mut(&format!("rgat.{l}.w")).unwrap();
        let mut id = Matrix::zeros(8, 4);
        for i in 0..4 {
            id.set(i, i, 1.0);
        }
        *w = id;
    }
    let got = model.propagate(&topo, &h0).unwrap();
    assert!(got.max_abs_diff(&h0) <= 1e-12);
}

#[test]
fn attention_sums_to_one_per_destination() {
    let (model, topo, h0, _) = instance(9, small_config());
    for layer in model.attention_weights(&topo, &h0).unwrap() {
        for head in layer {
            let mut sums = vec![0.0; topo.num_vertices()];
            for (e, a) in topo.edges.iter().zip(&head) {
                sums[e.dst] += a;
            }
            for s in sums {
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn differential_linearization_matches_loop_oracle() {
    let (model, topo, h0, targets) = instance(13, small_config());
    let out = model.forward(&topo, &h0, &targets.history).unwrap();
    let hg = &out.hg;
    let null = get(&model, "null_history");
    let d = model.config.d_g;
    for (i, kind) in topo.kinds.iter().enumerate() {
        let seq = match kind {
            VertexKind::Topic => &targets.history.topic_seq,
            VertexKind::Knowledge { .. } => &targets.history.knowledge_seq,
        };
        let inputs: Vec<Vec<f64>> = seq
            .iter()
            .map(|s| {
                let hist = s.map_or(null.row(0), |v| hg.row(v));
                let mut f: Vec<f64> = (0..d).map(|k| hist[k] - hg.get(i, k)).collect();
                f.extend((0..d).map(|k| hist[k] * hg.get(i, k)));
                f
            })
            .collect();
        let last = oracle_gru(&model, &inputs);
        for k in 0..d {
            assert_abs_diff_eq!(out.hd.get(i, k), last[k], epsilon = 1e-10);
            assert_eq!(out.hd.get(i, d + k), hg.get(i, k));
        }
    }
}

#[test]
fn zero_dynamics_give_zero_state() {
    let (mut model, topo, h0, _) = instance(17, small_config());
    for name in model.param_names() {
        if name.starts_with("gru.") {
            model.params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    let out = model
        .forward(&topo, &h0, &History::empty(2, 2))
        .unwrap();
    for i in 0..topo.num_vertices() {
        assert!(out.hd.row(i)[..4].iter().all(|&x| x == 0.0));
        assert_eq!(&out.hd.row(i)[4..], out.hg.row(i));
    }
}

#[test]
fn scores_match_matrix_oracle() {
    let (model, topo, h0, targets) = instance(21, small_config());
    let out = model.forward(&topo, &h0, &targets.history).unwrap();
    let r = get(&model, "edge_embedding");
    let dot_head = |prefix: &str, x: &[f64]| {
        let w = get(&model, &format!("{prefix}.w"));
        let b = get(&model, &format!("{prefix}.b")).get(0, 0);
        b + x.iter().enumerate().map(|(k, v)| v * w.get(k, 0)).sum::<f64>()
    };
    for (pos, &v) in out.topic_vertices.iter().enumerate() {
        assert_abs_diff_eq!(out.topic_logits[pos], dot_head("head.topic", out.hd.row(v)), epsilon = 1e-10);
    }
    for (pos, &v) in out.knowledge_vertices.iter().enumerate() {
        let VertexKind::Knowledge { parent, sent_type } = topo.kinds[v] else { unreachable!() };
        let mut x = out.hd.row(v).to_vec();
        x.extend_from_slice(out.hd.row(parent));
        x.extend_from_slice(r.row(sent_type));
        assert_abs_diff_eq!(out.knowledge_logits[pos], dot_head("head.knowledge", &x), epsilon = 1e-10);
        assert_abs_diff_eq!(
            out.history_logits[1].1[pos],
            dot_head("head.hist.2.knowledge", &x),
            epsilon = 1e-10
        );
    }
}

fn lse(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[test]
fn loss_matches_hand_computation() {
    let (model, topo, h0, targets) = instance(25, small_config());
    let out = model.forward(&topo, &h0, &targets.history).unwrap();
    let pos = |list: &[usize], v: usize| list.iter().position(|&x| x == v).unwrap();
    let ce = |logits: &[f64], t: usize| lse(logits) - logits[t];
    let tv = &out.topic_vertices;
    let kv = &out.knowledge_vertices;
    let mut expect = ce(&out.knowledge_logits, pos(kv, targets.knowledge)) + ce(&out.topic_logits, pos(tv, targets.topic));
    let mut hist = 0.0;
    for (slot, label) in targets.history.slots.iter().enumerate() {
        let (t, k) = label.unwrap();
        hist += ce(&out.history_logits[slot].0, pos(tv, t)) + ce(&out.history_logits[slot].1, pos(kv, k));
    }
    expect += hist / 4.0;
    let got = model.loss(&topo, &h0, &targets).unwrap();
    assert_abs_diff_eq!(got.total, expect, epsilon = 1e-12);
    assert_abs_diff_eq!(got.history, hist / 4.0, epsilon = 1e-12);
}

#[test]
fn uniform_logits_give_log_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let topo = random_topology(&mut rng, &[2, 2], 4);
    let mut model = Model::new(small_config(), 4, 1).unwrap();
    for name in model.param_names() {
        if name.starts_with("head.") {
            model.params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    let h0 = random_matrix(&mut rng, 6, 5);
    let targets = Targets {
        topic: 0,
        knowledge: 3,
        history: History::empty(2, 2),
    };
    let l = model.loss(&topo, &h0, &targets).unwrap();
    assert_abs_diff_eq!(l.total, 4f64.ln() + 2f64.ln(), epsilon = 1e-12);
    assert_eq!(l.history, 0.0);
}

#[test]
fn skipped_slots_keep_the_normalizer() {
    let (model, topo, h0, mut targets) = instance(27, small_config());
    let full = model.loss(&topo, &h0, &targets).unwrap();
    targets.history.slots[1] = None;
    let part = model.loss(&topo, &h0, &targets).unwrap();
    let out = model.forward(&topo, &h0, &targets.history).unwrap();
    let pos = |list: &[usize], v: usize| list.iter().position(|&x| x == v).unwrap();
    let (t, k) = targets.history.slots[0].unwrap();
    let h0t = &out.history_logits[0];
    let slot0 = lse(&h0t.0) - h0t.0[pos(&out.topic_vertices, t)] + lse(&h0t.1) - h0t.1[pos(&out.knowledge_vertices, k)];
    assert_abs_diff_eq!(part.history, slot0 / 4.0, epsilon = 1e-12);
    assert!(full.history > part.history);
}

fn finite_difference_check(config: ModelConfig, seed: u64) {
    let (model, topo, h0, targets) = instance(seed, config);
    let (_, grads) = model.loss_and_gradients(&topo, &h0, &targets).unwrap();
    let h = 1e-4;
    for id in 0..model.params.len() {
        let name = model.params.name(id).to_string();
        let shape = model.params.values()[id].shape();
        for e in 0..shape.0 * shape.1 {
            let mut plus = model.clone();
            plus.params.values_mut()[id].data_mut()[e] += h;
            let mut minus = model.clone();
            minus.params.values_mut()[id].data_mut()[e] -= h;
            let num = (plus.loss(&topo, &h0, &targets).unwrap().total
                - minus.loss(&topo, &h0, &targets).unwrap().total)
                / (2.0 * h);
            let ana = grads[id].data()[e];
            let scale = ana.abs().max(num.abs());
            let err = if scale > 1e-7 { (ana - num).abs() / scale } else { (ana - num).abs() };
            assert!(err < 1e-4, "{name}[{e}]: analytic {ana} numeric {num}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    finite_difference_check(small_config(), 31);
}

#[test]
fn ablation_gradients_match_finite_differences() {
    for ab in [Ablation::NoDiff, Ablation::NoResRgat] {
        let mut c = small_config();
        c.ablation = ab;
        c.layers = 1;
        finite_difference_check(c, 33);
    }
}

#[test]
fn unused_edge_type_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let topo = random_topology(&mut rng, &[2, 1], 4);
    // One extra, never used, type.
    let topo = Topology {
        num_edge_types: 5,
        ..topo
    };
    let model = Model::new(small_config(), 5, 2).unwrap();
    let h0 = random_matrix(&mut rng, 5, 5);
    let targets = Targets {
        topic: 0,
        knowledge: 2,
        history: History::empty(2, 2),
    };
    let (_, grads) = model.loss_and_gradients(&topo, &h0, &targets).unwrap();
    let r = &grads[model.params.id("edge_embedding").unwrap()];
    assert!(r.row(4).iter().all(|&g| g == 0.0));
}

#[test]
fn doubling_the_seed_doubles_gradients() {
    let (model, topo, h0, targets) = instance(37, small_config());
    let mut tape = Tape::new();
    let f = model.forward_vars(&mut tape, &topo, &h0, &targets.history).unwrap();
    let (loss, _) = model.loss_vars(&mut tape, &f, &targets).unwrap();
    let g1 = tape.backward(loss);
    let g2 = tape.backward_with(loss, Matrix::scalar(2.0));
    for v in &f.params {
        if let (Some(a), Some(b)) = (g1.get(*v), g2.get(*v)) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }
}

#[test]
fn diff_compare_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = tape.constant(Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap());
    let f = diff_compare(&mut tape, a, b);
    assert_eq!(tape.value(f).data(), &[-2.0, -2.0, 3.0, 8.0]);
    let z = tape.constant(Matrix::zeros(1, 2));
    let f = diff_compare(&mut tape, z, b);
    assert_eq!(tape.value(f).data(), &[-3.0, -4.0, 0.0, 0.0]);
}

#[test]
fn ablation_flags_conflict() {
    assert_eq!(Ablation::from_flags(false, false, false).unwrap(), Ablation::None);
    assert_eq!(Ablation::from_flags(false, true, false).unwrap(), Ablation::NoDiff);
    assert!(Ablation::from_flags(true, true, false).is_err());
}

#[test]
fn no_diff_seq_ignores_history() {
    let mut c = small_config();
    c.ablation = Ablation::NoDiffSeq;
    let (model, topo, h0, targets) = instance(41, c);
    let a = model.forward(&topo, &h0, &targets.history).unwrap();
    let b = model.forward(&topo, &h0, &History::empty(2, 2)).unwrap();
    assert_eq!(a.knowledge_logits, b.knowledge_logits);
}

#[test]
fn no_res_rgat_is_the_adapter() {
    let mut c = small_config();
    c.ablation = Ablation::NoResRgat;
    let (model, topo, h0, _) = instance(43, c);
    let hg = model.propagate(&topo, &h0).unwrap();
    assert_eq!(hg, h0.matmul(model.params.get("adapter").unwrap()));
}

#[test]
fn shape_chain() {
    let (model, topo, h0, targets) = instance(45, small_config());
    let out = model.forward(&topo, &h0, &targets.history).unwrap();
    assert_eq!(out.hg.shape(), (topo.num_vertices(), 4));
    assert_eq!(out.hd.shape(), (topo.num_vertices(), 8));
    assert_eq!(out.topic_logits.len(), 3);
    assert_eq!(out.knowledge_logits.len(), 7);
}

#[test]
fn bad_inputs_are_rejected() {
    let (model, topo, h0, targets) = instance(47, small_config());
    let mut bad = h0.clone();
    bad.set(0, 0, f64::NAN);
    assert!(matches!(model.forward(&topo, &bad, &targets.history), Err(Error::NonFinite(_))));
    assert!(model.forward(&topo, &Matrix::zeros(2, 5), &targets.history).is_err());
    let mut wrong = targets.clone();
    wrong.knowledge = 0;
    assert!(model.loss(&topo, &h0, &wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_is_permutation_equivariant(seed in 0u64..1000) {
        let (model, topo, h0, targets) = instance(seed, small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let n = topo.num_vertices();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut h0p = Matrix::zeros(n, h0.cols());
        for v in 0..n {
            h0p.row_mut(perm[v]).copy_from_slice(h0.row(v));
        }
        let a = model.forward(&topo, &h0, &targets.history).unwrap();
        let b = model.forward(&topo.permuted(&perm), &h0p, &targets.history.permuted(&perm)).unwrap();
        for v in 0..n {
            for k in 0..a.hd.cols() {
                prop_assert!((a.hd.get(v, k) - b.hd.get(perm[v], k)).abs() < 1e-9);
            }
        }
        let score = |o: &ModelOutput, v: usize| {
            o.knowledge_vertices.iter().position(|&x| x == v).map(|p| o.knowledge_logits[p])
                .or_else(|| o.topic_vertices.iter().position(|&x| x == v).map(|p| o.topic_logits[p]))
                .unwrap()
        };
        for v in 0..n {
            prop_assert!((score(&a, v) - score(&b, perm[v])).abs() < 1e-9);
        }
    }

    #[test]
    fn first_half_of_self_comparison_is_zero(v in proptest::collection::vec(-1e6f64..1e6, 1..16)) {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[v.clone()]).unwrap());
        let f = diff_compare(&mut tape, a, a);
        prop_assert!(tape.value(f).data()[..v.len()].iter().all(|&x| x == 0.0));
    }
}
