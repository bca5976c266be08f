use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{build_examples, build_query, Dialogue, TrainingExample, Utterance};
use crate::kg::KnowledgeGraph;
use crate::numerics::{grad_check_floor, Tensor};

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn kg() -> KnowledgeGraph {
    KnowledgeGraph::parse("fever\tcough\ncough\tflu\nflu\trest\nfever\thead ache\nzinc\n").unwrap()
}

fn dialogue() -> Dialogue {
    Dialogue {
        id: "toy".into(),
        utterances: vec![
            Utterance::patient(s(&["i", "have", "fever"]), s(&["fever"])),
            Utterance::doctor(s(&["any", "cough", "?"]), s(&["cough"]), vec![ActLabel::Inquire]),
            Utterance::patient(s(&["yes", "cough"]), s(&["cough"])),
            Utterance::doctor(s(&["maybe", "flu"]), s(&["flu"]), vec![ActLabel::MakeDiagnosis, ActLabel::Inform]),
            Utterance::patient(s(&["what", "now"]), vec![]),
            Utterance::doctor(s(&["rest", "please"]), s(&["rest"]), vec![ActLabel::ProvideDailyPrecautions]),
        ],
    }
}

fn vocab() -> Vocab {
    Vocab::build(&[dialogue()], &kg())
}

fn small_cfg() -> FlowConfig {
    FlowConfig { dim: 8, gat_heads: 2, context_heads: 2, negatives: 4, top_k: 3, ..FlowConfig::default() }
}

fn model<F: Real>(cfg: FlowConfig) -> FlowModel<F> {
    FlowModel::new(cfg, vocab()).unwrap()
}

fn examples() -> Vec<TrainingExample> {
    build_examples(&dialogue(), &kg()).unwrap()
}

fn input(ex: &[TrainingExample]) -> FlowInput {
    FlowInput::from_examples(ex, &kg(), &vocab()).unwrap()
}

fn zero_param<F: Real>(m: &mut FlowModel<F>, name: &str) {
    let id = m.param_id(name).unwrap_or_else(|| panic!("no param {name}"));
    m.params.get_mut(id).data.iter_mut().for_each(|v| *v = F::zero());
}

fn embedding_row(m: &FlowModel<f64>, tok: usize) -> Vec<f64> {
    let t = m.params.get(m.param_id("ctx.embed").unwrap());
    let d = m.dim();
    t.data[tok * d..(tok + 1) * d].to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// ── context ─────────────────────────────────────────────────────────

#[test]
fn single_token_zero_layer_context_is_embedding() {
    let m: FlowModel<f64> = model(FlowConfig { context_layers: 0, ..small_cfg() });
    let tok = m.vocab.id("fever").unwrap();
    let mut g = Graph::new(&m.params);
    let c = m.encode_context(&mut g, &[tok], &[1]).unwrap();
    assert_eq!(g.value(c), embedding_row(&m, tok).as_slice());
}

#[test]
fn context_is_order_sensitive() {
    let m: FlowModel<f64> = model(small_cfg());
    let v = &m.vocab;
    let a = vec![v.id("[P]").unwrap(), v.id("i").unwrap(), v.id("fever").unwrap()];
    let b = vec![v.id("[P]").unwrap(), v.id("fever").unwrap(), v.id("i").unwrap()];
    let mut g = Graph::new(&m.params);
    let ca = m.encode_context(&mut g, &a, &[3]).unwrap();
    let cb = m.encode_context(&mut g, &b, &[3]).unwrap();
    assert!(!close(g.value(ca), g.value(cb), 1e-9));
}

#[test]
fn long_history_is_truncated_from_the_left() {
    let m: FlowModel<f64> = model(FlowConfig { max_context_len: 4, ..small_cfg() });
    let ids: Vec<usize> = (6..13).collect();
    let mut g = Graph::new(&m.params);
    let c = m.encode_context(&mut g, &ids, &[3, 7]).unwrap();
    let head = m.encode_context(&mut g, &ids[..3], &[3]).unwrap();
    let tail = m.encode_context(&mut g, &ids[3..7], &[4]).unwrap();
    let d = m.dim();
    assert!(close(&g.value(c)[..d], g.value(head), 1e-12));
    assert!(close(&g.value(c)[d..], g.value(tail), 1e-12));
}

#[test]
fn prefix_states_match_separate_encoding() {
    // causal encoder: S^c_k from the shared pass equals encoding U_k alone
    let m: FlowModel<f64> = model(small_cfg());
    let ids: Vec<usize> = (6..16).collect();
    let mut g = Graph::new(&m.params);
    let c = m.encode_context(&mut g, &ids, &[4, 10]).unwrap();
    let first = m.encode_context(&mut g, &ids[..4], &[4]).unwrap();
    assert!(close(&g.value(c)[..m.dim()], g.value(first), 1e-12));
}

// ── entity embeddings and GAT ───────────────────────────────────────

#[test]
fn entity_embedding_is_mean_of_name_tokens() {
    let m: FlowModel<f64> = model(small_cfg());
    let (h, a) = (m.vocab.id("head").unwrap(), m.vocab.id("ache").unwrap());
    let mut g = Graph::new(&m.params);
    let e = m.embed_entities(&mut g, &[vec![h], vec![h, a]]).unwrap();
    let d = m.dim();
    let (rh, ra) = (embedding_row(&m, h), embedding_row(&m, a));
    assert_eq!(&g.value(e)[..d], rh.as_slice());
    let mid: Vec<f64> = rh.iter().zip(&ra).map(|(x, y)| (x + y) / 2.0).collect();
    assert!(close(&g.value(e)[d..], &mid, 1e-15));
}

#[test]
fn shared_name_token_correlates_embeddings() {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let (mut shared, mut unrelated) = (0.0, 0.0);
    for seed in 0..30 {
        let m: FlowModel<f64> = model(FlowConfig { dim: 32, seed, ..small_cfg() });
        let v = &m.vocab;
        let names = vec![
            vec![v.id("head").unwrap(), v.id("ache").unwrap()],
            vec![v.id("head").unwrap(), v.id("fever").unwrap()],
            vec![v.id("cough").unwrap(), v.id("flu").unwrap()],
        ];
        let mut g = Graph::new(&m.params);
        let e = m.embed_entities(&mut g, &names).unwrap();
        let x = g.value(e);
        shared += cos(&x[..32], &x[32..64]);
        unrelated += cos(&x[..32], &x[64..]);
    }
    assert!(shared > unrelated, "{shared} vs {unrelated}");
}

fn gat_input(g: &mut Graph<'_, f64>, rows: &[[f64; 8]]) -> Var {
    g.constant(rows.concat(), rows.len(), 8).unwrap()
}

#[test]
fn isolated_node_gat_is_elu_of_projection() {
    let m: FlowModel<f64> = model(small_cfg());
    let mut g = Graph::new(&m.params);
    let x = gat_input(&mut g, &[[0.3, -0.2, 0.5, 0.1, -0.7, 0.2, 0.0, 0.4]]);
    let out = m.gat_forward(&mut g, x, &[true]).unwrap();
    let w = g.param(m.param_id("gat.w.w").unwrap());
    let proj = g.matmul(x, w).unwrap();
    let expect: Vec<f64> = g.value(proj).iter().map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect();
    assert!(close(g.value(out), &expect, 1e-12));
}

#[test]
fn zero_attention_vector_averages_neighbours() {
    let mut m: FlowModel<f64> = model(small_cfg());
    for h in 0..2 {
        zero_param(&mut m, &format!("gat.a{h}.src"));
        zero_param(&mut m, &format!("gat.a{h}.dst"));
    }
    let mut g = Graph::new(&m.params);
    let x = gat_input(
        &mut g,
        &[[0.3, -0.2, 0.5, 0.1, -0.7, 0.2, 0.0, 0.4], [0.9, 0.1, -0.5, 0.3, 0.2, 0.2, 0.6, -0.1], [0.0, 0.5, 0.5, -0.3, 0.1, 0.0, 0.2, 0.2]],
    );
    // path 0-1-2
    let mask = [true, true, false, true, true, true, false, true, true];
    let out = m.gat_forward(&mut g, x, &mask).unwrap();
    let w = g.param(m.param_id("gat.w.w").unwrap());
    let p = g.matmul(x, w).unwrap();
    let pv = g.value(p).to_vec();
    let elu = |v: f64| if v > 0.0 { v } else { v.exp() - 1.0 };
    let node1: Vec<f64> = (0..8).map(|j| elu((pv[j] + pv[8 + j] + pv[16 + j]) / 3.0)).collect();
    let node0: Vec<f64> = (0..8).map(|j| elu((pv[j] + pv[8 + j]) / 2.0)).collect();
    assert!(close(&g.value(out)[8..16], &node1, 1e-12));
    assert!(close(&g.value(out)[..8], &node0, 1e-12));
}

#[test]
fn gat_is_permutation_equivariant_and_pool_invariant() {
    let m: FlowModel<f64> = model(small_cfg());
    let rows = [
        [0.3, -0.2, 0.5, 0.1, -0.7, 0.2, 0.0, 0.4],
        [0.9, 0.1, -0.5, 0.3, 0.2, 0.2, 0.6, -0.1],
        [0.0, 0.5, 0.5, -0.3, 0.1, 0.0, 0.2, 0.2],
        [-0.4, 0.2, 0.1, 0.8, 0.0, -0.3, 0.5, 0.1],
    ];
    let edges = [(0, 1), (1, 2), (1, 3), (2, 3)];
    let mask_for = |perm: &[usize]| {
        // perm[new] = old
        let mut inv = [0; 4];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut m = vec![false; 16];
        for i in 0..4 {
            m[i * 4 + i] = true;
        }
        for &(a, b) in &edges {
            m[inv[a] * 4 + inv[b]] = true;
            m[inv[b] * 4 + inv[a]] = true;
        }
        m
    };
    let perm = [2, 0, 3, 1];
    let mut g = Graph::new(&m.params);
    let x = gat_input(&mut g, &rows);
    let out = m.gat_forward(&mut g, x, &mask_for(&[0, 1, 2, 3])).unwrap();
    let xp = gat_input(&mut g, &perm.map(|i| rows[i]));
    let outp = m.gat_forward(&mut g, xp, &mask_for(&perm)).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert!(close(&g.value(outp)[new * 8..new * 8 + 8], &g.value(out)[old * 8..old * 8 + 8], 1e-5));
    }
    let p1 = graph_pool(&mut g, Some(out), 8).unwrap();
    let p2 = graph_pool(&mut g, Some(outp), 8).unwrap();
    assert!(close(g.value(p1), g.value(p2), 1e-5));
}

#[test]
fn graph_pool_cases() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let one = g.constant(vec![1.0, 2.0], 1, 2).unwrap();
    let p = graph_pool(&mut g, Some(one), 2).unwrap();
    assert_eq!(g.value(p), &[1.0, 2.0]);
    let p = graph_pool(&mut g, None, 2).unwrap();
    assert_eq!(g.value(p), &[0.0, 0.0]);
    let two = g.constant(vec![1.0, 2.0, 3.0, -2.0], 2, 2).unwrap();
    let p = graph_pool(&mut g, Some(two), 2).unwrap();
    assert_eq!(g.value(p), &[2.0, 0.0]);
}

#[test]
fn act_pool_cases() {
    let m: FlowModel<f64> = model(small_cfg());
    let table = m.params.get(m.param_id("act.embed").unwrap()).data.clone();
    let row = |a: ActLabel| table[a.index() * 8..a.index() * 8 + 8].to_vec();
    let mut g = Graph::new(&m.params);
    let p = m.act_seq_pool(&mut g, &[ActLabel::Chitchat]).unwrap();
    assert_eq!(g.value(p), row(ActLabel::Chitchat).as_slice());
    let p = m.act_seq_pool(&mut g, &[ActLabel::Inquire, ActLabel::Inform]).unwrap();
    let mid: Vec<f64> = row(ActLabel::Inquire).iter().zip(row(ActLabel::Inform)).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(close(g.value(p), &mid, 1e-15));
    let p = m.act_seq_pool(&mut g, &[]).unwrap();
    assert_eq!(g.value(p), m.params.get(m.param_id("act.query").unwrap()).data.as_slice());
}

// ── interweaving and flow states ────────────────────────────────────

#[test]
fn interweave_shapes_and_empty_attention() {
    let m: FlowModel<f64> = model(small_cfg());
    let ex = examples();
    let inp = input(&ex);
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, &inp).unwrap();
    let rows = inp.n_full + inp.targets.len();
    assert_eq!(g.shape(v.entity_in), (rows, 24));
    assert_eq!(g.shape(v.act_in), (rows, 24));
    // turn 1 (row 0 completed, and the t=1 target) has no earlier acts
    let e = g.value(v.entity_in);
    assert!(e[16..24].iter().all(|&x| x == 0.0));
    let t1 = inp.n_full;
    assert!(e[t1 * 24 + 16..t1 * 24 + 24].iter().all(|&x| x == 0.0));
    // later turns do see acts
    assert!(e[24 + 16..48].iter().any(|&x| x != 0.0));
}

#[test]
fn single_entity_graph_context_attention_is_its_value() {
    let kg = KnowledgeGraph::parse("zinc\nfever\tcough\n").unwrap();
    let d = Dialogue {
        id: "z".into(),
        utterances: vec![
            Utterance::patient(s(&["zinc"]), s(&["zinc"])),
            Utterance::doctor(s(&["ok"]), vec![], vec![ActLabel::Inform]),
        ],
    };
    let vocab = Vocab::build(&[d.clone()], &kg);
    let m: FlowModel<f64> = FlowModel::new(small_cfg(), vocab.clone()).unwrap();
    let ex = build_examples(&d, &kg).unwrap();
    let inp = FlowInput::from_examples(&ex, &kg, &vocab).unwrap();
    assert_eq!(inp.graphs[0].len(), 1);
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, &inp).unwrap();
    let wv = g.param(m.param_id("iw.ec.v.w").unwrap());
    let projected = g.matmul(v.nodes.unwrap(), wv).unwrap();
    assert!(close(&g.value(v.entity_in)[8..16], g.value(projected), 1e-12));
}

#[test]
fn zero_gru_gives_zero_first_state() {
    let mut m: FlowModel<f64> = model(small_cfg());
    for p in ["gru.entity.w", "gru.entity.u_zr", "gru.entity.u_h", "gru.entity.b"] {
        zero_param(&mut m, p);
    }
    let ex = examples();
    let out = m.predict(&input(&ex[..1])).unwrap();
    assert!(out[0].entity_state.iter().all(|&x| x == 0.0));
}

#[test]
fn flow_state_depends_on_turn_order() {
    let m: FlowModel<f64> = model(small_cfg());
    let kg = kg();
    let base = dialogue();
    let mut swapped = base.clone();
    swapped.utterances.swap(0, 2);
    swapped.utterances.swap(1, 3);
    let a = build_examples(&base, &kg).unwrap();
    let b = build_examples(&swapped, &kg).unwrap();
    let oa = m.predict(&input(&a[2..])).unwrap();
    let ob = m.predict(&FlowInput::from_examples(&b[2..], &kg, &m.vocab).unwrap()).unwrap();
    assert!(!close(&oa[0].entity_state, &ob[0].entity_state, 1e-9));
    assert!(!close(&oa[0].act_state, &ob[0].act_state, 1e-9));
}

#[test]
fn gradient_reaches_first_turn() {
    let m: FlowModel<f64> = model(small_cfg());
    let ex = examples();
    let inp = input(&ex[2..]);
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, &inp).unwrap();
    let s = g.sum_all(v.entity_state);
    let grads = g.backward(s).unwrap();
    let ge = grads.of(v.entity_in).unwrap();
    assert!(ge[..24].iter().any(|&x| x != 0.0));
}

#[test]
fn batched_targets_match_single_target_inputs() {
    let m: FlowModel<f64> = model(small_cfg());
    let ex = examples();
    let all = m.predict(&input(&ex)).unwrap();
    for (i, e) in ex.iter().enumerate() {
        let one = m.predict(&input(std::slice::from_ref(e))).unwrap();
        assert_eq!(one[0].t, all[i].t);
        assert!(close(&one[0].scores, &all[i].scores, 1e-12));
        assert!(close(&one[0].act_probs, &all[i].act_probs, 1e-12));
        assert!(close(&one[0].entity_state, &all[i].entity_state, 1e-12));
    }
}

#[test]
fn query_example_predicts_like_training_example() {
    let m: FlowModel<f64> = model(small_cfg());
    let mut d = dialogue();
    d.utterances.pop();
    let q = build_query(&d, &kg()).unwrap().unwrap();
    let ex = examples();
    let a = m.predict(&input(&[q])).unwrap();
    let b = m.predict(&input(&ex[2..])).unwrap();
    assert_eq!(a[0].scores, b[0].scores);
    assert_eq!(a[0].act_probs, b[0].act_probs);
}

// ── no leakage and ablations ────────────────────────────────────────

#[test]
fn target_turn_labels_do_not_leak() {
    let m: FlowModel<f64> = model(small_cfg());
    let base = examples();
    let mut d = dialogue();
    let last = d.utterances.last_mut().unwrap();
    last.acts = vec![ActLabel::Chitchat, ActLabel::StateRequiredTest];
    last.entities = s(&["fever", "flu"]);
    last.tokens = s(&["something", "else"]);
    let pert = build_examples(&d, &kg()).unwrap();
    let a = m.predict(&input(&base)).unwrap();
    let b = m.predict(&input(&pert)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.scores, y.scores);
        assert_eq!(x.act_probs, y.act_probs);
        assert_eq!(x.top_k, y.top_k);
        assert_eq!(x.acts, y.acts);
    }
}

#[test]
fn interweave_off_zeroes_cross_terms() {
    let mut cfg = small_cfg();
    cfg.ablate("no-interweave").unwrap();
    let mut m: FlowModel<f64> = model(cfg);
    let inp = input(&examples());
    let (before, ent, act) = {
        let mut g = Graph::new(&m.params);
        let v = m.forward(&mut g, &inp).unwrap();
        let out = m.outputs_from(&g, &v, &inp).unwrap();
        (out, g.value(v.entity_in).to_vec(), g.value(v.act_in).to_vec())
    };
    for r in 0..ent.len() / 24 {
        assert!(ent[r * 24 + 16..r * 24 + 24].iter().all(|&x| x == 0.0));
        assert!(act[r * 24 + 16..r * 24 + 24].iter().all(|&x| x == 0.0));
    }
    // the unused projections have no influence
    for p in ["iw.ea.q.w", "iw.ea.v.w", "iw.ae.k.w", "iw.ae.v.w"] {
        let id = m.param_id(p).unwrap();
        m.params.get_mut(id).data.iter_mut().for_each(|v| *v += 0.3);
    }
    let after = m.predict(&inp).unwrap();
    assert_eq!(before, after);
}

#[test]
fn directional_ablations_zero_one_side() {
    let inp = input(&examples());
    for (flag, zero_entity_side) in [("no-e2a", true), ("no-a2e", false)] {
        let mut cfg = small_cfg();
        cfg.ablate(flag).unwrap();
        let m: FlowModel<f64> = model(cfg);
        let mut g = Graph::new(&m.params);
        let v = m.forward(&mut g, &inp).unwrap();
        let (zeroed, live) = if zero_entity_side { (v.entity_in, v.act_in) } else { (v.act_in, v.entity_in) };
        let z = g.value(zeroed);
        let l = g.value(live);
        let rows = z.len() / 24;
        assert!((0..rows).all(|r| z[r * 24 + 16..r * 24 + 24].iter().all(|&x| x == 0.0)));
        assert!((0..rows).any(|r| l[r * 24 + 16..r * 24 + 24].iter().any(|&x| x != 0.0)));
    }
    assert!(small_cfg().ablate("no-such").is_err());
}

#[test]
fn no_flow_uses_context_state() {
    let mut cfg = small_cfg();
    cfg.ablate("no-flow").unwrap();
    let m: FlowModel<f64> = model(cfg);
    let inp = input(&examples());
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, &inp).unwrap();
    let ctx = g.value(v.context).to_vec();
    let n = inp.targets.len();
    assert_eq!(g.value(v.entity_state), &ctx[..n * 8]);
    assert_eq!(g.value(v.act_state), &ctx[..n * 8]);
}

// ── scoring, acts, loss ─────────────────────────────────────────────

#[test]
fn matching_state_ranks_first() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let cands = g.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3).unwrap();
    let s = g.constant(vec![0.0, 1.0, 0.0], 1, 3).unwrap();
    let sc = g.matmul_t(cands, s).unwrap();
    let scores: Vec<f64> = g.value(sc).to_vec();
    let ids = [EntityId(5), EntityId(9), EntityId(2)];
    assert_eq!(select_topk(&ids, &scores, 1), vec![EntityId(9)]);
    // k beyond the pool returns everything, ties by id
    assert_eq!(select_topk(&ids, &scores, 10), vec![EntityId(9), EntityId(2), EntityId(5)]);
}

#[test]
fn scores_match_brute_force_dot_products() {
    let m: FlowModel<f64> = model(small_cfg());
    let inp = input(&examples());
    let mut g = Graph::new(&m.params);
    let v = m.forward(&mut g, &inp).unwrap();
    let nodes = g.value(v.nodes.unwrap()).to_vec();
    let es = g.value(v.entity_state).to_vec();
    for (i, tgt) in inp.targets.iter().enumerate() {
        let Some(sc) = v.scores[i] else { continue };
        let off = v.node_offsets[tgt.cand_graph];
        for (c, &p) in tgt.cand_pos.iter().enumerate() {
            let row = &nodes[(off + p) * 8..(off + p + 1) * 8];
            let dot: f64 = row.iter().zip(&es[i * 8..i * 8 + 8]).map(|(a, b)| a * b).sum();
            assert!((dot - g.value(sc)[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn entity_free_target_turn_uses_pool_graph() {
    let inp = input(&examples());
    let t3 = &inp.targets[2];
    assert!(inp.graphs[t3.graph].is_empty());
    assert_ne!(t3.cand_graph, t3.graph);
    assert!(!t3.candidates.is_empty());
    let m: FlowModel<f64> = model(small_cfg());
    let out = m.predict(&inp).unwrap();
    assert_eq!(out[2].scores.len(), t3.candidates.len());
    assert_eq!(out[2].top_k.len(), t3.candidates.len().min(3));
}

#[test]
fn act_prediction_rules() {
    let half = [0.5; NUM_ACTS];
    assert_eq!(predict_acts(&[0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], &half), vec![ActLabel::Inquire]);
    assert_eq!(predict_acts(&[0.1, 0.2, 0.05, 0.3, 0.1, 0.1, 0.1], &half), vec![ActLabel::StateRequiredTest]);
    assert_eq!(predict_acts(&half, &half).len(), NUM_ACTS);
    let mut m: FlowModel<f64> = model(small_cfg());
    zero_param(&mut m, "act.head.w");
    let out = m.predict(&input(&examples())).unwrap();
    assert!(out.iter().all(|o| o.act_probs.iter().all(|&p| p == 0.5)));
}

#[test]
fn two_way_equal_scores_give_ln2() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let sc = g.constant(vec![0.7, 0.7], 2, 1).unwrap();
    let l = contrastive_term(&mut g, sc, &[0, 1], 1.0).unwrap();
    assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn contrastive_loss_falls_as_positive_rises() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let mut prev = f64::INFINITY;
    for p in [-1.0, 0.0, 0.5, 2.0, 4.0] {
        let sc = g.constant(vec![p, 0.3, -0.2, 1.0], 4, 1).unwrap();
        let lv = contrastive_term(&mut g, sc, &[0, 1, 2, 3], 1.0).unwrap();
        let l = g.scalar(lv);
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn loss_weights_and_half_probability_bce() {
    let mut m: FlowModel<f64> = model(small_cfg());
    zero_param(&mut m, "act.head.w");
    let inp = input(&examples());
    let mut g = Graph::new(&m.params);
    let l = m.flow_loss(&mut g, &inp, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let n = inp.targets.len() as f64;
    // all probabilities 0.5: per-example L_a = ln 2
    assert!((l.act / n - std::f64::consts::LN_2).abs() < 1e-9);
    let expect = 1.0 * l.entity + 0.05 * l.act;
    assert!((g.scalar(l.total) - expect).abs() < 1e-12);
    assert_eq!(l.examples, 3);
}

#[test]
fn flow_loss_gradient_check() {
    let cfg = FlowConfig { dim: 8, gat_heads: 2, context_heads: 2, negatives: 2, ..FlowConfig::default() };
    let m: FlowModel<f64> = model(cfg);
    let kg = kg();
    let d = Dialogue { id: "two".into(), utterances: dialogue().utterances[..4].to_vec() };
    let ex = build_examples(&d, &kg).unwrap();
    let inp = FlowInput::from_examples(&ex, &kg, &m.vocab).unwrap();
    let mut params = m.params.clone();
    let report = grad_check_floor(&mut params, 1e-5, None, 1e-6, |g| {
        let l = m.flow_loss(g, &inp, &mut ChaCha8Rng::seed_from_u64(1))?;
        Ok(l.total)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
    assert!(report.checked > 1000);
}

#[test]
fn f32_and_f64_agree() {
    let m: FlowModel<f64> = model(small_cfg());
    let m32: FlowModel<f32> = m.cast();
    let inp = input(&examples());
    let a = m.predict(&inp).unwrap();
    let b = m32.predict(&inp).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(close(&x.scores, &y.scores, 1e-4));
    }
    let _ = Tensor::<f32>::zeros(&[1]);
}
