//! Encoder behaviour: reference oracle, mode/cache equivalences, invariances,
//! cascaded aggregators, parameter counting and cost growth.

mod common;

use common::*;
use gfk_core::error::GfkError;
use gfk_core::model::*;
use gfk_core::tape::Tape;
use gfk_core::tensor::Tensor;
use gfk_core::tokens::CLS;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn tiny(mode: Mode, aggregator: Aggregator) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        max_tokens: 4,
        max_neighbours: 4,
        vocab_size: 12,
        mode,
        aggregator,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Fills every parameter (biases and norms included) with random values.
fn random_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::init(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    p.weights_mut().visit_mut(&mut |name, t| {
        let gain = name.ends_with("gamma");
        for v in t.data_mut() {
            *v = if gain { r.random_range(0.5..1.5) } else { r.random_range(-0.5..0.5) };
        }
    });
    p
}

fn random_seq(r: &mut impl Rng, cfg: &ModelConfig) -> Vec<u32> {
    let len = r.random_range(1..=cfg.max_tokens);
    std::iter::once(CLS).chain((1..len).map(|_| r.random_range(4..cfg.vocab_size as u32))).collect()
}

fn random_input(r: &mut impl Rng, cfg: &ModelConfig, neighbours: usize, first_id: u64) -> GraphInput {
    let nodes = (0..=neighbours).map(|_| random_seq(r, cfg)).collect();
    GraphInput::with_ids((first_id..first_id + neighbours as u64 + 1).collect(), nodes)
}

// ---- straight-line oracle --------------------------------------------------

fn ref_embed(p: &ParamSet, seq: &[u32]) -> Rows {
    let w = p.weights();
    seq.iter()
        .enumerate()
        .map(|(pos, &t)| {
            w.embeddings.word.row(t as usize).iter().zip(w.embeddings.position.row(pos)).map(|(a, b)| a + b).collect()
        })
        .collect()
}

fn ref_plain(p: &ParamSet, seq: &[u32], depth: usize) -> Vec<Rows> {
    let eps = p.config().layer_norm_eps;
    let mut h = ref_embed(p, seq);
    let mut states = Vec::new();
    for l in 0..depth {
        h = ref_layer(&h, None, &p.weights().layers[l], &vec![false; seq.len()], eps);
        states.push(h.clone());
    }
    states
}

/// Relation bias by enumerating node roles directly.
fn ref_bias(p: &ParamSet, l: usize) -> impl Fn(usize, usize, usize) -> f64 + '_ {
    let g = &p.weights().gnn[p.config().gnn_index(l)];
    move |h, i, j| {
        let Some(b) = &g.bias else { return 0.0 };
        let class = match (i, j) {
            (0, 0) => 0,
            (0, _) | (_, 0) => 1,
            _ => 2,
        };
        b.values.data()[h * 3 + class]
    }
}

fn ref_encode(p: &ParamSet, input: &GraphInput) -> Vec<f64> {
    let cfg = p.config();
    let eps = cfg.layer_norm_eps;
    let w = p.weights();
    let m = input.len();
    match cfg.mode {
        Mode::Bidirectional => {
            let mut hs: Vec<Rows> = input
                .nodes
                .iter()
                .map(|s| ref_layer(&ref_embed(p, s), None, &w.layers[0], &vec![false; s.len()], eps))
                .collect();
            for l in 1..cfg.layers {
                let z: Rows = hs.iter().map(|h| h[0].clone()).collect();
                let bias = ref_bias(p, l);
                let z_hat = ref_mha(&z, &z, &w.gnn[cfg.gnn_index(l)].mha, &vec![false; m], Some(&bias));
                for (g, h) in hs.iter_mut().enumerate() {
                    *h = ref_layer(h, Some(&z_hat[g]), &w.layers[l], &vec![false; h.len()], eps);
                }
            }
            hs[0][0].clone()
        }
        Mode::Unidirectional => {
            let neighbours: Vec<Vec<Rows>> = input.neighbours().iter().map(|s| ref_plain(p, s, cfg.layers - 1)).collect();
            let c = input.center();
            let mut h = ref_layer(&ref_embed(p, c), None, &w.layers[0], &vec![false; c.len()], eps);
            for l in 1..cfg.layers {
                let mut z = vec![h[0].clone()];
                z.extend(neighbours.iter().map(|n| n[l - 1][0].clone()));
                let bias = ref_bias(p, l);
                let z_hat = ref_mha(&z, &z, &w.gnn[cfg.gnn_index(l)].mha, &vec![false; m], Some(&bias));
                h = ref_layer(&h, Some(&z_hat[0]), &w.layers[l], &vec![false; c.len()], eps);
            }
            h[0].clone()
        }
    }
}

#[test]
fn nested_encoder_matches_straight_line_oracle() {
    for mode in [Mode::Bidirectional, Mode::Unidirectional] {
        for share in [true, false] {
            let cfg = ModelConfig { share_gnn: share, layers: 3, ..tiny(mode, Aggregator::Nested) };
            let p = random_params(&cfg, 7);
            let mut r = rng(8);
            let input = random_input(&mut r, &cfg, 2, 0);
            let got = encode_graph(&input, &p, None).unwrap();
            let diff = max_diff(got.data(), &ref_encode(&p, &input));
            assert!(diff < 1e-10, "{mode:?} share={share}: {diff}");
        }
    }
}

#[test]
fn oracle_case_from_contract() {
    // L=2, d=8, h=2, P=4, M=3, every sequence full length.
    let cfg = tiny(Mode::Bidirectional, Aggregator::Nested);
    let p = random_params(&cfg, 1);
    let input = GraphInput::new(vec![vec![CLS, 4, 5, 6], vec![CLS, 7, 8, 9], vec![CLS, 10, 11, 4]]);
    let got = encode_graph(&input, &p, None).unwrap();
    assert!(max_diff(got.data(), &ref_encode(&p, &input)) < 1e-10);
}

#[test]
fn batch_composition_does_not_change_results() {
    for mode in [Mode::Bidirectional, Mode::Unidirectional] {
        for agg in [Aggregator::Nested, Aggregator::Att, Aggregator::Gat] {
            let cfg = tiny(mode, agg);
            let p = random_params(&cfg, 3);
            let mut r = rng(4);
            let inputs: Vec<GraphInput> = (0..4).map(|i| random_input(&mut r, &cfg, i, 10 * i as u64)).collect();
            let refs: Vec<&GraphInput> = inputs.iter().collect();
            let batched = encode_graphs(&refs, &p, None).unwrap();
            for (g, b) in inputs.iter().zip(&batched) {
                assert_eq!(encode_graph(g, &p, None).unwrap().data(), b.data(), "{mode:?} {agg:?}");
            }
        }
    }
}

#[test]
fn single_node_modes_agree_bitwise() {
    let bi = tiny(Mode::Bidirectional, Aggregator::Nested);
    let uni = tiny(Mode::Unidirectional, Aggregator::Nested);
    let pb = random_params(&bi, 5);
    let pu = ParamSet::from_weights(&uni, pb.weights().clone()).unwrap();
    let mut r = rng(6);
    for _ in 0..5 {
        let input = random_input(&mut r, &bi, 0, 0);
        let a = encode_graph(&input, &pb, None).unwrap();
        let b = encode_graph(&input, &pu, None).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn neighbour_order_does_not_matter() {
    for mode in [Mode::Bidirectional, Mode::Unidirectional] {
        let cfg = tiny(mode, Aggregator::Nested);
        let p = random_params(&cfg, 11);
        let mut r = rng(12);
        let input = random_input(&mut r, &cfg, 4, 0);
        let base = encode_graph(&input, &p, None).unwrap();
        for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
            let out = encode_graph(&input.permuted(&perm).unwrap(), &p, None).unwrap();
            assert!(base.max_abs_diff(&out) < 1e-8, "{mode:?}");
        }
    }
}

#[test]
fn cache_is_transparent() {
    let cfg = tiny(Mode::Unidirectional, Aggregator::Nested);
    let p = random_params(&cfg, 21);
    let mut r = rng(22);
    let inputs: Vec<GraphInput> = (0..3).map(|i| random_input(&mut r, &cfg, 3, 100 * i)).collect();
    let mut cache = NeighborCache::pinned_to(&p);
    for g in &inputs {
        let none = encode_graph(g, &p, None).unwrap();
        let cold = encode_graph(g, &p, Some(&mut cache)).unwrap();
        let warm = encode_graph(g, &p, Some(&mut cache)).unwrap();
        assert_eq!(none.data(), cold.data());
        assert_eq!(none.data(), warm.data());
    }
    assert_eq!(cache.misses(), 9);
    assert_eq!(cache.hits(), 9);
}

#[test]
fn cache_hits_misses_and_versions() {
    let cfg = tiny(Mode::Unidirectional, Aggregator::Nested);
    let mut p = random_params(&cfg, 31);
    let seq = vec![CLS, 5, 6];
    let mut cache = NeighborCache::new();
    let a = cache_lookup_or_encode(&mut cache, 42, &seq, &p).unwrap();
    let b = cache_lookup_or_encode(&mut cache, 42, &seq, &p).unwrap();
    assert_eq!((cache.hits(), cache.misses()), (1, 1));
    assert_eq!(a, b);
    assert_eq!(a, encode_plain_stack(&seq, &p).unwrap().intermediate);

    p.weights_mut().layers[0].ffn_out.weight.data_mut()[0] += 0.25;
    let c = cache_lookup_or_encode(&mut cache, 42, &seq, &p).unwrap();
    assert_eq!(cache.misses(), 2);
    assert_ne!(a, c);
    assert_eq!(c, encode_plain_stack(&seq, &p).unwrap().intermediate);
}

#[test]
fn pinned_cache_rejects_other_parameters() {
    let cfg = tiny(Mode::Unidirectional, Aggregator::Nested);
    let p = random_params(&cfg, 41);
    let q = random_params(&cfg, 42);
    let mut cache = NeighborCache::pinned_to(&p);
    let input = random_input(&mut rng(43), &cfg, 2, 0);
    let err = encode_graph(&input, &q, Some(&mut cache)).unwrap_err();
    assert!(matches!(err, GfkError::StaleCache { .. }));
}

#[test]
fn cache_requires_unidirectional_mode() {
    let cfg = tiny(Mode::Bidirectional, Aggregator::Nested);
    let p = random_params(&cfg, 44);
    let input = random_input(&mut rng(45), &cfg, 2, 0);
    let err = encode_graph(&input, &p, Some(&mut NeighborCache::new())).unwrap_err();
    assert!(matches!(err, GfkError::Contract(_)));
}

#[test]
fn cache_file_persists_entries() {
    let cfg = tiny(Mode::Unidirectional, Aggregator::Nested);
    let p = random_params(&cfg, 51);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("neighbours.bin");
    let seqs = [vec![CLS, 4], vec![CLS, 5, 6, 7]];
    let first = {
        let mut cache = NeighborCache::open(&path, cfg.layers - 1, cfg.hidden).unwrap();
        let wanted: Vec<(u64, &[u32])> = vec![(1, &seqs[0]), (2, &seqs[1])];
        cache.lookup_or_encode_many(&wanted, &p).unwrap()
    };
    let len = std::fs::metadata(&path).unwrap().len();
    assert_eq!(len, 2 * (16 + 8 * (cfg.layers as u64 - 1) * cfg.hidden as u64));
    let mut cache = NeighborCache::open(&path, cfg.layers - 1, cfg.hidden).unwrap();
    assert_eq!(cache.len(), 2);
    let again = cache.lookup_or_encode(2, &seqs[1], &p).unwrap();
    assert_eq!(cache.hits(), 1);
    assert_eq!(again, first[1]);

    std::fs::write(&path, vec![0u8; 20]).unwrap();
    assert!(NeighborCache::open(&path, cfg.layers - 1, cfg.hidden).is_err());
}

#[test]
fn neighbour_states_are_shared_across_instances() {
    let cfg = ModelConfig { layers: 3, ..tiny(Mode::Unidirectional, Aggregator::Nested) };
    let p = random_params(&cfg, 61);
    let mut r = rng(62);
    let shared = random_seq(&mut r, &cfg);
    let a = GraphInput::new(vec![random_seq(&mut r, &cfg), random_seq(&mut r, &cfg), shared.clone()]);
    let b = GraphInput::new(vec![random_seq(&mut r, &cfg), shared.clone()]);
    let (_, sa) = encode_graph_traced(&a, &p).unwrap();
    let (_, sb) = encode_graph_traced(&b, &p).unwrap();
    assert_eq!(sa[1], sb[0]);
    let stack = encode_plain_stack(&shared, &p).unwrap();
    assert_eq!(stack.intermediate, sb[0]);
    assert_eq!(stack.intermediate.len(), cfg.layers - 1);
}

#[test]
fn plain_stack_two_layers_returns_both_states() {
    let cfg = tiny(Mode::Unidirectional, Aggregator::Nested);
    let p = random_params(&cfg, 63);
    let seq = vec![CLS, 4, 9];
    let s = encode_plain_stack(&seq, &p).unwrap();
    assert_eq!(s.intermediate.len(), 1);
    let oracle = ref_plain(&p, &seq, 2);
    assert!(max_diff(s.intermediate[0].data(), &oracle[0][0]) < 1e-12);
    assert!(max_diff(s.last.data(), &oracle[1][0]) < 1e-12);
}

#[test]
fn capacity_is_enforced() {
    let cfg = ModelConfig { max_neighbours: 1, ..tiny(Mode::Bidirectional, Aggregator::Nested) };
    let p = random_params(&cfg, 71);
    let input = random_input(&mut rng(72), &cfg, 2, 0);
    let err = encode_graph(&input, &p, None).unwrap_err();
    assert!(matches!(err, GfkError::Instance { ref source, .. } if matches!(**source, GfkError::Capacity { .. })));
}

// ---- cascaded baselines -----------------------------------------------------

fn ref_cascaded(p: &ParamSet, input: &GraphInput) -> Vec<f64> {
    let cfg = p.config();
    let d = cfg.hidden;
    let e: Vec<Vec<f64>> = input.nodes.iter().map(|s| ref_plain(p, s, cfg.layers).pop().unwrap()[0].clone()).collect();
    let center = &e[0];
    let neigh = &e[1..];
    let combine = |pooled: Vec<f64>| -> Vec<f64> {
        let Some(AggregatorWeights::Combine(lin)) = &p.weights().aggregator else { panic!() };
        let joint: Vec<f64> = center.iter().chain(&pooled).copied().collect();
        ref_linear(&vec![joint], lin).remove(0)
    };
    let softmax = |s: &[f64]| -> Vec<f64> {
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        s.iter().map(|v| (v - m).exp() / z).collect()
    };
    let weighted = |w: &[f64], rows: &[Vec<f64>]| -> Vec<f64> {
        (0..d).map(|c| w.iter().zip(rows).map(|(a, r)| a * r[c]).sum()).collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    match cfg.aggregator {
        Aggregator::None => center.clone(),
        Aggregator::Mean => combine(if neigh.is_empty() {
            vec![0.0; d]
        } else {
            (0..d).map(|c| neigh.iter().map(|n| n[c]).sum::<f64>() / neigh.len() as f64).collect()
        }),
        Aggregator::Max => combine(if neigh.is_empty() {
            vec![0.0; d]
        } else {
            (0..d).map(|c| neigh.iter().map(|n| n[c]).fold(f64::NEG_INFINITY, f64::max)).collect()
        }),
        Aggregator::Att => combine(if neigh.is_empty() {
            vec![0.0; d]
        } else {
            let s: Vec<f64> = neigh.iter().map(|n| dot(center, n)).collect();
            weighted(&softmax(&s), neigh)
        }),
        Aggregator::Gat => {
            let Some(AggregatorWeights::Gat { query, key }) = &p.weights().aggregator else { panic!() };
            let lin = |w: &Tensor| gfk_core::layers::Linear { weight: w.clone(), bias: None };
            let q = ref_linear(&vec![center.clone()], &lin(query)).remove(0);
            let k = ref_linear(&e, &lin(key));
            let s: Vec<f64> = k.iter().map(|kr| dot(&q, kr) / (d as f64).sqrt()).collect();
            weighted(&softmax(&s), &e)
        }
        Aggregator::Nested => unreachable!(),
    }
}

#[test]
fn cascaded_aggregators_match_pooling_oracle() {
    for agg in [Aggregator::None, Aggregator::Max, Aggregator::Mean, Aggregator::Att, Aggregator::Gat] {
        let cfg = tiny(Mode::Bidirectional, agg);
        let p = random_params(&cfg, 81);
        let mut r = rng(82);
        for k in [0, 1, 4] {
            let input = random_input(&mut r, &cfg, k, 0);
            let got = cascaded_encode(&input, &p).unwrap();
            let diff = max_diff(got.data(), &ref_cascaded(&p, &input));
            assert!(diff < 1e-12, "{agg:?} k={k}: {diff}");
        }
    }
}

#[test]
fn cascaded_none_is_center_text_embedding() {
    let cfg = tiny(Mode::Bidirectional, Aggregator::None);
    let p = random_params(&cfg, 83);
    let input = random_input(&mut rng(84), &cfg, 3, 0);
    let got = cascaded_encode(&input, &p).unwrap();
    assert_eq!(got, encode_plain_stack(input.center(), &p).unwrap().last);
}

#[test]
fn mean_of_identical_neighbours_is_that_embedding() {
    let cfg = tiny(Mode::Bidirectional, Aggregator::Mean);
    let p = random_params(&cfg, 85);
    let n = vec![CLS, 5, 5];
    let input = GraphInput::new(vec![vec![CLS, 4], n.clone(), n.clone(), n.clone()]);
    let e = text_embeddings(&[&input.nodes[0], &n], &p).unwrap();
    let via_text = aggregate_text(&[(&e[0], vec![&e[1]])], &p).unwrap();
    assert!(via_text[0].max_abs_diff(&cascaded_encode(&input, &p).unwrap()) < 1e-12);
}

#[test]
fn aggregate_text_matches_full_cascade() {
    let cfg = tiny(Mode::Bidirectional, Aggregator::Att);
    let p = random_params(&cfg, 86);
    let input = random_input(&mut rng(87), &cfg, 3, 0);
    let seqs: Vec<&[u32]> = input.nodes.iter().map(Vec::as_slice).collect();
    let e = text_embeddings(&seqs, &p).unwrap();
    let out = aggregate_text(&[(&e[0], e[1..].iter().collect())], &p).unwrap();
    assert_eq!(out[0], cascaded_encode(&input, &p).unwrap());
}

// ---- bookkeeping ------------------------------------------------------------

/// Closed-form parameter count.
fn expected_params(cfg: &ModelConfig) -> usize {
    let d = cfg.hidden;
    let embed = cfg.vocab_size * d + cfg.max_tokens * d;
    // Query, value and output projections carry biases; the key does not.
    let attention = 4 * d * d + 3 * d;
    let ffn = (d * 4 * d + 4 * d) + (4 * d * d + d);
    let norms = 2 * 2 * d;
    let layer = attention + ffn + norms;
    let gnn_set = 3 * d * d + if cfg.relation_bias { 3 * cfg.heads } else { 0 };
    let agg = match cfg.aggregator {
        Aggregator::Nested | Aggregator::None => 0,
        Aggregator::Max | Aggregator::Mean | Aggregator::Att => 2 * d * d + d,
        Aggregator::Gat => 2 * d * d,
    };
    let gnn_sets = match (cfg.aggregator, cfg.share_gnn) {
        (Aggregator::Nested, true) => 1,
        (Aggregator::Nested, false) => cfg.layers - 1,
        _ => 0,
    };
    embed + cfg.layers * layer + gnn_sets * gnn_set + agg
}

#[test]
fn parameter_count_matches_closed_form() {
    for layers in [2, 4] {
        for share_gnn in [true, false] {
            for relation_bias in [true, false] {
                for agg in [Aggregator::Nested, Aggregator::Max, Aggregator::Gat, Aggregator::None] {
                    let cfg = ModelConfig { layers, share_gnn, relation_bias, aggregator: agg, ..ModelConfig::default() };
                    let p = ParamSet::init(&cfg, 0).unwrap();
                    assert_eq!(p.num_parameters(), expected_params(&cfg), "{cfg:?}");
                }
            }
        }
    }
}

#[test]
fn relation_bias_off_removes_parameters_and_still_encodes() {
    let cfg = ModelConfig { relation_bias: false, ..tiny(Mode::Bidirectional, Aggregator::Nested) };
    let p = random_params(&cfg, 91);
    assert!(p.weights().gnn[0].bias.is_none());
    let input = random_input(&mut rng(92), &cfg, 2, 0);
    let got = encode_graph(&input, &p, None).unwrap();
    assert!(max_diff(got.data(), &ref_encode(&p, &input)) < 1e-10);
}

fn r_squared(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let beta = x.clone().svd(true, true).solve(y, 1e-12).unwrap();
    let fit = x * beta;
    let mean = y.mean();
    let ss_res: f64 = (y - fit).iter().map(|v| v * v).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn cost_grows_quadratically_in_nodes_and_with_token_attention() {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        max_tokens: 8,
        max_neighbours: 16,
        vocab_size: 50,
        ..ModelConfig::default()
    };
    let p = ParamSet::init(&cfg, 1).unwrap();
    let seq: Vec<u32> = std::iter::once(CLS).chain(4..11).collect();
    let ms = [2usize, 4, 8, 16];
    let mut flops = Vec::new();
    for &m in &ms {
        let input = GraphInput::new(vec![seq.clone(); m]);
        let mut tape = Tape::new();
        let w = p.bind(&mut tape, false);
        encode_on_tape(&mut tape, &cfg, &w, &[&input]).unwrap();
        flops.push(tape.flops() as f64);
    }
    let x = DMatrix::from_fn(ms.len(), 3, |i, j| [(ms[i] * ms[i]) as f64, ms[i] as f64, 1.0][j]);
    let y = DVector::from_vec(flops.clone());
    let r2 = r_squared(&x, &y);
    assert!(r2 >= 0.99, "R² = {r2}, flops {flops:?}");
}
