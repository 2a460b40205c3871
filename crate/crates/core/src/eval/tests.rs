use super::*;
use crate::generative::{block_of, edge_marginal, node_probs, community_probs, ancestral_sample, EmbeddingDims, PlantedBlocks, PriorHyper, SamplerConfig};
use crate::graph::{split_temporal, NodeId, UndirectedEdge};
use crate::inference::{GRU_PHI, GRU_PSI};

fn snap(s: usize, t: usize, v: usize, edges: &[(usize, usize)]) -> GraphSnapshot {
    GraphSnapshot::new(s, t, v, edges.iter().map(|&(a, b)| UndirectedEdge::new(a, b).unwrap())).unwrap()
}

fn random_corpus(s: usize, t: usize, v: usize, e: usize, seed: u64) -> DynamicGraphCorpus {
    let mut rng = derive_rng(seed, &[]);
    let mut snaps = Vec::new();
    for subject in 0..s {
        for time in 0..t {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < e {
                let (a, b) = (rng.random_range(0..v), rng.random_range(0..v));
                if a != b {
                    set.insert((a.min(b), a.max(b)));
                }
            }
            snaps.push(snap(subject, time, v, &set.into_iter().collect::<Vec<_>>()));
        }
    }
    DynamicGraphCorpus::new(s, t, v, snaps).unwrap()
}

fn small_model(corpus: &DynamicGraphCorpus, k: usize, h: usize) -> Model {
    let cfg = TrainingConfig {
        num_communities: k,
        h_alpha: h,
        h_phi: h,
        h_psi: h,
        sigma_phi: 0.1,
        sigma_psi: 0.1,
        ..TrainingConfig::default()
    };
    let split = split_temporal(corpus.num_snapshots(), cfg.fractions()).unwrap();
    Model::initialize(corpus, &cfg, split).unwrap()
}

fn zeroed(mut model: Model) -> Model {
    for i in 0..model.store.len() {
        model.store.by_index_mut(i).as_mut_slice().fill(0.0);
    }
    model
}

#[test]
fn predictive_matrix_rows_are_edge_marginals() {
    let corpus = random_corpus(2, 5, 7, 6, 1);
    let model = small_model(&corpus, 3, 4);
    let params = model.generative_params().unwrap();
    let m = posterior_means(&model.store, &model.shape, 1, 3).unwrap();
    let p = predictive_matrix(&m.phi[2], &m.psi[2], &params).unwrap();
    for w in 0..7 {
        let row = edge_marginal(m.phi[2].row(w), &m.psi[2], &params).unwrap();
        for c in 0..7 {
            assert!((p.get(w, c) - row[c]).abs() < 1e-14);
        }
        assert!((p.row(w).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_weight_model_has_uniform_nll() {
    for (v, seed) in [(360, 2), (12, 3)] {
        let corpus = random_corpus(2, 5, v, 20, seed);
        let model = zeroed(small_model(&corpus, 3, 4));
        let got = mean_nll(&model, &corpus, model.split.test.clone()).unwrap();
        assert!((got - (v as f64).ln()).abs() < 1e-9, "{got}");
    }
    assert!((360f64.ln() - 5.8861).abs() < 1e-4);
}

#[test]
fn near_perfect_predictor_has_near_zero_nll() {
    let corpus = DynamicGraphCorpus::new(1, 1, 3, vec![snap(0, 0, 3, &[(0, 1)])]).unwrap();
    let mut p = Matrix::filled(3, 3, 0.5e-9);
    p.set(0, 1, 1.0 - 1e-9);
    p.set(1, 0, 1.0 - 1e-9);
    let preds = Predictions::new(0..1, vec![vec![p]]).unwrap();
    let (value, per) = nll(&corpus, &preds).unwrap();
    assert!((value - 1e-9).abs() < 1e-15);
    assert_eq!(per[0].num_edges, 1);
}

#[test]
fn exact_reconstruction_has_zero_degree_error() {
    let s = snap(0, 0, 4, &[(0, 1)]);
    let mut p = Matrix::filled(4, 4, 0.25);
    p.row_mut(0).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    p.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    let mse = snapshot_degree_mse(&s.directed_expansion(), &p, 10, &mut derive_rng(1, &[]));
    assert_eq!(mse, 0.0);
}

#[test]
fn star_graph_degree_error_matches_expectation() {
    let v = 5;
    let s = snap(0, 0, v, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
    let samples = s.directed_expansion();
    let n = samples.len() as f64;
    let p = Matrix::filled(v, v, 1.0 / v as f64);

    // E[(R - A)^2] = (E[R] - A)^2 + Var[R], R = sources + Binomial targets.
    let mut expected = 0.0;
    for node in 0..v {
        let actual = samples.iter().filter(|d| d.w.0 == node).count() as f64
            + samples.iter().filter(|d| d.c.0 == node).count() as f64;
        let sources = samples.iter().filter(|d| d.w.0 == node).count() as f64;
        let mean = sources + n / v as f64;
        let var = n * (1.0 / v as f64) * (1.0 - 1.0 / v as f64);
        expected += ((mean - actual).powi(2) + var) / (2.0 * n).powi(2);
    }
    expected /= v as f64;
    assert!(expected > 0.0);

    let draws = 200_000;
    let got = snapshot_degree_mse(&samples, &p, draws, &mut derive_rng(2, &[]));
    assert!((got - expected).abs() < 0.01 * expected, "{got} vs {expected}");
}

#[test]
fn degree_mse_is_seeded() {
    let corpus = random_corpus(2, 6, 9, 8, 4);
    let model = small_model(&corpus, 2, 3);
    let preds = model_predictions(&model, &corpus, model.split.test.clone()).unwrap();
    let a = degree_mse(&corpus, &preds, 5).unwrap();
    let b = degree_mse(&corpus, &preds, 5).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.0 > 0.0);
}

#[test]
fn negatives_are_distinct_non_edges() {
    let s = snap(0, 0, 8, &[(0, 1), (2, 3), (1, 7), (4, 6)]);
    let negs = sample_negatives(&s, 10, &mut derive_rng(6, &[])).unwrap();
    assert_eq!(negs.len(), 10);
    let set: std::collections::BTreeSet<_> = negs.iter().collect();
    assert_eq!(set.len(), 10);
    assert!(negs.iter().all(|&(a, b)| a < b && !s.contains(a, b)));
    assert_eq!(negs, sample_negatives(&s, 10, &mut derive_rng(6, &[])).unwrap());

    let complete = snap(0, 0, 3, &[(0, 1), (0, 2), (1, 2)]);
    assert!(sample_negatives(&complete, 1, &mut derive_rng(6, &[])).is_err());
}

#[test]
fn link_prediction_separates_known_structure() {
    let corpus = random_corpus(1, 3, 10, 6, 7);
    // Score each pair by whether it is an edge: perfect separation.
    let perfect = link_prediction_with(&corpus, 1..3, 8, |s, t, u, v| f64::from(u8::from(corpus.snapshot(s, t).contains(u, v)))).unwrap();
    assert_eq!((perfect.auroc, perfect.ap), (1.0, 1.0));
    assert_eq!(perfect.positives, perfect.negatives);
    let constant = link_prediction_with(&corpus, 1..3, 8, |_, _, _, _| 0.3).unwrap();
    assert_eq!(constant.auroc, 0.5);
}

#[test]
fn cmn_needs_a_previous_snapshot() {
    let corpus = random_corpus(1, 3, 6, 3, 9);
    assert!(cmn_predictions(&corpus, 0..2).is_err());
    assert!(cmn_link_prediction(&corpus, 0..2, 1).is_err());
    let preds = cmn_predictions(&corpus, 1..3).unwrap();
    let (value, _) = nll(&corpus, &preds).unwrap();
    assert!(value.is_finite() && value > 0.0);
}

#[test]
fn planted_communities_rank_their_own_block() {
    let (v, k, h) = (30, 3, 4);
    let cfg = SamplerConfig {
        num_subjects: 3,
        num_snapshots: 4,
        num_nodes: v,
        num_communities: k,
        edges_per_snapshot: 20,
        dims: EmbeddingDims::uniform(h),
        hyper: PriorHyper { sigma_phi: 0.05, sigma_psi: 0.05 },
    };
    let (params, offsets) = PlantedBlocks::default().build(v, k, h, 1).unwrap();
    let out = ancestral_sample(&cfg, &params, Some(&offsets), 2).unwrap();
    let mut node_dist = Matrix::zeros(k, v);
    let mut mixtures = Matrix::zeros(v, k);
    for s in 0..3 {
        for t in 0..4 {
            for c in 0..k {
                let p = node_probs(out.latents.psi[s][t].row(c), &params).unwrap();
                node_dist.row_mut(c).iter_mut().zip(p).for_each(|(a, b)| *a += b / 12.0);
            }
            for n in 0..v {
                let p = community_probs(out.latents.phi[s][t].row(n), &params).unwrap();
                mixtures.row_mut(n).iter_mut().zip(p).for_each(|(a, b)| *a += b / 12.0);
            }
        }
    }
    let r = community_report_from_averages(&node_dist, &mixtures, 0.1, None).unwrap();
    for entry in &r.communities {
        assert_eq!(entry.top_nodes.len(), 3);
        assert!(entry.top_nodes.iter().all(|&n| block_of(n, v, k) == entry.community));
    }
    let truth: Vec<usize> = (0..v).map(|n| block_of(n, v, k)).collect();
    assert!((nmi(&r.assignment, &truth).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn community_report_of_a_model() {
    let corpus = random_corpus(2, 6, 12, 8, 10);
    let labels: BTreeMap<usize, String> = (0..12).map(|n| (n, format!("net{}", n % 3))).collect();
    let corpus = corpus.with_partition(labels).unwrap();
    let model = small_model(&corpus, 3, 4);
    let r = community_report(&model, &corpus, 0.1).unwrap();
    assert_eq!(r.communities.len(), 3);
    assert_eq!(r.assignment.len(), 12);
    for e in &r.communities {
        assert_eq!(e.top_nodes.len(), 2);
        assert!((e.node_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((e.overlap.as_ref().unwrap().values().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(partition_nmi(&r.assignment, &corpus).unwrap().is_some());
}

#[test]
fn exported_embeddings_shape_constancy_and_round_trip() {
    let corpus = random_corpus(3, 6, 7, 5, 11).with_labels(vec!["a".into(), "b".into(), "a".into()]).unwrap();
    let mut model = small_model(&corpus, 2, 3);
    // A closed update gate freezes the trajectory at its initial state.
    for prefix in [GRU_PHI, GRU_PSI] {
        model.store.get_mut(&format!("{prefix}.b_u")).unwrap().as_mut_slice().fill(-800.0);
    }
    let rows = export_embeddings(&model, &corpus).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].label, "b");
    assert_eq!(rows[0].features.len(), 2 * 3 + 7 * 3);
    let m = posterior_means(&model.store, &model.shape, 2, 1).unwrap();
    let mut expected = m.psi[0].as_slice().to_vec();
    expected.extend_from_slice(m.phi[0].as_slice());
    for (a, b) in rows[2].features.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embeddings.csv");
    write_embeddings(&rows, &path).unwrap();
    assert_eq!(read_embeddings(&path).unwrap(), rows);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("subject,label,feature_0,feature_1,"));
}

#[test]
fn task_selection_controls_report_fields() {
    assert_eq!(Tasks::parse("recon,link,communities").unwrap(), Tasks::all());
    assert!(Tasks::parse("recon,bogus").is_err());
    assert!(Tasks::parse("").is_err());

    let corpus = random_corpus(2, 6, 9, 6, 12);
    let model = small_model(&corpus, 2, 3);
    let link_only = Tasks::parse("link").unwrap();
    let report = evaluate(&model, &corpus, &link_only, 3).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert!(json.get("auroc").is_some() && json.get("ap").is_some());
    assert!(json.get("nll").is_none());
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&evaluate(&model, &corpus, &link_only, 3).unwrap()).unwrap());

    let cmn = evaluate_cmn(&corpus, &model.split, &Tasks::parse("recon,link").unwrap(), 3).unwrap();
    let cj = serde_json::to_value(&cmn).unwrap();
    for key in ["nll", "degree_mse", "auroc", "ap"] {
        assert!(cj.get(key).is_some(), "{key}");
    }
    assert!(cmn.per_snapshot.iter().all(|r| r.time >= 1));
}

#[test]
fn mismatched_corpus_is_rejected() {
    let corpus = random_corpus(2, 6, 9, 6, 13);
    let model = small_model(&corpus, 2, 3);
    let other = random_corpus(2, 6, 10, 6, 13);
    assert!(evaluate(&model, &other, &Tasks::all(), 1).is_err());
    let _ = NodeId(0);
}
