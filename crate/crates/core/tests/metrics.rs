//! Cross-checks the verification metrics against deliberately naive
//! reimplementations: explicit-loop cosines and aggregation, threshold
//! selection by repeated max extraction, pointwise curve averaging, and a
//! fixed-point check for the equal error rate. Also pins the invariances
//! the metrics must have: strictly increasing score transforms and exact
//! power-of-two embedding scalings change nothing.

use edgeear_core::data::{subgroup_for_identity, synth_dataset};
use edgeear_core::eval::{
    auc_of, cosine_matrix, eer_of, evaluate, identity_scores, macro_roc, rank1_of,
    Aggregation, EmbeddingRecord, EmbeddingSet, RocCurve, ScoreTable, ROC_GRID,
};
use edgeear_core::backbone::{EdgeEarModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn small_set(identities: usize, per_identity: usize, dim: usize, spread: f64, seed: u64) -> EmbeddingSet {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..identities)
        .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut records = Vec::new();
    for (i, center) in centers.iter().enumerate() {
        for s in 0..per_identity {
            let embedding = center
                .iter()
                .map(|c| c + spread * r.gen_range(-1.0..1.0))
                .collect();
            records.push(EmbeddingRecord {
                sample_id: format!("id{:03}_s{:02}", i, s),
                identity: i,
                subgroup: subgroup_for_identity(i),
                embedding,
            });
        }
    }
    EmbeddingSet::new(records).unwrap()
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Value that would sit at position `k` (0-indexed) if `vals` were sorted
/// descending, found by extracting the maximum k times.
fn oracle_kth_largest(vals: &[f64], k: usize) -> f64 {
    let mut pool = vals.to_vec();
    for _ in 0..k {
        let mut mi = 0;
        for i in 1..pool.len() {
            if pool[i] > pool[mi] {
                mi = i;
            }
        }
        pool.swap_remove(mi);
    }
    let mut best = pool[0];
    for &v in &pool[1..] {
        if v > best {
            best = v;
        }
    }
    best
}

fn oracle_roc(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let n_imp = impostor.len();
    let mut fnmr = Vec::with_capacity(ROC_GRID + 1);
    for i in 0..=ROC_GRID {
        let budget = i * n_imp / ROC_GRID;
        let misses = if budget < n_imp {
            let t = oracle_kth_largest(impostor, budget);
            genuine.iter().filter(|&&g| g <= t).count()
        } else {
            0
        };
        fnmr.push(misses as f64 / genuine.len() as f64);
    }
    fnmr
}

/// Genuine/impostor pools per identity, rebuilt with plain loops from the
/// raw embeddings (own-sample excluded, mean aggregation).
fn oracle_pools(set: &EmbeddingSet) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    let ids: Vec<usize> = set.identities().into_iter().collect();
    let mut out = Vec::new();
    for &id in &ids {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for p in &set.records {
            let mut sum = 0.0;
            let mut count = 0;
            for g in &set.records {
                if g.identity != id || g.sample_id == p.sample_id {
                    continue;
                }
                sum += oracle_cosine(&p.embedding, &g.embedding);
                count += 1;
            }
            if count == 0 {
                continue;
            }
            if p.identity == id {
                genuine.push(sum / count as f64);
            } else {
                impostor.push(sum / count as f64);
            }
        }
        if !genuine.is_empty() && !impostor.is_empty() {
            out.push((id, genuine, impostor));
        }
    }
    out
}

/// Piecewise-linear interpolation of a grid curve at an arbitrary rate.
fn interp_fnmr(curve: &RocCurve, f: f64) -> f64 {
    let x = f * ROC_GRID as f64;
    let lo = (x.floor() as usize).min(ROC_GRID);
    let hi = (x.ceil() as usize).min(ROC_GRID);
    if lo == hi {
        return curve.fnmr[lo];
    }
    let a = x - lo as f64;
    curve.fnmr[lo] * (1.0 - a) + curve.fnmr[hi] * a
}

#[test]
fn cosine_and_aggregation_match_explicit_loops() {
    let set = small_set(5, 3, 7, 0.4, 21);
    let n = set.records.len();
    let sims = cosine_matrix(&set, &set).unwrap();
    for p in 0..n {
        for g in 0..n {
            let want = oracle_cosine(&set.records[p].embedding, &set.records[g].embedding);
            assert!(
                (sims[p * n + g] - want).abs() < 1e-13,
                "cosine mismatch at ({}, {})",
                p,
                g
            );
        }
    }
    let table = identity_scores(&set, Aggregation::Mean).unwrap();
    let w = table.identities.len();
    for p in 0..n {
        for (c, &id) in table.identities.iter().enumerate() {
            let mut sum = 0.0;
            let mut count = 0;
            for g in &set.records {
                if g.identity != id || g.sample_id == set.records[p].sample_id {
                    continue;
                }
                sum += oracle_cosine(&set.records[p].embedding, &g.embedding);
                count += 1;
            }
            assert!(table.eligible[p * w + c]);
            let want = sum / count as f64;
            assert!(
                (table.scores[p * w + c] - want).abs() < 1e-13,
                "aggregate mismatch at probe {} identity {}",
                p,
                id
            );
        }
    }
    // max aggregation against the same loops
    let table = identity_scores(&set, Aggregation::Max).unwrap();
    for p in 0..n {
        for (c, &id) in table.identities.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for g in &set.records {
                if g.identity != id || g.sample_id == set.records[p].sample_id {
                    continue;
                }
                best = best.max(oracle_cosine(&set.records[p].embedding, &g.embedding));
            }
            assert!((table.scores[p * w + c] - best).abs() < 1e-13);
        }
    }
}

#[test]
fn per_identity_and_macro_curves_match_naive_threshold_selection() {
    let set = small_set(6, 3, 5, 0.8, 33);
    let table = identity_scores(&set, Aggregation::Mean).unwrap();
    let (macro_curve, per_identity) = macro_roc(&table).unwrap();
    let pools = oracle_pools(&set);
    assert_eq!(per_identity.len(), pools.len());
    let mut avg = vec![0.0; ROC_GRID + 1];
    for ((id, genuine, impostor), ir) in pools.iter().zip(&per_identity) {
        assert_eq!(*id, ir.identity);
        assert_eq!(genuine.len(), ir.genuine);
        assert_eq!(impostor.len(), ir.impostor);
        let want = oracle_roc(genuine, impostor);
        for i in 0..=ROC_GRID {
            assert!(
                (ir.curve.fnmr[i] - want[i]).abs() < 1e-12,
                "identity {} grid point {}: impl {} oracle {}",
                id,
                i,
                ir.curve.fnmr[i],
                want[i]
            );
            avg[i] += want[i];
        }
    }
    for i in 0..=ROC_GRID {
        let want = avg[i] / pools.len() as f64;
        assert!((macro_curve.fnmr[i] - want).abs() < 1e-12);
    }
}

#[test]
fn eer_is_a_fixed_point_of_the_curve_and_auc_matches_trapezoids() {
    for (spread, seed) in [(0.3, 7), (0.8, 8), (1.5, 9), (3.0, 10)] {
        let set = small_set(6, 3, 6, spread, seed);
        let table = identity_scores(&set, Aggregation::Mean).unwrap();
        let (curve, _) = macro_roc(&table).unwrap();
        let eer = eer_of(&curve);
        assert!((0.0..=1.0).contains(&eer));
        assert!(
            (interp_fnmr(&curve, eer) - eer).abs() < 1e-9,
            "eer {} is not where the interpolated curve meets the diagonal (spread {})",
            eer,
            spread
        );
        let auc = auc_of(&curve);
        let mut want = 0.0;
        for i in 1..=ROC_GRID {
            let df = 1.0 / ROC_GRID as f64;
            want += df * (1.0 - (curve.fnmr[i - 1] + curve.fnmr[i]) / 2.0);
        }
        assert!((auc - want).abs() < 1e-12);
    }
}

#[test]
fn rank1_matches_explicit_argmax() {
    let set = small_set(6, 3, 5, 1.2, 41);
    let table = identity_scores(&set, Aggregation::Mean).unwrap();
    let r1 = rank1_of(&table).unwrap();
    let mut used = 0;
    let mut correct = 0;
    for p in &set.records {
        let mut best_id = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        let mut own_seen = false;
        for &id in &set.identities() {
            let mut sum = 0.0;
            let mut count = 0;
            for g in &set.records {
                if g.identity != id || g.sample_id == p.sample_id {
                    continue;
                }
                sum += oracle_cosine(&p.embedding, &g.embedding);
                count += 1;
            }
            if count == 0 {
                continue;
            }
            if id == p.identity {
                own_seen = true;
            }
            let s = sum / count as f64;
            if s > best {
                best = s;
                best_id = id;
            }
        }
        if !own_seen {
            continue;
        }
        used += 1;
        if best_id == p.identity {
            correct += 1;
        }
    }
    assert!(used > 0);
    assert_eq!(r1, correct as f64 / used as f64);
}

#[test]
fn strictly_increasing_score_transforms_change_nothing() {
    let set = small_set(5, 3, 6, 0.9, 55);
    let table = identity_scores(&set, Aggregation::Mean).unwrap();
    let (curve, _) = macro_roc(&table).unwrap();
    let r1 = rank1_of(&table).unwrap();

    let mut warped = ScoreTable {
        probe_ids: table.probe_ids.clone(),
        probe_identity: table.probe_identity.clone(),
        identities: table.identities.clone(),
        scores: table.scores.iter().map(|&s| 1.5 * s * s * s + 2.0 * s).collect(),
        eligible: table.eligible.clone(),
    };
    let (wcurve, _) = macro_roc(&warped).unwrap();
    for i in 0..=ROC_GRID {
        assert_eq!(curve.fnmr[i].to_bits(), wcurve.fnmr[i].to_bits());
    }
    assert_eq!(eer_of(&curve).to_bits(), eer_of(&wcurve).to_bits());
    assert_eq!(auc_of(&curve).to_bits(), auc_of(&wcurve).to_bits());
    assert_eq!(rank1_of(&warped).unwrap().to_bits(), r1.to_bits());

    // a second, steeper transform
    warped.scores = table.scores.iter().map(|&s| (4.0 * s).exp()).collect();
    let (wcurve, _) = macro_roc(&warped).unwrap();
    for i in 0..=ROC_GRID {
        assert_eq!(curve.fnmr[i].to_bits(), wcurve.fnmr[i].to_bits());
    }
    assert_eq!(rank1_of(&warped).unwrap().to_bits(), r1.to_bits());
}

#[test]
fn power_of_two_embedding_scaling_changes_nothing() {
    let set = small_set(6, 3, 8, 0.7, 61);
    let base = evaluate(&set, Aggregation::Mean).unwrap();
    let mut scaled = set.clone();
    for r in &mut scaled.records {
        for v in &mut r.embedding {
            *v *= 4.0;
        }
    }
    let after = evaluate(&scaled, Aggregation::Mean).unwrap();
    let a = serde_json::to_string(&base.report).unwrap();
    let b = serde_json::to_string(&after.report).unwrap();
    assert_eq!(a, b);
    for (x, y) in base.macro_curve.fnmr.iter().zip(&after.macro_curve.fnmr) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn embeddings_do_not_depend_on_batch_split() {
    let config = ModelConfig {
        stage_depths: [1, 1, 1, 2],
        stage_dims: [8, 16, 24, 32],
        conv_kernel_sizes: [3, 3, 3, 3],
        sdta_stages: vec![4],
        sdta_splits: 4,
        num_heads: 4,
        input_size: 32,
        embedding_dim: 16,
        ..ModelConfig::default()
    };
    let model = EdgeEarModel::build(config, 77).unwrap();
    let ds = synth_dataset(3, 2, 32, 900).unwrap();
    let one = edgeear_core::eval::embed_dataset(&model, &ds, 1).unwrap();
    let four = edgeear_core::eval::embed_dataset(&model, &ds, 4).unwrap();
    let all = edgeear_core::eval::embed_dataset(&model, &ds, 64).unwrap();
    for ((a, b), c) in one.records.iter().zip(&four.records).zip(&all.records) {
        assert_eq!(a.sample_id, b.sample_id);
        let ab: Vec<u64> = a.embedding.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.embedding.iter().map(|v| v.to_bits()).collect();
        let cb: Vec<u64> = c.embedding.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
        assert_eq!(ab, cb);
    }
    // an untrained network still yields a well-formed evaluation
    let ev = evaluate(&all, Aggregation::Max).unwrap();
    assert!((0.0..=1.0).contains(&ev.report.eer));
    assert!((0.0..=1.0).contains(&ev.report.rank1));
}
