mod common;

use common::*;
use mosaic::encoder::init_weights;
use mosaic::numerics::{Tape, Tensor};
use mosaic::objectives::{
    apply_domain_masking, batch_objective_on_tape, candidate_ids, contrastive_loss, joint_loss, mlm_domain_loss,
    JointLossConfig, MaskScope, MaskingConfig, Scoring,
};
use mosaic::tokenizer::is_special;
use proptest::prelude::*;

fn dot_cfg() -> JointLossConfig {
    JointLossConfig {
        scoring: Scoring::Dot,
        ..Default::default()
    }
}

#[test]
fn two_pair_contrastive_matches_direct_evaluation() {
    let q = matrix(&[&[1.0, 0.0], &[0.3, 0.8]]);
    let d = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let row = |qi: &[f64], pos: usize| {
        let s: Vec<f64> = (0..2).map(|j| qi[0] * d.get(j, 0) + qi[1] * d.get(j, 1)).collect();
        (s[0].exp() + s[1].exp()).ln() - s[pos]
    };
    let row1 = row(q.row(0), 0);
    assert!((row1 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((row1 - 0.3132617).abs() < 1e-7);
    let want = (row1 + row(q.row(1), 1)) / 2.0;
    let got = contrastive_loss(&q, &d, &dot_cfg()).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn hand_built_mlm_logits() {
    let vocab = toy_vocab(3, 4);
    let mut w = init_weights(&small_config(&vocab, 1, 4, 0)).unwrap();
    let dom = vocab.domain_ids();
    for (k, &id) in dom.iter().enumerate() {
        let mut row = vec![0.0; 4];
        row[k] = 1.0;
        w.embedding_mut().row_mut(id).copy_from_slice(&row);
    }
    // State [2,0,0,0] scores 2 on the first candidate and 0 on the rest.
    let state = Tensor::from_rows(&[vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
    let loss = mlm_domain_loss(&state, &[dom[0]], &w, &vocab, MaskScope::DomainOnly).unwrap();
    assert!((loss - (1.0 + 3.0 * (-2.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn joint_gradient_is_weighted_sum_of_parts() {
    let vocab = toy_vocab(6, 3);
    let cfg = small_config(&vocab, 2, 8, 2);
    let w = spread_weights(&cfg, 2, 0.3);
    let (q, d) = toy_encodings(&vocab, 3, 2);
    let batch = mask_domain_positions(q, d);
    let cands = candidate_ids(&vocab, MaskScope::DomainOnly).unwrap();
    let alpha = 0.3;
    let joint = JointLossConfig {
        alpha,
        ..Default::default()
    };
    let grads = |pick: &str| {
        let mut tape = Tape::new();
        let vars = w.register(&mut tape);
        let obj = batch_objective_on_tape(&mut tape, &vars, &cfg, &batch, &joint, Some(&cands)).unwrap();
        let out = match pick {
            "total" => obj.total,
            "cl" => obj.cl,
            _ => obj.mlm.unwrap(),
        };
        let g = tape.backward(out).unwrap();
        let value = tape.value(out).item();
        let grads: Vec<Tensor> = w.params().iter().enumerate().map(|(i, p)| g.get_or_zeros(i, p.shape())).collect();
        (value, grads)
    };
    let (total, gt) = grads("total");
    let (cl, gc) = grads("cl");
    let (mlm, gm) = grads("mlm");
    assert!((total - joint_loss(mlm, cl, alpha).unwrap()).abs() < 1e-12);
    for ((t, c), m) in gt.iter().zip(&gc).zip(&gm) {
        for ((a, b), e) in t.data().iter().zip(c.data()).zip(m.data()) {
            assert!((a - (alpha * e + b)).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn domain_loss_differs_from_full_vocab_loss() {
    let vocab = toy_vocab(10, 3);
    let w = spread_weights(&small_config(&vocab, 1, 4, 6), 6, 0.8);
    let state = Tensor::from_rows(&[vec![0.5, -1.0, 0.25, 2.0]]).unwrap();
    let t = vocab.domain_ids()[1];
    let domain = mlm_domain_loss(&state, &[t], &w, &vocab, MaskScope::DomainOnly).unwrap();
    let e = w.embedding();
    let logit = |id: usize| (0..4).map(|c| state.get(0, c) * e.get(id, c)).sum::<f64>();
    let full: f64 = (0..vocab.len()).map(|id| logit(id).exp()).sum::<f64>().ln() - logit(t);
    let restricted: f64 = vocab.domain_ids().iter().map(|&id| logit(id).exp()).sum::<f64>().ln() - logit(t);
    assert!((domain - restricted).abs() < 1e-12);
    assert!((domain - full).abs() > 1e-6);
}

#[test]
fn full_rate_masks_exactly_the_domain_positions() {
    let vocab = toy_vocab(6, 4);
    let (q, d) = toy_encodings(&vocab, 20, 8);
    let idx: Vec<usize> = (0..20).collect();
    let cfg = MaskingConfig {
        rate: 1.0,
        ..Default::default()
    };
    let b = apply_domain_masking(&q, &d, &idx, &cfg).unwrap();
    for m in &b.queries {
        let want: Vec<usize> = (0..m.encoding.len()).filter(|&i| m.encoding.is_domain[i]).collect();
        assert_eq!(m.mask_positions, want);
    }
    assert!(b.documents.iter().all(|m| m.mask_positions.is_empty()));
}

fn rotation(theta: f64, dim: usize, i: usize, j: usize) -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> = (0..dim).map(|a| (0..dim).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
    r[i][i] = theta.cos();
    r[j][j] = theta.cos();
    r[i][j] = -theta.sin();
    r[j][i] = theta.sin();
    r
}

fn apply(rows: &[Vec<f64>], r: &[Vec<f64>]) -> Tensor {
    let out: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| (0..x.len()).map(|a| (0..x.len()).map(|b| r[a][b] * x[b]).sum()).collect())
        .collect();
    Tensor::from_rows(&out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dot_contrastive_is_rotation_invariant(
        rows in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 4), 4..9),
        angles in prop::collection::vec(0.0f64..6.3, 3),
    ) {
        let b = rows.len() / 2;
        let (q, d) = (&rows[..b], &rows[b..2 * b]);
        let base = contrastive_loss(&Tensor::from_rows(q).unwrap(), &Tensor::from_rows(d).unwrap(), &dot_cfg()).unwrap();
        let mut qr: Vec<Vec<f64>> = q.to_vec();
        let mut dr: Vec<Vec<f64>> = d.to_vec();
        for (k, &a) in angles.iter().enumerate() {
            let r = rotation(a, 4, k, k + 1);
            qr = (0..b).map(|i| apply(&qr, &r).row(i).to_vec()).collect();
            dr = (0..b).map(|i| apply(&dr, &r).row(i).to_vec()).collect();
        }
        let rotated = contrastive_loss(&Tensor::from_rows(&qr).unwrap(), &Tensor::from_rows(&dr).unwrap(), &dot_cfg()).unwrap();
        prop_assert!((base - rotated).abs() < 1e-9);
    }

    #[test]
    fn masking_never_selects_specials(seed in 0u64..10_000, rate in 0.0f64..=1.0, all in any::<bool>(), docs in any::<bool>()) {
        let vocab = toy_vocab(6, 4);
        let (q, d) = toy_encodings(&vocab, 5, seed);
        let idx: Vec<usize> = (0..5).collect();
        let scope = if all { MaskScope::AllTokens } else { MaskScope::DomainOnly };
        let cfg = MaskingConfig { rate, scope, seed, mask_documents: docs };
        let b = apply_domain_masking(&q, &d, &idx, &cfg).unwrap();
        for m in b.queries.iter().chain(&b.documents) {
            for &p in &m.mask_positions {
                let id = m.encoding.ids[p];
                prop_assert!(!is_special(id));
                if !all {
                    prop_assert!(vocab.is_domain(id));
                }
            }
        }
    }
}
