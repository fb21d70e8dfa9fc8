mod common;

use common::{gradcheck, random_tensor, rng, tensor_err, FD_TOL};
use mmet_core::encoders::{Encoding, MultimodalEncoding};
use mmet_core::image::{ImageMaskPlan, MaskStrategy};
use mmet_core::numerics::{Graph, Tensor, TensorError, Var};
use mmet_core::objectives::{
    id_loss, itm_loss, mim_loss, mlm_loss, mmm_loss, total_finetune_loss, triplet_loss, TripletMining,
    DEFAULT_MARGIN,
};
use mmet_core::params::{Bound, ParamStore};
use mmet_core::text::{Corruption, TextMaskPlan};
use proptest::prelude::*;
use rand::Rng;

const D: usize = 8;
const PATCH_DIM: usize = 6;
const VOCAB: usize = 10;

/// Random heads for every pretraining objective over width `D`.
fn heads(seed: u64) -> &'static ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (name, out) in [
        ("head.mim", PATCH_DIM),
        ("head.mlm", VOCAB),
        ("head.mmm_image", PATCH_DIM),
        ("head.mmm_text", VOCAB),
        ("head.itm", 2),
    ] {
        s.insert(format!("{name}.w"), random_tensor(&mut r, &[D, out]));
        s.insert(format!("{name}.b"), random_tensor(&mut r, &[out]));
    }
    Box::leak(Box::new(s))
}

fn encoding<'g>(hidden: Var<'g>, batch: usize, seq: usize) -> Encoding<'g> {
    Encoding {
        hidden,
        layers: vec![hidden],
        batch,
        seq,
    }
}

fn fused<'g>(hidden: Var<'g>, batch: usize, m: usize, l: usize) -> MultimodalEncoding<'g> {
    MultimodalEncoding {
        encoding: encoding(hidden, batch, 1 + m + l),
        num_patches: m,
        text_len: l,
        pairs: (0..batch).map(|b| (b, b)).collect(),
    }
}

fn image_plan(positions: Vec<usize>, seed: u64) -> ImageMaskPlan {
    let mut r = rng(seed);
    let targets = (0..positions.len() * PATCH_DIM).map(|_| r.gen()).collect();
    ImageMaskPlan {
        positions,
        targets,
        strategy: MaskStrategy::Random,
        degenerate: false,
    }
}

fn text_plan(positions: Vec<usize>, ids: Vec<usize>) -> TextMaskPlan {
    TextMaskPlan {
        corruption: vec![Corruption::Mask; positions.len()],
        positions,
        original_ids: ids,
    }
}

fn row(t: &Tensor, r: usize) -> Vec<f64> {
    t.data()[r * t.shape()[1]..(r + 1) * t.shape()[1]].to_vec()
}

/// `x · W + b` with plain loops.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = w.shape()[1];
    (0..out)
        .map(|c| b.data()[c] + x.iter().enumerate().map(|(k, v)| v * w.data()[k * out + c]).sum::<f64>())
        .collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss by enumeration, no shared code with the library.
fn triplet_oracle(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..n {
            let d = euclid(&rows[a], &rows[j]);
            if j != a && labels[j] == labels[a] {
                hardest_pos = hardest_pos.max(d);
            } else if labels[j] != labels[a] {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (hardest_pos - hardest_neg + margin).max(0.0);
    }
    total / n as f64
}

fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p).flat_map(|i| std::iter::repeat(i).take(k)).collect()
}

fn assert_fd(name: &str, err: f64) {
    assert!(err < FD_TOL, "{name}: relative error {err:e}");
}

fn head_inputs(store: &ParamStore, name: &str) -> [Tensor; 2] {
    [
        store.get(&format!("{name}.w")).unwrap().clone(),
        store.get(&format!("{name}.b")).unwrap().clone(),
    ]
}

fn bind_head<'g>(p: &Bound<'g>, name: &str, w: Var<'g>, b: Var<'g>) -> Result<(), TensorError> {
    p.bind_var(&format!("{name}.w"), w).map_err(tensor_err)?;
    p.bind_var(&format!("{name}.b"), b).map_err(tensor_err)
}

#[test]
fn id_loss_examples() {
    let g = Graph::new();
    let two = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let expected = (1.0 + (-1f64).exp()).ln();
    assert!((id_loss(two, &[0, 1]).unwrap().item() - 0.313262).abs() < 1e-5);
    assert!((id_loss(two, &[0, 1]).unwrap().item() - expected).abs() < 1e-12);
    let err = id_loss(two, &[0, 2]).unwrap_err();
    assert!(matches!(err, mmet_core::Error::Usage(_)));
}

#[test]
fn id_loss_gradient() {
    let inputs = [random_tensor(&mut rng(1), &[4, D])];
    let err = gradcheck(&inputs, |_, v| id_loss(v[0], &[0, 3, 7, 3]).map_err(tensor_err));
    assert_fd("id", err);
}

#[test]
fn triplet_loss_examples_and_oracle() {
    let g = Graph::new();
    let same = g.constant(Tensor::new(&[4, 2], vec![0.5; 8]).unwrap()).unwrap();
    let loss = triplet_loss(same, &[0, 0, 1, 1], 0.3, TripletMining::BatchHard, &mut rng(0)).unwrap();
    assert!((loss.item() - 0.3).abs() < 1e-6);

    let line = g.constant(Tensor::new(&[4, 1], vec![0.0, 0.1, 1.0, 1.1]).unwrap()).unwrap();
    let loss = triplet_loss(line, &[0, 0, 1, 1], 0.3, TripletMining::BatchHard, &mut rng(0)).unwrap();
    assert_eq!(loss.item(), 0.0);

    let labels = pk_labels(3, 4);
    let t = random_tensor(&mut rng(2), &[12, D]);
    let rows: Vec<Vec<f64>> = (0..12).map(|r| row(&t, r)).collect();
    let f = g.constant(t).unwrap();
    let loss = triplet_loss(f, &labels, 0.8, TripletMining::BatchHard, &mut rng(0)).unwrap();
    assert!((loss.item() - triplet_oracle(&rows, &labels, 0.8)).abs() < 1e-9);
}

#[test]
fn triplet_precondition_errors_name_the_label() {
    let g = Graph::new();
    let f = g.constant(random_tensor(&mut rng(3), &[3, 2])).unwrap();
    let err = triplet_loss(f, &[0, 0, 5], 0.3, TripletMining::BatchHard, &mut rng(0)).unwrap_err();
    assert!(err.to_string().contains("label 5"), "{err}");
    let err = triplet_loss(f, &[2, 2, 2], 0.3, TripletMining::BatchHard, &mut rng(0)).unwrap_err();
    assert!(err.to_string().contains("label 2"), "{err}");
}

#[test]
fn triplet_gradient_both_minings() {
    let labels = pk_labels(2, 3);
    let inputs = [random_tensor(&mut rng(4), &[6, D])];
    for mining in [TripletMining::BatchHard, TripletMining::Random] {
        // a large margin keeps every hinge active so the check is informative
        let err = gradcheck(&inputs, |_, v| {
            triplet_loss(v[0], &labels, 5.0, mining, &mut rng(9)).map_err(tensor_err)
        });
        assert_fd("triplet", err);
    }
}

#[test]
fn total_matches_independent_recomputation() {
    let labels = pk_labels(4, 4);
    let mut r = rng(5);
    let logits = random_tensor(&mut r, &[16, 4]);
    let feats = random_tensor(&mut r, &[16, D]);
    let ce: f64 = (0..16).map(|i| cross_entropy(&row(&logits, i), labels[i])).sum::<f64>() / 16.0;
    let rows: Vec<Vec<f64>> = (0..16).map(|i| row(&feats, i)).collect();
    let tri = triplet_oracle(&rows, &labels, DEFAULT_MARGIN);

    let g = Graph::new();
    let id = id_loss(g.constant(logits).unwrap(), &labels).unwrap();
    let t = triplet_loss(
        g.constant(feats).unwrap(),
        &labels,
        DEFAULT_MARGIN,
        TripletMining::BatchHard,
        &mut rng(0),
    )
    .unwrap();
    let total = total_finetune_loss(id, t).unwrap().item();
    assert!((total - (ce + tri)).abs() < 1e-12);

    let zero = g.constant(Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
    assert_eq!(total_finetune_loss(zero, zero).unwrap().item(), 0.0);
    let a = g.constant(Tensor::new(&[1], vec![2.3]).unwrap()).unwrap();
    let b = g.constant(Tensor::new(&[1], vec![0.3]).unwrap()).unwrap();
    assert!((total_finetune_loss(a, b).unwrap().item() - 2.6).abs() < 1e-12);
}

#[test]
fn mim_matches_scalar_oracle() {
    let store = heads(10);
    let hidden = random_tensor(&mut rng(11), &[2 * 5, D]);
    let plans = [image_plan(vec![0, 3], 1), image_plan(vec![2], 2)];
    let g = Graph::new();
    let p = store.bind(&g, false);
    let enc = encoding(g.constant(hidden.clone()).unwrap(), 2, 5);
    let (loss, count) = mim_loss(&p, &enc, &[&plans[0], &plans[1]]).unwrap().unwrap();
    assert_eq!(count, 3);

    let (w, b) = (store.get("head.mim.w").unwrap(), store.get("head.mim.b").unwrap());
    let mut sum = 0.0;
    let mut n = 0;
    for (bi, plan) in plans.iter().enumerate() {
        for (k, &pos) in plan.positions.iter().enumerate() {
            let pred = affine(&row(&hidden, bi * 5 + 1 + pos), w, b);
            for (c, v) in pred.iter().enumerate() {
                sum += (v - plan.targets[k * PATCH_DIM + c]).powi(2);
                n += 1;
            }
        }
    }
    assert!((loss.item() - sum / n as f64).abs() < 1e-12);

    let empty = image_plan(vec![], 0);
    assert!(mim_loss(&p, &enc, &[&empty, &empty]).unwrap().is_none());
}

#[test]
fn mim_constant_cases() {
    let mut store = heads(12).clone();
    store.insert("head.mim.w", Tensor::new(&[D, PATCH_DIM], vec![0.0; D * PATCH_DIM]).unwrap());
    store.insert("head.mim.b", Tensor::new(&[PATCH_DIM], vec![0.0; PATCH_DIM]).unwrap());
    let g = Graph::new();
    let p = store.bind(&g, false);
    let enc = encoding(g.constant(random_tensor(&mut rng(1), &[3, D])).unwrap(), 1, 3);
    let plan = ImageMaskPlan {
        positions: vec![1],
        targets: vec![0.5; PATCH_DIM],
        strategy: MaskStrategy::Region,
        degenerate: false,
    };
    let (loss, _) = mim_loss(&p, &enc, &[&plan]).unwrap().unwrap();
    assert!((loss.item() - 0.25).abs() < 1e-15);
    let exact = ImageMaskPlan {
        targets: vec![0.0; PATCH_DIM],
        ..plan
    };
    assert_eq!(mim_loss(&p, &enc, &[&exact]).unwrap().unwrap().0.item(), 0.0);
}

#[test]
fn mlm_is_mean_of_per_position_cross_entropies() {
    let store = heads(13);
    let hidden = random_tensor(&mut rng(14), &[6, D]);
    let plan = text_plan(vec![1, 4], vec![7, 5]);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let enc = encoding(g.constant(hidden.clone()).unwrap(), 1, 6);
    let (loss, count) = mlm_loss(&p, &enc, &[&plan]).unwrap().unwrap();
    assert_eq!(count, 2);
    let (w, b) = (store.get("head.mlm.w").unwrap(), store.get("head.mlm.b").unwrap());
    let a = cross_entropy(&affine(&row(&hidden, 1), w, b), 7);
    let c = cross_entropy(&affine(&row(&hidden, 4), w, b), 5);
    assert!((loss.item() - (a + c) / 2.0).abs() < 1e-12);
}

#[test]
fn mlm_uniform_logits_give_log_vocab() {
    let mut store = ParamStore::new();
    store.insert("head.mlm.w", Tensor::new(&[D, 50], vec![0.0; D * 50]).unwrap());
    store.insert("head.mlm.b", Tensor::new(&[50], vec![0.0; 50]).unwrap());
    let g = Graph::new();
    let p = store.bind(&g, false);
    let enc = encoding(g.constant(random_tensor(&mut rng(1), &[4, D])).unwrap(), 1, 4);
    let (loss, _) = mlm_loss(&p, &enc, &[&text_plan(vec![2], vec![17])]).unwrap().unwrap();
    assert!((loss.item() - 50f64.ln()).abs() < 1e-12);
}

#[test]
fn mmm_parts_match_scalar_oracles() {
    let store = heads(15);
    let (m, l) = (4, 5);
    let seq = 1 + m + l;
    let hidden = random_tensor(&mut rng(16), &[2 * seq, D]);
    let ip = [image_plan(vec![1], 3), image_plan(vec![0, 2], 4)];
    let tp = [text_plan(vec![2], vec![8]), text_plan(vec![1, 3], vec![4, 9])];
    let g = Graph::new();
    let p = store.bind(&g, false);
    let f = fused(g.constant(hidden.clone()).unwrap(), 2, m, l);
    let (image, text) = mmm_loss(&p, &f, &[&ip[0], &ip[1]], &[&tp[0], &tp[1]]).unwrap();
    let (image, text) = (image.unwrap(), text.unwrap());
    assert_eq!((image.1, text.1), (3, 3));

    let (wi, bi) = (store.get("head.mmm_image.w").unwrap(), store.get("head.mmm_image.b").unwrap());
    let mut sq = 0.0;
    for (j, plan) in ip.iter().enumerate() {
        for (k, &pos) in plan.positions.iter().enumerate() {
            let pred = affine(&row(&hidden, j * seq + 1 + pos), wi, bi);
            sq += pred
                .iter()
                .enumerate()
                .map(|(c, v)| (v - plan.targets[k * PATCH_DIM + c]).powi(2))
                .sum::<f64>();
        }
    }
    assert!((image.0.item() - sq / (3 * PATCH_DIM) as f64).abs() < 1e-12);

    let (wt, bt) = (store.get("head.mmm_text.w").unwrap(), store.get("head.mmm_text.b").unwrap());
    let mut ce = 0.0;
    for (j, plan) in tp.iter().enumerate() {
        for (&pos, &id) in plan.positions.iter().zip(&plan.original_ids) {
            ce += cross_entropy(&affine(&row(&hidden, j * seq + 1 + m + pos), wt, bt), id);
        }
    }
    assert!((text.0.item() - ce / 3.0).abs() < 1e-12);
}

#[test]
fn mmm_absent_parts() {
    let store = heads(17);
    let (m, l) = (3, 4);
    let hidden = random_tensor(&mut rng(18), &[1 + m + l, D]);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let f = fused(g.constant(hidden.clone()).unwrap(), 1, m, l);
    let no_text = text_plan(vec![], vec![]);
    let no_image = image_plan(vec![], 0);
    let some_image = image_plan(vec![1], 5);

    let (image, text) = mmm_loss(&p, &f, &[&no_image], &[&no_text]).unwrap();
    assert!(image.is_none() && text.is_none());

    let (image, text) = mmm_loss(&p, &f, &[&some_image], &[&no_text]).unwrap();
    assert!(text.is_none());
    let image = image.unwrap().0.item();
    // a masked-patch MSE over the fused rows, computed through the unimodal path
    let as_unimodal = encoding(g.constant(hidden).unwrap(), 1, 1 + m + l);
    let mut mim_store = store.clone();
    mim_store.insert("head.mim.w", store.get("head.mmm_image.w").unwrap().clone());
    mim_store.insert("head.mim.b", store.get("head.mmm_image.b").unwrap().clone());
    let q = mim_store.bind(&g, false);
    let unimodal = mim_loss(&q, &as_unimodal, &[&some_image]).unwrap().unwrap().0.item();
    assert!((image - unimodal).abs() < 1e-12);
}

#[test]
fn itm_hand_case_and_constants() {
    let mut store = ParamStore::new();
    // identity-like head: logits are the first two hidden coordinates
    let mut w = vec![0.0; D * 2];
    w[0] = 1.0;
    w[3] = 1.0;
    store.insert("head.itm.w", Tensor::new(&[D, 2], w).unwrap());
    store.insert("head.itm.b", Tensor::new(&[2], vec![0.0; 2]).unwrap());
    let (m, l) = (1, 1);
    let seq = 1 + m + l;
    let cls = [[0.0, 2.0], [1.0, -1.0], [0.5, 0.5], [3.0, 0.0]];
    let mut data = vec![0.0; 4 * seq * D];
    for (j, c) in cls.iter().enumerate() {
        data[j * seq * D] = c[0];
        data[j * seq * D + 1] = c[1];
    }
    let labels = [1, 1, 0, 0];
    let g = Graph::new();
    let p = store.bind(&g, false);
    let f = fused(g.constant(Tensor::new(&[4 * seq, D], data).unwrap()).unwrap(), 4, m, l);
    let loss = itm_loss(&p, &f, &labels).unwrap().item();
    let softplus = |x: f64| (1.0 + x.exp()).ln();
    // per row: ln(1 + e^{other − own})
    let hand = (softplus(-2.0) + softplus(2.0) + softplus(0.0) + softplus(-3.0)) / 4.0;
    assert!((loss - hand).abs() < 1e-12);

    let zero = g.constant(Tensor::new(&[4 * seq, D], vec![0.0; 4 * seq * D]).unwrap()).unwrap();
    let uniform = itm_loss(&p, &fused(zero, 4, m, l), &labels).unwrap().item();
    assert!((uniform - 2f64.ln()).abs() < 1e-12);

    let err = itm_loss(&p, &f, &[1, 1, 1, 1]).unwrap_err();
    assert!(matches!(err, mmet_core::Error::Usage(_)));
}

#[test]
fn pretraining_loss_gradients() {
    let store = heads(20);
    let (m, l) = (3, 4);
    let seq = 1 + m + l;
    let ip = image_plan(vec![0, 2], 6);
    let tp = text_plan(vec![1, 3], vec![4, 9]);

    let mut r = rng(21);
    let mut inputs = vec![random_tensor(&mut r, &[2 * seq, D])];
    inputs.extend(head_inputs(store, "head.mim"));
    let err = gradcheck(&inputs, |g, v| {
        let p = store.bind(g, false);
        bind_head(&p, "head.mim", v[1], v[2])?;
        let enc = encoding(v[0], 2, seq);
        let (loss, _) = mim_loss(&p, &enc, &[&ip, &ip]).map_err(tensor_err)?.expect("masked");
        Ok(loss)
    });
    assert_fd("mim", err);

    let mut inputs = vec![random_tensor(&mut r, &[2 * seq, D])];
    inputs.extend(head_inputs(store, "head.mlm"));
    let err = gradcheck(&inputs, |g, v| {
        let p = store.bind(g, false);
        bind_head(&p, "head.mlm", v[1], v[2])?;
        let enc = encoding(v[0], 2, seq);
        let (loss, _) = mlm_loss(&p, &enc, &[&tp, &tp]).map_err(tensor_err)?.expect("masked");
        Ok(loss)
    });
    assert_fd("mlm", err);

    let mut inputs = vec![random_tensor(&mut r, &[2 * seq, D])];
    inputs.extend(head_inputs(store, "head.mmm_image"));
    inputs.extend(head_inputs(store, "head.mmm_text"));
    let err = gradcheck(&inputs, |g, v| {
        let p = store.bind(g, false);
        bind_head(&p, "head.mmm_image", v[1], v[2])?;
        bind_head(&p, "head.mmm_text", v[3], v[4])?;
        let f = fused(v[0], 2, m, l);
        let (image, text) = mmm_loss(&p, &f, &[&ip, &ip], &[&tp, &tp]).map_err(tensor_err)?;
        image.expect("image part").0.add(text.expect("text part").0)
    });
    assert_fd("mmm", err);

    let mut inputs = vec![random_tensor(&mut r, &[4 * seq, D])];
    inputs.extend(head_inputs(store, "head.itm"));
    let err = gradcheck(&inputs, |g, v| {
        let p = store.bind(g, false);
        bind_head(&p, "head.itm", v[1], v[2])?;
        let f = fused(v[0], 4, m, l);
        itm_loss(&p, &f, &[1, 0, 1, 0]).map_err(tensor_err)
    });
    assert_fd("itm", err);
}

fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn id_loss_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let logits = random_tensor(&mut rng(seed), &[3, 5]);
        let shifted = Tensor::new(&[3, 5], logits.data().iter().map(|v| v + shift).collect()).unwrap();
        let g = Graph::new();
        let a = id_loss(g.constant(logits).unwrap(), &[0, 4, 2]).unwrap().item();
        let b = id_loss(g.constant(shifted).unwrap(), &[0, 4, 2]).unwrap().item();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn triplet_loss_rotation_invariant(seed in 0u64..10_000, margin in 0.0f64..2.0) {
        let labels = pk_labels(3, 2);
        let feats = random_tensor(&mut rng(seed), &[6, D]);
        let q = orthogonal(D, seed + 1);
        let rotated: Vec<f64> = (0..6)
            .flat_map(|i| {
                let x = row(&feats, i);
                q.iter().map(move |qc| x.iter().zip(qc).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        let g = Graph::new();
        let a = triplet_loss(g.constant(feats).unwrap(), &labels, margin, TripletMining::BatchHard, &mut rng(0))
            .unwrap()
            .item();
        let b = triplet_loss(
            g.constant(Tensor::new(&[6, D], rotated).unwrap()).unwrap(),
            &labels,
            margin,
            TripletMining::BatchHard,
            &mut rng(0),
        )
        .unwrap()
        .item();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn pretraining_losses_nonnegative(seed in 0u64..10_000) {
        let store = heads(seed);
        let (m, l) = (3, 4);
        let seq = 1 + m + l;
        let g = Graph::new();
        let p = store.bind(&g, false);
        let f = fused(g.constant(random_tensor(&mut rng(seed + 1), &[2 * seq, D])).unwrap(), 2, m, l);
        let ip = image_plan(vec![1], seed);
        let tp = text_plan(vec![2], vec![(seed % VOCAB as u64) as usize]);
        let (image, text) = mmm_loss(&p, &f, &[&ip, &ip], &[&tp, &tp]).unwrap();
        prop_assert!(image.unwrap().0.item() >= 0.0);
        prop_assert!(text.unwrap().0.item() >= 0.0);
        prop_assert!(mim_loss(&p, &f.encoding, &[&ip, &ip]).unwrap().unwrap().0.item() >= 0.0);
        prop_assert!(mlm_loss(&p, &f.encoding, &[&tp, &tp]).unwrap().unwrap().0.item() >= 0.0);
        prop_assert!(itm_loss(&p, &f, &[0, 1]).unwrap().item() >= 0.0);
    }
}
