//! Central finite differences as an independent oracle for the tape.
//!
//! Each case builds a loss from leaf tensors through a different op
//! composition, then compares every analytic gradient element against
//! (f(x + h) - f(x - h)) / 2h computed by re-running the forward pass.
//! The oracle never touches the backward code path.

use deeptagger::tensor::{Bcast, NodeId, Rng, Tape, Tensor};
use deeptagger::Result;

const H: f64 = 1e-5;

/// Relative agreement with an absolute floor below finite-difference noise.
fn agree(a: f64, b: f64, rel: f64) -> bool {
    let diff = (a - b).abs();
    diff <= rel * a.abs().max(b.abs()) || diff <= 1e-7
}

fn fd_check(
    name: &str,
    inputs: &[Tensor],
    rel: f64,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &ids).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let loss = build(&mut tape, &ids).unwrap();
        tape.value(loss).item().unwrap()
    };

    for (pi, base) in inputs.iter().enumerate() {
        let g = grads.wrt(ids[pi]).unwrap_or_else(|| panic!("{name}: input {pi} unreached"));
        for e in 0..base.len() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[e] += H;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[e] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let got = g.data()[e];
            assert!(
                agree(got, fd, rel),
                "{name}: input {pi} element {e}: tape {got} vs finite difference {fd}"
            );
        }
    }
}

#[test]
fn mlp_with_gelu_and_cross_entropy() {
    let mut rng = Rng::new(101);
    // One-hot targets for 4 rows over 5 classes, fixed inside the builder.
    let mut onehot = vec![0.0; 20];
    for (r, &c) in [1usize, 4, 0, 2].iter().enumerate() {
        onehot[r * 5 + c] = 1.0;
    }
    let inputs = vec![
        Tensor::randn(vec![4, 3], 0.8, &mut rng),
        Tensor::randn(vec![3, 6], 0.5, &mut rng),
        Tensor::randn(vec![6], 0.1, &mut rng),
        Tensor::randn(vec![6, 5], 0.5, &mut rng),
        Tensor::randn(vec![5], 0.1, &mut rng),
    ];
    fd_check("mlp_ce", &inputs, 1e-4, move |tape, ids| {
        let (x, w1, b1, w2, b2) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bcast(h, b1, Bcast::Row)?;
        let h = tape.gelu(h)?;
        let z = tape.matmul(h, w2)?;
        let z = tape.add_bcast(z, b2, Bcast::Row)?;
        let lp = tape.log_softmax(z)?;
        let hot = tape.leaf(Tensor::new(vec![4, 5], onehot.clone())?)?;
        let picked = tape.mul(lp, hot)?;
        let total = tape.sum(picked)?;
        tape.scale(total, -0.25)
    });
}

#[test]
fn layer_norm_with_affine_gain_and_bias() {
    let mut rng = Rng::new(202);
    let inputs = vec![
        Tensor::randn(vec![5, 8], 1.5, &mut rng),
        Tensor::randn(vec![8], 0.3, &mut rng),
        Tensor::randn(vec![8], 0.2, &mut rng),
    ];
    fd_check("layer_norm_affine", &inputs, 1e-4, |tape, ids| {
        let normed = tape.layer_norm(ids[0])?;
        let scaled = tape.mul_bcast(normed, ids[1], Bcast::Row)?;
        let shifted = tape.add_bcast(scaled, ids[2], Bcast::Row)?;
        let act = tape.gelu(shifted)?;
        tape.mean(act)
    });
}

#[test]
fn attention_block_with_padded_keys() {
    let mut rng = Rng::new(303);
    let inputs = vec![
        Tensor::randn(vec![6, 4], 0.7, &mut rng),
        Tensor::randn(vec![4, 4], 0.5, &mut rng),
        Tensor::randn(vec![4, 4], 0.5, &mut rng),
        Tensor::randn(vec![4, 4], 0.5, &mut rng),
    ];
    fd_check("attention", &inputs, 1e-3, |tape, ids| {
        let (x, wq, wk, wv) = (ids[0], ids[1], ids[2], ids[3]);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 0.5)?;
        // Last two positions act as padding: mask them out of every row.
        let mask =
            tape.leaf(Tensor::new(vec![6], vec![0.0, 0.0, 0.0, 0.0, -1e30, -1e30])?)?;
        let scores = tape.add_bcast(scores, mask, Bcast::Row)?;
        let attn = tape.softmax(scores)?;
        let out = tape.matmul(attn, v)?;
        let sq = tape.mul(out, out)?;
        tape.mean(sq)
    });
}

#[test]
fn relu_with_col_and_scalar_broadcasts() {
    // Values kept away from the ReLU kink so central differences are valid.
    let x = Tensor::new(
        vec![3, 4],
        vec![0.9, -0.7, 1.3, -1.1, 0.4, 0.8, -0.6, 1.7, -1.4, 0.5, 1.1, -0.9],
    )
    .unwrap();
    let colv = Tensor::new(vec![3], vec![1.2, -0.4, 0.7]).unwrap();
    let sc = Tensor::scalar(0.3);
    fd_check("relu_broadcasts", &[x, colv, sc], 1e-4, |tape, ids| {
        let r = tape.relu(ids[0])?;
        let scaled = tape.mul_bcast(r, ids[1], Bcast::Col)?;
        let shifted = tape.add_bcast(scaled, ids[2], Bcast::Scalar)?;
        let diff = tape.sub(shifted, ids[0])?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        tape.scale(s, 0.125)
    });
}

#[test]
fn gather_slice_concat_composition() {
    let mut rng = Rng::new(404);
    let table = Tensor::randn(vec![7, 3], 1.0, &mut rng);
    fd_check("gather_slice_concat", &[table], 1e-4, |tape, ids| {
        let g = tape.gather_rows(ids[0], &[1, 1, 4, 6, 0])?;
        let top = tape.slice_rows(g, 0, 2)?;
        let rest = tape.slice_rows(g, 2, 3)?;
        let c = tape.concat_rows(&[rest, top])?;
        let n = tape.layer_norm(c)?;
        let sq = tape.mul(n, n)?;
        tape.mean(sq)
    });
}

#[test]
fn symmetric_kl_graph_against_a_constant_branch() {
    let mut rng = Rng::new(505);
    let zp = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let zq_const = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    fd_check("sym_kl_graph", &[zp], 1e-3, move |tape, ids| {
        let p = tape.softmax(ids[0])?;
        let lp = tape.log_softmax(ids[0])?;
        let zq = tape.leaf(zq_const.clone())?;
        let q = tape.softmax(zq)?;
        let lq = tape.log_softmax(zq)?;
        let dp = tape.sub(p, q)?;
        let dl = tape.sub(lp, lq)?;
        let prod = tape.mul(dp, dl)?;
        let mask = tape.leaf(Tensor::new(vec![3], vec![1.0, 0.0, 1.0])?)?;
        let masked = tape.mul_bcast(prod, mask, Bcast::Col)?;
        let s = tape.sum(masked)?;
        tape.scale(s, 0.25)
    });
}

#[test]
fn random_unary_chains_of_depth_four() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(9000 + seed);
        let x = Tensor::randn(vec![4, 5], 0.9, &mut rng);
        let picks: Vec<usize> = (0..3).map(|_| rng.below(4)).collect();
        fd_check(&format!("chain_{seed}"), &[x], 1e-3, move |tape, ids| {
            let mut cur = ids[0];
            for &p in &picks {
                cur = match p {
                    0 => tape.gelu(cur)?,
                    1 => tape.layer_norm(cur)?,
                    2 => tape.softmax(cur)?,
                    _ => tape.log_softmax(cur)?,
                };
            }
            let sq = tape.mul(cur, cur)?;
            tape.mean(sq)
        });
    }
}

/// Full tagger stack: finite differences over whole parameter tensors.
/// Catches wiring mistakes (a projection reading the wrong weight) that
/// per-op checks cannot see.
#[test]
fn full_model_parameter_gradients() {
    use deeptagger::corpus::{encode_batch, LabelScheme, Quality, QueryExample, Source, Vocabulary};
    use deeptagger::model::{Mode, ModelConfig, ModelParameters};

    let vocab = Vocabulary::build(["acme", "phone", "store", "red"]);
    let scheme = LabelScheme::default_synthetic();
    let config = ModelConfig {
        embed_dim: 6,
        ffn_dim: 10,
        ..ModelConfig::with_dims(vocab.len(), scheme.num_tags())
    };
    let e1 = QueryExample::new(
        vec!["acme".into(), "phone".into()],
        vec![vec!["red".into(), "store".into()]],
        Some(vec!["B-Brand".into(), "B-Product".into()]),
        Quality::Strong,
        Source::Human,
    )
    .unwrap();
    let e2 = QueryExample::new(
        vec!["red".into()],
        vec![],
        Some(vec!["B-Attribute".into()]),
        Quality::Strong,
        Source::Human,
    )
    .unwrap();
    let batch = encode_batch(&[e1, e2], 1, 64, &vocab, &scheme).unwrap();
    let params = ModelParameters::init(config, &mut Rng::new(404)).unwrap();

    let loss_of = |p: &ModelParameters| -> f64 {
        let mut pass = p.begin(&batch).unwrap();
        let x = pass.embed().unwrap();
        let h = pass.encode(x, &mut Mode::Eval).unwrap();
        let z = pass.tag_logits(h).unwrap();
        let loss = pass.supervised_loss(z).unwrap();
        pass.value(loss).item().unwrap()
    };

    let mut pass = params.begin(&batch).unwrap();
    let x = pass.embed().unwrap();
    let h = pass.encode(x, &mut Mode::Eval).unwrap();
    let z = pass.tag_logits(h).unwrap();
    let loss = pass.supervised_loss(z).unwrap();
    let mut grads = pass.backward(loss).unwrap();
    let pgrads = pass.parameter_grads(&mut grads);
    let names = deeptagger::model::tensor_names(params.config());

    for (pi, name) in names.iter().enumerate() {
        if name.starts_with("mlm") {
            continue; // unused by the supervised loss
        }
        let g = pgrads[pi].as_ref().unwrap_or_else(|| panic!("{name} unreached"));
        for e in 0..params.tensors()[pi].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[pi].data_mut()[e] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[pi].data_mut()[e] -= H;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
            let got = g.data()[e];
            assert!(
                agree(got, fd, 1e-3),
                "{name} element {e}: tape {got} vs finite difference {fd}"
            );
        }
    }
}

/// Gradient of the virtual loss with respect to the perturbation, checked
/// against finite differences of the plain (non-graph) evaluation.
#[test]
fn perturbation_gradient_matches_finite_differences() {
    use deeptagger::adversarial::{sym_kl_graph, virtual_loss};
    use deeptagger::corpus::{encode_batch, LabelScheme, Quality, QueryExample, Source, Vocabulary};
    use deeptagger::model::{Mode, ModelConfig, ModelParameters};

    let vocab = Vocabulary::build(["acme", "phone", "red"]);
    let scheme = LabelScheme::default_synthetic();
    let e = QueryExample::new(
        vec!["acme".into(), "phone".into()],
        vec![vec!["red".into()]],
        Some(vec!["B-Brand".into(), "B-Product".into()]),
        Quality::Strong,
        Source::Human,
    )
    .unwrap();
    let batch = encode_batch(&[e], 1, 64, &vocab, &scheme).unwrap();
    let config = ModelConfig {
        embed_dim: 6,
        ffn_dim: 10,
        encoder_layers: 1,
        ..ModelConfig::with_dims(vocab.len(), scheme.num_tags())
    };
    let params = ModelParameters::init(config, &mut Rng::new(808)).unwrap();

    let rows = batch.seq_len();
    let mut rng = Rng::new(809);
    for delta_scale in [0.0, 0.05] {
        let delta = Tensor::randn(vec![rows, 6], delta_scale, &mut rng);

        // Analytic gradient through the divergence graph.
        let mut clean = params.begin(&batch).unwrap();
        let xc = clean.embed().unwrap();
        let hc = clean.encode(xc, &mut Mode::Eval).unwrap();
        let zc = clean.tag_logits(hc).unwrap();
        let pc = clean.tape_mut().softmax(zc).unwrap();
        let lc = clean.tape_mut().log_softmax(zc).unwrap();
        let p0 = clean.value(pc).clone();
        let l0 = clean.value(lc).clone();
        let mask = clean.supervision_mask();

        let mut pass = params.begin(&batch).unwrap();
        let x = pass.embed().unwrap();
        let d = pass.perturbation(delta.clone()).unwrap();
        let xp = pass.add_perturbation(x, d).unwrap();
        let h = pass.encode(xp, &mut Mode::Eval).unwrap();
        let z = pass.tag_logits(h).unwrap();
        let pl = pass.tape_mut().leaf(p0).unwrap();
        let ll = pass.tape_mut().leaf(l0).unwrap();
        let lv = sym_kl_graph(pass.tape_mut(), pl, ll, z, &mask).unwrap();
        let grads = pass.backward(lv).unwrap();
        let g = grads.wrt(d).unwrap();

        // Finite differences of the independent plain evaluation. Padded
        // rows carry no gradient by construction; checking real rows.
        let real = pass.pad_keep().to_vec();
        for e in 0..delta.len() {
            if real[e / 6] == 0.0 {
                assert_eq!(g.data()[e], 0.0);
                continue;
            }
            let mut plus = delta.clone();
            plus.data_mut()[e] += H;
            let mut minus = delta.clone();
            minus.data_mut()[e] -= H;
            let fd = (virtual_loss(&params, &batch, &plus).unwrap()
                - virtual_loss(&params, &batch, &minus).unwrap())
                / (2.0 * H);
            assert!(
                agree(g.data()[e], fd, 1e-3),
                "scale {delta_scale} element {e}: tape {} vs finite difference {fd}",
                g.data()[e]
            );
        }
    }
}

/// Outer parameter gradient of the combined objective, with the found
/// perturbation and the clean branch both held fixed, against finite
/// differences.
#[test]
fn combined_objective_parameter_gradients() {
    use deeptagger::adversarial::{sym_kl, sym_kl_graph};
    use deeptagger::corpus::{encode_batch, LabelScheme, Quality, QueryExample, Source, Vocabulary};
    use deeptagger::model::{tensor_names, Mode, ModelConfig, ModelParameters};

    let vocab = Vocabulary::build(["acme", "phone", "red"]);
    let scheme = LabelScheme::default_synthetic();
    let e = QueryExample::new(
        vec!["acme".into(), "red".into()],
        vec![vec!["phone".into()]],
        Some(vec!["B-Brand".into(), "B-Attribute".into()]),
        Quality::Strong,
        Source::Human,
    )
    .unwrap();
    let batch = encode_batch(&[e], 1, 64, &vocab, &scheme).unwrap();
    let config = ModelConfig {
        embed_dim: 6,
        ffn_dim: 10,
        encoder_layers: 1,
        ..ModelConfig::with_dims(vocab.len(), scheme.num_tags())
    };
    let params = ModelParameters::init(config, &mut Rng::new(818)).unwrap();
    let rows = batch.seq_len();
    let delta = Tensor::randn(vec![rows, 6], 0.1, &mut Rng::new(819));

    // The clean reference is captured once at the base parameters and held
    // fixed, exactly as the training graph treats it.
    let (p0, l0, mask) = {
        let mut pass = params.begin(&batch).unwrap();
        let x = pass.embed().unwrap();
        let h = pass.encode(x, &mut Mode::Eval).unwrap();
        let z = pass.tag_logits(h).unwrap();
        let p = pass.tape_mut().softmax(z).unwrap();
        let l = pass.tape_mut().log_softmax(z).unwrap();
        (pass.value(p).clone(), pass.value(l).clone(), pass.supervision_mask())
    };

    let objective = |theta: &ModelParameters| -> f64 {
        let mut pass = theta.begin(&batch).unwrap();
        let x = pass.embed().unwrap();
        let h = pass.encode(x, &mut Mode::Eval).unwrap();
        let z = pass.tag_logits(h).unwrap();
        let ce_node = pass.supervised_loss(z).unwrap();
        let ce = pass.value(ce_node).item().unwrap();
        let d = pass.perturbation(delta.clone()).unwrap();
        let xp = pass.add_perturbation(x, d).unwrap();
        let hq = pass.encode(xp, &mut Mode::Eval).unwrap();
        let q = pass.classify(hq).unwrap();
        ce + sym_kl(&p0, pass.value(q), &mask).unwrap()
    };

    let mut pass = params.begin(&batch).unwrap();
    let x = pass.embed().unwrap();
    let h = pass.encode(x, &mut Mode::Eval).unwrap();
    let z = pass.tag_logits(h).unwrap();
    let ce = pass.supervised_loss(z).unwrap();
    let d = pass.perturbation(delta.clone()).unwrap();
    let xp = pass.add_perturbation(x, d).unwrap();
    let hq = pass.encode(xp, &mut Mode::Eval).unwrap();
    let zq = pass.tag_logits(hq).unwrap();
    let pl = pass.tape_mut().leaf(p0.clone()).unwrap();
    let ll = pass.tape_mut().leaf(l0.clone()).unwrap();
    let lv = sym_kl_graph(pass.tape_mut(), pl, ll, zq, &mask).unwrap();
    let total = pass.tape_mut().add(ce, lv).unwrap();
    let mut grads = pass.backward(total).unwrap();
    let pgrads = pass.parameter_grads(&mut grads);
    let names = tensor_names(params.config());

    for (pi, name) in names.iter().enumerate() {
        if name.starts_with("mlm") {
            continue;
        }
        let g = pgrads[pi].as_ref().unwrap_or_else(|| panic!("{name} unreached"));
        for el in 0..params.tensors()[pi].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[pi].data_mut()[el] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[pi].data_mut()[el] -= H;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * H);
            assert!(
                agree(g.data()[el], fd, 1e-3),
                "{name} element {el}: tape {} vs finite difference {fd}",
                g.data()[el]
            );
        }
    }
}
