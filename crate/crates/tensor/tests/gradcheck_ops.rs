//! Central-difference verification of every differentiable op, composed the
//! way the real networks use them. f64 graphs are held to a much tighter
//! tolerance than f32 graphs.

use promptface_tensor::gradcheck::{gradient_check, GradCheckConfig, TapeFn, TOL_F32, TOL_F64};
use promptface_tensor::tape::{ParamVars, Tape, Var};
use promptface_tensor::tensor::{Tensor, TensorError};
use promptface_tensor::{init, NamedParamSet};

fn cfg64() -> GradCheckConfig {
    GradCheckConfig {
        epsilon: 1e-4,
        tolerance: TOL_F64,
        total_coords: 64,
        seed: 1,
    }
}

// ── dense path: affine, normalize, leaky_relu, log_softmax, mul, sum ──

#[test]
fn classifier_head_gradients() {
    let mut rng = init::rng(10);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("w1", init::kaiming(&mut rng, &[6, 8], 6), true).unwrap();
    p.insert("b1", Tensor::zeros(&[8]), true).unwrap();
    p.insert("w2", init::kaiming(&mut rng, &[8, 3], 8), true).unwrap();
    p.insert("b2", init::randn(&mut rng, &[3], 0.1), true).unwrap();
    let x = init::randn::<f64>(&mut rng, &[4, 6], 1.0);
    // One-hot targets for rows 0..4 -> classes 1, 0, 2, 1.
    let mut mask = vec![0.0; 12];
    for (row, cls) in [1usize, 0, 2, 1].into_iter().enumerate() {
        mask[row * 3 + cls] = 1.0;
    }
    let mask = Tensor::from_vec(&[4, 3], mask).unwrap();

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let h = tape.affine(xv, vars["w1"], vars["b1"])?;
        let h = tape.normalize(h, 1)?;
        let h = tape.leaky_relu(h);
        let logits = tape.affine(h, vars["w2"], vars["b2"])?;
        let logp = tape.log_softmax(logits)?;
        let m = tape.constant(mask.clone());
        let picked = tape.mul(logp, m)?;
        let total = tape.sum_all(picked);
        tape.affine_scalar(total, -0.25, 0.0) // mean NLL over 4 rows
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

// ── conv path: conv3x3, avgpool2x, upsample2x, sigmoid, mean_all ──

#[test]
fn conv_stack_gradients() {
    let mut rng = init::rng(20);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("cw", init::kaiming(&mut rng, &[3, 2, 3, 3], 18), true).unwrap();
    p.insert("cb", init::randn(&mut rng, &[3], 0.1), true).unwrap();
    p.insert("cw2", init::kaiming(&mut rng, &[2, 3, 3, 3], 27), true).unwrap();
    p.insert("cb2", Tensor::zeros(&[2]), true).unwrap();
    let x = init::randn::<f64>(&mut rng, &[2, 2, 4, 4], 1.0);

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let h = tape.conv3x3(xv, vars["cw"], vars["cb"])?;
        let h = tape.leaky_relu(h);
        let h = tape.avgpool2x(h)?;
        let h = tape.upsample2x(h)?;
        let h = tape.conv3x3(h, vars["cw2"], vars["cb2"])?;
        let h = tape.sigmoid(h);
        Ok(tape.mean_all(h))
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

// ── style path: broadcast_n, modulate, reshape ──

#[test]
fn modulated_block_gradients() {
    let mut rng = init::rng(30);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("base", init::randn(&mut rng, &[2, 4, 4], 1.0), true).unwrap();
    p.insert("ws", init::kaiming(&mut rng, &[5, 2], 5), true).unwrap();
    p.insert("bs", Tensor::zeros(&[2]), true).unwrap();
    p.insert("wh", init::kaiming(&mut rng, &[5, 2], 5), true).unwrap();
    p.insert("bh", Tensor::zeros(&[2]), true).unwrap();
    let style = init::randn::<f64>(&mut rng, &[3, 5], 1.0);

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let s = tape.constant(style.clone());
        let scale = tape.affine(s, vars["ws"], vars["bs"])?;
        let shift = tape.affine(s, vars["wh"], vars["bh"])?;
        let x = tape.broadcast_n(vars["base"], 3)?;
        let x = tape.reshape(x, &[3, 2, 4, 4])?;
        let y = tape.modulate(x, scale, shift)?;
        let y = tape.leaky_relu(y);
        Ok(tape.mean_all(y))
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

// ── similarity path: l2 norm, matmul_nt, exp, scale_by, trailing reduce ──

#[test]
fn contrastive_losses_gradients() {
    let mut rng = init::rng(40);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("wa", init::kaiming(&mut rng, &[5, 4], 5), true).unwrap();
    p.insert("ba", Tensor::zeros(&[4]), true).unwrap();
    p.insert("log_scale", Tensor::from_vec(&[1], vec![(1.0f64 / 0.07).ln()]).unwrap(), true)
        .unwrap();
    let x = init::randn::<f64>(&mut rng, &[3, 5], 1.0);
    let anchors = {
        let raw = init::randn::<f64>(&mut rng, &[3, 4], 1.0);
        let mut t = Tape::<f64>::new();
        let v = t.constant(raw);
        let n = t.l2_normalize_rows(v).unwrap();
        t.value(n).clone()
    };
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let eye = Tensor::from_vec(&[3, 3], eye).unwrap();

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let emb = tape.affine(xv, vars["wa"], vars["ba"])?;
        let emb = tape.l2_normalize_rows(emb)?;
        let anch = tape.constant(anchors.clone());
        let logits = tape.matmul_nt(emb, anch)?;
        let scale = tape.exp(vars["log_scale"]);
        let logits = tape.scale_by(logits, scale)?;
        let logp = tape.log_softmax(logits)?;
        let m = tape.constant(eye.clone());
        let picked = tape.mul(logp, m)?;
        let rowsum = tape.sum_trailing(picked, 1)?;
        let nll = tape.mean_all(rowsum);
        let nll = tape.affine_scalar(nll, -1.0, 0.0)?;
        // Add a cosine-distance term through sub/mul/mean_trailing.
        let diff = tape.sub(emb, anch)?;
        let sq = tape.mul(diff, diff)?;
        let per_row = tape.mean_trailing(sq, 1)?;
        let dist = tape.mean_all(per_row);
        tape.add(nll, dist)
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

// ── perceptual-feature path: channel normalization ──

#[test]
fn channel_normalized_feature_distance_gradients() {
    let mut rng = init::rng(45);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("cw", init::kaiming(&mut rng, &[4, 2, 3, 3], 18), true).unwrap();
    p.insert("cb", init::randn(&mut rng, &[4], 0.1), true).unwrap();
    let x = init::randn::<f64>(&mut rng, &[2, 2, 4, 4], 1.0);
    let reference = init::randn::<f64>(&mut rng, &[2, 4, 4, 4], 0.5);

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let feat = tape.conv3x3(xv, vars["cw"], vars["cb"])?;
        let feat = tape.l2_normalize_channels(feat)?;
        let r = tape.constant(reference.clone());
        let diff = tape.sub(feat, r)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean_all(sq))
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

// ── logit losses: softplus ──

#[test]
fn softplus_logit_loss_gradients() {
    let mut rng = init::rng(50);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("w", init::randn(&mut rng, &[4, 1], 0.7), true).unwrap();
    p.insert("b", init::randn(&mut rng, &[1], 0.5), true).unwrap();
    let x = init::randn::<f64>(&mut rng, &[6, 4], 1.0);
    let labels = Tensor::from_vec(&[6, 1], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let logits = tape.affine(xv, vars["w"], vars["b"])?;
        // softplus(z) - z*y is binary cross-entropy up to a constant.
        let sp = tape.softplus(logits);
        let y = tape.constant(labels.clone());
        let zy = tape.mul(logits, y)?;
        let per = tape.sub(sp, zy)?;
        Ok(tape.mean_all(per))
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

// ── cosine similarity helper ──

#[test]
fn cosine_rows_gradients() {
    let mut rng = init::rng(60);
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("w", init::kaiming(&mut rng, &[4, 4], 4), true).unwrap();
    p.insert("b", Tensor::zeros(&[4]), true).unwrap();
    let x = init::randn::<f64>(&mut rng, &[3, 4], 1.0);
    let target = init::randn::<f64>(&mut rng, &[3, 4], 1.0);

    let f = TapeFn(move |tape: &mut Tape<f64>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let t = tape.constant(target.clone());
        let y = tape.affine(xv, vars["w"], vars["b"])?;
        let cos = tape.cosine_rows(y, t)?;
        let one_minus = tape.affine_scalar(cos, -1.0, 1.0)?;
        Ok(tape.mean_all(one_minus))
    });
    let report = gradient_check(&f, &p, &cfg64()).unwrap();
    assert!(report.ok(), "{report}");
}

#[test]
fn cosine_gradient_vanishes_at_alignment() {
    // d/dp [1 - cos(p, q)] at p = q is exactly zero: the direction is
    // already optimal, only the magnitude (which cosine ignores) differs.
    let q = Tensor::from_vec(&[1, 3], vec![0.6, -0.8, 0.2]).unwrap();
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    p.insert("p", q.clone(), true).unwrap();
    let f = TapeFn(
        move |tape: &mut Tape<f64>, vars: &ParamVars| -> Result<Var, TensorError> {
            let qv = tape.constant(q.clone());
            let cos = tape.cosine_rows(vars["p"], qv)?;
            let one_minus = tape.affine_scalar(cos, -1.0, 1.0)?;
            Ok(tape.mean_all(one_minus))
        },
    );
    let mut tape = Tape::<f64>::new();
    let vars = tape.bind(&p, true);
    let root = (f.0)(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();
    for g in grads.get(vars["p"]).unwrap().data() {
        assert!(g.abs() < 1e-12, "gradient at alignment: {g}");
    }
}

// ── f32 end-to-end at the coarser tolerance ──

#[test]
fn f32_network_meets_f32_tolerance() {
    let mut rng = init::rng(70);
    let mut p: NamedParamSet<f32> = NamedParamSet::new();
    p.insert("w1", init::kaiming(&mut rng, &[5, 6], 5), true).unwrap();
    p.insert("b1", Tensor::zeros(&[6]), true).unwrap();
    p.insert("w2", init::kaiming(&mut rng, &[6, 2], 6), true).unwrap();
    p.insert("b2", Tensor::zeros(&[2]), true).unwrap();
    let x = init::randn::<f32>(&mut rng, &[4, 5], 1.0);

    let f = TapeFn(move |tape: &mut Tape<f32>, vars: &ParamVars| {
        let xv = tape.constant(x.clone());
        let h = tape.affine(xv, vars["w1"], vars["b1"])?;
        let h = tape.normalize(h, 1)?;
        let h = tape.leaky_relu(h);
        let y = tape.affine(h, vars["w2"], vars["b2"])?;
        let y = tape.sigmoid(y);
        Ok(tape.mean_all(y))
    });
    let cfg = GradCheckConfig {
        epsilon: 1e-2,
        tolerance: TOL_F32,
        total_coords: 48,
        seed: 2,
    };
    let report = gradient_check(&f, &p, &cfg).unwrap();
    assert!(report.ok(), "{report}");
}

// ── failure reporting ──

#[test]
fn nonfinite_loss_under_perturbation_names_the_parameter() {
    // loss = sqrt(w) just above zero: the minus-side probe crosses into
    // negative territory and the loss goes NaN. The error must say which
    // parameter did it.
    struct Root;
    impl promptface_tensor::DiffFn<f64> for Root {
        fn loss(&self, params: &NamedParamSet<f64>) -> Result<f64, TensorError> {
            Ok(params.tensor("w")?.data()[0].sqrt())
        }
        fn loss_and_grads(
            &self,
            params: &NamedParamSet<f64>,
        ) -> Result<(f64, std::collections::BTreeMap<String, Tensor<f64>>), TensorError> {
            let w = params.tensor("w")?.data()[0];
            let mut grads = std::collections::BTreeMap::new();
            grads.insert("w".to_string(), Tensor::from_vec(&[1], vec![0.5 / w.sqrt()])?);
            Ok((w.sqrt(), grads))
        }
    }
    let mut p: NamedParamSet<f64> = NamedParamSet::new();
    // h = epsilon * max(1,|w|) = 1e-4, so w - h = -5e-5 and sqrt goes NaN.
    p.insert("w", Tensor::from_vec(&[1], vec![5e-5]).unwrap(), true)
        .unwrap();
    let err = gradient_check(&Root, &p, &cfg64()).unwrap_err();
    assert!(err.to_string().contains("`w`"), "unexpected error: {err}");
}
