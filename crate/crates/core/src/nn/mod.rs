//! Minimal reverse-mode differentiation and optimization engine.
//!
//! Everything trains in f64; checkpoints store f32. The engine is a dynamic
//! tape: model code runs ordinary Rust, each op records its forward value,
//! and `Tape::backward` produces per-parameter gradients.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_params, save_params, validate_params};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{glorot_uniform, Grads, Parameter, Params};
pub use tape::{Tape, Value};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::rng::stream;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// FD-check a single-op closure over randomized inputs.
    fn check_op<F>(name: &str, shapes: &[&[usize]], seed: u64, tol: f64, f: F)
    where
        F: Fn(&mut Tape, &[Value]) -> Result<Value>,
    {
        let mut rng = stream(seed, name);
        let mut params = Params::new();
        for (i, shape) in shapes.iter().enumerate() {
            params.add(format!("x{i}"), random_tensor(shape, &mut rng)).unwrap();
        }
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("x{i}")).collect();
        let loss_fn = |p: &Params, want: bool| -> Result<(f64, Option<Grads>)> {
            let mut tape = Tape::new();
            let vals: Vec<Value> = names
                .iter()
                .map(|n| tape.param(p, n))
                .collect::<Result<_>>()?;
            let out = f(&mut tape, &vals)?;
            // Reduce to a scalar through a fixed random weighting so every
            // output entry participates.
            let mut wrng = stream(seed ^ 0xabcd, name);
            let w = random_tensor(&tape.value(out).shape.clone(), &mut wrng);
            let wv = tape.constant(w);
            let prod = tape.mul(out, wv)?;
            let loss = tape.sum(prod);
            let g = if want { Some(tape.backward(loss, p.len())?) } else { None };
            Ok((tape.value(loss).item(), g))
        };
        let mut grng = stream(seed ^ 0x77, name);
        let report = grad_check(loss_fn, &mut params, 1e-5, tol, 60, &mut grng).unwrap();
        assert!(
            report.pass(),
            "{name}: max rel err {} at {:?} over {} entries",
            report.max_rel_err,
            report.worst,
            report.n_checked
        );
    }

    #[test]
    fn grad_matmul() {
        check_op("matmul", &[&[3, 4], &[4, 2]], 1, 1e-6, |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn grad_matmul_shared_operand() {
        // x^T x: the same node feeds both sides, gradients must accumulate.
        check_op("matmul-shared", &[&[3, 3]], 2, 1e-5, |t, v| {
            let xt = t.transpose(v[0])?;
            t.matmul(xt, v[0])
        });
    }

    #[test]
    fn grad_add_sub_mul() {
        check_op("add", &[&[2, 5], &[2, 5]], 3, 1e-6, |t, v| t.add(v[0], v[1]));
        check_op("sub", &[&[2, 5], &[2, 5]], 4, 1e-6, |t, v| t.sub(v[0], v[1]));
        check_op("mul", &[&[2, 5], &[2, 5]], 5, 1e-5, |t, v| t.mul(v[0], v[1]));
    }

    #[test]
    fn grad_bias_scale_square() {
        check_op("bias", &[&[3, 4], &[4]], 6, 1e-6, |t, v| t.add_row_bias(v[0], v[1]));
        check_op("scale", &[&[3, 3]], 7, 1e-6, |t, v| Ok(t.scale(v[0], -1.7)));
        check_op("square", &[&[3, 3]], 8, 1e-5, |t, v| Ok(t.square(v[0])));
    }

    #[test]
    fn grad_reductions() {
        check_op("sum", &[&[4, 3]], 9, 1e-6, |t, v| Ok(t.sum(v[0])));
        check_op("mean", &[&[4, 3]], 10, 1e-6, |t, v| Ok(t.mean(v[0])));
        check_op("l2norm", &[&[1, 6]], 11, 1e-5, |t, v| Ok(t.l2_norm(v[0])));
    }

    #[test]
    fn grad_activations() {
        check_op("elu", &[&[4, 4]], 12, 1e-5, |t, v| Ok(t.elu(v[0])));
        check_op("leaky", &[&[4, 4]], 13, 1e-5, |t, v| Ok(t.leaky_relu(v[0], 0.2)));
        check_op("softmax", &[&[3, 5]], 14, 1e-5, |t, v| t.softmax_rows(v[0]));
    }

    #[test]
    fn grad_ln() {
        // Keep inputs positive by squaring then shifting.
        check_op("ln", &[&[3, 3]], 15, 1e-5, |t, v| {
            let sq = t.square(v[0]);
            let pos = t.add_const(sq, 0.5);
            Ok(t.ln(pos))
        });
    }

    #[test]
    fn grad_structural_ops() {
        check_op("transpose", &[&[3, 4]], 16, 1e-6, |t, v| t.transpose(v[0]));
        check_op("concat0", &[&[2, 3], &[4, 3]], 17, 1e-6, |t, v| t.concat(0, v));
        check_op("concat1", &[&[3, 2], &[3, 5]], 18, 1e-6, |t, v| t.concat(1, v));
        check_op("slice0", &[&[5, 3]], 19, 1e-6, |t, v| t.slice(v[0], 0, 1, 3));
        check_op("slice1", &[&[3, 6]], 20, 1e-6, |t, v| t.slice(v[0], 1, 2, 3));
        check_op("reshape", &[&[4, 3]], 21, 1e-6, |t, v| t.reshape(v[0], &[2, 6]));
        check_op("outer_sum", &[&[4, 1], &[4, 1]], 22, 1e-6, |t, v| t.outer_sum(v[0], v[1]));
        check_op("fill_diag", &[&[4, 4]], 23, 1e-6, |t, v| t.fill_diag(v[0], 0.0));
    }

    #[test]
    fn grad_conv2d() {
        check_op("conv", &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], 24, 1e-5, |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1)
        });
    }

    #[test]
    fn grad_ops_over_random_seeds() {
        // Randomized-shape property run across >= 20 seeds, mixing several
        // ops into one expression.
        for seed in 0..20u64 {
            let mut srng = stream(seed, "shapes");
            let m = srng.gen_range(2..6);
            let k = srng.gen_range(2..6);
            let n = srng.gen_range(2..5);
            check_op("mixed", &[&[m, k], &[k, n], &[n]], 100 + seed, 2e-5, |t, v| {
                let mm = t.matmul(v[0], v[1])?;
                let biased = t.add_row_bias(mm, v[2])?;
                let act = t.elu(biased);
                let sm = t.softmax_rows(act)?;
                Ok(t.mean(sm))
            });
        }
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for v in &tape.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_neg_inf() {
        let mut rng = stream(3, "softmax-prop");
        for _ in 0..50 {
            let cols = rng.gen_range(2..8);
            let mut data: Vec<f64> = (0..cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
            data[0] = f64::NEG_INFINITY;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[1, cols], data));
            let y = tape.softmax_rows(x).unwrap();
            let row = &tape.value(y).data;
            assert_eq!(row[0], 0.0);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn elu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![2.0, 0.0, -1.0]));
        let y = tape.elu(x);
        let out = &tape.value(y).data;
        assert_eq!(out[0], 2.0);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((out[2] + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn shared_subexpression_grads_match_unshared_copy() {
        // loss = sum((x + x) * x) built twice: once sharing the node for x+x,
        // once with x duplicated as two separate parameter leaves of equal
        // value. The gradient w.r.t. x must equal the sum of the copies'.
        let mut rng = stream(9, "shared");
        let x = random_tensor(&[3, 3], &mut rng);

        let mut p_shared = Params::new();
        p_shared.add("x", x.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&p_shared, "x").unwrap();
        let sum2 = tape.add(xv, xv).unwrap();
        let prod = tape.mul(sum2, xv).unwrap();
        let loss = tape.sum(prod);
        let g_shared = tape.backward(loss, 1).unwrap();

        let mut p_dup = Params::new();
        p_dup.add("x1", x.clone()).unwrap();
        p_dup.add("x2", x.clone()).unwrap();
        p_dup.add("x3", x).unwrap();
        let mut tape2 = Tape::new();
        let x1 = tape2.param(&p_dup, "x1").unwrap();
        let x2 = tape2.param(&p_dup, "x2").unwrap();
        let x3 = tape2.param(&p_dup, "x3").unwrap();
        let sum2 = tape2.add(x1, x2).unwrap();
        let prod = tape2.mul(sum2, x3).unwrap();
        let loss2 = tape2.sum(prod);
        let g_dup = tape2.backward(loss2, 3).unwrap();

        let gs = g_shared.get(0).unwrap();
        for i in 0..9 {
            let total = g_dup.get(0).unwrap().data[i]
                + g_dup.get(1).unwrap().data[i]
                + g_dup.get(2).unwrap().data[i];
            assert!((gs.data[i] - total).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut params = Params::new();
        params.add("x", Tensor::from_vec(&[1, 2], vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, "x").unwrap();
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss, 1).unwrap();
        assert_eq!(g.get(0).unwrap().data, vec![2.0, 4.0]);
        let mut rng = stream(1, "quad");
        let loss_fn = |p: &Params, want: bool| {
            let mut t = Tape::new();
            let x = t.param(p, "x")?;
            let sq = t.square(x);
            let l = t.sum(sq);
            let g = if want { Some(t.backward(l, 1)?) } else { None };
            Ok((t.value(l).item(), g))
        };
        let report = grad_check(loss_fn, &mut params, 1e-5, 1e-8, 100, &mut rng).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dense_elu_layer_passes_grad_check() {
        let mut rng = stream(5, "dense");
        let mut params = Params::new();
        params.add("w", glorot_uniform(&[4, 3], 4, 3, &mut rng)).unwrap();
        params.add("b", Tensor::zeros(&[3])).unwrap();
        let input = random_tensor(&[2, 4], &mut rng);
        let loss_fn = move |p: &Params, want: bool| {
            let mut t = Tape::new();
            let x = t.constant(input.clone());
            let w = t.param(p, "w")?;
            let b = t.param(p, "b")?;
            let h = t.matmul(x, w)?;
            let h = t.add_row_bias(h, b)?;
            let a = t.elu(h);
            let sq = t.square(a);
            let l = t.mean(sq);
            let g = if want { Some(t.backward(l, p.len())?) } else { None };
            Ok((t.value(l).item(), g))
        };
        let report = grad_check(loss_fn, &mut params, 1e-5, 1e-4, 100, &mut rng).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_passes_grad_check() {
        let mut rng = stream(6, "xent");
        let mut params = Params::new();
        params.add("logits", random_tensor(&[2, 4], &mut rng)).unwrap();
        // One-hot targets for rows 0 and 1.
        let target = Tensor::from_vec(&[2, 4], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let loss_fn = move |p: &Params, want: bool| {
            let mut t = Tape::new();
            let z = t.param(p, "logits")?;
            let sm = t.softmax_rows(z)?;
            let lg = t.ln(sm);
            let tv = t.constant(target.clone());
            let picked = t.mul(lg, tv)?;
            let s = t.sum(picked);
            let l = t.scale(s, -0.5);
            let g = if want { Some(t.backward(l, 1)?) } else { None };
            Ok((t.value(l).item(), g))
        };
        let report = grad_check(loss_fn, &mut params, 1e-5, 1e-4, 100, &mut rng).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = Params::new();
        params.add("x", Tensor::from_vec(&[2], vec![1.5, -0.5])).unwrap();
        let before = params.get("x").unwrap().clone();
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let mut grads = Grads::empty(1);
        grads.accumulate(0, &Tensor::zeros(&[2]));
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("x").unwrap(), &before);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_steps() {
        let mut params = Params::new();
        params.add("x", Tensor::from_vec(&[1], vec![0.0])).unwrap();
        let cfg = AdamConfig::with_lr(1e-2);
        let mut adam = AdamState::new(&params, cfg);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..200 {
            let mut grads = Grads::empty(1);
            grads.accumulate(0, &Tensor::from_vec(&[1], vec![3.0]));
            adam.step(&mut params, &grads).unwrap();
            let cur = params.get("x").unwrap().data[0];
            last_step = prev - cur;
            prev = cur;
        }
        // With a constant positive gradient the update approaches lr * 1.
        assert!((last_step - 1e-2).abs() < 1e-4, "step {last_step}");
    }

    #[test]
    fn adam_descends_a_quadratic_valley_monotonically() {
        // f(x, y) = (1 - x)^2 + 10 (y - x)^2, minimized from the origin.
        let mut params = Params::new();
        params.add("x", Tensor::from_vec(&[2], vec![0.0, 0.0])).unwrap();
        let mut adam = AdamState::new(&params, AdamConfig::with_lr(1e-2));
        let eval = |p: &Params| -> (f64, Tensor) {
            let v = p.get("x").unwrap();
            let (x, y) = (v.data[0], v.data[1]);
            let f = (1.0 - x).powi(2) + 10.0 * (y - x).powi(2);
            let gx = -2.0 * (1.0 - x) - 20.0 * (y - x);
            let gy = 20.0 * (y - x);
            (f, Tensor::from_vec(&[2], vec![gx, gy]))
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let (f, g) = eval(&params);
            losses.push(f);
            let mut grads = Grads::empty(1);
            grads.accumulate(0, &g);
            adam.step(&mut params, &grads).unwrap();
        }
        let (final_loss, _) = eval(&params);
        losses.push(final_loss);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(final_loss < losses[0] * 0.5);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = Params::new();
        params.add("w", Tensor::from_vec(&[1], vec![1.0])).unwrap();
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let mut grads = Grads::empty(1);
        grads.accumulate(0, &Tensor::from_vec(&[1], vec![f64::NAN]));
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_validates_names_and_shapes() {
        let mut rng = stream(31, "ckpt");
        let mut params = Params::new();
        params.add("enc.w", random_tensor(&[3, 4], &mut rng)).unwrap();
        params.add("enc.b", random_tensor(&[4], &mut rng)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nnck");
        let meta = serde_json::json!({"kind": "test", "epoch": 3});
        save_params(&path, &params, &meta).unwrap();
        let (back, got_meta) = load_params(&path).unwrap();
        assert_eq!(got_meta["kind"], "test");
        assert_eq!(back.len(), 2);
        for p in params.iter() {
            let loaded = back.get(&p.name).unwrap();
            assert_eq!(loaded.shape, p.value.shape);
            for (a, b) in p.value.data.iter().zip(&loaded.data) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        let expected = vec![
            ("enc.w".to_string(), vec![3usize, 4]),
            ("enc.b".to_string(), vec![4usize]),
        ];
        validate_params(&back, &expected).unwrap();
        let wrong = vec![("enc.w".to_string(), vec![4usize, 4]), ("enc.b".to_string(), vec![4usize])];
        assert!(validate_params(&back, &wrong).is_err());
    }

    #[test]
    fn params_reject_duplicate_names() {
        let mut params = Params::new();
        params.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(params.add("w", Tensor::zeros(&[1])).is_err());
    }
}
