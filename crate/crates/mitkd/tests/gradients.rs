//! Gradient checking: analytic gradients from the tape vs central finite
//! differences, for every differentiable operation and for a full encoder
//! forward pass with the masked-LM loss.

use mitkd::model::{Batch, BoundParams, EncoderModel, MaskedBatch, ModelConfig};
use mitkd::rng::Rng;
use mitkd::tape::{Tape, Var};
use mitkd::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Check d(loss)/d(inputs) for a scalar-valued graph builder against central
/// finite differences, at every element of every input.
fn check_gradients<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.numel(loss), 1, "builder must produce a scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[0]
    };

    for (ti, input) in inputs.iter().enumerate() {
        if analytic[ti].is_empty() {
            continue;
        }
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[ti][ei];
            assert!(
                rel_err(a, numeric) < REL_TOL,
                "input {ti} elem {ei}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn randn(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn grad_matmul() {
    let mut rng = Rng::new(1);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![4, 2], &mut rng);
    check_gradients(&[a, b], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        t.mean(y)
    });
}

#[test]
fn grad_matmul_nt() {
    let mut rng = Rng::new(2);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![5, 4], &mut rng);
    check_gradients(&[a, b], |t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        t.mean(y)
    });
}

#[test]
fn grad_bmm_both_orients() {
    let mut rng = Rng::new(3);
    let a = randn(vec![2, 3, 4], &mut rng);
    let b = randn(vec![2, 4, 2], &mut rng);
    check_gradients(&[a, b], |t, v| {
        let y = t.bmm(v[0], v[1]).unwrap();
        t.mean(y)
    });
    let a = randn(vec![2, 3, 4], &mut rng);
    let b = randn(vec![2, 5, 4], &mut rng);
    check_gradients(&[a, b], |t, v| {
        let y = t.bmm_nt(v[0], v[1]).unwrap();
        t.mean(y)
    });
}

#[test]
fn grad_transpose_add_scale_bias() {
    let mut rng = Rng::new(4);
    let a = randn(vec![3, 5], &mut rng);
    let b = randn(vec![5, 3], &mut rng);
    let bias = randn(vec![3], &mut rng);
    check_gradients(&[a, b, bias], |t, v| {
        let at = t.transpose(v[0]).unwrap();
        let s = t.add(at, v[1]).unwrap();
        let s = t.scale(s, -1.7);
        let s = t.add_bias(s, v[2]).unwrap();
        t.mean(s)
    });
}

#[test]
fn grad_softmax_rows() {
    let mut rng = Rng::new(5);
    let x = randn(vec![3, 6], &mut rng);
    // Weighted sum downstream so every softmax output matters differently.
    let w = randn(vec![3, 6], &mut rng);
    check_gradients(&[x, w.clone()], |t, v| {
        let y = t.softmax_rows(v[0], None).unwrap();
        let prod = t.matmul_nt(y, v[1]).unwrap();
        t.mean(prod)
    });

    let xm = randn(vec![2, 5], &mut rng);
    let mask = vec![true, true, false, true, true, false, true, true, true, false];
    check_gradients(&[xm, randn(vec![2, 5], &mut rng)], move |t, v| {
        let y = t.softmax_rows(v[0], Some(&mask)).unwrap();
        let prod = t.matmul_nt(y, v[1]).unwrap();
        t.mean(prod)
    });
}

#[test]
fn grad_kl_divergence_wrt_both_sides() {
    // Interior points well away from the clamp and from p = 0.
    let mut rng = Rng::new(6);
    let mk = |rng: &mut Rng| {
        let mut data: Vec<f64> = (0..8).map(|_| 0.2 + 0.6 * rng.uniform()).collect();
        for r in 0..2 {
            let s: f64 = data[r * 4..(r + 1) * 4].iter().sum();
            for v in &mut data[r * 4..(r + 1) * 4] {
                *v /= s;
            }
        }
        Tensor::new(vec![2, 4], data).unwrap()
    };
    let p = mk(&mut rng);
    let q = mk(&mut rng);
    check_gradients(&[p.clone(), q.clone()], |t, v| {
        t.kl_divergence_rows(v[0], v[1], None).unwrap()
    });
    // With a row mask.
    let mask = vec![true, false];
    check_gradients(&[p, q], move |t, v| {
        t.kl_divergence_rows(v[0], v[1], Some(&mask)).unwrap()
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::new(7);
    let x = randn(vec![3, 8], &mut rng);
    let gain = randn(vec![8], &mut rng);
    let bias = randn(vec![8], &mut rng);
    let w = randn(vec![3, 8], &mut rng);
    check_gradients(&[x, gain, bias, w], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        let prod = t.matmul_nt(y, v[3]).unwrap();
        t.mean(prod)
    });
}

#[test]
fn grad_gelu() {
    let mut rng = Rng::new(8);
    let x = randn(vec![2, 7], &mut rng);
    check_gradients(&[x], |t, v| {
        let y = t.gelu(v[0]);
        t.sum(y)
    });
}

#[test]
fn grad_cross_entropy() {
    let mut rng = Rng::new(9);
    let logits = randn(vec![4, 5], &mut rng);
    check_gradients(&[logits], |t, v| t.cross_entropy(v[0], &[0, 3, 2, 4]).unwrap());
}

#[test]
fn grad_embedding_and_gather() {
    let mut rng = Rng::new(10);
    let table = randn(vec![6, 3], &mut rng);
    check_gradients(&[table], |t, v| {
        let rows = t.embedding_lookup(v[0], &[0, 2, 2, 5]).unwrap();
        let picked = t.gather_rows(rows, &[1, 3]).unwrap();
        t.mean(picked)
    });
}

#[test]
fn grad_concat_split_heads() {
    let mut rng = Rng::new(11);
    let a = randn(vec![2, 4], &mut rng);
    let b = randn(vec![3, 4], &mut rng);
    check_gradients(&[a, b], |t, v| {
        let cat = t.concat_rows(&[v[0], v[1]]).unwrap();
        let parts = t.split_rows(cat, &[4, 1]).unwrap();
        let m = t.mean(parts[0]);
        let s = t.sum(parts[1]);
        let combined = t.add(m, s).unwrap();
        t.scale(combined, 0.5)
    });

    let x = randn(vec![6, 4], &mut rng); // B=2, L=3, H=2, dh=2
    let w = randn(vec![4, 6], &mut rng);
    check_gradients(&[x, w], |t, v| {
        let split = t.split_heads(v[0], 2, 3, 2, 2).unwrap();
        let sq = t.bmm_nt(split, split).unwrap(); // [4, 3, 3]
        let merged = t.merge_heads(sq, 2, 3, 2, 3).unwrap(); // [6, 6]
        let prod = t.matmul_nt(merged, v[1]).unwrap();
        t.mean(prod)
    });
}

#[test]
fn grad_dropout_with_fixed_mask() {
    let mut rng = Rng::new(12);
    let x = randn(vec![3, 4], &mut rng);
    let keep: Vec<f64> = (0..12)
        .map(|i| if i % 3 == 0 { 0.0 } else { 1.0 / 0.9 })
        .collect();
    check_gradients(&[x], move |t, v| {
        let y = t.dropout(v[0], keep.clone()).unwrap();
        t.mean(y)
    });
}

#[test]
fn grad_full_encoder_mlm_matches_finite_differences() {
    // Full encoder forward + masked-LM loss; 20 randomly chosen parameters.
    let config = ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        ffn_size: 32,
        max_seq_len: 12,
        vocab_size: 20,
        dropout_rate: 0.0,
    };
    let model = EncoderModel::init(&config, 42).unwrap();

    // Two sequences, one with padding, masked positions in the content span.
    let batch = Batch {
        seq_len: 8,
        ids: vec![1, 4, 5, 6, 7, 8, 9, 2, 1, 10, 11, 12, 2, 0, 0, 0],
        mask: vec![
            true, true, true, true, true, true, true, true, //
            true, true, true, true, true, false, false, false,
        ],
    };
    let masked = MaskedBatch {
        batch,
        target_positions: vec![2, 5, 10],
        target_ids: vec![13, 14, 15],
    };

    let loss_value = |m: &EncoderModel| m.mlm_loss(&masked).unwrap().item();

    // Analytic gradients.
    let mut tape = Tape::new();
    let bound = BoundParams::bind_all(&mut tape, &model.params, true);
    let out = model
        .forward_batch_on(&mut tape, &bound, &masked.batch, false, None)
        .unwrap();
    let loss = model
        .mlm_loss_on(&mut tape, &bound, out.hidden, &masked)
        .unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.collect_grads(&tape);

    // Sample 20 (parameter, element) coordinates across all tensors.
    let coords: Vec<(String, usize)> = {
        let mut all = Vec::new();
        for (name, tensor) in model.params.iter() {
            for ei in 0..tensor.numel() {
                all.push((name.clone(), ei));
            }
        }
        let mut rng = Rng::new(7);
        rng.shuffle(&mut all);
        all.truncate(20);
        all
    };

    for (name, ei) in coords {
        let analytic = grads.get(&name).map_or(0.0, |g| g[ei]);
        let mut plus = model.clone();
        plus.params.get_mut(&name).unwrap().data_mut()[ei] += FD_STEP;
        let mut minus = model.clone();
        minus.params.get_mut(&name).unwrap().data_mut()[ei] -= FD_STEP;
        let numeric = (loss_value(&plus) - loss_value(&minus)) / (2.0 * FD_STEP);
        assert!(
            rel_err(analytic, numeric) < REL_TOL,
            "param {name}[{ei}]: analytic {analytic} vs numeric {numeric}"
        );
    }
}
