//! Every tape primitive's backward pass against central differences.

mod common;

use esocialnav::diffcore::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn rand_tensor(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Contracts the primitive's output with fixed random weights, so the
/// upstream gradient is not all ones, and compares the tape gradient of
/// every input coordinate with a central difference.
fn check(seed: u64, inputs: Vec<Tensor>, build: &Build) -> Result<(), TestCaseError> {
    let mut r = common::rng(seed ^ 0x5eed);
    let forward = |xs: &[Tensor], weights: Option<&Tensor>| -> (Tape, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(&format!("x{i}"), t.clone(), true).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        let Some(w) = weights else { return (tape, out) };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, loss)
    };
    let (probe, out) = forward(&inputs, None);
    let weights = rand_tensor(&mut r, probe.value(out).shape());
    let (tape, loss) = forward(&inputs, Some(&weights));
    let grads = tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut work = inputs.clone();
    for (k, x) in inputs.iter().enumerate() {
        let g = &grads[&format!("x{k}")];
        prop_assert_eq!(g.shape(), x.shape());
        for i in 0..x.len() {
            let orig = x.data()[i];
            work[k].data_mut()[i] = orig + h;
            let (tp, lp) = forward(&work, Some(&weights));
            let plus = tp.value(lp).item();
            work[k].data_mut()[i] = orig - h;
            let (tm, lm) = forward(&work, Some(&weights));
            let minus = tm.value(lm).item();
            work[k].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = common::rel_err(g.data()[i], fd, 1e-3);
            prop_assert!(err < 1e-5, "input {} coord {}: analytic {} vs fd {}", k, i, g.data()[i], fd);
        }
    }
    Ok(())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_vjp((m, k, n, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, k]), rand_tensor(&mut r, &[k, n])];
        check(s, xs, &|t, v| t.matmul(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn matmul_nt_vjp((m, k, n, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, k]), rand_tensor(&mut r, &[n, k])];
        check(s, xs, &|t, v| t.matmul_nt(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn add_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, n]), rand_tensor(&mut r, &[m, n])];
        check(s, xs, &|t, v| t.add(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn add_row_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, n]), rand_tensor(&mut r, &[n])];
        check(s, xs, &|t, v| t.add_row(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn mul_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, n]), rand_tensor(&mut r, &[m, n])];
        check(s, xs, &|t, v| t.mul(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn scale_vjp((m, n, _, s) in dims(), c in -3.0f64..3.0) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &move |t, v| t.scale(v[0], c).unwrap())?;
    }

    #[test]
    fn concat_rows_vjp((a, b, n, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[a, n]), rand_tensor(&mut r, &[b, n])];
        check(s, xs, &|t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap())?;
    }

    #[test]
    fn concat_cols_vjp((m, a, b, s) in dims()) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, a]), rand_tensor(&mut r, &[m, b])];
        check(s, xs, &|t, v| t.concat_cols(&[v[1], v[0]]).unwrap())?;
    }

    #[test]
    fn slice_rows_vjp((m, n, _, s) in dims(), start in 0usize..4) {
        let mut r = common::rng(s);
        let rows = m + start;
        check(s, vec![rand_tensor(&mut r, &[rows, n])], &move |t, v| t.slice_rows(v[0], start, m).unwrap())?;
    }

    #[test]
    fn slice_cols_vjp((m, n, _, s) in dims(), start in 0usize..4) {
        let mut r = common::rng(s);
        let cols = n + start;
        check(s, vec![rand_tensor(&mut r, &[m, cols])], &move |t, v| t.slice_cols(v[0], start, n).unwrap())?;
    }

    #[test]
    fn softmax_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.softmax(v[0]).unwrap())?;
    }

    #[test]
    fn causal_softmax_vjp((n, _, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[n, n])], &|t, v| t.causal_softmax(v[0]).unwrap())?;
    }

    #[test]
    fn log_softmax_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.log_softmax(v[0]).unwrap())?;
    }

    #[test]
    fn layer_norm_vjp((m, n, _, s) in (1usize..5, 2usize..6, 0usize..1, any::<u64>())) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[m, n]), rand_tensor(&mut r, &[n]), rand_tensor(&mut r, &[n])];
        check(s, xs, &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())?;
    }

    #[test]
    fn gelu_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.gelu(v[0]).unwrap())?;
    }

    #[test]
    fn embedding_vjp((vocab, d, len, s) in dims()) {
        let mut r = common::rng(s);
        let ids: Vec<usize> = (0..len + 1).map(|_| r.random_range(0..vocab)).collect();
        check(s, vec![rand_tensor(&mut r, &[vocab, d])], &move |t, v| t.embedding(v[0], &ids).unwrap())?;
    }

    #[test]
    fn gather_vjp((m, n, k, s) in dims()) {
        let mut r = common::rng(s);
        let coords: Vec<(usize, usize)> = (0..k + 1).map(|_| (r.random_range(0..m), r.random_range(0..n))).collect();
        check(s, vec![rand_tensor(&mut r, &[m, n])], &move |t, v| t.gather(v[0], &coords).unwrap())?;
    }

    #[test]
    fn sum_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.sum(v[0]).unwrap())?;
    }

    #[test]
    fn mean_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.mean(v[0]).unwrap())?;
    }

    #[test]
    fn sigmoid_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.sigmoid(v[0]).unwrap())?;
    }

    #[test]
    fn log_sigmoid_vjp((m, n, _, s) in dims()) {
        let mut r = common::rng(s);
        check(s, vec![rand_tensor(&mut r, &[m, n])], &|t, v| t.log_sigmoid(v[0]).unwrap())?;
    }

    #[test]
    fn composed_attention_vjp((n, d, _, s) in (1usize..5, 1usize..5, 0usize..1, any::<u64>())) {
        let mut r = common::rng(s);
        let xs = vec![rand_tensor(&mut r, &[n, d]), rand_tensor(&mut r, &[n, d]), rand_tensor(&mut r, &[n, d])];
        check(s, xs, &|t, v| {
            let sc = t.matmul_nt(v[0], v[1]).unwrap();
            let sc = t.scale(sc, 0.5).unwrap();
            let p = t.causal_softmax(sc).unwrap();
            t.matmul(p, v[2]).unwrap()
        })?;
    }
}
