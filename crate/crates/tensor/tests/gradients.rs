//! Finite-difference checks for every differentiable primitive, 20 seeds each.

use imp_tensor::gradcheck::check_gradients;
use imp_tensor::{ParamTree64, Result, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.5..1.5)).unwrap()
}

/// Contracts `out` against fixed random weights so no gradient cancels by symmetry.
fn weighted_sum(tape: &mut Tape64, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = tape.constant(randn(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn run<F>(name: &str, build: impl Fn(&mut ChaCha8Rng) -> ParamTree64, f: F)
where
    F: Fn(&mut Tape64, &ParamTree64, u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build(&mut rng);
        let report = check_gradients(&params, EPS, |tape, p| f(tape, p, seed)).unwrap();
        let worst = report.worst().unwrap();
        assert!(
            worst.rel_error < TOL,
            "{name} seed {seed}: {} rel error {:.3e}",
            worst.path,
            worst.rel_error
        );
    }
}

fn tree(entries: Vec<(&str, Tensor64)>) -> ParamTree64 {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[test]
fn matmul_gradients() {
    run(
        "matmul",
        |rng| tree(vec![("a", randn(rng, &[4, 5])), ("b", randn(rng, &[5, 3]))]),
        |tape, p, seed| {
            let a = tape.bind(p, "a")?;
            let b = tape.bind(p, "b")?;
            let c = tape.matmul(a, b)?;
            weighted_sum(tape, c, seed)
        },
    );
}

#[test]
fn batched_matmul_gradients() {
    run(
        "batched matmul",
        |rng| {
            tree(vec![
                ("a", randn(rng, &[2, 3, 4])),
                ("b", randn(rng, &[2, 4, 2])),
                ("s", randn(rng, &[4, 3])),
            ])
        },
        |tape, p, seed| {
            let a = tape.bind(p, "a")?;
            let b = tape.bind(p, "b")?;
            let s = tape.bind(p, "s")?;
            let c = tape.matmul(a, b)?;
            let shared = tape.matmul(a, s)?;
            let l1 = weighted_sum(tape, c, seed)?;
            let l2 = weighted_sum(tape, shared, seed + 1)?;
            tape.add(l1, l2)
        },
    );
}

#[test]
fn elementwise_gradients() {
    run(
        "elementwise",
        |rng| {
            let pos = Tensor64::from_fn(&[2, 3], |_| rng.random_range(0.5..2.0)).unwrap();
            tree(vec![("a", randn(rng, &[2, 3])), ("b", randn(rng, &[3])), ("p", pos)])
        },
        |tape, p, seed| {
            let a = tape.bind(p, "a")?;
            let b = tape.bind(p, "b")?;
            let q = tape.bind(p, "p")?;
            let s = tape.add(a, b)?;
            let d = tape.sub(s, b)?;
            let m = tape.mul(d, b)?;
            let v = tape.div(m, q)?;
            let e = tape.exp(v)?;
            let l = tape.log(q)?;
            let sc = tape.scale(l, -0.7)?;
            let sp = tape.softplus(a)?;
            let t1 = tape.add(e, sc)?;
            let t2 = tape.add(t1, sp)?;
            weighted_sum(tape, t2, seed)
        },
    );
}

#[test]
fn scalar_broadcast_gradients() {
    run(
        "scalar broadcast",
        |rng| tree(vec![("a", randn(rng, &[3, 2])), ("t", randn(rng, &[1]))]),
        |tape, p, seed| {
            let a = tape.bind(p, "a")?;
            let t = tape.bind(p, "t")?;
            let et = tape.exp(t)?;
            let m = tape.mul(a, et)?;
            let d = tape.div(m, et)?;
            let s = tape.add(d, m)?;
            weighted_sum(tape, s, seed)
        },
    );
}

#[test]
fn softmax_gradients() {
    run(
        "softmax",
        |rng| tree(vec![("x", randn(rng, &[3, 5]))]),
        |tape, p, seed| {
            let x = tape.bind(p, "x")?;
            let s1 = tape.softmax(x, 1)?;
            let s0 = tape.softmax(x, 0)?;
            let ls = tape.log_softmax(x, 1)?;
            let a = tape.add(s1, s0)?;
            let b = tape.add(a, ls)?;
            weighted_sum(tape, b, seed)
        },
    );
}

#[test]
fn layer_norm_gradients() {
    run(
        "layer_norm",
        |rng| {
            tree(vec![
                ("x", randn(rng, &[3, 4, 5])),
                ("g", randn(rng, &[4])),
                ("b", randn(rng, &[4])),
                ("g2", randn(rng, &[5])),
                ("b2", randn(rng, &[5])),
            ])
        },
        |tape, p, seed| {
            let x = tape.bind(p, "x")?;
            let g = tape.bind(p, "g")?;
            let b = tape.bind(p, "b")?;
            let g2 = tape.bind(p, "g2")?;
            let b2 = tape.bind(p, "b2")?;
            let mid = tape.layer_norm(x, g, b, 1)?;
            let last = tape.layer_norm(x, g2, b2, 2)?;
            let s = tape.add(mid, last)?;
            weighted_sum(tape, s, seed)
        },
    );
}

#[test]
fn gelu_gradients() {
    let points = [-2.0, -0.5, 0.5, 2.0];
    let params = tree(vec![("x", Tensor64::from_f64(&[4], &points).unwrap())]);
    let report = check_gradients(&params, EPS, |tape, p| {
        let x = tape.bind(p, "x")?;
        let y = tape.gelu(x)?;
        tape.sum(y)
    })
    .unwrap();
    assert!(report.max_rel_error() < TOL);
    run(
        "gelu",
        |rng| tree(vec![("x", randn(rng, &[6]))]),
        |tape, p, seed| {
            let x = tape.bind(p, "x")?;
            let y = tape.gelu(x)?;
            weighted_sum(tape, y, seed)
        },
    );
}

#[test]
fn mean_pool_gradients() {
    // d/dx_i of mean is 1/n for every token
    let params = tree(vec![("x", Tensor64::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap())]);
    let mut tape = Tape64::new();
    let x = tape.bind(&params, "x").unwrap();
    let m = tape.mean_pool(x, 0).unwrap();
    let l = tape.sum(m).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[0.25; 4]);
    run(
        "mean_pool",
        |rng| tree(vec![("x", randn(rng, &[2, 5, 3]))]),
        |tape, p, seed| {
            let x = tape.bind(p, "x")?;
            let m = tape.mean_pool(x, 1)?;
            weighted_sum(tape, m, seed)
        },
    );
}

#[test]
fn index_op_gradients() {
    run(
        "gather/scatter/row_scale/elements",
        |rng| tree(vec![("x", randn(rng, &[5, 3])), ("w", randn(rng, &[4]))]),
        |tape, p, seed| {
            let x = tape.bind(p, "x")?;
            let w = tape.bind(p, "w")?;
            let idx = [4, 1, 1, 0];
            let g = tape.gather_rows(x, &idx)?;
            let r = tape.row_scale(g, w)?;
            let s = tape.scatter_add_rows(r, &[2, 2, 0, 3], 5)?;
            let e = tape.gather_elements(x, &[0, 7, 7, 14])?;
            let l1 = weighted_sum(tape, s, seed)?;
            let l2 = weighted_sum(tape, e, seed + 3)?;
            tape.add(l1, l2)
        },
    );
}

#[test]
fn shape_op_gradients() {
    run(
        "reshape/permute/l2",
        |rng| tree(vec![("x", randn(rng, &[2, 3, 4]))]),
        |tape, p, seed| {
            let x = tape.bind(p, "x")?;
            let t = tape.permute(x, &[2, 0, 1])?;
            let r = tape.reshape(t, &[4, 6])?;
            let tr = tape.transpose(r)?;
            let n = tape.l2_normalize(tr)?;
            weighted_sum(tape, n, seed)
        },
    );
}

#[test]
fn composite_two_layer_network() {
    run(
        "two-layer network",
        |rng| {
            tree(vec![
                ("x", randn(rng, &[6, 4])),
                ("w1", randn(rng, &[4, 8])),
                ("b1", randn(rng, &[8])),
                ("w2", randn(rng, &[8, 3])),
                ("b2", randn(rng, &[3])),
            ])
        },
        |tape, p, _| {
            let x = tape.bind(p, "x")?;
            let w1 = tape.bind(p, "w1")?;
            let b1 = tape.bind(p, "b1")?;
            let w2 = tape.bind(p, "w2")?;
            let b2 = tape.bind(p, "b2")?;
            let h = tape.matmul(x, w1)?;
            let h = tape.add(h, b1)?;
            let h = tape.gelu(h)?;
            let o = tape.matmul(h, w2)?;
            let o = tape.add(o, b2)?;
            let ls = tape.log_softmax(o, 1)?;
            let picked = tape.gather_elements(ls, &[0, 4, 8, 9, 13, 17])?;
            let m = tape.mean(picked)?;
            tape.scale(m, -1.0)
        },
    );
}
