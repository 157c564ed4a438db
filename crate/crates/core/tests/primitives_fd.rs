//! Every differentiable primitive checked against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidcap_core::{check_gradient, Graph, Result, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-7;

fn leaf(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces a non-scalar output to a scalar with fixed, uneven weights so
/// every output entry contributes a distinct amount.
fn reduce(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    g.dot_const(v, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())
}

fn check<F>(name: &str, x: Tensor, program: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let err = check_gradient(|g, x| {
        let out = program(g, x)?;
        reduce(g, out)
    }, &x, H)
    .unwrap();
    assert!(err < TOL, "{name}: {err:e}");
}

#[test]
fn matrix_products() {
    let w = leaf(3, 4, 1);
    let x = leaf(4, 1, 2);
    let m = leaf(5, 4, 3);
    check("matvec wrt w", w.clone(), |g, w| {
        let x = g.constant(x.clone());
        g.matvec(w, x)
    });
    check("matvec wrt x", x.clone(), |g, x| {
        let w = g.constant(w.clone());
        g.matvec(w, x)
    });
    check("matvec_t wrt m", m.clone(), |g, m| {
        let y = g.constant(leaf(5, 1, 4));
        g.matvec_t(m, y)
    });
    check("matvec_t wrt x", leaf(5, 1, 4), |g, y| {
        let m = g.constant(m.clone());
        g.matvec_t(m, y)
    });
    check("matmul_nt wrt a", m.clone(), |g, a| {
        let b = g.constant(w.clone());
        g.matmul_nt(a, b)
    });
    check("matmul_nt wrt b", w.clone(), |g, b| {
        let a = g.constant(m.clone());
        g.matmul_nt(a, b)
    });
}

#[test]
fn elementwise() {
    let x = leaf(4, 1, 5);
    let other = leaf(4, 1, 6);
    check("add", x.clone(), |g, x| {
        let o = g.constant(other.clone());
        g.add(x, o)
    });
    check("sub", x.clone(), |g, x| {
        let o = g.constant(other.clone());
        g.sub(o, x)
    });
    check("mul", x.clone(), |g, x| {
        let o = g.constant(other.clone());
        g.mul(x, o)
    });
    check("mul self", x.clone(), |g, x| g.mul(x, x));
    check("scale", x.clone(), |g, x| Ok(g.scale(x, -2.5)));
    check("neg", x.clone(), |g, x| Ok(g.neg(x)));
    check("one_minus", x.clone(), |g, x| Ok(g.one_minus(x)));
    check("tanh", x.clone(), |g, x| Ok(g.tanh(x)));
    check("sigmoid", x.clone(), |g, x| Ok(g.sigmoid(x)));
    check("mask", x.clone(), |g, x| g.mask(x, vec![1.0, 0.0, 2.0, 0.5]));
    check("add_n", x.clone(), |g, x| {
        let o = g.constant(other.clone());
        let t = g.tanh(x);
        g.add_n(&[x, o, t])
    });
}

#[test]
fn broadcast_and_scalar_scaling() {
    let m = leaf(3, 4, 7);
    let v = leaf(4, 1, 8);
    check("add_row_broadcast wrt m", m.clone(), |g, m| {
        let v = g.constant(v.clone());
        g.add_row_broadcast(m, v)
    });
    check("add_row_broadcast wrt v", v.clone(), |g, v| {
        let m = g.constant(m.clone());
        g.add_row_broadcast(m, v)
    });
    check("scale_by wrt vector", v.clone(), |g, v| {
        let s = g.constant(Tensor::scalar(0.7));
        g.scale_by(v, s)
    });
    check("scale_by wrt scalar", Tensor::scalar(0.4), |g, s| {
        let v = g.constant(v.clone());
        g.scale_by(v, s)
    });
}

#[test]
fn normalisers() {
    let x = leaf(5, 1, 9);
    check("softmax", x.clone(), |g, x| g.softmax(x));
    check("log_softmax", x.clone(), |g, x| g.log_softmax(x));
    let mut big = x.clone();
    big.scale_in_place(40.0);
    check("log_softmax large logits", big, |g, x| g.log_softmax(x));
}

#[test]
fn structural() {
    let a = leaf(3, 1, 10);
    let b = leaf(2, 1, 11);
    let m = leaf(4, 3, 12);
    check("concat", a.clone(), |g, a| {
        let b = g.constant(b.clone());
        g.concat(&[b, a, a])
    });
    check("stack_rows", a.clone(), |g, a| {
        let t = g.tanh(a);
        g.stack_rows(&[a, t, a])
    });
    check("row", m.clone(), |g, m| g.row(m, 2));
    check("slice", a.clone(), |g, a| g.slice(a, 1, 2));
    check("pick", a.clone(), |g, a| g.pick(a, 2));
    check("sum", m.clone(), |g, m| Ok(g.sum(m)));
}
