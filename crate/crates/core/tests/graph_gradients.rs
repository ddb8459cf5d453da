//! Reverse-mode gradients of every graph op against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stmom::tensor_ad::{lstm_step, Graph, LstmVars, Tensor, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

struct Case {
    shapes: Vec<Vec<usize>>,
    /// Inputs are drawn from this range.
    range: (f64, f64),
}

impl Case {
    fn new(shapes: &[&[usize]]) -> Self {
        Self {
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            range: (-1.5, 1.5),
        }
    }

    fn positive(mut self) -> Self {
        self.range = (0.3, 2.0);
        self
    }
}

/// Scalar `sum_j c_j * f(x)_j` with fixed random `c`, so every output entry
/// contributes to the gradient.
fn scalar<F>(build: &F, inputs: &[Tensor], probe: &mut Option<Vec<f64>>) -> (f64, Graph, Vec<Var>, Var)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let n = g.value(out).numel();
    let c = probe.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    let loss = g.dot_const(out, c.clone()).unwrap();
    (g.value(loss).data[0], g, vars, loss)
}

fn check<F>(name: &str, case: Case, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let mut inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(case.range.0..case.range.1)).collect()).unwrap()
        })
        .collect();
    let mut probe = None;
    let (_, g, vars, loss) = scalar(&build, &inputs, &mut probe);
    let grads = g.backward(loss).unwrap();
    for (a, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[a].numel()]);
        for k in 0..inputs[a].numel() {
            let orig = inputs[a].data[k];
            inputs[a].data[k] = orig + H;
            let up = scalar(&build, &inputs, &mut probe).0;
            inputs[a].data[k] = orig - H;
            let down = scalar(&build, &inputs, &mut probe).0;
            inputs[a].data[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1.0);
            assert!(
                err < TOL,
                "{name}: input {a} entry {k}: analytic {} vs numeric {numeric}",
                analytic[k]
            );
        }
    }
}

#[test]
fn matmul_and_bias() {
    check("matmul", Case::new(&[&[3, 4], &[4, 2]]), |g, v| g.matmul(v[0], v[1]).unwrap());
    check("matmul_3d", Case::new(&[&[2, 3, 4], &[4, 2]]), |g, v| g.matmul(v[0], v[1]).unwrap());
    check("add_bias", Case::new(&[&[3, 4], &[4]]), |g, v| g.add_bias(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_binary() {
    let shapes: &[&[usize]] = &[&[2, 5], &[2, 5]];
    check("add", Case::new(shapes), |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", Case::new(shapes), |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", Case::new(shapes), |g, v| g.mul(v[0], v[1]).unwrap());
    check("div", Case::new(shapes).positive(), |g, v| g.div(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_unary() {
    let shape: &[&[usize]] = &[&[3, 3]];
    check("scale", Case::new(shape), |g, v| g.scale(v[0], -1.7));
    check("add_scalar", Case::new(shape), |g, v| g.add_scalar(v[0], 0.4));
    check("tanh", Case::new(shape), |g, v| g.tanh(v[0]));
    check("sigmoid", Case::new(shape), |g, v| g.sigmoid(v[0]));
    check("abs", Case::new(shape).positive(), |g, v| {
        let neg = g.scale(v[0], -1.0);
        g.abs(neg)
    });
    check("square", Case::new(shape), |g, v| g.square(v[0]));
    check("sqrt", Case::new(shape).positive(), |g, v| g.sqrt(v[0]));
    check("mul_const", Case::new(shape), |g, v| {
        g.mul_const(v[0], (0..9).map(|i| i as f64 - 4.0).collect()).unwrap()
    });
}

#[test]
fn reductions_and_reshapes() {
    check("sum", Case::new(&[&[2, 3]]), |g, v| g.sum(v[0]));
    check("mean_rows", Case::new(&[&[4, 3]]), |g, v| g.mean_rows(v[0]));
    check("reshape", Case::new(&[&[2, 6]]), |g, v| {
        let r = g.reshape(v[0], vec![3, 4]).unwrap();
        g.square(r)
    });
    check("slice_last", Case::new(&[&[2, 7]]), |g, v| g.slice_last(v[0], 2, 3).unwrap());
    check("lag_diff", Case::new(&[&[2, 5, 3]]), |g, v| g.lag_diff(v[0]).unwrap());
}

#[test]
fn sequence_ops() {
    check("conv", Case::new(&[&[2, 6, 3], &[3, 3, 2], &[2]]), |g, v| {
        g.causal_conv1d(v[0], v[1], v[2]).unwrap()
    });
    check("pool", Case::new(&[&[2, 7, 3]]), |g, v| g.avg_pool1d(v[0], 3).unwrap());
    check("select_step", Case::new(&[&[2, 4, 3]]), |g, v| g.select_step(v[0], 2).unwrap());
    check("stack_steps", Case::new(&[&[2, 3], &[2, 3], &[2, 3]]), |g, v| {
        g.stack_steps(&[v[0], v[1], v[2]]).unwrap()
    });
}

#[test]
fn lstm_two_steps() {
    let (input, hidden) = (3, 2);
    check(
        "lstm",
        Case::new(&[&[2, input], &[2, input], &[input, 4 * hidden], &[hidden, 4 * hidden], &[4 * hidden]]),
        |g, v| {
            let p = LstmVars {
                w: v[2],
                v: v[3],
                b: v[4],
                hidden,
            };
            let s1 = lstm_step(g, v[0], None, &p).unwrap();
            let (h2, c2) = lstm_step(g, v[1], Some(s1), &p).unwrap();
            g.add(h2, c2).unwrap()
        },
    );
}
