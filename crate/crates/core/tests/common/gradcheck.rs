//! Central finite-difference checks shared by the gradient and acceptance tests.
#![allow(dead_code)]

use qmf_core::diffcore::{Matrix, Tape, Var};
use qmf_core::fusion::{self, WeightPolicy};
use qmf_core::models::{ModelConfig, UnimodalModel};
use qmf_core::training::{self, derangement};
use qmf_core::uncertainty::{self, EstimatorKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TRIALS: usize = 100;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Entries in [-2,2] at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Max relative error over every entry of every input. `build` must return a
/// `1 x 1` var and be a pure function of the inputs.
pub fn check<F>(inputs: &[Matrix], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).shape(), (1, 1));
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Matrix]| {
        let mut t = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
        let l = build(&mut t, &v);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for (k, m) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k], m);
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k] = with_entry(&plus[k], i, j, H);
                minus[k] = with_entry(&minus[k], i, j, -H);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
                worst = worst.max(rel_err(g.get(i, j), fd));
            }
        }
    }
    worst
}

pub fn with_entry(m: &Matrix, i: usize, j: usize, delta: f64) -> Matrix {
    let mut rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    rows[i][j] += delta;
    Matrix::from_rows(&rows).unwrap()
}

/// Scalarizes a matrix var with fixed random projections `r^T X c`.
fn project(tape: &mut Tape, x: Var, r: &Matrix, c: &Matrix) -> Var {
    let rv = tape.constant(r.clone());
    let cv = tape.constant(c.clone());
    let xc = tape.matmul(x, cv).unwrap();
    tape.matmul(rv, xc).unwrap()
}

struct Shape {
    n: usize,
    k: usize,
}

fn run_op<G, F>(name: &str, seed: u64, mut gen: G, build: F) -> (String, f64)
where
    G: FnMut(&mut ChaCha8Rng, &Shape) -> (Vec<Matrix>, (usize, usize)),
    F: Fn(&mut Tape, &[Var], &Shape, &mut ChaCha8Rng) -> Var + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let shape = Shape {
            n: rng.random_range(1..5),
            k: rng.random_range(2..5),
        };
        let (inputs, (or, oc)) = gen(&mut rng, &shape);
        let r = uniform(&mut rng, 1, or, -1.0, 1.0);
        let c = uniform(&mut rng, oc, 1, -1.0, 1.0);
        let op_seed: u64 = rng.random();
        let err = check(&inputs, |t, v| {
            let mut op_rng = ChaCha8Rng::seed_from_u64(op_seed);
            let out = build(t, v, &shape, &mut op_rng);
            project(t, out, &r, &c)
        });
        let _ = trial;
        worst = worst.max(err);
    }
    (name.to_string(), worst)
}

fn square(rng: &mut ChaCha8Rng, s: &Shape) -> (Vec<Matrix>, (usize, usize)) {
    (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n, s.k))
}

fn pair(rng: &mut ChaCha8Rng, s: &Shape) -> (Vec<Matrix>, (usize, usize)) {
    (
        vec![uniform(rng, s.n, s.k, -2.0, 2.0), uniform(rng, s.n, s.k, -2.0, 2.0)],
        (s.n, s.k),
    )
}


/// Logits whose top entry leads the runner-up by at least 0.1.
fn separated_top(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix {
    loop {
        let m = uniform(rng, n, k, -2.0, 2.0);
        let ok = (0..n).all(|r| {
            let mut row = m.row(r).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[0] - row[1] > 0.1
        });
        if ok {
            return m;
        }
    }
}


pub struct Toy {
    pub models: Vec<UnimodalModel>,
    pub xs: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub kappa: Vec<Vec<f64>>,
    pub pairing: Vec<usize>,
    pub policy: WeightPolicy,
    pub estimator: EstimatorKind,
    pub lambda: f64,
}

pub fn toy(trial: usize, rng: &mut ChaCha8Rng) -> Toy {
    let n = rng.random_range(3..7);
    let k = rng.random_range(2..4);
    let dims = [3, 2];
    let models = dims
        .iter()
        .enumerate()
        .map(|(m, &d)| {
            let cfg = if trial % 2 == 0 {
                ModelConfig::linear(trial as u64)
            } else {
                ModelConfig::mlp1(4, trial as u64)
            };
            UnimodalModel::init(&cfg, m, d, k).unwrap()
        })
        .collect();
    let xs = dims.iter().map(|&d| uniform(rng, n, d, -2.0, 2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    let kappa = (0..2).map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
    let pairing = derangement(n, rng);
    let mut policy = WeightPolicy::dynamic(
        vec![-rng.random_range(0.2..1.0), -rng.random_range(0.2..1.0)],
        vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
    );
    policy.normalize = trial % 3 == 1;
    let estimator = EstimatorKind::ALL[trial % 3];
    Toy {
        models,
        xs,
        labels,
        kappa,
        pairing,
        policy,
        estimator,
        lambda: rng.random_range(0.05..1.0),
    }
}

/// The overall objective as a function of the flattened model parameters.
/// `frozen` replaces the fusion weights inside the fused CE with constants.
pub fn objective(toy: &Toy, tape: &mut Tape, params: &[Var], frozen: Option<&[Matrix]>, only_fused: bool) -> Var {
    let mut logits = Vec::new();
    let mut off = 0;
    for (m, model) in toy.models.iter().enumerate() {
        let np = model.params().len();
        let x = tape.constant(toy.xs[m].clone());
        logits.push(model.forward(tape, x, &params[off..off + np]).unwrap());
        off += np;
    }
    let scores: Vec<Var> = logits
        .iter()
        .map(|&z| toy.estimator.score_on_tape(tape, z, 1.0).unwrap())
        .collect();
    let weights = fusion::weights_on_tape(tape, &toy.policy, toy.labels.len(), &scores).unwrap();
    let fused_w: Vec<Var> = match frozen {
        Some(ws) => ws.iter().map(|w| tape.constant(w.clone())).collect(),
        None => weights.clone(),
    };
    let fused = fusion::fuse_on_tape(tape, &fused_w, &logits).unwrap();
    let krefs: Vec<&[f64]> = toy.kappa.iter().map(Vec::as_slice).collect();
    let parts = training::overall_loss(
        tape,
        fused,
        &logits,
        &toy.labels,
        &weights,
        &krefs,
        toy.lambda,
        &toy.pairing,
    )
    .unwrap();
    if only_fused {
        parts.fused_ce
    } else {
        parts.total
    }
}

pub fn all_params(toy: &Toy) -> Vec<Matrix> {
    toy.models.iter().flat_map(|m| m.params().to_vec()).collect()
}

/// Confidence weights are piecewise; skip draws whose top-two logits nearly tie.
pub fn confidence_safe(toy: &Toy) -> bool {
    toy.estimator != EstimatorKind::Confidence
        || toy.models.iter().zip(&toy.xs).all(|(m, x)| {
            let z = m.predict(x).unwrap();
            (0..z.rows()).all(|r| {
                let mut row = z.row(r).to_vec();
                row.sort_by(|a, b| b.total_cmp(a));
                row[0] - row[1] > 1e-3
            })
        })
}

/// Every tape op, `TRIALS` random draws each: `(name, worst relative error)`.
pub fn op_checks() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    out.push(run_op(
        "matmul",
        1,
        |rng, s| {
            let p = rng.random_range(1..4);
            (
                vec![uniform(rng, s.n, s.k, -2.0, 2.0), uniform(rng, s.k, p, -2.0, 2.0)],
                (s.n, p),
            )
        },
        |t, v, _, _| t.matmul(v[0], v[1]).unwrap(),
    ));
    out.push(run_op("add", 2, pair, |t, v, _, _| t.add(v[0], v[1]).unwrap()));
    out.push(run_op("sub", 3, pair, |t, v, _, _| t.sub(v[0], v[1]).unwrap()));
    out.push(run_op("scale", 4, square, |t, v, _, rng| t.scale(v[0], rng.random_range(-3.0..3.0))));
    out.push(run_op("shift", 5, square, |t, v, _, rng| t.shift(v[0], rng.random_range(-3.0..3.0))));
    let kinked = |rng: &mut ChaCha8Rng, s: &Shape| (vec![away_from_zero(rng, s.n, s.k, 1e-3)], (s.n, s.k));
    out.push(run_op("relu", 6, kinked, |t, v, _, _| t.relu(v[0])));
    out.push(run_op("abs", 7, kinked, |t, v, _, _| t.abs(v[0])));
    out.push(run_op("exp", 8, square, |t, v, _, _| t.exp(v[0])));
    out.push(run_op("softplus", 9, square, |t, v, _, _| t.softplus(v[0])));
    out.push(run_op(
        "recip",
        10,
        |rng, s| (vec![away_from_zero(rng, s.n, s.k, 0.5)], (s.n, s.k)),
        |t, v, _, _| t.recip(v[0]).unwrap(),
    ));
    out.push(run_op(
        "sum",
        11,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (1, 1)),
        |t, v, _, _| t.sum(v[0]),
    ));
    out.push(run_op(
        "mean",
        12,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (1, 1)),
        |t, v, _, _| t.mean(v[0]).unwrap(),
    ));
    out.push(run_op(
        "row_sum",
        13,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n, 1)),
        |t, v, _, _| t.row_sum(v[0]),
    ));
    out.push(run_op(
        "add_row",
        14,
        |rng, s| {
            (
                vec![uniform(rng, s.n, s.k, -2.0, 2.0), uniform(rng, 1, s.k, -2.0, 2.0)],
                (s.n, s.k),
            )
        },
        |t, v, _, _| t.add_row(v[0], v[1]).unwrap(),
    ));
    out.push(run_op(
        "mul_col",
        15,
        |rng, s| {
            (
                vec![uniform(rng, s.n, 1, -2.0, 2.0), uniform(rng, s.n, s.k, -2.0, 2.0)],
                (s.n, s.k),
            )
        },
        |t, v, _, _| t.mul_col(v[0], v[1]).unwrap(),
    ));
    out.push(run_op(
        "gather_rows",
        16,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n + 2, s.k)),
        |t, v, s, rng| {
            let idx: Vec<usize> = (0..s.n + 2).map(|_| rng.random_range(0..s.n)).collect();
            t.gather_rows(v[0], &idx).unwrap()
        },
    ));
    out.push(run_op(
        "pick_cols",
        17,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n, 1)),
        |t, v, s, rng| {
            let cols: Vec<usize> = (0..s.n).map(|_| rng.random_range(0..s.k)).collect();
            t.pick_cols(v[0], &cols).unwrap()
        },
    ));
    out.push(run_op(
        "logsumexp_rows",
        18,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n, 1)),
        |t, v, _, rng| t.logsumexp_rows(v[0], rng.random_range(0.5..2.0)).unwrap(),
    ));
    out.push(run_op(
        "softmax_cross_entropy",
        19,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (1, 1)),
        |t, v, s, rng| {
            let labels: Vec<usize> = (0..s.n).map(|_| rng.random_range(0..s.k)).collect();
            t.softmax_cross_entropy(v[0], &labels).unwrap()
        },
    ));
    out.push(run_op(
        "energy_on_tape",
        20,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n, 1)),
        |t, v, _, rng| uncertainty::energy_on_tape(t, v[0], rng.random_range(0.5..2.0)).unwrap(),
    ));
    out.push(run_op(
        "confidence_on_tape",
        21,
        |rng, s| (vec![separated_top(rng, s.n, s.k)], (s.n, 1)),
        |t, v, _, _| uncertainty::confidence_on_tape(t, v[0]).unwrap(),
    ));
    out.push(run_op(
        "dst_on_tape",
        22,
        |rng, s| (vec![uniform(rng, s.n, s.k, -2.0, 2.0)], (s.n, 1)),
        |t, v, _, _| uncertainty::dst_on_tape(t, v[0]).unwrap(),
    ));
    out.push(run_op(
        "fuse_on_tape",
        23,
        |rng, s| {
            (
                vec![
                    uniform(rng, s.n, 1, -1.0, 1.0),
                    uniform(rng, s.n, 1, -1.0, 1.0),
                    uniform(rng, s.n, s.k, -2.0, 2.0),
                    uniform(rng, s.n, s.k, -2.0, 2.0),
                ],
                (s.n, s.k),
            )
        },
        |t, v, _, _| fusion::fuse_on_tape(t, &v[..2], &v[2..]).unwrap(),
    ));
    for normalize in [false, true] {
        out.push(run_op(
            if normalize { "weights_on_tape (normalized)" } else { "weights_on_tape" },
            24 + normalize as u64,
            |rng, s| {
                (
                    vec![uniform(rng, s.n, 1, 0.0, 1.0), uniform(rng, s.n, 1, 0.0, 1.0)],
                    (s.n, 1),
                )
            },
            move |t, v, s, rng| {
                let mut p = WeightPolicy::dynamic(
                    vec![-rng.random_range(0.1..1.0), -rng.random_range(0.1..1.0)],
                    vec![2.0, 2.0],
                );
                p.normalize = normalize;
                let w = fusion::weights_on_tape(t, &p, s.n, v).unwrap();
                t.add(w[0], w[1]).unwrap()
            },
        ));
    }
    out
}

/// The full objective over random toy batches: `(trials, worst relative error)`.
pub fn composite_check(trials: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut done = 0;
    let mut worst: f64 = 0.0;
    let mut trial = 0;
    while done < trials {
        let t = toy(trial, &mut rng);
        trial += 1;
        if !confidence_safe(&t) {
            continue;
        }
        let err = check(&all_params(&t), |tape, v| objective(&t, tape, v, None, false));
        worst = worst.max(err);
        done += 1;
    }
    (done, worst)
}
