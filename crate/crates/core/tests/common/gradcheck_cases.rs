//! Finite-difference gradient checks for every differentiable op, shared by
//! the per-op test file and the acceptance gate. Each op's forward values are
//! compared against an independent f64 reference and its analytic gradients
//! against central finite differences of that reference (epsilon 1e-4); the
//! output is contracted to a scalar through a random projection so every
//! Jacobian entry participates.

use ufe_core::rng::rng_from;
use ufe_core::tensor::{Graph, Tensor, Var};

pub const SEEDS: u64 = 20;
pub const EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
pub const FWD_TOL: f64 = 1e-4;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub lo: f32,
    pub hi: f32,
    /// Keep samples away from relu's kink so FD is well-defined.
    pub avoid_kink: bool,
    pub engine: Box<dyn Fn(&mut Graph, &[Var]) -> Var>,
    pub oracle: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
}

pub fn run_case(case: Case) {
    for seed in 0..SEEDS {
        let mut rng = rng_from(0xFD5EED ^ seed, 7);
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let mut t = Tensor::rand_uniform(s, case.lo, case.hi, &mut rng);
                if case.avoid_kink {
                    for v in t.data_mut() {
                        if v.abs() < 0.05 {
                            *v += if *v >= 0.0 { 0.1 } else { -0.1 };
                        }
                    }
                }
                t
            })
            .collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = (case.engine)(&mut g, &vars);
        let out_shape = g.value(out).shape().to_vec();
        let out_n = g.value(out).numel();

        let f64_inputs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| t.data().iter().map(|&x| x as f64).collect())
            .collect();
        let oracle_out = (case.oracle)(&f64_inputs);
        assert_eq!(oracle_out.len(), out_n, "{}: oracle output arity", case.name);
        for (i, (&e, &o)) in g.value(out).data().iter().zip(&oracle_out).enumerate() {
            assert!(
                (e as f64 - o).abs() < FWD_TOL,
                "{}: seed {seed} forward mismatch at {i}: engine {e} vs oracle {o}",
                case.name
            );
        }

        let r = Tensor::rand_uniform(&[out_n], -1.0, 1.0, &mut rng);
        let rv = g.constant(r.clone().reshaped(out_shape).unwrap());
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();

        let rf: Vec<f64> = r.data().iter().map(|&x| x as f64).collect();
        let project = |xs: &[Vec<f64>]| -> f64 {
            (case.oracle)(xs).iter().zip(&rf).map(|(a, b)| a * b).sum()
        };

        let mut xs = f64_inputs.clone();
        for (ti, tv) in vars.iter().enumerate() {
            let analytic = g
                .grad(*tv)
                .unwrap_or_else(|| panic!("{}: grad missing for input {ti}", case.name))
                .to_vec();
            for ei in 0..xs[ti].len() {
                let orig = xs[ti][ei];
                xs[ti][ei] = orig + EPS;
                let fp = project(&xs);
                xs[ti][ei] = orig - EPS;
                let fm = project(&xs);
                xs[ti][ei] = orig;
                let fd = (fp - fm) / (2.0 * EPS);
                let rel = (analytic[ei] as f64 - fd).abs() / fd.abs().max(1.0);
                assert!(
                    rel < GRAD_TOL,
                    "{}: seed {seed} input {ti} elem {ei}: analytic {} vs fd {fd} (rel {rel:.2e})",
                    case.name,
                    analytic[ei]
                );
            }
        }
    }
}

/// Same as [`run_case`] but for one seed (used where a constant such as a
/// target mask must be resampled outside the closure per seed).
pub fn run_case_once(seed: u64, case: Case) {
    let mut rng = rng_from(0x0E ^ seed, 19);
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| Tensor::rand_uniform(s, case.lo, case.hi, &mut rng))
        .collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.engine)(&mut g, &vars);
    let f64_inputs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&x| x as f64).collect())
        .collect();
    let oracle_out = (case.oracle)(&f64_inputs);
    for (&e, &o) in g.value(out).data().iter().zip(&oracle_out) {
        assert!(
            (e as f64 - o).abs() < FWD_TOL,
            "{}: seed {seed} forward mismatch: {e} vs {o}",
            case.name
        );
    }
    let loss = out;
    g.backward(loss).unwrap();

    let project = |xs: &[Vec<f64>]| -> f64 { (case.oracle)(xs)[0] };
    let mut xs = f64_inputs;
    for (ti, tv) in vars.iter().enumerate() {
        let analytic = g.grad(*tv).expect("grad present").to_vec();
        for ei in 0..xs[ti].len() {
            let orig = xs[ti][ei];
            xs[ti][ei] = orig + EPS;
            let fp = project(&xs);
            xs[ti][ei] = orig - EPS;
            let fm = project(&xs);
            xs[ti][ei] = orig;
            let fd = (fp - fm) / (2.0 * EPS);
            let rel = (analytic[ei] as f64 - fd).abs() / fd.abs().max(1.0);
            assert!(
                rel < GRAD_TOL,
                "{}: seed {seed} input {ti} elem {ei}: analytic {} vs fd {fd} (rel {rel:.2e})",
                case.name,
                analytic[ei]
            );
        }
    }
}

fn rng_bool(rng: &mut rand_chacha::ChaCha8Rng) -> bool {
    use rand::Rng;
    rng.gen_range(0..2) == 1
}

pub const ALL_OPS: &[&str] = &[
    "conv2d s1 p1",
    "conv2d s2 p1",
    "conv2d 1x1",
    "linear",
    "upsample x2",
    "avg_pool2",
    "add",
    "add scalar",
    "mul",
    "mul scalar",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "concat",
    "broadcast",
    "bce",
    "bce masked",
    "dice",
];

/// Runs the 20-seed gradient check for one op by name.
pub fn run_named(name: &str) {
    match name {
        "conv2d s1 p1" => run_case(Case {
            name: "conv2d s1 p1",
            shapes: vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            lo: -1.0,
            hi: 1.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap()),
            oracle: Box::new(|xs| {
                super::conv2d_f64(&xs[0], (2, 5, 5), &xs[1], (3, 3), &xs[2], 1, 1)
            }),
        }),
        "conv2d s2 p1" => run_case(Case {
            name: "conv2d s2 p1",
            shapes: vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            lo: -1.0,
            hi: 1.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap()),
            oracle: Box::new(|xs| {
                super::conv2d_f64(&xs[0], (2, 5, 5), &xs[1], (3, 3), &xs[2], 2, 1)
            }),
        }),
        "conv2d 1x1" => run_case(Case {
            name: "conv2d 1x1",
            shapes: vec![vec![3, 4, 4], vec![2, 3, 1, 1], vec![2]],
            lo: -1.0,
            hi: 1.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0).unwrap()),
            oracle: Box::new(|xs| {
                super::conv2d_f64(&xs[0], (3, 4, 4), &xs[1], (2, 1), &xs[2], 1, 0)
            }),
        }),
        "linear" => run_case(Case {
            name: "linear",
            shapes: vec![vec![7], vec![4, 7], vec![4]],
            lo: -1.0,
            hi: 1.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.linear(v[0], v[1], v[2]).unwrap()),
            oracle: Box::new(|xs| super::linear_f64(&xs[0], &xs[1], &xs[2])),
        }),
        "upsample x2" => run_case(Case {
            name: "upsample x2",
            shapes: vec![vec![2, 3, 4]],
            lo: -1.0,
            hi: 1.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.upsample_bilinear(v[0], 2).unwrap()),
            oracle: Box::new(|xs| super::upsample_bilinear_f64(&xs[0], (2, 3, 4), 2)),
        }),
        "avg_pool2" => run_case(Case {
            name: "avg_pool2",
            shapes: vec![vec![2, 4, 6]],
            lo: -1.0,
            hi: 1.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.avg_pool2(v[0]).unwrap()),
            oracle: Box::new(|xs| super::avg_pool2_f64(&xs[0], (2, 4, 6))),
        }),
        "add" => run_case(Case {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            oracle: Box::new(|xs| xs[0].iter().zip(&xs[1]).map(|(a, b)| a + b).collect()),
        }),
        "add scalar" => run_case(Case {
            name: "add scalar",
            shapes: vec![vec![3, 4], vec![1]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            oracle: Box::new(|xs| xs[0].iter().map(|a| a + xs[1][0]).collect()),
        }),
        "mul" => run_case(Case {
            name: "mul",
            shapes: vec![vec![3, 4], vec![3, 4]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            oracle: Box::new(|xs| xs[0].iter().zip(&xs[1]).map(|(a, b)| a * b).collect()),
        }),
        "mul scalar" => run_case(Case {
            name: "mul scalar",
            shapes: vec![vec![1], vec![3, 4]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            oracle: Box::new(|xs| xs[1].iter().map(|b| xs[0][0] * b).collect()),
        }),
        "relu" => run_case(Case {
            name: "relu",
            shapes: vec![vec![4, 5]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: true,
            engine: Box::new(|g, v| g.relu(v[0])),
            oracle: Box::new(|xs| xs[0].iter().map(|&x| x.max(0.0)).collect()),
        }),
        "sigmoid" => run_case(Case {
            name: "sigmoid",
            shapes: vec![vec![4, 5]],
            lo: -3.0,
            hi: 3.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.sigmoid(v[0])),
            oracle: Box::new(|xs| xs[0].iter().map(|&x| super::sigmoid_f64(x)).collect()),
        }),
        "sum" => run_case(Case {
            name: "sum",
            shapes: vec![vec![6, 3]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.sum(v[0])),
            oracle: Box::new(|xs| vec![xs[0].iter().sum()]),
        }),
        "mean" => run_case(Case {
            name: "mean",
            shapes: vec![vec![6, 3]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.mean(v[0])),
            oracle: Box::new(|xs| vec![xs[0].iter().sum::<f64>() / xs[0].len() as f64]),
        }),
        "concat" => run_case(Case {
            name: "concat",
            shapes: vec![vec![2, 3, 3], vec![1, 3, 3]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.concat_channels(v[0], v[1]).unwrap()),
            oracle: Box::new(|xs| {
                let mut out = xs[0].clone();
                out.extend_from_slice(&xs[1]);
                out
            }),
        }),
        "broadcast" => run_case(Case {
            name: "broadcast",
            shapes: vec![vec![3]],
            lo: -2.0,
            hi: 2.0,
            avoid_kink: false,
            engine: Box::new(|g, v| g.broadcast_channels(v[0], 2, 4).unwrap()),
            oracle: Box::new(|xs| {
                let mut out = Vec::with_capacity(3 * 8);
                for &c in &xs[0] {
                    out.extend(std::iter::repeat(c).take(8));
                }
                out
            }),
        }),
        // Losses carry a fixed target per seed, so the constant has to be
        // resampled outside the closures.
        "bce" => {
            for seed in 0..SEEDS {
                let mut rng = rng_from(0xBCE ^ seed, 11);
                let target = Tensor::rand_uniform(&[4, 4], 0.0, 1.0, &mut rng);
                let tgt = target.clone();
                let tgt_f64: Vec<f64> = target.data().iter().map(|&x| x as f64).collect();
                run_case_once(
                    seed,
                    Case {
                        name: "bce",
                        shapes: vec![vec![4, 4]],
                        lo: 0.05,
                        hi: 0.95,
                        avoid_kink: false,
                        engine: Box::new(move |g, v| g.bce_loss(v[0], &tgt, None).unwrap()),
                        oracle: Box::new(move |xs| vec![super::bce_f64(&xs[0], &tgt_f64, None)]),
                    },
                );
            }
        }
        "bce masked" => {
            for seed in 0..SEEDS {
                let mut rng = rng_from(0xBCEA5 ^ seed, 13);
                let target = Tensor::rand_uniform(&[4, 4], 0.0, 1.0, &mut rng);
                let valid_data: Vec<f32> = (0..16)
                    .map(|_| if rng_bool(&mut rng) { 1.0 } else { 0.0 })
                    .collect();
                let valid = Tensor::new(vec![4, 4], valid_data).unwrap();
                let tgt = target.clone();
                let vm = valid.clone();
                let tgt_f64: Vec<f64> = target.data().iter().map(|&x| x as f64).collect();
                let vm_f64: Vec<f64> = valid.data().iter().map(|&x| x as f64).collect();
                run_case_once(
                    seed,
                    Case {
                        name: "bce masked",
                        shapes: vec![vec![4, 4]],
                        lo: 0.05,
                        hi: 0.95,
                        avoid_kink: false,
                        engine: Box::new(move |g, v| g.bce_loss(v[0], &tgt, Some(&vm)).unwrap()),
                        oracle: Box::new(move |xs| {
                            vec![super::bce_f64(&xs[0], &tgt_f64, Some(&vm_f64))]
                        }),
                    },
                );
            }
        }
        "dice" => {
            for seed in 0..SEEDS {
                let mut rng = rng_from(0xD1CE ^ seed, 17);
                let target_data: Vec<f32> = (0..16)
                    .map(|_| if rng_bool(&mut rng) { 1.0 } else { 0.0 })
                    .collect();
                let target = Tensor::new(vec![4, 4], target_data).unwrap();
                let tgt = target.clone();
                let tgt_f64: Vec<f64> = target.data().iter().map(|&x| x as f64).collect();
                run_case_once(
                    seed,
                    Case {
                        name: "dice",
                        shapes: vec![vec![4, 4]],
                        lo: 0.05,
                        hi: 0.95,
                        avoid_kink: false,
                        engine: Box::new(move |g, v| g.dice_loss(v[0], &tgt).unwrap()),
                        oracle: Box::new(move |xs| vec![super::dice_f64(&xs[0], &tgt_f64)]),
                    },
                );
            }
        }
        other => panic!("unknown op check {other}"),
    }
}
