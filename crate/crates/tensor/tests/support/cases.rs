//! Finite-difference gradient cases: every differentiable graph op paired
//! with its f64 reference forward.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipact_tensor::{Graph, Var};

use super::reference::{self as r, M};

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
pub type Reference = Box<dyn Fn(&[M]) -> M>;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub reference: Reference,
}

fn case(
    name: &'static str,
    shapes: &[Vec<usize>],
    build: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
    reference: impl Fn(&[M]) -> M + 'static,
) -> Case {
    Case { name, shapes: shapes.to_vec(), build: Box::new(build), reference: Box::new(reference) }
}

fn to_m(shape: &[usize], d: &[f32]) -> M {
    let c = *shape.last().unwrap();
    M::new(d.len() / c, c, d.iter().map(|&v| v as f64).collect())
}

fn scalar(v: f64) -> M {
    M::new(1, 1, vec![v])
}

impl Case {
    /// Worst relative error over `probes` random coordinates of
    /// loss = Σ w ⊙ f(inputs) with fixed random weights `w`.
    pub fn worst_error(&self, probes: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f32>> = self
            .shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = self.shapes.iter().zip(&inputs).map(|(s, d)| g.input(s.clone(), d.clone()).unwrap()).collect();
        let out = (self.build)(&mut g, &vars);
        let w: Vec<f32> = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = g.constant(g.shape(out).to_vec(), w.clone()).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();

        let ref_loss = |ms: &[M]| -> f64 { (self.reference)(ms).d.iter().zip(&w).map(|(o, &wi)| o * wi as f64).sum() };
        let base: Vec<M> = self.shapes.iter().zip(&inputs).map(|(s, d)| to_m(s, d)).collect();

        let mut worst = 0.0f64;
        for _ in 0..probes {
            let which = rng.gen_range(0..inputs.len());
            let idx = rng.gen_range(0..inputs[which].len());
            let mut plus = base.clone();
            plus[which].d[idx] += H;
            let mut minus = base.clone();
            minus[which].d[idx] -= H;
            let fd = (ref_loss(&plus) - ref_loss(&minus)) / (2.0 * H);
            let an = g.grad(vars[which]).map(|gr| gr[idx] as f64).unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    pub fn seed(&self) -> u64 {
        self.name.bytes().map(u64::from).sum()
    }
}

pub fn all() -> Vec<Case> {
    let f = vec![0.0f32, 2.0, 1.0, 2.0, 0.0, 2.0];
    let f64s: Vec<f64> = f.iter().map(|&x| x as f64).collect();
    let targets = [1usize, 0, 5, 2];
    let mask = [true, false, true, true];
    let t = vec![0.5f32, -0.5, 0.0, 1.0, 0.2, 0.1];
    let t64: Vec<f64> = t.iter().map(|&x| x as f64).collect();
    let mlp_targets = [0usize, 2, 1, 1];
    vec![
        case("matmul", &[vec![3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1]).unwrap(), |m| r::matmul(&m[0], &m[1])),
        case("matmul_nt", &[vec![3, 4], vec![5, 4]], |g, v| g.matmul_nt(v[0], v[1]).unwrap(), |m| r::matmul_nt(&m[0], &m[1])),
        case("add", &[vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1]).unwrap(), |m| r::add(&m[0], &m[1])),
        case("mul", &[vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1]).unwrap(), |m| r::mul(&m[0], &m[1])),
        case("add_bias", &[vec![4, 3], vec![3]], |g, v| g.add_bias(v[0], v[1]).unwrap(), |m| r::add_bias(&m[0], &m[1].d)),
        case("scale", &[vec![2, 3]], |g, v| g.scale(v[0], -1.7), |m| r::scale(&m[0], -1.7f32 as f64)),
        case("mul_const", &[vec![2, 3]], move |g, v| g.mul_const(v[0], f.clone()).unwrap(), move |m| {
            r::mul(&m[0], &M::new(2, 3, f64s.clone()))
        }),
        case("gelu", &[vec![3, 5]], |g, v| g.gelu(v[0]), |m| r::gelu(&m[0])),
        case("layer_norm", &[vec![3, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(), |m| {
            r::layer_norm(&m[0], &m[1].d, &m[2].d)
        }),
        case("softmax", &[vec![3, 5]], |g, v| g.softmax(v[0]), |m| r::softmax(&m[0])),
        case("causal_softmax", &[vec![3, 5]], |g, v| g.causal_softmax(v[0]).unwrap(), |m| r::causal_softmax(&m[0])),
        case("rows", &[vec![5, 3]], |g, v| g.rows(v[0], 1, 3).unwrap(), |m| r::rows(&m[0], 1, 3)),
        case("cols", &[vec![3, 5]], |g, v| g.cols(v[0], 2, 2).unwrap(), |m| r::cols(&m[0], 2, 2)),
        case("concat_rows", &[vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap(), |m| {
            r::concat_rows(&[&m[0], &m[1], &m[0]])
        }),
        case("concat_cols", &[vec![2, 3], vec![2, 1]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap(), |m| {
            r::concat_cols(&[&m[0], &m[1]])
        }),
        case("gather_rows", &[vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap(), |m| {
            r::gather_rows(&m[0], &[2, 0, 2, 3])
        }),
        case("cross_entropy", &[vec![4, 6]], move |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap(), move |m| {
            scalar(r::cross_entropy(&m[0], &targets, &mask))
        }),
        case("mse", &[vec![2, 3]], move |g, v| g.mse(v[0], t.clone()).unwrap(), move |m| scalar(r::mse(&m[0], &t64))),
        case("sum", &[vec![2, 3]], |g, v| g.sum(v[0]), |m| scalar(r::sum(&m[0]))),
        case(
            "mlp",
            &[vec![4, 5], vec![5, 8], vec![8], vec![8, 3]],
            move |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add_bias(h, v[2]).unwrap();
                let h = g.gelu(h);
                let o = g.matmul(h, v[3]).unwrap();
                g.cross_entropy(o, &mlp_targets, &[true; 4]).unwrap()
            },
            move |m| {
                let h = r::gelu(&r::add_bias(&r::matmul(&m[0], &m[1]), &m[2].d));
                scalar(r::cross_entropy(&r::matmul(&h, &m[3]), &mlp_targets, &[true; 4]))
            },
        ),
        case(
            "attention",
            &[vec![4, 6], vec![6, 6], vec![6, 6], vec![6, 6]],
            |g, v| {
                let q = g.matmul(v[0], v[1]).unwrap();
                let k = g.matmul(v[0], v[2]).unwrap();
                let val = g.matmul(v[0], v[3]).unwrap();
                let s = g.matmul_nt(q, k).unwrap();
                let s = g.scale(s, 0.5);
                let p = g.causal_softmax(s).unwrap();
                g.matmul(p, val).unwrap()
            },
            |m| {
                let q = r::matmul(&m[0], &m[1]);
                let k = r::matmul(&m[0], &m[2]);
                let val = r::matmul(&m[0], &m[3]);
                let p = r::causal_softmax(&r::scale(&r::matmul_nt(&q, &k), 0.5));
                r::matmul(&p, &val)
            },
        ),
    ]
}
