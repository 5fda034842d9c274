//! Naive f64 reference implementations of the graph ops. Used only as the
//! finite-difference oracle: perturbing f32 forwards at h=1e-3 drowns small
//! gradients in rounding noise.
#![allow(dead_code)]

#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(r * c, d.len());
        M { r, c, d }
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
    fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|&v| f(v)).collect())
    }
}

pub fn matmul(a: &M, b: &M) -> M {
    let mut d = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            for p in 0..a.c {
                d[i * b.c + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    M::new(a.r, b.c, d)
}

pub fn transpose(a: &M) -> M {
    let mut d = vec![0.0; a.r * a.c];
    for i in 0..a.r {
        for j in 0..a.c {
            d[j * a.r + i] = a.at(i, j);
        }
    }
    M::new(a.c, a.r, d)
}

pub fn matmul_nt(a: &M, b: &M) -> M {
    matmul(a, &transpose(b))
}

pub fn add(a: &M, b: &M) -> M {
    M::new(a.r, a.c, a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect())
}

pub fn mul(a: &M, b: &M) -> M {
    M::new(a.r, a.c, a.d.iter().zip(&b.d).map(|(x, y)| x * y).collect())
}

pub fn add_bias(a: &M, b: &[f64]) -> M {
    let mut out = a.clone();
    for i in 0..a.r {
        for j in 0..a.c {
            out.d[i * a.c + j] += b[j];
        }
    }
    out
}

pub fn scale(a: &M, s: f64) -> M {
    a.map(|v| v * s)
}

pub fn gelu(a: &M) -> M {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    a.map(|x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
}

pub fn layer_norm(a: &M, g: &[f64], b: &[f64]) -> M {
    let mut out = a.clone();
    for i in 0..a.r {
        let row = &a.d[i * a.c..(i + 1) * a.c];
        let mean = row.iter().sum::<f64>() / a.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.c as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for j in 0..a.c {
            out.d[i * a.c + j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    out
}

fn softmax_prefix(row: &[f64], visible: usize) -> Vec<f64> {
    let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row[..visible].iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    let mut out: Vec<f64> = e.iter().map(|v| v / s).collect();
    out.resize(row.len(), 0.0);
    out
}

pub fn softmax(a: &M) -> M {
    let d = a.d.chunks(a.c).flat_map(|r| softmax_prefix(r, a.c)).collect();
    M::new(a.r, a.c, d)
}

pub fn causal_softmax(a: &M) -> M {
    let off = a.c - a.r;
    let d = a.d.chunks(a.c).enumerate().flat_map(|(i, r)| softmax_prefix(r, off + i + 1)).collect();
    M::new(a.r, a.c, d)
}

pub fn rows(a: &M, start: usize, len: usize) -> M {
    M::new(len, a.c, a.d[start * a.c..(start + len) * a.c].to_vec())
}

pub fn cols(a: &M, start: usize, len: usize) -> M {
    let mut d = Vec::new();
    for i in 0..a.r {
        d.extend_from_slice(&a.d[i * a.c + start..i * a.c + start + len]);
    }
    M::new(a.r, len, d)
}

pub fn concat_rows(parts: &[&M]) -> M {
    let d: Vec<f64> = parts.iter().flat_map(|p| p.d.clone()).collect();
    M::new(parts.iter().map(|p| p.r).sum(), parts[0].c, d)
}

pub fn concat_cols(parts: &[&M]) -> M {
    let r = parts[0].r;
    let mut d = Vec::new();
    for i in 0..r {
        for p in parts {
            d.extend_from_slice(&p.d[i * p.c..(i + 1) * p.c]);
        }
    }
    M::new(r, parts.iter().map(|p| p.c).sum(), d)
}

pub fn gather_rows(a: &M, idx: &[usize]) -> M {
    let d = idx.iter().flat_map(|&i| a.d[i * a.c..(i + 1) * a.c].to_vec()).collect();
    M::new(idx.len(), a.c, d)
}

pub fn cross_entropy(logits: &M, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..logits.r {
        if !mask[i] {
            continue;
        }
        let p = softmax_prefix(&logits.d[i * logits.c..(i + 1) * logits.c], logits.c);
        total -= p[targets[i]].ln();
        n += 1;
    }
    total / n as f64
}

pub fn mse(a: &M, t: &[f64]) -> f64 {
    a.d.iter().zip(t).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / t.len() as f64
}

pub fn sum(a: &M) -> f64 {
    a.d.iter().sum()
}
