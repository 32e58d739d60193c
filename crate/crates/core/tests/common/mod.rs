//! Scalar reference implementations written with plain loops and nested
//! vectors, sharing no code with the library.

#![allow(dead_code)]

use capsule_transformer::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;
pub type Cube = Vec<Vec<Vec<f64>>>;

pub fn to_cube(t: &Tensor) -> Cube {
    let s = t.shape();
    let (a, b, c) = (s[0], s[1], s[2]);
    (0..a)
        .map(|i| (0..b).map(|j| (0..c).map(|k| t.data()[(i * b + j) * c + k]).collect()).collect())
        .collect()
}

pub fn from_cube(c: &Cube) -> Tensor {
    let shape = [c.len(), c[0].len(), c[0][0].len()];
    Tensor::new(&shape, c.iter().flatten().flatten().copied().collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let s = t.shape();
    (0..s[0]).map(|i| t.data()[i * s[1]..(i + 1) * s[1]].to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut hi = f64::NEG_INFINITY;
    for &x in row {
        if x > hi {
            hi = x;
        }
    }
    let mut e = Vec::new();
    let mut total = 0.0;
    for &x in row {
        let v = (x - hi).exp();
        e.push(v);
        total += v;
    }
    e.iter().map(|v| v / total).collect()
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let mut n2 = 0.0;
    for x in s {
        n2 += x * x;
    }
    let n = n2.sqrt();
    s.iter().map(|x| n2 / (1.0 + n2) * x / (n + 1e-12)).collect()
}

pub struct Unrolled {
    pub omega: Mat,
    pub b: Mat,
    pub r: Mat,
    pub s: Mat,
    /// Coupling coefficients of every iteration.
    pub r_history: Vec<Mat>,
}

/// Dynamic routing over votes `v[m][n][k]`, one statement per step.
pub fn route(v: &Cube, iterations: usize) -> Unrolled {
    let m_count = v.len();
    let n_count = v[0].len();
    let k_count = v[0][0].len();
    let mut b = vec![vec![0.0; n_count]; m_count];
    let mut out = Unrolled {
        omega: vec![],
        b: vec![],
        r: vec![],
        s: vec![],
        r_history: vec![],
    };
    for _ in 0..iterations {
        let mut r = vec![vec![0.0; n_count]; m_count];
        for m in 0..m_count {
            r[m] = softmax(&b[m]);
        }
        let mut s = vec![vec![0.0; k_count]; n_count];
        for n in 0..n_count {
            for m in 0..m_count {
                for k in 0..k_count {
                    s[n][k] += r[m][n] * v[m][n][k];
                }
            }
        }
        let mut omega = vec![vec![]; n_count];
        for n in 0..n_count {
            omega[n] = squash(&s[n]);
        }
        for m in 0..m_count {
            for n in 0..n_count {
                let mut dot = 0.0;
                for k in 0..k_count {
                    dot += omega[n][k] * v[m][n][k];
                }
                b[m][n] += dot;
            }
        }
        out.r_history.push(r.clone());
        out.omega = omega;
        out.r = r;
        out.s = s;
    }
    out.b = b;
    out
}

pub struct VerticalOracle {
    pub cube: Cube,
    pub gate_logits: Vec<f64>,
    pub gate: Vec<f64>,
}

/// Routes head slabs `c[h]` (H inputs, L outputs) and gates the result per head.
pub fn vertical(c: &Cube, w: &Mat, bias: &[f64], iterations: usize) -> VerticalOracle {
    let h_count = c.len();
    let routed = route(c, iterations);
    let mut totals = vec![0.0; h_count];
    for h in 0..h_count {
        for x in &routed.b[h] {
            totals[h] += x;
        }
    }
    let mut logits = vec![0.0; h_count];
    for h in 0..h_count {
        logits[h] = bias[h];
        for j in 0..h_count {
            logits[h] += w[h][j] * totals[j];
        }
    }
    let gate = softmax(&logits);
    let cube = (0..h_count)
        .map(|h| routed.omega.iter().map(|row| row.iter().map(|x| gate[h] * x).collect()).collect())
        .collect();
    VerticalOracle {
        cube,
        gate_logits: logits,
        gate,
    }
}

/// For each position `l`, routes tokens `0..=l` (their H x K slabs) to H outputs.
pub fn horizontal(c: &Cube, iterations: usize) -> Cube {
    let h_count = c.len();
    let l_count = c[0].len();
    let mut out = vec![vec![vec![]; l_count]; h_count];
    for l in 0..l_count {
        let mut votes: Cube = Vec::new();
        for t in 0..=l {
            votes.push((0..h_count).map(|h| c[h][t].clone()).collect());
        }
        let routed = route(&votes, iterations);
        for h in 0..h_count {
            out[h][l] = routed.omega[h].clone();
        }
    }
    out
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Softmax-weighted sum of `v` rows per query, with optional causal masking.
pub fn attention_head(logits: &Mat, v: &Mat, causal: bool) -> Mat {
    let mut out = Vec::new();
    for (i, row) in logits.iter().enumerate() {
        let visible: Vec<f64> = if causal { row[..=i].to_vec() } else { row.clone() };
        let p = softmax(&visible);
        let mut o = vec![0.0; v[0].len()];
        for (j, pj) in p.iter().enumerate() {
            for k in 0..o.len() {
                o[k] += pj * v[j][k];
            }
        }
        out.push(o);
    }
    out
}

/// Sum of `-ln softmax(logits[i])[target[i]]` over non-ignored rows.
pub fn cross_entropy(logits: &Mat, targets: &[usize], ignore: usize) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        if t == ignore {
            continue;
        }
        let mut z = 0.0;
        for &x in row {
            z += x.exp();
        }
        total += z.ln() - row[t];
    }
    total
}
