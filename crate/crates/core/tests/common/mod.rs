//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's own metric or detector code.

#![allow(dead_code)]

pub mod detector_oracle;
pub mod gradcheck;

use advood::model::Classifier;
use advood::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Central differences of `f` at every coordinate in `coords`.
pub fn finite_diff(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, coords: &[usize], h: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---- metrics ----

pub fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                acc += 1.0;
            } else if a == b {
                acc += 0.5;
            }
        }
    }
    acc / (id.len() * ood.len()) as f64
}

/// Sweeps every candidate threshold and returns the FPR at the highest one
/// whose TPR reaches `target`.
pub fn sweep_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in id {
        let tpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if tpr >= target && best.map_or(true, |b| t > b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64
}

/// Average precision by enumerating distinct thresholds, recounting every time.
pub fn enumerated_ap(pos: &[f64], neg: &[f64]) -> f64 {
    let mut ts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for t in ts {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        let r = tp / pos.len() as f64;
        if tp + fp > 0.0 {
            ap += (r - prev_r) * tp / (tp + fp);
        }
        prev_r = r;
    }
    ap
}

// ---- linear algebra ----

pub type Mat = Vec<Vec<f64>>;

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a.iter().enumerate().map(|(i, r)| {
        let mut row = r.clone();
        row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
        row
    }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap()).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors as columns of the second matrix.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

pub fn rows_of(t: &Tensor) -> Mat {
    t.rows().map(|r| r.to_vec()).collect()
}

pub fn mean_rows(rows: &[&Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            m[j] += r[j];
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let l = lse(v);
    v.iter().map(|x| (x - l).exp()).collect()
}

pub fn quad(diff: &[f64], m: &Mat) -> f64 {
    (0..diff.len()).map(|i| diff[i] * dot(&m[i], diff)).sum()
}

// ---- test classifiers ----

/// `logits = W vec(x) + b`.
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        let (c, d) = self.weight.dims2().unwrap();
        (0..c).map(|k| self.bias.data()[k] + dot(&self.weight.data()[k * d..(k + 1) * d], x)).collect()
    }
}

impl Classifier for Affine {
    fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let n = g.value(input).batch_len();
        let d = self.weight.shape()[1];
        let flat = g.reshape(input, vec![n, d])?;
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        g.linear(flat, w, b)
    }
}
