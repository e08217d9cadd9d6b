//! Straight-line reimplementation of every detector, fit and score in one go.

use advood::detectors::{DetectorKind, DetectorParams, Ridge};
use advood::model::ForwardTaps;
use advood::Tensor;

use super::{dot, gauss_jordan_inverse, jacobi_eigen, lse, mean_rows, quad, rows_of, softmax, Affine, Mat};

pub struct Train<'a> {
    pub taps: &'a ForwardTaps,
    pub labels: &'a [usize],
    pub head: (&'a Tensor, &'a Tensor),
}

fn energy(l: &[f64], t: f64) -> f64 {
    let s: Vec<f64> = l.iter().map(|v| v / t).collect();
    t * lse(&s)
}

fn head_logits(w: &Tensor, b: &Tensor, f: &[f64]) -> Vec<f64> {
    let d = f.len();
    (0..b.numel()).map(|k| b.data()[k] + dot(&w.data()[k * d..(k + 1) * d], f)).collect()
}

fn pct(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] * (1.0 - (pos - lo as f64)) + s[hi] * (pos - lo as f64)
}

fn covariance(rows: &[Vec<f64>], centers: &[Vec<f64>]) -> Mat {
    let d = rows[0].len();
    let mut c = vec![vec![0.0; d]; d];
    for (r, mu) in rows.iter().zip(centers) {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]);
            }
        }
    }
    c.iter().map(|row| row.iter().map(|v| v / rows.len() as f64).collect()).collect()
}

fn ridge(mut c: Mat, r: Ridge) -> Mat {
    let d = c.len();
    let lam = match r {
        Ridge::Relative(f) => f * (0..d).map(|i| c[i][i]).sum::<f64>() / d as f64,
        Ridge::Absolute(v) => v,
    };
    for i in 0..d {
        c[i][i] += lam;
    }
    c
}

fn class_means(rows: &[Vec<f64>], labels: &[usize], c: usize) -> Mat {
    (0..c)
        .map(|k| mean_rows(&rows.iter().zip(labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect::<Vec<_>>()))
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| if n > 0.0 { x / n } else { *x }).collect()
}

fn gram_entries(block: &[f64], ch: usize, p: u32) -> Vec<f64> {
    let hw = block.len() / ch;
    let mut out = vec![];
    for i in 0..ch {
        for j in i..ch {
            let mut g = 0.0;
            for s in 0..hw {
                g += block[i * hw + s].powi(p as i32) * block[j * hw + s].powi(p as i32);
            }
            out.push(if g >= 0.0 { g.powf(1.0 / p as f64) } else { -(-g).powf(1.0 / p as f64) });
        }
    }
    out
}

/// ODIN on an affine model, with the input gradient written out analytically.
pub fn odin_affine(model: &Affine, x: &[f64], t: f64, eps: f64) -> f64 {
    let (c, d) = model.weight.dims2().unwrap();
    let w = model.weight.data();
    let logits = model.logits_of(x);
    let k = (0..c).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let p = softmax(&logits.iter().map(|v| v / t).collect::<Vec<_>>());
    // d/dx of -log p_k(x / T) = -(W_k - sum_j p_j W_j) / T
    let x2: Vec<f64> = (0..d)
        .map(|i| {
            let g = -(w[k * d + i] - (0..c).map(|j| p[j] * w[j * d + i]).sum::<f64>()) / t;
            x[i] - eps * if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }
        })
        .collect();
    let l2 = model.logits_of(&x2);
    softmax(&l2.iter().map(|v| v / t).collect::<Vec<_>>()).into_iter().fold(f64::MIN, f64::max)
}

pub fn scores(kind: DetectorKind, p: &DetectorParams, train: &Train, test: &ForwardTaps) -> Vec<f64> {
    let f_tr = rows_of(&train.taps.features);
    let l_tr = rows_of(&train.taps.logits);
    let f_te = rows_of(&test.features);
    let l_te = rows_of(&test.logits);
    let n = f_tr.len();
    let d = f_tr[0].len();
    let c = l_tr[0].len();
    let t = p.energy_temperature;
    let (w, b) = train.head;
    let iter = f_te.iter().zip(&l_te);
    match kind {
        DetectorKind::Msp => l_te.iter().map(|l| softmax(l).into_iter().fold(f64::MIN, f64::max)).collect(),
        DetectorKind::Mls => l_te.iter().map(|l| l.iter().cloned().fold(f64::MIN, f64::max)).collect(),
        DetectorKind::Ebo => l_te.iter().map(|l| energy(l, t)).collect(),
        DetectorKind::Odin => panic!("odin needs a model; use odin_affine"),
        DetectorKind::Mds | DetectorKind::Rmds => {
            let mu = class_means(&f_tr, train.labels, c);
            let centers: Vec<Vec<f64>> = train.labels.iter().map(|&l| mu[l].clone()).collect();
            let prec = gauss_jordan_inverse(&ridge(covariance(&f_tr, &centers), p.ridge));
            let m = |f: &[f64], k: usize| quad(&f.iter().zip(&mu[k]).map(|(a, b)| a - b).collect::<Vec<_>>(), &prec);
            if kind == DetectorKind::Mds {
                return f_te.iter().map(|f| -(0..c).map(|k| m(f, k)).fold(f64::MAX, f64::min)).collect();
            }
            let all: Vec<&Vec<f64>> = f_tr.iter().collect();
            let mu0 = mean_rows(&all);
            let prec0 = gauss_jordan_inverse(&ridge(covariance(&f_tr, &vec![mu0.clone(); n]), p.ridge));
            f_te.iter()
                .map(|f| {
                    let bg = quad(&f.iter().zip(&mu0).map(|(a, b)| a - b).collect::<Vec<_>>(), &prec0);
                    (0..c).map(|k| bg - m(f, k)).fold(f64::MIN, f64::max)
                })
                .collect()
        }
        DetectorKind::Gram => {
            let mut total = vec![0.0; f_te.len()];
            for (bt, be) in train.taps.blocks.iter().zip(&test.blocks) {
                let ch = bt.shape()[1];
                for &o in &p.gram_orders {
                    let e = ch * (ch + 1) / 2;
                    let mut lo = vec![vec![f64::MAX; e]; c];
                    let mut hi = vec![vec![f64::MIN; e]; c];
                    for i in 0..n {
                        let g = gram_entries(bt.item_slice(i), ch, o);
                        let l = train.labels[i];
                        for j in 0..e {
                            lo[l][j] = lo[l][j].min(g[j]);
                            hi[l][j] = hi[l][j].max(g[j]);
                        }
                    }
                    for (i, tot) in total.iter_mut().enumerate() {
                        let k = test.predicted[i];
                        let g = gram_entries(be.item_slice(i), ch, o);
                        let mut dev = 0.0;
                        for j in 0..e {
                            if g[j] < lo[k][j] {
                                dev += (lo[k][j] - g[j]) / (lo[k][j] + 1e-6).abs();
                            }
                            if g[j] > hi[k][j] {
                                dev += (g[j] - hi[k][j]) / (hi[k][j] + 1e-6).abs();
                            }
                        }
                        *tot -= dev / e as f64;
                    }
                }
            }
            total
        }
        DetectorKind::React => {
            let clip: Vec<f64> = if p.react_percentile >= 100.0 {
                vec![f64::INFINITY; d]
            } else {
                (0..d).map(|j| pct(&f_tr.iter().map(|r| r[j]).collect::<Vec<_>>(), p.react_percentile)).collect()
            };
            f_te.iter()
                .map(|f| energy(&head_logits(w, b, &f.iter().zip(&clip).map(|(a, c)| a.min(*c)).collect::<Vec<_>>()), t))
                .collect()
        }
        DetectorKind::Klm => {
            let probs: Mat = l_tr.iter().map(|l| softmax(l)).collect();
            let templates = class_means(&probs, train.labels, c);
            l_te.iter()
                .map(|l| {
                    let q = softmax(l);
                    -templates
                        .iter()
                        .map(|tk| (0..c).filter(|&i| q[i] > 0.0).map(|i| q[i] * (q[i] / tk[i]).ln()).sum::<f64>())
                        .fold(f64::MAX, f64::min)
                })
                .collect()
        }
        DetectorKind::Vim => {
            let dim = p.vim_dim.unwrap_or((d + 1) / 2);
            let all: Vec<&Vec<f64>> = f_tr.iter().collect();
            let u = mean_rows(&all);
            if dim == d {
                return l_te.iter().map(|l| lse(l)).collect();
            }
            let (vals, vecs) = jacobi_eigen(&covariance(&f_tr, &vec![u.clone(); n]));
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            let basis: Mat = order[..d - dim].iter().map(|&j| (0..d).map(|i| vecs[i][j]).collect()).collect();
            let rnorm = |f: &[f64]| {
                let cdiff: Vec<f64> = f.iter().zip(&u).map(|(a, b)| a - b).collect();
                basis.iter().map(|bv| dot(bv, &cdiff).powi(2)).sum::<f64>().sqrt()
            };
            let alpha = l_tr.iter().map(|l| l.iter().cloned().fold(f64::MIN, f64::max)).sum::<f64>()
                / f_tr.iter().map(|f| rnorm(f)).sum::<f64>();
            iter.map(|(f, l)| lse(l) - alpha * rnorm(f)).collect()
        }
        DetectorKind::Knn => {
            let k = p.knn_k.unwrap_or_else(|| 5.max((n as f64 / 1000.0).ceil() as usize)).min(n);
            let bank: Mat = f_tr.iter().map(|f| unit(f)).collect();
            f_te.iter()
                .map(|f| {
                    let q = unit(f);
                    let mut ds: Vec<f64> =
                        bank.iter().map(|bv| bv.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect();
                    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    -ds[k - 1]
                })
                .collect()
        }
        DetectorKind::Dice => {
            let all: Vec<&Vec<f64>> = f_tr.iter().collect();
            let mf = mean_rows(&all);
            let mut contrib: Vec<(f64, usize)> =
                w.data().iter().enumerate().map(|(i, wv)| (wv * mf[i % d], i)).collect();
            contrib.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cut = (p.dice_sparsity / 100.0 * contrib.len() as f64).floor() as usize;
            let mut masked = w.data().to_vec();
            for &(_, i) in &contrib[..cut] {
                masked[i] = 0.0;
            }
            let mw = Tensor::new(w.shape().to_vec(), masked).unwrap();
            f_te.iter().map(|f| energy(&head_logits(&mw, b, f), t)).collect()
        }
        DetectorKind::Ash => f_te
            .iter()
            .map(|f| {
                let thr = pct(f, p.ash_percentile);
                let s1: f64 = f.iter().sum();
                let kept: Vec<f64> = f.iter().map(|&v| if v >= thr { v } else { 0.0 }).collect();
                let s2: f64 = kept.iter().sum();
                let r = if s2 == 0.0 { 1.0 } else { s1 / s2 };
                energy(&head_logits(w, b, &kept.iter().map(|v| v * r).collect::<Vec<_>>()), t)
            })
            .collect(),
        DetectorKind::Scale => f_te
            .iter()
            .map(|f| {
                let thr = pct(f, p.scale_percentile);
                let s1: f64 = f.iter().sum();
                let s2: f64 = f.iter().filter(|&&v| v >= thr).sum();
                let r = if s2 == 0.0 { 1.0 } else { (s1 / s2).exp() };
                energy(&head_logits(w, b, &f.iter().map(|v| v * r).collect::<Vec<_>>()), t)
            })
            .collect(),
        DetectorKind::Gen => l_te
            .iter()
            .map(|l| {
                let q = softmax(l);
                let mut order: Vec<usize> = (0..c).collect();
                order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap());
                let m = p.gen_top_m.unwrap_or(c.min(10));
                -order[..m]
                    .iter()
                    .map(|&k| {
                        let others: f64 = (0..c).filter(|&j| j != k).map(|j| q[j]).sum();
                        (q[k] * others).powf(p.gen_gamma)
                    })
                    .sum::<f64>()
            })
            .collect(),
        DetectorKind::Nnguide => {
            let k = p.nnguide_k.unwrap_or(10).min(n);
            let bank: Mat = f_tr.iter().zip(&l_tr).map(|(f, l)| unit(f).iter().map(|v| v * energy(l, t)).collect()).collect();
            iter.map(|(f, l)| {
                let q = unit(f);
                let mut s: Vec<f64> = bank.iter().map(|bv| dot(bv, &q)).collect();
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                energy(l, t) * s[..k].iter().sum::<f64>() / k as f64
            })
            .collect()
        }
    }
}
