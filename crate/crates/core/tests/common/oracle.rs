//! Plain nested-loop reference implementations.

use cops_core::ests::PrototypeExtractorParams;
use cops_core::icts::VaeParams;
use cops_core::params::{Linear, Mlp};
use cops_core::config::SagaConfig;
use cops_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| (0..t.cols()).map(|j| t.get(i, j)).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += row[k] * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let w = mat(&l.w);
    let b = l.b.data();
    matmul(x, &w).into_iter().map(|row| row.iter().zip(b).map(|(v, bb)| v + bb).collect()).collect()
}

pub fn mlp(x: &Mat, m: &Mlp) -> Mat {
    let h: Mat = linear(x, &m.fc1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(&h, &m.fc2)
}

/// Multi-head softmax attention with heads as contiguous column blocks.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, scale: f64) -> Mat {
    let c = q[0].len();
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| (h * dh..(h + 1) * dh).map(|d| qi[d] * kj[d]).sum::<f64>() * scale)
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for d in h * dh..(h + 1) * dh {
                    out[i][d] += w[j] / z * vj[d];
                }
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn extract(f: &Mat, p: &PrototypeExtractorParams, heads: usize) -> (Mat, Mat) {
    let c = f[0].len();
    let k = matmul(f, &mat(&p.wk));
    let v = matmul(f, &mat(&p.wv));
    let one = |queries: &Tensor| {
        let t0 = mat(queries);
        let q = matmul(&t0, &mat(&p.wq));
        let t = add(&attention(&q, &k, &v, heads, 1.0 / (c as f64).sqrt()), &t0);
        add(&mlp(&t, &p.ffn), &t)
    };
    (one(&p.normal_queries), one(&p.anomaly_queries))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    dot / (na * nb)
}

pub fn nn_distances(f: &Mat, p: &Mat) -> Vec<f64> {
    f.iter()
        .map(|row| p.iter().map(|q| 1.0 - cosine(row, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn center_loss(f: &Mat, pn: &Mat, pa: &Mat, y: &[f64]) -> f64 {
    let dn = nn_distances(f, pn);
    let da = nn_distances(f, pa);
    let mut s = 0.0;
    for i in 0..y.len() {
        s += if y[i] == 1.0 { da[i] } else { dn[i] };
    }
    s / y.len() as f64
}

pub fn vae_encode(g: &[f64], p: &VaeParams) -> (Vec<f64>, Vec<f64>) {
    let h = mlp(&vec![g.to_vec()], &p.encoder);
    let mu = linear(&h, &p.mu).remove(0);
    let lv = linear(&h, &p.logvar).remove(0).into_iter().map(|v| v.clamp(-10.0, 10.0)).collect();
    (mu, lv)
}

pub fn vae_decode(z: &Mat, p: &VaeParams) -> Mat {
    mlp(z, &p.decoder)
}

pub fn reparameterize(mu: &Mat, lv: &Mat, eps: &Mat) -> Mat {
    (0..mu.len())
        .map(|i| (0..mu[i].len()).map(|j| mu[i][j] + (lv[i][j] / 2.0).exp() * eps[i][j]).collect())
        .collect()
}

pub fn vae_loss(g: &[f64], s: &[f64], mu: &[f64], lv: &[f64], mean: bool) -> f64 {
    let mut recon = 0.0;
    for i in 0..g.len() {
        recon += (s[i] - g[i]) * (s[i] - g[i]);
    }
    if mean {
        recon /= g.len() as f64;
    }
    let mut kl = 0.0;
    for i in 0..mu.len() {
        let var = lv[i].exp();
        kl += 0.5 * (mu[i] * mu[i] + var - lv[i] - 1.0);
    }
    recon + kl
}

/// Two-way softmax over cosine similarities divided by the temperature.
pub fn similarities(en: &[f64], ea: &[f64], x: &Mat, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sn = Vec::new();
    let mut sa = Vec::new();
    for row in x {
        let a = cosine(row, en) / tau;
        let b = cosine(row, ea) / tau;
        let m = a.max(b);
        let (ea_, eb_) = ((a - m).exp(), (b - m).exp());
        sn.push(ea_ / (ea_ + eb_));
        sa.push(eb_ / (ea_ + eb_));
    }
    (sn, sa)
}

pub fn spatial_mask(dn: &[f64], da: &[f64], alpha: f64) -> Vec<f64> {
    let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (nn, na) = (norm(dn), norm(da));
    (0..dn.len())
        .map(|i| {
            let a = if nn < 1e-8 { 0.0 } else { dn[i] / nn };
            let b = if na < 1e-8 { 0.0 } else { da[i] / na };
            alpha * a + (1.0 - alpha) * (1.0 - b)
        })
        .collect()
}

pub fn refine(local: &[f64], global: f64, mask: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let r: Vec<f64> = local.iter().zip(mask).map(|(s, m)| s * m).collect();
    let top = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (r, beta * global + (1.0 - beta) * top)
}

pub fn glocal_loss(sn: &Mat, sa: &Mat, sg: f64, y: &Mat, cfg: &SagaConfig) -> f64 {
    let (mut inter_a, mut sum_a, mut sum_y) = (0.0, 0.0, 0.0);
    let (mut inter_n, mut sum_n, mut sum_ny) = (0.0, 0.0, 0.0);
    let mut focal = 0.0;
    let mut count = 0.0;
    let mut any = false;
    for i in 0..y.len() {
        for j in 0..y[i].len() {
            let (a, n, t) = (sa[i][j], sn[i][j], y[i][j]);
            inter_a += a * t;
            sum_a += a;
            sum_y += t;
            inter_n += n * (1.0 - t);
            sum_n += n;
            sum_ny += 1.0 - t;
            let q = ((a + 1e-12) / (a + n + 2e-12)).clamp(1e-7, 1.0 - 1e-7);
            let (pt, w) = if t == 1.0 { (q, cfg.focal_alpha) } else { (1.0 - q, 1.0 - cfg.focal_alpha) };
            focal += -w * (1.0 - pt).powf(cfg.focal_gamma) * pt.ln();
            count += 1.0;
            any |= t == 1.0;
        }
    }
    let e = cfg.dice_eps;
    let dice_a = 1.0 - (2.0 * inter_a + e) / (sum_a + sum_y + e);
    let dice_n = 1.0 - (2.0 * inter_n + e) / (sum_n + sum_ny + e);
    let p = sg.clamp(1e-7, 1.0 - 1e-7);
    let bce = if any { -p.ln() } else { -(1.0 - p).ln() };
    dice_a + dice_n + focal / count + bce
}
