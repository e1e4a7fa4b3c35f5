//! Utterance encoder and regression head, forward and backward.
//!
//! Everything runs in f64 on one example at a time; the backward pass is
//! written out by hand and checked against finite differences in
//! [`super::gradcheck`].

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::config::{EncoderMode, ModelConfig};
use super::params::{HeadParams, LayerParams, Params};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Fixed sinusoidal position table, `max_len × d`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&dh)
            .and(&xh)
            .for_each(|o, &a, &x| *o = r * (a - mean_dh - x * mean_dh_xh));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn add_row(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Activations kept from the forward pass of one utterance.
pub struct EncodeCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    add_row(&mut y, b);
    y
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn layer_forward(x: &Array2<f64>, p: &LayerParams, heads: usize) -> (Array2<f64>, LayerCache) {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let q = linear(&a, &p.wq, &p.bq);
    let k = linear(&a, &p.wk, &p.bk);
    let v = linear(&a, &p.wv, &p.bv);
    let mut o = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        softmax_rows(&mut sc);
        o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let mut x1 = linear(&o, &p.wo, &p.bo);
    x1 += x;
    let (b, ln2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let u = linear(&b, &p.ff1_w, &p.ff1_b);
    let g = u.mapv(gelu);
    let mut x2 = linear(&g, &p.ff2_w, &p.ff2_b);
    x2 += &x1;
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        o,
        ln2,
        b,
        u,
        g,
    };
    (x2, cache)
}

/// Backward through one block: takes dL/d(output), returns dL/d(input).
fn layer_backward(dx2: Array2<f64>, c: &LayerCache, p: &LayerParams, gp: &mut LayerParams, heads: usize) -> Array2<f64> {
    let d = dx2.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    general_mat_mul(1.0, &c.g.t(), &dx2, 1.0, &mut gp.ff2_w);
    gp.ff2_b += &dx2.sum_axis(Axis(0));
    let mut du = dx2.dot(&p.ff2_w.t());
    Zip::from(&mut du).and(&c.u).for_each(|g, &u| *g *= gelu_grad(u));
    general_mat_mul(1.0, &c.b.t(), &du, 1.0, &mut gp.ff1_w);
    gp.ff1_b += &du.sum_axis(Axis(0));
    let db = du.dot(&p.ff1_w.t());
    let mut dx1 = layer_norm_backward(&db, &c.ln2, &p.ln2_g, &mut gp.ln2_g, &mut gp.ln2_b);
    dx1 += &dx2;

    // attention branch
    general_mat_mul(1.0, &c.o.t(), &dx1, 1.0, &mut gp.wo);
    gp.bo += &dx1.sum_axis(Axis(0));
    let d_o = dx1.dot(&p.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = d_o.slice(cols);
        let dp = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&doh));
        let mut ds = &dp * probs;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut())
            .and(probs.rows())
            .and(&row_dot)
            .for_each(|mut dsr, pr, &rd| {
                Zip::from(&mut dsr).and(&pr).for_each(|x, &pv| *x -= pv * rd);
            });
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let mut da = Array2::zeros(c.a.raw_dim());
    for (dproj, w, gw, gb) in [
        (&dq, &p.wq, &mut gp.wq, &mut gp.bq),
        (&dk, &p.wk, &mut gp.wk, &mut gp.bk),
        (&dv, &p.wv, &mut gp.wv, &mut gp.bv),
    ] {
        general_mat_mul(1.0, &c.a.t(), dproj, 1.0, gw);
        *gb += &dproj.sum_axis(Axis(0));
        general_mat_mul(1.0, dproj, &w.t(), 1.0, &mut da);
    }
    let mut dx = layer_norm_backward(&da, &c.ln1, &p.ln1_g, &mut gp.ln1_g, &mut gp.ln1_b);
    dx += &dx1;
    dx
}

/// Wraps units in bos/eos, truncating units so the total fits `max_len`.
pub fn token_ids(units: &[u32], cfg: &ModelConfig) -> Vec<usize> {
    let keep = units.len().min(cfg.max_len - 2);
    let mut t = Vec::with_capacity(keep + 2);
    t.push(cfg.bos_id());
    t.extend(units[..keep].iter().map(|&u| u as usize));
    t.push(cfg.eos_id());
    t
}

pub fn encode_forward(params: &Params, cfg: &ModelConfig, pe: &Array2<f64>, tokens: &[usize]) -> (Array1<f64>, EncodeCache) {
    let n = tokens.len();
    let d = cfg.embed_dim;
    let mut x = Array2::zeros((n, d));
    for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
        row.assign(&params.embedding.row(t));
    }
    let mut layers = Vec::new();
    if cfg.encoder_mode == EncoderMode::Attn {
        x += &pe.slice(s![..n, ..]);
        for lp in &params.layers {
            let (next, cache) = layer_forward(&x, lp, cfg.attn_heads);
            layers.push(cache);
            x = next;
        }
    }
    let out = x.mean_axis(Axis(0)).expect("at least bos and eos");
    (
        out,
        EncodeCache {
            tokens: tokens.to_vec(),
            layers,
        },
    )
}

pub fn encode_backward(dout: ArrayView1<f64>, cache: &EncodeCache, params: &Params, cfg: &ModelConfig, grads: &mut Params) {
    let n = cache.tokens.len();
    let mut dx = Array2::zeros((n, cfg.embed_dim));
    let row = dout.mapv(|v| v / n as f64);
    for mut r in dx.rows_mut() {
        r.assign(&row);
    }
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        dx = layer_backward(dx, lc, &params.layers[l], &mut grads.layers[l], cfg.attn_heads);
    }
    for (r, &t) in dx.rows().into_iter().zip(&cache.tokens) {
        let mut g = grads.embedding.row_mut(t);
        g += &r;
    }
}

/// `[h; r; h*r; |h - r|]`
pub fn pool(h: &Array1<f64>, r: &Array1<f64>) -> Array1<f64> {
    assert_eq!(h.len(), r.len(), "pooled vectors must share a dimension");
    let d = h.len();
    let mut z = Array1::zeros(4 * d);
    z.slice_mut(s![..d]).assign(h);
    z.slice_mut(s![d..2 * d]).assign(r);
    z.slice_mut(s![2 * d..3 * d]).assign(&(h * r));
    z.slice_mut(s![3 * d..]).assign(&(h - r).mapv(f64::abs));
    z
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct HeadCache {
    z: Array1<f64>,
    hidden: Array1<f64>,
    pub pred: f64,
}

pub fn head_forward(p: &HeadParams, h: &Array1<f64>, r: &Array1<f64>) -> HeadCache {
    let z = pool(h, r);
    let hidden = (z.dot(&p.w1) + &p.b1).mapv(f64::tanh);
    let logit = hidden.dot(&p.w2.column(0)) + p.b2[0];
    HeadCache {
        z,
        hidden,
        pred: sigmoid(logit),
    }
}

/// Backward from dL/dpred; returns (dL/dh, dL/dr).
pub fn head_backward(
    dpred: f64,
    c: &HeadCache,
    p: &HeadParams,
    h: &Array1<f64>,
    r: &Array1<f64>,
    g: &mut HeadParams,
) -> (Array1<f64>, Array1<f64>) {
    let dlogit = dpred * c.pred * (1.0 - c.pred);
    g.b2[0] += dlogit;
    g.w2.column_mut(0).scaled_add(dlogit, &c.hidden);
    let da = p.w2.column(0).mapv(|w| w * dlogit) * c.hidden.mapv(|t| 1.0 - t * t);
    g.b1 += &da;
    let z = c.z.view().insert_axis(Axis(1));
    general_mat_mul(1.0, &z, &da.view().insert_axis(Axis(0)), 1.0, &mut g.w1);
    let dz = p.w1.dot(&da);
    let d = h.len();
    let (dz_h, dz_r) = (dz.slice(s![..d]), dz.slice(s![d..2 * d]));
    let (dz_prod, dz_abs) = (dz.slice(s![2 * d..3 * d]), dz.slice(s![3 * d..]));
    let sign = (h - r).mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
    let dh = &dz_h + &(&dz_prod * r) + &(&dz_abs * &sign);
    let dr = &dz_r + &(&dz_prod * h) - &(&dz_abs * &sign);
    (dh, dr)
}
