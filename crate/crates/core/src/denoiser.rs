//! Noise-prediction network with FiLM conditioning and manual backprop.
//!
//! Architecture, for an `L x V` noisy input `X` with row mask `M`:
//!
//! ```text
//! tau   = tanh(phi(t) W_tau + b_tau)                      time embedding
//! H0    = M * (X W_emb + tau + P)                         P: sinusoidal positions
//! H1    = H0 + M * tanh(sum_k shift_k(H0) W_conv_k + b_conv)   kernel-3 stem
//! C     = X ln(1 + Psi)                                   per-row KG features
//! block (repeated B times):
//!   U   = H * (1 + C W_g + b_g) + C W_s + b_s             FiLM
//!   H'  = H + M * MultiHeadAttention(U)                   padding keys masked
//!   H'' = H' + M * (tanh(H' W_1 + b_1) W_2 + b_2)
//! Y     = M * (H_B W_out + b_out + X * (phi(t) W_skip + b_skip))
//! ```
//!
//! Parameter count: `3hV + 2V + 4h^2 + 2h + B (2dh + 8h^2 + 5h)`.
//!
//! FiLM generators start at zero, so at initialization the output does not
//! depend on `Psi`. Every parameter is stored as a 2-D array (biases are
//! `1 x n`), which keeps flattening, Adam and checkpointing uniform.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;
use crate::schedule::{loss_weight, ScheduleParams};

/// One-hot (or noisy) trajectory matrix with a row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTensor {
    values: Array2<f64>,
    mask: Vec<bool>,
}

impl TrajectoryTensor {
    /// Masked-out rows must be all zero.
    pub fn new(values: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.nrows() != mask.len() {
            return Err(Error::Shape(format!(
                "{} rows but mask of length {}",
                values.nrows(),
                mask.len()
            )));
        }
        for (row, &m) in values.rows().into_iter().zip(&mask) {
            if !m && row.iter().any(|&v| v != 0.0) {
                return Err(Error::invalid("padding row is not all zero"));
            }
        }
        Ok(TrajectoryTensor { values, mask })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub film_dim: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size == 0 || self.seq_len == 0 || self.film_dim == 0 {
            problems.push("net: vocab_size, seq_len and film_dim must be positive".to_string());
        }
        if self.hidden == 0 || self.hidden % 2 != 0 {
            problems.push(format!("net.hidden must be a positive even number, got {}", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads.max(1) != 0 {
            problems.push(format!(
                "net.hidden {} must be divisible by net.heads {}",
                self.hidden, self.heads
            ));
        }
        if self.blocks == 0 {
            problems.push("net.blocks must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn param_count(&self) -> usize {
        let (h, v, d, b) = (self.hidden, self.vocab_size, self.film_dim, self.blocks);
        3 * h * v + 2 * v + 4 * h * h + 2 * h + b * (2 * d * h + 8 * h * h + 5 * h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub film_scale_w: Array2<f64>,
    pub film_scale_b: Array2<f64>,
    pub film_shift_w: Array2<f64>,
    pub film_shift_b: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array2<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array2<f64>,
}

/// Network weights. The same type holds gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub cfg: NetConfig,
    pub embed: Array2<f64>,
    pub time_w: Array2<f64>,
    pub time_b: Array2<f64>,
    pub conv_w: [Array2<f64>; 3],
    pub conv_b: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub skip_w: Array2<f64>,
    pub skip_b: Array2<f64>,
}

fn row(n: usize) -> Array2<f64> {
    Array2::zeros((1, n))
}

impl DenoiserParams {
    pub fn zeros(cfg: NetConfig) -> Self {
        let (h, v, d) = (cfg.hidden, cfg.vocab_size, cfg.film_dim);
        let sq = || Array2::zeros((h, h));
        DenoiserParams {
            cfg,
            embed: Array2::zeros((v, h)),
            time_w: sq(),
            time_b: row(h),
            conv_w: [sq(), sq(), sq()],
            conv_b: row(h),
            blocks: (0..cfg.blocks)
                .map(|_| BlockParams {
                    film_scale_w: Array2::zeros((d, h)),
                    film_scale_b: row(h),
                    film_shift_w: Array2::zeros((d, h)),
                    film_shift_b: row(h),
                    w_q: sq(),
                    w_k: sq(),
                    w_v: sq(),
                    w_o: sq(),
                    mlp_w1: Array2::zeros((h, 2 * h)),
                    mlp_b1: row(2 * h),
                    mlp_w2: Array2::zeros((2 * h, h)),
                    mlp_b2: row(h),
                })
                .collect(),
            out_w: Array2::zeros((h, v)),
            out_b: row(v),
            skip_w: Array2::zeros((h, v)),
            skip_b: row(v),
        }
    }

    /// Parameter groups in a fixed order with stable names.
    pub fn groups(&self) -> Vec<(String, &Array2<f64>)> {
        let mut g: Vec<(String, &Array2<f64>)> = vec![
            ("embed".into(), &self.embed),
            ("time_w".into(), &self.time_w),
            ("time_b".into(), &self.time_b),
            ("conv_w0".into(), &self.conv_w[0]),
            ("conv_w1".into(), &self.conv_w[1]),
            ("conv_w2".into(), &self.conv_w[2]),
            ("conv_b".into(), &self.conv_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, a) in [
                ("film_scale_w", &b.film_scale_w),
                ("film_scale_b", &b.film_scale_b),
                ("film_shift_w", &b.film_shift_w),
                ("film_shift_b", &b.film_shift_b),
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("mlp_w1", &b.mlp_w1),
                ("mlp_b1", &b.mlp_b1),
                ("mlp_w2", &b.mlp_w2),
                ("mlp_b2", &b.mlp_b2),
            ] {
                g.push((format!("block{i}.{name}"), a));
            }
        }
        g.extend([
            ("out_w".into(), &self.out_w),
            ("out_b".into(), &self.out_b),
            ("skip_w".into(), &self.skip_w),
            ("skip_b".into(), &self.skip_b),
        ]);
        g
    }

    pub fn groups_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut g: Vec<&mut Array2<f64>> = vec![&mut self.embed, &mut self.time_w, &mut self.time_b];
        g.extend(self.conv_w.iter_mut());
        g.push(&mut self.conv_b);
        for b in &mut self.blocks {
            g.extend([
                &mut b.film_scale_w,
                &mut b.film_scale_b,
                &mut b.film_shift_w,
                &mut b.film_shift_b,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
            ]);
        }
        g.extend([&mut self.out_w, &mut self.out_b, &mut self.skip_w, &mut self.skip_b]);
        g
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, a) in self.groups() {
            out.extend(a.iter());
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, network needs {}",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        for a in self.groups_mut() {
            let n = a.len();
            a.iter_mut().zip(&flat[off..off + n]).for_each(|(x, &y)| *x = y);
            off += n;
        }
        Ok(())
    }

    /// `self += other`, group by group.
    pub fn add_assign(&mut self, other: &DenoiserParams) {
        let src: Vec<&Array2<f64>> = other.groups().into_iter().map(|(_, a)| a).collect();
        for (a, b) in self.groups_mut().into_iter().zip(src) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.groups_mut() {
            a.mapv_inplace(|x| x * k);
        }
    }
}

/// Deterministic uniform fan-in initialization; FiLM generators and biases
/// start at zero.
pub fn init_params(cfg: NetConfig, seed: u64) -> Result<DenoiserParams> {
    cfg.validate()?;
    let mut p = DenoiserParams::zeros(cfg);
    let names: Vec<String> = p.groups().into_iter().map(|(n, _)| n).collect();
    for (i, (name, a)) in names.iter().zip(p.groups_mut()).enumerate() {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if leaf.starts_with("film_") || leaf.ends_with("_b") || leaf.starts_with("mlp_b") {
            continue;
        }
        let bound = 1.0 / (a.nrows() as f64).sqrt();
        let mut r = rng::stream(seed, "init", &[i as u64]);
        a.mapv_inplace(|_| r.random_range(-bound..bound));
    }
    Ok(p)
}

/// Sinusoidal time features of width `h` for `t` in `[0, 1]`.
fn time_features(t: f64, h: usize) -> Array2<f64> {
    let half = h / 2;
    let mut phi = Array2::zeros((1, h));
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        phi[[0, 2 * i]] = a.sin();
        phi[[0, 2 * i + 1]] = a.cos();
    }
    phi
}

fn positions(l: usize, h: usize) -> Array2<f64> {
    let half = h / 2;
    Array2::from_shape_fn((l, h), |(p, c)| {
        let i = c / 2;
        let a = p as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp();
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Row `l` of the result is row `l + k - 1` of `h` (zero outside).
fn shift(h: &Array2<f64>, k: usize) -> Array2<f64> {
    let l = h.nrows();
    let mut out = Array2::zeros(h.raw_dim());
    match k {
        0 if l > 1 => out.slice_mut(s![1.., ..]).assign(&h.slice(s![..l - 1, ..])),
        1 => out.assign(h),
        2 if l > 1 => out.slice_mut(s![..l - 1, ..]).assign(&h.slice(s![1.., ..])),
        _ => {}
    }
    out
}

/// Adjoint of [`shift`].
fn unshift(g: &Array2<f64>, k: usize) -> Array2<f64> {
    shift(g, 2 - k)
}

fn mask_rows(a: &mut Array2<f64>, mask: &[bool]) {
    for (mut r, &m) in a.rows_mut().into_iter().zip(mask) {
        if !m {
            r.fill(0.0);
        }
    }
}

fn col_sum(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn tanh_grad(d: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let mut out = d.clone();
    Zip::from(&mut out).and(y).for_each(|o, &y| *o *= 1.0 - y * y);
    out
}

struct BlockCache {
    h_in: Array2<f64>,
    gamma: Array2<f64>,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o_cat: Array2<f64>,
    h_mid: Array2<f64>,
    r: Array2<f64>,
}

struct Cache {
    phi: Array2<f64>,
    tau: Array2<f64>,
    h0: Array2<f64>,
    conv_t: Array2<f64>,
    cond: Array2<f64>,
    blocks: Vec<BlockCache>,
    h_last: Array2<f64>,
}

/// Precomputed FiLM input `ln(1 + Psi)` for a `V x d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmFeatures(Array2<f64>);

impl FilmFeatures {
    pub fn new(psi: ArrayView2<f64>) -> Result<Self> {
        if psi.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::NonFinite("Psi must be finite and non-negative".into()));
        }
        Ok(FilmFeatures(psi.mapv(f64::ln_1p)))
    }

    pub fn zeros(v: usize, d: usize) -> Self {
        FilmFeatures(Array2::zeros((v, d)))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

fn check_inputs(p: &DenoiserParams, x: ArrayView2<f64>, mask: &[bool], t: f64, feats: &FilmFeatures) -> Result<()> {
    let cfg = &p.cfg;
    if x.ncols() != cfg.vocab_size || x.nrows() != mask.len() {
        return Err(Error::Shape(format!(
            "input is {}x{} with mask {}, network expects width {}",
            x.nrows(),
            x.ncols(),
            mask.len(),
            cfg.vocab_size
        )));
    }
    if feats.0.dim() != (cfg.vocab_size, cfg.film_dim) {
        return Err(Error::Shape(format!(
            "Psi is {:?}, network expects ({}, {})",
            feats.0.dim(),
            cfg.vocab_size,
            cfg.film_dim
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    Ok(())
}

fn forward_cached(p: &DenoiserParams, x: ArrayView2<f64>, mask: &[bool], t: f64, feats: &FilmFeatures) -> (Array2<f64>, Cache) {
    let cfg = &p.cfg;
    let (l, h) = (x.nrows(), cfg.hidden);
    let phi = time_features(t, h);
    let tau = (phi.dot(&p.time_w) + &p.time_b).mapv(f64::tanh);
    let mut h0 = x.dot(&p.embed) + &tau + positions(l, h);
    mask_rows(&mut h0, mask);

    let mut z = p.conv_b.broadcast((l, h)).expect("row bias").to_owned();
    for k in 0..3 {
        z += &shift(&h0, k).dot(&p.conv_w[k]);
    }
    let conv_t = z.mapv(f64::tanh);
    let mut stem = conv_t.clone();
    mask_rows(&mut stem, mask);
    let mut hcur = &h0 + &stem;

    let cond = x.dot(&feats.0);
    let heads = cfg.heads;
    let dk = h / heads;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in &p.blocks {
        let gamma = cond.dot(&b.film_scale_w) + &b.film_scale_b;
        let beta = cond.dot(&b.film_shift_w) + &b.film_shift_b;
        let u = &hcur * &gamma.mapv(|g| 1.0 + g) + &beta;
        let q = u.dot(&b.w_q);
        let k = u.dot(&b.w_k);
        let v = u.dot(&b.w_v);
        let mut o_cat = Array2::zeros((l, h));
        let mut attn = Vec::with_capacity(heads);
        for j in 0..heads {
            let cols = s![.., j * dk..(j + 1) * dk];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * inv_sqrt;
            for mut r in sc.rows_mut() {
                let top = r
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY {
                    r.fill(0.0);
                    continue;
                }
                let mut z = 0.0;
                for (e, &m) in r.iter_mut().zip(mask) {
                    *e = if m { (*e - top).exp() } else { 0.0 };
                    z += *e;
                }
                r.mapv_inplace(|e| e / z);
            }
            o_cat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            attn.push(sc);
        }
        let mut o = o_cat.dot(&b.w_o);
        mask_rows(&mut o, mask);
        let h_mid = &hcur + &o;
        let r = (h_mid.dot(&b.mlp_w1) + &b.mlp_b1).mapv(f64::tanh);
        let mut f = r.dot(&b.mlp_w2) + &b.mlp_b2;
        mask_rows(&mut f, mask);
        let h_out = &h_mid + &f;
        blocks.push(BlockCache {
            h_in: std::mem::replace(&mut hcur, h_out),
            gamma,
            u,
            q,
            k,
            v,
            attn,
            o_cat,
            h_mid,
            r,
        });
    }
    let skip = phi.dot(&p.skip_w) + &p.skip_b;
    let mut y = hcur.dot(&p.out_w) + &p.out_b + &(&x * &skip);
    mask_rows(&mut y, mask);
    (
        y,
        Cache {
            phi,
            tau,
            h0,
            conv_t,
            cond,
            blocks,
            h_last: hcur,
        },
    )
}

fn backward(p: &DenoiserParams, x: ArrayView2<f64>, mask: &[bool], cache: &Cache, dy: &Array2<f64>) -> DenoiserParams {
    let cfg = &p.cfg;
    let h = cfg.hidden;
    let heads = cfg.heads;
    let dk = h / heads;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut g = DenoiserParams::zeros(*cfg);

    let mut dy = dy.clone();
    mask_rows(&mut dy, mask);
    g.out_b = col_sum(&dy);
    g.out_w = cache.h_last.t().dot(&dy);
    let dskip = col_sum(&(&x * &dy));
    g.skip_w = cache.phi.t().dot(&dskip);
    g.skip_b = dskip;
    let mut dh = dy.dot(&p.out_w.t());

    for (bi, (b, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut g.blocks[bi];
        // MLP
        let mut df = dh.clone();
        mask_rows(&mut df, mask);
        gb.mlp_b2 = col_sum(&df);
        gb.mlp_w2 = c.r.t().dot(&df);
        let dz1 = tanh_grad(&df.dot(&b.mlp_w2.t()), &c.r);
        gb.mlp_b1 = col_sum(&dz1);
        gb.mlp_w1 = c.h_mid.t().dot(&dz1);
        dh += &dz1.dot(&b.mlp_w1.t());
        // attention
        let mut d_o = dh.clone();
        mask_rows(&mut d_o, mask);
        gb.w_o = c.o_cat.t().dot(&d_o);
        let d_ocat = d_o.dot(&b.w_o.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dkm = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for j in 0..heads {
            let cols = s![.., j * dk..(j + 1) * dk];
            let a = &c.attn[j];
            let dout = d_ocat.slice(cols);
            let da = dout.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let mut ds = &da * a;
            let rows = ds.sum_axis(Axis(1));
            Zip::from(ds.rows_mut()).and(a.rows()).and(&rows).for_each(|mut d, a, &s| {
                Zip::from(&mut d).and(&a).for_each(|d, &a| *d -= a * s);
            });
            ds *= inv_sqrt;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        gb.w_q = c.u.t().dot(&dq);
        gb.w_k = c.u.t().dot(&dkm);
        gb.w_v = c.u.t().dot(&dv);
        let du = dq.dot(&b.w_q.t()) + dkm.dot(&b.w_k.t()) + dv.dot(&b.w_v.t());
        // FiLM
        let dgamma = &du * &c.h_in;
        gb.film_scale_w = cache.cond.t().dot(&dgamma);
        gb.film_scale_b = col_sum(&dgamma);
        gb.film_shift_w = cache.cond.t().dot(&du);
        gb.film_shift_b = col_sum(&du);
        dh += &(&du * &c.gamma.mapv(|g| 1.0 + g));
    }

    // conv stem
    let mut dz = dh.clone();
    mask_rows(&mut dz, mask);
    let dz = tanh_grad(&dz, &cache.conv_t);
    g.conv_b = col_sum(&dz);
    for k in 0..3 {
        g.conv_w[k] = shift(&cache.h0, k).t().dot(&dz);
        dh += &unshift(&dz.dot(&p.conv_w[k].t()), k);
    }
    mask_rows(&mut dh, mask);
    g.embed = x.t().dot(&dh);
    let da = tanh_grad(&col_sum(&dh), &cache.tau);
    g.time_w = cache.phi.t().dot(&da);
    g.time_b = da;
    g
}

/// Predicts the injected noise for an `L x V` input.
pub fn forward(p: &DenoiserParams, x_t: &TrajectoryTensor, t: f64, psi: ArrayView2<f64>) -> Result<Array2<f64>> {
    let feats = FilmFeatures::new(psi)?;
    predict(p, x_t.values().view(), x_t.mask(), t, &feats)
}

/// [`forward`] with precomputed FiLM features and a raw input view.
pub fn predict(p: &DenoiserParams, x: ArrayView2<f64>, mask: &[bool], t: f64, feats: &FilmFeatures) -> Result<Array2<f64>> {
    check_inputs(p, x, mask, t, feats)?;
    let (y, _) = forward_cached(p, x, mask, t, feats);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok(y)
}

/// Anything that maps `(x_t, mask, t)` to a noise estimate.
pub trait EpsModel: Sync {
    fn vocab_size(&self) -> usize;
    fn predict_eps(&self, x: ArrayView2<f64>, mask: &[bool], t: f64) -> Result<Array2<f64>>;
}

/// The network bound to its conditioning features.
pub struct Denoiser<'a> {
    pub params: &'a DenoiserParams,
    pub feats: &'a FilmFeatures,
}

impl EpsModel for Denoiser<'_> {
    fn vocab_size(&self) -> usize {
        self.params.cfg.vocab_size
    }

    fn predict_eps(&self, x: ArrayView2<f64>, mask: &[bool], t: f64) -> Result<Array2<f64>> {
        predict(self.params, x, mask, t, self.feats)
    }
}

/// Identifies the forward-process draws of one sample: slot `slot` of
/// optimization step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
    pub slot: u64,
}

impl NoiseKey {
    /// Keys for slots `0..n` of one step.
    pub fn for_step(seed: u64, step: u64, n: usize) -> Vec<NoiseKey> {
        (0..n as u64).map(|slot| NoiseKey { seed, step, slot }).collect()
    }
}

/// A forward-process draw for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub t: f64,
    pub eps: Array2<f64>,
    pub x_t: Array2<f64>,
}

/// Draws `t ~ U(0, 1)` and `eps ~ N(0, I)` on unmasked rows, then forms
/// `x_t = sqrt(alpha_v) x_0 + sqrt(1 - alpha_v) eps` per token column.
/// The draws depend only on `key`.
pub fn perturb(x0: &TrajectoryTensor, psi: &[f64], sched: &ScheduleParams, key: NoiseKey) -> Result<Perturbation> {
    let (l, v) = x0.values().dim();
    if psi.len() != v {
        return Err(Error::Shape(format!("psi has {} entries for vocabulary {v}", psi.len())));
    }
    let t: f64 = rng::stream(key.seed, "time", &[key.step, key.slot]).random_range(0.0..1.0);
    let alpha = sched.alpha_vec(t, psi)?;
    let mut nr = rng::stream(key.seed, "noise", &[key.step, key.slot]);
    let mut eps = Array2::zeros((l, v));
    for (mut r, &m) in eps.rows_mut().into_iter().zip(x0.mask()) {
        if m {
            r.mapv_inplace(|_| nr.sample::<f64, _>(rand_distr::StandardNormal));
        }
    }
    let mut x_t = Array2::zeros((l, v));
    for ((i, j), o) in x_t.indexed_iter_mut() {
        if x0.mask()[i] {
            *o = alpha[j].sqrt() * x0.values()[[i, j]] + (1.0 - alpha[j]).sqrt() * eps[[i, j]];
        }
    }
    Ok(Perturbation { t, eps, x_t })
}

/// `w(t) * sum over unmasked entries of (eps - eps_hat)^2`.
pub fn weighted_sq_error(eps: &Array2<f64>, eps_hat: &Array2<f64>, mask: &[bool], t: f64) -> f64 {
    let mut total = 0.0;
    for ((e, ehat), &m) in eps.rows().into_iter().zip(eps_hat.rows()).zip(mask) {
        if m {
            total += e.iter().zip(ehat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    loss_weight(t) * total
}

fn check_batch(batch: &[TrajectoryTensor], keys: &[NoiseKey]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    if keys.len() != batch.len() {
        return Err(Error::Shape(format!("{} noise keys for a batch of {}", keys.len(), batch.len())));
    }
    Ok(())
}

/// Batch loss under an arbitrary noise model (no gradient).
pub fn batch_loss<M: EpsModel>(model: &M, batch: &[TrajectoryTensor], psi: &[f64], sched: &ScheduleParams, keys: &[NoiseKey]) -> Result<f64> {
    check_batch(batch, keys)?;
    let terms = exec::try_map_indexed(batch.len(), |i| {
        let p = perturb(&batch[i], psi, sched, keys[i])?;
        let eps_hat = model.predict_eps(p.x_t.view(), batch[i].mask(), p.t)?;
        Ok::<_, Error>(weighted_sq_error(&p.eps, &eps_hat, batch[i].mask(), p.t))
    })?;
    Ok(exec::pairwise_sum(&terms) / batch.len() as f64)
}

/// Weighted denoising score-matching loss and its exact gradient.
///
/// `psi` holds the per-token schedule scores (clipped), `feats` the FiLM
/// input. Sample `i` of the batch uses the draws of `keys[i]`.
pub fn loss_and_gradient(
    params: &DenoiserParams,
    batch: &[TrajectoryTensor],
    feats: &FilmFeatures,
    psi: &[f64],
    sched: &ScheduleParams,
    keys: &[NoiseKey],
) -> Result<(f64, DenoiserParams)> {
    check_batch(batch, keys)?;
    let n = batch.len() as f64;
    let parts = exec::try_map_indexed(batch.len(), |i| {
        let x0 = &batch[i];
        let p = perturb(x0, psi, sched, keys[i])?;
        check_inputs(params, p.x_t.view(), x0.mask(), p.t, feats)?;
        let (eps_hat, cache) = forward_cached(params, p.x_t.view(), x0.mask(), p.t, feats);
        let loss = weighted_sq_error(&p.eps, &eps_hat, x0.mask(), p.t) / n;
        let scale = -2.0 * loss_weight(p.t) / n;
        let dy = (&p.eps - &eps_hat) * scale;
        let g = backward(params, p.x_t.view(), x0.mask(), &cache, &dy);
        Ok::<_, Error>((loss, g))
    })?;
    let (loss, grad) = exec::tree_reduce(parts, |(la, mut ga), (lb, gb)| {
        ga.add_assign(&gb);
        (la + lb, ga)
    })
    .expect("non-empty batch");
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            vocab_size: 6,
            seq_len: 4,
            hidden: 8,
            blocks: 1,
            heads: 2,
            film_dim: 3,
        }
    }

    fn one_hot_batch(cfg: &NetConfig, n: usize, seed: u64) -> Vec<TrajectoryTensor> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, "batch", &[i as u64]);
                let valid = 1 + r.random_range(0..cfg.seq_len);
                let mut x = Array2::zeros((cfg.seq_len, cfg.vocab_size));
                let mut mask = vec![false; cfg.seq_len];
                for l in 0..valid {
                    mask[l] = true;
                    x[[l, r.random_range(0..cfg.vocab_size / 2)]] = 1.0;
                    x[[l, cfg.vocab_size / 2 + r.random_range(0..cfg.vocab_size / 2)]] = 1.0;
                }
                TrajectoryTensor::new(x, mask).unwrap()
            })
            .collect()
    }

    fn random_psi(cfg: &NetConfig, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "psi", &[]);
        Array2::from_shape_fn((cfg.vocab_size, cfg.film_dim), |_| r.random_range(0..4) as f64)
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = NetConfig {
            vocab_size: 20,
            seq_len: 16,
            hidden: 32,
            blocks: 3,
            heads: 4,
            film_dim: 8,
        };
        let p = init_params(cfg, 0).unwrap();
        assert_eq!(p.len(), cfg.param_count());
        assert_eq!(cfg.param_count(), 32712);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_params(tiny(), 5).unwrap(), init_params(tiny(), 5).unwrap());
        assert_ne!(init_params(tiny(), 5).unwrap(), init_params(tiny(), 6).unwrap());
        let bad = NetConfig { heads: 3, ..tiny() };
        assert!(matches!(init_params(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_film_ignores_psi() {
        let cfg = tiny();
        let p = init_params(cfg, 1).unwrap();
        let x = &one_hot_batch(&cfg, 1, 3)[0];
        let a = forward(&p, x, 0.4, Array2::zeros((6, 3)).view()).unwrap();
        let b = forward(&p, x, 0.4, random_psi(&cfg, 2).view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_rows_do_not_leak() {
        let cfg = tiny();
        let mut p = init_params(cfg, 1).unwrap();
        let flat: Vec<f64> = p.flatten().iter().enumerate().map(|(i, v)| v + 0.01 * ((i % 7) as f64 - 3.0)).collect();
        p.assign(&flat).unwrap();
        let psi = random_psi(&cfg, 4);
        let mut x = Array2::zeros((4, 6));
        x[[0, 1]] = 1.0;
        x[[1, 4]] = 1.0;
        let mask = vec![true, false, true, false];
        let mut x = x.clone();
        x.row_mut(1).fill(0.0);
        x[[2, 5]] = 1.0;
        let a = forward(&p, &TrajectoryTensor::new(x.clone(), mask.clone()).unwrap(), 0.3, psi.view()).unwrap();
        let mut y = x.clone();
        let (r1, r3) = (y.row(1).to_owned(), y.row(3).to_owned());
        y.row_mut(1).assign(&r3);
        y.row_mut(3).assign(&r1);
        let b = forward(&p, &TrajectoryTensor::new(y, mask).unwrap(), 0.3, psi.view()).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));
    }

    struct Oracle<'a>(&'a (dyn Fn(ArrayView2<f64>, f64) -> Array2<f64> + Sync));
    impl EpsModel for Oracle<'_> {
        fn vocab_size(&self) -> usize {
            6
        }
        fn predict_eps(&self, x: ArrayView2<f64>, _mask: &[bool], t: f64) -> Result<Array2<f64>> {
            Ok((self.0)(x, t))
        }
    }

    #[test]
    fn stub_predictors() {
        let cfg = tiny();
        let batch = one_hot_batch(&cfg, 5, 7);
        let psi = vec![0.0; 6];
        let sched = ScheduleParams::default();
        let keys = NoiseKey::for_step(3, 11, 5);
        let perfect = |i: usize| perturb(&batch[i], &psi, &sched, keys[i]).unwrap();
        let zero = Oracle(&|x, _| Array2::zeros(x.raw_dim()));
        let loss0 = batch_loss(&zero, &batch, &psi, &sched, &keys).unwrap();
        let expected: f64 = (0..5)
            .map(|i| {
                let p = perfect(i);
                loss_weight(p.t) * p.eps.iter().map(|e| e * e).sum::<f64>()
            })
            .sum::<f64>()
            / 5.0;
        assert!((loss0 - expected).abs() < 1e-12);
        for i in 0..5 {
            let p = perfect(i);
            assert_eq!(weighted_sq_error(&p.eps, &p.eps, batch[i].mask(), p.t), 0.0);
        }
    }

    fn perturbed_params(cfg: NetConfig, seed: u64) -> DenoiserParams {
        let mut p = init_params(cfg, seed).unwrap();
        let mut r = rng::stream(seed, "perturb", &[]);
        let flat: Vec<f64> = p.flatten().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        p.assign(&flat).unwrap();
        p
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny();
        for seed in 0..2 {
            let mut p = perturbed_params(cfg, seed);
            let batch = one_hot_batch(&cfg, 3, seed);
            let feats = FilmFeatures::new(random_psi(&cfg, seed).view()).unwrap();
            let psi = vec![0.0, 1.0, 2.0, 0.5, 0.0, 3.0];
            let sched = ScheduleParams::new(0.1, 20.0, 0.3).unwrap();
            let key = NoiseKey::for_step(seed, 2, 3);
            let (_, g) = loss_and_gradient(&p, &batch, &feats, &psi, &sched, &key).unwrap();
            let analytic = g.flatten();
            let base = p.flatten();
            let h = 1e-4;
            let mut worst: f64 = 0.0;
            for i in 0..base.len() {
                let mut w = base.clone();
                w[i] += h;
                p.assign(&w).unwrap();
                let lp = loss_and_gradient(&p, &batch, &feats, &psi, &sched, &key).unwrap().0;
                w[i] -= 2.0 * h;
                p.assign(&w).unwrap();
                let lm = loss_and_gradient(&p, &batch, &feats, &psi, &sched, &key).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            p.assign(&base).unwrap();
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn loss_is_batch_order_invariant() {
        let cfg = tiny();
        let p = perturbed_params(cfg, 4);
        let batch = one_hot_batch(&cfg, 4, 1);
        let feats = FilmFeatures::zeros(6, 3);
        let psi = vec![0.0; 6];
        let sched = ScheduleParams::default();
        let keys = NoiseKey::for_step(1, 0, 4);
        let (a, ga) = loss_and_gradient(&p, &batch, &feats, &psi, &sched, &keys).unwrap();
        let b = exec::sequential(|| loss_and_gradient(&p, &batch, &feats, &psi, &sched, &keys).unwrap().0);
        assert_eq!(a, b);

        let order = [2, 0, 3, 1];
        let pb: Vec<_> = order.iter().map(|&i| batch[i].clone()).collect();
        let pk: Vec<_> = order.iter().map(|&i| keys[i]).collect();
        let (c, gc) = loss_and_gradient(&p, &pb, &feats, &psi, &sched, &pk).unwrap();
        assert!((a - c).abs() <= 1e-12 * a.abs());
        for (x, y) in ga.flatten().iter().zip(gc.flatten()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        assert!(matches!(
            loss_and_gradient(&p, &[], &feats, &psi, &sched, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn extra_padding_does_not_change_loss() {
        let cfg = tiny();
        let p = perturbed_params(cfg, 2);
        let x = &one_hot_batch(&cfg, 1, 9)[0];
        let wide_cfg = NetConfig { seq_len: 8, ..cfg };
        let mut wide = p.clone();
        wide.cfg = wide_cfg;
        let mut xv = Array2::zeros((8, 6));
        xv.slice_mut(s![..4, ..]).assign(x.values());
        let mut mask = x.mask().to_vec();
        mask.extend([false; 4]);
        let xw = TrajectoryTensor::new(xv, mask).unwrap();
        let feats = FilmFeatures::zeros(6, 3);
        let psi = vec![0.0; 6];
        let sched = ScheduleParams::default();
        let keys = NoiseKey::for_step(5, 0, 1);
        let a = loss_and_gradient(&p, std::slice::from_ref(x), &feats, &psi, &sched, &keys).unwrap().0;
        let b = loss_and_gradient(&wide, &[xw], &feats, &psi, &sched, &keys).unwrap().0;
        assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
    }
}
