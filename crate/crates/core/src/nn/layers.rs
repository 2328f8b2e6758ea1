use rand::Rng;

use super::params::{xavier_uniform, Grads, ParamId, ParamStore};
use super::tensor::{add_mat_vec, add_outer, add_vec_mat, sigmoid, Tensor2};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::contract(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

/// Affine map `y = x W + b` with `W` of shape `in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), xavier_uniform(in_dim, out_dim, rng))?;
        let bias = store.add(&format!("{name}.bias"), Tensor2::zeros(1, out_dim))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        check_len("linear input", x.len(), self.in_dim)?;
        let mut y = store.get(self.bias).as_slice().to_vec();
        add_vec_mat(x, store.get(self.weight), &mut y);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        check_len("linear input", x.len(), self.in_dim)?;
        check_len("linear output gradient", dy.len(), self.out_dim)?;
        add_outer(x, dy, grads.get_mut(self.weight));
        for (g, d) in grads.get_mut(self.bias).as_mut_slice().iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        add_mat_vec(store.get(self.weight), dy, &mut dx);
        Ok(dx)
    }
}

/// Batched `Y = X W + b` over the rows of `X`.
pub fn linear(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::contract(format!(
            "linear shapes x {:?}, W {:?}, b {}",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut y = Tensor2::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let out = y.row_mut(r);
        out.copy_from_slice(b);
        add_vec_mat(x.row(r), w, out);
    }
    Ok(y)
}

/// Gradients `(dX, dW, db)` of [`linear`] given `dY`.
pub fn linear_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<(Tensor2, Tensor2, Vec<f64>)> {
    if x.cols() != w.rows() || dy.cols() != w.cols() || dy.rows() != x.rows() {
        return Err(Error::contract("linear backward shape mismatch"));
    }
    let mut dx = Tensor2::zeros(x.rows(), x.cols());
    let mut dw = Tensor2::zeros(w.rows(), w.cols());
    let mut db = vec![0.0; w.cols()];
    for r in 0..x.rows() {
        add_outer(x.row(r), dy.row(r), &mut dw);
        add_mat_vec(w, dy.row(r), dx.row_mut(r));
        for (g, d) in db.iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
    Ok((dx, dw, db))
}

/// Learnable harmonic time encoding `cos(w dt + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEncoder {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl TimeEncoder {
    /// Frequencies start geometrically spaced from 1 down to 1e-9 so that intervals from
    /// seconds to years land on distinguishable channels; phases start at zero.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("time encoding dimension must be positive".into()));
        }
        let freqs: Vec<f64> = (0..dim)
            .map(|i| {
                let e = if dim == 1 { 0.0 } else { 9.0 * i as f64 / (dim - 1) as f64 };
                10f64.powf(-e)
            })
            .collect();
        let w = store.add(&format!("{name}.w"), Tensor2::row_vector(&freqs))?;
        let b = store.add(&format!("{name}.b"), Tensor2::zeros(1, dim))?;
        Ok(TimeEncoder { w, b, dim })
    }

    pub fn forward(&self, store: &ParamStore, dt: f64) -> Vec<f64> {
        let w = store.get(self.w).as_slice();
        let b = store.get(self.b).as_slice();
        w.iter().zip(b).map(|(w, b)| (w * dt + b).cos()).collect()
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, dt: f64, dy: &[f64]) {
        debug_assert_eq!(dy.len(), self.dim);
        let w = store.get(self.w).as_slice();
        let b = store.get(self.b).as_slice();
        let ds: Vec<f64> = w
            .iter()
            .zip(b)
            .zip(dy)
            .map(|((w, b), d)| -(w * dt + b).sin() * d)
            .collect();
        for (g, d) in grads.get_mut(self.w).as_mut_slice().iter_mut().zip(&ds) {
            *g += d * dt;
        }
        for (g, d) in grads.get_mut(self.b).as_mut_slice().iter_mut().zip(&ds) {
            *g += d;
        }
    }
}

/// GRU cell with the reset gate applied to the hidden projection:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
///
/// The three gates are packed along the output axis of `w_input` / `w_hidden` in the
/// order `r, z, n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Intermediate values needed by [`Gru::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self> {
        let g = 3 * hidden_dim;
        Ok(Gru {
            w_input: store.add(&format!("{name}.w_input"), xavier_uniform(input_dim, g, rng))?,
            w_hidden: store.add(&format!("{name}.w_hidden"), xavier_uniform(hidden_dim, g, rng))?,
            b_input: store.add(&format!("{name}.b_input"), Tensor2::zeros(1, g))?,
            b_hidden: store.add(&format!("{name}.b_hidden"), Tensor2::zeros(1, g))?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        check_len("gru input", x.len(), self.input_dim)?;
        check_len("gru state", h.len(), self.hidden_dim)?;
        let d = self.hidden_dim;
        let mut gi = store.get(self.b_input).as_slice().to_vec();
        add_vec_mat(x, store.get(self.w_input), &mut gi);
        let mut gh = store.get(self.b_hidden).as_slice().to_vec();
        add_vec_mat(h, store.get(self.w_hidden), &mut gh);
        let r: Vec<f64> = (0..d).map(|i| sigmoid(gi[i] + gh[i])).collect();
        let z: Vec<f64> = (0..d).map(|i| sigmoid(gi[d + i] + gh[d + i])).collect();
        let hn = gh[2 * d..].to_vec();
        let n: Vec<f64> = (0..d).map(|i| (gi[2 * d + i] + r[i] * hn[i]).tanh()).collect();
        let out = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        let cache = GruCache {
            x: x.to_vec(),
            h: h.to_vec(),
            r,
            z,
            n,
            hn,
        };
        Ok((out, cache))
    }

    /// Returns `(dL/dx, dL/dh)`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &GruCache, dout: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("gru output gradient", dout.len(), self.hidden_dim)?;
        let d = self.hidden_dim;
        let GruCache { x, h, r, z, n, hn } = cache;
        let mut dgi = vec![0.0; 3 * d];
        let mut dgh = vec![0.0; 3 * d];
        let mut dh = vec![0.0; d];
        for i in 0..d {
            let g = dout[i];
            let dn = g * (1.0 - z[i]);
            let dz = g * (h[i] - n[i]);
            dh[i] = g * z[i];
            let dan = dn * (1.0 - n[i] * n[i]);
            let dr = dan * hn[i];
            let dar = dr * r[i] * (1.0 - r[i]);
            let daz = dz * z[i] * (1.0 - z[i]);
            dgi[i] = dar;
            dgi[d + i] = daz;
            dgi[2 * d + i] = dan;
            dgh[i] = dar;
            dgh[d + i] = daz;
            dgh[2 * d + i] = dan * r[i];
        }
        add_outer(x, &dgi, grads.get_mut(self.w_input));
        add_outer(h, &dgh, grads.get_mut(self.w_hidden));
        for (g, v) in grads.get_mut(self.b_input).as_mut_slice().iter_mut().zip(&dgi) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.b_hidden).as_mut_slice().iter_mut().zip(&dgh) {
            *g += v;
        }
        let mut dx = vec![0.0; self.input_dim];
        add_mat_vec(store.get(self.w_input), &dgi, &mut dx);
        add_mat_vec(store.get(self.w_hidden), &dgh, &mut dh);
        Ok((dx, dh))
    }
}

/// Two-layer perceptron producing a scalar logit: `w2 relu(x W1 + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkHeadCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl LinkHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(LinkHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden_dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden_dim, 1, rng)?,
        })
    }

    /// Zeroes the output layer so every pair scores logit 0.
    pub fn zero_output(&self, store: &mut ParamStore) {
        store.get_mut(self.out.weight).fill(0.0);
        store.get_mut(self.out.bias).fill(0.0);
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<(f64, LinkHeadCache)> {
        let pre = self.hidden.forward(store, x)?;
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let logit = self.out.forward(store, &act)?[0];
        Ok((logit, LinkHeadCache { x: x.to_vec(), pre, act }))
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &LinkHeadCache, dlogit: f64) -> Result<Vec<f64>> {
        let dact = self.out.backward(store, grads, &cache.act, &[dlogit])?;
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        self.hidden.backward(store, grads, &cache.x, &dpre)
    }
}

/// Binary cross-entropy of a probability against a 0/1 label.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `(loss, dloss/dlogit)` for a logit, with `p = sigmoid(logit)`.
pub fn bce_with_logit(logit: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    (bce_loss(p, y), p - y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_zero_input() {
        let x = Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        assert_eq!(linear(&x, &Tensor2::identity(3), &[0.0; 3]).unwrap(), x);
        let zero = Tensor2::zeros(2, 3);
        let w = Tensor2::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let y = linear(&zero, &w, &[0.5, -1.0]).unwrap();
        assert_eq!(y.as_slice(), &[0.5, -1.0, 0.5, -1.0]);
        assert!(linear(&x, &w.clone(), &[0.0]).is_err());
        assert!(linear(&Tensor2::zeros(1, 2), &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gru_zero_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).fill(0.0);
        }
        let (h, _) = gru.forward(&store, &[1.0, -2.0, 0.5], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        let (h, _) = gru.forward(&store, &[1.0, -2.0, 0.5], &[0.2, -0.4, 1.0, 3.0]).unwrap();
        assert_eq!(h, vec![0.1, -0.2, 0.5, 1.5]);
        assert!(gru.forward(&store, &[1.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn time_encoding_at_zero() {
        let mut store = ParamStore::new();
        let te = TimeEncoder::new(&mut store, "time", 16).unwrap();
        assert_eq!(te.forward(&store, 0.0), vec![1.0; 16]);
        assert!(te.forward(&store, 12345.6).iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(store.get(te.w).get(0, 0), 1.0);
        assert!((store.get(te.w).get(0, 15) - 1e-9).abs() < 1e-24);
    }

    #[test]
    fn bce_values() {
        assert!(bce_loss(1.0, 1.0) < 1e-6);
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(bce_with_logit(0.0, 0.0).1, 0.5);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn zeroed_head_scores_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = LinkHead::new(&mut store, "head", 6, 5, &mut rng).unwrap();
        head.zero_output(&mut store);
        let (logit, _) = head.forward(&store, &[0.3, -1.0, 2.0, 0.0, 1.0, 4.0]).unwrap();
        assert_eq!(sigmoid(logit), 0.5);
    }
}
