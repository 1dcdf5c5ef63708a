//! Affine and LSTM layers with hand-written backward passes.
//!
//! Each layer reads its weights from a [`ParamSet`] and, on the backward pass,
//! accumulates into the matching gradient slots. Callers own the caches.

use rand::Rng;

use super::tensor::{matvec_add, matvec_t_add, outer_add};
use super::{KernelError, ParamId, ParamSet, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn uniform_init<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `y = W x + b` on plain tensors.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    let (rows, cols) = match w.shape() {
        [r, c] => (*r, *c),
        _ => {
            return Err(KernelError::ShapeMismatch {
                left: w.shape().to_vec(),
                right: x.shape().to_vec(),
            })
        }
    };
    if x.shape() != [cols] {
        return Err(KernelError::ShapeMismatch {
            left: w.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    if b.shape() != [rows] {
        return Err(KernelError::ShapeMismatch {
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut y = b.data().to_vec();
    matvec_add(w.data(), cols, x.data(), &mut y);
    Tensor::new(vec![rows], y)
}

/// Gradients of [`affine`]: returns `(dx, dW, db)` for upstream gradient `dy`.
pub fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), KernelError> {
    let cols = x.len();
    if w.shape() != [dy.len(), cols] {
        return Err(KernelError::ShapeMismatch {
            left: w.shape().to_vec(),
            right: dy.shape().to_vec(),
        });
    }
    let mut dx = vec![0.0; cols];
    matvec_t_add(w.data(), cols, dy.data(), &mut dx);
    let mut dw = vec![0.0; w.len()];
    outer_add(&mut dw, dy.data(), x.data());
    Ok((
        Tensor::vector(dx),
        Tensor::new(w.shape().to_vec(), dw)?,
        dy.clone(),
    ))
}

/// Fully connected layer whose weights live in a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    /// Registers `{name}.weight` and `{name}.bias`, initialized uniformly in
    /// `±1/sqrt(in_dim)`.
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, KernelError> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = Tensor::new(vec![out_dim, in_dim], uniform_init(rng, in_dim * out_dim, bound))?;
        let b = Tensor::new(vec![out_dim], uniform_init(rng, out_dim, bound))?;
        Ok(Self {
            weight: params.add(format!("{name}.weight"), w)?,
            bias: params.add(format!("{name}.bias"), b)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = params.value(self.bias).to_vec();
        matvec_add(params.value(self.weight), self.in_dim, x, &mut y);
        y
    }

    /// Accumulates parameter gradients and, when `dx` is given, adds `Wᵀ dy` to it.
    pub fn backward(&self, params: &mut ParamSet, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        if let Some(dx) = dx {
            matvec_t_add(params.value(self.weight), self.in_dim, dy, dx);
        }
        outer_add(params.grad_mut(self.weight), dy, x);
        for (g, d) in params.grad_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
    }
}

/// LSTM cell with gate order input, forget, candidate, output and one bias vector.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Values saved by [`LstmCell::forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`, each of length `hidden`.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, KernelError> {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let g = 4 * hidden;
        let w_ih = Tensor::new(vec![g, in_dim], uniform_init(rng, g * in_dim, bound))?;
        let w_hh = Tensor::new(vec![g, hidden], uniform_init(rng, g * hidden, bound))?;
        let b = Tensor::new(vec![g], uniform_init(rng, g, bound))?;
        Ok(Self {
            w_ih: params.add(format!("{name}.w_ih"), w_ih)?,
            w_hh: params.add(format!("{name}.w_hh"), w_hh)?,
            bias: params.add(format!("{name}.bias"), b)?,
            in_dim,
            hidden,
        })
    }

    /// One step. Returns `(h', c')` and the cache.
    pub fn forward(
        &self,
        params: &ParamSet,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, LstmCache), KernelError> {
        let hd = self.hidden;
        if x.len() != self.in_dim {
            return Err(KernelError::ShapeMismatch {
                left: vec![4 * hd, self.in_dim],
                right: vec![x.len()],
            });
        }
        if h.len() != hd || c.len() != hd {
            return Err(KernelError::ShapeMismatch {
                left: vec![hd],
                right: vec![h.len(), c.len()],
            });
        }
        let mut z = params.value(self.bias).to_vec();
        matvec_add(params.value(self.w_ih), self.in_dim, x, &mut z);
        matvec_add(params.value(self.w_hh), hd, h, &mut z);
        for (k, v) in z.iter_mut().enumerate() {
            *v = if (2 * hd..3 * hd).contains(&k) {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
        let (gi, rest) = z.split_at(hd);
        let (gf, rest) = rest.split_at(hd);
        let (gg, go) = rest.split_at(hd);
        let mut c_new = vec![0.0; hd];
        let mut h_new = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for k in 0..hd {
            c_new[k] = gf[k] * c[k] + gi[k] * gg[k];
            tanh_c[k] = c_new[k].tanh();
            h_new[k] = go[k] * tanh_c[k];
        }
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            gates: z,
            tanh_c,
        };
        Ok((h_new, c_new, cache))
    }

    /// Backward through one step given `dh'` and `dc'`.
    /// Returns `(dx, dh, dc)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        params: &mut ParamSet,
        cache: &LstmCache,
        dh_next: &[f64],
        dc_next: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let g = &cache.gates;
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, cand, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[k];
            let d_o = dh_next[k] * tc;
            let dc = dc_next[k] + dh_next[k] * o * (1.0 - tc * tc);
            let di = dc * cand;
            let dg = dc * i;
            let df = dc * cache.c_prev[k];
            dc_prev[k] = dc * f;
            dz[k] = di * i * (1.0 - i);
            dz[hd + k] = df * f * (1.0 - f);
            dz[2 * hd + k] = dg * (1.0 - cand * cand);
            dz[3 * hd + k] = d_o * o * (1.0 - o);
        }
        let mut dx = vec![0.0; self.in_dim];
        let mut dh = vec![0.0; hd];
        matvec_t_add(params.value(self.w_ih), self.in_dim, &dz, &mut dx);
        matvec_t_add(params.value(self.w_hh), hd, &dz, &mut dh);
        outer_add(params.grad_mut(self.w_ih), &dz, &cache.x);
        outer_add(params.grad_mut(self.w_hh), &dz, &cache.h_prev);
        for (gb, d) in params.grad_mut(self.bias).iter_mut().zip(&dz) {
            *gb += d;
        }
        (dx, dh, dc_prev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let y = affine(&Tensor::vector(vec![3.0, 4.0]), &id, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let y = affine(
            &Tensor::vector(vec![7.0, -2.0]),
            &Tensor::zeros(vec![2, 2]),
            &Tensor::vector(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = affine(&Tensor::vector(vec![1.0, 1.0]), &w, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = affine(
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            &Tensor::zeros(vec![2, 2]),
            &Tensor::zeros(vec![2]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn affine_backward_matches_hand_values() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::vector(vec![1.0, -1.0]);
        let (dx, dw, db) = affine_backward(&x, &w, &Tensor::vector(vec![1.0, 0.5])).unwrap();
        assert_eq!(dx.data(), &[2.5, 4.0]);
        assert_eq!(dw.data(), &[1.0, -1.0, 0.5, -0.5]);
        assert_eq!(db.data(), &[1.0, 0.5]);
    }

    fn zero_lstm(hidden: usize, in_dim: usize) -> (ParamSet, LstmCell) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::register(&mut ps, "lstm", in_dim, hidden, &mut rng).unwrap();
        for p in ps.iter_mut() {
            p.value.fill(0.0);
        }
        (ps, cell)
    }

    #[test]
    fn zero_params_zero_state_gives_zero() {
        let (ps, cell) = zero_lstm(3, 2);
        let (h, c, _) = cell.forward(&ps, &[5.0, -1.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn zero_params_carry_cell_halves() {
        let (ps, cell) = zero_lstm(1, 1);
        let (h, c, _) = cell.forward(&ps, &[0.3], &[0.0], &[2.0]).unwrap();
        assert_eq!(c, vec![1.0]);
        assert!((h[0] - 0.5 * 1.0f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn lstm_rejects_wrong_input() {
        let (ps, cell) = zero_lstm(2, 3);
        assert!(cell.forward(&ps, &[0.0; 2], &[0.0; 2], &[0.0; 2]).is_err());
    }
}
