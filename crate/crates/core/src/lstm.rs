//! LSTM cell shared by the caption decoder and the question encoder.
//!
//! Gate pre-activations are stacked in the order input, forget, output,
//! candidate: `a = W h_prev + U x + b` with `W: 4H×H`, `U: 4H×X`, `b: 4H`.

use crate::tensor::{axpy, sigmoid, DenseArray};

/// Borrowed LSTM weights.
#[derive(Clone, Copy)]
pub struct LstmWeights<'a> {
    pub w: &'a DenseArray,
    pub u: &'a DenseArray,
    pub b: &'a DenseArray,
}

/// Mutable gradient buffers matching [`LstmWeights`].
pub struct LstmGrads<'a> {
    pub w: &'a mut DenseArray,
    pub u: &'a mut DenseArray,
    pub b: &'a mut DenseArray,
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub gi: Vec<f64>,
    pub gf: Vec<f64>,
    pub go: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl<'a> LstmWeights<'a> {
    pub fn hidden(&self) -> usize {
        self.w.cols()
    }

    /// One step; returns `(h, c, cache)`.
    pub fn forward(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmCache) {
        let hd = self.hidden();
        let mut a = self.w.matvec(h_prev);
        axpy(&mut a, 1.0, &self.u.matvec(x));
        axpy(&mut a, 1.0, self.b.data());
        let gi: Vec<f64> = a[..hd].iter().map(|&v| sigmoid(v)).collect();
        let gf: Vec<f64> = a[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
        let go: Vec<f64> = a[2 * hd..3 * hd].iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = a[3 * hd..].iter().map(|v| v.tanh()).collect();
        let c: Vec<f64> = (0..hd).map(|k| gf[k] * c_prev[k] + gi[k] * r[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hd).map(|k| go[k] * tanh_c[k]).collect();
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gi,
            gf,
            go,
            r,
            c: c.clone(),
            tanh_c,
        };
        (h, c, cache)
    }

    /// Backward through one step given `dL/dh` and `dL/dc` (from the future).
    /// Accumulates weight gradients and returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(
        &self,
        cache: &LstmCache,
        dh: &[f64],
        dc_next: &[f64],
        grads: &mut LstmGrads<'_>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden();
        let mut da = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let dgo = dh[k] * cache.tanh_c[k];
            let dc = dh[k] * cache.go[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]) + dc_next[k];
            let dgf = dc * cache.c_prev[k];
            let dgi = dc * cache.r[k];
            let dr = dc * cache.gi[k];
            dc_prev[k] = dc * cache.gf[k];
            da[k] = dgi * cache.gi[k] * (1.0 - cache.gi[k]);
            da[hd + k] = dgf * cache.gf[k] * (1.0 - cache.gf[k]);
            da[2 * hd + k] = dgo * cache.go[k] * (1.0 - cache.go[k]);
            da[3 * hd + k] = dr * (1.0 - cache.r[k] * cache.r[k]);
        }
        grads.w.add_outer(&da, &cache.h_prev);
        grads.u.add_outer(&da, &cache.x);
        axpy(grads.b.data_mut(), 1.0, &da);
        let dh_prev = self.w.matvec_t(&da);
        let dx = self.u.matvec_t(&da);
        (dx, dh_prev, dc_prev)
    }
}
