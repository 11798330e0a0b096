//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are laid out row-major as `[batch, steps, features]`. Every
//! backward call accumulates into a [`Grads`] buffer and, where useful,
//! returns the gradient with respect to the layer input.

use super::params::{Grads, ParamId, ParamStore};
use super::rng::Rng;
use super::scalar::Real;
use super::tensor::{axpy, dot, matmul_rows, matmul_rows_backward};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Embedding,
    Gru,
    BiGru,
    Attention,
    Ffn,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        let bound = fan_in_bound(n_in);
        let w = store.add_uniform(format!("{name}.weight"), &[n_in, n_out], bound, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[n_out], bound, rng);
        Self { w, b, n_in, n_out }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        matmul_rows(
            x,
            rows,
            store.get(self.w),
            Some(store.get(self.b)),
            self.n_in,
            self.n_out,
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let (dw, db) = grads.get2_mut(self.w, self.b);
        matmul_rows_backward(
            x,
            dy,
            rows,
            store.get(self.w),
            self.n_in,
            self.n_out,
            dw,
            Some(db),
            want_dx,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = store.add_uniform(
            format!("{name}.weight"),
            &[vocab, dim],
            fan_in_bound(dim),
            rng,
        );
        Self { table, vocab, dim }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, ids: &[u32]) -> Vec<T> {
        let table = store.get(self.table);
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let i = id as usize;
            out.extend_from_slice(&table[i * self.dim..(i + 1) * self.dim]);
        }
        out
    }

    pub fn backward<T: Real>(&self, grads: &mut Grads<T>, ids: &[u32], dy: &[T]) {
        let g = grads.get_mut(self.table);
        for (&id, row) in ids.iter().zip(dy.chunks_exact(self.dim)) {
            let i = id as usize;
            for (a, &b) in g[i * self.dim..(i + 1) * self.dim].iter_mut().zip(row) {
                *a += b;
            }
        }
    }
}

/// Single-direction GRU, gate order (reset, update, candidate):
///
/// ```text
/// r = σ(Wxr x + bxr + Whr h + bhr)
/// z = σ(Wxz x + bxz + Whz h + bhz)
/// n = tanh(Wxn x + bxn + r ⊙ (Whn h + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub n_in: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    batch: usize,
    steps: usize,
    reverse: bool,
    x: Vec<T>,
    // Indexed [step][batch][hidden] in processing order.
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ghn: Vec<T>,
    h_prev: Vec<T>,
}

impl Gru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        n_in: usize,
        hidden: usize,
    ) -> Self {
        let wx = store.add_uniform(
            format!("{name}.weight_ih"),
            &[n_in, 3 * hidden],
            fan_in_bound(n_in),
            rng,
        );
        let wh = store.add_uniform(
            format!("{name}.weight_hh"),
            &[hidden, 3 * hidden],
            fan_in_bound(hidden),
            rng,
        );
        let bx = store.add_zeros(format!("{name}.bias_ih"), &[3 * hidden]);
        let bh = store.add_zeros(format!("{name}.bias_hh"), &[3 * hidden]);
        Self {
            wx,
            wh,
            bx,
            bh,
            n_in,
            hidden,
        }
    }

    /// Runs over `[batch, steps, n_in]`, returning hidden states
    /// `[batch, steps, hidden]` aligned with input positions. With `reverse`
    /// the sequence is consumed from the last position to the first.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        steps: usize,
        reverse: bool,
    ) -> (Vec<T>, GruCache<T>) {
        let h = self.hidden;
        let g3 = 3 * h;
        let gx = matmul_rows(
            x,
            batch * steps,
            store.get(self.wx),
            Some(store.get(self.bx)),
            self.n_in,
            g3,
        );
        let wh = store.get(self.wh);
        let bh = store.get(self.bh);
        let per_step = batch * h;
        let mut cache = GruCache {
            batch,
            steps,
            reverse,
            x: x.to_vec(),
            r: vec![T::ZERO; steps * per_step],
            z: vec![T::ZERO; steps * per_step],
            n: vec![T::ZERO; steps * per_step],
            ghn: vec![T::ZERO; steps * per_step],
            h_prev: vec![T::ZERO; steps * per_step],
        };
        let mut out = vec![T::ZERO; batch * steps * h];
        let mut state = vec![T::ZERO; per_step];
        for idx in 0..steps {
            let p = if reverse { steps - 1 - idx } else { idx };
            let gh = matmul_rows(&state, batch, wh, Some(bh), h, g3);
            let base = idx * per_step;
            cache.h_prev[base..base + per_step].copy_from_slice(&state);
            for b in 0..batch {
                let gxr = &gx[(b * steps + p) * g3..(b * steps + p + 1) * g3];
                let ghr = &gh[b * g3..(b + 1) * g3];
                let o = base + b * h;
                for j in 0..h {
                    let r = (gxr[j] + ghr[j]).sigmoid();
                    let z = (gxr[h + j] + ghr[h + j]).sigmoid();
                    let n = (gxr[2 * h + j] + r * ghr[2 * h + j]).tanh();
                    let hp = state[b * h + j];
                    let hn = (T::ONE - z) * n + z * hp;
                    cache.r[o + j] = r;
                    cache.z[o + j] = z;
                    cache.n[o + j] = n;
                    cache.ghn[o + j] = ghr[2 * h + j];
                    state[b * h + j] = hn;
                    out[(b * steps + p) * h + j] = hn;
                }
            }
        }
        (out, cache)
    }

    /// `dout` is `[batch, steps, hidden]`; returns `dx` as `[batch, steps, n_in]`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &GruCache<T>,
        dout: &[T],
    ) -> Vec<T> {
        let h = self.hidden;
        let g3 = 3 * h;
        let (batch, steps) = (cache.batch, cache.steps);
        let per_step = batch * h;
        let wh = store.get(self.wh);
        let mut dgx = vec![T::ZERO; batch * steps * g3];
        let mut dgh = vec![T::ZERO; batch * g3];
        let mut dh_next = vec![T::ZERO; per_step];
        for idx in (0..steps).rev() {
            let p = if cache.reverse { steps - 1 - idx } else { idx };
            let base = idx * per_step;
            let mut carry = vec![T::ZERO; per_step];
            for b in 0..batch {
                let o = base + b * h;
                for j in 0..h {
                    let dh = dout[(b * steps + p) * h + j] + dh_next[b * h + j];
                    let r = cache.r[o + j];
                    let z = cache.z[o + j];
                    let n = cache.n[o + j];
                    let hp = cache.h_prev[o + j];
                    let dn = dh * (T::ONE - z);
                    let dz = dh * (hp - n);
                    carry[b * h + j] = dh * z;
                    let dpre_n = dn * (T::ONE - n * n);
                    let dr = dpre_n * cache.ghn[o + j];
                    let dpre_r = dr * r * (T::ONE - r);
                    let dpre_z = dz * z * (T::ONE - z);
                    let gxo = (b * steps + p) * g3;
                    dgx[gxo + j] = dpre_r;
                    dgx[gxo + h + j] = dpre_z;
                    dgx[gxo + 2 * h + j] = dpre_n;
                    dgh[b * g3 + j] = dpre_r;
                    dgh[b * g3 + h + j] = dpre_z;
                    dgh[b * g3 + 2 * h + j] = dpre_n * r;
                }
            }
            let (dwh, dbh) = grads.get2_mut(self.wh, self.bh);
            let dprev = matmul_rows_backward(
                &cache.h_prev[base..base + per_step],
                &dgh,
                batch,
                wh,
                h,
                g3,
                dwh,
                Some(dbh),
                true,
            )
            .unwrap();
            for ((d, &a), &c) in dh_next.iter_mut().zip(&dprev).zip(&carry) {
                *d = a + c;
            }
        }
        let (dwx, dbx) = grads.get2_mut(self.wx, self.bx);
        matmul_rows_backward(
            &cache.x,
            &dgx,
            batch * steps,
            store.get(self.wx),
            self.n_in,
            g3,
            dwx,
            Some(dbx),
            true,
        )
        .unwrap()
    }
}

/// Forward and reverse GRU; output features are `[forward | reverse]`.
#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

#[derive(Debug, Clone)]
pub struct BiGruCache<T> {
    fwd: GruCache<T>,
    bwd: GruCache<T>,
}

impl BiGru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        n_in: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fwd: Gru::new(store, rng, &format!("{name}.fwd"), n_in, hidden),
            bwd: Gru::new(store, rng, &format!("{name}.bwd"), n_in, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        steps: usize,
    ) -> (Vec<T>, BiGruCache<T>) {
        let h = self.hidden();
        let (of, cf) = self.fwd.forward(store, x, batch, steps, false);
        let (ob, cb) = self.bwd.forward(store, x, batch, steps, true);
        let mut out = Vec::with_capacity(batch * steps * 2 * h);
        for (rf, rb) in of.chunks_exact(h).zip(ob.chunks_exact(h)) {
            out.extend_from_slice(rf);
            out.extend_from_slice(rb);
        }
        (out, BiGruCache { fwd: cf, bwd: cb })
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BiGruCache<T>,
        dout: &[T],
    ) -> Vec<T> {
        let h = self.hidden();
        let mut df = Vec::with_capacity(dout.len() / 2);
        let mut db = Vec::with_capacity(dout.len() / 2);
        for row in dout.chunks_exact(2 * h) {
            df.extend_from_slice(&row[..h]);
            db.extend_from_slice(&row[h..]);
        }
        let mut dx = self.fwd.backward(store, grads, &cache.fwd, &df);
        let dxb = self.bwd.backward(store, grads, &cache.bwd, &db);
        for (a, &b) in dx.iter_mut().zip(&dxb) {
            *a += b;
        }
        dx
    }
}

/// Multi-head scaled dot-product self-attention evaluated for the query at the
/// final position only. In a single-block model that feeds a prediction head
/// from the last position, this is exactly the part of full self-attention
/// that reaches the output.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    batch: usize,
    steps: usize,
    x: Vec<T>,
    x_last: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    weights: Vec<T>,
    ctx: Vec<T>,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && hidden.is_multiple_of(heads), "heads must divide hidden");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, hidden),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, hidden),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, hidden),
            o: Linear::new(store, rng, &format!("{name}.o"), hidden, dim),
            heads,
            dim,
            hidden,
        }
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `x` is `[batch, steps, dim]`; returns `[batch, dim]`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        steps: usize,
    ) -> (Vec<T>, AttentionCache<T>) {
        let (d, hd) = (self.dim, self.hidden);
        let dh = self.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let k = self.k.forward(store, x, batch * steps);
        let v = self.v.forward(store, x, batch * steps);
        let mut x_last = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let o = (b * steps + steps - 1) * d;
            x_last.extend_from_slice(&x[o..o + d]);
        }
        let q = self.q.forward(store, &x_last, batch);
        let mut weights = vec![T::ZERO; batch * self.heads * steps];
        let mut ctx = vec![T::ZERO; batch * hd];
        for b in 0..batch {
            for hh in 0..self.heads {
                let qh = &q[b * hd + hh * dh..b * hd + (hh + 1) * dh];
                let w = &mut weights[(b * self.heads + hh) * steps..(b * self.heads + hh + 1) * steps];
                let mut m = T::ZERO;
                for (j, wj) in w.iter_mut().enumerate() {
                    let kr = (b * steps + j) * hd + hh * dh;
                    let s = dot(qh, &k[kr..kr + dh]) * scale;
                    *wj = s;
                    m = if j == 0 { s } else { m.max(s) };
                }
                let mut sum = 0f64;
                for wj in w.iter_mut() {
                    *wj = (*wj - m).exp();
                    sum += wj.to_f64();
                }
                let inv = 1.0 / sum;
                for wj in w.iter_mut() {
                    *wj = T::from_f64(wj.to_f64() * inv);
                }
                let c = &mut ctx[b * hd + hh * dh..b * hd + (hh + 1) * dh];
                for (j, &a) in w.iter().enumerate() {
                    let vr = (b * steps + j) * hd + hh * dh;
                    axpy(a, &v[vr..vr + dh], c);
                }
            }
        }
        let out = self.o.forward(store, &ctx, batch);
        let cache = AttentionCache {
            batch,
            steps,
            x: x.to_vec(),
            x_last,
            q,
            k,
            v,
            weights,
            ctx,
        };
        (out, cache)
    }

    /// `dout` is `[batch, dim]`; returns `dx` as `[batch, steps, dim]`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &AttentionCache<T>,
        dout: &[T],
    ) -> Vec<T> {
        let (batch, steps) = (cache.batch, cache.steps);
        let (d, hd) = (self.dim, self.hidden);
        let dh = self.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let dctx = self
            .o
            .backward(store, grads, &cache.ctx, dout, batch, true)
            .unwrap();
        let mut dq = vec![T::ZERO; batch * hd];
        let mut dk = vec![T::ZERO; batch * steps * hd];
        let mut dv = vec![T::ZERO; batch * steps * hd];
        let mut ds = vec![T::ZERO; steps];
        for b in 0..batch {
            for hh in 0..self.heads {
                let w = &cache.weights
                    [(b * self.heads + hh) * steps..(b * self.heads + hh + 1) * steps];
                let dc = &dctx[b * hd + hh * dh..b * hd + (hh + 1) * dh];
                let mut wsum = T::ZERO;
                for j in 0..steps {
                    let vr = (b * steps + j) * hd + hh * dh;
                    axpy(w[j], dc, &mut dv[vr..vr + dh]);
                    let da = dot(dc, &cache.v[vr..vr + dh]);
                    ds[j] = da;
                    wsum += w[j] * da;
                }
                let qh = &cache.q[b * hd + hh * dh..b * hd + (hh + 1) * dh];
                for j in 0..steps {
                    let g = w[j] * (ds[j] - wsum) * scale;
                    let kr = (b * steps + j) * hd + hh * dh;
                    axpy(g, &cache.k[kr..kr + dh], &mut dq[b * hd + hh * dh..b * hd + (hh + 1) * dh]);
                    axpy(g, qh, &mut dk[kr..kr + dh]);
                }
            }
        }
        let mut dx = self
            .k
            .backward(store, grads, &cache.x, &dk, batch * steps, true)
            .unwrap();
        let dxv = self
            .v
            .backward(store, grads, &cache.x, &dv, batch * steps, true)
            .unwrap();
        for (a, &b) in dx.iter_mut().zip(&dxv) {
            *a += b;
        }
        let dxl = self
            .q
            .backward(store, grads, &cache.x_last, &dq, batch, true)
            .unwrap();
        for b in 0..batch {
            let o = (b * steps + steps - 1) * d;
            for (a, &g) in dx[o..o + d].iter_mut().zip(&dxl[b * d..(b + 1) * d]) {
                *a += g;
            }
        }
        dx
    }
}

/// Position-wise feed-forward block: `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FfnCache<T> {
    rows: usize,
    x: Vec<T>,
    act: Vec<T>,
}

impl Ffn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        width: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, width),
            down: Linear::new(store, rng, &format!("{name}.down"), width, dim),
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        rows: usize,
    ) -> (Vec<T>, FfnCache<T>) {
        let mut act = self.up.forward(store, x, rows);
        for a in act.iter_mut() {
            // written this way so NaN is zeroed too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(*a > T::ZERO) {
                *a = T::ZERO;
            }
        }
        let out = self.down.forward(store, &act, rows);
        (
            out,
            FfnCache {
                rows,
                x: x.to_vec(),
                act,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &FfnCache<T>,
        dout: &[T],
    ) -> Vec<T> {
        let mut dact = self
            .down
            .backward(store, grads, &cache.act, dout, cache.rows, true)
            .unwrap();
        for (g, &a) in dact.iter_mut().zip(&cache.act) {
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(a > T::ZERO) {
                *g = T::ZERO;
            }
        }
        self.up
            .backward(store, grads, &cache.x, &dact, cache.rows, true)
            .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_attention_returns_value_projection() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::<f64>::new();
        let att = Attention::new(&mut store, &mut rng, "att", 4, 8, 2);
        let x = vec![0.3, -0.2, 0.9, 0.1];
        let (out, _) = att.forward(&store, &x, 1, 1);
        let v = att.v.forward(&store, &x, 1);
        let expected = att.o.forward(&store, &v, 1);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_biases_start_at_zero() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::<f32>::new();
        let g = Gru::new(&mut store, &mut rng, "g", 3, 4);
        assert!(store.get(g.bx).iter().all(|&v| v == 0.0));
        assert!(store.get(g.bh).iter().all(|&v| v == 0.0));
        let bound = 1.0 / 3f32.sqrt();
        assert!(store.get(g.wx).iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::<f32>::new();
        let g = BiGru::new(&mut store, &mut rng, "g", 3, 4);
        let x: Vec<f32> = (0..2 * 5 * 3).map(|i| (i as f32 * 0.37).sin()).collect();
        let (out, cache) = g.forward(&store, &x, 2, 5);
        let mut grads = store.zero_grads();
        let dx = g.backward(&store, &mut grads, &cache, &vec![0.0; out.len()]);
        assert!(grads.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    // Small-scale finite-difference check; the acceptance suite runs the full matrix.
    #[test]
    fn gru_gradient_matches_finite_difference() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::<f64>::new();
        let g = Gru::new(&mut store, &mut rng, "g", 2, 3);
        // non-zero biases so their gradients are exercised
        for id in [g.bx, g.bh] {
            for v in store.get_mut(id) {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
        let (batch, steps) = (2, 4);
        let x: Vec<f64> = (0..batch * steps * 2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..batch * steps * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |s: &ParamStore<f64>| -> f64 {
            let (o, _) = g.forward(s, &x, batch, steps, true);
            o.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = g.forward(&store, &x, batch, steps, true);
        let mut grads = store.zero_grads();
        g.backward(&store, &mut grads, &cache, &c);
        for (pi, t) in store.clone().tensors().iter().enumerate() {
            for e in 0..t.len() {
                let mut sp = store.clone();
                sp.tensors_mut()[pi].data_mut()[e] += 1e-3;
                let mut sm = store.clone();
                sm.tensors_mut()[pi].data_mut()[e] -= 1e-3;
                let num = (loss(&sp) - loss(&sm)) / 2e-3;
                let ana = grads.tensors()[pi].data()[e];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-3, "param {pi}[{e}] num {num} ana {ana}");
            }
        }
    }
}
