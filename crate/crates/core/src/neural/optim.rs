use super::params::{ByteReader, Grads, ParamStore};
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay or schedule. Bias-correction powers are carried
/// as running products so no `pow` call is involved.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if grads.tensors().len() != self.m.len()
            || store.tensors().len() != self.m.len()
            || grads
                .tensors()
                .iter()
                .zip(store.tensors())
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::ShapeMismatch(
                "gradients do not match parameters".into(),
            ));
        }
        self.step += 1;
        self.beta1_pow *= self.config.beta1;
        self.beta2_pow *= self.config.beta2;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one_b1 = T::from_f64(1.0 - self.config.beta1);
        let one_b2 = T::from_f64(1.0 - self.config.beta2);
        let bc1 = T::from_f64(1.0 - self.beta1_pow);
        let bc2 = T::from_f64(1.0 - self.beta2_pow);
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * (gi * gi);
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl Adam<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.beta1_pow.to_le_bytes());
        out.extend_from_slice(&self.beta2_pow.to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Restores state laid out for `store`'s parameters; returns bytes consumed.
    pub fn from_bytes(
        bytes: &[u8],
        store: &ParamStore<f32>,
        config: AdamConfig,
    ) -> Result<(Self, usize)> {
        let mut adam = Adam::new(store, config);
        let mut r = ByteReader::new(bytes);
        adam.step = r.u64()?;
        adam.beta1_pow = r.f64()?;
        adam.beta2_pow = r.f64()?;
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            let raw = r.take(4 * t.len())?;
            for (x, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok((adam, r.pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::ParamId;
    use crate::neural::rng::Rng;

    fn store() -> ParamStore<f32> {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::new();
        s.add_uniform("w", &[3, 2], 1.0, &mut rng);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.tensors().to_vec();
        let mut adam = Adam::new(&s, AdamConfig::default());
        let g = s.zero_grads();
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.tensors(), &before[..]);
        assert_eq!(adam.step_count(), 1);
        assert!(adam.moments().0[0].data().iter().all(|&x| x == 0.0));
        assert!(adam.moments().1[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        let before = s.get(ParamId(0)).to_vec();
        let mut g = s.zero_grads();
        let gv = [0.5f32, -2.0, 1e-3, -1e-3, 3.0, -0.25];
        g.get_mut(ParamId(0)).copy_from_slice(&gv);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, &g).unwrap();
        for ((a, b), gi) in s.get(ParamId(0)).iter().zip(&before).zip(&gv) {
            let delta = a - b;
            assert!((delta + 5e-4 * gi.signum()).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store();
            let mut adam = Adam::new(&s, AdamConfig::default());
            for i in 0..10 {
                let mut g = s.zero_grads();
                for (j, x) in g.get_mut(ParamId(0)).iter_mut().enumerate() {
                    *x = ((i * 7 + j) as f32 * 0.3).sin();
                }
                adam.step(&mut s, &g).unwrap();
            }
            (s.to_bytes(), adam.to_bytes())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_round_trip() {
        let mut s = store();
        let mut adam = Adam::new(&s, AdamConfig::default());
        let mut g = s.zero_grads();
        g.get_mut(ParamId(0))[0] = 1.0;
        adam.step(&mut s, &g).unwrap();
        let bytes = adam.to_bytes();
        let (back, used) = Adam::from_bytes(&bytes, &s, AdamConfig::default()).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, adam);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store();
        let mut other = ParamStore::<f32>::new();
        other.add_zeros("x", &[4]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert!(matches!(
            adam.step(&mut s, &other.zero_grads()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
