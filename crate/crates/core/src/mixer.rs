//! Model selection, probability mixing and the online update of the dynamic
//! model.
//!
//! Mixed distribution for one position:
//!
//! ```text
//! P = softmax(α · (S0·Lu + S1·Lr) + (1 − α) · S2·Lm),   α = logistic(alpha_raw)
//! ```
//!
//! Training minimizes the summed cross-entropy of `P` against the coded
//! tokens; gradients reach the dynamic model and `alpha_raw` only.

use crate::checksum::checksum64;
use crate::error::{Error, Result};
use crate::models::{DynamicModel, DynamicTape, ModelBundle, StaticModel};
use crate::neural::params::ParamId;
use crate::neural::{softmax_rows, Adam, AdamConfig, ParamStore, Real, Tensor};

pub const DEFAULT_THRESHOLD_BYTES: u64 = 500_000_000;

/// Keeps α strictly inside (0, 1) in single precision.
const ALPHA_RAW_LIMIT: f32 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectorFlags {
    pub spum: bool,
    pub sprm: bool,
    pub dm: bool,
}

impl SelectorFlags {
    pub const DM_ONLY: SelectorFlags = SelectorFlags {
        spum: false,
        sprm: false,
        dm: true,
    };

    /// bit0 SPuM, bit1 SPrM, bit2 DM.
    pub fn to_bits(self) -> u8 {
        u8::from(self.spum) | (u8::from(self.sprm) << 1) | (u8::from(self.dm) << 2)
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & 0b100 == 0 || bits & !0b111 != 0 {
            return Err(Error::CorruptStream(format!("invalid model flags {bits:#010b}")));
        }
        Ok(Self {
            spum: bits & 1 != 0,
            sprm: bits & 2 != 0,
            dm: true,
        })
    }
}

/// Public model for inputs up to `threshold_bytes`, private model above it.
/// The dynamic model is always on.
pub fn select_models(input_size_bytes: u64, threshold_bytes: u64) -> SelectorFlags {
    assert!(threshold_bytes > 0);
    let small = input_size_bytes <= threshold_bytes;
    SelectorFlags {
        spum: small,
        sprm: !small,
        dm: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedDistribution {
    pub probs: Vec<f32>,
}

#[inline]
pub fn logistic(x: f32) -> f32 {
    x.sigmoid()
}

/// Pre-softmax mixed logits for `rows` rows, element order fixed.
fn mixed_logits(
    flags: SelectorFlags,
    alpha: f32,
    lu: Option<&[f32]>,
    lr: Option<&[f32]>,
    lm: &[f32],
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    if flags.spum && lu.is_none() {
        return Err(Error::MissingLogits("spum"));
    }
    if flags.sprm && lr.is_none() {
        return Err(Error::MissingLogits("sprm"));
    }
    for l in [lu, lr].into_iter().flatten() {
        if l.len() != lm.len() {
            return Err(Error::ShapeMismatch("logit widths differ".into()));
        }
    }
    let static_part = (flags.spum || flags.sprm).then(|| {
        let mut s = vec![0f32; lm.len()];
        if flags.spum {
            for (a, &b) in s.iter_mut().zip(lu.unwrap()) {
                *a += b;
            }
        }
        if flags.sprm {
            for (a, &b) in s.iter_mut().zip(lr.unwrap()) {
                *a += b;
            }
        }
        s
    });
    let keep = 1.0 - alpha;
    let z = match &static_part {
        Some(s) => s
            .iter()
            .zip(lm)
            .map(|(&a, &m)| alpha * a + keep * m)
            .collect(),
        None => lm.iter().map(|&m| keep * m).collect(),
    };
    Ok((z, static_part))
}

/// Mixes one row of logits. Disabled models' logits are ignored even if given.
pub fn mix(
    flags: SelectorFlags,
    alpha: f32,
    lu: Option<&[f32]>,
    lr: Option<&[f32]>,
    lm: &[f32],
) -> Result<MixedDistribution> {
    let (z, _) = mixed_logits(flags, alpha, lu, lr, lm)?;
    Ok(MixedDistribution {
        probs: softmax_rows(&z, lm.len()),
    })
}

/// Summed cross-entropy (nats) of `probs` rows against `targets`, and its
/// gradient with respect to the pre-softmax logits, `p − onehot`.
pub fn cross_entropy(probs: &[f32], targets: &[u32], width: usize) -> Result<(f64, Vec<f32>)> {
    if probs.len() != targets.len() * width {
        return Err(Error::BatchMismatch(format!(
            "{} targets for {} probability rows",
            targets.len(),
            probs.len() / width.max(1)
        )));
    }
    let mut loss = 0f64;
    let mut grad = probs.to_vec();
    for (row, &t) in grad.chunks_exact_mut(width).zip(targets) {
        let t = t as usize;
        if t >= width {
            return Err(Error::BatchMismatch(format!("target {t} outside width {width}")));
        }
        loss -= (row[t] as f64).ln();
        row[t] -= 1.0;
    }
    Ok((loss, grad))
}

/// Per-worker trainable state: the dynamic model, α, and their optimizers.
#[derive(Debug, Clone)]
pub struct AdaptiveState {
    pub dm: DynamicModel<f32>,
    pub dm_opt: Adam<f32>,
    alpha: ParamStore<f32>,
    alpha_opt: Adam<f32>,
}

const ALPHA: ParamId = ParamId(0);

impl AdaptiveState {
    pub fn new(dm: DynamicModel<f32>) -> Self {
        let mut alpha = ParamStore::new();
        alpha.add("alpha_raw", Tensor::zeros(&[1]));
        let dm_opt = Adam::new(&dm.store, AdamConfig::default());
        let alpha_opt = Adam::new(&alpha, AdamConfig::default());
        Self {
            dm,
            dm_opt,
            alpha,
            alpha_opt,
        }
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        Self::new(bundle.fresh_dm())
    }

    pub fn alpha_raw(&self) -> f32 {
        self.alpha.get(ALPHA)[0]
    }

    pub fn alpha(&self) -> f32 {
        logistic(self.alpha_raw())
    }

    /// DM weights, DM optimizer state, α and α's optimizer state.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = self.dm.store.to_bytes();
        out.extend_from_slice(&self.dm_opt.to_bytes());
        out.extend_from_slice(&self.alpha.to_bytes());
        out.extend_from_slice(&self.alpha_opt.to_bytes());
        out
    }

    pub fn snapshot_hash(&self) -> u64 {
        checksum64(&self.snapshot())
    }

    pub fn restore(bundle: &ModelBundle, bytes: &[u8]) -> Result<Self> {
        let mut state = Self::from_bundle(bundle);
        let (store, mut pos) = ParamStore::from_bytes(bytes)?;
        state.dm.store.check_layout(&store)?;
        state.dm.store = store;
        let (opt, used) = Adam::from_bytes(&bytes[pos..], &state.dm.store, AdamConfig::default())?;
        pos += used;
        state.dm_opt = opt;
        let (alpha, used) = ParamStore::from_bytes(&bytes[pos..])?;
        pos += used;
        state.alpha.check_layout(&alpha)?;
        state.alpha = alpha;
        let (opt, used) = Adam::from_bytes(&bytes[pos..], &state.alpha, AdamConfig::default())?;
        pos += used;
        state.alpha_opt = opt;
        if pos != bytes.len() {
            return Err(Error::CorruptStream("trailing snapshot bytes".into()));
        }
        Ok(state)
    }
}

/// Everything from one batched prediction that the controller needs.
#[derive(Debug)]
pub struct StepPrediction {
    pub batch: usize,
    pub probs: Vec<f32>,
    alpha: f32,
    static_logits: Option<Vec<f32>>,
    dm_logits: Vec<f32>,
    tape: DynamicTape<f32>,
}

/// The enabled predictors for one run. Disabled static models are never run.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub flags: SelectorFlags,
    pub spum: Option<&'a StaticModel<f32>>,
    pub sprm: Option<&'a StaticModel<f32>>,
}

impl<'a> Predictor<'a> {
    pub fn new(flags: SelectorFlags, bundle: &'a ModelBundle) -> Result<Self> {
        let spum = if flags.spum {
            Some(&bundle.spum.as_ref().ok_or(Error::SpumMissing)?.model)
        } else {
            None
        };
        let sprm = if flags.sprm {
            Some(
                &bundle
                    .sprm
                    .as_ref()
                    .ok_or(Error::MissingLogits("sprm"))?
                    .model,
            )
        } else {
            None
        };
        Ok(Self { flags, spum, sprm })
    }

    pub fn predict(
        &self,
        state: &AdaptiveState,
        contexts: &[u32],
        batch: usize,
    ) -> Result<StepPrediction> {
        let lu = match (self.flags.spum, self.spum) {
            (true, Some(m)) => Some(m.predict(contexts, batch)?),
            (true, None) => return Err(Error::MissingLogits("spum")),
            _ => None,
        };
        let lr = match (self.flags.sprm, self.sprm) {
            (true, Some(m)) => Some(m.predict(contexts, batch)?),
            (true, None) => return Err(Error::MissingLogits("sprm")),
            _ => None,
        };
        let (lm, tape) = state.dm.forward(contexts, batch)?;
        let alpha = state.alpha();
        let (z, static_logits) =
            mixed_logits(self.flags, alpha, lu.as_deref(), lr.as_deref(), &lm)?;
        let probs = softmax_rows(&z, state.dm.arch.vocab);
        Ok(StepPrediction {
            batch,
            probs,
            alpha,
            static_logits,
            dm_logits: lm,
            tape,
        })
    }
}

/// One optimizer step on the summed cross-entropy of `pred` against `targets`.
/// Returns the loss in nats.
pub fn controller_step(
    state: &mut AdaptiveState,
    pred: StepPrediction,
    targets: &[u32],
) -> Result<f64> {
    if targets.len() != pred.batch {
        return Err(Error::BatchMismatch(format!(
            "{} targets for a batch of {}",
            targets.len(),
            pred.batch
        )));
    }
    let width = state.dm.arch.vocab;
    let (loss, dz) = cross_entropy(&pred.probs, targets, width)?;
    let alpha = pred.alpha;
    let keep = 1.0 - alpha;
    let dlm: Vec<f32> = dz.iter().map(|&g| keep * g).collect();
    // d z / d α = static − Lm (static part is zero when no static model runs)
    let mut dalpha = 0f64;
    match &pred.static_logits {
        Some(s) => {
            for ((&g, &a), &m) in dz.iter().zip(s).zip(&pred.dm_logits) {
                dalpha += g as f64 * (a - m) as f64;
            }
        }
        None => {
            for (&g, &m) in dz.iter().zip(&pred.dm_logits) {
                dalpha -= g as f64 * m as f64;
            }
        }
    }
    let draw = (dalpha * alpha as f64 * keep as f64) as f32;

    let grads = state.dm.backward(&pred.tape, &dlm)?;
    state.dm_opt.step(&mut state.dm.store, &grads)?;

    let mut agrad = state.alpha.zero_grads();
    agrad.get_mut(ALPHA)[0] = draw;
    state.alpha_opt.step(&mut state.alpha, &agrad)?;
    let raw = &mut state.alpha.get_mut(ALPHA)[0];
    *raw = raw.clamp(-ALPHA_RAW_LIMIT, ALPHA_RAW_LIMIT);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DynamicArch, ModelScale};

    #[test]
    fn selector_threshold() {
        let mb = 1_000_000;
        assert_eq!(select_models(100 * mb, 500 * mb).to_bits(), 0b101);
        assert_eq!(select_models(501 * mb, 500 * mb).to_bits(), 0b110);
        assert_eq!(select_models(500 * mb, 500 * mb).to_bits(), 0b101);
        assert!(SelectorFlags::from_bits(0b011).is_err());
        assert_eq!(SelectorFlags::from_bits(0b101).unwrap(), select_models(1, 2));
    }

    #[test]
    fn mix_examples() {
        let v = [0.5f32, -1.0, 2.0, 0.0];
        let dm_only = mix(SelectorFlags::DM_ONLY, 1e-9, None, None, &v).unwrap();
        assert_eq!(dm_only.probs, softmax_rows(&v, 4));

        let flags = select_models(1, 2);
        let same = mix(flags, 0.5, Some(&v), None, &v).unwrap();
        assert_eq!(same.probs, softmax_rows(&v, 4));

        let p = mix(flags, 0.5, Some(&[2.0, 0.0, 0.0, 0.0]), None, &[0.0, 2.0, 0.0, 0.0]).unwrap();
        // mixed logits are [1, 1, 0, 0]; softmax evaluated independently in f64
        let e = 1f64.exp();
        let expected = [e / (2.0 * e + 2.0), e / (2.0 * e + 2.0), 1.0 / (2.0 * e + 2.0), 1.0 / (2.0 * e + 2.0)];
        for (&a, b) in p.probs.iter().zip(expected) {
            assert!((a as f64 - b).abs() < 5e-6, "{a} vs {b}");
        }
        assert!((p.probs[0] - 0.36553).abs() < 5e-6);
        assert!(matches!(
            mix(flags, 0.5, None, None, &v),
            Err(Error::MissingLogits("spum"))
        ));
    }

    #[test]
    fn disabled_models_do_not_move_the_argmax() {
        let lm = [0.1f32, 3.0, -2.0, 0.5];
        let junk = [100.0f32, -100.0, 50.0, 0.0];
        let p = mix(SelectorFlags::DM_ONLY, 0.7, Some(&junk), Some(&junk), &lm).unwrap();
        let arg = p
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(arg, 1);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = cross_entropy(&[1.0, 0.0, 0.0, 0.0], &[0], 4).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let uniform = vec![1.0 / 64.0; 64];
        let (loss, _) = cross_entropy(&uniform, &[17], 64).unwrap();
        assert!((loss - 64f64.ln()).abs() < 1e-6);

        assert!(matches!(
            cross_entropy(&uniform, &[1, 2], 64),
            Err(Error::BatchMismatch(_))
        ));
    }

    fn tiny_state(vocab: usize, t: usize) -> AdaptiveState {
        let arch = DynamicArch::new(vocab, t, ModelScale::new(16).unwrap());
        AdaptiveState::new(DynamicModel::new(arch, 7))
    }

    #[test]
    fn controller_is_deterministic_and_keeps_alpha_inside() {
        let run = || {
            let mut st = tiny_state(16, 4);
            let pred = Predictor {
                flags: SelectorFlags::DM_ONLY,
                spum: None,
                sprm: None,
            };
            for i in 0..5u32 {
                let ctx: Vec<u32> = (0..8).map(|j| (i + j) % 16).collect();
                let p = pred.predict(&st, &ctx, 2).unwrap();
                controller_step(&mut st, p, &[i % 16, (i + 3) % 16]).unwrap();
                assert!(st.alpha() > 0.0 && st.alpha() < 1.0);
            }
            st.snapshot()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut st = tiny_state(16, 4);
        let pred = Predictor {
            flags: SelectorFlags::DM_ONLY,
            spum: None,
            sprm: None,
        };
        let p = pred.predict(&st, &[1, 2, 3, 4], 1).unwrap();
        controller_step(&mut st, p, &[5]).unwrap();
        let bytes = st.snapshot();
        let bundle = ModelBundle {
            spum: None,
            sprm: None,
            dm_arch: st.dm.arch,
            dm_seed: 7,
            params: crate::skmer::SkParams::new(2, 2).unwrap(),
            t: 4,
        };
        let back = AdaptiveState::restore(&bundle, &bytes).unwrap();
        assert_eq!(back.snapshot(), bytes);
        assert_eq!(back.alpha_raw(), st.alpha_raw());
    }

    #[test]
    fn dm_overfits_a_constant_stream() {
        let v = 9u32;
        let mut st = tiny_state(16, 4);
        let pred = Predictor {
            flags: SelectorFlags::DM_ONLY,
            spum: None,
            sprm: None,
        };
        let ctx = vec![v; 4 * 4];
        for _ in 0..500 {
            let p = pred.predict(&st, &ctx, 4).unwrap();
            controller_step(&mut st, p, &[v; 4]).unwrap();
        }
        let logits = st.dm.predict(&ctx[..4], 1).unwrap();
        let arg = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(arg, v as usize);
    }
}
