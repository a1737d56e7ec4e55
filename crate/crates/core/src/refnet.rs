//! ReferenceNet: a UNet twin run once on the clean reference latent.
//!
//! Hidden states are captured at the input of self-attention (after the
//! first layer norm) at the mid and up sites only. The denoising UNet then
//! attends over its own tokens concatenated with these reference tokens at
//! the same sites.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor};

use crate::backbone::{Capture, Hooks, UNet, UNetConfig};
use crate::codec::LatentVolume;
use crate::layers::Attention;
use crate::params::ParamStore;
use crate::{Error, Result};

pub const GROUP: &str = "refnet";

/// Per-site reference features, each (tokens, dim).
#[derive(Debug, Clone, Default)]
pub struct ReferenceFeatureBank {
    features: BTreeMap<String, Tensor>,
}

impl ReferenceFeatureBank {
    pub fn from_features(features: BTreeMap<String, Tensor>) -> Self {
        Self { features }
    }

    pub fn get(&self, site: &str) -> Option<&Tensor> {
        self.features.get(site)
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn key_set(&self) -> BTreeSet<String> {
        self.features.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.features.iter()
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceNet {
    unet: UNet,
}

impl ReferenceNet {
    /// Same architecture as the denoiser, conv-in over the latent channels only.
    pub fn build(config: &UNetConfig, store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            unet: UNet::build(config, store, GROUP)?,
        })
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    /// Runs the reference latent (one frame) at timestep 0 and returns the
    /// bank keyed by exactly the mid and up site ids.
    pub fn extract_reference_features(
        &self,
        reference: &LatentVolume,
        context: &Tensor,
    ) -> Result<ReferenceFeatureBank> {
        if reference.frames() != 1 {
            return Err(Error::MultiFrameReference(reference.frames()));
        }
        let x = reference.tensor();
        let t = Tensor::zeros(1, x.dtype(), x.device())?;
        let mut hooks = Hooks {
            capture: Some(Capture {
                sites: self.unet.injection_sites(),
                features: BTreeMap::new(),
            }),
            ..Default::default()
        };
        self.unet.forward_features(x, &t, context, &mut hooks)?;
        let features = hooks.capture.take().map(|c| c.features).unwrap_or_default();
        Ok(ReferenceFeatureBank { features })
    }
}

/// Self-attention with reference tokens appended to the key/value sequence.
/// `x` is (B, N, C) and `reference` is (M, C); the output keeps N tokens.
pub fn inject(attn: &Attention, x: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    let (m, rc) = reference.dims2()?;
    if rc != c {
        return Err(Error::Shape(format!(
            "reference token dim {rc} does not match feature dim {c}"
        )));
    }
    let r = reference.unsqueeze(0)?.broadcast_as((b, m, c))?;
    let kv = Tensor::cat(&[x, &r], 1)?;
    attn.forward(x, &kv)
}

/// Largest absolute element-wise difference between two banks with equal keys.
pub fn bank_max_abs_diff(a: &ReferenceFeatureBank, b: &ReferenceFeatureBank) -> Result<f64> {
    if a.key_set() != b.key_set() {
        return Ok(f64::INFINITY);
    }
    let mut worst = 0f64;
    for (site, fa) in a.iter() {
        let fb = b.get(site).expect("same keys");
        let d = (fa - fb)?.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        worst = worst.max(d);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::attend;
    use crate::params::Init;
    use candle_core::Device;

    fn setup() -> (ParamStore, ReferenceNet, Tensor) {
        let cfg = UNetConfig::tiny();
        let mut store = ParamStore::new(5, DType::F32, Device::Cpu);
        let net = ReferenceNet::build(&cfg, &mut store).unwrap();
        let ctx = store.get_or_init("ctx", (3, cfg.context_dim), Init::Normal(1.0)).unwrap();
        (store, net, ctx)
    }

    fn latent(store: &mut ParamStore, name: &str, frames: usize) -> LatentVolume {
        let t = store.get_or_init(name, (frames, 48, 8, 8), Init::Normal(1.0)).unwrap();
        LatentVolume::new(t, 4).unwrap()
    }

    #[test]
    fn bank_holds_exactly_mid_and_up_sites() {
        let (mut store, net, ctx) = setup();
        let r = latent(&mut store, "r", 1);
        let bank = net.extract_reference_features(&r, &ctx).unwrap();
        let keys: Vec<_> = bank.site_ids().collect();
        assert_eq!(keys, ["mid", "up.0", "up.1"]);
        for (site, feat) in bank.iter() {
            let s = net.unet().site(site).unwrap();
            assert_eq!(feat.dims(), &[s.resolution * s.resolution, s.channels]);
        }
    }

    #[test]
    fn extraction_is_deterministic_and_input_sensitive() {
        let (mut store, net, ctx) = setup();
        let a = latent(&mut store, "a", 1);
        let b = latent(&mut store, "b", 1);
        let ba = net.extract_reference_features(&a, &ctx).unwrap();
        let ba2 = net.extract_reference_features(&a, &ctx).unwrap();
        let bb = net.extract_reference_features(&b, &ctx).unwrap();
        assert_eq!(bank_max_abs_diff(&ba, &ba2).unwrap(), 0.0);
        assert!(bank_max_abs_diff(&ba, &bb).unwrap() > 0.0);
    }

    #[test]
    fn multi_frame_reference_is_rejected() {
        let (mut store, net, ctx) = setup();
        let r = latent(&mut store, "r2", 2);
        assert!(matches!(
            net.extract_reference_features(&r, &ctx),
            Err(Error::MultiFrameReference(2))
        ));
    }

    fn attention(store: &mut ParamStore) -> Attention {
        Attention::new(&mut store.root("unet.attn"), 8, 8, 2).unwrap()
    }

    #[test]
    fn inject_keeps_query_count_and_matches_duplicated_tokens() {
        let mut store = ParamStore::new(1, DType::F64, Device::Cpu);
        let attn = attention(&mut store);
        let x = store.get_or_init("x", (1, 6, 8), Init::Normal(1.0)).unwrap();
        let out = inject(&attn, &x, &x.get(0).unwrap()).unwrap();
        assert_eq!(out.dims(), &[1, 6, 8]);
        let dup = Tensor::cat(&[&x, &x], 1).unwrap();
        let expected = attn.forward(&x, &dup).unwrap();
        let d = (out - expected).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
        // Duplicating every key/value leaves the softmax-weighted average unchanged.
        let plain = attn.forward(&x, &x).unwrap();
        let d = (attn.forward(&x, &dup).unwrap() - plain).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn inject_rejects_dim_mismatch() {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let attn = attention(&mut store);
        let x = Tensor::zeros((1, 4, 8), DType::F32, &Device::Cpu).unwrap();
        let r = Tensor::zeros((4, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(inject(&attn, &x, &r).is_err());
    }

    /// Reference tokens whose keys and values are zero still take softmax
    /// mass (their logits are 0), so the result is the vanilla output scaled by
    /// S / (S + M) with S = sum_i exp(q.k_i / sqrt(d)). With the reference keys
    /// pushed to -inf logits the output is exactly vanilla self-attention.
    #[test]
    fn zero_valued_reference_tokens_rescale_vanilla_attention() {
        let mut store = ParamStore::new(2, DType::F64, Device::Cpu);
        let (b, h, n, m, d) = (1, 1, 5, 3, 4);
        let q = store.get_or_init("q", (b, h, n, d), Init::Normal(1.0)).unwrap();
        let k = store.get_or_init("k", (b, h, n, d), Init::Normal(1.0)).unwrap();
        let v = store.get_or_init("v", (b, h, n, d), Init::Normal(1.0)).unwrap();
        let zeros = Tensor::zeros((b, h, m, d), DType::F64, &Device::Cpu).unwrap();
        let vanilla = attend(&q, &k, &v).unwrap();
        let k_cat = Tensor::cat(&[&k, &zeros], 2).unwrap();
        let v_cat = Tensor::cat(&[&v, &zeros], 2).unwrap();
        let injected = attend(&q, &k_cat, &v_cat).unwrap();

        // Brute-force mass ratio per query.
        let qv = q.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let kv = k.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let van = vanilla.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let inj = injected.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..n {
            let s: f64 = (0..n)
                .map(|j| {
                    let dot: f64 = (0..d).map(|c| qv[i * d + c] * kv[j * d + c]).sum();
                    (dot / (d as f64).sqrt()).exp()
                })
                .sum();
            let ratio = s / (s + m as f64);
            for c in 0..d {
                assert!((inj[i * d + c] - ratio * van[i * d + c]).abs() < 1e-12);
            }
        }

        let masked_keys = (q.matmul(&k.t().unwrap()).unwrap() * 0.5).unwrap();
        let neg = Tensor::full(f64::NEG_INFINITY, (b, h, n, m), &Device::Cpu).unwrap();
        let logits = Tensor::cat(&[&masked_keys, &neg], 3).unwrap();
        let w = candle_nn::ops::softmax(&logits, candle_core::D::Minus1).unwrap();
        let masked = w.matmul(&v_cat).unwrap();
        let diff = (masked - vanilla).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }
}
