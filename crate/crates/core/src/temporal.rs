//! Attention across the frame axis, one layer after every Res-Trans site.
//!
//! Each spatial location is an independent sequence of F tokens. The layer is
//! residual with a zero-initialised output projection, so inserting it leaves
//! the network's function unchanged until stage-2 training moves it.

use std::collections::{BTreeMap, HashMap};

use candle_core::{Module, Tensor};

use crate::backbone::{AttentionKind, AttentionRecord, AttentionSite, BlockKind, Hooks, UNet};
use crate::layers::{self, Attention, LayerNorm};
use crate::params::{group_of, ParamBuilder, ParamStore};
use crate::{Error, Result};

pub const GROUP: &str = "temporal";

#[derive(Debug, Clone)]
pub struct TemporalLayer {
    norm: LayerNorm,
    attn: Attention,
    proj_out: candle_nn::Linear,
    channels: usize,
}

impl TemporalLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut pb.pp("norm"), channels)?,
            attn: Attention::new(&mut pb.pp("attn"), channels, channels, heads)?,
            proj_out: layers::linear_zeros(&mut pb.pp("proj_out"), channels, channels)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The residual branch alone: Proj(Attn_time(x)), same shape as `x`.
    pub fn branch(&self, x: &Tensor) -> Result<Tensor> {
        let (f, c, h, w) = x.dims4()?;
        let tokens = x
            .permute([2, 3, 0, 1])?
            .contiguous()?
            .reshape((h * w, f, c))?;
        let positions: Vec<f64> = (0..f).map(|i| i as f64).collect();
        let pe = layers::sinusoidal_embedding(&positions, c, x.dtype(), x.device())?;
        let normed = self.norm.forward(&tokens)?.broadcast_add(&pe)?;
        let mixed = self.proj_out.forward(&self.attn.forward(&normed, &normed)?)?;
        Ok(mixed
            .reshape((h, w, f, c))?
            .permute([2, 3, 0, 1])?
            .contiguous()?)
    }

    /// x + Proj(Attn_time(x)) for x of shape (F, C, H, W).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.branch(x)?)?)
    }

    pub(crate) fn forward_traced(&self, x: &Tensor, site: &str, hooks: &mut Hooks<'_>) -> Result<Tensor> {
        let f = x.dims4()?.0;
        hooks.record(AttentionRecord {
            site: site.to_string(),
            kind: AttentionKind::Temporal,
            query_len: f,
            key_len: f,
        });
        self.forward(x)
    }
}

/// Adds one temporal layer per Res-Trans site, parameters under `temporal.<site>`.
pub fn insert_temporal_layers(unet: &mut UNet, store: &mut ParamStore) -> Result<()> {
    if unet.has_temporal() {
        return Err(Error::AlreadyTemporal);
    }
    let heads = unet.config().heads;
    let mut layers = BTreeMap::new();
    for site in unet.sites() {
        let mut pb = store.root(&format!("{GROUP}.{}", site.site_id));
        layers.insert(site.site_id.clone(), TemporalLayer::new(&mut pb, site.channels, heads)?);
    }
    unet.set_temporal(layers);
    Ok(())
}

/// Replaces temporal parameters from `source` (keyed by our parameter names).
/// Every temporal parameter must be present with a matching shape; otherwise
/// nothing is written and the mismatching layers are reported.
pub fn load_temporal_init(store: &ParamStore, source: &HashMap<String, Tensor>) -> Result<usize> {
    let names = store.names_in_groups(&[GROUP]);
    let mut problems = Vec::new();
    for name in &names {
        let expected = store.get(name).expect("listed name").dims().to_vec();
        match source.get(name) {
            None => problems.push(format!("{name}: missing from source")),
            Some(t) if t.dims() != expected.as_slice() => {
                problems.push(format!("{name}: expected {expected:?}, got {:?}", t.dims()))
            }
            Some(_) => {}
        }
    }
    let mut extra: Vec<_> = source
        .keys()
        .filter(|k| group_of(k) == GROUP && !names.contains(*k))
        .cloned()
        .collect();
    extra.sort();
    problems.extend(extra.into_iter().map(|k| format!("{k}: not a temporal parameter")));
    if !problems.is_empty() {
        return Err(Error::TemporalMismatch(problems));
    }
    for name in &names {
        store.set(name, &source[name])?;
    }
    Ok(names.len())
}

/// Best-effort mapping from our temporal parameter prefix to the key prefix
/// of an AnimateDiff v2 motion-module checkpoint for an SD1.5-shaped UNet.
/// The layer internals differ (AnimateDiff stacks two attention blocks), so
/// only the first attention block and the output projection are mapped.
pub fn animatediff_prefix(site: &AttentionSite, levels: usize) -> String {
    match site.block_kind {
        BlockKind::Down => format!("down_blocks.{}.motion_modules.0.temporal_transformer", site.level),
        BlockKind::Mid => "mid_block.motion_modules.0.temporal_transformer".to_string(),
        BlockKind::Up => format!(
            "up_blocks.{}.motion_modules.0.temporal_transformer",
            levels - 1 - site.level
        ),
    }
}

/// Suffix table applied under [`animatediff_prefix`].
pub const ANIMATEDIFF_SUFFIXES: [(&str, &str); 8] = [
    ("norm.weight", "transformer_blocks.0.norms.0.weight"),
    ("norm.bias", "transformer_blocks.0.norms.0.bias"),
    ("attn.to_q.weight", "transformer_blocks.0.attention_blocks.0.to_q.weight"),
    ("attn.to_k.weight", "transformer_blocks.0.attention_blocks.0.to_k.weight"),
    ("attn.to_v.weight", "transformer_blocks.0.attention_blocks.0.to_v.weight"),
    ("attn.to_out.weight", "transformer_blocks.0.attention_blocks.0.to_out.0.weight"),
    ("attn.to_out.bias", "transformer_blocks.0.attention_blocks.0.to_out.0.bias"),
    ("proj_out.weight", "proj_out.weight"),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::UNetConfig;
    use crate::params::Init;
    use candle_core::{DType, Device};

    fn layer(seed: u64) -> (ParamStore, TemporalLayer) {
        let mut store = ParamStore::new(seed, DType::F32, Device::Cpu);
        let l = TemporalLayer::new(&mut store.root("temporal.t"), 16, 2).unwrap();
        (store, l)
    }

    fn randn(store: &mut ParamStore, name: &str, shape: (usize, usize, usize, usize)) -> Tensor {
        store.get_or_init(name, shape, Init::Normal(1.0)).unwrap()
    }

    fn randomize_projection(store: &ParamStore) {
        for name in ["temporal.t.proj_out.weight", "temporal.t.proj_out.bias"] {
            let var = store.get(name).unwrap();
            let t = Tensor::randn(0f32, 0.3, var.shape(), &Device::Cpu).unwrap();
            store.set(name, &t).unwrap();
        }
    }

    #[test]
    fn zero_projection_is_exact_identity() {
        let (mut store, l) = layer(0);
        let x = randn(&mut store, "x", (8, 16, 4, 4));
        let y = l.forward(&x).unwrap();
        let a = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_locations_are_independent() {
        let (mut store, l) = layer(1);
        randomize_projection(&store);
        let x = randn(&mut store, "x", (6, 16, 3, 3));
        let base = l.branch(&x).unwrap();
        // Perturb a single spatial location in every frame.
        let mut bump = vec![0f32; 6 * 16 * 9];
        for f in 0..6 {
            for c in 0..16 {
                bump[(f * 16 + c) * 9 + 4] = 0.5;
            }
        }
        let bump = Tensor::from_vec(bump, (6, 16, 3, 3), &Device::Cpu).unwrap();
        let moved = l.branch(&(&x + bump).unwrap()).unwrap();
        let delta = (moved - base).unwrap().abs().unwrap();
        let per_location = delta.sum(0).unwrap().sum(0).unwrap().flatten_all().unwrap();
        let per_location = per_location.to_vec1::<f32>().unwrap();
        for (loc, d) in per_location.iter().enumerate() {
            if loc == 4 {
                assert!(*d > 0.0);
            } else {
                assert_eq!(*d, 0.0, "location {loc} changed");
            }
        }
    }

    #[test]
    fn single_frame_has_no_cross_frame_mixing() {
        let (mut store, l) = layer(2);
        randomize_projection(&store);
        let x = randn(&mut store, "x", (3, 16, 2, 2));
        // Frames processed one at a time equal frame slices of a batched call
        // only when there is a single frame, since attention then sees one token.
        let single = l.branch(&x.narrow(0, 1, 1).unwrap()).unwrap();
        let expected = {
            let (f, c, h, w) = (1, 16, 2, 2);
            let tokens = x.narrow(0, 1, 1).unwrap().permute([2, 3, 0, 1]).unwrap().contiguous().unwrap().reshape((h * w, f, c)).unwrap();
            let pe = layers::sinusoidal_embedding(&[0.0], c, DType::F32, &Device::Cpu).unwrap();
            let n = l.norm.forward(&tokens).unwrap().broadcast_add(&pe).unwrap();
            let v = l.attn.to_out.forward(&l.attn.to_v.forward(&n).unwrap()).unwrap();
            l.proj_out.forward(&v).unwrap().reshape((h, w, f, c)).unwrap().permute([2, 3, 0, 1]).unwrap()
        };
        let diff = (single - expected).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn insertion_covers_every_site_once() {
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        let mut unet = UNet::build(&UNetConfig::tiny(), &mut store, "unet").unwrap();
        insert_temporal_layers(&mut unet, &mut store).unwrap();
        assert_eq!(unet.temporal_layers().len(), unet.sites().len());
        assert!(matches!(insert_temporal_layers(&mut unet, &mut store), Err(Error::AlreadyTemporal)));
        for name in store.names_in_groups(&[GROUP]) {
            if name.contains("proj_out") {
                let max = store.get(&name).unwrap().abs().unwrap().max_all().unwrap();
                assert_eq!(max.to_scalar::<f32>().unwrap(), 0.0, "{name}");
            }
        }
    }

    #[test]
    fn load_rejects_mismatched_layer_by_name() {
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        let mut unet = UNet::build(&UNetConfig::tiny(), &mut store, "unet").unwrap();
        insert_temporal_layers(&mut unet, &mut store).unwrap();
        let mut source: HashMap<String, Tensor> = store
            .group_tensors(GROUP)
            .into_iter()
            .map(|(k, v)| (k, (v + 0.25).unwrap()))
            .collect();
        let bad = "temporal.mid.attn.to_q.weight".to_string();
        source.insert(bad.clone(), Tensor::zeros((3, 3), DType::F32, &Device::Cpu).unwrap());
        let before = store.hashes(&store.names_in_groups(&[GROUP])).unwrap();
        match load_temporal_init(&store, &source) {
            Err(Error::TemporalMismatch(lines)) => {
                assert_eq!(lines.len(), 1);
                assert!(lines[0].starts_with(&bad), "{lines:?}");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert_eq!(before, store.hashes(&store.names_in_groups(&[GROUP])).unwrap());

        source.insert(bad.clone(), (store.get(&bad).unwrap().as_tensor() + 1.0).unwrap());
        let others: Vec<String> = store.names().filter(|n| !n.starts_with("temporal.")).map(String::from).collect();
        let frozen = store.hashes(&others).unwrap();
        assert_eq!(load_temporal_init(&store, &source).unwrap(), before.len());
        assert_eq!(frozen, store.hashes(&others).unwrap());
        assert_ne!(before, store.hashes(&store.names_in_groups(&[GROUP])).unwrap());
    }

    #[test]
    fn animatediff_prefixes_follow_block_numbering() {
        let cfg = UNetConfig::full();
        let sites = crate::backbone::enumerate_sites(&cfg);
        let prefixes: Vec<_> = sites.iter().map(|s| animatediff_prefix(s, cfg.levels())).collect();
        assert!(prefixes[0].starts_with("down_blocks.0."));
        assert!(prefixes[4].starts_with("mid_block."));
        assert!(prefixes[5].starts_with("up_blocks.0."));
        assert!(prefixes[8].starts_with("up_blocks.3."));
    }
}
