//! Frozen text-conditioned U-Net denoiser at toy scale.
//!
//! The encoder exposes its four per-scale feature maps through an
//! [`EncoderTap`]; an optional replacement hook maps each published feature
//! to the one actually consumed by the next encoder block and by the skip
//! connection into the decoder. Adapters plug in through that hook without
//! touching any frozen weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, GroupNorm, Init, Linear, ParamGroup, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: [usize; NUM_SCALES],
    /// Scales (1-based in docs, 0-based here) with text cross-attention.
    pub attention_scales: [bool; NUM_SCALES],
    pub text_embed_dim: usize,
    pub groupnorm_groups: usize,
    pub max_tokens: usize,
    /// Spatial side of the latent grid.
    pub latent_size: usize,
}

impl UNetConfig {
    /// Desk-scale default: 16x16x4 latents, 32-wide base.
    pub fn toy() -> Self {
        UNetConfig {
            latent_channels: 4,
            base_width: 32,
            channel_multipliers: [1, 2, 4, 4],
            attention_scales: [false, false, true, true],
            text_embed_dim: 32,
            groupnorm_groups: 8,
            max_tokens: 12,
            latent_size: 16,
        }
    }

    /// A minimal config for fast unit tests.
    pub fn tiny() -> Self {
        UNetConfig {
            latent_channels: 2,
            base_width: 8,
            channel_multipliers: [1, 2, 2, 4],
            attention_scales: [false, false, false, true],
            text_embed_dim: 8,
            groupnorm_groups: 2,
            max_tokens: 4,
            latent_size: 16,
        }
    }

    pub fn scale_channels(&self) -> [usize; NUM_SCALES] {
        let mut ch = [0; NUM_SCALES];
        for i in 0..NUM_SCALES {
            ch[i] = self.base_width * self.channel_multipliers[i];
        }
        ch
    }

    pub fn time_dim(&self) -> usize {
        self.base_width * 4
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.scale_channels().iter().enumerate() {
            if c == 0 || c % self.groupnorm_groups != 0 {
                return Err(Error::parameter(
                    "groupnorm_groups",
                    format!(
                        "{} does not divide the {} channels of scale {}",
                        self.groupnorm_groups,
                        c,
                        i + 1
                    ),
                ));
            }
        }
        if self.latent_size % (1 << (NUM_SCALES - 1)) != 0 {
            return Err(Error::parameter(
                "latent_size",
                format!(
                    "{} is not divisible by {}",
                    self.latent_size,
                    1 << (NUM_SCALES - 1)
                ),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[b, dim]`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(i as f64) * (10000.0_f64).ln() / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(i as f64) * (10000.0_f64).ln() / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Tensor::new(&[ts.len(), dim], data)
}

/// Two-layer MLP applied to the sinusoidal embedding.
#[derive(Debug, Clone)]
pub struct TimeEmbed {
    l1: Linear,
    l2: Linear,
}

impl TimeEmbed {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        time_dim: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(TimeEmbed {
            l1: Linear::new(ps, &format!("{name}.l1"), group, in_dim, time_dim, Init::Kaiming { gain: 1.0 }, rng)?,
            l2: Linear::new(ps, &format!("{name}.l2"), group, time_dim, time_dim, Init::Kaiming { gain: 1.0 }, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, sin_emb: Var) -> Var {
        let h = self.l1.forward(g, sin_emb);
        let h = g.silu(h);
        self.l2.forward(g, h)
    }
}

/// Residual block with timestep conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        time_dim: usize,
        gn_groups: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let gn1 = GroupNorm::new(ps, &format!("{name}.gn1"), group, cin, gn_groups)?;
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), group, cin, cout, 3, 1, 1, Init::Kaiming { gain: 1.0 }, rng)?;
        let temb_proj = Linear::new(ps, &format!("{name}.temb"), group, time_dim, cout, Init::Kaiming { gain: 1.0 }, rng)?;
        let gn2 = GroupNorm::new(ps, &format!("{name}.gn2"), group, cout, gn_groups)?;
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), group, cout, cout, 3, 1, 1, Init::Kaiming { gain: 1.0 }, rng)?;
        let skip = if cin != cout {
            Some(Conv2d::new(ps, &format!("{name}.skip"), group, cin, cout, 1, 1, 0, Init::Kaiming { gain: 1.0 }, rng)?)
        } else {
            None
        };
        Ok(ResBlock {
            gn1,
            conv1,
            temb_proj,
            gn2,
            conv2,
            skip,
        })
    }

    /// `temb` is the `[b, time_dim]` output of a [`TimeEmbed`].
    pub fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Var {
        let h = self.gn1.forward(g, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h);
        let t = g.silu(temb);
        let t = self.temb_proj.forward(g, t);
        let b = g.shape(t)[0];
        let c = g.shape(t)[1];
        let t = g.reshape(t, &[b, c, 1, 1]);
        h = g.add_bcast_spatial(h, t);
        let h = self.gn2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Single-head cross-attention from spatial features to text tokens.
#[derive(Debug, Clone)]
pub struct CrossAttn {
    gn: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
}

impl CrossAttn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        text_dim: usize,
        gn_groups: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(CrossAttn {
            gn: GroupNorm::new(ps, &format!("{name}.gn"), group, channels, gn_groups)?,
            q: Linear::new(ps, &format!("{name}.q"), group, channels, channels, Init::Kaiming { gain: 1.0 }, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), group, text_dim, channels, Init::Kaiming { gain: 1.0 }, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), group, text_dim, channels, Init::Kaiming { gain: 1.0 }, rng)?,
            out: Linear::new(ps, &format!("{name}.out"), group, channels, channels, Init::Kaiming { gain: 1.0 }, rng)?,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, text: Var) -> Var {
        let (_, _, h, w) = g.value(x).dims4();
        let r = self.gn.forward(g, x);
        let seq = g.spatial_to_seq(r);
        let q = self.q.forward(g, seq);
        let k = self.k.forward(g, text);
        let v = self.v.forward(g, text);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (self.channels as f64).sqrt());
        let attn = g.softmax(scores);
        let o = g.matmul_nn(attn, v);
        let o = self.out.forward(g, o);
        let o = g.seq_to_spatial(o, h, w);
        g.add(x, o)
    }
}

/// Published and consumed per-scale encoder features of one forward pass.
#[derive(Debug, Default)]
pub struct EncoderTap {
    /// N_i exactly as the frozen encoder computed them.
    pub published: [Option<Var>; NUM_SCALES],
    /// The features actually consumed downstream (hook output, or the
    /// published feature when no hook is installed).
    pub consumed: [Option<Var>; NUM_SCALES],
}

/// Per-scale replacement hook: receives (graph, scale index, published
/// feature) and returns the feature to consume in its place.
pub type ScaleHook<'h> = dyn FnMut(&mut Graph, usize, Var) -> Var + 'h;

#[derive(Debug, Clone)]
pub struct BaseUnet {
    pub cfg: UNetConfig,
    stem: Conv2d,
    pub time: TimeEmbed,
    enc_blocks: Vec<ResBlock>,
    enc_attn: Vec<Option<CrossAttn>>,
    downs: Vec<Conv2d>,
    mid: ResBlock,
    dec_blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    head_gn: GroupNorm,
    head_conv: Conv2d,
}

impl BaseUnet {
    pub fn new(ps: &mut ParamStore, cfg: &UNetConfig, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let group = ParamGroup::Frozen;
        let ch = cfg.scale_channels();
        let td = cfg.time_dim();
        let gn = cfg.groupnorm_groups;
        let k = Init::Kaiming { gain: 1.0 };

        let stem = Conv2d::new(ps, "base.stem", group, cfg.latent_channels, ch[0], 3, 1, 1, k, rng)?;
        let time = TimeEmbed::new(ps, "base.time", group, cfg.base_width, td, rng)?;

        let mut enc_blocks = Vec::new();
        let mut enc_attn = Vec::new();
        let mut downs = Vec::new();
        for i in 0..NUM_SCALES {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            enc_blocks.push(ResBlock::new(
                ps,
                &format!("base.enc{}", i + 1),
                group,
                cin,
                ch[i],
                td,
                gn,
                rng,
            )?);
            enc_attn.push(if cfg.attention_scales[i] {
                Some(CrossAttn::new(
                    ps,
                    &format!("base.attn{}", i + 1),
                    group,
                    ch[i],
                    cfg.text_embed_dim,
                    gn,
                    rng,
                )?)
            } else {
                None
            });
            if i < NUM_SCALES - 1 {
                downs.push(Conv2d::new(
                    ps,
                    &format!("base.down{}", i + 1),
                    group,
                    ch[i],
                    ch[i],
                    3,
                    2,
                    1,
                    k,
                    rng,
                )?);
            }
        }
        let mid = ResBlock::new(ps, "base.mid", group, ch[3], ch[3], td, gn, rng)?;

        let mut dec_blocks = Vec::new();
        let mut ups = Vec::new();
        for i in 0..NUM_SCALES {
            dec_blocks.push(ResBlock::new(
                ps,
                &format!("base.dec{}", i + 1),
                group,
                ch[i] * 2,
                ch[i],
                td,
                gn,
                rng,
            )?);
            if i < NUM_SCALES - 1 {
                // up from scale i+1 into scale i
                ups.push(Conv2d::new(
                    ps,
                    &format!("base.up{}", i + 1),
                    group,
                    ch[i + 1],
                    ch[i],
                    3,
                    1,
                    1,
                    k,
                    rng,
                )?);
            }
        }
        let head_gn = GroupNorm::new(ps, "base.head.gn", group, ch[0], gn)?;
        let head_conv = Conv2d::new(ps, "base.head.conv", group, ch[0], cfg.latent_channels, 3, 1, 1, k, rng)?;

        Ok(BaseUnet {
            cfg: cfg.clone(),
            stem,
            time,
            enc_blocks,
            enc_attn,
            downs,
            mid,
            dec_blocks,
            ups,
            head_gn,
            head_conv,
        })
    }

    /// Embeds integer timesteps through the frozen time MLP.
    pub fn embed_timesteps(&self, g: &mut Graph, ts: &[usize]) -> Var {
        let sin = g.constant(sinusoidal_embedding(ts, self.cfg.base_width));
        self.time.forward(g, sin)
    }

    /// Noise prediction pass. Publishes encoder features into `tap` and
    /// routes them through `hook` when one is installed.
    pub fn forward(
        &self,
        g: &mut Graph,
        z_t: Var,
        temb: Var,
        text: Var,
        tap: &mut EncoderTap,
        mut hook: Option<&mut ScaleHook>,
    ) -> Result<Var> {
        let (_, c, _, _) = g.value(z_t).dims4();
        if c != self.cfg.latent_channels {
            return Err(Error::shape(
                "unet_forward",
                format!(
                    "input has {c} channels, config expects {}",
                    self.cfg.latent_channels
                ),
            ));
        }
        let mut x = self.stem.forward(g, z_t);
        for i in 0..NUM_SCALES {
            x = self.enc_blocks[i].forward(g, x, temb);
            if let Some(attn) = &self.enc_attn[i] {
                x = attn.forward(g, x, text);
            }
            tap.published[i] = Some(x);
            let consumed = match hook.as_deref_mut() {
                Some(h) => h(g, i, x),
                None => x,
            };
            assert_eq!(
                g.shape(consumed),
                g.shape(x),
                "scale hook changed the feature shape at scale {}",
                i + 1
            );
            tap.consumed[i] = Some(consumed);
            x = consumed;
            if i < NUM_SCALES - 1 {
                x = self.downs[i].forward(g, x);
            }
        }
        x = self.mid.forward(g, x, temb);
        for i in (0..NUM_SCALES).rev() {
            let skip = tap.consumed[i].unwrap();
            x = g.concat_channel(x, skip);
            x = self.dec_blocks[i].forward(g, x, temb);
            if i > 0 {
                x = g.upsample_nearest_2x(x);
                x = self.ups[i - 1].forward(g, x);
            }
        }
        let h = self.head_gn.forward(g, x);
        let h = g.silu(h);
        Ok(self.head_conv.forward(g, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(cfg: &UNetConfig) -> (ParamStore, BaseUnet, TensorSet) {
        let mut ps = ParamStore::new();
        let mut rng = Rng64::seed_from(11);
        let unet = BaseUnet::new(&mut ps, cfg, &mut rng).unwrap();
        let z = Tensor::randn(&[1, cfg.latent_channels, cfg.latent_size, cfg.latent_size], &mut rng);
        let text = Tensor::randn(&[1, cfg.max_tokens, cfg.text_embed_dim], &mut rng);
        (ps, unet, TensorSet { z, text })
    }

    struct TensorSet {
        z: Tensor,
        text: Tensor,
    }

    #[test]
    fn no_hook_equals_identity_hook() {
        let cfg = UNetConfig::tiny();
        let (ps, unet, ts) = build(&cfg);

        let mut g = Graph::new(&ps);
        let z = g.constant(ts.z.clone());
        let text = g.constant(ts.text.clone());
        let temb = unet.embed_timesteps(&mut g, &[5]);
        let mut tap = EncoderTap::default();
        let plain = unet
            .forward(&mut g, z, temb, text, &mut tap, None)
            .unwrap();
        let plain_out = g.value(plain).clone();

        let mut g2 = Graph::new(&ps);
        let z2 = g2.constant(ts.z.clone());
        let text2 = g2.constant(ts.text.clone());
        let temb2 = unet.embed_timesteps(&mut g2, &[5]);
        let mut tap2 = EncoderTap::default();
        let mut identity = |_: &mut Graph, _: usize, v: Var| v;
        let hooked = unet
            .forward(&mut g2, z2, temb2, text2, &mut tap2, Some(&mut identity))
            .unwrap();
        assert_eq!(plain_out, *g2.value(hooked));
    }

    #[test]
    fn published_features_halve_per_scale() {
        let cfg = UNetConfig::tiny();
        let (ps, unet, ts) = build(&cfg);
        let mut g = Graph::new(&ps);
        let z = g.constant(ts.z.clone());
        let text = g.constant(ts.text.clone());
        let temb = unet.embed_timesteps(&mut g, &[3]);
        let mut tap = EncoderTap::default();
        let out = unet.forward(&mut g, z, temb, text, &mut tap, None).unwrap();
        assert_eq!(g.shape(out), ts.z.shape());
        let ch = cfg.scale_channels();
        let mut side = cfg.latent_size;
        for i in 0..NUM_SCALES {
            let n = tap.published[i].unwrap();
            assert_eq!(g.shape(n), &[1, ch[i], side, side], "scale {}", i + 1);
            if i < NUM_SCALES - 1 {
                side /= 2;
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let cfg = UNetConfig::tiny();
        let (ps, unet, ts) = build(&cfg);
        let mut g = Graph::new(&ps);
        let bad = g.constant(Tensor::zeros(&[1, cfg.latent_channels + 1, 16, 16]));
        let text = g.constant(ts.text.clone());
        let temb = unet.embed_timesteps(&mut g, &[1]);
        let mut tap = EncoderTap::default();
        let err = unet
            .forward(&mut g, bad, temb, text, &mut tap, None)
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn config_validation_names_offending_fields() {
        let mut cfg = UNetConfig::toy();
        cfg.groupnorm_groups = 7; // does not divide 32
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("groupnorm_groups"), "{err}");
        let mut cfg = UNetConfig::toy();
        cfg.latent_size = 12; // not divisible by 8
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("latent_size"), "{err}");
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal_embedding(&[0, 1, 999], 16);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.max_abs() <= 1.0);
        // t=0 embeds to (sin=0, cos=1)
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.data()[8], 1.0);
    }
}
