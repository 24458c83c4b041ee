//! Sketch branch: multi-scale sketch features plus the two-way fusion that
//! reintegrates them into the denoiser encoder.
//!
//! Per scale the flow is:
//!
//! 1. context fusion: `x_i = N̂_i + zeroconv(S_i)`, then a
//!    Conv→GroupNorm→Sigmoid head predicts a single-channel visual mask
//!    `vm ∈ [0,1]^{h×w}`;
//! 2. modulation: `x̂_i = vm · (γ_c(S_i)·x̃_i + β_c(S_i))` where `x̃_i` is
//!    the group-normalized `x_i` and the per-channel affines come from
//!    zero-initialized 1x1 convs on `S_i` followed by global average
//!    pooling;
//! 3. residual reintegration: `ŜN_i = N̂_i + x̂_i`.
//!
//! Every sketch-to-feature path starts from a zero convolution, so the
//! whole branch is exactly silent at initialization.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, GroupNorm, Init, ParamGroup, ParamStore, GN_EPS};
use crate::rng::Rng64;
use crate::unet::{ResBlock, TimeEmbed, UNetConfig, NUM_SCALES};

/// Multi-scale encoder over the pixel-unshuffled sketch. Mirrors the
/// masked-image encoder without the mask concatenations.
#[derive(Debug, Clone)]
pub struct SketchEncoder {
    cfg: UNetConfig,
    /// Image-to-latent factor; the sketch is pixel-unshuffled by this.
    unshuffle: usize,
    unshuffle_proj: Conv2d,
    stem: Conv2d,
    pub time: TimeEmbed,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
}

impl SketchEncoder {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &UNetConfig,
        unshuffle: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let group = ParamGroup::Trainable;
        let ch = cfg.scale_channels();
        let td = cfg.time_dim();
        let k = Init::Kaiming { gain: 1.0 };

        let r2 = unshuffle * unshuffle;
        let unshuffle_proj = Conv2d::new(
            ps,
            "sce.unshuffle_proj",
            group,
            r2,
            cfg.latent_channels,
            1,
            1,
            0,
            k,
            rng,
        )?;
        let stem = Conv2d::new(ps, "sce.stem", group, cfg.latent_channels, ch[0], 3, 1, 1, k, rng)?;
        let time = TimeEmbed::new(ps, "sce.time", group, cfg.base_width, td, rng)?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for i in 0..NUM_SCALES {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            blocks.push(ResBlock::new(
                ps,
                &format!("sce.enc{}", i + 1),
                group,
                cin,
                ch[i],
                td,
                cfg.groupnorm_groups,
                rng,
            )?);
            if i < NUM_SCALES - 1 {
                downs.push(Conv2d::new(
                    ps,
                    &format!("sce.down{}", i + 1),
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
        Ok(SketchEncoder {
            cfg: cfg.clone(),
            unshuffle,
            unshuffle_proj,
            stem,
            time,
            blocks,
            downs,
        })
    }

    /// Space-to-channel rearrangement of the single-channel sketch by the
    /// image/latent factor, followed by a trained 1x1 projection. The
    /// rearrangement itself is lossless: every input value lands in exactly
    /// one output cell.
    pub fn pixel_unshuffle_embed(&self, g: &mut Graph, s0: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(s0).dims4();
        if c != 1 {
            return Err(Error::shape(
                "pixel_unshuffle_embed",
                format!("sketch must be single-channel, got {c}"),
            ));
        }
        if h % self.unshuffle != 0 || w % self.unshuffle != 0 {
            return Err(Error::shape(
                "pixel_unshuffle_embed",
                format!("{h}x{w} is not divisible by {}", self.unshuffle),
            ));
        }
        let u = g.pixel_unshuffle(s0, self.unshuffle);
        Ok(self.unshuffle_proj.forward(g, u))
    }

    /// Multi-scale sketch features `S_1..S_4` from the embedded sketch.
    pub fn forward(
        &self,
        g: &mut Graph,
        s_embedded: Var,
        temb: Var,
    ) -> Result<[Var; NUM_SCALES]> {
        let (_, c, h, w) = g.value(s_embedded).dims4();
        if c != self.cfg.latent_channels || h != self.cfg.latent_size || w != self.cfg.latent_size {
            return Err(Error::shape(
                "sce_forward",
                format!(
                    "embedded sketch {:?} vs configured [{}x{}x{}]",
                    g.shape(s_embedded),
                    self.cfg.latent_channels,
                    self.cfg.latent_size,
                    self.cfg.latent_size
                ),
            ));
        }
        let mut features = Vec::with_capacity(NUM_SCALES);
        let mut x = self.stem.forward(g, s_embedded);
        for i in 0..NUM_SCALES {
            x = self.blocks[i].forward(g, x, temb);
            features.push(x);
            if i < NUM_SCALES - 1 {
                x = self.downs[i].forward(g, x);
            }
        }
        Ok([features[0], features[1], features[2], features[3]])
    }
}

/// Variables of one scale's fusion pass, kept for feature dumps and tests.
#[derive(Debug, Clone, Copy)]
pub struct ScaleTrace {
    pub n_hat: Var,
    pub sketch_feat: Var,
    pub fused: Var,
    pub vm: Var,
    pub gamma: Var,
    pub beta: Var,
    pub modulated: Var,
    pub out: Var,
}

/// One scale of the bidirectional interaction.
#[derive(Debug, Clone)]
pub struct ScaleFusion {
    pub channels: usize,
    fuse_zero: Conv2d,
    vm_conv: Conv2d,
    vm_norm: GroupNorm,
    gamma_conv: Conv2d,
    beta_conv: Conv2d,
    gn_groups: usize,
}

impl ScaleFusion {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        gn_groups: usize,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let group = ParamGroup::Trainable;
        Ok(ScaleFusion {
            channels,
            fuse_zero: Conv2d::new(ps, &format!("{name}.fuse_zero"), group, channels, channels, 1, 1, 0, Init::Zeros, rng)?,
            // replicate padding keeps the visual mask constant on constant input
            vm_conv: Conv2d::new(ps, &format!("{name}.vm_conv"), group, channels, 1, 3, 1, 0, Init::Kaiming { gain: 1.0 }, rng)?,
            vm_norm: GroupNorm::new(ps, &format!("{name}.vm_norm"), group, 1, 1)?,
            gamma_conv: Conv2d::new(ps, &format!("{name}.gamma"), group, channels, channels, 1, 1, 0, Init::Zeros, rng)?,
            beta_conv: Conv2d::new(ps, &format!("{name}.beta"), group, channels, channels, 1, 1, 0, Init::Zeros, rng)?,
            gn_groups,
        })
    }

    /// Context fusion: adds the zero-convolved sketch feature to the
    /// modulated noisy feature and predicts the visual mask from the result.
    pub fn fuse_context(&self, g: &mut Graph, n_hat: Var, s: Var) -> Result<(Var, Var)> {
        if g.shape(n_hat) != g.shape(s) {
            return Err(Error::shape(
                "fuse_context",
                format!("{:?} vs {:?}", g.shape(n_hat), g.shape(s)),
            ));
        }
        let sz = self.fuse_zero.forward(g, s);
        let x = g.add(n_hat, sz);
        let padded = g.pad_replicate(x, 1);
        let c = self.vm_conv.forward(g, padded);
        let n = self.vm_norm.forward(g, c);
        let vm = g.sigmoid(n);
        Ok((x, vm))
    }

    /// Sketch-conditioned affine transform gated by the visual mask:
    /// `vm * (gamma_c(S) * norm(x) + beta_c(S))`.
    pub fn affine_modulate(&self, g: &mut Graph, x: Var, s: Var, vm: Var) -> Result<Var> {
        let (b, c, h, w) = g.value(x).dims4();
        if g.shape(s) != [b, c, h, w] {
            return Err(Error::shape(
                "affine_modulate",
                format!("sketch feature {:?} vs x {:?}", g.shape(s), g.shape(x)),
            ));
        }
        if g.shape(vm) != [b, 1, h, w] {
            return Err(Error::shape(
                "affine_modulate",
                format!("vm {:?} is not broadcastable over {:?}", g.shape(vm), g.shape(x)),
            ));
        }
        let (t, _, _) = self.affine_modulate_parts(g, x, s, vm);
        Ok(t)
    }

    fn affine_modulate_parts(&self, g: &mut Graph, x: Var, s: Var, vm: Var) -> (Var, Var, Var) {
        let xn = g.group_norm(x, self.gn_groups, GN_EPS);
        let gm_map = self.gamma_conv.forward(g, s);
        let gamma = g.mean_spatial(gm_map);
        let bt_map = self.beta_conv.forward(g, s);
        let beta = g.mean_spatial(bt_map);
        let t = g.mul_bcast_spatial(xn, gamma);
        let t = g.add_bcast_spatial(t, beta);
        let out = g.mul_bcast_channel(t, vm);
        (out, gamma, beta)
    }

    /// Full pass returning `ŜN_i = N̂_i + x̂_i` and the intermediate trace.
    pub fn apply_traced(&self, g: &mut Graph, n_hat: Var, s: Var) -> Result<ScaleTrace> {
        let (x, vm) = self.fuse_context(g, n_hat, s)?;
        let (modulated, gamma, beta) = self.affine_modulate_parts(g, x, s, vm);
        let out = g.add(n_hat, modulated);
        Ok(ScaleTrace {
            n_hat,
            sketch_feat: s,
            fused: x,
            vm,
            gamma,
            beta,
            modulated,
            out,
        })
    }

    pub fn apply(&self, g: &mut Graph, n_hat: Var, s: Var) -> Result<Var> {
        Ok(self.apply_traced(g, n_hat, s)?.out)
    }
}

/// The four per-scale fusion modules.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub scales: Vec<ScaleFusion>,
}

impl FusionStack {
    pub fn new(ps: &mut ParamStore, cfg: &UNetConfig, rng: &mut Rng64) -> Result<Self> {
        let ch = cfg.scale_channels();
        let mut scales = Vec::with_capacity(NUM_SCALES);
        for i in 0..NUM_SCALES {
            scales.push(ScaleFusion::new(
                ps,
                &format!("fusion{}", i + 1),
                ch[i],
                cfg.groupnorm_groups,
                rng,
            )?);
        }
        Ok(FusionStack { scales })
    }
}
