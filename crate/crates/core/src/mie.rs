//! Masked-image encoder: multi-scale context features from the masked
//! image, injected additively into the denoiser encoder.
//!
//! Mask convention throughout: pixel value 0 marks corrupted regions,
//! 1 marks visible ones. The encoder mirrors the denoiser encoder without
//! its text cross-attention; the per-scale output projections are
//! zero-initialized so the adapter is silent at the start of training.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, ParamGroup, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::unet::{ResBlock, TimeEmbed, UNetConfig, NUM_SCALES};

/// Mask downsampling factors relative to the image resolution.
pub const MASK_FACTORS: [usize; NUM_SCALES] = [8, 16, 32, 64];

/// A masked image with its binary mask; `masked_image = image * mask`.
#[derive(Debug, Clone)]
pub struct MaskedImageInput {
    pub image: Tensor,
    pub mask: Tensor,
    pub masked_image: Tensor,
}

impl MaskedImageInput {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (b, _, h, w) = image.dims4();
        if mask.shape() != [b, 1, h, w] {
            return Err(Error::shape(
                "masked_image_input",
                format!("mask {:?} vs image {:?}", mask.shape(), image.shape()),
            ));
        }
        if !mask.is_binary() {
            return Err(Error::Value("mask must be binary".into()));
        }
        let (_, c, _, _) = image.dims4();
        let mut masked = image.clone();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let mbase = bi * h * w;
                for i in 0..h * w {
                    masked.data_mut()[base + i] *= mask.data()[mbase + i];
                }
            }
        }
        Ok(MaskedImageInput {
            image,
            mask,
            masked_image: masked,
        })
    }
}

/// Min-pools a binary mask down by factors 8, 16, 32, 64: a low-resolution
/// pixel is 1 only when every covered source pixel is 1.
pub fn downsample_mask(mask: &Tensor) -> Result<[Tensor; NUM_SCALES]> {
    downsample_mask_by(mask, MASK_FACTORS[0])
}

/// Same min-pool rule with a configurable base factor; level `i` is
/// downsampled by `base << i`. Identity-latent setups use base 1.
pub fn downsample_mask_by(mask: &Tensor, base: usize) -> Result<[Tensor; NUM_SCALES]> {
    let (b, c, h, w) = mask.dims4();
    if c != 1 {
        return Err(Error::shape(
            "downsample_mask",
            format!("expected single-channel mask, got {c} channels"),
        ));
    }
    if !mask.is_binary() {
        return Err(Error::Value("downsample_mask: mask must be binary".into()));
    }
    let max_f = base << (NUM_SCALES - 1);
    if h % max_f != 0 || w % max_f != 0 {
        return Err(Error::shape(
            "downsample_mask",
            format!("{h}x{w} is not divisible by {max_f}"),
        ));
    }
    let mut out: Vec<Tensor> = Vec::with_capacity(NUM_SCALES);
    for level in 0..NUM_SCALES {
        let f = base << level;
        let (ho, wo) = (h / f, w / f);
        let mut level = vec![1.0; b * ho * wo];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut all_ones = true;
                    'scan: for sy in oy * f..(oy + 1) * f {
                        for sx in ox * f..(ox + 1) * f {
                            if mask.data()[(bi * h + sy) * w + sx] == 0.0 {
                                all_ones = false;
                                break 'scan;
                            }
                        }
                    }
                    if !all_ones {
                        level[(bi * ho + oy) * wo + ox] = 0.0;
                    }
                }
            }
        }
        out.push(Tensor::new(&[b, 1, ho, wo], level));
    }
    Ok(out.try_into().unwrap())
}

/// Elementwise per-scale sum `N_i + M_i`.
pub fn inject(
    n: &[Tensor; NUM_SCALES],
    m: &[Tensor; NUM_SCALES],
) -> Result<[Tensor; NUM_SCALES]> {
    let mut out = Vec::with_capacity(NUM_SCALES);
    for i in 0..NUM_SCALES {
        if n[i].shape() != m[i].shape() {
            return Err(Error::shape(
                "inject",
                format!("scale {}: {:?} vs {:?}", i + 1, n[i].shape(), m[i].shape()),
            ));
        }
        out.push(n[i].add(&m[i])?);
    }
    Ok(out.try_into().unwrap())
}

#[derive(Debug, Clone)]
pub struct MaskedImageEncoder {
    cfg: UNetConfig,
    stem: Conv2d,
    pub time: TimeEmbed,
    /// 1x1 convs that fold the concatenated mask level back to the feature
    /// width at scales 2..4 (the stem consumes the level-1 mask directly).
    merges: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    /// Zero-initialized per-scale output projections.
    projections: Vec<Conv2d>,
}

impl MaskedImageEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &UNetConfig, rng: &mut Rng64) -> Result<Self> {
        let group = ParamGroup::Trainable;
        let ch = cfg.scale_channels();
        let td = cfg.time_dim();
        let k = Init::Kaiming { gain: 1.0 };

        let stem = Conv2d::new(
            ps,
            "mie.stem",
            group,
            cfg.latent_channels + 1,
            ch[0],
            3,
            1,
            1,
            k,
            rng,
        )?;
        let time = TimeEmbed::new(ps, "mie.time", group, cfg.base_width, td, rng)?;
        let mut merges = Vec::new();
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let mut projections = Vec::new();
        for i in 0..NUM_SCALES {
            let cin = if i == 0 { ch[0] } else { ch[i - 1] };
            if i > 0 {
                merges.push(Conv2d::new(
                    ps,
                    &format!("mie.merge{}", i + 1),
                    group,
                    cin + 1,
                    cin,
                    1,
                    1,
                    0,
                    k,
                    rng,
                )?);
            }
            blocks.push(ResBlock::new(
                ps,
                &format!("mie.enc{}", i + 1),
                group,
                cin,
                ch[i],
                td,
                cfg.groupnorm_groups,
                rng,
            )?);
            projections.push(Conv2d::new(
                ps,
                &format!("mie.proj{}", i + 1),
                group,
                ch[i],
                ch[i],
                1,
                1,
                0,
                Init::Zeros,
                rng,
            )?);
            if i < NUM_SCALES - 1 {
                downs.push(Conv2d::new(
                    ps,
                    &format!("mie.down{}", i + 1),
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
        Ok(MaskedImageEncoder {
            cfg: cfg.clone(),
            stem,
            time,
            merges,
            blocks,
            downs,
            projections,
        })
    }

    /// Produces the multi-scale context features `M_1..M_4`. The pyramid
    /// holds the binary mask at each feature resolution; each level is
    /// concatenated channel-wise at its scale.
    pub fn forward(
        &self,
        g: &mut Graph,
        masked_latent: Var,
        pyramid: &[Var; NUM_SCALES],
        temb: Var,
    ) -> Result<[Var; NUM_SCALES]> {
        let (_, c, h, w) = g.value(masked_latent).dims4();
        if c != self.cfg.latent_channels || h != self.cfg.latent_size || w != self.cfg.latent_size {
            return Err(Error::shape(
                "mie_forward",
                format!(
                    "masked latent {:?} vs configured [{}x{}x{}]",
                    g.shape(masked_latent),
                    self.cfg.latent_channels,
                    self.cfg.latent_size,
                    self.cfg.latent_size
                ),
            ));
        }
        let mut side = self.cfg.latent_size;
        for (i, &p) in pyramid.iter().enumerate() {
            let got = g.shape(p).to_vec();
            let (b, _, _, _) = g.value(masked_latent).dims4();
            if got != [b, 1, side, side] {
                return Err(Error::shape(
                    "mie_forward",
                    format!("pyramid level {} is {:?}, expected [{b},1,{side},{side}]", i + 1, got),
                ));
            }
            if i < NUM_SCALES - 1 {
                side /= 2;
            }
        }

        let mut features = Vec::with_capacity(NUM_SCALES);
        let mut x = g.concat_channel(masked_latent, pyramid[0]);
        x = self.stem.forward(g, x);
        for i in 0..NUM_SCALES {
            if i > 0 {
                x = g.concat_channel(x, pyramid[i]);
                x = self.merges[i - 1].forward(g, x);
            }
            x = self.blocks[i].forward(g, x, temb);
            features.push(self.projections[i].forward(g, x));
            if i < NUM_SCALES - 1 {
                x = self.downs[i].forward(g, x);
            }
        }
        Ok([features[0], features[1], features[2], features[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_masks_downsample_to_constants() {
        let ones = Tensor::full(&[1, 1, 128, 128], 1.0);
        let levels = downsample_mask(&ones).unwrap();
        for (i, l) in levels.iter().enumerate() {
            let side = 128 / MASK_FACTORS[i];
            assert_eq!(l.shape(), &[1, 1, side, side]);
            assert!(l.data().iter().all(|&v| v == 1.0));
        }
        let zeros = Tensor::zeros(&[1, 1, 128, 128]);
        for l in downsample_mask(&zeros).unwrap() {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn centered_square_reduces_by_blocks() {
        // 256x256 ones-square centered in a 512 canvas; level-8 must be a
        // centered 32x32 ones-square in a 64 canvas. Checked against a
        // brute-force block reduction.
        let mut m = Tensor::zeros(&[1, 1, 512, 512]);
        for y in 128..384 {
            for x in 128..384 {
                m.data_mut()[y * 512 + x] = 1.0;
            }
        }
        let levels = downsample_mask(&m).unwrap();
        let l8 = &levels[0];
        assert_eq!(l8.shape(), &[1, 1, 64, 64]);
        // brute-force oracle
        for oy in 0..64 {
            for ox in 0..64 {
                let mut all = true;
                for sy in oy * 8..(oy + 1) * 8 {
                    for sx in ox * 8..(ox + 1) * 8 {
                        if m.data()[sy * 512 + sx] == 0.0 {
                            all = false;
                        }
                    }
                }
                let want = if all { 1.0 } else { 0.0 };
                assert_eq!(l8.data()[oy * 64 + ox], want, "at ({oy},{ox})");
                let inside = (16..48).contains(&oy) && (16..48).contains(&ox);
                assert_eq!(want == 1.0, inside);
            }
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        let m = Tensor::full(&[1, 1, 64, 64], 0.5);
        assert!(matches!(downsample_mask(&m), Err(Error::Value(_))));
    }

    #[test]
    fn masked_image_zeroed_under_mask() {
        let mut rng = Rng64::seed_from(4);
        let img = Tensor::randn(&[1, 3, 8, 8], &mut rng).map(|v| v.abs().min(1.0));
        let mut mask = Tensor::full(&[1, 1, 8, 8], 1.0);
        for i in 0..16 {
            mask.data_mut()[i] = 0.0;
        }
        let mi = MaskedImageInput::new(img, mask).unwrap();
        for i in 0..16 {
            for c in 0..3 {
                assert_eq!(mi.masked_image.data()[c * 64 + i], 0.0);
            }
        }
    }

    #[test]
    fn inject_is_elementwise_sum() {
        let mut rng = Rng64::seed_from(5);
        let mut mk = |s: usize| Tensor::randn(&[1, 2, s, s], &mut rng);
        let n = [mk(8), mk(4), mk(2), mk(1)];
        let zero = [
            Tensor::zeros(&[1, 2, 8, 8]),
            Tensor::zeros(&[1, 2, 4, 4]),
            Tensor::zeros(&[1, 2, 2, 2]),
            Tensor::zeros(&[1, 2, 1, 1]),
        ];
        let same = inject(&n, &zero).unwrap();
        for i in 0..4 {
            assert_eq!(same[i], n[i]);
        }
        let m = [mk(8), mk(4), mk(2), mk(1)];
        let nh = inject(&n, &m).unwrap();
        for i in 0..4 {
            let diff = nh[i].sub(&n[i]).unwrap();
            assert!(diff.sub(&m[i]).unwrap().max_abs() < 1e-12);
        }
        let bad = [mk(8), mk(4), mk(2), mk(2)];
        assert!(matches!(inject(&n, &bad), Err(Error::Shape { .. })));
    }
}
