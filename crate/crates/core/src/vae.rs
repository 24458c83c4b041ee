//! Small convolutional autoencoder bridging image and latent space.
//!
//! Encodes `[b,3,H,W]` images (values in [0,1]) into `[b,c,H/8,W/8]`
//! latents. It is pretrained once on a corpus, its latent scale is
//! calibrated so latents are roughly unit variance, and it stays frozen
//! afterwards. An identity mode passes latent-resolution inputs through
//! untouched for fast tests.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init, ParamGroup, ParamStore};
use crate::optim::Adam;
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const VAE_DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VaeMode {
    /// Inputs are already latents; encode/decode are identity maps.
    Identity,
    /// Convolutional encoder/decoder with 8x downsampling.
    Conv,
}

/// Weights and calibration captured by [`pretrain_vae`].
#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub values: Vec<(String, Tensor)>,
    pub latent_scale: f64,
    /// Mean per-pixel squared reconstruction error on the validation split.
    pub val_error: f64,
}

#[derive(Debug, Clone)]
struct ConvStack {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
    d4: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ToyVae {
    pub mode: VaeMode,
    pub latent_channels: usize,
    convs: Option<ConvStack>,
    latent_scale: Option<crate::nn::ParamId>,
}

fn build_convs(
    ps: &mut ParamStore,
    group: ParamGroup,
    lc: usize,
    rng: &mut Rng64,
) -> Result<ConvStack> {
    let k = Init::Kaiming { gain: 1.0 };
    Ok(ConvStack {
        e1: Conv2d::new(ps, "vae.e1", group, 3, 16, 3, 2, 1, k, rng)?,
        e2: Conv2d::new(ps, "vae.e2", group, 16, 32, 3, 2, 1, k, rng)?,
        e3: Conv2d::new(ps, "vae.e3", group, 32, lc, 3, 2, 1, k, rng)?,
        d1: Conv2d::new(ps, "vae.d1", group, lc, 32, 3, 1, 1, k, rng)?,
        d2: Conv2d::new(ps, "vae.d2", group, 32, 16, 3, 1, 1, k, rng)?,
        d3: Conv2d::new(ps, "vae.d3", group, 16, 8, 3, 1, 1, k, rng)?,
        d4: Conv2d::new(ps, "vae.d4", group, 8, 3, 3, 1, 1, k, rng)?,
    })
}

impl ToyVae {
    pub fn new(
        ps: &mut ParamStore,
        mode: VaeMode,
        latent_channels: usize,
        rng: &mut Rng64,
        pretrained: Option<&TrainedVae>,
    ) -> Result<Self> {
        match mode {
            VaeMode::Identity => Ok(ToyVae {
                mode,
                latent_channels,
                convs: None,
                latent_scale: None,
            }),
            VaeMode::Conv => {
                let convs = build_convs(ps, ParamGroup::Frozen, latent_channels, rng)?;
                let scale = pretrained.map(|t| t.latent_scale).unwrap_or(1.0);
                let scale_id = ps.add("vae.latent_scale", ParamGroup::Frozen, Tensor::scalar(scale))?;
                if let Some(t) = pretrained {
                    for (name, value) in &t.values {
                        let id = ps.lookup(name).ok_or_else(|| {
                            Error::Integrity(format!("pretrained weight `{name}` has no slot"))
                        })?;
                        ps.set(id, value.clone());
                    }
                }
                Ok(ToyVae {
                    mode,
                    latent_channels,
                    convs: Some(convs),
                    latent_scale: Some(scale_id),
                })
            }
        }
    }

    fn scale_value(&self, ps: &ParamStore) -> f64 {
        self.latent_scale.map(|id| ps.value(id).item()).unwrap_or(1.0)
    }

    pub fn encode_g(&self, g: &mut Graph, x: Var) -> Var {
        match (&self.convs, self.mode) {
            (None, _) => x,
            (Some(c), _) => {
                let s = self.scale_value(g.store());
                let h = c.e1.forward(g, x);
                let h = g.silu(h);
                let h = c.e2.forward(g, h);
                let h = g.silu(h);
                let z = c.e3.forward(g, h);
                g.scale(z, 1.0 / s)
            }
        }
    }

    pub fn decode_g(&self, g: &mut Graph, z: Var) -> Var {
        match (&self.convs, self.mode) {
            (None, _) => z,
            (Some(c), _) => {
                let s = self.scale_value(g.store());
                let h = g.scale(z, s);
                let h = c.d1.forward(g, h);
                let h = g.silu(h);
                let h = g.upsample_nearest_2x(h);
                let h = c.d2.forward(g, h);
                let h = g.silu(h);
                let h = g.upsample_nearest_2x(h);
                let h = c.d3.forward(g, h);
                let h = g.silu(h);
                let h = g.upsample_nearest_2x(h);
                let h = c.d4.forward(g, h);
                g.sigmoid(h)
            }
        }
    }

    fn check_encode_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4();
        match self.mode {
            VaeMode::Identity => {
                if c != self.latent_channels {
                    return Err(Error::shape(
                        "vae_encode",
                        format!(
                            "identity mode expects {} channels, got {c}",
                            self.latent_channels
                        ),
                    ));
                }
            }
            VaeMode::Conv => {
                if c != 3 {
                    return Err(Error::shape("vae_encode", format!("expected 3 channels, got {c}")));
                }
                if h % VAE_DOWNSAMPLE != 0 || w % VAE_DOWNSAMPLE != 0 {
                    return Err(Error::shape(
                        "vae_encode",
                        format!("{h}x{w} is not divisible by {VAE_DOWNSAMPLE}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Image -> latent, outside any gradient tape.
    pub fn encode(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_encode_input(x)?;
        let mut g = Graph::new(ps);
        let xv = g.constant(x.clone());
        let z = self.encode_g(&mut g, xv);
        Ok(g.value(z).clone())
    }

    /// Latent -> image, outside any gradient tape.
    pub fn decode(&self, ps: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4();
        if c != self.latent_channels {
            return Err(Error::shape(
                "vae_decode",
                format!("expected {} channels, got {c}", self.latent_channels),
            ));
        }
        let mut g = Graph::new(ps);
        let zv = g.constant(z.clone());
        let x = self.decode_g(&mut g, zv);
        Ok(g.value(x).clone())
    }
}

/// Trains a standalone VAE on `[3,H,W]` images and returns its weights,
/// latent scale and validation reconstruction error.
pub fn pretrain_vae(
    latent_channels: usize,
    train: &[Tensor],
    val: &[Tensor],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainedVae> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Value("vae pretraining needs train and val images".into()));
    }
    let mut ps = ParamStore::new();
    let mut rng = Rng64::seed_from(seed);
    let convs = build_convs(&mut ps, ParamGroup::Trainable, latent_channels, &mut rng)?;
    let vae = ToyVae {
        mode: VaeMode::Conv,
        latent_channels,
        convs: Some(convs),
        latent_scale: None, // scale calibrated after training
    };

    let mut opt = Adam::new(lr);
    for _ in 0..steps {
        let mut batch_data = Vec::new();
        let shape = train[0].shape().to_vec();
        for _ in 0..batch_size {
            let img = &train[rng.below(train.len())];
            batch_data.extend_from_slice(img.data());
        }
        let mut full_shape = vec![batch_size];
        full_shape.extend_from_slice(&shape);
        let batch = Tensor::new(&full_shape, batch_data);

        let mut g = Graph::new(&ps);
        let x = g.constant(batch);
        let z = vae.encode_g(&mut g, x);
        let rec = vae.decode_g(&mut g, z);
        let loss = g.mse(rec, x);
        let grads = g.backward(loss);
        drop(g);
        opt.step(&mut ps, &grads);
    }

    // latent scale: overall std of validation latents
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for img in val {
        let batched = img.clone().reshape(&{
            let mut s = vec![1];
            s.extend_from_slice(img.shape());
            s
        });
        let z = vae.encode(&ps, &batched)?;
        sq_sum += z.data().iter().map(|v| v * v).sum::<f64>();
        count += z.len();
    }
    let latent_scale = (sq_sum / count as f64).sqrt().max(1e-6);

    // validation reconstruction error (scale cancels in encode+decode)
    let mut err_sum = 0.0;
    let mut err_count = 0usize;
    for img in val {
        let batched = img.clone().reshape(&{
            let mut s = vec![1];
            s.extend_from_slice(img.shape());
            s
        });
        let z = vae.encode(&ps, &batched)?;
        let rec = vae.decode(&ps, &z)?;
        let d = rec.sub(&batched)?;
        err_sum += d.data().iter().map(|v| v * v).sum::<f64>();
        err_count += d.len();
    }
    let val_error = err_sum / err_count as f64;

    Ok(TrainedVae {
        values: ps
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect(),
        latent_scale,
        val_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_shapes() {
        let mut ps = ParamStore::new();
        let mut rng = Rng64::seed_from(1);
        let vae = ToyVae::new(&mut ps, VaeMode::Conv, 4, &mut rng, None).unwrap();
        let img = Tensor::zeros(&[1, 3, 512, 512]);
        let z = vae.encode(&ps, &img).unwrap();
        assert_eq!(z.shape(), &[1, 4, 64, 64]);
        let back = vae.decode(&ps, &z).unwrap();
        assert_eq!(back.shape(), &[1, 3, 512, 512]);
    }

    #[test]
    fn identity_mode_passthrough() {
        let mut ps = ParamStore::new();
        let mut rng = Rng64::seed_from(2);
        let vae = ToyVae::new(&mut ps, VaeMode::Identity, 4, &mut rng, None).unwrap();
        let x = Tensor::randn(&[2, 4, 16, 16], &mut rng);
        assert_eq!(vae.encode(&ps, &x).unwrap(), x);
        assert_eq!(vae.decode(&ps, &x).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let mut ps = ParamStore::new();
        let mut rng = Rng64::seed_from(3);
        let vae = ToyVae::new(&mut ps, VaeMode::Conv, 4, &mut rng, None).unwrap();
        let bad = Tensor::zeros(&[1, 3, 100, 100]);
        assert!(matches!(vae.encode(&ps, &bad), Err(Error::Shape { .. })));

        let mut ps2 = ParamStore::new();
        let id = ToyVae::new(&mut ps2, VaeMode::Identity, 4, &mut rng, None).unwrap();
        let bad = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(id.encode(&ps2, &bad), Err(Error::Shape { .. })));
    }
}
