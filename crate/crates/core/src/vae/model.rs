use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, sigmoid, DownConv, Linear, ParamStore, UpConv};

const HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
}

impl VaeArchitecture {
    /// Conv channel plan: three stride-2 layers up to 32x32 inputs, four at 64x64.
    fn conv_channels(&self) -> Result<Vec<usize>> {
        match self.image_size {
            16 | 32 => Ok(vec![32, 32, 64]),
            64 => Ok(vec![32, 32, 64, 64]),
            s => Err(Error::invalid(format!("unsupported image size {s}; expected 16, 32 or 64"))),
        }
    }

    fn bottleneck_side(&self) -> Result<usize> {
        Ok(self.image_size >> self.conv_channels()?.len())
    }
}

/// Posterior parameters, each `(B, D)`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl EncoderOutput {
    pub fn sigma(&self) -> Result<Tensor> {
        Ok((&self.log_var * 0.5)?.exp()?)
    }

    /// Rows `start..start + len` of both tensors.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { mu: self.mu.narrow(0, start, len)?, log_var: self.log_var.narrow(0, start, len)? })
    }
}

/// Convolutional encoder with a mirrored transposed-convolution decoder.
#[derive(Debug, Clone)]
pub struct ConvVae {
    arch: VaeArchitecture,
    enc_convs: Vec<DownConv>,
    enc_hidden: Linear,
    enc_out: Linear,
    dec_in: Linear,
    dec_hidden: Linear,
    dec_convs: Vec<UpConv>,
}

impl ConvVae {
    pub fn new(arch: VaeArchitecture, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.latent_dim == 0 || arch.channels == 0 {
            return Err(Error::invalid("latent_dim and channels must be positive"));
        }
        let plan = arch.conv_channels()?;
        let side = arch.bottleneck_side()?;
        let flat = plan.last().copied().unwrap_or(arch.channels) * side * side;

        let mut enc_convs = Vec::new();
        let mut in_ch = arch.channels;
        for (i, &out_ch) in plan.iter().enumerate() {
            enc_convs.push(DownConv::new(store, &format!("encoder.conv{i}"), in_ch, out_ch, rng)?);
            in_ch = out_ch;
        }
        let enc_hidden = Linear::new(store, "encoder.hidden", flat, HIDDEN, rng)?;
        let enc_out = Linear::new(store, "encoder.out", HIDDEN, 2 * arch.latent_dim, rng)?;

        let dec_in = Linear::new(store, "decoder.in", arch.latent_dim, HIDDEN, rng)?;
        let dec_hidden = Linear::new(store, "decoder.hidden", HIDDEN, flat, rng)?;
        let mut dec_convs = Vec::new();
        let mut targets: Vec<usize> = plan.iter().rev().skip(1).copied().collect();
        targets.push(arch.channels);
        let mut in_ch = *plan.last().unwrap_or(&arch.channels);
        for (i, &out_ch) in targets.iter().enumerate() {
            dec_convs.push(UpConv::new(store, &format!("decoder.deconv{i}"), in_ch, out_ch, rng)?);
            in_ch = out_ch;
        }
        Ok(Self { arch, enc_convs, enc_hidden, enc_out, dec_in, dec_hidden, dec_convs })
    }

    pub fn architecture(&self) -> VaeArchitecture {
        self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let a = self.arch;
        match x.dims() {
            [_, c, h, w] if *c == a.channels && *h == a.image_size && *w == a.image_size => Ok(()),
            dims => Err(Error::invalid(format!(
                "expected images (B, {}, {s}, {s}), got {dims:?}",
                a.channels,
                s = a.image_size
            ))),
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutput> {
        self.check_images(x)?;
        let mut h = x.clone();
        for conv in &self.enc_convs {
            h = conv.forward(&h)?.relu()?;
        }
        let h = h.flatten_from(1)?;
        let h = self.enc_hidden.forward(&h)?.relu()?;
        let out = self.enc_out.forward(&h)?;
        let d = self.arch.latent_dim;
        Ok(EncoderOutput { mu: out.narrow(1, 0, d)?, log_var: out.narrow(1, d, d)? })
    }

    /// Decoder logits, `(B, C, H, W)`.
    pub fn decode_logits(&self, z: &Tensor) -> Result<Tensor> {
        let (b, d) = z.dims2()?;
        if d != self.arch.latent_dim {
            return Err(Error::invalid(format!("latent has D={d}, model expects {}", self.arch.latent_dim)));
        }
        let side = self.arch.bottleneck_side()?;
        let h = self.dec_in.forward(z)?.relu()?;
        let h = self.dec_hidden.forward(&h)?.relu()?;
        let ch = h.dims()[1] / (side * side);
        let mut h = h.reshape((b, ch, side, side))?;
        let last = self.dec_convs.len() - 1;
        for (i, conv) in self.dec_convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Decoded images in [0, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        sigmoid(&self.decode_logits(z)?)
    }

    /// `z = μ + σ ⊙ η` with `η ~ N(0, I)` drawn from `rng`.
    pub fn reparameterize(out: &EncoderOutput, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let eta = normal_tensor(out.mu.dims(), 1.0, rng)?;
        Self::reparameterize_with(out, &eta)
    }

    pub fn reparameterize_with(out: &EncoderOutput, eta: &Tensor) -> Result<Tensor> {
        Ok((&out.mu + (out.sigma()? * eta)?)?)
    }
}
