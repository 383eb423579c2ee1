//! Architecture definitions: embedding network (UNet), extracting network,
//! patch discriminator, and the surrogate zoo. All nets are fully
//! convolutional; a replicate-pad wrapper lifts arbitrary input sizes to the
//! required stride multiple and its exact adjoint keeps gradients correct.

use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::nn::layers::{seeded_rng, PadToMultiple};
use crate::nn::{
    batch_to_images, concat_channels, images_to_batch, Conv2d, ConvTranspose2d, Layer, LeakyRelu,
    Param, PixelOutput, Relu, ResidualBlock, Sequential, Tensor,
};
use crate::scalar::Scalar;
use crate::watermark::WatermarkImage;
use ndarray::s;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Strength of the embedder's watermark imprint: the fraction of the
/// watermark's deviation from blank that the initial (and reference)
/// embedding carries into the output image.
pub const WATERMARK_LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    HnetUnet,
    Exnet,
    PatchDiscriminator,
    Cnet,
    Res9,
    Res16,
    UnetSm,
}

impl NetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetKind::HnetUnet => "hnet-unet",
            NetKind::Exnet => "exnet",
            NetKind::PatchDiscriminator => "patch-discriminator",
            NetKind::Cnet => "cnet",
            NetKind::Res9 => "res9",
            NetKind::Res16 => "res16",
            NetKind::UnetSm => "unet-sm",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetKind,
    /// Width multiplier against the base width of 32 (desk-scale knob).
    pub scale: f64,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl NetworkSpec {
    pub fn new(kind: NetKind) -> Self {
        let (in_ch, out_ch) = match kind {
            NetKind::HnetUnet => (6, 3),
            NetKind::PatchDiscriminator => (3, 1),
            _ => (3, 3),
        };
        NetworkSpec {
            kind,
            scale: 1.0,
            in_ch,
            out_ch,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn validate(&self) -> Result<()> {
        let expected = NetworkSpec::new(self.kind);
        if self.in_ch != expected.in_ch || self.out_ch != expected.out_ch {
            return Err(Error::InvalidNetwork(format!(
                "{} requires {}->{} channels, got {}->{}",
                self.kind.as_str(),
                expected.in_ch,
                expected.out_ch,
                self.in_ch,
                self.out_ch
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidNetwork(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        ((32.0 * self.scale).round() as usize).max(4)
    }

    /// Input sizes are internally padded to a multiple of this.
    pub fn stride_multiple(&self) -> usize {
        match self.kind {
            NetKind::HnetUnet => 16,
            NetKind::UnetSm => 8,
            NetKind::PatchDiscriminator => 8,
            NetKind::Cnet => 1,
            _ => 2,
        }
    }

    /// Whether the net maps inputs to same-sized outputs.
    fn same_size(&self) -> bool {
        self.kind != NetKind::PatchDiscriminator
    }
}

/// UNet-style encoder-decoder with skip connections at every resolution.
struct UNet<S: Scalar> {
    downs: Vec<Conv2d<S>>,
    down_acts: Vec<LeakyRelu<S>>,
    ups: Vec<ConvTranspose2d<S>>,
    up_acts: Vec<Relu<S>>,
    final_conv: Conv2d<S>,
    out_act: PixelOutput<S>,
    depth: usize,
    in_ch: usize,
    cached_skips: Vec<Tensor<S>>,
}

impl<S: Scalar> UNet<S> {
    fn new(in_ch: usize, out_ch: usize, width: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(depth >= 2);
        // Encoder widths w, 2w, 4w, ..., capped at 8w.
        let ch = |i: usize| width * (1 << i.min(3));
        let mut downs = Vec::new();
        let mut down_acts = Vec::new();
        for i in 0..depth {
            let cin = if i == 0 { in_ch } else { ch(i - 1) };
            downs.push(Conv2d::new(&format!("down{i}"), cin, ch(i), 4, 2, 1, rng));
            down_acts.push(LeakyRelu::new(0.2));
        }
        let mut ups = Vec::new();
        let mut up_acts = Vec::new();
        // Decoder: each up halves channels to match the skip, then concat.
        let mut cur = ch(depth - 1);
        for j in 0..depth {
            let target = if j + 1 < depth { ch(depth - 2 - j) } else { width };
            ups.push(ConvTranspose2d::new(
                &format!("up{j}"),
                cur,
                target,
                4,
                2,
                1,
                rng,
            ));
            up_acts.push(Relu::new());
            cur = if j + 1 < depth { 2 * target } else { target };
        }
        // Outermost skip: the raw input joins the decoder features so the
        // final conv sees the cover directly. Start that path at an
        // identity-like mapping: a center-tap weight on channel k of
        // the skip feeds output channel k, so the embedder begins close to
        // a pass-through of the cover and only has to learn the residual.
        let mut final_conv = Conv2d::new("out", cur + in_ch, out_ch, 3, 1, 1, rng);
        // Zero the final conv so the initial output is exactly the identity
        // and leak taps set below; the decoder then trains as a residual
        // correction instead of starting as noise the skip must fight.
        final_conv.weight.value.fill(S::zero());
        for k in 0..out_ch.min(in_ch) {
            let col = (cur + k) * 9 + 4;
            final_conv.weight.value[[k, col]] = S::from_f64_(1.1);
        }
        // When a second input group exists (the embedder's watermark
        // channels), leak it faintly into the output as well; this
        // bootstraps the embed/extract communication channel instead of
        // waiting for it to emerge from a dead start.
        if in_ch >= 2 * out_ch {
            for k in 0..out_ch {
                let col = (cur + out_ch + k) * 9 + 4;
                final_conv.weight.value[[k, col]] = S::from_f64_(WATERMARK_LEAK);
                // Cancel the leak's offset where the watermark is blank
                // (normalized +1) so only marked pixels perturb the output.
                final_conv.bias.value[[0, k]] = S::from_f64_(-WATERMARK_LEAK);
            }
        }
        UNet {
            downs,
            down_acts,
            ups,
            up_acts,
            final_conv,
            out_act: PixelOutput::new(),
            depth,
            in_ch,
            cached_skips: Vec::new(),
        }
    }
}

impl<S: Scalar> Layer<S> for UNet<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let mut skips = Vec::new();
        let mut h = x.clone();
        for i in 0..self.depth {
            h = self.downs[i].forward(&h, train);
            h = self.down_acts[i].forward(&h, train);
            if i + 1 < self.depth {
                skips.push(h.clone());
            }
        }
        for j in 0..self.depth {
            h = self.ups[j].forward(&h, train);
            h = self.up_acts[j].forward(&h, train);
            if j + 1 < self.depth {
                let skip = &skips[self.depth - 2 - j];
                h = concat_channels(&h, skip);
            }
        }
        if train {
            self.cached_skips = skips;
        }
        let h = concat_channels(&h, x);
        let h = self.final_conv.forward(&h, train);
        self.out_act.forward(&h, train)
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let mut g = self.out_act.backward(grad_out);
        g = self.final_conv.backward(&g);
        // Split off the outermost input-skip gradient.
        let dec_ch = g.shape()[1] - self.in_ch;
        let g_input = g.slice(s![.., dec_ch.., .., ..]).to_owned();
        g = g.slice(s![.., ..dec_ch, .., ..]).to_owned();
        let mut skip_grads: Vec<Option<Tensor<S>>> = vec![None; self.depth.saturating_sub(1)];
        for j in (0..self.depth).rev() {
            if j + 1 < self.depth {
                // g is w.r.t. concat(up_out, skip): split along channels.
                let up_ch = self.ups[j].out_channels();
                let gu = g.slice(s![.., ..up_ch, .., ..]).to_owned();
                let gs = g.slice(s![.., up_ch.., .., ..]).to_owned();
                skip_grads[self.depth - 2 - j] = Some(gs);
                g = gu;
            }
            g = self.up_acts[j].backward(&g);
            g = self.ups[j].backward(&g);
        }
        for i in (0..self.depth).rev() {
            if i + 1 < self.depth {
                g = &g + skip_grads[i].as_ref().expect("skip grad");
            }
            g = self.down_acts[i].backward(&g);
            g = self.downs[i].backward(&g);
        }
        g + g_input
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = Vec::new();
        for d in &mut self.downs {
            p.extend(d.params_mut());
        }
        for u in &mut self.ups {
            p.extend(u.params_mut());
        }
        p.extend(self.final_conv.params_mut());
        p
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = Vec::new();
        for d in &self.downs {
            p.extend(d.params());
        }
        for u in &self.ups {
            p.extend(u.params());
        }
        p.extend(self.final_conv.params());
        p
    }
}

/// A built network: body plus the stride-alignment pad wrapper.
pub struct Network<S: Scalar> {
    pub spec: NetworkSpec,
    body: Box<dyn Layer<S>>,
    pad: PadToMultiple<S>,
    padded_out: Option<(usize, usize, usize, usize)>, // (n, ch, oh_padded, ow_padded)
}

impl<S: Scalar> Network<S> {
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let w = spec.width();
        let body: Box<dyn Layer<S>> = match spec.kind {
            NetKind::HnetUnet => Box::new(UNet::new(spec.in_ch, spec.out_ch, w, 4, &mut rng)),
            NetKind::UnetSm => Box::new(UNet::new(spec.in_ch, spec.out_ch, w / 2 + 1, 3, &mut rng)),
            NetKind::Exnet => Box::new(exnet_body(spec.in_ch, spec.out_ch, w, 4, &mut rng)),
            NetKind::Res9 => Box::new(exnet_body(spec.in_ch, spec.out_ch, w, 9, &mut rng)),
            NetKind::Res16 => Box::new(exnet_body(spec.in_ch, spec.out_ch, w, 16, &mut rng)),
            NetKind::Cnet => Box::new(cnet_body(spec.in_ch, spec.out_ch, w, &mut rng)),
            NetKind::PatchDiscriminator => Box::new(disc_body(spec.in_ch, w, &mut rng)),
        };
        Ok(Network {
            spec,
            body,
            pad: PadToMultiple::new(spec.stride_multiple()),
            padded_out: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let xp = self.pad.pad_batch(x);
        let y = self.body.forward(&xp, train);
        if self.spec.same_size() {
            self.padded_out = Some(y.dim());
            self.pad.crop_output(&y)
        } else {
            y
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let g = if self.spec.same_size() {
            // Adjoint of the output crop: zero-embed into the padded size.
            let dim = self.padded_out.expect("forward first");
            let (n, c, h, w) = grad_out.dim();
            let mut gp = Tensor::zeros(dim);
            gp.slice_mut(s![..n, ..c, ..h, ..w]).assign(grad_out);
            self.body.backward(&gp)
        } else {
            self.body.backward(grad_out)
        };
        self.pad.crop_grad(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.body.params_mut()
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        self.body.params()
    }

    pub fn zero_grad(&mut self) {
        for p in self.body.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Three-conv encoder, residual trunk, deconv + two convs decoder. Also the
/// shape of the res9/res16 surrogates, differing only in trunk depth.
fn exnet_body<S: Scalar>(
    in_ch: usize,
    out_ch: usize,
    w: usize,
    blocks: usize,
    rng: &mut ChaCha8Rng,
) -> Sequential<S> {
    let mut layers: Vec<Box<dyn Layer<S>>> = vec![
        Box::new(Conv2d::new("enc1", in_ch, w, 3, 1, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv2d::new("enc2", w, 2 * w, 3, 2, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv2d::new("enc3", 2 * w, 2 * w, 3, 1, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
    ];
    for i in 0..blocks {
        layers.push(Box::new(ResidualBlock::new(&format!("res{i}"), 2 * w, rng)));
    }
    layers.push(Box::new(ConvTranspose2d::new("dec1", 2 * w, w, 4, 2, 1, rng)));
    layers.push(Box::new(LeakyRelu::new(0.2)));
    layers.push(Box::new(Conv2d::new("dec2", w, w, 3, 1, 1, rng)));
    layers.push(Box::new(LeakyRelu::new(0.2)));
    // Bias the output head toward the blank (255) indicator: the
    // extractor's dominant target region is blank, so starting there lets
    // training focus on carving out the foreground codeword.
    let mut dec3 = Conv2d::new("dec3", w, out_ch, 3, 1, 1, rng);
    for c in 0..out_ch {
        dec3.bias.value[[0, c]] = S::from_f64_(2.0);
    }
    layers.push(Box::new(dec3));
    layers.push(Box::new(PixelOutput::new()));
    Sequential::new(layers)
}

/// Vanilla stack of stride-1 convolutions.
fn cnet_body<S: Scalar>(
    in_ch: usize,
    out_ch: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Sequential<S> {
    let mut layers: Vec<Box<dyn Layer<S>>> = vec![
        Box::new(Conv2d::new("c1", in_ch, w, 3, 1, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
    ];
    for i in 2..=4 {
        layers.push(Box::new(Conv2d::new(&format!("c{i}"), w, w, 3, 1, 1, rng)));
        layers.push(Box::new(LeakyRelu::new(0.2)));
    }
    layers.push(Box::new(Conv2d::new("c5", w, out_ch, 3, 1, 1, rng)));
    layers.push(Box::new(PixelOutput::new()));
    Sequential::new(layers)
}

/// Patch discriminator emitting one logit per receptive-field patch.
fn disc_body<S: Scalar>(in_ch: usize, w: usize, rng: &mut ChaCha8Rng) -> Sequential<S> {
    Sequential::new(vec![
        Box::new(Conv2d::new("d1", in_ch, w, 4, 2, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv2d::new("d2", w, 2 * w, 4, 2, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv2d::new("d3", 2 * w, 4 * w, 4, 2, 1, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv2d::new("d4", 4 * w, 1, 4, 1, 1, rng)),
    ])
}

/// Embed: concatenate cover and watermark along channels, run the embedder.
pub fn forward_embed<S: Scalar>(
    hnet: &mut Network<S>,
    cover: &Image<S>,
    wm: &WatermarkImage<S>,
) -> Result<Image<S>> {
    if !cover.same_size(&wm.image) {
        return Err(Error::DimensionMismatch(format!(
            "cover {}x{} vs watermark {}x{}",
            cover.height(),
            cover.width(),
            wm.image.height(),
            wm.image.width()
        )));
    }
    let cb = images_to_batch(&[cover]);
    let wb = images_to_batch(&[&wm.image]);
    let x = concat_channels(&cb, &wb);
    let y = hnet.forward(&x, false);
    Ok(batch_to_images(&y).remove(0))
}

/// Extract: run a (possibly surrogate-attacked) image through the extractor.
pub fn forward_extract<S: Scalar>(exnet: &mut Network<S>, img: &Image<S>) -> Image<S> {
    let x = images_to_batch(&[img]);
    let y = exnet.forward(&x, false);
    batch_to_images(&y).remove(0)
}
