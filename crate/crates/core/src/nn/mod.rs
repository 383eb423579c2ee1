//! Minimal CNN stack: explicit forward/backward layers over ndarray with a
//! deterministic, single-threaded execution order. Everything is generic
//! over the scalar; training instantiates `f32`.

pub mod adam;
pub mod io;
pub mod layers;
pub mod warp;

pub use adam::Adam;
pub use layers::{
    Conv2d, ConvTranspose2d, Layer, LeakyRelu, Param, PixelOutput, Relu, ResidualBlock,
    Sequential,
};

use crate::image_core::Image;
use crate::scalar::Scalar;
use ndarray::{Array4, Axis};

pub type Tensor<S> = Array4<S>;

/// Images ([0,255]) to a normalized (N,C,H,W) batch in [-1,1].
pub fn images_to_batch<S: Scalar>(images: &[&Image<S>]) -> Tensor<S> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::zeros((images.len(), 3, h, w));
    let scale = S::from_f64_(1.0 / 127.5);
    let one = S::one();
    for (n, img) in images.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out[[n, ch, r, c]] = img.pixels[[r, c, ch]] * scale - one;
                }
            }
        }
    }
    out
}

/// Pixel-valued (N,3,H,W) batch (already in [0,255]) back to images.
pub fn batch_to_images<S: Scalar>(batch: &Tensor<S>) -> Vec<Image<S>> {
    let (n, _, h, w) = batch.dim();
    (0..n)
        .map(|i| {
            let mut img = Image::zeros(h, w);
            for r in 0..h {
                for c in 0..w {
                    for ch in 0..3 {
                        img.pixels[[r, c, ch]] = batch[[i, ch, r, c]];
                    }
                }
            }
            img
        })
        .collect()
}

/// Pixel-valued batch from images without normalization (loss targets).
pub fn images_to_pixel_batch<S: Scalar>(images: &[&Image<S>]) -> Tensor<S> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out[[n, ch, r, c]] = img.pixels[[r, c, ch]];
                }
            }
        }
    }
    out
}

/// Normalize a pixel-valued batch into [-1,1] (network input convention).
pub fn normalize_batch<S: Scalar>(batch: &Tensor<S>) -> Tensor<S> {
    let scale = S::from_f64_(1.0 / 127.5);
    batch.mapv(|v| v * scale - S::one())
}

pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat")
}
