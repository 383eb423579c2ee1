//! Differentiable geometric warp over batched tensors. The forward pass
//! gathers bilinear taps per output pixel; the backward pass scatters the
//! incoming gradient onto the same taps with identical weights, so gradients
//! flow through the augmentation back to whatever produced the input.

use super::Tensor;
use crate::augment::ResolvedGeom;
use crate::scalar::Scalar;
use ndarray::Array4;

/// Warp a (N, C, H, W) tensor through a resolved geometric op (bilinear).
pub fn warp_batch<S: Scalar>(g: &ResolvedGeom, x: &Tensor<S>) -> Tensor<S> {
    let (n, c, _, _) = x.dim();
    let mut out = Array4::zeros((n, c, g.out_h, g.out_w));
    for b in 0..n {
        for ch in 0..c {
            for r in 0..g.out_h {
                for col in 0..g.out_w {
                    let mut acc = 0.0f64;
                    for &(ir, ic, w) in &g.taps(r, col) {
                        acc += w * x[[b, ch, ir, ic]].to_f64_();
                    }
                    out[[b, ch, r, col]] = S::from_f64_(acc);
                }
            }
        }
    }
    out
}

/// Adjoint of `warp_batch`: scatter output gradients back to input pixels.
pub fn warp_batch_grad<S: Scalar>(g: &ResolvedGeom, grad_out: &Tensor<S>) -> Tensor<S> {
    let (n, c, _, _) = grad_out.dim();
    let mut grad_in = Array4::zeros((n, c, g.in_h, g.in_w));
    for b in 0..n {
        for ch in 0..c {
            for r in 0..g.out_h {
                for col in 0..g.out_w {
                    let go = grad_out[[b, ch, r, col]].to_f64_();
                    if go == 0.0 {
                        continue;
                    }
                    for &(ir, ic, w) in &g.taps(r, col) {
                        grad_in[[b, ch, ir, ic]] += S::from_f64_(w * go);
                    }
                }
            }
        }
    }
    grad_in
}

/// Warp a single-channel binary map with nearest-neighbor sampling. Used for
/// mask tensors, which must stay exactly 0/1.
pub fn warp_mask_batch<S: Scalar>(g: &ResolvedGeom, m: &Tensor<S>) -> Tensor<S> {
    let (n, c, _, _) = m.dim();
    let mut out = Array4::zeros((n, c, g.out_h, g.out_w));
    for b in 0..n {
        for ch in 0..c {
            for r in 0..g.out_h {
                for col in 0..g.out_w {
                    let (ir, ic) = g.nearest(r, col);
                    out[[b, ch, r, col]] = m[[b, ch, ir, ic]];
                }
            }
        }
    }
    out
}
