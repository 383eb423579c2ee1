//! Layers with explicit backward passes. Convolutions go through im2col and
//! a single matmul per sample; inputs are cached and columns recomputed in
//! backward to keep memory flat.

use crate::scalar::Scalar;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// A learnable tensor with gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Array2<S>,
    pub grad: Array2<S>,
    pub m: Array2<S>,
    pub v: Array2<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Array2<S>) -> Self {
        let shape = value.raw_dim();
        Param {
            name: name.into(),
            value,
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

pub trait Layer<S: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S>;
    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![]
    }
    fn params(&self) -> Vec<&Param<S>> {
        vec![]
    }
}

/// Convolution geometry shared by conv and transposed conv.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, ih: usize, iw: usize) -> (usize, usize) {
        (
            (ih + 2 * self.pad - self.k) / self.stride + 1,
            (iw + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Input size produced by the transposed direction.
    pub fn transpose_out_size(&self, ih: usize, iw: usize) -> (usize, usize) {
        (
            (ih - 1) * self.stride + self.k - 2 * self.pad,
            (iw - 1) * self.stride + self.k - 2 * self.pad,
        )
    }
}

/// (C,H,W) -> (C*k*k, OH*OW) patch matrix.
fn im2col<S: Scalar>(x: &ndarray::ArrayView3<S>, g: &ConvGeom) -> Array2<S> {
    let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = g.out_size(ih, iw);
    let mut col = Array2::zeros((c * g.k * g.k, oh * ow));
    for ch in 0..c {
        for kr in 0..g.k {
            for kc in 0..g.k {
                let row = (ch * g.k + kr) * g.k + kc;
                for or in 0..oh {
                    let ir = (or * g.stride + kr) as isize - g.pad as isize;
                    if ir < 0 || ir >= ih as isize {
                        continue;
                    }
                    for oc in 0..ow {
                        let ic = (oc * g.stride + kc) as isize - g.pad as isize;
                        if ic < 0 || ic >= iw as isize {
                            continue;
                        }
                        col[[row, or * ow + oc]] = x[[ch, ir as usize, ic as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of im2col: scatter-add columns back into (C,H,W).
fn col2im<S: Scalar>(col: &Array2<S>, g: &ConvGeom, c: usize, ih: usize, iw: usize) -> Array3<S> {
    let (oh, ow) = g.out_size(ih, iw);
    let mut x = Array3::zeros((c, ih, iw));
    for ch in 0..c {
        for kr in 0..g.k {
            for kc in 0..g.k {
                let row = (ch * g.k + kr) * g.k + kc;
                for or in 0..oh {
                    let ir = (or * g.stride + kr) as isize - g.pad as isize;
                    if ir < 0 || ir >= ih as isize {
                        continue;
                    }
                    for oc in 0..ow {
                        let ic = (oc * g.stride + kc) as isize - g.pad as isize;
                        if ic < 0 || ic >= iw as isize {
                            continue;
                        }
                        x[[ch, ir as usize, ic as usize]] += col[[row, or * ow + oc]];
                    }
                }
            }
        }
    }
    x
}

fn he_normal<S: Scalar>(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        S::from_f64_(n * std)
    })
}

pub struct Conv2d<S: Scalar> {
    pub geom: ConvGeom,
    /// (Cout, Cin*k*k)
    pub weight: Param<S>,
    /// (1, Cout)
    pub bias: Param<S>,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let geom = ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad,
        };
        let fan_in = cin * k * k;
        Conv2d {
            geom,
            weight: Param::new(format!("{name}.weight"), he_normal(cout, fan_in, fan_in, rng)),
            bias: Param::new(format!("{name}.bias"), Array2::zeros((1, cout))),
            cached_input: None,
        }
    }
}

impl<S: Scalar> Layer<S> for Conv2d<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let (n, _, ih, iw) = x.dim();
        let g = self.geom;
        let (oh, ow) = g.out_size(ih, iw);
        let mut y = Array4::zeros((n, g.cout, oh, ow));
        for i in 0..n {
            let col = im2col(&x.index_axis(Axis(0), i), &g);
            let out = self.weight.value.dot(&col); // (Cout, OH*OW)
            let mut yi = y.index_axis_mut(Axis(0), i);
            for co in 0..g.cout {
                let b = self.bias.value[[0, co]];
                for or in 0..oh {
                    for oc in 0..ow {
                        yi[[co, or, oc]] = out[[co, or * ow + oc]] + b;
                    }
                }
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let x = self.cached_input.as_ref().expect("forward(train) first");
        let (n, _, ih, iw) = x.dim();
        let g = self.geom;
        let (oh, ow) = g.out_size(ih, iw);
        let mut dx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            let go = grad_out.index_axis(Axis(0), i);
            let go_mat = go
                .to_shape((g.cout, oh * ow))
                .expect("contiguous grad")
                .to_owned();
            // dW += dY * col^T, recomputing columns from the cached input.
            let col = im2col(&x.index_axis(Axis(0), i), &g);
            self.weight.grad = &self.weight.grad + &go_mat.dot(&col.t());
            for co in 0..g.cout {
                let mut acc = S::zero();
                for j in 0..oh * ow {
                    acc += go_mat[[co, j]];
                }
                self.bias.grad[[0, co]] += acc;
            }
            let dcol = self.weight.value.t().dot(&go_mat);
            dx.index_axis_mut(Axis(0), i)
                .assign(&col2im(&dcol, &g, g.cin, ih, iw));
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }
}

/// Transposed convolution: the adjoint of a Conv2d with the same geometry.
pub struct ConvTranspose2d<S: Scalar> {
    /// Geometry of the *underlying* convolution (cout -> cin direction):
    /// cin here is this layer's input channels, cout its output channels.
    pub geom: ConvGeom,
    /// (Cin, Cout*k*k)
    pub weight: Param<S>,
    pub bias: Param<S>,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Underlying conv maps cout -> cin; weight laid out as (Cin, Cout*k*k).
        let geom = ConvGeom {
            cin: cout,
            cout: cin,
            k,
            stride,
            pad,
        };
        let fan_in = cin * k * k;
        ConvTranspose2d {
            geom,
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(cin, cout * k * k, fan_in, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Array2::zeros((1, cout))),
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.geom.cin
    }
}

impl<S: Scalar> Layer<S> for ConvTranspose2d<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let (n, cin, ih, iw) = x.dim();
        let g = self.geom;
        let cout = g.cin;
        let (oh, ow) = g.transpose_out_size(ih, iw);
        let mut y = Array4::zeros((n, cout, oh, ow));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let x_mat = xi
                .to_shape((cin, ih * iw))
                .expect("contiguous input")
                .to_owned();
            let cols = self.weight.value.t().dot(&x_mat); // (Cout*k*k, IH*IW)
            let img = col2im(&cols, &g, cout, oh, ow);
            let mut yi = y.index_axis_mut(Axis(0), i);
            for co in 0..cout {
                let b = self.bias.value[[0, co]];
                for r in 0..oh {
                    for c in 0..ow {
                        yi[[co, r, c]] = img[[co, r, c]] + b;
                    }
                }
            }
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let x = self.cached_input.as_ref().expect("forward(train) first");
        let (n, cin, ih, iw) = x.dim();
        let g = self.geom;
        let mut dx = Array4::zeros(x.raw_dim());
        for i in 0..n {
            let go = grad_out.index_axis(Axis(0), i);
            let gcol = im2col(&go, &g); // (Cout*k*k, IH*IW)
            let xi = x.index_axis(Axis(0), i);
            let x_mat = xi
                .to_shape((cin, ih * iw))
                .expect("contiguous input")
                .to_owned();
            self.weight.grad = &self.weight.grad + &x_mat.dot(&gcol.t());
            let dxi = self.weight.value.dot(&gcol); // (Cin, IH*IW)
            dx.index_axis_mut(Axis(0), i).assign(
                &dxi.to_shape((cin, ih, iw)).expect("shape").to_owned(),
            );
            for co in 0..g.cin {
                let mut acc = S::zero();
                for v in go.index_axis(Axis(0), co).iter() {
                    acc += *v;
                }
                self.bias.grad[[0, co]] += acc;
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }
}

pub struct LeakyRelu<S: Scalar> {
    pub alpha: S,
    cached_input: Option<Tensor<S>>,
}

impl<S: Scalar> LeakyRelu<S> {
    pub fn new(alpha: f64) -> Self {
        LeakyRelu {
            alpha: S::from_f64_(alpha),
            cached_input: None,
        }
    }
}

impl<S: Scalar> Layer<S> for LeakyRelu<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        if train {
            self.cached_input = Some(x.clone());
        }
        let a = self.alpha;
        x.mapv(|v| if v > S::zero() { v } else { a * v })
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let x = self.cached_input.as_ref().expect("forward(train) first");
        let a = self.alpha;
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
            if xv <= S::zero() {
                *gv = *gv * a;
            }
        });
        g
    }
}

pub struct Relu<S: Scalar> {
    inner: LeakyRelu<S>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Relu {
            inner: LeakyRelu::new(0.0),
        }
    }
}

impl<S: Scalar> Default for Relu<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Layer<S> for Relu<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        self.inner.forward(x, train)
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        self.inner.backward(grad_out)
    }
}

/// Bounded pixel output: y = 127.5 * (tanh(x) + 1), range (0, 255).
pub struct PixelOutput<S: Scalar> {
    cached_tanh: Option<Tensor<S>>,
}

impl<S: Scalar> PixelOutput<S> {
    pub fn new() -> Self {
        PixelOutput { cached_tanh: None }
    }
}

impl<S: Scalar> Default for PixelOutput<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Layer<S> for PixelOutput<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let t = x.mapv(|v| v.tanh());
        let half = S::from_f64_(127.5);
        let y = t.mapv(|v| half * (v + S::one()));
        if train {
            self.cached_tanh = Some(t);
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let t = self.cached_tanh.as_ref().expect("forward(train) first");
        let half = S::from_f64_(127.5);
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(t).for_each(|gv, &tv| {
            *gv = *gv * half * (S::one() - tv * tv);
        });
        g
    }
}

pub struct Sequential<S: Scalar> {
    pub layers: Vec<Box<dyn Layer<S>>>,
}

impl<S: Scalar> Sequential<S> {
    pub fn new(layers: Vec<Box<dyn Layer<S>>>) -> Self {
        Sequential { layers }
    }
}

impl<S: Scalar> Layer<S> for Sequential<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// conv - lrelu - conv, plus identity skip.
pub struct ResidualBlock<S: Scalar> {
    conv1: Conv2d<S>,
    act: LeakyRelu<S>,
    conv2: Conv2d<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new(name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), ch, ch, 3, 1, 1, rng),
            act: LeakyRelu::new(0.2),
            conv2: Conv2d::new(&format!("{name}.conv2"), ch, ch, 3, 1, 1, rng),
        }
    }
}

impl<S: Scalar> Layer<S> for ResidualBlock<S> {
    fn forward(&mut self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let h = self.conv1.forward(x, train);
        let h = self.act.forward(&h, train);
        let h = self.conv2.forward(&h, train);
        &h + x
    }

    fn backward(&mut self, grad_out: &Tensor<S>) -> Tensor<S> {
        let g = self.conv2.backward(grad_out);
        let g = self.act.backward(&g);
        let g = self.conv1.backward(&g);
        &g + grad_out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }
}

/// Replicate-pad height/width up to a multiple; exact adjoint in backward.
pub struct PadToMultiple<S: Scalar> {
    pub multiple: usize,
    pad: Option<(usize, usize, usize, usize)>, // (orig_h, orig_w, pad_h, pad_w)
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> PadToMultiple<S> {
    pub fn new(multiple: usize) -> Self {
        PadToMultiple {
            multiple,
            pad: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn pad_batch(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (n, c, h, w) = x.dim();
        let m = self.multiple;
        let ph = (m - h % m) % m;
        let pw = (m - w % m) % m;
        self.pad = Some((h, w, ph, pw));
        if ph == 0 && pw == 0 {
            return x.clone();
        }
        let mut out = Array4::zeros((n, c, h + ph, w + pw));
        out.slice_mut(s![.., .., ..h, ..w]).assign(x);
        for r in h..h + ph {
            let row = out.slice(s![.., .., h - 1, ..]).to_owned();
            out.slice_mut(s![.., .., r, ..]).assign(&row);
        }
        for cc in w..w + pw {
            let col = out.slice(s![.., .., .., w - 1]).to_owned();
            out.slice_mut(s![.., .., .., cc]).assign(&col);
        }
        out
    }

    /// Crop an output of the padded size back to the original and fold the
    /// padded-region gradient onto the replicated edge.
    pub fn crop_grad(&self, grad_padded: &Tensor<S>) -> Tensor<S> {
        let (h, w, ph, pw) = self.pad.expect("pad_batch first");
        if ph == 0 && pw == 0 {
            return grad_padded.clone();
        }
        let mut g = grad_padded.slice(s![.., .., ..h, ..w]).to_owned();
        for r in h..h + ph {
            let extra = grad_padded.slice(s![.., .., r, ..w]).to_owned();
            let mut edge = g.slice_mut(s![.., .., h - 1, ..]);
            edge += &extra;
        }
        for cc in w..w + pw {
            let extra = grad_padded.slice(s![.., .., ..h, cc]).to_owned();
            let mut edge = g.slice_mut(s![.., .., .., w - 1]);
            edge += &extra;
        }
        // Corner region maps to the corner pixel through both replications.
        for r in h..h + ph {
            for cc in w..w + pw {
                for n in 0..g.dim().0 {
                    for ch in 0..g.dim().1 {
                        g[[n, ch, h - 1, w - 1]] += grad_padded[[n, ch, r, cc]];
                    }
                }
            }
        }
        g
    }

    pub fn crop_output(&self, y_padded: &Tensor<S>) -> Tensor<S> {
        let (h, w, ph, pw) = self.pad.expect("pad_batch first");
        if ph == 0 && pw == 0 {
            return y_padded.clone();
        }
        y_padded.slice(s![.., .., ..h, ..w]).to_owned()
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Numeric helpers for tests: flatten all parameters into one vector.
pub fn flatten_params<S: Scalar>(params: &[&Param<S>]) -> Vec<S> {
    params
        .iter()
        .flat_map(|p| p.value.iter().cloned())
        .collect()
}
