//! Differentiable operations. Each op validates shapes once, runs a kernel,
//! and registers a closure computing vector-Jacobian products for the
//! tracked operands only.

use std::cell::RefCell;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of one (de)convolution layer. Padding is always "same":
/// `(kernel - 1) / 2` zeros on every side, so stride 1 preserves extents and
/// stride 2 halves them (rounding up). The transposed form is the exact
/// adjoint and doubles extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            transposed: false,
        }
    }

    pub fn deconv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 2,
            transposed: true,
        }
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Weight tensor shape: `[out, in, k, k]` for convolution,
    /// `[in, out, k, k]` for the transposed form (the adjoint shares the
    /// underlying layout, so the same buffer serves both directions).
    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            [self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn output_extents(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transposed {
            (h * 2, w * 2)
        } else {
            (
                kernels::conv_out_extent(h, self.kernel, self.stride),
                kernels::conv_out_extent(w, self.kernel, self.stride),
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Unsupported {
                op: "conv2d",
                detail: "channel counts must be positive".into(),
            });
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Unsupported {
                op: "conv2d",
                detail: format!("kernel size {} must be odd for same padding", self.kernel),
            });
        }
        if self.transposed {
            if self.stride != 2 {
                return Err(Error::Unsupported {
                    op: "conv2d_transposed",
                    detail: format!("only stride 2 is supported, got {}", self.stride),
                });
            }
        } else if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Unsupported {
                op: "conv2d",
                detail: format!("stride must be 1 or 2, got {}", self.stride),
            });
        }
        Ok(())
    }
}

fn expect_nchw<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected a 4-d NCHW tensor, got shape {s:?}"),
        }),
    }
}

fn expect_channels(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{what}: expected {want} channels, got {got}"),
        });
    }
    Ok(())
}

/// 2-d convolution with zero "same" padding.
///
/// `input [B, Cin, H, W]` × `weight [Cout, Cin, k, k]` (+ `bias [Cout]`)
/// → `[B, Cout, ⌈H/s⌉, ⌈W/s⌉]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.transposed {
        return Err(Error::Unsupported {
            op: "conv2d",
            detail: "spec is transposed; call conv2d_transposed".into(),
        });
    }
    let [b, ci, h, w] = expect_nchw("conv2d", input)?;
    expect_channels("conv2d", "input", ci, spec.in_channels)?;
    let wshape = spec.weight_shape();
    if weight.shape() != wshape {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight: expected shape {:?}, got {:?}", wshape, weight.shape()),
        });
    }
    if let Some(bs) = bias {
        if bs.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias: expected shape [{}], got {:?}",
                    spec.out_channels,
                    bs.shape()
                ),
            });
        }
    }
    let (co, k, s) = (spec.out_channels, spec.kernel, spec.stride);
    let (ho, wo) = spec.output_extents(h, w);
    let mut y = vec![T::zero(); b * co * ho * wo];
    kernels::conv2d_fwd(
        input.data(),
        b,
        ci,
        h,
        w,
        weight.data(),
        bias.map(|t| t.data()),
        co,
        k,
        s,
        &mut y,
    );

    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bs) = bias {
        parents.push(bs.clone());
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![b, co, ho, wo],
        y,
        parents,
        Box::new(move |gout, parents| {
            let (x, wt) = (&parents[0], &parents[1]);
            let mut contribs: Vec<Option<Vec<T>>> = vec![None; parents.len()];
            if x.is_tracked() {
                let mut dx = vec![T::zero(); x.numel()];
                kernels::conv2d_bwd_input(gout, b, co, ho, wo, wt.data(), ci, k, s, h, w, &mut dx);
                contribs[0] = Some(dx);
            }
            let need_w = wt.is_tracked();
            let need_b = has_bias && parents[2].is_tracked();
            if need_w || need_b {
                let mut dw = vec![T::zero(); wt.numel()];
                let mut db = if has_bias { vec![T::zero(); co] } else { Vec::new() };
                kernels::conv2d_bwd_weight(
                    x.data(),
                    b,
                    ci,
                    h,
                    w,
                    gout,
                    co,
                    k,
                    s,
                    &mut dw,
                    if has_bias { Some(&mut db) } else { None },
                );
                if need_w {
                    contribs[1] = Some(dw);
                }
                if need_b {
                    contribs[2] = Some(db);
                }
            }
            contribs
        }),
    ))
}

/// Transposed 2-d convolution (×2 upsampling), the exact adjoint of the
/// stride-2 `conv2d` with the same weight buffer.
///
/// `input [B, Cin, H, W]` × `weight [Cin, Cout, k, k]` (+ `bias [Cout]`)
/// → `[B, Cout, 2H, 2W]`.
pub fn conv2d_transposed<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if !spec.transposed {
        return Err(Error::Unsupported {
            op: "conv2d_transposed",
            detail: "spec is not transposed; call conv2d".into(),
        });
    }
    let [b, cu, hu, wu] = expect_nchw("conv2d_transposed", input)?;
    expect_channels("conv2d_transposed", "input", cu, spec.in_channels)?;
    let wshape = spec.weight_shape();
    if weight.shape() != wshape {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transposed",
            detail: format!("weight: expected shape {:?}, got {:?}", wshape, weight.shape()),
        });
    }
    if let Some(bs) = bias {
        if bs.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transposed",
                detail: format!(
                    "bias: expected shape [{}], got {:?}",
                    spec.out_channels,
                    bs.shape()
                ),
            });
        }
    }
    // In the adjoint view the stored weight is the [cu, cz, k, k] kernel of a
    // stride-2 convolution mapping the output z back to the input u.
    let (cz, k) = (spec.out_channels, spec.kernel);
    let (hz, wz) = (2 * hu, 2 * wu);
    let mut z = vec![T::zero(); b * cz * hz * wz];
    kernels::conv2d_bwd_input(input.data(), b, cu, hu, wu, weight.data(), cz, k, 2, hz, wz, &mut z);
    if let Some(bs) = bias {
        let bd = bs.data();
        for bi in 0..b {
            for ch in 0..cz {
                let base = (bi * cz + ch) * hz * wz;
                let bv = bd[ch];
                for v in &mut z[base..base + hz * wz] {
                    *v += bv;
                }
            }
        }
    }

    let has_bias = bias.is_some();
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bs) = bias {
        parents.push(bs.clone());
    }
    Ok(Tensor::from_op(
        "conv2d_transposed",
        vec![b, cz, hz, wz],
        z,
        parents,
        Box::new(move |gout, parents| {
            let (u, wt) = (&parents[0], &parents[1]);
            let mut contribs: Vec<Option<Vec<T>>> = vec![None; parents.len()];
            if u.is_tracked() {
                // d/du of the adjoint is the forward stride-2 convolution.
                let mut du = vec![T::zero(); u.numel()];
                kernels::conv2d_fwd(gout, b, cz, hz, wz, wt.data(), None, cu, k, 2, &mut du);
                contribs[0] = Some(du);
            }
            if wt.is_tracked() {
                // Weight gradient of the adjoint: the z-space gradient acts as
                // the convolution input, the layer's own input u as dy.
                let mut dw = vec![T::zero(); wt.numel()];
                kernels::conv2d_bwd_weight(gout, b, cz, hz, wz, u.data(), cu, k, 2, &mut dw, None);
                contribs[1] = Some(dw);
            }
            if has_bias && parents[2].is_tracked() {
                let mut db = vec![T::zero(); cz];
                for bi in 0..b {
                    for ch in 0..cz {
                        let base = (bi * cz + ch) * hz * wz;
                        let mut s = T::zero();
                        for v in &gout[base..base + hz * wz] {
                            s += *v;
                        }
                        db[ch] += s;
                    }
                }
                contribs[2] = Some(db);
            }
            contribs
        }),
    ))
}

/// Learnable affine + running statistics for one batch-norm layer.
///
/// Training mode normalizes by batch statistics (biased variance) and folds
/// the batch's unbiased variance into the running buffers:
/// `running = (1 − momentum)·running + momentum·batch_stat`.
/// Eval mode normalizes by the running buffers and touches nothing.
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: RefCell<Vec<T>>,
    pub running_var: RefCell<Vec<T>>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, tracked: bool) -> Self {
        let gamma = Tensor::full(&[channels], T::one());
        let beta = Tensor::zeros(&[channels]);
        Self {
            gamma: if tracked { gamma.tracked() } else { gamma },
            beta: if tracked { beta.tracked() } else { beta },
            running_mean: RefCell::new(vec![T::zero(); channels]),
            running_var: RefCell::new(vec![T::one(); channels]),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Per-channel batch normalization over an NCHW tensor.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = expect_nchw("batchnorm", input)?;
    expect_channels("batchnorm", "input", c, state.channels())?;
    let hw = h * w;
    let eps = T::from_f64(state.epsilon);

    let (mean, inv_std) = if training {
        let n = b * hw;
        if n <= 1 {
            return Err(Error::DegenerateStatistics);
        }
        let (mean, var) = kernels::bn_stats(input.data(), b, c, hw);
        // Fold this batch into the running buffers (unbiased variance).
        let bessel = T::from_f64(n as f64 / (n as f64 - 1.0));
        let mom = T::from_f64(state.momentum);
        let keep = T::one() - mom;
        {
            let mut rm = state.running_mean.borrow_mut();
            let mut rv = state.running_var.borrow_mut();
            for ch in 0..c {
                rm[ch] = keep * rm[ch] + mom * mean[ch];
                rv[ch] = keep * rv[ch] + mom * (var[ch] * bessel);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        (mean, inv_std)
    } else {
        let rm = state.running_mean.borrow().clone();
        let rv = state.running_var.borrow();
        let inv_std: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        (rm, inv_std)
    };

    let mut y = vec![T::zero(); input.numel()];
    kernels::bn_apply(
        input.data(),
        b,
        c,
        hw,
        &mean,
        &inv_std,
        state.gamma.data(),
        state.beta.data(),
        &mut y,
    );

    let parents = vec![input.clone(), state.gamma.clone(), state.beta.clone()];
    let shape = input.shape().to_vec();
    Ok(Tensor::from_op(
        "batchnorm",
        shape,
        y,
        parents,
        Box::new(move |gout, parents| {
            let (x, gamma) = (&parents[0], &parents[1]);
            let mut contribs: Vec<Option<Vec<T>>> = vec![None; 3];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = x.is_tracked().then(|| vec![T::zero(); x.numel()]);
            if training {
                kernels::bn_bwd_train(
                    x.data(),
                    gout,
                    b,
                    c,
                    hw,
                    &mean,
                    &inv_std,
                    gamma.data(),
                    dx.as_mut(),
                    &mut dgamma,
                    &mut dbeta,
                );
            } else {
                // Statistics are constants in eval mode, so the map is affine:
                // dx = γ·inv_std·dy, dγ = Σ dy·x̂, dβ = Σ dy.
                let xd = x.data();
                let gd = gamma.data();
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let gis = gd[ch] * is;
                    let mut sdy = T::zero();
                    let mut sdyx = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for (idx, dyv) in gout[base..base + hw].iter().enumerate() {
                            sdy += *dyv;
                            sdyx += *dyv * ((xd[base + idx] - m) * is);
                        }
                        if let Some(dx) = dx.as_mut() {
                            for (dxv, dyv) in dx[base..base + hw].iter_mut().zip(&gout[base..base + hw]) {
                                *dxv = gis * *dyv;
                            }
                        }
                    }
                    dgamma[ch] = sdyx;
                    dbeta[ch] = sdy;
                }
            }
            contribs[0] = dx;
            if parents[1].is_tracked() {
                contribs[1] = Some(dgamma);
            }
            if parents[2].is_tracked() {
                contribs[2] = Some(dbeta);
            }
            contribs
        }),
    ))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut y = vec![T::zero(); input.numel()];
    kernels::relu_fwd(input.data(), &mut y);
    let shape = input.shape().to_vec();
    Tensor::from_op(
        "relu",
        shape,
        y,
        vec![input.clone()],
        Box::new(move |gout, parents| {
            if !parents[0].is_tracked() {
                return vec![None];
            }
            // x > 0 and relu(x) > 0 are the same mask; read it off the parent.
            let mut dx = vec![T::zero(); gout.len()];
            kernels::relu_bwd(parents[0].data(), gout, &mut dx);
            vec![Some(dx)]
        }),
    )
}

/// Block-average downsampling by `factor` ∈ {2, 4}. A factor-4 reduction is
/// defined as two chained 2× reductions, so the composition property holds
/// bit-for-bit by construction.
pub fn downsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor != 2 && factor != 4 {
        return Err(Error::Unsupported {
            op: "downsample",
            detail: format!("factor must be 2 or 4, got {factor}"),
        });
    }
    let [b, c, h, w] = expect_nchw("downsample", input)?;
    for extent in [h, w] {
        if extent % factor != 0 {
            return Err(Error::NotDivisible {
                op: "downsample",
                extent,
                factor,
            });
        }
    }
    let bc = b * c;
    let data = if factor == 2 {
        let mut y = vec![T::zero(); bc * (h / 2) * (w / 2)];
        kernels::downsample2(input.data(), bc, h, w, &mut y);
        y
    } else {
        let mut mid = vec![T::zero(); bc * (h / 2) * (w / 2)];
        kernels::downsample2(input.data(), bc, h, w, &mut mid);
        let mut y = vec![T::zero(); bc * (h / 4) * (w / 4)];
        kernels::downsample2(&mid, bc, h / 2, w / 2, &mut y);
        y
    };
    Ok(Tensor::from_op(
        "downsample",
        vec![b, c, h / factor, w / factor],
        data,
        vec![input.clone()],
        Box::new(move |gout, parents| {
            if !parents[0].is_tracked() {
                return vec![None];
            }
            let mut dx = vec![T::zero(); parents[0].numel()];
            kernels::downsample_bwd(gout, bc, h / factor, w / factor, factor, &mut dx);
            vec![Some(dx)]
        }),
    ))
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|gout, parents| {
            let mut contribs: Vec<Option<Vec<T>>> = vec![None; 2];
            for (i, p) in parents.iter().enumerate() {
                if p.is_tracked() {
                    contribs[i] = Some(gout.to_vec());
                }
            }
            contribs
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Σ(a−b)²
    Sum,
    /// Σ(a−b)² / numel
    Mean,
}

/// Squared-error loss between two same-shape tensors, reduced to a scalar.
pub fn squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, reduction: Reduction) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "squared_error",
            detail: format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    let n = a.numel();
    if n == 0 {
        return Err(Error::Unsupported {
            op: "squared_error",
            detail: "empty operands".into(),
        });
    }
    let scale = match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::from_f64(n as f64),
    };
    let loss = kernels::sq_err_sum(a.data(), b.data()) * scale;
    Ok(Tensor::from_op(
        "squared_error",
        vec![1],
        vec![loss],
        vec![a.clone(), b.clone()],
        Box::new(move |gout, parents| {
            let g = gout[0];
            let (a, b) = (&parents[0], &parents[1]);
            let two_gs = (T::one() + T::one()) * g * scale;
            let mut contribs: Vec<Option<Vec<T>>> = vec![None; 2];
            if a.is_tracked() {
                contribs[0] = Some(
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(av, bv)| two_gs * (*av - *bv))
                        .collect(),
                );
            }
            if b.is_tracked() {
                contribs[1] = Some(
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(av, bv)| -(two_gs * (*av - *bv)))
                        .collect(),
                );
            }
            contribs
        }),
    ))
}
