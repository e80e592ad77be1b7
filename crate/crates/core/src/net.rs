//! The three-subgraph pyramid network.
//!
//! `N₁` sees the blurry input `g` at full resolution and produces a residual
//! at quarter resolution; adding the block-averaged input gives the coarsest
//! estimate `s4`. `N₂` refines `s4` to half resolution (its transposed
//! convolution doubles extents) against the skip `D₂(g)`, and `N₃` does the
//! same from half to full resolution with the skip `g` itself. Every final
//! layer starts at exactly zero, so an untrained network is the identity on
//! each pyramid level: `s4 = D₄(g)`, `s2 = D₂(g)`, `s1 = g`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    add, batchnorm, conv2d, conv2d_transposed, downsample, relu, squared_error, BatchNormState,
    ConvSpec, Reduction, Scalar, Tensor,
};

/// One convolutional stage: convolution (or its transpose), then optionally
/// batch norm, then optionally ReLU.
pub struct ConvLayer<T: Scalar> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BatchNormState<T>>,
    pub relu: bool,
}

impl<T: Scalar> ConvLayer<T> {
    fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let y = if self.spec.transposed {
            conv2d_transposed(x, &self.weight, Some(&self.bias), self.spec)?
        } else {
            conv2d(x, &self.weight, Some(&self.bias), self.spec)?
        };
        let y = match &self.bn {
            Some(state) => batchnorm(&y, state, training)?,
            None => y,
        };
        Ok(if self.relu { relu(&y) } else { y })
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel()
            + self.bias.numel()
            + self.bn.as_ref().map_or(0, |bn| bn.gamma.numel() + bn.beta.numel())
    }
}

pub struct Subgraph<T: Scalar> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Subgraph<T> {
    fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, training)?;
        }
        Ok(cur)
    }
}

/// The three pyramid estimates, coarse to fine: quarter, half, and full
/// resolution, each in the input's value range.
#[derive(Debug)]
pub struct PyramidOutput<T: Scalar> {
    pub s4: Tensor<T>,
    pub s2: Tensor<T>,
    pub s1: Tensor<T>,
}

/// Per-scale loss terms as plain numbers (`l1` is the quarter-resolution
/// term, `l3` the full-resolution one) beside the differentiable total.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

/// Channel description of one layer in the width-1 architecture table.
struct StageSpec {
    out_channels: usize,
    kernel: usize,
    stride: usize,
    transposed: bool,
    /// Final stages have no batch norm, no ReLU, and zero-initialized
    /// parameters.
    is_final: bool,
}

const N1_TABLE: [StageSpec; 7] = [
    StageSpec { out_channels: 96, kernel: 11, stride: 2, transposed: false, is_final: false },
    StageSpec { out_channels: 256, kernel: 7, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 384, kernel: 7, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 384, kernel: 7, stride: 2, transposed: false, is_final: false },
    StageSpec { out_channels: 256, kernel: 3, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 256, kernel: 3, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 3, kernel: 3, stride: 1, transposed: false, is_final: true },
];

const N23_TABLE: [StageSpec; 5] = [
    StageSpec { out_channels: 256, kernel: 5, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 256, kernel: 5, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 256, kernel: 5, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 256, kernel: 5, stride: 1, transposed: false, is_final: false },
    StageSpec { out_channels: 3, kernel: 5, stride: 2, transposed: true, is_final: true },
];

/// Hidden-channel scaling: the 3-channel image interfaces stay fixed, hidden
/// widths scale by the multiplier (never below one channel).
fn scaled(channels: usize, multiplier: f64) -> usize {
    ((channels as f64 * multiplier).round() as usize).max(1)
}

fn validate_width_multiplier(m: f64) -> Result<()> {
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::Unsupported {
            op: "DeblurNet",
            detail: format!("width_multiplier must be a positive finite number, got {m}"),
        });
    }
    Ok(())
}

/// Resolved `(name, spec)` rows for one subgraph at a given width multiplier.
fn subgraph_specs(prefix: &str, table: &[StageSpec], multiplier: f64) -> Vec<(String, ConvSpec)> {
    let mut rows = Vec::with_capacity(table.len());
    let mut in_channels = 3usize;
    for (i, stage) in table.iter().enumerate() {
        let out = if stage.is_final {
            stage.out_channels
        } else {
            scaled(stage.out_channels, multiplier)
        };
        let spec = if stage.transposed {
            ConvSpec::deconv(in_channels, out, stage.kernel)
        } else {
            ConvSpec::conv(in_channels, out, stage.kernel, stage.stride)
        };
        let kind = if stage.transposed { "deconv" } else { "conv" };
        rows.push((format!("{prefix}.{kind}{i}"), spec));
        in_channels = out;
    }
    rows
}

pub struct DeblurNet<T: Scalar> {
    pub n1: Subgraph<T>,
    pub n2: Subgraph<T>,
    pub n3: Subgraph<T>,
    pub width_multiplier: f64,
}

impl<T: Scalar> DeblurNet<T> {
    /// Builds the network with He-initialized hidden layers, zeroed final
    /// layers, and fresh batch-norm state. `tracked` decides whether the
    /// parameters participate in autodiff; inference-only uses keep it off
    /// and skip all tape bookkeeping.
    pub fn new<R: Rng>(width_multiplier: f64, tracked: bool, rng: &mut R) -> Result<Self> {
        validate_width_multiplier(width_multiplier)?;
        let build = |prefix: &str, table: &[StageSpec], rng: &mut R| -> Result<Subgraph<T>> {
            let mut layers = Vec::with_capacity(table.len());
            for ((_, spec), stage) in subgraph_specs(prefix, table, width_multiplier)
                .into_iter()
                .zip(table)
            {
                let wshape = spec.weight_shape();
                let numel = wshape.iter().product();
                let weight = if stage.is_final {
                    Tensor::zeros(&wshape)
                } else {
                    let fan_in = spec.in_channels * spec.kernel * spec.kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0f64, std).expect("std is positive");
                    let data: Vec<T> = (0..numel)
                        .map(|_| T::from_f64(dist.sample(rng)))
                        .collect();
                    Tensor::from_vec(&wshape, data)?
                };
                let bias = Tensor::zeros(&[spec.out_channels]);
                let bn = (!stage.is_final).then(|| BatchNormState::new(spec.out_channels, tracked));
                layers.push(ConvLayer {
                    spec,
                    weight: if tracked { weight.tracked() } else { weight },
                    bias: if tracked { bias.tracked() } else { bias },
                    bn,
                    relu: !stage.is_final,
                });
            }
            Ok(Subgraph { layers })
        };
        Ok(Self {
            n1: build("n1", &N1_TABLE, rng)?,
            n2: build("n2", &N23_TABLE, rng)?,
            n3: build("n3", &N23_TABLE, rng)?,
            width_multiplier,
        })
    }

    /// The resolved layer table, `(name, spec)` per layer in forward order.
    pub fn layer_table(width_multiplier: f64) -> Result<Vec<(String, ConvSpec)>> {
        validate_width_multiplier(width_multiplier)?;
        let mut rows = subgraph_specs("n1", &N1_TABLE, width_multiplier);
        rows.extend(subgraph_specs("n2", &N23_TABLE, width_multiplier));
        rows.extend(subgraph_specs("n3", &N23_TABLE, width_multiplier));
        Ok(rows)
    }

    fn check_input(&self, op: &'static str, g: &Tensor<T>) -> Result<()> {
        match *g.shape() {
            [_, 3, h, w] => {
                for extent in [h, w] {
                    if extent % 4 != 0 {
                        return Err(Error::NotDivisible { op, extent, factor: 4 });
                    }
                }
                Ok(())
            }
            ref s => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected [B, 3, H, W], got {s:?}"),
            }),
        }
    }

    /// The coarse subgraph alone: residual at quarter resolution.
    pub fn forward_n1(&self, g: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.check_input("forward_n1", g)?;
        self.n1.forward(g, training)
    }

    /// Full pyramid: `s4 = N₁(g) + D₄(g)`, `s2 = N₂(s4) + D₂(g)`,
    /// `s1 = N₃(s2) + g`.
    pub fn forward_pyramid(&self, g: &Tensor<T>, training: bool) -> Result<PyramidOutput<T>> {
        self.check_input("forward_pyramid", g)?;
        let r1 = self.n1.forward(g, training)?;
        let s4 = add(&r1, &downsample(g, 4)?)?;
        let r2 = self.n2.forward(&s4, training)?;
        let s2 = add(&r2, &downsample(g, 2)?)?;
        let r3 = self.n3.forward(&s2, training)?;
        let s1 = add(&r3, g)?;
        Ok(PyramidOutput { s4, s2, s1 })
    }

    /// Training loss: the sum of mean squared errors at the three scales,
    /// each against the correspondingly block-averaged sharp target.
    pub fn loss(&self, g: &Tensor<T>, f: &Tensor<T>, training: bool) -> Result<(Tensor<T>, LossBreakdown)> {
        if g.shape() != f.shape() {
            return Err(Error::ShapeMismatch {
                op: "loss",
                detail: format!(
                    "blurry {:?} and sharp {:?} shapes differ",
                    g.shape(),
                    f.shape()
                ),
            });
        }
        let f = f.detach();
        let py = self.forward_pyramid(g, training)?;
        let l1 = squared_error(&py.s4, &downsample(&f, 4)?, Reduction::Mean)?;
        let l2 = squared_error(&py.s2, &downsample(&f, 2)?, Reduction::Mean)?;
        let l3 = squared_error(&py.s1, &f, Reduction::Mean)?;
        let total = add(&add(&l1, &l2)?, &l3)?;
        let breakdown = LossBreakdown {
            l1: l1.item().as_f64(),
            l2: l2.item().as_f64(),
            l3: l3.item().as_f64(),
            total: total.item().as_f64(),
        };
        Ok((total, breakdown))
    }

    /// Learnable parameters in a fixed, documented order:
    /// subgraph (n1, n2, n3) → layer → weight, bias, bn.gamma, bn.beta.
    /// Checkpoints and the optimizer both rely on this order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, sg) in self.subgraphs() {
            for (i, layer) in sg.layers.iter().enumerate() {
                let kind = if layer.spec.transposed { "deconv" } else { "conv" };
                let base = format!("{prefix}.{kind}{i}");
                out.push((format!("{base}.weight"), &layer.weight));
                out.push((format!("{base}.bias"), &layer.bias));
                if let Some(bn) = &layer.bn {
                    out.push((format!("{base}.bn.gamma"), &bn.gamma));
                    out.push((format!("{base}.bn.beta"), &bn.beta));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, sg) in [("n1", &mut self.n1), ("n2", &mut self.n2), ("n3", &mut self.n3)] {
            for (i, layer) in sg.layers.iter_mut().enumerate() {
                let kind = if layer.spec.transposed { "deconv" } else { "conv" };
                let base = format!("{prefix}.{kind}{i}");
                out.push((format!("{base}.weight"), &mut layer.weight));
                out.push((format!("{base}.bias"), &mut layer.bias));
                if let Some(bn) = layer.bn.as_mut() {
                    out.push((format!("{base}.bn.gamma"), &mut bn.gamma));
                    out.push((format!("{base}.bn.beta"), &mut bn.beta));
                }
            }
        }
        out
    }

    /// Batch-norm layers with their running buffers, named like the params.
    pub fn bn_states(&self) -> Vec<(String, &BatchNormState<T>)> {
        let mut out = Vec::new();
        for (prefix, sg) in self.subgraphs() {
            for (i, layer) in sg.layers.iter().enumerate() {
                if let Some(bn) = &layer.bn {
                    let kind = if layer.spec.transposed { "deconv" } else { "conv" };
                    out.push((format!("{prefix}.{kind}{i}.bn"), bn));
                }
            }
        }
        out
    }

    fn subgraphs(&self) -> [(&'static str, &Subgraph<T>); 3] {
        [("n1", &self.n1), ("n2", &self.n2), ("n3", &self.n3)]
    }

    pub fn param_count(&self) -> usize {
        self.subgraphs()
            .iter()
            .flat_map(|(_, sg)| sg.layers.iter())
            .map(ConvLayer::param_count)
            .sum()
    }

    pub fn clear_grads(&self) {
        for (_, p) in self.params() {
            p.clear_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn width_one_table_matches_the_reference_architecture() {
        let rows = DeblurNet::<f32>::layer_table(1.0).unwrap();
        // (out_channels, kernel, stride, transposed) per layer.
        let want: Vec<(usize, usize, usize, bool)> = vec![
            (96, 11, 2, false),
            (256, 7, 1, false),
            (384, 7, 1, false),
            (384, 7, 2, false),
            (256, 3, 1, false),
            (256, 3, 1, false),
            (3, 3, 1, false),
            (256, 5, 1, false),
            (256, 5, 1, false),
            (256, 5, 1, false),
            (256, 5, 1, false),
            (3, 5, 2, true),
            (256, 5, 1, false),
            (256, 5, 1, false),
            (256, 5, 1, false),
            (256, 5, 1, false),
            (3, 5, 2, true),
        ];
        assert_eq!(rows.len(), want.len());
        for ((name, spec), (co, k, s, t)) in rows.iter().zip(&want) {
            assert_eq!(spec.out_channels, *co, "{name}: out channels");
            assert_eq!(spec.kernel, *k, "{name}: kernel");
            assert_eq!(spec.stride, *s, "{name}: stride");
            assert_eq!(spec.transposed, *t, "{name}: transposed");
        }
        // Input channels chain correctly: each subgraph starts from 3.
        assert_eq!(rows[0].1.in_channels, 3);
        assert_eq!(rows[7].1.in_channels, 3, "n2 takes the 3-channel s4");
        assert_eq!(rows[12].1.in_channels, 3, "n3 takes the 3-channel s2");
    }

    #[test]
    fn width_one_parameter_count_matches_the_closed_form() {
        // Independent arithmetic, layer by layer, from the architecture table:
        // conv params = co·ci·k² + co, plus 2·co for each batch-normed layer.
        let n1 = (96 * 3 * 11 * 11 + 96)
            + (256 * 96 * 7 * 7 + 256)
            + (384 * 256 * 7 * 7 + 384)
            + (384 * 384 * 7 * 7 + 384)
            + (256 * 384 * 3 * 3 + 256)
            + (256 * 256 * 3 * 3 + 256)
            + (3 * 256 * 3 * 3 + 3)
            + 2 * (96 + 256 + 384 + 384 + 256 + 256);
        let n23 = (256 * 3 * 5 * 5 + 256)
            + 3 * (256 * 256 * 5 * 5 + 256)
            + (256 * 3 * 5 * 5 + 3)
            + 2 * (256 * 4);
        let want = n1 + 2 * n23;
        assert_eq!(want, 24_681_033, "hand-computed total for width 1");

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DeblurNet::<f32>::new(1.0, false, &mut rng).unwrap();
        assert_eq!(net.param_count(), want);
    }

    #[test]
    fn scaled_widths_keep_io_channels_fixed() {
        let rows = DeblurNet::<f32>::layer_table(0.125).unwrap();
        assert_eq!(rows[0].1.in_channels, 3);
        assert_eq!(rows[0].1.out_channels, 12, "96/8");
        assert_eq!(rows[6].1.out_channels, 3, "n1 output stays 3");
        assert_eq!(rows[11].1.out_channels, 3, "n2 deconv output stays 3");
        // Extreme multipliers never drop below one channel.
        let tiny = DeblurNet::<f32>::layer_table(1e-6).unwrap();
        assert!(tiny.iter().all(|(_, s)| s.out_channels >= 1));
        assert!(DeblurNet::<f32>::layer_table(0.0).is_err());
        assert!(DeblurNet::<f32>::layer_table(-1.0).is_err());
        assert!(DeblurNet::<f32>::layer_table(f64::NAN).is_err());
    }

    #[test]
    fn pyramid_shapes_follow_the_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DeblurNet::<f32>::new(0.05, false, &mut rng).unwrap();
        let g = Tensor::full(&[2, 3, 32, 48], 0.5f32);
        let py = net.forward_pyramid(&g, false).unwrap();
        assert_eq!(py.s4.shape(), &[2, 3, 8, 12]);
        assert_eq!(py.s2.shape(), &[2, 3, 16, 24]);
        assert_eq!(py.s1.shape(), &[2, 3, 32, 48]);
    }

    #[test]
    fn zero_initialized_final_layers_make_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DeblurNet::<f64>::new(0.1, false, &mut rng).unwrap();
        let data: Vec<f64> = (0..3 * 16 * 16).map(|i| (i % 251) as f64 / 251.0).collect();
        let g = Tensor::from_vec(&[1, 3, 16, 16], data).unwrap();
        let py = net.forward_pyramid(&g, false).unwrap();
        // Residuals are exactly zero, so each estimate equals its skip.
        assert_eq!(py.s1.data(), g.data(), "s1 must equal g bit for bit");
        let d4 = downsample(&g, 4).unwrap();
        let d2 = downsample(&g, 2).unwrap();
        assert_eq!(py.s4.data(), d4.data());
        assert_eq!(py.s2.data(), d2.data());
    }

    #[test]
    fn forward_rejects_extents_not_divisible_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DeblurNet::<f32>::new(0.05, false, &mut rng).unwrap();
        let g = Tensor::full(&[1, 3, 30, 32], 0.1f32);
        match net.forward_pyramid(&g, false) {
            Err(Error::NotDivisible { extent: 30, factor: 4, .. }) => {}
            other => panic!("expected NotDivisible, got {other:?}"),
        }
    }

    #[test]
    fn loss_is_finite_and_decomposes(){
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DeblurNet::<f32>::new(0.05, true, &mut rng).unwrap();
        let g = Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let f = Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|i| (i % 5) as f32 / 5.0).collect()).unwrap();
        let (total, parts) = net.loss(&g, &f, true).unwrap();
        assert!((parts.total - (parts.l1 + parts.l2 + parts.l3)).abs() < 1e-6);
        assert!((total.item() as f64 - parts.total).abs() < 1e-12);
        total.backward().unwrap();
        // Gradients reached every learnable tensor except the zero-initialized
        // final weights (which still get gradients — they sit on the path).
        for (name, p) in net.params() {
            assert!(p.grad().is_some(), "no gradient reached {name}");
        }
    }

    #[test]
    fn param_names_are_stable_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DeblurNet::<f32>::new(0.05, false, &mut rng).unwrap();
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "n1.conv0.weight");
        assert_eq!(names[1], "n1.conv0.bias");
        assert_eq!(names[2], "n1.conv0.bn.gamma");
        assert!(names.contains(&"n2.deconv4.weight".to_string()));
        assert!(names.contains(&"n3.deconv4.bias".to_string()));
        // Final layers carry no bn entries.
        assert!(!names.contains(&"n1.conv6.bn.gamma".to_string()));
        // n1: 7 layers -> 7*2 + 6*2 = 26; n2/n3: 5 layers -> 5*2 + 4*2 = 18.
        assert_eq!(names.len(), 26 + 18 + 18);
    }
}
