//! Toy LIC model: analysis/synthesis conv stacks with ReLU- or GDN-family
//! activations, a factorized Gaussian entropy proxy on the latents, and
//! per-edge quantization bindings installed by calibration.

use crate::error::{Error, Result};
use crate::gdn::{ClipParams, GdnParams, SlimAffine};
use crate::graph::{ComputeGraph, Var};
use crate::kernels;
use crate::quant::{QuantSpec, Signedness};
use crate::rng::Rng;
use crate::scalar::{round_half_even, Scalar};
use crate::tensor::Tensor;

use super::entropy::EntropyProxy;

pub const IMAGE_CHANNELS: usize = 3;
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
/// Bit width of the latent bottleneck's integer grid (scale 1).
pub const LATENT_BITS: u8 = 16;
/// Bit width of the fixed image-input and reconstruction edges.
pub const IO_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gdn,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub n: usize,
    pub m: usize,
    pub depth: usize,
    pub activation: Activation,
    pub slim: bool,
}

/// Real range backing an activation quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeRange {
    /// Scale derived from a calibrated range (symmetric when signed).
    Range { lo: f64, hi: f64, signed: bool },
    /// Fixed scale (the latent bottleneck grid).
    FixedScale { scale: f64, signed: bool },
}

/// Quantization binding of one inter-layer edge, owned by the consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeQuant<T: Scalar> {
    /// Explicit clip layer in front of the quantizer (GDN-input edges).
    pub clip: Option<ClipParams<T>>,
    pub range: EdgeRange,
    pub bits: u8,
    /// Fixed edges (image input, reconstruction output) keep their width
    /// during mixed-precision search.
    pub fixed_bits: bool,
}

impl<T: Scalar> EdgeQuant<T> {
    pub fn spec(&self) -> Result<QuantSpec<T>> {
        match self.range {
            EdgeRange::Range { lo, hi, signed } => {
                if signed {
                    let r = lo.abs().max(hi.abs());
                    QuantSpec::make_spec(-r, r, self.bits, Signedness::Signed)
                } else {
                    QuantSpec::make_spec(0.0, hi.max(0.0), self.bits, Signedness::Unsigned)
                }
            }
            EdgeRange::FixedScale { scale, signed } => QuantSpec::fixed_scale(
                scale,
                self.bits,
                if signed { Signedness::Signed } else { Signedness::Unsigned },
            ),
        }
    }

    pub fn scale(&self) -> Result<f64> {
        Ok(self.spec()?.scales()[0].to64())
    }

    pub fn image_input() -> Self {
        EdgeQuant {
            clip: None,
            range: EdgeRange::Range { lo: 0.0, hi: 1.0, signed: false },
            bits: IO_BITS,
            fixed_bits: true,
        }
    }

    pub fn reconstruction_output<TT: Scalar>() -> EdgeQuant<TT> {
        EdgeQuant {
            clip: Some(ClipParams::TwoSided { lo: TT::zero(), hi: TT::one() }),
            range: EdgeRange::Range { lo: 0.0, hi: 1.0, signed: false },
            bits: IO_BITS,
            fixed_bits: true,
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerKind<T: Scalar> {
    Conv { w: Tensor<T>, b: Tensor<T>, stride: usize, pad: usize },
    Tconv { w: Tensor<T>, b: Tensor<T>, stride: usize, pad: usize },
    /// theta = +inf means plain ReLU (the pre-calibration state).
    ClippedRelu { theta: T },
    Gdn { p: GdnParams<T>, inverse: bool, slim: Option<SlimAffine<T>> },
    /// Identity compute; exists to carry the fixed output edge quantizer.
    QuantStub,
}

impl<T: Scalar> LayerKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Tconv { .. } => "tconv",
            LayerKind::ClippedRelu { .. } => "clipped_relu",
            LayerKind::Gdn { inverse: false, slim: None, .. } => "gdn",
            LayerKind::Gdn { inverse: true, .. } => "igdn",
            LayerKind::Gdn { inverse: false, slim: Some(_), .. } => "slim_gdn",
            LayerKind::QuantStub => "quant_stub",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Tconv { .. } | LayerKind::Gdn { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Layer<T: Scalar> {
    pub id: String,
    pub kind: LayerKind<T>,
    /// Input-edge quantization; `None` until calibration (and always `None`
    /// on the first synthesis layer, whose input is the latent grid).
    pub in_edge: Option<EdgeQuant<T>>,
    /// Weight/parameter bit width used when quantization is active.
    pub w_bits: u8,
}

/// What kind of quantizer an edge carries. Drives calibration and search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePolicy {
    /// Fixed [0,1] 8-bit image input.
    FixedImage,
    /// The latent bottleneck: rounding on the unit grid, never rebound.
    Latent,
    /// Fixed [0,1] 8-bit reconstruction output.
    FixedOutput,
    /// Calibrated from activation statistics; `unsigned` when the producer
    /// output is non-negative (post-ClippedReLU).
    Calibrated { unsigned: bool, gdn_input: bool },
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub layers: Vec<Layer<T>>,
    /// Index of the final analysis layer; its output is the latent y.
    pub latent_index: usize,
    pub entropy: EntropyProxy<T>,
    pub seed: u64,
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
    let mut t = Tensor::new(shape, data).expect("shape/data agree");
    t.requires_grad = true;
    t
}

fn zero_bias<T: Scalar>(c: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![c]);
    t.requires_grad = true;
    t
}

/// Build the toy codec: `depth` stride-2 convs (last one emitting M
/// channels) with activations in between, mirrored by transposed convs.
/// Deterministic He-uniform init from `seed`; GDN starts at β=1, γ=0.01·I.
pub fn build_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<Model<T>> {
    if !(2..=4).contains(&cfg.depth) {
        return Err(Error::invalid(format!("depth {} outside [2,4]", cfg.depth)));
    }
    if cfg.n < 4 || cfg.m < 4 {
        return Err(Error::invalid(format!("N={} M={} must be >= 4", cfg.n, cfg.m)));
    }
    if cfg.slim && cfg.activation != Activation::Gdn {
        return Err(Error::invalid("slim model requires gdn activation"));
    }
    let mut rng = Rng::new(seed);
    let mut layers: Vec<Layer<T>> = Vec::new();

    let act_layer = |idx: usize, channels: usize, inverse: bool, slim: bool, prefix: &str| Layer {
        id: format!("{}.act{}", prefix, idx),
        kind: match (inverse, slim) {
            _ if false => unreachable!(),
            (inv, s) => LayerKind::Gdn {
                p: GdnParams::init(channels, 1.0, 0.01),
                inverse: inv,
                slim: if s { Some(SlimAffine::identity(channels)) } else { None },
            },
        },
        in_edge: None,
        w_bits: 8,
    };

    for i in 0..cfg.depth {
        let c_in = if i == 0 { IMAGE_CHANNELS } else { cfg.n };
        let c_out = if i == cfg.depth - 1 { cfg.m } else { cfg.n };
        let w = he_uniform(vec![c_out, c_in, KERNEL, KERNEL], c_in * KERNEL * KERNEL, &mut rng);
        layers.push(Layer {
            id: format!("ga.conv{}", i),
            kind: LayerKind::Conv { w, b: zero_bias(c_out), stride: STRIDE, pad: PAD },
            in_edge: None,
            w_bits: 8,
        });
        if i < cfg.depth - 1 {
            match cfg.activation {
                Activation::Relu => layers.push(Layer {
                    id: format!("ga.act{}", i),
                    kind: LayerKind::ClippedRelu { theta: T::infinity() },
                    in_edge: None,
                    w_bits: 8,
                }),
                Activation::Gdn => layers.push(act_layer(i, c_out, false, cfg.slim, "ga")),
            }
        }
    }
    let latent_index = layers.len() - 1;
    for i in 0..cfg.depth {
        let c_in = if i == 0 { cfg.m } else { cfg.n };
        let c_out = if i == cfg.depth - 1 { IMAGE_CHANNELS } else { cfg.n };
        let w = he_uniform(vec![c_in, c_out, KERNEL, KERNEL], c_in * KERNEL * KERNEL, &mut rng);
        layers.push(Layer {
            id: format!("gs.tconv{}", i),
            kind: LayerKind::Tconv { w, b: zero_bias(c_out), stride: STRIDE, pad: PAD },
            in_edge: None,
            w_bits: 8,
        });
        if i < cfg.depth - 1 {
            match cfg.activation {
                Activation::Relu => layers.push(Layer {
                    id: format!("gs.act{}", i),
                    kind: LayerKind::ClippedRelu { theta: T::infinity() },
                    in_edge: None,
                    w_bits: 8,
                }),
                Activation::Gdn => layers.push(act_layer(i, c_out, true, false, "gs")),
            }
        }
    }
    layers.push(Layer {
        id: "out.stub".into(),
        kind: LayerKind::QuantStub,
        in_edge: None,
        w_bits: 8,
    });

    Ok(Model { cfg, layers, latent_index, entropy: EntropyProxy::new(cfg.m), seed })
}

/// Per-channel max-abs over the output-channel axis of a kernel.
pub fn kernel_max_abs<T: Scalar>(w: &Tensor<T>, axis: usize) -> Vec<f64> {
    let c = w.shape()[axis];
    let inner: usize = w.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0f64; c];
    for (i, &v) in w.data().iter().enumerate() {
        let ch = (i / inner) % c;
        let a = v.to64().abs();
        if a > out[ch] {
            out[ch] = a;
        }
    }
    out
}

/// Forward-pass handles the training loop needs.
pub struct GraphForward {
    pub xhat: Var,
    pub y: Var,
    pub yhat: Var,
    pub rate_bits: Var,
    /// Leaf vars of every trainable parameter, in `named_params` order.
    pub params: Vec<(String, Var)>,
}

/// Plain (tape-free) forward output.
#[derive(Debug)]
pub struct EvalForward<T: Scalar> {
    pub recon: Tensor<T>,
    pub y_rounded: Tensor<T>,
    pub rate_bits: f64,
    /// Raw input tensor of each calibrated edge (pre clip/quant), keyed by
    /// consumer layer id. Only filled when requested.
    pub edges_raw: Vec<(String, Tensor<T>)>,
    /// Post-quantizer grid values per edge (plus "latent"), for integer
    /// cross-checks. Only filled when requested.
    pub edges_grid: Vec<(String, Tensor<T>)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub quant: bool,
    pub collect_raw: bool,
    pub collect_grid: bool,
}

impl<T: Scalar> Model<T> {
    pub fn channels_of_layer(&self, idx: usize) -> usize {
        match &self.layers[idx].kind {
            LayerKind::Conv { w, .. } => w.shape()[0],
            LayerKind::Tconv { w, .. } => w.shape()[1],
            LayerKind::Gdn { p, .. } => p.channels(),
            _ => 0,
        }
    }

    /// How layer `idx`'s input edge is quantized.
    pub fn edge_policy(&self, idx: usize) -> EdgePolicy {
        if idx == 0 {
            return EdgePolicy::FixedImage;
        }
        if idx == self.latent_index + 1 {
            return EdgePolicy::Latent;
        }
        if matches!(self.layers[idx].kind, LayerKind::QuantStub) {
            return EdgePolicy::FixedOutput;
        }
        let unsigned = matches!(self.layers[idx - 1].kind, LayerKind::ClippedRelu { .. });
        let gdn_input = matches!(self.layers[idx].kind, LayerKind::Gdn { .. });
        EdgePolicy::Calibrated { unsigned, gdn_input }
    }

    /// True once every edge that needs a binding has one.
    pub fn is_calibrated(&self) -> bool {
        self.layers
            .iter()
            .enumerate()
            .all(|(i, l)| matches!(self.edge_policy(i), EdgePolicy::Latent) || l.in_edge.is_some())
    }

    pub fn layer_index(&self, id: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::invalid(format!("no layer named '{}'", id)))
    }

    /// Trainable parameters in a fixed, documented order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv { w, b, .. } | LayerKind::Tconv { w, b, .. } => {
                    out.push((format!("{}.w", l.id), w));
                    out.push((format!("{}.b", l.id), b));
                }
                LayerKind::Gdn { p, slim, .. } => {
                    out.push((format!("{}.r_beta", l.id), &p.r_beta));
                    out.push((format!("{}.r_gamma", l.id), &p.r_gamma));
                    if let Some(s) = slim {
                        out.push((format!("{}.a", l.id), &s.a));
                        out.push((format!("{}.b", l.id), &s.b));
                    }
                }
                _ => {}
            }
        }
        out.push(("entropy.log_sigma".into(), &self.entropy.log_sigma));
        out
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for l in &mut self.layers {
            let id = l.id.clone();
            match &mut l.kind {
                LayerKind::Conv { w, b, .. } | LayerKind::Tconv { w, b, .. } => {
                    f(&format!("{}.w", id), w);
                    f(&format!("{}.b", id), b);
                }
                LayerKind::Gdn { p, slim, .. } => {
                    f(&format!("{}.r_beta", id), &mut p.r_beta);
                    f(&format!("{}.r_gamma", id), &mut p.r_gamma);
                    if let Some(s) = slim {
                        f(&format!("{}.a", id), &mut s.a);
                        f(&format!("{}.b", id), &mut s.b);
                    }
                }
                _ => {}
            }
        }
        f("entropy.log_sigma", &mut self.entropy.log_sigma);
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Convert between computation precisions (exact when widening).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                id: l.id.clone(),
                kind: match &l.kind {
                    LayerKind::Conv { w, b, stride, pad } => LayerKind::Conv {
                        w: w.cast(),
                        b: b.cast(),
                        stride: *stride,
                        pad: *pad,
                    },
                    LayerKind::Tconv { w, b, stride, pad } => LayerKind::Tconv {
                        w: w.cast(),
                        b: b.cast(),
                        stride: *stride,
                        pad: *pad,
                    },
                    LayerKind::ClippedRelu { theta } => {
                        LayerKind::ClippedRelu { theta: U::of(theta.to64()) }
                    }
                    LayerKind::Gdn { p, inverse, slim } => LayerKind::Gdn {
                        p: GdnParams { r_beta: p.r_beta.cast(), r_gamma: p.r_gamma.cast() },
                        inverse: *inverse,
                        slim: slim.as_ref().map(|s| SlimAffine { a: s.a.cast(), b: s.b.cast() }),
                    },
                    LayerKind::QuantStub => LayerKind::QuantStub,
                },
                in_edge: l.in_edge.as_ref().map(|e| EdgeQuant {
                    clip: e.clip.map(|c| match c {
                        ClipParams::OneSided { theta } => {
                            ClipParams::OneSided { theta: U::of(theta.to64()) }
                        }
                        ClipParams::TwoSided { lo, hi } => {
                            ClipParams::TwoSided { lo: U::of(lo.to64()), hi: U::of(hi.to64()) }
                        }
                    }),
                    range: e.range,
                    bits: e.bits,
                    fixed_bits: e.fixed_bits,
                }),
                w_bits: l.w_bits,
            })
            .collect();
        Model {
            cfg: self.cfg,
            layers,
            latent_index: self.latent_index,
            entropy: EntropyProxy { log_sigma: self.entropy.log_sigma.cast() },
            seed: self.seed,
        }
    }

    fn weight_spec(&self, kind: &LayerKind<T>, bits: u8) -> Result<Option<(QuantSpec<T>, usize)>> {
        // axis of the output channel in the kernel layout
        match kind {
            LayerKind::Conv { w, .. } => {
                let spec = QuantSpec::per_channel_symmetric(&kernel_max_abs(w, 0), bits, 0)?;
                Ok(Some((spec, 0)))
            }
            LayerKind::Tconv { w, .. } => {
                let spec = QuantSpec::per_channel_symmetric(&kernel_max_abs(w, 1), bits, 1)?;
                Ok(Some((spec, 1)))
            }
            _ => Ok(None),
        }
    }

    /// Build the autodiff forward pass. `latent_noise` switches the
    /// bottleneck to the additive-uniform-noise training proxy; otherwise
    /// latents are rounded half-to-even (eval semantics).
    pub fn forward_graph(
        &self,
        g: &mut ComputeGraph<T>,
        input: Var,
        quant: bool,
        mut latent_noise: Option<&mut Rng>,
    ) -> Result<GraphForward> {
        if quant && !self.is_calibrated() {
            return Err(Error::NotCalibrated(
                "model has no quantization bindings; run calibration first".into(),
            ));
        }
        let mut params: Vec<(String, Var)> = Vec::new();
        let mut cur = input;
        let mut y_var: Option<Var> = None;
        let mut yhat_var: Option<Var> = None;
        let mut rate_var: Option<Var> = None;

        for (idx, layer) in self.layers.iter().enumerate() {
            let policy = self.edge_policy(idx);
            let is_gdn = matches!(layer.kind, LayerKind::Gdn { .. });
            // input-edge clip + quantizer (GDN edges consume theirs inside
            // the quantized GDN pipeline)
            let mut in_scale = 1.0f64;
            if quant {
                if let Some(edge) = &layer.in_edge {
                    in_scale = edge.scale()?;
                    if !is_gdn {
                        if let Some(clip) = &edge.clip {
                            let (lo, hi) = clip.bounds();
                            cur = g.clip(cur, T::of(lo), T::of(hi))?;
                        }
                        cur = g.fake_quant(cur, edge.spec()?)?;
                    }
                }
            }
            match &layer.kind {
                LayerKind::Conv { w, b, stride, pad } | LayerKind::Tconv { w, b, stride, pad } => {
                    let is_t = matches!(layer.kind, LayerKind::Tconv { .. });
                    let w_leaf = g.leaf(w);
                    let b_leaf = g.leaf(b);
                    params.push((format!("{}.w", layer.id), w_leaf));
                    params.push((format!("{}.b", layer.id), b_leaf));
                    let (w_used, b_used) = if quant {
                        let (spec, axis) = self
                            .weight_spec(&layer.kind, layer.w_bits)?
                            .expect("conv kinds always have weight specs");
                        let scales = spec.scales().to_vec();
                        let wq = g.fake_quant(w_leaf, spec)?;
                        // bias lives on the integer accumulator grid
                        let c_out = b.numel();
                        let mut bias_scales = Vec::with_capacity(c_out);
                        for co in 0..c_out {
                            let sw = scales[if axis == 0 { co } else { co }].to64();
                            bias_scales.push(T::of(in_scale * sw));
                        }
                        let bq = g.grid_round(b_leaf, bias_scales)?;
                        (wq, bq)
                    } else {
                        (w_leaf, b_leaf)
                    };
                    cur = if is_t {
                        g.conv2d_transpose(cur, w_used, b_used, *stride, *pad)?
                    } else {
                        g.conv2d(cur, w_used, b_used, *stride, *pad)?
                    };
                }
                LayerKind::ClippedRelu { theta } => {
                    cur = g.clipped_relu(cur, *theta)?;
                }
                LayerKind::Gdn { p, inverse, slim } => {
                    let vars = p.materialize(g)?;
                    params.push((format!("{}.r_beta", layer.id), vars.r_beta));
                    params.push((format!("{}.r_gamma", layer.id), vars.r_gamma));
                    let slim_vars = match slim {
                        Some(s) => {
                            let a = g.leaf(&s.a);
                            let b = g.leaf(&s.b);
                            params.push((format!("{}.a", layer.id), a));
                            params.push((format!("{}.b", layer.id), b));
                            Some((a, b))
                        }
                        None => None,
                    };
                    if quant {
                        let edge = layer.in_edge.as_ref().ok_or_else(|| {
                            Error::NotCalibrated(format!("edge into {} unbound", layer.id))
                        })?;
                        let spec_x = edge.spec()?;
                        let gamma_vals = p.gamma();
                        let spec_g = QuantSpec::per_channel_symmetric(
                            &kernel_max_abs(&gamma_vals, 0),
                            layer.w_bits,
                            0,
                        )?;
                        let beta_vals = p.beta();
                        let bmax = beta_vals.max_abs();
                        let spec_b =
                            QuantSpec::make_spec(-bmax, bmax, layer.w_bits, Signedness::Signed)?;
                        if *inverse {
                            // multiplicative counterpart of the quantized GDN
                            let clip = edge.clip.as_ref().ok_or_else(|| {
                                Error::NotCalibrated(format!("edge into {} has no clip", layer.id))
                            })?;
                            let (lo, hi) = clip.bounds();
                            let xc = g.clip(cur, T::of(lo), T::of(hi))?;
                            let xq = g.fake_quant(xc, spec_x)?;
                            let gq = g.fake_quant(vars.gamma, spec_g)?;
                            let bq = g.fake_quant(vars.beta, spec_b)?;
                            let ax = g.abs(xq)?;
                            let d = g.conv2d(ax, gq, bq, 1, 0)?;
                            cur = g.mul(xq, d)?;
                        } else {
                            cur = crate::gdn::quantized_gdn_forward(
                                g,
                                cur,
                                vars.beta,
                                vars.gamma,
                                &spec_x,
                                &spec_g,
                                &spec_b,
                                edge.clip.as_ref(),
                                slim_vars,
                            )?;
                        }
                    } else {
                        cur = if *inverse {
                            crate::gdn::igdn_forward(g, cur, vars.beta, vars.gamma)?
                        } else {
                            match slim_vars {
                                Some((a, b)) => {
                                    crate::gdn::slim_gdn_forward(g, cur, vars.beta, vars.gamma, a, b)?
                                }
                                None => crate::gdn::gdn_forward(g, cur, vars.beta, vars.gamma)?,
                            }
                        };
                    }
                }
                LayerKind::QuantStub => {}
            }
            let _ = policy;
            if idx == self.latent_index {
                y_var = Some(cur);
                let yhat = match latent_noise.as_deref_mut() {
                    Some(rng) => {
                        let shape = g.value(cur).shape().to_vec();
                        let n: usize = shape.iter().product();
                        let noise: Vec<T> =
                            (0..n).map(|_| T::of(rng.uniform(-0.5, 0.5))).collect();
                        let nv = g.constant(Tensor::new(shape, noise)?);
                        g.add(cur, nv)?
                    }
                    None => {
                        let rounded = g.value(cur).map(|v| T::of(round_half_even(v.to64())));
                        g.constant(rounded)
                    }
                };
                yhat_var = Some(yhat);
                let (rate, sigma_leaf) = self.entropy.rate_bits_graph(g, yhat)?;
                params.push(("entropy.log_sigma".into(), sigma_leaf));
                rate_var = Some(rate);
                cur = yhat;
            }
        }
        Ok(GraphForward {
            xhat: cur,
            y: y_var.expect("latent index valid"),
            yhat: yhat_var.expect("latent index valid"),
            rate_bits: rate_var.expect("latent index valid"),
            params,
        })
    }

    /// Plain forward in eval semantics (latents rounded half-to-even).
    pub fn forward_eval(&self, x: &Tensor<T>, opts: EvalOptions) -> Result<EvalForward<T>> {
        if opts.quant && !self.is_calibrated() {
            return Err(Error::NotCalibrated(
                "model has no quantization bindings; run calibration first".into(),
            ));
        }
        if x.shape().len() != 4 || x.shape()[1] != IMAGE_CHANNELS {
            return Err(Error::shape(
                "forward",
                format!("expected [N,{},H,W] input, got {:?}", IMAGE_CHANNELS, x.shape()),
            ));
        }
        let mut cur = x.clone();
        let mut edges_raw = Vec::new();
        let mut edges_grid = Vec::new();
        let mut y_rounded: Option<Tensor<T>> = None;
        let mut rate_bits = 0.0f64;

        for (idx, layer) in self.layers.iter().enumerate() {
            let is_gdn = matches!(layer.kind, LayerKind::Gdn { .. });
            if opts.collect_raw && !matches!(self.edge_policy(idx), EdgePolicy::Latent) {
                edges_raw.push((layer.id.clone(), cur.clone()));
            }
            let mut in_scale = 1.0f64;
            if opts.quant {
                if let Some(edge) = &layer.in_edge {
                    in_scale = edge.scale()?;
                    if !is_gdn {
                        if let Some(clip) = &edge.clip {
                            let (lo, hi) = clip.bounds();
                            cur = cur.map(|v| {
                                let f = v.to64().clamp(lo, hi);
                                T::of(f)
                            });
                        }
                        cur = edge.spec()?.fake_apply(&cur)?;
                        if opts.collect_grid {
                            edges_grid.push((layer.id.clone(), cur.clone()));
                        }
                    }
                }
            }
            match &layer.kind {
                LayerKind::Conv { w, b, stride, pad } | LayerKind::Tconv { w, b, stride, pad } => {
                    let is_t = matches!(layer.kind, LayerKind::Tconv { .. });
                    let (w_used, b_used) = if opts.quant {
                        let (spec, axis) = self
                            .weight_spec(&layer.kind, layer.w_bits)?
                            .expect("conv kinds always have weight specs");
                        let wq = spec.fake_apply(w)?;
                        let scales = spec.scales();
                        let bq_data: Vec<T> = b
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(co, &v)| {
                                let sw = scales[if axis == 0 { co } else { co }].to64();
                                let s = in_scale * sw;
                                T::of(round_half_even(v.to64() / s) * s)
                            })
                            .collect();
                        (wq, Tensor::new(b.shape().to_vec(), bq_data)?)
                    } else {
                        (w.clone(), b.clone())
                    };
                    cur = if is_t {
                        kernels::conv2d_transpose(&cur, &w_used, &b_used, *stride, *pad)?
                    } else {
                        kernels::conv2d(&cur, &w_used, &b_used, *stride, *pad)?
                    };
                }
                LayerKind::ClippedRelu { theta } => {
                    let th = *theta;
                    cur = cur.map(|v| {
                        if v < T::zero() {
                            T::zero()
                        } else if v > th {
                            th
                        } else {
                            v
                        }
                    });
                }
                LayerKind::Gdn { p, inverse, slim } => {
                    let beta = p.beta();
                    let gamma = p.gamma();
                    if opts.quant {
                        let edge = layer.in_edge.as_ref().ok_or_else(|| {
                            Error::NotCalibrated(format!("edge into {} unbound", layer.id))
                        })?;
                        let clip = edge.clip.as_ref().ok_or_else(|| {
                            Error::NotCalibrated(format!("edge into {} has no clip", layer.id))
                        })?;
                        let (lo, hi) = clip.bounds();
                        let xc = cur.map(|v| T::of(v.to64().clamp(lo, hi)));
                        let xq = edge.spec()?.fake_apply(&xc)?;
                        if opts.collect_grid {
                            edges_grid.push((layer.id.clone(), xq.clone()));
                        }
                        let spec_g = QuantSpec::per_channel_symmetric(
                            &kernel_max_abs(&gamma, 0),
                            layer.w_bits,
                            0,
                        )?;
                        let gq = spec_g.fake_apply(&gamma)?;
                        let bmax = beta.max_abs();
                        let spec_b =
                            QuantSpec::make_spec(-bmax, bmax, layer.w_bits, Signedness::Signed)?;
                        let bq = spec_b.fake_apply(&beta)?;
                        let d = crate::gdn::gdn_denominator_direct(&xq, &bq, &gq)?;
                        cur = apply_gdn_division(&xq, &d, *inverse, slim.as_ref())?;
                    } else {
                        let d = crate::gdn::gdn_denominator_direct(&cur, &beta, &gamma)?;
                        cur = apply_gdn_division(&cur, &d, *inverse, slim.as_ref())?;
                    }
                }
                LayerKind::QuantStub => {}
            }
            if idx == self.latent_index {
                let rounded = cur.map(|v| T::of(round_half_even(v.to64())));
                rate_bits = self.entropy.rate_bits(&rounded)?;
                if opts.collect_grid {
                    edges_grid.push(("latent".into(), rounded.clone()));
                }
                y_rounded = Some(rounded.clone());
                cur = rounded;
            }
        }
        Ok(EvalForward {
            recon: cur,
            y_rounded: y_rounded.expect("latent index valid"),
            rate_bits,
            edges_raw,
            edges_grid,
        })
    }
}

fn apply_gdn_division<T: Scalar>(
    x: &Tensor<T>,
    d: &Tensor<T>,
    inverse: bool,
    slim: Option<&SlimAffine<T>>,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = Tensor::zeros(shape.to_vec());
    for (i, (&xv, &dv)) in x.data().iter().zip(d.data()).enumerate() {
        if !inverse && dv.to64().abs() < kernels::DIV_FLOOR {
            return Err(Error::Numeric {
                op: "gdn",
                detail: format!("denominator underflow at index {}", i),
            });
        }
        let mut z = if inverse { xv * dv } else { xv / dv };
        if let Some(s) = slim {
            let ch = kernels::chan_of(i, c, inner);
            z = s.a.data()[ch] * z + s.b.data()[ch];
        }
        out.data_mut()[i] = z;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(act: Activation) -> ModelConfig {
        ModelConfig { n: 8, m: 12, depth: 2, activation: act, slim: false }
    }

    #[test]
    fn relu_model_parameter_count_matches_closed_form() {
        let m = build_model::<f32>(cfg(Activation::Relu), 1).unwrap();
        // conv 3->8, conv 8->12, tconv 12->8, tconv 8->3, each k=4, plus
        // biases and the 12 entropy scales
        let k2 = KERNEL * KERNEL;
        let expected = 3 * 8 * k2 + 8 + 8 * 12 * k2 + 12 + 12 * 8 * k2 + 8 + 8 * 3 * k2 + 3 + 12;
        assert_eq!(m.param_count(), expected);
        let convish = m
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Tconv { .. }))
            .count();
        assert_eq!(convish, 4);
    }

    #[test]
    fn gdn_variant_adds_gdn_params_per_stage() {
        let m = build_model::<f32>(cfg(Activation::Gdn), 1).unwrap();
        let gdns = m.layers.iter().filter(|l| matches!(l.kind, LayerKind::Gdn { .. })).count();
        assert_eq!(gdns, 2); // one per transform at depth 2
        let r = build_model::<f32>(cfg(Activation::Relu), 1).unwrap();
        assert!(m.param_count() > r.param_count());
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_model::<f32>(cfg(Activation::Gdn), 7).unwrap();
        let b = build_model::<f32>(cfg(Activation::Gdn), 7).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_model::<f32>(cfg(Activation::Gdn), 8).unwrap();
        assert_ne!(
            a.named_params()[0].1.data(),
            c.named_params()[0].1.data()
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(build_model::<f32>(
            ModelConfig { n: 8, m: 12, depth: 1, activation: Activation::Relu, slim: false },
            1
        )
        .is_err());
        assert!(build_model::<f32>(
            ModelConfig { n: 2, m: 12, depth: 2, activation: Activation::Relu, slim: false },
            1
        )
        .is_err());
        assert!(build_model::<f32>(
            ModelConfig { n: 8, m: 12, depth: 2, activation: Activation::Relu, slim: true },
            1
        )
        .is_err());
    }

    #[test]
    fn eval_forward_shapes_roundtrip() {
        let m = build_model::<f64>(cfg(Activation::Gdn), 3).unwrap();
        let x = Tensor::<f64>::full(vec![2, 3, 16, 16], 0.5);
        let out = m.forward_eval(&x, EvalOptions::default()).unwrap();
        assert_eq!(out.recon.shape(), x.shape());
        assert_eq!(out.y_rounded.shape(), &[2, 12, 4, 4]);
        assert!(out.rate_bits >= 0.0);
    }

    #[test]
    fn graph_and_eval_forward_agree_in_fp_mode() {
        let m = build_model::<f64>(cfg(Activation::Gdn), 5).unwrap();
        let mut rng = Rng::new(2);
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform01()).collect();
        let x = Tensor::new(vec![1, 3, 16, 16], data).unwrap();
        let eval = m.forward_eval(&x, EvalOptions::default()).unwrap();
        let mut g = ComputeGraph::new();
        let xv = g.constant(x.clone());
        let fwd = m.forward_graph(&mut g, xv, false, None).unwrap();
        for (a, b) in g.value(fwd.xhat).data().iter().zip(eval.recon.data()) {
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
        assert!((g.value(fwd.rate_bits).item() - eval.rate_bits).abs() < 1e-6);
    }

    #[test]
    fn quant_forward_requires_calibration() {
        let m = build_model::<f64>(cfg(Activation::Gdn), 5).unwrap();
        let x = Tensor::<f64>::full(vec![1, 3, 16, 16], 0.4);
        let err = m
            .forward_eval(&x, EvalOptions { quant: true, ..Default::default() })
            .unwrap_err();
        assert!(format!("{}", err).contains("calibration"));
    }
}
