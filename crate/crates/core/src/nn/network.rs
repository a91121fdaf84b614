//! Shared-encoder network with one decoder per head.
//!
//! The encoder is a stack of stride-2 conv blocks. Each decoder mirrors it:
//! stage `j` upsamples the previous features 2×, concatenates the encoder
//! features of the same resolution (mirror links; the raw input at full
//! resolution) and, when several heads are active, the previous-stage features
//! of the sibling decoders (inter-connections), then applies a conv block. A
//! 1×1 projection maps the last decoder stage to the head's channels; the
//! segmentation head adds one more same-width convolution to produce logits.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{BatchStats, Graph, NormMode, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.9;
pub const INIT_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Reflectance,
    Shading,
    Segmentation,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Reflectance, Head::Shading, Head::Segmentation];

    pub fn name(self) -> &'static str {
        match self {
            Head::Reflectance => "reflectance",
            Head::Shading => "shading",
            Head::Segmentation => "segmentation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "reflectance" | "albedo" | "R" => Ok(Head::Reflectance),
            "shading" | "S" => Ok(Head::Shading),
            "segmentation" | "seg" => Ok(Head::Segmentation),
            other => Err(Error::Invalid(format!(
                "unknown head {other:?} (expected reflectance, shading or segmentation)"
            ))),
        }
    }

    pub fn out_channels(self, num_classes: usize) -> usize {
        match self {
            Head::Reflectance => 3,
            Head::Shading => 1,
            Head::Segmentation => num_classes,
        }
    }
}

/// What the network sees as its input planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSource {
    Rgb,
    Albedo,
    /// RGB plus one label plane scaled to `[0, 1]` by `1 / (C - 1)`.
    RgbLabels,
}

impl InputSource {
    pub fn name(self) -> &'static str {
        match self {
            InputSource::Rgb => "rgb",
            InputSource::Albedo => "albedo",
            InputSource::RgbLabels => "rgb_labels",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rgb" => Ok(InputSource::Rgb),
            "albedo" => Ok(InputSource::Albedo),
            "rgb_labels" => Ok(InputSource::RgbLabels),
            other => Err(Error::Invalid(format!("unknown input source {other:?}"))),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            InputSource::RgbLabels => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub encoder_features: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Active heads, kept sorted and unique.
    pub heads: Vec<Head>,
    pub mirror_links: bool,
    pub inter_connections: bool,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_source: InputSource,
}

impl NetworkSpec {
    /// Toy-scale defaults for the given heads and class count.
    pub fn new(heads: &[Head], num_classes: usize) -> Self {
        let mut heads = heads.to_vec();
        heads.sort();
        heads.dedup();
        Self {
            encoder_features: vec![8, 16, 32, 64],
            kernel: 3,
            stride: 2,
            heads,
            mirror_links: true,
            inter_connections: true,
            num_classes,
            input_channels: 3,
            input_source: InputSource::Rgb,
        }
    }

    pub fn with_input(mut self, source: InputSource) -> Self {
        self.input_source = source;
        self.input_channels = source.channels();
        self
    }

    pub fn has(&self, head: Head) -> bool {
        self.heads.contains(&head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_features.len() < 2 {
            return Err(Error::Invalid("need at least 2 encoder stages".into()));
        }
        if self.encoder_features.contains(&0) {
            return Err(Error::Invalid("encoder feature counts must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.stride != 2 {
            return Err(Error::Invalid(format!(
                "only stride 2 is supported (decoders upsample 2x), got {}",
                self.stride
            )));
        }
        if self.heads.is_empty() {
            return Err(Error::Invalid("at least one head is required".into()));
        }
        if self.heads.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("heads must be sorted and unique".into()));
        }
        if self.has(Head::Segmentation) && self.num_classes < 2 {
            return Err(Error::Invalid("segmentation needs at least 2 classes".into()));
        }
        if self.input_channels != self.input_source.channels() {
            return Err(Error::Invalid(format!(
                "input source {} has {} channels, spec says {}",
                self.input_source.name(),
                self.input_source.channels(),
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Input height and width must be divisible by `2^stages`.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.encoder_features.len();
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "input {height}x{width} is not divisible by 2^{} = {f}",
                self.encoder_features.len()
            )));
        }
        Ok(())
    }

    fn inter_active(&self) -> bool {
        self.inter_connections && self.heads.len() >= 2
    }

    fn decoder_width(&self, stage: usize) -> usize {
        let l = self.encoder_features.len();
        if stage + 2 <= l {
            self.encoder_features[l - 2 - stage]
        } else {
            self.encoder_features[0]
        }
    }

    fn mirror_channels(&self, stage: usize) -> usize {
        let l = self.encoder_features.len();
        match (self.mirror_links, stage + 2 <= l) {
            (false, _) => 0,
            (true, true) => self.encoder_features[l - 2 - stage],
            (true, false) => self.input_channels,
        }
    }

    /// Every conv layer in parameter order.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let l = self.encoder_features.len();
        let pad = self.kernel / 2;
        let mut out = Vec::new();
        for (i, &f) in self.encoder_features.iter().enumerate() {
            out.push(ConvLayer {
                name: format!("enc{i}"),
                group: ParamGroup::Encoder,
                in_channels: if i == 0 { self.input_channels } else { self.encoder_features[i - 1] },
                out_channels: f,
                kernel: self.kernel,
                stride: self.stride,
                pad,
                norm: true,
            });
        }
        for &head in &self.heads {
            for j in 0..l {
                let prev = if j == 0 { self.encoder_features[l - 1] } else { self.decoder_width(j - 1) };
                let inter = if self.inter_active() && j > 0 {
                    (self.heads.len() - 1) * self.decoder_width(j - 1)
                } else {
                    0
                };
                out.push(ConvLayer {
                    name: format!("dec.{}.{j}", head.name()),
                    group: ParamGroup::Head(head),
                    in_channels: prev + self.mirror_channels(j) + inter,
                    out_channels: self.decoder_width(j),
                    kernel: self.kernel,
                    stride: 1,
                    pad,
                    norm: true,
                });
            }
            let head_out = head.out_channels(self.num_classes);
            out.push(ConvLayer {
                name: format!("head.{}.proj", head.name()),
                group: ParamGroup::Head(head),
                in_channels: self.encoder_features[0],
                out_channels: head_out,
                kernel: 1,
                stride: 1,
                pad: 0,
                norm: head == Head::Segmentation,
            });
            if head == Head::Segmentation {
                out.push(ConvLayer {
                    name: "head.segmentation.refine".into(),
                    group: ParamGroup::Head(head),
                    in_channels: head_out,
                    out_channels: head_out,
                    kernel: self.kernel,
                    stride: 1,
                    pad,
                    norm: false,
                });
            }
        }
        out
    }

    /// Number of learnable scalars (conv weights, biases, normalisation scale and shift).
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| {
                l.out_channels * l.in_channels * l.kernel * l.kernel
                    + l.out_channels
                    + if l.norm { 2 * l.out_channels } else { 0 }
            })
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let feats: Vec<String> = self.encoder_features.iter().map(usize::to_string).collect();
        let heads: Vec<&str> = self.heads.iter().map(|h| h.name()).collect();
        let _ = writeln!(s, "encoder_features={}", feats.join(","));
        let _ = writeln!(s, "kernel={}", self.kernel);
        let _ = writeln!(s, "stride={}", self.stride);
        let _ = writeln!(s, "heads={}", heads.join(","));
        let _ = writeln!(s, "mirror_links={}", self.mirror_links);
        let _ = writeln!(s, "inter_connections={}", self.inter_connections);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "input_channels={}", self.input_channels);
        let _ = writeln!(s, "input_source={}", self.input_source.name());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("network spec line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("network spec: missing {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("network spec: bad {k}")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| Error::Format(format!("network spec: bad {k}")))
        };
        let encoder_features = get("encoder_features")?
            .split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|_| Error::Format("network spec: bad encoder_features".into())))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = get("heads")?
            .split(',')
            .map(Head::parse)
            .collect::<Result<Vec<_>>>()?;
        heads.sort();
        heads.dedup();
        let spec = Self {
            encoder_features,
            kernel: num("kernel")?,
            stride: num("stride")?,
            heads,
            mirror_links: flag("mirror_links")?,
            inter_connections: flag("inter_connections")?,
            num_classes: num("num_classes")?,
            input_channels: num("input_channels")?,
            input_source: InputSource::parse(get("input_source")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Head(Head),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Whether the optimiser updates this tensor (running statistics are not).
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub group: ParamGroup,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub norm: bool,
}

impl ConvLayer {
    fn param_specs(&self) -> Vec<(String, ParamKind, Vec<usize>)> {
        let mut v = vec![
            (
                format!("{}.weight", self.name),
                ParamKind::Weight,
                vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            ),
            (format!("{}.bias", self.name), ParamKind::Bias, vec![self.out_channels]),
        ];
        if self.norm {
            for (suffix, kind) in [
                ("gamma", ParamKind::Gamma),
                ("beta", ParamKind::Beta),
                ("running_mean", ParamKind::RunningMean),
                ("running_var", ParamKind::RunningVar),
            ] {
                v.push((format!("{}.bn.{suffix}", self.name), kind, vec![self.out_channels]));
            }
        }
        v
    }
}

/// One named tensor of the network state, stored at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.shape.clone(), &self.data).expect("param shape matches data")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl NetworkState {
    /// Fresh state: N(0, 0.05) conv weights, zero biases, unit scale, zero shift,
    /// running mean 0 and running variance 1.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = Vec::new();
        for layer in spec.layers() {
            for (name, kind, shape) in layer.param_specs() {
                let n: usize = shape.iter().product();
                let data = match kind {
                    ParamKind::Weight => (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
                    ParamKind::Gamma | ParamKind::RunningVar => vec![1.0; n],
                    ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => vec![0.0; n],
                };
                params.push(Param {
                    name,
                    group: layer.group,
                    kind,
                    shape,
                    data,
                });
            }
        }
        Ok(Self::from_params(params))
    }

    fn from_params(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }

    /// Rebuilds a state from named tensors, checking them against `spec`.
    pub fn from_named(spec: &NetworkSpec, named: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        spec.validate()?;
        let expected: Vec<(String, ParamKind, Vec<usize>, ParamGroup)> = spec
            .layers()
            .iter()
            .flat_map(|l| {
                l.param_specs()
                    .into_iter()
                    .map(move |(n, k, s)| (n, k, s, l.group))
            })
            .collect();
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "spec implies {} tensors, checkpoint has {}",
                expected.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, kind, shape, group), (got_name, got_shape, data)) in expected.into_iter().zip(named) {
            if name != got_name || shape != got_shape {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {got_name} {got_shape:?}"
                )));
            }
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("{name}: payload length mismatch")));
            }
            params.push(Param {
                name,
                group,
                kind,
                shape,
                data,
            });
        }
        Ok(Self::from_params(params))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    fn data64(&self, name: &str) -> Result<Vec<f64>> {
        self.get(name)
            .map(|p| p.data.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Blends batch statistics into the running averages of the named layers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], frozen: impl Fn(ParamGroup) -> bool) {
        for (layer, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let Some(&i) = self.index.get(&format!("{layer}.bn.{suffix}")) else {
                    continue;
                };
                let p = &mut self.params[i];
                if frozen(p.group) {
                    continue;
                }
                for (r, &b) in p.data.iter_mut().zip(batch) {
                    *r = (NORM_MOMENTUM * *r as f64 + (1.0 - NORM_MOMENTUM) * b) as f32;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph variables for every state tensor, aligned with [`NetworkState::params`].
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Variables aligned with the state's parameter list.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Records every state tensor on `graph`; `trainable` decides which receive gradients.
pub fn bind_params(graph: &mut Graph, state: &NetworkState, trainable: impl Fn(&Param) -> bool) -> BoundParams {
    let vars = state
        .params
        .iter()
        .map(|p| {
            let t = p.to_tensor();
            if p.kind.learnable() && trainable(p) {
                graph.input(t)
            } else {
                graph.constant(t)
            }
        })
        .collect();
    BoundParams {
        vars,
        index: state.index.clone(),
    }
}

#[derive(Debug, Default)]
pub struct ForwardOutput {
    pub reflectance: Option<Var>,
    pub shading: Option<Var>,
    /// Segmentation logits.
    pub segmentation: Option<Var>,
    /// Training-mode batch statistics per normalised layer name.
    pub stats: Vec<(String, BatchStats)>,
}

impl ForwardOutput {
    pub fn head(&self, head: Head) -> Option<Var> {
        match head {
            Head::Reflectance => self.reflectance,
            Head::Shading => self.shading,
            Head::Segmentation => self.segmentation,
        }
    }
}

struct Ctx<'a> {
    graph: &'a mut Graph,
    state: &'a NetworkState,
    params: &'a BoundParams,
    mode: Mode,
    stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    fn block(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.params.var(&format!("{}.weight", layer.name))?;
        let b = self.params.var(&format!("{}.bias", layer.name))?;
        let y = self.graph.conv2d(x, w, Some(b), layer.stride, layer.pad)?;
        if !layer.norm {
            return Ok(y);
        }
        let gamma = self.params.var(&format!("{}.bn.gamma", layer.name))?;
        let beta = self.params.var(&format!("{}.bn.beta", layer.name))?;
        let (y, stats) = match self.mode {
            Mode::Train => self.graph.batch_norm(y, gamma, beta, NormMode::Train { eps: NORM_EPS })?,
            Mode::Eval => {
                let rm = self.state.data64(&format!("{}.bn.running_mean", layer.name))?;
                let rv = self.state.data64(&format!("{}.bn.running_var", layer.name))?;
                self.graph.batch_norm(
                    y,
                    gamma,
                    beta,
                    NormMode::Eval {
                        running_mean: &rm,
                        running_var: &rv,
                        eps: NORM_EPS,
                    },
                )?
            }
        };
        if let Some(s) = stats {
            self.stats.push((layer.name.clone(), s));
        }
        Ok(self.graph.relu(y))
    }
}

/// Runs the network on an `N × C_in × H × W` input already recorded on `graph`.
pub fn forward(
    graph: &mut Graph,
    spec: &NetworkSpec,
    state: &NetworkState,
    params: &BoundParams,
    input: Var,
    mode: Mode,
) -> Result<ForwardOutput> {
    spec.validate()?;
    let [_, c, h, w] = graph.value(input).dims4()?;
    if c != spec.input_channels {
        return Err(Error::Invalid(format!(
            "input has {c} channels, network expects {}",
            spec.input_channels
        )));
    }
    spec.check_resolution(h, w)?;

    let layers = spec.layers();
    let by_name: HashMap<&str, &ConvLayer> = layers.iter().map(|l| (l.name.as_str(), l)).collect();
    let layer = |name: &str| by_name.get(name).copied().expect("layer listed by spec");
    let mut ctx = Ctx {
        graph,
        state,
        params,
        mode,
        stats: Vec::new(),
    };

    let l = spec.encoder_features.len();
    let mut enc = Vec::with_capacity(l);
    let mut x = input;
    for i in 0..l {
        x = ctx.block(layer(&format!("enc{i}")), x)?;
        enc.push(x);
    }

    let inter = spec.inter_active();
    let mut prev: Vec<Var> = vec![enc[l - 1]; spec.heads.len()];
    for j in 0..l {
        let up: Vec<Var> = prev
            .iter()
            .map(|&p| ctx.graph.upsample2x(p))
            .collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(spec.heads.len());
        for (k, head) in spec.heads.iter().enumerate() {
            let mut parts = vec![up[k]];
            if spec.mirror_links {
                parts.push(if j + 2 <= l { enc[l - 2 - j] } else { input });
            }
            if inter && j > 0 {
                parts.extend(up.iter().enumerate().filter(|&(o, _)| o != k).map(|(_, &v)| v));
            }
            let merged = if parts.len() == 1 { parts[0] } else { ctx.graph.concat_channels(&parts)? };
            next.push(ctx.block(layer(&format!("dec.{}.{j}", head.name())), merged)?);
        }
        prev = next;
    }

    let mut out = ForwardOutput::default();
    for (k, &head) in spec.heads.iter().enumerate() {
        let y = ctx.block(layer(&format!("head.{}.proj", head.name())), prev[k])?;
        match head {
            Head::Reflectance => out.reflectance = Some(y),
            Head::Shading => out.shading = Some(y),
            Head::Segmentation => {
                out.segmentation = Some(ctx.block(layer("head.segmentation.refine"), y)?);
            }
        }
    }
    out.stats = ctx.stats;
    Ok(out)
}

/// Evaluation-mode outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `N × 3 × H × W`, clamped at zero.
    pub reflectance: Option<Tensor>,
    /// `N × 1 × H × W`, clamped at zero.
    pub shading: Option<Tensor>,
    /// `N × C × H × W` class probabilities.
    pub probabilities: Option<Tensor>,
    /// `N × H × W` argmax labels.
    pub labels: Option<Vec<u8>>,
}

/// Network description plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub state: NetworkState,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let state = NetworkState::init(&spec, seed)?;
        Ok(Self { spec, state })
    }

    /// Evaluation-mode forward pass without gradients.
    pub fn predict(&self, input: &Tensor) -> Result<Predictions> {
        let mut g = Graph::new();
        let params = bind_params(&mut g, &self.state, |_| false);
        let x = g.constant(input.clone());
        let out = forward(&mut g, &self.spec, &self.state, &params, x, Mode::Eval)?;
        let clamp = |g: &mut Graph, v: Option<Var>| v.map(|v| {
            let r = g.relu(v);
            g.value(r).clone()
        });
        let reflectance = clamp(&mut g, out.reflectance);
        let shading = clamp(&mut g, out.shading);
        let (probabilities, labels) = match out.segmentation {
            Some(logits) => {
                let p = g.softmax_channel(logits)?;
                let probs = g.value(p).clone();
                let labels = argmax_channels(&probs)?;
                (Some(probs), Some(labels))
            }
            None => (None, None),
        };
        Ok(Predictions {
            reflectance,
            shading,
            probabilities,
            labels,
        })
    }
}

/// Per-pixel argmax over the channel axis; ties resolve to the lowest class.
pub fn argmax_channels(t: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.dims4()?;
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if t.data()[(b * c + ch) * plane + p] > t.data()[(b * c + best) * plane + p] {
                    best = ch;
                }
            }
            out[b * plane + p] = best as u8;
        }
    }
    Ok(out)
}
