//! CNN10, CNN14 and ResNet22 assembled from `tensor_nn` layers, plus the
//! ICNM model container.
//!
//! Every model is `input BN (per mel bin) -> conv trunk -> mean over
//! frequency -> pooling head -> Linear(D -> K)`, returning logits from the
//! [`Layer`] methods and probabilities from [`Model::predict`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::QuantizedTensor;
use crate::pooling::{PoolError, PoolHead, PoolHeadKind};
use crate::tensor_nn::{
    join, softmax_rows, AvgPool2x2, BatchNorm, ChannelAxis, Conv2d, Layer, Linear, Mode,
    NamedState, NamedStateMut, NnError, Param, Relu, StateMut, StateRef, Tensor, Weight,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid width multiplier: {0}")]
    InvalidWidth(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("not an ICNM model file")]
    BadMagic,
    #[error("unsupported ICNM version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt model file: {0}")]
    CorruptHeader(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<PoolError> for ModelError {
    fn from(e: PoolError) -> Self {
        ModelError::InvalidConfig(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Cnn10,
    Cnn14,
    ResNet22,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn10 => "cnn10",
            Arch::Cnn14 => "cnn14",
            Arch::ResNet22 => "resnet22",
        }
    }

    /// Number of 2x2 average-pooling stages in the trunk.
    pub fn pool_stages(self) -> usize {
        match self {
            Arch::Cnn10 => 4,
            Arch::Cnn14 => 6,
            Arch::ResNet22 => 5,
        }
    }

    /// Minimum number of input frames.
    pub fn min_frames(self) -> usize {
        1 << self.pool_stages()
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn10" => Ok(Arch::Cnn10),
            "cnn14" => Ok(Arch::Cnn14),
            "resnet22" => Ok(Arch::ResNet22),
            other => Err(ModelError::InvalidConfig(format!("unknown arch {other:?}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Positive rational channel-width multiplier, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WidthMult {
    num: u32,
    den: u32,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl WidthMult {
    pub const ONE: WidthMult = WidthMult { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(ModelError::InvalidWidth(format!("{num}/{den} is not positive")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `base * self`, which must be a positive integer.
    pub fn apply(self, base: usize) -> Result<usize> {
        let scaled = base * self.num as usize;
        if scaled % self.den as usize != 0 {
            return Err(ModelError::InvalidWidth(format!(
                "{base} x {self} is not an integer"
            )));
        }
        Ok(scaled / self.den as usize)
    }
}

impl fmt::Display for WidthMult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMult {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || ModelError::InvalidWidth(format!("cannot parse {s:?}"));
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        WidthMult::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl TryFrom<String> for WidthMult {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<WidthMult> for String {
    fn from(w: WidthMult) -> String {
        w.to_string()
    }
}

const CNN_WIDTHS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
const RESNET_STEM: usize = 64;
const RESNET_WIDTHS: [usize; 8] = [64, 64, 128, 128, 256, 256, 512, 512];
const RESNET_POST: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub width_mult: WidthMult,
    pub n_mels: usize,
    pub n_classes: usize,
    pub pool_head: PoolHeadKind,
}

impl ModelConfig {
    pub fn new(arch: Arch, width_mult: WidthMult, n_classes: usize) -> Self {
        Self {
            arch,
            width_mult,
            n_mels: 64,
            n_classes,
            pool_head: PoolHeadKind::Statistic,
        }
    }

    pub fn with_pool_head(mut self, pool_head: PoolHeadKind) -> Self {
        self.pool_head = pool_head;
        self
    }

    pub fn with_mels(mut self, n_mels: usize) -> Self {
        self.n_mels = n_mels;
        self
    }

    /// Output channels of each trunk block, in order.
    pub fn block_widths(&self) -> Result<Vec<usize>> {
        let base: &[usize] = match self.arch {
            Arch::Cnn10 => &CNN_WIDTHS[..4],
            Arch::Cnn14 => &CNN_WIDTHS,
            Arch::ResNet22 => &RESNET_WIDTHS,
        };
        base.iter().map(|&b| self.width_mult.apply(b)).collect()
    }

    /// Width `D` of the pooled embedding.
    pub fn embed_dim(&self) -> Result<usize> {
        match self.arch {
            Arch::ResNet22 => self.width_mult.apply(RESNET_POST),
            _ => Ok(*self.block_widths()?.last().expect("non-empty")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch == Arch::ResNet22 {
            self.width_mult.apply(RESNET_STEM)?;
        }
        let d = self.embed_dim()?;
        self.block_widths()?;
        if self.n_mels == 0 {
            return Err(ModelError::InvalidConfig("n_mels must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(ModelError::InvalidConfig("need at least two classes".into()));
        }
        if let PoolHeadKind::Attention { heads } = self.pool_head {
            if heads == 0 || d % heads != 0 {
                return Err(PoolError::HeadMismatch { dim: d, heads }.into());
            }
        }
        Ok(())
    }

    /// Canonical `key=value` lines, as stored in the model container.
    pub fn to_text(&self) -> String {
        let d = self.embed_dim().map(|d| d.to_string()).unwrap_or_default();
        format!(
            "arch={}\nwidth_mult={}\nn_mels={}\nn_classes={}\npool_head={}\nembed_dim={d}\n",
            self.arch,
            self.width_mult,
            self.n_mels,
            self.n_classes,
            self.pool_head.name()
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("bad line {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("{k} is not an integer")))
        };
        let pool_head = PoolHeadKind::parse(get("pool_head")?)
            .ok_or_else(|| ModelError::InvalidConfig("unknown pool_head".into()))?;
        let cfg = ModelConfig {
            arch: get("arch")?.parse()?,
            width_mult: get("width_mult")?.parse()?,
            n_mels: int("n_mels")?,
            n_classes: int("n_classes")?,
            pool_head,
        };
        cfg.validate()?;
        if let Some(d) = fields.get("embed_dim") {
            if d.parse::<usize>().ok() != Some(cfg.embed_dim()?) {
                return Err(ModelError::InvalidConfig("embed_dim disagrees with widths".into()));
            }
        }
        Ok(cfg)
    }
}

/// `[conv3x3-BN-ReLU] x 2`, optionally followed by 2x2 average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    relu2: Relu,
    pool: Option<AvgPool2x2>,
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, pool: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, rng),
            bn1: BatchNorm::new(cout),
            relu1: Relu::new(),
            conv2: Conv2d::new(cout, cout, 3, rng),
            bn2: BatchNorm::new(cout),
            relu2: Relu::new(),
            pool: pool.then(AvgPool2x2::new),
        }
    }
}

impl Layer for ConvBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> crate::tensor_nn::Result<Tensor> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        let h = self.relu2.forward(&h, mode)?;
        match &mut self.pool {
            Some(p) => p.forward(&h, mode),
            None => Ok(h),
        }
    }

    fn backward(&mut self, g: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let g = match &mut self.pool {
            Some(p) => p.backward(g)?,
            None => g.clone(),
        };
        let g = self.relu2.backward(&g)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv2.backward(&g)?;
        let g = self.relu1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        self.conv1.backward(&g)
    }

    fn infer(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let h = self.conv1.infer(x)?;
        let h = self.relu1.infer(&self.bn1.infer(&h)?)?;
        let h = self.conv2.infer(&h)?;
        let h = self.relu2.infer(&self.bn2.infer(&h)?)?;
        match &self.pool {
            Some(p) => p.infer(&h),
            None => Ok(h),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        self.conv1.state(&join(prefix, "conv1"), out);
        self.bn1.state(&join(prefix, "bn1"), out);
        self.conv2.state(&join(prefix, "conv2"), out);
        self.bn2.state(&join(prefix, "bn2"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        self.conv1.state_mut(&join(prefix, "conv1"), out);
        self.bn1.state_mut(&join(prefix, "bn1"), out);
        self.conv2.state_mut(&join(prefix, "conv2"), out);
        self.bn2.state_mut(&join(prefix, "bn2"), out);
    }
}

/// Residual unit: `ReLU(BN(conv(ReLU(BN(conv(x))))) + shortcut(x))`, the
/// shortcut being identity or a 1x1 conv + BN projection when widths differ.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    proj: Option<(Conv2d, BatchNorm)>,
    relu_out: Relu,
    pool: Option<AvgPool2x2>,
}

impl BasicBlock {
    pub fn new(cin: usize, cout: usize, pool: bool, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(cin, cout, 3, rng);
        let conv2 = Conv2d::new(cout, cout, 3, rng);
        let proj = (cin != cout).then(|| (Conv2d::new(cin, cout, 1, rng), BatchNorm::new(cout)));
        Self {
            conv1,
            bn1: BatchNorm::new(cout),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm::new(cout),
            proj,
            relu_out: Relu::new(),
            pool: pool.then(AvgPool2x2::new),
        }
    }
}

fn add(a: &Tensor, b: &Tensor) -> crate::tensor_nn::Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch("residual branch shapes differ".into()));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

impl Layer for BasicBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> crate::tensor_nn::Result<Tensor> {
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        let s = match &mut self.proj {
            Some((c, b)) => {
                let s = c.forward(x, mode)?;
                b.forward(&s, mode)?
            }
            None => x.clone(),
        };
        let y = self.relu_out.forward(&add(&h, &s)?, mode)?;
        match &mut self.pool {
            Some(p) => p.forward(&y, mode),
            None => Ok(y),
        }
    }

    fn backward(&mut self, g: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let g = match &mut self.pool {
            Some(p) => p.backward(g)?,
            None => g.clone(),
        };
        let g = self.relu_out.backward(&g)?;
        let gm = self.bn2.backward(&g)?;
        let gm = self.conv2.backward(&gm)?;
        let gm = self.relu1.backward(&gm)?;
        let gm = self.bn1.backward(&gm)?;
        let gm = self.conv1.backward(&gm)?;
        let gs = match &mut self.proj {
            Some((c, b)) => {
                let gs = b.backward(&g)?;
                c.backward(&gs)?
            }
            None => g,
        };
        add(&gm, &gs)
    }

    fn infer(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let h = self.conv1.infer(x)?;
        let h = self.relu1.infer(&self.bn1.infer(&h)?)?;
        let h = self.bn2.infer(&self.conv2.infer(&h)?)?;
        let s = match &self.proj {
            Some((c, b)) => b.infer(&c.infer(x)?)?,
            None => x.clone(),
        };
        let y = self.relu_out.infer(&add(&h, &s)?)?;
        match &self.pool {
            Some(p) => p.infer(&y),
            None => Ok(y),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.proj {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        self.conv1.state(&join(prefix, "conv1"), out);
        self.bn1.state(&join(prefix, "bn1"), out);
        self.conv2.state(&join(prefix, "conv2"), out);
        self.bn2.state(&join(prefix, "bn2"), out);
        if let Some((c, b)) = &self.proj {
            c.state(&join(prefix, "proj_conv"), out);
            b.state(&join(prefix, "proj_bn"), out);
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        self.conv1.state_mut(&join(prefix, "conv1"), out);
        self.bn1.state_mut(&join(prefix, "bn1"), out);
        self.conv2.state_mut(&join(prefix, "conv2"), out);
        self.bn2.state_mut(&join(prefix, "bn2"), out);
        if let Some((c, b)) = &mut self.proj {
            c.state_mut(&join(prefix, "proj_conv"), out);
            b.state_mut(&join(prefix, "proj_bn"), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Conv(ConvBlock),
    Basic(BasicBlock),
}

macro_rules! dispatch {
    ($self:expr, $b:ident => $e:expr) => {
        match $self {
            Stage::Conv($b) => $e,
            Stage::Basic($b) => $e,
        }
    };
}

impl Layer for Stage {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> crate::tensor_nn::Result<Tensor> {
        dispatch!(self, b => b.forward(x, mode))
    }
    fn backward(&mut self, g: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        dispatch!(self, b => b.backward(g))
    }
    fn infer(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        dispatch!(self, b => b.infer(x))
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        dispatch!(self, b => b.params_mut())
    }
    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        dispatch!(self, b => b.state(prefix, out))
    }
    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        dispatch!(self, b => b.state_mut(prefix, out))
    }
}

/// `N x C x T x F` -> `N x T x C`, averaging over the frequency axis.
pub fn frequency_mean(x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
    let (n, c, t, f) = x.dims4()?;
    let mut out = vec![0.0; n * t * c];
    for s in 0..n {
        for ch in 0..c {
            for ti in 0..t {
                let base = ((s * c + ch) * t + ti) * f;
                let m = x.data()[base..base + f].iter().sum::<f64>() / f as f64;
                out[(s * t + ti) * c + ch] = m;
            }
        }
    }
    Tensor::new(&[n, t, c], out)
}

fn frequency_mean_backward(shape: [usize; 4], g: &Tensor) -> crate::tensor_nn::Result<Tensor> {
    let [n, c, t, f] = shape;
    if g.shape() != [n, t, c] {
        return Err(NnError::ShapeMismatch("frequency mean grad shape".into()));
    }
    let mut out = vec![0.0; n * c * t * f];
    for s in 0..n {
        for ch in 0..c {
            for ti in 0..t {
                let v = g.data()[(s * t + ti) * c + ch] / f as f64;
                let base = ((s * c + ch) * t + ti) * f;
                out[base..base + f].iter_mut().for_each(|o| *o = v);
            }
        }
    }
    Tensor::new(&shape, out)
}

/// A built network. The [`Layer`] implementation maps `N x 1 x T x n_mels`
/// log-mel batches to `N x n_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    input_bn: BatchNorm,
    stages: Vec<Stage>,
    head: PoolHead,
    fc: Linear,
    param_count: usize,
    trunk_shape: Option<[usize; 4]>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.block_widths()?;
        let mut stages = Vec::new();
        match config.arch {
            Arch::Cnn10 | Arch::Cnn14 => {
                let mut cin = 1;
                for &w in &widths {
                    stages.push(Stage::Conv(ConvBlock::new(cin, w, true, &mut rng)));
                    cin = w;
                }
            }
            Arch::ResNet22 => {
                let stem = config.width_mult.apply(RESNET_STEM)?;
                stages.push(Stage::Conv(ConvBlock::new(1, stem, true, &mut rng)));
                let mut cin = stem;
                for (i, &w) in widths.iter().enumerate() {
                    let pool = i % 2 == 1;
                    stages.push(Stage::Basic(BasicBlock::new(cin, w, pool, &mut rng)));
                    cin = w;
                }
                let post = config.width_mult.apply(RESNET_POST)?;
                stages.push(Stage::Conv(ConvBlock::new(cin, post, false, &mut rng)));
            }
        }
        let d = config.embed_dim()?;
        let head = PoolHead::new(config.pool_head, d, &mut rng)?;
        let fc = Linear::new(d, config.n_classes, &mut rng);
        let mut model = Self {
            config: *config,
            input_bn: BatchNorm::with_axis(config.n_mels, ChannelAxis::Last),
            stages,
            head,
            fc,
            param_count: 0,
            trunk_shape: None,
        };
        model.param_count = model.params_mut().iter().map(|p| p.len()).sum();
        Ok(model)
    }

    /// Learnable scalars, counting quantized weights at their original size.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn is_quantized(&self) -> bool {
        let mut s = Vec::new();
        self.state("", &mut s);
        s.iter().any(|(_, t)| matches!(t, StateRef::Int8(_)))
    }

    pub fn check_input(&self, x: &Tensor) -> crate::tensor_nn::Result<()> {
        let (_, c, t, f) = x.dims4()?;
        if c != 1 || f != self.config.n_mels {
            return Err(NnError::ShapeMismatch(format!(
                "expected N x 1 x T x {}, got {:?}",
                self.config.n_mels,
                x.shape()
            )));
        }
        let min = self.config.arch.min_frames();
        if t < min {
            return Err(NnError::InputTooSmall(format!(
                "{} needs at least {min} frames, got {t}",
                self.config.arch
            )));
        }
        Ok(())
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        self.infer(x)
    }

    /// Eval-mode class probabilities; rows sum to one.
    pub fn predict(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        softmax_rows(&self.infer(x)?)
    }

    /// Pooled `N x D` embeddings (eval mode).
    pub fn embed(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.input_bn.infer(x)?;
        for s in &self.stages {
            h = s.infer(&h)?;
        }
        self.head.infer(&frequency_mean(&h)?)
    }

    /// Named tensors in container order.
    pub fn named_state(&self) -> NamedState<'_> {
        let mut out = Vec::new();
        self.state("", &mut out);
        out
    }

    /// Copies every trunk tensor (input BN and all conv blocks) from `src`,
    /// leaving the pooling head and classifier as they are.
    pub fn load_trunk_from(&mut self, src: &Model) -> Result<()> {
        let (a, b) = (&self.config, &src.config);
        if a.arch != b.arch || a.width_mult != b.width_mult || a.n_mels != b.n_mels {
            return Err(ModelError::CheckpointMismatch(format!(
                "checkpoint is {} x{} with {} mels, model is {} x{} with {} mels",
                b.arch, b.width_mult, b.n_mels, a.arch, a.width_mult, a.n_mels
            )));
        }
        let mut src_state = Vec::new();
        src.input_bn.state("input_bn", &mut src_state);
        for (i, s) in src.stages.iter().enumerate() {
            s.state(&format!("stages.{i}"), &mut src_state);
        }
        let mut dst = Vec::new();
        self.input_bn.state_mut("input_bn", &mut dst);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.state_mut(&format!("stages.{i}"), &mut dst);
        }
        if src_state.len() != dst.len() {
            return Err(ModelError::CheckpointMismatch("trunk layouts differ".into()));
        }
        for ((sn, sv), (dn, dv)) in src_state.into_iter().zip(dst) {
            if sn != dn {
                return Err(ModelError::CheckpointMismatch(format!("{sn} vs {dn}")));
            }
            assign(dv, sv).map_err(|e| ModelError::CheckpointMismatch(format!("{sn}: {e}")))?;
        }
        Ok(())
    }

    /// Serializes to the ICNM container.
    pub fn to_bytes(&self) -> Vec<u8> {
        icnm::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        icnm::decode(bytes)
    }
}

fn assign(dst: StateMut<'_>, src: StateRef<'_>) -> std::result::Result<(), String> {
    let shape_of = |s: &StateRef<'_>| -> Vec<usize> {
        match s {
            StateRef::Float(t) => t.shape().to_vec(),
            StateRef::Int8(q) => q.shape().to_vec(),
        }
    };
    let want: Vec<usize> = match &dst {
        StateMut::Tensor(t) => t.shape().to_vec(),
        StateMut::Param(p) => p.value.shape().to_vec(),
        StateMut::Weight(w) => w.shape().to_vec(),
    };
    if want != shape_of(&src) {
        return Err(format!("shape {:?} vs {:?}", shape_of(&src), want));
    }
    match (dst, src) {
        (StateMut::Tensor(t), StateRef::Float(s)) => *t = s.clone(),
        (StateMut::Param(p), StateRef::Float(s)) => *p = Param::new(s.clone()),
        (StateMut::Weight(w), StateRef::Float(s)) => *w = Weight::Float(Param::new(s.clone())),
        (StateMut::Weight(w), StateRef::Int8(q)) => *w = Weight::Int8(q.clone()),
        _ => return Err("int8 data for a float-only tensor".into()),
    }
    Ok(())
}

impl Layer for Model {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> crate::tensor_nn::Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.input_bn.forward(x, mode)?;
        for s in &mut self.stages {
            h = s.forward(&h, mode)?;
        }
        let (n, c, t, f) = h.dims4()?;
        self.trunk_shape = Some([n, c, t, f]);
        let pooled = self.head.forward(&frequency_mean(&h)?, mode)?;
        self.fc.forward(&pooled, mode)
    }

    fn backward(&mut self, grad_logits: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        let shape = self.trunk_shape.ok_or(NnError::NoCache)?;
        let g = self.fc.backward(grad_logits)?;
        let g = self.head.backward(&g)?;
        let mut g = frequency_mean_backward(shape, &g)?;
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g)?;
        }
        self.input_bn.backward(&g)
    }

    fn infer(&self, x: &Tensor) -> crate::tensor_nn::Result<Tensor> {
        self.fc.infer(&self.embed(x)?)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input_bn.params_mut();
        for s in &mut self.stages {
            v.extend(s.params_mut());
        }
        v.extend(self.head.params_mut());
        v.extend(self.fc.params_mut());
        v
    }

    fn state<'a>(&'a self, prefix: &str, out: &mut NamedState<'a>) {
        self.input_bn.state(&join(prefix, "input_bn"), out);
        for (i, s) in self.stages.iter().enumerate() {
            s.state(&join(prefix, &format!("stages.{i}")), out);
        }
        self.head.state(&join(prefix, "head"), out);
        self.fc.state(&join(prefix, "fc"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedStateMut<'a>) {
        self.input_bn.state_mut(&join(prefix, "input_bn"), out);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.state_mut(&join(prefix, &format!("stages.{i}")), out);
        }
        self.head.state_mut(&join(prefix, "head"), out);
        self.fc.state_mut(&join(prefix, "fc"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelSize {
    pub param_count: usize,
    pub serialized_bytes: usize,
}

pub fn model_size(model: &Model) -> ModelSize {
    ModelSize {
        param_count: model.param_count(),
        serialized_bytes: model.to_bytes().len(),
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Model::from_bytes(&std::fs::read(path)?)
}

/// Byte layout (all integers little-endian):
///
/// ```text
/// "ICNM" | u32 version | u32 len | config text
/// u32 tensor count
/// per tensor: u16 len | name | u8 dtype (0 = f32, 1 = i8) | u8 rank | u32 dims...
///             [f64 scale if i8] | payload
/// u32 CRC32 of everything above
/// ```
pub mod icnm {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"ICNM";
    pub const VERSION: u32 = 1;
    pub const DTYPE_F32: u8 = 0;
    pub const DTYPE_I8: u8 = 1;

    pub(super) fn encode(model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = model.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let state = model.named_state();
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for (name, t) in &state {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match t {
                StateRef::Float(t) => (DTYPE_F32, t.shape()),
                StateRef::Int8(q) => (DTYPE_I8, q.shape()),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                StateRef::Float(t) => {
                    for &v in t.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                StateRef::Int8(q) => {
                    out.extend_from_slice(&q.scale().to_le_bytes());
                    out.extend(q.values().iter().map(|&v| v as u8));
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.buf.len() - self.pos < n {
                return Err(ModelError::CorruptHeader("unexpected end of data".into()));
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        fn u16(&mut self) -> Result<u16> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        fn str(&mut self, n: usize) -> Result<&'a str> {
            std::str::from_utf8(self.take(n)?)
                .map_err(|_| ModelError::CorruptHeader("text is not UTF-8".into()))
        }
    }

    enum Record {
        Float(Tensor),
        Int8(QuantizedTensor),
    }

    pub(super) fn decode(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(ModelError::CorruptHeader("file too short".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(ModelError::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let text_len = r.u32()? as usize;
        let config = ModelConfig::from_text(r.str(text_len)?)
            .map_err(|e| ModelError::CorruptHeader(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.str(name_len)?.to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let rec = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(overflow)?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect();
                    Record::Float(Tensor::new(&shape, data)?)
                }
                DTYPE_I8 => {
                    let scale = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                    let values = r.take(n)?.iter().map(|&b| b as i8).collect();
                    Record::Int8(
                        QuantizedTensor::from_parts(&shape, values, scale)
                            .map_err(|e| ModelError::CorruptHeader(format!("{name}: {e}")))?,
                    )
                }
                other => return Err(ModelError::CorruptHeader(format!("dtype tag {other}"))),
            };
            records.push((name, rec));
        }
        if r.pos != body.len() {
            return Err(ModelError::CorruptHeader("trailing bytes".into()));
        }

        let mut model = Model::build(&config, 0)
            .map_err(|e| ModelError::CorruptHeader(e.to_string()))?;
        let mut slots = Vec::new();
        model.state_mut("", &mut slots);
        if slots.len() != records.len() {
            return Err(ModelError::CorruptHeader(format!(
                "{} tensors stored, model has {}",
                records.len(),
                slots.len()
            )));
        }
        for ((want, slot), (name, rec)) in slots.into_iter().zip(&records) {
            if &want != name {
                return Err(ModelError::CorruptHeader(format!("expected {want}, found {name}")));
            }
            let src = match rec {
                Record::Float(t) => StateRef::Float(t),
                Record::Int8(q) => StateRef::Int8(q),
            };
            assign(slot, src).map_err(|e| ModelError::CorruptHeader(format!("{name}: {e}")))?;
        }
        Ok(model)
    }

    fn overflow() -> ModelError {
        ModelError::CorruptHeader("tensor size overflows".into())
    }
}
