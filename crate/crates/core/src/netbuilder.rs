//! Architecture strings and the feed-forward networks built from them.
//!
//! Grammar (whitespace ignored, layers separated by `|`):
//!
//! ```text
//! convR-C      convolution, R x R receptive field, C output channels
//! convR-C(S)   same with stride S
//! P            2x2 max pooling
//! FC(N), FCN   fully connected layer with N outputs
//! ```
//!
//! ```
//! use destnet::netbuilder::{parse_arch, Layer};
//!
//! let spec = parse_arch("conv7-6 | conv7-24 | FC(8)").unwrap();
//! assert_eq!(spec.layers()[2], Layer::Fc { out: 8 });
//! ```

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv {
        receptive: usize,
        channels: usize,
        stride: usize,
    },
    Pool,
    Fc {
        out: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    layers: Vec<Layer>,
}

impl ArchSpec {
    /// Validates layer ordering.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Structure("architecture has no layers".into()));
        }
        let mut seen_fc = false;
        let mut seen_conv = false;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    receptive,
                    channels,
                    stride,
                } => {
                    if seen_fc {
                        return Err(Error::Structure(format!("layer {i}: convolution after a fully connected layer")));
                    }
                    if receptive == 0 || channels == 0 || stride == 0 {
                        return Err(Error::Structure(format!("layer {i}: convolution extents must be positive")));
                    }
                    seen_conv = true;
                }
                Layer::Pool => {
                    if seen_fc {
                        return Err(Error::Structure(format!("layer {i}: pooling after a fully connected layer")));
                    }
                    if !seen_conv {
                        return Err(Error::Structure(format!("layer {i}: pooling without a preceding convolution")));
                    }
                }
                Layer::Fc { out } => {
                    if out == 0 {
                        return Err(Error::Structure(format!("layer {i}: FC width must be positive")));
                    }
                    seen_fc = true;
                }
            }
        }
        Ok(ArchSpec { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Width of the final layer if it is fully connected.
    pub fn output_width(&self) -> Option<usize> {
        match self.layers.last() {
            Some(Layer::Fc { out }) => Some(*out),
            _ => None,
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(" | ")?;
            }
            match *layer {
                Layer::Conv {
                    receptive,
                    channels,
                    stride: 1,
                } => write!(f, "conv{receptive}-{channels}")?,
                Layer::Conv {
                    receptive,
                    channels,
                    stride,
                } => write!(f, "conv{receptive}-{channels}({stride})")?,
                Layer::Pool => f.write_str("P")?,
                Layer::Fc { out } => write!(f, "FC({out})")?,
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

/// Cursor over the non-whitespace characters of the input, keeping each
/// character's original position for error messages.
struct Cursor {
    chars: Vec<(usize, char)>,
    at: usize,
}

impl Cursor {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.at).map(|c| c.1)
    }

    fn pos(&self) -> usize {
        self.chars.get(self.at).map_or_else(
            || self.chars.last().map_or(0, |c| c.0 + c.1.len_utf8()),
            |c| c.0,
        )
    }

    fn eat(&mut self, expected: char) -> bool {
        if self.peek() == Some(expected) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, expected: char) -> Result<()> {
        if self.eat(expected) {
            Ok(())
        } else {
            Err(self.error(format!("expected '{expected}'")))
        }
    }

    fn keyword(&mut self, word: &str) -> bool {
        let n = word.chars().count();
        let matches = self.chars.len() >= self.at + n
            && self.chars[self.at..self.at + n]
                .iter()
                .map(|c| c.1)
                .eq(word.chars());
        if matches {
            self.at += n;
        }
        matches
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.at;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.at += 1;
        }
        if start == self.at {
            return Err(self.error("expected a number".into()));
        }
        let digits: String = self.chars[start..self.at].iter().map(|c| c.1).collect();
        digits.parse().map_err(|_| Error::Parse {
            pos: self.chars[start].0,
            msg: format!("number {digits} is out of range"),
        })
    }

    fn error(&self, msg: String) -> Error {
        let found = self.peek().map_or("end of input".to_string(), |c| format!("'{c}'"));
        Error::Parse {
            pos: self.pos(),
            msg: format!("{msg}, found {found}"),
        }
    }
}

pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let mut cur = Cursor {
        chars: text.char_indices().filter(|(_, c)| !c.is_whitespace()).collect(),
        at: 0,
    };
    let mut layers = Vec::new();
    loop {
        let layer = if cur.keyword("conv") {
            let receptive = cur.number()?;
            cur.expect('-')?;
            let channels = cur.number()?;
            let stride = if cur.eat('(') {
                let s = cur.number()?;
                cur.expect(')')?;
                s
            } else {
                1
            };
            Layer::Conv {
                receptive,
                channels,
                stride,
            }
        } else if cur.keyword("FC") {
            let out = if cur.eat('(') {
                let n = cur.number()?;
                cur.expect(')')?;
                n
            } else {
                cur.number()?
            };
            Layer::Fc { out }
        } else if cur.eat('P') {
            Layer::Pool
        } else {
            return Err(cur.error("unknown layer token".into()));
        };
        layers.push(layer);
        if cur.peek().is_none() {
            break;
        }
        cur.expect('|')?;
    }
    ArchSpec::new(layers)
}

/// What a network is used for; decides the initialization of its last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetRole {
    /// Predicts warp-parameter updates; final FC starts at zero.
    Localization,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
enum Built {
    Conv { weight: ParamId, bias: ParamId, stride: usize },
    Pool,
    Fc { weight: ParamId, bias: ParamId },
}

/// A feed-forward network whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    role: NetRole,
    in_channels: usize,
    in_raster: (usize, usize),
    layers: Vec<Built>,
}

fn he_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Builds `spec` for `[C,H,W]` inputs, registering its parameters in
/// `store` under `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn build_network<R: Rng + ?Sized>(
    spec: &ArchSpec,
    in_channels: usize,
    in_raster: (usize, usize),
    role: NetRole,
    store: &mut ParamStore,
    prefix: &str,
    group: ParamGroup,
    rng: &mut R,
) -> Result<Network> {
    let (mut c, mut h, mut w) = (in_channels, in_raster.0, in_raster.1);
    let mut flat: Option<usize> = None;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let last = spec.layers.len() - 1;
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Conv {
                receptive,
                channels,
                stride,
            } => {
                if h < receptive || w < receptive {
                    return Err(Error::Structure(format!(
                        "layer {i} ({receptive}x{receptive} conv) does not fit the {h}x{w} raster"
                    )));
                }
                let fan_in = c * receptive * receptive;
                let weight = store.add(
                    format!("{prefix}.l{i}.conv.weight"),
                    group,
                    he_tensor(&[channels, c, receptive, receptive], fan_in, rng),
                );
                let bias = store.add(format!("{prefix}.l{i}.conv.bias"), group, Tensor::zeros(&[channels]));
                layers.push(Built::Conv { weight, bias, stride });
                c = channels;
                h = (h - receptive) / stride + 1;
                w = (w - receptive) / stride + 1;
            }
            Layer::Pool => {
                if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Structure(format!(
                        "layer {i}: cannot pool a {h}x{w} raster (needs even extents)"
                    )));
                }
                layers.push(Built::Pool);
                h /= 2;
                w /= 2;
            }
            Layer::Fc { out } => {
                let d = flat.unwrap_or(c * h * w);
                let weight_init = if i == last && role == NetRole::Localization {
                    Tensor::zeros(&[d, out])
                } else {
                    he_tensor(&[d, out], d, rng)
                };
                let weight = store.add(format!("{prefix}.l{i}.fc.weight"), group, weight_init);
                let bias = store.add(format!("{prefix}.l{i}.fc.bias"), group, Tensor::zeros(&[out]));
                layers.push(Built::Fc { weight, bias });
                flat = Some(out);
            }
        }
    }
    Ok(Network {
        arch: spec.clone(),
        role,
        in_channels,
        in_raster,
        layers,
    })
}

impl Network {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn in_raster(&self) -> (usize, usize) {
        self.in_raster
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match *l {
                Built::Conv { weight, bias, .. } | Built::Fc { weight, bias } => vec![weight, bias],
                Built::Pool => vec![],
            })
            .collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().into_iter().map(|id| store.get(id).numel()).sum()
    }

    /// Final fully connected layer's `(weight, bias)`, if any.
    pub fn head(&self) -> Option<(ParamId, ParamId)> {
        match self.layers.last() {
            Some(Built::Fc { weight, bias }) => Some((*weight, *bias)),
            _ => None,
        }
    }

    /// Records the forward pass on `g`. ReLU follows every layer except
    /// pooling and the final FC.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != self.in_channels || (s[2], s[3]) != self.in_raster {
            return Err(Error::dim(
                "network",
                format!(
                    "input {s:?} does not match the build raster [N,{},{},{}]",
                    self.in_channels, self.in_raster.0, self.in_raster.1
                ),
            ));
        }
        let last = self.layers.len() - 1;
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                Built::Conv { weight, bias, stride } => {
                    let k = g.param(store, weight);
                    let b = g.param(store, bias);
                    let y = g.conv2d(x, k, stride, 0)?;
                    let y = g.channel_bias(y, b)?;
                    g.relu(y)
                }
                Built::Pool => g.maxpool2(x)?,
                Built::Fc { weight, bias } => {
                    if g.shape(x).len() != 2 {
                        x = g.flatten(x)?;
                    }
                    let wv = g.param(store, weight);
                    let bv = g.param(store, bias);
                    let y = g.dense(x, wv, bv)?;
                    if i == last {
                        y
                    } else {
                        g.relu(y)
                    }
                }
            };
        }
        if g.shape(x).len() != 2 {
            x = g.flatten(x)?;
        }
        Ok(x)
    }
}
