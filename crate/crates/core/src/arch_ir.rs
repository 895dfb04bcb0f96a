//! Line-based architecture description format.
//!
//! A network file looks like this:
//!
//! ```text
//! # comments run to end of line
//! network net2
//! input 32 32 1
//! conv k=3 c=23 bn=true act=relu
//! maxpool w=2
//! dense u=4 act=sigmoid
//! ```
//!
//! Convolutions always use "same" zero padding with stride 1, so they keep
//! the spatial size; max pooling is non-overlapping and floors the spatial
//! size; dense layers flatten their input and produce a `units x 1 x 1` map.
//! Batch norm is an attribute of a convolution, applied between the
//! convolution and its activation.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: bad token `{token}`: {message}")]
    Semantic {
        line: usize,
        token: String,
        message: String,
    },
    #[error("network has no layers")]
    NoLayers,
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("layer {layer}: spatial size underflows ({height}x{width} into a {window}x{window} pool)")]
    SpatialUnderflow {
        layer: usize,
        height: usize,
        width: usize,
        window: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::None => "none",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "none" => Ok(Activation::None),
            other => Err(format!("unknown activation `{other}` (expected relu, sigmoid or none)")),
        }
    }
}

/// One layer of a network. Kernels are square (`kernel x kernel`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        out_channels: usize,
        batch_norm: bool,
        activation: Activation,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    MaxPool {
        window: usize,
    },
}

/// Channels and spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FeatureShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LayerSpec {
    pub fn conv(kernel: usize, out_channels: usize, batch_norm: bool, activation: Activation) -> Self {
        LayerSpec::Conv {
            kernel,
            out_channels,
            batch_norm,
            activation,
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    pub fn max_pool(window: usize) -> Self {
        LayerSpec::MaxPool { window }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Conv { activation, .. } | LayerSpec::Dense { activation, .. } => activation,
            LayerSpec::MaxPool { .. } => Activation::None,
        }
    }

    pub fn batch_norm(&self) -> bool {
        matches!(self, LayerSpec::Conv { batch_norm: true, .. })
    }

    /// Output width for conv/dense layers; `None` for pooling, which keeps
    /// whatever channel count it is fed.
    pub fn width(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { out_channels, .. } => Some(out_channels),
            LayerSpec::Dense { units, .. } => Some(units),
            LayerSpec::MaxPool { .. } => None,
        }
    }

    /// Same layer with its conv/dense width replaced. Pooling is unchanged.
    pub fn with_width(&self, width: usize) -> Self {
        match *self {
            LayerSpec::Conv {
                kernel,
                batch_norm,
                activation,
                ..
            } => LayerSpec::Conv {
                kernel,
                out_channels: width,
                batch_norm,
                activation,
            },
            LayerSpec::Dense { activation, .. } => LayerSpec::Dense {
                units: width,
                activation,
            },
            pool @ LayerSpec::MaxPool { .. } => pool,
        }
    }

    /// Same layer with another activation. Pooling is unchanged.
    pub fn with_activation(&self, activation: Activation) -> Self {
        match *self {
            LayerSpec::Conv {
                kernel,
                out_channels,
                batch_norm,
                ..
            } => LayerSpec::Conv {
                kernel,
                out_channels,
                batch_norm,
                activation,
            },
            LayerSpec::Dense { units, .. } => LayerSpec::Dense { units, activation },
            pool @ LayerSpec::MaxPool { .. } => pool,
        }
    }

    /// Checks the per-layer invariants, returning the offending token on failure.
    pub(crate) fn check(&self) -> Result<(), (String, String)> {
        match *self {
            LayerSpec::Conv {
                kernel, out_channels, ..
            } => {
                if kernel == 0 || kernel.is_multiple_of(2) {
                    return Err((format!("k={kernel}"), "kernel size must be odd and positive".into()));
                }
                if out_channels == 0 {
                    return Err(("c=0".into(), "channel count must be positive".into()));
                }
            }
            LayerSpec::Dense { units, .. } => {
                if units == 0 {
                    return Err(("u=0".into(), "unit count must be positive".into()));
                }
            }
            LayerSpec::MaxPool { window } => {
                if window == 0 {
                    return Err(("w=0".into(), "pool window must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Shape produced when this layer is fed `input`. `layer` is only used
    /// for error reporting.
    pub fn output_shape(&self, input: FeatureShape, layer: usize) -> Result<FeatureShape, IrError> {
        match *self {
            LayerSpec::Conv { out_channels, .. } => Ok(FeatureShape::new(out_channels, input.height, input.width)),
            LayerSpec::Dense { units, .. } => Ok(FeatureShape::new(units, 1, 1)),
            LayerSpec::MaxPool { window } => {
                if input.height < window || input.width < window {
                    return Err(IrError::SpatialUnderflow {
                        layer,
                        height: input.height,
                        width: input.width,
                        window,
                    });
                }
                Ok(FeatureShape::new(
                    input.channels,
                    input.height / window,
                    input.width / window,
                ))
            }
        }
    }

    /// Trainable parameters of this layer when fed `input`: weights, biases
    /// and batch-norm scale/shift.
    pub fn param_count(&self, input: FeatureShape) -> u64 {
        match *self {
            LayerSpec::Conv {
                kernel,
                out_channels,
                batch_norm,
                ..
            } => {
                let (k, cin, cout) = (kernel as u64, input.channels as u64, out_channels as u64);
                let bn = if batch_norm { 2 * cout } else { 0 };
                k * k * cin * cout + cout + bn
            }
            LayerSpec::Dense { units, .. } => {
                let (fan_in, units) = (input.len() as u64, units as u64);
                fan_in * units + units
            }
            LayerSpec::MaxPool { .. } => 0,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                kernel,
                out_channels,
                batch_norm,
                activation,
            } => write!(f, "conv k={kernel} c={out_channels} bn={batch_norm} act={activation}"),
            LayerSpec::Dense { units, activation } => write!(f, "dense u={units} act={activation}"),
            LayerSpec::MaxPool { window } => write!(f, "maxpool w={window}"),
        }
    }
}

/// `input H W C` line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        InputShape {
            height,
            width,
            channels,
        }
    }

    pub fn feature_shape(&self) -> FeatureShape {
        FeatureShape::new(self.channels, self.height, self.width)
    }
}

/// A validated chain of layers. The last layer is the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    name: String,
    input: InputShape,
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input: InputShape, layers: Vec<LayerSpec>) -> Result<Self, IrError> {
        let name = name.into();
        if !is_ident(&name) {
            return Err(IrError::Invalid(format!("`{name}` is not a valid network name")));
        }
        if input.height == 0 || input.width == 0 || input.channels == 0 {
            return Err(IrError::Invalid("input dimensions must be positive".into()));
        }
        if layers.is_empty() {
            return Err(IrError::NoLayers);
        }
        for (i, layer) in layers.iter().enumerate() {
            if let Err((token, message)) = layer.check() {
                return Err(IrError::Invalid(format!("layer {}: `{token}`: {message}", i + 1)));
            }
        }
        let spec = NetworkSpec { name, input, layers };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers.last().expect("validated network has layers")
    }

    /// Output shape of every layer, in order.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>, IrError> {
        shapes_from(self.input.feature_shape(), &self.layers)
    }

    pub fn output_shape(&self) -> FeatureShape {
        *self
            .shapes()
            .expect("validated network propagates")
            .last()
            .expect("validated network has layers")
    }

    /// Per-layer parameter counts for the network's own input channels.
    pub fn layer_param_counts(&self) -> Vec<u64> {
        let shapes = self.shapes().expect("validated network propagates");
        let mut feed = self.input.feature_shape();
        let mut counts = Vec::with_capacity(self.layers.len());
        for (layer, out) in self.layers.iter().zip(shapes) {
            counts.push(layer.param_count(feed));
            feed = out;
        }
        counts
    }

    pub fn param_count(&self) -> u64 {
        self.layer_param_counts().iter().sum()
    }
}

fn shapes_from(input: FeatureShape, layers: &[LayerSpec]) -> Result<Vec<FeatureShape>, IrError> {
    let mut shape = input;
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(shape, i + 1)?;
        out.push(shape);
    }
    Ok(out)
}

/// Parameter counting over chains and merged DAGs.
pub trait ParamCount {
    /// Total trainable parameters when the network is fed `input_channels`
    /// channels at its declared spatial size.
    fn count_params(&self, input_channels: usize) -> Result<u64, IrError>;
}

impl ParamCount for NetworkSpec {
    fn count_params(&self, input_channels: usize) -> Result<u64, IrError> {
        let mut feed = FeatureShape::new(input_channels, self.input.height, self.input.width);
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            total += layer.param_count(feed);
            feed = layer.output_shape(feed, i + 1)?;
        }
        Ok(total)
    }
}

/// Free-function form of [`ParamCount::count_params`].
pub fn count_params<N: ParamCount + ?Sized>(network: &N, input_channels: usize) -> Result<u64, IrError> {
    network.count_params(input_channels)
}

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// A non-blank source line with comments stripped, split into tokens.
pub(crate) struct SourceLine<'a> {
    pub number: usize,
    pub tokens: Vec<&'a str>,
}

pub(crate) fn source_lines(text: &str) -> impl Iterator<Item = SourceLine<'_>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let code = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = code.split_whitespace().collect();
        (!tokens.is_empty()).then_some(SourceLine { number: i + 1, tokens })
    })
}

pub(crate) fn syntax(line: usize, message: impl Into<String>) -> IrError {
    IrError::Syntax {
        line,
        message: message.into(),
    }
}

pub(crate) fn semantic(line: usize, token: &str, message: impl Into<String>) -> IrError {
    IrError::Semantic {
        line,
        token: token.to_string(),
        message: message.into(),
    }
}

fn parse_positive(line: usize, token: &str, value: &str) -> Result<usize, IrError> {
    let n: usize = value
        .parse()
        .map_err(|_| syntax(line, format!("expected an integer in `{token}`")))?;
    Ok(n)
}

/// Parses the two header lines. Returns the name, input shape and the
/// remaining lines.
pub(crate) fn parse_header<'a, I>(lines: &mut I) -> Result<(String, InputShape), IrError>
where
    I: Iterator<Item = SourceLine<'a>>,
{
    let first = lines.next().ok_or_else(|| syntax(1, "missing `network NAME` header"))?;
    let name = match first.tokens.as_slice() {
        ["network", name] => {
            if !is_ident(name) {
                return Err(semantic(first.number, name, "not a valid identifier"));
            }
            name.to_string()
        }
        _ => return Err(syntax(first.number, "expected `network NAME`")),
    };
    let second = lines
        .next()
        .ok_or_else(|| syntax(first.number + 1, "missing `input H W C` line"))?;
    let input = match second.tokens.as_slice() {
        ["input", h, w, c] => {
            let dims = [h, w, c]
                .iter()
                .map(|t| parse_positive(second.number, t, t))
                .collect::<Result<Vec<_>, _>>()?;
            for (tok, d) in [h, w, c].iter().zip(&dims) {
                if *d == 0 {
                    return Err(semantic(second.number, tok, "input dimensions must be positive"));
                }
            }
            InputShape::new(dims[0], dims[1], dims[2])
        }
        _ => return Err(syntax(second.number, "expected `input H W C`")),
    };
    Ok((name, input))
}

/// Parses `key=value` attributes, rejecting unknown or repeated keys.
pub(crate) fn parse_attrs<'a>(
    line: usize,
    tokens: &[&'a str],
    allowed: &[&str],
) -> Result<Vec<(&'a str, &'a str, &'a str)>, IrError> {
    let mut seen: Vec<&str> = Vec::new();
    let mut attrs = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| syntax(line, format!("expected key=value, found `{tok}`")))?;
        if !allowed.contains(&key) {
            return Err(semantic(line, tok, format!("unknown attribute `{key}`")));
        }
        if seen.contains(&key) {
            return Err(semantic(line, tok, format!("attribute `{key}` given twice")));
        }
        seen.push(key);
        attrs.push((key, value, *tok));
    }
    Ok(attrs)
}

/// Parses a layer from its keyword and attribute tokens (`conv k=3 c=8 ...`).
pub(crate) fn parse_layer(line: usize, tokens: &[&str]) -> Result<LayerSpec, IrError> {
    let (kind, rest) = tokens.split_first().ok_or_else(|| syntax(line, "empty layer"))?;
    let required = |attrs: &[(&str, &str, &str)], key: &str| -> Result<(usize, String), IrError> {
        let (_, value, tok) = attrs
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| syntax(line, format!("`{kind}` needs `{key}=`")))?;
        Ok((parse_positive(line, tok, value)?, tok.to_string()))
    };
    let activation = |attrs: &[(&str, &str, &str)]| -> Result<Activation, IrError> {
        match attrs.iter().find(|(k, _, _)| *k == "act") {
            None => Ok(Activation::default()),
            Some((_, value, tok)) => value.parse().map_err(|m: String| semantic(line, tok, m)),
        }
    };
    let layer = match *kind {
        "conv" => {
            let attrs = parse_attrs(line, rest, &["k", "c", "bn", "act"])?;
            let (kernel, _) = required(&attrs, "k")?;
            let (out_channels, _) = required(&attrs, "c")?;
            let batch_norm = match attrs.iter().find(|(k, _, _)| *k == "bn") {
                None => false,
                Some((_, "true", _)) => true,
                Some((_, "false", _)) => false,
                Some((_, _, tok)) => return Err(semantic(line, tok, "expected true or false")),
            };
            LayerSpec::Conv {
                kernel,
                out_channels,
                batch_norm,
                activation: activation(&attrs)?,
            }
        }
        "dense" => {
            let attrs = parse_attrs(line, rest, &["u", "act"])?;
            let (units, _) = required(&attrs, "u")?;
            LayerSpec::Dense {
                units,
                activation: activation(&attrs)?,
            }
        }
        "maxpool" => {
            let attrs = parse_attrs(line, rest, &["w"])?;
            let (window, _) = required(&attrs, "w")?;
            LayerSpec::MaxPool { window }
        }
        other => return Err(syntax(line, format!("unknown layer kind `{other}`"))),
    };
    if let Err((token, message)) = layer.check() {
        return Err(semantic(line, &token, message));
    }
    Ok(layer)
}

pub fn parse_network(text: &str) -> Result<NetworkSpec, IrError> {
    let mut lines = source_lines(text);
    let (name, input) = parse_header(&mut lines)?;
    let mut layers = Vec::new();
    let mut line_numbers = Vec::new();
    for line in lines {
        layers.push(parse_layer(line.number, &line.tokens)?);
        line_numbers.push(line.number);
    }
    if layers.is_empty() {
        return Err(IrError::NoLayers);
    }
    // Spatial underflow is reported against the source line of the pool.
    if let Err(IrError::SpatialUnderflow { layer, window, .. }) = shapes_from(input.feature_shape(), &layers) {
        return Err(semantic(
            line_numbers[layer - 1],
            &format!("w={window}"),
            "pool window larger than the incoming spatial size",
        ));
    }
    NetworkSpec::new(name, input, layers)
}

pub fn serialize_network(spec: &NetworkSpec) -> String {
    let mut out = format!(
        "network {}\ninput {} {} {}\n",
        spec.name, spec.input.height, spec.input.width, spec.input.channels
    );
    for layer in &spec.layers {
        out.push_str(&layer.to_string());
        out.push('\n');
    }
    out
}

impl FromStr for NetworkSpec {
    type Err = IrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_network(s)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_network(self))
    }
}
