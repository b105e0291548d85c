//! Declarative architectures, cut-layer splitting and size arithmetic.
//!
//! # Text format
//!
//! One directive per line; `#` starts a comment. Cut points are the
//! backbone lines (`conv`, `dense`, `pool`), counted from 1.
//!
//! ```text
//! name toy
//! input 1 16 16            # channels height width
//! conv 8 k3 s2             # out-channels, odd kernel, stride; ReLU follows
//! conv 16 k3 s2 linear     # `linear` drops the ReLU
//! pool 2                   # non-overlapping average pooling
//! dense 32                 # flattens (C, H, W) inputs first
//! projector 64 32          # 2-layer MLP head: hidden width, output width
//! ```
//!
//! A compact one-line form (`c8s2-c16s2-d32`, tokens `c<out>[k<k>][s<s>]`,
//! `d<out>`, `p<k>`) is accepted by [`ArchitectureSpec::from_compact`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Layer, Stack};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    Dense {
        outputs: usize,
        relu: bool,
    },
    Pool {
        kernel: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub hidden: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    name: String,
    input_shape: [usize; 3],
    blocks: Vec<BlockSpec>,
    projector: ProjectorSpec,
    /// `shapes[i]` is the input shape of block `i`; the last entry is the
    /// backbone output.
    shapes: Vec<Vec<usize>>,
}

/// Text of the bundled architectures, addressable by name.
pub const BUILTIN_ARCHS: &[(&str, &str)] = &[
    (
        "toy",
        "name toy\ninput 1 16 16\nconv 8 k3 s2\nconv 16 k3 s2\ndense 64\nprojector 64 32\n",
    ),
    (
        "mobile",
        "name mobile\n\
         input 1 16 16\n\
         conv 8 k3 s1\n\
         conv 8 k3 s2\n\
         conv 16 k3 s1\n\
         conv 16 k3 s2\n\
         conv 32 k3 s1\n\
         conv 32 k3 s2\n\
         dense 64\n\
         projector 64 32\n",
    ),
];

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Splits a line into (1-based column, token) pairs.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s + 1, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

fn positive(line: usize, col: usize, tok: &str, what: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(parse_err(line, col, format!("{what} must be a positive integer, got `{tok}`"))),
    }
}

impl BlockSpec {
    fn param_count(&self, input: &[usize]) -> usize {
        match *self {
            BlockSpec::Conv { out_channels, kernel, .. } => {
                out_channels * input[0] * kernel * kernel + out_channels
            }
            BlockSpec::Dense { outputs, .. } => {
                input.iter().product::<usize>() * outputs + outputs
            }
            BlockSpec::Pool { .. } => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            BlockSpec::Conv { out_channels, kernel, stride, .. } => {
                let &[_, h, w] = input else {
                    return Err(format!("conv needs a (C, H, W) input, got {input:?}"));
                };
                let pad = kernel / 2;
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(format!("input {h}x{w} is smaller than kernel {kernel}"));
                }
                let ext = |n: usize| (n + 2 * pad - kernel) / stride + 1;
                Ok(vec![out_channels, ext(h), ext(w)])
            }
            BlockSpec::Dense { outputs, .. } => Ok(vec![outputs]),
            BlockSpec::Pool { kernel } => {
                let &[c, h, w] = input else {
                    return Err(format!("pool needs a (C, H, W) input, got {input:?}"));
                };
                if h < kernel || w < kernel {
                    return Err(format!("input {h}x{w} is smaller than pool window {kernel}"));
                }
                Ok(vec![c, h / kernel, w / kernel])
            }
        }
    }

    fn build(&self, input: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
        match *self {
            BlockSpec::Conv { out_channels, kernel, stride, relu } => {
                let mut v = vec![Layer::Conv2d(Conv2d::init(input[0], out_channels, kernel, stride, rng))];
                if relu {
                    v.push(Layer::Relu);
                }
                v
            }
            BlockSpec::Dense { outputs, relu } => {
                let mut v = Vec::new();
                if input.len() != 1 {
                    v.push(Layer::Flatten);
                }
                v.push(Layer::Dense(Dense::init(input.iter().product(), outputs, rng)));
                if relu {
                    v.push(Layer::Relu);
                }
                v
            }
            BlockSpec::Pool { kernel } => vec![Layer::AvgPool2d { kernel }],
        }
    }
}

impl ArchitectureSpec {
    /// Validates and runs shape inference.
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        blocks: Vec<BlockSpec>,
        projector: ProjectorSpec,
    ) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {input_shape:?} has a zero extent")));
        }
        if blocks.is_empty() {
            return Err(Error::Config("architecture needs at least one backbone layer".into()));
        }
        if projector.hidden == 0 || projector.outputs == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, b) in blocks.iter().enumerate() {
            if let BlockSpec::Conv { kernel, stride, .. } = b {
                if kernel % 2 == 0 || *stride == 0 {
                    return Err(Error::Config(format!(
                        "layer {}: kernel must be odd and stride positive",
                        i + 1
                    )));
                }
            }
            let next = b
                .output_shape(shapes.last().unwrap())
                .map_err(|m| Error::Config(format!("layer {}: {m}", i + 1)))?;
            shapes.push(next);
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            blocks,
            projector,
            shapes,
        })
    }

    /// Parses the line-oriented text format (see module docs).
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input = None;
        let mut projector = None;
        let mut blocks = Vec::new();
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("");
            let toks = tokens(content);
            let Some(&(col, head)) = toks.first() else {
                continue;
            };
            let args = &toks[1..];
            match head {
                "name" => {
                    let &[(_, n)] = args else {
                        return Err(parse_err(line, col, "`name` takes exactly one identifier"));
                    };
                    name = Some(n.to_string());
                }
                "input" => {
                    if args.len() != 3 {
                        return Err(parse_err(line, col, "`input` takes channels, height and width"));
                    }
                    let mut dims = [0; 3];
                    for (d, &(c, t)) in dims.iter_mut().zip(args) {
                        *d = positive(line, c, t, "input extent")?;
                    }
                    input = Some(dims);
                }
                "projector" => {
                    let &[(c1, h), (c2, o)] = args else {
                        return Err(parse_err(line, col, "`projector` takes hidden and output widths"));
                    };
                    projector = Some(ProjectorSpec {
                        hidden: positive(line, c1, h, "projector hidden width")?,
                        outputs: positive(line, c2, o, "projector output width")?,
                    });
                }
                "conv" => {
                    let Some(&(c, out)) = args.first() else {
                        return Err(parse_err(line, col, "`conv` needs an output channel count"));
                    };
                    let out_channels = positive(line, c, out, "conv output channels")?;
                    let (mut kernel, mut stride, mut relu) = (3, 1, true);
                    for &(c, t) in &args[1..] {
                        if let Some(k) = t.strip_prefix('k') {
                            kernel = positive(line, c, k, "kernel size")?;
                            if kernel % 2 == 0 {
                                return Err(parse_err(line, c, "kernel size must be odd"));
                            }
                        } else if let Some(s) = t.strip_prefix('s') {
                            stride = positive(line, c, s, "stride")?;
                        } else if t == "linear" {
                            relu = false;
                        } else if t == "relu" {
                            relu = true;
                        } else {
                            return Err(parse_err(line, c, format!("unknown conv option `{t}`")));
                        }
                    }
                    blocks.push((line, col, BlockSpec::Conv { out_channels, kernel, stride, relu }));
                }
                "dense" => {
                    let Some(&(c, out)) = args.first() else {
                        return Err(parse_err(line, col, "`dense` needs an output width"));
                    };
                    let outputs = positive(line, c, out, "dense output width")?;
                    let mut relu = true;
                    for &(c, t) in &args[1..] {
                        match t {
                            "linear" => relu = false,
                            "relu" => relu = true,
                            _ => return Err(parse_err(line, c, format!("unknown dense option `{t}`"))),
                        }
                    }
                    blocks.push((line, col, BlockSpec::Dense { outputs, relu }));
                }
                "pool" => {
                    let &[(c, k)] = args else {
                        return Err(parse_err(line, col, "`pool` takes one window size"));
                    };
                    let k = k.strip_prefix('k').unwrap_or(k);
                    let kernel = positive(line, c, k, "pool window")?;
                    blocks.push((line, col, BlockSpec::Pool { kernel }));
                }
                other => return Err(parse_err(line, col, format!("unknown directive `{other}`"))),
            }
        }
        let input = input.ok_or_else(|| parse_err(last_line.max(1), 1, "missing `input` line"))?;
        let projector =
            projector.ok_or_else(|| parse_err(last_line.max(1), 1, "missing `projector` line"))?;
        if blocks.is_empty() {
            return Err(parse_err(last_line.max(1), 1, "no backbone layers"));
        }
        // Shape inference with the failing line reported.
        let mut shape = input.to_vec();
        for (line, col, b) in &blocks {
            shape = b
                .output_shape(&shape)
                .map_err(|m| parse_err(*line, *col, m))?;
        }
        Self::new(
            name.unwrap_or_else(|| "unnamed".into()),
            input,
            blocks.into_iter().map(|(_, _, b)| b).collect(),
            projector,
        )
    }

    /// Parses the compact dash-separated notation, e.g. `c8s2-c16s2-d32`.
    pub fn from_compact(
        name: &str,
        input_shape: [usize; 3],
        layers: &str,
        projector: ProjectorSpec,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut column = 1;
        for tok in layers.split('-') {
            let bad = |msg: &str| parse_err(1, column, format!("{msg} in `{tok}`"));
            let (kind, rest) = tok.split_at(tok.chars().next().map_or(0, char::len_utf8));
            let num_prefix = |s: &str| -> (Option<usize>, usize) {
                let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
                (s[..end].parse().ok(), end)
            };
            let (value, end) = num_prefix(rest);
            let value = value.filter(|&v| v > 0).ok_or_else(|| bad("missing size"))?;
            let mut opts = &rest[end..];
            match kind {
                "c" => {
                    let (mut kernel, mut stride) = (3, 1);
                    while !opts.is_empty() {
                        let (flag, tail) = opts.split_at(1);
                        let (v, e) = num_prefix(tail);
                        let v = v.filter(|&v| v > 0).ok_or_else(|| bad("bad option"))?;
                        match flag {
                            "k" if v % 2 == 1 => kernel = v,
                            "s" => stride = v,
                            _ => return Err(bad("bad option")),
                        }
                        opts = &tail[e..];
                    }
                    blocks.push(BlockSpec::Conv { out_channels: value, kernel, stride, relu: true });
                }
                "d" if opts.is_empty() => blocks.push(BlockSpec::Dense { outputs: value, relu: true }),
                "p" if opts.is_empty() => blocks.push(BlockSpec::Pool { kernel: value }),
                _ => return Err(bad("unknown layer")),
            }
            column += tok.len() + 1;
        }
        Self::new(name, input_shape, blocks, projector)
    }

    /// Looks up a bundled architecture by name.
    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_ARCHS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text).expect("bundled architectures parse"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn projector(&self) -> ProjectorSpec {
        self.projector
    }

    /// Number of backbone layers, i.e. the deepest valid cut.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Inferred per-sample shape entering block `index` (0-based);
    /// `shape_at(depth())` is the backbone output.
    pub fn shape_at(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    /// Output shape of every backbone layer, in order.
    pub fn layer_output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes[1..]
    }

    pub fn backbone_output_width(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub fn check_cut(&self, cut_layer: usize) -> Result<()> {
        if cut_layer == 0 || cut_layer > self.depth() {
            return Err(Error::Argument(format!(
                "cut_layer {cut_layer} out of range; valid cuts for `{}` are 1..={}",
                self.name,
                self.depth()
            )));
        }
        Ok(())
    }

    /// Elements crossing the split boundary for `batch` samples.
    pub fn activation_size(&self, cut_layer: usize, batch: usize) -> Result<usize> {
        self.check_cut(cut_layer)?;
        Ok(batch * self.shapes[cut_layer].iter().product::<usize>())
    }

    pub fn block_param_count(&self, index: usize) -> usize {
        self.blocks[index].param_count(&self.shapes[index])
    }

    /// Parameters held by a client at the given cut.
    pub fn client_param_count(&self, cut_layer: usize) -> Result<usize> {
        self.check_cut(cut_layer)?;
        Ok((0..cut_layer).map(|i| self.block_param_count(i)).sum())
    }

    pub fn projector_param_count(&self) -> usize {
        let w = self.backbone_output_width();
        let ProjectorSpec { hidden, outputs } = self.projector;
        w * hidden + hidden + hidden * outputs + outputs
    }

    pub fn total_param_count(&self) -> usize {
        (0..self.depth()).map(|i| self.block_param_count(i)).sum::<usize>()
            + self.projector_param_count()
    }

    /// Renders the line format; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input_shape;
        let mut s = format!("name {}\ninput {c} {h} {w}\n", self.name);
        for b in &self.blocks {
            match b {
                BlockSpec::Conv { out_channels, kernel, stride, relu } => {
                    s += &format!("conv {out_channels} k{kernel} s{stride}");
                    if !relu {
                        s += " linear";
                    }
                }
                BlockSpec::Dense { outputs, relu } => {
                    s += &format!("dense {outputs}");
                    if !relu {
                        s += " linear";
                    }
                }
                BlockSpec::Pool { kernel } => s += &format!("pool {kernel}"),
            }
            s.push('\n');
        }
        s += &format!("projector {} {}\n", self.projector.hidden, self.projector.outputs);
        s
    }
}

/// Initialized layers of an architecture, kept per backbone block.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ArchitectureSpec,
    blocks: Vec<Vec<Layer>>,
    projector: Vec<Layer>,
}

impl Model {
    /// Fan-in scaled uniform initialization from `seed`, blocks first,
    /// projector last.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.build(&spec.shapes[i], &mut rng))
            .collect();
        let mut projector = Vec::new();
        let out = spec.shapes.last().unwrap();
        if out.len() != 1 {
            projector.push(Layer::Flatten);
        }
        let width = spec.backbone_output_width();
        projector.push(Layer::Dense(Dense::init(width, spec.projector.hidden, &mut rng)));
        projector.push(Layer::Relu);
        projector.push(Layer::Dense(Dense::init(
            spec.projector.hidden,
            spec.projector.outputs,
            &mut rng,
        )));
        projector.push(Layer::L2Norm);
        Self {
            spec: spec.clone(),
            blocks,
            projector,
        }
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    fn collect(&self, range: std::ops::Range<usize>) -> Vec<Layer> {
        self.blocks[range].iter().flatten().cloned().collect()
    }

    /// Backbone layers only (projector excluded).
    pub fn backbone(&self) -> Stack {
        Stack::new(self.collect(0..self.spec.depth()))
    }

    /// Projector head including the final L2 normalization.
    pub fn projector(&self) -> Stack {
        Stack::new(self.projector.clone())
    }

    /// Backbone, projector and normalization as one unsplit stack.
    pub fn whole(&self) -> Stack {
        self.backbone().then(&self.projector())
    }

    pub fn split(&self, cut_layer: usize) -> Result<SplitArchitecture> {
        self.spec.check_cut(cut_layer)?;
        let client = Stack::new(self.collect(0..cut_layer));
        let server_backbone = self.collect(cut_layer..self.spec.depth());
        let server_backbone_layers = server_backbone.len();
        let mut server = server_backbone;
        server.extend(self.projector.iter().cloned());
        Ok(SplitArchitecture {
            spec: self.spec.clone(),
            cut_layer,
            client: Stack::new(client.layers().to_vec()),
            server: Stack::new(server),
            server_backbone_layers,
        })
    }
}

/// A model divided at `cut_layer` into client layers `[0, cut)` and server
/// layers `[cut, depth)` plus the projector.
#[derive(Debug, Clone)]
pub struct SplitArchitecture {
    pub spec: ArchitectureSpec,
    pub cut_layer: usize,
    pub client: Stack,
    pub server: Stack,
    /// Leading server layers that belong to the backbone.
    pub server_backbone_layers: usize,
}

impl SplitArchitecture {
    pub fn boundary_shape(&self) -> &[usize] {
        self.spec.shape_at(self.cut_layer)
    }

    /// Client part followed by the server-side backbone layers of `server`.
    pub fn encoder(&self, client: &Stack, server: &Stack) -> Stack {
        client.then(&server.sub_stack(0, self.server_backbone_layers))
    }
}
