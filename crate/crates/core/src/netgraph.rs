//! Layer graph of an encoder-decoder network, partitioned into backbone and
//! decoder, with per-channel prunability flags.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const GRAPH_FORMAT: &str = "segprune-graph";
pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Batchnorm,
    /// ReLU.
    Activation,
    /// Global average pooling to 1x1.
    Pool,
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample,
    ElementwiseAdd,
    Concat,
    /// 1x1 convolution with bias producing class logits from pooled features.
    ClassifierHead,
    /// 1x1 convolution with bias producing per-pixel class logits.
    SegmentationHead,
}

impl LayerKind {
    /// Layers that own a weight tensor.
    pub fn is_conv_like(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::ClassifierHead | LayerKind::SegmentationHead
        )
    }

    /// Layers whose output channel `i` depends only on input channel `i`.
    pub fn is_channelwise(self) -> bool {
        matches!(
            self,
            LayerKind::Batchnorm | LayerKind::Activation | LayerKind::Pool | LayerKind::Upsample
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Backbone,
    Decoder,
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Partition::Backbone => f.write_str("backbone"),
            Partition::Decoder => f.write_str("decoder"),
        }
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub dilation: usize,
    /// Upsampling factor (upsample layers only).
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub scale: usize,
    #[serde(default)]
    pub bias: bool,
    pub partition: Partition,
    #[serde(default)]
    pub prunable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_group: Option<String>,
}

impl LayerSpec {
    fn base(id: &str, kind: LayerKind, channels: usize, partition: Partition) -> Self {
        LayerSpec {
            id: id.to_string(),
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel_size: 1,
            stride: 1,
            dilation: 1,
            scale: 1,
            bias: false,
            partition,
            prunable: false,
            residual_group: None,
        }
    }

    pub fn conv(id: &str, cin: usize, cout: usize, kernel: usize, partition: Partition) -> Self {
        LayerSpec {
            in_channels: cin,
            out_channels: cout,
            kernel_size: kernel,
            ..Self::base(id, LayerKind::Conv, cin, partition)
        }
    }

    pub fn batchnorm(id: &str, c: usize, partition: Partition) -> Self {
        Self::base(id, LayerKind::Batchnorm, c, partition)
    }

    pub fn relu(id: &str, c: usize, partition: Partition) -> Self {
        Self::base(id, LayerKind::Activation, c, partition)
    }

    pub fn pool(id: &str, c: usize, partition: Partition) -> Self {
        Self::base(id, LayerKind::Pool, c, partition)
    }

    pub fn upsample(id: &str, c: usize, scale: usize, partition: Partition) -> Self {
        LayerSpec {
            scale,
            ..Self::base(id, LayerKind::Upsample, c, partition)
        }
    }

    pub fn add(id: &str, c: usize, partition: Partition) -> Self {
        Self::base(id, LayerKind::ElementwiseAdd, c, partition)
    }

    pub fn concat(id: &str, c: usize, partition: Partition) -> Self {
        Self::base(id, LayerKind::Concat, c, partition)
    }

    pub fn head(id: &str, kind: LayerKind, cin: usize, classes: usize, partition: Partition) -> Self {
        LayerSpec {
            in_channels: cin,
            out_channels: classes,
            bias: true,
            ..Self::base(id, kind, cin, partition)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn prunable(mut self, prunable: bool) -> Self {
        self.prunable = prunable;
        self
    }

    pub fn in_group(mut self, group: &str) -> Self {
        self.residual_group = Some(group.to_string());
        self
    }

    /// Zero padding that keeps the spatial size at stride 1.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel_size - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Producer -> consumer pairs. For multi-input layers the edge order fixes
    /// the input order.
    pub edges: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    format: String,
    version: u32,
    #[serde(flatten)]
    graph: NetworkGraph,
}

impl NetworkGraph {
    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect()
    }

    pub fn producers(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, to)| to == id)
            .map(|(from, _)| from.as_str())
            .collect()
    }

    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(from, _)| from == id)
            .map(|(_, to)| to.as_str())
            .collect()
    }

    /// Producer indices per layer, in edge order. Empty means "reads the input".
    pub fn producer_indices(&self) -> Result<Vec<Vec<usize>>> {
        let idx = self.index_map();
        let mut out = vec![Vec::new(); self.layers.len()];
        for (from, to) in &self.edges {
            let (Some(&f), Some(&t)) = (idx.get(from.as_str()), idx.get(to.as_str())) else {
                return Err(Error::Structure(format!("edge {from} -> {to} names an unknown layer")));
            };
            out[t].push(f);
        }
        Ok(out)
    }

    /// The classification logits layer.
    pub fn classifier_output(&self) -> Option<&str> {
        self.layers
            .iter()
            .find(|l| l.kind == LayerKind::ClassifierHead)
            .map(|l| l.id.as_str())
    }

    /// The sink of the decoder: segmentation logits at input resolution.
    pub fn segmentation_output(&self) -> Option<&str> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.partition == Partition::Decoder && self.consumers(&l.id).is_empty())
            .map(|l| l.id.as_str())
    }

    /// Prunable convolutions of a partition, in layer order.
    pub fn prunable_convs(&self, partition: Partition) -> Vec<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| l.prunable && l.kind.is_conv_like() && l.partition == partition)
            .collect()
    }

    /// Number of prunable output channels in a partition.
    pub fn prunable_channel_count(&self, partition: Partition) -> usize {
        self.prunable_convs(partition)
            .iter()
            .map(|l| l.out_channels)
            .sum()
    }

    /// The batch-norm directly consuming a convolution, if any.
    pub fn batchnorm_after(&self, conv_id: &str) -> Option<&LayerSpec> {
        let consumers = self.consumers(conv_id);
        match consumers.as_slice() {
            [only] => self
                .layer(only)
                .filter(|l| l.kind == LayerKind::Batchnorm),
            _ => None,
        }
    }

    /// Output `(C, H, W)` of every layer for the given input shape.
    pub fn propagate_shapes(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let producers = self.producer_indices()?;
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<[usize; 3]> = if producers[i].is_empty() {
                vec![input]
            } else {
                producers[i]
                    .iter()
                    .map(|&p| {
                        shapes.get(p).copied().ok_or_else(|| {
                            Error::Structure(format!(
                                "layer `{}` consumes `{}` before it is computed",
                                layer.id, self.layers[p].id
                            ))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            let [c, h, w] = ins[0];
            let out = match layer.kind {
                LayerKind::Conv | LayerKind::ClassifierHead | LayerKind::SegmentationHead => {
                    let span = layer.dilation * (layer.kernel_size - 1) + 1;
                    let pad = 2 * layer.padding();
                    if h + pad < span || w + pad < span || layer.stride == 0 {
                        return Err(Error::Shape(format!(
                            "layer `{}` reduces spatial size {h}x{w} to zero",
                            layer.id
                        )));
                    }
                    let ho = (h + pad - span) / layer.stride + 1;
                    let wo = (w + pad - span) / layer.stride + 1;
                    [layer.out_channels, ho, wo]
                }
                LayerKind::Pool => [c, 1, 1],
                LayerKind::Upsample => [c, h * layer.scale, w * layer.scale],
                LayerKind::Concat => {
                    if ins.iter().any(|s| s[1] != h || s[2] != w) {
                        return Err(Error::Shape(format!(
                            "concat `{}` inputs differ spatially",
                            layer.id
                        )));
                    }
                    [ins.iter().map(|s| s[0]).sum(), h, w]
                }
                LayerKind::ElementwiseAdd => {
                    if ins.iter().any(|s| *s != ins[0]) {
                        return Err(Error::Shape(format!("add `{}` inputs differ in shape", layer.id)));
                    }
                    [c, h, w]
                }
                LayerKind::Batchnorm | LayerKind::Activation => [c, h, w],
            };
            if out[1] == 0 || out[2] == 0 {
                return Err(Error::Shape(format!("layer `{}` has empty output", layer.id)));
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDocument {
            format: GRAPH_FORMAT.to_string(),
            version: GRAPH_VERSION,
            graph: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        if doc.format != GRAPH_FORMAT || doc.version != GRAPH_VERSION {
            return Err(Error::Parse(format!(
                "unsupported graph document {} v{}",
                doc.format, doc.version
            )));
        }
        Ok(doc.graph)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct GraphBuilder {
    layers: Vec<LayerSpec>,
    edges: Vec<(String, String)>,
}

impl GraphBuilder {
    fn push(&mut self, layer: LayerSpec, inputs: &[&str]) -> String {
        let id = layer.id.clone();
        for from in inputs {
            self.edges.push((from.to_string(), id.clone()));
        }
        self.layers.push(layer);
        id
    }

    /// conv -> batchnorm -> relu, returning the relu id.
    fn conv_bn_relu(&mut self, conv: LayerSpec, input: &str) -> String {
        let prefix = conv.id.trim_end_matches(".conv").to_string();
        let (c, part, group) = (conv.out_channels, conv.partition, conv.residual_group.clone());
        let conv_id = self.push(conv, &[input]);
        let mut bn = LayerSpec::batchnorm(&format!("{prefix}.bn"), c, part);
        bn.residual_group = group.clone();
        let bn_id = self.push(bn, &[&conv_id]);
        let mut relu = LayerSpec::relu(&format!("{prefix}.relu"), c, part);
        relu.residual_group = group;
        self.push(relu, &[&bn_id])
    }
}

/// Builds the desk-scale segmentation network: a residual backbone with a
/// classification head and a miniature atrous-pyramid decoder.
///
/// Each residual block is conv3x3-BN-ReLU, conv3x3-BN-ReLU, conv1x1-BN, plus
/// an identity or projection skip, then ReLU. Only the first two convolutions
/// of a block are prunable; the block-output and projection convolutions feed
/// the residual sum and keep all channels.
pub fn build_desk_network(cfg: &ModelConfig) -> Result<NetworkGraph> {
    if cfg.width == 0 || cfg.depth == 0 || cfg.decoder_width == 0 {
        return Err(Error::Config(format!(
            "width ({}), depth ({}) and decoder_width ({}) must be positive",
            cfg.width, cfg.depth, cfg.decoder_width
        )));
    }
    if cfg.in_channels == 0 || cfg.image_size < 2 || cfg.num_classes == 0 || cfg.seg_classes == 0 {
        return Err(Error::Config("input size and class counts must be positive".into()));
    }
    let bb = Partition::Backbone;
    let dec = Partition::Decoder;
    let mut b = GraphBuilder {
        layers: Vec::new(),
        edges: Vec::new(),
    };

    let w0 = cfg.width;
    let mut x = b.conv_bn_relu(LayerSpec::conv("stem.conv", cfg.in_channels, w0, 3, bb), "");
    // The stem reads the graph input: drop the placeholder edge.
    b.edges.retain(|(from, _)| !from.is_empty());
    let mut channels = w0;
    let mut spatial = cfg.image_size;
    let mut output_stride = 1;

    for i in 0..cfg.depth {
        let g = format!("block{i}");
        let width = if i == 0 { w0 } else { 2 * w0 };
        let stride = if i == 1 && spatial >= 2 { 2 } else { 1 };
        let c1 = LayerSpec::conv(&format!("{g}.c1.conv"), channels, width, 3, bb)
            .with_stride(stride)
            .prunable(true)
            .in_group(&g);
        let r1 = b.conv_bn_relu(c1, &x);
        let c2 = LayerSpec::conv(&format!("{g}.c2.conv"), width, width, 3, bb)
            .prunable(true)
            .in_group(&g);
        let r2 = b.conv_bn_relu(c2, &r1);
        let c3 = b.push(
            LayerSpec::conv(&format!("{g}.c3.conv"), width, width, 1, bb).in_group(&g),
            &[&r2],
        );
        let bn3 = b.push(LayerSpec::batchnorm(&format!("{g}.c3.bn"), width, bb).in_group(&g), &[&c3]);
        let skip = if stride != 1 || channels != width {
            let p = b.push(
                LayerSpec::conv(&format!("{g}.proj.conv"), channels, width, 1, bb)
                    .with_stride(stride)
                    .in_group(&g),
                &[&x],
            );
            b.push(LayerSpec::batchnorm(&format!("{g}.proj.bn"), width, bb).in_group(&g), &[&p])
        } else {
            x.clone()
        };
        let add = b.push(LayerSpec::add(&format!("{g}.add"), width, bb).in_group(&g), &[&bn3, &skip]);
        x = b.push(LayerSpec::relu(&format!("{g}.out"), width, bb).in_group(&g), &[&add]);
        channels = width;
        if stride == 2 {
            spatial = spatial.div_ceil(2);
            output_stride *= 2;
        }
    }
    let features = x;

    let pool = b.push(LayerSpec::pool("cls.pool", channels, bb), &[&features]);
    b.push(
        LayerSpec::head("cls.head", LayerKind::ClassifierHead, channels, cfg.num_classes, bb),
        &[&pool],
    );

    let d = cfg.decoder_width;
    let mut branches = Vec::new();
    branches.push(b.conv_bn_relu(
        LayerSpec::conv("aspp.b0.conv", channels, d, 1, dec).prunable(true),
        &features,
    ));
    for (j, dil) in [(1, 2), (2, 3)] {
        branches.push(b.conv_bn_relu(
            LayerSpec::conv(&format!("aspp.b{j}.conv"), channels, d, 3, dec)
                .with_dilation(dil)
                .prunable(true),
            &features,
        ));
    }
    let gp = b.push(LayerSpec::pool("aspp.gp.pool", channels, dec), &[&features]);
    let gp_relu = b.conv_bn_relu(LayerSpec::conv("aspp.gp.conv", channels, d, 1, dec).prunable(true), &gp);
    branches.push(b.push(LayerSpec::upsample("aspp.gp.up", d, spatial, dec), &[&gp_relu]));
    let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
    let cat = b.push(LayerSpec::concat("aspp.cat", 4 * d, dec), &refs);
    let proj = b.conv_bn_relu(LayerSpec::conv("aspp.proj.conv", 4 * d, d, 1, dec).prunable(true), &cat);
    let mut head_out = b.push(
        LayerSpec::head("seg.head", LayerKind::SegmentationHead, d, cfg.seg_classes, dec)
            .prunable(cfg.seg_head_prunable),
        &[&proj],
    );
    if cfg.seg_head_prunable {
        // A prunable head needs scaling factors of its own.
        head_out = b.push(LayerSpec::batchnorm("seg.head.bn", cfg.seg_classes, dec), &[&head_out]);
    }
    if output_stride > 1 {
        b.push(
            LayerSpec::upsample("seg.up", cfg.seg_classes, output_stride, dec),
            &[&head_out],
        );
    }

    Ok(NetworkGraph {
        input_shape: [cfg.in_channels, cfg.image_size, cfg.image_size],
        layers: b.layers,
        edges: b.edges,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    DuplicateId,
    UnknownLayer,
    TopologicalOrder,
    ChannelConsistency,
    SpatialConsistency,
    Prunability,
    MissingScalingFactor,
    ResidualGroupPartition,
    Arity,
}

/// A broken graph invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub layers: Vec<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} [{}]: {}", self.rule, self.layers.join(", "), self.message)
    }
}

/// Checks every graph invariant. An empty result means the graph is valid.
pub fn validate(graph: &NetworkGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |rule, layers: &[&str], message: String| {
        out.push(Violation {
            rule,
            layers: layers.iter().map(|s| s.to_string()).collect(),
            message,
        })
    };

    let mut seen = BTreeSet::new();
    for l in &graph.layers {
        if !seen.insert(l.id.as_str()) {
            v(Rule::DuplicateId, &[&l.id], "layer id appears more than once".into());
        }
    }
    let idx = graph.index_map();

    let mut producers: Vec<Vec<usize>> = vec![Vec::new(); graph.layers.len()];
    for (from, to) in &graph.edges {
        match (idx.get(from.as_str()), idx.get(to.as_str())) {
            (Some(&f), Some(&t)) => {
                if f >= t {
                    v(
                        Rule::TopologicalOrder,
                        &[from, to],
                        format!("edge goes from position {f} to position {t}"),
                    );
                }
                producers[t].push(f);
            }
            _ => v(Rule::UnknownLayer, &[from, to], "edge names an unknown layer".into()),
        }
    }

    for (i, l) in graph.layers.iter().enumerate() {
        let ins: Vec<&LayerSpec> = producers[i].iter().map(|&p| &graph.layers[p]).collect();
        let multi = matches!(l.kind, LayerKind::Concat | LayerKind::ElementwiseAdd);
        if multi && ins.len() < 2 {
            v(Rule::Arity, &[&l.id], format!("{:?} needs at least two inputs", l.kind));
        }
        if !multi && ins.len() > 1 {
            v(Rule::Arity, &[&l.id], "layer takes a single input".into());
        }
        if l.kernel_size == 0 || l.stride == 0 || l.dilation == 0 || l.scale == 0 {
            v(Rule::Arity, &[&l.id], "kernel, stride, dilation and scale must be positive".into());
        }
        if l.in_channels == 0 || l.out_channels == 0 {
            v(Rule::ChannelConsistency, &[&l.id], "channel counts must be positive".into());
        }

        let expected_in = match l.kind {
            LayerKind::Concat => ins.iter().map(|p| p.out_channels).sum(),
            _ if ins.is_empty() => graph.input_shape[0],
            _ => ins[0].out_channels,
        };
        if l.in_channels != expected_in {
            let mut names: Vec<&str> = ins.iter().map(|p| p.id.as_str()).collect();
            names.push(&l.id);
            v(
                Rule::ChannelConsistency,
                &names,
                format!("in_channels {} but producers supply {expected_in}", l.in_channels),
            );
        }
        if l.kind == LayerKind::ElementwiseAdd {
            if let Some(bad) = ins.iter().find(|p| p.out_channels != l.in_channels) {
                v(
                    Rule::ChannelConsistency,
                    &[&bad.id, &l.id],
                    format!("add partner supplies {} channels, expected {}", bad.out_channels, l.in_channels),
                );
            }
        }
        if !l.kind.is_conv_like() && l.in_channels != l.out_channels {
            v(
                Rule::ChannelConsistency,
                &[&l.id],
                format!("{:?} must preserve channels ({} -> {})", l.kind, l.in_channels, l.out_channels),
            );
        }

        if l.prunable {
            if !l.kind.is_conv_like() {
                v(Rule::Prunability, &[&l.id], "only convolutions can be prunable".into());
            } else {
                if let Some(add) = reaches_residual_sum(graph, &idx, &l.id) {
                    v(
                        Rule::Prunability,
                        &[&l.id, &add],
                        "prunable convolution feeds a residual sum".into(),
                    );
                }
                if graph.batchnorm_after(&l.id).is_none() {
                    v(
                        Rule::MissingScalingFactor,
                        &[&l.id],
                        "prunable convolution is not followed by a batch-norm".into(),
                    );
                }
            }
        }
    }

    let mut groups: HashMap<&str, (Partition, &str)> = HashMap::new();
    for l in &graph.layers {
        if let Some(g) = &l.residual_group {
            match groups.get(g.as_str()) {
                Some(&(p, first)) if p != l.partition => v(
                    Rule::ResidualGroupPartition,
                    &[first, &l.id],
                    format!("residual group `{g}` spans both partitions"),
                ),
                Some(_) => {}
                None => {
                    groups.insert(g, (l.partition, &l.id));
                }
            }
        }
    }

    if out.is_empty() {
        if let Err(e) = graph.propagate_shapes(graph.input_shape) {
            out.push(Violation {
                rule: Rule::SpatialConsistency,
                layers: Vec::new(),
                message: e.to_string(),
            });
        }
    }
    out
}

/// Follows channel-preserving consumers of `conv_id` and reports the first
/// residual sum reached.
fn reaches_residual_sum(graph: &NetworkGraph, idx: &HashMap<&str, usize>, conv_id: &str) -> Option<String> {
    let mut queue: VecDeque<&str> = graph.consumers(conv_id).into();
    let mut visited = BTreeSet::new();
    while let Some(id) = queue.pop_front() {
        if !visited.insert(id) {
            continue;
        }
        let Some(&i) = idx.get(id) else { continue };
        let layer = &graph.layers[i];
        match layer.kind {
            LayerKind::ElementwiseAdd => return Some(layer.id.clone()),
            k if k.is_channelwise() || k == LayerKind::Concat => {
                queue.extend(graph.consumers(id));
            }
            _ => {}
        }
    }
    None
}

/// One scaling factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEntry {
    /// The prunable convolution owning the channel.
    pub layer_id: String,
    pub channel: usize,
    pub value: f64,
}

/// Batch-norm scales of every prunable channel of one partition, in layer
/// order then channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingVector {
    pub partition: Partition,
    pub entries: Vec<ScalingEntry>,
}

impl ScalingVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    /// Fraction of entries with `|value| < tol`.
    pub fn fraction_below(&self, tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().filter(|e| e.value.abs() < tol).count() as f64 / self.entries.len() as f64
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.value *= factor;
        }
        out
    }
}

/// Reads the batch-norm scale of every prunable channel in `partition`.
pub fn extract_scaling_factors(
    graph: &NetworkGraph,
    weights: &ParamStore,
    partition: Partition,
) -> Result<ScalingVector> {
    let mut entries = Vec::new();
    for conv in graph.prunable_convs(partition) {
        let bn = graph.batchnorm_after(&conv.id).ok_or_else(|| {
            Error::Structure(format!("prunable layer `{}` has no batch-norm", conv.id))
        })?;
        let gamma = weights.gamma(&bn.id).ok_or_else(|| {
            Error::Structure(format!("missing batch-norm scale for `{}`", bn.id))
        })?;
        if gamma.len() != conv.out_channels {
            return Err(Error::Structure(format!(
                "batch-norm `{}` has {} scales for {} channels",
                bn.id,
                gamma.len(),
                conv.out_channels
            )));
        }
        entries.extend(gamma.iter().enumerate().map(|(c, &value)| ScalingEntry {
            layer_id: conv.id.clone(),
            channel: c,
            value,
        }));
    }
    Ok(ScalingVector { partition, entries })
}
