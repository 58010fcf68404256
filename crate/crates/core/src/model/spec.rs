//! Shape-level architecture descriptions and exact parameter counting.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerKind {
    /// Stride-1 square convolution with `kernel/2` zero padding.
    Conv { kernel: usize, bias: bool },
    Bn,
    Relu,
    /// Adds activation `from` (0 is the network input, `i + 1` the output of
    /// layer `i`), optionally through a 1x1 projection convolution.
    SkipAdd { from: usize, projection: bool },
    /// Classifier after global pooling; only used for counting.
    Linear { bias: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Sharing group of a conv layer; `None` means individual parameters.
    #[serde(default)]
    pub group: Option<usize>,
}

impl LayerSpec {
    pub fn conv(kernel: usize, cin: usize, cout: usize) -> Self {
        Self {
            kind: LayerKind::Conv {
                kernel,
                bias: false,
            },
            in_channels: cin,
            out_channels: cout,
            group: None,
        }
    }

    pub fn bn(c: usize) -> Self {
        Self::pointwise(LayerKind::Bn, c)
    }

    pub fn relu(c: usize) -> Self {
        Self::pointwise(LayerKind::Relu, c)
    }

    pub fn skip(from: usize, cin: usize, cout: usize) -> Self {
        Self {
            kind: LayerKind::SkipAdd {
                from,
                projection: cin != cout,
            },
            in_channels: cout,
            out_channels: cout,
            group: None,
        }
    }

    fn pointwise(kind: LayerKind, c: usize) -> Self {
        Self {
            kind,
            in_channels: c,
            out_channels: c,
            group: None,
        }
    }

    fn with_group(mut self, group: Option<usize>) -> Self {
        self.group = group;
        self
    }

    fn with_bias(mut self) -> Self {
        if let LayerKind::Conv { bias, .. } = &mut self.kind {
            *bias = true;
        }
        self
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }

    /// `[Cout, Cin, K, K]` for conv layers.
    pub fn kernel_shape(&self) -> Option<[usize; 4]> {
        match self.kind {
            LayerKind::Conv { kernel, .. } => {
                Some([self.out_channels, self.in_channels, kernel, kernel])
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub id: usize,
    pub templates: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub groups: Vec<GroupSpec>,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let mut channels = vec![self.input_channels];
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = *channels.last().expect("non-empty");
            if layer.in_channels != prev {
                return Err(Error::Dimension(format!(
                    "layer {i} expects {} input channels, previous layer produces {prev}",
                    layer.in_channels
                )));
            }
            match &layer.kind {
                LayerKind::Conv { kernel, .. } => {
                    if kernel % 2 == 0 || *kernel == 0 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: kernel size {kernel} must be odd"
                        )));
                    }
                }
                LayerKind::Bn | LayerKind::Relu => {
                    if layer.in_channels != layer.out_channels {
                        return Err(Error::Dimension(format!(
                            "layer {i}: channel-preserving layer maps {} to {}",
                            layer.in_channels, layer.out_channels
                        )));
                    }
                }
                LayerKind::SkipAdd { from, projection } => {
                    if *from > i {
                        return Err(Error::Dimension(format!(
                            "layer {i}: skip source {from} is not an earlier activation"
                        )));
                    }
                    if layer.in_channels != layer.out_channels {
                        return Err(Error::Dimension(format!(
                            "layer {i}: skip-add cannot change channel count"
                        )));
                    }
                    if !projection && channels[*from] != layer.out_channels {
                        return Err(Error::Dimension(format!(
                            "layer {i}: skip source has {} channels, main path {}",
                            channels[*from], layer.out_channels
                        )));
                    }
                }
                LayerKind::Linear { .. } => {}
            }
            if layer.group.is_some() && !layer.is_conv() {
                return Err(Error::Value(format!("layer {i}: only conv layers can be grouped")));
            }
            channels.push(layer.out_channels);
        }
        let mut seen = BTreeMap::new();
        for g in &self.groups {
            if g.templates == 0 {
                return Err(Error::Value(format!("group {} has no templates", g.id)));
            }
            if seen.insert(g.id, ()).is_some() {
                return Err(Error::Value(format!("group id {} declared twice", g.id)));
            }
        }
        for g in &self.groups {
            let members = self.group_members(g.id);
            let Some(&first) = members.first() else {
                return Err(Error::Value(format!("group {} has no member layers", g.id)));
            };
            let shape = self.layers[first].kernel_shape();
            if let Some(&bad) = members
                .iter()
                .find(|&&m| self.layers[m].kernel_shape() != shape)
            {
                return Err(Error::Dimension(format!(
                    "group {}: layer {bad} has kernel {:?}, group bank is {:?}",
                    g.id,
                    self.layers[bad].kernel_shape(),
                    shape
                )));
            }
        }
        if let Some((i, l)) = self
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.group.is_some_and(|id| !seen.contains_key(&id)))
        {
            return Err(Error::Value(format!(
                "layer {i} references undeclared group {}",
                l.group.expect("checked")
            )));
        }
        Ok(())
    }

    /// Global indices of the layers in group `id`, ascending.
    pub fn group_members(&self, id: usize) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.group == Some(id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn group(&self, id: usize) -> Option<&GroupSpec> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_channels, |l| l.out_channels)
    }
}

/// The shortest-path network: 1x1 stem, `depth` residual blocks
/// `x + relu(bn(conv3x3(x)))`, and a 1x1 head with bias producing one logit
/// per pixel. With `shared`, all 3x3 convs form group 0 with one template per layer.
pub fn build_shortest_path_model(shared: bool, depth: usize, width: usize) -> ArchitectureSpec {
    build_shortest_path_model_with(shared.then_some(depth), depth, width)
}

/// Like [`build_shortest_path_model`] with an explicit template count.
pub fn build_shortest_path_model_with(
    templates: Option<usize>,
    depth: usize,
    width: usize,
) -> ArchitectureSpec {
    let group = templates.map(|_| 0);
    let mut layers = vec![LayerSpec::conv(1, 2, width)];
    for _ in 0..depth {
        let block_input = layers.len();
        layers.push(LayerSpec::conv(3, width, width).with_group(group));
        layers.push(LayerSpec::bn(width));
        layers.push(LayerSpec::relu(width));
        layers.push(LayerSpec::skip(block_input, width, width));
    }
    layers.push(LayerSpec::conv(1, width, 1).with_bias());
    ArchitectureSpec {
        name: match templates {
            Some(k) => format!("scnn-{depth}-{width}-{k}"),
            None => format!("cnn-{depth}-{width}"),
        },
        input_channels: 2,
        layers,
        groups: templates
            .map(|k| vec![GroupSpec { id: 0, templates: k }])
            .unwrap_or_default(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Templates {
    /// One template per shared layer: no parameter reduction.
    PerLayer,
    Count(usize),
}

impl std::str::FromStr for Templates {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "per-layer" {
            return Ok(Self::PerLayer);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .map(Self::Count)
            .ok_or_else(|| Error::Usage(format!("templates must be a positive integer or `per-layer`, got `{s}`")))
    }
}

/// Pre-activation wide residual network for 32x32 inputs, described for
/// parameter counting (strides and pooling are not represented).
///
/// Each of the three stages has `(depth - 4) / 6` blocks. `templates = None`
/// gives the plain WRN; otherwise every stage's convolutions except the first
/// block's two form one sharing group.
pub fn build_wrn_cifar_spec(
    depth: usize,
    widen: usize,
    templates: Option<Templates>,
    num_classes: usize,
) -> Result<ArchitectureSpec> {
    if depth < 10 || !(depth - 4).is_multiple_of(6) {
        return Err(Error::Usage(format!(
            "WRN depth must satisfy (depth - 4) % 6 == 0 with at least one block per stage, got {depth}"
        )));
    }
    if widen == 0 || num_classes == 0 {
        return Err(Error::Usage("widen factor and class count must be positive".into()));
    }
    let blocks = (depth - 4) / 6;
    let shared_per_stage = 2 * blocks - 2;
    let widths = [16, 16 * widen, 32 * widen, 64 * widen];
    let mut layers = vec![LayerSpec::conv(3, 3, widths[0])];
    let mut groups = Vec::new();
    for stage in 0..3 {
        let group = match templates {
            Some(t) if shared_per_stage > 0 => {
                let k = match t {
                    Templates::PerLayer => shared_per_stage,
                    Templates::Count(k) => k,
                };
                groups.push(GroupSpec {
                    id: stage,
                    templates: k,
                });
                Some(stage)
            }
            _ => None,
        };
        let out = widths[stage + 1];
        for b in 0..blocks {
            let cin = if b == 0 { widths[stage] } else { out };
            let g = if b == 0 { None } else { group };
            let block_input = layers.len();
            layers.push(LayerSpec::bn(cin));
            layers.push(LayerSpec::relu(cin));
            layers.push(LayerSpec::conv(3, cin, out).with_group(g));
            layers.push(LayerSpec::bn(out));
            layers.push(LayerSpec::relu(out));
            layers.push(LayerSpec::conv(3, out, out).with_group(g));
            layers.push(LayerSpec::skip(block_input, cin, out));
        }
    }
    let last = widths[3];
    layers.push(LayerSpec::bn(last));
    layers.push(LayerSpec::relu(last));
    layers.push(LayerSpec {
        kind: LayerKind::Linear { bias: true },
        in_channels: last,
        out_channels: num_classes,
        group: None,
    });
    let name = match templates {
        None => format!("wrn-{depth}-{widen}"),
        Some(Templates::PerLayer) => format!("swrn-{depth}-{widen}"),
        Some(Templates::Count(k)) => format!("swrn-{depth}-{widen}-{k}"),
    };
    let spec = ArchitectureSpec {
        name,
        input_channels: 3,
        layers,
        groups,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub templates: usize,
    pub coefficients: usize,
    pub bn: usize,
    /// Ungrouped conv kernels, conv biases, and skip projections.
    pub individual_convs: usize,
    pub classifier: usize,
    pub total: usize,
}

impl ParamCountReport {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

impl fmt::Display for ParamCountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "templates         {}", self.templates)?;
        writeln!(f, "coefficients      {}", self.coefficients)?;
        writeln!(f, "batchnorm         {}", self.bn)?;
        writeln!(f, "individual convs  {}", self.individual_convs)?;
        writeln!(f, "classifier        {}", self.classifier)?;
        write!(f, "total             {} ({:.1}M)", self.total, self.millions())
    }
}

pub fn count_params(spec: &ArchitectureSpec) -> Result<ParamCountReport> {
    spec.validate()?;
    let mut r = ParamCountReport::default();
    for layer in &spec.layers {
        match layer.kind {
            LayerKind::Conv { kernel, bias } => {
                if layer.group.is_none() {
                    r.individual_convs += layer.out_channels * layer.in_channels * kernel * kernel;
                }
                if bias {
                    r.individual_convs += layer.out_channels;
                }
            }
            LayerKind::Bn => r.bn += 2 * layer.out_channels,
            LayerKind::Relu => {}
            LayerKind::SkipAdd { from, projection } => {
                if projection {
                    let src = if from == 0 {
                        spec.input_channels
                    } else {
                        spec.layers[from - 1].out_channels
                    };
                    r.individual_convs += src * layer.out_channels;
                }
            }
            LayerKind::Linear { bias } => {
                r.classifier += layer.in_channels * layer.out_channels;
                if bias {
                    r.classifier += layer.out_channels;
                }
            }
        }
    }
    for g in &spec.groups {
        let members = spec.group_members(g.id);
        let shape = spec.layers[members[0]].kernel_shape().expect("validated conv");
        r.templates += g.templates * shape.iter().product::<usize>();
        r.coefficients += g.templates * members.len();
    }
    r.total = r.templates + r.coefficients + r.bn + r.individual_convs + r.classifier;
    Ok(r)
}
