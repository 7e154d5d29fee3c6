//! Architectures and heads.
//!
//! Three feature extractors (shallow, basic, basic-residual) reduce a
//! 1-channel square depth patch to a C x S/8 x S/8 feature map through
//! three 2x2 poolings; 3x3 convolutions are zero-padded to preserve size.
//! On top of the map sit three heads: a single full-map regressor, the
//! region ensemble (per-region FC branches fused by concatenation and a
//! final regression layer), and region bagging (per-branch regression
//! layers whose outputs are averaged).

use rayon::prelude::*;

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, TensorRef};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Three convolution layers, three pooling layers.
    Shallow,
    /// Six 3x3 convolution layers, three pooling layers.
    Basic,
    /// Basic plus two 1x1-projected residual connections.
    BasicResidual,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Shallow => "shallow",
            Architecture::Basic => "basic",
            Architecture::BasicResidual => "basic-residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Architecture::Shallow),
            "basic" => Ok(Architecture::Basic),
            "basic-residual" => Ok(Architecture::BasicResidual),
            other => Err(ModelError::InvalidConfig(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Single,
    RegionEnsemble,
    RegionBagging,
}

impl Head {
    pub fn name(&self) -> &'static str {
        match self {
            Head::Single => "single",
            Head::RegionEnsemble => "region-ensemble",
            Head::RegionBagging => "region-bagging",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Head::Single),
            "region-ensemble" => Ok(Head::RegionEnsemble),
            "region-bagging" => Ok(Head::RegionBagging),
            other => Err(ModelError::InvalidConfig(format!("unknown head '{other}'"))),
        }
    }
}

/// A sub-window of the final feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row_off: usize,
    pub col_off: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn new(row_off: usize, col_off: usize, height: usize, width: usize) -> Self {
        Region { row_off, col_off, height, width }
    }
}

/// Non-empty list of feature-map windows defining the head branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSpec {
    regions: Vec<Region>,
}

impl RegionSpec {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        if regions.is_empty() {
            return Err(ModelError::InvalidConfig("region list is empty".into()));
        }
        if regions.iter().any(|r| r.height == 0 || r.width == 0) {
            return Err(ModelError::InvalidConfig("region with zero extent".into()));
        }
        Ok(RegionSpec { regions })
    }

    /// One region covering the whole map.
    pub fn single(map: usize) -> Self {
        RegionSpec { regions: vec![Region::new(0, 0, map, map)] }
    }

    /// Four half-size windows at the map corners.
    pub fn four_corners(map: usize) -> Result<Self> {
        if map < 2 || map % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "four-corner regions need an even map, got {map}"
            )));
        }
        let s = map / 2;
        let offs = [0, map - s];
        let mut regions = Vec::new();
        for &r in &offs {
            for &c in &offs {
                regions.push(Region::new(r, c, s, s));
            }
        }
        Self::new(regions)
    }

    /// Nine windows of size `s` anchored at {0, (map-s)/2, map-s} per axis:
    /// corners, edge centers, and the map center.
    pub fn nine_sized(map: usize, s: usize) -> Result<Self> {
        if s == 0 || s > map || (map - s) % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "nine-region window {s} does not center on a {map}x{map} map"
            )));
        }
        let offs = [0, (map - s) / 2, map - s];
        let anchors = [
            (offs[0], offs[0]),
            (offs[0], offs[2]),
            (offs[2], offs[0]),
            (offs[2], offs[2]),
            (offs[0], offs[1]),
            (offs[1], offs[0]),
            (offs[1], offs[2]),
            (offs[2], offs[1]),
            (offs[1], offs[1]),
        ];
        Self::new(anchors.iter().map(|&(r, c)| Region::new(r, c, s, s)).collect())
    }

    /// Nine half-size windows (the default region setting).
    pub fn nine(map: usize) -> Result<Self> {
        if map % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!("nine regions need an even map, got {map}")));
        }
        Self::nine_sized(map, map / 2)
    }

    /// Three concentric windows of size map, 2*map/3, map/3.
    pub fn multi_scale(map: usize) -> Result<Self> {
        if map % 6 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "multi-scale regions need a map divisible by 6, got {map}"
            )));
        }
        let sizes = [map, 2 * map / 3, map / 3];
        let regions = sizes
            .iter()
            .map(|&s| {
                let off = (map - s) / 2;
                Region::new(off, off, s, s)
            })
            .collect();
        Self::new(regions)
    }

    /// Resolves a preset name against a map extent.
    pub fn preset(name: &str, map: usize) -> Result<Self> {
        match name {
            "single" => Ok(Self::single(map)),
            "four" => Self::four_corners(map),
            "nine" => Self::nine(map),
            "nine-small" => Self::nine_sized(map, map / 3),
            "nine-large" => Self::nine_sized(map, 2 * map / 3),
            "multi-scale" => Self::multi_scale(map),
            other => Err(ModelError::InvalidConfig(format!("unknown region preset '{other}'"))),
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate_against(&self, map_h: usize, map_w: usize) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            if r.row_off + r.height > map_h || r.col_off + r.width > map_w {
                return Err(ModelError::InvalidConfig(format!(
                    "region {i} (row {}, col {}, {}x{}) exceeds the {map_h}x{map_w} feature map",
                    r.row_off, r.col_off, r.height, r.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub head: Head,
    pub region_spec: RegionSpec,
    pub joint_count: usize,
    pub fc_width: usize,
    pub dropout_rate: f64,
    pub stage_channels: (usize, usize, usize),
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::BasicResidual,
            head: Head::RegionEnsemble,
            region_spec: RegionSpec::nine(12).expect("12 is even"),
            joint_count: 16,
            fc_width: 2048,
            dropout_rate: 0.5,
            stage_channels: (16, 32, 64),
            input_size: 96,
        }
    }
}

impl ModelConfig {
    /// Spatial extent of the final feature map (three 2x2 poolings).
    pub fn feature_map_size(&self) -> usize {
        self.input_size / 8
    }

    pub fn output_dim(&self) -> usize {
        3 * self.joint_count
    }

    /// Regions actually used by the head; the single head always covers
    /// the full map.
    pub fn effective_regions(&self) -> RegionSpec {
        match self.head {
            Head::Single => RegionSpec::single(self.feature_map_size()),
            _ => self.region_spec.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count == 0 {
            return Err(ModelError::InvalidConfig("joint count must be >= 1".into()));
        }
        if self.fc_width == 0 {
            return Err(ModelError::InvalidConfig("fc width must be positive".into()));
        }
        let (c1, c2, c3) = self.stage_channels;
        if c1 == 0 || c2 == 0 || c3 == 0 {
            return Err(ModelError::InvalidConfig("stage channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input size {} is not a positive multiple of 8",
                self.input_size
            )));
        }
        let map = self.feature_map_size();
        self.effective_regions().validate_against(map, map)?;
        Ok(())
    }
}

/// Geometry of one extractor layer, used for receptive-field analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeom {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
}

/// Main-path conv/pool sequence of the extractor, input to output.
/// 1x1 skip projections run in parallel and never widen the field.
pub fn extractor_stack(arch: Architecture) -> Vec<LayerGeom> {
    let conv = LayerGeom { kind: LayerKind::Conv, kernel: 3, stride: 1, pad: 1 };
    let pool = LayerGeom { kind: LayerKind::Pool, kernel: 2, stride: 2, pad: 0 };
    match arch {
        Architecture::Shallow => vec![conv, pool, conv, pool, conv, pool],
        Architecture::Basic | Architecture::BasicResidual => {
            vec![conv, conv, pool, conv, conv, pool, conv, conv, pool]
        }
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Ordered parameter names and shapes implied by a config. Initialization
/// and the forward pass walk this same list, so position and name always
/// agree.
pub fn param_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let (c1, c2, c3) = config.stage_channels;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let conv = |name: &str, oc: usize, ic: usize, k: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.weight"), vec![oc, ic, k, k]));
        out.push((format!("{name}.bias"), vec![oc]));
    };
    match config.architecture {
        Architecture::Shallow => {
            conv("conv1", c1, 1, 3, &mut out);
            conv("conv2", c2, c1, 3, &mut out);
            conv("conv3", c3, c2, 3, &mut out);
        }
        Architecture::Basic => {
            conv("conv1", c1, 1, 3, &mut out);
            conv("conv2", c1, c1, 3, &mut out);
            conv("conv3", c2, c1, 3, &mut out);
            conv("conv4", c2, c2, 3, &mut out);
            conv("conv5", c3, c2, 3, &mut out);
            conv("conv6", c3, c3, 3, &mut out);
        }
        Architecture::BasicResidual => {
            conv("conv1", c1, 1, 3, &mut out);
            conv("conv2", c1, c1, 3, &mut out);
            conv("conv3", c2, c1, 3, &mut out);
            conv("conv4", c2, c2, 3, &mut out);
            conv("skip1", c2, c1, 1, &mut out);
            conv("conv5", c3, c2, 3, &mut out);
            conv("conv6", c3, c3, 3, &mut out);
            conv("skip2", c3, c2, 1, &mut out);
        }
    }
    let regions = config.effective_regions();
    let fcw = config.fc_width;
    for (i, r) in regions.regions().iter().enumerate() {
        let d = c3 * r.height * r.width;
        out.push((format!("branch{i}.fc1.weight"), vec![fcw, d]));
        out.push((format!("branch{i}.fc1.bias"), vec![fcw]));
        out.push((format!("branch{i}.fc2.weight"), vec![fcw, fcw]));
        out.push((format!("branch{i}.fc2.bias"), vec![fcw]));
    }
    let odim = config.output_dim();
    match config.head {
        Head::Single | Head::RegionEnsemble => {
            out.push(("fusion.weight".into(), vec![odim, regions.len() * fcw]));
            out.push(("fusion.bias".into(), vec![odim]));
        }
        Head::RegionBagging => {
            for i in 0..regions.len() {
                out.push((format!("branch{i}.out.weight"), vec![odim, fcw]));
                out.push((format!("branch{i}.out.bias"), vec![odim]));
            }
        }
    }
    Ok(out)
}

/// Exact trainable parameter count for a config.
pub fn param_count(config: &ModelConfig) -> Result<u64> {
    Ok(param_shapes(config)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A built network: config plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    mode: Mode,
}

/// Tape handles of one model's parameters inside one graph, in
/// `param_shapes` order.
pub struct Binding {
    ids: Vec<TensorRef>,
}

impl Binding {
    pub fn ids(&self) -> &[TensorRef] {
        &self.ids
    }
}

/// He-style fan-in init: weights ~ Normal(0, sqrt(2 / fan_in)), biases 0.
/// Bias tensors are rank 1; everything else is a weight.
pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &RngStream) -> Result<Model<T>> {
    let shapes = param_shapes(config)?;
    let params: Vec<Param<T>> = shapes
        .into_par_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let n: usize = shape.iter().product();
            let values = if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let mut stream = rng.derive(i as u64);
                (0..n).map(|_| T::from_f64(stream.normal() * std)).collect()
            };
            Param { name, shape, values }
        })
        .collect();
    Ok(Model { config: config.clone(), params, mode: Mode::Train })
}

impl<T: Scalar> Model<T> {
    /// Reassembles a model from config plus parameters, e.g. from a
    /// checkpoint. Names and shapes must match the config exactly.
    pub fn from_parts(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        let expected = param_shapes(&config)?;
        if expected.len() != params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(params.iter()) {
            if name != &p.name || shape != &p.shape {
                return Err(ModelError::ParamMismatch(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    p.name, p.shape
                )));
            }
            let n: usize = shape.iter().product();
            if p.values.len() != n {
                return Err(ModelError::ParamMismatch(format!(
                    "{name}: {} values for shape {shape:?}",
                    p.values.len()
                )));
            }
        }
        Ok(Model { config, params, mode: Mode::Eval })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Inserts every parameter into the graph as a leaf. In train mode the
    /// leaves request gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Binding> {
        let requires_grad = self.mode == Mode::Train;
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.values.clone(), &p.shape, requires_grad))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Binding { ids })
    }

    /// Runs the extractor: batch x 1 x S x S -> batch x c3 x S/8 x S/8.
    pub fn forward_features(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        input: TensorRef,
    ) -> Result<TensorRef> {
        let s = self.config.input_size;
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(ModelError::InputShape { expected: vec![shape[0], 1, s, s], got: shape });
        }
        let mut cursor = Cursor { ids: &binding.ids, pos: 0, params: &self.params };
        run_features(&self.config, g, &mut cursor, input).map_err(Into::into)
    }

    /// Runs the head over extractor features, producing batch x 3J.
    pub fn forward_head(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        features: TensorRef,
        rng: &mut RngStream,
    ) -> Result<TensorRef> {
        let map = self.config.feature_map_size();
        let c3 = self.config.stage_channels.2;
        let shape = g.shape(features).to_vec();
        if shape.len() != 4 || shape[1] != c3 || shape[2] != map || shape[3] != map {
            return Err(ModelError::InputShape { expected: vec![shape[0], c3, map, map], got: shape });
        }
        let mut cursor = Cursor {
            ids: &binding.ids,
            pos: feature_param_count(&self.config),
            params: &self.params,
        };
        run_head(&self.config, g, &mut cursor, features, self.mode == Mode::Train, rng)
            .map_err(Into::into)
    }

    /// Extractor plus head.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        input: TensorRef,
        rng: &mut RngStream,
    ) -> Result<TensorRef> {
        let features = self.forward_features(g, binding, input)?;
        self.forward_head(g, binding, features, rng)
    }

    /// Single-patch inference; returns the 3J output vector. Dropout is
    /// inactive unless the model is in train mode.
    pub fn infer(&self, patch: &[T]) -> Result<Vec<T>> {
        let s = self.config.input_size;
        let mut g = Graph::new();
        let input = g.leaf(patch.to_vec(), &[1, 1, s, s], false)?;
        let binding = self.bind(&mut g)?;
        let mut rng = RngStream::new(0);
        let out = self.forward(&mut g, &binding, input, &mut rng)?;
        Ok(g.values(out).to_vec())
    }
}

fn feature_param_count(config: &ModelConfig) -> usize {
    // two tensors (weight, bias) per conv layer
    match config.architecture {
        Architecture::Shallow => 6,
        Architecture::Basic => 12,
        Architecture::BasicResidual => 16,
    }
}

/// Runs the full network over caller-provided parameter leaves, in
/// [`param_shapes`] order. This is the building block for whole-model
/// gradient checks, where the checker owns every leaf.
pub fn forward_with_params<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    param_ids: &[TensorRef],
    input: TensorRef,
    training: bool,
    rng: &mut RngStream,
) -> Result<TensorRef> {
    let shapes = param_shapes(config)?;
    if shapes.len() != param_ids.len() {
        return Err(ModelError::ParamMismatch(format!(
            "expected {} parameter tensors, got {}",
            shapes.len(),
            param_ids.len()
        )));
    }
    let named: Vec<Param<T>> = shapes
        .into_iter()
        .map(|(name, shape)| Param { name, shape, values: Vec::new() })
        .collect();
    let mut cursor = Cursor { ids: param_ids, pos: 0, params: &named };
    let features = run_features(config, g, &mut cursor, input)?;
    run_head(config, g, &mut cursor, features, training, rng).map_err(Into::into)
}

struct Cursor<'a, T> {
    ids: &'a [TensorRef],
    pos: usize,
    params: &'a [Param<T>],
}

impl<T> Cursor<'_, T> {
    fn take(&mut self, expect: &str) -> TensorRef {
        debug_assert_eq!(self.params[self.pos].name, expect, "parameter order out of sync");
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
}

fn run_features<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    cursor: &mut Cursor<T>,
    input: TensorRef,
) -> std::result::Result<TensorRef, TensorError> {
    fn conv_relu<T: Scalar>(
        g: &mut Graph<T>,
        c: &mut Cursor<T>,
        name: &str,
        x: TensorRef,
    ) -> std::result::Result<TensorRef, TensorError> {
        let w = c.take(&format!("{name}.weight"));
        let b = c.take(&format!("{name}.bias"));
        let y = g.conv2d(x, w, b, 1, 1)?;
        Ok(g.relu(y))
    }
    match config.architecture {
        Architecture::Shallow => {
            let mut x = input;
            for name in ["conv1", "conv2", "conv3"] {
                x = conv_relu(g, cursor, name, x)?;
                x = g.maxpool2d(x, 2, 2)?;
            }
            Ok(x)
        }
        Architecture::Basic => {
            let mut x = input;
            for pair in [["conv1", "conv2"], ["conv3", "conv4"], ["conv5", "conv6"]] {
                x = conv_relu(g, cursor, pair[0], x)?;
                x = conv_relu(g, cursor, pair[1], x)?;
                x = g.maxpool2d(x, 2, 2)?;
            }
            Ok(x)
        }
        Architecture::BasicResidual => {
            // block 1 has no skip; blocks 2 and 3 add a 1x1-projected skip
            // across the conv pair, merged before the activation that
            // precedes the pool
            let mut x = conv_relu(g, cursor, "conv1", input)?;
            x = conv_relu(g, cursor, "conv2", x)?;
            x = g.maxpool2d(x, 2, 2)?;
            for (a, b, skip) in [("conv3", "conv4", "skip1"), ("conv5", "conv6", "skip2")] {
                let block_in = x;
                let h = conv_relu(g, cursor, a, block_in)?;
                let wb = cursor.take(&format!("{b}.weight"));
                let bb = cursor.take(&format!("{b}.bias"));
                let main = g.conv2d(h, wb, bb, 1, 1)?;
                let ws = cursor.take(&format!("{skip}.weight"));
                let bs = cursor.take(&format!("{skip}.bias"));
                let proj = g.conv2d(block_in, ws, bs, 1, 0)?;
                let merged = g.add(main, proj)?;
                let activated = g.relu(merged);
                x = g.maxpool2d(activated, 2, 2)?;
            }
            Ok(x)
        }
    }
}

fn run_head<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    cursor: &mut Cursor<T>,
    features: TensorRef,
    training: bool,
    rng: &mut RngStream,
) -> std::result::Result<TensorRef, TensorError> {
    let regions = config.effective_regions();
    let rate = config.dropout_rate;
    let mut branch_tops = Vec::with_capacity(regions.len());
    for (i, r) in regions.regions().iter().enumerate() {
        let sliced = g.slice_region(features, r.row_off, r.col_off, r.height, r.width)?;
        let flat = g.flatten(sliced)?;
        let w1 = cursor.take(&format!("branch{i}.fc1.weight"));
        let b1 = cursor.take(&format!("branch{i}.fc1.bias"));
        let mut x = g.linear(flat, w1, b1)?;
        x = g.relu(x);
        x = g.dropout(x, rate, training, rng)?;
        let w2 = cursor.take(&format!("branch{i}.fc2.weight"));
        let b2 = cursor.take(&format!("branch{i}.fc2.bias"));
        x = g.linear(x, w2, b2)?;
        x = g.relu(x);
        x = g.dropout(x, rate, training, rng)?;
        branch_tops.push(x);
    }
    match config.head {
        Head::Single | Head::RegionEnsemble => {
            let fused = g.concat(&branch_tops, 1)?;
            let w = cursor.take("fusion.weight");
            let b = cursor.take("fusion.bias");
            g.linear(fused, w, b)
        }
        Head::RegionBagging => {
            let mut outputs = Vec::with_capacity(branch_tops.len());
            for (i, &top) in branch_tops.iter().enumerate() {
                let w = cursor.take(&format!("branch{i}.out.weight"));
                let b = cursor.take(&format!("branch{i}.out.bias"));
                outputs.push(g.linear(top, w, b)?);
            }
            let mut acc = outputs[0];
            for &o in &outputs[1..] {
                acc = g.add(acc, o)?;
            }
            Ok(g.scale(acc, 1.0 / outputs.len() as f64))
        }
    }
}
