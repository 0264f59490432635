//! Declarative residual networks: a stem convolution, stages of basic
//! residual blocks (two 3x3 convolutions, batch norm, ReLU, post-activation
//! ordering), and either a classifier head or a segmentation score head.
//!
//! Because every identity-shortcut block can be skipped or taken, a trunk
//! with `B` such blocks superimposes `2^B` computation paths; `drop_block`
//! and `count_paths` expose that view for ablation.

use std::collections::{BTreeSet, HashMap};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::ops::norm::{update_running_stats, BnBatchStats, BN_EPSILON, BN_MOMENTUM};
use crate::rng::param_rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSpec {
    Classifier { classes: usize },
    Segmentation { score_channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

/// Input channel count for every network (RGB).
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutKind {
    Identity,
    Projection,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConvSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Materialized description of one residual block: the convolution stack
/// (each followed by batch norm, with ReLU between them and after the
/// shortcut addition) and the shortcut kind.
#[derive(Debug, Clone)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub convs: Vec<BlockConvSpec>,
    pub shortcut: ShortcutKind,
}

impl ResidualBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.convs.last().expect("non-empty conv stack").out_channels
    }

    pub fn total_stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }

    fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::Config("residual block without convolutions".into()));
        }
        let shape_preserving = self.in_channels == self.out_channels() && self.total_stride() == 1;
        match self.shortcut {
            ShortcutKind::Identity if !shape_preserving => Err(Error::Config(
                "identity shortcut requires equal input/output shapes".into(),
            )),
            ShortcutKind::Projection if shape_preserving => Err(Error::Config(
                "projection shortcut on a shape-preserving block".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl NetworkSpec {
    /// Named desk-scale presets.
    pub fn preset(name: &str, head: HeadSpec) -> Result<NetworkSpec> {
        let (stem, stages) = match name {
            "tiny-8" => (
                StemSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                vec![
                    StageSpec {
                        blocks: 2,
                        width: 8,
                        stride: 1,
                    },
                    StageSpec {
                        blocks: 2,
                        width: 16,
                        stride: 2,
                    },
                ],
            ),
            "small-18" => (
                StemSpec {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                },
                vec![
                    StageSpec {
                        blocks: 2,
                        width: 16,
                        stride: 1,
                    },
                    StageSpec {
                        blocks: 2,
                        width: 32,
                        stride: 2,
                    },
                    StageSpec {
                        blocks: 2,
                        width: 64,
                        stride: 2,
                    },
                    StageSpec {
                        blocks: 2,
                        width: 128,
                        stride: 2,
                    },
                ],
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (known: tiny-8, small-18)"
                )))
            }
        };
        let spec = NetworkSpec {
            name: name.to_string(),
            stem,
            stages,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem.out_channels == 0 || self.stem.stride == 0 {
            return Err(Error::Config("stem with zero width or stride".into()));
        }
        if self.stem.kernel == 0 || self.stem.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "stem kernel must be odd and positive, got {}",
                self.stem.kernel
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 || stage.width == 0 || stage.stride == 0 {
                return Err(Error::Config(format!(
                    "stage {i} has zero blocks, width, or stride"
                )));
            }
        }
        match self.head {
            HeadSpec::Classifier { classes } => {
                if !(classes == 2 || classes == 3) {
                    return Err(Error::Config(format!(
                        "classifier head supports 2 or 3 classes, got {classes}"
                    )));
                }
            }
            HeadSpec::Segmentation { score_channels } => {
                if score_channels < 2 {
                    return Err(Error::Config(format!(
                        "segmentation head needs at least 2 score channels, got {score_channels}"
                    )));
                }
            }
        }
        for stage in 0..self.stages.len() {
            for block in 0..self.stages[stage].blocks {
                self.block_spec(stage, block)?.validate()?;
            }
        }
        Ok(())
    }

    /// The materialized block at (stage, block): first block of a stage
    /// carries the stage stride and, when shapes change, a projection
    /// shortcut (1x1 convolution + batch norm).
    pub fn block_spec(&self, stage: usize, block: usize) -> Result<ResidualBlockSpec> {
        let st = self.stages.get(stage).ok_or_else(|| {
            Error::Config(format!("stage {stage} out of range"))
        })?;
        if block >= st.blocks {
            return Err(Error::Config(format!(
                "block {block} out of range for stage {stage} ({} blocks)",
                st.blocks
            )));
        }
        let in_channels = if block > 0 {
            st.width
        } else if stage == 0 {
            self.stem.out_channels
        } else {
            self.stages[stage - 1].width
        };
        let stride = if block == 0 { st.stride } else { 1 };
        let shortcut = if in_channels == st.width && stride == 1 {
            ShortcutKind::Identity
        } else {
            ShortcutKind::Projection
        };
        Ok(ResidualBlockSpec {
            in_channels,
            convs: vec![
                BlockConvSpec {
                    kernel: 3,
                    out_channels: st.width,
                    stride,
                },
                BlockConvSpec {
                    kernel: 3,
                    out_channels: st.width,
                    stride: 1,
                },
            ],
            shortcut,
        })
    }

    pub fn trunk_width(&self) -> usize {
        self.stages.last().map(|s| s.width).unwrap_or(0)
    }

    /// Total spatial downsampling factor, also the minimum input side a
    /// forward pass accepts.
    pub fn downsample_factor(&self) -> usize {
        self.stem.stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Number of identity-shortcut residual blocks.
    pub fn identity_block_count(&self) -> usize {
        let mut count = 0;
        for stage in 0..self.stages.len() {
            for block in 0..self.stages[stage].blocks {
                if let Ok(spec) = self.block_spec(stage, block) {
                    if spec.shortcut == ShortcutKind::Identity {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    /// `2^B` over the identity-shortcut blocks: every such block offers a
    /// skip/through alternative, so the trunk superimposes this many paths.
    pub fn count_paths(&self) -> u128 {
        let b = self.identity_block_count();
        assert!(b < 128, "path count exceeds u128 range");
        1u128 << b
    }
}

#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter collection. Insertion order is the
/// serialization order, so identical builds serialize byte-identically.
#[derive(Debug, Clone)]
pub struct ParamSet<E: Element> {
    entries: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    pub fn idx_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        Ok(&self.entries[self.idx_of(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        let i = self.idx_of(name)?;
        Ok(&mut self.entries[i].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    fn entry(&self, idx: usize) -> &Param<E> {
        &self.entries[idx]
    }

    fn entry_mut(&mut self, idx: usize) -> &mut Param<E> {
        &mut self.entries[idx]
    }
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// A built network: spec, named parameters (including batch-norm running
/// statistics), current mode, and the set of residual blocks routed as
/// identities by `drop_block`.
#[derive(Debug, Clone)]
pub struct Network<E: Element> {
    spec: NetworkSpec,
    params: ParamSet<E>,
    mode: Mode,
    dropped: BTreeSet<(usize, usize)>,
}

/// Tape leaf ids of the parameters bound by one forward pass, in parameter
/// order; read gradients back through this after `backward`.
pub struct ParamBinding {
    ids: Vec<Option<VarId>>,
}

impl ParamBinding {
    pub fn id_of(&self, param_idx: usize) -> Option<VarId> {
        self.ids.get(param_idx).copied().flatten()
    }
}

/// Node handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub stem: VarId,
    pub features: VarId,
    pub output: VarId,
}

fn he_normal<E: Element>(
    seed: u64,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<E> {
    let mut rng = param_rng(seed, name);
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid stddev");
    Tensor::from_fn(shape, |_| E::from_f64(normal.sample(&mut rng)))
}

impl<E: Element> Network<E> {
    /// Deterministically initialize a network from a spec and seed:
    /// He-normal convolution/linear weights, zero biases, identity batch
    /// norms. The stream for each parameter is keyed by its name, so two
    /// builds from the same seed are bit-identical.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Network<E>> {
        spec.validate()?;
        let mut params = ParamSet::new();
        for layer in layer_descs(&spec) {
            layer.init(seed, &mut params)?;
        }
        Ok(Network {
            spec,
            params,
            mode: Mode::Inference,
            dropped: BTreeSet::new(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<E>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.params.get_mut(name)
    }

    pub fn dropped_blocks(&self) -> &BTreeSet<(usize, usize)> {
        &self.dropped
    }

    /// Residual blocks still contributing their branch.
    pub fn active_block_count(&self) -> usize {
        self.spec
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (0..s.blocks)
                    .filter(|&j| !self.dropped.contains(&(i, j)))
                    .count()
            })
            .sum()
    }

    /// Forward pass under the current mode. Training mode binds trainable
    /// parameters as gradient targets and folds the fresh batch statistics
    /// into the running estimates.
    pub fn forward(
        &mut self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
    ) -> Result<(ForwardNodes, ParamBinding)> {
        let mode = self.mode;
        let mut updates = Vec::new();
        let mut binder = Binder {
            params: &self.params,
            ids: vec![None; self.params.len()],
            bind_grads: mode == Mode::Training,
        };
        let nodes = forward_impl(
            &self.spec,
            &self.dropped,
            tape,
            x,
            mode,
            &mut binder,
            &mut updates,
        )?;
        let binding = ParamBinding { ids: binder.ids };
        for (rm_idx, rv_idx, stats) in updates {
            let momentum = E::from_f64(BN_MOMENTUM);
            // split borrows: running mean and variance are distinct entries
            let mut rm = self.params.entry(rm_idx).value.clone();
            let mut rv = self.params.entry(rv_idx).value.clone();
            update_running_stats(&mut rm, &mut rv, &stats, momentum);
            self.params.entry_mut(rm_idx).value = rm;
            self.params.entry_mut(rv_idx).value = rv;
        }
        Ok((nodes, binding))
    }

    /// Inference forward on a private tape; never mutates the network, so
    /// a built network is freely shareable for prediction.
    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.infer_nodes(x)?.0)
    }

    /// Feature map after the residual trunk, before the head.
    pub fn infer_features(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.infer_nodes(x)?.1)
    }

    /// Activation after the stem, before any residual block.
    pub fn infer_stem(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.infer_nodes(x)?.2)
    }

    fn infer_nodes(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let mut tape = Tape::new();
        let mut binder = Binder {
            params: &self.params,
            ids: vec![None; self.params.len()],
            bind_grads: false,
        };
        let mut updates = Vec::new();
        let nodes = forward_impl(
            &self.spec,
            &self.dropped,
            &mut tape,
            x,
            Mode::Inference,
            &mut binder,
            &mut updates,
        )?;
        debug_assert!(updates.is_empty());
        Ok((
            tape.value(nodes.output).clone(),
            tape.value(nodes.features).clone(),
            tape.value(nodes.stem).clone(),
        ))
    }

    /// Replace a classifier head with a freshly initialized `k`-way head;
    /// every non-head parameter is preserved bit-exactly, and the head is
    /// initialized exactly as a fresh build with this seed would.
    pub fn replace_head(&self, k: usize, seed: u64) -> Result<Network<E>> {
        match self.spec.head {
            HeadSpec::Classifier { .. } => {}
            HeadSpec::Segmentation { .. } => {
                return Err(Error::Config(
                    "replace_head requires a classifier network".into(),
                ))
            }
        }
        let mut spec = self.spec.clone();
        spec.head = HeadSpec::Classifier { classes: k };
        spec.validate()?;
        let mut params = ParamSet::new();
        for layer in layer_descs(&spec) {
            if layer.is_head() {
                layer.init(seed, &mut params)?;
            } else {
                for name in layer.param_names() {
                    let old = self.params.get(&name)?;
                    let trainable = self
                        .params
                        .entry(self.params.idx_of(&name)?)
                        .trainable;
                    params.insert(name, old.clone(), trainable)?;
                }
            }
        }
        Ok(Network {
            spec,
            params,
            mode: self.mode,
            dropped: self.dropped.clone(),
        })
    }

    /// Route one identity-shortcut block as a pure identity (its residual
    /// branch removed). Projection blocks cannot be dropped shape-safely.
    pub fn drop_block(&self, stage: usize, block: usize) -> Result<Network<E>> {
        let spec = self.spec.block_spec(stage, block)?;
        if spec.shortcut != ShortcutKind::Identity {
            return Err(Error::Config(format!(
                "block ({stage}, {block}) has a projection shortcut and cannot be dropped"
            )));
        }
        let mut net = self.clone();
        net.dropped.insert((stage, block));
        Ok(net)
    }

    /// All tensors in serialization order (parameters and running stats).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Rebuild a network from a spec and named tensors, validating that the
    /// set of names and every shape match the spec exactly.
    pub fn from_named_tensors(
        spec: NetworkSpec,
        tensors: &[(String, Tensor<E>)],
    ) -> Result<Network<E>> {
        let mut net: Network<E> = Network::build(spec, 0)?;
        let mut by_name: HashMap<&str, &Tensor<E>> = HashMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
        }
        for i in 0..net.params.len() {
            let want_name = net.params.entry(i).name.clone();
            let loaded = by_name.remove(want_name.as_str()).ok_or_else(|| {
                Error::Format(format!("missing tensor {want_name:?}"))
            })?;
            let want_shape = net.params.entry(i).value.shape();
            if loaded.shape() != want_shape {
                return Err(Error::Format(format!(
                    "tensor {want_name:?} has shape {:?}, spec wants {want_shape:?}",
                    loaded.shape()
                )));
            }
            net.params.entry_mut(i).value = loaded.clone();
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Format(format!(
                "tensor {name:?} does not belong to this network spec"
            )));
        }
        Ok(net)
    }
}

struct Binder<'a, E: Element> {
    params: &'a ParamSet<E>,
    ids: Vec<Option<VarId>>,
    bind_grads: bool,
}

impl<'a, E: Element> Binder<'a, E> {
    fn bind(&mut self, tape: &mut Tape<E>, name: &str) -> Result<VarId> {
        let idx = self.params.idx_of(name)?;
        if let Some(id) = self.ids[idx] {
            return Ok(id);
        }
        let p = self.params.entry(idx);
        let id = tape.leaf(p.value.clone(), self.bind_grads && p.trainable);
        self.ids[idx] = Some(id);
        Ok(id)
    }
}

/// Layer inventory: derives parameter names, shapes, and init fans from the
/// spec. `build`, `replace_head`, and the forward walker all consume this,
/// so they cannot drift apart.
enum LayerDesc {
    Conv {
        name: String,
        out_c: usize,
        in_c: usize,
        kernel: usize,
        bias: bool,
        head: bool,
    },
    ConvTranspose {
        name: String,
        in_c: usize,
        out_c: usize,
        kernel: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    LinearHead {
        name: String,
        out: usize,
        input: usize,
    },
}

impl LayerDesc {
    fn is_head(&self) -> bool {
        match self {
            LayerDesc::Conv { head, .. } => *head,
            LayerDesc::ConvTranspose { .. } => true,
            LayerDesc::LinearHead { .. } => true,
            LayerDesc::BatchNorm { name, .. } => name.starts_with("head."),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self {
            LayerDesc::Conv { name, bias, .. } => {
                let mut v = vec![format!("{name}.weight")];
                if *bias {
                    v.push(format!("{name}.bias"));
                }
                v
            }
            LayerDesc::ConvTranspose { name, .. } => {
                vec![format!("{name}.weight"), format!("{name}.bias")]
            }
            LayerDesc::BatchNorm { name, .. } => vec![
                format!("{name}.gamma"),
                format!("{name}.beta"),
                format!("{name}.running_mean"),
                format!("{name}.running_var"),
            ],
            LayerDesc::LinearHead { name, .. } => {
                vec![format!("{name}.weight"), format!("{name}.bias")]
            }
        }
    }

    fn init<E: Element>(&self, seed: u64, params: &mut ParamSet<E>) -> Result<()> {
        match self {
            LayerDesc::Conv {
                name,
                out_c,
                in_c,
                kernel,
                bias,
                ..
            } => {
                let wname = format!("{name}.weight");
                let w = he_normal(
                    seed,
                    &wname,
                    vec![*out_c, *in_c, *kernel, *kernel],
                    in_c * kernel * kernel,
                );
                params.insert(wname, w, true)?;
                if *bias {
                    params.insert(format!("{name}.bias"), Tensor::zeros(vec![*out_c]), true)?;
                }
            }
            LayerDesc::ConvTranspose {
                name,
                in_c,
                out_c,
                kernel,
            } => {
                let wname = format!("{name}.weight");
                let w = he_normal(
                    seed,
                    &wname,
                    vec![*in_c, *out_c, *kernel, *kernel],
                    in_c * kernel * kernel,
                );
                params.insert(wname, w, true)?;
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![*out_c]), true)?;
            }
            LayerDesc::BatchNorm { name, channels } => {
                params.insert(format!("{name}.gamma"), Tensor::full(vec![*channels], E::one()), true)?;
                params.insert(format!("{name}.beta"), Tensor::zeros(vec![*channels]), true)?;
                params.insert(
                    format!("{name}.running_mean"),
                    Tensor::zeros(vec![*channels]),
                    false,
                )?;
                params.insert(
                    format!("{name}.running_var"),
                    Tensor::full(vec![*channels], E::one()),
                    false,
                )?;
            }
            LayerDesc::LinearHead { name, out, input } => {
                let wname = format!("{name}.weight");
                let w = he_normal(seed, &wname, vec![*out, *input], *input);
                params.insert(wname, w, true)?;
                params.insert(format!("{name}.bias"), Tensor::zeros(vec![*out]), true)?;
            }
        }
        Ok(())
    }
}

fn layer_descs(spec: &NetworkSpec) -> Vec<LayerDesc> {
    let mut layers = vec![
        LayerDesc::Conv {
            name: "stem.conv".into(),
            out_c: spec.stem.out_channels,
            in_c: INPUT_CHANNELS,
            kernel: spec.stem.kernel,
            bias: false,
            head: false,
        },
        LayerDesc::BatchNorm {
            name: "stem.bn".into(),
            channels: spec.stem.out_channels,
        },
    ];
    for (i, stage) in spec.stages.iter().enumerate() {
        for j in 0..stage.blocks {
            let block = spec.block_spec(i, j).expect("validated spec");
            let mut in_c = block.in_channels;
            for (k, conv) in block.convs.iter().enumerate() {
                layers.push(LayerDesc::Conv {
                    name: format!("s{i}.b{j}.conv{}", k + 1),
                    out_c: conv.out_channels,
                    in_c,
                    kernel: conv.kernel,
                    bias: false,
                    head: false,
                });
                layers.push(LayerDesc::BatchNorm {
                    name: format!("s{i}.b{j}.bn{}", k + 1),
                    channels: conv.out_channels,
                });
                in_c = conv.out_channels;
            }
            if block.shortcut == ShortcutKind::Projection {
                layers.push(LayerDesc::Conv {
                    name: format!("s{i}.b{j}.proj"),
                    out_c: block.out_channels(),
                    in_c: block.in_channels,
                    kernel: 1,
                    bias: false,
                    head: false,
                });
                layers.push(LayerDesc::BatchNorm {
                    name: format!("s{i}.b{j}.proj_bn"),
                    channels: block.out_channels(),
                });
            }
        }
    }
    match spec.head {
        HeadSpec::Classifier { classes } => {
            layers.push(LayerDesc::LinearHead {
                name: "head.fc".into(),
                out: classes,
                input: spec.trunk_width(),
            });
        }
        HeadSpec::Segmentation { score_channels } => {
            layers.push(LayerDesc::Conv {
                name: "head.score".into(),
                out_c: score_channels,
                in_c: spec.trunk_width(),
                kernel: 1,
                bias: true,
                head: true,
            });
            layers.push(LayerDesc::ConvTranspose {
                name: "head.up".into(),
                in_c: score_channels,
                out_c: score_channels,
                kernel: 2,
            });
        }
    }
    layers
}

type StatUpdate<E> = (usize, usize, BnBatchStats<E>);

fn forward_impl<E: Element>(
    spec: &NetworkSpec,
    dropped: &BTreeSet<(usize, usize)>,
    tape: &mut Tape<E>,
    x: &Tensor<E>,
    mode: Mode,
    binder: &mut Binder<'_, E>,
    updates: &mut Vec<StatUpdate<E>>,
) -> Result<ForwardNodes> {
    let (_, c, h, w) = x.dims4()?;
    if c != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "network input must have {INPUT_CHANNELS} channels, got {c}"
        )));
    }
    let min_side = spec.downsample_factor();
    if h < min_side || w < min_side {
        return Err(Error::Config(format!(
            "input {h}x{w} is below the network's minimum footprint {min_side}x{min_side}"
        )));
    }

    let bn = |tape: &mut Tape<E>,
                  binder: &mut Binder<'_, E>,
                  updates: &mut Vec<StatUpdate<E>>,
                  cur: VarId,
                  prefix: &str|
     -> Result<VarId> {
        let gamma = binder.bind(tape, &format!("{prefix}.gamma"))?;
        let beta = binder.bind(tape, &format!("{prefix}.beta"))?;
        let eps = E::from_f64(BN_EPSILON);
        match mode {
            Mode::Training => {
                let (out, stats) = tape.batch_norm_train(cur, gamma, beta, eps)?;
                let rm_idx = binder.params.idx_of(&format!("{prefix}.running_mean"))?;
                let rv_idx = binder.params.idx_of(&format!("{prefix}.running_var"))?;
                updates.push((rm_idx, rv_idx, stats));
                Ok(out)
            }
            Mode::Inference => {
                let rm = binder.params.get(&format!("{prefix}.running_mean"))?.clone();
                let rv = binder.params.get(&format!("{prefix}.running_var"))?.clone();
                tape.batch_norm_infer(cur, gamma, beta, rm, rv, eps)
            }
        }
    };

    // Stem: conv, batch norm, ReLU.
    let input = tape.leaf(x.clone(), false);
    let stem_w = binder.bind(tape, "stem.conv.weight")?;
    let stem_pad = spec.stem.kernel / 2;
    let cur = tape.conv2d(
        input,
        stem_w,
        None,
        (spec.stem.stride, spec.stem.stride),
        (stem_pad, stem_pad),
    )?;
    let cur = bn(tape, binder, updates, cur, "stem.bn")?;
    let stem = tape.relu(cur);

    // Residual trunk.
    let mut cur = stem;
    for (i, stage) in spec.stages.iter().enumerate() {
        for j in 0..stage.blocks {
            if dropped.contains(&(i, j)) {
                continue;
            }
            let block = spec.block_spec(i, j)?;
            let block_in = cur;
            let mut branch = cur;
            for (k, conv) in block.convs.iter().enumerate() {
                let w = binder.bind(tape, &format!("s{i}.b{j}.conv{}.weight", k + 1))?;
                let pad = conv.kernel / 2;
                branch = tape.conv2d(
                    branch,
                    w,
                    None,
                    (conv.stride, conv.stride),
                    (pad, pad),
                )?;
                branch = bn(tape, binder, updates, branch, &format!("s{i}.b{j}.bn{}", k + 1))?;
                if k + 1 < block.convs.len() {
                    branch = tape.relu(branch);
                }
            }
            let shortcut = match block.shortcut {
                ShortcutKind::Identity => block_in,
                ShortcutKind::Projection => {
                    let w = binder.bind(tape, &format!("s{i}.b{j}.proj.weight"))?;
                    let stride = block.total_stride();
                    let p = tape.conv2d(block_in, w, None, (stride, stride), (0, 0))?;
                    bn(tape, binder, updates, p, &format!("s{i}.b{j}.proj_bn"))?
                }
            };
            let added = tape.add(branch, shortcut)?;
            cur = tape.relu(added);
        }
    }
    let features = cur;

    // Head.
    let output = match spec.head {
        HeadSpec::Classifier { .. } => {
            let pooled = tape.global_avg_pool(features)?;
            let w = binder.bind(tape, "head.fc.weight")?;
            let b = binder.bind(tape, "head.fc.bias")?;
            tape.linear(pooled, w, Some(b))?
        }
        HeadSpec::Segmentation { .. } => {
            let sw = binder.bind(tape, "head.score.weight")?;
            let sb = binder.bind(tape, "head.score.bias")?;
            let scores = tape.conv2d(features, sw, Some(sb), (1, 1), (0, 0))?;
            let uw = binder.bind(tape, "head.up.weight")?;
            let ub = binder.bind(tape, "head.up.bias")?;
            let up = tape.conv2d_transpose(scores, uw, Some(ub), (2, 2), (0, 0))?;
            tape.bilinear_resize(up, h, w)?
        }
    };

    Ok(ForwardNodes {
        stem,
        features,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec(classes: usize) -> NetworkSpec {
        NetworkSpec {
            name: "toy".into(),
            stem: StemSpec {
                out_channels: 8,
                kernel: 3,
                stride: 1,
            },
            stages: vec![StageSpec {
                blocks: 2,
                width: 8,
                stride: 1,
            }],
            head: HeadSpec::Classifier { classes },
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(seed, "test-input", 0);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn classifier_output_shape_follows_head_arity() {
        for classes in [3usize, 2] {
            let net: Network<f32> = Network::build(toy_spec(classes), 11).unwrap();
            let x = rand_input(&[2, 3, 32, 32], 5);
            let out = net.infer(&x).unwrap();
            assert_eq!(out.shape(), &[2, classes]);
        }
    }

    #[test]
    fn same_seed_builds_bit_identical_networks() {
        let a: Network<f32> = Network::build(toy_spec(3), 42).unwrap();
        let b: Network<f32> = Network::build(toy_spec(3), 42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data());
        }
        let c: Network<f32> = Network::build(toy_spec(3), 43).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs);
    }

    fn zero_residual_branches(net: &mut Network<f32>) {
        let names: Vec<String> = net
            .params
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| n.starts_with('s') && n.contains("conv"))
            .collect();
        for n in names {
            let t = net.param_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }

    #[test]
    fn zero_branch_trunk_is_exact_identity_on_nonnegative_input() {
        let mut net: Network<f32> = Network::build(toy_spec(3), 7).unwrap();
        zero_residual_branches(&mut net);
        let x = rand_input(&[1, 3, 16, 16], 3).map(|v| v.abs());
        let stem = net.infer_stem(&x).unwrap();
        let features = net.infer_features(&x).unwrap();
        assert_eq!(stem.data(), features.data());
    }

    #[test]
    fn dropping_zero_branch_block_preserves_output_bitwise() {
        let mut net: Network<f32> = Network::build(toy_spec(3), 7).unwrap();
        zero_residual_branches(&mut net);
        let x = rand_input(&[1, 3, 16, 16], 9);
        let base = net.infer(&x).unwrap();
        let dropped = net.drop_block(0, 1).unwrap();
        let after = dropped.infer(&x).unwrap();
        assert_eq!(base.data(), after.data());
        assert_eq!(dropped.active_block_count(), 1);
    }

    #[test]
    fn drop_block_matches_network_rebuilt_without_the_block() {
        let net: Network<f32> = Network::build(toy_spec(3), 19).unwrap();
        let dropped = net.drop_block(0, 1).unwrap();

        let mut small_spec = toy_spec(3);
        small_spec.stages[0].blocks = 1;
        let mut rebuilt: Network<f32> = Network::build(small_spec, 19).unwrap();
        for p in net.params.iter() {
            if p.name.starts_with("s0.b1") {
                continue;
            }
            *rebuilt.param_mut(&p.name).unwrap() = p.value.clone();
        }

        let x = rand_input(&[2, 3, 16, 16], 23);
        let a = dropped.infer(&x).unwrap();
        let b = rebuilt.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn drop_block_rejects_projection_shortcut() {
        let spec = NetworkSpec::preset("tiny-8", HeadSpec::Classifier { classes: 3 }).unwrap();
        let net: Network<f32> = Network::build(spec, 1).unwrap();
        // first block of stage 1 changes width and stride
        assert!(matches!(
            net.drop_block(1, 0),
            Err(Error::Config(_))
        ));
        // its sibling has an identity shortcut
        assert!(net.drop_block(1, 1).is_ok());
    }

    #[test]
    fn dropped_trained_block_still_yields_valid_logits() {
        let net: Network<f32> = Network::build(toy_spec(2), 3).unwrap();
        let x = rand_input(&[2, 3, 16, 16], 31);
        let base = net.infer(&x).unwrap();
        let after = net.drop_block(0, 0).unwrap().infer(&x).unwrap();
        assert_eq!(after.shape(), &[2, 2]);
        assert_ne!(base.data(), after.data());
        after.ensure_finite("dropped logits").unwrap();
    }

    #[test]
    fn count_paths_is_two_to_the_identity_blocks() {
        let mut spec = toy_spec(3);
        spec.stages[0].blocks = 3;
        assert_eq!(spec.identity_block_count(), 3);
        assert_eq!(spec.count_paths(), 8);

        // width change makes the first block of stage 1 a projection block
        let tiny = NetworkSpec::preset("tiny-8", HeadSpec::Classifier { classes: 3 }).unwrap();
        assert_eq!(tiny.identity_block_count(), 3);
        assert_eq!(tiny.count_paths(), 8);
    }

    #[test]
    fn count_paths_invariant_under_head_replacement() {
        let spec = NetworkSpec::preset("tiny-8", HeadSpec::Classifier { classes: 3 }).unwrap();
        let net: Network<f32> = Network::build(spec, 2).unwrap();
        let replaced = net.replace_head(2, 99).unwrap();
        assert_eq!(net.spec().count_paths(), replaced.spec().count_paths());
    }

    #[test]
    fn replace_head_preserves_backbone_and_reinitializes_head() {
        let net: Network<f32> = Network::build(toy_spec(3), 77).unwrap();
        let replaced = net.replace_head(2, 77).unwrap();
        for p in replaced.params.iter() {
            if p.name.starts_with("head.") {
                continue;
            }
            assert_eq!(p.value.data(), net.param(&p.name).unwrap().data());
        }
        // fresh build with the same seed draws the identical head
        let fresh: Network<f32> = Network::build(toy_spec(2), 77).unwrap();
        assert_eq!(
            replaced.param("head.fc.weight").unwrap().data(),
            fresh.param("head.fc.weight").unwrap().data()
        );
        let x = rand_input(&[3, 3, 16, 16], 1);
        assert_eq!(replaced.infer(&x).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn replace_head_same_arity_same_seed_matches_fresh_build_head() {
        let net: Network<f32> = Network::build(toy_spec(3), 5).unwrap();
        let replaced = net.replace_head(3, 5).unwrap();
        assert_eq!(
            replaced.param("head.fc.weight").unwrap().data(),
            net.param("head.fc.weight").unwrap().data()
        );
    }

    #[test]
    fn replace_head_rejects_segmentation_networks() {
        let spec = NetworkSpec::preset("tiny-8", HeadSpec::Segmentation { score_channels: 2 })
            .unwrap();
        let net: Network<f32> = Network::build(spec, 1).unwrap();
        assert!(matches!(net.replace_head(2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn segmentation_head_matches_input_resolution() {
        let spec = NetworkSpec::preset("tiny-8", HeadSpec::Segmentation { score_channels: 2 })
            .unwrap();
        let net: Network<f32> = Network::build(spec, 8).unwrap();
        for (h, w) in [(16, 16), (17, 23), (9, 30)] {
            let x = rand_input(&[1, 3, h, w], h as u64 * 100 + w as u64);
            let out = net.infer(&x).unwrap();
            assert_eq!(out.shape(), &[1, 2, h, w]);
        }
    }

    #[test]
    fn too_small_input_is_config_error() {
        let spec = NetworkSpec::preset("tiny-8", HeadSpec::Segmentation { score_channels: 2 })
            .unwrap();
        let net: Network<f32> = Network::build(spec, 8).unwrap();
        let x = Tensor::full(vec![1, 3, 1, 1], 0.5f32);
        assert!(matches!(net.infer(&x), Err(Error::Config(_))));
    }

    #[test]
    fn block_forward_matches_hand_composed_primitives() {
        use crate::ops;
        // one identity block, inference mode, random params
        let net: Network<f32> = Network::build(
            NetworkSpec {
                name: "one-block".into(),
                stem: StemSpec {
                    out_channels: 4,
                    kernel: 1,
                    stride: 1,
                },
                stages: vec![StageSpec {
                    blocks: 1,
                    width: 4,
                    stride: 1,
                }],
                head: HeadSpec::Classifier { classes: 2 },
            },
            13,
        )
        .unwrap();
        let x = rand_input(&[1, 3, 8, 8], 17);
        let stem_out = net.infer_stem(&x).unwrap();
        let feats = net.infer_features(&x).unwrap();

        let eps = BN_EPSILON as f32;
        let bn = |t: &Tensor<f32>, prefix: &str| {
            ops::norm::batch_norm_infer_forward(
                t,
                net.param(&format!("{prefix}.gamma")).unwrap(),
                net.param(&format!("{prefix}.beta")).unwrap(),
                net.param(&format!("{prefix}.running_mean")).unwrap(),
                net.param(&format!("{prefix}.running_var")).unwrap(),
                eps,
            )
            .unwrap()
        };
        let c1 = ops::conv2d_forward(
            &stem_out,
            net.param("s0.b0.conv1.weight").unwrap(),
            None,
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let r1 = ops::relu_forward(&bn(&c1, "s0.b0.bn1"));
        let c2 = ops::conv2d_forward(
            &r1,
            net.param("s0.b0.conv2.weight").unwrap(),
            None,
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let added = bn(&c2, "s0.b0.bn2").zip_map(&stem_out, |a, b| a + b).unwrap();
        let want = ops::relu_forward(&added);
        assert_eq!(feats.data(), want.data());
    }

    #[test]
    fn network_gradients_pass_finite_difference_check() {
        // Whole tiny classifier network in f64, training mode: perturb the
        // input and check the loss gradient against central differences.
        let spec = NetworkSpec {
            name: "grad".into(),
            stem: StemSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
            },
            stages: vec![StageSpec {
                blocks: 1,
                width: 4,
                stride: 1,
            }],
            head: HeadSpec::Classifier { classes: 3 },
        };
        let net: Network<f64> = Network::build(spec, 21).unwrap();
        let mut rng = crate::rng::derive_rng(55, "resnet-gc", 0);
        use rand::Rng;
        let x = Tensor::from_fn(vec![2, 3, 6, 6], |_| rng.gen_range(-1.0..1.0));

        // Analytic grads from forward(), numeric by perturbing every
        // trainable parameter element.
        let loss_of = |n: &Network<f64>, x: &Tensor<f64>| -> f64 {
            let mut n = n.clone();
            n.set_mode(Mode::Training);
            let mut tape = Tape::new();
            let (nodes, _) = n.forward(&mut tape, x).unwrap();
            let loss = tape.cross_entropy(nodes.output, &[0, 2], None).unwrap();
            tape.value(loss).item().unwrap()
        };
        let mut train_net = net.clone();
        train_net.set_mode(Mode::Training);
        let mut tape = Tape::new();
        let (nodes, binding) = train_net.forward(&mut tape, &x).unwrap();
        let loss = tape.cross_entropy(nodes.output, &[0, 2], None).unwrap();
        tape.backward(loss).unwrap();

        let step = 1e-5;
        let mut worst = 0.0f64;
        let names: Vec<String> = net
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let idx = net.params.idx_of(&name).unwrap();
            let analytic = binding
                .id_of(idx)
                .and_then(|id| tape.grad(id))
                .cloned()
                .unwrap();
            for ei in 0..analytic.len() {
                let mut plus = net.clone();
                plus.param_mut(&name).unwrap().data_mut()[ei] += step;
                let mut minus = net.clone();
                minus.param_mut(&name).unwrap().data_mut()[ei] -= step;
                let numeric = (loss_of(&plus, &x) - loss_of(&minus, &x)) / (2.0 * step);
                let a = analytic.data()[ei];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if rel > worst {
                    worst = rel;
                }
            }
        }
        assert!(worst < 1e-5, "network gradient check failed: {worst}");
    }
}
