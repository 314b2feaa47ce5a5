//! Residual CNN that maps a single-channel luminescence image to a relative
//! power estimate, optionally explaining the estimate as a spatial loss map.
//!
//! The trunk is a four-stage residual network behind a 7x7 stem; total
//! downsampling is 32x, so a 192x320 input yields a 6x10 feature map. Two
//! interchangeable heads sit on top:
//!
//! * [`HeadKind::EmbeddingLinear`] pools the features globally and applies a
//!   linear layer, predicting the scalar directly.
//! * [`HeadKind::RegressionMap`] projects the features to one channel,
//!   forces the result non-positive, and defines the prediction as one plus
//!   the sum of the map. Each map pixel then reads as the power lost in its
//!   receptive field, which is what makes the map useful downstream.
//!
//! Parameter layout is defined once (`param_specs`) and consumed in the same
//! order by initialisation, counting, and the forward walk, so the three can
//! never drift apart.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, TensorId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Downsampling factor between input image and head feature map.
pub const MAP_STRIDE: usize = 32;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

// The map head sums over every spatial position, so gradients reaching its
// projection are amplified by the pixel count. Start it near zero (prediction
// close to one, above almost every target) so the first updates grow the map
// instead of slamming the whole pre-activation below the relu cutoff, which
// would freeze the head permanently.
const MAP_INIT_SCALE: f64 = 0.05;
const MAP_BIAS_INIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    EmbeddingLinear,
    RegressionMap,
}

/// How the map head constrains its raw projection `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapNegation {
    /// `-relu(f)`: non-positive, gradients flow only through active pixels.
    Relu,
    /// `-|f|`: non-positive everywhere.
    Abs,
    /// Raw `f`, sign-unconstrained. Diagnostic only; predictions may
    /// exceed one.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input image height and width; both must be multiples of
    /// [`MAP_STRIDE`].
    pub in_hw: (usize, usize),
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub head: HeadKind,
    pub map_negation: MapNegation,
    /// Bias on the map projection. On by default so an all-zero feature map
    /// still produces a nonzero loss estimate early in training.
    pub map_bias: bool,
}

impl ModelSpec {
    pub fn new(
        in_hw: (usize, usize),
        stage_widths: [usize; 4],
        blocks_per_stage: usize,
        head: HeadKind,
    ) -> Result<Self> {
        if in_hw.0 == 0 || in_hw.1 == 0 || in_hw.0 % MAP_STRIDE != 0 || in_hw.1 % MAP_STRIDE != 0 {
            return Err(Error::invalid(
                "model",
                format!(
                    "input {}x{} must be a nonzero multiple of {MAP_STRIDE} in both axes",
                    in_hw.0, in_hw.1
                ),
            ));
        }
        if stage_widths.contains(&0) {
            return Err(Error::invalid("model", "stage widths must be nonzero"));
        }
        if blocks_per_stage == 0 {
            return Err(Error::invalid("model", "need at least one block per stage"));
        }
        Ok(Self {
            in_hw,
            stage_widths,
            blocks_per_stage,
            head,
            map_negation: MapNegation::Relu,
            map_bias: true,
        })
    }

    /// Narrow trunk for tests and quick experiments.
    pub fn mini(in_hw: (usize, usize), head: HeadKind) -> Result<Self> {
        Self::new(in_hw, [8, 16, 32, 64], 2, head)
    }

    /// Full-width trunk.
    pub fn full(in_hw: (usize, usize), head: HeadKind) -> Result<Self> {
        Self::new(in_hw, [64, 128, 256, 512], 2, head)
    }

    /// Spatial size of the head feature map.
    pub fn map_hw(&self) -> (usize, usize) {
        (self.in_hw.0 / MAP_STRIDE, self.in_hw.1 / MAP_STRIDE)
    }

    fn layers(&self) -> Vec<LayerDef> {
        let w = self.stage_widths;
        let mut defs = vec![
            LayerDef::conv("stem.conv", 1, w[0], 7, 2, 3, None),
            LayerDef::bn("stem.bn", w[0]),
        ];
        for s in 0..4 {
            for b in 0..self.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let cin = match (s, b) {
                    (_, 1..) => w[s],
                    (0, _) => w[0],
                    _ => w[s - 1],
                };
                let cout = w[s];
                let p = format!("stage{s}.block{b}");
                defs.push(LayerDef::conv(&format!("{p}.conv1"), cin, cout, 3, stride, 1, None));
                defs.push(LayerDef::bn(&format!("{p}.bn1"), cout));
                defs.push(LayerDef::conv(&format!("{p}.conv2"), cout, cout, 3, 1, 1, None));
                defs.push(LayerDef::bn(&format!("{p}.bn2"), cout));
                if stride != 1 || cin != cout {
                    defs.push(LayerDef::conv(&format!("{p}.down.conv"), cin, cout, 1, stride, 0, None));
                    defs.push(LayerDef::bn(&format!("{p}.down.bn"), cout));
                }
            }
        }
        match self.head {
            HeadKind::EmbeddingLinear => defs.push(LayerDef::Linear {
                name: "head.fc".into(),
                in_f: w[3],
                out_f: 1,
            }),
            HeadKind::RegressionMap => {
                let (mh, mw) = self.map_hw();
                defs.push(LayerDef::Conv {
                    name: "head.map".into(),
                    cin: w[3],
                    cout: 1,
                    k: 1,
                    stride: 1,
                    pad: 0,
                    bias_init: self.map_bias.then_some(MAP_BIAS_INIT),
                    init_scale: MAP_INIT_SCALE,
                    // The prediction sums this layer's output over mh*mw
                    // positions, so its loss curvature is amplified by that
                    // factor squared. Scaling the step down by the pixel
                    // count keeps the head stable at trunk learning rates.
                    lr_scale: 1.0 / (mh * mw) as f64,
                });
            }
        }
        defs
    }

    /// Parameter layout in order: names, shapes, init, and optimizer hints.
    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for def in self.layers() {
            match def {
                LayerDef::Conv { name, cin, cout, k, bias_init, init_scale, lr_scale, .. } => {
                    specs.push(ParamSpec {
                        name: format!("{name}.weight"),
                        shape: vec![cout, cin, k, k],
                        init: InitKind::HeNormal { fan_in: cin * k * k, scale: init_scale },
                        decay: true,
                        lr_scale,
                    });
                    if let Some(v) = bias_init {
                        specs.push(ParamSpec {
                            name: format!("{name}.bias"),
                            shape: vec![cout],
                            init: InitKind::Const(v),
                            decay: false,
                            lr_scale,
                        });
                    }
                }
                LayerDef::Bn { name, c } => {
                    specs.push(ParamSpec {
                        name: format!("{name}.gamma"),
                        shape: vec![c],
                        init: InitKind::Const(1.0),
                        decay: false,
                        lr_scale: 1.0,
                    });
                    specs.push(ParamSpec {
                        name: format!("{name}.beta"),
                        shape: vec![c],
                        init: InitKind::Const(0.0),
                        decay: false,
                        lr_scale: 1.0,
                    });
                }
                LayerDef::Linear { name, in_f, out_f } => specs.push(ParamSpec {
                    name: format!("{name}.weight"),
                    shape: vec![out_f, in_f],
                    init: InitKind::UniformFan { fan_in: in_f },
                    decay: true,
                    lr_scale: 1.0,
                }),
            }
        }
        specs
    }

    /// Expected batch-norm buffers: `(name, channels)` in order.
    pub(crate) fn buffer_plan(&self) -> Vec<(String, usize)> {
        self.layers()
            .into_iter()
            .filter_map(|d| match d {
                LayerDef::Bn { name, c } => Some((name, c)),
                _ => None,
            })
            .collect()
    }

    /// Total trainable scalars. Batch-norm running statistics are buffers,
    /// not parameters, and are excluded.
    pub fn count_parameters(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameter set. Same seed, same dtype, same values.
    pub fn init_params<T: Element>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in self.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                InitKind::HeNormal { fan_in, scale } => {
                    let dist = Normal::new(0.0f64, scale * (2.0 / fan_in as f64).sqrt())
                        .expect("std is finite and positive");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
                InitKind::UniformFan { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect()
                }
                InitKind::Const(v) => vec![T::from_f64(v); n],
            };
            params.push(Param {
                name: spec.name,
                shape: spec.shape,
                data,
                decay: spec.decay,
                lr_scale: spec.lr_scale,
            });
        }
        let buffers = self
            .layers()
            .into_iter()
            .filter_map(|d| match d {
                LayerDef::Bn { name, c } => Some(BnBuffer {
                    name,
                    mean: vec![T::ZERO; c],
                    var: vec![T::ONE; c],
                }),
                _ => None,
            })
            .collect();
        ParamSet { params, buffers }
    }

    /// Builds the network on `tape`. `ids` must come from
    /// [`ParamSet::bind`] on a set produced by this spec; `buffers` are the
    /// matching batch-norm running statistics, updated in place when
    /// `training` is true.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        ids: &[TensorId],
        buffers: &mut [BnBuffer<T>],
        x: TensorId,
        training: bool,
    ) -> Result<ModelOutput> {
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[1] != 1 || (xs[2], xs[3]) != self.in_hw {
            return Err(Error::shape(
                "model.forward",
                format!(
                    "expected [n, 1, {}, {}], got {xs:?}",
                    self.in_hw.0, self.in_hw.1
                ),
            ));
        }
        let defs = self.layers();
        let mut cur = Cursor {
            defs: &defs,
            ids,
            buffers,
            def_at: 0,
            id_at: 0,
            buf_at: 0,
        };

        let mut t = cur.conv(tape, x)?;
        t = cur.bn(tape, t, training)?;
        t = tape.relu(t)?;
        t = tape.max_pool2x2(t)?;
        for s in 0..4 {
            for b in 0..self.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let cin = tape.shape(t)[1];
                let cout = self.stage_widths[s];
                let identity = t;
                let mut y = cur.conv(tape, t)?;
                y = cur.bn(tape, y, training)?;
                y = tape.relu(y)?;
                y = cur.conv(tape, y)?;
                y = cur.bn(tape, y, training)?;
                let skip = if stride != 1 || cin != cout {
                    let d = cur.conv(tape, identity)?;
                    cur.bn(tape, d, training)?
                } else {
                    identity
                };
                t = tape.add(y, skip)?;
                t = tape.relu(t)?;
            }
        }

        let out = match self.head {
            HeadKind::EmbeddingLinear => {
                let pooled = tape.global_avg_pool(t)?;
                let y = cur.linear(tape, pooled)?;
                let n = tape.shape(y)[0];
                let y_hat = tape.reshape(y, &[n])?;
                ModelOutput { y_hat, map: None }
            }
            HeadKind::RegressionMap => {
                let f = cur.conv(tape, t)?;
                let map = match self.map_negation {
                    MapNegation::Relu => {
                        let r = tape.relu(f)?;
                        tape.scale(r, T::from_f64(-1.0))?
                    }
                    MapNegation::Abs => {
                        let a = tape.abs(f)?;
                        tape.scale(a, T::from_f64(-1.0))?
                    }
                    MapNegation::Identity => f,
                };
                // The prediction is one plus the per-sample map sum; summing
                // on the tape in row-major order keeps it bit-identical to
                // reading the map back and summing by hand.
                let ms = tape.shape(map);
                let (n, l) = (ms[0], ms[2] * ms[3]);
                let flat = tape.reshape(map, &[n, l])?;
                let sums = tape.sum_axis(flat, 1)?;
                let y_hat = tape.add_scalar(sums, T::ONE)?;
                ModelOutput {
                    y_hat,
                    map: Some(map),
                }
            }
        };
        cur.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum LayerDef {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias_init: Option<f64>,
        init_scale: f64,
        lr_scale: f64,
    },
    Bn {
        name: String,
        c: usize,
    },
    Linear {
        name: String,
        in_f: usize,
        out_f: usize,
    },
}

impl LayerDef {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias_init: Option<f64>,
    ) -> Self {
        LayerDef::Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            bias_init,
            init_scale: 1.0,
            lr_scale: 1.0,
        }
    }

    fn bn(name: &str, c: usize) -> Self {
        LayerDef::Bn { name: name.into(), c }
    }
}

pub(crate) struct ParamSpec {
    pub(crate) name: String,
    pub(crate) shape: Vec<usize>,
    init: InitKind,
    pub(crate) decay: bool,
    pub(crate) lr_scale: f64,
}

enum InitKind {
    HeNormal { fan_in: usize, scale: f64 },
    UniformFan { fan_in: usize },
    Const(f64),
}

/// One trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Whether weight decay applies; true for conv and linear weights only.
    pub decay: bool,
    /// Per-layer multiplier on the learning rate, 1.0 for most parameters.
    pub lr_scale: f64,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// All model state: trainable parameters plus batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
    pub buffers: Vec<BnBuffer<T>>,
}

impl<T: Element> ParamSet<T> {
    /// Registers every parameter as a gradient-tracked leaf, in layout
    /// order. Call once per tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), &p.shape, true))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// Predicted relative power, shape `[n]`.
    pub y_hat: TensorId,
    /// Loss map `[n, 1, mh, mw]` when the map head is active.
    pub map: Option<TensorId>,
}

/// Walks layer definitions, parameter ids, and batch-norm buffers in lock
/// step with the forward pass.
struct Cursor<'a, T> {
    defs: &'a [LayerDef],
    ids: &'a [TensorId],
    buffers: &'a mut [BnBuffer<T>],
    def_at: usize,
    id_at: usize,
    buf_at: usize,
}

impl<'a, T: Element> Cursor<'a, T> {
    fn next_def(&mut self) -> Result<&'a LayerDef> {
        let def = self.defs.get(self.def_at).ok_or_else(|| {
            Error::invalid("model.forward", "forward walk ran past the layer plan")
        })?;
        self.def_at += 1;
        Ok(def)
    }

    fn next_id(&mut self) -> Result<TensorId> {
        let id = self.ids.get(self.id_at).copied().ok_or_else(|| {
            Error::invalid(
                "model.forward",
                format!("expected {} bound parameters, got {}", self.id_at + 1, self.ids.len()),
            )
        })?;
        self.id_at += 1;
        Ok(id)
    }

    fn conv(&mut self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let LayerDef::Conv { stride, pad, bias_init, .. } = self.next_def()? else {
            return Err(Error::invalid("model.forward", "layer plan out of sync at conv"));
        };
        let w = self.next_id()?;
        let b = if bias_init.is_some() {
            Some(self.next_id()?)
        } else {
            None
        };
        tape.conv2d(x, w, b, *stride, *pad)
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: TensorId, training: bool) -> Result<TensorId> {
        let LayerDef::Bn { .. } = self.next_def()? else {
            return Err(Error::invalid("model.forward", "layer plan out of sync at bn"));
        };
        let gamma = self.next_id()?;
        let beta = self.next_id()?;
        let buf = self.buffers.get_mut(self.buf_at).ok_or_else(|| {
            Error::invalid("model.forward", "missing batch-norm buffer")
        })?;
        self.buf_at += 1;
        tape.batch_norm2d(
            x,
            gamma,
            beta,
            &mut buf.mean,
            &mut buf.var,
            T::from_f64(BN_MOMENTUM),
            T::from_f64(BN_EPS),
            training,
        )
    }

    fn linear(&mut self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let LayerDef::Linear { .. } = self.next_def()? else {
            return Err(Error::invalid("model.forward", "layer plan out of sync at linear"));
        };
        let w = self.next_id()?;
        tape.linear(x, w, None)
    }

    fn finish(&self) -> Result<()> {
        if self.def_at != self.defs.len()
            || self.id_at != self.ids.len()
            || self.buf_at != self.buffers.len()
        {
            return Err(Error::invalid(
                "model.forward",
                "forward walk did not consume the full layer plan",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_input_not_divisible_by_stride() {
        assert!(ModelSpec::mini((192, 320), HeadKind::RegressionMap).is_ok());
        assert!(ModelSpec::mini((192, 321), HeadKind::RegressionMap).is_err());
        assert!(ModelSpec::mini((0, 320), HeadKind::RegressionMap).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_ordered() {
        let spec = ModelSpec::mini((96, 160), HeadKind::RegressionMap).unwrap();
        let set: ParamSet<f32> = spec.init_params(7);
        let mut seen = std::collections::HashSet::new();
        for p in &set.params {
            assert!(seen.insert(p.name.clone()), "duplicate {}", p.name);
        }
        assert_eq!(set.params[0].name, "stem.conv.weight");
        assert_eq!(set.params.last().unwrap().name, "head.map.bias");
        assert_eq!(set.num_scalars(), spec.count_parameters());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = ModelSpec::mini((96, 160), HeadKind::EmbeddingLinear).unwrap();
        let a: ParamSet<f64> = spec.init_params(42);
        let b: ParamSet<f64> = spec.init_params(42);
        let c: ParamSet<f64> = spec.init_params(43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn decay_applies_to_conv_and_linear_weights_only() {
        let spec = ModelSpec::mini((96, 160), HeadKind::EmbeddingLinear).unwrap();
        let set: ParamSet<f32> = spec.init_params(0);
        for p in &set.params {
            let expect = p.name.ends_with(".weight");
            assert_eq!(p.decay, expect, "{}", p.name);
        }
    }

    #[test]
    fn mini_parameter_count_matches_hand_audit() {
        // Derived layer by layer on paper: stem 392 + 16, stage0 two
        // identity blocks 2*1184, stage1 3680 + 4672, stage2 14528 + 18560,
        // stage3 57728 + 73984, map head 64 + 1.
        let map = ModelSpec::mini((192, 320), HeadKind::RegressionMap).unwrap();
        assert_eq!(map.count_parameters(), 175_993);
        let emb = ModelSpec::mini((192, 320), HeadKind::EmbeddingLinear).unwrap();
        assert_eq!(emb.count_parameters(), 175_992);
        let mut no_bias = map.clone();
        no_bias.map_bias = false;
        assert_eq!(no_bias.count_parameters(), 175_992);
    }
}
