//! Plain stride-2 convolutional backbone with a single-predictor SSD head.
//!
//! Five stride-2 stages take a `S × S` canvas to `S/32 × S/32` (224 → 7).
//! Each head grid is served from the feature map of matching size: `S/32`
//! from stage five, `S/16` and `S/8` from stages four and three, and smaller
//! grids (4, 2, 1 at S = 224) from a chain of extra stride-2 convolutions on
//! the stage-five map. Every grid gets a 3×3 classification conv with one
//! channel per anchor and a 3×3 regression conv with four channels per
//! anchor; outputs are flattened to match [`crate::anchors::build_grid`]
//! ordering.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{conv_out, ConvGeometry, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Classification bias prior: sigmoid(−2) ≈ 0.12.
pub const CLS_BIAS_PRIOR: f64 = -2.0;

const DOWN: ConvGeometry = ConvGeometry { stride: 2, pad: 1 };
const SAME: ConvGeometry = ConvGeometry { stride: 1, pad: 1 };

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub canvas_side: u32,
    /// Output channels of the five backbone stages.
    pub channels: Vec<usize>,
    pub head_grids: Vec<usize>,
    pub anchors_per_cell: usize,
    /// Convolutions per stage: one stride-2 conv plus `depth − 1` stride-1
    /// refinements. Defaults to one per stage.
    #[serde(default = "default_depths")]
    pub stage_depths: Vec<usize>,
    /// Width of the separate 3×3 conv + relu towers each grid runs before its
    /// classification and regression predictors; 0 feeds the tapped features
    /// straight to both.
    #[serde(default = "default_head_channels")]
    pub head_channels: usize,
}

fn default_depths() -> Vec<usize> {
    vec![1; 5]
}

fn default_head_channels() -> usize {
    128
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            canvas_side: 224,
            channels: vec![8, 16, 32, 64, 64],
            head_grids: vec![7],
            anchors_per_cell: 6,
            stage_depths: default_depths(),
            head_channels: default_head_channels(),
        }
    }
}

/// Where a head grid reads its features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tap {
    Stage(usize),
    /// Depth along the extra stride-2 chain after the last stage.
    Extra(usize),
}

impl DetectorConfig {
    pub fn new(head_grids: Vec<usize>, anchors_per_cell: usize) -> Self {
        DetectorConfig {
            head_grids,
            anchors_per_cell,
            ..DetectorConfig::default()
        }
    }

    fn stage_sizes(&self) -> Vec<usize> {
        let mut s = self.canvas_side as usize;
        self.channels
            .iter()
            .map(|_| {
                s = conv_out(s, 3, DOWN).unwrap_or(0);
                s
            })
            .collect()
    }

    fn taps(&self) -> Result<Vec<Tap>> {
        let sizes = self.stage_sizes();
        let last = *sizes.last().unwrap_or(&0);
        let mut extra = vec![];
        let mut s = last;
        while s > 1 {
            s = conv_out(s, 3, DOWN).unwrap_or(1);
            extra.push(s);
        }
        self.head_grids
            .iter()
            .map(|&g| {
                // the deepest stage wins when sizes repeat
                if let Some(i) = sizes.iter().rposition(|&s| s == g) {
                    if i + 3 >= sizes.len() {
                        return Ok(Tap::Stage(i));
                    }
                }
                if let Some(d) = extra.iter().position(|&s| s == g) {
                    return Ok(Tap::Extra(d));
                }
                Err(Error::InvalidConfig(format!(
                    "grid {g} is not produced by the backbone (stage maps {sizes:?}, extra {extra:?})"
                )))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 5 || self.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "five positive stage channel counts required, got {:?}",
                self.channels
            )));
        }
        if self.stage_depths.len() != 5 || self.stage_depths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "five positive stage depths required, got {:?}",
                self.stage_depths
            )));
        }
        if self.canvas_side % 32 != 0 || self.canvas_side == 0 {
            return Err(Error::InvalidConfig(format!(
                "canvas side {} must be a positive multiple of 32",
                self.canvas_side
            )));
        }
        if self.head_grids.is_empty() || self.anchors_per_cell == 0 {
            return Err(Error::InvalidConfig("head needs grids and anchors".into()));
        }
        self.taps().map(|_| ())
    }

    pub fn total_anchors(&self) -> usize {
        self.head_grids.iter().map(|g| g * g).sum::<usize>() * self.anchors_per_cell
    }

    fn extra_depth(&self) -> Result<usize> {
        Ok(self
            .taps()?
            .iter()
            .filter_map(|t| match t {
                Tap::Extra(d) => Some(d + 1),
                Tap::Stage(_) => None,
            })
            .max()
            .unwrap_or(0))
    }
}

/// Training group of a parameter; also indexes the discriminative
/// learning-rate divisors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone stages one to four.
    Early,
    /// Last backbone stage.
    Last,
    /// Extra pyramid convs and prediction convs.
    Head,
}

impl ParamGroup {
    pub fn index(self) -> usize {
        match self {
            ParamGroup::Early => 0,
            ParamGroup::Last => 1,
            ParamGroup::Head => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel<T> {
    pub config: DetectorConfig,
    pub params: Vec<Param<T>>,
}

/// Graph handles produced by [`DetectorModel::forward`].
pub struct ForwardOutput {
    /// `[B, A]`.
    pub logits: Var,
    /// `[B, A, 4]`.
    pub offsets: Var,
    /// One handle per model parameter, in declaration order.
    pub params: Vec<Var>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    init: Init,
}

enum Init {
    He,
    Scaled(f64),
    Const(f64),
}

fn layout(cfg: &DetectorConfig) -> Result<Vec<Spec>> {
    cfg.validate()?;
    let mut specs = Vec::new();
    let mut conv = |name: String, cin: usize, cout: usize, group: ParamGroup, w: Init, b: Init| {
        specs.push(Spec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, 3, 3],
            group,
            init: w,
        });
        specs.push(Spec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            group,
            init: b,
        });
    };
    let mut cin = 1;
    for (s, (&c, &depth)) in cfg.channels.iter().zip(&cfg.stage_depths).enumerate() {
        let group = if s == 4 { ParamGroup::Last } else { ParamGroup::Early };
        for d in 0..depth {
            conv(format!("stage{}.conv{d}", s + 1), cin, c, group, Init::He, Init::Const(0.0));
            cin = c;
        }
    }
    let top = cfg.channels[4];
    for d in 0..cfg.extra_depth()? {
        conv(format!("extra{d}"), top, top, ParamGroup::Head, Init::He, Init::Const(0.0));
    }
    let k = cfg.anchors_per_cell;
    for (&g, tap) in cfg.head_grids.iter().zip(cfg.taps()?) {
        let cin = match tap {
            Tap::Stage(i) => cfg.channels[i],
            Tap::Extra(_) => top,
        };
        let (mut cls_in, mut reg_in) = (cin, cin);
        if cfg.head_channels > 0 {
            let hc = cfg.head_channels;
            conv(format!("head{g}.cls_tower"), cin, hc, ParamGroup::Head, Init::He, Init::Const(0.0));
            conv(format!("head{g}.reg_tower"), cin, hc, ParamGroup::Head, Init::He, Init::Const(0.0));
            (cls_in, reg_in) = (hc, hc);
        }
        conv(
            format!("head{g}.cls"),
            cls_in,
            k,
            ParamGroup::Head,
            Init::Scaled(0.1),
            Init::Const(CLS_BIAS_PRIOR),
        );
        conv(
            format!("head{g}.reg"),
            reg_in,
            4 * k,
            ParamGroup::Head,
            Init::Scaled(0.1),
            Init::Const(0.0),
        );
    }
    Ok(specs)
}

/// Build a detector with He-initialized weights (prediction convs scaled
/// down by 0.1) and the classification bias prior.
pub fn build_detector<T: Scalar>(cfg: &DetectorConfig, seed: u64) -> Result<DetectorModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = layout(cfg)?
        .into_iter()
        .map(|s| {
            let fan_in: usize = s.shape[1..].iter().product();
            let he = (2.0 / fan_in.max(1) as f64).sqrt();
            let value = Tensor::from_fn(&s.shape, |_| match s.init {
                Init::He => T::of(he * rng.sample::<f64, _>(StandardNormal)),
                Init::Scaled(g) => T::of(g * he * rng.sample::<f64, _>(StandardNormal)),
                Init::Const(c) => T::of(c),
            });
            Param {
                name: s.name,
                value,
                group: s.group,
            }
        })
        .collect();
    Ok(DetectorModel {
        config: cfg.clone(),
        params,
    })
}

impl<T: Scalar> DetectorModel<T> {
    /// Parameter shapes in declaration order, as dictated by the config.
    pub fn expected_shapes(cfg: &DetectorConfig) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(layout(cfg)?.into_iter().map(|s| (s.name, s.shape)).collect())
    }

    pub fn from_params(cfg: DetectorConfig, values: Vec<Tensor<T>>) -> Result<Self> {
        let specs = layout(&cfg)?;
        if specs.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "config declares {} tensors, found {}",
                specs.len(),
                values.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(values)
            .map(|(s, v)| {
                if v.shape() != s.shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "{}: expected shape {:?}, found {:?}",
                        s.name,
                        s.shape,
                        v.shape()
                    )));
                }
                Ok(Param {
                    name: s.name,
                    value: v,
                    group: s.group,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DetectorModel { config: cfg, params })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Record the forward pass for `batch: [B, 1, S, S]`. Parameters whose
    /// `trainable` entry is false enter the graph as constants.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &Tensor<T>,
        trainable: &dyn Fn(ParamGroup) -> bool,
    ) -> Result<ForwardOutput> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.group) {
                    g.param(p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect();
        self.forward_with(g, batch, params)
    }

    /// Forward pass reading the weights from `params`, graph nodes holding
    /// values shaped like [`DetectorModel::params`] in declaration order.
    pub fn forward_with(&self, g: &mut Graph<T>, batch: &Tensor<T>, params: Vec<Var>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} parameter nodes for {} tensors", params.len(), self.params.len()),
            ));
        }
        let s = cfg.canvas_side as usize;
        match batch.shape() {
            [_, 1, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::shape(
                    "forward",
                    format!("expected [B, 1, {s}, {s}], got {other:?}"),
                ))
            }
        }
        let bsz = batch.shape()[0];
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout matches config");

        let mut x = g.input(batch.clone());
        let mut stage_out = Vec::with_capacity(5);
        for &depth in &cfg.stage_depths {
            for d in 0..depth {
                let (w, b) = (take(), take());
                let geo = if d == 0 { DOWN } else { SAME };
                let y = g.conv2d(x, w, Some(b), geo)?;
                x = g.relu(y);
            }
            stage_out.push(x);
        }
        let mut extra_out = Vec::new();
        let mut e = x;
        for _ in 0..cfg.extra_depth()? {
            let (w, b) = (take(), take());
            let y = g.conv2d(e, w, Some(b), DOWN)?;
            e = g.relu(y);
            extra_out.push(e);
        }
        let mut cls_parts = Vec::new();
        let mut reg_parts = Vec::new();
        for (&grid, tap) in cfg.head_grids.iter().zip(cfg.taps()?) {
            let feat = match tap {
                Tap::Stage(i) => stage_out[i],
                Tap::Extra(d) => extra_out[d],
            };
            let (cls_feat, reg_feat) = if cfg.head_channels > 0 {
                let (cw, cb, rw, rb) = (take(), take(), take(), take());
                let c = g.conv2d(feat, cw, Some(cb), SAME)?;
                let r = g.conv2d(feat, rw, Some(rb), SAME)?;
                (g.relu(c), g.relu(r))
            } else {
                (feat, feat)
            };
            let (cw, cb, rw, rb) = (take(), take(), take(), take());
            let cls = g.conv2d(cls_feat, cw, Some(cb), SAME)?;
            let cls = g.nchw_to_nhwc(cls)?;
            cls_parts.push(g.reshape(cls, &[bsz, grid * grid * cfg.anchors_per_cell])?);
            let reg = g.conv2d(reg_feat, rw, Some(rb), SAME)?;
            let reg = g.nchw_to_nhwc(reg)?;
            reg_parts.push(g.reshape(reg, &[bsz, grid * grid * cfg.anchors_per_cell * 4])?);
        }
        let a = cfg.total_anchors();
        let logits = if cls_parts.len() == 1 {
            cls_parts[0]
        } else {
            g.concat_rows(&cls_parts)?
        };
        let reg = if reg_parts.len() == 1 {
            reg_parts[0]
        } else {
            g.concat_rows(&reg_parts)?
        };
        let offsets = g.reshape(reg, &[bsz, a, 4])?;
        Ok(ForwardOutput {
            logits,
            offsets,
            params,
        })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &|_| false)?;
        Ok((g.value(out.logits).clone(), g.value(out.offsets).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(b: usize) -> Tensor<f64> {
        Tensor::zeros(&[b, 1, 224, 224])
    }

    #[test]
    fn output_shapes_follow_anchor_counts() {
        let m = build_detector::<f64>(&DetectorConfig::new(vec![7], 6), 1).unwrap();
        let (l, o) = m.infer(&zeros(2)).unwrap();
        assert_eq!(l.shape(), &[2, 294]);
        assert_eq!(o.shape(), &[2, 294, 4]);
        assert!(l.all_finite() && o.all_finite());

        let m = build_detector::<f64>(&DetectorConfig::new(vec![4, 2, 1], 3), 1).unwrap();
        let (l, o) = m.infer(&zeros(1)).unwrap();
        assert_eq!(l.shape(), &[1, 63]);
        assert_eq!(o.shape(), &[1, 63, 4]);
    }

    #[test]
    fn fourteen_grid_taps_stage_four() {
        let cfg = DetectorConfig::new(vec![14], 2);
        assert_eq!(cfg.taps().unwrap(), vec![Tap::Stage(3)]);
        let m = build_detector::<f32>(&cfg, 0).unwrap();
        let (l, _) = m.infer(&Tensor::zeros(&[1, 1, 224, 224])).unwrap();
        assert_eq!(l.shape(), &[1, 392]);
    }

    #[test]
    fn unreachable_grid_rejected() {
        assert!(DetectorConfig::new(vec![5], 6).validate().is_err());
        assert!(DetectorConfig::new(vec![112], 6).validate().is_err());
        let cfg = DetectorConfig {
            channels: vec![8, 8],
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = DetectorConfig::default();
        let a = build_detector::<f64>(&cfg, 42).unwrap();
        let b = build_detector::<f64>(&cfg, 42).unwrap();
        let c = build_detector::<f64>(&cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn classification_prior() {
        let m = build_detector::<f64>(&DetectorConfig::default(), 3).unwrap();
        let (l, _) = m.infer(&zeros(1)).unwrap();
        // zero image: only biases flow, so every logit is the prior
        assert!(l.data().iter().all(|&v| (v - CLS_BIAS_PRIOR).abs() < 1e-12));
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = build_detector::<f64>(&DetectorConfig::default(), 5).unwrap();
        let a = Tensor::from_fn(&[1, 1, 224, 224], |i| ((i * 13) % 97) as f64 / 97.0);
        let b = Tensor::from_fn(&[1, 1, 224, 224], |i| ((i * 7) % 89) as f64 / 89.0);
        let ab = Tensor::stack(&[&a, &b]).unwrap().reshape(&[2, 1, 224, 224]).unwrap();
        let ba = Tensor::stack(&[&b, &a]).unwrap().reshape(&[2, 1, 224, 224]).unwrap();
        let aa = Tensor::stack(&[&a, &a]).unwrap().reshape(&[2, 1, 224, 224]).unwrap();
        let (l_ab, o_ab) = m.infer(&ab).unwrap();
        let (l_ba, o_ba) = m.infer(&ba).unwrap();
        let (l_aa, _) = m.infer(&aa).unwrap();
        let n = 294;
        assert_eq!(l_ab.data()[..n], l_ba.data()[n..]);
        assert_eq!(l_ab.data()[n..], l_ba.data()[..n]);
        assert_eq!(o_ab.data()[..n * 4], o_ba.data()[n * 4..]);
        assert_eq!(l_aa.data()[..n], l_aa.data()[n..]);
    }

    #[test]
    fn wrong_canvas_rejected() {
        let m = build_detector::<f64>(&DetectorConfig::default(), 5).unwrap();
        assert!(m.infer(&Tensor::zeros(&[1, 1, 200, 200])).is_err());
    }

    #[test]
    fn groups_cover_backbone_and_head() {
        let m = build_detector::<f64>(&DetectorConfig::new(vec![4, 2, 1], 3), 1).unwrap();
        let group = |name: &str| m.params.iter().find(|p| p.name == name).unwrap().group;
        assert_eq!(group("stage1.conv0.weight"), ParamGroup::Early);
        assert_eq!(group("stage5.conv0.weight"), ParamGroup::Last);
        assert_eq!(group("extra2.bias"), ParamGroup::Head);
        assert_eq!(group("head1.reg.weight"), ParamGroup::Head);
    }
}
