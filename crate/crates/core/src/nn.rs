//! Backbones and linear layers shared by the labeling function and the
//! target model.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, ParamSet, Scalar, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Feature extractor `f_Ψ0`.
///
/// `Mlp` is the vector-data backbone. `Conv` has three 3x3 convolutions
/// (strides 1, 2, 2) followed by one fully connected feature layer; together
/// with the classifier that gives three conv and two fully connected layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        conv_channels: [usize; 3],
        feature_dim: usize,
        activation: Activation,
    },
}

/// Hook applied to the output of the first backbone stage (MixStyle).
pub type StageHook<'a, S> = &'a mut dyn FnMut(&mut Graph<S>, Var, usize) -> Result<Var>;

impl BackboneSpec {
    pub fn input_len(&self) -> usize {
        match self {
            BackboneSpec::Mlp { input_dim, .. } => *input_dim,
            BackboneSpec::Conv {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp {
                input_dim, hidden, ..
            } => hidden.last().copied().unwrap_or(*input_dim),
            BackboneSpec::Conv { feature_dim, .. } => *feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneSpec::Mlp {
                input_dim, hidden, ..
            } => {
                if *input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::config("MLP backbone needs non-empty, non-zero widths"));
                }
            }
            BackboneSpec::Conv {
                channels,
                height,
                width,
                conv_channels,
                feature_dim,
                ..
            } => {
                if *channels == 0 || *height < 4 || *width < 4 || *feature_dim == 0 {
                    return Err(Error::config("conv backbone needs inputs of at least 4x4"));
                }
                if conv_channels.contains(&0) {
                    return Err(Error::config("conv channel counts must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Conv geometries, one per conv stage.
    pub fn conv_geoms(&self) -> Vec<ConvGeom> {
        match self {
            BackboneSpec::Mlp { .. } => Vec::new(),
            BackboneSpec::Conv {
                channels,
                height,
                width,
                conv_channels,
                ..
            } => {
                let mut out = Vec::new();
                let (mut c, mut h, mut w) = (*channels, *height, *width);
                for (i, &oc) in conv_channels.iter().enumerate() {
                    let geom = ConvGeom {
                        in_channels: c,
                        height: h,
                        width: w,
                        out_channels: oc,
                        kernel: 3,
                        stride: if i == 0 { 1 } else { 2 },
                        padding: 1,
                    };
                    c = oc;
                    h = geom.out_height();
                    w = geom.out_width();
                    out.push(geom);
                }
                out
            }
        }
    }

    /// Channel count of the first stage's output, used to group MixStyle
    /// statistics. MLP hidden vectors are treated as a single channel.
    pub fn first_stage_channels(&self) -> usize {
        match self {
            BackboneSpec::Mlp { .. } => 1,
            BackboneSpec::Conv { conv_channels, .. } => conv_channels[0],
        }
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        match self {
            BackboneSpec::Mlp {
                input_dim,
                hidden,
                activation,
            } => {
                let mut fan_in = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    p.push(format!("layer{i}.w"), fan_in, h, init_weight(rng, fan_in, h, *activation));
                    p.push(format!("layer{i}.b"), 1, h, vec![0.0; h]);
                    fan_in = h;
                }
            }
            BackboneSpec::Conv {
                feature_dim,
                activation,
                ..
            } => {
                let geoms = self.conv_geoms();
                for (i, geom) in geoms.iter().enumerate() {
                    let fan_in = geom.weight_cols();
                    let w = init_weight(rng, fan_in, geom.out_channels, *activation);
                    p.push(format!("conv{i}.w"), geom.out_channels, fan_in, w);
                    p.push(format!("conv{i}.b"), 1, geom.out_channels, vec![0.0; geom.out_channels]);
                }
                let flat = geoms.last().map(ConvGeom::out_len).unwrap_or(0);
                p.push("fc.w", flat, *feature_dim, init_weight(rng, flat, *feature_dim, *activation));
                p.push("fc.b", 1, *feature_dim, vec![0.0; *feature_dim]);
            }
        }
        p
    }

    /// Number of parameter tensors.
    pub fn num_tensors(&self) -> usize {
        match self {
            BackboneSpec::Mlp { hidden, .. } => 2 * hidden.len(),
            BackboneSpec::Conv { .. } => 8,
        }
    }

    /// Width of the trunk output, i.e. the input of the final feature layer.
    pub fn trunk_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp {
                input_dim, hidden, ..
            } => {
                if hidden.len() >= 2 {
                    hidden[hidden.len() - 2]
                } else {
                    *input_dim
                }
            }
            BackboneSpec::Conv { .. } => self.conv_geoms().last().map(ConvGeom::out_len).unwrap_or(0),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            BackboneSpec::Mlp { activation, .. } | BackboneSpec::Conv { activation, .. } => *activation,
        }
    }

    /// Everything before the final feature layer (whose weight and bias are
    /// the last two tensors of the layout). `params` are the trunk leaves.
    pub fn forward_trunk<S: Scalar>(&self, g: &mut Graph<S>, params: &[Var], x: Var) -> Result<Var> {
        if g.shape(x).1 != self.input_len() {
            return Err(Error::shape(format!(
                "backbone expects inputs of length {}, got {}",
                self.input_len(),
                g.shape(x).1
            )));
        }
        let act = self.activation();
        let mut h = x;
        match self {
            BackboneSpec::Mlp { hidden, .. } => {
                for i in 0..hidden.len() - 1 {
                    h = linear(g, h, params[2 * i], params[2 * i + 1]);
                    h = act.apply(g, h);
                }
            }
            BackboneSpec::Conv { .. } => {
                for (i, geom) in self.conv_geoms().iter().enumerate() {
                    h = g.conv2d(h, params[2 * i], params[2 * i + 1], *geom);
                    h = act.apply(g, h);
                }
            }
        }
        Ok(h)
    }

    /// Forward pass. `params` are the leaves of [`Self::init`]'s layout in
    /// order; `hook` sees the first stage's activations.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &[Var],
        x: Var,
        mut hook: Option<StageHook<'_, S>>,
    ) -> Result<Var> {
        if g.shape(x).1 != self.input_len() {
            return Err(Error::shape(format!(
                "backbone expects inputs of length {}, got {}",
                self.input_len(),
                g.shape(x).1
            )));
        }
        match self {
            BackboneSpec::Mlp {
                hidden, activation, ..
            } => {
                let mut h = x;
                for i in 0..hidden.len() {
                    h = linear(g, h, params[2 * i], params[2 * i + 1]);
                    h = activation.apply(g, h);
                    if i == 0 {
                        if let Some(f) = hook.as_mut() {
                            h = f(g, h, 1)?;
                        }
                    }
                }
                Ok(h)
            }
            BackboneSpec::Conv { activation, .. } => {
                let geoms = self.conv_geoms();
                let mut h = x;
                for (i, geom) in geoms.iter().enumerate() {
                    h = g.conv2d(h, params[2 * i], params[2 * i + 1], *geom);
                    h = activation.apply(g, h);
                    if i == 0 {
                        if let Some(f) = hook.as_mut() {
                            h = f(g, h, geom.out_channels)?;
                        }
                    }
                }
                let k = 2 * geoms.len();
                h = linear(g, h, params[k], params[k + 1]);
                Ok(activation.apply(g, h))
            }
        }
    }
}

/// A network producing class logits, optionally exposing its first
/// feature stage to a hook.
pub trait Classifier {
    fn input_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        leaves: &[Var],
        x: Var,
        hook: Option<StageHook<'_, S>>,
    ) -> Result<Var>;
}

/// `x · w + b`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize, act: Activation) -> Vec<f64> {
    let bound = match act {
        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
        Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
}

/// Small-variance init for classifier layers, so an untrained network
/// predicts close to uniform.
pub fn init_classifier(rng: &mut impl Rng, fan_in: usize, classes: usize) -> ParamSet {
    let dist = Normal::new(0.0, 0.01).expect("valid std");
    let mut p = ParamSet::new();
    p.push("w", fan_in, classes, (0..fan_in * classes).map(|_| dist.sample(rng)).collect());
    p.push("b", 1, classes, vec![0.0; classes]);
    p
}

/// Row-wise softmax of a flat `[n, classes]` buffer.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(classes)
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}
