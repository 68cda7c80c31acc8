//! A trained or trainable model: an architecture realised with one
//! method's layers, plus its parameter tensors.
//!
//! Every stochastic pass is `forward_indexed(x, z)` for an
//! [`EpistemicIndex`] `z` drawn by [`Model::draw_index`]; given the
//! parameters, `x` and `z` the output is fully determined.

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::architecture::{Architecture, LayerSpec};
use super::method::MethodConfig;
use crate::error::{Error, Result};
use crate::layers::{
    bbb_kl_on_tape, bbb_on_tape, variational_on_tape, DropoutConfig, LinearOp,
    VariationalActivations,
};
use crate::tensor::{
    sample_standard_normal, softplus_inverse, standard_normal_vec, Activation, RngStream, Tape,
    Tensor, Var,
};

/// Initial BBB posterior std as a fraction of the prior std.
const BBB_INIT_STD_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ParamKind {
    Plain,
    Variational(VariationalActivations),
    Bbb { prior_std: f64 },
}

impl ParamKind {
    fn tensor_count(self) -> usize {
        match self {
            ParamKind::Plain => 2,
            ParamKind::Variational(_) | ParamKind::Bbb { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Stage {
    Param {
        op: LinearOp,
        kind: ParamKind,
        activation: Activation,
        weight_shape: Vec<usize>,
        bias_shape: Vec<usize>,
        /// Per-sample output shape.
        output: Vec<usize>,
        fan_in: usize,
    },
    Flatten {
        output: Vec<usize>,
    },
    Activation(Activation),
    Dropout(DropoutConfig),
}

/// One draw from the method's base distribution; together with the
/// parameters it fixes a stochastic forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum EpistemicIndex {
    /// Deterministic networks take no index.
    Empty,
    /// Standard-normal tensors, one per stochastic site (two per BBB
    /// layer, a single `[d]` vector for a hypermodel).
    Gaussian(Vec<Tensor>),
    /// Ensemble member id.
    Member(usize),
    /// Seed from which every dropout mask of the pass is derived.
    MaskSeed(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    architecture: Architecture,
    method: MethodConfig,
    stages: Vec<Stage>,
    /// One parameter list per ensemble member; a single list otherwise.
    /// For a hypermodel the list is `[a, B]`.
    members: Vec<Vec<Tensor>>,
}

fn build_stages(arch: &Architecture, method: &MethodConfig) -> Result<Vec<Stage>> {
    method.validate()?;
    let shapes = arch.layer_shapes()?;
    let kind = match *method {
        MethodConfig::Vnn { .. } => ParamKind::Variational(VariationalActivations::epistemic(
            Activation::Identity,
        )),
        MethodConfig::Bbb { prior_std, .. } => ParamKind::Bbb { prior_std },
        _ => ParamKind::Plain,
    };
    let last_param = arch
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }));
    let mut stages = Vec::new();
    for (i, (layer, shape)) in arch.layers.iter().zip(&shapes).enumerate() {
        match layer {
            LayerSpec::Dense { units, activation } => {
                let fan_in = shape.input[0];
                stages.push(param_stage(
                    LinearOp::Dense,
                    kind,
                    *activation,
                    vec![*units, fan_in],
                    *units,
                    shape.output.clone(),
                    fan_in,
                ));
            }
            LayerSpec::Conv2d { filters, kernel, stride, padding, activation } => {
                let channels = shape.input[0];
                stages.push(param_stage(
                    LinearOp::Conv { stride: *stride, padding: *padding },
                    kind,
                    *activation,
                    vec![*filters, channels, *kernel, *kernel],
                    *filters,
                    shape.output.clone(),
                    channels * kernel * kernel,
                ));
            }
            LayerSpec::Flatten => stages.push(Stage::Flatten { output: shape.output.clone() }),
            LayerSpec::Activation { activation } => stages.push(Stage::Activation(*activation)),
        }
        let is_hidden_param = matches!(layer, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
            && Some(i) != last_param;
        if let (MethodConfig::Mcd { dropout_rate }, true) = (method, is_hidden_param) {
            stages.push(Stage::Dropout(DropoutConfig::new(*dropout_rate)?));
        }
    }
    Ok(stages)
}

fn param_stage(
    op: LinearOp,
    kind: ParamKind,
    activation: Activation,
    weight_shape: Vec<usize>,
    bias_len: usize,
    output: Vec<usize>,
    fan_in: usize,
) -> Stage {
    // the sampled value goes through the layer's nonlinearity
    let kind = match kind {
        ParamKind::Variational(a) => ParamKind::Variational(VariationalActivations { out: activation, ..a }),
        k => k,
    };
    Stage::Param { op, kind, activation, weight_shape, bias_shape: vec![bias_len], output, fan_in }
}

/// He-uniform bound; weights drawn from it have variance `2 / fan_in`.
fn init_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform_tensor<R: Rng>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    if limit == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Model {
    /// Initialises a model; ensemble member `k` uses `stream.child("member", k)`.
    pub fn new(architecture: Architecture, method: MethodConfig, stream: &RngStream) -> Result<Self> {
        let count = match method {
            MethodConfig::Ensemble { members } => members,
            _ => 1,
        };
        let streams: Vec<RngStream> = (0..count).map(|k| stream.child("member", k as u64)).collect();
        Self::with_member_streams(architecture, method, &streams)
    }

    /// Initialises one member per stream. Non-ensemble methods take exactly one.
    pub fn with_member_streams(
        architecture: Architecture,
        method: MethodConfig,
        streams: &[RngStream],
    ) -> Result<Self> {
        let stages = build_stages(&architecture, &method)?;
        let expected = match method {
            MethodConfig::Ensemble { members } => members,
            _ => 1,
        };
        if streams.len() != expected {
            return Err(Error::usage(format!(
                "{method} needs {expected} member streams, got {}",
                streams.len()
            )));
        }
        let members = streams
            .iter()
            .map(|s| init_member(&stages, &method, &mut s.child("init", 0).rng()))
            .collect();
        Ok(Self { architecture, method, stages, members })
    }

    /// Assembles a model from explicit parameters, checking their shapes.
    pub fn from_members(
        architecture: Architecture,
        method: MethodConfig,
        members: Vec<Vec<Tensor>>,
    ) -> Result<Self> {
        let stages = build_stages(&architecture, &method)?;
        let model = Self { architecture, method, stages, members };
        let expected_members = match method {
            MethodConfig::Ensemble { members } => members,
            _ => 1,
        };
        if model.members.len() != expected_members {
            return Err(Error::usage(format!(
                "{method} needs {expected_members} parameter sets, got {}",
                model.members.len()
            )));
        }
        let want = model.member_shapes();
        for (k, member) in model.members.iter().enumerate() {
            let got: Vec<&[usize]> = member.iter().map(Tensor::shape).collect();
            let want_ref: Vec<&[usize]> = want.iter().map(Vec::as_slice).collect();
            if got != want_ref {
                return Err(Error::dim(format!(
                    "member {k} parameter shapes {got:?} do not match {want_ref:?}"
                )));
            }
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn method(&self) -> &MethodConfig {
        &self.method
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn parameters(&self, member: usize) -> &[Tensor] {
        &self.members[member]
    }

    pub fn parameters_mut(&mut self, member: usize) -> &mut [Tensor] {
        &mut self.members[member]
    }

    pub(crate) fn members(&self) -> &[Vec<Tensor>] {
        &self.members
    }

    /// Number of scalar parameters in one member.
    pub fn parameter_count(&self) -> usize {
        self.members[0].iter().map(Tensor::len).sum()
    }

    /// True if the method draws randomness at prediction time.
    pub fn is_stochastic(&self) -> bool {
        !matches!(self.method, MethodConfig::Deterministic)
            && !matches!(self.method, MethodConfig::Ensemble { members: 1 })
    }

    fn param_stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().filter(|s| matches!(s, Stage::Param { .. }))
    }

    /// Parameter shapes of the deterministic base network.
    fn base_shapes(&self) -> Vec<Vec<usize>> {
        base_shapes(&self.stages)
    }

    /// Shapes of one member's parameter list.
    fn member_shapes(&self) -> Vec<Vec<usize>> {
        match self.method {
            MethodConfig::Hypermodel { index_dim, .. } => {
                let p = self.base_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
                vec![vec![p], vec![p, index_dim]]
            }
            _ => self
                .param_stages()
                .flat_map(|s| {
                    let Stage::Param { kind, weight_shape, bias_shape, .. } = s else {
                        unreachable!()
                    };
                    let pair = [weight_shape.clone(), bias_shape.clone()];
                    let reps = kind.tensor_count() / 2;
                    std::iter::repeat_n(pair, reps).flatten()
                })
                .collect(),
        }
    }

    /// Draws an index for a batch of `batch` inputs.
    pub fn draw_index(&self, batch: usize, stream: &RngStream) -> EpistemicIndex {
        match self.method {
            MethodConfig::Deterministic => EpistemicIndex::Empty,
            MethodConfig::Ensemble { members } => {
                let k = stream.rng().random_range(0..members);
                EpistemicIndex::Member(k)
            }
            MethodConfig::Mcd { .. } => EpistemicIndex::MaskSeed(stream.derive_u64()),
            MethodConfig::Hypermodel { index_dim, .. } => EpistemicIndex::Gaussian(vec![
                sample_standard_normal(&[index_dim], &stream.child("hyper", 0)),
            ]),
            MethodConfig::Vnn { .. } => EpistemicIndex::Gaussian(
                self.param_stages()
                    .enumerate()
                    .map(|(i, s)| {
                        let Stage::Param { output, .. } = s else { unreachable!() };
                        let mut shape = vec![batch];
                        shape.extend_from_slice(output);
                        sample_standard_normal(&shape, &stream.child("site", i as u64))
                    })
                    .collect(),
            ),
            MethodConfig::Bbb { .. } => EpistemicIndex::Gaussian(
                self.param_stages()
                    .enumerate()
                    .flat_map(|(i, s)| {
                        let Stage::Param { weight_shape, bias_shape, .. } = s else {
                            unreachable!()
                        };
                        let site = stream.child("site", i as u64);
                        [
                            sample_standard_normal(weight_shape, &site.child("weight", 0)),
                            sample_standard_normal(bias_shape, &site.child("bias", 0)),
                        ]
                    })
                    .collect(),
            ),
        }
    }

    /// `F_d(x, m, z)`: a deterministic pass given the index.
    pub fn forward_indexed(&self, x: &Tensor, z: &EpistemicIndex) -> Result<Tensor> {
        let mut tape = Tape::new();
        let member = self.member_for(z)?;
        let leaves: Vec<Var> = self.members[member].iter().map(|t| tape.leaf(t)).collect();
        let xv = tape.leaf(x);
        let (out, _) = self.forward_on_tape(&mut tape, xv, z, &leaves, false)?;
        Ok(tape.value(out).clone())
    }

    /// Which member's parameters an index selects.
    pub(crate) fn member_for(&self, z: &EpistemicIndex) -> Result<usize> {
        match (z, self.method) {
            (EpistemicIndex::Member(k), MethodConfig::Ensemble { members }) => {
                if *k < members {
                    Ok(*k)
                } else {
                    Err(Error::usage(format!("member {k} out of {members}")))
                }
            }
            (EpistemicIndex::Member(_), m) => {
                Err(Error::usage(format!("{m} does not take a member index")))
            }
            _ => Ok(0),
        }
    }

    /// Builds the pass on `tape` from registered parameter leaves. Returns
    /// the output and, for BBB when `with_kl`, the summed KL to the prior.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        z: &EpistemicIndex,
        leaves: &[Var],
        with_kl: bool,
    ) -> Result<(Var, Option<Var>)> {
        let x_shape = tape.value(x).shape().to_vec();
        if x_shape.len() != self.architecture.input_shape.len() + 1
            || x_shape[1..] != self.architecture.input_shape[..]
        {
            return Err(Error::dim(format!(
                "input {x_shape:?} does not match [B, {:?}]",
                self.architecture.input_shape
            )));
        }
        let batch = x_shape[0];
        self.check_index(z, batch)?;

        let base_leaves;
        let params: &[Var] = match (self.method, z) {
            (MethodConfig::Hypermodel { .. }, EpistemicIndex::Gaussian(zs)) => {
                let theta = tape.linear_map(leaves[0], leaves[1], zs[0].data())?;
                let mut offset = 0;
                let mut out = Vec::new();
                for shape in self.base_shapes() {
                    out.push(tape.slice(theta, offset, &shape)?);
                    offset += shape.iter().product::<usize>();
                }
                base_leaves = out;
                &base_leaves
            }
            _ => leaves,
        };

        let mut h = x;
        let mut cursor = 0;
        let mut site = 0;
        let mut dropout_site = 0u64;
        let mut kl: Option<Var> = None;
        for stage in &self.stages {
            match stage {
                Stage::Param { op, kind, activation, .. } => {
                    let n = kind.tensor_count();
                    let p = &params[cursor..cursor + n];
                    cursor += n;
                    h = match kind {
                        ParamKind::Plain => {
                            let a = op.apply(tape, h, p[0], p[1])?;
                            tape.activation(a, *activation)?
                        }
                        ParamKind::Variational(acts) => {
                            let EpistemicIndex::Gaussian(eps) = z else { unreachable!() };
                            variational_on_tape(tape, *op, h, [p[0], p[1], p[2], p[3]], *acts, &eps[site])?
                        }
                        ParamKind::Bbb { prior_std } => {
                            let EpistemicIndex::Gaussian(zs) = z else { unreachable!() };
                            let quad = [p[0], p[1], p[2], p[3]];
                            if with_kl {
                                let k = bbb_kl_on_tape(tape, quad, *prior_std)?;
                                kl = Some(match kl {
                                    Some(acc) => tape.add(acc, k)?,
                                    None => k,
                                });
                            }
                            let a = bbb_on_tape(tape, *op, h, quad, &zs[2 * site], &zs[2 * site + 1])?;
                            tape.activation(a, *activation)?
                        }
                    };
                    site += 1;
                }
                Stage::Flatten { output } => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(output);
                    h = tape.reshape(h, &shape)?;
                }
                Stage::Activation(a) => h = tape.activation(h, *a)?,
                Stage::Dropout(cfg) => {
                    let EpistemicIndex::MaskSeed(seed) = z else { unreachable!() };
                    let stream = RngStream::new(*seed).child("dropout", dropout_site);
                    let mask = cfg.scaled_mask(tape.value(h).shape(), &mut stream.rng());
                    h = tape.mul_const(h, &mask)?;
                    dropout_site += 1;
                }
            }
        }
        Ok((h, kl))
    }

    fn check_index(&self, z: &EpistemicIndex, batch: usize) -> Result<()> {
        let mismatch = || {
            Error::usage(format!(
                "index {} does not fit a {} model",
                index_kind(z),
                self.method
            ))
        };
        match (self.method, z) {
            (MethodConfig::Deterministic, EpistemicIndex::Empty) => Ok(()),
            (MethodConfig::Ensemble { .. }, EpistemicIndex::Member(_)) => Ok(()),
            (MethodConfig::Mcd { .. }, EpistemicIndex::MaskSeed(_)) => Ok(()),
            (MethodConfig::Hypermodel { index_dim, .. }, EpistemicIndex::Gaussian(zs)) => {
                if zs.len() == 1 && zs[0].shape() == [index_dim] {
                    Ok(())
                } else {
                    Err(mismatch())
                }
            }
            (MethodConfig::Vnn { .. }, EpistemicIndex::Gaussian(eps)) => {
                let sites: Vec<&Stage> = self.param_stages().collect();
                if eps.len() != sites.len() {
                    return Err(mismatch());
                }
                for (e, s) in eps.iter().zip(sites) {
                    let Stage::Param { output, .. } = s else { unreachable!() };
                    if e.shape().len() != output.len() + 1
                        || e.shape()[0] != batch
                        || e.shape()[1..] != output[..]
                    {
                        return Err(Error::usage(format!(
                            "noise shape {:?} does not match [{batch}, {output:?}]",
                            e.shape()
                        )));
                    }
                }
                Ok(())
            }
            (MethodConfig::Bbb { .. }, EpistemicIndex::Gaussian(zs)) => {
                let shapes: Vec<Vec<usize>> = self
                    .param_stages()
                    .flat_map(|s| {
                        let Stage::Param { weight_shape, bias_shape, .. } = s else {
                            unreachable!()
                        };
                        [weight_shape.clone(), bias_shape.clone()]
                    })
                    .collect();
                if zs.len() == shapes.len() && zs.iter().zip(&shapes).all(|(z, s)| z.shape() == &s[..]) {
                    Ok(())
                } else {
                    Err(mismatch())
                }
            }
            _ => Err(mismatch()),
        }
    }
}

/// `theta = a + B z` for `a: [P]`, `B: [P, d]`, `z: [d]`.
pub fn hypermodel_materialize(a: &Tensor, b: &Tensor, z: &[f64]) -> Result<Tensor> {
    let p = a.len();
    if a.rank() != 1 || b.shape() != [p, z.len()] {
        return Err(Error::usage(format!(
            "hypermodel shapes a {:?}, B {:?} do not fit an index of length {}",
            a.shape(),
            b.shape(),
            z.len()
        )));
    }
    let theta = a
        .data()
        .iter()
        .zip(b.data().chunks_exact(z.len()))
        .map(|(ai, row)| ai + row.iter().zip(z).map(|(bij, zj)| bij * zj).sum::<f64>())
        .collect();
    Tensor::new(vec![p], theta)
}

impl Model {
    /// Base-network parameter tensors a hypermodel produces for `z`.
    pub fn materialize(&self, z: &[f64]) -> Result<Vec<Tensor>> {
        if !matches!(self.method, MethodConfig::Hypermodel { .. }) {
            return Err(Error::usage(format!("{} is not a hypermodel", self.method)));
        }
        let theta = hypermodel_materialize(&self.members[0][0], &self.members[0][1], z)?;
        let mut offset = 0;
        self.base_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, theta.data()[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect()
    }
}

fn index_kind(z: &EpistemicIndex) -> &'static str {
    match z {
        EpistemicIndex::Empty => "empty",
        EpistemicIndex::Gaussian(_) => "gaussian",
        EpistemicIndex::Member(_) => "member",
        EpistemicIndex::MaskSeed(_) => "mask-seed",
    }
}

fn base_shapes(stages: &[Stage]) -> Vec<Vec<usize>> {
    stages
        .iter()
        .filter_map(|s| match s {
            Stage::Param { weight_shape, bias_shape, .. } => {
                Some([weight_shape.clone(), bias_shape.clone()])
            }
            _ => None,
        })
        .flatten()
        .collect()
}

fn init_member<R: Rng>(stages: &[Stage], method: &MethodConfig, rng: &mut R) -> Vec<Tensor> {
    let mut params = Vec::new();
    for stage in stages {
        let Stage::Param { kind, weight_shape, bias_shape, fan_in, .. } = stage else {
            continue;
        };
        let limit = init_limit(*fan_in);
        params.push(uniform_tensor(weight_shape, limit, rng));
        params.push(Tensor::zeros(bias_shape));
        match (kind, method) {
            (ParamKind::Variational(_), MethodConfig::Vnn { sigma_init }) => {
                params.push(uniform_tensor(weight_shape, sigma_init * limit, rng));
                params.push(Tensor::zeros(bias_shape));
            }
            (ParamKind::Bbb { prior_std }, _) => {
                let rho = softplus_inverse(BBB_INIT_STD_FRACTION * prior_std);
                params.push(Tensor::full(weight_shape, rho));
                params.push(Tensor::full(bias_shape, rho));
            }
            _ => {}
        }
    }
    if let MethodConfig::Hypermodel { index_dim, init_scale } = *method {
        // a = flattened base initialisation; each row of B spreads its
        // parameter by init_scale times that layer's initial weight std
        let mut offset_vec = Vec::new();
        let mut row_scale = Vec::new();
        let mut pairs = params.chunks_exact(2);
        let fans = stages.iter().filter_map(|s| match s {
            Stage::Param { fan_in, .. } => Some(*fan_in),
            _ => None,
        });
        for fan_in in fans {
            let pair = pairs.next().expect("two tensors per plain stage");
            let std = init_limit(fan_in) / 3f64.sqrt();
            for t in pair {
                offset_vec.extend_from_slice(t.data());
                row_scale.extend(std::iter::repeat_n(init_scale * std / (index_dim as f64).sqrt(), t.len()));
            }
        }
        let p = offset_vec.len();
        let noise = standard_normal_vec(rng, p * index_dim);
        let matrix = noise
            .chunks_exact(index_dim)
            .zip(&row_scale)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        return vec![
            Tensor::from_parts(vec![p], offset_vec),
            Tensor::from_parts(vec![p, index_dim], matrix),
        ];
    }
    params
}
