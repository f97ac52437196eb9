//! Point encoder and neural velocity field.
//!
//! The encoder is a PointNet-style network: a shared per-point MLP produces
//! local features, a max-pool over points yields a global feature that is
//! concatenated back onto every point, and a second shared MLP maps the
//! concatenation to the per-particle latent. The velocity field is an MLP
//! over the sinusoidal encoding of a query location and the mean latent of
//! particles within radius `r` of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spatial::SpatialHash;
use crate::tensor::{posenc_rows, BoundMlp, MlpParams, Tape, Tensor, Var};
use crate::types::{RunConfig, Vec3};

/// Position plus `h + 1` velocity frames.
pub fn kinematic_input_dim(history: usize) -> usize {
    3 + 3 * (history + 1)
}

/// Encoder input width: kinematics plus the robot/object tag channel.
pub fn encoder_input_dim(history: usize) -> usize {
    kinematic_input_dim(history) + 1
}

pub fn posenc_dim(freqs: usize) -> usize {
    3 * 2 * freqs
}

/// Learnable weights: the point encoder and the velocity-field MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder_local: MlpParams,
    pub encoder_global: MlpParams,
    pub field: MlpParams,
}

fn widths(cfg: &RunConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let h = cfg.encoder_hidden;
    let local = vec![encoder_input_dim(cfg.history_h), h, h];
    let global = vec![2 * h, cfg.feature_dim];
    let mut field = vec![posenc_dim(cfg.posenc_freqs) + cfg.feature_dim];
    field.extend(&cfg.field_hidden);
    field.push(3);
    (local, global, field)
}

impl ModelParams {
    pub fn init(cfg: &RunConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, g, f) = widths(cfg);
        ModelParams {
            encoder_local: MlpParams::init(&l, &mut rng),
            encoder_global: MlpParams::init(&g, &mut rng),
            field: MlpParams::init(&f, &mut rng),
        }
    }

    pub fn zeros(cfg: &RunConfig) -> Self {
        let (l, g, f) = widths(cfg);
        ModelParams {
            encoder_local: MlpParams::zeros(&l),
            encoder_global: MlpParams::zeros(&g),
            field: MlpParams::zeros(&f),
        }
    }

    /// Whether the layer widths agree with `cfg`.
    pub fn matches(&self, cfg: &RunConfig) -> bool {
        let z = Self::zeros(cfg);
        self.tensors().map(|t| &t.shape).eq(z.tensors().map(|t| &t.shape))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.encoder_local.tensors().chain(self.encoder_global.tensors()).chain(self.field.tensors())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder_local
            .tensors_mut()
            .chain(self.encoder_global.tensors_mut())
            .chain(self.field.tensors_mut())
            .collect()
    }

    /// Stable tensor names used in checkpoints.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("encoder.local", &self.encoder_local), ("encoder.global", &self.encoder_global), ("field", &self.field)] {
            for i in 0..mlp.layers.len() {
                out.push(format!("{prefix}.{i}.weight"));
                out.push(format!("{prefix}.{i}.bias"));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        self.tensors()
            .flat_map(|t| t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.grad = None;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_local.validate()?;
        self.encoder_global.validate()?;
        self.field.validate()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            local: self.encoder_local.bind(tape),
            global: self.encoder_global.bind(tape),
            field: self.field.bind(tape),
        }
    }

    /// Add the gradients recorded for a bound copy into each tensor's grad.
    pub fn accumulate(&mut self, bound: &BoundModel, grads: &crate::tensor::Gradients) {
        let vars: Vec<Var> = bound.vars().collect();
        for (t, v) in self.tensors_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Model weights recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub local: BoundMlp,
    pub global: BoundMlp,
    pub field: BoundMlp,
}

impl BoundModel {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.local.vars().chain(self.global.vars()).chain(self.field.vars())
    }

    /// Per-point latents (n x d) from the encoder input matrix.
    pub fn encode(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let n = tape.shape(input).0;
        if n == 0 {
            return Err(Error::Contract("cannot encode an empty point set".into()));
        }
        let local = self.local.forward(tape, input)?;
        let global = tape.col_max(local)?;
        let spread = tape.gather_rows(global, vec![0; n])?;
        let joined = tape.concat_cols(&[local, spread])?;
        self.global.forward(tape, joined)
    }

    /// Field velocities for query encodings and pooled latents.
    pub fn field(&self, tape: &mut Tape, encoded_queries: Var, pooled: Var) -> Result<Var> {
        let x = tape.concat_cols(&[encoded_queries, pooled])?;
        self.field.forward(tape, x)
    }
}

/// Per-particle latent features, row `i` for particle `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub value: Vec<f64>,
    pub support_count: usize,
}

/// Encoder input row: grid-frame position, velocity history, tag.
pub fn encoder_input(positions: &[Vec3], history: &[Vec<Vec3>], tags: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * (4 + 3 * history.len()));
    for (i, p) in positions.iter().enumerate() {
        out.extend(p.iter());
        for frame in history {
            out.extend(frame[i].iter());
        }
        out.push(tags[i]);
    }
    out
}

/// Encode a particle set already expressed in the grid frame.
pub fn encode_points(positions: &[Vec3], history: &[Vec<Vec3>], params: &ModelParams) -> Result<PointFeatures> {
    if positions.is_empty() {
        return Err(Error::Contract("cannot encode an empty point set".into()));
    }
    let input = encoder_input(positions, history, &vec![0.0; positions.len()]);
    if input.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("non-finite encoder input".into()));
    }
    let width = input.len() / positions.len();
    if width != params.encoder_local.input_dim() {
        return Err(Error::Shape {
            op: "encode_points",
            left: vec![positions.len(), width],
            right: vec![params.encoder_local.input_dim()],
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(positions.len(), width, input)?;
    let z = bound.encode(&mut tape, x)?;
    let dim = tape.shape(z).1;
    Ok(PointFeatures { dim, rows: tape.value(z).chunks(dim).map(<[f64]>::to_vec).collect() })
}

/// Neighbour lists for radius pooling, one per query.
pub fn radius_groups(points: &[Vec3], queries: &[Vec3], r: f64) -> Vec<Vec<usize>> {
    let hash = SpatialHash::new(points, r.max(1e-9));
    queries.iter().map(|q| hash.within(q, r)).collect()
}

/// Mean feature of the particles within `r` of `query`; zero when empty.
pub fn pool_local(features: &PointFeatures, positions: &[Vec3], query: &Vec3, r: f64) -> PooledFeature {
    let members: Vec<usize> = (0..positions.len()).filter(|&i| (positions[i] - query).norm() <= r).collect();
    let mut value = vec![0.0; features.dim];
    for &i in &members {
        for (v, f) in value.iter_mut().zip(&features.rows[i]) {
            *v += f;
        }
    }
    if !members.is_empty() {
        let inv = 1.0 / members.len() as f64;
        value.iter_mut().for_each(|v| *v *= inv);
    }
    PooledFeature { value, support_count: members.len() }
}

/// Sinusoidal positional encoding, axis-major, `(sin, cos)` per frequency.
pub fn posenc(x: &Vec3, freqs: usize) -> Vec<f64> {
    posenc_rows(x.as_slice(), 3, freqs)
}

/// Evaluate the velocity field at one grid-frame location.
pub fn field_eval(query: &Vec3, pooled: &PooledFeature, params: &ModelParams, freqs: usize) -> Result<Vec3> {
    let enc = posenc(query, freqs);
    if enc.iter().chain(&pooled.value).any(|x| !x.is_finite()) {
        return Err(Error::Validation("non-finite field input".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let e = tape.constant(1, enc.len(), enc)?;
    let p = tape.constant(1, pooled.value.len(), pooled.value.clone())?;
    let v = bound.field(&mut tape, e, p)?;
    let out = tape.value(v);
    Ok(Vec3::new(out[0], out[1], out[2]))
}
