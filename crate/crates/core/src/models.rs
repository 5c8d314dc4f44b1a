//! Networks whose weights are split into shared hyper-parameters `λ` and
//! task-adapted parameters `w`.
//!
//! Every network is described by a [`SplitLayout`]: the ordered list of its
//! weight and bias segments, each tagged with the block it lives in. The
//! layout turns the `w`/`λ` graph variables handed to a
//! [`ScalarFn`](crate::autodiff::ScalarFn) back into network order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::{Error, ParamVector, Result, Tensor};

/// Which side of the network is shared across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitScheme {
    /// Everything except the output block is `λ`; the output block is `w`.
    /// For the classifier the output block is the last layer, for the VAE it
    /// is the decoder.
    #[default]
    HiddenAsHyper,
    /// The output block is `λ`, the rest is `w`.
    OutputAsHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Hyper,
    Param,
}

/// Hyper-parameters `λ` and parameters `w` of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitParams {
    pub lambda: ParamVector,
    pub w: ParamVector,
}

impl SplitParams {
    pub fn all_finite(&self) -> bool {
        self.lambda.all_finite() && self.w.all_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    role: Role,
    // index inside the role's ParamVector
    slot: usize,
}

/// Ordered network segments and their assignment to `λ` or `w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitLayout {
    entries: Vec<Entry>,
}

impl SplitLayout {
    fn new(segments: Vec<(String, Vec<usize>, Role)>) -> Self {
        let (mut h, mut p) = (0, 0);
        let entries = segments
            .into_iter()
            .map(|(name, shape, role)| {
                let slot = match role {
                    Role::Hyper => {
                        h += 1;
                        h - 1
                    }
                    Role::Param => {
                        p += 1;
                        p - 1
                    }
                };
                Entry { name, shape, role, slot }
            })
            .collect();
        SplitLayout { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn role_of(&self, name: &str) -> Option<Role> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.role)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    fn block(&self, role: Role) -> Vec<(&str, Vec<usize>)> {
        self.entries.iter().filter(|e| e.role == role).map(|e| (e.name.as_str(), e.shape.clone())).collect()
    }

    /// Zero-initialized `(λ, w)`.
    pub fn zeros(&self) -> SplitParams {
        let lambda = ParamVector::zeros(&self.block(Role::Hyper)).expect("layout names are unique");
        let w = ParamVector::zeros(&self.block(Role::Param)).expect("layout names are unique");
        SplitParams { lambda, w }
    }

    /// Fan-average uniform initialization: weights in `±sqrt(6/(fan_in+fan_out))`,
    /// biases zero. Weights are drawn in network order.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> SplitParams {
        let mut params = self.zeros();
        for e in &self.entries {
            if e.shape.len() != 2 {
                continue;
            }
            let (fan_out, fan_in) = (e.shape[0], e.shape[1]);
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let block = match e.role {
                Role::Hyper => &mut params.lambda,
                Role::Param => &mut params.w,
            };
            for v in block.segment_mut(e.slot) {
                *v = rng.random_range(-limit..limit);
            }
        }
        params
    }

    /// Graph variables in network order.
    pub fn resolve(&self, w: &[Var], lambda: &[Var]) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|e| {
                let src = match e.role {
                    Role::Hyper => lambda,
                    Role::Param => w,
                };
                src.get(e.slot).copied().ok_or_else(|| {
                    Error::shape(format!("segment `{}` missing from its parameter block", e.name))
                })
            })
            .collect()
    }

    /// Checks that `params` was produced by this layout.
    pub fn check(&self, params: &SplitParams) -> Result<()> {
        let expected = self.zeros();
        if expected.lambda.same_layout(&params.lambda) && expected.w.same_layout(&params.w) {
            Ok(())
        } else {
            Err(Error::shape("parameters do not match the model layout"))
        }
    }
}

/// Binds a `SplitParams` as graph leaves without tangents and resolves them.
fn bind_all<S: Scalar>(g: &mut Graph<S>, layout: &SplitLayout, params: &SplitParams) -> Result<Vec<Var>> {
    layout.check(params)?;
    let mut bind = |p: &ParamVector| -> Result<Vec<Var>> {
        p.segments()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (r, c) = s.matrix_dims();
                g.param(r, c, p.segment(i), None)
            })
            .collect()
    };
    let w = bind(&params.w)?;
    let l = bind(&params.lambda)?;
    layout.resolve(&w, &l)
}

/// Fully connected classifier with rectifier hidden layers and a single head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
    scheme: SplitScheme,
    layout: SplitLayout,
}

impl Mlp {
    /// `sizes = [input, hidden.., classes]`.
    pub fn new(sizes: Vec<usize>, scheme: SplitScheme) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let mut segs = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let output_block = i == last;
            let role = match (scheme, output_block) {
                (SplitScheme::HiddenAsHyper, false) | (SplitScheme::OutputAsHyper, true) => Role::Hyper,
                _ => Role::Param,
            };
            segs.push((format!("layer{i}.weight"), vec![pair[1], pair[0]], role));
            segs.push((format!("layer{i}.bias"), vec![pair[1]], role));
        }
        Ok(Mlp { sizes, scheme, layout: SplitLayout::new(segs) })
    }

    /// The 784-100-100-10 architecture.
    pub fn mnist(scheme: SplitScheme) -> Self {
        Mlp::new(vec![784, 100, 100, 10], scheme).expect("static sizes are valid")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn scheme(&self) -> SplitScheme {
        self.scheme
    }

    pub fn layout(&self) -> &SplitLayout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn init_params(&self, seed: u64) -> SplitParams {
        self.layout.init(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Logits for `x: [n, input]`, given the network-ordered segment variables.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, net: &[Var], x: Var) -> Result<Var> {
        let (_, d) = g.dims(x);
        if d != self.input_dim() {
            return Err(Error::shape(format!("input width {d}, network expects {}", self.input_dim())));
        }
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for i in 0..layers {
            h = g.linear(h, net[2 * i], Some(net[2 * i + 1]))?;
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Logits for every row of `x` (shape `[n, input]` or `[input]`).
    pub fn logits(&self, params: &SplitParams, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f64>::new();
        let net = bind_all(&mut g, &self.layout, params)?;
        let xv = g.input(x.rows(), x.cols(), x.data())?;
        let out = self.forward(&mut g, &net, xv)?;
        let (n, k) = g.dims(out);
        Tensor::matrix(n, k, g.values_f64(out))
    }

    /// Arg-max class per row.
    pub fn predict(&self, params: &SplitParams, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(params, x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Convenience wrapper matching the free-function form: `(λ, w)` for an MLP.
pub fn init_params(layer_sizes: &[usize], scheme: SplitScheme, seed: u64) -> Result<SplitParams> {
    Ok(Mlp::new(layer_sizes.to_vec(), scheme)?.init_params(seed))
}

/// Logits of a single input vector.
pub fn mlp_forward(model: &Mlp, params: &SplitParams, x: &Tensor) -> Result<Tensor> {
    model.logits(params, x)
}

/// Diagonal Gaussian `q(z|x)` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = μ + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize(lat: &GaussianLatent, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != lat.dim() || lat.log_var.len() != lat.dim() {
        return Err(Error::shape(format!("noise of length {} for latent dim {}", noise.len(), lat.dim())));
    }
    Ok(lat
        .mu
        .iter()
        .zip(&lat.log_var)
        .zip(noise)
        .map(|((m, lv), n)| m + libm::exp(0.5 * lv) * n)
        .collect())
}

/// Fully connected VAE with Bernoulli decoder.
///
/// Segments: `enc{i}` hidden layers, `enc.mu`, `enc.logvar`, `dec{i}` hidden
/// layers, `dec.out`. Under [`SplitScheme::OutputAsHyper`] (the default for
/// generative runs) the decoder is shared `λ` and the encoder is the
/// task-adapted `w`; [`SplitScheme::HiddenAsHyper`] swaps the two. The decoder
/// is treated as a single shared block, without per-task heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vae {
    input_dim: usize,
    encoder_hidden: Vec<usize>,
    latent_dim: usize,
    decoder_hidden: Vec<usize>,
    scheme: SplitScheme,
    layout: SplitLayout,
}

impl Vae {
    pub fn new(
        input_dim: usize,
        encoder_hidden: Vec<usize>,
        latent_dim: usize,
        decoder_hidden: Vec<usize>,
        scheme: SplitScheme,
    ) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || encoder_hidden.contains(&0) || decoder_hidden.contains(&0) {
            return Err(Error::invalid("VAE sizes must be positive"));
        }
        let (enc_role, dec_role) = match scheme {
            SplitScheme::OutputAsHyper => (Role::Param, Role::Hyper),
            SplitScheme::HiddenAsHyper => (Role::Hyper, Role::Param),
        };
        let mut segs = Vec::new();
        let mut prev = input_dim;
        for (i, &h) in encoder_hidden.iter().enumerate() {
            segs.push((format!("enc{i}.weight"), vec![h, prev], enc_role));
            segs.push((format!("enc{i}.bias"), vec![h], enc_role));
            prev = h;
        }
        for head in ["enc.mu", "enc.logvar"] {
            segs.push((format!("{head}.weight"), vec![latent_dim, prev], enc_role));
            segs.push((format!("{head}.bias"), vec![latent_dim], enc_role));
        }
        prev = latent_dim;
        for (i, &h) in decoder_hidden.iter().enumerate() {
            segs.push((format!("dec{i}.weight"), vec![h, prev], dec_role));
            segs.push((format!("dec{i}.bias"), vec![h], dec_role));
            prev = h;
        }
        segs.push(("dec.out.weight".into(), vec![input_dim, prev], dec_role));
        segs.push(("dec.out.bias".into(), vec![input_dim], dec_role));
        Ok(Vae { input_dim, encoder_hidden, latent_dim, decoder_hidden, scheme, layout: SplitLayout::new(segs) })
    }

    /// Desk-scale MNIST VAE: 784-128-(8) encoder, 8-128-784 decoder.
    pub fn desk(scheme: SplitScheme) -> Self {
        Vae::new(784, vec![128], 8, vec![128], scheme).expect("static sizes are valid")
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encoder_hidden(&self) -> &[usize] {
        &self.encoder_hidden
    }

    pub fn decoder_hidden(&self) -> &[usize] {
        &self.decoder_hidden
    }

    pub fn scheme(&self) -> SplitScheme {
        self.scheme
    }

    pub fn layout(&self) -> &SplitLayout {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> SplitParams {
        self.layout.init(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn encoder_segments(&self) -> usize {
        2 * self.encoder_hidden.len() + 4
    }

    /// `(μ, log σ²)` for `x: [n, input]`.
    pub fn encode_graph<S: Scalar>(&self, g: &mut Graph<S>, net: &[Var], x: Var) -> Result<(Var, Var)> {
        let (_, d) = g.dims(x);
        if d != self.input_dim {
            return Err(Error::shape(format!("input width {d}, VAE expects {}", self.input_dim)));
        }
        let mut h = x;
        for i in 0..self.encoder_hidden.len() {
            h = g.linear(h, net[2 * i], Some(net[2 * i + 1]))?;
            h = g.relu(h);
        }
        let k = 2 * self.encoder_hidden.len();
        let mu = g.linear(h, net[k], Some(net[k + 1]))?;
        let log_var = g.linear(h, net[k + 2], Some(net[k + 3]))?;
        Ok((mu, log_var))
    }

    /// Decoder logits for `z: [n, latent]`; means are their logistic.
    pub fn decode_logits_graph<S: Scalar>(&self, g: &mut Graph<S>, net: &[Var], z: Var) -> Result<Var> {
        let (_, d) = g.dims(z);
        if d != self.latent_dim {
            return Err(Error::shape(format!("latent width {d}, VAE expects {}", self.latent_dim)));
        }
        let base = self.encoder_segments();
        let mut h = z;
        for i in 0..self.decoder_hidden.len() {
            h = g.linear(h, net[base + 2 * i], Some(net[base + 2 * i + 1]))?;
            h = g.relu(h);
        }
        let k = base + 2 * self.decoder_hidden.len();
        g.linear(h, net[k], Some(net[k + 1]))
    }

    /// `z = μ + exp(log_var/2) ⊙ noise` inside the graph.
    pub fn reparameterize_graph<S: Scalar>(&self, g: &mut Graph<S>, mu: Var, log_var: Var, noise: Var) -> Result<Var> {
        let half = g.scale(log_var, 0.5);
        let sd = g.exp(half);
        let eps = g.mul(sd, noise)?;
        g.add(mu, eps)
    }

    /// Encodes each row of `x`.
    pub fn encode(&self, params: &SplitParams, x: &Tensor) -> Result<Vec<GaussianLatent>> {
        let mut g = Graph::<f64>::new();
        let net = bind_all(&mut g, &self.layout, params)?;
        let xv = g.input(x.rows(), x.cols(), x.data())?;
        let (mu, lv) = self.encode_graph(&mut g, &net, xv)?;
        let (m, l) = (g.values_f64(mu), g.values_f64(lv));
        let d = self.latent_dim;
        Ok((0..x.rows())
            .map(|r| GaussianLatent { mu: m[r * d..(r + 1) * d].to_vec(), log_var: l[r * d..(r + 1) * d].to_vec() })
            .collect())
    }

    /// Bernoulli means for each row of `z: [n, latent]`.
    pub fn decode(&self, params: &SplitParams, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f64>::new();
        let net = bind_all(&mut g, &self.layout, params)?;
        let zv = g.input(z.rows(), z.cols(), z.data())?;
        let logits = self.decode_logits_graph(&mut g, &net, zv)?;
        let means = g.sigmoid(logits);
        Tensor::matrix(z.rows(), self.input_dim, g.values_f64(means))
    }

    /// Decoder logits for each row of `z`.
    pub fn decode_logits(&self, params: &SplitParams, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f64>::new();
        let net = bind_all(&mut g, &self.layout, params)?;
        let zv = g.input(z.rows(), z.cols(), z.data())?;
        let logits = self.decode_logits_graph(&mut g, &net, zv)?;
        Tensor::matrix(z.rows(), self.input_dim, g.values_f64(logits))
    }
}

/// `q(z|x)` for one input.
pub fn vae_encode(model: &Vae, params: &SplitParams, x: &[f64]) -> Result<GaussianLatent> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(model.encode(params, &t)?.remove(0))
}

/// Bernoulli means for one latent vector.
pub fn vae_decode(model: &Vae, params: &SplitParams, z: &[f64]) -> Result<Tensor> {
    let t = Tensor::matrix(1, z.len(), z.to_vec())?;
    model.decode(params, &t)
}
