//! Model assemblies and their loss terms.
//!
//! Three trainable models share one inference column (shared encoder feeding
//! a quality regressor):
//!
//! - [`SsvaerModel`]: semi-supervised variational regressor. Six
//!   subnetworks; the loss couples consecutive records through a pseudo
//!   variation regressor and a latent generator conditioned on
//!   `(y, delta-y)`.
//! - [`SvaerModel`]: supervised variational regressor whose latent prior
//!   mean is a unit direction scaled by the regressed quality variable.
//! - [`FcnnModel`]: the bare inference column trained with mean squared
//!   error on labelled rows.
//!
//! Losses are assembled on a [`Graph`] per batch; every term is stored as a
//! positive penalty and the total is the weighted signed combination (the
//! entropy term enters negatively by default).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Param, Tensor};
use crate::dataset::{Matrix, SampleBatch};
use crate::error::{Error, Result};
use crate::nn::{init_mlp, mlp_forward, Activation, BoundMlp, HeadKind, Mlp, MlpSpec};
use crate::variational::{
    entropy_contrib, kl_contrib, nll_contrib, reparameterize, DiagGaussian,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ssvaer,
    Svaer,
    Fcnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssvaer" => Ok(ModelKind::Ssvaer),
            "svaer" => Ok(ModelKind::Svaer),
            "fcnn" => Ok(ModelKind::Fcnn),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ssvaer => "ssvaer",
            ModelKind::Svaer => "svaer",
            ModelKind::Fcnn => "fcnn",
        }
    }
}

/// Layer-size lists for every subnetwork. Each list includes its input width
/// as the first entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSizes {
    pub shared: Vec<usize>,
    pub latent: Vec<usize>,
    pub regressor: Vec<usize>,
    pub generator: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl ModelSizes {
    /// Sizes with the decoder derived by mirroring the shared encoder from
    /// the latent width back up to the input width.
    pub fn with_default_decoder(
        shared: Vec<usize>,
        latent: Vec<usize>,
        regressor: Vec<usize>,
        generator: Vec<usize>,
    ) -> Self {
        let nz = *latent.last().expect("latent sizes nonempty");
        let mut decoder = vec![nz];
        decoder.extend(shared.iter().rev());
        ModelSizes {
            shared,
            latent,
            regressor,
            generator,
            decoder,
        }
    }

    pub fn nz(&self) -> usize {
        *self.latent.last().unwrap()
    }

    pub fn input_width(&self) -> usize {
        self.shared[0]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, sizes) in [
            ("shared", &self.shared),
            ("latent", &self.latent),
            ("regressor", &self.regressor),
            ("generator", &self.generator),
            ("decoder", &self.decoder),
        ] {
            if sizes.len() < 2 {
                return Err(Error::Config(format!(
                    "{name} sizes need at least two entries, got {sizes:?}"
                )));
            }
            if sizes.contains(&0) {
                return Err(Error::Config(format!(
                    "{name} sizes must be positive, got {sizes:?}"
                )));
            }
        }
        let feat = *self.shared.last().unwrap();
        if self.latent[0] != feat || self.regressor[0] != feat {
            return Err(Error::Config(format!(
                "sizes do not chain: shared output {} must equal latent input {} and regressor input {}",
                feat, self.latent[0], self.regressor[0]
            )));
        }
        if *self.regressor.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "regressor must output one value, got {:?}",
                self.regressor
            )));
        }
        if self.generator[0] != 2 {
            return Err(Error::Config(format!(
                "latent generator input width must be 2 (quality variable and its pseudo variation), got {:?}",
                self.generator
            )));
        }
        if *self.generator.last().unwrap() != self.nz() {
            return Err(Error::Config(format!(
                "latent generator output {} must equal latent width {}",
                self.generator.last().unwrap(),
                self.nz()
            )));
        }
        if self.decoder[0] != self.nz() {
            return Err(Error::Config(format!(
                "decoder input {} must equal latent width {}",
                self.decoder[0],
                self.nz()
            )));
        }
        if *self.decoder.last().unwrap() != self.input_width() {
            return Err(Error::Config(format!(
                "decoder output {} must equal input width {}",
                self.decoder.last().unwrap(),
                self.input_width()
            )));
        }
        Ok(())
    }
}

/// Multipliers applied to each loss term in the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub rec: f64,
    pub kl: f64,
    pub label: f64,
    pub entropy: f64,
    pub pv: f64,
    pub recon_reg: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            rec: 1.0,
            kl: 1.0,
            label: 1.0,
            entropy: 1.0,
            pv: 1.0,
            recon_reg: 1.0,
        }
    }
}

/// Sign of the entropy term in the minimized total.
///
/// `Minimize` (the default) adds the entropy as a penalty, driving confident
/// predictions on unlabelled rows. `Elbo` subtracts it instead, which is the
/// literal unlabelled-bound reading; with a Gaussian quality posterior that
/// direction is unbounded - it inflates the predicted variance to the clamp
/// and flattens the label loss, so it is available only behind this flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropySign {
    Elbo,
    Minimize,
}

impl EntropySign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(EntropySign::Elbo),
            "minimize" => Ok(EntropySign::Minimize),
            other => Err(Error::Config(format!("unknown entropy sign `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EntropySign::Elbo => "elbo",
            EntropySign::Minimize => "minimize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: TermWeights,
    pub entropy_sign: EntropySign,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: TermWeights::default(),
            entropy_sign: EntropySign::Minimize,
        }
    }
}

/// Scalar values of the named loss terms (unweighted) plus the weighted
/// total that was minimized.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub rec: f64,
    pub kl: f64,
    pub label: f64,
    pub entropy: f64,
    pub pv: f64,
    pub recon_reg: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn all_finite(&self) -> bool {
        [
            self.rec,
            self.kl,
            self.label,
            self.entropy,
            self.pv,
            self.recon_reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A loss assembled on a graph: the differentiable total plus the extracted
/// term values.
pub struct LossBuild {
    pub total: Tensor,
    pub terms: LossTerms,
}

/// Reparameterization noise for one batch, drawn up front so loss builders
/// stay deterministic functions of their inputs.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    /// Latent-sample noise, `batch x nz`.
    pub z: Vec<f64>,
    /// Quality-sample noise, `batch x 1`.
    pub y: Vec<f64>,
    /// Generated-latent-sample noise, `batch x nz`.
    pub zy: Vec<f64>,
}

impl NoiseDraw {
    pub fn zeros(batch: usize, nz: usize) -> Self {
        NoiseDraw {
            z: vec![0.0; batch * nz],
            y: vec![0.0; batch],
            zy: vec![0.0; batch * nz],
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, batch: usize, nz: usize) -> Self {
        NoiseDraw {
            z: standard_normal(rng, batch * nz),
            y: standard_normal(rng, batch),
            zy: standard_normal(rng, batch * nz),
        }
    }
}

/// Box-Muller standard normals from a seeded generator.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    out
}

fn mixed_seed(seed: u64, stream: u64) -> u64 {
    // splitmix-style stream separation
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15_u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// SSVAER
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SsvaerModel {
    pub shared: Mlp,
    pub latent_enc: Mlp,
    pub q_reg: Mlp,
    pub pv_reg: Mlp,
    pub latent_gen: Mlp,
    pub decoder: Mlp,
    pub sizes: ModelSizes,
}

pub struct SsvaerBinding {
    shared: BoundMlp,
    latent_enc: BoundMlp,
    q_reg: BoundMlp,
    pv_reg: BoundMlp,
    latent_gen: BoundMlp,
    decoder: BoundMlp,
}

impl SsvaerModel {
    pub fn new(sizes: &ModelSizes, activation: Activation, seed: u64) -> Result<Self> {
        sizes.validate()?;
        let spec = |s: &[usize], heads| MlpSpec::new(s.to_vec(), activation, heads);
        Ok(SsvaerModel {
            shared: init_mlp(&spec(&sizes.shared, HeadKind::None)?, mixed_seed(seed, 0), "shared"),
            latent_enc: init_mlp(&spec(&sizes.latent, HeadKind::Dual)?, mixed_seed(seed, 1), "latent_enc"),
            q_reg: init_mlp(&spec(&sizes.regressor, HeadKind::Dual)?, mixed_seed(seed, 2), "q_reg"),
            pv_reg: init_mlp(&spec(&sizes.regressor, HeadKind::Single)?, mixed_seed(seed, 3), "pv_reg"),
            latent_gen: init_mlp(&spec(&sizes.generator, HeadKind::Dual)?, mixed_seed(seed, 4), "latent_gen"),
            decoder: init_mlp(&spec(&sizes.decoder, HeadKind::Dual)?, mixed_seed(seed, 5), "decoder"),
            sizes: sizes.clone(),
        })
    }

    fn networks(&self) -> [&Mlp; 6] {
        [
            &self.shared,
            &self.latent_enc,
            &self.q_reg,
            &self.pv_reg,
            &self.latent_gen,
            &self.decoder,
        ]
    }

    pub fn params(&self) -> Vec<&Param> {
        self.networks().iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        out.extend(self.shared.params_mut());
        out.extend(self.latent_enc.params_mut());
        out.extend(self.q_reg.params_mut());
        out.extend(self.pv_reg.params_mut());
        out.extend(self.latent_gen.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph, registry: &mut Vec<Tensor>) -> Result<SsvaerBinding> {
        Ok(SsvaerBinding {
            shared: self.shared.bind(g, registry)?,
            latent_enc: self.latent_enc.bind(g, registry)?,
            q_reg: self.q_reg.bind(g, registry)?,
            pv_reg: self.pv_reg.bind(g, registry)?,
            latent_gen: self.latent_gen.bind(g, registry)?,
            decoder: self.decoder.bind(g, registry)?,
        })
    }

    /// Rebuild a binding from leaves laid out in [`SsvaerModel::params`] order.
    pub fn rebind(&self, leaves: &[Tensor]) -> SsvaerBinding {
        let mut cursor = 0;
        SsvaerBinding {
            shared: self.shared.rebind(leaves, &mut cursor),
            latent_enc: self.latent_enc.rebind(leaves, &mut cursor),
            q_reg: self.q_reg.rebind(leaves, &mut cursor),
            pv_reg: self.pv_reg.rebind(leaves, &mut cursor),
            latent_gen: self.latent_gen.rebind(leaves, &mut cursor),
            decoder: self.decoder.rebind(leaves, &mut cursor),
        }
    }
}

/// Tensors of interest from one SSVAER forward pass. The `*_raw` handles on
/// the successor branch sit in front of their stop-gradient wrappers; tests
/// assert they receive exactly zero gradient.
pub struct SsvaerForward {
    pub x_t: Tensor,
    pub x_next: Tensor,
    pub q_z: DiagGaussian,
    pub z_sample: Tensor,
    pub q_y: DiagGaussian,
    pub y_hat: Tensor,
    pub dy_t: Tensor,
    pub prior_t: DiagGaussian,
    pub h_next: Tensor,
    pub z_next_mean_raw: Tensor,
    pub z_next_logvar_raw: Tensor,
    pub dy_next_raw: Tensor,
    pub target_next: DiagGaussian,
    pub prior_next: DiagGaussian,
    pub dec_t: DiagGaussian,
    pub z_y_sample: Tensor,
    pub dec_reg: DiagGaussian,
}

/// Column-concatenate two `batch x 1` tensors into `batch x 2` using constant
/// selector rows.
fn concat_two_cols(g: &mut Graph, a: Tensor, b: Tensor) -> Result<Tensor> {
    let sel_a = g.leaf(&[1, 2], vec![1.0, 0.0])?;
    let sel_b = g.leaf(&[1, 2], vec![0.0, 1.0])?;
    let left = g.matmul(a, sel_a)?;
    let right = g.matmul(b, sel_b)?;
    g.add(left, right)
}

fn batch_leaves(g: &mut Graph, batch: &SampleBatch) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let b = batch.len();
    let w = batch.x_t.cols;
    let x_t = g.leaf(&[b, w], batch.x_t.data.clone())?;
    let x_next = g.leaf(&[b, w], batch.x_next.data.clone())?;
    let y = g.leaf(&[b, 1], batch.y.clone())?;
    let mask_l: Vec<f64> = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask_u: Vec<f64> = mask_l.iter().map(|m| 1.0 - m).collect();
    let mask_l = g.leaf(&[b, 1], mask_l)?;
    let mask_u = g.leaf(&[b, 1], mask_u)?;
    Ok((x_t, x_next, y, mask_l, mask_u))
}

/// Mean of per-entry contributions over a masked row subset. `count` is the
/// number of selected rows; callers skip the term when it is zero.
fn masked_mean(g: &mut Graph, contrib: Tensor, mask_col: Tensor, count: usize) -> Result<Tensor> {
    let masked = g.mul(contrib, mask_col)?;
    let total = g.sum(masked)?;
    g.scale(total, 1.0 / count as f64)
}

/// Mean over the whole batch of per-entry contributions.
fn batch_mean(g: &mut Graph, contrib: Tensor, batch_rows: usize) -> Result<Tensor> {
    let total = g.sum(contrib)?;
    g.scale(total, 1.0 / batch_rows as f64)
}

/// The full SSVAER forward pass for one batch.
pub fn ssvaer_forward(
    g: &mut Graph,
    model: &SsvaerModel,
    bound: &SsvaerBinding,
    x_t: Tensor,
    x_next: Tensor,
    noise: &NoiseDraw,
) -> Result<SsvaerForward> {
    let b = g.shape(x_t)[0];
    let nz = model.sizes.nz();

    // Current record: shared features, latent posterior, quality posterior,
    // pseudo variation.
    let (h_t, _) = mlp_forward(g, &model.shared, &bound.shared, x_t, false)?;
    let (z_mean, z_logvar) = mlp_forward(g, &model.latent_enc, &bound.latent_enc, h_t, false)?;
    let q_z = DiagGaussian::new(g, z_mean, z_logvar.expect("latent encoder is dual-head"))?;
    let noise_z = g.leaf(&[b, nz], noise.z.clone())?;
    let z_sample = reparameterize(g, &q_z, noise_z)?;

    let (y_mean, y_logvar) = mlp_forward(g, &model.q_reg, &bound.q_reg, h_t, false)?;
    let q_y = DiagGaussian::new(g, y_mean, y_logvar.expect("quality regressor is dual-head"))?;
    let noise_y = g.leaf(&[b, 1], noise.y.clone())?;
    let y_hat = reparameterize(g, &q_y, noise_y)?;

    let (dy_t, _) = mlp_forward(g, &model.pv_reg, &bound.pv_reg, h_t, false)?;

    // Conditioned latent prior for the current record.
    let gen_in_t = concat_two_cols(g, y_hat, dy_t)?;
    let (g_mean_t, g_logvar_t) = mlp_forward(g, &model.latent_gen, &bound.latent_gen, gen_in_t, false)?;
    let prior_t = DiagGaussian::new(g, g_mean_t, g_logvar_t.expect("latent generator is dual-head"))?;

    // Successor record. The posterior target and the successor pseudo
    // variation are stop-gradiented: the successor is trained in its own
    // future step, so its branch must contribute no gradient here.
    let (h_next, _) = mlp_forward(g, &model.shared, &bound.shared, x_next, false)?;
    let (zn_mean_raw, zn_logvar_raw) =
        mlp_forward(g, &model.latent_enc, &bound.latent_enc, h_next, false)?;
    let zn_logvar_raw = zn_logvar_raw.expect("latent encoder is dual-head");
    let zn_mean = g.stop_grad(zn_mean_raw);
    let zn_logvar = g.stop_grad(zn_logvar_raw);
    let target_next = DiagGaussian::new(g, zn_mean, zn_logvar)?;

    let (dy_next_raw, _) = mlp_forward(g, &model.pv_reg, &bound.pv_reg, h_next, false)?;
    let dy_next = g.stop_grad(dy_next_raw);

    let y_plus = g.add(y_hat, dy_t)?;
    let gen_in_next = concat_two_cols(g, y_plus, dy_next)?;
    let (g_mean_n, g_logvar_n) =
        mlp_forward(g, &model.latent_gen, &bound.latent_gen, gen_in_next, false)?;
    let prior_next = DiagGaussian::new(g, g_mean_n, g_logvar_n.expect("latent generator is dual-head"))?;

    // Reconstruction of the current record from the encoded latent sample.
    let (x_mean, x_logvar) = mlp_forward(g, &model.decoder, &bound.decoder, z_sample, false)?;
    let dec_t = DiagGaussian::new(g, x_mean, x_logvar.expect("decoder is dual-head"))?;

    // Reconstruction through the generated latent; the decoder weights are
    // detached so this term trains only the inference side.
    let noise_zy = g.leaf(&[b, nz], noise.zy.clone())?;
    let z_y_sample = reparameterize(g, &prior_t, noise_zy)?;
    let (r_mean, r_logvar) = mlp_forward(g, &model.decoder, &bound.decoder, z_y_sample, true)?;
    let dec_reg = DiagGaussian::new(g, r_mean, r_logvar.expect("decoder is dual-head"))?;

    Ok(SsvaerForward {
        x_t,
        x_next,
        q_z,
        z_sample,
        q_y,
        y_hat,
        dy_t,
        prior_t,
        h_next,
        z_next_mean_raw: zn_mean_raw,
        z_next_logvar_raw: zn_logvar_raw,
        dy_next_raw,
        target_next,
        prior_next,
        dec_t,
        z_y_sample,
        dec_reg,
    })
}

struct TermAccum {
    total: Option<Tensor>,
}

impl TermAccum {
    fn new() -> Self {
        TermAccum { total: None }
    }

    fn push(&mut self, g: &mut Graph, term: Tensor, weight: f64) -> Result<()> {
        let scaled = g.scale(term, weight)?;
        self.total = Some(match self.total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    }

    fn finish(self, g: &mut Graph) -> Tensor {
        self.total.unwrap_or_else(|| g.constant(0.0))
    }
}

/// Shared assembly of the label (labelled rows) and entropy (unlabelled
/// rows) terms.
fn label_entropy_terms(
    g: &mut Graph,
    q_y: &DiagGaussian,
    y: Tensor,
    mask_l: Tensor,
    mask_u: Tensor,
    n_labelled: usize,
    n_unlabelled: usize,
) -> Result<(Tensor, Tensor)> {
    let label = if n_labelled > 0 {
        let contrib = nll_contrib(g, q_y, y)?;
        masked_mean(g, contrib, mask_l, n_labelled)?
    } else {
        g.constant(0.0)
    };
    let entropy = if n_unlabelled > 0 {
        let contrib = entropy_contrib(g, q_y)?;
        masked_mean(g, contrib, mask_u, n_unlabelled)?
    } else {
        g.constant(0.0)
    };
    Ok((label, entropy))
}

/// All six SSVAER loss terms for one batch, with the weighted total.
pub fn ssvaer_loss_terms(
    g: &mut Graph,
    model: &SsvaerModel,
    bound: &SsvaerBinding,
    batch: &SampleBatch,
    noise: &NoiseDraw,
    opts: &LossOptions,
) -> Result<LossBuild> {
    let (fwd, build) = ssvaer_forward_and_terms(g, model, bound, batch, noise, opts)?;
    let _ = fwd;
    Ok(build)
}

/// Like [`ssvaer_loss_terms`] but also returns the forward handles, for tests
/// asserting on the gradient structure.
pub fn ssvaer_forward_and_terms(
    g: &mut Graph,
    model: &SsvaerModel,
    bound: &SsvaerBinding,
    batch: &SampleBatch,
    noise: &NoiseDraw,
    opts: &LossOptions,
) -> Result<(SsvaerForward, LossBuild)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let b = batch.len();
    let n_l = batch.n_labelled();
    let n_u = b - n_l;

    let (x_t, x_next, y, mask_l, mask_u) = batch_leaves(g, batch)?;
    let fwd = ssvaer_forward(g, model, bound, x_t, x_next, noise)?;

    let rec_contrib = nll_contrib(g, &fwd.dec_t, x_t)?;
    let rec = batch_mean(g, rec_contrib, b)?;

    let kl_c = kl_contrib(g, &fwd.q_z, &fwd.prior_t)?;
    let kl = batch_mean(g, kl_c, b)?;

    let pv_c = kl_contrib(g, &fwd.target_next, &fwd.prior_next)?;
    let pv = batch_mean(g, pv_c, b)?;

    let (label, entropy) = label_entropy_terms(g, &fwd.q_y, y, mask_l, mask_u, n_l, n_u)?;

    let rr_contrib = nll_contrib(g, &fwd.dec_reg, x_t)?;
    let recon_reg = batch_mean(g, rr_contrib, b)?;

    let w = &opts.weights;
    let entropy_weight = match opts.entropy_sign {
        EntropySign::Elbo => -w.entropy,
        EntropySign::Minimize => w.entropy,
    };
    let mut acc = TermAccum::new();
    acc.push(g, rec, w.rec)?;
    acc.push(g, kl, w.kl)?;
    acc.push(g, pv, w.pv)?;
    acc.push(g, label, w.label)?;
    acc.push(g, entropy, entropy_weight)?;
    acc.push(g, recon_reg, w.recon_reg)?;
    let total = acc.finish(g);

    let terms = LossTerms {
        rec: g.scalar(rec),
        kl: g.scalar(kl),
        label: g.scalar(label),
        entropy: g.scalar(entropy),
        pv: g.scalar(pv),
        recon_reg: g.scalar(recon_reg),
        total: g.scalar(total),
    };
    Ok((fwd, LossBuild { total, terms }))
}

// ---------------------------------------------------------------------------
// SVAER
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SvaerModel {
    pub shared: Mlp,
    pub latent_enc: Mlp,
    pub q_reg: Mlp,
    pub decoder: Mlp,
    /// Unit direction mapping the regressed quality variable into the latent
    /// space; renormalized after every optimizer step.
    pub w_dir: Param,
    pub sizes: ModelSizes,
}

pub struct SvaerBinding {
    shared: BoundMlp,
    latent_enc: BoundMlp,
    q_reg: BoundMlp,
    decoder: BoundMlp,
    w_dir: Tensor,
}

impl SvaerModel {
    pub fn new(sizes: &ModelSizes, activation: Activation, seed: u64) -> Result<Self> {
        sizes.validate()?;
        let spec = |s: &[usize], heads| MlpSpec::new(s.to_vec(), activation, heads);
        let nz = sizes.nz();
        let mut rng = ChaCha8Rng::seed_from_u64(mixed_seed(seed, 6));
        let mut w: Vec<f64> = (0..nz).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        w.iter_mut().for_each(|v| *v /= norm);
        Ok(SvaerModel {
            shared: init_mlp(&spec(&sizes.shared, HeadKind::None)?, mixed_seed(seed, 0), "shared"),
            latent_enc: init_mlp(&spec(&sizes.latent, HeadKind::Dual)?, mixed_seed(seed, 1), "latent_enc"),
            q_reg: init_mlp(&spec(&sizes.regressor, HeadKind::Dual)?, mixed_seed(seed, 2), "q_reg"),
            decoder: init_mlp(&spec(&sizes.decoder, HeadKind::Dual)?, mixed_seed(seed, 5), "decoder"),
            w_dir: Param::new("w_dir", vec![1, nz], w),
            sizes: sizes.clone(),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        out.extend(self.shared.params());
        out.extend(self.latent_enc.params());
        out.extend(self.q_reg.params());
        out.extend(self.decoder.params());
        out.push(&self.w_dir);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.extend(self.shared.params_mut());
        out.extend(self.latent_enc.params_mut());
        out.extend(self.q_reg.params_mut());
        out.extend(self.decoder.params_mut());
        out.push(&mut self.w_dir);
        out
    }

    pub fn bind(&self, g: &mut Graph, registry: &mut Vec<Tensor>) -> Result<SvaerBinding> {
        let shared = self.shared.bind(g, registry)?;
        let latent_enc = self.latent_enc.bind(g, registry)?;
        let q_reg = self.q_reg.bind(g, registry)?;
        let decoder = self.decoder.bind(g, registry)?;
        let w_dir = g.leaf_param(&self.w_dir)?;
        registry.push(w_dir);
        Ok(SvaerBinding {
            shared,
            latent_enc,
            q_reg,
            decoder,
            w_dir,
        })
    }

    pub fn rebind(&self, leaves: &[Tensor]) -> SvaerBinding {
        let mut cursor = 0;
        let shared = self.shared.rebind(leaves, &mut cursor);
        let latent_enc = self.latent_enc.rebind(leaves, &mut cursor);
        let q_reg = self.q_reg.rebind(leaves, &mut cursor);
        let decoder = self.decoder.rebind(leaves, &mut cursor);
        let w_dir = leaves[cursor];
        SvaerBinding {
            shared,
            latent_enc,
            q_reg,
            decoder,
            w_dir,
        }
    }

    /// Project the latent direction back onto the unit sphere.
    pub fn renormalize_w(&mut self) {
        let norm = self
            .w_dir
            .values
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        self.w_dir.values.iter_mut().for_each(|v| *v /= norm);
    }

    pub fn w_norm(&self) -> f64 {
        self.w_dir.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// SVAER loss terms: reconstruction, KL against the direction prior, and the
/// label/entropy pair. The pseudo-variation and reconstruction-regularizer
/// slots stay zero.
pub fn svaer_loss_terms(
    g: &mut Graph,
    model: &SvaerModel,
    bound: &SvaerBinding,
    batch: &SampleBatch,
    noise: &NoiseDraw,
    opts: &LossOptions,
) -> Result<LossBuild> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let b = batch.len();
    let nz = model.sizes.nz();
    let n_l = batch.n_labelled();
    let n_u = b - n_l;

    let (x_t, _x_next, y, mask_l, mask_u) = batch_leaves(g, batch)?;

    let (h_t, _) = mlp_forward(g, &model.shared, &bound.shared, x_t, false)?;
    let (z_mean, z_logvar) = mlp_forward(g, &model.latent_enc, &bound.latent_enc, h_t, false)?;
    let q_z = DiagGaussian::new(g, z_mean, z_logvar.expect("latent encoder is dual-head"))?;
    let noise_z = g.leaf(&[b, nz], noise.z.clone())?;
    let z_sample = reparameterize(g, &q_z, noise_z)?;

    let (y_mean, y_logvar) = mlp_forward(g, &model.q_reg, &bound.q_reg, h_t, false)?;
    let q_y = DiagGaussian::new(g, y_mean, y_logvar.expect("quality regressor is dual-head"))?;
    let noise_y = g.leaf(&[b, 1], noise.y.clone())?;
    let y_hat = reparameterize(g, &q_y, noise_y)?;

    // Prior over the latent space: mean along the unit direction scaled by
    // the sampled quality variable, variance the regressor's predicted
    // variance broadcast to every latent dimension.
    let prior_mean = g.matmul(y_hat, bound.w_dir)?;
    let prior_logvar = g.broadcast_to(q_y.logvar, &[b, nz])?;
    let prior = DiagGaussian::new(g, prior_mean, prior_logvar)?;

    let (x_mean, x_logvar) = mlp_forward(g, &model.decoder, &bound.decoder, z_sample, false)?;
    let dec = DiagGaussian::new(g, x_mean, x_logvar.expect("decoder is dual-head"))?;

    let rec_contrib = nll_contrib(g, &dec, x_t)?;
    let rec = batch_mean(g, rec_contrib, b)?;
    let kl_c = kl_contrib(g, &q_z, &prior)?;
    let kl = batch_mean(g, kl_c, b)?;
    let (label, entropy) = label_entropy_terms(g, &q_y, y, mask_l, mask_u, n_l, n_u)?;

    let w = &opts.weights;
    let entropy_weight = match opts.entropy_sign {
        EntropySign::Elbo => -w.entropy,
        EntropySign::Minimize => w.entropy,
    };
    let mut acc = TermAccum::new();
    acc.push(g, rec, w.rec)?;
    acc.push(g, kl, w.kl)?;
    acc.push(g, label, w.label)?;
    acc.push(g, entropy, entropy_weight)?;
    let total = acc.finish(g);

    let terms = LossTerms {
        rec: g.scalar(rec),
        kl: g.scalar(kl),
        label: g.scalar(label),
        entropy: g.scalar(entropy),
        pv: 0.0,
        recon_reg: 0.0,
        total: g.scalar(total),
    };
    Ok(LossBuild { total, terms })
}

// ---------------------------------------------------------------------------
// FCNN baseline
// ---------------------------------------------------------------------------

/// The bare inference column: shared encoder into a single-head regressor.
#[derive(Debug, Clone)]
pub struct FcnnModel {
    pub shared: Mlp,
    pub reg: Mlp,
    pub sizes: ModelSizes,
}

pub struct FcnnBinding {
    shared: BoundMlp,
    reg: BoundMlp,
}

impl FcnnModel {
    pub fn new(sizes: &ModelSizes, activation: Activation, seed: u64) -> Result<Self> {
        sizes.validate()?;
        let spec = |s: &[usize], heads| MlpSpec::new(s.to_vec(), activation, heads);
        Ok(FcnnModel {
            shared: init_mlp(&spec(&sizes.shared, HeadKind::None)?, mixed_seed(seed, 0), "shared"),
            reg: init_mlp(&spec(&sizes.regressor, HeadKind::Single)?, mixed_seed(seed, 2), "reg"),
            sizes: sizes.clone(),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.shared.params();
        out.extend(self.reg.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.shared.params_mut();
        out.extend(self.reg.params_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph, registry: &mut Vec<Tensor>) -> Result<FcnnBinding> {
        Ok(FcnnBinding {
            shared: self.shared.bind(g, registry)?,
            reg: self.reg.bind(g, registry)?,
        })
    }

    pub fn rebind(&self, leaves: &[Tensor]) -> FcnnBinding {
        let mut cursor = 0;
        FcnnBinding {
            shared: self.shared.rebind(leaves, &mut cursor),
            reg: self.reg.rebind(leaves, &mut cursor),
        }
    }
}

/// Mean squared error over labelled rows only.
pub fn fcnn_loss(
    g: &mut Graph,
    model: &FcnnModel,
    bound: &FcnnBinding,
    batch: &SampleBatch,
) -> Result<LossBuild> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n_l = batch.n_labelled();
    if n_l == 0 {
        return Err(Error::Invalid(
            "fcnn loss needs at least one labelled row in the batch".into(),
        ));
    }
    let (x_t, _x_next, y, mask_l, _mask_u) = batch_leaves(g, batch)?;
    let (h_t, _) = mlp_forward(g, &model.shared, &bound.shared, x_t, false)?;
    let (pred, _) = mlp_forward(g, &model.reg, &bound.reg, h_t, false)?;
    let diff = g.sub(pred, y)?;
    let sq = g.square(diff)?;
    let total = masked_mean(g, sq, mask_l, n_l)?;
    let terms = LossTerms {
        label: g.scalar(total),
        total: g.scalar(total),
        ..LossTerms::default()
    };
    Ok(LossBuild { total, terms })
}

// ---------------------------------------------------------------------------
// Unified model handle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Ssvaer(SsvaerModel),
    Svaer(SvaerModel),
    Fcnn(FcnnModel),
}

impl AnyModel {
    pub fn new(kind: ModelKind, sizes: &ModelSizes, activation: Activation, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Ssvaer => AnyModel::Ssvaer(SsvaerModel::new(sizes, activation, seed)?),
            ModelKind::Svaer => AnyModel::Svaer(SvaerModel::new(sizes, activation, seed)?),
            ModelKind::Fcnn => AnyModel::Fcnn(FcnnModel::new(sizes, activation, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Ssvaer(_) => ModelKind::Ssvaer,
            AnyModel::Svaer(_) => ModelKind::Svaer,
            AnyModel::Fcnn(_) => ModelKind::Fcnn,
        }
    }

    pub fn sizes(&self) -> &ModelSizes {
        match self {
            AnyModel::Ssvaer(m) => &m.sizes,
            AnyModel::Svaer(m) => &m.sizes,
            AnyModel::Fcnn(m) => &m.sizes,
        }
    }

    pub fn input_width(&self) -> usize {
        self.sizes().input_width()
    }

    pub fn nz(&self) -> usize {
        self.sizes().nz()
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            AnyModel::Ssvaer(m) => m.params(),
            AnyModel::Svaer(m) => m.params(),
            AnyModel::Fcnn(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            AnyModel::Ssvaer(m) => m.params_mut(),
            AnyModel::Svaer(m) => m.params_mut(),
            AnyModel::Fcnn(m) => m.params_mut(),
        }
    }

    /// Build the loss for one batch on `g`, returning the parameter leaf
    /// registry (in [`AnyModel::params`] order) for gradient extraction.
    pub fn loss(
        &self,
        g: &mut Graph,
        batch: &SampleBatch,
        noise: &NoiseDraw,
        opts: &LossOptions,
    ) -> Result<(LossBuild, Vec<Tensor>)> {
        let mut registry = Vec::new();
        let build = match self {
            AnyModel::Ssvaer(m) => {
                let bound = m.bind(g, &mut registry)?;
                ssvaer_loss_terms(g, m, &bound, batch, noise, opts)?
            }
            AnyModel::Svaer(m) => {
                let bound = m.bind(g, &mut registry)?;
                svaer_loss_terms(g, m, &bound, batch, noise, opts)?
            }
            AnyModel::Fcnn(m) => {
                let bound = m.bind(g, &mut registry)?;
                fcnn_loss(g, m, &bound, batch)?
            }
        };
        Ok((build, registry))
    }

    /// Run after every optimizer step; projects constrained parameters back
    /// onto their feasible set.
    pub fn post_step(&mut self) {
        if let AnyModel::Svaer(m) = self {
            m.renormalize_w();
        }
    }

    /// Standardized quality prediction: mean and variance per row. Only the
    /// shared encoder and the quality regressor run, so the output cannot
    /// depend on any other subnetwork.
    pub fn predict_standardized(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let (shared, reg) = match self {
            AnyModel::Ssvaer(m) => (&m.shared, &m.q_reg),
            AnyModel::Svaer(m) => (&m.shared, &m.q_reg),
            AnyModel::Fcnn(m) => (&m.shared, &m.reg),
        };
        let mut g = Graph::new();
        let mut reg_leaves = Vec::new();
        let b_shared = shared.bind(&mut g, &mut reg_leaves)?;
        let b_reg = reg.bind(&mut g, &mut reg_leaves)?;
        let xt = g.leaf(&[x.rows, x.cols], x.data.clone())?;
        let (h, _) = mlp_forward(&mut g, shared, &b_shared, xt, false)?;
        let (mean, logvar) = mlp_forward(&mut g, reg, &b_reg, h, false)?;
        let means = g.values(mean).to_vec();
        let vars = match logvar {
            Some(lv) => g.values(lv).iter().map(|v| v.exp()).collect(),
            None => vec![0.0; x.rows],
        };
        Ok((means, vars))
    }
}

/// De-standardized quality prediction: mean in original label units, variance
/// rescaled by the squared label scale.
pub fn predict_y(
    model: &AnyModel,
    x_std: &Matrix,
    label_mean: f64,
    label_scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mean_std, var_std) = model.predict_standardized(x_std)?;
    let mean = mean_std
        .iter()
        .map(|m| m * label_scale + label_mean)
        .collect();
    let var = var_std
        .iter()
        .map(|v| v * label_scale * label_scale)
        .collect();
    Ok((mean, var))
}
