//! Loss terms and the two training objectives.
//!
//! Conventions: L1 terms are element means; every term is a per-sample mean
//! over the batch; LSGAN uses 0/1 targets and is minimized by both players.
//! Graph-level builders live in [`terms`]; the free functions here evaluate
//! on plain tensors.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nets::{self, ModelParams, NetError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("feature pyramid structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("unknown translation mode {0:?} (expected full, l1_only or feat_adv)")]
    UnknownMode(String),
    #[error("mode {0} needs a translation discriminator")]
    MissingDiscriminator(TranslationMode),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Loss weights. `lambda_kl` scales the KL term of the VAE loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_f: f64,
    pub lambda_fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 1.0,
            lambda_f: 60.0,
            lambda_fm: 10.0,
        }
    }
}

/// Which loss trains the feature translator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMode {
    /// Image-space adversarial + feature L1 + feature matching.
    Full,
    /// Feature L1 only.
    L1Only,
    /// Adversarial loss on latent codes + feature L1.
    FeatAdv,
}

impl TranslationMode {
    pub const ALL: [TranslationMode; 3] = [Self::Full, Self::L1Only, Self::FeatAdv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::L1Only => "l1_only",
            Self::FeatAdv => "feat_adv",
        }
    }

    pub fn needs_discriminator(&self) -> bool {
        !matches!(self, Self::L1Only)
    }
}

impl fmt::Display for TranslationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TranslationMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "l1_only" => Ok(Self::L1Only),
            "feat_adv" => Ok(Self::FeatAdv),
            other => Err(LossError::UnknownMode(other.to_string())),
        }
    }
}

/// Named loss terms with the totals they combine into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: IndexMap<String, f64>,
    pub total_g: f64,
    pub total_d: f64,
    pub weights: LossWeights,
    /// `None` for the VAE-GAN objective.
    pub mode: Option<TranslationMode>,
}

impl LossBreakdown {
    fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }

    /// Generator-side total from the stored terms:
    ///
    /// * VAE-GAN: `lambda_kl*kl + recon + gan_g + lambda_fm*(fm_gan + fm_perc)`
    /// * full: `adv + lambda_f*feat_l1 + lambda_fm*(fm_gan + fm_perc)`
    /// * l1_only: `lambda_f*feat_l1`
    /// * feat_adv: `adv + lambda_f*feat_l1`
    pub fn combine_g(&self) -> f64 {
        let w = &self.weights;
        let fm = self.term("fm_gan") + self.term("fm_perc");
        match self.mode {
            None => w.lambda_kl * self.term("kl") + self.term("recon") + self.term("gan_g") + w.lambda_fm * fm,
            Some(TranslationMode::Full) => {
                self.term("adv") + w.lambda_f * self.term("feat_l1") + w.lambda_fm * fm
            }
            Some(TranslationMode::L1Only) => w.lambda_f * self.term("feat_l1"),
            Some(TranslationMode::FeatAdv) => self.term("adv") + w.lambda_f * self.term("feat_l1"),
        }
    }

    /// Build a breakdown from raw terms, computing the totals.
    pub fn from_terms(
        terms: IndexMap<String, f64>,
        weights: LossWeights,
        mode: Option<TranslationMode>,
    ) -> Self {
        let mut b = Self {
            terms,
            total_g: 0.0,
            total_d: 0.0,
            weights,
            mode,
        };
        b.total_g = b.combine_g();
        b.total_d = b.term("gan_d");
        b
    }

    /// First term (or total) that is not finite.
    pub fn non_finite_term(&self) -> Option<String> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.clone())
            .or_else(|| (!self.total_g.is_finite()).then(|| "total_g".into()))
            .or_else(|| (!self.total_d.is_finite()).then(|| "total_d".into()))
    }
}

/// A network inserted into a graph.
pub struct Net<'a, T: Real> {
    pub params: &'a ModelParams<T>,
    pub bound: nets::Bound,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn bind(g: &mut Graph<T>, params: &'a ModelParams<T>, trainable: bool) -> Self {
        let bound = params.bind(g, trainable);
        Self { params, bound }
    }

    pub fn encode(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(nets::encoder_forward(g, &self.params.arch, &self.bound, x)?)
    }

    pub fn decode(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        Ok(nets::decoder_forward(g, &self.params.arch, &self.bound, z)?)
    }

    pub fn translate(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        Ok(nets::translator_forward(g, &self.params.arch, &self.bound, z)?)
    }

    /// Image or latent discriminator depending on the descriptor.
    pub fn discriminate(&self, g: &mut Graph<T>, x: Var) -> Result<nets::DiscOutput> {
        Ok(match self.params.arch {
            nets::ArchDescriptor::TranslationDiscriminator { .. } => {
                nets::latent_discriminator_forward(g, &self.params.arch, &self.bound, x)?
            }
            _ => nets::discriminator_forward(g, &self.params.arch, &self.bound, x)?,
        })
    }
}

/// Graph-level loss terms.
pub mod terms {
    use super::*;

    /// `1/2 * sum(mean^2) / B`: KL from `N(mean, I)` to `N(0, I)`, summed over
    /// latent elements, averaged over the batch.
    pub fn kl<T: Real>(g: &mut Graph<T>, mean: Var) -> Var {
        let b = g.value(mean).batch() as f64;
        g.sum_squares(mean, T::lit(0.5 / b))
    }

    pub fn recon<T: Real>(g: &mut Graph<T>, x: Var, x_bar: Var) -> Var {
        g.mean_abs_diff(x_bar, x)
    }

    /// `mean_s [ mean (real_s - 1)^2 + mean fake_s^2 ]`.
    pub fn lsgan_d<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Var {
        assert_eq!(real.len(), fake.len(), "score lists differ in scale count");
        let w = T::lit(1.0 / real.len() as f64);
        let mut parts = Vec::with_capacity(2 * real.len());
        for (&r, &f) in real.iter().zip(fake) {
            parts.push((g.mean_sq_to_target(r, T::one()), w));
            parts.push((g.mean_sq_to_target(f, T::zero()), w));
        }
        g.weighted_sum(&parts)
    }

    /// `mean_s mean (fake_s - 1)^2`.
    pub fn lsgan_g<T: Real>(g: &mut Graph<T>, fake: &[Var]) -> Var {
        let w = T::lit(1.0 / fake.len() as f64);
        let parts: Vec<_> = fake
            .iter()
            .map(|&f| (g.mean_sq_to_target(f, T::one()), w))
            .collect();
        g.weighted_sum(&parts)
    }

    /// `sum_i mean |real_i - fake_i|`.
    pub fn feature_matching<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
        if real.len() != fake.len() {
            return Err(LossError::StructureMismatch(format!(
                "{} vs {} levels",
                real.len(),
                fake.len()
            )));
        }
        let mut parts = Vec::with_capacity(real.len());
        for (i, (&r, &f)) in real.iter().zip(fake).enumerate() {
            if g.shape(r) != g.shape(f) {
                return Err(LossError::StructureMismatch(format!(
                    "level {i}: {:?} vs {:?}",
                    g.shape(r),
                    g.shape(f)
                )));
            }
            parts.push((g.mean_abs_diff(f, r), T::one()));
        }
        Ok(g.weighted_sum(&parts))
    }

    pub fn feature_l1<T: Real>(g: &mut Graph<T>, z_hat: Var, z_target: Var) -> Var {
        g.mean_abs_diff(z_hat, z_target)
    }
}

/// Graph handles of an objective: each named term, the weighted total and
/// the generated output the discriminator side consumes.
pub struct Objective {
    pub terms: Vec<(&'static str, Var)>,
    pub total: Var,
    pub output: Var,
}

impl Objective {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> IndexMap<String, f64> {
        self.terms
            .iter()
            .map(|(k, v)| (k.to_string(), g.scalar(*v).as_f64()))
            .collect()
    }
}

/// `x_bar = G(E(x) + sigma*eps)`; returns `(mean, x_bar)`.
pub fn vaegan_reconstruct<T: Real>(
    g: &mut Graph<T>,
    e: &Net<T>,
    gen: &Net<T>,
    x: Var,
    eps: &Tensor<T>,
    sigma: T,
) -> Result<(Var, Var)> {
    let mean = e.encode(g, x)?;
    let z = nets::reparameterize(g, mean, eps, sigma);
    let x_bar = gen.decode(g, z)?;
    Ok((mean, x_bar))
}

/// Encoder/decoder side of the VAE-GAN objective for a batch `x`:
/// `lambda_kl*kl + recon + gan_g + lambda_fm*FM(x, x_bar)`.
#[allow(clippy::too_many_arguments)]
pub fn vaegan_generator_side<T: Real>(
    g: &mut Graph<T>,
    d: &Net<T>,
    perceptual: &ModelParams<T>,
    x: Var,
    mean: Var,
    x_bar: Var,
    w: &LossWeights,
) -> Result<Objective> {
    let kl = terms::kl(g, mean);
    let recon = terms::recon(g, x, x_bar);
    let fake = d.discriminate(g, x_bar)?;
    let real = d.discriminate(g, x)?;
    let gan_g = terms::lsgan_g(g, &fake.scores);
    let fm_gan = terms::feature_matching(g, &real.feats, &fake.feats)?;
    let pr = nets::perceptual::forward(g, perceptual, x);
    let pf = nets::perceptual::forward(g, perceptual, x_bar);
    let fm_perc = terms::feature_matching(g, &pr, &pf)?;
    let lfm = T::lit(w.lambda_fm);
    let total = g.weighted_sum(&[
        (kl, T::lit(w.lambda_kl)),
        (recon, T::one()),
        (gan_g, T::one()),
        (fm_gan, lfm),
        (fm_perc, lfm),
    ]);
    Ok(Objective {
        terms: vec![
            ("kl", kl),
            ("recon", recon),
            ("gan_g", gan_g),
            ("fm_gan", fm_gan),
            ("fm_perc", fm_perc),
        ],
        total,
        output: x_bar,
    })
}

/// LSGAN discriminator loss on real inputs vs (detached) generated ones.
pub fn discriminator_side<T: Real>(
    g: &mut Graph<T>,
    d: &Net<T>,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let r = d.discriminate(g, real)?;
    let f = d.discriminate(g, fake)?;
    Ok(terms::lsgan_d(g, &r.scores, &f.scores))
}

/// `z_hat = T(z1)` and, in full mode, `p2_bar = G2(z_hat)`.
pub fn translate_forward<T: Real>(
    g: &mut Graph<T>,
    mode: TranslationMode,
    t: &Net<T>,
    g2: &Net<T>,
    z1: Var,
) -> Result<(Var, Option<Var>)> {
    let z_hat = t.translate(g, z1)?;
    let p2_bar = match mode {
        TranslationMode::Full => Some(g2.decode(g, z_hat)?),
        _ => None,
    };
    Ok((z_hat, p2_bar))
}

/// Translator side of the translation objective. `z_hat`/`p2_bar` come from
/// [`translate_forward`]; `z2 = E2(p2)`.
#[allow(clippy::too_many_arguments)]
pub fn translation_generator_side<T: Real>(
    g: &mut Graph<T>,
    mode: TranslationMode,
    d_t: Option<&Net<T>>,
    perceptual: &ModelParams<T>,
    z_hat: Var,
    p2_bar: Option<Var>,
    z2: Var,
    p2: Var,
    w: &LossWeights,
) -> Result<Objective> {
    let feat_l1 = terms::feature_l1(g, z_hat, z2);
    let lf = T::lit(w.lambda_f);
    match mode {
        TranslationMode::L1Only => {
            let total = g.weighted_sum(&[(feat_l1, lf)]);
            Ok(Objective {
                terms: vec![("feat_l1", feat_l1)],
                total,
                output: z_hat,
            })
        }
        TranslationMode::FeatAdv => {
            let d_t = d_t.ok_or(LossError::MissingDiscriminator(mode))?;
            let fake = d_t.discriminate(g, z_hat)?;
            let adv = terms::lsgan_g(g, &fake.scores);
            let total = g.weighted_sum(&[(adv, T::one()), (feat_l1, lf)]);
            Ok(Objective {
                terms: vec![("adv", adv), ("feat_l1", feat_l1)],
                total,
                output: z_hat,
            })
        }
        TranslationMode::Full => {
            let d_t = d_t.ok_or(LossError::MissingDiscriminator(mode))?;
            let p2_bar = p2_bar.expect("full mode decodes the translated code");
            let fake = d_t.discriminate(g, p2_bar)?;
            let real = d_t.discriminate(g, p2)?;
            let adv = terms::lsgan_g(g, &fake.scores);
            let fm_gan = terms::feature_matching(g, &real.feats, &fake.feats)?;
            let pr = nets::perceptual::forward(g, perceptual, p2);
            let pf = nets::perceptual::forward(g, perceptual, p2_bar);
            let fm_perc = terms::feature_matching(g, &pr, &pf)?;
            let lfm = T::lit(w.lambda_fm);
            let total = g.weighted_sum(&[
                (adv, T::one()),
                (feat_l1, lf),
                (fm_gan, lfm),
                (fm_perc, lfm),
            ]);
            Ok(Objective {
                terms: vec![
                    ("adv", adv),
                    ("feat_l1", feat_l1),
                    ("fm_gan", fm_gan),
                    ("fm_perc", fm_perc),
                ],
                total,
                output: p2_bar,
            })
        }
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(LossError::NonFinite(what.to_string()));
    }
    Ok(())
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

fn eval<T: Real>(f: impl FnOnce(&mut Graph<T>) -> Var) -> T {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v)
}

/// KL divergence of `N(mean, I)` from `N(0, I)`; `mean` is `[B, ...]`.
pub fn kl_unit_gaussian<T: Real>(mean: &Tensor<T>) -> Result<T> {
    check_finite(mean, "kl input")?;
    Ok(eval(|g| {
        let m = g.constant(mean.clone());
        terms::kl(g, m)
    }))
}

pub fn reconstruction_loss<T: Real>(x: &Tensor<T>, x_bar: &Tensor<T>) -> Result<T> {
    check_same(x, x_bar)?;
    Ok(eval(|g| {
        let (a, b) = (g.constant(x.clone()), g.constant(x_bar.clone()));
        terms::recon(g, a, b)
    }))
}

pub fn lsgan_discriminator_loss<T: Real>(real: &[Tensor<T>], fake: &[Tensor<T>]) -> Result<T> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(LossError::StructureMismatch(format!(
            "{} real vs {} fake score maps",
            real.len(),
            fake.len()
        )));
    }
    for (r, f) in real.iter().zip(fake) {
        check_same(r, f)?;
    }
    Ok(eval(|g| {
        let r: Vec<_> = real.iter().map(|t| g.constant(t.clone())).collect();
        let f: Vec<_> = fake.iter().map(|t| g.constant(t.clone())).collect();
        terms::lsgan_d(g, &r, &f)
    }))
}

pub fn lsgan_generator_loss<T: Real>(fake: &[Tensor<T>]) -> Result<T> {
    if fake.is_empty() {
        return Err(LossError::StructureMismatch("no score maps".into()));
    }
    Ok(eval(|g| {
        let f: Vec<_> = fake.iter().map(|t| g.constant(t.clone())).collect();
        terms::lsgan_g(g, &f)
    }))
}

pub fn feature_matching_loss<T: Real>(real: &[Tensor<T>], fake: &[Tensor<T>]) -> Result<T> {
    let mut g = Graph::new();
    let r: Vec<_> = real.iter().map(|t| g.constant(t.clone())).collect();
    let f: Vec<_> = fake.iter().map(|t| g.constant(t.clone())).collect();
    let v = terms::feature_matching(&mut g, &r, &f)?;
    Ok(g.scalar(v))
}

pub fn feature_l1_loss<T: Real>(z_hat: &Tensor<T>, z_target: &Tensor<T>) -> Result<T> {
    check_same(z_hat, z_target)?;
    Ok(eval(|g| {
        let (a, b) = (g.constant(z_hat.clone()), g.constant(z_target.clone()));
        terms::feature_l1(g, a, b)
    }))
}

/// Both sides of the VAE-GAN objective at the current parameters, with the
/// reparameterization noise `eps` given explicitly.
#[allow(clippy::too_many_arguments)]
pub fn vaegan_objective<T: Real>(
    x: &Tensor<T>,
    e: &ModelParams<T>,
    gen: &ModelParams<T>,
    d: &ModelParams<T>,
    eps: &Tensor<T>,
    sigma: T,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let perceptual = nets::perceptual::params::<T>();
    let mut g = Graph::new();
    let (en, gn, dn) = (
        Net::bind(&mut g, e, false),
        Net::bind(&mut g, gen, false),
        Net::bind(&mut g, d, false),
    );
    let xv = g.constant(x.clone());
    let (mean, x_bar) = vaegan_reconstruct(&mut g, &en, &gn, xv, eps, sigma)?;
    let obj = vaegan_generator_side(&mut g, &dn, &perceptual, xv, mean, x_bar, w)?;
    let fake = g.detach(obj.output);
    let d_loss = discriminator_side(&mut g, &dn, xv, fake)?;
    let mut terms = obj.values(&g);
    terms.insert("gan_d".into(), g.scalar(d_loss).as_f64());
    Ok(LossBreakdown::from_terms(terms, *w, None))
}

/// Both sides of the translation objective on a paired batch.
#[allow(clippy::too_many_arguments)]
pub fn translation_objective<T: Real>(
    p1: &Tensor<T>,
    p2: &Tensor<T>,
    e1: &ModelParams<T>,
    e2: &ModelParams<T>,
    g2: &ModelParams<T>,
    t: &ModelParams<T>,
    d_t: Option<&ModelParams<T>>,
    mode: TranslationMode,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    check_same(p1, p2)?;
    let z1 = nets::encode_tensor(e1, p1)?;
    let z2 = nets::encode_tensor(e2, p2)?;
    let perceptual = nets::perceptual::params::<T>();
    let mut g = Graph::new();
    let tn = Net::bind(&mut g, t, false);
    let gn = Net::bind(&mut g, g2, false);
    let dn = d_t.map(|d| Net::bind(&mut g, d, false));
    let (z1v, z2v, p2v) = (
        g.constant(z1),
        g.constant(z2),
        g.constant(p2.clone()),
    );
    let (z_hat, p2_bar) = translate_forward(&mut g, mode, &tn, &gn, z1v)?;
    let obj = translation_generator_side(
        &mut g,
        mode,
        dn.as_ref(),
        &perceptual,
        z_hat,
        p2_bar,
        z2v,
        p2v,
        w,
    )?;
    let mut terms = obj.values(&g);
    if let Some(dn) = dn.as_ref().filter(|_| mode.needs_discriminator()) {
        let fake = g.detach(obj.output);
        let real = if mode == TranslationMode::Full { p2v } else { z2v };
        let d_loss = discriminator_side(&mut g, dn, real, fake)?;
        terms.insert("gan_d".into(), g.scalar(d_loss).as_f64());
    }
    Ok(LossBreakdown::from_terms(terms, *w, Some(mode)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_unit_gaussian(&t(&[2, 4, 2, 2], 0.0)).unwrap(), 0.0);
        let mut m = t(&[1, 4, 2, 2], 0.0);
        m.data_mut()[0] = 1.0;
        m.data_mut()[5] = 1.0;
        assert_eq!(kl_unit_gaussian(&m).unwrap(), 1.0);
        let mut bad = m.clone();
        bad.data_mut()[1] = f64::NAN;
        assert!(matches!(kl_unit_gaussian(&bad), Err(LossError::NonFinite(_))));
    }

    #[test]
    fn reconstruction_values() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.0]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.5);
        assert!((reconstruction_loss(&x, &y).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            reconstruction_loss(&x, &y).unwrap(),
            reconstruction_loss(&y, &x).unwrap()
        );
        assert!(reconstruction_loss(&x, &t(&[1, 3, 2, 1], 0.0)).is_err());
    }

    #[test]
    fn lsgan_values() {
        let s = [8, 4];
        let maps = |v: f64| -> Vec<Tensor<f64>> { s.iter().map(|&n| t(&[1, 1, n, n], v)).collect() };
        assert_eq!(lsgan_discriminator_loss(&maps(1.0), &maps(0.0)).unwrap(), 0.0);
        assert!((lsgan_discriminator_loss(&maps(0.5), &maps(0.5)).unwrap() - 0.5).abs() < 1e-12);
        assert!((lsgan_discriminator_loss(&maps(0.0), &maps(1.0)).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(lsgan_generator_loss(&maps(1.0)).unwrap(), 0.0);
        assert!((lsgan_generator_loss(&maps(0.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((lsgan_generator_loss(&maps(0.5)).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn feature_matching_values() {
        let pyr = vec![t(&[2, 3, 4, 4], 0.3), t(&[2, 5, 2, 2], -0.1), t(&[2, 1, 1, 1], 2.0)];
        assert_eq!(feature_matching_loss(&pyr, &pyr).unwrap(), 0.0);
        let mut one = pyr.clone();
        one[1] = one[1].map(|v| v + 1.0);
        assert!((feature_matching_loss(&pyr, &one).unwrap() - 1.0).abs() < 1e-12);
        one[0] = one[0].map(|v| v - 1.0);
        assert!((feature_matching_loss(&pyr, &one).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            feature_matching_loss(&pyr, &pyr[..2]),
            Err(LossError::StructureMismatch(_))
        ));
    }

    #[test]
    fn feature_l1_values() {
        let a = t(&[1, 2, 2, 2], 0.25);
        assert_eq!(feature_l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 0.5);
        assert!((feature_l1_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vaegan_weighted_sum() {
        let terms: IndexMap<String, f64> = [("kl", 0.2), ("recon", 0.1), ("gan_g", 0.25), ("fm_gan", 0.3)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let b = LossBreakdown::from_terms(terms, LossWeights::default(), None);
        assert!((b.total_g - 3.55).abs() < 1e-12);
        assert_eq!(b.weights.lambda_fm, 10.0);
    }

    #[test]
    fn translation_weighted_sum() {
        let terms: IndexMap<String, f64> = [("adv", 0.5), ("feat_l1", 0.1), ("fm_gan", 0.2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let w = LossWeights::default();
        assert_eq!((w.lambda_f, w.lambda_fm), (60.0, 10.0));
        let b = LossBreakdown::from_terms(terms.clone(), w, Some(TranslationMode::Full));
        assert!((b.total_g - 8.5).abs() < 1e-12);
        let b = LossBreakdown::from_terms(terms.clone(), w, Some(TranslationMode::L1Only));
        assert!((b.total_g - 6.0).abs() < 1e-12);
        let b = LossBreakdown::from_terms(terms, w, Some(TranslationMode::FeatAdv));
        assert!((b.total_g - 6.5).abs() < 1e-12);
    }

    #[test]
    fn modes_parse() {
        for m in TranslationMode::ALL {
            assert_eq!(m.as_str().parse::<TranslationMode>().unwrap(), m);
        }
        assert_eq!(
            "l1".parse::<TranslationMode>(),
            Err(LossError::UnknownMode("l1".into()))
        );
    }
}
