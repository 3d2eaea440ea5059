//! Central finite-difference checks of parameter gradients for every loss
//! term, on networks small enough to perturb one weight at a time.

use latbridge_core::losses::{self, terms, LossWeights, Net, TranslationMode};
use latbridge_core::nets;
use latbridge_core::{Graph, ModelParams, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
/// Fallback step for coordinates where the loss is not smooth within
/// `STEP` (a leaky-ReLU or absolute-value kink).
pub const FINE_STEP: f64 = 1e-6;
/// Gradients smaller than this in magnitude are compared absolutely; they
/// sit at the level of finite-difference round-off.
pub const FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    Kl,
    Reconstruction,
    LsganDiscriminator,
    LsganGenerator,
    FeatureMatching,
    FeatureL1,
    VaeganObjective,
    TranslationObjective(TranslationMode),
}

pub const ALL: [Loss; 10] = [
    Loss::Kl,
    Loss::Reconstruction,
    Loss::LsganDiscriminator,
    Loss::LsganGenerator,
    Loss::FeatureMatching,
    Loss::FeatureL1,
    Loss::VaeganObjective,
    Loss::TranslationObjective(TranslationMode::L1Only),
    Loss::TranslationObjective(TranslationMode::FeatAdv),
    Loss::TranslationObjective(TranslationMode::Full),
];

/// Miniature encoder, decoder, image discriminator, translator and latent
/// discriminator plus fixed inputs.
pub struct Fixture {
    pub nets: Vec<ModelParams<f64>>,
    x: Tensor<f64>,
    x2: Tensor<f64>,
    eps: Tensor<f64>,
    z1: Tensor<f64>,
    z2: Tensor<f64>,
}

const E: usize = 0;
const G: usize = 1;
const D: usize = 2;
const T: usize = 3;
const DT: usize = 4;

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let archs = [
            nets::defaults::encoder(&[2], 2),
            nets::defaults::decoder(&[2], 2),
            nets::defaults::discriminator(&[2], 1),
            nets::defaults::translator(2, 2, 1),
            nets::defaults::latent_discriminator(2, &[2]),
        ];
        let nets = archs
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let mut p = ModelParams::<f64>::init(a, seed + i as u64).unwrap();
                // Moves zero-initialized slots so every path carries gradient.
                p.jitter(seed + 100 + i as u64, 0.3);
                p
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = |rng: &mut ChaCha8Rng| {
            let t: Tensor<f64> = nets::gaussian_tensor(&[2, 3, 8, 8], rng);
            t.map(|v| (v * 0.5).tanh())
        };
        let x = image(&mut rng);
        let x2 = image(&mut rng);
        Self {
            nets,
            x,
            x2,
            eps: nets::gaussian_tensor(&[2, 2, 4, 4], &mut rng),
            z1: nets::gaussian_tensor(&[2, 2, 4, 4], &mut rng),
            z2: nets::gaussian_tensor(&[2, 2, 4, 4], &mut rng),
        }
    }

    pub fn num_params(&self, loss: Loss) -> usize {
        trained(loss).iter().map(|&i| self.nets[i].num_params()).sum()
    }
}

/// Networks whose parameters the loss is differentiated against.
fn trained(loss: Loss) -> Vec<usize> {
    match loss {
        Loss::Kl => vec![E],
        Loss::Reconstruction | Loss::VaeganObjective => vec![E, G, D],
        Loss::LsganDiscriminator => vec![D, G],
        Loss::LsganGenerator | Loss::FeatureMatching => vec![G, D],
        Loss::FeatureL1 => vec![T],
        Loss::TranslationObjective(TranslationMode::Full) => vec![T, G, D],
        Loss::TranslationObjective(_) => vec![T, DT],
    }
}

fn weights() -> LossWeights {
    LossWeights {
        lambda_kl: 0.7,
        lambda_f: 3.0,
        lambda_fm: 2.0,
        ..LossWeights::default()
    }
}

/// Builds the scalar loss; also returns every network's parameter handles,
/// all bound trainable.
fn build<R: Real>(
    g: &mut Graph<R>,
    loss: Loss,
    fx: &Fixture,
    nets: &[ModelParams<R>],
) -> (Var, Vec<Vec<Var>>) {
    let bound: Vec<Net<R>> = nets.iter().map(|p| Net::bind(g, p, true)).collect();
    let handles = bound.iter().map(|n| n.bound.vars.values().copied().collect()).collect();
    (loss_var(g, loss, fx, &bound), handles)
}

fn loss_var<R: Real>(g: &mut Graph<R>, loss: Loss, fx: &Fixture, bound: &[Net<R>]) -> Var {
    let c = |t: &Tensor<f64>| t.cast::<R>();
    let x = g.constant(c(&fx.x));
    let x2 = g.constant(c(&fx.x2));
    let eps = c(&fx.eps);
    let w = weights();
    let perceptual = nets::perceptual::params::<R>();
    let fake = |g: &mut Graph<R>| {
        let z = g.constant(c(&fx.z1));
        bound[G].decode(g, z).unwrap()
    };
    match loss {
        Loss::Kl => {
            let mean = bound[E].encode(g, x).unwrap();
            terms::kl(g, mean)
        }
        Loss::Reconstruction => {
            let (_, x_bar) =
                losses::vaegan_reconstruct(g, &bound[E], &bound[G], x, &eps, R::one()).unwrap();
            terms::recon(g, x, x_bar)
        }
        Loss::LsganDiscriminator => {
            let f = fake(g);
            losses::discriminator_side(g, &bound[D], x, f).unwrap()
        }
        Loss::LsganGenerator => {
            let f = fake(g);
            let out = bound[D].discriminate(g, f).unwrap();
            terms::lsgan_g(g, &out.scores)
        }
        Loss::FeatureMatching => {
            let f = fake(g);
            let real = bound[D].discriminate(g, x).unwrap();
            let gen = bound[D].discriminate(g, f).unwrap();
            let a = terms::feature_matching(g, &real.feats, &gen.feats).unwrap();
            let pr = nets::perceptual::forward(g, &perceptual, x);
            let pf = nets::perceptual::forward(g, &perceptual, f);
            let b = terms::feature_matching(g, &pr, &pf).unwrap();
            g.weighted_sum(&[(a, R::one()), (b, R::one())])
        }
        Loss::FeatureL1 => {
            let z1 = g.constant(c(&fx.z1));
            let z2 = g.constant(c(&fx.z2));
            let z_hat = bound[T].translate(g, z1).unwrap();
            terms::feature_l1(g, z_hat, z2)
        }
        Loss::VaeganObjective => {
            let (mean, x_bar) =
                losses::vaegan_reconstruct(g, &bound[E], &bound[G], x, &eps, R::one()).unwrap();
            let obj =
                losses::vaegan_generator_side(g, &bound[D], &perceptual, x, mean, x_bar, &w).unwrap();
            let d = losses::discriminator_side(g, &bound[D], x, x_bar).unwrap();
            g.weighted_sum(&[(obj.total, R::one()), (d, R::one())])
        }
        Loss::TranslationObjective(mode) => {
            let z1 = g.constant(c(&fx.z1));
            let z2 = g.constant(c(&fx.z2));
            let (z_hat, p2_bar) = losses::translate_forward(g, mode, &bound[T], &bound[G], z1).unwrap();
            let d_t = if mode == TranslationMode::Full { &bound[D] } else { &bound[DT] };
            let obj = losses::translation_generator_side(
                g, mode, Some(d_t), &perceptual, z_hat, p2_bar, z2, x2, &w,
            )
            .unwrap();
            match mode {
                TranslationMode::L1Only => obj.total,
                TranslationMode::Full => {
                    let d = losses::discriminator_side(g, d_t, x2, obj.output).unwrap();
                    g.weighted_sum(&[(obj.total, R::one()), (d, R::one())])
                }
                TranslationMode::FeatAdv => {
                    let d = losses::discriminator_side(g, d_t, z2, obj.output).unwrap();
                    g.weighted_sum(&[(obj.total, R::one()), (d, R::one())])
                }
            }
        }
    }
}

fn value(loss: Loss, fx: &Fixture, nets: &[ModelParams<f64>]) -> f64 {
    let mut g = Graph::new();
    let (v, _) = build(&mut g, loss, fx, nets);
    g.scalar(v)
}

/// Analytic gradients at precision `R`, flattened over the trained networks.
fn analytic<R: Real>(loss: Loss, fx: &Fixture) -> Vec<f64> {
    let nets: Vec<ModelParams<R>> = fx.nets.iter().map(|p| p.cast()).collect();
    let mut g = Graph::new();
    let (v, handles) = build(&mut g, loss, fx, &nets);
    let grads = g.backward(v);
    let mut out = Vec::new();
    for i in trained(loss) {
        for (&h, t) in handles[i].iter().zip(nets[i].tensors.values()) {
            match grads.get(h) {
                Some(gr) => out.extend(gr.data().iter().map(|v| v.as_f64())),
                None => out.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
    }
    out
}

fn numeric(loss: Loss, fx: &Fixture) -> Vec<f64> {
    numeric_with(loss, fx, STEP)
}

fn numeric_with(loss: Loss, fx: &Fixture, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut nets = fx.nets.clone();
    for i in trained(loss) {
        let names: Vec<String> = nets[i].tensors.keys().cloned().collect();
        for name in names {
            let n = nets[i].tensors[&name].len();
            for k in 0..n {
                let orig = nets[i].tensors[&name].data()[k];
                nets[i].tensors.get_mut(&name).unwrap().data_mut()[k] = orig + step;
                let up = value(loss, fx, &nets);
                nets[i].tensors.get_mut(&name).unwrap().data_mut()[k] = orig - step;
                let down = value(loss, fx, &nets);
                nets[i].tensors.get_mut(&name).unwrap().data_mut()[k] = orig;
                out.push((up - down) / (2.0 * step));
            }
        }
    }
    out
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub struct Report {
    pub max_rel_f64: f64,
    pub max_rel_f32: f64,
    pub params: usize,
    /// Coordinates compared against the fine-step estimate.
    pub kinked: usize,
}

/// Compares 64-bit and 32-bit analytic gradients against 64-bit central
/// differences.
pub fn check(loss: Loss, seed: u64) -> Report {
    let fx = Fixture::new(seed);
    let mut n = numeric(loss, &fx);
    let a64 = analytic::<f64>(loss, &fx);
    let a32 = analytic::<f32>(loss, &fx);
    assert!(n.iter().any(|v| v.abs() > FLOOR), "{loss:?}: gradient vanished");
    let mut kinked = 0;
    let mut fine: Option<Vec<f64>> = None;
    for i in 0..n.len() {
        if rel(a64[i], n[i]) > 1e-4 {
            let f = fine.get_or_insert_with(|| numeric_with(loss, &fx, FINE_STEP));
            // Smooth functions agree across steps to O(STEP^2).
            if rel(f[i], n[i]) > 1e-4 {
                n[i] = f[i];
                kinked += 1;
            }
        }
    }
    let max = |a: &[f64]| a.iter().zip(&n).map(|(a, n)| rel(*a, *n)).fold(0.0, f64::max);
    Report {
        max_rel_f64: max(&a64),
        max_rel_f32: max(&a32),
        params: fx.num_params(loss),
        kinked,
    }
}
