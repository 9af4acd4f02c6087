//! Router and the routed-SAE composite: sum pooling, layer logits, softmax
//! probabilities, hard / soft / random-uniform routing, and the combined
//! forward/backward pass including router gradients.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sae::{decode, encode, sae_backward, Activation, SaeGradients, SaeParams, SparseCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterKind {
    /// Select the argmax-probability layer, scaled by its probability.
    Hard,
    /// Probability-weighted sum over all routed layers.
    Soft,
    /// Uniform probabilities; the layer is drawn uniformly per token and the
    /// router receives no gradient.
    RandomUniform,
}

/// The L x d routing matrix plus its routing mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<F> {
    pub w_router: Array2<F>,
    pub kind: RouterKind,
}

impl<F: Real> RouterParams<F> {
    pub fn num_layers(&self) -> usize {
        self.w_router.nrows()
    }

    pub fn d(&self) -> usize {
        self.w_router.ncols()
    }
}

/// Seeded router initialization with small random weights.
pub fn init_router<F: Real>(l: usize, d: usize, kind: RouterKind, seed: u64) -> RouterParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((l, d));
    for v in w.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = F::of(g * 0.01);
    }
    RouterParams { w_router: w, kind }
}

/// One token's routing outcome.
#[derive(Debug, Clone)]
pub struct RouteDecision<F> {
    pub probs: Array1<F>,
    pub selected_layer: usize,
    pub x_route: Array1<F>,
    /// Sum-pooled router input.
    pub pooled: Array1<F>,
}

/// Componentwise sum over layers.
pub fn pool_sum<F: Real>(x_by_layer: &[ArrayView1<F>]) -> Result<Array1<F>> {
    let first = x_by_layer
        .first()
        .ok_or_else(|| Error::Shape("sum pooling over an empty layer list".into()))?;
    let mut v = first.to_owned();
    for (i, x) in x_by_layer.iter().enumerate().skip(1) {
        if x.len() != v.len() {
            return Err(Error::Shape(format!(
                "layer {i} has width {}, expected {}",
                x.len(),
                v.len()
            )));
        }
        v += x;
    }
    Ok(v)
}

/// Softmax with max-subtraction.
fn softmax<F: Real>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().fold(F::neg_infinity(), |a, v| a.max(*v));
    let mut p = logits.mapv(|v| (v - max).exp());
    let sum = p.iter().fold(F::zero(), |a, v| a + *v);
    p.mapv_inplace(|v| v / sum);
    p
}

/// Layer selection probabilities for the pooled input `v`. Random-uniform
/// routers return exactly 1/L regardless of `v`.
pub fn layer_probs<F: Real>(router: &RouterParams<F>, v: ArrayView1<F>) -> Array1<F> {
    let l = router.num_layers();
    if router.kind == RouterKind::RandomUniform {
        return Array1::from_elem(l, F::one() / F::of(l as f64));
    }
    let logits = router.w_router.dot(&v);
    softmax(&logits)
}

fn argmax<F: Real>(p: &Array1<F>) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// splitmix64; used to derive per-token layer draws for the random router.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform layer draw for the random-uniform router, deterministic in the
/// sample tag.
pub fn random_layer(sample_tag: u64, num_layers: usize) -> usize {
    (splitmix64(sample_tag) % num_layers as u64) as usize
}

/// Build the routed decision from per-layer activations and probabilities.
/// `sample_tag` is consumed only by the random-uniform kind.
pub fn route<F: Real>(
    x_by_layer: &[ArrayView1<F>],
    probs: &Array1<F>,
    kind: RouterKind,
    sample_tag: u64,
) -> Result<RouteDecision<F>> {
    if x_by_layer.len() != probs.len() {
        return Err(Error::Shape(format!(
            "{} layers but {} probabilities",
            x_by_layer.len(),
            probs.len()
        )));
    }
    let pooled = pool_sum(x_by_layer)?;
    let decision = match kind {
        RouterKind::Hard => {
            let i = argmax(probs);
            RouteDecision {
                x_route: x_by_layer[i].mapv(|v| v * probs[i]),
                selected_layer: i,
                probs: probs.clone(),
                pooled,
            }
        }
        RouterKind::Soft => {
            let mut x = Array1::zeros(x_by_layer[0].len());
            for (i, layer) in x_by_layer.iter().enumerate() {
                x.scaled_add(probs[i], layer);
            }
            RouteDecision {
                x_route: x,
                selected_layer: argmax(probs),
                probs: probs.clone(),
                pooled,
            }
        }
        RouterKind::RandomUniform => {
            let i = random_layer(sample_tag, x_by_layer.len());
            RouteDecision {
                x_route: x_by_layer[i].mapv(|v| v * probs[i]),
                selected_layer: i,
                probs: probs.clone(),
                pooled,
            }
        }
    };
    Ok(decision)
}

#[derive(Debug, Clone)]
pub struct RouteForward<F> {
    pub decision: RouteDecision<F>,
    pub code: SparseCode<F>,
    pub reconstruction: Array1<F>,
    pub loss: F,
}

/// Routed forward pass: pool, select, encode with the shared TopK SAE,
/// reconstruct, and score.
pub fn routesae_forward<F: Real>(
    router: &RouterParams<F>,
    sae: &SaeParams<F>,
    x_by_layer: &[ArrayView1<F>],
    sample_tag: u64,
) -> Result<RouteForward<F>> {
    if sae.activation != Activation::TopK {
        return Err(Error::Config(
            "the routed shared SAE must use the TopK activation".into(),
        ));
    }
    let v = pool_sum(x_by_layer)?;
    let probs = layer_probs(router, v.view());
    let decision = route(x_by_layer, &probs, router.kind, sample_tag)?;
    let code = encode(sae, decision.x_route.view());
    let reconstruction = decode(sae, &code)?;
    let loss = crate::sae::loss_mse(decision.x_route.view(), reconstruction.view());
    Ok(RouteForward {
        decision,
        code,
        reconstruction,
        loss,
    })
}

#[derive(Debug, Clone)]
pub struct RouteBackward<F> {
    pub sae: SaeGradients<F>,
    pub w_router: Array2<F>,
    pub loss: F,
}

/// Gradients of the routed loss with respect to the SAE parameters and the
/// router matrix. The pooled input is treated as a constant of the frozen
/// host model; hard routing treats the argmax as locally constant and chains
/// through the scalar p_{i*} via the softmax Jacobian.
pub fn routesae_backward<F: Real>(
    router: &RouterParams<F>,
    sae: &SaeParams<F>,
    x_by_layer: &[ArrayView1<F>],
    forward: &RouteForward<F>,
) -> Result<RouteBackward<F>> {
    let (sae_grads, loss) =
        sae_backward(sae, forward.decision.x_route.view(), &forward.code, F::zero())?;
    let l = router.num_layers();
    let p = &forward.decision.probs;
    let v = &forward.decision.pooled;

    let g_alpha: Array1<F> = match router.kind {
        RouterKind::RandomUniform => Array1::zeros(l),
        RouterKind::Hard => {
            let istar = forward.decision.selected_layer;
            // dL/dp_{i*}; x_route = p_{i*} x_{i*}
            let dlp = sae_grads.input.dot(&x_by_layer[istar]);
            let pst = p[istar];
            Array1::from_shape_fn(l, |j| {
                let delta = if j == istar { F::one() } else { F::zero() };
                dlp * pst * (delta - p[j])
            })
        }
        RouterKind::Soft => {
            // dL/dp_i = g_input . x_i for every layer
            let dlp: Vec<F> = (0..l).map(|i| sae_grads.input.dot(&x_by_layer[i])).collect();
            let inner = (0..l).fold(F::zero(), |acc, i| acc + p[i] * dlp[i]);
            Array1::from_shape_fn(l, |j| p[j] * (dlp[j] - inner))
        }
    };

    let mut g_router = Array2::zeros(router.w_router.dim());
    for j in 0..l {
        g_router.row_mut(j).assign(&v.mapv(|x| x * g_alpha[j]));
    }
    Ok(RouteBackward {
        sae: sae_grads,
        w_router: g_router,
        loss,
    })
}
