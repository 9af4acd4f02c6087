//! Optimization loop: Adam with the three-phase schedule, periodic decoder
//! renormalization, deterministic batching with epoch-wise shuffles, metric
//! logging, and versioned checkpoints. Dispatches over the six trainable
//! architectures.

use ndarray::{Array1, ArrayView1};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::crosscoder::{
    cc_backward, cc_forward, init_crosscoder, renorm_crosscoder, CrosscoderParams,
};
use crate::envelope::{Envelope, Tensor};
use crate::error::{Error, Result};
use crate::optim::{adam_update, lr_at, AdamHyper, AdamSlot};
use crate::route::{
    init_router, routesae_backward, routesae_forward, splitmix64, RouteForward, RouterKind,
    RouterParams,
};
use crate::sae::{
    decode, encode, init_params, renorm_decoder, sae_backward, Activation, SaeParams, SparseCode,
};
use crate::store::{
    apply_normalization, compute_norm_stats, ActivationRecord, NormalizationStats, ShardReader,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.rsck";
pub const LAST_GOOD_FILE: &str = "last_good.rsck";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Relu,
    TopK,
    RouteHard,
    RouteSoft,
    RouteRandom,
    Crosscoder,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Relu => "relu",
            Architecture::TopK => "topk",
            Architecture::RouteHard => "route-hard",
            Architecture::RouteSoft => "route-soft",
            Architecture::RouteRandom => "route-random",
            Architecture::Crosscoder => "crosscoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => Architecture::Relu,
            "topk" => Architecture::TopK,
            "route-hard" => Architecture::RouteHard,
            "route-soft" => Architecture::RouteSoft,
            "route-random" => Architecture::RouteRandom,
            "crosscoder" => Architecture::Crosscoder,
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture `{other}` (expected relu|topk|route-hard|route-soft|route-random|crosscoder)"
                )))
            }
        })
    }

    pub fn is_routed(&self) -> bool {
        matches!(
            self,
            Architecture::RouteHard | Architecture::RouteSoft | Architecture::RouteRandom
        )
    }

    pub fn router_kind(&self) -> Option<RouterKind> {
        match self {
            Architecture::RouteHard => Some(RouterKind::Hard),
            Architecture::RouteSoft => Some(RouterKind::Soft),
            Architecture::RouteRandom => Some(RouterKind::RandomUniform),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// Latent width M.
    pub latent_width: usize,
    pub k: usize,
    /// L1 penalty, used by the ReLU architecture only.
    pub l1_coefficient: f32,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    pub stable_frac: f64,
    pub decay_frac: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub renorm_every: u64,
    pub seed: u64,
    /// Absolute layer id single-layer architectures train on; defaults to the
    /// last (deepest) layer in the shard.
    pub train_layer: Option<u32>,
}

impl TrainConfig {
    pub fn new(architecture: Architecture, latent_width: usize, k: usize, total_steps: u64) -> Self {
        TrainConfig {
            architecture,
            latent_width,
            k,
            l1_coefficient: 1e-3,
            base_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            stable_frac: 0.75,
            decay_frac: 0.20,
            total_steps,
            batch_size: 64,
            renorm_every: 10,
            seed: 0,
            train_layer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.renorm_every == 0 {
            return Err(Error::Config("renorm_every must be at least 1".into()));
        }
        let sum = self.warmup_frac + self.stable_frac + self.decay_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "schedule fractions sum to {sum}, expected 1"
            )));
        }
        if self.k == 0 || self.k > self.latent_width {
            return Err(Error::Config(format!(
                "k={} out of range 1..={}",
                self.k, self.latent_width
            )));
        }
        Ok(())
    }

    fn echo(&self, d: usize, layer_ids: &[u32], train_layer: Option<u32>) -> String {
        let ids: Vec<String> = layer_ids.iter().map(|i| i.to_string()).collect();
        format!(
            "architecture={}\nd={}\nlayer_ids={}\ntrain_layer={}\nm={}\nk={}\nl1={}\nbase_lr={}\nbeta1={}\nbeta2={}\neps={}\nwarmup_frac={}\nstable_frac={}\ndecay_frac={}\ntotal_steps={}\nbatch_size={}\nrenorm_every={}\nseed={}\n",
            self.architecture,
            d,
            ids.join(","),
            train_layer.map_or("-".to_string(), |t| t.to_string()),
            self.latent_width,
            self.k,
            self.l1_coefficient,
            self.base_lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.warmup_frac,
            self.stable_frac,
            self.decay_frac,
            self.total_steps,
            self.batch_size,
            self.renorm_every,
            self.seed,
        )
    }
}

/// Trainable parameter set for any architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Single(SaeParams<f32>),
    Routed {
        router: RouterParams<f32>,
        sae: SaeParams<f32>,
    },
    Cross(CrosscoderParams<f32>),
}

impl ModelParams {
    pub fn init(config: &TrainConfig, d: usize, num_layers: usize) -> Result<Self> {
        config.validate()?;
        let m = config.latent_width;
        Ok(match config.architecture {
            Architecture::Relu => ModelParams::Single(init_params(
                d,
                m,
                config.k,
                Activation::Relu,
                config.seed,
            )),
            Architecture::TopK => ModelParams::Single(init_params(
                d,
                m,
                config.k,
                Activation::TopK,
                config.seed,
            )),
            Architecture::RouteHard | Architecture::RouteSoft | Architecture::RouteRandom => {
                let kind = config.architecture.router_kind().expect("routed arch");
                ModelParams::Routed {
                    router: init_router(num_layers, d, kind, splitmix64(config.seed ^ 0x524F5554)),
                    sae: init_params(d, m, config.k, Activation::TopK, config.seed),
                }
            }
            Architecture::Crosscoder => ModelParams::Cross(init_crosscoder(
                d,
                m,
                config.k,
                num_layers,
                config.seed,
            )),
        })
    }

    /// Zero-valued copy with identical shapes, used as a gradient accumulator.
    fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for (_, slice) in z.flat_tensors_mut() {
            for v in slice {
                *v = 0.0;
            }
        }
        z
    }

    /// Named flat views over every trainable tensor, in a fixed order.
    pub fn flat_tensors(&self) -> Vec<(String, &[f32])> {
        match self {
            ModelParams::Single(s) => vec![
                ("sae.w_enc".into(), s.w_enc.as_slice().expect("contiguous")),
                ("sae.b_pre".into(), s.b_pre.as_slice().expect("contiguous")),
                ("sae.w_dec".into(), s.w_dec.as_slice().expect("contiguous")),
            ],
            ModelParams::Routed { router, sae } => vec![
                ("router.w".into(), router.w_router.as_slice().expect("contiguous")),
                ("sae.w_enc".into(), sae.w_enc.as_slice().expect("contiguous")),
                ("sae.b_pre".into(), sae.b_pre.as_slice().expect("contiguous")),
                ("sae.w_dec".into(), sae.w_dec.as_slice().expect("contiguous")),
            ],
            ModelParams::Cross(cc) => {
                let mut out = Vec::with_capacity(3 * cc.num_layers());
                for i in 0..cc.num_layers() {
                    out.push((format!("cc.{i}.w_enc"), cc.w_enc[i].as_slice().expect("contiguous")));
                    out.push((format!("cc.{i}.b"), cc.b[i].as_slice().expect("contiguous")));
                    out.push((format!("cc.{i}.w_dec"), cc.w_dec[i].as_slice().expect("contiguous")));
                }
                out
            }
        }
    }

    fn flat_tensors_mut(&mut self) -> Vec<(String, &mut [f32])> {
        match self {
            ModelParams::Single(s) => vec![
                ("sae.w_enc".into(), s.w_enc.as_slice_mut().expect("contiguous")),
                ("sae.b_pre".into(), s.b_pre.as_slice_mut().expect("contiguous")),
                ("sae.w_dec".into(), s.w_dec.as_slice_mut().expect("contiguous")),
            ],
            ModelParams::Routed { router, sae } => vec![
                ("router.w".into(), router.w_router.as_slice_mut().expect("contiguous")),
                ("sae.w_enc".into(), sae.w_enc.as_slice_mut().expect("contiguous")),
                ("sae.b_pre".into(), sae.b_pre.as_slice_mut().expect("contiguous")),
                ("sae.w_dec".into(), sae.w_dec.as_slice_mut().expect("contiguous")),
            ],
            ModelParams::Cross(cc) => {
                let mut out = Vec::new();
                let l = cc.w_enc.len();
                let (enc, bs, dec) = (&mut cc.w_enc, &mut cc.b, &mut cc.w_dec);
                for (i, ((e, b), d)) in enc
                    .iter_mut()
                    .zip(bs.iter_mut())
                    .zip(dec.iter_mut())
                    .enumerate()
                {
                    debug_assert!(i < l);
                    out.push((format!("cc.{i}.w_enc"), e.as_slice_mut().expect("contiguous")));
                    out.push((format!("cc.{i}.b"), b.as_slice_mut().expect("contiguous")));
                    out.push((format!("cc.{i}.w_dec"), d.as_slice_mut().expect("contiguous")));
                }
                out
            }
        }
    }

    /// Tensor shapes matching `flat_tensors` order, for checkpoint dims.
    fn tensor_dims(&self) -> Vec<Vec<usize>> {
        match self {
            ModelParams::Single(s) => vec![
                vec![s.w_enc.nrows(), s.w_enc.ncols()],
                vec![s.b_pre.len()],
                vec![s.w_dec.nrows(), s.w_dec.ncols()],
            ],
            ModelParams::Routed { router, sae } => vec![
                vec![router.w_router.nrows(), router.w_router.ncols()],
                vec![sae.w_enc.nrows(), sae.w_enc.ncols()],
                vec![sae.b_pre.len()],
                vec![sae.w_dec.nrows(), sae.w_dec.ncols()],
            ],
            ModelParams::Cross(cc) => {
                let mut out = Vec::new();
                for i in 0..cc.num_layers() {
                    out.push(vec![cc.w_enc[i].nrows(), cc.w_enc[i].ncols()]);
                    out.push(vec![cc.b[i].len()]);
                    out.push(vec![cc.w_dec[i].nrows(), cc.w_dec[i].ncols()]);
                }
                out
            }
        }
    }

    pub fn renorm(&mut self) -> Result<()> {
        match self {
            ModelParams::Single(s) => renorm_decoder(s),
            ModelParams::Routed { sae, .. } => renorm_decoder(sae),
            ModelParams::Cross(cc) => renorm_crosscoder(cc),
        }
    }

    pub fn latent_width(&self) -> usize {
        match self {
            ModelParams::Single(s) => s.latent_width(),
            ModelParams::Routed { sae, .. } => sae.latent_width(),
            ModelParams::Cross(cc) => cc.latent_width(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            ModelParams::Single(s) => s.d(),
            ModelParams::Routed { sae, .. } => sae.d(),
            ModelParams::Cross(cc) => cc.d(),
        }
    }
}

/// Normalized training set held in memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub records: Vec<ActivationRecord>,
    pub d: usize,
    pub layer_ids: Vec<u32>,
    pub stats: NormalizationStats,
}

impl TrainData {
    pub fn num_layers(&self) -> usize {
        self.layer_ids.len()
    }
}

/// Read shards into memory and normalize them. When `stats` is absent and
/// `normalize` is set, scales are computed from the shards themselves over
/// the default calibration sample.
pub fn load_training_data(
    shards: &[PathBuf],
    stats: Option<NormalizationStats>,
    calibration_tokens: usize,
    normalize: bool,
) -> Result<TrainData> {
    if shards.is_empty() {
        return Err(Error::Data("no training shards supplied".into()));
    }
    let mut records = Vec::new();
    let mut d = 0usize;
    let mut layer_ids: Vec<u32> = Vec::new();
    for (i, path) in shards.iter().enumerate() {
        let reader = ShardReader::open(path)?;
        let header = reader.header().clone();
        if i == 0 {
            d = header.d as usize;
            layer_ids = header.layer_ids.clone();
        } else if header.d as usize != d || header.layer_ids != layer_ids {
            return Err(Error::Shape(format!(
                "shard {} disagrees with the first shard's (d, layer_ids)",
                path.display()
            )));
        }
        records.extend(reader.read_all()?);
    }
    if records.is_empty() {
        return Err(Error::Data("training shards contain no records".into()));
    }
    let stats = if normalize {
        match stats {
            Some(s) => s,
            None => compute_norm_stats(shards, calibration_tokens)?,
        }
    } else {
        NormalizationStats::identity(layer_ids.clone(), d as u32)
    };
    if stats.per_layer_scale.len() != layer_ids.len() {
        return Err(Error::Shape(format!(
            "stats cover {} layers, shards have {}",
            stats.per_layer_scale.len(),
            layer_ids.len()
        )));
    }
    for rec in &mut records {
        apply_normalization(rec, &stats)?;
    }
    Ok(TrainData {
        records,
        d,
        layer_ids,
        stats,
    })
}

/// Complete optimizer state: model, Adam moments (in tensor order), and the
/// number of completed steps.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub moments: Vec<AdamSlot<f32>>,
    pub step: u64,
    pub architecture: Architecture,
    pub layer_ids: Vec<u32>,
    pub train_layer: Option<u32>,
    pub k: usize,
    pub seed: u64,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = Vec::new();
        let dims = self.model.tensor_dims();
        for ((name, slice), dim) in self.model.flat_tensors().into_iter().zip(dims) {
            tensors.push(Tensor::new(name, dim, slice.to_vec()));
        }
        // moments mirror the parameter order
        let names: Vec<String> = self
            .model
            .flat_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (name, slot) in names.iter().zip(&self.moments) {
            tensors.push(Tensor::new(
                format!("adam.m.{name}"),
                vec![slot.m.len()],
                slot.m.clone(),
            ));
            tensors.push(Tensor::new(
                format!("adam.v.{name}"),
                vec![slot.v.len()],
                slot.v.clone(),
            ));
        }
        Envelope {
            tag: self.architecture.tag().to_string(),
            meta: self.config_echo.clone(),
            step: self.step,
            tensors,
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let env = Envelope::load(&path)?;
        let architecture = Architecture::parse(&env.tag)?;

        let mut layer_ids: Vec<u32> = Vec::new();
        let mut train_layer = None;
        let mut k = 0usize;
        let mut d = 0usize;
        let mut m = 0usize;
        let mut seed = 0u64;
        for line in env.meta.lines() {
            if let Some((key, value)) = line.split_once('=') {
                match key {
                    "layer_ids" => {
                        layer_ids = value
                            .split(',')
                            .filter(|s| !s.is_empty())
                            .map(|s| s.parse().map_err(|_| Error::Format("bad layer id".into())))
                            .collect::<Result<_>>()?
                    }
                    "train_layer" if value != "-" => {
                        train_layer = Some(
                            value
                                .parse()
                                .map_err(|_| Error::Format("bad train_layer".into()))?,
                        )
                    }
                    "k" => k = value.parse().map_err(|_| Error::Format("bad k".into()))?,
                    "d" => d = value.parse().map_err(|_| Error::Format("bad d".into()))?,
                    "m" => m = value.parse().map_err(|_| Error::Format("bad m".into()))?,
                    "seed" => seed = value.parse().map_err(|_| Error::Format("bad seed".into()))?,
                    _ => {}
                }
            }
        }
        if layer_ids.is_empty() || k == 0 || d == 0 || m == 0 {
            return Err(Error::Format(
                "checkpoint meta is missing layer_ids/k/d/m".into(),
            ));
        }

        let arr2 = |name: &str, rows: usize, cols: usize| -> Result<ndarray::Array2<f32>> {
            let t = env.tensor(name)?;
            if t.dims != vec![rows, cols] {
                return Err(Error::Shape(format!(
                    "tensor {name} has dims {:?}, expected [{rows}, {cols}]",
                    t.dims
                )));
            }
            ndarray::Array2::from_shape_vec((rows, cols), t.data.clone())
                .map_err(|e| Error::Shape(format!("{name}: {e}")))
        };
        let arr1 = |name: &str, len: usize| -> Result<Array1<f32>> {
            let t = env.tensor(name)?;
            if t.data.len() != len {
                return Err(Error::Shape(format!("tensor {name} has wrong length")));
            }
            Ok(Array1::from(t.data.clone()))
        };

        let l = layer_ids.len();
        let model = match architecture {
            Architecture::Relu | Architecture::TopK => ModelParams::Single(SaeParams {
                w_enc: arr2("sae.w_enc", m, d)?,
                b_pre: arr1("sae.b_pre", d)?,
                w_dec: arr2("sae.w_dec", d, m)?,
                activation: if architecture == Architecture::Relu {
                    Activation::Relu
                } else {
                    Activation::TopK
                },
                k,
            }),
            Architecture::RouteHard | Architecture::RouteSoft | Architecture::RouteRandom => {
                ModelParams::Routed {
                    router: RouterParams {
                        w_router: arr2("router.w", l, d)?,
                        kind: architecture.router_kind().expect("routed arch"),
                    },
                    sae: SaeParams {
                        w_enc: arr2("sae.w_enc", m, d)?,
                        b_pre: arr1("sae.b_pre", d)?,
                        w_dec: arr2("sae.w_dec", d, m)?,
                        activation: Activation::TopK,
                        k,
                    },
                }
            }
            Architecture::Crosscoder => {
                let mut w_enc = Vec::with_capacity(l);
                let mut w_dec = Vec::with_capacity(l);
                let mut b = Vec::with_capacity(l);
                for i in 0..l {
                    w_enc.push(arr2(&format!("cc.{i}.w_enc"), m, d)?);
                    b.push(arr1(&format!("cc.{i}.b"), d)?);
                    w_dec.push(arr2(&format!("cc.{i}.w_dec"), d, m)?);
                }
                ModelParams::Cross(CrosscoderParams { w_enc, w_dec, b, k })
            }
        };

        let mut moments = Vec::new();
        for (name, slice) in model.flat_tensors() {
            let mt = env.tensor(&format!("adam.m.{name}"))?;
            let vt = env.tensor(&format!("adam.v.{name}"))?;
            if mt.data.len() != slice.len() || vt.data.len() != slice.len() {
                return Err(Error::Shape(format!("adam moments for {name} have wrong length")));
            }
            moments.push(AdamSlot {
                m: mt.data.clone(),
                v: vt.data.clone(),
            });
        }
        Ok(Checkpoint {
            model,
            moments,
            step: env.step,
            architecture,
            layer_ids,
            train_layer,
            k,
            seed,
            config_echo: env.meta,
        })
    }
}

/// Per-step training metrics.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l0: f64,
    pub routed_histogram: Option<Vec<f64>>,
}

impl StepMetrics {
    pub fn tsv_line(&self) -> String {
        let hist = match &self.routed_histogram {
            Some(h) => h
                .iter()
                .map(|f| format!("{f:.6}"))
                .collect::<Vec<_>>()
                .join(","),
            None => "-".to_string(),
        };
        format!(
            "{}\t{:.10e}\t{:.10e}\t{:.4}\t{}",
            self.step, self.lr, self.loss, self.l0, hist
        )
    }
}

fn layer_views<'a>(rec: &'a ActivationRecord, l: usize, d: usize) -> Vec<ArrayView1<'a, f32>> {
    (0..l)
        .map(|i| ArrayView1::from(&rec.data[i * d..(i + 1) * d]))
        .collect()
}

/// Accumulate one sample's gradients (scaled by `w`) into the accumulator.
fn accumulate(acc: &mut ModelParams, sample: &SampleGrads, w: f32) {
    match (acc, sample) {
        (ModelParams::Single(a), SampleGrads::Single(g)) => {
            a.w_enc.scaled_add(w, &g.w_enc);
            a.b_pre.scaled_add(w, &g.b_pre);
            a.w_dec.scaled_add(w, &g.w_dec);
        }
        (ModelParams::Routed { router, sae }, SampleGrads::Routed { w_router, sae: g }) => {
            router.w_router.scaled_add(w, w_router);
            sae.w_enc.scaled_add(w, &g.w_enc);
            sae.b_pre.scaled_add(w, &g.b_pre);
            sae.w_dec.scaled_add(w, &g.w_dec);
        }
        (ModelParams::Cross(a), SampleGrads::Cross(g)) => {
            for i in 0..a.w_enc.len() {
                a.w_enc[i].scaled_add(w, &g.w_enc[i]);
                a.b[i].scaled_add(w, &g.b[i]);
                a.w_dec[i].scaled_add(w, &g.w_dec[i]);
            }
        }
        _ => unreachable!("gradient kind matches model kind"),
    }
}

enum SampleGrads {
    Single(crate::sae::SaeGradients<f32>),
    Routed {
        w_router: ndarray::Array2<f32>,
        sae: crate::sae::SaeGradients<f32>,
    },
    Cross(crate::crosscoder::CcGradients<f32>),
}

struct SampleOutcome {
    grads: SampleGrads,
    loss: f32,
    l0: usize,
    selected_layer: Option<usize>,
}

fn sample_step(
    model: &ModelParams,
    rec: &ActivationRecord,
    l: usize,
    d: usize,
    train_slot: usize,
    l1: f32,
    sample_tag: u64,
) -> Result<SampleOutcome> {
    match model {
        ModelParams::Single(sae) => {
            let x = ArrayView1::from(rec.layer(train_slot, d));
            let code = encode(sae, x);
            let l0 = code.l0();
            let (grads, loss) = sae_backward(sae, x, &code, l1)?;
            Ok(SampleOutcome {
                grads: SampleGrads::Single(grads),
                loss,
                l0,
                selected_layer: None,
            })
        }
        ModelParams::Routed { router, sae } => {
            let views = layer_views(rec, l, d);
            let fwd = routesae_forward(router, sae, &views, sample_tag)?;
            let back = routesae_backward(router, sae, &views, &fwd)?;
            Ok(SampleOutcome {
                l0: fwd.code.l0(),
                selected_layer: Some(fwd.decision.selected_layer),
                loss: back.loss,
                grads: SampleGrads::Routed {
                    w_router: back.w_router,
                    sae: back.sae,
                },
            })
        }
        ModelParams::Cross(cc) => {
            let views = layer_views(rec, l, d);
            let fwd = cc_forward(cc, &views)?;
            let (grads, loss) = cc_backward(cc, &views, &fwd)?;
            Ok(SampleOutcome {
                grads: SampleGrads::Cross(grads),
                loss,
                l0: fwd.code.l0(),
                selected_layer: None,
            })
        }
    }
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x45504F43 ^ epoch));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Resolve the absolute train layer to a slot index in `layer_ids`.
fn resolve_train_slot(config: &TrainConfig, layer_ids: &[u32]) -> Result<(usize, u32)> {
    match config.train_layer {
        Some(abs) => layer_ids
            .iter()
            .position(|id| *id == abs)
            .map(|slot| (slot, abs))
            .ok_or_else(|| {
                Error::Config(format!(
                    "train_layer {abs} is not among the shard layers {layer_ids:?}"
                ))
            }),
        None => {
            let slot = layer_ids.len() - 1;
            Ok((slot, layer_ids[slot]))
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Run the training loop. `resume` continues from a saved checkpoint;
/// `out_dir`, when given, receives the metrics log and the final checkpoint.
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with_callback(config, data, resume, out_dir, None, |_, _| {})
}

/// As `train`, but optionally interrupt after `stop_at` steps (the schedule
/// still spans `total_steps`) and observe the model after every step.
pub fn train_with_callback(
    config: &TrainConfig,
    data: &TrainData,
    resume: Option<Checkpoint>,
    out_dir: Option<&Path>,
    stop_at: Option<u64>,
    mut after_step: impl FnMut(u64, &ModelParams),
) -> Result<TrainOutcome> {
    config.validate()?;
    let l = data.num_layers();
    let d = data.d;
    let n = data.records.len();
    let (train_slot, train_layer_abs) = resolve_train_slot(config, &data.layer_ids)?;
    let single_layer = !config.architecture.is_routed() && config.architecture != Architecture::Crosscoder;
    let train_layer_meta = if single_layer { Some(train_layer_abs) } else { None };

    let (mut model, mut moments, start_step) = match resume {
        Some(ckpt) => {
            if ckpt.architecture != config.architecture {
                return Err(Error::Config(format!(
                    "checkpoint architecture {} != configured {}",
                    ckpt.architecture, config.architecture
                )));
            }
            if ckpt.step > config.total_steps {
                return Err(Error::Config(format!(
                    "checkpoint already at step {}, beyond total_steps {}",
                    ckpt.step, config.total_steps
                )));
            }
            (ckpt.model, ckpt.moments, ckpt.step)
        }
        None => {
            let model = ModelParams::init(config, d, l)?;
            let moments = model
                .flat_tensors()
                .iter()
                .map(|(_, s)| AdamSlot::zeros(s.len()))
                .collect();
            (model, moments, 0)
        }
    };

    let hyper = AdamHyper::<f32> {
        beta1: config.beta1 as f32,
        beta2: config.beta2 as f32,
        eps: config.eps as f32,
    };
    let echo = config.echo(d, &data.layer_ids, train_layer_meta);
    let make_ckpt = |model: &ModelParams, moments: &Vec<AdamSlot<f32>>, step: u64| Checkpoint {
        model: model.clone(),
        moments: moments.clone(),
        step,
        architecture: config.architecture,
        layer_ids: data.layer_ids.clone(),
        train_layer: train_layer_meta,
        k: config.k,
        seed: config.seed,
        config_echo: echo.clone(),
    };

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((std::io::BufWriter::new(file), path))
        }
        None => None,
    };

    let end_step = stop_at.unwrap_or(config.total_steps).min(config.total_steps);
    let mut all_metrics = Vec::with_capacity(end_step.saturating_sub(start_step) as usize);
    let mut last_good = model.clone();
    let mut last_good_step = start_step;
    let mut cached_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    let inv_b = 1.0f32 / config.batch_size as f32;

    for step in start_step..end_step {
        let lr = lr_at(
            step,
            config.total_steps,
            config.base_lr,
            config.warmup_frac,
            config.stable_frac,
            config.decay_frac,
        )? as f32;

        let mut grad_acc = model.zeros_like();
        let mut loss_sum = 0.0f64;
        let mut l0_sum = 0usize;
        let mut hist = vec![0usize; l];
        let mut routed = false;
        for b in 0..config.batch_size {
            let global = step * config.batch_size as u64 + b as u64;
            let epoch = global / n as u64;
            if epoch != cached_epoch {
                perm = epoch_permutation(config.seed, epoch, n);
                cached_epoch = epoch;
            }
            let rec = &data.records[perm[(global % n as u64) as usize]];
            let outcome = sample_step(
                &model,
                rec,
                l,
                d,
                train_slot,
                config.l1_coefficient,
                config.seed ^ global,
            )?;
            loss_sum += outcome.loss as f64;
            l0_sum += outcome.l0;
            if let Some(sel) = outcome.selected_layer {
                hist[sel] += 1;
                routed = true;
            }
            accumulate(&mut grad_acc, &outcome.grads, inv_b);
        }
        let loss = loss_sum / config.batch_size as f64;

        if !loss.is_finite() {
            if let Some(dir) = out_dir {
                make_ckpt(&last_good, &moments, last_good_step).save(dir.join(LAST_GOOD_FILE))?;
            }
            return Err(Error::Data(format!(
                "loss diverged (non-finite) at step {step}; last good state is from step {last_good_step}"
            )));
        }

        // optimizer update in fixed tensor order
        {
            let grads = grad_acc.flat_tensors();
            let mut params = model.flat_tensors_mut();
            for (slot_idx, ((name, param), (gname, grad))) in
                params.iter_mut().zip(grads.iter()).enumerate()
            {
                debug_assert_eq!(name, gname);
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Data(format!(
                        "non-finite gradient in `{name}` at step {step}"
                    )));
                }
                adam_update(param, grad, &mut moments[slot_idx], step + 1, lr, &hyper)?;
            }
        }

        let completed = step + 1;
        if completed % config.renorm_every == 0 {
            model.renorm()?;
            last_good = model.clone();
            last_good_step = completed;
        }

        let metrics = StepMetrics {
            step,
            lr: lr as f64,
            loss,
            l0: l0_sum as f64 / config.batch_size as f64,
            routed_histogram: if routed {
                Some(hist.iter().map(|c| *c as f64 / config.batch_size as f64).collect())
            } else {
                None
            },
        };
        if let Some((file, path)) = metrics_file.as_mut() {
            writeln!(file, "{}", metrics.tsv_line()).map_err(|e| Error::io(&*path, e))?;
        }
        all_metrics.push(metrics);
        after_step(completed, &model);
    }

    // final renormalization on completed runs, unless the last step was
    // already a boundary; interrupted runs keep the raw mid-training state
    if end_step == config.total_steps && config.total_steps % config.renorm_every != 0 {
        model.renorm()?;
    }
    let checkpoint = make_ckpt(&model, &moments, end_step);
    if let Some((mut file, path)) = metrics_file {
        file.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics: all_metrics,
    })
}

/// Eval-facing view of a trained model: encode/reconstruct activation
/// records in the normalized space.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub model: ModelParams,
    pub architecture: Architecture,
    pub layer_ids: Vec<u32>,
    pub train_layer: Option<u32>,
    pub k: usize,
    pub seed: u64,
}

impl Artifact {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Artifact {
            architecture: ckpt.architecture,
            layer_ids: ckpt.layer_ids,
            train_layer: ckpt.train_layer,
            k: ckpt.k,
            seed: ckpt.seed,
            model: ckpt.model,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_checkpoint(Checkpoint::load(path)?))
    }

    fn train_slot(&self) -> Result<usize> {
        match self.train_layer {
            Some(abs) => self
                .layer_ids
                .iter()
                .position(|id| *id == abs)
                .ok_or_else(|| Error::Format("train_layer missing from layer_ids".into())),
            None => Ok(self.layer_ids.len() - 1),
        }
    }

    /// Encode one normalized record. Returns the sparse code and, for
    /// single-layer and routed architectures, the slot whose activation the
    /// code describes.
    pub fn encode_record(
        &self,
        rec: &ActivationRecord,
        sample_tag: u64,
    ) -> Result<(SparseCode<f32>, Option<usize>)> {
        let d = self.model.d();
        let l = self.layer_ids.len();
        match &self.model {
            ModelParams::Single(sae) => {
                let slot = self.train_slot()?;
                let x = ArrayView1::from(rec.layer(slot, d));
                Ok((encode(sae, x), Some(slot)))
            }
            ModelParams::Routed { router, sae } => {
                let views = layer_views(rec, l, d);
                let fwd = routesae_forward(router, sae, &views, sample_tag)?;
                Ok((fwd.code, Some(fwd.decision.selected_layer)))
            }
            ModelParams::Cross(cc) => {
                let views = layer_views(rec, l, d);
                let fwd = cc_forward(cc, &views)?;
                Ok((fwd.code, None))
            }
        }
    }

    /// Full routed forward for one normalized record (routed archs only).
    pub fn route_forward(
        &self,
        rec: &ActivationRecord,
        sample_tag: u64,
    ) -> Result<RouteForward<f32>> {
        let d = self.model.d();
        let l = self.layer_ids.len();
        match &self.model {
            ModelParams::Routed { router, sae } => {
                let views = layer_views(rec, l, d);
                routesae_forward(router, sae, &views, sample_tag)
            }
            _ => Err(Error::Config(
                "route_forward requires a routed architecture".into(),
            )),
        }
    }

    /// Substitution target for one normalized record: the slot to patch and
    /// the reconstruction of that slot's activation (normalized space), with
    /// an optional latent clamp applied before decoding.
    ///
    /// Routed architectures reconstruct `x_route = p * x_sel`; the
    /// reconstruction is divided by that probability so the patched vector
    /// lives on the scale of the original layer activation.
    pub fn reconstruct_for_substitution(
        &self,
        rec: &ActivationRecord,
        sample_tag: u64,
        clamp: Option<(usize, f32)>,
    ) -> Result<(usize, Array1<f32>, SparseCode<f32>)> {
        let d = self.model.d();
        match &self.model {
            ModelParams::Single(sae) => {
                let slot = self.train_slot()?;
                let x = ArrayView1::from(rec.layer(slot, d));
                let mut code = encode(sae, x);
                if let Some((feature, value)) = clamp {
                    code.set(feature, value);
                }
                let x_hat = decode(sae, &code)?;
                Ok((slot, x_hat, code))
            }
            ModelParams::Routed { router, sae } => {
                let l = self.layer_ids.len();
                let views = layer_views(rec, l, d);
                let fwd = routesae_forward(router, sae, &views, sample_tag)?;
                let mut code = fwd.code;
                if let Some((feature, value)) = clamp {
                    code.set(feature, value);
                }
                let x_hat = decode(sae, &code)?;
                let slot = fwd.decision.selected_layer;
                let p = fwd.decision.probs[slot];
                Ok((slot, x_hat.mapv(|v| v / p), code))
            }
            ModelParams::Cross(_) => Err(Error::Config(
                "crosscoder produces one reconstruction per layer; substitution is not defined for it"
                    .into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{write_shard, ShardHeader};
    use crate::synth::{gen_dictionary, gen_samples, write_synth_shard, SyntheticSpec};

    fn synth_data(spec: &SyntheticSpec, n: usize) -> TrainData {
        let dir = tempfile::tempdir().unwrap();
        let (dict, peaks) = gen_dictionary(spec).unwrap();
        let data = gen_samples(spec, &dict, &peaks, n).unwrap();
        let shard = dir.path().join("s.rsae");
        let sidecar = dir.path().join("s.rsgt");
        write_synth_shard(spec, &data, &shard, &sidecar).unwrap();
        load_training_data(&[shard], None, 100_000, true).unwrap()
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            m_true: 16,
            d: 8,
            num_layers: 3,
            sparsity: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_total_steps_is_rejected() {
        let config = TrainConfig::new(Architecture::TopK, 16, 2, 0);
        assert!(config.validate().is_err());
    }

    #[test]
    fn short_training_reduces_loss() {
        let data = synth_data(&tiny_spec(), 2000);
        for arch in [
            Architecture::TopK,
            Architecture::Relu,
            Architecture::RouteHard,
            Architecture::RouteSoft,
            Architecture::RouteRandom,
            Architecture::Crosscoder,
        ] {
            let mut config = TrainConfig::new(arch, 32, 2, 300);
            config.seed = 7;
            config.batch_size = 32;
            let out = train(&config, &data, None, None).unwrap();
            let first = out.metrics.first().unwrap().loss;
            let tail: f64 = out.metrics.iter().rev().take(20).map(|m| m.loss).sum::<f64>() / 20.0;
            assert!(
                tail < first,
                "{arch}: loss did not improve ({first} -> {tail})"
            );
            if arch == Architecture::TopK || arch.is_routed() {
                assert!(out.metrics.iter().all(|m| m.l0 == 2.0), "{arch}: L0 != k");
            }
            if arch.is_routed() {
                let h = out.metrics.last().unwrap().routed_histogram.as_ref().unwrap();
                assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoder_columns_unit_norm_at_every_renorm_boundary() {
        let data = synth_data(&tiny_spec(), 500);
        let mut config = TrainConfig::new(Architecture::RouteHard, 16, 2, 60);
        config.batch_size = 8;
        let mut checked = 0;
        train_with_callback(&config, &data, None, None, None, |completed, model| {
            if completed % 10 == 0 {
                if let ModelParams::Routed { sae, .. } = model {
                    for j in 0..sae.latent_width() {
                        let norm: f32 =
                            sae.w_dec.column(j).iter().map(|v| v * v).sum::<f32>().sqrt();
                        assert!((norm - 1.0).abs() < 1e-6, "step {completed} column {j}");
                    }
                    checked += 1;
                }
            }
        })
        .unwrap();
        assert_eq!(checked, 6);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_data(&tiny_spec(), 300);
        let mut config = TrainConfig::new(Architecture::Crosscoder, 16, 2, 20);
        config.batch_size = 8;
        let out = train(&config, &data, None, Some(dir.path())).unwrap();
        let loaded = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(loaded.step, 20);
        let a: Vec<u32> = out
            .checkpoint
            .model
            .flat_tensors()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
            .collect();
        let b: Vec<u32> = loaded
            .model
            .flat_tensors()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(a, b);
        for (sa, sb) in out.checkpoint.moments.iter().zip(&loaded.moments) {
            assert_eq!(
                sa.m.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                sb.m.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(
                sa.v.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                sb.v.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_training_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_data(&tiny_spec(), 400);
        for arch in [Architecture::TopK, Architecture::RouteHard, Architecture::RouteRandom] {
            let mut config = TrainConfig::new(arch, 16, 2, 100);
            config.batch_size = 8;
            config.seed = 11;
            let full = train(&config, &data, None, None).unwrap();

            let half = train_with_callback(&config, &data, None, Some(dir.path()), Some(50), |_, _| {})
                .unwrap();
            assert_eq!(half.checkpoint.step, 50);
            let reloaded = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
            let resumed = train(&config, &data, Some(reloaded), None).unwrap();

            let a: Vec<u32> = full
                .checkpoint
                .model
                .flat_tensors()
                .iter()
                .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
                .collect();
            let b: Vec<u32> = resumed
                .checkpoint
                .model
                .flat_tensors()
                .iter()
                .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
                .collect();
            assert_eq!(a, b, "{arch}: resumption diverged");
        }
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let data = synth_data(&tiny_spec(), 300);
        let mut config = TrainConfig::new(Architecture::RouteSoft, 16, 2, 40);
        config.batch_size = 8;
        let a = train(&config, &data, None, None).unwrap();
        let b = train(&config, &data, None, None).unwrap();
        let av: Vec<u32> = a
            .checkpoint
            .model
            .flat_tensors()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
            .collect();
        let bv: Vec<u32> = b
            .checkpoint
            .model
            .flat_tensors()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(av, bv);
    }

    #[test]
    fn corrupted_checkpoint_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rsck");
        std::fs::write(&path, b"RSCKgarbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn train_layer_resolution() {
        let dir = tempfile::tempdir().unwrap();
        // shard with layers 3,5,9
        let mut header = ShardHeader::new(4, vec![3, 5, 9], "t");
        header.n_tokens = 4;
        let records = (0..4).map(|i| {
            ActivationRecord::new(i, 0, None, vec![0.5; 12])
        });
        let path = dir.path().join("t.rsae");
        write_shard(&header, records, &path).unwrap();
        let data = load_training_data(&[path], None, 10, false).unwrap();

        let mut config = TrainConfig::new(Architecture::TopK, 8, 2, 5);
        config.batch_size = 2;
        // default trains the deepest layer
        let (slot, abs) = resolve_train_slot(&config, &data.layer_ids).unwrap();
        assert_eq!((slot, abs), (2, 9));
        config.train_layer = Some(5);
        let (slot, abs) = resolve_train_slot(&config, &data.layer_ids).unwrap();
        assert_eq!((slot, abs), (1, 5));
        config.train_layer = Some(4);
        assert!(resolve_train_slot(&config, &data.layer_ids).is_err());
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_data(&tiny_spec(), 200);
        let mut config = TrainConfig::new(Architecture::TopK, 16, 2, 100);
        config.batch_size = 4;
        config.base_lr = 1e18; // force blow-up
        let err = train(&config, &data, None, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        assert!(dir.path().join(LAST_GOOD_FILE).exists());
    }
}
