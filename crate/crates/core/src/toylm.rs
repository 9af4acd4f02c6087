//! Deterministic frozen toy transformer: byte-level vocabulary, learned
//! absolute position embeddings, pre-norm blocks with causal multi-head
//! attention and a GELU MLP. It exists to harvest multi-layer residual
//! streams, run substitution (patched) forwards, and produce logits for KL
//! and steering experiments. The "residual stream at layer i" is the output
//! of block i after its residual additions.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::envelope::{Envelope, Tensor};
use crate::error::{Error, Result};
use crate::store::{ActivationRecord, ShardHeader, ShardWriter};

pub const TOYLM_TAG: &str = "toy-lm";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            vocab: 256,
            d_model: 48,
            n_layers: 8,
            n_heads: 4,
            mlp_ratio: 4,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("toy model needs at least 2 layers".into()));
        }
        if self.vocab == 0 || self.max_seq == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vocab, max_seq, mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: Array1<f32>,
    ln1_b: Array1<f32>,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    ln2_g: Array1<f32>,
    ln2_b: Array1<f32>,
    fc1: Array2<f32>,
    fc1_b: Array1<f32>,
    fc2: Array2<f32>,
    fc2_b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyLmParams {
    pub config: ToyLmConfig,
    wte: Array2<f32>,
    wpe: Array2<f32>,
    blocks: Vec<Block>,
    lnf_g: Array1<f32>,
    lnf_b: Array1<f32>,
    w_out: Array2<f32>,
}

fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let g: f64 = StandardNormal.sample(rng);
        g as f32 * std
    })
}

impl ToyLmParams {
    /// Frozen random weights, fully determined by the config seed.
    pub fn init(config: ToyLmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let h = d * config.mlp_ratio;
        let wte = gauss_matrix(&mut rng, config.vocab, d, 0.02);
        let wpe = gauss_matrix(&mut rng, config.max_seq, d, 0.02);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: gauss_matrix(&mut rng, d, d, 0.02),
                wk: gauss_matrix(&mut rng, d, d, 0.02),
                wv: gauss_matrix(&mut rng, d, d, 0.02),
                wo: gauss_matrix(&mut rng, d, d, 0.02),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                fc1: gauss_matrix(&mut rng, h, d, 0.02),
                fc1_b: Array1::zeros(h),
                fc2: gauss_matrix(&mut rng, d, h, 0.02),
                fc2_b: Array1::zeros(d),
            });
        }
        let lnf_g = Array1::ones(d);
        let lnf_b = Array1::zeros(d);
        let w_out = gauss_matrix(&mut rng, config.vocab, d, 0.02);
        Ok(ToyLmParams {
            config,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = vec![
            Tensor::new("wte", vec![self.wte.nrows(), self.wte.ncols()], self.wte.iter().copied().collect()),
            Tensor::new("wpe", vec![self.wpe.nrows(), self.wpe.ncols()], self.wpe.iter().copied().collect()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut push2 = |name: &str, a: &Array2<f32>| {
                tensors.push(Tensor::new(
                    format!("block{i}.{name}"),
                    vec![a.nrows(), a.ncols()],
                    a.iter().copied().collect(),
                ));
            };
            push2("wq", &b.wq);
            push2("wk", &b.wk);
            push2("wv", &b.wv);
            push2("wo", &b.wo);
            push2("fc1", &b.fc1);
            push2("fc2", &b.fc2);
            let mut push1 = |name: &str, a: &Array1<f32>| {
                tensors.push(Tensor::new(
                    format!("block{i}.{name}"),
                    vec![a.len()],
                    a.to_vec(),
                ));
            };
            push1("ln1_g", &b.ln1_g);
            push1("ln1_b", &b.ln1_b);
            push1("ln2_g", &b.ln2_g);
            push1("ln2_b", &b.ln2_b);
            push1("fc1_b", &b.fc1_b);
            push1("fc2_b", &b.fc2_b);
        }
        tensors.push(Tensor::new("lnf_g", vec![self.lnf_g.len()], self.lnf_g.to_vec()));
        tensors.push(Tensor::new("lnf_b", vec![self.lnf_b.len()], self.lnf_b.to_vec()));
        tensors.push(Tensor::new(
            "w_out",
            vec![self.w_out.nrows(), self.w_out.ncols()],
            self.w_out.iter().copied().collect(),
        ));
        let meta = format!(
            "vocab={}\nd_model={}\nn_layers={}\nn_heads={}\nmlp_ratio={}\nmax_seq={}\nseed={}\n",
            self.config.vocab,
            self.config.d_model,
            self.config.n_layers,
            self.config.n_heads,
            self.config.mlp_ratio,
            self.config.max_seq,
            self.config.seed
        );
        Envelope {
            tag: TOYLM_TAG.into(),
            meta,
            step: 0,
            tensors,
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let env = Envelope::load(&path)?;
        if env.tag != TOYLM_TAG {
            return Err(Error::Format(format!(
                "expected a {TOYLM_TAG} envelope, found tag `{}`",
                env.tag
            )));
        }
        let mut cfg = ToyLmConfig::default();
        for line in env.meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format("toy-lm meta line missing `=`".into()))?;
            let v: u64 = v
                .parse()
                .map_err(|_| Error::Format(format!("toy-lm meta value for {k} not numeric")))?;
            match k {
                "vocab" => cfg.vocab = v as usize,
                "d_model" => cfg.d_model = v as usize,
                "n_layers" => cfg.n_layers = v as usize,
                "n_heads" => cfg.n_heads = v as usize,
                "mlp_ratio" => cfg.mlp_ratio = v as usize,
                "max_seq" => cfg.max_seq = v as usize,
                "seed" => cfg.seed = v,
                other => return Err(Error::Format(format!("unknown toy-lm meta key {other}"))),
            }
        }
        cfg.validate()?;
        let take2 = |name: &str| -> Result<Array2<f32>> {
            let t = env.tensor(name)?;
            if t.dims.len() != 2 {
                return Err(Error::Format(format!("tensor {name} is not 2-d")));
            }
            Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))
        };
        let take1 = |name: &str| -> Result<Array1<f32>> {
            let t = env.tensor(name)?;
            Ok(Array1::from(t.data.clone()))
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            blocks.push(Block {
                ln1_g: take1(&format!("block{i}.ln1_g"))?,
                ln1_b: take1(&format!("block{i}.ln1_b"))?,
                wq: take2(&format!("block{i}.wq"))?,
                wk: take2(&format!("block{i}.wk"))?,
                wv: take2(&format!("block{i}.wv"))?,
                wo: take2(&format!("block{i}.wo"))?,
                ln2_g: take1(&format!("block{i}.ln2_g"))?,
                ln2_b: take1(&format!("block{i}.ln2_b"))?,
                fc1: take2(&format!("block{i}.fc1"))?,
                fc1_b: take1(&format!("block{i}.fc1_b"))?,
                fc2: take2(&format!("block{i}.fc2"))?,
                fc2_b: take1(&format!("block{i}.fc2_b"))?,
            });
        }
        Ok(ToyLmParams {
            wte: take2("wte")?,
            wpe: take2("wpe")?,
            blocks,
            lnf_g: take1("lnf_g")?,
            lnf_b: take1("lnf_b")?,
            w_out: take2("w_out")?,
            config: cfg,
        })
    }
}

/// Replacement vectors for specific (position, layer) residual-stream slots.
#[derive(Debug, Clone, Default)]
pub struct PatchPlan {
    pub entries: Vec<PatchEntry>,
}

#[derive(Debug, Clone)]
pub struct PatchEntry {
    pub position: usize,
    pub layer: usize,
    pub value: Vec<f32>,
}

impl PatchPlan {
    pub fn push(&mut self, position: usize, layer: usize, value: Vec<f32>) {
        self.entries.push(PatchEntry {
            position,
            layer,
            value,
        });
    }

    fn validate(&self, seq_len: usize, n_layers: usize, d: usize) -> Result<()> {
        let mut bad = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.position >= seq_len || e.layer >= n_layers || e.value.len() != d {
                bad.push(format!(
                    "entry {i} (position {}, layer {}, width {})",
                    e.position,
                    e.layer,
                    e.value.len()
                ));
            } else if !seen.insert((e.position, e.layer)) {
                bad.push(format!(
                    "entry {i} duplicates (position {}, layer {})",
                    e.position, e.layer
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid patch entries: {}", bad.join("; "))))
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutput {
    /// T x vocab logits.
    pub logits: Array2<f32>,
    /// Residual stream after each block: n_layers entries of T x d.
    pub streams: Vec<Array2<f32>>,
}

fn layer_norm(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[j] + b[j];
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

struct BlockOutput {
    x: Array2<f32>,
    attn_weights: Option<Vec<Array2<f32>>>,
}

fn block_forward(block: &Block, x: &Array2<f32>, n_heads: usize, keep_attn: bool) -> BlockOutput {
    let (t, d) = x.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();

    let xn = layer_norm(x, &block.ln1_g, &block.ln1_b);
    let q = xn.dot(&block.wq.t());
    let k = xn.dot(&block.wk.t());
    let v = xn.dot(&block.wv.t());

    let mut attn_out = Array2::<f32>::zeros((t, d));
    let mut kept = if keep_attn { Some(Vec::with_capacity(n_heads)) } else { None };
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut weights = if keep_attn {
            Some(Array2::<f32>::zeros((t, t)))
        } else {
            None
        };
        for i in 0..t {
            // causal: attend to positions <= i
            let mut scores = Vec::with_capacity(i + 1);
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let dot = qh.row(i).dot(&kh.row(j)) * scale;
                max = max.max(dot);
                scores.push(dot);
            }
            let mut total = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                total += *sc;
            }
            for (j, sc) in scores.iter().enumerate() {
                let w = sc / total;
                if let Some(wm) = weights.as_mut() {
                    wm[(i, j)] = w;
                }
                for c in 0..hd {
                    attn_out[(i, h * hd + c)] += w * vh[(j, c)];
                }
            }
        }
        if let (Some(ks), Some(w)) = (kept.as_mut(), weights) {
            ks.push(w);
        }
    }
    let x_attn = x + &attn_out.dot(&block.wo.t());

    let xn2 = layer_norm(&x_attn, &block.ln2_g, &block.ln2_b);
    let mut h1 = xn2.dot(&block.fc1.t());
    for mut row in h1.rows_mut() {
        row += &block.fc1_b;
    }
    h1.mapv_inplace(gelu);
    let mut mlp = h1.dot(&block.fc2.t());
    for mut row in mlp.rows_mut() {
        row += &block.fc2_b;
    }
    BlockOutput {
        x: &x_attn + &mlp,
        attn_weights: kept,
    }
}

fn forward_impl(
    params: &ToyLmParams,
    tokens: &[u32],
    plan: Option<&PatchPlan>,
    keep_attn: bool,
) -> Result<(LmOutput, Vec<Vec<Array2<f32>>>)> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Data(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Data(format!("token id {bad} outside vocab {}", cfg.vocab)));
    }
    if let Some(plan) = plan {
        plan.validate(tokens.len(), cfg.n_layers, cfg.d_model)?;
    }

    let t = tokens.len();
    let d = cfg.d_model;
    let mut x = Array2::<f32>::zeros((t, d));
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &params.wte.row(tok as usize) + &params.wpe.row(i);
        x.row_mut(i).assign(&row);
    }

    let mut streams = Vec::with_capacity(cfg.n_layers);
    let mut attn_all = Vec::new();
    for (layer, block) in params.blocks.iter().enumerate() {
        let out = block_forward(block, &x, cfg.n_heads, keep_attn);
        x = out.x;
        if let Some(w) = out.attn_weights {
            attn_all.push(w);
        }
        if let Some(plan) = plan {
            for e in plan.entries.iter().filter(|e| e.layer == layer) {
                for (c, v) in e.value.iter().enumerate() {
                    x[(e.position, c)] = *v;
                }
            }
        }
        streams.push(x.clone());
    }

    let xf = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = xf.dot(&params.w_out.t());
    Ok((LmOutput { logits, streams }, attn_all))
}

/// Full forward pass capturing logits and every block's residual stream.
pub fn lm_forward(params: &ToyLmParams, tokens: &[u32]) -> Result<LmOutput> {
    forward_impl(params, tokens, None, false).map(|(o, _)| o)
}

/// Forward pass that also returns per-layer, per-head attention weight rows.
pub fn lm_forward_debug(
    params: &ToyLmParams,
    tokens: &[u32],
) -> Result<(LmOutput, Vec<Vec<Array2<f32>>>)> {
    forward_impl(params, tokens, None, true)
}

/// Forward pass with residual-stream replacements applied after each patched
/// block, before subsequent blocks consume them. Different positions may
/// patch different layers within one pass.
pub fn patched_forward(
    params: &ToyLmParams,
    tokens: &[u32],
    plan: &PatchPlan,
) -> Result<Array2<f32>> {
    forward_impl(params, tokens, Some(plan), false).map(|(o, _)| o.logits)
}

/// Routed-layer convention: the half-open range from 1/4 to 3/4 of depth.
pub fn routing_range(n_layers: usize) -> std::ops::Range<u32> {
    (n_layers as u32 / 4)..(3 * n_layers as u32 / 4)
}

/// Stream sequences through the model and write one activation record per
/// token, restricted to `layer_range`. Returns the number of records.
pub fn harvest(
    params: &ToyLmParams,
    sequences: &[Vec<u32>],
    layer_range: std::ops::Range<u32>,
    out_path: impl AsRef<Path>,
    source_tag: &str,
) -> Result<u64> {
    let cfg = &params.config;
    if layer_range.is_empty() || layer_range.end as usize > cfg.n_layers {
        return Err(Error::Config(format!(
            "layer range {layer_range:?} outside 0..{}",
            cfg.n_layers
        )));
    }
    let layer_ids: Vec<u32> = layer_range.clone().collect();
    let mut header = ShardHeader::new(cfg.d_model as u32, layer_ids.clone(), source_tag);
    header.has_token_ids = true;
    let mut writer = ShardWriter::create(out_path, header)?;
    let d = cfg.d_model;
    let mut n = 0u64;
    for (seq_id, tokens) in sequences.iter().enumerate() {
        let out = lm_forward(params, tokens)?;
        for pos in 0..tokens.len() {
            let mut data = Vec::with_capacity(layer_ids.len() * d);
            for &layer in &layer_ids {
                data.extend(out.streams[layer as usize].row(pos).iter());
            }
            writer.push(&ActivationRecord::new(
                seq_id as u64,
                pos as u32,
                Some(tokens[pos]),
                data,
            ))?;
            n += 1;
        }
    }
    writer.finish()?;
    Ok(n)
}

/// Byte-level token stream, chunked into sequences of `seq_len`; a trailing
/// remainder shorter than 2 tokens is dropped.
pub fn bytes_to_sequences(bytes: &[u8], seq_len: usize) -> Vec<Vec<u32>> {
    bytes
        .chunks(seq_len)
        .filter(|c| c.len() >= 2)
        .map(|c| c.iter().map(|b| *b as u32).collect())
        .collect()
}
