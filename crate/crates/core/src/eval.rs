//! Measurement pipeline: normalized MSE, downstream KL divergence via
//! activation substitution, threshold-based interpretable-feature
//! extraction, routing-weight histograms, and feature steering.

use ndarray::{Array2, ArrayView1, ArrayView2};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::store::{apply_normalization, ActivationRecord, NormalizationStats, ShardReader};
use crate::toylm::{lm_forward, patched_forward, PatchPlan, ToyLmParams};
use crate::trainer::Artifact;

/// `sum ||x - x_hat||^2 / sum ||x - mean(x)||^2` over a batch of rows.
pub fn normalized_mse(x: ArrayView2<f32>, x_hat: ArrayView2<f32>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "batch shapes differ: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Data("normalized MSE needs a batch of at least 2".into()));
    }
    let n = x.nrows();
    let d = x.ncols();
    let mut mean = vec![0.0f64; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (xr, hr) in x.rows().into_iter().zip(x_hat.rows()) {
        for j in 0..d {
            let e = xr[j] as f64 - hr[j] as f64;
            num += e * e;
            let c = xr[j] as f64 - mean[j];
            den += c * c;
        }
    }
    if den == 0.0 {
        return Err(Error::Data(
            "constant batch: the mean-predictor denominator is zero".into(),
        ));
    }
    Ok(num / den)
}

#[derive(Debug, Clone)]
pub struct KlResult {
    pub per_position: Vec<f64>,
    pub mean: f64,
}

fn log_softmax_row(logits: ArrayView1<f32>) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v as f64));
    let log_z = logits
        .iter()
        .map(|v| (*v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|v| *v as f64 - log_z).collect()
}

/// KL(P || Q) per position, with P, Q the softmax of the two logit rows,
/// computed in log space.
pub fn kl_divergence(logits_p: ArrayView2<f32>, logits_q: ArrayView2<f32>) -> Result<KlResult> {
    if logits_p.dim() != logits_q.dim() {
        return Err(Error::Shape(format!(
            "logit shapes differ: {:?} vs {:?}",
            logits_p.dim(),
            logits_q.dim()
        )));
    }
    let mut per_position = Vec::with_capacity(logits_p.nrows());
    for (rp, rq) in logits_p.rows().into_iter().zip(logits_q.rows()) {
        let lp = log_softmax_row(rp);
        let lq = log_softmax_row(rq);
        let kl: f64 = lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| a.exp() * (a - b))
            .sum();
        per_position.push(kl);
    }
    let mean = per_position.iter().sum::<f64>() / per_position.len().max(1) as f64;
    Ok(KlResult { per_position, mean })
}

/// What gets substituted into the model during a patched evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstitutionControl {
    /// The artifact's reconstruction (the real measurement).
    Reconstruction,
    /// The captured activation itself (KL must vanish).
    Identity,
    /// A zero vector (ordering control).
    Zero,
}

#[derive(Debug, Clone)]
pub struct SubstitutionEval {
    pub mean_kl: f64,
    pub mean_l0: f64,
    pub mean_nmse: f64,
    pub tokens: usize,
    /// Per-layer substitution-slot fractions (routed archs select per token).
    pub slot_histogram: Vec<f64>,
}

/// Run the toy model over `sequences`, substitute per-token reconstructions
/// at each token's routed (or training) layer in one patched pass per
/// sequence, and report mean KL against the unpatched logits.
pub fn eval_substitution(
    lm: &ToyLmParams,
    artifact: &Artifact,
    stats: &NormalizationStats,
    sequences: &[Vec<u32>],
    control: SubstitutionControl,
) -> Result<SubstitutionEval> {
    if sequences.is_empty() {
        return Err(Error::Data("no evaluation sequences".into()));
    }
    let d = artifact.model.d();
    let l = artifact.layer_ids.len();
    let mut kl_sum = 0.0f64;
    let mut kl_count = 0usize;
    let mut l0_sum = 0usize;
    let mut slot_counts = vec![0usize; l];
    let mut xs: Vec<f32> = Vec::new();
    let mut xhats: Vec<f32> = Vec::new();
    let mut tokens = 0usize;
    let mut tag = 0u64;

    for (seq_id, seq) in sequences.iter().enumerate() {
        let out = lm_forward(lm, seq)?;
        let mut plan = PatchPlan::default();
        for pos in 0..seq.len() {
            // assemble the normalized multi-layer record for this token
            let mut data = Vec::with_capacity(l * d);
            for &layer in &artifact.layer_ids {
                data.extend(out.streams[layer as usize].row(pos).iter());
            }
            let mut rec = ActivationRecord::new(seq_id as u64, pos as u32, Some(seq[pos]), data);
            apply_normalization(&mut rec, stats)?;

            let (slot, x_hat_norm, code) =
                artifact.reconstruct_for_substitution(&rec, artifact.seed ^ tag, None)?;
            tag += 1;
            slot_counts[slot] += 1;
            l0_sum += code.l0();
            tokens += 1;

            // back to model space for the substitution
            let scale = stats.per_layer_scale[slot] as f32;
            let layer_abs = artifact.layer_ids[slot] as usize;
            let replacement: Vec<f32> = match control {
                SubstitutionControl::Reconstruction => {
                    x_hat_norm.iter().map(|v| v / scale).collect()
                }
                SubstitutionControl::Identity => {
                    out.streams[layer_abs].row(pos).to_vec()
                }
                SubstitutionControl::Zero => vec![0.0; d],
            };

            // reconstruction quality of the substituted vector, in the
            // normalized space the SAE trains in
            let x_norm = rec.layer(slot, d);
            xs.extend_from_slice(x_norm);
            xhats.extend(replacement.iter().map(|v| v * scale));
            plan.push(pos, layer_abs, replacement);
        }
        let patched = patched_forward(lm, seq, &plan)?;
        let kl = kl_divergence(out.logits.view(), patched.view())?;
        kl_sum += kl.per_position.iter().sum::<f64>();
        kl_count += kl.per_position.len();
    }

    let rows = tokens;
    let x_mat = Array2::from_shape_vec((rows, d), xs).expect("xs shape");
    let xh_mat = Array2::from_shape_vec((rows, d), xhats).expect("xhats shape");
    let mean_nmse = normalized_mse(x_mat.view(), xh_mat.view())?;
    Ok(SubstitutionEval {
        mean_kl: kl_sum / kl_count as f64,
        mean_l0: l0_sum as f64 / tokens as f64,
        mean_nmse,
        tokens,
        slot_histogram: slot_counts
            .iter()
            .map(|c| *c as f64 / tokens as f64)
            .collect(),
    })
}

#[derive(Debug, Clone)]
pub struct FrontierRow {
    pub k: usize,
    pub mean_l0: f64,
    pub mean_kl: f64,
    pub mean_nmse: f64,
}

/// Evaluate a sweep of artifacts (one per sparsity level) on the same model
/// and sequences.
pub fn kl_frontier(
    lm: &ToyLmParams,
    artifacts: &[(usize, Artifact)],
    stats: &NormalizationStats,
    sequences: &[Vec<u32>],
) -> Result<Vec<FrontierRow>> {
    let mut rows = Vec::with_capacity(artifacts.len());
    for (k, artifact) in artifacts {
        let eval = eval_substitution(lm, artifact, stats, sequences, SubstitutionControl::Reconstruction)?;
        rows.push(FrontierRow {
            k: *k,
            mean_l0: eval.mean_l0,
            mean_kl: eval.mean_kl,
            mean_nmse: eval.mean_nmse,
        });
    }
    Ok(rows)
}

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from("k,mean_l0,mean_kl,mean_nmse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.9e},{:.9e}\n",
            r.k, r.mean_l0, r.mean_kl, r.mean_nmse
        ));
    }
    out
}

/// One above-threshold firing with its surrounding token window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureContext {
    pub feature_id: usize,
    pub token_id: u32,
    pub activation: f32,
    pub sequence_id: u64,
    pub position: u32,
    /// Token ids around the position, clipped at sequence edges.
    pub window: Vec<u32>,
    /// Index of the activated token within `window`.
    pub center: usize,
    pub routed_layer: Option<u32>,
}

/// Retained evidence for one feature: top-2 contexts per activated token id
/// plus every above-threshold activation value for re-filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDossier {
    pub feature_id: usize,
    pub per_token: BTreeMap<u32, Vec<FeatureContext>>,
    pub total_active: usize,
    /// All above-threshold activations; complete when built by
    /// `extract_contexts`, truncated to kept contexts after a file roundtrip.
    pub all_values: Vec<f32>,
}

impl FeatureDossier {
    /// A feature is kept only when it fired in at least four contexts.
    pub fn retained(&self) -> bool {
        self.total_active >= 4
    }

    pub fn kept_contexts(&self) -> impl Iterator<Item = &FeatureContext> {
        self.per_token.values().flatten()
    }
}

/// Ordering for the per-(feature, token) top-2 heap and its oracle:
/// higher activation first, then earlier (sequence, position).
fn context_rank(c: &FeatureContext) -> (f32, u64, u32) {
    (c.activation, c.sequence_id, c.position)
}

fn context_better(a: &FeatureContext, b: &FeatureContext) -> bool {
    let (av, asq, ap) = context_rank(a);
    let (bv, bsq, bp) = context_rank(b);
    av > bv || (av == bv && (asq, ap) < (bsq, bp))
}

/// Insert into a capacity-2 list kept best-first (a min-heap of size 2 over
/// the rank order).
fn keep_top2(slot: &mut Vec<FeatureContext>, c: FeatureContext) {
    let pos = slot
        .iter()
        .position(|existing| context_better(&c, existing))
        .unwrap_or(slot.len());
    slot.insert(pos, c);
    slot.truncate(2);
}

#[derive(Debug, Clone)]
pub struct ExtractSummary {
    pub tokens_scanned: usize,
    pub contexts_emitted: usize,
    pub retained_features: usize,
}

/// Scan shards (which must carry token ids), fire every latent whose
/// activation exceeds `threshold`, and fold the firings into per-feature
/// dossiers. Activations are measured in the normalized space the SAE was
/// trained in.
pub fn extract_contexts(
    artifact: &Artifact,
    stats: &NormalizationStats,
    shards: &[PathBuf],
    threshold: f32,
    window_radius: usize,
) -> Result<(Vec<FeatureDossier>, ExtractSummary)> {
    if threshold <= 0.0 {
        return Err(Error::Config("threshold must be positive".into()));
    }
    // first pass: token text per sequence for the context windows
    let mut sequences: BTreeMap<u64, BTreeMap<u32, u32>> = BTreeMap::new();
    let mut records: Vec<ActivationRecord> = Vec::new();
    for path in shards {
        let reader = ShardReader::open(path)?;
        if !reader.header().has_token_ids {
            return Err(Error::Data(format!(
                "shard {} lacks token ids; context extraction needs them",
                path.display()
            )));
        }
        for rec in reader.read_all()? {
            let token = rec.token_id.ok_or_else(|| {
                Error::Data(format!(
                    "record at sequence {} position {} has no token id",
                    rec.sequence_id, rec.position
                ))
            })?;
            sequences
                .entry(rec.sequence_id)
                .or_default()
                .insert(rec.position, token);
            records.push(rec);
        }
    }

    let mut dossiers: BTreeMap<usize, FeatureDossier> = BTreeMap::new();
    let mut contexts_emitted = 0usize;
    for (i, rec) in records.iter_mut().enumerate() {
        let token_id = rec.token_id.expect("checked above");
        let (sequence_id, position) = (rec.sequence_id, rec.position);
        apply_normalization(rec, stats)?;
        let (code, slot) = artifact.encode_record(rec, artifact.seed ^ i as u64)?;
        let routed_layer = slot.map(|s| artifact.layer_ids[s]);
        for (&feature_id, &activation) in code.indices.iter().zip(&code.values) {
            if activation <= threshold {
                continue;
            }
            let seq_tokens = &sequences[&sequence_id];
            let lo = position.saturating_sub(window_radius as u32);
            let hi = position + window_radius as u32;
            let mut window = Vec::new();
            let mut center = 0usize;
            for (&pos, &tok) in seq_tokens.range(lo..=hi) {
                if pos == position {
                    center = window.len();
                }
                window.push(tok);
            }
            let ctx = FeatureContext {
                feature_id,
                token_id,
                activation,
                sequence_id,
                position,
                window,
                center,
                routed_layer,
            };
            contexts_emitted += 1;
            let dossier = dossiers.entry(feature_id).or_insert_with(|| FeatureDossier {
                feature_id,
                per_token: BTreeMap::new(),
                total_active: 0,
                all_values: Vec::new(),
            });
            dossier.total_active += 1;
            dossier.all_values.push(activation);
            keep_top2(dossier.per_token.entry(token_id).or_default(), ctx);
        }
    }
    let dossiers: Vec<FeatureDossier> = dossiers.into_values().collect();
    let retained_features = dossiers.iter().filter(|d| d.retained()).count();
    Ok((
        dossiers,
        ExtractSummary {
            tokens_scanned: records.len(),
            contexts_emitted,
            retained_features,
        },
    ))
}

/// Retained-feature counts at each threshold, by re-filtering the recorded
/// activation values. Dossiers must come fresh from `extract_contexts` and
/// every threshold must be at least the extraction threshold.
pub fn count_interpretable(dossiers: &[FeatureDossier], thresholds: &[f32]) -> Vec<(f32, usize)> {
    thresholds
        .iter()
        .map(|&tau| {
            let count = dossiers
                .iter()
                .filter(|d| d.all_values.iter().filter(|v| **v > tau).count() >= 4)
                .count();
            (tau, count)
        })
        .collect()
}

/// Per-layer selection fractions over a decision stream.
pub fn routing_histogram(selected_layers: &[usize], num_layers: usize) -> Result<Vec<f64>> {
    if selected_layers.is_empty() {
        return Err(Error::Data("empty decision stream".into()));
    }
    let mut hist = vec![0.0f64; num_layers];
    for &s in selected_layers {
        if s >= num_layers {
            return Err(Error::Shape(format!("selected layer {s} out of range")));
        }
        hist[s] += 1.0;
    }
    for h in &mut hist {
        *h /= selected_layers.len() as f64;
    }
    Ok(hist)
}

pub fn histogram_csv(hist: &[f64], layer_ids: &[u32]) -> String {
    let mut out = String::from("layer,fraction\n");
    for (id, h) in layer_ids.iter().zip(hist) {
        out.push_str(&format!("{id},{h:.6}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// dossier file format: line-delimited, tab-separated
//   F<TAB>feature<TAB>total_active
//   C<TAB>feature<TAB>token<TAB>activation<TAB>layer|-<TAB>seq<TAB>pos<TAB>center<TAB>w0 w1 ...
// ---------------------------------------------------------------------------

pub fn save_dossiers(dossiers: &[FeatureDossier], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in dossiers {
        out.push_str(&format!("F\t{}\t{}\n", d.feature_id, d.total_active));
        for c in d.kept_contexts() {
            let layer = c
                .routed_layer
                .map_or("-".to_string(), |l| l.to_string());
            let window: Vec<String> = c.window.iter().map(|t| t.to_string()).collect();
            out.push_str(&format!(
                "C\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\n",
                c.feature_id,
                c.token_id,
                c.activation,
                layer,
                c.sequence_id,
                c.position,
                c.center,
                window.join(" ")
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dossiers(path: impl AsRef<Path>) -> Result<Vec<FeatureDossier>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dossiers: BTreeMap<usize, FeatureDossier> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = |what: &str| {
            Error::Format(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.first() {
            Some(&"F") => {
                if fields.len() != 3 {
                    return Err(bad("F line needs 3 fields"));
                }
                let feature_id = fields[1].parse().map_err(|_| bad("bad feature id"))?;
                let total_active = fields[2].parse().map_err(|_| bad("bad count"))?;
                dossiers.insert(
                    feature_id,
                    FeatureDossier {
                        feature_id,
                        per_token: BTreeMap::new(),
                        total_active,
                        all_values: Vec::new(),
                    },
                );
            }
            Some(&"C") => {
                if fields.len() != 9 {
                    return Err(bad("C line needs 9 fields"));
                }
                let feature_id: usize = fields[1].parse().map_err(|_| bad("bad feature id"))?;
                let token_id: u32 = fields[2].parse().map_err(|_| bad("bad token id"))?;
                let activation: f32 = fields[3].parse().map_err(|_| bad("bad activation"))?;
                let routed_layer = if fields[4] == "-" {
                    None
                } else {
                    Some(fields[4].parse().map_err(|_| bad("bad layer"))?)
                };
                let sequence_id: u64 = fields[5].parse().map_err(|_| bad("bad sequence"))?;
                let position: u32 = fields[6].parse().map_err(|_| bad("bad position"))?;
                let center: usize = fields[7].parse().map_err(|_| bad("bad center"))?;
                let window: Vec<u32> = if fields[8].is_empty() {
                    Vec::new()
                } else {
                    fields[8]
                        .split(' ')
                        .map(|t| t.parse().map_err(|_| bad("bad window token")))
                        .collect::<Result<_>>()?
                };
                let ctx = FeatureContext {
                    feature_id,
                    token_id,
                    activation,
                    sequence_id,
                    position,
                    window,
                    center,
                    routed_layer,
                };
                let d = dossiers
                    .get_mut(&feature_id)
                    .ok_or_else(|| bad("C line before its F line"))?;
                d.all_values.push(activation);
                keep_top2(d.per_token.entry(token_id).or_default(), ctx);
            }
            _ => return Err(bad("unknown record kind")),
        }
    }
    Ok(dossiers.into_values().collect())
}

#[derive(Debug, Clone)]
pub struct SteerOutcome {
    /// Greedy continuation with no intervention.
    pub original: Vec<u32>,
    /// Greedy continuation with the clamped substitution applied per step.
    pub clamped: Vec<u32>,
    /// Mean |logit delta| per prompt position, patched vs plain.
    pub prompt_deltas: Vec<f64>,
    pub mean_abs_delta: f64,
}

/// Per-position mean |delta| between patched-with-clamp logits and plain
/// logits over a fixed token sequence.
pub fn substitution_logit_deltas(
    lm: &ToyLmParams,
    artifact: &Artifact,
    stats: &NormalizationStats,
    tokens: &[u32],
    clamp: Option<(usize, f32)>,
) -> Result<(Vec<f64>, Array2<f32>)> {
    let out = lm_forward(lm, tokens)?;
    let d = artifact.model.d();
    let l = artifact.layer_ids.len();
    let mut plan = PatchPlan::default();
    for pos in 0..tokens.len() {
        let mut data = Vec::with_capacity(l * d);
        for &layer in &artifact.layer_ids {
            data.extend(out.streams[layer as usize].row(pos).iter());
        }
        let mut rec = ActivationRecord::new(0, pos as u32, Some(tokens[pos]), data);
        apply_normalization(&mut rec, stats)?;
        let (slot, x_hat_norm, _) =
            artifact.reconstruct_for_substitution(&rec, artifact.seed ^ pos as u64, clamp)?;
        let scale = stats.per_layer_scale[slot] as f32;
        plan.push(
            pos,
            artifact.layer_ids[slot] as usize,
            x_hat_norm.iter().map(|v| v / scale).collect(),
        );
    }
    let patched = patched_forward(lm, tokens, &plan)?;
    let vocab = patched.ncols() as f64;
    let deltas: Vec<f64> = out
        .logits
        .rows()
        .into_iter()
        .zip(patched.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>()
                / vocab
        })
        .collect();
    Ok((deltas, patched))
}

fn greedy_next(logits_row: ArrayView1<f32>) -> u32 {
    let mut best = 0usize;
    for i in 1..logits_row.len() {
        if logits_row[i] > logits_row[best] {
            best = i;
        }
    }
    best as u32
}

/// Clamp `feature_id` to `clamp_value` in the routed code at every generated
/// position, substitute the decoded reconstruction, and continue greedily for
/// `horizon` steps. Prompt-level logit deltas compare the clamped
/// substitution against the plain forward on the same prompt tokens.
pub fn steer(
    lm: &ToyLmParams,
    artifact: &Artifact,
    stats: &NormalizationStats,
    prompt: &[u32],
    feature_id: usize,
    clamp_value: f32,
    horizon: usize,
) -> Result<SteerOutcome> {
    if feature_id >= artifact.model.latent_width() {
        return Err(Error::Config(format!(
            "feature {feature_id} out of range for latent width {}",
            artifact.model.latent_width()
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Data("empty steering prompt".into()));
    }
    if prompt.len() + horizon > lm.config.max_seq {
        return Err(Error::Config(format!(
            "prompt {} + horizon {horizon} exceeds max_seq {}",
            prompt.len(),
            lm.config.max_seq
        )));
    }

    let (prompt_deltas, _) =
        substitution_logit_deltas(lm, artifact, stats, prompt, Some((feature_id, clamp_value)))?;
    let mean_abs_delta =
        prompt_deltas.iter().sum::<f64>() / prompt_deltas.len() as f64;

    // original greedy continuation
    let mut original = prompt.to_vec();
    for _ in 0..horizon {
        let out = lm_forward(lm, &original)?;
        original.push(greedy_next(out.logits.row(out.logits.nrows() - 1)));
    }

    // clamped continuation: substitute at the last position each step
    let d = artifact.model.d();
    let l = artifact.layer_ids.len();
    let mut clamped = prompt.to_vec();
    for step in 0..horizon {
        let out = lm_forward(lm, &clamped)?;
        let pos = clamped.len() - 1;
        let mut data = Vec::with_capacity(l * d);
        for &layer in &artifact.layer_ids {
            data.extend(out.streams[layer as usize].row(pos).iter());
        }
        let mut rec = ActivationRecord::new(1, pos as u32, Some(clamped[pos]), data);
        apply_normalization(&mut rec, stats)?;
        let (slot, x_hat_norm, _) = artifact.reconstruct_for_substitution(
            &rec,
            artifact.seed ^ (0x5354 + step as u64),
            Some((feature_id, clamp_value)),
        )?;
        let scale = stats.per_layer_scale[slot] as f32;
        let mut plan = PatchPlan::default();
        plan.push(
            pos,
            artifact.layer_ids[slot] as usize,
            x_hat_norm.iter().map(|v| v / scale).collect(),
        );
        let logits = patched_forward(lm, &clamped, &plan)?;
        clamped.push(greedy_next(logits.row(logits.nrows() - 1)));
    }

    Ok(SteerOutcome {
        original: original[prompt.len()..].to_vec(),
        clamped: clamped[prompt.len()..].to_vec(),
        prompt_deltas,
        mean_abs_delta,
    })
}
