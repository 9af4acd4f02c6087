//! Command-line entry point wiring every workflow: synthetic data, toy-model
//! harvesting, normalization, training, evaluation, feature extraction,
//! interpretation prompts/scoring, steering, and frontier export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/contract error.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use routesae::config::RunConfig;
use routesae::error::{Error, Result};
use routesae::eval::{
    count_interpretable, eval_substitution, extract_contexts, frontier_csv, histogram_csv,
    kl_frontier, load_dossiers, save_dossiers, steer, SubstitutionControl,
};
use routesae::interp::{
    score_features, write_prompts, EndpointConfig, ResponseSource, ENV_MODEL,
};
use routesae::store::{compute_norm_stats, NormalizationStats, ShardReader};
use routesae::synth::{gen_dictionary, gen_samples, write_synth_shard};
use routesae::toylm::{bytes_to_sequences, harvest, routing_range, ToyLmParams};
use routesae::trainer::{load_training_data, train, Artifact, ModelParams};

#[derive(Parser)]
#[command(
    name = "routesae",
    version,
    about = "Multi-layer sparse autoencoder lab: routed shared-SAE training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run file with [section] key = value blocks.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override [run] out directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override [train] architecture.
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Override [train] k.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Override [eval] threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Force offline interpretation (replay directory required).
    #[arg(long, global = true)]
    offline: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-layer shard plus its ground-truth sidecar.
    GenSynth,
    /// Run the toy model over a token stream and write activation shards.
    Harvest,
    /// Compute per-layer normalization statistics from shards.
    NormStats,
    /// Train an architecture on activation shards.
    Train,
    /// Reconstruction quality (normalized MSE) of a checkpoint on shards.
    EvalMse,
    /// Downstream KL divergence via activation substitution.
    EvalKl,
    /// Extract above-threshold feature contexts into dossiers.
    ExtractContexts,
    /// Retained-feature counts across thresholds.
    CountFeatures,
    /// Write one interpretation prompt file per retained feature.
    InterpPrompts,
    /// Score sampled features via an endpoint or offline replay.
    InterpScore,
    /// Clamp a latent and compare steered generation against the original.
    Steer,
    /// Sparsity-sweep table of (k, L0, KL, NMSE) over existing checkpoints.
    ExportFrontier,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("routesae: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("run", "seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("run", "out", out.display().to_string());
    }
    if let Some(arch) = &cli.arch {
        cfg.set("train", "architecture", arch.clone());
    }
    if let Some(k) = cli.k {
        cfg.set("train", "k", k.to_string());
    }
    if let Some(threshold) = cli.threshold {
        cfg.set("eval", "threshold", threshold.to_string());
    }
    if cli.offline {
        cfg.set("interp", "offline", "true");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenSynth => cmd_gen_synth(&cfg),
        Command::Harvest => cmd_harvest(&cfg),
        Command::NormStats => cmd_norm_stats(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::EvalMse => cmd_eval_mse(&cfg),
        Command::EvalKl => cmd_eval_kl(&cfg),
        Command::ExtractContexts => cmd_extract_contexts(&cfg),
        Command::CountFeatures => cmd_count_features(&cfg),
        Command::InterpPrompts => cmd_interp_prompts(&cfg),
        Command::InterpScore => cmd_interp_score(&cfg),
        Command::Steer => cmd_steer(&cfg),
        Command::ExportFrontier => cmd_export_frontier(&cfg),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen_synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let spec = cfg.synth_spec()?;
    let tokens = cfg.usize_or("synth", "tokens", 50_000)?;
    let (dict, peaks) = gen_dictionary(&spec)?;
    let data = gen_samples(&spec, &dict, &peaks, tokens)?;
    let shard = out.join("synth.rsae");
    let sidecar = out.join("synth.rsgt");
    write_synth_shard(&spec, &data, &shard, &sidecar)?;
    println!(
        "gen-synth: {} tokens (m_true={}, d={}, layers={}, s={}) -> {}",
        tokens,
        spec.m_true,
        spec.d,
        spec.num_layers,
        spec.sparsity,
        shard.display()
    );
    Ok(())
}

fn load_toylm(cfg: &RunConfig) -> Result<ToyLmParams> {
    match cfg.get("toylm", "weights") {
        Some(path) => ToyLmParams::load(path),
        None => ToyLmParams::init(cfg.toylm_config()?),
    }
}

fn load_sequences(cfg: &RunConfig, section: &str) -> Result<Vec<Vec<u32>>> {
    let input = cfg.require(section, if section == "harvest" { "input" } else { "sequences_input" })?;
    let format = cfg.get(section, "format").unwrap_or("bytes");
    let path = PathBuf::from(input);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let seq_len = cfg.usize_or(section, "seq_len", 64)?;
    let mut sequences = match format {
        "bytes" => bytes_to_sequences(&bytes, seq_len),
        "u32" => {
            if bytes.len() % 4 != 0 {
                return Err(Error::Format(format!(
                    "{}: u32 token file length not a multiple of 4",
                    path.display()
                )));
            }
            let tokens: Vec<u32> = bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tokens
                .chunks(seq_len)
                .filter(|c| c.len() >= 2)
                .map(|c| c.to_vec())
                .collect()
        }
        other => {
            return Err(Error::Config(format!(
                "[{section}] format: expected bytes|u32, got `{other}`"
            )))
        }
    };
    if let Some(cap) = cfg.get(section, "max_sequences") {
        let cap: usize = cap
            .parse()
            .map_err(|_| Error::Config("bad max_sequences".into()))?;
        sequences.truncate(cap);
    }
    if sequences.is_empty() {
        return Err(Error::Data(format!("{} yielded no sequences", path.display())));
    }
    Ok(sequences)
}

fn cmd_harvest(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let lm = load_toylm(cfg)?;
    let sequences = load_sequences(cfg, "harvest")?;
    let default_range = routing_range(lm.config.n_layers);
    let lo = cfg.u64_or("harvest", "layer_lo", default_range.start as u64)? as u32;
    let hi = cfg.u64_or("harvest", "layer_hi", default_range.end as u64)? as u32;
    let shard = out.join("activations.rsae");
    let n = harvest(&lm, &sequences, lo..hi, &shard, "toy-lm harvest")?;
    let weights = out.join("toylm.rsck");
    lm.save(&weights)?;
    println!(
        "harvest: {} sequences -> {} records over layers [{lo}..{hi}) -> {}",
        sequences.len(),
        n,
        shard.display()
    );
    Ok(())
}

fn cmd_norm_stats(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let shards = cfg.paths("data", "shards");
    if shards.is_empty() {
        return Err(Error::Config("[data] shards is required".into()));
    }
    let calibration = cfg.usize_or("data", "calibration_tokens", 100_000)?;
    let stats = compute_norm_stats(&shards, calibration)?;
    let path = out.join("norm_stats.txt");
    stats.save(&path)?;
    println!(
        "norm-stats: {} tokens calibrated over {} layers -> {}",
        stats.sample_count,
        stats.per_layer_scale.len(),
        path.display()
    );
    Ok(())
}

fn load_stats_and_data(cfg: &RunConfig, stats_may_be_absent: bool) -> Result<routesae::trainer::TrainData> {
    let shards = cfg.paths("data", "shards");
    if shards.is_empty() {
        return Err(Error::Config("[data] shards is required".into()));
    }
    let stats = match cfg.get("data", "stats") {
        Some(path) if stats_may_be_absent && !Path::new(path).exists() => None,
        Some(path) => Some(NormalizationStats::load(path)?),
        None => None,
    };
    let normalize = cfg.bool_or("data", "normalize", true)?;
    let calibration = cfg.usize_or("data", "calibration_tokens", 100_000)?;
    load_training_data(&shards, stats, calibration, normalize)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let config = cfg.train_config()?;
    let data = load_stats_and_data(cfg, true)?;
    data.stats.save(out.join("norm_stats.txt"))?;
    let outcome = train(&config, &data, None, Some(&out))?;
    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "train: {} steps of {} (m={}, k={}) final loss {:.6e}, L0 {:.2} -> {}",
        config.total_steps,
        config.architecture,
        config.latent_width,
        config.k,
        last.loss,
        last.l0,
        out.join(routesae::trainer::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_artifact_and_stats(cfg: &RunConfig) -> Result<(Artifact, NormalizationStats)> {
    let ckpt_path = cfg.require("eval", "checkpoint")?;
    let artifact = Artifact::load(ckpt_path)?;
    let stats = match cfg.get("data", "stats") {
        Some(path) => NormalizationStats::load(path)?,
        None => {
            let shards = cfg.paths("data", "shards");
            if shards.is_empty() {
                return Err(Error::Config(
                    "need [data] stats or [data] shards to recover normalization".into(),
                ));
            }
            if cfg.bool_or("data", "normalize", true)? {
                compute_norm_stats(&shards, cfg.usize_or("data", "calibration_tokens", 100_000)?)?
            } else {
                let header = ShardReader::open(&shards[0])?.header().clone();
                NormalizationStats::identity(header.layer_ids.clone(), header.d)
            }
        }
    };
    Ok((artifact, stats))
}

fn cmd_eval_mse(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let (artifact, _) = load_artifact_and_stats(cfg)?;
    let data = load_stats_and_data(cfg, false)?;
    let d = artifact.model.d();

    // reconstruction rows in normalized space
    let mut xs: Vec<f32> = Vec::new();
    let mut xhats: Vec<f32> = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in data.records.iter().enumerate() {
        match &artifact.model {
            ModelParams::Cross(cc) => {
                let views: Vec<_> = (0..data.num_layers())
                    .map(|s| ndarray::ArrayView1::from(rec.layer(s, d)))
                    .collect();
                let fwd = routesae::crosscoder::cc_forward(cc, &views)?;
                for (slot, recon) in fwd.reconstructions.iter().enumerate() {
                    xs.extend_from_slice(rec.layer(slot, d));
                    xhats.extend(recon.iter());
                    rows += 1;
                }
            }
            _ => {
                let (slot, x_hat, _) =
                    artifact.reconstruct_for_substitution(rec, artifact.seed ^ i as u64, None)?;
                xs.extend_from_slice(rec.layer(slot, d));
                xhats.extend(x_hat.iter());
                rows += 1;
            }
        }
    }
    let x = ndarray::Array2::from_shape_vec((rows, d), xs).expect("shape");
    let xh = ndarray::Array2::from_shape_vec((rows, d), xhats).expect("shape");
    let nmse = routesae::eval::normalized_mse(x.view(), xh.view())?;
    let csv = format!(
        "architecture,k,nmse\n{},{},{:.9e}\n",
        artifact.architecture, artifact.k, nmse
    );
    write_text(&out.join("mse.csv"), &csv)?;
    println!("eval-mse: {} ({} rows) NMSE = {nmse:.6}", artifact.architecture, rows);
    Ok(())
}

fn cmd_eval_kl(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let lm = load_toylm(cfg)?;
    let (artifact, stats) = load_artifact_and_stats(cfg)?;
    let sequences = load_sequences(cfg, "eval")?;
    let recon = eval_substitution(&lm, &artifact, &stats, &sequences, SubstitutionControl::Reconstruction)?;
    let ident = eval_substitution(&lm, &artifact, &stats, &sequences, SubstitutionControl::Identity)?;
    let zero = eval_substitution(&lm, &artifact, &stats, &sequences, SubstitutionControl::Zero)?;
    let mut csv = String::from("control,mean_kl,mean_l0,mean_nmse,tokens\n");
    for (name, e) in [("reconstruction", &recon), ("identity", &ident), ("zero", &zero)] {
        csv.push_str(&format!(
            "{name},{:.9e},{:.4},{:.9e},{}\n",
            e.mean_kl, e.mean_l0, e.mean_nmse, e.tokens
        ));
    }
    write_text(&out.join("kl.csv"), &csv)?;
    write_text(
        &out.join("routing_histogram.csv"),
        &histogram_csv(&recon.slot_histogram, &artifact.layer_ids),
    )?;
    println!(
        "eval-kl: {} tokens: KL
  reconstruction {:.6e}  identity {:.3e}  zero {:.6e}",
        recon.tokens, recon.mean_kl, ident.mean_kl, zero.mean_kl
    );
    Ok(())
}

fn cmd_extract_contexts(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let (artifact, stats) = load_artifact_and_stats(cfg)?;
    let shards = cfg.paths("data", "shards");
    let threshold = cfg.f64_or("eval", "threshold", 15.0)? as f32;
    let window = cfg.usize_or("eval", "window", 32)?;
    let (dossiers, summary) = extract_contexts(&artifact, &stats, &shards, threshold, window)?;
    let path = out.join("dossiers.tsv");
    save_dossiers(&dossiers, &path)?;
    println!(
        "extract-contexts: {} tokens scanned, {} contexts above {threshold}, {} features retained -> {}",
        summary.tokens_scanned,
        summary.contexts_emitted,
        summary.retained_features,
        path.display()
    );
    Ok(())
}

fn cmd_count_features(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let (artifact, stats) = load_artifact_and_stats(cfg)?;
    let shards = cfg.paths("data", "shards");
    let thresholds = cfg.f32_list("eval", "thresholds", &[5.0, 10.0, 15.0])?;
    let base = thresholds.iter().cloned().fold(f32::INFINITY, f32::min);
    let window = cfg.usize_or("eval", "window", 32)?;
    let (dossiers, _) = extract_contexts(&artifact, &stats, &shards, base, window)?;
    let counts = count_interpretable(&dossiers, &thresholds);
    let mut csv = String::from("threshold,retained_features\n");
    for (tau, count) in &counts {
        csv.push_str(&format!("{tau},{count}\n"));
    }
    write_text(&out.join("feature_counts.csv"), &csv)?;
    for (tau, count) in &counts {
        println!("count-features: threshold {tau} -> {count} features");
    }
    Ok(())
}

fn cmd_interp_prompts(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let dossier_path = cfg.require("eval", "dossiers")?;
    let dossiers = load_dossiers(dossier_path)?;
    let paths = write_prompts(&dossiers, out.join("prompts"))?;
    println!("interp-prompts: {} prompt files under {}", paths.len(), out.join("prompts").display());
    Ok(())
}

fn cmd_interp_score(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let dossier_path = cfg.require("eval", "dossiers")?;
    let dossiers = load_dossiers(dossier_path)?;
    let sample_size = cfg.usize_or("interp", "sample_size", 100)?;
    let offline = cfg.bool_or("interp", "offline", false)?;
    let source = if offline || cfg.get("interp", "replay").is_some() {
        let dir = cfg.require("interp", "replay").map_err(|_| {
            Error::Config("offline scoring needs [interp] replay = <dir>".into())
        })?;
        ResponseSource::Replay(PathBuf::from(dir))
    } else {
        let mut endpoint = match cfg.get("interp", "endpoint") {
            Some(base) => EndpointConfig {
                base: base.to_string(),
                token: std::env::var(routesae::interp::ENV_TOKEN).ok(),
                model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
                log_dir: None,
                retries: 1,
            },
            None => EndpointConfig::from_env()?,
        };
        if let Some(model) = cfg.get("interp", "model") {
            endpoint.model = model.to_string();
        }
        if cfg.bool_or("interp", "log_requests", false)? {
            endpoint.log_dir = Some(out.join("interp_log"));
        }
        ResponseSource::Endpoint(endpoint)
    };
    let report = score_features(&source, &dossiers, sample_size, cfg.seed()?)?;
    write_text(&out.join("interp_scores.csv"), &report.to_csv())?;
    println!(
        "interp-score: {} scored (mean {:.3}), {} parse failures, {} fetch failures",
        report.results.len(),
        report.mean_score,
        report.parse_failures,
        report.fetch_failures
    );
    Ok(())
}

fn cmd_steer(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let lm = load_toylm(cfg)?;
    let ckpt = cfg.require("steer", "checkpoint")?;
    let artifact = Artifact::load(ckpt)?;
    let stats = match cfg.get("data", "stats") {
        Some(path) => NormalizationStats::load(path)?,
        None => return Err(Error::Config("[data] stats is required for steering".into())),
    };
    let prompt: Vec<u32> = match (cfg.get("steer", "prompt"), cfg.get("steer", "prompt_file")) {
        (Some(text), _) => text.bytes().map(|b| b as u32).collect(),
        (None, Some(path)) => std::fs::read(path)
            .map_err(|e| Error::io(path, e))?
            .into_iter()
            .map(|b| b as u32)
            .collect(),
        (None, None) => return Err(Error::Config("[steer] prompt or prompt_file is required".into())),
    };
    let feature = cfg
        .require("steer", "feature")?
        .parse()
        .map_err(|_| Error::Config("[steer] feature: not an integer".into()))?;
    let clamp = cfg.f64_or("steer", "clamp", 20.0)? as f32;
    let horizon = cfg.usize_or("steer", "horizon", 16)?;

    let steered = steer(&lm, &artifact, &stats, &prompt, feature, clamp, horizon)?;

    let render = |tokens: &[u32]| -> String {
        tokens
            .iter()
            .map(|t| routesae::interp::render_token(*t))
            .collect()
    };
    let text = format!(
        "feature {feature} clamped to {clamp}\nprompt: {}\noriginal continuation: {}\nclamped continuation:  {}\nmean |logit delta| on prompt: {:.6}\n",
        render(&prompt),
        render(&steered.original),
        render(&steered.clamped),
        steered.mean_abs_delta
    );
    write_text(&out.join("steering.txt"), &text)?;
    let mut csv = String::from("position,abs_logit_delta\n");
    for (i, dlt) in steered.prompt_deltas.iter().enumerate() {
        csv.push_str(&format!("{i},{dlt:.9e}\n"));
    }
    write_text(&out.join("steer_deltas.csv"), &csv)?;
    print!("{text}");
    Ok(())
}

fn cmd_export_frontier(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.write_echo(&out)?;
    let lm = load_toylm(cfg)?;
    let k_list = cfg.usize_list("eval", "k_list", &[8, 16, 32, 64])?;
    let pattern = cfg.require("eval", "checkpoint_pattern")?;
    let sequences = load_sequences(cfg, "eval")?;
    let stats = match cfg.get("data", "stats") {
        Some(path) => NormalizationStats::load(path)?,
        None => return Err(Error::Config("[data] stats is required for the frontier".into())),
    };
    let mut artifacts = Vec::new();
    for k in k_list {
        let path = PathBuf::from(pattern.replace("{k}", &k.to_string()));
        if !path.exists() {
            eprintln!("export-frontier: warning: no checkpoint for k={k} at {}; row skipped", path.display());
            continue;
        }
        artifacts.push((k, Artifact::load(&path)?));
    }
    if artifacts.is_empty() {
        return Err(Error::Data("no checkpoints found for any k".into()));
    }
    let rows = kl_frontier(&lm, &artifacts, &stats, &sequences)?;
    write_text(&out.join("frontier.csv"), &frontier_csv(&rows))?;
    for r in &rows {
        println!(
            "export-frontier: k={} L0={:.1} KL={:.6e} NMSE={:.4}",
            r.k, r.mean_l0, r.mean_kl, r.mean_nmse
        );
    }
    Ok(())
}
