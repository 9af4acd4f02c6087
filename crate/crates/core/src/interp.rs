//! Auto-interpretation tooling: render the fixed-format scoring prompt from
//! a feature dossier, parse the fixed-format response, and aggregate scores
//! over a seeded feature sample — against a live chat-completion endpoint or
//! an offline replay directory.
//!
//! Response grammar (exactly what the prompt requests):
//!
//! ```text
//! Feature category: <Low-level|High-level|Undiscernible>
//! Score: <1|2|3|4|5>
//! Explanation: <free text>
//! ```
//!
//! Lines may carry surrounding whitespace; labels and categories are
//! case-sensitive; anything outside the closed sets is rejected.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::FeatureDossier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    LowLevel,
    HighLevel,
    Undiscernible,
}

impl Category {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Low-level" => Some(Category::LowLevel),
            "High-level" => Some(Category::HighLevel),
            "Undiscernible" => Some(Category::Undiscernible),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::LowLevel => "Low-level",
            Category::HighLevel => "High-level",
            Category::Undiscernible => "Undiscernible",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpResult {
    pub feature_id: usize,
    pub category: Category,
    pub score: u8,
    pub explanation: String,
}

/// Render a byte-level token id as readable text.
pub fn render_token(token: u32) -> String {
    match u8::try_from(token) {
        Ok(b) if (0x20..0x7f).contains(&b) => (b as char).to_string(),
        Ok(b'\n') => "\\n".to_string(),
        Ok(b'\t') => "\\t".to_string(),
        Ok(b) => format!("\\x{b:02X}"),
        Err(_) => format!("<{token}>"),
    }
}

/// Render a context window, wrapping the activated token in double brackets.
pub fn render_window(window: &[u32], center: usize) -> String {
    let mut out = String::new();
    for (i, tok) in window.iter().enumerate() {
        if i == center {
            out.push_str("[[");
            out.push_str(&render_token(*tok));
            out.push_str("]]");
        } else {
            out.push_str(&render_token(*tok));
        }
    }
    out
}

const PROMPT_BACKGROUND: &str = "Background\n\nWe are analyzing the activation levels of features in a neural network, where each feature activates certain tokens in a text.\nEach token's activation value indicates its relevance to the feature, with higher values showing stronger association. Features are categorized as:\nA. Low-level features, which are associated with word-level polysemy disambiguation (e.g., \"crushed things\", \"Europe\").\nB. High-level features, which are associated with long-range pattern formation (e.g., \"enumeration\", \"one of the [number/quantifier]\")\nC. Undiscernible features, which are associated with noise or irrelevant patterns.\n";

const PROMPT_TASK: &str = "Task description\n\nYour task is to classify the feature as low-level, high-level or undiscernible and give this feature a monosemanticity score based on the following scoring rubric:\nActivation Consistency\n5: Clear pattern with no deviating examples\n4: Clear pattern with one or two deviating examples\n3: Clear overall pattern but quite a few examples not fitting that pattern\n2: Broad consistent theme but lacking structure\n1: No discernible pattern\nConsider the following activations for a feature in the neural network.\n";

const PROMPT_QUESTION: &str = "Question\n\nProvide your response in the following fixed format:\nFeature category: [Low-level/High-level/Undiscernible]\nScore: [5/4/3/2/1]\nExplanation: [Your brief explanation]\n";

/// Build the fixed-format scoring prompt for a retained dossier: background,
/// task description with one `Token/Activation/Context` line per kept
/// context, and the fixed question block. Byte-stable for identical input.
pub fn build_prompt(dossier: &FeatureDossier) -> Result<String> {
    if !dossier.retained() {
        return Err(Error::Data(format!(
            "feature {} has only {} active contexts; prompts require at least 4",
            dossier.feature_id, dossier.total_active
        )));
    }
    let mut prompt = String::new();
    prompt.push_str(PROMPT_BACKGROUND);
    prompt.push('\n');
    prompt.push_str(PROMPT_TASK);
    for ctx in dossier.kept_contexts() {
        prompt.push_str(&format!(
            "Token: {}  Activation: {:.2}  Context: {}\n",
            render_token(ctx.token_id),
            ctx.activation,
            render_window(&ctx.window, ctx.center)
        ));
    }
    prompt.push('\n');
    prompt.push_str(PROMPT_QUESTION);
    Ok(prompt)
}

/// Parse a fixed-format response into (category, score, explanation).
pub fn parse_response(text: &str) -> Result<(Category, u8, String)> {
    let mut category = None;
    let mut score = None;
    let mut explanation = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Feature category:") {
            if category.is_none() {
                let value = rest.trim();
                category = Some(Category::parse(value).ok_or_else(|| Error::Parse {
                    field: "Feature category".into(),
                    detail: format!(
                        "`{value}` is not one of Low-level/High-level/Undiscernible"
                    ),
                })?);
            }
        } else if let Some(rest) = line.strip_prefix("Score:") {
            if score.is_none() {
                let value = rest.trim();
                let n: u8 = value.parse().map_err(|_| Error::Parse {
                    field: "Score".into(),
                    detail: format!("`{value}` is not an integer"),
                })?;
                if !(1..=5).contains(&n) {
                    return Err(Error::Parse {
                        field: "Score".into(),
                        detail: format!("{n} outside 1..=5"),
                    });
                }
                score = Some(n);
            }
        } else if let Some(rest) = line.strip_prefix("Explanation:") {
            if explanation.is_none() {
                explanation = Some(rest.trim().to_string());
            }
        }
    }
    let category = category.ok_or_else(|| Error::Parse {
        field: "Feature category".into(),
        detail: "line missing".into(),
    })?;
    let score = score.ok_or_else(|| Error::Parse {
        field: "Score".into(),
        detail: "line missing".into(),
    })?;
    let explanation = explanation.ok_or_else(|| Error::Parse {
        field: "Explanation".into(),
        detail: "line missing".into(),
    })?;
    Ok((category, score, explanation))
}

/// Environment variables configuring the live endpoint.
pub const ENV_ENDPOINT: &str = "ROUTESAE_INTERP_ENDPOINT";
pub const ENV_TOKEN: &str = "ROUTESAE_INTERP_TOKEN";
pub const ENV_MODEL: &str = "ROUTESAE_INTERP_MODEL";

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// Base address; requests go to `{base}/chat/completions`.
    pub base: String,
    pub token: Option<String>,
    pub model: String,
    /// When set, request/response bodies are written here verbatim.
    pub log_dir: Option<PathBuf>,
    pub retries: usize,
}

impl EndpointConfig {
    pub fn from_env() -> Result<Self> {
        let base = std::env::var(ENV_ENDPOINT)
            .map_err(|_| Error::Endpoint(format!("{ENV_ENDPOINT} is not set")))?;
        Ok(EndpointConfig {
            base,
            token: std::env::var(ENV_TOKEN).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".to_string()),
            log_dir: None,
            retries: 1,
        })
    }
}

/// Where feature responses come from.
#[derive(Debug, Clone)]
pub enum ResponseSource {
    /// Chat-completion endpoint.
    Endpoint(EndpointConfig),
    /// Directory of `{feature_id}.txt` response files.
    Replay(PathBuf),
}

fn call_endpoint(cfg: &EndpointConfig, feature_id: usize, prompt: &str) -> Result<String> {
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0.0,
    });
    let url = format!("{}/chat/completions", cfg.base.trim_end_matches('/'));
    let mut last_err = String::new();
    for _ in 0..=cfg.retries {
        let mut req = ureq::post(&url).header("content-type", "application/json");
        if let Some(token) = &cfg.token {
            req = req.header("authorization", &format!("Bearer {token}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| Error::Endpoint(format!("reading response: {e}")))?;
                if let Some(dir) = &cfg.log_dir {
                    let _ = std::fs::create_dir_all(dir);
                    let _ = std::fs::write(dir.join(format!("{feature_id}.request.json")), body.to_string());
                    let _ = std::fs::write(dir.join(format!("{feature_id}.response.json")), &text);
                }
                let parsed: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Endpoint(format!("malformed response JSON: {e}")))?;
                let content = parsed["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        Error::Endpoint("response lacks choices[0].message.content".into())
                    })?;
                return Ok(content.to_string());
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(Error::Endpoint(format!(
        "feature {feature_id}: request failed after retries: {last_err}"
    )))
}

fn fetch_response(source: &ResponseSource, feature_id: usize, prompt: &str) -> Result<String> {
    match source {
        ResponseSource::Endpoint(cfg) => call_endpoint(cfg, feature_id, prompt),
        ResponseSource::Replay(dir) => {
            let path = dir.join(format!("{feature_id}.txt"));
            std::fs::read_to_string(&path)
                .map_err(|e| Error::Endpoint(format!("replay file {}: {e}", path.display())))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub results: Vec<InterpResult>,
    pub mean_score: f64,
    pub category_fractions: BTreeMap<String, f64>,
    pub sampled: usize,
    /// Features whose responses failed to parse (excluded from the mean).
    pub parse_failures: usize,
    /// Features whose responses could not be fetched.
    pub fetch_failures: usize,
}

impl ScoreReport {
    /// CSV of (feature_id, category, score) plus a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature_id,category,score\n");
        for r in &self.results {
            out.push_str(&format!("{},{},{}\n", r.feature_id, r.category, r.score));
        }
        let cats: Vec<String> = self
            .category_fractions
            .iter()
            .map(|(c, f)| format!("{c}={:.1}%", f * 100.0))
            .collect();
        out.push_str(&format!(
            "# mean_score={:.4} sampled={} scored={} parse_failures={} fetch_failures={} {}\n",
            self.mean_score,
            self.sampled,
            self.results.len(),
            self.parse_failures,
            self.fetch_failures,
            cats.join(" ")
        ));
        out
    }
}

/// Sample `sample_size` retained features (seeded, without replacement),
/// submit their prompts, parse the responses, and aggregate. Failures are
/// excluded from the mean and counted in the report.
pub fn score_features(
    source: &ResponseSource,
    dossiers: &[FeatureDossier],
    sample_size: usize,
    seed: u64,
) -> Result<ScoreReport> {
    let mut retained: Vec<&FeatureDossier> = dossiers.iter().filter(|d| d.retained()).collect();
    retained.sort_by_key(|d| d.feature_id);
    if retained.is_empty() {
        return Err(Error::Data("no retained features to score".into()));
    }
    let take = sample_size.min(retained.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates prefix
    let n = retained.len();
    for i in 0..take {
        let j = rng.random_range(i..n);
        retained.swap(i, j);
    }
    let mut sample: Vec<&FeatureDossier> = retained[..take].to_vec();
    sample.sort_by_key(|d| d.feature_id);

    let mut results = Vec::new();
    let mut parse_failures = 0usize;
    let mut fetch_failures = 0usize;
    for dossier in &sample {
        let prompt = build_prompt(dossier)?;
        let text = match fetch_response(source, dossier.feature_id, &prompt) {
            Ok(t) => t,
            Err(_) => {
                fetch_failures += 1;
                continue;
            }
        };
        match parse_response(&text) {
            Ok((category, score, explanation)) => results.push(InterpResult {
                feature_id: dossier.feature_id,
                category,
                score,
                explanation,
            }),
            Err(_) => parse_failures += 1,
        }
    }
    let scored = results.len();
    let mean_score = if scored > 0 {
        results.iter().map(|r| r.score as f64).sum::<f64>() / scored as f64
    } else {
        f64::NAN
    };
    let mut category_fractions = BTreeMap::new();
    for cat in [Category::LowLevel, Category::HighLevel, Category::Undiscernible] {
        let count = results.iter().filter(|r| r.category == cat).count();
        category_fractions.insert(
            cat.to_string(),
            if scored > 0 { count as f64 / scored as f64 } else { 0.0 },
        );
    }
    Ok(ScoreReport {
        results,
        mean_score,
        category_fractions,
        sampled: take,
        parse_failures,
        fetch_failures,
    })
}

/// Write one prompt file per retained dossier; returns the written paths.
pub fn write_prompts(dossiers: &[FeatureDossier], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for d in dossiers.iter().filter(|d| d.retained()) {
        let prompt = build_prompt(d)?;
        let path = dir.join(format!("feature_{:06}.txt", d.feature_id));
        std::fs::write(&path, prompt).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
