//! Planted-dictionary synthetic benchmark: multi-layer activations whose
//! features follow triangular layer profiles (low-level features peak early,
//! high-level features peak late), plus ground-truth recovery and
//! routing-accuracy metrics.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::route::splitmix64;
use crate::store::{ActivationRecord, ShardHeader, ShardWriter};

pub const SIDECAR_MAGIC: &[u8; 4] = b"RSGT";
pub const SIDECAR_VERSION: u32 = 1;

/// Maximum pairwise |cos| admitted between planted dictionary rows; draws
/// above it are rejected so recovery scores stay identifiable.
const MAX_COHERENCE: f64 = 0.55;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub m_true: usize,
    pub d: usize,
    pub num_layers: usize,
    /// Active features per token.
    pub sparsity: usize,
    /// Spread of the triangular layer profile.
    pub profile_width: f64,
    pub coeff_min: f64,
    pub coeff_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            m_true: 64,
            d: 32,
            num_layers: 4,
            sparsity: 4,
            profile_width: 2.0,
            coeff_min: 0.5,
            coeff_max: 1.5,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sparsity == 0 || self.sparsity > self.m_true {
            return Err(Error::Config(format!(
                "sparsity {} out of range 1..={}",
                self.sparsity, self.m_true
            )));
        }
        if self.num_layers == 0 || self.d == 0 || self.m_true == 0 {
            return Err(Error::Config("layers, d, m_true must be positive".into()));
        }
        if self.profile_width <= 0.0 || self.coeff_min <= 0.0 || self.coeff_max < self.coeff_min {
            return Err(Error::Config("bad profile/coefficient ranges".into()));
        }
        Ok(())
    }

    /// Triangular profile value of a feature peaking at `peak`, at layer `i`.
    pub fn profile(&self, peak: u32, layer: usize) -> f64 {
        (1.0 - (layer as f64 - peak as f64).abs() / self.profile_width).max(0.0)
    }
}

/// Unit-row dictionary with round-robin peak-layer assignment. Deterministic
/// in the seed; rows are redrawn until pairwise coherence stays bounded.
pub fn gen_dictionary(spec: &SyntheticSpec) -> Result<(Array2<f64>, Vec<u32>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x44494354));
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.m_true);
    let mut attempts = 0usize;
    while rows.len() < spec.m_true {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Data(format!(
                "could not draw {} rows with coherence <= {MAX_COHERENCE} in d={}",
                spec.m_true, spec.d
            )));
        }
        let mut row: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut row {
            *v /= norm;
        }
        let coherent = rows.iter().all(|q| {
            let dot: f64 = q.iter().zip(&row).map(|(a, b)| a * b).sum();
            dot.abs() <= MAX_COHERENCE
        });
        if coherent {
            rows.push(row);
        }
    }
    let mut dict = Array2::zeros((spec.m_true, spec.d));
    for (f, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            dict[(f, j)] = *v;
        }
    }
    let peaks = (0..spec.m_true as u32)
        .map(|f| f % spec.num_layers as u32)
        .collect();
    Ok((dict, peaks))
}

/// Ground truth for one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTruth {
    pub features: Vec<u32>,
    pub coefficients: Vec<f32>,
    pub dominant: u32,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub records: Vec<ActivationRecord>,
    pub truth: Vec<TokenTruth>,
}

/// Generate `n` tokens: each draws `sparsity` distinct features with positive
/// coefficients; layer i receives `sum_f a_f * w_f(i) * D_f` plus Gaussian
/// noise. Per-token RNG streams derive from (seed, token index).
pub fn gen_samples(spec: &SyntheticSpec, dictionary: &Array2<f64>, peaks: &[u32], n: usize) -> Result<SynthData> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let l = spec.num_layers;
    let d = spec.d;
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x53414D50 ^ (idx as u64).wrapping_mul(0x9E37)));
        // distinct feature draw
        let mut features: Vec<u32> = Vec::with_capacity(spec.sparsity);
        while features.len() < spec.sparsity {
            let f = rng.random_range(0..spec.m_true as u32);
            if !features.contains(&f) {
                features.push(f);
            }
        }
        let coefficients: Vec<f32> = (0..spec.sparsity)
            .map(|_| rng.random_range(spec.coeff_min..spec.coeff_max) as f32)
            .collect();
        let mut x = vec![0.0f64; l * d];
        for (slot, &f) in features.iter().enumerate() {
            let a = coefficients[slot] as f64;
            for layer in 0..l {
                let w = spec.profile(peaks[f as usize], layer);
                if w == 0.0 {
                    continue;
                }
                for j in 0..d {
                    x[layer * d + j] += a * w * dictionary[(f as usize, j)];
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut x {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += g * spec.noise_sigma;
            }
        }
        let dominant = {
            let mut best = 0usize;
            for s in 1..spec.sparsity {
                if coefficients[s] > coefficients[best] {
                    best = s;
                }
            }
            features[best]
        };
        records.push(ActivationRecord::new(
            idx as u64,
            0,
            None,
            x.into_iter().map(|v| v as f32).collect(),
        ));
        truth.push(TokenTruth {
            features,
            coefficients,
            dominant,
        });
    }
    Ok(SynthData { records, truth })
}

/// Write a generated sample set as a shard plus its ground-truth sidecar.
pub fn write_synth_shard(
    spec: &SyntheticSpec,
    data: &SynthData,
    shard_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<()> {
    let layer_ids: Vec<u32> = (0..spec.num_layers as u32).collect();
    let header = ShardHeader::new(spec.d as u32, layer_ids, format!("synth seed={}", spec.seed));
    let mut writer = ShardWriter::create(shard_path, header)?;
    for rec in &data.records {
        writer.push(rec)?;
    }
    writer.finish()?;
    save_sidecar(&data.truth, spec, sidecar_path)
}

pub fn save_sidecar(truth: &[TokenTruth], spec: &SyntheticSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(SIDECAR_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(SIDECAR_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(spec.sparsity as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(spec.m_true as u32).map_err(io)?;
    w.write_u64::<LittleEndian>(truth.len() as u64).map_err(io)?;
    for t in truth {
        for f in &t.features {
            w.write_u32::<LittleEndian>(*f).map_err(io)?;
        }
        for c in &t.coefficients {
            w.write_f32::<LittleEndian>(*c).map_err(io)?;
        }
        w.write_u32::<LittleEndian>(t.dominant).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Vec<TokenTruth>> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = std::fs::File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != SIDECAR_MAGIC {
        return Err(Error::Format(format!("{}: bad sidecar magic", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != SIDECAR_VERSION {
        return Err(Error::Format(format!(
            "{}: sidecar version {version}, this build reads {SIDECAR_VERSION}",
            path.display()
        )));
    }
    let s = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let _m_true = r.read_u32::<LittleEndian>().map_err(io)?;
    let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let mut features = Vec::with_capacity(s);
        for _ in 0..s {
            features.push(r.read_u32::<LittleEndian>().map_err(io)?);
        }
        let mut coefficients = vec![0f32; s];
        r.read_f32_into::<LittleEndian>(&mut coefficients).map_err(io)?;
        let dominant = r.read_u32::<LittleEndian>().map_err(io)?;
        truth.push(TokenTruth {
            features,
            coefficients,
            dominant,
        });
    }
    Ok(truth)
}

/// Greedy one-to-one matching between planted rows and learned decoder
/// columns by descending |cos|.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    /// Best matched |cos| per planted feature.
    pub per_feature_cos: Vec<f64>,
    pub mean_cos: f64,
}

impl RecoveryReport {
    pub fn matched_fraction(&self, tau: f64) -> f64 {
        let hits = self.per_feature_cos.iter().filter(|c| **c >= tau).count();
        hits as f64 / self.per_feature_cos.len() as f64
    }
}

pub fn recovery_report(dictionary: &Array2<f64>, decoder: &Array2<f32>) -> Result<RecoveryReport> {
    let (m_true, d) = dictionary.dim();
    if decoder.nrows() != d {
        return Err(Error::Shape(format!(
            "decoder width {} != dictionary width {d}",
            decoder.nrows()
        )));
    }
    let m = decoder.ncols();
    if m < m_true {
        return Err(Error::Shape(format!(
            "decoder has {m} columns, fewer than the {m_true} planted features"
        )));
    }
    // unit-normalized decoder columns in f64
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        let mut c = Array1::from_iter(decoder.column(j).iter().map(|v| *v as f64));
        let norm = c.dot(&c).sqrt();
        if norm > 0.0 {
            c.mapv_inplace(|v| v / norm);
        }
        cols.push(c);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m_true * m);
    for f in 0..m_true {
        let row = dictionary.row(f);
        for (j, c) in cols.iter().enumerate() {
            let cos = row.dot(c).abs();
            pairs.push((cos, f, j));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken_f = vec![false; m_true];
    let mut taken_j = vec![false; m];
    let mut per_feature_cos = vec![0.0; m_true];
    let mut assigned = 0;
    for (cos, f, j) in pairs {
        if taken_f[f] || taken_j[j] {
            continue;
        }
        taken_f[f] = true;
        taken_j[j] = true;
        per_feature_cos[f] = cos;
        assigned += 1;
        if assigned == m_true {
            break;
        }
    }
    let mean_cos = per_feature_cos.iter().sum::<f64>() / m_true as f64;
    Ok(RecoveryReport {
        per_feature_cos,
        mean_cos,
    })
}

#[derive(Debug, Clone)]
pub struct RoutingAccuracy {
    /// Fraction of tokens whose selected layer equals the dominant feature's
    /// peak layer.
    pub accuracy: f64,
    /// Per-layer selection fractions.
    pub histogram: Vec<f64>,
}

/// Score route decisions against the planted ground truth.
pub fn routing_accuracy(
    truth: &[TokenTruth],
    peaks: &[u32],
    selected_layers: &[usize],
    num_layers: usize,
) -> Result<RoutingAccuracy> {
    if truth.len() != selected_layers.len() {
        return Err(Error::Shape(format!(
            "{} truth tokens vs {} decisions",
            truth.len(),
            selected_layers.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("no tokens to score".into()));
    }
    let mut histogram = vec![0.0f64; num_layers];
    let mut hits = 0usize;
    let mut scored = 0usize;
    for (t, &sel) in truth.iter().zip(selected_layers) {
        histogram[sel] += 1.0;
        // only tokens with a unique largest coefficient are scored
        let max = t
            .coefficients
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        if t.coefficients.iter().filter(|c| **c == max).count() != 1 {
            continue;
        }
        scored += 1;
        if sel as u32 == peaks[t.dominant as usize] {
            hits += 1;
        }
    }
    for h in &mut histogram {
        *h /= truth.len() as f64;
    }
    if scored == 0 {
        return Err(Error::Data("no token has a unique dominant feature".into()));
    }
    Ok(RoutingAccuracy {
        accuracy: hits as f64 / scored as f64,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_rows_are_unit_and_deterministic() {
        let spec = SyntheticSpec::default();
        let (dict, peaks) = gen_dictionary(&spec).unwrap();
        for f in 0..spec.m_true {
            let norm: f64 = dict.row(f).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {f} norm {norm}");
        }
        assert_eq!(peaks[0], 0);
        assert_eq!(peaks[5], 1);

        let (dict2, _) = gen_dictionary(&spec).unwrap();
        assert_eq!(dict, dict2);
    }

    #[test]
    fn dictionary_coherence_is_bounded() {
        let spec = SyntheticSpec::default();
        let (dict, _) = gen_dictionary(&spec).unwrap();
        let mut max_cos = 0.0f64;
        for a in 0..spec.m_true {
            for b in (a + 1)..spec.m_true {
                let cos: f64 = dict.row(a).dot(&dict.row(b)).abs();
                max_cos = max_cos.max(cos);
            }
        }
        assert!(max_cos < 0.6, "max pairwise |cos| = {max_cos}");
    }

    #[test]
    fn noiseless_single_feature_reproduces_the_dictionary_row() {
        let spec = SyntheticSpec {
            sparsity: 1,
            noise_sigma: 0.0,
            coeff_min: 1.0,
            coeff_max: 1.0 + 1e-12,
            ..SyntheticSpec::default()
        };
        let (dict, peaks) = gen_dictionary(&spec).unwrap();
        let data = gen_samples(&spec, &dict, &peaks, 32).unwrap();
        for (rec, t) in data.records.iter().zip(&data.truth) {
            let f = t.features[0] as usize;
            let peak = peaks[f] as usize;
            let x = rec.layer(peak, spec.d);
            for (a, b) in x.iter().zip(dict.row(f).iter()) {
                assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn profile_peaks_at_one_and_never_increases_away() {
        let spec = SyntheticSpec::default();
        for peak in 0..spec.num_layers as u32 {
            assert_eq!(spec.profile(peak, peak as usize), 1.0);
            let mut last_left = 1.0;
            for dist in 1..spec.num_layers {
                if peak as usize >= dist {
                    let w = spec.profile(peak, peak as usize - dist);
                    assert!(w <= last_left);
                    last_left = w;
                }
            }
            let mut last_right = 1.0;
            for layer in (peak as usize + 1)..spec.num_layers {
                let w = spec.profile(peak, layer);
                assert!(w <= last_right);
                last_right = w;
            }
        }
    }

    #[test]
    fn ground_truth_regenerates_the_emitted_activations() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let (dict, peaks) = gen_dictionary(&spec).unwrap();
        let data = gen_samples(&spec, &dict, &peaks, 64).unwrap();
        for (rec, t) in data.records.iter().zip(&data.truth) {
            let mut x = vec![0.0f64; spec.num_layers * spec.d];
            for (slot, &f) in t.features.iter().enumerate() {
                let a = t.coefficients[slot] as f64;
                for layer in 0..spec.num_layers {
                    let w = spec.profile(peaks[f as usize], layer);
                    for j in 0..spec.d {
                        x[layer * spec.d + j] += a * w * dict[(f as usize, j)];
                    }
                }
            }
            for (got, want) in rec.data.iter().zip(&x) {
                assert!((*got as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn max_norm_layer_equals_planted_peak_for_single_feature() {
        let spec = SyntheticSpec {
            sparsity: 1,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let (dict, peaks) = gen_dictionary(&spec).unwrap();
        let data = gen_samples(&spec, &dict, &peaks, 128).unwrap();
        for (rec, t) in data.records.iter().zip(&data.truth) {
            let mut best = 0;
            let mut best_norm = -1.0f64;
            for layer in 0..spec.num_layers {
                let norm: f64 = rec
                    .layer(layer, spec.d)
                    .iter()
                    .map(|v| (*v as f64).powi(2))
                    .sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = layer;
                }
            }
            assert_eq!(best as u32, peaks[t.features[0] as usize]);
        }
    }

    #[test]
    fn recovery_identity_with_padding_is_perfect() {
        let spec = SyntheticSpec {
            m_true: 16,
            d: 16,
            ..SyntheticSpec::default()
        };
        let (dict, _) = gen_dictionary(&spec).unwrap();
        // learned decoder: the planted rows as columns, plus random extras
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 24;
        let mut dec = Array2::<f32>::zeros((16, m));
        for f in 0..16 {
            for j in 0..16 {
                dec[(j, f)] = dict[(f, j)] as f32;
            }
        }
        for c in 16..m {
            for j in 0..16 {
                dec[(j, c)] = rng.random_range(-1.0..1.0);
            }
        }
        let report = recovery_report(&dict, &dec).unwrap();
        assert!(report.mean_cos > 1.0 - 1e-6);
        assert_eq!(report.matched_fraction(0.9), 1.0);

        // sign invariance
        let negated = dec.mapv(|v| -v);
        let report2 = recovery_report(&dict, &negated).unwrap();
        for (a, b) in report.per_feature_cos.iter().zip(&report2.per_feature_cos) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_matching_agrees_with_exhaustive_assignment_on_small_instances() {
        // brute-force over all one-to-one assignments of 5 planted rows to 5
        // columns, maximizing the matched count at tau
        let spec = SyntheticSpec {
            m_true: 5,
            d: 8,
            num_layers: 1,
            sparsity: 1,
            ..SyntheticSpec::default()
        };
        let (dict, _) = gen_dictionary(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..10 {
            let mut dec = Array2::<f32>::zeros((8, 5));
            for j in 0..5 {
                for i in 0..8 {
                    dec[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
            let tau = 0.9;
            let report = recovery_report(&dict, &dec).unwrap();

            // exhaustive: all 5! permutations
            let cos = |f: usize, j: usize| -> f64 {
                let mut col = [0.0f64; 8];
                let mut norm = 0.0;
                for i in 0..8 {
                    col[i] = dec[(i, j)] as f64;
                    norm += col[i] * col[i];
                }
                let norm = norm.sqrt();
                let dot: f64 = (0..8).map(|i| dict[(f, i)] * col[i] / norm).sum();
                dot.abs()
            };
            let mut best_count = 0;
            let mut perm = [0usize, 1, 2, 3, 4];
            permute(&mut perm, 0, &mut |p: &[usize; 5]| {
                let count = (0..5).filter(|&f| cos(f, p[f]) >= tau).count();
                best_count = best_count.max(count);
            });
            let greedy_count = (report.matched_fraction(tau) * 5.0).round() as usize;
            assert_eq!(greedy_count, best_count, "trial {trial}");
        }
    }

    fn permute<Ff: FnMut(&[usize; 5])>(p: &mut [usize; 5], k: usize, f: &mut Ff) {
        if k == 5 {
            f(p);
            return;
        }
        for i in k..5 {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn routing_accuracy_examples() {
        let spec = SyntheticSpec {
            sparsity: 1,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let (dict, peaks) = gen_dictionary(&spec).unwrap();
        let data = gen_samples(&spec, &dict, &peaks, 200).unwrap();

        // hand-set selection to each token's true peak
        let perfect: Vec<usize> = data
            .truth
            .iter()
            .map(|t| peaks[t.dominant as usize] as usize)
            .collect();
        let report = routing_accuracy(&data.truth, &peaks, &perfect, spec.num_layers).unwrap();
        assert_eq!(report.accuracy, 1.0);

        // uniform random selection sits near chance
        let random: Vec<usize> = (0..data.truth.len())
            .map(|i| crate::route::random_layer(i as u64, spec.num_layers))
            .collect();
        let report = routing_accuracy(&data.truth, &peaks, &random, spec.num_layers).unwrap();
        assert!((report.accuracy - 0.25).abs() < 0.12, "{}", report.accuracy);
        let sum: f64 = report.histogram.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            m_true: 8,
            d: 8,
            sparsity: 2,
            ..SyntheticSpec::default()
        };
        let (dict, peaks) = gen_dictionary(&spec).unwrap();
        let data = gen_samples(&spec, &dict, &peaks, 16).unwrap();
        let path = dir.path().join("truth.rsgt");
        save_sidecar(&data.truth, &spec, &path).unwrap();
        let loaded = load_sidecar(&path).unwrap();
        assert_eq!(loaded, data.truth);
    }
}
