//! Single-input sparse autoencoder: ReLU and TopK encoders, linear decoder
//! with a shared pre-bias, MSE loss, analytic gradients, and decoder column
//! renormalization.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    TopK,
}

/// Encoder/decoder parameter set. `w_enc` is M x d, `w_dec` is d x M, and the
/// pre-bias is subtracted before encoding and added back after decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<F> {
    pub w_enc: Array2<F>,
    pub b_pre: Array1<F>,
    pub w_dec: Array2<F>,
    pub activation: Activation,
    pub k: usize,
}

impl<F: Real> SaeParams<F> {
    pub fn d(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn latent_width(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.latent_width(), self.d());
        if self.w_enc.dim() != (m, d) {
            return Err(Error::Shape(format!(
                "w_enc is {:?}, expected ({m}, {d})",
                self.w_enc.dim()
            )));
        }
        if self.b_pre.len() != d {
            return Err(Error::Shape(format!(
                "b_pre has {} entries, expected {d}",
                self.b_pre.len()
            )));
        }
        if m < d {
            return Err(Error::Shape(format!(
                "latent width {m} must be at least the input width {d}"
            )));
        }
        if self.activation == Activation::TopK && !(1..=m).contains(&self.k) {
            return Err(Error::Shape(format!(
                "sparsity k={} out of range 1..={m}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Active coordinates of a latent vector: strictly increasing indices with
/// their values. TopK codes always carry exactly k entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode<F> {
    pub indices: Vec<usize>,
    pub values: Vec<F>,
    pub latent_width: usize,
}

impl<F: Real> SparseCode<F> {
    pub fn l0(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Array1<F> {
        let mut z = Array1::zeros(self.latent_width);
        for (i, v) in self.indices.iter().zip(&self.values) {
            z[*i] = *v;
        }
        z
    }

    /// Value of latent `index`, zero when inactive.
    pub fn get(&self, index: usize) -> F {
        match self.indices.binary_search(&index) {
            Ok(slot) => self.values[slot],
            Err(_) => F::zero(),
        }
    }

    /// Force latent `index` to `value`, inserting it if inactive.
    pub fn set(&mut self, index: usize, value: F) {
        match self.indices.binary_search(&index) {
            Ok(slot) => self.values[slot] = value,
            Err(slot) => {
                self.indices.insert(slot, index);
                self.values.insert(slot, value);
            }
        }
    }
}

/// Gradients of the per-sample loss with respect to every parameter tensor
/// and the SAE input (the input gradient feeds the router).
#[derive(Debug, Clone)]
pub struct SaeGradients<F> {
    pub w_enc: Array2<F>,
    pub b_pre: Array1<F>,
    pub w_dec: Array2<F>,
    pub input: Array1<F>,
}

/// Keep the k largest entries of `u` by signed value, ties toward the lower
/// index. Returns strictly increasing indices.
pub(crate) fn top_k_select<F: Real>(u: &Array1<F>, k: usize) -> (Vec<usize>, Vec<F>) {
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        u[b].partial_cmp(&u[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k.min(u.len())].to_vec();
    picked.sort_unstable();
    let values = picked.iter().map(|&j| u[j]).collect();
    (picked, values)
}

/// Pre-activations `u = w_enc (x - b_pre)`.
fn pre_activations<F: Real>(params: &SaeParams<F>, x: ArrayView1<F>) -> Array1<F> {
    let centered = &x - &params.b_pre;
    params.w_enc.dot(&centered)
}

pub fn encode<F: Real>(params: &SaeParams<F>, x: ArrayView1<F>) -> SparseCode<F> {
    let u = pre_activations(params, x);
    let m = u.len();
    let (indices, values) = match params.activation {
        Activation::Relu => {
            let mut idx = Vec::new();
            let mut vals = Vec::new();
            for (j, v) in u.iter().enumerate() {
                if *v > F::zero() {
                    idx.push(j);
                    vals.push(*v);
                }
            }
            (idx, vals)
        }
        Activation::TopK => top_k_select(&u, params.k),
    };
    SparseCode {
        indices,
        values,
        latent_width: m,
    }
}

/// `x_hat = w_dec z + b_pre`, computed over active coordinates only.
pub fn decode<F: Real>(params: &SaeParams<F>, code: &SparseCode<F>) -> Result<Array1<F>> {
    if code.latent_width != params.latent_width() {
        return Err(Error::Shape(format!(
            "code width {} != latent width {}",
            code.latent_width,
            params.latent_width()
        )));
    }
    let mut x_hat = params.b_pre.clone();
    for (&j, &v) in code.indices.iter().zip(&code.values) {
        if j >= params.latent_width() {
            return Err(Error::Shape(format!(
                "latent index {j} out of range for width {}",
                params.latent_width()
            )));
        }
        x_hat.scaled_add(v, &params.w_dec.column(j));
    }
    Ok(x_hat)
}

/// Per-sample squared reconstruction error, summed over components.
pub fn loss_mse<F: Real>(x: ArrayView1<F>, x_hat: ArrayView1<F>) -> F {
    debug_assert_eq!(x.len(), x_hat.len());
    x.iter()
        .zip(x_hat.iter())
        .fold(F::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b))
}

/// Analytic gradients of `||x - x_hat||^2` (plus `l1 * ||z||_1` for the ReLU
/// variant) with respect to all parameters and the input. The caller must
/// pass the code produced by `encode` on the same `(params, x)`; the active
/// set is treated as locally constant.
pub fn sae_backward<F: Real>(
    params: &SaeParams<F>,
    x: ArrayView1<F>,
    code: &SparseCode<F>,
    l1_coefficient: F,
) -> Result<(SaeGradients<F>, F)> {
    let d = params.d();
    let m = params.latent_width();
    let x_hat = decode(params, code)?;

    // e = x_hat - x
    let e = &x_hat - &x;
    let mut loss = e.iter().fold(F::zero(), |acc, v| acc + *v * *v);

    let two = F::of(2.0);
    let g_xhat = e.mapv(|v| two * v);

    let mut g_w_enc = Array2::zeros((m, d));
    let mut g_w_dec = Array2::zeros((d, m));
    // decoder path of the pre-bias
    let mut g_b = g_xhat.clone();
    // direct target path: d||x - x_hat||^2 / dx = -2 e
    let mut g_input = g_xhat.mapv(|v| -v);

    let penalize = params.activation == Activation::Relu && l1_coefficient > F::zero();
    let centered = &x - &params.b_pre;

    for (&j, &zj) in code.indices.iter().zip(&code.values) {
        // dL/dz_j, reconstruction term plus optional L1 subgradient
        let mut dz = g_xhat.dot(&params.w_dec.column(j));
        if penalize {
            loss = loss + l1_coefficient * zj.abs();
            dz = dz + l1_coefficient * zj.signum();
        }

        // decoder column: 2 e z_j
        g_w_dec.column_mut(j).assign(&g_xhat.mapv(|v| v * zj));
        // encoder row: dz * (x - b_pre)
        g_w_enc.row_mut(j).assign(&centered.mapv(|v| v * dz));
        // encoder path of the pre-bias and of the input
        let enc_row = params.w_enc.row(j);
        g_b.scaled_add(-dz, &enc_row);
        g_input.scaled_add(dz, &enc_row);
    }

    Ok((
        SaeGradients {
            w_enc: g_w_enc,
            b_pre: g_b,
            w_dec: g_w_dec,
            input: g_input,
        },
        loss,
    ))
}

/// Rescale every decoder column to unit L2 norm.
pub fn renorm_decoder<F: Real>(params: &mut SaeParams<F>) -> Result<()> {
    for j in 0..params.latent_width() {
        let mut col = params.w_dec.column_mut(j);
        let norm = col.iter().fold(F::zero(), |acc, v| acc + *v * *v).sqrt();
        if norm == F::zero() {
            return Err(Error::Data(format!("decoder column {j} has zero norm")));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Seeded initialization: unit-norm decoder columns, encoder set to the
/// decoder transpose, zero pre-bias.
pub fn init_params<F: Real>(
    d: usize,
    latent_width: usize,
    k: usize,
    activation: Activation,
    seed: u64,
) -> SaeParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_dec = Array2::zeros((d, latent_width));
    for j in 0..latent_width {
        let mut norm2 = 0.0f64;
        let mut col = vec![0.0f64; d];
        for v in col.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            norm2 += *v * *v;
        }
        let norm = norm2.sqrt();
        for (i, v) in col.iter().enumerate() {
            w_dec[(i, j)] = F::of(v / norm);
        }
    }
    let w_enc = Array2::from_shape_fn((latent_width, d), |(j, i)| w_dec[(i, j)]);
    SaeParams {
        w_enc,
        b_pre: Array1::zeros(d),
        w_dec,
        activation,
        k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{finite_difference, random_vector};
    use ndarray::array;

    fn identity_params(activation: Activation, k: usize) -> SaeParams<f64> {
        SaeParams {
            w_enc: Array2::eye(3),
            b_pre: Array1::zeros(3),
            w_dec: Array2::eye(3),
            activation,
            k,
        }
    }

    #[test]
    fn topk_keeps_largest_by_value() {
        let params = identity_params(Activation::TopK, 2);
        let code = encode(&params, array![3.0, 1.0, 2.0].view());
        assert_eq!(code.indices, vec![0, 2]);
        assert_eq!(code.values, vec![3.0, 2.0]);
    }

    #[test]
    fn k_equal_m_is_the_identity_on_preactivations() {
        let params = identity_params(Activation::TopK, 3);
        let x = array![0.5, -1.5, 2.5];
        let code = encode(&params, x.view());
        assert_eq!(code.indices, vec![0, 1, 2]);
        assert_eq!(code.to_dense(), x);
    }

    #[test]
    fn topk_ties_break_toward_lower_index() {
        let params = identity_params(Activation::TopK, 1);
        let code = encode(&params, array![1.0, 1.0, 0.0].view());
        assert_eq!(code.indices, vec![0]);
    }

    #[test]
    fn relu_drops_nonpositive() {
        let params = identity_params(Activation::Relu, 0);
        let code = encode(&params, array![0.5, -0.5, 0.0].view());
        assert_eq!(code.indices, vec![0]);
        assert_eq!(code.values, vec![0.5]);
    }

    #[test]
    fn decode_empty_code_is_bias() {
        let mut params = identity_params(Activation::TopK, 1);
        params.b_pre = array![1.0, 2.0, 3.0];
        let code = SparseCode {
            indices: vec![],
            values: vec![],
            latent_width: 3,
        };
        assert_eq!(decode(&params, &code).unwrap(), params.b_pre);
    }

    #[test]
    fn decode_single_column() {
        let params = SaeParams::<f64> {
            w_enc: Array2::zeros((2, 2)),
            b_pre: Array1::zeros(2),
            w_dec: array![[0.6, 0.0], [0.8, 0.0]],
            activation: Activation::TopK,
            k: 1,
        };
        let code = SparseCode {
            indices: vec![0],
            values: vec![2.0],
            latent_width: 2,
        };
        let x_hat = decode(&params, &code).unwrap();
        assert!((x_hat[0] - 1.2).abs() < 1e-15);
        assert!((x_hat[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn decode_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (d, m, k) = (6, 12, 4);
            let params = {
                let mut p = init_params::<f64>(d, m, k, Activation::TopK, 99);
                p.b_pre = Array1::from(random_vector(&mut rng, d));
                p
            };
            let x = Array1::from(random_vector(&mut rng, d));
            let code = encode(&params, x.view());
            let x_hat = decode(&params, &code).unwrap();
            let dense = params.w_dec.dot(&code.to_dense()) + &params.b_pre;
            for (a, b) in x_hat.iter().zip(dense.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_mse(array![1.0, 2.0].view(), array![1.0, 2.0].view()), 0.0);
        assert_eq!(loss_mse(array![1.0, 0.0].view(), array![0.0, 0.0].view()), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = Array1::from(random_vector(&mut rng, 16));
            let y = Array1::from(random_vector(&mut rng, 16));
            let got: f64 = loss_mse(x.view(), y.view());
            let oracle: f64 = x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0));
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_gradients() {
        // d = M = 3, identity weights, k = M: x_hat == x exactly
        let params = identity_params(Activation::TopK, 3);
        let x = array![0.3, -0.7, 1.1];
        let code = encode(&params, x.view());
        let (grads, loss) = sae_backward(&params, x.view(), &code, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.w_enc.iter().all(|v| *v == 0.0));
        assert!(grads.w_dec.iter().all(|v| *v == 0.0));
        assert!(grads.b_pre.iter().all(|v| *v == 0.0));
        assert!(grads.input.iter().all(|v| *v == 0.0));
    }

    /// Flatten params + input, evaluate loss as a pure function, and compare
    /// analytic gradients against central finite differences.
    fn check_gradients(activation: Activation, l1: f64, seed: u64) {
        let (d, m, k) = (5, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params::<f64>(d, m, k, activation, seed ^ 0xABCD);
        params.b_pre = Array1::from(random_vector(&mut rng, d)) * 0.1;
        let x = Array1::from(random_vector(&mut rng, d));

        let code = encode(&params, x.view());
        let (grads, _) = sae_backward(&params, x.view(), &code, l1).unwrap();

        let pack = |p: &SaeParams<f64>, xv: &Array1<f64>| -> Vec<f64> {
            p.w_enc
                .iter()
                .chain(p.b_pre.iter())
                .chain(p.w_dec.iter())
                .chain(xv.iter())
                .copied()
                .collect()
        };
        let unpack = |theta: &[f64]| -> (SaeParams<f64>, Array1<f64>) {
            let mut p = params.clone();
            let mut it = theta.iter().copied();
            p.w_enc.iter_mut().for_each(|v| *v = it.next().unwrap());
            p.b_pre.iter_mut().for_each(|v| *v = it.next().unwrap());
            p.w_dec.iter_mut().for_each(|v| *v = it.next().unwrap());
            let xv = Array1::from(it.collect::<Vec<f64>>());
            (p, xv)
        };
        let theta0 = pack(&params, &x);
        let loss_fn = |theta: &[f64]| {
            let (p, xv) = unpack(theta);
            let c = encode(&p, xv.view());
            let x_hat = decode(&p, &c).unwrap();
            let mut l = loss_mse(xv.view(), x_hat.view());
            if p.activation == Activation::Relu && l1 > 0.0 {
                l += l1 * c.values.iter().map(|v| v.abs()).sum::<f64>();
            }
            l
        };
        let fd = finite_difference(&loss_fn, &theta0, 1e-5);
        let analytic = pack(
            &SaeParams {
                w_enc: grads.w_enc,
                b_pre: grads.b_pre,
                w_dec: grads.w_dec,
                activation,
                k,
            },
            &grads.input,
        );
        let scale = fd.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (i, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
            assert!(
                (a - f).abs() <= 1e-4 * scale,
                "component {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_topk() {
        for seed in [1, 2, 3, 4] {
            check_gradients(Activation::TopK, 0.0, seed);
        }
    }

    #[test]
    fn gradients_match_finite_differences_relu_with_l1() {
        for seed in [10, 11, 12] {
            check_gradients(Activation::Relu, 1e-3, seed);
        }
    }

    #[test]
    fn renorm_examples() {
        let mut params = SaeParams::<f64> {
            w_enc: Array2::zeros((2, 2)),
            b_pre: Array1::zeros(2),
            w_dec: array![[3.0, 0.6], [4.0, 0.8]],
            activation: Activation::TopK,
            k: 1,
        };
        renorm_decoder(&mut params).unwrap();
        assert!((params.w_dec[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((params.w_dec[(1, 0)] - 0.8).abs() < 1e-12);

        // already unit: idempotent within 1e-12
        let before = params.w_dec.clone();
        renorm_decoder(&mut params).unwrap();
        for (a, b) in params.w_dec.iter().zip(before.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn renorm_random_columns_become_unit() {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = init_params::<f64>(6, 10, 3, Activation::TopK, 17);
        params.w_dec.mapv_inplace(|v| v * 3.7);
        params.w_dec[(0, 4)] += rng.random_range(0.0..1.0);
        renorm_decoder(&mut params).unwrap();
        for j in 0..10 {
            let norm: f64 = params.w_dec.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn renorm_zero_column_names_the_column() {
        let mut params = identity_params(Activation::TopK, 1);
        params.w_dec.column_mut(1).fill(0.0);
        let err = renorm_decoder(&mut params).unwrap_err();
        assert!(err.to_string().contains("column 1"), "{err}");
    }

    #[test]
    fn init_is_deterministic_and_unit_norm() {
        let a = init_params::<f32>(8, 16, 4, Activation::TopK, 42);
        let b = init_params::<f32>(8, 16, 4, Activation::TopK, 42);
        assert_eq!(a, b);
        let c = init_params::<f32>(8, 16, 4, Activation::TopK, 43);
        assert_ne!(a, c);
        for j in 0..16 {
            let norm: f32 = a.w_dec.column(j).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_eq!(a.w_enc, a.w_dec.t());
        assert!(a.b_pre.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_is_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = init_params::<f64>(5, 9, 3, Activation::TopK, 23);
        params.b_pre = Array1::from(random_vector(&mut rng, 5));
        let x = Array1::from(random_vector(&mut rng, 5));
        let code = encode(&params, x.view());
        for c in [0.5, -2.0, 3.25] {
            let scaled = SparseCode {
                indices: code.indices.clone(),
                values: code.values.iter().map(|v| v * c).collect(),
                latent_width: code.latent_width,
            };
            let lhs = decode(&params, &scaled).unwrap() - &params.b_pre;
            let rhs = (decode(&params, &code).unwrap() - &params.b_pre).mapv(|v| v * c);
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn renorm_preserves_decode_under_rescaled_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut params = init_params::<f64>(4, 7, 2, Activation::TopK, 31);
        params.w_dec.mapv_inplace(|v| v * 2.5);
        params.b_pre = Array1::from(random_vector(&mut rng, 4));
        let x = Array1::from(random_vector(&mut rng, 4));
        let code = encode(&params, x.view());
        let before = decode(&params, &code).unwrap();

        let norms: Vec<f64> = (0..7)
            .map(|j| params.w_dec.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut renormed = params.clone();
        renorm_decoder(&mut renormed).unwrap();
        let rescaled = SparseCode {
            indices: code.indices.clone(),
            values: code
                .indices
                .iter()
                .zip(&code.values)
                .map(|(&j, &v)| v * norms[j])
                .collect(),
            latent_width: code.latent_width,
        };
        let after = decode(&renormed, &rescaled).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_l0_is_exactly_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for k in 1..=8 {
            let params = init_params::<f64>(6, 8, k, Activation::TopK, 37 + k as u64);
            let x = Array1::from(random_vector(&mut rng, 6));
            assert_eq!(encode(&params, x.view()).l0(), k);
        }
    }
}
