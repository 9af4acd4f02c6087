//! Crosscoder baseline: per-layer encoders into one shared TopK latent,
//! per-layer decoders, summed reconstruction loss. Implemented from the
//! published description; no official reference exists.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sae::{init_params, top_k_select, Activation, SparseCode};

/// Per-layer encoder/decoder family sharing one latent space of width M.
/// Each layer's bias plays the pre-bias role on both paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderParams<F> {
    pub w_enc: Vec<Array2<F>>,
    pub w_dec: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
    pub k: usize,
}

impl<F: Real> CrosscoderParams<F> {
    pub fn num_layers(&self) -> usize {
        self.w_enc.len()
    }

    pub fn d(&self) -> usize {
        self.w_dec[0].nrows()
    }

    pub fn latent_width(&self) -> usize {
        self.w_dec[0].ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_layers();
        if l == 0 || self.w_dec.len() != l || self.b.len() != l {
            return Err(Error::Shape("inconsistent per-layer tensor counts".into()));
        }
        let (m, d) = (self.latent_width(), self.d());
        for i in 0..l {
            if self.w_enc[i].dim() != (m, d) || self.w_dec[i].dim() != (d, m) || self.b[i].len() != d
            {
                return Err(Error::Shape(format!("layer {i} tensor shapes inconsistent")));
            }
        }
        if !(1..=m).contains(&self.k) {
            return Err(Error::Shape(format!("sparsity k={} out of range 1..={m}", self.k)));
        }
        Ok(())
    }
}

/// Seeded initialization mirroring the single-SAE scheme layer by layer.
pub fn init_crosscoder<F: Real>(
    d: usize,
    latent_width: usize,
    k: usize,
    num_layers: usize,
    seed: u64,
) -> CrosscoderParams<F> {
    let mut w_enc = Vec::with_capacity(num_layers);
    let mut w_dec = Vec::with_capacity(num_layers);
    let mut b = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        let sae = init_params::<F>(d, latent_width, k, Activation::TopK, seed.wrapping_add(i as u64));
        w_enc.push(sae.w_enc);
        w_dec.push(sae.w_dec);
        b.push(sae.b_pre);
    }
    CrosscoderParams { w_enc, w_dec, b, k }
}

#[derive(Debug, Clone)]
pub struct CcForward<F> {
    pub code: SparseCode<F>,
    pub reconstructions: Vec<Array1<F>>,
    pub per_layer_loss: Vec<F>,
    pub loss: F,
}

/// `z = TopK(sum_i W_enc_i (x_i - b_i))`; each layer is decoded from the
/// shared code and scored separately.
pub fn cc_forward<F: Real>(
    params: &CrosscoderParams<F>,
    x_by_layer: &[ArrayView1<F>],
) -> Result<CcForward<F>> {
    let l = params.num_layers();
    if x_by_layer.len() != l {
        return Err(Error::Shape(format!(
            "{} layer inputs for a {l}-layer crosscoder",
            x_by_layer.len()
        )));
    }
    let d = params.d();
    let mut u = Array1::zeros(params.latent_width());
    for i in 0..l {
        if x_by_layer[i].len() != d {
            return Err(Error::Shape(format!(
                "layer {i} input width {} != {d}",
                x_by_layer[i].len()
            )));
        }
        let centered = &x_by_layer[i] - &params.b[i];
        u = u + params.w_enc[i].dot(&centered);
    }
    let (indices, values) = top_k_select(&u, params.k);
    let code = SparseCode {
        indices,
        values,
        latent_width: params.latent_width(),
    };

    let mut reconstructions = Vec::with_capacity(l);
    let mut per_layer_loss = Vec::with_capacity(l);
    let mut loss = F::zero();
    for i in 0..l {
        let mut x_hat = params.b[i].clone();
        for (&j, &v) in code.indices.iter().zip(&code.values) {
            x_hat.scaled_add(v, &params.w_dec[i].column(j));
        }
        let li = crate::sae::loss_mse(x_by_layer[i].view(), x_hat.view());
        loss = loss + li;
        per_layer_loss.push(li);
        reconstructions.push(x_hat);
    }
    Ok(CcForward {
        code,
        reconstructions,
        per_layer_loss,
        loss,
    })
}

#[derive(Debug, Clone)]
pub struct CcGradients<F> {
    pub w_enc: Vec<Array2<F>>,
    pub w_dec: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
}

/// Analytic gradients of the summed per-layer loss; the shared TopK
/// selection is treated as locally constant, as in the single SAE.
pub fn cc_backward<F: Real>(
    params: &CrosscoderParams<F>,
    x_by_layer: &[ArrayView1<F>],
    forward: &CcForward<F>,
) -> Result<(CcGradients<F>, F)> {
    let l = params.num_layers();
    let (m, d) = (params.latent_width(), params.d());
    let two = F::of(2.0);

    // residual scale per layer: 2 e_i
    let g_xhat: Vec<Array1<F>> = (0..l)
        .map(|i| {
            let e = &forward.reconstructions[i] - &x_by_layer[i];
            e.mapv(|v| two * v)
        })
        .collect();

    // dL/dz_j accumulates across layers
    let mut dz = vec![F::zero(); forward.code.indices.len()];
    for (slot, &j) in forward.code.indices.iter().enumerate() {
        let mut acc = F::zero();
        for i in 0..l {
            acc = acc + g_xhat[i].dot(&params.w_dec[i].column(j));
        }
        dz[slot] = acc;
    }

    let mut g_w_enc = vec![Array2::zeros((m, d)); l];
    let mut g_w_dec = vec![Array2::zeros((d, m)); l];
    let mut g_b = Vec::with_capacity(l);
    for i in 0..l {
        let centered = &x_by_layer[i] - &params.b[i];
        let mut gb = g_xhat[i].clone();
        for (slot, (&j, &zj)) in forward
            .code
            .indices
            .iter()
            .zip(&forward.code.values)
            .enumerate()
        {
            g_w_dec[i].column_mut(j).assign(&g_xhat[i].mapv(|v| v * zj));
            g_w_enc[i].row_mut(j).assign(&centered.mapv(|v| v * dz[slot]));
            gb.scaled_add(-dz[slot], &params.w_enc[i].row(j));
        }
        g_b.push(gb);
    }
    Ok((
        CcGradients {
            w_enc: g_w_enc,
            w_dec: g_w_dec,
            b: g_b,
        },
        forward.loss,
    ))
}

/// Exact trainable-scalar count.
pub fn cc_param_count<F: Real>(params: &CrosscoderParams<F>) -> usize {
    let (m, d) = (params.latent_width(), params.d());
    params.num_layers() * (2 * m * d + d)
}

/// Trainable-scalar count of the equivalent single SAE at the same (d, M).
pub fn single_sae_param_count(d: usize, latent_width: usize) -> usize {
    2 * latent_width * d + d
}

/// Rescale every per-layer decoder column to unit L2 norm.
pub fn renorm_crosscoder<F: Real>(params: &mut CrosscoderParams<F>) -> Result<()> {
    for (i, w_dec) in params.w_dec.iter_mut().enumerate() {
        for j in 0..w_dec.ncols() {
            let mut col = w_dec.column_mut(j);
            let norm = col.iter().fold(F::zero(), |acc, v| acc + *v * *v).sqrt();
            if norm == F::zero() {
                return Err(Error::Data(format!(
                    "decoder column {j} of layer {i} has zero norm"
                )));
            }
            col.mapv_inplace(|v| v / norm);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{decode, encode, sae_backward, SaeParams};
    use crate::testsupport::{finite_difference, random_vector};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn views<F: Real>(layers: &[Array1<F>]) -> Vec<ArrayView1<'_, F>> {
        layers.iter().map(|x| x.view()).collect()
    }

    #[test]
    fn single_layer_crosscoder_equals_plain_sae() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (d, m, k) = (5, 9, 3);
        let cc = {
            let mut cc = init_crosscoder::<f64>(d, m, k, 1, 7);
            cc.b[0] = Array1::from(random_vector(&mut rng, d)) * 0.2;
            cc
        };
        let sae = SaeParams {
            w_enc: cc.w_enc[0].clone(),
            b_pre: cc.b[0].clone(),
            w_dec: cc.w_dec[0].clone(),
            activation: Activation::TopK,
            k,
        };
        let x = Array1::from(random_vector(&mut rng, d));

        let fwd = cc_forward(&cc, &[x.view()]).unwrap();
        let code = encode(&sae, x.view());
        assert_eq!(fwd.code, code);
        assert_eq!(fwd.reconstructions[0], decode(&sae, &code).unwrap());
        let (sg, sae_loss) = sae_backward(&sae, x.view(), &code, 0.0).unwrap();
        assert_eq!(fwd.loss, sae_loss);

        let (cg, _) = cc_backward(&cc, &[x.view()], &fwd).unwrap();
        assert_eq!(cg.w_enc[0], sg.w_enc);
        assert_eq!(cg.w_dec[0], sg.w_dec);
        assert_eq!(cg.b[0], sg.b_pre);
    }

    #[test]
    fn zero_code_reconstructs_biases() {
        let mut cc = init_crosscoder::<f64>(3, 6, 2, 2, 11);
        cc.b[0] = array![1.0, 2.0, 3.0];
        cc.b[1] = array![-1.0, 0.0, 1.0];
        // force u = 0 by zero encoders and zero-centered inputs
        for w in &mut cc.w_enc {
            w.fill(0.0);
        }
        let xs = vec![cc.b[0].clone(), cc.b[1].clone()];
        let fwd = cc_forward(&cc, &views(&xs)).unwrap();
        assert!(fwd.code.values.iter().all(|v| *v == 0.0));
        assert_eq!(fwd.reconstructions[0], cc.b[0]);
        assert_eq!(fwd.reconstructions[1], cc.b[1]);
        assert!(fwd.loss < 1e-24);
    }

    #[test]
    fn forward_matches_dense_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        let (d, m, k, l) = (4, 8, 3, 3);
        let mut cc = init_crosscoder::<f64>(d, m, k, l, 13);
        for b in &mut cc.b {
            *b = Array1::from(random_vector(&mut rng, d)) * 0.1;
        }
        let xs: Vec<Array1<f64>> =
            (0..l).map(|_| Array1::from(random_vector(&mut rng, d))).collect();
        let fwd = cc_forward(&cc, &views(&xs)).unwrap();

        let mut u = Array1::<f64>::zeros(m);
        for i in 0..l {
            u = u + cc.w_enc[i].dot(&(&xs[i] - &cc.b[i]));
        }
        let mut pairs: Vec<(usize, f64)> = u.iter().cloned().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut z = Array1::<f64>::zeros(m);
        for (j, v) in pairs.into_iter().take(k) {
            z[j] = v;
        }
        let mut loss = 0.0;
        for i in 0..l {
            let x_hat = cc.w_dec[i].dot(&z) + &cc.b[i];
            let e = &xs[i] - &x_hat;
            loss += e.dot(&e);
            for (a, b) in fwd.reconstructions[i].iter().zip(x_hat.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!((fwd.loss - loss).abs() < 1e-6);
        assert_eq!(
            fwd.per_layer_loss.iter().sum::<f64>(),
            fwd.per_layer_loss.iter().sum::<f64>().abs(),
            "per-layer losses are nonnegative"
        );
    }

    #[test]
    fn perfect_reconstruction_gives_zero_gradients() {
        // identity encoders/decoders, k = m = d, zero biases
        let d = 3;
        let cc = CrosscoderParams::<f64> {
            w_enc: vec![Array2::eye(d)],
            w_dec: vec![Array2::eye(d)],
            b: vec![Array1::zeros(d)],
            k: d,
        };
        let x = array![0.4, -0.2, 0.9];
        let fwd = cc_forward(&cc, &[x.view()]).unwrap();
        assert!(fwd.loss < 1e-24);
        let (g, _) = cc_backward(&cc, &[x.view()], &fwd).unwrap();
        assert!(g.w_enc[0].iter().all(|v| *v == 0.0));
        assert!(g.w_dec[0].iter().all(|v| *v == 0.0));
        assert!(g.b[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [130u64, 131, 132] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, m, k, l) = (4, 8, 2, 3);
            let mut cc = init_crosscoder::<f64>(d, m, k, l, seed);
            for b in &mut cc.b {
                *b = Array1::from(random_vector(&mut rng, d)) * 0.1;
            }
            let xs: Vec<Array1<f64>> =
                (0..l).map(|_| Array1::from(random_vector(&mut rng, d))).collect();
            let fwd = cc_forward(&cc, &views(&xs)).unwrap();
            let (grads, _) = cc_backward(&cc, &views(&xs), &fwd).unwrap();

            let pack = |p: &CrosscoderParams<f64>| -> Vec<f64> {
                let mut out = Vec::new();
                for i in 0..l {
                    out.extend(p.w_enc[i].iter());
                    out.extend(p.w_dec[i].iter());
                    out.extend(p.b[i].iter());
                }
                out
            };
            let theta0 = pack(&cc);
            let loss_fn = |theta: &[f64]| -> f64 {
                let mut p = cc.clone();
                let mut it = theta.iter().copied();
                for i in 0..l {
                    p.w_enc[i].iter_mut().for_each(|v| *v = it.next().unwrap());
                    p.w_dec[i].iter_mut().for_each(|v| *v = it.next().unwrap());
                    p.b[i].iter_mut().for_each(|v| *v = it.next().unwrap());
                }
                cc_forward(&p, &views(&xs)).unwrap().loss
            };
            let fd = finite_difference(&loss_fn, &theta0, 1e-5);
            let analytic = pack(&CrosscoderParams {
                w_enc: grads.w_enc.clone(),
                w_dec: grads.w_dec.clone(),
                b: grads.b.clone(),
                k,
            });
            let scale = fd.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            for (i, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
                assert!(
                    (a - f).abs() <= 1e-4 * scale,
                    "seed {seed} component {i}: analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn param_count_examples() {
        let cc = init_crosscoder::<f32>(8, 32, 4, 4, 1);
        assert_eq!(cc_param_count(&cc), 2080);
        assert_eq!(single_sae_param_count(8, 32), 520);

        let cc1 = init_crosscoder::<f32>(8, 32, 4, 1, 1);
        assert_eq!(cc_param_count(&cc1), single_sae_param_count(8, 32));
    }

    #[test]
    fn param_ratio_is_within_half_of_layer_count() {
        for (d, m, l) in [(8, 32, 2), (16, 64, 4), (32, 128, 6), (64, 256, 9)] {
            let cc = init_crosscoder::<f32>(d, m, 4, l, 3);
            let ratio = cc_param_count(&cc) as f64 / single_sae_param_count(d, m) as f64;
            assert!(
                (ratio - l as f64).abs() <= 0.5,
                "(d={d}, M={m}, L={l}): ratio {ratio}"
            );
        }
    }

    #[test]
    fn renorm_normalizes_every_layer() {
        let mut cc = init_crosscoder::<f64>(4, 6, 2, 3, 5);
        for w in &mut cc.w_dec {
            w.mapv_inplace(|v| v * 1.7);
        }
        renorm_crosscoder(&mut cc).unwrap();
        for w in &cc.w_dec {
            for j in 0..w.ncols() {
                let norm: f64 = w.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }
}
