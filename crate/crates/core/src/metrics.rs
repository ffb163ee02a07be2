//! Evaluation: risks, accuracy, worst-case objectives, feature
//! distances, and empirical estimates of the constants entering the
//! step-size bounds.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{backward, logistic_loss, FixedHead, FrozenEncoder, GradBundle, LoraAdapter};
use crate::reg::{dist, DistanceKind, RegSpec};

/// Mean logistic loss and sign-match accuracy of `head ∘ encoder` with
/// the given adapter over a dataset.
pub fn empirical_risk(
    enc: &FrozenEncoder,
    adapter: &LoraAdapter,
    head: &FixedHead,
    data: &Dataset,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("empirical risk over empty dataset"));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (x, &y) in data.xs.iter().zip(&data.ys) {
        let z = enc.encode(adapter, x)?;
        let logit = head.predict(&z)?;
        loss += logistic_loss(logit, y);
        let pred = if logit >= 0.0 { 1.0 } else { -1.0 };
        if pred == y {
            hits += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Worst-case risk over a list of (model, evaluation environment)
/// pairs; the executable form of the minimax objective. Callers pair
/// personalized adapters with their own shifted environments and the
/// global adapter with every environment.
pub fn worst_case_ood(
    enc: &FrozenEncoder,
    head: &FixedHead,
    pairs: &[(&LoraAdapter, &Dataset)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("worst_case_ood over empty pair list"));
    }
    let mut worst = f64::NEG_INFINITY;
    for (adapter, data) in pairs {
        let (risk, _) = empirical_risk(enc, adapter, head, data)?;
        worst = worst.max(risk);
    }
    Ok(worst)
}

/// Mean feature distance between two adapters' encoders over a dataset.
pub fn mean_feature_distance(
    enc: &FrozenEncoder,
    personalized: &LoraAdapter,
    global: &LoraAdapter,
    data: &Dataset,
    kind: DistanceKind,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("feature distance over empty dataset"));
    }
    let mut acc = 0.0;
    for x in &data.xs {
        let zp = enc.encode(personalized, x)?;
        let zg = enc.encode(global, x)?;
        acc += dist(&zp, &zg, kind)?;
    }
    Ok(acc / data.len() as f64)
}

/// Empirical estimates of the constants in the convergence analysis:
/// smoothness `L`, stochastic gradient bound `sigma`, client diversity
/// `G`, and the initial personalized-global parameter gap `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub smoothness: f64,
    pub grad_bound: f64,
    pub diversity: f64,
    pub init_gap: f64,
}

/// Probe settings for [`estimate_convergence_constants`].
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    /// Number of random parameter pairs for the smoothness ratio.
    pub n_pairs: usize,
    /// Std-dev of the entrywise parameter perturbations.
    pub perturb_scale: f64,
    /// Mini-batch size for the gradient-norm bound.
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_pairs: 100,
            perturb_scale: 0.1,
            batch_size: 32,
        }
    }
}

fn perturbed(base: &LoraAdapter, std: f64, rng: &mut impl Rng) -> LoraAdapter {
    let mut out = base.clone();
    for layer in &mut out.layers {
        let noise_a = Matrix::from_fn(layer.a.rows(), layer.a.cols(), || {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        let noise_b = Matrix::from_fn(layer.b.rows(), layer.b.cols(), || {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        layer.a.axpy(&noise_a, 1.0).expect("same shape");
        layer.b.axpy(&noise_b, 1.0).expect("same shape");
    }
    out
}

fn full_batch_grads(
    enc: &FrozenEncoder,
    adapter: &LoraAdapter,
    head: &FixedHead,
    data: &Dataset,
) -> Result<GradBundle> {
    let (_, g) = backward(enc, adapter, head, &data.xs, &data.ys, &RegSpec::off(), None)?;
    Ok(g)
}

/// Probe the loss landscape around `base`:
///
/// * `L`: max over random parameter pairs of
///   `||∇R_e(φ) - ∇R_e(φ')|| / ||φ - φ'||`;
/// * `sigma`: max observed mini-batch gradient norm;
/// * `G`: max over clients of `||∇R_e(φ) - ∇R(φ)||` at `base`, with the
///   global gradient weighted by dataset size;
/// * `M`: max parameter distance of the personalized adapters from
///   `base` (zero when none are given — the default initialization).
pub fn estimate_convergence_constants(
    enc: &FrozenEncoder,
    head: &FixedHead,
    base: &LoraAdapter,
    personalized: Option<&[LoraAdapter]>,
    datasets: &[Dataset],
    probe: &ProbeConfig,
    rng: &mut impl Rng,
) -> Result<ConvergenceConstants> {
    if datasets.is_empty() || datasets.iter().any(Dataset::is_empty) {
        return Err(Error::invalid("estimator needs nonempty datasets"));
    }
    if probe.n_pairs < 2 {
        return Err(Error::invalid("estimator needs at least 2 probe pairs"));
    }

    let mut smoothness: f64 = 0.0;
    let mut grad_bound: f64 = 0.0;
    for i in 0..probe.n_pairs {
        let data = &datasets[i % datasets.len()];
        let phi1 = perturbed(base, probe.perturb_scale, rng);
        let phi2 = perturbed(base, probe.perturb_scale, rng);
        let gap = phi1.param_distance_sq(&phi2)?.sqrt();
        if gap == 0.0 {
            continue;
        }
        let g1 = full_batch_grads(enc, &phi1, head, data)?;
        let g2 = full_batch_grads(enc, &phi2, head, data)?;
        smoothness = smoothness.max(g1.distance(&g2) / gap);

        // mini-batch gradient norm at a probe point
        let b = probe.batch_size.min(data.len());
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let xs: Vec<Vec<f64>> = idx.iter().map(|&j| data.xs[j].clone()).collect();
        let ys: Vec<f64> = idx.iter().map(|&j| data.ys[j]).collect();
        let (_, mb) = backward(enc, &phi1, head, &xs, &ys, &RegSpec::off(), None)?;
        grad_bound = grad_bound.max(mb.norm_sq().sqrt());
    }

    let per_client: Vec<GradBundle> = datasets
        .iter()
        .map(|d| full_batch_grads(enc, base, head, d))
        .collect::<Result<_>>()?;
    let total: f64 = datasets.iter().map(|d| d.len() as f64).sum();
    let mut mean = GradBundle::zeros_like(base);
    for (g, d) in per_client.iter().zip(datasets) {
        let w = d.len() as f64 / total;
        for (m, l) in mean.layers.iter_mut().zip(&g.layers) {
            m.da.axpy(&l.da, w)?;
            m.db.axpy(&l.db, w)?;
        }
    }
    let diversity = per_client
        .iter()
        .map(|g| g.distance(&mean))
        .fold(0.0f64, f64::max);

    let init_gap = match personalized {
        Some(adapters) => {
            let mut worst = 0.0f64;
            for a in adapters {
                worst = worst.max(a.param_distance_sq(base)?.sqrt());
            }
            worst
        }
        None => 0.0,
    };

    Ok(ConvergenceConstants {
        smoothness,
        grad_bound,
        diversity,
        init_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EnvSpec;
    use crate::fixtures;
    use crate::nn::{Activation, EncoderLayer};
    use crate::rng::stream;

    fn identity_model(dim: usize) -> (FrozenEncoder, FixedHead) {
        let mut w0 = Matrix::zeros(dim, dim);
        for i in 0..dim {
            w0.set(i, i, 1.0);
        }
        let enc = FrozenEncoder::new(vec![EncoderLayer {
            w0,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
            adapted: true,
        }])
        .unwrap();
        let mut h = vec![0.0; dim];
        h[0] = 1.0;
        let head = FixedHead::new(Matrix::from_rows(&[h]).unwrap()).unwrap();
        (enc, head)
    }

    fn dataset(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Dataset {
        Dataset {
            xs,
            ys,
            env_id: "t".into(),
        }
    }

    #[test]
    fn saturated_correct_predictions_have_zero_loss() {
        let (enc, head) = identity_model(2);
        let ad = LoraAdapter::zeros(&enc, 1, 1.0).unwrap();
        let ds = dataset(
            vec![vec![45.0, 0.0], vec![-52.0, 1.0], vec![41.0, -3.0]],
            vec![1.0, -1.0, 1.0],
        );
        let (loss, acc) = empirical_risk(&enc, &ad, &head, &ds).unwrap();
        assert!(loss <= 1e-15);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn independent_labels_score_half() {
        let mut rng = stream(31, &[0]);
        let (enc, head, ad) =
            fixtures::random_instance(6, 4, 2, 1, Activation::Tanh, &mut rng).unwrap();
        let n = 10_000;
        let (xs, ys) = fixtures::random_batch(n, 6, &mut rng);
        let (_, acc) = empirical_risk(&enc, &ad, &head, &dataset(xs, ys)).unwrap();
        assert!((acc - 0.5).abs() < 3.0 / (n as f64).sqrt(), "acc {acc}");
    }

    #[test]
    fn risk_matches_reference_reimplementation() {
        let mut rng = stream(33, &[1]);
        let (enc, head, _) =
            fixtures::random_instance(5, 3, 2, 2, Activation::Tanh, &mut rng).unwrap();
        let ad = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.4, &mut rng).unwrap();
        let (xs, ys) = fixtures::random_batch(40, 5, &mut rng);
        let ds = dataset(xs, ys);
        let (risk, _) = empirical_risk(&enc, &ad, &head, &ds).unwrap();

        // independent path: materialize every effective weight, run plain
        // loops, average the stable logistic loss
        let mut acc = 0.0;
        for (x, &y) in ds.xs.iter().zip(&ds.ys) {
            let mut u = x.clone();
            for (slot, layer) in enc.layers().iter().enumerate() {
                let mut w = layer.w0.clone();
                let delta = ad.layers[slot].materialize_delta(ad.scale).unwrap();
                w.axpy(&delta, 1.0).unwrap();
                let mut next = vec![0.0; w.rows()];
                for (r, o) in next.iter_mut().enumerate() {
                    let mut s = layer.bias[r];
                    for (c, &uv) in u.iter().enumerate() {
                        s += w.get(r, c) * uv;
                    }
                    *o = layer.activation.apply(s);
                }
                u = next;
            }
            let logit: f64 = head.weights().iter().zip(&u).map(|(w, z)| w * z).sum();
            let m = -y * logit;
            acc += if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
        }
        let oracle = acc / ds.len() as f64;
        assert!((risk - oracle).abs() < 1e-12, "{risk} vs {oracle}");
    }

    #[test]
    fn worst_case_examples() {
        let (enc, head) = identity_model(2);
        let ad = LoraAdapter::zeros(&enc, 1, 1.0).unwrap();
        let easy = dataset(vec![vec![40.0, 0.0]], vec![1.0]);
        let hard = dataset(vec![vec![40.0, 0.0]], vec![-1.0]);
        let mid = dataset(vec![vec![0.0, 0.0]], vec![1.0]);

        let single = worst_case_ood(&enc, &head, &[(&ad, &easy)]).unwrap();
        let (easy_risk, _) = empirical_risk(&enc, &ad, &head, &easy).unwrap();
        assert_eq!(single, easy_risk);

        let w1 = worst_case_ood(&enc, &head, &[(&ad, &easy), (&ad, &hard), (&ad, &mid)]).unwrap();
        let w2 = worst_case_ood(
            &enc,
            &head,
            &[(&ad, &easy), (&ad, &hard), (&ad, &mid), (&ad, &hard)],
        )
        .unwrap();
        assert_eq!(w1, w2);
        let (hard_risk, _) = empirical_risk(&enc, &ad, &head, &hard).unwrap();
        assert_eq!(w1, hard_risk);
        assert!(w1 > 39.0);
    }

    #[test]
    fn feature_distance_zero_at_equal_adapters() {
        let mut rng = stream(35, &[2]);
        let (enc, _, _) = fixtures::random_instance(4, 3, 2, 2, Activation::Tanh, &mut rng).unwrap();
        let ad = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.3, &mut rng).unwrap();
        let (xs, ys) = fixtures::random_batch(20, 4, &mut rng);
        let ds = dataset(xs, ys);
        let d = mean_feature_distance(&enc, &ad, &ad, &ds, DistanceKind::L2Sq).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn feature_distance_closed_form_on_linear_layer() {
        let mut rng = stream(37, &[3]);
        let enc = fixtures::random_encoder(4, 3, 1, Activation::Identity, &mut rng).unwrap();
        let phi_g = fixtures::dense_random_adapter(&enc, 2, 1.3, 0.4, &mut rng).unwrap();
        let mut phi_e = phi_g.clone();
        let delta_b = Matrix::from_fn(3, 2, || rng.random_range(-0.5..0.5));
        phi_e.layers[0].b.axpy(&delta_b, 1.0).unwrap();

        let (xs, ys) = fixtures::random_batch(30, 4, &mut rng);
        let ds = dataset(xs, ys);
        let measured = mean_feature_distance(&enc, &phi_e, &phi_g, &ds, DistanceKind::L2Sq).unwrap();

        // features differ by scale·ΔB·(A·u) on a linear layer
        let mut expect = 0.0;
        for x in &ds.xs {
            let au = phi_g.layers[0].a.matvec(x).unwrap();
            let diff = delta_b.matvec(&au).unwrap();
            expect += diff.iter().map(|v| (phi_e.scale * v).powi(2)).sum::<f64>();
        }
        expect /= ds.len() as f64;
        assert!((measured - expect).abs() < 1e-10 * expect.max(1.0), "{measured} vs {expect}");
    }

    #[test]
    fn feature_distance_is_shuffle_invariant() {
        let mut rng = stream(39, &[4]);
        let (enc, _, _) = fixtures::random_instance(4, 3, 2, 1, Activation::Tanh, &mut rng).unwrap();
        let a = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.3, &mut rng).unwrap();
        let b = fixtures::dense_random_adapter(&enc, 2, 1.0, 0.3, &mut rng).unwrap();
        let (xs, ys) = fixtures::random_batch(16, 4, &mut rng);
        let ds = dataset(xs, ys);
        let mut shuffled = ds.clone();
        shuffled.xs.reverse();
        shuffled.ys.reverse();
        let d1 = mean_feature_distance(&enc, &a, &b, &ds, DistanceKind::L2Sq).unwrap();
        let d2 = mean_feature_distance(&enc, &a, &b, &shuffled, DistanceKind::L2Sq).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    fn toy_env(n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, &[77]);
        let rule = crate::data::InvariantRule::sample(3, &mut rng);
        crate::data::sample_env(
            &rule,
            &EnvSpec {
                env_id: format!("e{seed}"),
                beta: 0.5,
                d_inv: 3,
                d_spu: 2,
                label_noise: 0.25,
                n_train: n,
                n_test: n,
            },
            n,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn identical_clients_have_zero_diversity() {
        let mut rng = stream(41, &[5]);
        let (enc, head, base) =
            fixtures::random_instance(5, 4, 2, 1, Activation::Tanh, &mut rng).unwrap();
        let ds = toy_env(64, 9);
        let datasets = vec![ds.clone(), ds.clone(), ds];
        let est = estimate_convergence_constants(
            &enc,
            &head,
            &base,
            None,
            &datasets,
            &ProbeConfig {
                n_pairs: 4,
                ..ProbeConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(est.diversity <= 1e-10, "diversity {}", est.diversity);
        assert_eq!(est.init_gap, 0.0);
    }

    #[test]
    fn split_probe_estimates_are_stable() {
        let mut rng = stream(43, &[6]);
        let (enc, head, base) =
            fixtures::random_instance(5, 4, 2, 1, Activation::Tanh, &mut rng).unwrap();
        let datasets: Vec<Dataset> = (0..3).map(|i| toy_env(256, 100 + i)).collect();
        let probe = ProbeConfig {
            n_pairs: 100,
            perturb_scale: 0.1,
            batch_size: 32,
        };
        let a = estimate_convergence_constants(
            &enc,
            &head,
            &base,
            None,
            &datasets,
            &probe,
            &mut stream(43, &[7]),
        )
        .unwrap();
        let b = estimate_convergence_constants(
            &enc,
            &head,
            &base,
            None,
            &datasets,
            &probe,
            &mut stream(43, &[8]),
        )
        .unwrap();
        let within = |x: f64, y: f64| (x - y).abs() <= 0.2 * x.abs().max(y.abs());
        assert!(within(a.smoothness, b.smoothness), "L {} vs {}", a.smoothness, b.smoothness);
        assert!(within(a.grad_bound, b.grad_bound), "sigma {} vs {}", a.grad_bound, b.grad_bound);
    }
}
