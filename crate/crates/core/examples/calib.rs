//! Scratch calibration probe (not part of the deliverable surface):
//! explores default hyperparameters for the shipped benchmark.

use fedoa_core::fed::experiment::{build_experiment, run_experiment, LayoutSpec, ModelSpec, RunConfig};
use rand::Rng as _;
use fedoa_core::fed::{stepsize_bounds, Baseline, FedConfig};
use fedoa_core::metrics::{estimate_convergence_constants, ProbeConfig};
use fedoa_core::nn::Activation;
use fedoa_core::reg::{DistanceKind, RegSpec};

fn cfg(baseline: Baseline, lambda: f64, seed: u64, eta_l: f64, eta_g: f64, rounds: usize, h: usize, layers: usize) -> RunConfig {
    RunConfig {
        fed: FedConfig {
            rounds,
            local_steps: 2,
            k_as_epochs: false,
            local_lr: eta_l,
            global_lr: eta_g,
            reg: RegSpec::new(DistanceKind::L2Sq, lambda).unwrap(),
            alpha: None,
            sample_frac: 1.0,
            batch_size: 32,
            global_steps: 1,
            global_full_batch: true,
            baseline,
            seed,
        },
        layout: LayoutSpec {
            n_clients: 6,
            beta_lo: 0.6,
            beta_hi: 0.9,
            heldout_beta: -0.9,
            d_inv: 5,
            d_spu: 5,
            label_noise: 0.25,
            n_train: 1000,
            n_test: 200,
        },
        model: ModelSpec {
            feature_dim: h,
            n_layers: layers,
            activation: std::env::var("CALIB_ACT").ok().map(|v| match v.as_str() { "identity" => Activation::Identity, "relu" => Activation::Relu, _ => Activation::Tanh }).unwrap_or(Activation::Tanh),
            rank: 8,
            scale: 1.0,
        },
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("ood");

    match mode {
        "consts" => {
            // estimate convergence constants on the default instance
            for h in [8usize, 16] {
                for layers in [1usize, 2] {
                    let c = cfg(Baseline::Fedoa, 0.5, 1, 0.1, 0.1, 20, h, layers);
                    let exp = build_experiment(&c).unwrap();
                    let est = estimate_convergence_constants(
                        &exp.encoder,
                        &exp.head,
                        &exp.init_adapter,
                        None,
                        &exp.train_data,
                        &ProbeConfig::default(),
                        &mut fedoa_core::rng::stream(1, &[99]),
                    )
                    .unwrap();
                    let (el, eg) = stepsize_bounds(est.smoothness, est.grad_bound, 0.5, 2, 200).unwrap();
                    println!(
                        "h={h} layers={layers}: L={:.4} sigma={:.4} G={:.4} -> T=200 bounds eta_l={:.5} eta_g={:.5}",
                        est.smoothness, est.grad_bound, est.diversity, el, eg
                    );
                }
            }
        }
        "decay" => {
            // grad-norm decay at 0.9x the bounds, T=200
            let l: f64 = args[2].parse().unwrap();
            let s: f64 = args[3].parse().unwrap();
            let h: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(16);
            let layers: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(2);
            let bounds_t: usize = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(200);
            let (el, eg) = stepsize_bounds(l, s, 0.5, 2, bounds_t).unwrap();
            println!("bounds: eta_l={el:.6} eta_g={eg:.6}, using 0.9x");
            for seed in 1..=5u64 {
                let c = cfg(Baseline::Fedoa, 0.5, seed, 0.9 * el, 0.9 * eg, 200, h, layers);
                let t0 = std::time::Instant::now();
                let out = run_experiment(&c).unwrap();
                let g: Vec<f64> = out
                    .report
                    .rounds
                    .iter()
                    .map(|r| {
                        r.clients.iter().map(|c| c.grad_norm_sq).sum::<f64>() / r.clients.len() as f64
                    })
                    .collect();
                let first: f64 = g[..20].iter().sum::<f64>() / 20.0;
                let last: f64 = g[180..].iter().sum::<f64>() / 20.0;
                println!(
                    "seed {seed}: first20={first:.6e} last20={last:.6e} ratio={:.4} ({:.1}s)",
                    last / first,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "ood" => {
            // default-benchmark OOD ordering at T=20
            let eta_l: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(0.1);
            let eta_g: f64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(0.1);
            let h: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(16);
            let layers: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(2);
            let mut fedoa_accs = Vec::new();
            let mut local_accs = Vec::new();
            for seed in 1..=5u64 {
                let fo = run_experiment(&cfg(Baseline::Fedoa, 0.5, seed, eta_l, eta_g, 20, h, layers)).unwrap();
                let lo = run_experiment(&cfg(Baseline::LocalOnly, 0.5, seed, eta_l, eta_g, 20, h, layers)).unwrap();
                let fa = fo.report.final_eval.mean_personalized_ood_accuracy.unwrap();
                let la = lo.report.final_eval.mean_personalized_ood_accuracy.unwrap();
                let ceil = fo.report.final_eval.invariant_ceiling_accuracy;
                let ftraj = fo.report.feature_distance_trajectory.as_ref().unwrap();
                let ltraj = lo.report.feature_distance_trajectory.as_ref().unwrap();
                let dominated = ftraj.iter().zip(ltraj).filter(|(f, l)| f <= l).count();
                println!(
                    "seed {seed}: fedoa={fa:.4} local={la:.4} gap={:.4} ceil={ceil:.4} heldout={:.4} traj_dom={dominated}/20 fdist_end={:.4e} ldist_end={:.4e}",
                    fa - la,
                    fo.report.final_eval.global_heldout.as_ref().unwrap().accuracy,
                    ftraj[19],
                    ltraj[19],
                );
                fedoa_accs.push(fa);
                local_accs.push(la);
            }
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!("mean fedoa={:.4} local={:.4} gap={:.4}", m(&fedoa_accs), m(&local_accs), m(&fedoa_accs) - m(&local_accs));
        }
        "lambda" => {
            // converged feature distance vs lambda
            let eta_l: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(0.1);
            let eta_g: f64 = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(0.1);
            let h: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(16);
            for lambda in [0.01, 0.1, 0.5, 1.0, 2.0] {
                let mut ends = Vec::new();
                for seed in 1..=5u64 {
                    let out = run_experiment(&cfg(Baseline::Fedoa, lambda, seed, eta_l, eta_g, 20, h, 2)).unwrap();
                    let traj = out.report.feature_distance_trajectory.unwrap();
                    let tail = &traj[15..];
                    ends.push(tail.iter().sum::<f64>() / tail.len() as f64);
                }
                let m = ends.iter().sum::<f64>() / 5.0;
                let sd = (ends.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 4.0).sqrt();
                println!("lambda={lambda}: converged_dist mean={m:.6e} sd={sd:.2e}");
            }
        }
        "secant" => {
            // curvature along gradient directions near the init region
            use fedoa_core::nn::backward;
            use fedoa_core::reg::RegSpec as RS;
            let h: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(16);
            let layers: usize = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(2);
            let c = cfg(Baseline::Fedoa, 0.5, 1, 0.1, 0.1, 20, h, layers);
            let exp = build_experiment(&c).unwrap();
            let mut rng = fedoa_core::rng::stream(1, &[123]);
            let mut lmax: f64 = 0.0;
            let mut smax: f64 = 0.0;
            for i in 0..100 {
                let data = &exp.train_data[i % 6];
                let phi = fedoa_core::fixtures::dense_random_adapter(&exp.encoder, 8, 1.0, 0.0, &mut rng)
                    .map(|mut z| {
                        z.axpy_adapter(&exp.init_adapter, 1.0).unwrap();
                        for l in &mut z.layers {
                            let na = fedoa_core::matrix::Matrix::from_fn(l.a.rows(), l.a.cols(), || rng.random_range(-0.04..0.04));
                            let nb = fedoa_core::matrix::Matrix::from_fn(l.b.rows(), l.b.cols(), || rng.random_range(-0.04..0.04));
                            l.a.axpy(&na, 1.0).unwrap();
                            l.b.axpy(&nb, 1.0).unwrap();
                        }
                        z
                    })
                    .unwrap();
                let (_, g) = backward(&exp.encoder, &phi, &exp.head, &data.xs, &data.ys, &RS::off(), None).unwrap();
                let gnorm = g.norm_sq().sqrt();
                if gnorm == 0.0 { continue; }
                let tau = 0.05 / gnorm;
                let mut phi2 = phi.clone();
                phi2.axpy_grads(&g, -tau).unwrap();
                let (_, g2) = backward(&exp.encoder, &phi2, &exp.head, &data.xs, &data.ys, &RS::off(), None).unwrap();
                let gap = phi.param_distance_sq(&phi2).unwrap().sqrt();
                lmax = lmax.max(g.distance(&g2) / gap);
                // minibatch grad norm at phi
                let idx: Vec<usize> = (0..32).map(|_| rng.random_range(0..data.xs.len())).collect();
                let xs: Vec<Vec<f64>> = idx.iter().map(|&j| data.xs[j].clone()).collect();
                let ys: Vec<f64> = idx.iter().map(|&j| data.ys[j]).collect();
                let (_, mb) = backward(&exp.encoder, &phi, &exp.head, &xs, &ys, &RS::off(), None).unwrap();
                smax = smax.max(mb.norm_sq().sqrt());
            }
            let (el, eg) = stepsize_bounds(lmax, smax, 0.5, 2, 200).unwrap();
            println!("secant: L={lmax:.5} sigma={smax:.5} -> eta_l={el:.5} eta_g={eg:.5}");
        }
        "traj" => {
            let l: f64 = args[2].parse().unwrap();
            let s: f64 = args[3].parse().unwrap();
            let h: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(16);
            let layers: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(2);
            let bounds_t: usize = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(200);
            let rounds: usize = args.get(7).map(|v| v.parse().unwrap()).unwrap_or(200);
            let (el, eg) = stepsize_bounds(l, s, 0.5, 2, bounds_t).unwrap();
            let c = cfg(Baseline::Fedoa, 0.5, 1, 0.9 * el, 0.9 * eg, rounds, h, layers);
            let out = run_experiment(&c).unwrap();
            println!("round grad2 risk fdist globrisk");
            for r in out.report.rounds.iter().step_by(10) {
                let g = r.clients.iter().map(|c| c.grad_norm_sq).sum::<f64>() / 6.0;
                let risk = r.clients.iter().map(|c| c.train_risk).sum::<f64>() / 6.0;
                let fd = r.clients.iter().map(|c| c.feat_dist).sum::<f64>() / 6.0;
                println!(
                    "{:3} {:.4e} {:.6} {:.3e} {:.6}",
                    r.round,
                    g,
                    risk,
                    fd,
                    r.global_risk.unwrap()
                );
            }
            let fe = out.report.final_eval;
            println!(
                "mean_pers_ood_acc={:.4} heldout_acc={:.4} ceiling={:.4}",
                fe.mean_personalized_ood_accuracy.unwrap(),
                fe.global_heldout.unwrap().accuracy,
                fe.invariant_ceiling_accuracy
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
