use super::*;
use crate::blur::{blur, data_fit, BlurConfig};
use crate::gan::GeneratorConfig;
use crate::initializer::EncoderConfig;
use crate::scenes::scene;

const K: usize = 7;

fn gen() -> Generator {
    let cfg = GeneratorConfig {
        kernel_size: K,
        latent_dim: 6,
        base_channels: 8,
    };
    Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn encoder() -> Encoder {
    let cfg = EncoderConfig {
        latent_dim: 6,
        widths: vec![4, 4],
        blocks_per_stage: 1,
    };
    Encoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
}

fn tiny_dip() -> DipConfig {
    DipConfig {
        input_channels: 4,
        down: vec![4, 4],
        up: vec![4, 4],
        skip: vec![2, 2],
        output_channels: 1,
    }
}

fn cfg(iterations: usize) -> SolveConfig {
    SolveConfig {
        iterations,
        dip: tiny_dip(),
        average_steps: 50,
        ..SolveConfig::default()
    }
}

fn observation(kernel: &BlurKernel) -> (Tensor, Tensor) {
    let clean = scene(32 + K - 1, 32 + K - 1, 3).unwrap();
    let y = blur(&clean, kernel, &BlurConfig::default()).unwrap();
    (clean, y)
}

#[test]
fn option_names_round_trip() {
    for t in [OptimizeTarget::FeatureW, OptimizeTarget::LatentZ, OptimizeTarget::LatentZAndGenerator] {
        assert_eq!(t.to_string().parse::<OptimizeTarget>().unwrap(), t);
    }
    for s in [InitStrategy::Encoder, InitStrategy::Random, InitStrategy::AverageInversion] {
        assert_eq!(s.to_string().parse::<InitStrategy>().unwrap(), s);
    }
    assert!(matches!("lbfgs".parse::<InitStrategy>(), Err(Error::Contract(_))));
    assert!(matches!("xk".parse::<OptimizeTarget>(), Err(Error::Contract(_))));
}

#[test]
fn decay_schedule_halves_three_times() {
    let c = SolveConfig {
        iterations: 10,
        ..SolveConfig::default()
    };
    let m: Vec<f64> = (0..10).map(|t| c.decay_multiplier(t)).collect();
    assert_eq!(m, [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125]);
}

#[test]
fn zero_iterations_return_the_initialization() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::uniform(K).unwrap());
    let r = deblur(&y, &g, Some(&e), 5, &cfg(0)).unwrap();
    assert_eq!(r.losses.len(), 1);
    assert_eq!(r.best_iteration, 0);
    let w0 = g.first_layer_value(&e.encode(&y).unwrap()).unwrap();
    assert_eq!(r.initial_state, KernelState::Feature(w0.clone()));
    assert_eq!(r.kernel, g.tail_value(&w0).unwrap());
    let dip_cfg = DipConfig {
        output_channels: 1,
        ..tiny_dip()
    };
    let net = DipNet::new(dip_cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(r.image, net.output(&r.dip_input).unwrap());
    assert!((r.losses[0] - data_fit(&r.kernel, &r.image, &y).unwrap()).abs() < 1e-9);
}

#[test]
fn delta_blur_fit_improves_and_stays_valid() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::delta(K).unwrap());
    let r = deblur(&y, &g, Some(&e), 1, &cfg(60)).unwrap();
    assert_eq!(r.losses.len(), 61);
    assert!(r.losses[r.best_iteration] < r.losses[0]);
    assert!(r.losses[60] < r.losses[0]);
    assert!((r.kernel.tensor().sum() - 1.0).abs() < 1e-9);
    assert!(r.image.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(r.image.shape(), &[32 + K - 1, 32 + K - 1]);
}

#[test]
fn runs_are_deterministic() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::uniform(K).unwrap());
    let a = deblur(&y, &g, Some(&e), 3, &cfg(8)).unwrap();
    let b = deblur(&y, &g, Some(&e), 3, &cfg(8)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.image, b.image);
    assert_eq!(a.kernel, b.kernel);
}

#[test]
fn only_the_full_mode_changes_the_generator() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::uniform(K).unwrap());
    for target in [OptimizeTarget::FeatureW, OptimizeTarget::LatentZ] {
        let c = SolveConfig {
            optimize: target,
            ..cfg(5)
        };
        let r = deblur(&y, &g, Some(&e), 3, &c).unwrap();
        assert!(r.generator.is_none());
        assert!(r.losses.iter().all(|l| l.is_finite()));
    }
    let c = SolveConfig {
        optimize: OptimizeTarget::LatentZAndGenerator,
        ..cfg(5)
    };
    let r = deblur(&y, &g, Some(&e), 3, &c).unwrap();
    assert_ne!(r.generator.unwrap(), g);
    assert!(matches!(r.initial_state, KernelState::Latent(_)));
}

#[test]
fn best_iterate_never_worse_than_start() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::uniform(K).unwrap());
    let c = SolveConfig {
        lr_image: 0.5,
        lr_kernel: 0.5,
        ..cfg(10)
    };
    let r = deblur(&y, &g, Some(&e), 9, &c).unwrap();
    let best = r.losses[r.best_iteration];
    assert!(best <= r.losses[0]);
    assert!(r.losses.iter().all(|&l| l >= best));
    assert!((data_fit(&r.kernel, &r.image, &y).unwrap() - best).abs() < 1e-9 * best.max(1.0));
}

#[test]
fn contract_errors() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::uniform(K).unwrap());
    let wrong = SolveConfig {
        kernel_size: Some(9),
        ..cfg(1)
    };
    assert!(matches!(deblur(&y, &g, Some(&e), 0, &wrong), Err(Error::Contract(_))));
    assert!(matches!(deblur(&y, &g, None, 0, &cfg(1)), Err(Error::Contract(_))));
    let other = Encoder::new(EncoderConfig::with_latent_dim(5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(deblur(&y, &g, Some(&other), 0, &cfg(1)), Err(Error::Contract(_))));
}

#[test]
fn initial_states_are_reproducible() {
    let (g, e) = (gen(), encoder());
    let (_, y) = observation(&BlurKernel::uniform(K).unwrap());
    for s in [InitStrategy::Encoder, InitStrategy::Random] {
        let a = initialize_kernel_state(&y, Some(&e), &g, s, OptimizeTarget::FeatureW, 4).unwrap();
        let b = initialize_kernel_state(&y, Some(&e), &g, s, OptimizeTarget::FeatureW, 4).unwrap();
        assert_eq!(a, b);
    }
    let z = initialize_kernel_state(&y, None, &g, InitStrategy::Random, OptimizeTarget::LatentZ, 4).unwrap();
    assert_eq!(z.tensor(), &Tensor::randn(&[6], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
}

#[test]
fn average_inversion_is_closer_to_uniform_than_random() {
    let g = gen();
    let uniform = BlurKernel::uniform(K).unwrap();
    let y = Tensor::zeros(&[32, 32]);
    let mut wins = 0;
    for seed in 0..20 {
        let avg = initialize_kernel_state(&y, None, &g, InitStrategy::AverageInversion, OptimizeTarget::LatentZ, seed)
            .unwrap()
            .kernel(&g)
            .unwrap();
        let rnd = initialize_kernel_state(&y, None, &g, InitStrategy::Random, OptimizeTarget::LatentZ, seed + 1000)
            .unwrap()
            .kernel(&g)
            .unwrap();
        if avg.tensor().l1_distance(uniform.tensor()) <= rnd.tensor().l1_distance(uniform.tensor()) {
            wins += 1;
        }
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn trace_psnr_agrees_with_snapshots() {
    let (g, e) = (gen(), encoder());
    let (clean, y) = observation(&BlurKernel::uniform(K).unwrap());
    let c = SolveConfig {
        snapshot_every: 1,
        ..cfg(6)
    };
    let r = deblur_with_reference(&y, &g, Some(&e), 2, &c, Some(&clean)).unwrap();
    let from_snaps = solve_trace_psnr(&r.snapshots, &clean).unwrap();
    assert_eq!(r.psnr.as_ref().unwrap(), &from_snaps);
    assert_eq!(from_snaps.len(), 7);
    let exact = solve_trace_psnr(&r.snapshots, &r.snapshots[3].1).unwrap();
    assert_eq!(exact[3], crate::metrics::PSNR_CAP_DB);
    let flat = vec![(0, clean.clone()), (1, clean.clone())];
    let p = solve_trace_psnr(&flat, &Tensor::zeros(clean.shape())).unwrap();
    assert_eq!(p[0], p[1]);
    assert!(matches!(
        solve_trace_psnr(&flat, &Tensor::zeros(&[3, 3])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn color_observations_share_one_kernel() {
    let (g, e) = (gen(), encoder());
    let clean = Tensor::stack(&[
        scene(38, 38, 1).unwrap(),
        scene(38, 38, 2).unwrap(),
        scene(38, 38, 3).unwrap(),
    ])
    .unwrap();
    let y = blur(&clean, &BlurKernel::uniform(K).unwrap(), &BlurConfig::default()).unwrap();
    let r = deblur(&y, &g, Some(&e), 1, &cfg(4)).unwrap();
    assert_eq!(r.image.shape(), &[3, 38, 38]);
    let refit = blur(&r.image, &r.kernel, &BlurConfig::default()).unwrap();
    let direct: f64 = refit.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((direct - r.losses[r.best_iteration]).abs() < 1e-9 * direct.max(1.0));
}
