use flowseg::flow::{
    assemble_batch, build_schedule, euler_integrate, flow_loss, interpolate, sample_train_t, target_velocity,
    ConstantField, FnField,
};
use flowseg::model::{ModelConfig, VelocityNet};
use flowseg::prompt::PromptId;
use flowseg::special::{beta_inverse_cdf, reg_inc_beta};
use flowseg::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn path_returns_to_image(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zm = random_tensor(&mut rng, &[2, 1, 3, 4]);
        let zi = random_tensor(&mut rng, &[2, 1, 3, 4]);
        let zt = interpolate(&zm, &zi, t).unwrap();
        let v = target_velocity(&zi, &zm).unwrap();
        let back = zt.add(&v.scale(1.0 - t)).unwrap();
        prop_assert!(back.max_abs_diff(&zi) <= 1e-12);
    }

    #[test]
    fn schedule_is_strictly_increasing(alpha in 0.5f64..=5.0, beta in 0.5f64..=5.0, n in 1usize..=256) {
        let s = build_schedule(n, alpha, beta).unwrap();
        let st = s.steps();
        prop_assert_eq!(st.len(), n + 1);
        prop_assert_eq!(st[0], 0.0);
        prop_assert_eq!(st[n], 1.0);
        prop_assert!(st.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn inverse_cdf_inverts_statrs_cdf(q in 0.001f64..0.999, alpha in 0.5f64..=5.0, beta in 0.5f64..=5.0) {
        let x = beta_inverse_cdf(q, alpha, beta).unwrap();
        let cdf = Beta::new(alpha, beta).unwrap().cdf(x);
        prop_assert!((cdf - q).abs() < 1e-9, "{cdf} vs {q}");
        let ours = reg_inc_beta(x, alpha, beta);
        prop_assert!((ours - cdf).abs() < 1e-12);
    }

    #[test]
    fn constant_field_integration_is_exact(seed in any::<u64>(), alpha in 0.5f64..=5.0, beta in 0.5f64..=5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zm = random_tensor(&mut rng, &[2, 1, 4, 4]);
        let zi = random_tensor(&mut rng, &[2, 1, 4, 4]);
        let field = ConstantField(target_velocity(&zi, &zm).unwrap());
        for n in [1, 2, 7, 50] {
            let s = build_schedule(n, alpha, beta).unwrap();
            let out = euler_integrate(&field, &zi, &s, &[PromptId::NULL; 2]).unwrap();
            prop_assert!(out.max_abs_diff(&zm) <= 1e-9);
        }
    }
}

#[test]
fn inverse_cdf_is_monotone_on_a_fine_grid() {
    let mut prev = 0.0;
    for i in 0..=1000 {
        let x = beta_inverse_cdf(i as f64 / 1000.0, 2.5, 1.0).unwrap();
        assert!(x >= prev);
        prev = x;
    }
}

#[test]
fn median_has_closed_form() {
    let x = beta_inverse_cdf(0.5, 2.5, 1.0).unwrap();
    assert!((x - 0.5f64.powf(1.0 / 2.5)).abs() < 1e-11);
}

#[test]
fn euler_is_first_order() {
    let zi = Tensor::new(&[1, 1, 1, 1], vec![1.0f64]).unwrap();
    let field = FnField(|z: &Tensor<f64>, _t: f64| z.clone());
    let exact = (-1.0f64).exp();
    for (alpha, beta) in [(1.0, 1.0), (2.5, 1.0)] {
        let err = |n| {
            let s = build_schedule(n, alpha, beta).unwrap();
            (euler_integrate(&field, &zi, &s, &[PromptId::NULL]).unwrap().item() - exact).abs()
        };
        let ratio = err(64) / err(128);
        assert!((1.6..=2.4).contains(&ratio), "alpha {alpha}: ratio {ratio}");
    }
}

#[test]
fn training_times_follow_the_beta_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws: Vec<f64> = (0..20_000).map(|_| sample_train_t(&mut rng, 2.5, 1.0).unwrap()).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 2.5 / 3.5).abs() < 0.01);
    // Kolmogorov-Smirnov distance against the closed-form CDF x^2.5
    let mut sorted = draws;
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = x.powf(2.5);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.63 / n.sqrt(), "KS {ks}");
}

#[test]
fn denoising_with_image_as_noise_matches_deterministic() {
    let cfg = ModelConfig {
        widths: vec![4, 8],
        time_embed_dim: 8,
        ..Default::default()
    };
    let mut net = VelocityNet::<f64>::new(cfg, 5).unwrap();
    net.perturb(2, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zi: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut rng, &[1, 1, 8, 8])).collect();
    let zm: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut rng, &[1, 1, 8, 8])).collect();
    let times = [0.3, 0.9];
    let prompts = [PromptId(1), PromptId::NULL];
    // deterministic: src = z_i; denoising: src = noise, here forced equal to z_i
    let det = assemble_batch(&zi, &zm, &zi, &times, &prompts).unwrap();
    let noise = zi.clone();
    let den = assemble_batch(&zi, &zm, &noise, &times, &prompts).unwrap();
    assert_eq!(flow_loss(&net, &det).unwrap(), flow_loss(&net, &den).unwrap());
    let other: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut rng, &[1, 1, 8, 8])).collect();
    let den2 = assemble_batch(&zi, &zm, &other, &times, &prompts).unwrap();
    assert_ne!(flow_loss(&net, &det).unwrap(), flow_loss(&net, &den2).unwrap());
}
