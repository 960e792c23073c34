use fedgan::autodiff::gradcheck::rel_error;
use fedgan::autodiff::{Array, Graph};
use fedgan::data::{make_texture_corpus, LabeledImageSet};
use fedgan::gan::check::{linear_critic_penalty, penalty_gradient_check};
use fedgan::gan::losses;
use fedgan::gan::{train, Gan, GanConfig, NoSink, Variant};
use fedgan::models::{Model, ModelKind, ModelSpec, Pass};
use fedgan::rng::{normal_array, rng_for};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_gan(variant: Variant, seed: u64) -> Gan {
    let mut g = ModelSpec::new(ModelKind::Generator);
    g.width = 8;
    let mut d = ModelSpec::new(ModelKind::DiscCnn);
    d.width = 8;
    Gan::new(variant, &g, &variant.critic_spec(&d), seed).unwrap()
}

fn corpus(n: usize) -> LabeledImageSet {
    make_texture_corpus(n, 16, 3).unwrap()
}

#[test]
fn penalty_weight_gradient_matches_nested_differences() {
    let worst = penalty_gradient_check(20, 3.0).unwrap();
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn linear_critic_penalty_closed_form() {
    assert_eq!(linear_critic_penalty(&[3.0, 4.0], 8, 3.0, 0).unwrap(), 48.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20 {
        let w: Vec<f64> = (0..rng.random_range(1..6))
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = 3.0 * (norm - 1.0).powi(2);
        let got = linear_critic_penalty(&w, 4, 3.0, case).unwrap();
        assert!(
            (got - expected).abs() <= 1e-12 * expected.max(1.0),
            "{got} vs {expected}"
        );
    }
}

#[test]
fn n_critic_ten_means_ten_critic_steps_per_generator_step() {
    let data = corpus(8);
    let mut gan = small_gan(Variant::WganGp, 1);
    let cfg = GanConfig {
        variant: Variant::WganGp,
        epochs: 1,
        batch_size: 16,
        n_critic: 10,
        ..Default::default()
    };
    let h = train(&mut gan, &data, &cfg, 0, &mut NoSink).unwrap();
    assert_eq!((h.d_steps(), h.g_steps()), (10, 1));
    assert!(h.records[0].penalty > 0.0);
}

#[test]
fn bce_objectives_alternate_one_to_one() {
    let data = corpus(8);
    for variant in [Variant::Cgan, Variant::Acgan] {
        let mut gan = small_gan(variant, 1);
        let cfg = GanConfig {
            variant,
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let h = train(&mut gan, &data, &cfg, 0, &mut NoSink).unwrap();
        assert_eq!((h.d_steps(), h.g_steps()), (2, 2));
    }
}

#[test]
fn training_is_bit_identical_under_a_fixed_seed() {
    let data = corpus(12);
    for variant in [Variant::Cgan, Variant::Acgan, Variant::WganGp] {
        let cfg = GanConfig {
            variant,
            epochs: 2,
            batch_size: 8,
            n_critic: 2,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut gan = small_gan(variant, 5);
            let h = train(&mut gan, &data, &cfg, 0, &mut NoSink).unwrap();
            (h.records, gan.flatten())
        };
        let (ha, pa) = run();
        let (hb, pb) = run();
        assert_eq!(ha, hb, "{variant:?}");
        assert_eq!(pa.checksum(), pb.checksum(), "{variant:?}");
        assert_eq!(pa.values(), pb.values());
    }
}

#[test]
fn split_training_replays_one_long_run() {
    let data = corpus(12);
    let cfg = GanConfig {
        epochs: 4,
        batch_size: 8,
        seed: 2,
        optimizer_reset_every: Some(2),
        ..Default::default()
    };
    let mut long = small_gan(Variant::Acgan, 3);
    train(&mut long, &data, &cfg, 0, &mut NoSink).unwrap();
    let mut split = small_gan(Variant::Acgan, 3);
    let half = GanConfig {
        epochs: 2,
        optimizer_reset_every: None,
        ..cfg.clone()
    };
    train(&mut split, &data, &half, 0, &mut NoSink).unwrap();
    train(&mut split, &data, &half, 2, &mut NoSink).unwrap();
    assert_eq!(long.flatten().values(), split.flatten().values());
}

/// Generator-loss gradient of a CGAN on two samples, checked on a spread of
/// generator coordinates by central differences through the whole stack.
#[test]
fn cgan_generator_gradient_matches_finite_differences() {
    let gan = small_gan(Variant::Cgan, 7);
    let mut rng = rng_for(11, &[1]);
    let z = normal_array(&mut rng, &[2, gan.generator.spec().latent_dim]);
    let labels = [0usize, 1];
    let loss = |generator: &Model, grads: bool| -> (f64, Vec<Array>) {
        let mut g = Graph::new();
        let gp = generator.bind(&mut g, grads);
        let dp = gan.critic.bind(&mut g, false);
        let zt = g.constant(z.clone());
        let fake = generator
            .generate(&mut g, &gp, &mut Pass::train(3), zt, Some(&labels))
            .unwrap();
        let h = gan
            .critic
            .heads(&mut g, &dp, &mut Pass::train(4), fake, &labels)
            .unwrap();
        let l = losses::cgan_generator_loss(&mut g, h.score.unwrap()).unwrap().total;
        let v = g.value(l).item();
        if !grads {
            return (v, Vec::new());
        }
        let gr = g.backward(l).unwrap();
        let per_param = gp
            .handles()
            .map(|(_, t)| gr.get(t).cloned().unwrap_or_else(|| Array::zeros(g.shape(t))))
            .collect();
        (v, per_param)
    };
    let (_, analytic) = loss(&gan.generator, true);
    let ids: Vec<_> = gan
        .generator
        .store()
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(ids.len(), analytic.len());
    let h = 1e-5;
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut pick = ChaCha8Rng::seed_from_u64(0);
    for (k, &pi) in ids.iter().enumerate() {
        let len = analytic[k].len();
        for _ in 0..len.min(8) {
            let e = pick.random_range(0..len);
            let mut m = gan.generator.clone();
            let id = m.store().find(&m.store().params()[pi].name).unwrap();
            let orig = m.store().get(id).data()[e];
            m.store_mut().get_mut(id).data_mut()[e] = orig + h;
            let up = loss(&m, false).0;
            m.store_mut().get_mut(id).data_mut()[e] = orig - h;
            let down = loss(&m, false).0;
            a.push(analytic[k].data()[e]);
            n.push((up - down) / (2.0 * h));
        }
    }
    let err = rel_error(&Array::new(vec![a.len()], a), &Array::new(vec![n.len()], n));
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn acgan_critic_loss_is_adversarial_plus_auxiliary() {
    let gan = small_gan(Variant::Acgan, 2);
    let data = corpus(4);
    let (real, labels) = data.batch(&(0..8).collect::<Vec<_>>());
    let mut rng = rng_for(1, &[0]);
    let z = normal_array(&mut rng, &[8, 64]);
    let fake = gan.generator.sample(&z, &labels).unwrap();
    let mut g = Graph::new();
    let dp = gan.critic.bind(&mut g, true);
    let rt = g.constant(real);
    let ft = g.constant(fake);
    let hr = gan.critic.heads(&mut g, &dp, &mut Pass::eval(), rt, &labels).unwrap();
    let hf = gan.critic.heads(&mut g, &dp, &mut Pass::eval(), ft, &labels).unwrap();
    let parts = losses::acgan_critic_loss(
        &mut g,
        hr.score.unwrap(),
        hr.class_logits.unwrap(),
        hf.score.unwrap(),
        hf.class_logits.unwrap(),
        &labels,
    )
    .unwrap();
    let adv = losses::cgan_critic_loss(&mut g, hr.score.unwrap(), hf.score.unwrap())
        .unwrap()
        .total;
    let ce_r = g.cross_entropy(hr.class_logits.unwrap(), &labels).unwrap();
    let ce_f = g.cross_entropy(hf.class_logits.unwrap(), &labels).unwrap();
    let aux = g.value(ce_r).item() + g.value(ce_f).item();
    let total = g.value(parts.total).item();
    assert_eq!(g.value(parts.adversarial).item(), g.value(adv).item());
    assert_eq!(g.value(parts.auxiliary.unwrap()).item(), aux);
    assert_eq!(total, g.value(adv).item() + aux);
}

#[test]
fn wgan_critic_term_without_penalty_is_score_gap() {
    let mut g = Graph::new();
    let r = g.constant(Array::new(vec![3], vec![0.5, 1.5, -2.0]));
    let f = g.constant(Array::new(vec![3], vec![0.25, 0.0, 1.0]));
    let zero_lambda = g.constant(Array::scalar(0.0));
    let parts = losses::wgan_critic_loss(&mut g, r, f, Some(zero_lambda), 0.0).unwrap();
    let (mr, mf) = (g.mean(r), g.mean(f));
    let expected = -(g.value(mr).item() - g.value(mf).item());
    assert_eq!(g.value(parts.total).item(), expected);
}

#[test]
fn trained_generator_depends_on_label() {
    let data = corpus(16);
    let mut gan = small_gan(Variant::Acgan, 4);
    let cfg = GanConfig {
        epochs: 3,
        batch_size: 8,
        ..Default::default()
    };
    train(&mut gan, &data, &cfg, 0, &mut NoSink).unwrap();
    let mut rng = rng_for(8, &[0]);
    let z = normal_array(&mut rng, &[4, 64]);
    let a = gan.generator.sample(&z, &[0; 4]).unwrap();
    let b = gan.generator.sample(&z, &[1; 4]).unwrap();
    let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(l1 > 0.0);
    assert!(a
        .data()
        .iter()
        .chain(b.data())
        .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

/// Parameter count from the layer shapes: noise projection to half-resolution
/// maps, one class-embedding image per class, three 3×3 convolutions (only
/// the last with a bias), and two batch-norms with four per-channel vectors
/// each (scale, shift, running mean, running variance).
#[test]
fn generator_parameter_count_from_layer_shapes() {
    for (latent, width, size, classes) in [(64, 32, 16, 2), (16, 8, 8, 3), (64, 16, 32, 2)] {
        let mut spec = ModelSpec::new(ModelKind::Generator);
        spec.latent_dim = latent;
        spec.width = width;
        spec.image_size = size;
        spec.num_classes = classes;
        let half = size / 2;
        let maps = width * half * half;
        let expected =
            latent * maps + maps + classes * size * size + 2 * (width * width * 9 + 4 * width) + (width * 9 + 1);
        let pv = Model::build(&spec, 0).unwrap().flatten();
        let from_layout: usize = pv.layout().iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(pv.len(), expected);
        assert_eq!(from_layout, expected);
    }
}
