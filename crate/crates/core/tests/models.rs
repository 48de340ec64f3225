use warpgen::autodiff::{Graph, ParamStore};
use warpgen::models::{
    anchor_noise, canonical_forward, discriminate, init_discriminator, motion_forward, GeneratorBundle, InitMode,
    Latents, ModelConfig,
};
use warpgen::rng::KeyedRng;
use warpgen::tensor::Tensor;
use warpgen::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        latent_dim: 8,
        style_dim: 8,
        widths: vec![16, 8, 8],
        deform_widths: vec![8, 8, 4],
        disc_widths: vec![8, 8, 4],
        disc_feature_dim: 8,
        motion_dim: 12,
        motion_freqs: 2,
        seed: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn canonical_generation_is_deterministic() {
    let b = GeneratorBundle::init_canonical(tiny()).unwrap();
    let z = KeyedRng::new(1).normals("z", 0, 8);
    let (a, fa) = b.canonical(&z).unwrap();
    let (c, fc) = b.canonical(&z).unwrap();
    assert_eq!(a, c);
    assert_eq!(fa, fc);
}

#[test]
fn default_shapes() {
    let cfg = ModelConfig::default();
    let b = GeneratorBundle::init(cfg.clone()).unwrap();
    let lat = Latents::from_seed(&cfg, 4);
    let s = b.sample(&lat, 2).unwrap();
    assert_eq!(s.canonical.tensor().shape(), [1, 3, 32, 32]);
    assert_eq!(s.features.shape(), [1, 32, 32, 32]);
    assert_eq!(s.fields[0].offsets().shape(), [1, 2, 32, 32]);
    let v = s.canonical.tensor().data();
    assert!(v.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));
}

#[test]
fn non_finite_latent_is_rejected() {
    let b = GeneratorBundle::init_canonical(tiny()).unwrap();
    let mut z = vec![0.0; 8];
    z[3] = f64::NAN;
    assert!(matches!(b.canonical(&z), Err(Error::NonFinite(_))));
    assert!(matches!(b.canonical(&[0.0; 7]), Err(Error::Shape(_))));
}

#[test]
fn untrained_bundle_samples_copies_of_the_canonical() {
    for cfg in [tiny(), ModelConfig::desk()] {
        let b = GeneratorBundle::init(cfg.clone()).unwrap();
        for seed in 0..3 {
            let s = b.sample(&Latents::from_seed(&cfg, seed), 16).unwrap();
            assert!(s.fields.iter().all(|f| f.offsets().data().iter().all(|&v| v == 0.0)));
            for t in 0..16 {
                assert!(s.clip.frame(t).max_abs_diff(s.canonical.tensor()) <= 1e-6);
            }
        }
    }
}

#[test]
fn no_multiplier_init_gives_nonzero_fields() {
    let cfg = ModelConfig {
        init_mode: InitMode::NoMultiplier,
        ..tiny()
    };
    let b = GeneratorBundle::init(cfg.clone()).unwrap();
    let s = b.sample(&Latents::from_seed(&cfg, 1), 4).unwrap();
    let mag: f64 = s.fields.iter().map(|f| f.offsets().sq_norm()).sum();
    assert!(mag > 0.0);
    assert!(s.clip.frame(0).max_abs_diff(s.canonical.tensor()) > 1e-6);
}

#[test]
fn xavier_init_gives_nonzero_fields() {
    let cfg = ModelConfig {
        init_mode: InitMode::Xavier,
        ..tiny()
    };
    let b = GeneratorBundle::init(cfg.clone()).unwrap();
    let s = b.sample(&Latents::from_seed(&cfg, 1), 3).unwrap();
    assert!(s.fields.iter().any(|f| f.offsets().sq_norm() > 0.0));
}

#[test]
fn motion_codes_depend_on_seed_and_are_deterministic() {
    let b = GeneratorBundle::init(tiny()).unwrap();
    let times = [1.0, 5.5, 16.0];
    let a = b.motion_codes(1, &times).unwrap();
    assert_eq!(a, b.motion_codes(1, &times).unwrap());
    let c = b.motion_codes(2, &times).unwrap();
    for (x, y) in a.iter().zip(&c) {
        assert_ne!(x, y);
    }
    assert!(b.motion_codes(1, &[0.5]).is_err());
}

#[test]
fn anchors_meet_at_multiples_of_the_spacing() {
    let cfg = tiny();
    let (k, a0, _) = anchor_noise(&cfg, 9, 8.0).unwrap();
    assert_eq!(k, 1);
    let (_, b0, _) = anchor_noise(&cfg, 9, 8.6).unwrap();
    let (kl, _, l1) = anchor_noise(&cfg, 9, 7.9).unwrap();
    assert_eq!(kl, 0);
    assert_eq!(a0, b0);
    assert_eq!(a0, l1);
    let bad = ModelConfig {
        anchor_spacing: 0.0,
        ..tiny()
    };
    assert!(anchor_noise(&bad, 9, 1.0).is_err());
}

/// Norm of `du/dt`, by reverse mode one output component at a time.
fn code_speed(b: &GeneratorBundle, seed: u64, t: f64) -> f64 {
    let cfg = &b.config;
    let mut sq = 0.0;
    for j in 0..cfg.motion_dim {
        let mut g = Graph::new();
        let tv = g.leaf(Tensor::from_vec([1, 1, 1, 1], vec![t]).unwrap());
        let u = motion_forward(&mut g, &b.params, cfg, &[seed], tv).unwrap();
        let mut sel = Tensor::zeros([1, cfg.motion_dim, 1, 1]);
        sel.set(0, j, 0, 0, 1.0);
        let s = g.input(sel);
        let p = g.mul(u, s).unwrap();
        let o = g.sum(p);
        let d = g.backward(o).unwrap().get(tv).unwrap().data()[0];
        sq += d * d;
    }
    sq.sqrt()
}

#[test]
fn motion_codes_are_continuous_in_time() {
    let b = GeneratorBundle::init(tiny()).unwrap();
    let eps = 1e-3;
    // includes a step across the anchor at t = 8
    for &t in &[1.0, 3.3, 7.9995, 8.0, 12.7] {
        let codes = b.motion_codes(5, &[t, t + eps]).unwrap();
        let diff = codes[0].iter().zip(&codes[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let lip = code_speed(&b, 5, t).max(code_speed(&b, 5, t + eps));
        assert!(lip.is_finite() && lip > 0.0);
        assert!(diff <= 1.1 * eps * lip, "t={t}: |du|={diff:e}, eps*L={:e}", eps * lip);
    }
}

#[test]
fn conditioning_layer_sweep_runs() {
    let base = ModelConfig::default();
    for layer in [4, 6, 7] {
        let cfg = ModelConfig {
            cond_layer: Some(layer),
            ..base.clone()
        };
        let b = GeneratorBundle::init(cfg.clone()).unwrap();
        let s = b.sample(&Latents::from_seed(&cfg, 2), 2).unwrap();
        let (c, r) = cfg.gc_layer_shape(layer);
        assert_eq!(s.features.shape(), [1, c, r, r]);
        assert_eq!(s.fields.len(), 2);
    }
}

#[test]
fn zeroed_features_keep_parameter_shapes() {
    let cfg = tiny();
    let a = GeneratorBundle::init(cfg.clone()).unwrap();
    let b = GeneratorBundle::init(ModelConfig {
        zero_features: true,
        ..cfg.clone()
    })
    .unwrap();
    let shapes = |p: &ParamStore| p.iter().map(|(n, t)| (n.clone(), t.shape())).collect::<Vec<_>>();
    assert_eq!(shapes(&a.params), shapes(&b.params));
    b.sample(&Latents::from_seed(&cfg, 1), 3).unwrap();
}

#[test]
fn canonical_only_bundle_cannot_deform() {
    let cfg = tiny();
    let b = GeneratorBundle::init_canonical(cfg.clone()).unwrap();
    assert!(matches!(
        b.sample(&Latents::from_seed(&cfg, 1), 2),
        Err(Error::MissingParam(_))
    ));
}

#[test]
fn discriminator_scores_batch_entries_independently() {
    let cfg = tiny();
    let p = init_discriminator(&cfg, 3, 7);
    let r = KeyedRng::new(2);
    let frames = Tensor::from_vec([3, 3, 16, 16], r.normals("f", 0, 3 * 3 * 256)).unwrap();
    let times = vec![1.0, 4.0, 9.0];
    let single = discriminate(&p, &cfg, &frames, std::slice::from_ref(&times)).unwrap();
    let pair = Tensor::stack(&[frames.clone(), frames]).unwrap();
    let both = discriminate(&p, &cfg, &pair, &[times.clone(), times]).unwrap();
    assert_eq!(both.len(), 2);
    assert_eq!(both[0], both[1]);
    assert_eq!(both[0], single[0]);
    assert!(single[0].is_finite());
}

#[test]
fn discriminator_rejects_non_increasing_times() {
    let cfg = tiny();
    let p = init_discriminator(&cfg, 3, 7);
    let frames = Tensor::zeros([3, 3, 16, 16]);
    assert!(discriminate(&p, &cfg, &frames, &[vec![1.0, 3.0, 3.0]]).is_err());
}

#[test]
fn single_frame_discriminator_for_pretraining() {
    let cfg = tiny();
    let p = init_discriminator(&cfg, 1, 7);
    let frames = Tensor::from_vec([2, 3, 16, 16], KeyedRng::new(1).normals("f", 0, 2 * 768)).unwrap();
    let out = discriminate(&p, &cfg, &frames, &[vec![1.0], vec![1.0]]).unwrap();
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn canonical_forward_batch_matches_single() {
    let cfg = tiny();
    let b = GeneratorBundle::init_canonical(cfg.clone()).unwrap();
    let zs: Vec<Vec<f64>> = (0..3).map(|i| KeyedRng::new(8).normals("z", i, 8)).collect();
    let mut g = Graph::new();
    let z = g.input(Tensor::from_vec([3, 8, 1, 1], zs.concat()).unwrap());
    let cv = canonical_forward(&mut g, &b.params, &cfg, z).unwrap();
    for (i, zi) in zs.iter().enumerate() {
        let (img, _) = b.canonical(zi).unwrap();
        let batched = g.value(cv.image).select(&[i]).clamp(-1.0, 1.0);
        assert!(img.tensor().max_abs_diff(&batched) < 1e-12);
    }
}

#[test]
fn bundle_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        cond_layer: Some(3),
        ..tiny()
    };
    let b = GeneratorBundle::init(cfg).unwrap();
    let path = dir.path().join("g.gdp");
    b.save(&path).unwrap();
    let l = GeneratorBundle::load(&path).unwrap();
    assert_eq!(l.config, b.config);
    assert_eq!(l.params, b.params);
}
