use cdiffdet::backbone::{
    self, ace_forward, backbone_forward, fpn_forward, gce_forward, roi_pool, BackboneConfig,
    Pyramid,
};
use cdiffdet::detector::{gradcheck_block, BLOCKS};
use cdiffdet::geometry::BoxXyxy;
use cdiffdet::head::{self, HeadConfig, MmfMode};
use cdiffdet::nn::ParamStore;
use cdiffdet::tensor::gradcheck::GradCheckOptions;
use cdiffdet::{Error, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn backbone_store(cfg: &BackboneConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    backbone::init(&mut s, cfg, &mut rng(seed)).unwrap();
    s
}

fn head_store(cfg: &HeadConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    head::init(&mut s, cfg, &mut rng(seed)).unwrap();
    s
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store
        .names_with_prefix(prefix)
        .map(str::to_string)
        .collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

/// Plain layer norm over the last axis with unit gain and zero bias.
fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            r.iter()
                .map(move |a| (a - m) / (v + 1e-5).sqrt())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `[n, din] · [din, dout]`
fn matmul(a: &[f64], b: &Tensor, n: usize) -> Vec<f64> {
    let (din, dout) = (b.shape()[0], b.shape()[1]);
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for k in 0..din {
            for j in 0..dout {
                out[i * dout + j] += a[i * din + k] * b.data()[k * dout + j];
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn stage_sizes_and_image_checks() {
    let cfg = BackboneConfig::default();
    let store = backbone_store(&cfg, 1);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let img = g.constant(Tensor::randn(&[1, 3, 64, 64], &mut rng(2)));
    let st = backbone_forward(&p, &cfg, img).unwrap();
    assert_eq!(st.c1.shape(), vec![1, 16, 32, 32]);
    let want = [
        [1, 16, 16, 16],
        [1, 32, 8, 8],
        [1, 64, 4, 4],
        [1, 128, 2, 2],
    ];
    for (c, w) in st.c.iter().zip(want) {
        assert_eq!(c.shape(), w.to_vec());
    }
    let odd = g.constant(Tensor::zeros(&[1, 3, 48, 48]));
    assert!(matches!(
        backbone_forward(&p, &cfg, odd),
        Err(Error::Config(_))
    ));
    let gray = g.constant(Tensor::zeros(&[1, 1, 64, 64]));
    assert!(backbone_forward(&p, &cfg, gray).is_err());
}

#[test]
fn zero_parameters_give_zero_maps() {
    let cfg = BackboneConfig::default();
    let mut store = backbone_store(&cfg, 1);
    zero_prefix(&mut store, "");
    let g = Graph::new();
    let p = store.bind(&g, false);
    let img = g.constant(Tensor::randn(&[2, 3, 64, 64], &mut rng(3)));
    let st = backbone_forward(&p, &cfg, img).unwrap();
    let c5 = ace_forward(&p, st.c[3]).unwrap();
    let pyr = fpn_forward(&p, &cfg, &st, c5).unwrap();
    assert_eq!(pyr.levels.len(), 4);
    for (i, l) in pyr.levels.iter().enumerate() {
        let side = 16 >> i;
        assert_eq!(l.shape(), vec![2, 64, side, side]);
        assert!(l.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(pyr.stride(i), (4 << i) as f64);
    }
    assert!(gce_forward(&p, &cfg, img)
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn channel_attention_matches_scalar_oracle() {
    let cfg = BackboneConfig::default();
    let mut store = backbone_store(&cfg, 4);
    let g = Graph::new();
    let c5 = Tensor::randn(&[1, 128, 2, 2], &mut rng(5));
    // Random biases so the whole expression is exercised.
    for name in ["ace.fc1.b", "ace.fc2.b"] {
        let t = store.get_mut(name).unwrap();
        let fresh = Tensor::randn(t.shape(), &mut rng(6));
        *t = fresh;
    }
    let p = store.bind(&g, false);
    let out = ace_forward(&p, g.constant(c5.clone())).unwrap().value();

    let mu: Vec<f64> = c5
        .data()
        .chunks(4)
        .map(|c| c.iter().sum::<f64>() / 4.0)
        .collect();
    let add = |x: Vec<f64>, b: &Tensor| {
        x.iter()
            .zip(b.data())
            .map(|(a, b)| a + b)
            .collect::<Vec<f64>>()
    };
    let h: Vec<f64> = add(
        matmul(&mu, store.get("ace.fc1.w").unwrap(), 1),
        store.get("ace.fc1.b").unwrap(),
    )
    .into_iter()
    .map(|v| v.max(0.0))
    .collect();
    let s: Vec<f64> = add(
        matmul(&h, store.get("ace.fc2.w").unwrap(), 1),
        store.get("ace.fc2.b").unwrap(),
    )
    .into_iter()
    .map(|v| 1.0 / (1.0 + (-v).exp()))
    .collect();
    let want: Vec<f64> = c5
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * s[i / 4])
        .collect();
    close(out.data(), &want, 1e-12);

    zero_prefix(&mut store, "ace.");
    let p = store.bind(&g, false);
    let half = ace_forward(&p, g.constant(c5.clone())).unwrap().value();
    let want: Vec<f64> = c5.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(half.data(), &want[..]);
}

#[test]
fn context_encoder_cases() {
    let cfg = BackboneConfig::default();
    let mut store = backbone_store(&cfg, 7);
    let g = Graph::new();
    let imgs = Tensor::randn(&[2, 3, 64, 64], &mut rng(8));

    // Each image's vector depends only on that image.
    let p = store.bind(&g, false);
    let both = gce_forward(&p, &cfg, g.constant(imgs.clone()))
        .unwrap()
        .value();
    assert_eq!(both.shape(), &[2, 64]);
    let second = Tensor::new(&[1, 3, 64, 64], imgs.data()[3 * 64 * 64..].to_vec()).unwrap();
    let one = gce_forward(&p, &cfg, g.constant(second)).unwrap().value();
    close(&both.data()[64..], one.data(), 1e-12);

    // Without the main branch the vector is linear in the image through
    // the residual path.
    zero_prefix(&mut store, "gce.conv3");
    zero_prefix(&mut store, "gce.residual.b");
    let p = store.bind(&g, false);
    let a = gce_forward(&p, &cfg, g.constant(imgs.clone()))
        .unwrap()
        .value();
    let doubled = gce_forward(&p, &cfg, g.constant(imgs.map(|v| 2.0 * v)))
        .unwrap()
        .value();
    close(
        doubled.data(),
        &a.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>(),
        1e-12,
    );
    assert!(a.data().iter().any(|&v| v != 0.0));

    let plain = BackboneConfig {
        gce_residual: false,
        ..cfg.clone()
    };
    let mut store = backbone_store(&plain, 7);
    assert!(store.get("gce.residual.w").is_err());
    zero_prefix(&mut store, "gce.conv3");
    let p = store.bind(&g, false);
    let zero = gce_forward(&p, &plain, g.constant(imgs)).unwrap().value();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

fn ramp_pyramid(g: &Graph) -> Pyramid<'_> {
    // Channel 0 holds x, channel 1 holds y, channel 2 is constant 3.
    let levels = (0..4)
        .map(|i| {
            let side = 16 >> i;
            g.constant(Tensor::from_fn(&[1, 3, side, side], |k| {
                let (c, y, x) = (k / (side * side), (k / side) % side, k % side);
                [x as f64, y as f64, 3.0][c]
            }))
        })
        .collect();
    Pyramid {
        levels,
        min_level: 2,
    }
}

#[test]
fn roi_pooling_on_constant_and_ramp_maps() {
    let cfg = BackboneConfig::default();
    let g = Graph::new();
    let pyr = ramp_pyramid(&g);
    // 32 px boxes land on P2 (stride 4): sample centers average to the box
    // center in feature coordinates.
    let boxes = vec![vec![
        BoxXyxy::new(8.0, 8.0, 40.0, 40.0),
        BoxXyxy::new(20.0, 4.0, 36.0, 60.0),
    ]];
    let out = roi_pool(&cfg, &pyr, &boxes).unwrap().value();
    assert_eq!(out.shape(), &[1, 2, 3]);
    let center = |a: f64, b: f64| (a + b) / 2.0 / 4.0 - 0.5;
    close(
        out.data(),
        &[
            center(8.0, 40.0),
            center(8.0, 40.0),
            3.0,
            center(20.0, 36.0),
            center(4.0, 60.0),
            3.0,
        ],
        1e-12,
    );

    let mut r = rng(9);
    let many: Vec<BoxXyxy> = (0..500)
        .map(|_| {
            let (x, y) = (r.random_range(0.0..48.0), r.random_range(0.0..48.0));
            BoxXyxy::new(
                x,
                y,
                x + r.random_range(1.0..16.0),
                y + r.random_range(1.0..16.0),
            )
        })
        .collect();
    let out = roi_pool(&cfg, &pyr, &[many]).unwrap().value();
    assert_eq!(out.shape(), &[1, 500, 3]);
    assert!(out.data().chunks(3).all(|c| (c[2] - 3.0).abs() < 1e-12));
    assert!(roi_pool(&cfg, &pyr, &[vec![], vec![]]).is_err());

    // Linear in the feature maps for a fixed box.
    let scaled = Pyramid {
        levels: pyr.levels.iter().map(|l| l.scale(-2.5).unwrap()).collect(),
        min_level: 2,
    };
    let a = roi_pool(&cfg, &pyr, &boxes).unwrap().value();
    let b = roi_pool(&cfg, &scaled, &boxes).unwrap().value();
    close(
        b.data(),
        &a.data().iter().map(|v| -2.5 * v).collect::<Vec<_>>(),
        1e-12,
    );
}

fn tiny_head() -> HeadConfig {
    HeadConfig {
        dim: 8,
        heads: 2,
        num_classes: 3,
        context_dim: 6,
        ..Default::default()
    }
}

#[test]
fn self_attention_single_proposal_and_equivariance() {
    let cfg = tiny_head();
    let store = head_store(&cfg, 10);
    let g = Graph::new();
    let p = store.bind(&g, false);

    // One proposal attends only to itself.
    let x = Tensor::randn(&[1, 1, 8], &mut rng(11));
    let out = head::self_attention(&p, &cfg, g.constant(x.clone()))
        .unwrap()
        .value();
    let v = matmul(x.data(), store.get("caf.self.wv").unwrap(), 1);
    let o = matmul(&v, store.get("caf.self.wo").unwrap(), 1);
    let sum: Vec<f64> = x.data().iter().zip(&o).map(|(a, b)| a + b).collect();
    close(out.data(), &layer_norm_rows(&sum, 8), 1e-12);

    let x = Tensor::randn(&[1, 5, 8], &mut rng(12));
    let perm = [3, 0, 4, 1, 2];
    let px = Tensor::from_fn(&[1, 5, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
    let a = head::self_attention(&p, &cfg, g.constant(x))
        .unwrap()
        .value();
    let b = head::self_attention(&p, &cfg, g.constant(px))
        .unwrap()
        .value();
    for (row, &src) in perm.iter().enumerate() {
        close(
            &b.data()[row * 8..row * 8 + 8],
            &a.data()[src * 8..src * 8 + 8],
            1e-12,
        );
    }
}

#[test]
fn two_dimensional_attention_by_hand() {
    let g = Graph::new();
    let q = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = g.constant(Tensor::new(&[1, 2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
    let out = head::multi_head(q, k, v, 1).unwrap().value();
    // Scores 1/√2 and 0.
    let w0 = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
    close(out.data(), &[2.0 * w0, 4.0 * (1.0 - w0)], 1e-15);
    let w = head::attention_weights(q, k, 1).unwrap().value();
    close(w.data(), &[w0, 1.0 - w0], 1e-15);
}

#[test]
fn context_attention_ignores_the_query() {
    let cfg = tiny_head();
    let store = head_store(&cfg, 13);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let mut r = rng(14);
    for _ in 0..100 {
        let ctx = Tensor::randn(&[1, 6], &mut r);
        let a = Tensor::randn(&[1, 4, 8], &mut r);
        let b = Tensor::randn(&[1, 4, 8], &mut r);
        let gv = g.constant(ctx.clone());
        let ya = head::cross_attended(&p, &cfg, g.constant(a), gv)
            .unwrap()
            .value();
        let yb = head::cross_attended(&p, &cfg, g.constant(b), gv)
            .unwrap()
            .value();
        assert_eq!(ya.data(), yb.data());
        let v = matmul(ctx.data(), store.get("caf.cross.wv").unwrap(), 1);
        let want = matmul(&v, store.get("caf.cross.wo").unwrap(), 1);
        for row in ya.data().chunks(8) {
            close(row, &want, 1e-12);
        }
    }
}

#[test]
fn closed_gate_keeps_local_features() {
    let cfg = tiny_head();
    let mut store = head_store(&cfg, 15);
    store.get_mut("caf.gate.1.b").unwrap().data_mut().fill(-1e3);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let f = Tensor::randn(&[1, 3, 8], &mut rng(16));
    let ctx = g.constant(Tensor::randn(&[1, 6], &mut rng(17)));
    assert_eq!(head::context_gate(&p, ctx).unwrap().value().data(), &[0.0]);
    let out = head::cross_attention_caf(&p, &cfg, g.constant(f.clone()), ctx)
        .unwrap()
        .value();
    let doubled: Vec<f64> = f.data().iter().map(|v| 2.0 * v).collect();
    close(out.data(), &layer_norm_rows(&doubled, 8), 1e-12);
}

#[test]
fn embeddings() {
    let s = head::sinusoidal(&[1.0], 4);
    close(
        s.data(),
        &[1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()],
        1e-15,
    );
    assert_eq!(
        head::sinusoidal(&[0.0], 6).data(),
        &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
    );

    let cfg = tiny_head();
    let store = head_store(&cfg, 18);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let ctx = g.constant(Tensor::randn(&[2, 6], &mut rng(19)));
    let e = head::build_embeddings(&p, &cfg, &[0, 999], 5, ctx).unwrap();
    assert_eq!(e.latent.shape(), vec![2, 5, 24]);
    let t = e.time.value();
    assert_ne!(&t.data()[..8], &t.data()[8..]);
    let lat = e.latent.value();
    // The position block of row 2 is the same in both images.
    assert_eq!(
        &lat.data()[2 * 24 + 8..2 * 24 + 16],
        &lat.data()[(5 + 2) * 24 + 8..(5 + 2) * 24 + 16]
    );
    assert!(head::build_embeddings(&p, &cfg, &[0], 5, ctx).is_err());
}

#[test]
fn fusion_with_zero_values_is_layer_norm() {
    let cfg = tiny_head();
    let mut store = head_store(&cfg, 20);
    store.get_mut("mmf.wv").unwrap().data_mut().fill(0.0);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let ctx = g.constant(Tensor::randn(&[1, 6], &mut rng(21)));
    let f = Tensor::randn(&[1, 4, 8], &mut rng(22));
    let e = head::build_embeddings(&p, &cfg, &[500], 4, ctx).unwrap();
    let out = head::mmf_fuse(&p, &cfg, g.constant(f.clone()), &e, ctx)
        .unwrap()
        .value();
    close(out.data(), &layer_norm_rows(f.data(), 8), 1e-12);

    let q = g.constant(Tensor::randn(&[1, 4, 8], &mut rng(23)));
    let k = g.constant(Tensor::randn(&[1, 4, 8], &mut rng(24)));
    let w = head::mmf_weights(q, k).unwrap().value();
    for row in w.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let additive = HeadConfig {
        mmf: MmfMode::Additive,
        ..cfg
    };
    let store = head_store(&additive, 20);
    assert!(store.get("mmf.wq").is_err());
    let p = store.bind(&g, false);
    let e = head::build_embeddings(&p, &additive, &[500], 4, ctx).unwrap();
    let out = head::mmf_fuse(&p, &additive, g.constant(f), &e, ctx).unwrap();
    assert_eq!(out.shape(), vec![1, 4, 8]);
}

#[test]
fn final_mlp_and_heads_with_zero_weights() {
    let cfg = tiny_head();
    let mut store = head_store(&cfg, 25);
    zero_prefix(&mut store, "final.");
    store
        .get_mut("final.1.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, -1.0, 2.0]);
    let g = Graph::new();
    let p = store.bind(&g, false);
    let x = g.constant(Tensor::randn(&[1, 3, 8], &mut rng(26)));
    let y = head::final_mlp(&p, &cfg, x, None).unwrap().value();
    for row in y.data().chunks(8) {
        assert_eq!(row, &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, -1.0, 2.0]);
    }

    zero_prefix(&mut store, "head.");
    let p = store.bind(&g, false);
    let out = head::prediction_heads(&p, x).unwrap();
    assert_eq!(out.logits.shape(), vec![1, 3, 3]);
    assert_eq!(out.box_deltas.shape(), vec![1, 3, 4]);
    assert_eq!(out.eps_pred.shape(), vec![1, 3, 4]);
    assert!(out.logits.value().data().iter().all(|&v| v == 0.0));

    // Classifier bias starts at the prior logit.
    let fresh = head_store(&cfg, 25);
    let prior = -(0.99f64 / 0.01).ln();
    assert!(fresh
        .get("head.cls.1.b")
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - prior).abs() < 1e-12));
}

#[test]
fn every_block_passes_gradient_check() {
    for &name in BLOCKS {
        let report = gradcheck_block(name, 0, &GradCheckOptions::default()).unwrap();
        assert!(report.passes(1e-4), "{name}: {}", report.max_rel_err);
        assert!(report.coords > 0);
    }
    let broken = GradCheckOptions {
        corrupt_scale: 1.5,
        ..Default::default()
    };
    assert!(!gradcheck_block("ace", 0, &broken).unwrap().passes(1e-4));
    assert!(gradcheck_block("nope", 0, &GradCheckOptions::default()).is_err());
}
