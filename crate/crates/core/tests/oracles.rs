use latent_atlas::importance::{rank_variables, reconstruction_gain, select_top};
use latent_atlas::manifold::{make_dataset, PIXELS};
use latent_atlas::mapping::{apply_map, fit_linear_map, latent_mse, FitOptions};
use latent_atlas::models::{latent_traversal, LatentModel, ModelKind, OutputHead, VaeModel};
use latent_atlas::numerics::{rng_normal, Activation, Layer, Net, RngState, Tensor};
use latent_atlas::support::{build_support_set, sector_census, PickRule, SectorSpec};
use latent_atlas::Result;

/// Fixed linear encoder/decoder pair.
struct LinearCodec {
    encoder: Net,
    decoder: Net,
}

fn linear_net(weight: Vec<f32>, d_out: usize, d_in: usize) -> Net {
    Net::from_layers(vec![Layer {
        weight: Tensor::matrix(d_out, d_in, weight).unwrap(),
        bias: Tensor::zeros(&[d_out]),
        activation: Activation::Identity,
    }])
    .unwrap()
}

impl LatentModel for LinearCodec {
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
    }
    fn latent_dim(&self) -> usize {
        self.decoder.d_in()
    }
    fn image_dim(&self) -> usize {
        self.decoder.d_out()
    }
    fn decoder_nets(&self) -> Vec<&Net> {
        vec![&self.decoder]
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Direct
    }
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder.predict(images)
    }
}

/// decode(z) = (z₁, 0.1·z₂) with its exact inverse as encoder.
fn two_variable_toy() -> (LinearCodec, Tensor) {
    let codec = LinearCodec {
        encoder: linear_net(vec![1.0, 0.0, 0.0, 10.0], 2, 2),
        decoder: linear_net(vec![1.0, 0.0, 0.0, 0.1], 2, 2),
    };
    let z: Tensor = rng_normal(&mut RngState::new(2024), &[10_000, 2]);
    let x = codec.decode(&z).unwrap();
    (codec, x)
}

#[test]
fn analytic_gains_of_linear_toy() {
    let (codec, x) = two_variable_toy();
    let r = rank_variables(&codec, &x).unwrap();
    assert!(
        (r.gains[0] - 0.5).abs() < 0.05 * 0.5,
        "gain 1 = {}",
        r.gains[0]
    );
    assert!(
        (r.gains[1] - 0.005).abs() < 0.05 * 0.005,
        "gain 2 = {}",
        r.gains[1]
    );
    assert_eq!(r.order, vec![0, 1]);
    assert_eq!(r.dataset_size, 10_000);
    assert_eq!(reconstruction_gain(&codec, &x, 1).unwrap(), r.gains[1]);
}

#[test]
fn linear_toy_gains_add_up() {
    let (codec, x) = two_variable_toy();
    let r = rank_variables(&codec, &x).unwrap();
    let z = codec.encode(&x).unwrap();
    let all_zero = codec.decode(&Tensor::zeros(z.shape())).unwrap();
    let base = latent_atlas::models::mean_row_mse(&x, &codec.decode(&z).unwrap());
    let joint = latent_atlas::models::mean_row_mse(&x, &all_zero) - base;
    assert!((r.gains.iter().sum::<f64>() - joint).abs() < 1e-9 * joint);
}

#[test]
fn gain_index_out_of_range() {
    let (codec, x) = two_variable_toy();
    assert!(reconstruction_gain(&codec, &x, 2).is_err());
}

#[test]
fn gains_invariant_under_shuffle() {
    let (codec, x) = two_variable_toy();
    let perm = RngState::new(5).permutation(x.rows());
    let shuffled = x.select_rows(&perm);
    let a = rank_variables(&codec, &x).unwrap();
    let b = rank_variables(&codec, &shuffled).unwrap();
    for (ga, gb) in a.gains.iter().zip(&b.gains) {
        assert!((ga - gb).abs() < 1e-12 * ga.abs().max(1.0));
    }
    assert_eq!(a.order, b.order);
}

fn vae_with_dead_variable(dead: usize) -> VaeModel {
    let mut rng = RngState::new(17);
    let enc = Net::mlp(
        &[PIXELS, 64, 16],
        Activation::Relu,
        Activation::Identity,
        &mut rng,
    )
    .unwrap();
    let mut dec = Net::mlp(
        &[8, 64, PIXELS],
        Activation::Relu,
        Activation::Sigmoid,
        &mut rng,
    )
    .unwrap();
    let w = &mut dec.layers[0].weight;
    for r in 0..w.rows() {
        w.row_mut(r)[dead] = 0.0;
    }
    VaeModel::new(enc, dec, 0.01, 17).unwrap()
}

#[test]
fn dead_variable_has_zero_gain_and_flat_traversal() {
    let m = vae_with_dead_variable(3);
    let ds = make_dataset(3, 300).unwrap();
    let g = reconstruction_gain(&m, &ds.flat_images(), 3).unwrap();
    assert!(g.abs() < 1e-6, "{g}");
    let z = vec![0.3f32; 8];
    let strip = latent_traversal(&m, &z, 3, -2.25, 2.25, 11).unwrap();
    assert_eq!(strip.rows(), 11);
    for i in 1..11 {
        let worst = strip
            .row(i)
            .iter()
            .zip(strip.row(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(worst < 1e-5);
    }
}

#[test]
fn all_dead_inputs_give_identity_order() {
    let mut m = vae_with_dead_variable(0);
    m.decoder.layers[0]
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let ds = make_dataset(4, 100).unwrap();
    let r = rank_variables(&m, &ds.flat_images()).unwrap();
    assert!(r.gains.iter().all(|g| g.abs() < 1e-6));
    assert_eq!(r.order, (0..8).collect::<Vec<_>>());
    let sel = select_top(&r, 8, 40).unwrap();
    assert_eq!(sel.indices, r.order);
}

#[test]
fn traversal_endpoints_and_single_step() {
    let m = vae_with_dead_variable(0);
    let z = vec![0.1f32, -0.4, 0.9, 0.0, 1.2, -1.0, 0.5, 0.2];
    let one = latent_traversal(&m, &z, 2, z[2] as f64, z[2] as f64, 1).unwrap();
    assert_eq!(
        one,
        m.decode(&Tensor::matrix(1, 8, z.clone()).unwrap()).unwrap()
    );
    let strip = latent_traversal(&m, &z, 4, -2.25, 2.25, 11).unwrap();
    let mut lo = z.clone();
    lo[4] = -2.25;
    let mut hi = z.clone();
    hi[4] = 2.25;
    assert_eq!(
        strip.row(0),
        m.decode(&Tensor::matrix(1, 8, lo).unwrap()).unwrap().data()
    );
    assert_eq!(
        strip.row(10),
        m.decode(&Tensor::matrix(1, 8, hi).unwrap()).unwrap().data()
    );
    assert!(latent_traversal(&m, &z, 8, -1.0, 1.0, 3).is_err());
    assert!(latent_traversal(&m, &z, 0, -1.0, 1.0, 0).is_err());
}

fn planted(d1: usize, d2: usize, m: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = RngState::new(seed);
    let a: Tensor = rng_normal(&mut rng, &[d2, d1]);
    let z1: Tensor = rng_normal(&mut rng, &[m, d1]);
    let noise: Tensor = rng_normal(&mut rng, &[m, d2]);
    let clean = latent_atlas::numerics::matmul_nt(&z1, &a).unwrap();
    let z2 = Tensor::from_fn(&[m, d2], |k| clean.data()[k] + 0.01 * noise.data()[k]);
    (a, z1, z2)
}

fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    (num / b.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt()
}

#[test]
fn planted_maps_are_recovered() {
    for (d1, d2) in [(16, 16), (16, 24)] {
        for m in [d1, 500] {
            let (a, z1, z2) = planted(d1, d2, m, 31 + m as u64);
            let fit = fit_linear_map(&z1, &z2, FitOptions::default()).unwrap();
            let err = rel_frobenius(&fit.a, &a);
            assert!(err < 0.05, "({d1},{d2}) m={m}: {err}");
        }
    }
}

#[test]
fn planted_map_applies_to_clean_targets() {
    let (a, z1, z2) = planted(16, 24, 500, 8);
    let fit = fit_linear_map(&z1, &z2, FitOptions::default()).unwrap();
    let clean = latent_atlas::numerics::matmul_nt(&z1, &a).unwrap();
    let out = apply_map(&fit, &z1).unwrap();
    let (per, _) = latent_mse(&fit, &z1, &z2).unwrap();
    assert!(per < 2e-4, "{per}");
    assert!(latent_atlas::models::mean_row_mse(&out, &clean) < 1e-4);
}

#[test]
fn exactly_determined_fit_is_within_noise() {
    let (_, z1, z2) = planted(16, 24, 16, 12);
    let fit = fit_linear_map(&z1, &z2, FitOptions::default()).unwrap();
    let (per, _) = latent_mse(&fit, &z1, &z2).unwrap();
    assert!(per <= 1e-4, "{per}");
}

#[test]
fn sectors_match_brute_force_membership() {
    let mut rng = RngState::new(99);
    let z: Tensor = rng_normal(&mut rng, &[10_000, 10]);
    let selected = vec![7, 2, 5, 0, 9];
    let th = 0.6;
    let spec = SectorSpec::new(selected.clone(), th).unwrap();
    assert_eq!(spec.num_sectors(), 32);
    let mut in_region = 0;
    for i in 0..z.rows() {
        let row = z.row(i);
        let members: Vec<usize> = (0..32)
            .filter(|&id| {
                selected.iter().enumerate().all(|(b, &s)| {
                    let want_pos = id >> b & 1 == 1;
                    (row[s] as f64).abs() >= th && (row[s] > 0.0) == want_pos
                })
            })
            .collect();
        let in_union = selected.iter().all(|&s| (row[s] as f64).abs() >= th);
        assert!(members.len() <= 1);
        assert_eq!(members.len() == 1, in_union);
        assert_eq!(spec.sector_of(row), members.first().copied());
        in_region += usize::from(in_union);
    }
    let c = sector_census(&z, &spec).unwrap();
    assert_eq!(c.counts.iter().sum::<usize>(), in_region);
    assert_eq!(c.none, 10_000 - in_region);
}

#[test]
fn support_set_is_deterministic_and_unique() {
    let z: Tensor = rng_normal(&mut RngState::new(3), &[2000, 8]);
    let spec = SectorSpec::new(vec![1, 4, 6], 0.5).unwrap();
    let a = build_support_set(&z, &spec, 12, PickRule::Extreme).unwrap();
    let b = build_support_set(&z, &spec, 12, PickRule::Extreme).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.entries.len(), 12);
    assert_eq!(a.num_topups(), 4);
    let mut idx = a.indices();
    idx.sort_unstable();
    idx.dedup();
    assert_eq!(idx.len(), 12);
    let r = build_support_set(&z, &spec, 12, PickRule::Random { seed: 1 }).unwrap();
    assert_eq!(
        r,
        build_support_set(&z, &spec, 12, PickRule::Random { seed: 1 }).unwrap()
    );
}
