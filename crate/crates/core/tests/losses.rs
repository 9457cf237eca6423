mod common;

use std::collections::BTreeMap;

use common::*;
use nst_core::backbone::FeatureMap;
use nst_core::losses::{self, content_loss_grad, style_layer_grad, tv_loss_grad, GramMaps, LossTargets};
use nst_core::{content_loss, gram, style_loss, total_loss, tv_loss, LossWeights, Tensor};
use proptest::prelude::*;

fn matrix_strategy(max_n: usize, max_m: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_n, 1..=max_m).prop_flat_map(|(n, m)| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, m), n))
}

fn pair_strategy(max_n: usize, max_m: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
        let mat = || prop::collection::vec(prop::collection::vec(-3.0f64..3.0, m), n);
        (mat(), mat())
    })
}

fn image_strategy() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..=3, 2usize..=8, 2usize..=8)
        .prop_flat_map(|(c, h, w)| prop::collection::vec(-1.0f64..1.0, c * h * w).prop_map(move |d| Tensor::from_vec(c, h, w, d)))
}

fn weights_for(layers_: &[nst_core::LayerId]) -> LossWeights {
    LossWeights { style_layers: layers_.to_vec(), ..LossWeights::default() }
}

proptest! {
    #[test]
    fn gram_is_symmetric_and_positive_semidefinite(f in matrix_strategy(6, 12)) {
        let g = gram(&feature_map(layer("conv1_1"), &f)).unwrap();
        let n = g.channels;
        for i in 0..n {
            for j in 0..n {
                prop_assert!((g.at(i, j) - g.at(j, i)).abs() <= 1e-12 * g.at(i, j).abs().max(1.0));
            }
        }
        let sym = nalgebra::DMatrix::from_row_slice(n, n, &g.data);
        let eig = nalgebra::SymmetricEigen::new(sym).eigenvalues;
        let tol = 1e-10 * g.frobenius_norm().max(1.0);
        prop_assert!(eig.iter().all(|&l| l >= -tol), "{eig:?}");
    }

    #[test]
    fn gram_matches_loop_oracle(f in matrix_strategy(5, 10)) {
        let g = gram(&feature_map(layer("conv1_1"), &f)).unwrap();
        let o: Vec<f64> = oracle_gram(&f).into_iter().flatten().collect();
        for (a, b) in g.data.iter().zip(&o) {
            prop_assert!(rel_err(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn content_loss_matches_oracle((fp, fx) in pair_strategy(4, 16)) {
        let l = layer("conv3_3");
        let got = content_loss(&feature_map(l, &fp), &feature_map(l, &fx)).unwrap();
        prop_assert!(rel_err(got, oracle_content(&fp, &fx)) < 1e-12);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn style_loss_matches_oracle((fa, fx) in pair_strategy(4, 16), w in 0.0f64..3.0) {
        let l = layer("conv2_2");
        let mut weights = weights_for(&[l]);
        weights.layer_weights = BTreeMap::from([(l, w)]);
        let ga: GramMaps<f64> = [(l, gram(&feature_map(l, &fa)).unwrap())].into();
        let gx: GramMaps<f64> = [(l, gram(&feature_map(l, &fx)).unwrap())].into();
        let got = style_loss(&ga, &gx, &weights).unwrap();
        prop_assert!(rel_err(got, oracle_style(&[(fa, fx, w)])) < 1e-12);
    }

    #[test]
    fn tv_matches_oracle_and_mirror_symmetry(img in image_strategy()) {
        let got = tv_loss(&img).unwrap();
        prop_assert!(rel_err(got, oracle_tv(&image_planes(&img))) < 1e-12);
        prop_assert!(got >= 0.0);
        // The forward-difference stencil is not mirror-symmetric pixel by
        // pixel; the mirrored image is compared against its own oracle.
        let (c, h, w) = img.shape();
        let mirrored = Tensor::from_fn(c, h, w, |ch, y, x| img.at(ch, y, w - 1 - x));
        prop_assert!(rel_err(tv_loss(&mirrored).unwrap(), oracle_tv(&image_planes(&mirrored))) < 1e-12);
    }

    #[test]
    fn losses_are_equivariant_under_channel_permutation((fa, fx) in pair_strategy(5, 9), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let n = fa.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed));
        let permute = |m: &Matrix| perm.iter().map(|&i| m[i].clone()).collect::<Matrix>();
        let l = layer("conv2_2");
        let w = weights_for(&[l]);
        let style = |a: &Matrix, x: &Matrix| {
            let ga: GramMaps<f64> = [(l, gram(&feature_map(l, a)).unwrap())].into();
            let gx: GramMaps<f64> = [(l, gram(&feature_map(l, x)).unwrap())].into();
            style_loss(&ga, &gx, &w).unwrap()
        };
        let content = |a: &Matrix, x: &Matrix| content_loss(&feature_map(l, a), &feature_map(l, x)).unwrap();
        prop_assert!(rel_err(style(&fa, &fx), style(&permute(&fa), &permute(&fx))) < 1e-10);
        prop_assert!(rel_err(content(&fa, &fx), content(&permute(&fa), &permute(&fx))) < 1e-12);
        // Gram entries permute as G'_ij = G_{π(i)π(j)}.
        let g = gram(&feature_map(l, &fa)).unwrap();
        let gp = gram(&feature_map(l, &permute(&fa))).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!(rel_err(gp.at(i, j), g.at(perm[i], perm[j])) < 1e-12);
            }
        }
        // TV treats channels independently, so reordering image planes is a no-op.
        let img = Tensor::from_fn(n, fa[0].len().max(2), 2, |c, y, x| fa[c].get(y).copied().unwrap_or(0.0) + x as f64);
        let pimg = Tensor::from_fn(n, img.height(), 2, |c, y, x| img.at(perm[c], y, x));
        prop_assert!(rel_err(tv_loss(&img).unwrap(), tv_loss(&pimg).unwrap()) < 1e-12);
    }

    #[test]
    fn style_loss_is_zero_iff_weighted_grams_match((fa, fx) in pair_strategy(3, 6)) {
        let (l1, l2) = (layer("conv1_2"), layer("conv2_2"));
        let mut w = weights_for(&[l1, l2]);
        w.layer_weights = BTreeMap::from([(l1, 1.0), (l2, 0.0)]);
        let g = |m: &Matrix, l| gram(&feature_map(l, m)).unwrap();
        // Layer 2 differs but carries zero weight.
        let ga: GramMaps<f64> = [(l1, g(&fa, l1)), (l2, g(&fa, l2))].into();
        let gx: GramMaps<f64> = [(l1, g(&fa, l1)), (l2, g(&fx, l2))].into();
        prop_assert_eq!(style_loss(&ga, &gx, &w).unwrap(), 0.0);
        let gx2: GramMaps<f64> = [(l1, g(&fx, l1)), (l2, g(&fx, l2))].into();
        let differs = ga[&l1].data.iter().zip(&gx2[&l1].data).any(|(a, b)| a != b);
        prop_assert_eq!(style_loss(&ga, &gx2, &w).unwrap() > 0.0, differs);
    }

    #[test]
    fn doubling_layer_weights_doubles_style_loss((fa, fx) in pair_strategy(3, 6)) {
        let l = layer("conv3_3");
        let maps = |m: &Matrix| -> GramMaps<f64> { [(l, gram(&feature_map(l, m)).unwrap())].into() };
        let mut w = weights_for(&[l]);
        w.layer_weights = BTreeMap::from([(l, 0.7)]);
        let base = style_loss(&maps(&fa), &maps(&fx), &w).unwrap();
        w.layer_weights = BTreeMap::from([(l, 1.4)]);
        prop_assert!(rel_err(style_loss(&maps(&fa), &maps(&fx), &w).unwrap(), 2.0 * base) < 1e-12);
    }

    #[test]
    fn breakdown_recomposes(c in 0.0f64..1e6, s in 0.0f64..1e6, t in 0.0f64..1e6, a in 0.0f64..3.0, b in 0.01f64..10.0, g in 0.0f64..200.0) {
        let w = LossWeights { alpha: a, beta: b, gamma: g, ..LossWeights::default() };
        prop_assert!(w.compose(c, s, t).recomposition_error(&w) < 1e-12);
    }
}

#[test]
fn worked_examples() {
    let l = layer("conv1_1");
    let f = feature_map(l, &vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    assert_eq!(gram(&f).unwrap().data, vec![5.0, 11.0, 11.0, 25.0]);
    let fp = feature_map(l, &vec![vec![0.0, 0.0]]);
    let fx = feature_map(l, &vec![vec![2.0, 0.0]]);
    assert_eq!(content_loss(&fp, &fx).unwrap(), 2.0);
    assert_eq!(content_loss(&fp, &fp).unwrap(), 0.0);

    // N = M = 1, G(x) = [4], G(a) = [2]: (1/4)(4 − 2)² = 1.
    let ga: GramMaps<f64> = [(l, nst_core::GramMatrix { layer: l, channels: 1, positions: 1, data: vec![2.0] })].into();
    let gx: GramMaps<f64> = [(l, nst_core::GramMatrix { layer: l, channels: 1, positions: 1, data: vec![4.0] })].into();
    assert_eq!(style_loss(&ga, &gx, &weights_for(&[l])).unwrap(), 1.0);
    assert_eq!(style_loss(&ga, &ga, &weights_for(&[l])).unwrap(), 0.0);

    assert_eq!(tv_loss(&Tensor::from_vec(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0])).unwrap(), 2.0);
    assert_eq!(tv_loss(&Tensor::<f64>::filled(3, 5, 7, 0.3)).unwrap(), 0.0);
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(tv_loss(&Tensor::<f64>::zeros(1, 1, 5)).is_err());
    let l = layer("conv1_1");
    let bad = feature_map(l, &vec![vec![f64::NAN, 1.0]]);
    assert!(gram(&bad).is_err());
    let a = feature_map(l, &vec![vec![1.0, 2.0]]);
    let b = feature_map(l, &vec![vec![1.0, 2.0, 3.0]]);
    assert!(content_loss(&a, &b).is_err());
    let w = weights_for(&[l, layer("conv2_1")]);
    let g: GramMaps<f64> = [(l, gram(&a).unwrap())].into();
    assert!(matches!(style_loss(&g, &g, &w), Err(nst_core::Error::MissingLayer(_))));
}

fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    sample(&mut rng(seed), len, count.min(len)).into_vec()
}

#[test]
fn content_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let l = layer("conv3_3");
    let (fp, fx) = (random_matrix(&mut r, 4, 256), random_matrix(&mut r, 4, 256));
    let (_, g) = content_loss_grad(&feature_map(l, &fp), &feature_map(l, &fx)).unwrap();
    let x: Vec<f64> = fx.iter().flatten().copied().collect();
    let coords: Vec<usize> = (0..x.len()).collect();
    // Quadratic loss: central differences are exact up to rounding.
    let fd = central_differences(&x, &coords, 1e-3, |v| {
        content_loss(&feature_map(l, &fp), &FeatureMap::from_matrix(l, 4, 256, v.to_vec())).unwrap()
    });
    let err = vector_rel_err(g.data(), &fd);
    assert!(err < 1e-8, "relative error {err:e}");
}

#[test]
fn style_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let l = layer("conv2_2");
    let (fa, fx) = (random_matrix(&mut r, 4, 256), random_matrix(&mut r, 4, 256));
    let ga = gram(&feature_map(l, &fa)).unwrap();
    let (_, g) = style_layer_grad(&feature_map(l, &fx), &ga, 1.5).unwrap();
    let x: Vec<f64> = fx.iter().flatten().copied().collect();
    let coords = sample_coords(x.len(), 300, 3);
    let fd = central_differences(&x, &coords, 1e-5, |v| style_layer_grad(&FeatureMap::from_matrix(l, 4, 256, v.to_vec()), &ga, 1.5).unwrap().0);
    for (&i, n) in coords.iter().zip(&fd) {
        assert!(rel_err(g.data()[i], *n) < 1e-6, "{} vs {n}", g.data()[i]);
    }
}

#[test]
fn tv_gradient_matches_finite_differences_away_from_kinks() {
    let mut r = rng(4);
    let img: Tensor<f64> = Tensor::from_fn(3, 16, 16, |_, _, _| rand::Rng::gen_range(&mut r, 0.0..1.0));
    let (_, g) = tv_loss_grad(&img).unwrap();
    let (c, h, w) = img.shape();
    // Skip coordinates touching a pixel whose difference vector is tiny.
    let radius = |ch: usize, y: usize, x: usize| {
        let here = img.at(ch, y, x);
        let dx = if x + 1 < w { img.at(ch, y, x + 1) - here } else { 0.0 };
        let dy = if y + 1 < h { img.at(ch, y + 1, x) - here } else { 0.0 };
        (dx * dx + dy * dy).sqrt()
    };
    let coords: Vec<usize> = (0..c * h * w)
        .filter(|&i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            [(y, x), (y, x.wrapping_sub(1)), (y.wrapping_sub(1), x)]
                .into_iter()
                .filter(|&(yy, xx)| yy < h && xx < w)
                .all(|(yy, xx)| radius(ch, yy, xx) > 1e-2)
        })
        .collect();
    assert!(coords.len() > 500);
    let fd = central_differences(img.data(), &coords, 1e-5, |v| tv_loss(&Tensor::from_vec(c, h, w, v.to_vec())).unwrap());
    let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
    let err = vector_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn total_gradient_through_backbone_matches_finite_differences() {
    let bb = backbone().cast::<f64>();
    let w = LossWeights { gamma: 0.5, ..LossWeights::default() };
    let mut r = rng(5);
    let mut rand_img = || Tensor::from_fn(3, 32, 32, |_, _, _| rand::Rng::gen_range(&mut r, 0.1..0.9));
    let (p, a, x) = (rand_img(), rand_img(), rand_img());
    let fp = bb.extract(&p, &[w.content_layer]).unwrap();
    let grams = losses::grams(&bb.extract(&a, &w.style_layers).unwrap(), &w.style_layers).unwrap();
    let targets = LossTargets { content: &fp[&w.content_layer], style: &grams };
    let (_, g) = losses::evaluate(&bb, &x, &targets, &w, true).unwrap();
    let g = g.unwrap();
    let coords = sample_coords(x.len(), 60, 6);
    // ReLU and max-pool kinks sit everywhere in a deep net; a step this small
    // keeps the probes on one linear piece while staying above f64 noise.
    let fd = central_differences(x.data(), &coords, 3e-8, |v| {
        losses::evaluate(&bb, &Tensor::from_vec(3, 32, 32, v.to_vec()), &targets, &w, false).unwrap().0.total
    });
    let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
    let err = vector_rel_err(&analytic, &fd);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn total_loss_identity_cases() {
    let bb = backbone().cast::<f64>();
    let w = LossWeights::default();
    let p = nst_core::fixtures::content_image(3, 32, 32).tensor().clone();
    let p = Tensor::from_fn(3, 32, 32, |c, y, x| p.at(c, y, x) as f64);
    let grams = losses::grams(&bb.extract(&p, &w.style_layers).unwrap(), &w.style_layers).unwrap();
    let b = total_loss(&p, &grams, &p, &bb, &w).unwrap();
    assert_eq!((b.content, b.style), (0.0, 0.0));
    assert!(rel_err(b.total, w.gamma * tv_loss(&p).unwrap()) < 1e-12);

    let flat = Tensor::<f64>::filled(3, 32, 32, 0.4);
    let w0 = LossWeights { gamma: 0.0, ..w.clone() };
    let b = total_loss(&p, &grams, &flat, &bb, &w0).unwrap();
    assert_eq!(b.tv, 0.0);
    assert!(b.recomposition_error(&w0) < 1e-12);
    // The balanced configuration: w_c = 1, w_s = 5.
    let balanced = LossWeights::default();
    assert_eq!((balanced.alpha, balanced.beta), (1.0, 5.0));
    assert_eq!(balanced.clone().with_style_weight(5.0), balanced);
}

#[test]
fn weights_reject_mismatched_layer_weights() {
    let mut w = LossWeights::default();
    w.layer_weights = BTreeMap::from([(layer("conv1_2"), 1.0)]);
    assert!(w.validate().is_err());
    assert!(LossWeights::default().resolved().validate().is_ok());
    let w = LossWeights { alpha: 0.0, beta: 0.0, ..LossWeights::default() };
    assert!(w.validate().is_err());
}
