use ndarray::{Array1, Array2};
use rand::Rng;

use super::*;
use crate::rate::{user_rates, Utility};
use crate::rng::{complex_gaussian, substream, Purpose, SimRng};
use crate::scenario::CascadedChannels;
use crate::{CMatrix, CVector, C64};

fn tiny_config() -> GnnConfig {
    GnnConfig {
        depth: 2,
        embed_hidden: 12,
        width: 8,
        layer_hidden: 10,
        input_mode: InputMode::Pilots,
    }
}

fn dims() -> Dimensions {
    Dimensions {
        antennas: 3,
        elements: 5,
        subframes: 2,
    }
}

fn random_links(rng: &mut SimRng, d: &Dimensions, users: usize) -> CascadedChannels {
    let direct = (0..users)
        .map(|_| CVector::from_shape_fn(d.antennas, |_| complex_gaussian(rng)))
        .collect();
    let cascaded = (0..users)
        .map(|_| CMatrix::from_shape_fn((d.antennas, d.elements), |_| complex_gaussian(rng) * 0.5))
        .collect();
    CascadedChannels::new(direct, cascaded).unwrap()
}

fn random_features(rng: &mut SimRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn permute_rows(x: &Array2<f64>, users: usize, perm: &[usize]) -> Array2<f64> {
    let mut out = x.clone();
    for b in 0..x.nrows() / users {
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(b * users + i).assign(&x.row(b * users + p));
        }
    }
    out
}

#[test]
fn outputs_are_feasible() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(1, Purpose::Test, 0);
    for users in 1..=4 {
        let params = net.init_parameters(&mut rng);
        let x = random_features(&mut rng, 6 * users, net.feature_dim());
        for sol in net.forward(&params.values, &x, users, 7.5).unwrap() {
            assert!(sol.modulus_violation() < 1e-6);
            assert!((sol.total_power() - 7.5).abs() / 7.5 < 1e-12);
            assert_eq!(sol.beamformers.dim(), (3, users));
        }
    }
}

#[test]
fn reflection_normalization_example() {
    let raw = Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap();
    let v = normalize_reflection(raw.view());
    assert!((v[0][0] - C64::new(0.6, 0.8)).norm() < 1e-12);
}

#[test]
fn beamformer_normalization_layout() {
    // one sample, two users, M = 1: rows [Re, Im]
    let raw = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let w = normalize_beamformers(raw.view(), 2, 2.0);
    assert!((w[0][[0, 0]] - C64::new(1.0, 0.0)).norm() < 1e-12);
    assert!((w[0][[0, 1]] - C64::new(0.0, 1.0)).norm() < 1e-12);
}

#[test]
fn permuting_users_permutes_beamformers_only() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(2, Purpose::Test, 0);
    for &users in &[2usize, 3, 4] {
        let params = net.init_parameters(&mut rng);
        let x = random_features(&mut rng, 3 * users, net.feature_dim());
        let mut perm: Vec<usize> = (0..users).collect();
        perm.rotate_left(1);
        perm.swap(0, users - 1);
        let base = net.forward(&params.values, &x, users, 1.0).unwrap();
        let moved = net
            .forward(&params.values, &permute_rows(&x, users, &perm), users, 1.0)
            .unwrap();
        for (a, b) in base.iter().zip(&moved) {
            for (p, q) in a.reflection.iter().zip(b.reflection.iter()) {
                assert!((p - q).norm() < 1e-12);
            }
            for (i, &p) in perm.iter().enumerate() {
                for r in 0..3 {
                    assert!((b.beamformers[[r, i]] - a.beamformers[[r, p]]).norm() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn parameter_count_does_not_depend_on_users() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(3, Purpose::Test, 0);
    let params = net.init_parameters(&mut rng);
    for users in [1usize, 4] {
        let x = random_features(&mut rng, users, net.feature_dim());
        assert_eq!(net.forward(&params.values, &x, users, 1.0).unwrap().len(), 1);
    }
    let bad = random_features(&mut rng, 3, net.feature_dim() + 1);
    assert!(net.forward(&params.values, &bad, 3, 1.0).is_err());
    assert!(net
        .forward(&params.values, &random_features(&mut rng, 5, net.feature_dim()), 2, 1.0)
        .is_err());
}

#[test]
fn aggregations_are_permutation_invariant() {
    let mut rng = substream(4, Purpose::Test, 0);
    let x = random_features(&mut rng, 4, 6);
    let perm = [2usize, 0, 3, 1];
    let px = permute_rows(&x, 4, &perm);
    let mean = network_mean(&x);
    assert!((&mean - &network_mean(&px)).iter().all(|d| d.abs() < 1e-15));
    let (mx, _) = super::network::max_over_others(&x, 4);
    let (pmx, _) = super::network::max_over_others(&px, 4);
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(pmx.row(i), mx.row(p));
        // entry i pools every other row and excludes its own
        for c in 0..6 {
            let expected = (0..4)
                .filter(|&j| j != p)
                .map(|j| x[[j, c]])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(pmx[[i, c]], expected);
        }
    }
    let (single, _) = super::network::max_over_others(&x.slice(ndarray::s![0..1, ..]).to_owned(), 1);
    assert!(single.iter().all(|v| *v == 0.0));
}

fn network_mean(x: &Array2<f64>) -> Array1<f64> {
    super::network::mean_users(x, x.nrows()).row(0).to_owned()
}

fn gradient_check(kind: Utility, users: usize, seed: u64) {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(seed, Purpose::Test, 0);
    let params = net.init_parameters(&mut rng);
    let batch = 3;
    let x = random_features(&mut rng, batch * users, net.feature_dim());
    let links: Vec<_> = (0..batch).map(|_| random_links(&mut rng, &dims(), users)).collect();
    let (power, noise) = (2.0, 0.5);
    let lg = loss_and_gradient(&net, &params, &x, &links, kind, power, noise).unwrap();
    let real = loss(&net, &params, &x, &links, kind, power, noise).unwrap();
    assert!((lg.loss - real).abs() < 1e-10 * real.abs().max(1.0));
    let h = 1e-4;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 50 && attempts < 400 {
        attempts += 1;
        let i = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus.values[i] += h;
        let mut minus = params.clone();
        minus.values[i] -= h;
        let fd = (loss(&net, &plus, &x, &links, kind, power, noise).unwrap()
            - loss(&net, &minus, &x, &links, kind, power, noise).unwrap())
            / (2.0 * h);
        let analytic = lg.gradient[i];
        let scale = fd.abs().max(analytic.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (fd - analytic).abs() / scale;
        assert!(
            rel < 1e-4,
            "param {i} ({}): fd {fd} analytic {analytic}",
            block_name(&params, i)
        );
        checked += 1;
    }
    assert!(checked >= 50, "only {checked} informative parameters");
}

fn block_name(p: &GnnParameters, i: usize) -> String {
    p.layout
        .blocks()
        .iter()
        .find(|b| b.range().contains(&i))
        .map(|b| b.name.clone())
        .unwrap_or_default()
}

#[test]
fn sum_rate_gradient_matches_finite_differences() {
    for seed in 0..3 {
        gradient_check(Utility::Sum, 2, 10 + seed);
    }
    gradient_check(Utility::Sum, 1, 20);
}

#[test]
fn min_rate_gradient_matches_finite_differences() {
    gradient_check(Utility::Min, 3, 30);
}

#[test]
fn sum_and_min_coincide_for_one_user() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(5, Purpose::Test, 0);
    let params = net.init_parameters(&mut rng);
    let x = random_features(&mut rng, 4, net.feature_dim());
    let links: Vec<_> = (0..4).map(|_| random_links(&mut rng, &dims(), 1)).collect();
    let s = loss_and_gradient(&net, &params, &x, &links, Utility::Sum, 1.0, 1.0).unwrap();
    let m = loss_and_gradient(&net, &params, &x, &links, Utility::Min, 1.0, 1.0).unwrap();
    assert_eq!(s.loss, m.loss);
    assert_eq!(s.gradient, m.gradient);
}

#[test]
fn loss_is_negative_mean_utility() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(6, Purpose::Test, 0);
    let params = net.init_parameters(&mut rng);
    let x = random_features(&mut rng, 6, net.feature_dim());
    let links: Vec<_> = (0..3).map(|_| random_links(&mut rng, &dims(), 2)).collect();
    let sols = net.forward(&params.values, &x, 2, 3.0).unwrap();
    let expected: f64 = sols
        .iter()
        .zip(&links)
        .map(|(s, l)| user_rates(l, s, 0.7).iter().sum::<f64>())
        .sum::<f64>()
        / 3.0;
    let lg = loss_and_gradient(&net, &params, &x, &links, Utility::Sum, 3.0, 0.7).unwrap();
    assert!((lg.loss + expected).abs() < 1e-12);
}

#[test]
fn dead_output_layers_block_the_gradient() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(7, Purpose::Test, 0);
    let mut params = net.init_parameters(&mut rng);
    for name in ["reflection_head.0.weight", "beamformer_head.0.weight"] {
        let r = params.layout.find(name).unwrap().range();
        params.values[r].iter_mut().for_each(|x| *x = 0.0);
    }
    for name in ["reflection_head.0.bias", "beamformer_head.0.bias"] {
        let r = params.layout.find(name).unwrap().range();
        params.values[r].iter_mut().for_each(|x| *x = rng.random::<f64>() + 0.1);
    }
    let x = random_features(&mut rng, 4, net.feature_dim());
    let links: Vec<_> = (0..2).map(|_| random_links(&mut rng, &dims(), 2)).collect();
    let lg = loss_and_gradient(&net, &params, &x, &links, Utility::Sum, 1.0, 1.0).unwrap();
    for b in params.layout.blocks() {
        let norm: f64 = lg.gradient[b.range()].iter().map(|g| g.abs()).sum();
        if b.name.ends_with("head.0.weight") || b.name.ends_with("head.0.bias") {
            continue;
        }
        assert_eq!(norm, 0.0, "{}", b.name);
    }
}

#[test]
fn gradient_is_invariant_to_user_order() {
    let net = Gnn::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(8, Purpose::Test, 0);
    let params = net.init_parameters(&mut rng);
    let users = 3;
    let x = random_features(&mut rng, 2 * users, net.feature_dim());
    let links: Vec<_> = (0..2).map(|_| random_links(&mut rng, &dims(), users)).collect();
    let perm = [2usize, 0, 1];
    let plinks: Vec<_> = links.iter().map(|l| l.permuted(&perm)).collect();
    let a = loss_and_gradient(&net, &params, &x, &links, Utility::Sum, 1.0, 1.0).unwrap();
    let b = loss_and_gradient(
        &net,
        &params,
        &permute_rows(&x, users, &perm),
        &plinks,
        Utility::Sum,
        1.0,
        1.0,
    )
    .unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    let scale = a.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (p, q) in a.gradient.iter().zip(&b.gradient) {
        assert!((p - q).abs() <= 1e-9 * scale);
    }
}

#[test]
fn estimation_head_shapes_and_zero_loss() {
    let net = EstimationNet::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(9, Purpose::Test, 0);
    let mut params = net.init_parameters(&mut rng);
    let x = random_features(&mut rng, 6, net.config.input_mode.feature_dim(3, 2));
    let est = net.estimate(&params, &x, 2, 1.0).unwrap();
    assert_eq!(est.len(), 6);
    assert_eq!(est[0].dim(), (3, 6));
    let r = params.layout.find("estimation_head.0.weight").unwrap().range();
    params.values[r].iter_mut().for_each(|x| *x = 0.0);
    let targets: Vec<CMatrix> = (0..6)
        .map(|_| CMatrix::from_shape_fn((3, 6), |_| complex_gaussian(&mut rng)))
        .collect();
    let expected: f64 = targets
        .iter()
        .map(|f| f.iter().map(|z| z.norm_sqr()).sum::<f64>())
        .sum::<f64>()
        / 6.0;
    let out = net.loss_and_gradient(&params, &x, 2, &targets, 2.0).unwrap();
    assert!((out.loss - expected).abs() < 1e-10 * expected);
}

#[test]
fn estimation_gradient_matches_finite_differences() {
    let net = EstimationNet::new(tiny_config(), dims()).unwrap();
    let mut rng = substream(10, Purpose::Test, 0);
    let params = net.init_parameters(&mut rng);
    let users = 3;
    let x = random_features(&mut rng, 2 * users, net.config.input_mode.feature_dim(3, 2));
    let targets: Vec<CMatrix> = (0..6)
        .map(|_| CMatrix::from_shape_fn((3, 6), |_| complex_gaussian(&mut rng) * 0.1))
        .collect();
    let scale = 0.3;
    let lg = net.loss_and_gradient(&params, &x, users, &targets, scale).unwrap();
    let l = |p: &GnnParameters| net.loss_and_gradient(p, &x, users, &targets, scale).unwrap().loss / (scale * scale);
    let mut checked = 0;
    for _ in 0..300 {
        let i = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus.values[i] += 1e-4;
        let mut minus = params.clone();
        minus.values[i] -= 1e-4;
        let fd = (l(&plus) - l(&minus)) / 2e-4;
        let s = fd.abs().max(lg.gradient[i].abs());
        if s < 1e-7 {
            continue;
        }
        assert!((fd - lg.gradient[i]).abs() / s < 1e-4, "{fd} vs {}", lg.gradient[i]);
        checked += 1;
        if checked == 50 {
            break;
        }
    }
    assert_eq!(checked, 50);
}
