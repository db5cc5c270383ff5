mod common;

use proptest::prelude::*;
use unoise::eval::{dice, foreground};
use unoise::interpret::*;
use unoise::unet::{argmax_classes, build, ModelParams, UNetConfig};
use unoise::{Graph, RngStream, Tensor, Var};

/// A model whose weights are all zero, so its output is the head bias.
fn constant_model(cfg: UNetConfig, head_bias: &[f64]) -> ModelParams<f64> {
    let params = build::<f64>(cfg, 0)
        .unwrap()
        .iter()
        .map(|(n, t)| {
            let v = if n == "head.bias" {
                Tensor::new(t.shape().to_vec(), head_bias.to_vec()).unwrap()
            } else {
                Tensor::zeros(t.shape().to_vec())
            };
            (n.to_string(), v)
        })
        .collect();
    ModelParams::from_parts(cfg, unoise::Provenance::RandomInit, params).unwrap()
}

fn image(seed: u64, size: usize) -> Tensor<f64> {
    let mut s = RngStream::new(seed);
    Tensor::from_fn([1, size, size], |_| s.uniform())
}

#[test]
fn saturated_noise_means_nothing_is_important() {
    let noise = constant_model(UNetConfig::noise(1, 2, 1), &[10.0]);
    let (mask, map) = unoise_map(&noise, &image(0, 8)).unwrap();
    assert!(map.values().data().iter().all(|&v| v == 0.0));
    assert!(mask.mask.data().iter().all(|&b| b > 0.9999 && b < 1.0));
    assert_eq!(map.method(), Method::Unoise);
}

#[test]
fn a_single_negative_logit_is_the_peak() {
    let mut logits = Tensor::full([6, 7], 0.5);
    logits.data_mut()[17] = -4.0;
    let map = unoise_importance(&logits).unwrap();
    assert_eq!(map.values().data()[17], 1.0);
    assert!(map.values().data().iter().enumerate().all(|(i, &v)| i == 17 || v == 0.0));
}

#[test]
fn unoise_map_needs_a_single_logit_head() {
    let seg = build::<f64>(UNetConfig::segmentation(1, 2, 1, 2), 0).unwrap();
    assert!(unoise_map(&seg, &image(0, 8)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rescaling_keeps_the_argmax(values in prop::collection::vec(-5.0f64..5.0, 20)) {
        let logits = Tensor::new([4, 5], values.clone()).unwrap();
        let map = unoise_importance(&logits).unwrap();
        let raw: Vec<f64> = values.iter().map(|z| (-z).max(0.0)).collect();
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
        prop_assert_eq!(argmax(map.values().data()), argmax(&raw));
        prop_assert!(map.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn occlusion_of_an_input_blind_model_is_zero() {
    let utility = constant_model(UNetConfig::segmentation(1, 2, 1, 2), &[0.0, 1.0]);
    let map = occlusion_sensitivity(&utility, &image(1, 16), 5, 2, 0.0).unwrap();
    assert!(map.values().data().iter().all(|&v| v == 0.0));
}

#[test]
fn self_occlusion_is_zero() {
    let utility = build::<f64>(UNetConfig::segmentation(2, 4, 1, 2), 3).unwrap();
    let flat = Tensor::full([1, 16, 16], 0.3);
    let map = occlusion_sensitivity(&utility, &flat, 5, 3, 0.3).unwrap();
    assert!(map.values().data().iter().all(|&v| v == 0.0));
}

fn labels(utility: &ModelParams<f64>, x: &Tensor<f64>) -> Vec<u8> {
    let batch = x.clone().reshape([1, 1, x.shape()[1], x.shape()[2]]).unwrap();
    foreground(&argmax_classes(&utility.predict(&batch).unwrap()))
}

/// A utility model with both classes present in its prediction.
fn mixed_utility() -> (ModelParams<f64>, Tensor<f64>) {
    for seed in 0..50 {
        let u = build::<f64>(UNetConfig::segmentation(2, 4, 1, 2), seed).unwrap();
        let x = image(seed, 16);
        let l = labels(&u, &x);
        let ones = l.iter().filter(|&&v| v == 1).count();
        if ones > 20 && ones < 236 {
            return (u, x);
        }
    }
    panic!("no seed gives a mixed prediction");
}

#[test]
fn full_window_gives_one_constant() {
    let (utility, x) = mixed_utility();
    let map = occlusion_sensitivity(&utility, &x, 16, 5, 0.0).unwrap();
    let expected = 1.0 - dice(&labels(&utility, &Tensor::zeros([1, 16, 16])), &labels(&utility, &x)).unwrap();
    assert!(map.values().data().iter().all(|&v| v == expected));
}

#[test]
fn occlusion_matches_position_enumeration() {
    let (utility, x) = mixed_utility();
    assert_eq!(window_positions(16, 5, 2).len(), 6);
    let map = occlusion_sensitivity(&utility, &x, 5, 2, 0.25).unwrap();
    let expected = common::occlusion_enumeration(&utility, &x, 5, 2, 0.25);
    for (i, (got, want)) in map.values().data().iter().zip(&expected).enumerate() {
        assert!((got - want).abs() <= 1e-12, "pixel {i}: {got} vs {want}");
    }
}

#[test]
fn occlusion_rejects_bad_geometry() {
    let utility = build::<f64>(UNetConfig::segmentation(1, 2, 1, 2), 0).unwrap();
    assert!(occlusion_sensitivity(&utility, &image(0, 8), 3, 0, 0.0).is_err());
    assert!(occlusion_sensitivity(&utility, &image(0, 8), 9, 1, 0.0).is_err());
}

#[test]
fn grad_cam_flags_an_empty_target() {
    let utility = constant_model(UNetConfig::segmentation(1, 2, 1, 2), &[1.0, 0.0]);
    let map = grad_cam(&utility, &image(0, 8), 1).unwrap();
    assert!(map.values().data().iter().all(|&v| v == 0.0));
    assert_eq!(map.flags(), [FLAG_EMPTY_TARGET]);
}

/// Bottleneck `A = c·x` on a 2×2 grid (one channel), class-1 logit
/// `α·up(A) + β` on 4×4, class-0 logit 0.
struct LinearCam {
    c: f64,
    alpha: f64,
    beta: f64,
}

impl LinearCam {
    fn bottleneck(&self, x: &Tensor<f64>) -> Vec<f64> {
        // 2×2 average pooling of the 4×4 input, times c.
        let d = x.data();
        let mut a = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let s = d[8 * i + 2 * j] + d[8 * i + 2 * j + 1] + d[8 * i + 2 * j + 4] + d[8 * i + 2 * j + 5];
                a[2 * i + j] = self.c * s / 4.0;
            }
        }
        a
    }
}

/// Wrapper that computes the bottleneck outside the graph and records it
/// as a tracking leaf, which is what the trait requires.
struct Wrapped(LinearCam, Tensor<f64>);

impl BottleneckModel<f64> for Wrapped {
    fn logits_and_bottleneck(&self, g: &mut Graph<f64>, _x: Var) -> unoise::Result<(Var, Var)> {
        let a = g.leaf(Tensor::new([1, 1, 2, 2], self.0.bottleneck(&self.1))?, true);
        let up = g.upsample_bilinear2x(a)?;
        let z = g.scale(up, self.0.alpha);
        let z = g.add_scalar(z, self.0.beta);
        let zero = g.constant(Tensor::zeros([1, 1, 4, 4]));
        Ok((g.concat_channels(&[zero, z])?, a))
    }
}

#[test]
fn grad_cam_of_a_linear_network_matches_hand_derivation() {
    let x = Tensor::new([1, 4, 4], (0..16).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap();
    let cam = LinearCam {
        c: 1.5,
        alpha: 2.0,
        beta: -1.0,
    };
    let a = cam.bottleneck(&x);
    // Upsampling 2 → 4 (half-pixel centres, clamped) uses row/column
    // weights u0 = [1, .75, .25, 0], u1 = [0, .25, .75, 1].
    let u = [[1.0, 0.75, 0.25, 0.0], [0.0, 0.25, 0.75, 1.0]];
    let up = |i: usize, j: usize| -> f64 {
        (0..2).flat_map(|p| (0..2).map(move |q| (p, q))).map(|(p, q)| u[p][i] * u[q][j] * a[2 * p + q]).sum()
    };
    let region: Vec<bool> = (0..16).map(|k| cam.alpha * up(k / 4, k % 4) + cam.beta > 0.0).collect();
    assert!(region.iter().any(|&r| r) && !region.iter().all(|&r| r));
    // s = Σ_{region} (α·up(A) + β) so ∂s/∂A_pq = α Σ_{region} u_p(i) u_q(j);
    // the single channel weight is the mean of that over the 2×2 grid.
    let mut w = 0.0;
    for p in 0..2 {
        for q in 0..2 {
            w += cam.alpha * (0..16).filter(|&k| region[k]).map(|k| u[p][k / 4] * u[q][k % 4]).sum::<f64>();
        }
    }
    w /= 4.0;
    let coarse: Vec<f64> = a.iter().map(|v| (w * v).max(0.0)).collect();
    let mut expected: Vec<f64> = (0..16)
        .map(|k| {
            let (i, j) = (k / 4, k % 4);
            (0..2).flat_map(|p| (0..2).map(move |q| (p, q))).map(|(p, q)| u[p][i] * u[q][j] * coarse[2 * p + q]).sum()
        })
        .collect();
    let max = expected.iter().copied().fold(0.0, f64::max);
    expected.iter_mut().for_each(|v| *v /= max);

    let map = grad_cam(&Wrapped(cam, x.clone()), &x, 1).unwrap();
    for (got, want) in map.values().data().iter().zip(&expected) {
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }
    assert!(map.flags().is_empty());
}

#[test]
fn all_methods_give_finite_unit_range_maps() {
    let (utility, x) = mixed_utility();
    let noise = build::<f64>(UNetConfig::noise(2, 4, 1), 9).unwrap();
    let maps = [
        unoise_map(&noise, &x).unwrap().1,
        occlusion_sensitivity(&utility, &x, 5, 2, 0.0).unwrap(),
        grad_cam(&utility, &x, 1).unwrap(),
    ];
    for m in &maps {
        assert_eq!(m.values().shape(), [16, 16]);
        assert!(m.values().data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)), "{:?}", m.method());
    }
}

#[test]
fn pgm_export_is_plain_and_reproducible() {
    let map = ImportanceMap::new(Tensor::new([2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap(), Method::Occlusion).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sidecar = export_map(&map, dir.path().join("m.pgm")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("m.pgm")).unwrap();
    assert_eq!(text, "P2\n3 2\n255\n0 128 255\n64 191 255\n");
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(sidecar).unwrap()).unwrap();
    assert_eq!(meta["method"], "occlusion");
    assert_eq!(meta["scaling"]["max"], 1.0);
    let again = pgm_bytes(&map).0;
    assert_eq!(again, text.as_bytes());
    assert!(ImportanceMap::new(Tensor::new([1, 2], vec![0.0, f64::NAN]).unwrap(), Method::Unoise).is_err());
}
