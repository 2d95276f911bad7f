//! Central-difference checks of every adjoint on the tape, in f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use renalseg_dicenet::{build_unet, weighted_dice_loss, Graph, InputNorm, Shape5, Tensor5, UNet3dSpec, Var};

const EPS: f64 = 1e-3;
const NET_EPS: f64 = 1e-6;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 6;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn uniform(rng: &mut ChaCha8Rng, shape: Shape5, lo: f64, hi: f64) -> Tensor5<f64> {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor5::from_vec(shape, data).unwrap()
}

/// Values at least 0.05 away from zero, so ReLU kinks stay out of reach.
fn off_zero(rng: &mut ChaCha8Rng, shape: Shape5) -> Tensor5<f64> {
    let data = (0..shape.len())
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor5::from_vec(shape, data).unwrap()
}

/// Distinct values spaced 0.01 apart, so no perturbation changes an argmax.
fn spaced(rng: &mut ChaCha8Rng, shape: Shape5) -> Tensor5<f64> {
    let mut data: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.01 - 0.5).collect();
    data.shuffle(rng);
    Tensor5::from_vec(shape, data).unwrap()
}

fn forward(build: &Build, inputs: &[Tensor5<f64>]) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    (g, leaves, out)
}

fn probe(build: &Build, inputs: &[Tensor5<f64>], r: &[f64]) -> f64 {
    let (g, _, out) = forward(build, inputs);
    g.value(out).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Worst relative error between the tape gradient of `Σ r·f(inputs)` and
/// central differences, over every input element.
fn worst_error(build: &Build, inputs: Vec<Tensor5<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    let (mut g, leaves, out) = forward(build, &inputs);
    let r: Vec<f64> = (0..g.value(out).data().len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    g.backward(out, r.clone()).unwrap();
    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].data().len()]);
        for i in 0..inputs[k].data().len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (probe(build, &plus, &r) - probe(build, &minus, &r)) / (2.0 * EPS);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(err);
        }
    }
    worst
}

fn check(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor5<f64>>, build: &Build) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let err = worst_error(build, inputs, &mut rng);
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

const X: Shape5 = Shape5::new(2, 2, 4, 4, 4);

#[test]
fn conv3d() {
    check(
        "conv3d",
        |rng| {
            vec![
                uniform(rng, X, -1.0, 1.0),
                uniform(rng, Shape5::new(2, 2, 3, 3, 3), -0.5, 0.5),
                uniform(rng, Shape5::new(1, 2, 1, 1, 1), -0.5, 0.5),
            ]
        },
        &|g, v| g.conv3d(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn pointwise() {
    check(
        "pointwise",
        |rng| {
            vec![
                uniform(rng, X, -1.0, 1.0),
                uniform(rng, Shape5::new(3, 2, 1, 1, 1), -1.0, 1.0),
                uniform(rng, Shape5::new(1, 3, 1, 1, 1), -1.0, 1.0),
            ]
        },
        &|g, v| g.pointwise(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn relu() {
    check("relu", |rng| vec![off_zero(rng, X)], &|g, v| g.relu(v[0]));
}

#[test]
fn sigmoid() {
    check("sigmoid", |rng| vec![uniform(rng, X, -4.0, 4.0)], &|g, v| {
        g.sigmoid(v[0])
    });
}

#[test]
fn maxpool() {
    check("maxpool 2x2x2", |rng| vec![spaced(rng, X)], &|g, v| {
        g.maxpool(v[0], [2, 2, 2]).unwrap()
    });
    check("maxpool 1x2x2", |rng| vec![spaced(rng, X)], &|g, v| {
        g.maxpool(v[0], [1, 2, 2]).unwrap()
    });
}

#[test]
fn upsample() {
    let small = Shape5::new(2, 2, 2, 2, 2);
    check("upsample 2x2x2", |rng| vec![uniform(rng, small, -1.0, 1.0)], &|g, v| {
        g.upsample(v[0], [2, 2, 2])
    });
    let flat = Shape5::new(2, 2, 4, 2, 2);
    check("upsample 1x2x2", |rng| vec![uniform(rng, flat, -1.0, 1.0)], &|g, v| {
        g.upsample(v[0], [1, 2, 2])
    });
}

#[test]
fn upconv3d() {
    check(
        "upconv3d",
        |rng| {
            vec![
                uniform(rng, Shape5::new(2, 2, 2, 2, 2), -1.0, 1.0),
                uniform(rng, Shape5::new(2, 2, 1, 1, 1), -1.0, 1.0),
                uniform(rng, Shape5::new(1, 2, 1, 1, 1), -1.0, 1.0),
            ]
        },
        &|g, v| g.upconv3d(v[0], [2, 2, 2], v[1], v[2]).unwrap(),
    );
}

#[test]
fn concat_skip() {
    check(
        "concat_skip",
        |rng| {
            vec![
                uniform(rng, Shape5::new(2, 1, 4, 4, 4), -1.0, 1.0),
                uniform(rng, X, -1.0, 1.0),
            ]
        },
        &|g, v| g.concat_skip(v[0], v[1]).unwrap(),
    );
}

#[test]
fn two_class() {
    check(
        "two_class",
        |rng| vec![uniform(rng, Shape5::new(2, 1, 4, 4, 4), 0.0, 1.0)],
        &|g, v| g.two_class(v[0]).unwrap(),
    );
}

fn one_hot(rng: &mut ChaCha8Rng, shape: Shape5) -> Tensor5<f64> {
    let n = shape.spatial();
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..shape.batch {
        let fg: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
        data.extend(fg.iter().map(|f| 1.0 - f));
        data.extend(fg);
    }
    Tensor5::from_vec(shape, data).unwrap()
}

#[test]
fn weighted_dice_loss_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = uniform(&mut rng, X, 0.05, 0.95);
        let q = one_hot(&mut rng, X);
        let (_, grad) = weighted_dice_loss(&p, &q).unwrap();
        let mut worst = 0.0f64;
        for i in 0..p.data().len() {
            let mut plus = p.clone();
            plus.data_mut()[i] += EPS;
            let mut minus = p.clone();
            minus.data_mut()[i] -= EPS;
            let numeric =
                (weighted_dice_loss(&plus, &q).unwrap().0 - weighted_dice_loss(&minus, &q).unwrap().0) / (2.0 * EPS);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(err);
        }
        assert!(worst < TOL, "loss seed {seed}: relative error {worst:e}");
    }
}

#[test]
fn whole_network_gradient() {
    let spec = UNet3dSpec {
        levels: 2,
        base_channels: 2,
        input_dims: [4, 4, 4],
        input_norm: InputNorm::None,
        ..UNet3dSpec::default()
    };
    for seed in 0..SEEDS {
        let net = build_unet::<f64>(&UNet3dSpec { seed, ..spec.clone() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, spec.input_shape(1), -1.0, 1.0);
        let q = one_hot(&mut rng, Shape5::new(1, 2, 4, 4, 4));
        let loss_of = |params: &[Tensor5<f64>]| {
            let net = renalseg_dicenet::UNet3d::from_params(&spec, params.to_vec()).unwrap();
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let (out, _) = net.forward(&mut g, xv).unwrap();
            let p2 = g.two_class(out).unwrap();
            weighted_dice_loss(g.value(p2), &q).unwrap().0
        };

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (out, leaves) = net.forward(&mut g, xv).unwrap();
        let p2 = g.two_class(out).unwrap();
        let (_, grad) = weighted_dice_loss(g.value(p2), &q).unwrap();
        g.backward(p2, grad).unwrap();

        // Hidden pre-activations are not controlled, so a step of EPS can
        // cross a ReLU kink; the composite uses a finer step and a norm.
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        let params = net.params().to_vec();
        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(*leaf).unwrap().to_vec();
            for i in 0..params[k].data().len() {
                let mut plus = params.clone();
                plus[k].data_mut()[i] += NET_EPS;
                let mut minus = params.clone();
                minus[k].data_mut()[i] -= NET_EPS;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * NET_EPS);
                diff += (analytic[i] - numeric).powi(2);
                scale += analytic[i].powi(2).max(numeric.powi(2));
            }
        }
        let rel = (diff / scale).sqrt();
        assert!(rel < TOL, "seed {seed}: relative error {rel:e}");
    }
}
