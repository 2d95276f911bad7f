//! Mini-batch training with the Dice loss, prediction and binarization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use renalseg_core::{LabelVolume, Volume3};

use crate::error::{shape_err, NetError, Result};
use crate::graph::Graph;
use crate::loss::{dice_loss_with_weights, DiceLossKind, DiceWeights};
use crate::tensor::{Shape5, Tensor5};
use crate::unet::UNet3d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Momentum {
        momentum: f64,
    },
    /// Bias-corrected first and second moment estimates.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / fan_in)`.
    #[default]
    FanInUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub init: InitScheme,
    /// Seed for the per-epoch shuffling.
    pub seed: u64,
    pub loss: DiceLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            learning_rate: 3e-4,
            optimizer: Optimizer::ADAM,
            init: InitScheme::FanInUniform,
            seed: 0,
            loss: DiceLossKind::WeightedDice,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NetError::Config("batch size must be positive".into()));
        }
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::Momentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(NetError::Config(format!("momentum {momentum} outside [0, 1)")));
                }
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                    return Err(NetError::Config(
                        "Adam needs betas in [0, 1) and a positive epsilon".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    /// Batches without any foreground voxel, which carry no loss.
    pub skipped_batches: usize,
}

fn check_dims(net: &UNet3d, dims: [usize; 3], what: &str) -> Result<()> {
    if dims != net.spec().input_dims {
        return shape_err(
            "unet",
            format!("{what} dims {dims:?}, network expects {:?}", net.spec().input_dims),
        );
    }
    Ok(())
}

fn input_values(net: &UNet3d, vol: &Volume3) -> Result<Vec<f32>> {
    check_dims(net, vol.dims(), "input")?;
    let mut v = vol.data().to_vec();
    net.spec().input_norm.apply(&mut v);
    Ok(v)
}

/// Train in place on `(image, mask)` pairs; any nonzero label is foreground.
pub fn train(net: &mut UNet3d, dataset: &[(Volume3, LabelVolume)], cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(NetError::Config("empty training set".into()));
    }
    let mut inputs = Vec::with_capacity(dataset.len());
    let mut masks = Vec::with_capacity(dataset.len());
    for (img, lab) in dataset {
        inputs.push(input_values(net, img)?);
        check_dims(net, lab.dims(), "mask")?;
        masks.push(
            lab.labels()
                .iter()
                .map(|&l| if l != 0 { 1.0f32 } else { 0.0 })
                .collect::<Vec<_>>(),
        );
    }
    let n = inputs[0].len();
    let zeros = |net: &UNet3d| -> Vec<Vec<f32>> { net.params().iter().map(|p| vec![0.0; p.data().len()]).collect() };
    // first moment (or velocity) and second moment per parameter
    let mut velocity = zeros(net);
    let mut second = zeros(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = TrainTrace::default();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut x = Vec::with_capacity(b * n);
            // two-class one-hot truth: [background, kidney]
            let mut q = Vec::with_capacity(2 * b * n);
            for &i in batch {
                x.extend_from_slice(&inputs[i]);
                q.extend(masks[i].iter().map(|&m| 1.0 - m));
                q.extend_from_slice(&masks[i]);
            }
            if q.chunks(n).skip(1).step_by(2).all(|m| m.iter().all(|&v| v == 0.0)) {
                trace.skipped_batches += 1;
                continue;
            }
            let xs = net.spec().input_shape(b);
            let mut g = Graph::new();
            let xv = g.leaf(Tensor5::from_vec(xs, x)?);
            let (out, params) = net.forward(&mut g, xv)?;
            let p2 = g.two_class(out)?;
            let q = Tensor5::from_vec(Shape5::new(b, 2, xs.depth, xs.height, xs.width), q)?;
            let weights = match cfg.loss {
                DiceLossKind::WeightedDice => DiceWeights::from_truth(&q),
                DiceLossKind::UnweightedDice => DiceWeights::uniform(2),
            };
            let (loss, grad) = dice_loss_with_weights(g.value(p2), &q, &weights)?;
            g.backward(p2, grad)?;
            trace.steps += 1;
            for (k, pv) in params.iter().enumerate() {
                let grad = g.take_grad(*pv).unwrap_or_default();
                let vel = &mut velocity[k];
                let sq = &mut second[k];
                let values = net.params_mut()[k].data_mut();
                let lr = cfg.learning_rate as f32;
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for (w, &gr) in values.iter_mut().zip(&grad) {
                            *w -= lr * gr;
                        }
                    }
                    Optimizer::Momentum { momentum } => {
                        let mu = momentum as f32;
                        for ((w, v), &gr) in values.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                            *v = mu * *v + gr;
                            *w -= lr * *v;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, epsilon } => {
                        let t = trace.steps as i32;
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        let step = (cfg.learning_rate * c2.sqrt() / c1) as f32;
                        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, (epsilon * c2.sqrt()) as f32);
                        for (((w, m), v), &gr) in values.iter_mut().zip(vel.iter_mut()).zip(sq.iter_mut()).zip(&grad) {
                            *m = b1 * *m + (1.0 - b1) * gr;
                            *v = b2 * *v + (1.0 - b2) * gr * gr;
                            *w -= step * *m / (v.sqrt() + eps);
                        }
                    }
                }
            }
            total += loss;
            batches += 1;
        }
        trace
            .epoch_loss
            .push(if batches > 0 { total / batches as f64 } else { f64::NAN });
    }
    Ok(trace)
}

/// Soft foreground probability per voxel, on the grid of `vol`.
pub fn predict(net: &UNet3d, vol: &Volume3) -> Result<Volume3> {
    let x = Tensor5::from_vec(net.spec().input_shape(1), input_values(net, vol)?)?;
    let y = net.predict_tensor(&x)?;
    Volume3::new(vol.dims(), vol.spacing(), y.into_data())
        .map_err(|e| NetError::Config(format!("prediction is not a valid volume: {e}")))
}

/// Voxels with probability at or above `threshold` become foreground.
pub fn binarize(soft: &Volume3, threshold: f32) -> LabelVolume {
    LabelVolume::from_mask(soft.dims(), soft.spacing(), soft.data().iter().map(|&p| p >= threshold))
        .expect("dims come from a valid volume")
}
