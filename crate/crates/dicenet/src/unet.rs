//! Reduced-width 3D U-Net: two 3x3x3 convolutions per level, max pooling on
//! the way down, trilinear upsampling plus a 1x1x1 convolution on the way
//! up, skip concatenation and a sigmoid head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NetError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape5, Tensor5};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct UNet3dSpec {
    /// Resolution levels, including the bottleneck.
    pub levels: usize,
    /// Channels of the first level; level `l` has `base_channels << l`.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Input grid as (nx, ny, nz).
    pub input_dims: [usize; 3],
    /// Seed for the weight initialisation.
    pub seed: u64,
    pub input_norm: InputNorm,
}

/// Per-volume intensity normalisation applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNorm {
    None,
    /// Zero mean, unit variance per volume and channel.
    #[default]
    ZScore,
}

impl InputNorm {
    pub fn apply(self, values: &mut [f32]) {
        if self == InputNorm::None || values.is_empty() {
            return;
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        values.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * scale) as f32);
    }
}

impl Default for UNet3dSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            in_channels: 1,
            input_dims: [64, 64, 16],
            seed: 0,
            input_norm: InputNorm::ZScore,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// 3x3x3 convolution, zero padded.
    Conv3,
    /// 1x1x1 convolution.
    Pointwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name,
            kind,
            in_channels,
            out_channels,
        }
    }

    pub fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => 3,
            LayerKind::Pointwise => 1,
        }
    }

    pub fn weight_shape(&self) -> Shape5 {
        let k = self.kernel();
        Shape5::new(self.out_channels, self.in_channels, k, k, k)
    }

    pub fn bias_shape(&self) -> Shape5 {
        Shape5::new(1, self.out_channels, 1, 1, 1)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel().pow(3)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().len() + self.out_channels
    }
}

impl UNet3dSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(NetError::Config("levels and channel counts must be positive".into()));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(NetError::Config(format!("input dims {:?}", self.input_dims)));
        }
        let mut dims = self.input_dims;
        for f in self.pool_factors() {
            let [fz, fy, fx] = f;
            if dims[0] % fx != 0 || dims[1] % fy != 0 || dims[2] % fz != 0 {
                return Err(NetError::Config(format!(
                    "input dims {:?} not divisible by the pooling schedule {:?}",
                    self.input_dims,
                    self.pool_factors()
                )));
            }
            dims = [dims[0] / fx, dims[1] / fy, dims[2] / fz];
        }
        Ok(())
    }

    /// Pooling factors (z, y, x) between consecutive levels. Depth is pooled
    /// only while the result stays at 4 or more slices.
    pub fn pool_factors(&self) -> Vec<[usize; 3]> {
        let mut depth = self.input_dims[2];
        (1..self.levels)
            .map(|_| {
                let fz = if depth / 2 >= 4 { 2 } else { 1 };
                depth /= fz;
                [fz, 2, 2]
            })
            .collect()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// The same architecture at another first-level width.
    pub fn with_base(&self, base_channels: usize) -> Self {
        Self {
            base_channels,
            ..self.clone()
        }
    }

    /// Every parameterised layer in declaration order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        use LayerKind::*;
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.levels {
            let c = self.level_channels(l);
            out.push(LayerSpec::new(format!("enc{l}.conv1"), Conv3, cin, c));
            out.push(LayerSpec::new(format!("enc{l}.conv2"), Conv3, c, c));
            cin = c;
        }
        for l in (0..self.levels - 1).rev() {
            let c = self.level_channels(l);
            out.push(LayerSpec::new(
                format!("up{l}"),
                Pointwise,
                self.level_channels(l + 1),
                c,
            ));
            out.push(LayerSpec::new(format!("dec{l}.conv1"), Conv3, 2 * c, c));
            out.push(LayerSpec::new(format!("dec{l}.conv2"), Conv3, c, c));
        }
        out.push(LayerSpec::new("head".into(), Pointwise, self.level_channels(0), 1));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }

    /// Expected input shape for a batch of `batch`.
    pub fn input_shape(&self, batch: usize) -> Shape5 {
        let [nx, ny, nz] = self.input_dims;
        Shape5::new(batch, self.in_channels, nz, ny, nx)
    }
}

/// Network weights: for layer `i` of [`UNet3dSpec::layers`], `params[2i]`
/// is the weight and `params[2i + 1]` the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet3d<T: Real = f32> {
    spec: UNet3dSpec,
    layers: Vec<LayerSpec>,
    params: Vec<Tensor5<T>>,
}

/// Fan-in scaled uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
pub fn build_unet<T: Real>(spec: &UNet3dSpec) -> Result<UNet3d<T>> {
    spec.validate()?;
    let layers = spec.layers();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = Vec::with_capacity(2 * layers.len());
    for layer in &layers {
        let bound = (6.0 / layer.fan_in() as f64).sqrt();
        let ws = layer.weight_shape();
        let w: Vec<T> = (0..ws.len()).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        params.push(Tensor5::from_vec(ws, w)?);
        params.push(Tensor5::zeros(layer.bias_shape()));
    }
    Ok(UNet3d {
        spec: spec.clone(),
        layers,
        params,
    })
}

impl<T: Real> UNet3d<T> {
    pub fn from_params(spec: &UNet3dSpec, params: Vec<Tensor5<T>>) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        if params.len() != 2 * layers.len() {
            return shape_err(
                "unet",
                format!("{} parameter tensors for {} layers", params.len(), layers.len()),
            );
        }
        for (i, layer) in layers.iter().enumerate() {
            let (w, b) = (params[2 * i].shape(), params[2 * i + 1].shape());
            if w != layer.weight_shape() || b != layer.bias_shape() {
                return shape_err("unet", format!("layer {} has weight {w} and bias {b}", layer.name));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            params,
        })
    }

    pub fn spec(&self) -> &UNet3dSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor5<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor5<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> UNet3d<U> {
        UNet3d {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor5::cast).collect(),
        }
    }

    /// Record the network on `g`. Returns the sigmoid output and the
    /// parameter leaves in declaration order.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let xs = g.shape(x);
        let expect = self.spec.input_shape(xs.batch);
        if xs != expect {
            return shape_err("unet", format!("input {xs}, expected {expect}"));
        }
        let p: Vec<Var> = self.params.iter().map(|t| g.leaf(t.clone())).collect();
        let levels = self.spec.levels;
        let pools = self.spec.pool_factors();
        let mut layer = 0;
        let conv = |g: &mut Graph<T>, h: Var, layer: &mut usize| -> Result<Var> {
            let out = g.conv3d(h, p[2 * *layer], p[2 * *layer + 1])?;
            *layer += 1;
            Ok(g.relu(out))
        };

        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            if l > 0 {
                h = g.maxpool(h, pools[l - 1])?;
            }
            h = conv(g, h, &mut layer)?;
            h = conv(g, h, &mut layer)?;
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            let up = g.upconv3d(h, pools[l], p[2 * layer], p[2 * layer + 1])?;
            layer += 1;
            h = g.concat_skip(skips[l], up)?;
            h = conv(g, h, &mut layer)?;
            h = conv(g, h, &mut layer)?;
        }
        let logits = g.pointwise(h, p[2 * layer], p[2 * layer + 1])?;
        Ok((g.sigmoid(logits), p))
    }

    /// Soft foreground probabilities for a batch.
    pub fn predict_tensor(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (out, _) = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_schedule() {
        let spec = UNet3dSpec::default();
        assert_eq!(spec.pool_factors(), vec![[2, 2, 2], [2, 2, 2]]);
        let shallow = UNet3dSpec {
            input_dims: [16, 16, 8],
            ..spec.clone()
        };
        assert_eq!(shallow.pool_factors(), vec![[2, 2, 2], [1, 2, 2]]);
        let deep = UNet3dSpec { levels: 4, ..spec };
        assert_eq!(deep.pool_factors(), vec![[2, 2, 2], [2, 2, 2], [1, 2, 2]]);
        let bad = UNet3dSpec {
            input_dims: [30, 64, 16],
            ..UNet3dSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layer_table() {
        let names: Vec<String> = UNet3dSpec::default().layers().into_iter().map(|l| l.name).collect();
        assert_eq!(
            names,
            [
                "enc0.conv1",
                "enc0.conv2",
                "enc1.conv1",
                "enc1.conv2",
                "enc2.conv1",
                "enc2.conv2",
                "up1",
                "dec1.conv1",
                "dec1.conv2",
                "up0",
                "dec0.conv1",
                "dec0.conv2",
                "head"
            ]
        );
    }

    #[test]
    fn untrained_output_is_a_probability() {
        let spec = UNet3dSpec {
            base_channels: 2,
            input_dims: [8, 8, 8],
            ..UNet3dSpec::default()
        };
        let net: UNet3d<f32> = build_unet(&spec).unwrap();
        let x = Tensor5::from_vec(
            spec.input_shape(2),
            (0..1024).map(|i| ((i * 37) % 11) as f32 - 5.0).collect(),
        )
        .unwrap();
        let y = net.predict_tensor(&x).unwrap();
        assert_eq!(y.shape(), Shape5::new(2, 1, 8, 8, 8));
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let wrong = Tensor5::<f32>::zeros(Shape5::new(1, 1, 8, 8, 4));
        let err = net.predict_tensor(&wrong).unwrap_err().to_string();
        assert!(err.contains("unet"), "{err}");
    }
}
