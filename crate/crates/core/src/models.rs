//! Network architectures used by the experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::tensor::Scalar;

/// Widths of the five parameterized LeNet3 layers.
pub const LENET3_WIDTHS: [usize; 5] = [16, 32, 120, 84, 10];

/// LeNet3 for 3x32x32 inputs: C-R-P-C-R-P-L-R-L-R-L with 5x5 kernels and 2x2 max pooling.
///
/// The four hidden layers are prunable; the output layer is not.
pub fn build_lenet3<T: Scalar>(seed: u64) -> NetworkGraph<T> {
    build_lenet3_with(32, 10, seed).expect("static LeNet3 geometry is valid")
}

pub fn build_lenet3_with<T: Scalar>(
    image_size: usize,
    classes: usize,
    seed: u64,
) -> Result<NetworkGraph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, f1, f2, _] = LENET3_WIDTHS;
    let mut g = NetworkGraph::new(&[3, image_size, image_size]);
    let x = g.conv2d("conv1", 0, c1, 5, 1, 0, true, &mut rng)?;
    let x = g.relu("relu1", x);
    let x = g.maxpool2d("pool1", x, 2, 2)?;
    let x = g.conv2d("conv2", x, c2, 5, 1, 0, true, &mut rng)?;
    let x = g.relu("relu2", x);
    let x = g.maxpool2d("pool2", x, 2, 2)?;
    let x = g.flatten("flatten", x);
    let x = g.linear("fc1", x, f1, true, &mut rng)?;
    let x = g.relu("relu3", x);
    let x = g.linear("fc2", x, f2, true, &mut rng)?;
    let x = g.relu("relu4", x);
    g.linear("fc3", x, classes, false, &mut rng)?;
    Ok(g)
}

/// Pre-activation residual network configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub blocks: usize,
    pub base_width: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub classes: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            blocks: 4,
            base_width: 16,
            image_size: 32,
            in_channels: 3,
            classes: 10,
        }
    }
}

impl ResNetConfig {
    /// Output width of every block: two blocks per stage, doubling per stage.
    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.blocks)
            .map(|b| self.base_width << (b / 2))
            .collect()
    }
}

/// Pre-activation ResNet: stem conv, then blocks of BN1-ReLU-conv1-BN2-ReLU-conv2 plus a skip
/// connection, then BN-ReLU-global pooling-linear. Stage transitions use a strided 1x1 shortcut.
///
/// `conv1`/`conv2` of every block are prunable; the stem and shortcuts are reached only through
/// skip-connection gates.
pub fn build_tiny_resnet<T: Scalar>(cfg: &ResNetConfig, seed: u64) -> Result<NetworkGraph<T>> {
    if cfg.blocks == 0 || cfg.base_width == 0 {
        return Err(Error::InvalidArgument(
            "tiny resnet needs at least one block of positive width".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = NetworkGraph::new(&[cfg.in_channels, cfg.image_size, cfg.image_size]);
    let mut x = g.conv2d("stem", 0, cfg.base_width, 3, 1, 1, false, &mut rng)?;
    let mut width = cfg.base_width;
    for (b, out) in cfg.block_widths().into_iter().enumerate() {
        let stride = if out != width { 2 } else { 1 };
        let p = format!("block{b}");
        let h = g.batchnorm(&format!("{p}.bn1"), x);
        let h = g.relu(&format!("{p}.relu1"), h);
        let r = g.conv2d(&format!("{p}.conv1"), h, out, 3, stride, 1, true, &mut rng)?;
        let r = g.batchnorm(&format!("{p}.bn2"), r);
        let r = g.relu(&format!("{p}.relu2"), r);
        let r = g.conv2d(&format!("{p}.conv2"), r, out, 3, 1, 1, true, &mut rng)?;
        let short = if stride != 1 || out != width {
            g.conv2d(
                &format!("{p}.shortcut"),
                h,
                out,
                1,
                stride,
                0,
                false,
                &mut rng,
            )?
        } else {
            x
        };
        x = g.add(&format!("{p}.add"), short, r)?;
        width = out;
    }
    let x = g.batchnorm("final.bn", x);
    let x = g.relu("final.relu", x);
    let x = g.global_avg_pool("pool", x);
    g.linear("fc", x, cfg.classes, false, &mut rng)?;
    Ok(g)
}

/// Two-layer perceptron `in -> hidden (prunable) -> classes`.
pub fn build_mlp<T: Scalar>(
    inputs: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<NetworkGraph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = NetworkGraph::new(&[inputs]);
    let h = g.linear("fc1", 0, hidden, true, &mut rng)?;
    let h = g.relu("relu", h);
    g.linear("fc2", h, classes, false, &mut rng)?;
    Ok(g)
}

/// Small conv net: conv(`filters`, 3x3, prunable) - ReLU - 2x2 pool - flatten - linear.
pub fn build_toy_convnet<T: Scalar>(
    in_channels: usize,
    image_size: usize,
    filters: usize,
    classes: usize,
    seed: u64,
) -> Result<NetworkGraph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = NetworkGraph::new(&[in_channels, image_size, image_size]);
    let x = g.conv2d("conv", 0, filters, 3, 1, 1, true, &mut rng)?;
    let x = g.relu("relu", x);
    let x = g.maxpool2d("pool", x, 2, 2)?;
    let x = g.flatten("flatten", x);
    g.linear("fc", x, classes, false, &mut rng)?;
    Ok(g)
}

/// Small conv net with batch norm: conv - BN - ReLU - pool - conv - BN - ReLU - GAP - linear.
pub fn build_toy_bn_convnet<T: Scalar>(
    in_channels: usize,
    image_size: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> Result<NetworkGraph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = NetworkGraph::new(&[in_channels, image_size, image_size]);
    let x = g.conv2d("conv1", 0, width, 3, 1, 1, true, &mut rng)?;
    let x = g.batchnorm("bn1", x);
    let x = g.relu("relu1", x);
    let x = g.maxpool2d("pool", x, 2, 2)?;
    let x = g.conv2d("conv2", x, width, 3, 1, 1, true, &mut rng)?;
    let x = g.batchnorm("bn2", x);
    let x = g.relu("relu2", x);
    let x = g.global_avg_pool("gap", x);
    g.linear("fc", x, classes, false, &mut rng)?;
    Ok(g)
}
