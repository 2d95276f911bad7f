//! A small reverse-mode tensor engine and a reduced-width 3D U-Net trained
//! with a class-weighted Dice loss.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{NetError, Result};
pub use graph::{Graph, Var};
pub use loss::{dice_coefficient, weighted_dice_loss, DiceLossKind, DiceWeights};
pub use tensor::{Real, Shape5, Tensor5};
pub use train::{binarize, predict, train, Optimizer, TrainConfig, TrainTrace};
pub use unet::{build_unet, InputNorm, LayerSpec, UNet3d, UNet3dSpec};
