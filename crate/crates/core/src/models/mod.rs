//! Segmentation networks, parameter vectors and checkpoints.

mod checkpoint;
mod network;
mod params;
mod spec;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use network::{
    build_network, BatchForward, LatentActivation, LayerInfo, LayerKind, Mode, Model, PredictionMap,
    SegmentationNetwork, BN_MOMENTUM,
};
pub use params::{LayoutBuilder, ParamEntry, ParamKind, ParameterVector};
pub use spec::{Architecture, BatchNormPolicy, BnMetaMode, NetworkSpec, Phase};
