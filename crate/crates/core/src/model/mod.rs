//! Enhancement model: configuration, network, feature extraction, training
//! data assembly, the three-step training schedule, and the band-extension
//! and resolution-extension stages.

pub mod bwe_fre;
pub mod config;
pub mod data;
pub mod enhance;
pub mod features;
pub mod net;
pub mod train;

pub use bwe_fre::{
    ext_pairs_from_clean, train_bwe_fre, BweFreModels, BwePair, ExtLossRow, ExtTrainConfig,
    FrePair, MapperConfig, SpectrumMapper,
};
pub use config::ModelConfig;
pub use data::{load_item, load_split, TrainItem};
pub use enhance::{enhance_waveform, Enhanced};
pub use features::{extract_features, las_target, FeatureConfig};
pub use net::{forward_on_tape, initial_inverse_on_tape, DnrAsp, ForwardPass, ForwardVars};
pub use train::{step1_loss_on_tape, LossBreakdown, ModelScale, Step1Graph, TrainConfig, Trainer};
