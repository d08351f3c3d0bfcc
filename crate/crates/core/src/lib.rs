//! Unsupervised multimodal deformable registration with a jointly trained
//! translation network and patchwise contrastive alignment losses.

pub mod data;
pub mod error;
pub mod grids;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod training;
pub mod viz;

pub use data::{
    generate_shapes_dataset, generate_shapes_splits, load_dataset, load_splits, random_elastic_field, save_dataset,
    save_splits, synthesize_modality, DatasetSplits, ElasticDeformConfig, PairMeta, PairRecord, PairedDataset, Split,
};
pub use error::{Error, Result};
pub use grids::{jacobian_stats, warp, warp_mask, DeformationField, ImageGrid, Interpolation, JacobianStats, MaskGrid, ValueRange};
pub use losses::{total_loss, LossTerm, LossWeights, NceConfig};
pub use metrics::{aggregate, dice, evaluate_pair, hd95, write_report, EvalReport, PairMetrics, Spacing, Units};
pub use networks::{ArchConfig, ParamMode, ProjectionHeads, RegistrationNet, TranslationNet};
pub use training::{fit, lr_at_epoch, make_variant, FitOptions, FitOutcome, Precision, TrainConfig, Trainer, Variant, VariantFlags};
