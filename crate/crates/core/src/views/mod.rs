//! Views of a training sample: pixel augmentation and multi-crop, generative positives
//! and negatives, the EMA teacher, and routing of embeddings into the pairwise losses.

mod augment;
mod batch;
mod ema;
mod geco;

pub use augment::{crop_resize, multicrop, pixel_augment, AugmentPolicy, ColorJitter, CropBox, CropViews, MultiCrop};
pub use batch::{
    assemble_contrastive_batch, build_view_set, EmbeddedBatch, ImageView, LossInputs, Origin, Routing, TextView,
    ViewConfig, ViewSet,
};
pub use ema::{ema_update, EmaSchedule, TeacherState};
pub use geco::{
    geco_augment, ExternalProvider, GecoCache, GecoMode, GecoProvider, GecoRequest, GecoResponse, SyntheticProvider,
    Tagged,
};
