//! Synthetic two-domain knee-like phantoms: shared anatomy, domain-specific
//! contrast, and the crop/resample/normalize pipeline.

mod anatomy;
mod dataset;
mod preprocess;
mod render;

pub use anatomy::{
    generate_anatomy, AnatomyMap, SubjectGeometry, BACKGROUND, FEMORAL_CARTILAGE, FEMUR,
    MAX_CARTILAGE_PX, NUM_CLASSES, TIBIA, TIBIAL_CARTILAGE,
};
pub use dataset::{
    apportion, build_splits, generate_domain, generate_subject, load_domain, save_domain, select,
    DatasetConfig, DatasetSplit, DomainRole, DomainSplit, Subject,
};
pub use preprocess::{
    center_crop, crop_margin, preprocess, preprocess_labels, resample_bilinear, resample_labels,
    z_normalize,
};
pub use render::{render_image, DomainStyle, StyleId};
