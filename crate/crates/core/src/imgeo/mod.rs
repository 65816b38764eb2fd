//! Binary masks, lesion instances, distance transforms and copy-paste.

mod components;
mod edt;
mod mask;
mod paste;

pub use components::connected_components;
pub use edt::{edt, DistanceMap};
pub use mask::{flip_tensor_horizontal, flip_tensor_vertical, BBox, BinaryMask, Instance};
pub use paste::{
    circumradius, copy_paste, paste, paste_origin, sample_paste_center, scale_instance,
    AugmentedSample, CopyPasteConfig, PasteRecord,
};
