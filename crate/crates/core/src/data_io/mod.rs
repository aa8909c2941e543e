//! Dataset representation, on-disk formats, synthetic subjects and splits.

mod record;
mod split;
mod synth;

pub use record::{
    encode_record, read_record, write_record, DatasetManifest, EcgRecord, ManifestEntry, DEFAULT_FS_HZ,
    MANIFEST_FILE, MANIFEST_SCHEMA_VERSION,
};
pub(crate) use record::{
    decode_f32le, encode_f32le, fs_json, header_f64, header_state, header_str, header_usize, read_bytes,
    split_header, write_bytes,
};
pub use split::{
    apply_transform, augment_minority, augment_minority_traced, class_counts, partition, partition_items,
    AugmentTransform, Labeled, Split, SplitMode, SplitSpec,
};
pub use synth::{
    subject_name, synth_ecg, synth_records, write_synth_dataset, SubjectParams, SynthDatasetSpec, SynthOutput, Wave,
};
