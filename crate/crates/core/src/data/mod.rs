//! Tile corpora: on-disk manifests with patient-level splits, a procedural stand-in corpus, and
//! the hue-threshold staining classifier used to score it.

mod manifest;
mod stain;
mod synth;

pub use manifest::{epoch_order, read_labels, scan_corpus, CorpusManifest, Domain, ManifestEntry, Split, SOURCE_TILE};
pub use stain::{staining_status_of, StainCall, StainThresholds};
pub use synth::{render_tile, synthesize_corpus, FsDegradation, Label, SynthSpec, CLEAN_DIR};
