//! Phone LM, HMM topology, denominator graph and per-utterance supervision.

pub mod alignment;
pub mod denominator;
pub mod lm;
pub mod supervision;
pub mod topology;

pub use alignment::{read_alignments, write_alignments, AlignedFrame, Alignment, PdfSegment};
pub use denominator::{build_denominator_graph, Arc, DenominatorGraph};
pub use lm::{estimate_phone_lm, History, Next, PhoneLm};
pub use supervision::{build_numerator_graph, read_supervisions, write_supervisions, SupArc, Supervision};
pub use topology::HmmTopology;
