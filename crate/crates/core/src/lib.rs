//! Byte-image malware family classification toolkit.
//!
//! Binaries are parsed into a small container format ([`binformat`]), rendered
//! as grayscale byte plots ([`binviz`]) and classified by a three-block CNN
//! with hand-written backpropagation ([`nn`]). [`obfusc`] emulates packing and
//! metamorphic rewriting, [`xai`] provides occlusion, HiResCAM and kernel SHAP
//! explanations, and [`harness`] runs the robustness experiments.

pub mod binformat;
pub mod binviz;
pub mod config;
pub mod error;
pub mod harness;
mod hexbytes;
pub mod nn;
pub mod obfusc;
pub mod rng;
pub mod xai;

pub use binformat::{parse, serialize, Binary, Origin, Section, SectionKind};
pub use binviz::{ByteImage, InputTensor};
pub use config::Config;
pub use error::{Error, Result};
