//! Grapevine bud patch classification.
//!
//! Patches are described by SIFT keypoint descriptors, pooled into a
//! bag-of-features histogram over a k-means vocabulary, and classified as
//! bud / non-bud by an RBF-kernel soft-margin SVM. The crate also carries the
//! corpus model, the evaluation protocol and a sliding-window runner.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! on-disk formats store.

mod binio;
pub mod bof;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod pipeline;
pub mod sift;
pub mod svm;
pub mod synth;
pub mod scalar;
pub mod scanwin;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;

pub type GrayImage = imaging::GrayImage<Real>;
pub type Plane = imaging::Plane<Real>;
pub use imaging::{Rect, RgbImage};
pub type SiftConfig = sift::SiftConfig<Real>;
pub type KeypointDescriptor = sift::KeypointDescriptor<Real>;
pub type Vocabulary = bof::Vocabulary<Real>;
pub type BofHistogram = bof::BofHistogram<Real>;
pub type SvmModel = svm::SvmModel<Real>;
pub type Classifier = pipeline::Classifier<Real>;
pub type Classification = pipeline::Classification<Real>;
pub type ClassifiedWindow = scanwin::ClassifiedWindow<Real>;
