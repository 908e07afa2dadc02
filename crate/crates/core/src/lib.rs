//! Reference implementations for semi-supervised scene text detection.
//!
//! The modules cover mask and polygon geometry ([`geometry`]), ensemble
//! pseudo labels ([`pseudo`]), non-maximum suppression ([`suppress`]),
//! detection metrics ([`eval`]), training losses ([`loss`]) and forward
//! passes of the intra- and inter-instance context modules ([`intra`],
//! [`inter`]) on a small dense tensor type ([`tensor`]). [`io`] defines the
//! JSON file formats and [`cli`] the `textcl` commands built on them.
//!
//! ```
//! use textcl::geometry::Polygon;
//! use textcl::pseudo::{generate_pseudo_labels, FusionConfig, ScoredDetection};
//!
//! let det = |s| ScoredDetection::from_polygon(Polygon::rect(1.0, 1.0, 9.0, 5.0).unwrap(), 12, 8, s).unwrap();
//! let out = generate_pseudo_labels(&[det(0.9)], &[det(0.8)], &[det(0.9)], &FusionConfig::default())?;
//! assert!((out.labels[0].weight - 0.648).abs() < 1e-12);
//! # Ok::<(), textcl::Error>(())
//! ```

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inter;
pub mod intra;
pub mod io;
pub mod loss;
pub mod pseudo;
pub mod suppress;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/pseudo-labels.md")]
    mod pseudo_labels {}
    #[doc = include_str!("../../../book/src/suppression.md")]
    mod suppression {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/intra.md")]
    mod intra {}
    #[doc = include_str!("../../../book/src/inter.md")]
    mod inter {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
