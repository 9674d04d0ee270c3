//! Comparison estimators: the flat single-network classifier, root-MUSIC with
//! its grid-search oracle, and the Cramer-Rao bound.

pub mod crlb;
pub mod flat;
pub mod music;

pub use crlb::{crlb, CrlbKind};
pub use flat::{train_flat_dnn, FlatDnn};
pub use music::{music_spectrum, root_music, root_music_polynomial, MusicSpectrum, RootMusic};
