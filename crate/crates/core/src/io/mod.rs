//! File formats: the bit-exact weight container, PNM/PFM image I/O, teacher
//! output bundles, and the line-oriented model config.

pub mod config;
pub mod pnm;
pub mod teacher;
pub mod weights;

pub use config::{load_config, parse_config, render_config};
pub use pnm::{read_image, read_pfm, write_pfm, write_pgm16};
pub use teacher::TeacherBundle;
pub use weights::{StoreEntry, WeightStore};
