//! Trained fixtures shared by the model-level test targets. They live under
//! the cargo target tmp dir and are rebuilt only when their configuration
//! changes.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ddslab::config::{preset, RunConfig};
use ddslab::diffusion::Denoiser;
use ddslab::eval::AttrClassifier;
use ddslab::pipeline::{ensure_all, load_classifier_for, load_denoiser_for, load_split, Split};
use ddslab::synthdata::Dataset;
use ddslab::translator::I2IVariant;

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

pub fn fixture() -> &'static RunConfig {
    static CFG: OnceLock<RunConfig> = OnceLock::new();
    CFG.get_or_init(|| {
        let cfg = preset("tiny").unwrap().rooted(&root().join("fixture")).with_seed(0);
        let start = Instant::now();
        eprintln!("checking fixtures under {}", root().display());
        ensure_all(&cfg, &I2IVariant::ALL).expect("fixture pipeline");
        eprintln!("fixtures ready after {:.0?}", start.elapsed());
        cfg
    })
}

pub fn denoiser() -> &'static Denoiser {
    static DEN: OnceLock<Denoiser> = OnceLock::new();
    DEN.get_or_init(|| load_denoiser_for(fixture()).unwrap().0)
}

#[allow(dead_code)]
pub fn classifier() -> &'static AttrClassifier {
    static CLF: OnceLock<AttrClassifier> = OnceLock::new();
    CLF.get_or_init(|| load_classifier_for(fixture()).unwrap())
}

pub fn heldout() -> &'static Dataset {
    static HELD: OnceLock<Dataset> = OnceLock::new();
    HELD.get_or_init(|| load_split(fixture(), Split::Heldout).unwrap())
}
