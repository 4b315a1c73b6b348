#![allow(dead_code)]

use std::path::{Path, PathBuf};

use crg_cli::workspace::Workspace;
use crg_core::experiment::{eyewear_reference_pairs, eyewear_sampler};
use crg_core::image::ImageTensor;
use crg_core::models::{generator_architecture, GeneratorModel, OracleGenerator};
use crg_core::synthdata::generate_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const RES: usize = 32;

/// A workspace holding one model pair: a small random 32px generator with four latents
/// and the renderer's exact attribute inverse as encoder, plus a labelled dataset.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub ws: Workspace,
    pub generator: String,
    pub encoder: String,
    pub dataset: String,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path().join("ws")).unwrap();
        let arch = generator_architecture(4, RES, &[8, 8, 8, 8]).unwrap();
        let g = GeneratorModel::<f32>::new(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (generator, _) = ws.save_model("gen", &g, &json!({"trainer": "fixture"}), "none").unwrap();
        let e = OracleGenerator::new(4, RES).unwrap().inverse_encoder::<f32>().unwrap();
        let (encoder, _) = ws.save_model("enc", &e, &json!({"generator": generator}), "none").unwrap();
        let ds_dir = ws.datasets().join("labelled");
        generate_dataset(40, 5, &eyewear_sampler(0.5), RES, &ds_dir).unwrap();
        Self { dir, ws, generator, encoder, dataset: "labelled".into() }
    }

    pub fn root(&self) -> &Path {
        self.ws.root()
    }

    /// Write the `i`th eyewear reference pair as PNGs; returns (neutral, attributed).
    pub fn reference_pair(&self, i: usize) -> (PathBuf, PathBuf) {
        let pairs = eyewear_reference_pairs(i + 1, 9, RES).unwrap();
        let (n, a) = &pairs[i];
        let np = self.dir.path().join(format!("neutral-{i}.png"));
        let ap = self.dir.path().join(format!("attr-{i}.png"));
        n.save_png(&np).unwrap();
        a.save_png(&ap).unwrap();
        (np, ap)
    }

    pub fn image(&self, name: &str, img: &ImageTensor) -> PathBuf {
        let p = self.dir.path().join(name);
        img.save_png(&p).unwrap();
        p
    }
}
