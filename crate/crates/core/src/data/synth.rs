//! Seeded synthetic datasets standing in for backbone features.
//!
//! Each sample draws a latent template id; its three captions are a fixed
//! function of that id, so a model can fit the training set exactly.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{write_dataset, DatasetHeader, RawCaptions, SampleRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};

pub const WORD_POOL: [&str; 12] = [
    "a", "the", "man", "woman", "dog", "ball", "runs", "jumps", "sits", "falls", "away", "down",
];
pub const MIN_CAPTION_LEN: usize = 2;
pub const MAX_CAPTION_LEN: usize = 6;

pub const BOUNDARY_TYPES: [&str; 5] = [
    "change of action",
    "change of subject",
    "change of object",
    "change of color",
    "multiple",
];

const TEMPLATE_SALT: u64 = 0x5eed_ca97;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d_app: usize,
    pub d_mot: usize,
    pub d_reg: usize,
    pub d_typ: usize,
    pub frames: usize,
    pub motion_frames: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub templates: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_app: 16,
            d_mot: 16,
            d_reg: 16,
            d_typ: 8,
            frames: 4,
            motion_frames: 2,
            min_regions: 5,
            max_regions: 10,
            templates: 8,
        }
    }
}

/// The three captions of a template, fixed by its id.
pub fn template_captions(template: u64) -> [String; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SALT ^ template.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    std::array::from_fn(|_| {
        let len = rng.random_range(MIN_CAPTION_LEN..=MAX_CAPTION_LEN);
        (0..len)
            .map(|_| *WORD_POOL.choose(&mut rng).expect("pool is nonempty"))
            .collect::<Vec<_>>()
            .join(" ")
    })
}

fn normal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Generates `n` samples as dataset-file text. Identical seeds give identical bytes.
pub fn synth_dataset(seed: u64, n: usize, config: &SynthConfig) -> Result<String> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    let c = config;
    if [
        c.d_app,
        c.d_mot,
        c.d_reg,
        c.d_typ,
        c.frames,
        c.motion_frames,
        c.min_regions,
        c.templates,
    ]
    .contains(&0)
        || c.min_regions > c.max_regions
    {
        return Err(Error::Config(format!("invalid synthetic shape parameters: {c:?}")));
    }
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        d_app: c.d_app,
        d_mot: c.d_mot,
        d_reg: c.d_reg,
        d_typ: c.d_typ,
        boundary_types: BOUNDARY_TYPES.iter().map(|s| s.to_string()).collect(),
        max_regions: c.max_regions,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<SampleRecord> = (0..n)
        .map(|i| {
            let template = rng.random_range(0..c.templates as u64);
            let regions = rng.random_range(c.min_regions..=c.max_regions);
            let [subject, before, after] = template_captions(template);
            SampleRecord {
                boundary_id: format!("synth-{seed}-{i:04}"),
                appearance: normal_rows(&mut rng, c.frames, c.d_app),
                motion: normal_rows(&mut rng, c.motion_frames, c.d_mot),
                regions: normal_rows(&mut rng, regions, c.d_reg),
                boundary_type: BOUNDARY_TYPES[template as usize % BOUNDARY_TYPES.len()].to_string(),
                captions: RawCaptions { subject, before, after },
            }
        })
        .collect();
    write_dataset(&header, &records)
}
