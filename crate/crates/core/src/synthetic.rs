//! Seeded synthetic banks and confusion-pair datasets for demos and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::answer::Label;
use crate::bank::{BankEntry, Embedding, Provenance, ReferenceBank};
use crate::pair::{ConfusionPair, QueryImage};

const MODALITIES: [&str; 6] = ["CT", "MRI", "x-ray", "ultrasound", "PET", "angiogram"];
const ANATOMY: [&str; 6] = ["chest", "brain", "abdomen", "knee", "liver", "spine"];
const FINDINGS: [&str; 8] = [
    "nodule",
    "effusion",
    "fracture",
    "mass",
    "cyst",
    "edema",
    "calcification",
    "stenosis",
];
const CATEGORIES: [&str; 4] = ["cardiology", "neurology", "oncology", "musculoskeletal"];

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub bank_size: usize,
    pub dim: usize,
    pub clusters: usize,
    pub pairs: usize,
    /// Probability that a pair's two images share the same correct option.
    pub same_label_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            bank_size: 600,
            dim: 16,
            clusters: 12,
            pairs: 16,
            same_label_rate: 0.25,
            seed: 7,
        }
    }
}

pub struct SynthData {
    pub bank: ReferenceBank,
    pub pairs: Vec<ConfusionPair>,
}

fn near(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Embedding {
    let noise = Normal::new(0.0, spread).expect("finite spread");
    let v: Vec<f32> = center
        .iter()
        .map(|c| (c + noise.sample(rng)) as f32)
        .collect();
    Embedding::new(v).expect("gaussian sample is finite and nonzero")
}

pub fn generate(spec: &SynthSpec) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..spec.clusters.max(1))
        .map(|_| (0..spec.dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    let mut entries = Vec::with_capacity(spec.bank_size);
    let mut doc = 0usize;
    let mut left_in_doc = 0usize;
    for i in 0..spec.bank_size {
        if left_in_doc == 0 {
            doc += 1;
            left_in_doc = rng.gen_range(1..=4);
        }
        left_in_doc -= 1;
        let center = &centers[rng.gen_range(0..centers.len())];
        let modality = MODALITIES.choose(&mut rng).unwrap();
        let anatomy = ANATOMY.choose(&mut rng).unwrap();
        let finding = FINDINGS.choose(&mut rng).unwrap();
        let caption = if rng.gen_bool(0.9) {
            format!("{modality} of the {anatomy} showing a {finding}")
        } else {
            format!("image of the {anatomy} with {finding}")
        };
        entries.push(BankEntry {
            id: format!("ref{i:05}"),
            doc_id: format!("doc{doc:04}"),
            caption,
            modality: None,
            embedding: near(&mut rng, center, 0.6),
        });
    }
    let bank = ReferenceBank::from_entries(
        entries,
        Provenance {
            manifest_path: "synthetic".into(),
            digest: format!("synthetic-seed-{}", spec.seed),
        },
    )
    .expect("synthetic entries are consistent");

    let pairs = (0..spec.pairs)
        .map(|i| {
            let center = &centers[rng.gen_range(0..centers.len())];
            let anatomy = ANATOMY.choose(&mut rng).unwrap();
            let mut two = FINDINGS.choose_multiple(&mut rng, 2);
            let (fa, fb) = (two.next().unwrap(), two.next().unwrap());
            let question = if rng.gen_bool(0.7) {
                let modality = MODALITIES.choose(&mut rng).unwrap();
                format!("Which finding is shown on this {modality} of the {anatomy}?")
            } else {
                format!("Which finding is shown in the {anatomy}?")
            };
            let answer_1 = if rng.gen_bool(0.5) {
                Label::A
            } else {
                Label::B
            };
            let answer_2 = if rng.gen_bool(spec.same_label_rate) {
                answer_1
            } else {
                answer_1.other()
            };
            ConfusionPair {
                pair_id: format!("pair{i:03}"),
                category: CATEGORIES[i % CATEGORIES.len()].to_string(),
                question,
                option_a: format!("{fa} of the {anatomy}"),
                option_b: format!("{fb} of the {anatomy}"),
                image_1: QueryImage {
                    id: format!("pair{i:03}-img1"),
                    path: None,
                    embedding: near(&mut rng, center, 0.4),
                },
                image_2: QueryImage {
                    id: format!("pair{i:03}-img2"),
                    path: None,
                    embedding: near(&mut rng, center, 0.4),
                },
                answer_1,
                answer_2,
            }
        })
        .collect();

    SynthData { bank, pairs }
}
