//! Synthetic corpora with simulated annotators.
//!
//! Each utterance has a latent `(a*, v*)` drawn uniformly from [-1, 1]².
//! Features are a fixed random linear map of the latent plus small Gaussian
//! noise. Annotators rate `clamp(scale·latent + bias + noise)`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{assign_splits, AnnotationRecord, Corpus};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_corpus, FeaturesFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorPersona {
    pub id: String,
    pub bias_act: f64,
    pub bias_val: f64,
    pub scale_act: f64,
    pub scale_val: f64,
    pub noise_std: f64,
    pub coverage: f64,
}

impl AnnotatorPersona {
    /// Rating before clamping.
    pub fn rate_unclamped<R: Rng + ?Sized>(&self, latent: (f64, f64), rng: &mut R) -> (f64, f64) {
        let mut noise = || {
            if self.noise_std > 0.0 {
                {
                    let z: f64 = StandardNormal.sample(rng);
                    self.noise_std * z
                }
            } else {
                0.0
            }
        };
        let a = self.scale_act * latent.0 + self.bias_act + noise();
        let v = self.scale_val * latent.1 + self.bias_val + noise();
        (a, v)
    }

    pub fn rate<R: Rng + ?Sized>(&self, latent: (f64, f64), rng: &mut R) -> (f64, f64) {
        let (a, v) = self.rate_unclamped(latent, rng);
        (a.clamp(-1.0, 1.0), v.clamp(-1.0, 1.0))
    }

    fn validate(&self) -> Result<()> {
        let ok = self.scale_act > 0.0
            && self.scale_val > 0.0
            && self.noise_std >= 0.0
            && (0.0..=1.0).contains(&self.coverage)
            && self.bias_act.is_finite()
            && self.bias_val.is_finite();
        if !ok {
            return Err(Error::config(format!("invalid persona {}", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_utterances: usize,
    pub n_annotators: usize,
    pub feature_dim: usize,
    /// Probability that an annotator rates a given utterance.
    pub coverage: f64,
    pub max_bias: f64,
    pub scale_range: (f64, f64),
    /// Noise for odd-indexed annotators; even-indexed ones are noiseless.
    pub noise_range: (f64, f64),
    /// Standard deviation of the latent-to-feature map entries.
    pub feature_scale: f64,
    pub feature_noise: f64,
    pub split_fractions: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_utterances: 700,
            n_annotators: 40,
            feature_dim: 32,
            coverage: 0.175,
            max_bias: 0.3,
            scale_range: (0.7, 1.0),
            noise_range: (0.05, 0.2),
            feature_scale: 6.0,
            feature_noise: 0.05,
            split_fractions: (0.7, 0.15),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn new(n_utterances: usize, n_annotators: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            n_utterances,
            n_annotators,
            feature_dim,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 || self.feature_dim == 0 {
            return Err(Error::config("synthetic corpus sizes must be positive"));
        }
        if self.n_annotators < 2 {
            return Err(Error::config(
                "need at least 2 annotators so every utterance gets 2 ratings",
            ));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::config(format!("coverage {} outside (0, 1]", self.coverage)));
        }
        Ok(())
    }

    pub fn personas(&self) -> Vec<AnnotatorPersona> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5045_5253_4f4e_4153);
        (0..self.n_annotators)
            .map(|i| {
                let mut scale = || rng.random_range(self.scale_range.0..=self.scale_range.1);
                let (scale_act, scale_val) = (scale(), scale());
                let b = self.max_bias;
                let bias_act = rng.random_range(-b..=b);
                let bias_val = rng.random_range(-b..=b);
                let noise_std = if i % 2 == 0 {
                    0.0
                } else {
                    rng.random_range(self.noise_range.0..=self.noise_range.1)
                };
                AnnotatorPersona {
                    id: annotator_id(i),
                    bias_act,
                    bias_val,
                    scale_act,
                    scale_val,
                    noise_std,
                    coverage: self.coverage,
                }
            })
            .collect()
    }

    pub fn generate(&self) -> Result<SynthCorpus> {
        self.validate()?;
        generate_with_personas(self, self.personas())
    }
}

pub fn annotator_id(i: usize) -> String {
    format!("A{i:03}")
}

pub fn utterance_id(i: usize) -> String {
    format!("utt{i:05}")
}

/// A generated corpus with the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub personas: Vec<AnnotatorPersona>,
    /// Latent `(a*, v*)` by utterance id.
    pub latents: HashMap<String, (f64, f64)>,
    /// D×2 map from latent to features.
    pub feature_map: Array2<f64>,
}

impl SynthCorpus {
    pub fn persona(&self, id: &str) -> Option<&AnnotatorPersona> {
        self.personas.iter().find(|p| p.id == id)
    }

    pub fn noiseless_annotators(&self) -> Vec<String> {
        self.personas
            .iter()
            .filter(|p| p.noise_std == 0.0)
            .map(|p| p.id.clone())
            .collect()
    }
}

pub fn generate_corpus(n_utterances: usize, n_annotators: usize, feature_dim: usize, seed: u64) -> Result<SynthCorpus> {
    SynthConfig::new(n_utterances, n_annotators, feature_dim, seed).generate()
}

pub fn generate_with_personas(config: &SynthConfig, personas: Vec<AnnotatorPersona>) -> Result<SynthCorpus> {
    config.validate()?;
    if personas.len() < 2 {
        return Err(Error::config("need at least 2 personas"));
    }
    for p in &personas {
        p.validate()?;
    }
    if personas.iter().all(|p| p.coverage == 0.0) {
        return Err(Error::config("all personas have zero coverage"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let feature_map = Array2::from_shape_simple_fn((d, 2), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        config.feature_scale * z
    });
    let feature_noise = Normal::new(0.0, config.feature_noise).map_err(|e| Error::config(e.to_string()))?;

    let mut records = Vec::new();
    let mut features = HashMap::new();
    let mut latents = HashMap::new();
    let mut per_utt: Vec<(String, Vec<String>)> = Vec::with_capacity(config.n_utterances);
    for i in 0..config.n_utterances {
        let id = utterance_id(i);
        let latent = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let f: Vec<f64> = (0..d)
            .map(|r| feature_map[(r, 0)] * latent.0 + feature_map[(r, 1)] * latent.1 + feature_noise.sample(&mut rng))
            .collect();
        let raters = loop {
            let chosen: Vec<usize> = (0..personas.len())
                .filter(|&j| rng.random_bool(personas[j].coverage))
                .collect();
            if chosen.len() >= 2 {
                break chosen;
            }
        };
        let mut anns = Vec::with_capacity(raters.len());
        for j in raters {
            let p = &personas[j];
            let (a, v) = p.rate(latent, &mut rng);
            records.push(AnnotationRecord::new(id.clone(), p.id.clone(), a, v));
            anns.push(p.id.clone());
        }
        features.insert(id.clone(), f);
        latents.insert(id.clone(), latent);
        per_utt.push((id, anns));
    }
    let assigned = assign_splits(&per_utt, config.seed, config.split_fractions)?;
    let splits = per_utt.iter().map(|p| p.0.clone()).zip(assigned).collect();
    let corpus = Corpus::from_records(&records, &features, &splits)?;
    Ok(SynthCorpus {
        corpus,
        personas,
        latents,
        feature_map,
    })
}

/// Writes the corpus files plus `personas.json`; returns the manifest path.
pub fn write_synth(dir: &Path, synth: &SynthCorpus, format: FeaturesFormat) -> Result<std::path::PathBuf> {
    let manifest = write_corpus(dir, &synth.corpus, format)?;
    let text = serde_json::to_string_pretty(&synth.personas).expect("personas serialize");
    write_atomic(&dir.join("personas.json"), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}
