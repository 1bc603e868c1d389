//! Four-class synthetic ECG benchmark with retrieval-generated descriptions.
//!
//! Classes differ by heart rate (NORM, SBRAD, STACH) or by QRS morphology
//! (RBBB). Every record also carries acquisition nuisance that the
//! descriptions never mention: gain, per-lead scaling, white noise and
//! baseline wander. The held-out split can use a shifted acquisition
//! profile to mimic a different recording site.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cqa::{
    generate_description, seed_documents, GenerationClient, HashEmbedder, KnowledgeBase, MockClient, QueryContext,
    DEFAULT_CHUNK_CHARS, DEFAULT_K, DEFAULT_OVERLAP_CHARS,
};
use crate::data_model::{synthesize_ecg, EcgRecord, EcgTextPair, Sex, SourceTag, SyntheticSpec, WaveParams};
use crate::error::{Error, Result};

pub const CLASSES: [&str; 4] = ["NORM", "SBRAD", "STACH", "RBBB"];

const GENERATION_RATE_HZ: u32 = 500;

/// Acquisition nuisance ranges; each record draws uniformly within them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionProfile {
    pub gain: (f64, f64),
    pub lead_jitter: f64,
    pub noise_std: (f64, f64),
    pub wander_mv: (f64, f64),
    pub wander_hz: (f64, f64),
}

impl AcquisitionProfile {
    pub fn standard() -> Self {
        Self {
            gain: (0.6, 1.4),
            lead_jitter: 0.25,
            noise_std: (0.01, 0.06),
            wander_mv: (0.0, 0.3),
            wander_hz: (0.05, 0.5),
        }
    }

    /// Noisier, lower-gain device with stronger wander.
    pub fn shifted() -> Self {
        Self {
            gain: (0.5, 1.0),
            lead_jitter: 0.25,
            noise_std: (0.05, 0.12),
            wander_mv: (0.2, 0.5),
            wander_hz: (0.05, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_pretrain: usize,
    pub probe_per_class: usize,
    pub n_test: usize,
    pub sampling_rate_hz: u32,
    pub duration_s: f64,
    pub seed: u64,
    pub pretrain_profile: AcquisitionProfile,
    pub test_profile: AcquisitionProfile,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_pretrain: 512,
            probe_per_class: 8,
            n_test: 128,
            sampling_rate_hz: 100,
            duration_s: 5.0,
            seed: 0,
            pretrain_profile: AcquisitionProfile::standard(),
            test_profile: AcquisitionProfile::standard(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampling_rate_hz == 0 || GENERATION_RATE_HZ % self.sampling_rate_hz != 0 {
            return Err(Error::Argument(format!(
                "sampling rate must divide {GENERATION_RATE_HZ} Hz, got {}",
                self.sampling_rate_hz
            )));
        }
        if !(self.duration_s >= 2.0 && self.duration_s.is_finite()) {
            return Err(Error::Argument("duration must be at least 2 s".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn class_heart_rate(class: usize, rng: &mut ChaCha8Rng) -> f64 {
    match CLASSES[class] {
        "SBRAD" => rng.random_range(40.0..55.0),
        "STACH" => rng.random_range(110.0..150.0),
        _ => rng.random_range(60.0..95.0),
    }
}

/// Per-record morphology with mild jitter; RBBB adds a terminal R' wave
/// and a broad slurred S wave.
fn class_spec(class: usize, hr: f64, duration_s: f64, noise_std: f64, rng: &mut ChaCha8Rng) -> SyntheticSpec {
    let mut spec = SyntheticSpec::normal(hr, duration_s);
    spec.sampling_rate_hz = GENERATION_RATE_HZ;
    spec.noise_std = noise_std;
    let rr = 60.0 / hr;
    let mut jitter = |w: &mut WaveParams, amp: f64, width: f64| {
        w.amplitude_mv *= 1.0 + rng.random_range(-amp..amp);
        w.width_s *= 1.0 + rng.random_range(-width..width);
    };
    for w in spec.waves.iter_mut() {
        jitter(w, 0.2, 0.15);
    }
    // QT shortens with rate.
    spec.waves[4].center_s *= rr.sqrt();
    if CLASSES[class] == "RBBB" {
        spec.waves[2].width_s *= 1.4;
        spec.waves[3] = WaveParams {
            amplitude_mv: -0.35,
            center_s: 0.04,
            width_s: 0.022,
        };
        spec.extra_waves.push(WaveParams {
            amplitude_mv: rng.random_range(0.45..0.7),
            center_s: 0.075,
            width_s: 0.016,
        });
        spec.waves[4].amplitude_mv = -spec.waves[4].amplitude_mv.abs() * 0.6;
    }
    spec
}

/// One labelled record from `profile`, deterministic in `seed`.
pub fn synth_record(class: usize, seed: u64, config: &BenchmarkConfig, profile: &AcquisitionProfile) -> Result<EcgRecord> {
    if class >= CLASSES.len() {
        return Err(Error::Argument(format!("class index {class} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr = class_heart_rate(class, &mut rng);
    let noise = uniform(&mut rng, profile.noise_std);
    let mut spec = class_spec(class, hr, config.duration_s, noise, &mut rng);
    let gain = uniform(&mut rng, profile.gain);
    for s in spec.lead_scaling.iter_mut() {
        *s *= gain * (1.0 + rng.random_range(-profile.lead_jitter..=profile.lead_jitter));
    }
    let wander = uniform(&mut rng, profile.wander_mv);
    let wander_hz = uniform(&mut rng, profile.wander_hz);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let age = rng.random_range(20..90u32);
    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
    let raw = synthesize_ecg(&spec, rng.random())?;

    let n_leads = raw.signal.n_leads();
    let n = raw.signal.n_samples();
    let fs = GENERATION_RATE_HZ as f64;
    let mut data = raw.signal.as_slice().to_vec();
    for lead in 0..n_leads {
        for i in 0..n {
            let t = i as f64 / fs;
            data[lead * n + i] += (wander * (std::f64::consts::TAU * wander_hz * t + phase).sin()) as f32;
        }
    }
    let signal = crate::data_model::Signal::new(n_leads, n, data)?;
    let mut rec = EcgRecord::new(format!("syn-{}-{seed}", CLASSES[class].to_lowercase()), signal, GENERATION_RATE_HZ);
    rec.age_years = Some(age);
    rec.sex = Some(sex);
    rec.labels = vec![CLASSES[class].to_string()];
    rec.decimate((GENERATION_RATE_HZ / config.sampling_rate_hz) as usize)
}

/// Generates records round-robin over the classes from consecutive seeds.
pub fn synth_records(
    n: usize,
    seed: u64,
    config: &BenchmarkConfig,
    profile: &AcquisitionProfile,
) -> Result<Vec<Arc<EcgRecord>>> {
    synth_records_with_classes(n, CLASSES.len(), seed, config, profile)
}

/// [`synth_records`] restricted to the first `n_classes` of [`CLASSES`].
pub fn synth_records_with_classes(
    n: usize,
    n_classes: usize,
    seed: u64,
    config: &BenchmarkConfig,
    profile: &AcquisitionProfile,
) -> Result<Vec<Arc<EcgRecord>>> {
    if n_classes == 0 || n_classes > CLASSES.len() {
        return Err(Error::Argument(format!("class count must be in 1..={}, got {n_classes}", CLASSES.len())));
    }
    let base = seed.wrapping_mul(1_000_003);
    (0..n)
        .map(|i| synth_record(i % n_classes, base.wrapping_add(i as u64), config, profile).map(Arc::new))
        .collect()
}

/// Default retrieval stack: the built-in reference corpus, the hashing
/// embedder and the template client.
pub struct DescriptionPipeline {
    pub kb: KnowledgeBase,
    pub embedder: HashEmbedder,
    pub client: Box<dyn GenerationClient>,
}

impl DescriptionPipeline {
    pub fn seeded() -> Result<Self> {
        let embedder = HashEmbedder::default();
        let kb = KnowledgeBase::build(seed_documents(), &embedder, DEFAULT_CHUNK_CHARS, DEFAULT_OVERLAP_CHARS)?;
        Ok(Self {
            kb,
            embedder,
            client: Box::new(MockClient),
        })
    }

    pub fn describe(&self, record: &EcgRecord) -> Result<String> {
        let ctx = QueryContext::from_record(record);
        Ok(generate_description(&ctx, &self.kb, &self.embedder, self.client.as_ref(), DEFAULT_K)?.text)
    }

    /// Description text for a bare label set, used for zero-shot prompts.
    pub fn label_sentence(&self, label: &str) -> Result<String> {
        let ctx = QueryContext {
            labels: vec![label.to_string()],
            age_years: None,
            sex: None,
            machine_report: None,
        };
        Ok(generate_description(&ctx, &self.kb, &self.embedder, self.client.as_ref(), DEFAULT_K)?.text)
    }

    /// Zero-shot prompt for a class label.
    pub fn prompt_for(&self, label: &str) -> Result<String> {
        Ok(format!("ECG showing {}", self.label_sentence(label)?))
    }

    pub fn pairs(&self, records: &[Arc<EcgRecord>]) -> Result<Vec<EcgTextPair>> {
        records
            .iter()
            .map(|r| EcgTextPair::new(Arc::clone(r), self.describe(r)?, SourceTag::CqaGenerated))
            .collect()
    }
}

/// Pretraining pairs plus the few-label probe split and the held-out split.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub pretrain: Vec<EcgTextPair>,
    pub probe: Vec<Arc<EcgRecord>>,
    pub test: Vec<Arc<EcgRecord>>,
    /// Zero-shot prompt per class, in [`CLASSES`] order.
    pub prompts: Vec<String>,
}

impl Benchmark {
    pub fn build(config: &BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let pipeline = DescriptionPipeline::seeded()?;
        let pretrain_records = synth_records(config.n_pretrain, config.seed, config, &config.pretrain_profile)?;
        let pretrain = pipeline.pairs(&pretrain_records)?;
        let probe = synth_records(
            config.probe_per_class * CLASSES.len(),
            config.seed ^ 0x5EED_0001,
            config,
            &config.pretrain_profile,
        )?;
        let test = synth_records(config.n_test, config.seed ^ 0x5EED_0002, config, &config.test_profile)?;
        let prompts = CLASSES
            .iter()
            .map(|c| pipeline.prompt_for(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            pretrain,
            probe,
            test,
            prompts,
        })
    }

    pub fn classes(&self) -> Vec<String> {
        CLASSES.iter().map(|c| c.to_string()).collect()
    }
}

/// One-hot label rows in [`CLASSES`] order.
pub fn label_matrix(records: &[Arc<EcgRecord>]) -> Vec<Vec<bool>> {
    records
        .iter()
        .map(|r| CLASSES.iter().map(|c| r.labels.iter().any(|l| l == c)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r_peak_count(lead: &[f32], threshold: f32) -> usize {
        (1..lead.len() - 1)
            .filter(|&i| lead[i] > threshold && lead[i] >= lead[i - 1] && lead[i] > lead[i + 1])
            .count()
    }

    #[test]
    fn records_have_expected_shape_and_labels() {
        let cfg = BenchmarkConfig::default();
        let recs = synth_records(8, 3, &cfg, &cfg.pretrain_profile).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.signal.n_leads(), 12);
            assert_eq!(r.signal.n_samples(), 500);
            assert_eq!(r.sampling_rate_hz, 100);
            assert_eq!(r.labels, vec![CLASSES[i % 4].to_string()]);
            assert!(r.signal.is_finite());
        }
        let again = synth_records(8, 3, &cfg, &cfg.pretrain_profile).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn heart_rate_classes_differ_in_beat_count() {
        let mut cfg = BenchmarkConfig::default();
        let quiet = AcquisitionProfile {
            gain: (1.0, 1.0),
            lead_jitter: 0.0,
            noise_std: (0.0, 0.0),
            wander_mv: (0.0, 0.0),
            wander_hz: (0.1, 0.1),
        };
        cfg.duration_s = 10.0;
        let brady = synth_record(1, 11, &cfg, &quiet).unwrap();
        let tachy = synth_record(2, 11, &cfg, &quiet).unwrap();
        let nb = r_peak_count(brady.signal.lead(0), 0.4);
        let nt = r_peak_count(tachy.signal.lead(0), 0.4);
        assert!((6..=10).contains(&nb), "{nb}");
        assert!((18..=25).contains(&nt), "{nt}");
    }

    #[test]
    fn descriptions_are_class_specific() {
        let p = DescriptionPipeline::seeded().unwrap();
        let cfg = BenchmarkConfig::default();
        let recs = synth_records(4, 0, &cfg, &cfg.pretrain_profile).unwrap();
        let texts: Vec<String> = recs.iter().map(|r| p.describe(r).unwrap()).collect();
        assert!(texts[0].contains("NORM: Normal sinus rhythm"));
        assert!(texts[1].contains("SBRAD: Sinus bradycardia"));
        assert!(texts[2].contains("STACH: Sinus tachycardia"));
        assert!(texts[3].contains("RBBB: Right bundle branch block"));
        assert!(texts.iter().all(|t| t.contains("-year-old")));
    }

    #[test]
    fn label_matrix_is_one_hot() {
        let cfg = BenchmarkConfig::default();
        let recs = synth_records(6, 1, &cfg, &cfg.pretrain_profile).unwrap();
        for row in label_matrix(&recs) {
            assert_eq!(row.iter().filter(|&&b| b).count(), 1);
        }
    }
}
