//! End-to-end pipeline stages behind the CLI: room simulation, dataset
//! generation, featurization, training, evaluation and single-file
//! prediction. Every stage is deterministic per seed and safe to re-run
//! (existing artifacts are verified and skipped).

use ndarray::{Array1, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::dataset::{
    self, generate_samples, joint_normalization, label_stats, read_manifest,
    render_sample, split_by_room, write_jsonl, write_manifest, DatasetError, DatasetManifest,
    ManifestMeta, RirEntry, RoomEntry, SampleRecord, SnrMode, Split,
};
use crate::dsp::{DspError, Signal};
use crate::features::{
    assemble_features, default_bank, feature_file_matches, read_feature_file, recipe_channels,
    write_feature_file, FeatureError, FeatureStats, FeatureTensor, Recipe, StatsAccumulator,
    CLIP_SAMPLES, SAMPLE_RATE, TARGET_FRAMES,
};
use crate::gammatone::GammatoneError;
use crate::metrics::{self, EvalReport, MetricError, SnrGroupReport};
use crate::nn::{
    build_model, load_checkpoint, save_checkpoint, train, Adam, Checkpoint, CheckpointMeta,
    GridAxes, GridResult, Mode, NnError, SampleSource, TargetMode, TargetScaler, TrainConfig,
    TrainSignal,
};
use crate::rir::{
    coverage_order, image_source_rir, schroeder_rt60, Absorption, Provenance, RirError,
    RoomProfile,
};
use crate::speech::synth_speech;
use crate::util::{config_hash, derive_seed, sha256_hex};
use crate::wav::{read_wav, write_wav_f32, WavError};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Rir(#[from] RirError),
    #[error(transparent)]
    Gammatone(#[from] GammatoneError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
    #[error("{failed} of {total} records failed featurization: {first_error}")]
    PartialFeaturize { failed: usize, total: usize, first_error: String },
}

impl PipelineError {
    /// CLI exit code: 2 for data problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Rir(RirError::InsufficientDecayRange { .. })
            | PipelineError::Rir(RirError::NoDecaySlope)
            | PipelineError::Rir(RirError::ZeroEnergy)
            | PipelineError::Nn(NnError::Diverged { .. })
            | PipelineError::Nn(NnError::NonFiniteGradient { .. })
            | PipelineError::Metric(_) => 3,
            _ => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// simulate-rooms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateRoomsConfig {
    pub count: usize,
    pub volume_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub receivers_per_room: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for SimulateRoomsConfig {
    fn default() -> Self {
        Self {
            count: 30,
            volume_range: (30.0, 500.0),
            alpha_range: (0.1, 0.7),
            receivers_per_room: 5,
            seed: 0,
            out_dir: PathBuf::from("."),
        }
    }
}

/// Shoebox dimensions for a target volume: ceiling height near the cube
/// root (clamped to plausible room heights) and a moderate floor aspect, so
/// rooms stay compact rather than corridor-like.
fn sample_dims(volume: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = (volume.cbrt() * rng.gen_range(0.8..1.05)).clamp(2.2, 11.0);
    let area = volume / h;
    let aspect = rng.gen_range(1.0..1.4);
    let lx = (area * aspect).sqrt();
    let ly = (area / aspect).sqrt();
    [lx, ly, h]
}

fn jitter_center(dims: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut p = [0.0; 3];
    for axis in 0..3 {
        let margin = (0.5f64).min(dims[axis] * 0.25);
        let center = dims[axis] / 2.0;
        let jitter = dims[axis] * 0.1;
        p[axis] = (center + rng.gen_range(-jitter..jitter))
            .clamp(margin, dims[axis] - margin);
    }
    p
}

fn sample_receiver(dims: [f64; 3], source: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Uniform over the volume with 0.5 m margins from walls and source.
    loop {
        let mut p = [0.0; 3];
        for axis in 0..3 {
            let margin = (0.5f64).min(dims[axis] * 0.2);
            p[axis] = rng.gen_range(margin..dims[axis] - margin);
        }
        let dist = (0..3).map(|a| (p[a] - source[a]).powi(2)).sum::<f64>().sqrt();
        if dist >= 0.5 {
            return p;
        }
    }
}

/// Samples shoebox rooms (volumes log-uniform over the range, one absorption
/// per room), synthesizes one source and N receiver RIRs each, labels the
/// room with the mean Schroeder RT60 over its receivers, and writes the
/// rooms manifest plus RIR WAVs.
pub fn simulate_rooms(cfg: &SimulateRoomsConfig) -> Result<Vec<RoomEntry>, PipelineError> {
    let rir_dir = cfg.out_dir.join("rirs");
    std::fs::create_dir_all(&rir_dir)?;
    let mut rooms = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let room_seed = derive_seed(cfg.seed, &format!("room:{i}"));
        let mut rng = ChaCha8Rng::seed_from_u64(room_seed);
        let (v_lo, v_hi) = cfg.volume_range;
        let volume = (rng.gen_range(v_lo.ln()..v_hi.ln())).exp();
        let dims = sample_dims(volume, &mut rng);
        let alpha = rng.gen_range(cfg.alpha_range.0..cfg.alpha_range.1);
        let id = format!("sim{i:03}");
        let mut profile = RoomProfile {
            id: id.clone(),
            dims: Some(dims),
            absorption: Some(Absorption::Uniform(alpha)),
            volume_m3: dims[0] * dims[1] * dims[2],
            rt60_s: 0.0,
            provenance: Provenance::Simulated,
        };
        let sabine = profile.sabine()?;
        let order = coverage_order(sabine, dims);
        let source = jitter_center(dims, &mut rng);
        let receivers: Vec<[f64; 3]> = (0..cfg.receivers_per_room)
            .map(|_| sample_receiver(dims, source, &mut rng))
            .collect();

        let irs: Vec<_> = receivers
            .par_iter()
            .map(|mic| image_source_rir(&profile, source, *mic, SAMPLE_RATE, order))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rt_sum = 0.0;
        for ir in &irs {
            rt_sum += schroeder_rt60(ir)?;
        }
        profile.rt60_s = rt_sum / irs.len() as f64;

        let mut rir_entries = Vec::with_capacity(irs.len());
        for (k, ir) in irs.iter().enumerate() {
            let rel = format!("rirs/{id}-r{k}.wav");
            write_wav_f32(&cfg.out_dir.join(&rel), &ir.signal)?;
            rir_entries.push(RirEntry { path: rel, source, mic: receivers[k] });
        }
        log::info!(
            target: "simulate",
            "{id}: V={:.1} m^3 dims=[{:.2},{:.2},{:.2}] alpha={alpha:.3} order={order} rt60={:.3}s sabine={sabine:.3}s",
            profile.volume_m3, dims[0], dims[1], dims[2], profile.rt60_s
        );
        rooms.push(RoomEntry { profile, sabine_rt60_s: Some(sabine), seed: room_seed, rirs: rir_entries });
    }
    write_jsonl(&cfg.out_dir.join("rooms.jsonl"), &rooms)?;
    Ok(rooms)
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub rooms_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Directory of dry mono WAVs; when absent a synthetic corpus is used.
    pub speech_dir: Option<PathBuf>,
    pub synth_clips: usize,
    pub synth_clip_seconds: f64,
    pub per_room: usize,
    pub seed: u64,
    pub snr_mode: SnrMode,
    pub ratios: (usize, usize, usize),
    pub allow_simulated_test: bool,
    pub force: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            rooms_dir: PathBuf::from("."),
            out_dir: PathBuf::from("."),
            speech_dir: None,
            synth_clips: 12,
            synth_clip_seconds: 6.0,
            per_room: 20,
            seed: 0,
            snr_mode: SnrMode::Random,
            ratios: (6, 2, 2),
            allow_simulated_test: false,
            force: false,
        }
    }
}

/// Loads a dry speech corpus: WAVs under `speech_dir` (sorted by name,
/// resampled to 16 kHz), or the deterministic synthetic corpus.
pub fn load_speech_corpus(cfg: &GenerateConfig) -> Result<Vec<(String, Signal)>, PipelineError> {
    match &cfg.speech_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(PipelineError::Data(format!(
                    "no .wav files in {}",
                    dir.display()
                )));
            }
            let mut clips = Vec::with_capacity(paths.len());
            for p in paths {
                let clip = read_wav(&p)?;
                let clip = crate::dsp::resample(&clip, SAMPLE_RATE)?;
                clips.push((p.display().to_string(), clip));
            }
            Ok(clips)
        }
        None => Ok((0..cfg.synth_clips)
            .map(|i| {
                let seed = derive_seed(cfg.seed, &format!("speech:{i}"));
                (format!("synth:{}:{i}", cfg.seed), synth_speech(cfg.synth_clip_seconds, SAMPLE_RATE, seed))
            })
            .collect()),
    }
}

pub fn load_rooms(dir: &Path) -> Result<Vec<RoomEntry>, PipelineError> {
    let rooms: Vec<RoomEntry> = dataset::read_jsonl(&dir.join("rooms.jsonl"))?;
    if rooms.is_empty() {
        return Err(PipelineError::Data(format!(
            "rooms manifest in {} is empty",
            dir.display()
        )));
    }
    Ok(rooms)
}

/// Loads every RIR referenced by the rooms, keyed by its manifest path.
pub fn load_rir_cache(
    rooms_dir: &Path,
    rooms: &[RoomEntry],
) -> Result<BTreeMap<String, Signal>, PipelineError> {
    let mut cache = BTreeMap::new();
    for room in rooms {
        for rir in &room.rirs {
            if !cache.contains_key(&rir.path) {
                cache.insert(rir.path.clone(), read_wav(&rooms_dir.join(&rir.path))?);
            }
        }
    }
    Ok(cache)
}

/// Plans and renders the dataset: split rooms, draw samples, write the audio
/// cache and the manifest (records + normalization constants).
pub fn generate(cfg: &GenerateConfig) -> Result<DatasetManifest, PipelineError> {
    let rooms = load_rooms(&cfg.rooms_dir)?;
    let speech = load_speech_corpus(cfg)?;
    let assignment = split_by_room(&rooms, cfg.ratios, cfg.seed, cfg.allow_simulated_test)?;
    let records = generate_samples(
        &rooms,
        &speech,
        &assignment,
        cfg.per_room,
        cfg.seed,
        cfg.snr_mode,
    )?;
    dataset::validate_records(&records).map_err(PipelineError::Data)?;

    let rir_cache = load_rir_cache(&cfg.rooms_dir, &rooms)?;
    let speech_map: BTreeMap<&str, &Signal> =
        speech.iter().map(|(p, s)| (p.as_str(), s)).collect();

    std::fs::create_dir_all(cfg.out_dir.join("audio"))?;
    let rendered: Vec<Result<bool, PipelineError>> = records
        .par_iter()
        .map(|record| {
            let out_path = cfg.out_dir.join(&record.audio_path);
            if !cfg.force && out_path.exists() {
                return Ok(false);
            }
            let rir = rir_cache
                .get(&record.rir_ref)
                .ok_or_else(|| PipelineError::Data(format!("missing RIR {}", record.rir_ref)))?;
            let clip = speech_map
                .get(record.speech_ref.path.as_str())
                .ok_or_else(|| {
                    PipelineError::Data(format!("missing speech clip {}", record.speech_ref.path))
                })?;
            let audio = render_sample(record, rir, clip)?;
            write_wav_f32(&out_path, &audio)?;
            Ok(true)
        })
        .collect();
    let mut written = 0usize;
    for r in rendered {
        if r? {
            written += 1;
        }
    }

    let meta = ManifestMeta {
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        per_room: cfg.per_room,
        snr_mode: cfg.snr_mode,
        joint_norm: joint_normalization(&records)?,
        label_stats: label_stats(&records)?,
    };
    let manifest = DatasetManifest { records, meta };
    write_manifest(&cfg.out_dir, &manifest)?;

    // Split summary in the shape of the paper's data-split table.
    let mut lines = String::from("split  samples  real_rooms  simulated_rooms\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        let samples = manifest.records.iter().filter(|r| r.split == split).count();
        let rooms_in = |prov: Provenance| {
            rooms
                .iter()
                .filter(|r| assignment[&r.profile.id] == split && r.profile.provenance == prov)
                .count()
        };
        lines.push_str(&format!(
            "{split:<6} {samples:>7} {:>11} {:>16}\n",
            rooms_in(Provenance::Measured),
            rooms_in(Provenance::Simulated)
        ));
    }
    log::info!(target: "generate", "rendered {written} new samples\n{lines}");
    println!("{lines}");
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// featurize
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturizeConfig {
    pub dataset_dir: PathBuf,
    pub recipe: Recipe,
    pub force: bool,
}

pub fn feature_path(dataset_dir: &Path, record: &SampleRecord, recipe: Recipe) -> PathBuf {
    dataset_dir.join("features").join(format!("{}.{}.rfp", record.sample_id, recipe.name()))
}

pub fn stats_path(dataset_dir: &Path, recipe: Recipe) -> PathBuf {
    dataset_dir.join("features").join(format!("stats.{}.json", recipe.name()))
}

/// Featurizes every record (resumable: existing files with a valid header
/// are kept), then computes per-plane statistics over the train split only.
/// Corrupt records are flagged and skipped; the run continues and the error
/// is reported at the end.
pub fn featurize(cfg: &FeaturizeConfig) -> Result<FeatureStats, PipelineError> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let bank = default_bank();
    let expected_channels = recipe_channels(cfg.recipe, &bank);
    std::fs::create_dir_all(cfg.dataset_dir.join("features"))?;

    let results: Vec<Result<bool, String>> = manifest
        .records
        .par_iter()
        .map(|record| {
            let path = feature_path(&cfg.dataset_dir, record, cfg.recipe);
            if !cfg.force && feature_file_matches(&path, &expected_channels, TARGET_FRAMES) {
                return Ok(false);
            }
            let run = || -> Result<(), PipelineError> {
                let audio = read_wav(&cfg.dataset_dir.join(&record.audio_path))?;
                let tensor = assemble_features(&audio, cfg.recipe, &bank)?;
                write_feature_file(&path, &tensor)?;
                Ok(())
            };
            match run() {
                Ok(()) => Ok(true),
                Err(e) => Err(format!("{}: {e}", record.sample_id)),
            }
        })
        .collect();

    let mut failures: Vec<String> = Vec::new();
    let mut computed = 0usize;
    for r in &results {
        match r {
            Ok(true) => computed += 1,
            Ok(false) => {}
            Err(e) => failures.push(e.clone()),
        }
    }
    log::info!(
        target: "featurize",
        "recipe {}: {computed} computed, {} reused, {} failed",
        cfg.recipe,
        manifest.records.len() - computed - failures.len(),
        failures.len()
    );

    // Stats from the train split only, accumulated in record order.
    let mut acc = StatsAccumulator::default();
    let mut train_seen = 0usize;
    for record in manifest.records.iter().filter(|r| r.split == Split::Train) {
        let path = feature_path(&cfg.dataset_dir, record, cfg.recipe);
        if !path.exists() {
            continue;
        }
        acc.add(&read_feature_file(&path)?);
        train_seen += 1;
    }
    if train_seen == 0 {
        return Err(PipelineError::Data("no train-split features produced".into()));
    }
    let stats = acc.finish();
    std::fs::write(
        stats_path(&cfg.dataset_dir, cfg.recipe),
        serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    )?;

    if !failures.is_empty() {
        return Err(PipelineError::PartialFeaturize {
            failed: failures.len(),
            total: manifest.records.len(),
            first_error: failures[0].clone(),
        });
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPipelineConfig {
    pub dataset_dir: PathBuf,
    pub recipe: Recipe,
    pub target_mode: TargetMode,
    pub train: TrainConfig,
    pub checkpoint_path: PathBuf,
    /// Optional early exit: stop once train MSE in log-label space drops
    /// below this (single-target modes only).
    pub stop_at_train_mse: Option<f64>,
}

/// In-memory feature source: standardized f32 planes plus scaled targets.
pub struct FeatureSource {
    samples: Vec<(Array3<f32>, Array1<f32>)>,
}

impl SampleSource<f32> for FeatureSource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, idx: usize) -> (Array3<f32>, Array1<f32>) {
        self.samples[idx].clone()
    }
}

fn standardized_input(
    mut tensor: FeatureTensor,
    stats: &FeatureStats,
) -> Result<Array3<f32>, PipelineError> {
    stats.standardize(&mut tensor)?;
    let planes32 = tensor.values.mapv(|v| v as f32);
    Ok(planes32.insert_axis(Axis(0)))
}

fn load_split_source(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    recipe: Recipe,
    stats: &FeatureStats,
    scaler: &TargetScaler,
    mode: TargetMode,
) -> Result<FeatureSource, PipelineError> {
    let records = manifest.split_records(split);
    let loaded: Vec<Result<(Array3<f32>, Array1<f32>), PipelineError>> = records
        .par_iter()
        .map(|record| {
            let tensor = load_or_compute_features(dataset_dir, record, recipe)?;
            let input = standardized_input(tensor, stats)?;
            let target: Vec<f32> = scaler
                .scale(mode, record.labels.log10_volume, record.labels.log_rt60)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            Ok((input, Array1::from_vec(target)))
        })
        .collect();
    let mut samples = Vec::with_capacity(loaded.len());
    for s in loaded {
        samples.push(s?);
    }
    Ok(FeatureSource { samples })
}

/// Reads the feature file for a record, or derives it from the cached audio
/// when the file is absent.
pub fn load_or_compute_features(
    dataset_dir: &Path,
    record: &SampleRecord,
    recipe: Recipe,
) -> Result<FeatureTensor, PipelineError> {
    let path = feature_path(dataset_dir, record, recipe);
    if path.exists() {
        return Ok(read_feature_file(&path)?);
    }
    let audio = read_wav(&dataset_dir.join(&record.audio_path))?;
    Ok(assemble_features(&audio, recipe, &default_bank())?)
}

pub fn load_feature_stats(dataset_dir: &Path, recipe: Recipe) -> Result<FeatureStats, PipelineError> {
    let path = stats_path(dataset_dir, recipe);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        PipelineError::Data(format!(
            "missing feature statistics {} (run featurize first)",
            path.display()
        ))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Data(format!("bad stats file {}: {e}", path.display())))
}

fn scaler_for(manifest: &DatasetManifest, mode: TargetMode) -> TargetScaler {
    match mode {
        TargetMode::Volume => TargetScaler::Standardized {
            mean: manifest.meta.label_stats.volume.mean,
            std: manifest.meta.label_stats.volume.std,
        },
        TargetMode::Rt60 => TargetScaler::Standardized {
            mean: manifest.meta.label_stats.rt60.mean,
            std: manifest.meta.label_stats.rt60.std,
        },
        TargetMode::Joint => TargetScaler::JointMax {
            volume_absmax: manifest.meta.joint_norm.volume_absmax,
            rt60_absmax: manifest.meta.joint_norm.rt60_absmax,
        },
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<crate::nn::EpochStats>,
}

/// Trains a model on the manifest's train split, early-stopping and LR
/// scheduling against the val split, and writes the checkpoint plus a
/// history JSON next to it.
pub fn train_pipeline(cfg: &TrainPipelineConfig) -> Result<TrainOutcome, PipelineError> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let stats = load_feature_stats(&cfg.dataset_dir, cfg.recipe)?;
    let scaler = scaler_for(&manifest, cfg.target_mode);

    let train_src = load_split_source(
        &cfg.dataset_dir, &manifest, Split::Train, cfg.recipe, &stats, &scaler, cfg.target_mode,
    )?;
    let val_src = load_split_source(
        &cfg.dataset_dir, &manifest, Split::Val, cfg.recipe, &stats, &scaler, cfg.target_mode,
    )?;
    if train_src.len() == 0 {
        return Err(PipelineError::Data("empty train split".into()));
    }
    let input_rows = train_src.samples[0].0.dim().1;

    let mut model = build_model::<f32>(
        1,
        input_rows,
        TARGET_FRAMES,
        cfg.target_mode,
        &cfg.train.arch,
        cfg.train.seed,
    )?;
    let mut adam = Adam::new(&model);

    // For single-target modes, train loss in log-label space is the scaled
    // loss times the label variance.
    let descale = match scaler {
        TargetScaler::Standardized { std, .. } => std * std,
        _ => 1.0,
    };
    let stop_at = cfg.stop_at_train_mse;
    let history = train(
        &mut model,
        &mut adam,
        &train_src,
        &val_src,
        &cfg.train,
        |stats| {
            if stats.epoch % 10 == 0 {
                log::info!(
                    target: "train",
                    "epoch {:>4} lr {:.2e} train {:.5} val {:.5}",
                    stats.epoch, stats.lr, stats.train_loss, stats.val_loss
                );
            }
            match stop_at {
                Some(threshold) if stats.train_loss * descale < threshold => TrainSignal::Stop,
                _ => TrainSignal::Continue,
            }
        },
    )?;

    let meta = CheckpointMeta {
        arch: cfg.train.arch.clone(),
        input_shape: (1, input_rows, TARGET_FRAMES),
        target_mode: cfg.target_mode,
        recipe: cfg.recipe,
        scaler,
        feature_stats: stats,
        train_config: cfg.train.clone(),
        adam_step: adam.step,
        tensors: Vec::new(),
    };
    let checkpoint = Checkpoint { meta, model, adam };
    if let Some(parent) = cfg.checkpoint_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&cfg.checkpoint_path, &checkpoint)?;
    let history_path = cfg.checkpoint_path.with_extension("history.json");
    std::fs::write(
        &history_path,
        serde_json::to_string_pretty(&history).expect("history serializes") + "\n",
    )?;
    Ok(TrainOutcome { checkpoint, history })
}

/// Grid search over (batch size, learning rate, L2); persists the result
/// table and returns the winning config.
pub fn grid_search_pipeline(
    cfg: &TrainPipelineConfig,
    axes: &GridAxes,
    budget_epochs: usize,
) -> Result<GridResult, PipelineError> {
    let manifest = read_manifest(&cfg.dataset_dir)?;
    let stats = load_feature_stats(&cfg.dataset_dir, cfg.recipe)?;
    let scaler = scaler_for(&manifest, cfg.target_mode);
    let train_src = load_split_source(
        &cfg.dataset_dir, &manifest, Split::Train, cfg.recipe, &stats, &scaler, cfg.target_mode,
    )?;
    let val_src = load_split_source(
        &cfg.dataset_dir, &manifest, Split::Val, cfg.recipe, &stats, &scaler, cfg.target_mode,
    )?;
    let input_rows = train_src.samples[0].0.dim().1;
    let result = crate::nn::grid_search::<f32, _, _>(
        &cfg.train,
        axes,
        budget_epochs,
        (1, input_rows, TARGET_FRAMES),
        cfg.target_mode,
        &train_src,
        &val_src,
    )?;
    let table_path = cfg.dataset_dir.join(format!(
        "grid.{}.{}.json",
        cfg.recipe.name(),
        cfg.target_mode
    ));
    std::fs::write(
        &table_path,
        serde_json::to_string_pretty(&result).expect("grid serializes") + "\n",
    )?;
    log::info!(target: "grid", "searched {} configs, table at {}", result.runs.len(), table_path.display());
    Ok(result)
}

// ---------------------------------------------------------------------------
// evaluate / predict
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Estimate {
    pub sample_id: String,
    pub snr: String,
    /// (log-label target, log-label estimate) per available target.
    pub volume_log: Option<(f64, f64)>,
    pub rt60_log: Option<(f64, f64)>,
}

/// Runs the checkpoint over a split and returns per-sample estimates in
/// log-label space.
pub fn predict_split(
    dataset_dir: &Path,
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<Estimate>, PipelineError> {
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(PipelineError::Data(format!("split {split} is empty")));
    }
    let mode = checkpoint.meta.target_mode;
    let estimates: Vec<Result<Estimate, PipelineError>> = records
        .par_iter()
        .map(|record| {
            let tensor = load_or_compute_features(dataset_dir, record, checkpoint.meta.recipe)?;
            let input = standardized_input(tensor, &checkpoint.meta.feature_stats)?;
            let out = checkpoint.model.forward(&input, Mode::Eval, 0).0;
            let outputs: Vec<f64> = out.iter().map(|v| *v as f64).collect();
            let (vol, rt) = checkpoint.meta.scaler.unscale(mode, &outputs);
            Ok(Estimate {
                sample_id: record.sample_id.clone(),
                snr: record.snr_db.to_string(),
                volume_log: vol.map(|e| (record.labels.log10_volume, e)),
                rt60_log: rt.map(|e| (record.labels.log_rt60, e)),
            })
        })
        .collect();
    estimates.into_iter().collect()
}

fn report_for_target(
    target: &str,
    split: Split,
    estimates: &[Estimate],
    pick: impl Fn(&Estimate) -> Option<(f64, f64)>,
    to_physical: impl Fn(f64) -> f64,
    group_by_snr: bool,
) -> Result<Option<EvalReport>, PipelineError> {
    let log_pairs: Vec<(f64, f64)> = estimates.iter().filter_map(&pick).collect();
    if log_pairs.is_empty() {
        return Ok(None);
    }
    let physical: Vec<(f64, f64)> =
        log_pairs.iter().map(|(y, e)| (to_physical(*y), to_physical(*e))).collect();
    let mut report = metrics::aggregate(target, &split.to_string(), &log_pairs, &physical)?;
    if group_by_snr {
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for est in estimates {
            if let Some(pair) = pick(est) {
                groups.entry(est.snr.clone()).or_default().push(pair);
            }
        }
        report.per_snr = Some(
            groups
                .into_iter()
                .map(|(snr, pairs)| SnrGroupReport {
                    snr,
                    n: pairs.len(),
                    mse: metrics::mse(&pairs).unwrap_or(f64::NAN),
                    pearson_rho: metrics::pearson(&pairs).ok(),
                })
                .collect(),
        );
    }
    Ok(Some(report))
}

/// Evaluates a checkpoint on a split: writes one report JSON and one
/// (target, estimate) scatter CSV per estimated parameter.
pub fn evaluate_pipeline(
    dataset_dir: &Path,
    checkpoint_path: &Path,
    split: Split,
    group_by_snr: bool,
    out_dir: &Path,
) -> Result<Vec<EvalReport>, PipelineError> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let manifest = read_manifest(dataset_dir)?;
    let estimates = predict_split(dataset_dir, &checkpoint, &manifest, split)?;

    let checkpoint_sha = sha256_hex(&std::fs::read(checkpoint_path)?);
    let manifest_sha = sha256_hex(&std::fs::read(dataset_dir.join("manifest.jsonl"))?);
    std::fs::create_dir_all(out_dir)?;

    let mut reports = Vec::new();
    let specs: [(&str, Box<dyn Fn(&Estimate) -> Option<(f64, f64)>>, fn(f64) -> f64); 2] = [
        ("volume", Box::new(|e: &Estimate| e.volume_log), |v| 10f64.powf(v)),
        ("rt60", Box::new(|e: &Estimate| e.rt60_log), |v| v.exp()),
    ];
    for (target, pick, to_phys) in specs {
        if let Some(mut report) =
            report_for_target(target, split, &estimates, pick, to_phys, group_by_snr)?
        {
            report.checkpoint_sha256 = checkpoint_sha.clone();
            report.manifest_sha256 = manifest_sha.clone();

            let scatter_path = out_dir.join(format!("scatter.{target}.{split}.csv"));
            let mut csv = String::from("target,estimate\n");
            for est in &estimates {
                let pair = match target {
                    "volume" => est.volume_log,
                    _ => est.rt60_log,
                };
                if let Some((y, e)) = pair {
                    csv.push_str(&format!("{y},{e}\n"));
                }
            }
            std::fs::write(&scatter_path, csv)?;

            let report_path = out_dir.join(format!("eval.{target}.{split}.json"));
            std::fs::write(
                &report_path,
                serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
            )?;
            log::info!(
                target: "evaluate",
                "{target}/{split}: n={} mse={:.4} rho={:.4} mm={:.4} vr={:.4}",
                report.n, report.mse, report.pearson_rho, report.mean_mult, report.variance_ratio
            );
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Estimates the fingerprint of one WAV file with a trained checkpoint.
/// Returns (volume m^3, RT60 s) as available for the checkpoint's targets.
pub fn predict_wav(
    checkpoint_path: &Path,
    wav_path: &Path,
) -> Result<(Option<f64>, Option<f64>), PipelineError> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let audio = read_wav(wav_path)?;
    let audio = crate::dsp::resample(&audio, SAMPLE_RATE)?;
    if audio.len() < CLIP_SAMPLES {
        return Err(PipelineError::Data(format!(
            "{} has {:.2} s of audio; need at least 4 s",
            wav_path.display(),
            audio.duration_s()
        )));
    }
    let clip = Signal { samples: audio.samples[..CLIP_SAMPLES].to_vec(), sample_rate: SAMPLE_RATE };
    let tensor = assemble_features(&clip, checkpoint.meta.recipe, &default_bank())?;
    let input = standardized_input(tensor, &checkpoint.meta.feature_stats)?;
    let out = checkpoint.model.forward(&input, Mode::Eval, 0).0;
    let outputs: Vec<f64> = out.iter().map(|v| *v as f64).collect();
    let (vol_log, rt_log) = checkpoint.meta.scaler.unscale(checkpoint.meta.target_mode, &outputs);
    Ok((vol_log.map(|v| 10f64.powf(v)), rt_log.map(|v| v.exp())))
}
