//! Dataset construction: room manifests, sample planning, room-disjoint
//! splits, label computation and the normalization constants used by joint
//! training.
//!
//! Planning (which RIR, which speech excerpt, which SNR) is separated from
//! rendering so a manifest fully determines every waveform: re-rendering a
//! record from its fields is bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::dsp::{convolve, mix_at_snr, white_noise, Signal, Snr};
use crate::rir::{Provenance, RoomProfile};
use crate::util::derive_seed;

pub const CLIP_SAMPLES: usize = 64000;
pub const SAMPLE_RATE: u32 = 16000;
/// Dry excerpts are normalized to this RMS before reverberation, so the
/// received level carries the room's distance/absorption cues.
pub const DRY_RMS: f64 = 0.1;
pub const SNR_LEVELS: [Snr; 5] =
    [Snr::Inf, Snr::Db(30.0), Snr::Db(20.0), Snr::Db(10.0), Snr::Db(0.0)];

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("room {0} has no impulse responses")]
    RoomWithoutRir(String),
    #[error("no usable speech clips (need at least 4 s at 16 kHz)")]
    EmptySpeechCorpus,
    #[error("{have} rooms cannot fill a {want}-way split")]
    TooFewRooms { have: usize, want: usize },
    #[error("test split needs {need} real rooms but only {have} available")]
    TooFewRealRooms { need: usize, have: usize },
    #[error("nonpositive label source: volume {volume} m^3, rt60 {rt60} s")]
    NonPositiveLabel { volume: f64, rt60: f64 },
    #[error("normalization needs a nonempty train split with nonzero labels")]
    DegenerateNormalization,
    #[error("manifest i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error at line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("manifest meta parse error: {0}")]
    MetaParse(serde_json::Error),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One impulse response of a room, as stored in the rooms manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RirEntry {
    pub path: String,
    pub source: [f64; 3],
    pub mic: [f64; 3],
}

/// Rooms-manifest record: profile plus its RIRs and reference labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoomEntry {
    #[serde(flatten)]
    pub profile: RoomProfile,
    pub sabine_rt60_s: Option<f64>,
    pub seed: u64,
    pub rirs: Vec<RirEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub log10_volume: f64,
    pub log_rt60: f64,
}

/// log10 for volume, natural log for RT60.
pub fn compute_labels(room: &RoomProfile) -> Result<Labels, DatasetError> {
    if room.volume_m3 <= 0.0 || room.rt60_s <= 0.0 {
        return Err(DatasetError::NonPositiveLabel { volume: room.volume_m3, rt60: room.rt60_s });
    }
    Ok(Labels { log10_volume: room.volume_m3.log10(), log_rt60: room.rt60_s.ln() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeechRef {
    pub path: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub room_id: String,
    pub rir_ref: String,
    pub speech_ref: SpeechRef,
    pub snr_db: Snr,
    pub split: Split,
    pub labels: Labels,
    pub noise_seed: u64,
    pub audio_path: String,
}

/// How SNR levels are assigned to samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrMode {
    /// One level drawn uniformly per sample.
    Random,
    /// Levels cycle through the full set, so each room sees every level.
    Replicate,
}

/// Per-target absolute maxima over the train split; labels divide by these
/// for joint training so both targets live in [-1, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct JointNorm {
    pub volume_absmax: f64,
    pub rt60_absmax: f64,
}

/// Mean/std of train labels, used to standardize single-target training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LabelMoments {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LabelStats {
    pub volume: LabelMoments,
    pub rt60: LabelMoments,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub config_hash: String,
    pub per_room: usize,
    pub snr_mode: SnrMode,
    pub joint_norm: JointNorm,
    pub label_stats: LabelStats,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub meta: ManifestMeta,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Partitions rooms into train/val/test by the given ratios, never assigning
/// simulated rooms to test unless `allow_simulated_test` is set (used by
/// experiments that explicitly evaluate on simulated rooms). Residue rooms go
/// to train.
pub fn split_by_room(
    rooms: &[RoomEntry],
    ratios: (usize, usize, usize),
    seed: u64,
    allow_simulated_test: bool,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    let n = rooms.len();
    if n < 3 {
        return Err(DatasetError::TooFewRooms { have: n, want: 3 });
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    let n_test = (n * ratios.2 / total).max(1);
    let n_val = (n * ratios.1 / total).max(1);

    let mut ids: Vec<&RoomEntry> = rooms.iter().collect();
    ids.sort_by(|a, b| a.profile.id.cmp(&b.profile.id));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    // Fisher-Yates over the sorted list.
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }

    let real = ids.iter().filter(|r| r.profile.provenance == Provenance::Measured).count();
    if !allow_simulated_test && real < n_test {
        return Err(DatasetError::TooFewRealRooms { need: n_test, have: real });
    }

    let mut assignment = BTreeMap::new();
    let mut test_left = n_test;
    let mut remaining = Vec::new();
    for room in &ids {
        let eligible =
            allow_simulated_test || room.profile.provenance == Provenance::Measured;
        if test_left > 0 && eligible {
            assignment.insert(room.profile.id.clone(), Split::Test);
            test_left -= 1;
        } else {
            remaining.push(*room);
        }
    }
    for (i, room) in remaining.iter().enumerate() {
        let split = if i < n_val { Split::Val } else { Split::Train };
        assignment.insert(room.profile.id.clone(), split);
    }
    Ok(assignment)
}

/// Plans `per_room` samples for every room. Deterministic per seed: each
/// record derives its own RNG from (seed, room id, index).
pub fn generate_samples(
    rooms: &[RoomEntry],
    speech: &[(String, Signal)],
    assignment: &BTreeMap<String, Split>,
    per_room: usize,
    seed: u64,
    snr_mode: SnrMode,
) -> Result<Vec<SampleRecord>, DatasetError> {
    let usable: Vec<&(String, Signal)> = speech
        .iter()
        .filter(|(path, clip)| {
            let ok = clip.len() >= CLIP_SAMPLES && clip.sample_rate == SAMPLE_RATE;
            if !ok {
                log::warn!("skipping short or off-rate speech clip {path}");
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(DatasetError::EmptySpeechCorpus);
    }

    let mut records = Vec::with_capacity(rooms.len() * per_room);
    for room in rooms {
        if room.rirs.is_empty() {
            return Err(DatasetError::RoomWithoutRir(room.profile.id.clone()));
        }
        let labels = compute_labels(&room.profile)?;
        let split = assignment[&room.profile.id];
        for idx in 0..per_room {
            let sample_id = format!("{}-{idx:04}", room.profile.id);
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("sample:{sample_id}")));
            let rir = &room.rirs[rng.gen_range(0..room.rirs.len())];
            let (clip_path, clip) = usable[rng.gen_range(0..usable.len())];
            // Prefer excerpts with real speech activity over pause-heavy ones.
            let clip_rms = clip.rms();
            let max_offset = clip.len() - CLIP_SAMPLES;
            let mut offset = 0;
            let mut best_rms = -1.0;
            for _ in 0..8 {
                let cand = if max_offset == 0 { 0 } else { rng.gen_range(0..=max_offset) };
                let rms = excerpt_rms(clip, cand);
                if rms > best_rms {
                    best_rms = rms;
                    offset = cand;
                }
                if rms >= 0.5 * clip_rms {
                    offset = cand;
                    break;
                }
            }
            let snr_db = match snr_mode {
                SnrMode::Random => SNR_LEVELS[rng.gen_range(0..SNR_LEVELS.len())],
                SnrMode::Replicate => SNR_LEVELS[idx % SNR_LEVELS.len()],
            };
            let noise_seed: u64 = rng.gen();
            let content_tag = derive_seed(
                noise_seed,
                &format!("{clip_path}:{offset}:{}:{snr_db}", rir.path),
            );
            records.push(SampleRecord {
                audio_path: format!("audio/{sample_id}-{content_tag:08x}.wav"),
                sample_id,
                room_id: room.profile.id.clone(),
                rir_ref: rir.path.clone(),
                speech_ref: SpeechRef { path: clip_path.clone(), offset },
                snr_db,
                split,
                labels,
                noise_seed,
            });
        }
    }
    Ok(records)
}

fn excerpt_rms(clip: &Signal, offset: usize) -> f64 {
    let seg = &clip.samples[offset..offset + CLIP_SAMPLES];
    (seg.iter().map(|v| v * v).sum::<f64>() / CLIP_SAMPLES as f64).sqrt()
}

/// Renders the reverberant noisy waveform for a record: RMS-normalized dry
/// excerpt and white noise are both convolved with the room RIR, trimmed to
/// 4 s, and mixed at the record's SNR.
pub fn render_sample(
    record: &SampleRecord,
    rir: &Signal,
    speech_clip: &Signal,
) -> Result<Signal, DatasetError> {
    let offset = record.speech_ref.offset;
    let seg = &speech_clip.samples[offset..offset + CLIP_SAMPLES];
    let rms = (seg.iter().map(|v| v * v).sum::<f64>() / CLIP_SAMPLES as f64).sqrt();
    let gain = if rms > 0.0 { DRY_RMS / rms } else { 0.0 };
    let dry = Signal {
        samples: seg.iter().map(|v| v * gain).collect(),
        sample_rate: speech_clip.sample_rate,
    };

    let mut speech_rev = convolve(&dry, rir)?;
    speech_rev.samples.truncate(CLIP_SAMPLES);

    if record.snr_db == Snr::Inf {
        return Ok(speech_rev);
    }
    let noise = white_noise(CLIP_SAMPLES, SAMPLE_RATE, record.noise_seed);
    let mut noise_rev = convolve(&noise, rir)?;
    noise_rev.samples.truncate(CLIP_SAMPLES);
    Ok(mix_at_snr(&speech_rev, &noise_rev, record.snr_db)?)
}

/// Per-target signed-max normalization constants from train labels.
pub fn joint_normalization(records: &[SampleRecord]) -> Result<JointNorm, DatasetError> {
    let train: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(DatasetError::DegenerateNormalization);
    }
    let volume_absmax =
        train.iter().map(|r| r.labels.log10_volume.abs()).fold(0.0f64, f64::max);
    let rt60_absmax = train.iter().map(|r| r.labels.log_rt60.abs()).fold(0.0f64, f64::max);
    if volume_absmax <= 0.0 || rt60_absmax <= 0.0 {
        return Err(DatasetError::DegenerateNormalization);
    }
    Ok(JointNorm { volume_absmax, rt60_absmax })
}

/// Mean/std of each label over the train split.
pub fn label_stats(records: &[SampleRecord]) -> Result<LabelStats, DatasetError> {
    let train: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(DatasetError::DegenerateNormalization);
    }
    let moments = |values: Vec<f64>| {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        LabelMoments { mean, std: if var > 1e-24 { var.sqrt() } else { 1.0 } }
    };
    Ok(LabelStats {
        volume: moments(train.iter().map(|r| r.labels.log10_volume).collect()),
        rt60: moments(train.iter().map(|r| r.labels.log_rt60).collect()),
    })
}

/// Checks the split invariants: every sample id unique, no room in two
/// splits, split a pure function of room.
pub fn validate_records(records: &[SampleRecord]) -> Result<(), String> {
    let mut seen_ids = BTreeSet::new();
    let mut room_split: BTreeMap<&str, Split> = BTreeMap::new();
    for r in records {
        if !seen_ids.insert(r.sample_id.as_str()) {
            return Err(format!("duplicate sample id {}", r.sample_id));
        }
        match room_split.get(r.room_id.as_str()) {
            Some(split) if *split != r.split => {
                return Err(format!("room {} appears in two splits", r.room_id));
            }
            _ => {
                room_split.insert(r.room_id.as_str(), r.split);
            }
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| DatasetError::Parse { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: i + 1, source: e })?,
        );
    }
    Ok(items)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    write_jsonl(&dir.join("manifest.jsonl"), &manifest.records)?;
    let meta = serde_json::to_string_pretty(&manifest.meta).expect("meta serializes");
    std::fs::write(dir.join("manifest.meta.json"), meta + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let records = read_jsonl(&dir.join("manifest.jsonl"))?;
    let meta = std::fs::read_to_string(dir.join("manifest.meta.json"))?;
    let meta = serde_json::from_str(&meta).map_err(DatasetError::MetaParse)?;
    Ok(DatasetManifest { records, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rir::Absorption;

    fn mk_room(id: &str, provenance: Provenance, volume: f64, rt60: f64) -> RoomEntry {
        RoomEntry {
            profile: RoomProfile {
                id: id.into(),
                dims: Some([5.0, 4.0, 3.0]),
                absorption: Some(Absorption::Uniform(0.3)),
                volume_m3: volume,
                rt60_s: rt60,
                provenance,
            },
            sabine_rt60_s: None,
            seed: 1,
            rirs: vec![RirEntry {
                path: format!("rirs/{id}-0.wav"),
                source: [2.5, 2.0, 1.5],
                mic: [1.0, 1.0, 1.0],
            }],
        }
    }

    fn mk_rooms(n_real: usize, n_sim: usize) -> Vec<RoomEntry> {
        let mut rooms = Vec::new();
        for i in 0..n_real {
            rooms.push(mk_room(&format!("real{i:02}"), Provenance::Measured, 60.0, 0.4));
        }
        for i in 0..n_sim {
            rooms.push(mk_room(&format!("sim{i:02}"), Provenance::Simulated, 80.0, 0.5));
        }
        rooms
    }

    #[test]
    fn labels_reference_values() {
        let mut room = mk_room("a", Provenance::Measured, 1000.0, 1.0).profile;
        let labels = compute_labels(&room).unwrap();
        assert!((labels.log10_volume - 3.0).abs() < 1e-12);
        assert!((labels.log_rt60 - 0.0).abs() < 1e-12);
        room.volume_m3 = 60.0;
        assert!((compute_labels(&room).unwrap().log10_volume - 1.7781513).abs() < 1e-6);
        room.rt60_s = -1.0;
        assert!(matches!(compute_labels(&room), Err(DatasetError::NonPositiveLabel { .. })));
    }

    #[test]
    fn split_is_6_2_2_and_deterministic() {
        let rooms = mk_rooms(10, 0);
        let a = split_by_room(&rooms, (6, 2, 2), 99, false).unwrap();
        let b = split_by_room(&rooms, (6, 2, 2), 99, false).unwrap();
        assert_eq!(a, b);
        let count = |s: Split| a.values().filter(|v| **v == s).count();
        assert_eq!(count(Split::Train), 6);
        assert_eq!(count(Split::Val), 2);
        assert_eq!(count(Split::Test), 2);
    }

    #[test]
    fn simulated_rooms_never_land_in_test() {
        let rooms = mk_rooms(5, 5);
        let assignment = split_by_room(&rooms, (6, 2, 2), 7, false).unwrap();
        for (id, split) in &assignment {
            if id.starts_with("sim") {
                assert_ne!(*split, Split::Test, "{id} in test");
            }
        }
        assert_eq!(assignment.values().filter(|s| **s == Split::Test).count(), 2);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_by_room(&mk_rooms(2, 0), (6, 2, 2), 1, false),
            Err(DatasetError::TooFewRooms { .. })
        ));
        assert!(matches!(
            split_by_room(&mk_rooms(0, 10), (6, 2, 2), 1, false),
            Err(DatasetError::TooFewRealRooms { .. })
        ));
        // With the simulated-test opt-in the same set splits fine.
        assert!(split_by_room(&mk_rooms(0, 10), (6, 2, 2), 1, true).is_ok());
    }

    fn mk_speech(n_clips: usize) -> Vec<(String, Signal)> {
        (0..n_clips)
            .map(|i| {
                (
                    format!("speech/clip{i}.wav"),
                    crate::speech::synth_speech(6.0, SAMPLE_RATE, 1000 + i as u64),
                )
            })
            .collect()
    }

    #[test]
    fn generate_samples_equal_per_room_and_deterministic() {
        let rooms = mk_rooms(10, 0);
        let assignment = split_by_room(&rooms, (6, 2, 2), 3, false).unwrap();
        let speech = mk_speech(3);
        let a = generate_samples(&rooms, &speech, &assignment, 5, 11, SnrMode::Random).unwrap();
        assert_eq!(a.len(), 50);
        for room in &rooms {
            let count = a.iter().filter(|r| r.room_id == room.profile.id).count();
            assert_eq!(count, 5);
        }
        let b = generate_samples(&rooms, &speech, &assignment, 5, 11, SnrMode::Random).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        validate_records(&a).unwrap();
    }

    #[test]
    fn snr_draw_is_roughly_uniform() {
        let rooms = mk_rooms(10, 0);
        let assignment = split_by_room(&rooms, (6, 2, 2), 3, false).unwrap();
        let speech = mk_speech(2);
        let records =
            generate_samples(&rooms, &speech, &assignment, 100, 5, SnrMode::Random).unwrap();
        assert_eq!(records.len(), 1000);
        for level in SNR_LEVELS {
            let freq = records.iter().filter(|r| r.snr_db == level).count() as f64 / 1000.0;
            assert!((freq - 0.2).abs() <= 0.04, "level {level}: freq {freq}");
        }
    }

    #[test]
    fn replicate_mode_cycles_all_levels() {
        let rooms = mk_rooms(3, 0);
        let mut assignment = BTreeMap::new();
        for r in &rooms {
            assignment.insert(r.profile.id.clone(), Split::Train);
        }
        let speech = mk_speech(1);
        let records =
            generate_samples(&rooms, &speech, &assignment, 10, 5, SnrMode::Replicate).unwrap();
        for room in &rooms {
            for level in SNR_LEVELS {
                let count = records
                    .iter()
                    .filter(|r| r.room_id == room.profile.id && r.snr_db == level)
                    .count();
                assert_eq!(count, 2);
            }
        }
    }

    #[test]
    fn joint_normalization_signed_max() {
        let rooms = mk_rooms(4, 0);
        let mut records = Vec::new();
        for (i, room) in rooms.iter().enumerate() {
            records.push(SampleRecord {
                sample_id: format!("s{i}"),
                room_id: room.profile.id.clone(),
                rir_ref: "r".into(),
                speech_ref: SpeechRef { path: "p".into(), offset: 0 },
                snr_db: Snr::Inf,
                split: if i == 3 { Split::Test } else { Split::Train },
                labels: Labels {
                    log10_volume: 1.0 + i as f64,
                    log_rt60: -0.5 - 0.1 * i as f64,
                },
                noise_seed: 0,
                audio_path: "a".into(),
            });
        }
        let norm = joint_normalization(&records).unwrap();
        // Train rows are i = 0..3: volume max 3.0, rt60 |-0.7| = 0.7.
        assert!((norm.volume_absmax - 3.0).abs() < 1e-12);
        assert!((norm.rt60_absmax - 0.7).abs() < 1e-12);
        // The max is taken on train only; the test label can exceed 1.
        assert!(records[3].labels.log10_volume / norm.volume_absmax > 1.0);
    }

    #[test]
    fn rendered_sample_is_4s_and_reproducible() {
        let rir = {
            let mut s = vec![0.0; 400];
            s[0] = 0.8;
            s[120] = 0.3;
            s[399] = 0.05;
            Signal { samples: s, sample_rate: SAMPLE_RATE }
        };
        let speech = crate::speech::synth_speech(6.0, SAMPLE_RATE, 77);
        let record = SampleRecord {
            sample_id: "x".into(),
            room_id: "r".into(),
            rir_ref: "rir".into(),
            speech_ref: SpeechRef { path: "clip".into(), offset: 12345 },
            snr_db: Snr::Db(10.0),
            split: Split::Train,
            labels: Labels { log10_volume: 1.8, log_rt60: -1.0 },
            noise_seed: 555,
            audio_path: "a".into(),
        };
        let a = render_sample(&record, &rir, &speech).unwrap();
        let b = render_sample(&record, &rir, &speech).unwrap();
        assert_eq!(a.len(), CLIP_SAMPLES);
        assert_eq!(a.samples, b.samples);

        // Measured SNR of the rendered mix matches the requested level.
        let mut speech_only = record.clone();
        speech_only.snr_db = Snr::Inf;
        let clean = render_sample(&speech_only, &rir, &speech).unwrap();
        let noise_part: Vec<f64> =
            a.samples.iter().zip(clean.samples.iter()).map(|(m, s)| m - s).collect();
        let p_noise = noise_part.iter().map(|v| v * v).sum::<f64>() / CLIP_SAMPLES as f64;
        let measured = 10.0 * (clean.power() / p_noise).log10();
        assert!((measured - 10.0).abs() < 0.01, "snr {measured}");
    }

    #[test]
    fn manifest_round_trip() {
        let rooms = mk_rooms(5, 0);
        let assignment = split_by_room(&rooms, (6, 2, 2), 3, false).unwrap();
        let speech = mk_speech(1);
        let records = generate_samples(&rooms, &speech, &assignment, 2, 5, SnrMode::Random).unwrap();
        let manifest = DatasetManifest {
            meta: ManifestMeta {
                seed: 5,
                config_hash: "deadbeef".into(),
                per_room: 2,
                snr_mode: SnrMode::Random,
                joint_norm: joint_normalization(&records).unwrap(),
                label_stats: label_stats(&records).unwrap(),
            },
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &manifest).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.records.len(), manifest.records.len());
        assert_eq!(
            serde_json::to_string(&back.records).unwrap(),
            serde_json::to_string(&manifest.records).unwrap()
        );
        assert_eq!(back.meta.joint_norm, manifest.meta.joint_norm);

        // Labels recomputed from room profiles match stored values exactly.
        for record in &back.records {
            let room = rooms.iter().find(|r| r.profile.id == record.room_id).unwrap();
            let labels = compute_labels(&room.profile).unwrap();
            assert_eq!(labels.log10_volume.to_bits(), record.labels.log10_volume.to_bits());
            assert_eq!(labels.log_rt60.to_bits(), record.labels.log_rt60.to_bits());
        }
    }
}
