//! Dataset directories: writing and loading recordings plus embedding
//! tables.
//!
//! Layout under one root:
//!
//! ```text
//! manifest.txt        key=value lines; written last, so its presence marks
//!                     a complete dataset
//! train/subject_NN.vibe
//! test/subject_NN.vibe
//! embeddings/train.vibe
//! embeddings/test.vibe
//! ```
//!
//! Recording files hold `signals (n, C, T)` as f32 plus id vectors as f64;
//! embedding files hold `tokens (P, N, D)` plus id vectors. Test-split
//! signals are repetition averages, so test files carry no repetition ids.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::data::{Container, DatasetPreset, Recording, SynthGenerator, SynthSpec};
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// Refuse to materialize single files larger than this; keeps full-scale
/// presets (tens of GB) from being written by accident. Shrink the preset
/// counts instead — the split arithmetic still uses the published numbers.
const MAX_FILE_BYTES: usize = 512 << 20;

/// Token embeddings for a set of stimuli, keyed by (concept, image).
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// `(P, N, D)`: one `(N, D)` token grid per stimulus.
    tokens: Tensor<f32>,
    keys: Vec<(u32, u32)>,
    index: HashMap<(u32, u32), usize>,
}

impl EmbeddingTable {
    pub fn new(tokens: Tensor<f32>, keys: Vec<(u32, u32)>) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!(
                "embedding table must be (P, N, D), got {shape:?}"
            )));
        }
        if shape[0] != keys.len() {
            return Err(Error::dim(format!(
                "{} embeddings but {} keys",
                shape[0],
                keys.len()
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (row, &key) in keys.iter().enumerate() {
            if index.insert(key, row).is_some() {
                return Err(Error::data(format!(
                    "duplicate embedding for concept {}, image {}",
                    key.0, key.1
                )));
            }
        }
        Ok(EmbeddingTable { tokens, keys, index })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// `(tokens, dim)` of each entry.
    pub fn token_shape(&self) -> (usize, usize) {
        (self.tokens.shape()[1], self.tokens.shape()[2])
    }

    pub fn keys(&self) -> &[(u32, u32)] {
        &self.keys
    }

    /// All token values, row-major over (stimulus, token, dim).
    pub fn all_values(&self) -> &[f32] {
        self.tokens.values()
    }

    fn row_tensor(&self, row: usize) -> Tensor<f32> {
        let (n, d) = self.token_shape();
        let vals = &self.tokens.values()[row * n * d..(row + 1) * n * d];
        Tensor::from_vec(vals.to_vec(), &[n, d]).expect("row shape")
    }

    pub fn get(&self, concept: u32, image: u32) -> Option<Tensor<f32>> {
        self.index
            .get(&(concept, image))
            .map(|&row| self.row_tensor(row))
    }

    pub fn require(&self, concept: u32, image: u32) -> Result<Tensor<f32>> {
        self.get(concept, image).ok_or_else(|| {
            Error::data(format!(
                "no embedding for concept {concept}, image {image}"
            ))
        })
    }

    /// Stack the embeddings of several stimuli into `(B, N, D)`.
    pub fn stack(&self, keys: &[(u32, u32)]) -> Result<Tensor<f32>> {
        if keys.is_empty() {
            return Err(Error::contract("cannot stack an empty key list".to_string()));
        }
        let (n, d) = self.token_shape();
        let mut data = Vec::with_capacity(keys.len() * n * d);
        for &(c, i) in keys {
            let &row = self
                .index
                .get(&(c, i))
                .ok_or_else(|| Error::data(format!("no embedding for concept {c}, image {i}")))?;
            data.extend_from_slice(&self.tokens.values()[row * n * d..(row + 1) * n * d]);
        }
        Tensor::from_vec(data, &[keys.len(), n, d])
    }

    fn to_container(&self, split: &str) -> Result<Container> {
        let mut c = Container::new();
        c.add("tokens", self.tokens.clone())?;
        let concepts: Vec<f64> = self.keys.iter().map(|k| k.0 as f64).collect();
        let images: Vec<f64> = self.keys.iter().map(|k| k.1 as f64).collect();
        c.add("concept_ids", Tensor::from_vec(concepts, &[self.keys.len()])?)?;
        c.add("image_ids", Tensor::from_vec(images, &[self.keys.len()])?)?;
        c.set_manifest("split", split);
        Ok(c)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let tokens = c.require("tokens")?.to_f32();
        let concepts = c.require("concept_ids")?.to_f64();
        let images = c.require("image_ids")?.to_f64();
        if concepts.len() != images.len() {
            return Err(Error::data(
                "concept_ids and image_ids disagree in length".to_string(),
            ));
        }
        let keys: Vec<(u32, u32)> = concepts
            .values()
            .iter()
            .zip(images.values())
            .map(|(&c, &i)| (c as u32, i as u32))
            .collect();
        EmbeddingTable::new(tokens, keys)
    }
}

fn subject_file(subject: u32) -> String {
    format!("subject_{subject:02}.vibe")
}

fn recordings_to_container(recordings: &[Recording], with_repetitions: bool) -> Result<Container> {
    if recordings.is_empty() {
        return Err(Error::data("refusing to write an empty recording file".to_string()));
    }
    let shape = recordings[0].signal.shape().to_vec();
    let mut signals = Vec::with_capacity(recordings.len() * recordings[0].signal.len());
    let mut concepts = Vec::with_capacity(recordings.len());
    let mut images = Vec::with_capacity(recordings.len());
    let mut reps = Vec::with_capacity(recordings.len());
    for r in recordings {
        if r.signal.shape() != shape {
            return Err(Error::dim(format!(
                "recordings disagree on shape: {:?} vs {shape:?}",
                r.signal.shape()
            )));
        }
        if r.subject_id != recordings[0].subject_id {
            return Err(Error::data(
                "one recording file must hold a single subject".to_string(),
            ));
        }
        signals.extend_from_slice(r.signal.values());
        concepts.push(r.concept_id as f64);
        images.push(r.image_id as f64);
        reps.push(r.repetition as f64);
    }
    let n = recordings.len();
    let mut c = Container::new();
    c.add(
        "signals",
        Tensor::from_vec(signals, &[n, shape[0], shape[1]])?,
    )?;
    c.add("concept_ids", Tensor::from_vec(concepts, &[n])?)?;
    c.add("image_ids", Tensor::from_vec(images, &[n])?)?;
    if with_repetitions {
        c.add("repetition_ids", Tensor::from_vec(reps, &[n])?)?;
    }
    c.set_manifest("subject_id", recordings[0].subject_id.to_string());
    c.set_manifest("count", n.to_string());
    Ok(c)
}

fn recordings_from_container(c: &Container, path: &Path) -> Result<Vec<Recording>> {
    let signals = c.require("signals")?.to_f32();
    let shape = signals.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::data(format!(
            "{}: signals must be (n, C, T), got {shape:?}",
            path.display()
        )));
    }
    let (n, ch, t) = (shape[0], shape[1], shape[2]);
    let concepts = c.require("concept_ids")?.to_f64();
    let images = c.require("image_ids")?.to_f64();
    if concepts.len() != n || images.len() != n {
        return Err(Error::data(format!(
            "{}: id vectors do not match the signal count",
            path.display()
        )));
    }
    let reps = match c.get("repetition_ids") {
        Some(r) => {
            let r = r.to_f64();
            if r.len() != n {
                return Err(Error::data(format!(
                    "{}: repetition_ids do not match the signal count",
                    path.display()
                )));
            }
            Some(r)
        }
        None => None,
    };
    let subject_id: u32 = c.manifest_parse("subject_id")?;
    let vals = signals.values();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(Recording {
            subject_id,
            concept_id: concepts.values()[k] as u32,
            image_id: images.values()[k] as u32,
            repetition: reps.as_ref().map_or(0, |r| r.values()[k] as u32),
            signal: Tensor::from_vec(vals[k * ch * t..(k + 1) * ch * t].to_vec(), &[ch, t])?,
        });
    }
    Ok(out)
}

/// Incrementally writes one dataset directory; `finish` commits it by
/// writing `manifest.txt` last.
pub struct DatasetWriter {
    root: PathBuf,
    manifest: Vec<(String, String)>,
}

impl DatasetWriter {
    /// Start a dataset at `root`, invalidating any complete dataset already
    /// there (its `manifest.txt` is removed first).
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let marker = root.join("manifest.txt");
        if marker.exists() {
            std::fs::remove_file(&marker)?;
        }
        Ok(DatasetWriter {
            root: root.to_path_buf(),
            manifest: Vec::new(),
        })
    }

    pub fn set_manifest(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        if let Some(slot) = self.manifest.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.manifest.push((key, value));
        }
    }

    pub fn write_train(&self, subject: u32, recordings: &[Recording]) -> Result<()> {
        let c = recordings_to_container(recordings, true)?;
        let mut c = c;
        c.set_manifest("split", "train");
        c.write(&self.root.join("train").join(subject_file(subject)))
    }

    pub fn write_test(&self, subject: u32, recordings: &[Recording]) -> Result<()> {
        let mut c = recordings_to_container(recordings, false)?;
        c.set_manifest("split", "test");
        c.write(&self.root.join("test").join(subject_file(subject)))
    }

    pub fn write_embeddings(&self, split: &str, table: &EmbeddingTable) -> Result<()> {
        let c = table.to_container(split)?;
        c.write(&self.root.join("embeddings").join(format!("{split}.vibe")))
    }

    /// Commit: write `manifest.txt`. Consumes the writer.
    pub fn finish(self) -> Result<()> {
        let text: String = self
            .manifest
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let tmp = self.root.join("manifest.txt.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.root.join("manifest.txt"))?;
        Ok(())
    }
}

/// Parse `key=value` lines (the manifest / config-file dialect: trimmed,
/// blank lines and `#` comments skipped). `what` names the source in errors.
pub(crate) fn parse_kv_text(text: &str, what: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(format!(
                "{what} line {}: expected key=value, got {line:?}",
                ln + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A complete dataset directory, opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Vec<(String, String)>,
    preset: DatasetPreset,
    subjects: Vec<u32>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let marker = root.join("manifest.txt");
        if !marker.exists() {
            return Err(Error::data(format!(
                "{} is not a dataset (no manifest.txt)",
                root.display()
            )));
        }
        let manifest = parse_kv_text(&std::fs::read_to_string(&marker)?, "manifest.txt")?;
        let get = |key: &str| -> Result<&str> {
            manifest
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::data(format!("manifest.txt is missing key '{key}'")))
        };
        let parse = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::data(format!("manifest.txt key '{key}' is not a number")))
        };
        // Geometry and counts come from the manifest, so shrunken or ablated
        // datasets reconstruct faithfully; the preset name keys the region
        // table and architecture defaults.
        let mut preset = DatasetPreset::by_name(get("preset")?)?;
        preset.channels = parse("channels")?;
        preset.timepoints = parse("timepoints")?;
        preset.train_concepts = parse("train_concepts")?;
        preset.train_images_per_concept = parse("train_images_per_concept")?;
        preset.train_repetitions = parse("train_repetitions")?;
        preset.test_concepts = parse("test_concepts")?;
        preset.test_images_per_concept = parse("test_images_per_concept")?;
        preset.test_repetitions = parse("test_repetitions")?;
        preset.validate()?;
        let n_subjects = parse("subjects")?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            preset,
            subjects: (0..n_subjects as u32).collect(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &[(String, String)] {
        &self.manifest
    }

    pub fn manifest_get(&self, key: &str) -> Option<&str> {
        self.manifest
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// The preset with this dataset's effective geometry and counts.
    pub fn preset(&self) -> &DatasetPreset {
        &self.preset
    }

    pub fn subjects(&self) -> &[u32] {
        &self.subjects
    }

    /// `(tokens, dim)` of the embedding tables, from the manifest.
    pub fn embedding_shape(&self) -> Result<(usize, usize)> {
        let n = self
            .manifest_get("embedding_tokens")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data("manifest.txt lacks embedding_tokens".to_string()))?;
        let d = self
            .manifest_get("embedding_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data("manifest.txt lacks embedding_dim".to_string()))?;
        Ok((n, d))
    }

    fn load_recordings(&self, dir: &str, subject: u32) -> Result<Vec<Recording>> {
        let path = self.root.join(dir).join(subject_file(subject));
        let c = Container::read(&path)?;
        let recordings = recordings_from_container(&c, &path)?;
        for r in &recordings {
            r.validate(&self.preset)?;
        }
        Ok(recordings)
    }

    pub fn load_train(&self, subject: u32) -> Result<Vec<Recording>> {
        self.load_recordings("train", subject)
    }

    /// Test recordings are repetition averages: one per (concept, image).
    pub fn load_test(&self, subject: u32) -> Result<Vec<Recording>> {
        self.load_recordings("test", subject)
    }

    /// `split` is `"train"` or `"test"`.
    pub fn load_embeddings(&self, split: &str) -> Result<EmbeddingTable> {
        let path = self.root.join("embeddings").join(format!("{split}.vibe"));
        EmbeddingTable::from_container(&Container::read(&path)?)
    }
}

/// What [`synth_dataset`] wrote.
#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub root: PathBuf,
    pub train_recordings: usize,
    pub test_recordings: usize,
    /// (stimulus pairs, tokens, dim) of the combined embedding tables.
    pub embedding_rows: usize,
}

/// Generate a synthetic dataset and write it as a dataset directory.
///
/// Refuses (config error) when a single output file would exceed the
/// materialization budget; shrink the preset counts for on-disk datasets.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<DatasetSummary> {
    let p = &spec.preset;
    let train_bytes = p.train_recordings_per_subject() * p.channels * p.timepoints * 4;
    let pairs = p.train_trials_per_subject() + p.test_trials_per_subject();
    let emb_bytes = pairs * spec.embedding_tokens * spec.embedding_dim * 4;
    for (what, bytes) in [("train recordings", train_bytes), ("embeddings", emb_bytes)] {
        if bytes > MAX_FILE_BYTES {
            return Err(Error::config(format!(
                "a {what} file would be {} MiB (budget {} MiB); shrink the preset counts \
                 (train_concepts, images, repetitions) for materialized datasets",
                bytes >> 20,
                MAX_FILE_BYTES >> 20
            )));
        }
    }

    let gen = SynthGenerator::new(spec.clone())?;
    let mut writer = DatasetWriter::create(dir)?;

    let mut train_total = 0usize;
    let mut test_total = 0usize;
    for s in 0..spec.n_subjects as u32 {
        let mut train = Vec::with_capacity(p.train_recordings_per_subject());
        for c in 0..p.train_concepts as u32 {
            for i in 0..p.train_images_per_concept as u32 {
                for r in 0..p.train_repetitions as u32 {
                    train.push(gen.train_recording(s, c, i, r)?);
                }
            }
        }
        train_total += train.len();
        writer.write_train(s, &train)?;

        let mut test = Vec::with_capacity(p.test_trials_per_subject());
        for idx in 0..p.test_trials_per_subject() {
            test.push(gen.test_recording(s, idx)?);
        }
        test_total += test.len();
        writer.write_test(s, &test)?;
    }

    let (n, d) = (spec.embedding_tokens, spec.embedding_dim);
    let all = gen.all_pairs();
    let split_at = p.train_trials_per_subject();
    for (split, keys) in [("train", &all[..split_at]), ("test", &all[split_at..])] {
        let mut data = Vec::with_capacity(keys.len() * n * d);
        for &(c, i) in keys {
            data.extend_from_slice(gen.embedding(c, i)?.values());
        }
        let table = EmbeddingTable::new(
            Tensor::from_vec(data, &[keys.len(), n, d])?,
            keys.to_vec(),
        )?;
        writer.write_embeddings(split, &table)?;
    }

    writer.set_manifest("format_version", "1");
    writer.set_manifest("preset", p.name.to_string());
    writer.set_manifest("channels", p.channels.to_string());
    writer.set_manifest("timepoints", p.timepoints.to_string());
    writer.set_manifest("sample_rate", p.sample_rate.to_string());
    writer.set_manifest("subjects", spec.n_subjects.to_string());
    writer.set_manifest("seed", spec.seed.to_string());
    writer.set_manifest("concept_factor_dim", spec.concept_factor_dim.to_string());
    writer.set_manifest("noise_std", spec.noise_std.to_string());
    writer.set_manifest("train_concepts", p.train_concepts.to_string());
    writer.set_manifest(
        "train_images_per_concept",
        p.train_images_per_concept.to_string(),
    );
    writer.set_manifest("train_repetitions", p.train_repetitions.to_string());
    writer.set_manifest("test_concepts", p.test_concepts.to_string());
    writer.set_manifest(
        "test_images_per_concept",
        p.test_images_per_concept.to_string(),
    );
    writer.set_manifest("test_repetitions", p.test_repetitions.to_string());
    writer.set_manifest("embedding_tokens", n.to_string());
    writer.set_manifest("embedding_dim", d.to_string());
    writer.set_manifest("embedding_std", spec.embedding_std.to_string());
    writer.set_manifest("embedding_source", "synthetic");
    writer.set_manifest("repetition_mode", "individual");
    if let Some((region, gain)) = &spec.region_gain {
        writer.set_manifest("region_gain", format!("{region}:{gain}"));
    }
    writer.finish()?;

    Ok(DatasetSummary {
        root: dir.to_path_buf(),
        train_recordings: train_total,
        test_recordings: test_total,
        embedding_rows: all.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PresetName;

    fn toy_spec(seed: u64) -> SynthSpec {
        SynthSpec::new(DatasetPreset::toy(), 2, seed)
    }

    #[test]
    fn synth_write_then_open_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_spec(9);
        let summary = synth_dataset(&spec, dir.path()).unwrap();
        assert_eq!(summary.train_recordings, 2 * 12 * 2 * 2);
        assert_eq!(summary.test_recordings, 2 * 4);
        assert_eq!(summary.embedding_rows, 12 * 2 + 4);

        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.preset().name, PresetName::Toy);
        assert_eq!(ds.subjects(), [0, 1]);
        assert_eq!(ds.embedding_shape().unwrap(), (17, 24));

        let train = ds.load_train(0).unwrap();
        assert_eq!(train.len(), 12 * 2 * 2);
        assert_eq!(train[0].signal.shape(), [8, 12]);
        let test = ds.load_test(1).unwrap();
        assert_eq!(test.len(), 4);
        assert!(test.iter().all(|r| r.concept_id >= 12));

        let emb = ds.load_embeddings("train").unwrap();
        assert_eq!(emb.len(), 24);
        assert_eq!(emb.token_shape(), (17, 24));
        let e = emb.require(3, 1).unwrap();
        assert_eq!(e.shape(), [17, 24]);
        // table contents match the generator bit for bit
        let gen = SynthGenerator::new(spec).unwrap();
        let direct = gen.embedding(3, 1).unwrap();
        for (a, b) in e.values().iter().zip(direct.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn loaded_recordings_match_the_generator() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_spec(21);
        synth_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let gen = SynthGenerator::new(spec).unwrap();
        let train = ds.load_train(1).unwrap();
        // files are written concept-major: (concept, image, repetition)
        let r = &train[2 * 2 + 1]; // concept 1, image 0, repetition 1
        assert_eq!((r.concept_id, r.image_id, r.repetition), (1, 0, 1));
        let direct = gen.train_recording(1, 1, 0, 1).unwrap();
        for (a, b) in r.signal.values().iter().zip(direct.signal.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn incomplete_directories_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Data(_))));
        // a writer that never finished leaves no manifest.txt
        let w = DatasetWriter::create(dir.path()).unwrap();
        drop(w);
        assert!(Dataset::open(dir.path()).is_err());
    }

    #[test]
    fn oversized_materialization_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(DatasetPreset::eeg(), 2, 0);
        let err = synth_dataset(&spec, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(!dir.path().join("manifest.txt").exists());
    }

    #[test]
    fn embedding_table_rejects_duplicates_and_validates_lookups() {
        let tokens = Tensor::from_vec(vec![0.0f32; 2 * 3 * 4], &[2, 3, 4]).unwrap();
        assert!(EmbeddingTable::new(tokens.clone(), vec![(0, 0), (0, 0)]).is_err());
        let table = EmbeddingTable::new(tokens, vec![(0, 0), (1, 2)]).unwrap();
        assert!(table.get(1, 2).is_some());
        assert!(table.get(9, 9).is_none());
        assert!(matches!(table.require(9, 9), Err(Error::Data(_))));
        let stacked = table.stack(&[(1, 2), (0, 0)]).unwrap();
        assert_eq!(stacked.shape(), [2, 3, 4]);
    }

    #[test]
    fn manifest_text_parsing_is_strict_but_allows_comments() {
        let parsed =
            parse_kv_text("# comment\npreset=toy\n\n  spaced = value  \n", "manifest.txt").unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1], ("spaced".to_string(), "value".to_string()));
        assert!(parse_kv_text("no equals sign", "manifest.txt").is_err());
    }

    #[test]
    fn rewriting_a_dataset_invalidates_the_old_marker_first() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&toy_spec(1), dir.path()).unwrap();
        assert!(Dataset::open(dir.path()).is_ok());
        // start a rewrite but never finish: the directory must read as
        // incomplete, not as the stale old dataset
        let _w = DatasetWriter::create(dir.path()).unwrap();
        assert!(Dataset::open(dir.path()).is_err());
    }
}
