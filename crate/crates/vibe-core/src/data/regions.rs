//! Brain-region channel groups and channel ablation.
//!
//! Channels are grouped into five scalp regions. The canonical channel order
//! of a preset is the concatenation of its region lists, which makes region
//! masks index-stable; real recordings imported from elsewhere must carry a
//! channel-name list in their manifest and be re-ordered to canonical before
//! use.
//!
//! The EEG table uses 10–10 electrode names; the MEG table uses CTF sensor
//! names of the form `M<L|R|Z><F|C|P|O|T><nn>` (left/right/midline ×
//! frontal/central/parietal/occipital/temporal), with sequential numbering
//! within each prefix group.

use crate::data::{DatasetPreset, PresetName, Recording};
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// Region names accepted by [`region_mask`], besides `visual-pathway`.
pub const REGION_NAMES: [&str; 5] = ["frontal", "central", "temporal", "parietal", "occipital"];

/// The combined temporal + occipital group covering the ventral visual
/// stream.
pub const VISUAL_PATHWAY: &str = "visual-pathway";

// EEG regions, in canonical order. 22 + 14 + 10 + 14 + 3 = 63 channels.
const EEG_FRONTAL: &[&str] = &[
    "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7", "F5", "F3", "F1", "F2", "F4", "F6",
    "F8", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6",
];
const EEG_CENTRAL: &[&str] = &[
    "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6",
];
const EEG_TEMPORAL: &[&str] = &[
    "FT9", "FT7", "FT8", "FT10", "T7", "T8", "TP9", "TP7", "TP8", "TP10",
];
const EEG_PARIETAL: &[&str] = &[
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3", "POz", "PO4", "PO8",
];
const EEG_OCCIPITAL: &[&str] = &["O1", "Oz", "O2"];

// MEG prefix groups: (region, [(CTF prefix, sensor count)]), in canonical
// order. 67 + 52 + 45 + 39 + 68 = 271 channels.
const MEG_GROUPS: [(&str, &[(&str, usize)]); 5] = [
    ("frontal", &[("MLF", 32), ("MRF", 32), ("MZF", 3)]),
    ("central", &[("MLC", 24), ("MRC", 24), ("MZC", 4)]),
    ("parietal", &[("MLP", 22), ("MRP", 22), ("MZP", 1)]),
    ("occipital", &[("MLO", 19), ("MRO", 17), ("MZO", 3)]),
    ("temporal", &[("MLT", 34), ("MRT", 34)]),
];

/// Named channel-index groups for one preset, in canonical channel order.
#[derive(Debug, Clone)]
pub struct RegionConfig {
    /// `(region name, channel names, channel indices)`, regions in canonical
    /// order; indices within a region are ascending.
    regions: Vec<(String, Vec<String>, Vec<usize>)>,
    channel_count: usize,
}

impl RegionConfig {
    /// The region table for a preset. Only `eeg` and `meg` have one.
    pub fn for_preset(preset: &DatasetPreset) -> Result<Self> {
        let region_names: Vec<(String, Vec<String>)> = match preset.name {
            PresetName::Eeg => [
                ("frontal", EEG_FRONTAL),
                ("central", EEG_CENTRAL),
                ("temporal", EEG_TEMPORAL),
                ("parietal", EEG_PARIETAL),
                ("occipital", EEG_OCCIPITAL),
            ]
            .into_iter()
            .map(|(r, names)| (r.to_string(), names.iter().map(|s| s.to_string()).collect()))
            .collect(),
            PresetName::Meg => MEG_GROUPS
                .into_iter()
                .map(|(r, prefixes)| {
                    let mut names = Vec::new();
                    for &(prefix, count) in prefixes {
                        for i in 1..=count {
                            names.push(format!("{prefix}{i:02}"));
                        }
                    }
                    (r.to_string(), names)
                })
                .collect(),
            PresetName::Toy => {
                return Err(Error::config(
                    "the toy preset has no brain-region table".to_string(),
                ))
            }
        };
        let mut regions = Vec::new();
        let mut next = 0usize;
        for (name, names) in region_names {
            let indices: Vec<usize> = (next..next + names.len()).collect();
            next += names.len();
            regions.push((name, names, indices));
        }
        if next != preset.channels {
            return Err(Error::config(format!(
                "region table covers {next} channels but preset {} has {}",
                preset.name, preset.channels
            )));
        }
        Ok(RegionConfig {
            regions,
            channel_count: next,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    /// All channel names in canonical order.
    pub fn channel_names(&self) -> Vec<&str> {
        self.regions
            .iter()
            .flat_map(|(_, names, _)| names.iter().map(|s| s.as_str()))
            .collect()
    }

    /// `(region, channel indices)` pairs in canonical order.
    pub fn regions(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.regions
            .iter()
            .map(|(name, _, idx)| (name.as_str(), idx.as_slice()))
    }

    /// Channel indices of one region, or of the visual pathway
    /// (temporal ∪ occipital), ascending.
    pub fn mask(&self, region: &str) -> Result<Vec<usize>> {
        if region == VISUAL_PATHWAY {
            let mut idx = [self.mask("temporal")?, self.mask("occipital")?].concat();
            idx.sort_unstable();
            return Ok(idx);
        }
        self.regions
            .iter()
            .find(|(name, _, _)| name == region)
            .map(|(_, _, idx)| idx.clone())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown region '{region}' (expected one of {REGION_NAMES:?} or '{VISUAL_PATHWAY}')"
                ))
            })
    }

    /// Names of the channels selected by `mask`.
    pub fn names_for(&self, mask: &[usize]) -> Vec<&str> {
        let all = self.channel_names();
        mask.iter().filter_map(|&i| all.get(i).copied()).collect()
    }
}

/// Channel indices of `region` in `preset`'s canonical channel order.
pub fn region_mask(preset: &DatasetPreset, region: &str) -> Result<Vec<usize>> {
    RegionConfig::for_preset(preset)?.mask(region)
}

/// Whether an ablation drops the masked channels or keeps only them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Remove,
    Keep,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove" => Ok(AblationMode::Remove),
            "keep" => Ok(AblationMode::Keep),
            other => Err(Error::config(format!(
                "unknown ablation mode '{other}' (expected remove or keep)"
            ))),
        }
    }
}

/// The channel indices that survive ablating `mask` from `channels` channels.
///
/// Sorted ascending (canonical order is preserved). Errors: an out-of-range
/// mask index, or an empty surviving set.
pub fn surviving_channels(
    channels: usize,
    mask: &[usize],
    mode: AblationMode,
) -> Result<Vec<usize>> {
    let mut selected = vec![false; channels];
    for &i in mask {
        if i >= channels {
            return Err(Error::config(format!(
                "mask index {i} out of range for {channels} channels"
            )));
        }
        selected[i] = true;
    }
    let keep_selected = mode == AblationMode::Keep;
    let survivors: Vec<usize> = (0..channels)
        .filter(|&i| selected[i] == keep_selected)
        .collect();
    if survivors.is_empty() {
        return Err(Error::config(
            "ablation removes every channel; nothing left to train on".to_string(),
        ));
    }
    Ok(survivors)
}

/// How many channels remain after the ablation.
pub fn ablated_channel_count(channels: usize, mask: &[usize], mode: AblationMode) -> Result<usize> {
    Ok(surviving_channels(channels, mask, mode)?.len())
}

/// Apply a channel ablation to one `(C, T)` signal.
pub fn ablate_signal(signal: &Tensor<f32>, mask: &[usize], mode: AblationMode) -> Result<Tensor<f32>> {
    let shape = signal.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!(
            "ablation expects a (C, T) signal, got {shape:?}"
        )));
    }
    let (c, t) = (shape[0], shape[1]);
    let survivors = surviving_channels(c, mask, mode)?;
    let vals = signal.values();
    let mut out = Vec::with_capacity(survivors.len() * t);
    for &ch in &survivors {
        out.extend_from_slice(&vals[ch * t..(ch + 1) * t]);
    }
    Tensor::from_vec(out, &[survivors.len(), t])
}

/// Apply a channel ablation to a batch of recordings.
///
/// `mode = remove` drops the masked channels; `mode = keep` retains only
/// them. The channel count shrinks accordingly, so downstream architecture
/// configs must be rebuilt from the ablated shape.
pub fn apply_ablation(
    recordings: &[Recording],
    mask: &[usize],
    mode: AblationMode,
) -> Result<Vec<Recording>> {
    recordings
        .iter()
        .map(|r| {
            Ok(Recording {
                signal: ablate_signal(&r.signal, mask, mode)?,
                ..r.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_recording(c: usize, t: usize) -> Recording {
        let vals: Vec<f32> = (0..c * t).map(|v| v as f32).collect();
        Recording {
            subject_id: 0,
            concept_id: 0,
            image_id: 0,
            repetition: 0,
            signal: Tensor::from_vec(vals, &[c, t]).unwrap(),
        }
    }

    #[test]
    fn eeg_regions_partition_the_channels() {
        let cfg = RegionConfig::for_preset(&DatasetPreset::eeg()).unwrap();
        let mut seen = [false; 63];
        let mut sizes = std::collections::HashMap::new();
        for (name, idx) in cfg.regions() {
            sizes.insert(name.to_string(), idx.len());
            for &i in idx {
                assert!(!seen[i], "channel {i} in two regions");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "regions must cover all channels");
        assert_eq!(sizes["frontal"], 22);
        assert_eq!(sizes["central"], 14);
        assert_eq!(sizes["temporal"], 10);
        assert_eq!(sizes["parietal"], 14);
        assert_eq!(sizes["occipital"], 3);
    }

    #[test]
    fn meg_regions_partition_the_channels() {
        let cfg = RegionConfig::for_preset(&DatasetPreset::meg()).unwrap();
        let mut seen = vec![false; 271];
        let mut sizes = std::collections::HashMap::new();
        for (name, idx) in cfg.regions() {
            sizes.insert(name.to_string(), idx.len());
            for &i in idx {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(sizes["frontal"], 67);
        assert_eq!(sizes["central"], 52);
        assert_eq!(sizes["parietal"], 45);
        assert_eq!(sizes["occipital"], 39);
        assert_eq!(sizes["temporal"], 68);
    }

    #[test]
    fn eeg_occipital_is_exactly_o1_oz_o2() {
        let preset = DatasetPreset::eeg();
        let cfg = RegionConfig::for_preset(&preset).unwrap();
        let mask = region_mask(&preset, "occipital").unwrap();
        assert_eq!(mask.len(), 3);
        assert_eq!(cfg.names_for(&mask), ["O1", "Oz", "O2"]);
    }

    #[test]
    fn visual_pathway_is_temporal_union_occipital() {
        let eeg = DatasetPreset::eeg();
        let vp = region_mask(&eeg, VISUAL_PATHWAY).unwrap();
        assert_eq!(vp.len(), 13);
        let mut expected = [
            region_mask(&eeg, "temporal").unwrap(),
            region_mask(&eeg, "occipital").unwrap(),
        ]
        .concat();
        expected.sort_unstable();
        assert_eq!(vp, expected);

        let meg = DatasetPreset::meg();
        assert_eq!(region_mask(&meg, VISUAL_PATHWAY).unwrap().len(), 107);
    }

    #[test]
    fn unknown_region_and_toy_preset_are_config_errors() {
        assert!(matches!(
            region_mask(&DatasetPreset::eeg(), "cerebellum"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            region_mask(&DatasetPreset::toy(), "frontal"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn remove_occipital_leaves_sixty_channels() {
        let preset = DatasetPreset::eeg();
        let mask = region_mask(&preset, "occipital").unwrap();
        assert_eq!(
            ablated_channel_count(63, &mask, AblationMode::Remove).unwrap(),
            60
        );
        let recs = vec![toy_recording(63, 5)];
        let out = apply_ablation(&recs, &mask, AblationMode::Remove).unwrap();
        assert_eq!(out[0].signal.shape(), [60, 5]);
    }

    #[test]
    fn keep_visual_pathway_on_meg_leaves_107() {
        let preset = DatasetPreset::meg();
        let mask = region_mask(&preset, VISUAL_PATHWAY).unwrap();
        assert_eq!(
            ablated_channel_count(271, &mask, AblationMode::Keep).unwrap(),
            107
        );
    }

    #[test]
    fn keep_extracts_the_masked_rows_in_canonical_order() {
        let rec = toy_recording(4, 3);
        // rows: [0 1 2], [3 4 5], [6 7 8], [9 10 11]
        let out = apply_ablation(&[rec], &[2, 0], AblationMode::Keep).unwrap();
        assert_eq!(out[0].signal.shape(), [2, 3]);
        assert_eq!(out[0].signal.values(), &[0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn remove_and_keep_with_the_same_mask_partition_the_rows() {
        let rec = toy_recording(6, 2);
        let mask = [1, 4];
        let kept = apply_ablation(std::slice::from_ref(&rec), &mask, AblationMode::Keep).unwrap();
        let removed =
            apply_ablation(std::slice::from_ref(&rec), &mask, AblationMode::Remove).unwrap();
        assert_eq!(kept[0].signal.shape()[0] + removed[0].signal.shape()[0], 6);
        let mut all: Vec<f32> = kept[0]
            .signal
            .values()
            .iter()
            .chain(removed[0].signal.values())
            .copied()
            .collect();
        all.sort_by(f32::total_cmp);
        let mut orig: Vec<f32> = rec.signal.values().to_vec();
        orig.sort_by(f32::total_cmp);
        assert_eq!(all, orig);
    }

    #[test]
    fn degenerate_ablations_are_config_errors() {
        // empty survivor set
        let full: Vec<usize> = (0..4).collect();
        assert!(matches!(
            surviving_channels(4, &full, AblationMode::Remove),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            surviving_channels(4, &[], AblationMode::Keep),
            Err(Error::Config(_))
        ));
        // out-of-range index
        assert!(matches!(
            surviving_channels(4, &[4], AblationMode::Keep),
            Err(Error::Config(_))
        ));
    }
}
