//! Inference: produce predicted recordings and store them in a predictions
//! container for later evaluation.
//!
//! Two paths exist. The end-to-end path maps visual embeddings through the
//! trained mapper into the latent space and decodes them — one prediction
//! per test image, shared by every subject. The reconstruction path runs
//! the autoencoder on the true test recordings (encode to the posterior
//! mean, decode back) — one prediction per test trial — and serves as the
//! ceiling the end-to-end path is compared against.
//!
//! Both paths are deterministic: no sampling happens anywhere, so repeated
//! invocations write byte-identical files.

use std::path::Path;

use crate::data::{Container, Dataset, Recording};
use crate::error::{Error, Result};
use crate::nd::{Tape, Tensor};
use crate::pipeline::checkpoint;
use crate::pipeline::{decode_latents, encode_means};

const CHUNK: usize = 32;

/// Manifest `kind` for prediction containers.
pub const PREDICTIONS_KIND: &str = "predictions";

/// Decode every test-split embedding through mapper and decoder, writing a
/// predictions container (`mode=embedding`) to `out_path`. Returns the
/// number of predictions written.
pub fn infer_end_to_end(
    dataset: &Dataset,
    stage1_ckpt: &Path,
    stage2_ckpt: &Path,
    out_path: &Path,
) -> Result<usize> {
    let (vae, _) = checkpoint::load_stage1(stage1_ckpt)?;
    let (mapper, c2) = checkpoint::load_stage2(stage2_ckpt)?;

    check_geometry(&vae, dataset)?;
    let latent_shape = vae.config().latent_shape();
    match mapper.config().output_latent_shape {
        Some(shape) if shape == latent_shape => {}
        other => {
            return Err(Error::config(format!(
                "mapper projects onto {other:?} but the decoder's latent space is {latent_shape:?}"
            )))
        }
    }
    // A mapper is only meaningful in front of the encoder it was trained
    // against; the checkpoint records that encoder's fingerprint.
    let vae_fp = format!("{:016x}", vae.params().fingerprint());
    if let Some(recorded) = c2.manifest_get("stage1_fingerprint") {
        if recorded != vae_fp {
            return Err(Error::config(format!(
                "mapper was trained against encoder {recorded}, but the given stage-1 \
                 checkpoint fingerprints as {vae_fp}"
            )));
        }
    }

    let table = dataset.load_embeddings("test")?;
    let (tokens, dim) = table.token_shape();
    let want_dim = mapper.config().input_dim;
    if dim != want_dim {
        return Err(Error::contract(format!(
            "test embeddings have {tokens}×{dim} tokens but the mapper expects width {want_dim}"
        )));
    }

    // One prediction per test image, in sorted key order.
    let mut keys: Vec<(u32, u32)> = table.keys().to_vec();
    keys.sort_unstable();

    let cfg = vae.config();
    let per_out = cfg.channels * cfg.timepoints;
    let mut signals = Vec::with_capacity(keys.len() * per_out);
    for chunk in keys.chunks(CHUNK) {
        let e_v = table.stack(chunk)?;
        let mut tape: Tape<f32> = Tape::new();
        let ev = tape.constant(&e_v);
        let z_hat = mapper.map_embeddings(&mut tape, ev)?;
        let x_hat = vae.decode_batch(&mut tape, z_hat)?;
        signals.extend_from_slice(tape.value(x_hat));
    }

    let mut out = Container::new();
    out.add(
        "signals",
        Tensor::from_vec(signals, &[keys.len(), cfg.channels, cfg.timepoints])?,
    )?;
    out.add("concept_ids", ids_tensor(keys.iter().map(|k| k.0))?)?;
    out.add("image_ids", ids_tensor(keys.iter().map(|k| k.1))?)?;
    out.set_manifest("kind", PREDICTIONS_KIND);
    out.set_manifest("mode", "embedding");
    out.set_manifest("preset", dataset.preset().name.to_string());
    out.set_manifest("channels", cfg.channels.to_string());
    out.set_manifest("timepoints", cfg.timepoints.to_string());
    out.set_manifest("count", keys.len().to_string());
    out.set_manifest("stage1_fingerprint", vae_fp);
    out.set_manifest(
        "stage2_fingerprint",
        format!("{:016x}", mapper.params().fingerprint()),
    );
    out.write(out_path)?;
    Ok(keys.len())
}

/// Run the autoencoder over every test trial of every subject (encode to
/// the posterior mean, decode back), writing a predictions container
/// (`mode=reconstruction`) to `out_path`. Returns the number of
/// predictions written.
pub fn infer_reconstruction(
    dataset: &Dataset,
    stage1_ckpt: &Path,
    out_path: &Path,
) -> Result<usize> {
    let (vae, _) = checkpoint::load_stage1(stage1_ckpt)?;
    check_geometry(&vae, dataset)?;

    let cfg = vae.config();
    let mut signals = Vec::new();
    let mut subjects = Vec::new();
    let mut concepts = Vec::new();
    let mut images = Vec::new();
    let mut repetitions = Vec::new();
    for &subject in dataset.subjects() {
        let recordings = dataset.load_test(subject)?;
        let refs: Vec<&Recording> = recordings.iter().collect();
        let latents = encode_means(&vae, &refs, CHUNK)?;
        let decoded = decode_latents(&vae, &latents, CHUNK)?;
        for (r, x_hat) in recordings.iter().zip(decoded) {
            signals.extend_from_slice(x_hat.values());
            subjects.push(r.subject_id);
            concepts.push(r.concept_id);
            images.push(r.image_id);
            repetitions.push(r.repetition);
        }
    }

    let count = subjects.len();
    let mut out = Container::new();
    out.add(
        "signals",
        Tensor::from_vec(signals, &[count, cfg.channels, cfg.timepoints])?,
    )?;
    out.add("subject_ids", ids_tensor(subjects.into_iter())?)?;
    out.add("concept_ids", ids_tensor(concepts.into_iter())?)?;
    out.add("image_ids", ids_tensor(images.into_iter())?)?;
    out.add("repetition_ids", ids_tensor(repetitions.into_iter())?)?;
    out.set_manifest("kind", PREDICTIONS_KIND);
    out.set_manifest("mode", "reconstruction");
    out.set_manifest("preset", dataset.preset().name.to_string());
    out.set_manifest("channels", cfg.channels.to_string());
    out.set_manifest("timepoints", cfg.timepoints.to_string());
    out.set_manifest("count", count.to_string());
    out.set_manifest(
        "stage1_fingerprint",
        format!("{:016x}", vae.params().fingerprint()),
    );
    out.write(out_path)?;
    Ok(count)
}

fn check_geometry(vae: &crate::vae::TscVae<f32>, dataset: &Dataset) -> Result<()> {
    let preset = dataset.preset();
    if vae.config().channels != preset.channels || vae.config().timepoints != preset.timepoints {
        return Err(Error::config(format!(
            "checkpoint was trained on ({}, {}) recordings, dataset holds ({}, {})",
            vae.config().channels,
            vae.config().timepoints,
            preset.channels,
            preset.timepoints
        )));
    }
    Ok(())
}

/// Integer ids stored as an f32 vector (the container has no integer dtype;
/// every id in play is far below 2^24, so the round trip is exact).
fn ids_tensor(ids: impl Iterator<Item = u32>) -> Result<Tensor<f32>> {
    let data: Vec<f32> = ids.map(|v| v as f32).collect();
    let n = data.len();
    Tensor::from_vec(data, &[n])
}
