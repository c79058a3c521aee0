//! Model checkpoints in the tensor container format.
//!
//! A checkpoint stores every parameter tensor under `param.<name>` plus a
//! manifest carrying the architecture, the optimizer constants, and the
//! validation convention, so a file is self-describing: loading rebuilds
//! the model from the manifest alone and then overwrites its parameters,
//! requiring the stored and rebuilt parameter name sets to match exactly.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Container;
use crate::error::{Error, Result};
use crate::nd::ParamSet;
use crate::qformer::{QFormer, QFormerConfig};
use crate::vae::{TscVae, VaeConfig};

/// Conventional checkpoint file names inside a run's output directory.
pub const STAGE1_FINAL: &str = "stage1_final.vibe";
pub const STAGE1_BEST: &str = "stage1_best.vibe";
pub const STAGE2_FINAL: &str = "stage2_final.vibe";
pub const STAGE2_BEST: &str = "stage2_best.vibe";

const PARAM_PREFIX: &str = "param.";

fn pack_params(c: &mut Container, params: &ParamSet<f32>) -> Result<()> {
    for (_, name, tensor) in params.iter() {
        c.add(format!("{PARAM_PREFIX}{name}"), tensor.clone())?;
    }
    Ok(())
}

/// Overwrite `params` with the tensors stored in `c`. The stored name set
/// must equal the set the rebuilt model expects — extras and absentees are
/// both reported.
fn unpack_params(params: &mut ParamSet<f32>, c: &Container) -> Result<()> {
    let mut expected: BTreeSet<String> =
        params.iter().map(|(_, name, _)| name.to_string()).collect();
    for (entry_name, tensor) in c.entries() {
        let Some(name) = entry_name.strip_prefix(PARAM_PREFIX) else {
            continue;
        };
        let Some(id) = params.id_of(name) else {
            return Err(Error::data(format!(
                "checkpoint carries unknown parameter '{name}'"
            )));
        };
        let stored = tensor.exact::<f32>().ok_or_else(|| {
            Error::data(format!("parameter '{name}' is not stored as f32"))
        })?;
        let slot = params.get_mut(id);
        if slot.shape() != stored.shape() {
            return Err(Error::data(format!(
                "parameter '{name}' has shape {:?} in the checkpoint but the model expects {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        slot.set_values(stored.values().to_vec())?;
        expected.remove(name);
    }
    if !expected.is_empty() {
        let missing: Vec<&str> = expected.iter().map(String::as_str).collect();
        return Err(Error::data(format!(
            "checkpoint is missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

fn require_kind(c: &Container, want: &str) -> Result<()> {
    match c.manifest_get("kind") {
        Some(kind) if kind == want => Ok(()),
        Some(kind) => Err(Error::data(format!(
            "checkpoint holds a '{kind}', expected a '{want}'"
        ))),
        None => Err(Error::data("file is not a model checkpoint (no kind)".to_string())),
    }
}

// ---- Architecture <-> manifest ----------------------------------------------

fn join_usizes(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usizes(c: &Container, key: &str, want: usize) -> Result<Vec<usize>> {
    let raw: String = c.manifest_parse(key)?;
    let parts: Result<Vec<usize>> = raw
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::data(format!("manifest key '{key}': {e}")))
        })
        .collect();
    let parts = parts?;
    if parts.len() != want {
        return Err(Error::data(format!(
            "manifest key '{key}' needs {want} comma-separated values, got {}",
            parts.len()
        )));
    }
    Ok(parts)
}

fn vae_manifest(cfg: &VaeConfig) -> Vec<(String, String)> {
    vec![
        ("vae.channels".into(), cfg.channels.to_string()),
        ("vae.timepoints".into(), cfg.timepoints.to_string()),
        ("vae.latent_channels".into(), cfg.latent_channels.to_string()),
        ("vae.width".into(), cfg.width.to_string()),
        ("vae.temporal_kernels".into(), join_usizes(&cfg.temporal_kernels)),
        ("vae.spatial_kernel".into(), cfg.spatial_kernel.to_string()),
        ("vae.stem_kernel".into(), cfg.stem_kernel.to_string()),
    ]
}

fn vae_config_from(c: &Container) -> Result<VaeConfig> {
    let kt = parse_usizes(c, "vae.temporal_kernels", 3)?;
    Ok(VaeConfig {
        channels: c.manifest_parse("vae.channels")?,
        timepoints: c.manifest_parse("vae.timepoints")?,
        latent_channels: c.manifest_parse("vae.latent_channels")?,
        width: c.manifest_parse("vae.width")?,
        temporal_kernels: [kt[0], kt[1], kt[2]],
        spatial_kernel: c.manifest_parse("vae.spatial_kernel")?,
        stem_kernel: c.manifest_parse("vae.stem_kernel")?,
    })
}

fn qformer_manifest(cfg: &QFormerConfig) -> Result<Vec<(String, String)>> {
    let Some(latent) = cfg.output_latent_shape else {
        return Err(Error::config(
            "only mappers with a projection head can be checkpointed".to_string(),
        ));
    };
    Ok(vec![
        ("qf.num_queries".into(), cfg.num_queries.to_string()),
        ("qf.hidden_dim".into(), cfg.hidden_dim.to_string()),
        ("qf.layers".into(), cfg.layers.to_string()),
        ("qf.heads".into(), cfg.heads.to_string()),
        ("qf.mlp_ratio".into(), cfg.mlp_ratio.to_string()),
        ("qf.cross_attn_every".into(), cfg.cross_attn_every.to_string()),
        ("qf.input_dim".into(), cfg.input_dim.to_string()),
        ("qf.head_hidden".into(), cfg.head_hidden.to_string()),
        ("qf.latent_shape".into(), join_usizes(&latent)),
    ])
}

fn qformer_config_from(c: &Container) -> Result<QFormerConfig> {
    let latent = parse_usizes(c, "qf.latent_shape", 3)?;
    Ok(QFormerConfig {
        num_queries: c.manifest_parse("qf.num_queries")?,
        hidden_dim: c.manifest_parse("qf.hidden_dim")?,
        layers: c.manifest_parse("qf.layers")?,
        heads: c.manifest_parse("qf.heads")?,
        mlp_ratio: c.manifest_parse("qf.mlp_ratio")?,
        cross_attn_every: c.manifest_parse("qf.cross_attn_every")?,
        input_dim: c.manifest_parse("qf.input_dim")?,
        head_hidden: c.manifest_parse("qf.head_hidden")?,
        output_latent_shape: Some([latent[0], latent[1], latent[2]]),
    })
}

// ---- Stage I -----------------------------------------------------------------

/// Write a Stage-I model plus run metadata. `extra` entries land in the
/// manifest verbatim (later keys overwrite earlier ones).
pub fn save_stage1(path: &Path, model: &TscVae<f32>, extra: &[(String, String)]) -> Result<()> {
    let mut c = Container::new();
    pack_params(&mut c, model.params())?;
    c.set_manifest("kind", "stage1-model");
    for (k, v) in vae_manifest(model.config()) {
        c.set_manifest(k, v);
    }
    for (k, v) in extra {
        c.set_manifest(k.clone(), v.clone());
    }
    c.set_manifest(
        "param_fingerprint",
        format!("{:016x}", model.params().fingerprint()),
    );
    c.write(path)
}

/// Rebuild a Stage-I model from a checkpoint. Returns the container too so
/// callers can read run metadata from its manifest.
pub fn load_stage1(path: &Path) -> Result<(TscVae<f32>, Container)> {
    let c = Container::read(path)?;
    require_kind(&c, "stage1-model")?;
    let cfg = vae_config_from(&c)?;
    // Freshly drawn weights are overwritten wholesale below; the rng only
    // feeds the constructor.
    let mut model = TscVae::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    unpack_params(model.params_mut(), &c)?;
    Ok((model, c))
}

// ---- Stage II ----------------------------------------------------------------

/// Write a Stage-II mapper plus run metadata.
pub fn save_stage2(path: &Path, mapper: &QFormer<f32>, extra: &[(String, String)]) -> Result<()> {
    let mut c = Container::new();
    pack_params(&mut c, mapper.params())?;
    c.set_manifest("kind", "stage2-mapper");
    for (k, v) in qformer_manifest(mapper.config())? {
        c.set_manifest(k, v);
    }
    for (k, v) in extra {
        c.set_manifest(k.clone(), v.clone());
    }
    c.set_manifest(
        "param_fingerprint",
        format!("{:016x}", mapper.params().fingerprint()),
    );
    c.write(path)
}

/// Rebuild a Stage-II mapper from a checkpoint.
pub fn load_stage2(path: &Path) -> Result<(QFormer<f32>, Container)> {
    let c = Container::read(path)?;
    require_kind(&c, "stage2-mapper")?;
    let cfg = qformer_config_from(&c)?;
    let mut mapper = QFormer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    unpack_params(mapper.params_mut(), &c)?;
    Ok((mapper, c))
}
