//! Stage II: query transformer mapping visual token embeddings into the
//! recording latent space.
//!
//! A bank of `K` learnable query tokens attends to itself, periodically
//! cross-attends to the visual tokens, and passes through a GELU MLP, each
//! sublayer wrapped in a post-norm residual (`LN(f(x) + x)`). After `L`
//! layers the queries are flattened and pushed through a two-affine
//! projection head onto the flattened latent shape of the frozen Stage-I
//! encoder.
//!
//! Attention is unmasked in both directions: queries are unordered and
//! visual tokens arrive with whatever order the embedding source used.
//! Cross-attention sits on every `cross_attn_every`-th layer, 1-indexed
//! (layers 2, 4, 6 in the published configuration).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nd::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Architecture of the mapper. `output_latent_shape` may stay unset for a
/// trunk-only model, but [`QFormer::project`] then fails with a config
/// error.
#[derive(Debug, Clone, PartialEq)]
pub struct QFormerConfig {
    /// Learnable query token count K.
    pub num_queries: usize,
    /// Token width d_h.
    pub hidden_dim: usize,
    /// Transformer layer count L.
    pub layers: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `hidden_dim`.
    pub mlp_ratio: f64,
    /// Cross-attention joins every this-many layers (1-indexed).
    pub cross_attn_every: usize,
    /// Visual embedding dimension D; a learned input projection reconciles
    /// it with `hidden_dim` when they differ.
    pub input_dim: usize,
    /// Hidden width of the projection head.
    pub head_hidden: usize,
    /// Latent shape (d, H, W) the head projects onto.
    pub output_latent_shape: Option<[usize; 3]>,
}

impl QFormerConfig {
    /// The published configuration: 64 queries, width 768, 6 layers, 8
    /// heads, cross-attention every 2 layers, 4096-wide head.
    pub fn published(output_latent_shape: [usize; 3]) -> Self {
        QFormerConfig {
            num_queries: 64,
            hidden_dim: 768,
            layers: 6,
            heads: 8,
            mlp_ratio: 4.0,
            cross_attn_every: 2,
            input_dim: 768,
            head_hidden: 4096,
            output_latent_shape: Some(output_latent_shape),
        }
    }

    /// Small dimensions for fast tests.
    pub fn toy(output_latent_shape: [usize; 3]) -> Self {
        QFormerConfig {
            num_queries: 4,
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
            cross_attn_every: 2,
            input_dim: 8,
            head_hidden: 16,
            output_latent_shape: Some(output_latent_shape),
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.mlp_ratio * self.hidden_dim as f64).round() as usize
    }

    /// Whether the 1-indexed layer carries cross-attention.
    pub fn layer_has_cross_attention(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.cross_attn_every)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_queries", self.num_queries),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("cross_attn_every", self.cross_attn_every),
            ("input_dim", self.input_dim),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.ffn_hidden() == 0 {
            return Err(Error::config(format!(
                "mlp_ratio {} collapses the FFN hidden width",
                self.mlp_ratio
            )));
        }
        if let Some(ls) = self.output_latent_shape {
            if ls.contains(&0) {
                return Err(Error::config(format!(
                    "output latent shape {ls:?} has a zero extent"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AffineP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnP {
    q: AffineP,
    k: AffineP,
    v: AffineP,
    o: AffineP,
}

#[derive(Debug, Clone)]
struct LayerP {
    self_attn: AttnP,
    ln_sa: NormP,
    cross_attn: Option<AttnP>,
    ln_ca: Option<NormP>,
    ffn_in: AffineP,
    ffn_out: AffineP,
    ln_ffn: NormP,
}

/// The visual-to-latent mapper: query bank, transformer trunk, projection
/// head.
pub struct QFormer<T: Scalar> {
    cfg: QFormerConfig,
    params: ParamSet<T>,
    queries: ParamId,
    input_proj: Option<AffineP>,
    layers: Vec<LayerP>,
    head: Option<(AffineP, AffineP)>,
}

impl<T: Scalar> QFormer<T> {
    pub fn new<R: Rng>(cfg: QFormerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let dh = cfg.hidden_dim;

        let affine = |ps: &mut ParamSet<T>, rng: &mut R, name: &str, di: usize, do_: usize| -> Result<AffineP> {
            let limit = 1.0 / (di as f64).sqrt();
            Ok(AffineP {
                w: ps.add(format!("{name}.w"), Tensor::rand_uniform(rng, &[di, do_], -limit, limit))?,
                b: ps.add(format!("{name}.b"), Tensor::zeros(&[do_]))?,
            })
        };
        let norm = |ps: &mut ParamSet<T>, name: &str| -> Result<NormP> {
            Ok(NormP {
                scale: ps.add(format!("{name}.scale"), Tensor::ones(&[dh]))?,
                shift: ps.add(format!("{name}.shift"), Tensor::zeros(&[dh]))?,
            })
        };
        let attn = |ps: &mut ParamSet<T>, rng: &mut R, name: &str| -> Result<AttnP> {
            Ok(AttnP {
                q: affine(ps, rng, &format!("{name}.q"), dh, dh)?,
                k: affine(ps, rng, &format!("{name}.k"), dh, dh)?,
                v: affine(ps, rng, &format!("{name}.v"), dh, dh)?,
                o: affine(ps, rng, &format!("{name}.o"), dh, dh)?,
            })
        };

        let q0_limit = 1.0 / (dh as f64).sqrt();
        let queries = ps.add(
            "queries",
            Tensor::rand_uniform(rng, &[cfg.num_queries, dh], -q0_limit, q0_limit),
        )?;
        let input_proj = if cfg.input_dim == dh {
            None // identity in the published configuration
        } else {
            Some(affine(&mut ps, rng, "input_proj", cfg.input_dim, dh)?)
        };

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let name = format!("layer{l}");
            let cross = cfg.layer_has_cross_attention(l);
            layers.push(LayerP {
                self_attn: attn(&mut ps, rng, &format!("{name}.sa"))?,
                ln_sa: norm(&mut ps, &format!("{name}.ln_sa"))?,
                cross_attn: if cross {
                    Some(attn(&mut ps, rng, &format!("{name}.ca"))?)
                } else {
                    None
                },
                ln_ca: if cross {
                    Some(norm(&mut ps, &format!("{name}.ln_ca"))?)
                } else {
                    None
                },
                ffn_in: affine(&mut ps, rng, &format!("{name}.ffn_in"), dh, cfg.ffn_hidden())?,
                ffn_out: affine(&mut ps, rng, &format!("{name}.ffn_out"), cfg.ffn_hidden(), dh)?,
                ln_ffn: norm(&mut ps, &format!("{name}.ln_ffn"))?,
            });
        }

        let head = match cfg.output_latent_shape {
            Some(ls) => {
                let flat_in = cfg.num_queries * dh;
                let flat_out: usize = ls.iter().product();
                Some((
                    affine(&mut ps, rng, "head.fc1", flat_in, cfg.head_hidden)?,
                    affine(&mut ps, rng, "head.fc2", cfg.head_hidden, flat_out)?,
                ))
            }
            None => None,
        };

        Ok(QFormer {
            cfg,
            params: ps,
            queries,
            input_proj,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &QFormerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn affine(&self, tape: &mut Tape<T>, x: Var, p: AffineP) -> Result<Var> {
        let w = tape.param(&self.params, p.w);
        let b = tape.param(&self.params, p.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, p: NormP) -> Result<Var> {
        let n = tape.layer_norm(x, NORM_EPS)?;
        let scale = tape.param(&self.params, p.scale);
        let shift = tape.param(&self.params, p.shift);
        let s = tape.mul(n, scale)?;
        tape.add(s, shift)
    }

    /// Multi-head attention of `x: [B, Q, d_h]` over `kv: [B, S, d_h]`.
    /// Returns the mixed output and the `[B, heads, Q, S]` attention map.
    fn attention(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        kv: Var,
        p: AttnP,
    ) -> Result<(Var, Var)> {
        let (b, nq) = (tape.shape(x)[0], tape.shape(x)[1]);
        let ns = tape.shape(kv)[1];
        let h = self.cfg.heads;
        let dk = self.cfg.hidden_dim / h;

        let split = |tape: &mut Tape<T>, t: Var, n: usize| -> Result<Var> {
            let r = tape.reshape(t, &[b, n, h, dk])?;
            tape.permute(r, &[0, 2, 1, 3]) // [B, h, n, dk]
        };
        let q = self.affine(tape, x, p.q)?;
        let k = self.affine(tape, kv, p.k)?;
        let v = self.affine(tape, kv, p.v)?;
        let q = split(tape, q, nq)?;
        let k = split(tape, k, ns)?;
        let v = split(tape, v, ns)?;

        let kt = tape.permute(k, &[0, 1, 3, 2])?; // [B, h, dk, S]
        let scores = tape.matmul(q, kt)?; // [B, h, Q, S]
        let scaled = tape.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
        let attn = tape.softmax(scaled)?;
        let mixed = tape.matmul(attn, v)?; // [B, h, Q, dk]
        let joined = tape.permute(mixed, &[0, 2, 1, 3])?;
        let flat = tape.reshape(joined, &[b, nq, h * dk])?;
        let out = self.affine(tape, flat, p.o)?;
        Ok((out, attn))
    }

    fn run_layer(
        &self,
        tape: &mut Tape<T>,
        q: Var,
        e_v: Var,
        layer: &LayerP,
        attn_maps: &mut Vec<Var>,
    ) -> Result<Var> {
        let (sa, sa_map) = self.attention(tape, q, q, layer.self_attn)?;
        attn_maps.push(sa_map);
        let sa_res = tape.add(sa, q)?;
        let q_sa = self.layer_norm(tape, sa_res, layer.ln_sa)?;

        let q_ca = match (layer.cross_attn, layer.ln_ca) {
            (Some(ca), Some(ln)) => {
                let (cx, ca_map) = self.attention(tape, q_sa, e_v, ca)?;
                attn_maps.push(ca_map);
                let res = tape.add(cx, q_sa)?;
                self.layer_norm(tape, res, ln)?
            }
            _ => q_sa,
        };

        let hidden = self.affine(tape, q_ca, layer.ffn_in)?;
        let act = tape.gelu(hidden);
        let ffn = self.affine(tape, act, layer.ffn_out)?;
        let res = tape.add(ffn, q_ca)?;
        self.layer_norm(tape, res, layer.ln_ffn)
    }

    /// Run the trunk over a batch of visual embeddings `[B, N, D]`,
    /// returning final query tokens `[B, K, d_h]` plus every attention map
    /// (self then cross per layer) for diagnostics.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape<T>,
        e_v: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(e_v).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.input_dim {
            return Err(Error::dim(format!(
                "expected visual embeddings [B, N, {}], got {shape:?}",
                self.cfg.input_dim
            )));
        }
        let b = shape[0];
        let tokens = match self.input_proj {
            Some(p) => self.affine(tape, e_v, p)?,
            None => e_v,
        };
        // Broadcast the query bank across the batch.
        let q0 = tape.param(&self.params, self.queries);
        let q0 = tape.reshape(q0, &[1, self.cfg.num_queries, self.cfg.hidden_dim])?;
        let zeros = tape.scale(tokens, T::ZERO); // [B, N, d_h] zeros, keeps batch extent
        let zrow = tape.sum_axes(zeros, &[1], true)?; // [B, 1, d_h]
        let mut q = tape.add(q0, zrow)?; // [B, K, d_h]
        if b == 0 {
            return Err(Error::dim("empty batch".to_string()));
        }
        let mut maps = Vec::new();
        for layer in &self.layers {
            q = self.run_layer(tape, q, tokens, layer, &mut maps)?;
        }
        Ok((q, maps))
    }

    /// Trunk forward: `[B, N, D]` embeddings to `[B, K, d_h]` query tokens.
    pub fn forward(&self, tape: &mut Tape<T>, e_v: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, e_v)?.0)
    }

    /// Projection head: `[B, K, d_h]` tokens to `[B, d, H, W]` latents.
    pub fn project(&self, tape: &mut Tape<T>, q_l: Var) -> Result<Var> {
        let Some(ls) = self.cfg.output_latent_shape else {
            return Err(Error::config(
                "projection head needs output_latent_shape".to_string(),
            ));
        };
        let (fc1, fc2) = self.head.expect("head params exist when shape is set");
        let shape = tape.shape(q_l).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.num_queries || shape[2] != self.cfg.hidden_dim {
            return Err(Error::dim(format!(
                "expected query tokens [B, {}, {}], got {shape:?}",
                self.cfg.num_queries, self.cfg.hidden_dim
            )));
        }
        let b = shape[0];
        let flat = tape.reshape(q_l, &[b, self.cfg.num_queries * self.cfg.hidden_dim])?;
        let h = self.affine(tape, flat, fc1)?;
        let a = tape.gelu(h);
        let out = self.affine(tape, a, fc2)?;
        tape.reshape(out, &[b, ls[0], ls[1], ls[2]])
    }

    /// Full mapper: visual embeddings `[B, N, D]` to latents `[B, d, H, W]`.
    pub fn map_embeddings(&self, tape: &mut Tape<T>, e_v: Var) -> Result<Var> {
        let q = self.forward(tape, e_v)?;
        self.project(tape, q)
    }
}
