//! Twin-transformer analogical localizer.
//!
//! `Transformer_H` runs masked self-attention over the CSI token sequence.
//! `Transformer_Hx` takes its queries and keys from that CSI sequence and
//! its values from the location sequence, so every location update is a
//! mixture of known locations weighted purely by CSI-to-CSI relativity.
//! Queries never see absolute CSI features on the location side.
//!
//! Layer `k` of `Transformer_Hx` consumes `Seq^k_H`, the output of layer
//! `k` of `Transformer_H` (layer 0 being the input projection), so the CSI
//! stack carries `depth − 1` layers: its last output would have no
//! consumer.
//!
//! Token layout per group: `p` embedded pairs first, then `q` queries.
//! Every attention row is restricted to the embedded keys, so the layout is
//! unobservable: predictions are invariant to permutations of the embedded
//! pairs and independent of the other queries. There are no positional
//! encodings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionMask, Tape, Var};
use crate::channel::Location;
use crate::error::{Error, Result};
use crate::nn::{self, matrix};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tensor};

fn default_location_scale() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MateformerConfig {
    pub depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    /// Meters per normalized location unit.
    #[serde(default = "default_location_scale")]
    pub location_scale: f64,
}

impl MateformerConfig {
    /// Depth 8, width 256, feed-forward 256, 4 heads.
    pub fn full_scale(num_antennas: usize, num_subcarriers: usize) -> Self {
        MateformerConfig {
            depth: 8,
            d_model: 256,
            d_ff: 256,
            heads: 4,
            num_antennas,
            num_subcarriers,
            location_scale: default_location_scale(),
        }
    }

    /// Depth 4, width 64, feed-forward 64, 4 heads.
    pub fn desk(num_antennas: usize, num_subcarriers: usize) -> Self {
        MateformerConfig { depth: 4, d_model: 64, d_ff: 64, ..Self::full_scale(num_antennas, num_subcarriers) }
    }

    pub fn csi_len(&self) -> usize {
        2 * self.num_antennas * self.num_subcarriers
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::pre("mateformer depth must be ≥ 1"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::pre(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.num_antennas == 0 || self.num_subcarriers == 0 {
            return Err(Error::pre("mateformer widths and radio dimensions must be positive"));
        }
        if !(self.location_scale > 0.0) {
            return Err(Error::pre("location scale must be positive"));
        }
        Ok(())
    }

    /// Scalar parameter count implied by the layer inventory.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let ln = 2 * d;
        let inputs = nn::linear_count(self.csi_len(), d) + nn::linear_count(2, d) + 2 * d;
        let h_layer = 2 * ln + nn::attention_count(d) + nn::ffn_count(d, f);
        let hx_layer = 3 * ln + nn::attention_count(d) + nn::ffn_count(d, f);
        let output = ln + nn::linear_count(d, 2);
        inputs + (self.depth - 1) * h_layer + self.depth * hx_layer + output
    }
}

/// Linear weights Xavier-uniform, biases and type embeddings zero,
/// layer-norm gains one.
pub fn init_params(cfg: &MateformerConfig, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut ps = ParamSet::new();
    nn::add_linear(&mut ps, "in_h", cfg.csi_len(), d, rng)?;
    nn::add_linear(&mut ps, "in_x", 2, d, rng)?;
    ps.insert("type_emb", Tensor::zeros(vec![2, d]))?;
    for k in 0..cfg.depth - 1 {
        let p = format!("h{k}");
        nn::add_layer_norm(&mut ps, &format!("{p}.ln1"), d)?;
        nn::add_attention(&mut ps, &format!("{p}.attn"), d, rng)?;
        nn::add_layer_norm(&mut ps, &format!("{p}.ln2"), d)?;
        nn::add_ffn(&mut ps, &format!("{p}.ffn"), d, f, rng)?;
    }
    for k in 0..cfg.depth {
        let p = format!("hx{k}");
        nn::add_layer_norm(&mut ps, &format!("{p}.ln_h"), d)?;
        nn::add_layer_norm(&mut ps, &format!("{p}.ln_x"), d)?;
        nn::add_attention(&mut ps, &format!("{p}.attn"), d, rng)?;
        nn::add_layer_norm(&mut ps, &format!("{p}.ln2"), d)?;
        nn::add_ffn(&mut ps, &format!("{p}.ffn"), d, f, rng)?;
    }
    nn::add_layer_norm(&mut ps, "out.ln", d)?;
    nn::add_linear(&mut ps, "out", d, 2, rng)?;
    Ok(ps)
}

/// Arithmetic mean of the embedded locations.
pub fn compute_x_init(locations: &[Location]) -> Result<Location> {
    if locations.is_empty() {
        return Err(Error::pre("x_init needs at least one embedded location"));
    }
    let n = locations.len() as f64;
    let (sx, sy) = locations.iter().fold((0.0, 0.0), |(a, b), l| (a + l.x, b + l.y));
    Ok(Location::new(sx / n, sy / n))
}

/// Key mask over `p + q` tokens: every row sees the `p` embedded keys only.
pub fn build_mask(p: usize, q: usize) -> Result<AttentionMask> {
    AttentionMask::key_prefix(p + q, p)
}

/// One analogy problem: `p` embedded (CSI, location) pairs in matching
/// order plus `q` query CSIs. CSI rows are interleaved real/imag features
/// already divided by the reference pool's RMS magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogyBatch {
    pub embedded_csi: Vec<Vec<f32>>,
    pub embedded_locations: Vec<Location>,
    pub query_csi: Vec<Vec<f32>>,
    pub x_init: Location,
}

impl AnalogyBatch {
    pub fn new(embedded_csi: Vec<Vec<f32>>, embedded_locations: Vec<Location>, query_csi: Vec<Vec<f32>>) -> Result<Self> {
        if embedded_csi.len() != embedded_locations.len() {
            return Err(Error::pre(format!(
                "{} embedded CSIs for {} embedded locations",
                embedded_csi.len(),
                embedded_locations.len()
            )));
        }
        if query_csi.is_empty() {
            return Err(Error::pre("analogy batch needs at least one query"));
        }
        let x_init = compute_x_init(&embedded_locations)?;
        Ok(AnalogyBatch { embedded_csi, embedded_locations, query_csi, x_init })
    }

    pub fn p(&self) -> usize {
        self.embedded_csi.len()
    }

    pub fn q(&self) -> usize {
        self.query_csi.len()
    }

    /// Normalized regression targets `(x − x_init) / scale` for the queries.
    pub fn targets(&self, truth: &[Location], scale: f64) -> Vec<f32> {
        truth
            .iter()
            .flat_map(|t| [((t.x - self.x_init.x) / scale) as f32, ((t.y - self.x_init.y) / scale) as f32])
            .collect()
    }
}

/// Tape nodes produced by one forward pass.
pub struct MateformerForward {
    /// `(groups·q) × 2` normalized offsets from each group's `x_init`.
    pub offsets: Var,
    /// Attention cores of `Transformer_Hx`, one per layer.
    pub hx_attention: Vec<Var>,
    /// Attention cores of `Transformer_H`, one per layer.
    pub h_attention: Vec<Var>,
}

fn check_uniform(cfg: &MateformerConfig, batches: &[AnalogyBatch]) -> Result<(usize, usize)> {
    let first = batches.first().ok_or_else(|| Error::pre("forward on zero batches"))?;
    let (p, q) = (first.p(), first.q());
    if p == 0 {
        return Err(Error::FullyMasked { row: 0 });
    }
    for b in batches {
        if b.p() != p || b.q() != q {
            return Err(Error::pre(format!("mixed batch shapes ({p},{q}) and ({},{})", b.p(), b.q())));
        }
        if b.embedded_locations.len() != p {
            return Err(Error::pre("embedded CSI/location count mismatch"));
        }
        let len = cfg.csi_len();
        if let Some(bad) = b.embedded_csi.iter().chain(&b.query_csi).find(|c| c.len() != len) {
            return Err(Error::pre(format!("CSI feature length {} but config expects {len}", bad.len())));
        }
    }
    Ok((p, q))
}

/// Records the forward pass for groups of equal `(p, q)`.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound<'_, T>,
    cfg: &MateformerConfig,
    batches: &[AnalogyBatch],
) -> Result<MateformerForward> {
    cfg.validate()?;
    let (p, q) = check_uniform(cfg, batches)?;
    let groups = batches.len();
    let len = p + q;
    let rows = groups * len;
    let scale = cfg.location_scale;

    let csi = matrix::<T>(
        rows,
        cfg.csi_len(),
        batches.iter().flat_map(|bt| bt.embedded_csi.iter().chain(&bt.query_csi).flatten().copied()),
    )?;
    let loc = matrix::<T>(
        rows,
        2,
        batches.iter().flat_map(|bt| {
            let c = bt.x_init;
            bt.embedded_locations
                .iter()
                .flat_map(move |l| [((l.x - c.x) / scale) as f32, ((l.y - c.y) / scale) as f32])
                .chain(std::iter::repeat_n(0.0f32, 2 * q))
        }),
    )?;
    let types: Vec<usize> = (0..rows).map(|r| usize::from(r % len >= p)).collect();
    let mask = build_mask(p, q)?;

    let csi = tape.constant(csi);
    let loc = tape.constant(loc);
    let mut h = nn::linear(tape, b, "in_h", csi)?;
    let x0 = nn::linear(tape, b, "in_x", loc)?;
    let ty = tape.gather_rows(b.get("type_emb")?, &types)?;
    let mut x = tape.add(x0, ty)?;

    let mut hx_attention = Vec::with_capacity(cfg.depth);
    let mut h_attention = Vec::with_capacity(cfg.depth.saturating_sub(1));
    for k in 0..cfg.depth {
        let pre = format!("hx{k}");
        let hn = nn::layer_norm(tape, b, &format!("{pre}.ln_h"), h)?;
        let xn = nn::layer_norm(tape, b, &format!("{pre}.ln_x"), x)?;
        let (a, core) = nn::attention(tape, b, &format!("{pre}.attn"), hn, xn, groups, cfg.heads, &mask)?;
        hx_attention.push(core);
        x = tape.add(x, a)?;
        x = nn::ffn_residual(tape, b, &pre, x)?;

        if k + 1 < cfg.depth {
            let pre = format!("h{k}");
            let hn = nn::layer_norm(tape, b, &format!("{pre}.ln1"), h)?;
            let (a, core) = nn::attention(tape, b, &format!("{pre}.attn"), hn, hn, groups, cfg.heads, &mask)?;
            h_attention.push(core);
            h = tape.add(h, a)?;
            h = nn::ffn_residual(tape, b, &pre, h)?;
        }
    }

    let query_rows: Vec<usize> = (0..groups).flat_map(|g| (p..len).map(move |j| g * len + j)).collect();
    let xq = tape.gather_rows(x, &query_rows)?;
    let xq = nn::layer_norm(tape, b, "out.ln", xq)?;
    let offsets = nn::linear(tape, b, "out", xq)?;
    Ok(MateformerForward { offsets, hx_attention, h_attention })
}

/// MSE between predicted offsets and the queries' true locations.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound<'_, T>,
    cfg: &MateformerConfig,
    batches: &[AnalogyBatch],
    truth: &[Vec<Location>],
) -> Result<Var> {
    let fwd = forward_on_tape(tape, b, cfg, batches)?;
    let target: Vec<f32> = batches
        .iter()
        .zip(truth)
        .flat_map(|(bt, t)| bt.targets(t, cfg.location_scale))
        .collect();
    let rows = target.len() / 2;
    let target = tape.constant(matrix(rows, 2, target)?);
    tape.mse(fwd.offsets, target)
}

/// Predicted locations for every query of every batch. Batches may have
/// different shapes; they are evaluated in runs of equal `(p, q)`.
pub fn predict<T: Real>(params: &ParamSet<T>, cfg: &MateformerConfig, batches: &[AnalogyBatch]) -> Result<Vec<Vec<Location>>> {
    let mut out = Vec::with_capacity(batches.len());
    let mut start = 0;
    while start < batches.len() {
        let (p, q) = (batches[start].p(), batches[start].q());
        let mut end = start + 1;
        while end < batches.len() && batches[end].p() == p && batches[end].q() == q {
            end += 1;
        }
        let chunk = &batches[start..end];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fwd = forward_on_tape(&mut tape, &bound, cfg, chunk)?;
        let offs = tape.value(fwd.offsets).data();
        for (g, bt) in chunk.iter().enumerate() {
            out.push(
                (0..q)
                    .map(|j| {
                        let r = (g * q + j) * 2;
                        Location::new(
                            bt.x_init.x + offs[r].as_f64() * cfg.location_scale,
                            bt.x_init.y + offs[r + 1].as_f64() * cfg.location_scale,
                        )
                    })
                    .collect(),
            );
        }
        start = end;
    }
    Ok(out)
}
