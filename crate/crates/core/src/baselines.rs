//! Comparison models: a data-to-label regressor, a multi-task variant with
//! one head per scenario, and a decoder-only in-context-learning
//! transformer over interleaved (CSI, location) tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionMask, Tape, Var};
use crate::channel::{angle_delay_transform, CsiMatrix, Location};
use crate::error::{Error, Result};
use crate::mateformer::{AnalogyBatch, MateformerConfig};
use crate::nn::{self, matrix};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tensor};

/// How a data-to-label model sees the CSI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Interleaved real/imaginary parts.
    Raw,
    /// Magnitudes of the unitary 2D DFT.
    AngleDelay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct D2lConfig {
    pub hidden: Vec<usize>,
    pub input: InputMode,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
}

impl D2lConfig {
    pub fn desk(input: InputMode, num_antennas: usize, num_subcarriers: usize) -> Self {
        D2lConfig { hidden: vec![256, 256, 128], input, num_antennas, num_subcarriers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::pre("d2l needs at least one nonzero hidden layer"));
        }
        if self.num_antennas == 0 || self.num_subcarriers == 0 {
            return Err(Error::pre("d2l radio dimensions must be positive"));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        let cells = self.num_antennas * self.num_subcarriers;
        match self.input {
            InputMode::Raw => 2 * cells,
            InputMode::AngleDelay => cells,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.input {
            InputMode::Raw => "d2l-raw",
            InputMode::AngleDelay => "d2l-ad",
        }
    }
}

/// Input vector for one CSI, divided by `csi_scale`.
pub fn d2l_features(input: InputMode, csi: &CsiMatrix, csi_scale: f64) -> Vec<f32> {
    let inv = (1.0 / csi_scale) as f32;
    match input {
        InputMode::Raw => csi.interleaved().into_iter().map(|v| v * inv).collect(),
        InputMode::AngleDelay => angle_delay_transform(csi).into_iter().map(|v| v * inv).collect(),
    }
}

fn add_mlp(ps: &mut ParamSet<f32>, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<()> {
    let mut fan_in = input;
    for (i, &w) in hidden.iter().enumerate() {
        nn::add_linear(ps, &format!("mlp{i}"), fan_in, w, rng)?;
        fan_in = w;
    }
    Ok(())
}

fn mlp<T: Real>(tape: &mut Tape<T>, b: &Bound<'_, T>, layers: usize, mut x: Var) -> Result<Var> {
    for i in 0..layers {
        x = nn::linear(tape, b, &format!("mlp{i}"), x)?;
        x = tape.relu(x);
    }
    Ok(x)
}

fn feature_matrix<T: Real>(tape: &mut Tape<T>, len: usize, features: &[Vec<f32>]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::pre("empty feature batch"));
    }
    if let Some(bad) = features.iter().find(|f| f.len() != len) {
        return Err(Error::pre(format!("feature length {} but model expects {len}", bad.len())));
    }
    let m = matrix(features.len(), len, features.iter().flatten().copied())?;
    Ok(tape.constant(m))
}

pub fn init_d2l(cfg: &D2lConfig, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    add_mlp(&mut ps, cfg.input_len(), &cfg.hidden, rng)?;
    nn::add_linear(&mut ps, "out", *cfg.hidden.last().expect("validated"), 2, rng)?;
    Ok(ps)
}

/// `rows × 2` normalized locations for a batch of feature vectors.
pub fn d2l_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound<'_, T>,
    cfg: &D2lConfig,
    features: &[Vec<f32>],
) -> Result<Var> {
    let x = feature_matrix(tape, cfg.input_len(), features)?;
    let h = mlp(tape, b, cfg.hidden.len(), x)?;
    nn::linear(tape, b, "out", h)
}

/// Affine map between normalized model outputs and meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationNorm {
    pub center: Location,
    pub spread: f64,
}

impl LocationNorm {
    /// Mean location and RMS distance from it.
    pub fn fit(locations: &[Location]) -> Result<Self> {
        let center = crate::mateformer::compute_x_init(locations)?;
        let ms = locations.iter().map(|l| l.sub(center).norm().powi(2)).sum::<f64>() / locations.len() as f64;
        let spread = if ms > 0.0 { ms.sqrt() } else { 1.0 };
        Ok(LocationNorm { center, spread })
    }

    pub fn encode(&self, l: Location) -> [f32; 2] {
        [((l.x - self.center.x) / self.spread) as f32, ((l.y - self.center.y) / self.spread) as f32]
    }

    pub fn decode(&self, x: f64, y: f64) -> Location {
        Location::new(self.center.x + x * self.spread, self.center.y + y * self.spread)
    }
}

fn decode_rows<T: Real>(out: &Tensor<T>, norm: &LocationNorm) -> Vec<Location> {
    out.data().chunks(2).map(|r| norm.decode(r[0].as_f64(), r[1].as_f64())).collect()
}

pub fn d2l_predict<T: Real>(params: &ParamSet<T>, cfg: &D2lConfig, norm: &LocationNorm, features: &[Vec<f32>]) -> Result<Vec<Location>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = d2l_forward_on_tape(&mut tape, &b, cfg, features)?;
    Ok(decode_rows(tape.value(out), norm))
}

/// Shared MLP backbone with one linear head per scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskConfig {
    pub backbone: D2lConfig,
    pub scenarios: Vec<u32>,
}

impl MultitaskConfig {
    pub fn head_name(scenario: u32) -> String {
        format!("head{scenario}")
    }

    /// Parameter names of the shared backbone.
    pub fn backbone_names(&self) -> Vec<String> {
        (0..self.backbone.hidden.len())
            .flat_map(|i| [format!("mlp{i}.w"), format!("mlp{i}.b")])
            .collect()
    }
}

pub fn init_multitask(cfg: &MultitaskConfig, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
    cfg.backbone.validate()?;
    let mut ps = ParamSet::new();
    add_mlp(&mut ps, cfg.backbone.input_len(), &cfg.backbone.hidden, rng)?;
    let last = *cfg.backbone.hidden.last().expect("validated");
    for &s in &cfg.scenarios {
        nn::add_linear(&mut ps, &MultitaskConfig::head_name(s), last, 2, rng)?;
    }
    Ok(ps)
}

/// Adds a freshly initialized head for `scenario`.
pub fn add_multitask_head(
    ps: &mut ParamSet<f32>,
    cfg: &mut MultitaskConfig,
    scenario: u32,
    rng: &mut impl Rng,
) -> Result<()> {
    if cfg.scenarios.contains(&scenario) {
        return Err(Error::pre(format!("scenario {scenario} already has a head")));
    }
    let last = *cfg.backbone.hidden.last().expect("validated");
    nn::add_linear(ps, &MultitaskConfig::head_name(scenario), last, 2, rng)?;
    cfg.scenarios.push(scenario);
    Ok(())
}

pub fn multitask_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound<'_, T>,
    cfg: &MultitaskConfig,
    scenario: u32,
    features: &[Vec<f32>],
) -> Result<Var> {
    if !cfg.scenarios.contains(&scenario) {
        return Err(Error::UnknownScenario(scenario));
    }
    let x = feature_matrix(tape, cfg.backbone.input_len(), features)?;
    let h = mlp(tape, b, cfg.backbone.hidden.len(), x)?;
    nn::linear(tape, b, &MultitaskConfig::head_name(scenario), h)
}

pub fn multitask_predict<T: Real>(
    params: &ParamSet<T>,
    cfg: &MultitaskConfig,
    norm: &LocationNorm,
    scenario: u32,
    features: &[Vec<f32>],
) -> Result<Vec<Location>> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = multitask_forward_on_tape(&mut tape, &b, cfg, scenario, features)?;
    Ok(decode_rows(tape.value(out), norm))
}

/// Decoder-only transformer over `[H₁, x₁, …, H_p, x_p, H_query]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclConfig {
    pub depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Largest context size `n`; sequences hold at most `2n + 1` tokens.
    pub max_pairs: usize,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    pub location_scale: f64,
}

impl IclConfig {
    /// Same depth, width and heads as `m`, doubled feed-forward width.
    pub fn matching(m: &MateformerConfig, max_pairs: usize) -> Self {
        IclConfig {
            depth: m.depth,
            d_model: m.d_model,
            d_ff: 2 * m.d_ff,
            heads: m.heads,
            max_pairs,
            num_antennas: m.num_antennas,
            num_subcarriers: m.num_subcarriers,
            location_scale: m.location_scale,
        }
    }

    pub fn max_len(&self) -> usize {
        2 * self.max_pairs + 1
    }

    pub fn csi_len(&self) -> usize {
        2 * self.num_antennas * self.num_subcarriers
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.max_pairs < 1 {
            return Err(Error::pre("ICL depth and max_pairs must be ≥ 1"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::pre(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if !(self.location_scale > 0.0) {
            return Err(Error::pre("location scale must be positive"));
        }
        Ok(())
    }
}

pub fn init_icl(cfg: &IclConfig, rng: &mut impl Rng) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut ps = ParamSet::new();
    nn::add_linear(&mut ps, "in_h", cfg.csi_len(), d, rng)?;
    nn::add_linear(&mut ps, "in_x", 2, d, rng)?;
    let pos = (0..cfg.max_len() * d).map(|_| rng.random_range(-0.02f32..0.02)).collect();
    ps.insert("pos_emb", Tensor::new(vec![cfg.max_len(), d], pos)?)?;
    for k in 0..cfg.depth {
        let p = format!("l{k}");
        nn::add_layer_norm(&mut ps, &format!("{p}.ln1"), d)?;
        nn::add_attention(&mut ps, &format!("{p}.attn"), d, rng)?;
        nn::add_layer_norm(&mut ps, &format!("{p}.ln2"), d)?;
        nn::add_ffn(&mut ps, &format!("{p}.ffn"), d, cfg.d_ff, rng)?;
    }
    nn::add_layer_norm(&mut ps, "out.ln", d)?;
    nn::add_linear(&mut ps, "out", d, 2, rng)?;
    Ok(ps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Csi(usize),
    Location(usize),
    Query,
}

/// Token order for `p` context pairs: `H, x, …, H, x, H_query`.
pub fn icl_build_sequence(p: usize, max_pairs: usize) -> Result<Vec<Token>> {
    if p == 0 {
        return Err(Error::FullyMasked { row: 0 });
    }
    if p > max_pairs {
        return Err(Error::pre(format!("{p} context pairs exceed the maximum {max_pairs}")));
    }
    let mut seq: Vec<Token> = (0..p).flat_map(|j| [Token::Csi(j), Token::Location(j)]).collect();
    seq.push(Token::Query);
    Ok(seq)
}

/// Tape nodes of an ICL forward pass.
pub struct IclForward {
    /// `(groups·len) × 2` outputs at every position.
    pub all: Var,
    /// `groups × 2` outputs at the query position.
    pub last: Var,
}

/// Each batch contributes one sequence per query; all share `p`.
pub fn icl_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound<'_, T>,
    cfg: &IclConfig,
    batches: &[AnalogyBatch],
) -> Result<IclForward> {
    cfg.validate()?;
    let first = batches.first().ok_or_else(|| Error::pre("forward on zero batches"))?;
    let p = first.p();
    let seq = icl_build_sequence(p, cfg.max_pairs)?;
    let len = seq.len();
    let scale = cfg.location_scale;

    // One sequence per (batch, query).
    let mut csi_rows: Vec<&[f32]> = Vec::new();
    let mut loc_rows: Vec<f32> = Vec::new();
    let mut groups = 0;
    for bt in batches {
        if bt.p() != p {
            return Err(Error::pre(format!("mixed context sizes {p} and {}", bt.p())));
        }
        for qc in &bt.query_csi {
            csi_rows.extend(bt.embedded_csi.iter().map(Vec::as_slice));
            csi_rows.push(qc);
            for l in &bt.embedded_locations {
                loc_rows.push(((l.x - bt.x_init.x) / scale) as f32);
                loc_rows.push(((l.y - bt.x_init.y) / scale) as f32);
            }
            groups += 1;
        }
    }
    let cl = cfg.csi_len();
    if let Some(bad) = csi_rows.iter().find(|r| r.len() != cl) {
        return Err(Error::pre(format!("CSI feature length {} but config expects {cl}", bad.len())));
    }
    let csi = tape.constant(matrix(csi_rows.len(), cl, csi_rows.iter().flat_map(|r| r.iter().copied()))?);
    let loc = tape.constant(matrix(groups * p, 2, loc_rows)?);
    let h = nn::linear(tape, b, "in_h", csi)?;
    let x = nn::linear(tape, b, "in_x", loc)?;
    let tokens = tape.concat_rows(&[h, x])?;

    let x_base = groups * (p + 1);
    let order: Vec<usize> = (0..groups)
        .flat_map(|g| {
            seq.iter().map(move |t| match *t {
                Token::Csi(j) => g * (p + 1) + j,
                Token::Query => g * (p + 1) + p,
                Token::Location(j) => x_base + g * p + j,
            })
        })
        .collect();
    let mut s = tape.gather_rows(tokens, &order)?;
    // Right-aligned so the query always occupies the last embedding.
    let offset = cfg.max_len() - len;
    let slots: Vec<usize> = (0..groups).flat_map(|_| (0..len).map(|i| offset + i)).collect();
    let pos = tape.gather_rows(b.get("pos_emb")?, &slots)?;
    s = tape.add(s, pos)?;

    let mask = AttentionMask::causal(len);
    for k in 0..cfg.depth {
        let pre = format!("l{k}");
        let n = nn::layer_norm(tape, b, &format!("{pre}.ln1"), s)?;
        let (a, _) = nn::attention(tape, b, &format!("{pre}.attn"), n, n, groups, cfg.heads, &mask)?;
        s = tape.add(s, a)?;
        s = nn::ffn_residual(tape, b, &pre, s)?;
    }
    let n = nn::layer_norm(tape, b, "out.ln", s)?;
    let all = nn::linear(tape, b, "out", n)?;
    let last_rows: Vec<usize> = (0..groups).map(|g| g * len + len - 1).collect();
    let last = tape.gather_rows(all, &last_rows)?;
    Ok(IclForward { all, last })
}

/// Predicted locations, one list per batch with one entry per query.
pub fn icl_predict<T: Real>(params: &ParamSet<T>, cfg: &IclConfig, batches: &[AnalogyBatch]) -> Result<Vec<Vec<Location>>> {
    let mut out = Vec::with_capacity(batches.len());
    let mut start = 0;
    while start < batches.len() {
        let p = batches[start].p();
        let mut end = start + 1;
        while end < batches.len() && batches[end].p() == p {
            end += 1;
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let f = icl_forward_on_tape(&mut tape, &b, cfg, &batches[start..end])?;
        let v = tape.value(f.last).data();
        let mut row = 0;
        for bt in &batches[start..end] {
            out.push(
                (0..bt.q())
                    .map(|_| {
                        let l = Location::new(
                            bt.x_init.x + v[2 * row].as_f64() * cfg.location_scale,
                            bt.x_init.y + v[2 * row + 1].as_f64() * cfg.location_scale,
                        );
                        row += 1;
                        l
                    })
                    .collect(),
            );
        }
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn d2l_shapes_and_zero_weights() {
        let cfg = D2lConfig { hidden: vec![8, 4], input: InputMode::Raw, num_antennas: 2, num_subcarriers: 2 };
        let mut ps = init_d2l(&cfg, &mut rng()).unwrap();
        let norm = LocationNorm { center: Location::new(0.0, 0.0), spread: 1.0 };
        let f = vec![vec![0.5f32; 8]; 3];
        assert_eq!(d2l_predict(&ps, &cfg, &norm, &f).unwrap().len(), 3);
        for t in ps.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for l in d2l_predict(&ps, &cfg, &norm, &f).unwrap() {
            assert_eq!(l, Location::new(0.0, 0.0));
        }
        assert!(d2l_predict(&ps, &cfg, &norm, &[vec![0.0; 7]]).is_err());
    }

    #[test]
    fn angle_delay_features_have_half_length() {
        let cfg = D2lConfig { hidden: vec![4], input: InputMode::AngleDelay, num_antennas: 2, num_subcarriers: 4 };
        let csi = CsiMatrix::new(2, 4, vec![Complex::new(1.0, 0.0); 8]).unwrap();
        let f = d2l_features(cfg.input, &csi, 2.0);
        assert_eq!(f.len(), cfg.input_len());
        // constant input: one bin of √8, halved by the scale
        assert!((f[0] - 8f32.sqrt() / 2.0).abs() < 1e-6);
    }

    #[test]
    fn location_norm_round_trip() {
        let pts = [Location::new(0.0, 0.0), Location::new(2.0, 0.0)];
        let n = LocationNorm::fit(&pts).unwrap();
        assert_eq!(n.center, Location::new(1.0, 0.0));
        assert!((n.spread - 1.0).abs() < 1e-12);
        let e = n.encode(Location::new(3.0, -1.0));
        assert_eq!(n.decode(e[0] as f64, e[1] as f64), Location::new(3.0, -1.0));
    }

    #[test]
    fn multitask_heads_are_separate() {
        let cfg = MultitaskConfig {
            backbone: D2lConfig { hidden: vec![6], input: InputMode::Raw, num_antennas: 1, num_subcarriers: 2 },
            scenarios: vec![1, 2],
        };
        let mut ps = init_multitask(&cfg, &mut rng()).unwrap();
        let norm = LocationNorm { center: Location::new(0.0, 0.0), spread: 1.0 };
        let f = vec![vec![0.3f32, -0.2, 0.9, 0.1]];
        let a = multitask_predict(&ps, &cfg, &norm, 1, &f).unwrap();
        let b = multitask_predict(&ps, &cfg, &norm, 2, &f).unwrap();
        // swap the two heads: outputs swap
        let h1: Vec<Tensor<f32>> = ["head1.w", "head1.b"].iter().map(|n| ps.get(n).unwrap().clone()).collect();
        let h2: Vec<Tensor<f32>> = ["head2.w", "head2.b"].iter().map(|n| ps.get(n).unwrap().clone()).collect();
        for (n, t) in ["head1.w", "head1.b"].iter().zip(&h2) {
            *ps.get_mut(n).unwrap() = t.clone();
        }
        for (n, t) in ["head2.w", "head2.b"].iter().zip(&h1) {
            *ps.get_mut(n).unwrap() = t.clone();
        }
        assert_eq!(multitask_predict(&ps, &cfg, &norm, 1, &f).unwrap(), b);
        assert_eq!(multitask_predict(&ps, &cfg, &norm, 2, &f).unwrap(), a);
        assert!(matches!(multitask_predict(&ps, &cfg, &norm, 9, &f), Err(Error::UnknownScenario(9))));
    }

    #[test]
    fn icl_sequence_layout() {
        assert_eq!(icl_build_sequence(1, 4).unwrap(), vec![Token::Csi(0), Token::Location(0), Token::Query]);
        let s = icl_build_sequence(3, 4).unwrap();
        assert_eq!(s.len(), 7);
        let kinds: String = s
            .iter()
            .map(|t| match t {
                Token::Csi(_) | Token::Query => 'H',
                Token::Location(_) => 'x',
            })
            .collect();
        assert_eq!(kinds, "HxHxHxH");
        assert!(icl_build_sequence(5, 4).is_err());
    }

    fn icl_cfg() -> IclConfig {
        IclConfig {
            depth: 2,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            max_pairs: 4,
            num_antennas: 1,
            num_subcarriers: 2,
            location_scale: 10.0,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, p: usize) -> AnalogyBatch {
        let row = |r: &mut ChaCha8Rng| (0..4).map(|_| r.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        AnalogyBatch::new(
            (0..p).map(|_| row(rng)).collect(),
            (0..p).map(|_| Location::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0))).collect(),
            vec![row(rng)],
        )
        .unwrap()
    }

    #[test]
    fn icl_is_causal() {
        let cfg = icl_cfg();
        let mut r = rng();
        let ps = init_icl(&cfg, &mut r).unwrap();
        let b = batch(&mut r, 3);
        let run = |b: &AnalogyBatch| {
            let mut tape = Tape::<f64>::new();
            let ps = ps.cast::<f64>();
            let bound = ps.bind(&mut tape);
            let f = icl_forward_on_tape(&mut tape, &bound, &cfg, std::slice::from_ref(b)).unwrap();
            tape.value(f.all).data().to_vec()
        };
        let base = run(&b);
        // perturb the last context location (position 5): positions 0..=4 unchanged
        let mut b2 = b.clone();
        b2.embedded_locations[2] = Location::new(9.0, -9.0);
        b2.x_init = b.x_init;
        let pert = run(&b2);
        assert_eq!(base[..10], pert[..10]);
        assert_ne!(base[10..], pert[10..]);
        assert_eq!(icl_predict(&ps, &cfg, &[b]).unwrap()[0].len(), 1);
    }
}
