//! Per-scenario (CSI, location) corpora, exact k-NN and coarse locations.

use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_csi, trace_paths, CsiMatrix, Location, ScenarioSpec};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"ALDS";
pub const DATASET_VERSION: u16 = 1;

/// Whether a dataset is the reference/training pool or held-out test users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Training,
    Testing,
}

/// One (CSI, location) pair. `location` is user minus base station, in
/// meters along the scene axes, rounded to storage precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub csi: CsiMatrix,
    pub location: Location,
    pub scenario: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenario: ScenarioSpec,
    pub role: Role,
    /// Users redrawn during generation because no path reached them.
    pub redraws: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(scenario: ScenarioSpec, role: Role, samples: Vec<Sample>) -> Result<Self> {
        let (nt, nc) = (scenario.num_antennas, scenario.num_subcarriers);
        if let Some(s) = samples.iter().find(|s| s.csi.antennas() != nt || s.csi.subcarriers() != nc) {
            return Err(Error::pre(format!(
                "sample CSI {}×{} in a {nt}×{nc} dataset",
                s.csi.antennas(),
                s.csi.subcarriers()
            )));
        }
        Ok(Dataset { scenario, role, redraws: 0, samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn id(&self) -> u32 {
        self.scenario.id
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.scenario.num_antennas, self.scenario.num_subcarriers)
    }

    pub fn locations(&self) -> Vec<Location> {
        self.samples.iter().map(|s| s.location).collect()
    }

    /// Root-mean-square magnitude over every CSI entry.
    pub fn csi_rms(&self) -> f64 {
        let n: usize = self.samples.iter().map(|s| s.csi.values().len()).sum();
        let e: f64 = self.samples.iter().map(|s| s.csi.energy()).sum();
        (e / n.max(1) as f64).sqrt()
    }

    /// First `count` samples, same scenario and role.
    pub fn truncated(&self, count: usize) -> Dataset {
        Dataset {
            scenario: self.scenario.clone(),
            role: self.role,
            redraws: self.redraws,
            samples: self.samples[..count.min(self.samples.len())].to_vec(),
        }
    }

    /// Mean distance from each location to its nearest other location.
    pub fn mean_nearest_spacing(&self) -> f64 {
        let index = NeighborIndex::new(self);
        let total: f64 = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let nn = knn_search(&index, s.location, 2).expect("at least two samples");
                let other = if nn[0] == i { nn[1] } else { nn[0] };
                s.location.distance(self.samples[other].location)
            })
            .sum();
        total / self.len() as f64
    }
}

/// Deterministic per-sample random stream derived from `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const MAX_REDRAWS_PER_USER: usize = 1_000;

/// Draws `count` users uniformly over the scenario's user region. Users
/// that no path reaches are redrawn; more than 50% redraws aborts.
pub fn generate_dataset(scenario: &ScenarioSpec, count: usize, role: Role, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    if count == 0 {
        return Err(Error::pre("dataset count must be ≥ 1"));
    }
    let mut samples = Vec::with_capacity(count);
    let mut redraws = 0usize;
    for i in 0..count {
        let mut rng = sample_rng(seed, i as u64);
        let mut tries = 0;
        loop {
            let user = scenario.user_region.sample(&mut rng);
            let paths = trace_paths(scenario, user)?;
            if !paths.is_empty() {
                samples.push(Sample {
                    csi: synthesize_csi(&paths, scenario),
                    location: user.sub(scenario.bs_position).to_storage(),
                    scenario: scenario.id,
                });
                break;
            }
            redraws += 1;
            tries += 1;
            if tries > MAX_REDRAWS_PER_USER {
                return Err(Error::SceneBlocked { redraws, accepted: samples.len() });
            }
        }
    }
    if redraws * 2 > count + redraws {
        return Err(Error::SceneBlocked { redraws, accepted: count });
    }
    if redraws > 0 {
        log::info!("scenario {}: {redraws} users redrawn (no path)", scenario.id);
    }
    let mut ds = Dataset::new(scenario.clone(), role, samples)?;
    ds.redraws = redraws;
    Ok(ds)
}

/// Locations mirrored from a training dataset, in dataset order.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<Location>,
}

impl NeighborIndex {
    pub fn new(ds: &Dataset) -> Self {
        NeighborIndex { points: ds.locations() }
    }

    pub fn from_points(points: Vec<Location>) -> Self {
        NeighborIndex { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Location] {
        &self.points
    }
}

fn sq_dist(a: Location, b: Location) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    dx * dx + dy * dy
}

/// Exact `k` nearest indices by Euclidean distance, ascending; equal
/// distances are ordered by lower index.
pub fn knn_search(index: &NeighborIndex, query: Location, k: usize) -> Result<Vec<usize>> {
    if k > index.len() {
        return Err(Error::pre(format!("k = {k} exceeds index size {}", index.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut keyed: Vec<(f64, usize)> = index.points.iter().enumerate().map(|(i, &p)| (sq_dist(p, query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// For every sample, `[self, n nearest others…]` (length `n + 1`).
pub fn build_neighbor_lists(train: &Dataset, n: usize) -> Result<Vec<Vec<usize>>> {
    if n >= train.len() {
        return Err(Error::pre(format!("n = {n} must be below the dataset size {}", train.len())));
    }
    let index = NeighborIndex::new(train);
    train
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let near = knn_search(&index, s.location, n + 1)?;
            let mut list = Vec::with_capacity(n + 1);
            list.push(i);
            list.extend(near.into_iter().filter(|&j| j != i).take(n));
            Ok(list)
        })
        .collect()
}

/// `x + [c, d]` with `c, d ~ U[−l, l]` independently.
pub fn coarse_location(x: Location, l: f64, rng: &mut impl Rng) -> Result<Location> {
    if !(l >= 0.0) {
        return Err(Error::pre(format!("coarse-location half-width must be ≥ 0, got {l}")));
    }
    if l == 0.0 {
        return Ok(x);
    }
    Ok(Location::new(x.x + rng.random_range(-l..=l), x.y + rng.random_range(-l..=l)))
}

/// Expected `|Δx|₂` for `Δx ~ U[−l, l]²`: `(√2 + ln(1 + √2)) · l / 3`.
pub fn expected_coarse_offset(l: f64) -> f64 {
    let r2 = std::f64::consts::SQRT_2;
    (r2 + (1.0 + r2).ln()) * l / 3.0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    scenario: ScenarioSpec,
    count: usize,
    num_antennas: usize,
    num_subcarriers: usize,
    role: Role,
    redraws: usize,
}

/// Serializes to the `ALDS` v1 layout: magic, `u16` version, `u32` header
/// length, JSON header, then per sample the location (2 × f32) and the CSI
/// as interleaved real/imag f32, antenna-major. All little-endian.
pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let (nt, nc) = d.dims();
    let header = serde_json::to_vec(&DatasetHeader {
        scenario: d.scenario.clone(),
        count: d.len(),
        num_antennas: nt,
        num_subcarriers: nc,
        role: d.role,
        redraws: d.redraws,
    })?;
    let per = 2 + 2 * nt * nc;
    let mut out = Vec::with_capacity(10 + header.len() + 4 * per * d.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for s in &d.samples {
        out.extend_from_slice(&(s.location.x as f32).to_le_bytes());
        out.extend_from_slice(&(s.location.y as f32).to_le_bytes());
        for v in s.csi.interleaved() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let fail = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 10 {
        return Err(fail("file shorter than the fixed preamble"));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(fail("bad magic, expected ALDS"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| fail("truncated header"))?;
    let header: DatasetHeader =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("header: {e}")))?;
    let (nt, nc) = (header.num_antennas, header.num_subcarriers);
    if nt != header.scenario.num_antennas || nc != header.scenario.num_subcarriers {
        return Err(fail("header dimensions disagree with the scenario"));
    }
    let per = 2 + 2 * nt * nc;
    let payload = &bytes[10 + hlen..];
    if payload.len() != 4 * per * header.count {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {} for {} samples",
            payload.len(),
            4 * per * header.count,
            header.count
        )));
    }
    let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let samples = floats
        .chunks_exact(per)
        .map(|c| {
            Ok(Sample {
                location: Location::new(c[0] as f64, c[1] as f64),
                csi: CsiMatrix::from_interleaved(nt, nc, &c[2..])?,
                scenario: header.scenario.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(header.scenario, header.role, samples)?;
    ds.redraws = header.redraws;
    Ok(ds)
}

pub fn save_dataset(d: &Dataset, path: &FsPath) -> Result<()> {
    let bytes = encode_dataset(d)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &FsPath) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Region;

    fn open_scene() -> ScenarioSpec {
        ScenarioSpec::open(7, 2, 3, Region { min: Location::new(5.0, 5.0), max: Location::new(15.0, 15.0) })
    }

    #[test]
    fn single_sample_open_scene() {
        let d = generate_dataset(&open_scene(), 1, Role::Training, 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.redraws, 0);
        assert_eq!(d.samples()[0].scenario, 7);
        assert!(d.samples()[0].csi.energy() > 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = ScenarioSpec::procedural(1, 4, 4, 4);
        let a = generate_dataset(&s, 1000, Role::Training, 99).unwrap();
        let b = generate_dataset(&s, 1000, Role::Training, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fully_blocked_scene_aborts() {
        let mut s = open_scene();
        // box the base station in
        let c = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        for i in 0..4 {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            s.blockers.push(crate::channel::Blocker { a: Location::new(a.0, a.1), b: Location::new(b.0, b.1) });
        }
        assert!(matches!(generate_dataset(&s, 5, Role::Training, 1), Err(Error::SceneBlocked { .. })));
    }

    #[test]
    fn locations_are_uniform_over_region() {
        let s = open_scene();
        let d = generate_dataset(&s, 4000, Role::Training, 5).unwrap();
        let mut counts = [0usize; 16];
        for smp in d.samples() {
            let gx = (((smp.location.x - 5.0) / 10.0 * 4.0) as usize).min(3);
            let gy = (((smp.location.y - 5.0) / 10.0 * 4.0) as usize).min(3);
            counts[gy * 4 + gx] += 1;
        }
        let e = 4000.0 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // χ²₁₅ upper 1% point
        assert!(chi2 < 30.578, "{chi2} {counts:?}");
    }

    #[test]
    fn knn_examples() {
        let idx = NeighborIndex::from_points(vec![
            Location::new(0.0, 0.0),
            Location::new(1.0, 0.0),
            Location::new(3.0, 0.0),
        ]);
        assert_eq!(knn_search(&idx, Location::new(0.9, 0.0), 2).unwrap(), vec![1, 0]);
        assert_eq!(knn_search(&idx, Location::new(3.0, 0.0), 1).unwrap(), vec![2]);
        assert!(knn_search(&idx, Location::new(0.0, 0.0), 4).is_err());
        // equidistant: lower index first
        assert_eq!(knn_search(&idx, Location::new(0.5, 0.0), 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn neighbor_lists_on_two_points() {
        let mut d = generate_dataset(&open_scene(), 2, Role::Training, 3).unwrap();
        d.samples[0].location = Location::new(0.0, 0.0);
        d.samples[1].location = Location::new(1.0, 0.0);
        let lists = build_neighbor_lists(&d, 1).unwrap();
        assert_eq!(lists, vec![vec![0, 1], vec![1, 0]]);
        assert!(build_neighbor_lists(&d, 2).is_err());
    }

    #[test]
    fn coarse_location_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Location::new(3.0, -2.0);
        assert_eq!(coarse_location(x, 0.0, &mut rng).unwrap(), x);
        for _ in 0..1000 {
            let c = coarse_location(x, 1.0, &mut rng).unwrap();
            assert!((c.x - x.x).abs() <= 1.0 && (c.y - x.y).abs() <= 1.0);
        }
        assert!(coarse_location(x, -1.0, &mut rng).is_err());
        assert!((expected_coarse_offset(1.0) - 0.7652).abs() < 1e-4);
    }

    #[test]
    fn round_trip_and_truncation() {
        let d = generate_dataset(&ScenarioSpec::procedural(2, 8, 4, 4), 10, Role::Testing, 2).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
    }
}
