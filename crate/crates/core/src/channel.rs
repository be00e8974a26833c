//! Geometric multipath channel simulator for 2-D scenes.
//!
//! A scene is a base station with a half-wavelength uniform linear array,
//! point scatterers that reflect once, and opaque segments that block any
//! ray crossing them. The frequency response over `N_t` antennas and `N_c`
//! baseband subcarriers is the coherent sum of the surviving paths.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// 2-D point or displacement in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    pub fn sub(self, o: Location) -> Location {
        Location::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Location) -> Location {
        Location::new(self.x + o.x, self.y + o.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Location) -> f64 {
        self.sub(o).norm()
    }

    /// Rounds both coordinates to the nearest `f32`, the storage precision.
    pub fn to_storage(self) -> Location {
        Location::new(self.x as f32 as f64, self.y as f32 as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    pub position: Location,
    /// Reflection coefficient in (0, 1].
    pub reflection: f64,
}

/// Opaque segment between two endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blocker {
    pub a: Location,
    pub b: Location,
}

/// Axis-aligned rectangle in scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: Location,
    pub max: Location,
}

impl Region {
    pub fn contains(&self, p: Location) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Location {
        Location::new(
            rng.random_range(self.min.x..=self.max.x),
            rng.random_range(self.min.y..=self.max.y),
        )
    }
}

/// Geometry and radio parameters of one cell. Positions are meters in the
/// scene frame; angles are radians; frequencies are Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: u32,
    pub bs_position: Location,
    /// Orientation φ of the array broadside, radians.
    pub array_orientation: f64,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    pub carrier_frequency_hz: f64,
    pub bandwidth_hz: f64,
    pub scatterers: Vec<Scatterer>,
    pub blockers: Vec<Blocker>,
    pub user_region: Region,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_antennas < 1 || self.num_subcarriers < 1 {
            return Err(Error::pre("scenario needs at least one antenna and one subcarrier"));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::pre("scenario bandwidth must be positive"));
        }
        let r = &self.user_region;
        if !(r.max.x > r.min.x && r.max.y > r.min.y) {
            return Err(Error::pre("user region must have positive area"));
        }
        if let Some(s) = self.scatterers.iter().find(|s| !(s.reflection > 0.0 && s.reflection <= 1.0)) {
            return Err(Error::pre(format!("reflection coefficient {} outside (0, 1]", s.reflection)));
        }
        Ok(())
    }

    /// An open scene: one base station at the origin, nothing else.
    pub fn open(id: u32, num_antennas: usize, num_subcarriers: usize, user_region: Region) -> Self {
        ScenarioSpec {
            id,
            bs_position: Location::default(),
            array_orientation: 0.0,
            num_antennas,
            num_subcarriers,
            carrier_frequency_hz: 3.5e9,
            bandwidth_hz: 40e6,
            scatterers: Vec::new(),
            blockers: Vec::new(),
            user_region,
            seed: 0,
        }
    }

    /// Procedurally generated scene with a 40 m × 40 m user region, six
    /// scatterers and two blockers. The array broadside points roughly at
    /// the region so that arrival angles stay on one side of the array.
    pub fn procedural(id: u32, seed: u64, num_antennas: usize, num_subcarriers: usize) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bs = Location::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let heading = rng.random_range(-PI..PI);
        let dist = rng.random_range(25.0..40.0);
        let center = Location::new(bs.x + dist * heading.cos(), bs.y + dist * heading.sin());
        let half = 20.0;
        let user_region = Region {
            min: Location::new(center.x - half, center.y - half),
            max: Location::new(center.x + half, center.y + half),
        };
        let array_orientation = heading + rng.random_range(-0.35..0.35);
        let scatterers = (0..6)
            .map(|_| Scatterer {
                position: Location::new(
                    center.x + rng.random_range(-35.0..35.0),
                    center.y + rng.random_range(-35.0..35.0),
                ),
                reflection: rng.random_range(0.3..0.9),
            })
            .collect();
        let blockers = (0..2)
            .map(|_| {
                let mid = Location::new(
                    center.x + rng.random_range(-15.0..15.0),
                    center.y + rng.random_range(-15.0..15.0),
                );
                let ang = rng.random_range(0.0..PI);
                let len = rng.random_range(3.0..6.0);
                let d = Location::new(0.5 * len * ang.cos(), 0.5 * len * ang.sin());
                Blocker { a: mid.sub(d), b: mid.add(d) }
            })
            .collect();
        ScenarioSpec {
            id,
            bs_position: bs,
            array_orientation,
            num_antennas,
            num_subcarriers,
            carrier_frequency_hz: 3.5e9,
            bandwidth_hz: 40e6,
            scatterers,
            blockers,
            user_region,
            seed,
        }
    }

    /// The five-scenario desk family (ids 1..=5), `N_t = N_c = 8`.
    pub fn desk_family() -> Vec<ScenarioSpec> {
        (1..=5).map(|id| Self::procedural(id, 1000 + id as u64, 8, 8)).collect()
    }
}

/// One propagation path reaching the array.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    /// Total length in meters.
    pub length: f64,
    /// Number of bounces; 0 is line of sight.
    pub bounces: u32,
    /// `sin(θ − φ)` of the final segment relative to the array broadside.
    pub arrival_sine: f64,
    pub gain: Complex<f64>,
}

impl Path {
    pub fn delay(&self) -> f64 {
        self.length / SPEED_OF_LIGHT
    }
}

fn cross(o: Location, a: Location, b: Location) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Location, a: Location, b: Location) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test.
pub fn segments_intersect(p1: Location, p2: Location, q1: Location, q2: Location) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p1, q1, q2))
        || (d2 == 0.0 && on_segment(p2, q1, q2))
        || (d3 == 0.0 && on_segment(q1, p1, p2))
        || (d4 == 0.0 && on_segment(q2, p1, p2))
}

fn visible(scene: &ScenarioSpec, a: Location, b: Location) -> bool {
    !scene.blockers.iter().any(|w| segments_intersect(a, b, w.a, w.b))
}

fn arrival_sine(scene: &ScenarioSpec, from: Location) -> f64 {
    let v = from.sub(scene.bs_position);
    let theta = v.y.atan2(v.x);
    (theta - scene.array_orientation).sin().clamp(-1.0, 1.0)
}

/// Traces the line-of-sight path and every unobstructed single-bounce path
/// from `user` (scene coordinates) to the array. An empty result means the
/// user is in deep shadow.
pub fn trace_paths(scene: &ScenarioSpec, user: Location) -> Result<Vec<Path>> {
    if !scene.user_region.contains(user) {
        return Err(Error::pre(format!("user ({}, {}) outside the user region", user.x, user.y)));
    }
    let bs = scene.bs_position;
    let mut paths = Vec::new();
    if visible(scene, bs, user) {
        let d = bs.distance(user);
        paths.push(Path {
            length: d,
            bounces: 0,
            arrival_sine: arrival_sine(scene, user),
            gain: Complex::new(1.0 / d, 0.0),
        });
    }
    for s in &scene.scatterers {
        if visible(scene, bs, s.position) && visible(scene, s.position, user) {
            let d = bs.distance(s.position) + s.position.distance(user);
            paths.push(Path {
                length: d,
                bounces: 1,
                arrival_sine: arrival_sine(scene, s.position),
                gain: Complex::new(s.reflection / d, 0.0),
            });
        }
    }
    Ok(paths)
}

/// Complex frequency response, antenna-major (`N_t` rows × `N_c` columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CsiMatrix {
    antennas: usize,
    subcarriers: usize,
    values: Vec<Complex<f32>>,
}

impl CsiMatrix {
    pub fn new(antennas: usize, subcarriers: usize, values: Vec<Complex<f32>>) -> Result<Self> {
        if values.len() != antennas * subcarriers {
            return Err(Error::pre(format!(
                "CSI {antennas}×{subcarriers} needs {} values, got {}",
                antennas * subcarriers,
                values.len()
            )));
        }
        Ok(CsiMatrix { antennas, subcarriers, values })
    }

    pub fn zeros(antennas: usize, subcarriers: usize) -> Self {
        CsiMatrix { antennas, subcarriers, values: vec![Complex::new(0.0, 0.0); antennas * subcarriers] }
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn values(&self) -> &[Complex<f32>] {
        &self.values
    }

    pub fn get(&self, m: usize, k: usize) -> Complex<f32> {
        self.values[m * self.subcarriers + k]
    }

    /// Interleaved `[re, im, re, im, …]`, antenna-major.
    pub fn interleaved(&self) -> Vec<f32> {
        self.values.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_interleaved(antennas: usize, subcarriers: usize, data: &[f32]) -> Result<Self> {
        if data.len() != 2 * antennas * subcarriers {
            return Err(Error::pre("interleaved CSI length mismatch"));
        }
        let values = data.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
        Self::new(antennas, subcarriers, values)
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr() as f64).sum()
    }
}

/// Baseband frequency of subcarrier `k`, centered on the carrier.
pub fn subcarrier_frequency(k: usize, num_subcarriers: usize, bandwidth_hz: f64) -> f64 {
    (k as f64 - (num_subcarriers as f64 - 1.0) / 2.0) * bandwidth_hz / num_subcarriers as f64
}

/// `H[m,k] = Σ_l g_l · exp(iπ·m·s_l) · exp(−i2π·f_k·τ_l)`.
pub fn synthesize_csi(paths: &[Path], scene: &ScenarioSpec) -> CsiMatrix {
    let (nt, nc) = (scene.num_antennas, scene.num_subcarriers);
    let mut acc = vec![Complex::new(0.0f64, 0.0); nt * nc];
    for p in paths {
        let tau = p.delay();
        for m in 0..nt {
            let steer = Complex::from_polar(1.0, PI * m as f64 * p.arrival_sine);
            for k in 0..nc {
                let f = subcarrier_frequency(k, nc, scene.bandwidth_hz);
                let delay = Complex::from_polar(1.0, -2.0 * PI * f * tau);
                acc[m * nc + k] += p.gain * steer * delay;
            }
        }
    }
    let values = acc.into_iter().map(|c| Complex::new(c.re as f32, c.im as f32)).collect();
    CsiMatrix { antennas: nt, subcarriers: nc, values }
}

/// Draws `count` multipliers from `N(1, σ²)`.
pub fn noise_multipliers(count: usize, sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::pre(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0; count]);
    }
    let normal = Normal::new(1.0, sigma).map_err(|e| Error::pre(e.to_string()))?;
    Ok((0..count).map(|_| normal.sample(rng)).collect())
}

/// Hadamard product with a real Gaussian matrix `D`, `D_ij ~ N(1, σ²)`.
/// One real factor scales both parts of each complex entry.
pub fn apply_csi_noise(h: &CsiMatrix, sigma: f64, rng: &mut impl Rng) -> Result<CsiMatrix> {
    let d = noise_multipliers(h.values.len(), sigma, rng)?;
    let values = h
        .values
        .iter()
        .zip(&d)
        .map(|(c, &m)| Complex::new((c.re as f64 * m) as f32, (c.im as f64 * m) as f32))
        .collect();
    Ok(CsiMatrix { antennas: h.antennas, subcarriers: h.subcarriers, values })
}

/// Magnitude of the unitary 2-D DFT of `h`, `N_t × N_c`, row-major.
pub fn angle_delay_transform(h: &CsiMatrix) -> Vec<f32> {
    let (nt, nc) = (h.antennas, h.subcarriers);
    let mut buf: Vec<Complex<f64>> = h.values.iter().map(|c| Complex::new(c.re as f64, c.im as f64)).collect();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(nc);
    for row in buf.chunks_exact_mut(nc) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(nt);
    let mut col = vec![Complex::new(0.0, 0.0); nt];
    for k in 0..nc {
        for m in 0..nt {
            col[m] = buf[m * nc + k];
        }
        col_fft.process(&mut col);
        for m in 0..nt {
            buf[m * nc + k] = col[m];
        }
    }
    let norm = 1.0 / ((nt * nc) as f64).sqrt();
    buf.iter().map(|c| (c.norm() * norm) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn region() -> Region {
        Region { min: Location::new(10.0, -10.0), max: Location::new(30.0, 10.0) }
    }

    #[test]
    fn open_scene_has_single_los_path() {
        let scene = ScenarioSpec::open(1, 4, 4, region());
        let u = Location::new(20.0, 5.0);
        let paths = trace_paths(&scene, u).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].bounces, 0);
        assert!((paths[0].length - u.norm()).abs() < 1e-12);
    }

    #[test]
    fn blocked_los_without_scatterers_is_empty() {
        let mut scene = ScenarioSpec::open(1, 4, 4, region());
        scene.blockers.push(Blocker { a: Location::new(5.0, -5.0), b: Location::new(5.0, 5.0) });
        assert!(trace_paths(&scene, Location::new(20.0, 0.0)).unwrap().is_empty());
    }

    #[test]
    fn single_bounce_geometry() {
        // BS (0,0), scatterer (0,20), user (15,20): legs 20 and 15.
        let mut scene = ScenarioSpec::open(1, 4, 4, Region {
            min: Location::new(0.0, 0.0),
            max: Location::new(30.0, 30.0),
        });
        scene.scatterers.push(Scatterer { position: Location::new(0.0, 20.0), reflection: 0.5 });
        let paths = trace_paths(&scene, Location::new(15.0, 20.0)).unwrap();
        assert_eq!(paths.len(), 2);
        let b = paths.iter().find(|p| p.bounces == 1).unwrap();
        assert!((b.length - 35.0).abs() < 1e-12);
        assert!((b.gain.re - 0.5 / 35.0).abs() < 1e-15);
        // arrival from +y with broadside along +x ⇒ sin(π/2) = 1
        assert!((b.arrival_sine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn user_outside_region_rejected() {
        let scene = ScenarioSpec::open(1, 4, 4, region());
        assert!(trace_paths(&scene, Location::new(0.0, 0.0)).is_err());
    }

    fn one_path(gain: f64, s: f64, length: f64) -> Path {
        Path { length, bounces: 0, arrival_sine: s, gain: Complex::new(gain, 0.0) }
    }

    #[test]
    fn csi_closed_forms() {
        let scene = ScenarioSpec::open(1, 4, 3, region());
        let h = synthesize_csi(&[one_path(1.0, 0.0, 0.0)], &scene);
        assert!(h.values().iter().all(|c| (c.re - 1.0).abs() < 1e-7 && c.im.abs() < 1e-7));

        let h2 = synthesize_csi(&[one_path(0.5, 0.3, 12.0), one_path(0.5, 0.3, 12.0)], &scene);
        let h1 = synthesize_csi(&[one_path(1.0, 0.3, 12.0)], &scene);
        for (a, b) in h1.values().iter().zip(h2.values()) {
            assert!((a - b).norm() < 1e-6);
        }

        let scene = ScenarioSpec::open(1, 4, 1, region());
        let h = synthesize_csi(&[one_path(1.0, 0.5, 0.0)], &scene);
        let expected = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        for (c, (re, im)) in h.values().iter().zip(expected) {
            assert!((c.re - re).abs() < 1e-6 && (c.im - im).abs() < 1e-6, "{c}");
        }
        assert_eq!(synthesize_csi(&[], &scene), CsiMatrix::zeros(4, 1));
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let scene = ScenarioSpec::open(1, 4, 4, region());
        let h = synthesize_csi(&trace_paths(&scene, Location::new(20.0, 1.0)).unwrap(), &scene);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_csi_noise(&h, 0.0, &mut rng).unwrap(), h);
        assert!(apply_csi_noise(&h, -0.1, &mut rng).is_err());
    }

    #[test]
    fn noise_multiplier_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = noise_multipliers(100_000, 0.1, &mut rng).unwrap();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.999..=1.001).contains(&mean), "{mean}");
        assert!((0.099..=0.101).contains(&sd), "{sd}");
    }

    #[test]
    fn noise_preserves_phase() {
        let scene = ScenarioSpec::open(1, 4, 4, region());
        let h = synthesize_csi(&trace_paths(&scene, Location::new(20.0, 1.0)).unwrap(), &scene);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = apply_csi_noise(&h, 0.2, &mut rng).unwrap();
        for (a, b) in h.values().iter().zip(noisy.values()) {
            // a × b̄ is real when both share a phase (up to sign)
            let z = a * b.conj();
            assert!(z.im.abs() <= 1e-5 * z.norm().max(1e-12), "{a} {b}");
        }
    }

    #[test]
    fn procedural_scenes_validate_and_serialize() {
        for s in ScenarioSpec::desk_family() {
            s.validate().unwrap();
            let json = serde_json::to_string(&s).unwrap();
            let back: ScenarioSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, s);
        }
        let bad = r#"{"id":1,"extra":true}"#;
        assert!(serde_json::from_str::<ScenarioSpec>(bad).is_err());
    }

    fn brute_dft_magnitude(h: &CsiMatrix) -> Vec<f64> {
        let (nt, nc) = (h.antennas(), h.subcarriers());
        let mut out = vec![0.0; nt * nc];
        for a in 0..nt {
            for b in 0..nc {
                let mut acc = Complex::new(0.0f64, 0.0);
                for m in 0..nt {
                    for k in 0..nc {
                        let c = h.get(m, k);
                        let ph = -2.0 * PI * ((a * m) as f64 / nt as f64 + (b * k) as f64 / nc as f64);
                        acc += Complex::new(c.re as f64, c.im as f64) * Complex::from_polar(1.0, ph);
                    }
                }
                out[a * nc + b] = acc.norm() / ((nt * nc) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn angle_delay_of_constant() {
        let h = CsiMatrix::new(4, 8, vec![Complex::new(1.0, 0.0); 32]).unwrap();
        let ad = angle_delay_transform(&h);
        assert!((ad[0] - (32f32).sqrt()).abs() < 1e-5);
        assert!(ad[1..].iter().all(|&x| x.abs() < 1e-5));
    }

    #[test]
    fn angle_delay_matches_brute_force_and_parseval() {
        let scene = ScenarioSpec::procedural(1, 5, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 5 {
            let u = scene.user_region.sample(&mut rng);
            let paths = trace_paths(&scene, u).unwrap();
            if paths.is_empty() {
                continue;
            }
            let h = synthesize_csi(&paths, &scene);
            let ad = angle_delay_transform(&h);
            let oracle = brute_dft_magnitude(&h);
            for (a, b) in ad.iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() <= 1e-5 * b.max(1e-3), "{a} vs {b}");
            }
            let e_ad: f64 = ad.iter().map(|&x| (x as f64).powi(2)).sum();
            assert!((e_ad - h.energy()).abs() <= 1e-5 * h.energy());
            checked += 1;
        }
    }

    #[test]
    fn steering_vector_peaks_at_expected_bin() {
        let scene = ScenarioSpec::open(1, 8, 1, region());
        let h = synthesize_csi(&[one_path(1.0, 0.5, 0.0)], &scene);
        let ad = angle_delay_transform(&h);
        let oracle = brute_dft_magnitude(&h);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
        let expected = ((8.0f64 * 0.25).round() as usize) % 8;
        let ad64: Vec<f64> = ad.iter().map(|&x| x as f64).collect();
        assert_eq!(argmax(&oracle), expected);
        assert_eq!(argmax(&ad64), expected);
    }

    #[test]
    fn blockers_never_add_paths() {
        let mut scene = ScenarioSpec::procedural(2, 9, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let users: Vec<_> = (0..50).map(|_| scene.user_region.sample(&mut rng)).collect();
        let before: Vec<_> = users.iter().map(|&u| trace_paths(&scene, u).unwrap().len()).collect();
        let c = scene.user_region.min;
        scene.blockers.push(Blocker { a: c, b: Location::new(c.x + 30.0, c.y + 25.0) });
        for (u, b) in users.iter().zip(before) {
            assert!(trace_paths(&scene, *u).unwrap().len() <= b);
        }
    }

    #[test]
    fn gain_linearity_is_exact_for_power_of_two() {
        let scene = ScenarioSpec::procedural(3, 3, 8, 8);
        let u = Location::new(
            0.5 * (scene.user_region.min.x + scene.user_region.max.x),
            0.5 * (scene.user_region.min.y + scene.user_region.max.y),
        );
        let paths = trace_paths(&scene, u).unwrap();
        let scaled: Vec<Path> = paths.iter().map(|p| Path { gain: p.gain * 4.0, ..*p }).collect();
        let (h, h4) = (synthesize_csi(&paths, &scene), synthesize_csi(&scaled, &scene));
        for (a, b) in h.values().iter().zip(h4.values()) {
            assert_eq!(*a * 4.0, *b);
        }
    }
}
