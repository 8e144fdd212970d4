//! Synthetic two-agent handshakes.
//!
//! A [`Scene`] fixes the DoF layout, start values, the range of endpoints the
//! human may choose and a seed-independent linear map from the human endpoint
//! to the controlled endpoint. Scenarios are then generated from a
//! [`ScenarioParams`] with all randomness drawn from an explicit seed.
//!
//! Event times inside a scenario are given in seconds at unit speed and are
//! laid out over phase, so the same scenario played at different speeds has
//! exactly the same shape as a function of phase.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{phase_of, DofLayout, Interaction};

pub const DEFAULT_SAMPLE_RATE: f64 = 30.0;
pub const DEFAULT_DURATION_S: f64 = 10.0;
/// Sensor noise sd as a fraction of each DoF's nominal range.
pub const DEFAULT_NOISE_FRACTION: f64 = 0.005;
/// Demonstration speeds are drawn from this interval.
pub const DEMO_SPEED_RANGE: (f64, f64) = (0.8, 1.25);
/// Delay of the human onset after the robot onset in recorded handshakes.
pub const HUMAN_LAG_RANGE_S: (f64, f64) = (0.0, 0.5);
/// Delay of the human onset when reacting to a fixed robot trajectory.
pub const STATIC_REACTION_RANGE_S: (f64, f64) = (1.0, 2.0);

const OBSERVED_TEMPLATE: [(&str, f64, f64, f64); 3] = [
    ("hand_x", 0.1, 0.35, 0.6),
    ("hand_y", 0.0, 0.1, 0.3),
    ("hand_z", 0.8, 0.95, 1.25),
];
const CONTROLLED_START: f64 = 0.2;
const BASE_OFFSET: f64 = 0.3;
const COUPLING_GAIN: f64 = 0.2;
const CROSS_GAIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampProfile {
    MinJerk,
    Linear,
}

impl RampProfile {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            RampProfile::MinJerk => min_jerk(u),
            RampProfile::Linear => u.clamp(0.0, 1.0),
        }
    }
}

/// `10u³ − 15u⁴ + 6u⁵`, with `u` clamped to `[0, 1]`.
pub fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

pub fn min_jerk_derivative(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    30.0 * u * u * (1.0 - u) * (1.0 - u)
}

/// Layout plus the fixed geometry of the synthetic handshake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub layout: DofLayout,
    /// Start value of every DoF.
    pub start: Vec<f64>,
    /// Endpoint interval for each observed DoF.
    pub observed_lo: Vec<f64>,
    pub observed_hi: Vec<f64>,
    /// Controlled endpoint = start + base + gain · u(primary) + cross · u(secondary)
    /// where `u ∈ [−1, 1]` is the normalised observed endpoint.
    pub base: Vec<f64>,
    pub gain: Vec<f64>,
    pub cross: Vec<f64>,
    #[serde(default)]
    pub recording: Recording,
}

/// Recording settings shared by every scenario of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recording {
    /// Active span at unit speed, in seconds.
    pub duration_s: f64,
    pub sample_rate: f64,
    /// Sensor noise sd as a fraction of each DoF's nominal range.
    pub noise_fraction: f64,
}

impl Default for Recording {
    fn default() -> Self {
        Self {
            duration_s: DEFAULT_DURATION_S,
            sample_rate: DEFAULT_SAMPLE_RATE,
            noise_fraction: DEFAULT_NOISE_FRACTION,
        }
    }
}

impl Scene {
    /// `observed` hand channels (cycling x, y, z) and `controlled` actuator
    /// channels.
    pub fn new(observed: usize, controlled: usize) -> Result<Self> {
        let mut names = Vec::new();
        let mut units = Vec::new();
        let mut start = Vec::new();
        let mut observed_lo = Vec::new();
        let mut observed_hi = Vec::new();
        for i in 0..observed {
            let (name, s, lo, hi) = OBSERVED_TEMPLATE[i % 3];
            let shift = (i / 3) as f64 * 0.1;
            names.push(if i < 3 { name.to_string() } else { format!("{name}{}", i / 3) });
            units.push("m".to_string());
            start.push(s + shift);
            observed_lo.push(lo + shift);
            observed_hi.push(hi + shift);
        }
        let mut base = Vec::new();
        let mut gain = Vec::new();
        let mut cross = Vec::new();
        for j in 0..controlled {
            names.push(format!("act{j}"));
            units.push("mPa".to_string());
            start.push(CONTROLLED_START);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            base.push(sign * BASE_OFFSET);
            // Alternate the coupling sign on a slower cycle than the base so
            // both correlation signs appear.
            gain.push(if (j / 2) % 2 == 0 { COUPLING_GAIN } else { -COUPLING_GAIN });
            cross.push(CROSS_GAIN);
        }
        let layout = DofLayout::new(observed, controlled, names, units)?;
        Ok(Self {
            layout,
            start,
            observed_lo,
            observed_hi,
            base,
            gain,
            cross,
            recording: Recording::default(),
        })
    }

    /// Three hand channels and five actuators.
    pub fn desk() -> Self {
        Self::new(3, 5).expect("static layout")
    }

    /// Three hand channels and 27 actuators (450 weights at 15 basis functions).
    pub fn full_scale() -> Self {
        Self::new(3, 27).expect("static layout")
    }

    pub fn dof_count(&self) -> usize {
        self.layout.dof_count()
    }

    /// Observed DoF that drives controlled DoF `j`.
    pub fn primary(&self, j: usize) -> usize {
        j % self.layout.observed_count()
    }

    fn secondary(&self, j: usize) -> usize {
        (j + 1) % self.layout.observed_count()
    }

    /// Typical span of each DoF, used to scale noise and tolerances.
    pub fn nominal_ranges(&self) -> Vec<f64> {
        let d_o = self.layout.observed_count();
        let mut out: Vec<f64> = (0..d_o)
            .map(|i| (self.observed_hi[i] - self.start[i]).abs().max((self.observed_lo[i] - self.start[i]).abs()))
            .collect();
        for j in 0..self.layout.controlled_count() {
            out.push(self.base[j].abs() + self.gain[j].abs() + self.cross[j].abs());
        }
        out
    }

    fn normalized(&self, i: usize, value: f64) -> f64 {
        let (lo, hi) = (self.observed_lo[i], self.observed_hi[i]);
        if hi > lo {
            2.0 * (value - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }

    /// Full endpoint vector for the given observed endpoints.
    pub fn coupled_endpoint(&self, observed: &[f64]) -> Result<Vec<f64>> {
        let d_o = self.layout.observed_count();
        if observed.len() != d_o {
            return Err(Error::Dimension(format!(
                "{} observed endpoints for {d_o} observed DoFs",
                observed.len()
            )));
        }
        let mut out = observed.to_vec();
        for j in 0..self.layout.controlled_count() {
            let u = self.normalized(self.primary(j), observed[self.primary(j)]);
            let v = self.normalized(self.secondary(j), observed[self.secondary(j)]);
            out.push(self.start[d_o + j] + self.base[j] + self.gain[j] * u + self.cross[j] * v);
        }
        Ok(out)
    }

    /// Uniformly sampled observed endpoints.
    pub fn sample_observed_endpoint<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.observed_lo
            .iter()
            .zip(&self.observed_hi)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect()
    }

    /// Midpoint of every observed endpoint interval.
    pub fn mid_observed_endpoint(&self) -> Vec<f64> {
        self.observed_lo
            .iter()
            .zip(&self.observed_hi)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }
}

/// Onsets and durations in seconds at unit speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub robot_onset_s: f64,
    pub robot_ramp_s: f64,
    pub human_onset_s: f64,
    pub human_motion_s: f64,
}

impl Timing {
    /// Both partners start at once and move for the whole span.
    pub fn spanning(duration_s: f64) -> Self {
        Self {
            robot_onset_s: 0.0,
            robot_ramp_s: duration_s,
            human_onset_s: 0.0,
            human_motion_s: duration_s,
        }
    }
}

impl Default for Timing {
    fn default() -> Self {
        Self::spanning(DEFAULT_DURATION_S)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub scene: Scene,
    /// Terminal value of every DoF. A DoF whose endpoint equals its start
    /// stays still.
    pub endpoint: Vec<f64>,
    /// Larger is faster; the active span lasts `duration_s / speed_factor`.
    pub speed_factor: f64,
    /// Constant samples at the start values prepended before the active span.
    pub pause_ticks: usize,
    /// Noise sd as a fraction of each DoF's nominal range.
    pub noise_sd: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: f64,
    pub timing: Timing,
    pub human_profile: RampProfile,
    pub robot_profile: RampProfile,
}

impl ScenarioParams {
    /// Unit-speed scenario for the given endpoints using the scene's
    /// recording settings.
    pub fn new(scene: Scene, endpoint: Vec<f64>, seed: u64) -> Self {
        let rec = scene.recording;
        Self {
            scene,
            endpoint,
            speed_factor: 1.0,
            pause_ticks: 0,
            noise_sd: rec.noise_fraction,
            seed,
            duration_s: rec.duration_s,
            sample_rate: rec.sample_rate,
            timing: Timing::spanning(rec.duration_s),
            human_profile: RampProfile::MinJerk,
            robot_profile: RampProfile::MinJerk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint.len() != self.scene.dof_count() {
            return Err(Error::Config(format!(
                "{} endpoints for {} DoFs",
                self.endpoint.len(),
                self.scene.dof_count()
            )));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.speed_factor > 0.0 && self.speed_factor.is_finite()) {
            return Err(Error::Config("speed factor must be positive".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config("noise sd must be non-negative".into()));
        }
        let t = self.timing;
        if [t.robot_onset_s, t.human_onset_s].iter().any(|v| *v < 0.0)
            || [t.robot_ramp_s, t.human_motion_s].iter().any(|v| !(*v > 0.0))
        {
            return Err(Error::Config("onsets must be non-negative and durations positive".into()));
        }
        Ok(())
    }

    /// Samples in the active (non-pause) span.
    pub fn active_len(&self) -> usize {
        ((self.duration_s / self.speed_factor * self.sample_rate).round() as usize).max(2)
    }
}

/// A generated interaction with its exact phase.
#[derive(Debug, Clone)]
pub struct Generated {
    pub interaction: Interaction,
    /// Ground-truth phase per sample; zero during the leading pause.
    pub truth_phase: Vec<f64>,
    pub params: ScenarioParams,
}

impl Generated {
    /// Index of the first active sample.
    pub fn active_start(&self) -> usize {
        self.params.pause_ticks
    }

    /// True phase velocity during the active span, in phase per sample.
    pub fn truth_phase_velocity(&self) -> f64 {
        1.0 / (self.params.active_len() - 1) as f64
    }
}

fn ramp(profile: RampProfile, time: f64, onset: f64, length: f64) -> f64 {
    profile.eval((time - onset) / length)
}

pub fn gen_handshake(params: &ScenarioParams) -> Result<Generated> {
    params.validate()?;
    let scene = &params.scene;
    let d = scene.dof_count();
    let d_o = scene.layout.observed_count();
    let active = params.active_len();
    let total = params.pause_ticks + active;
    let ranges = scene.nominal_ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut data = DMatrix::zeros(d, total);
    let mut truth = vec![0.0; total];
    let t = params.timing;

    for (col, phase) in truth.iter_mut().enumerate().skip(params.pause_ticks) {
        *phase = phase_of(col - params.pause_ticks, active)?;
    }
    for col in 0..total {
        // Unit-speed time of this sample.
        let time = truth[col] * params.duration_s;
        let active_sample = col >= params.pause_ticks;
        for dof in 0..d {
            let progress = if !active_sample {
                0.0
            } else if dof < d_o {
                ramp(params.human_profile, time, t.human_onset_s, t.human_motion_s)
            } else {
                ramp(params.robot_profile, time, t.robot_onset_s, t.robot_ramp_s)
            };
            let (start, end) = (scene.start[dof], params.endpoint[dof]);
            data[(dof, col)] = if progress >= 1.0 {
                end
            } else {
                start + (end - start) * progress
            };
        }
    }
    if params.noise_sd > 0.0 {
        for dof in 0..d {
            let sd = params.noise_sd * ranges[dof];
            if sd <= 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
            for col in 0..total {
                data[(dof, col)] += normal.sample(&mut rng);
            }
        }
    }
    let interaction = Interaction::new(data, params.sample_rate, scene.layout.clone())?;
    Ok(Generated {
        interaction,
        truth_phase: truth,
        params: params.clone(),
    })
}

/// Derives the seed of sub-stream `stream` from `root`: the first output of
/// ChaCha8 seeded with `root` on stream `stream`, shifted to 63 bits so it
/// stays a valid TOML integer.
pub fn sub_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64() >> 1
}

/// Randomised recorded handshake: random endpoint, demonstration speed and
/// human lag. Both partners finish at the end of the active span.
pub fn random_demo(scene: &Scene, seed: u64) -> Result<ScenarioParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed = scene.sample_observed_endpoint(&mut rng);
    let endpoint = scene.coupled_endpoint(&observed)?;
    let mut params = ScenarioParams::new(scene.clone(), endpoint, rng.next_u64() >> 1);
    params.speed_factor = rng.random_range(DEMO_SPEED_RANGE.0..=DEMO_SPEED_RANGE.1);
    params.timing.human_onset_s =
        params.timing.robot_onset_s + rng.random_range(HUMAN_LAG_RANGE_S.0..=HUMAN_LAG_RANGE_S.1);
    params.timing.human_motion_s = params.duration_s - params.timing.human_onset_s;
    params.timing.robot_ramp_s = params.duration_s - params.timing.robot_onset_s;
    Ok(params)
}

/// `trajectories` endpoint choices, each recorded `repetitions` times with
/// its own speed, lag and noise. Trajectory-major order.
pub fn gen_repeated_demos(
    scene: &Scene,
    trajectories: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<Generated>> {
    let n = trajectories * repetitions;
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..trajectories {
        let traj_seed = sub_seed(seed, t as u64);
        let endpoint = random_demo(scene, traj_seed)?.endpoint;
        for r in 0..repetitions {
            let mut params = random_demo(scene, sub_seed(traj_seed, r as u64 + 1))?;
            params.endpoint = endpoint.clone();
            out.push(gen_handshake(&params)?);
        }
    }
    Ok(out)
}

/// `n` demonstrations with independent sub-seeds of `seed`.
pub fn gen_demo_set(scene: &Scene, n: usize, seed: u64) -> Result<Vec<Generated>> {
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    (0..n)
        .map(|i| gen_handshake(&random_demo(scene, sub_seed(seed, i as u64))?))
        .collect()
}

/// Speed classes of test scenarios. `Still` is a partner who never moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedClass {
    Slow,
    Normal,
    Fast,
    Still,
}

impl SpeedClass {
    pub const ALL: [SpeedClass; 4] = [Self::Slow, Self::Normal, Self::Fast, Self::Still];

    pub fn factor(self) -> f64 {
        match self {
            SpeedClass::Slow => 0.5,
            SpeedClass::Normal | SpeedClass::Still => 1.0,
            SpeedClass::Fast => 2.0,
        }
    }

    /// Filename tag.
    pub fn tag(self) -> &'static str {
        match self {
            SpeedClass::Slow => "slow",
            SpeedClass::Normal => "normal",
            SpeedClass::Fast => "fast",
            SpeedClass::Still => "none",
        }
    }
}

/// Test scenario: a random handshake at the given speed. The controlled rows
/// hold the ground-truth response. A `Still` partner stays at the start and
/// the controlled rows stay put as well.
pub fn gen_test(scene: &Scene, class: SpeedClass, pause_ticks: usize, seed: u64) -> Result<Generated> {
    let mut params = random_demo(scene, seed)?;
    params.speed_factor = class.factor();
    params.pause_ticks = pause_ticks;
    if class == SpeedClass::Still {
        params.endpoint = scene.start.clone();
    }
    gen_handshake(&params)
}

/// Open-loop robot playing a fixed trajectory while the partner reacts to it.
///
/// Only the first half (rounded up) of the controlled DoFs are actuated; the
/// rest stay at their start values. The partner picks an endpoint at random
/// and starts moving after a reaction delay.
pub fn gen_static(scene: &Scene, seed: u64) -> Result<Generated> {
    let mut params = random_demo(scene, seed)?;
    let d_o = scene.layout.observed_count();
    let d_c = scene.layout.controlled_count();
    let fixed = scene.coupled_endpoint(&scene.mid_observed_endpoint())?;
    let actuated = d_c.div_ceil(2);
    for j in 0..d_c {
        params.endpoint[d_o + j] = if j < actuated { fixed[d_o + j] } else { scene.start[d_o + j] };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, u64::MAX));
    params.speed_factor = 1.0;
    params.timing.human_onset_s = params.timing.robot_onset_s
        + rng.random_range(STATIC_REACTION_RANGE_S.0..=STATIC_REACTION_RANGE_S.1);
    gen_handshake(&params)
}

/// Controlled DoFs left un-actuated by [`gen_static`].
pub fn static_unactuated(scene: &Scene) -> std::ops::Range<usize> {
    let d_o = scene.layout.observed_count();
    let d_c = scene.layout.controlled_count();
    (d_o + d_c.div_ceil(2))..(d_o + d_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{decompose, BasisConfig};
    use approx::assert_relative_eq;

    #[test]
    fn min_jerk_boundaries() {
        assert_eq!(min_jerk(0.0), 0.0);
        assert_eq!(min_jerk(1.0), 1.0);
        assert_relative_eq!(min_jerk(0.5), 0.5, epsilon = 1e-15);
        assert_relative_eq!(min_jerk_derivative(0.5), 1.875, epsilon = 1e-15);
        assert_eq!(min_jerk_derivative(0.0), 0.0);
        assert_eq!(min_jerk_derivative(1.0), 0.0);
        assert_eq!(min_jerk(-0.3), 0.0);
        assert_eq!(min_jerk(1.7), 1.0);
    }

    #[test]
    fn min_jerk_derivative_matches_difference() {
        for i in 1..20 {
            let u = i as f64 / 20.0;
            let h = 1e-6;
            let fd = (min_jerk(u + h) - min_jerk(u - h)) / (2.0 * h);
            assert_relative_eq!(min_jerk_derivative(u), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn noiseless_handshake_hits_start_and_end() {
        let scene = Scene::desk();
        let end = scene.coupled_endpoint(&scene.mid_observed_endpoint()).unwrap();
        let mut p = ScenarioParams::new(scene.clone(), end.clone(), 3);
        p.noise_sd = 0.0;
        let g = gen_handshake(&p).unwrap();
        let data = g.interaction.data();
        let last = g.interaction.len() - 1;
        for d in 0..scene.dof_count() {
            assert_eq!(data[(d, 0)], scene.start[d]);
            assert_eq!(data[(d, last)], end[d]);
        }
        assert_eq!(g.truth_phase[0], 0.0);
        assert_eq!(g.truth_phase[last], 1.0);
    }

    #[test]
    fn same_seed_same_matrix() {
        let scene = Scene::desk();
        let a = gen_test(&scene, SpeedClass::Normal, 0, 99).unwrap();
        let b = gen_test(&scene, SpeedClass::Normal, 0, 99).unwrap();
        assert_eq!(a.interaction, b.interaction);
        let c = gen_test(&scene, SpeedClass::Normal, 0, 100).unwrap();
        assert_ne!(a.interaction, c.interaction);
    }

    #[test]
    fn speed_leaves_phase_shape_unchanged() {
        let scene = Scene::desk();
        let end = scene.coupled_endpoint(&scene.mid_observed_endpoint()).unwrap();
        let mut p = ScenarioParams::new(scene.clone(), end, 5);
        p.noise_sd = 0.0;
        let slow = gen_handshake(&p).unwrap();
        p.speed_factor = 2.0;
        let fast = gen_handshake(&p).unwrap();
        assert_eq!(slow.interaction.len(), 300);
        assert_eq!(fast.interaction.len(), 150);
        // Compare at equal sample counts in phase; the longer recording is
        // brought down to the shorter one's grid.
        let slow = slow.interaction.resample(150).unwrap();
        let cfg = BasisConfig::uniform(15).unwrap();
        for d in 0..scene.dof_count() {
            let a = decompose(&slow.dof(d), &cfg).unwrap().weights;
            let b = decompose(&fast.interaction.dof(d), &cfg).unwrap().weights;
            let diff = (a - b).amax();
            assert!(diff < 1e-3, "DoF {d}: {diff}");
        }
    }

    #[test]
    fn pause_prepends_still_samples() {
        let scene = Scene::desk();
        let g = gen_test(&scene, SpeedClass::Normal, 90, 4).unwrap();
        assert_eq!(g.interaction.len(), 390);
        assert!(g.truth_phase[..=90].iter().all(|&p| p == 0.0));
        assert_eq!(*g.truth_phase.last().unwrap(), 1.0);
        assert_relative_eq!(g.truth_phase[91], 1.0 / 299.0);
    }

    #[test]
    fn demo_set_is_distinct_and_in_range() {
        let scene = Scene::desk();
        let demos = gen_demo_set(&scene, 108, 17).unwrap();
        assert_eq!(demos.len(), 108);
        let d_o = scene.layout.observed_count();
        let mut endpoints: Vec<Vec<f64>> = Vec::new();
        for g in &demos {
            let e = &g.params.endpoint;
            for i in 0..d_o {
                assert!(e[i] >= scene.observed_lo[i] && e[i] <= scene.observed_hi[i]);
            }
            let (lo, hi) = DEMO_SPEED_RANGE;
            assert!(g.params.speed_factor >= lo && g.params.speed_factor <= hi);
            assert!(!endpoints.contains(e));
            endpoints.push(e.clone());
        }
        assert!(gen_demo_set(&scene, 1, 17).is_err());
    }

    #[test]
    fn distinct_roots_give_distinct_sets() {
        let scene = Scene::desk();
        for root in 0..50u64 {
            let a = gen_demo_set(&scene, 2, root).unwrap();
            let b = gen_demo_set(&scene, 2, root + 1000).unwrap();
            assert_ne!(a[0].params.endpoint, b[0].params.endpoint);
        }
        assert_ne!(sub_seed(1, 0), sub_seed(1, 1));
        assert_ne!(sub_seed(1, 0), sub_seed(2, 0));
    }

    #[test]
    fn controlled_endpoint_is_linear_in_observed() {
        let scene = Scene::desk();
        let lo = scene.coupled_endpoint(&scene.observed_lo).unwrap();
        let hi = scene.coupled_endpoint(&scene.observed_hi).unwrap();
        let mid = scene.coupled_endpoint(&scene.mid_observed_endpoint()).unwrap();
        for d in 0..scene.dof_count() {
            assert_relative_eq!(mid[d], 0.5 * (lo[d] + hi[d]), epsilon = 1e-12);
        }
    }

    #[test]
    fn static_scene_leaves_some_actuators_still() {
        let scene = Scene::desk();
        let g = gen_static(&scene, 8).unwrap();
        let ranges = scene.nominal_ranges();
        for d in static_unactuated(&scene) {
            let row = g.interaction.dof(d);
            let spread = row.iter().cloned().fold(f64::MIN, f64::max)
                - row.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 0.1 * ranges[d], "DoF {d} moved {spread}");
        }
        assert!(g.params.timing.human_onset_s >= g.params.timing.robot_onset_s + 1.0);
    }

    #[test]
    fn still_partner_does_not_move() {
        let scene = Scene::desk();
        let mut p = gen_test(&scene, SpeedClass::Still, 0, 2).unwrap().params;
        p.noise_sd = 0.0;
        let g = gen_handshake(&p).unwrap();
        for d in 0..scene.dof_count() {
            assert!(g.interaction.dof(d).iter().all(|&v| v == scene.start[d]));
        }
    }

    #[test]
    fn params_round_trip_through_toml() {
        let p = random_demo(&Scene::desk(), 12).unwrap();
        let text = toml::to_string(&p).unwrap();
        let back: ScenarioParams = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn repetitions_share_their_endpoint() {
        let scene = Scene::desk();
        let set = gen_repeated_demos(&scene, 4, 3, 5).unwrap();
        assert_eq!(set.len(), 12);
        for t in 0..4 {
            let group = &set[3 * t..3 * t + 3];
            assert!(group.iter().all(|g| g.params.endpoint == group[0].params.endpoint));
            assert_ne!(group[0].params.speed_factor, group[1].params.speed_factor);
        }
        assert_ne!(set[0].params.endpoint, set[3].params.endpoint);
        assert!(gen_repeated_demos(&scene, 1, 1, 5).is_err());
    }

    #[test]
    fn recording_settings_flow_into_params() {
        let mut scene = Scene::desk();
        scene.recording.duration_s = 4.0;
        scene.recording.sample_rate = 20.0;
        let g = gen_test(&scene, SpeedClass::Normal, 0, 3).unwrap();
        assert_eq!(g.interaction.len(), 80);
        assert_eq!(g.interaction.sample_rate(), 20.0);
    }
}
