//! Energy-minimal computation/communication time split for one device.
//!
//! The round budget `T_max` is divided into a computation share `theta` and a
//! communication share `pi`. Computation energy falls like `1/theta^2` and
//! radio energy falls monotonically in `pi`, so the optimum spends the whole
//! budget (`theta + pi = 1`) unless a frequency or power bound stops it.
//!
//! The solver attaches a multiplier `nu` to the budget constraint. For fixed
//! `nu`, `theta(nu)` has a closed form and `pi(nu)` is the root of the
//! stationarity function `phi(pi) = dE_com/dpi + nu`, found by bisection.
//! Both shares shrink as `nu` grows, so an outer bisection on `nu` finds the
//! multiplier at which the budget is exactly used. Box constraints on the
//! shares are enforced by clamping.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linkmodel::{
    self, total_energy_split_with, ChannelParams, DeviceProfile, EnergyObjective,
};
use crate::quant::{level_for_demand, payload_bits, QuantLevel};

/// Default tolerance on the relative width of the multiplier bracket.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

const BRACKET_WIDENING: f64 = 10.0;
const MAX_BRACKET_EXPANSIONS: usize = 400;

/// Feasible range of the two budget shares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitBounds {
    /// Share needed to finish the workload at `f_max`.
    pub theta_min: f64,
    /// Share needed to send the payload at `P_max`.
    pub pi_min: f64,
    /// Share at which the workload runs at `f_min` (capped at 1).
    pub theta_max: f64,
    /// Share at which the payload is sent at `P_min` (capped at 1).
    pub pi_max: f64,
}

impl SplitBounds {
    pub fn is_feasible(&self) -> bool {
        self.theta_min + self.pi_min <= 1.0
    }

    fn check(&self) -> Result<()> {
        if self.is_feasible() {
            Ok(())
        } else {
            Err(Error::InfeasibleBudget {
                theta_min: self.theta_min,
                pi_min: self.pi_min,
            })
        }
    }
}

/// Share bounds for the payload implied by the device's own error demand.
pub fn split_bounds(profile: &DeviceProfile, ch: &ChannelParams) -> Result<SplitBounds> {
    let level = level_for_demand(profile.demand())?;
    Ok(split_bounds_for_bits(
        profile,
        ch,
        payload_bits(profile.model_size, level.bits),
    ))
}

pub fn split_bounds_for_bits(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
) -> SplitBounds {
    let t = profile.t_max;
    let cycles = profile.cycles();
    let airtime = |p: f64| bits as f64 / (t * linkmodel::rate(ch, p));
    let (pi_min, pi_max) = if bits == 0 {
        (0.0, 0.0)
    } else {
        (airtime(profile.p_max), airtime(profile.p_min).min(1.0))
    };
    SplitBounds {
        theta_min: cycles / (profile.f_max * t),
        pi_min,
        theta_max: (cycles / (profile.f_min * t)).min(1.0),
        pi_max,
    }
}

fn nu_scale(profile: &DeviceProfile) -> f64 {
    2.0 * profile.tau * profile.cycles().powi(3) / (profile.t_max * profile.t_max)
}

/// Unclamped stationary computation share `cbrt(2 tau (IDC)^3 / (nu T^2))`.
pub fn theta_of_nu(profile: &DeviceProfile, nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::InvalidMultiplier(nu));
    }
    Ok((nu_scale(profile) / nu).cbrt())
}

/// Multiplier at which the unclamped computation share equals `theta`.
pub fn nu_of_theta(profile: &DeviceProfile, theta: f64) -> f64 {
    nu_scale(profile) / theta.powi(3)
}

/// `e^y (1 - y) - 1`, evaluated by series near zero to avoid cancellation.
fn stationarity_core(y: f64) -> f64 {
    if y.abs() < 0.5 {
        // sum_{n>=2} y^n (1 - n) / n!
        let mut term = y; // y^1 / 1!
        let mut sum = 0.0;
        for n in 2..40 {
            term *= y / n as f64;
            let add = term * (1.0 - n as f64);
            sum += add;
            if add.abs() <= f64::EPSILON * sum.abs() {
                break;
            }
        }
        sum
    } else {
        y.exp() * (1.0 - y) - 1.0
    }
}

/// One device's split problem with a fixed payload.
#[derive(Debug, Clone, Copy)]
struct SplitProblem<'a> {
    profile: &'a DeviceProfile,
    ch: &'a ChannelParams,
    bits: u64,
    objective: EnergyObjective,
}

impl SplitProblem<'_> {
    /// `bits / (B T_max)`: airtime share needed at spectral efficiency 1.
    fn load(&self) -> f64 {
        self.bits as f64 / (self.ch.bandwidth * self.profile.t_max)
    }

    /// Derivative of communication energy with respect to `pi`.
    fn d_e_com(&self, pi: f64) -> f64 {
        if self.bits == 0 {
            return 0.0;
        }
        let k = self.profile.t_max * self.ch.noise_over_gain();
        let y = self.load() / pi * std::f64::consts::LN_2;
        match self.objective {
            EnergyObjective::Physical => k * stationarity_core(y),
            EnergyObjective::PrintedNoAirtime => -k * y.exp() * y / pi,
        }
    }

    fn phi(&self, pi: f64, nu: f64) -> f64 {
        self.d_e_com(pi) + nu
    }

    fn bisect_pi(&self, nu: f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
        let f_lo = self.phi(lo, nu);
        if f_lo >= 0.0 {
            return lo;
        }
        let f_hi = self.phi(hi, nu);
        if f_hi <= 0.0 {
            return hi;
        }
        while hi - lo > tol {
            let mid = lo + 0.5 * (hi - lo);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.phi(mid, nu) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if self.phi(lo, nu).abs() <= self.phi(hi, nu).abs() {
            lo
        } else {
            hi
        }
    }

    fn energy(&self, theta: f64, pi: f64) -> Result<linkmodel::SplitEnergy> {
        total_energy_split_with(self.profile, self.ch, self.bits, theta, pi, self.objective)
    }
}

/// Stationarity function for the communication share:
/// `(N0 B T_max / g) [2^{c/pi} (1 - c ln2 / pi) - 1] + nu` with
/// `c = bits / (B T_max)`. Strictly increasing in `pi`.
pub fn phi(profile: &DeviceProfile, ch: &ChannelParams, bits: u64, pi: f64, nu: f64) -> f64 {
    SplitProblem {
        profile,
        ch,
        bits,
        objective: EnergyObjective::Physical,
    }
    .phi(pi, nu)
}

/// Root of `phi(., nu)` on `[pi_lo, pi_hi]` to within `lambda`. Without a sign
/// change the nearer endpoint is returned.
#[allow(clippy::too_many_arguments)]
pub fn bisect_pi(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
    nu: f64,
    pi_lo: f64,
    pi_hi: f64,
    lambda: f64,
) -> f64 {
    SplitProblem {
        profile,
        ch,
        bits,
        objective: EnergyObjective::Physical,
    }
    .bisect_pi(nu, pi_lo, pi_hi, lambda)
}

/// Solver output for one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AllocationDecision {
    pub theta: f64,
    pub pi: f64,
    /// Budget multiplier; zero when the budget does not bind.
    pub nu: f64,
    pub levels: u32,
    pub bits_per_param: u32,
    /// Payload size `M log2(L)`.
    pub payload_bits: u64,
    pub f: f64,
    pub p: f64,
    pub e_cmp: f64,
    pub e_com: f64,
    pub e_total: f64,
    pub t_cmp: f64,
    pub t_com: f64,
    /// `theta` held at `theta_min` (CPU at `f_max`).
    pub clamped_theta: bool,
    /// `pi` held at `pi_min` (radio at `P_max`).
    pub clamped_pi: bool,
    /// `theta` held at its upper bound (CPU at `f_min`).
    pub theta_at_max: bool,
    /// `pi` held at its upper bound (radio at `P_min`).
    pub pi_at_max: bool,
}

impl AllocationDecision {
    pub fn is_unclamped(&self) -> bool {
        !(self.clamped_theta || self.clamped_pi || self.theta_at_max || self.pi_at_max)
            && self.nu > 0.0
    }
}

/// One outer bisection step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NuStep {
    pub iteration: usize,
    pub nu_lo: f64,
    pub nu_hi: f64,
    pub theta: f64,
    pub pi: f64,
    #[serde(rename = "E_total")]
    pub e_total: f64,
}

/// Record of the multiplier search. Each row holds the bracket after the step
/// and the shares evaluated at that step's midpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NuTrace {
    /// Bracket before the first step.
    pub initial: (f64, f64),
    pub steps: Vec<NuStep>,
}

impl NuTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV with header `iteration,nu_lo,nu_hi,theta,pi,E_total`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.steps.is_empty() {
            w.write_record(["iteration", "nu_lo", "nu_hi", "theta", "pi", "E_total"])?;
        }
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Stop once `ln(nu_hi / nu_lo) <= tolerance`.
    pub tolerance: f64,
    pub objective: EnergyObjective,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            objective: EnergyObjective::Physical,
        }
    }
}

/// Minimize the device's round energy for the level its demand requires.
pub fn solve(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    lambda: f64,
) -> Result<(AllocationDecision, NuTrace)> {
    let level = level_for_demand(profile.demand())?;
    solve_for_level(
        profile,
        ch,
        level,
        SolveOptions {
            tolerance: lambda,
            ..Default::default()
        },
    )
}

/// Minimize the round energy for an explicit quantization level.
pub fn solve_for_level(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    level: QuantLevel,
    opts: SolveOptions,
) -> Result<(AllocationDecision, NuTrace)> {
    profile.validate()?;
    ch.validate()?;
    if !(opts.tolerance > 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {}",
            opts.tolerance
        )));
    }
    let bits = payload_bits(profile.model_size, level.bits);
    let problem = SplitProblem {
        profile,
        ch,
        bits,
        objective: opts.objective,
    };
    let bounds = split_bounds_for_bits(profile, ch, bits);
    bounds.check()?;

    let pi_cap = bounds.pi_max.min(1.0 - bounds.theta_min);
    let share_theta = |nu: f64| -> (f64, f64) {
        let raw = (nu_scale(profile) / nu).cbrt();
        (raw.clamp(bounds.theta_min, bounds.theta_max), raw)
    };
    let share_pi = |nu: f64| -> f64 {
        if bits == 0 {
            0.0
        } else {
            problem.bisect_pi(nu, bounds.pi_min, pi_cap, 0.0)
        }
    };
    let finish = |theta: f64, pi: f64, nu: f64, raw_theta: f64| -> Result<AllocationDecision> {
        let e = problem.energy(theta, pi)?;
        Ok(AllocationDecision {
            theta,
            pi,
            nu,
            levels: level.levels,
            bits_per_param: level.bits,
            payload_bits: bits,
            // Exact bound values at the clamps, free of division round-off.
            f: if theta == bounds.theta_min {
                profile.f_max
            } else {
                e.f
            },
            p: if bits > 0 && pi == bounds.pi_min {
                profile.p_max
            } else {
                e.p
            },
            e_cmp: e.e_cmp,
            e_com: e.e_com,
            e_total: e.total(),
            t_cmp: theta * profile.t_max,
            t_com: pi * profile.t_max,
            clamped_theta: raw_theta <= bounds.theta_min,
            clamped_pi: bits > 0 && pi <= bounds.pi_min,
            theta_at_max: raw_theta >= bounds.theta_max,
            pi_at_max: bits > 0 && pi >= bounds.pi_max,
        })
    };

    // Both shares at their energy-minimal maxima still fit: budget is slack.
    if bounds.theta_max + bounds.pi_max <= 1.0 {
        let d = finish(bounds.theta_max, bounds.pi_max, 0.0, bounds.theta_max)?;
        return Ok((d, NuTrace::default()));
    }

    // Initial bracket from inverting the closed form at theta = 1 and
    // theta = theta_min, widened by a decade on each side.
    let (mut nu_lo, mut nu_hi) = if nu_scale(profile) > 0.0 {
        (
            nu_of_theta(profile, 1.0) / BRACKET_WIDENING,
            nu_of_theta(profile, bounds.theta_min) * BRACKET_WIDENING,
        )
    } else {
        // No computation energy: only the radio side sets the multiplier scale.
        (
            -problem.d_e_com(pi_cap) / BRACKET_WIDENING,
            -problem.d_e_com(bounds.pi_min) * BRACKET_WIDENING,
        )
    };
    if !(nu_lo > 0.0 && nu_hi > nu_lo && nu_hi.is_finite()) {
        return Err(Error::InfeasibleSplit(format!(
            "could not bracket the budget multiplier ({nu_lo}, {nu_hi})"
        )));
    }
    let used = |nu: f64| share_theta(nu).0 + share_pi(nu);
    let mut expansions = 0;
    while used(nu_lo) <= 1.0 && expansions < MAX_BRACKET_EXPANSIONS {
        nu_lo /= BRACKET_WIDENING;
        expansions += 1;
    }
    expansions = 0;
    while used(nu_hi) > 1.0 && expansions < MAX_BRACKET_EXPANSIONS {
        nu_hi *= BRACKET_WIDENING;
        expansions += 1;
    }

    let mut trace = NuTrace {
        initial: (nu_lo, nu_hi),
        steps: Vec::new(),
    };
    while (nu_hi / nu_lo).ln() > opts.tolerance {
        let nu = (nu_lo * nu_hi).sqrt();
        let (theta, _) = share_theta(nu);
        let pi = share_pi(nu);
        if theta + pi <= 1.0 {
            nu_hi = nu;
        } else {
            nu_lo = nu;
        }
        let e_total = problem
            .energy(theta, pi)
            .map(|e| e.total())
            .unwrap_or(f64::NAN);
        trace.steps.push(NuStep {
            iteration: trace.steps.len() + 1,
            nu_lo,
            nu_hi,
            theta,
            pi,
            e_total,
        });
    }

    // The upper end of the bracket always satisfies the budget.
    let (theta, raw) = share_theta(nu_hi);
    let pi = share_pi(nu_hi);
    let d = finish(theta, pi, nu_hi, raw)?;
    Ok((d, trace))
}

/// Decision for a fixed computation share, as used by the non-optimizing
/// baselines. Communication gets the rest of the budget, capped where the
/// payload already goes out at `P_min`.
pub fn fixed_split(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    level: QuantLevel,
    theta: f64,
) -> Result<AllocationDecision> {
    profile.validate()?;
    ch.validate()?;
    let bits = payload_bits(profile.model_size, level.bits);
    let bounds = split_bounds_for_bits(profile, ch, bits);
    bounds.check()?;
    if !(theta >= bounds.theta_min && 1.0 - theta >= bounds.pi_min) {
        return Err(Error::InfeasibleSplit(format!(
            "fixed computation share {theta} outside [{}, {}]",
            bounds.theta_min,
            1.0 - bounds.pi_min
        )));
    }
    // A share longer than the slowest frequency or lowest power needs is not
    // used; the device idles for the remainder.
    let pi = if bits == 0 {
        0.0
    } else {
        (1.0 - theta).min(bounds.pi_max)
    };
    let theta = theta.min(bounds.theta_max);
    let e = linkmodel::total_energy_split(profile, ch, bits, theta, pi)?;
    Ok(AllocationDecision {
        theta,
        pi,
        nu: 0.0,
        levels: level.levels,
        bits_per_param: level.bits,
        payload_bits: bits,
        f: e.f,
        p: e.p,
        e_cmp: e.e_cmp,
        e_com: e.e_com,
        e_total: e.total(),
        t_cmp: theta * profile.t_max,
        t_com: pi * profile.t_max,
        clamped_theta: false,
        clamped_pi: false,
        theta_at_max: false,
        pi_at_max: false,
    })
}

/// Best point found by the grid oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OraclePoint {
    pub theta: f64,
    pub pi: f64,
    pub e_total: f64,
}

/// Brute-force reference: scan `theta` over its feasible range at the given
/// resolution, giving the communication side the rest of the budget (capped
/// by its own upper bound), and keep the cheapest point.
pub fn oracle_grid_search(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
    resolution: f64,
) -> Result<OraclePoint> {
    oracle_grid_search_with(profile, ch, bits, resolution, EnergyObjective::Physical)
}

pub fn oracle_grid_search_with(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
    resolution: f64,
    objective: EnergyObjective,
) -> Result<OraclePoint> {
    oracle_scan(profile, ch, bits, resolution, objective).map(|(best, _)| best)
}

/// Like [`oracle_grid_search`] but also returns the energy profile of the scan.
pub fn oracle_scan(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
    resolution: f64,
    objective: EnergyObjective,
) -> Result<(OraclePoint, Vec<OraclePoint>)> {
    if !(resolution > 0.0) {
        return Err(Error::Config(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let bounds = split_bounds_for_bits(profile, ch, bits);
    bounds.check()?;
    let lo = bounds.theta_min;
    let hi = bounds.theta_max.min(1.0 - bounds.pi_min).max(lo);
    let n = ((hi - lo) / resolution).ceil().max(1.0) as usize;
    let mut scan = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let theta = if i == n {
            hi
        } else {
            lo + (hi - lo) * (i as f64 / n as f64)
        };
        let pi = if bits == 0 {
            0.0
        } else {
            (1.0 - theta).min(bounds.pi_max)
        };
        if let Ok(e) = total_energy_split_with(profile, ch, bits, theta, pi, objective) {
            scan.push(OraclePoint {
                theta,
                pi,
                e_total: e.total(),
            });
        }
    }
    let best = scan
        .iter()
        .copied()
        .min_by(|a, b| a.e_total.total_cmp(&b.e_total))
        .ok_or_else(|| Error::InfeasibleSplit("no evaluable point on the scan".into()))?;
    Ok((best, scan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkmodel::dbm_per_mhz_to_w_per_hz;

    fn profile() -> DeviceProfile {
        DeviceProfile {
            iterations: 1.0,
            data_size: 512.0,
            workload: 3.25e6,
            f_min: 1e7,
            f_max: 1e9,
            tau: 1e-26,
            p_min: 1e-3,
            p_max: 0.2,
            delta: 1.0,
            error_demand: 5e-5,
            t_max: 16.64,
            model_size: 37_000_000,
        }
    }

    fn channel() -> ChannelParams {
        ChannelParams {
            bandwidth: 50e6,
            noise_psd: dbm_per_mhz_to_w_per_hz(-95.0),
            gain: 1e-3,
            distance: 45.0,
            pathloss_exp: 3.76,
        }
    }

    #[test]
    fn theta_min_example() {
        let b = split_bounds(&profile(), &channel()).unwrap();
        assert!((b.theta_min - 0.1).abs() < 1e-15);
        let fast = DeviceProfile {
            f_max: 1e15,
            ..profile()
        };
        assert!(split_bounds(&fast, &channel()).unwrap().theta_min < 1e-6);
        let tiny = split_bounds_for_bits(&profile(), &channel(), 1);
        assert!(tiny.pi_min < 1e-9);
    }

    #[test]
    fn theta_of_nu_examples() {
        let p = profile();
        let s = nu_scale(&p);
        assert!((theta_of_nu(&p, s / 0.125).unwrap() - 0.5).abs() < 1e-15);
        assert!((theta_of_nu(&p, s).unwrap() - 1.0).abs() < 1e-15);
        let a = theta_of_nu(&p, 3.0).unwrap();
        let b = theta_of_nu(&p, 24.0).unwrap();
        assert!((a / b - 2.0).abs() < 1e-14);
        assert!(matches!(
            theta_of_nu(&p, 0.0),
            Err(Error::InvalidMultiplier(_))
        ));
        assert!(theta_of_nu(&p, -1.0).is_err());
    }

    #[test]
    fn stationarity_series_matches_direct() {
        for &y in &[1e-3f64, 0.01, 0.1, 0.3, 0.49] {
            let direct = y.exp() * (1.0 - y) - 1.0;
            let series = stationarity_core(y);
            // The direct form loses ~1e-16 absolute to cancellation.
            assert!((direct - series).abs() <= 1e-12 * direct.abs() + 1e-15);
        }
        assert_eq!(stationarity_core(0.0), 0.0);
    }

    #[test]
    fn phi_properties() {
        let p = profile();
        let ch = channel();
        let bits = 259_000_000;
        for i in 1..200 {
            let pi = i as f64 / 50.0;
            assert!(phi(&p, &ch, bits, pi, 0.0) < 0.0);
        }
        assert_eq!(phi(&p, &ch, 0, 0.3, 1.7), 1.7);
        let mut last = f64::NEG_INFINITY;
        for i in 1..100 {
            let v = phi(&p, &ch, bits, i as f64 / 100.0, 0.05);
            assert!(v > last);
            last = v;
        }
        assert!(phi(&p, &ch, bits, 1e-3, 0.05) < -1e3);
    }

    #[test]
    fn bisect_pi_clamps() {
        let p = profile();
        let ch = channel();
        let bits = 259_000_000;
        // Huge multiplier: phi > 0 everywhere.
        assert_eq!(bisect_pi(&p, &ch, bits, 1e12, 0.2, 0.8, 1e-6), 0.2);
        // Zero multiplier: phi < 0 everywhere.
        assert_eq!(bisect_pi(&p, &ch, bits, 0.0, 0.2, 0.8, 1e-6), 0.8);
    }

    #[test]
    fn bisect_pi_matches_grid_scan() {
        let p = profile();
        let ch = channel();
        let bits = 259_000_000;
        let nu = -phi(&p, &ch, bits, 0.37, 0.0);
        let lambda = 1e-6;
        let got = bisect_pi(&p, &ch, bits, nu, 0.1, 0.9, lambda);
        // Dense scan for the sign change.
        let n = 2_000_000;
        let mut root = f64::NAN;
        for i in 0..n {
            let a = 0.1 + 0.8 * i as f64 / n as f64;
            let b = 0.1 + 0.8 * (i + 1) as f64 / n as f64;
            if phi(&p, &ch, bits, a, nu) <= 0.0 && phi(&p, &ch, bits, b, nu) > 0.0 {
                root = 0.5 * (a + b);
                break;
            }
        }
        assert!((got - root).abs() <= lambda, "{got} vs {root}");
        assert!((got - 0.37).abs() <= lambda);
    }

    #[test]
    fn infeasible_budget() {
        let p = DeviceProfile {
            t_max: 1.0,
            ..profile()
        };
        assert!(matches!(
            solve(&p, &channel(), 1e-6),
            Err(Error::InfeasibleBudget { .. })
        ));
        let bits = payload_bits(p.model_size, 7);
        assert!(oracle_grid_search(&p, &channel(), bits, 1e-3).is_err());
    }

    #[test]
    fn solve_default_profile() {
        let (d, trace) = solve(&profile(), &channel(), 1e-6).unwrap();
        assert_eq!(d.bits_per_param, 7);
        assert!(d.is_unclamped());
        assert!(d.theta + d.pi <= 1.0);
        assert!(1.0 - (d.theta + d.pi) < 1e-5);
        assert!(trace.len() <= 30 && trace.len() >= 10, "{}", trace.len());
        let oracle = oracle_grid_search(&profile(), &channel(), d.payload_bits, 1e-5).unwrap();
        assert!(d.e_total <= oracle.e_total * (1.0 + 1e-5));
        assert!((d.e_total - oracle.e_total).abs() / oracle.e_total < 1e-3);
        assert!((d.theta - oracle.theta).abs() < 1e-4);
        let even = fixed_split(
            &profile(),
            &channel(),
            level_for_demand(profile().demand()).unwrap(),
            0.5,
        )
        .unwrap();
        assert!(d.e_total <= even.e_total);
    }

    #[test]
    fn zero_payload_prefers_full_compute() {
        let p = profile();
        let (best, _) = oracle_scan(&p, &channel(), 0, 1e-4, EnergyObjective::Physical).unwrap();
        assert_eq!(best.theta, 1.0);
    }

    #[test]
    fn theta_min_recovers_f_max() {
        // Cheap CPU and a distant radio: all spare time goes to the uplink.
        let p = DeviceProfile {
            tau: 1e-30,
            ..profile()
        };
        let ch = ChannelParams {
            distance: 100.0,
            ..channel()
        };
        let (d, _) = solve(&p, &ch, 1e-6).unwrap();
        assert!(d.clamped_theta, "{d:?}");
        assert_eq!(d.theta, split_bounds(&p, &ch).unwrap().theta_min);
        assert_eq!(d.f, p.f_max);
    }

    #[test]
    fn printed_objective_solves_against_its_own_oracle() {
        let opts = SolveOptions {
            objective: EnergyObjective::PrintedNoAirtime,
            ..Default::default()
        };
        let level = level_for_demand(profile().demand()).unwrap();
        let (d, _) = solve_for_level(&profile(), &channel(), level, opts).unwrap();
        let o = oracle_grid_search_with(
            &profile(),
            &channel(),
            d.payload_bits,
            1e-5,
            EnergyObjective::PrintedNoAirtime,
        )
        .unwrap();
        assert!((d.e_total - o.e_total).abs() / o.e_total < 1e-3);
    }

    #[test]
    fn slack_budget_uses_bound_maxima() {
        // Minimum frequency and power so high that neither share can grow.
        let p = DeviceProfile {
            f_min: 5e8,
            p_min: 0.19,
            ..profile()
        };
        let (d, trace) = solve(&p, &channel(), 1e-6).unwrap();
        assert!(trace.is_empty());
        assert_eq!(d.nu, 0.0);
        assert!(d.theta_at_max && d.pi_at_max);
        assert!(d.theta + d.pi <= 1.0);
    }

    #[test]
    fn trace_csv_header() {
        let (_, trace) = solve(&profile(), &channel(), 1e-6).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,nu_lo,nu_hi,theta,pi,E_total\n"));
        assert_eq!(text.lines().count(), trace.len() + 1);
    }
}
