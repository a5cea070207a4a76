//! Per-device computation and uplink models.
//!
//! Computation: `T = I D C / f`, `E = tau f^2 I D C`.
//! Uplink: Shannon rate `r = B log2(1 + g P / (B N0))` with `g = |h|^2 d^-eta`,
//! `T = bits / r`, `E = P T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::ErrorDemand;

/// One edge device's compute, radio and demand parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Local iterations per round.
    pub iterations: f64,
    /// Local dataset size in samples.
    pub data_size: f64,
    /// CPU cycles per sample.
    pub workload: f64,
    pub f_min: f64,
    pub f_max: f64,
    /// Effective switched capacitance.
    pub tau: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Bound on the expected squared weight norm.
    pub delta: f64,
    /// Tolerated squared quantization error.
    pub error_demand: f64,
    /// Round time budget in seconds.
    pub t_max: f64,
    /// Parameter count of the uploaded model.
    pub model_size: u64,
}

impl DeviceProfile {
    /// Total CPU cycles per round, `I D C`.
    pub fn cycles(&self) -> f64 {
        self.iterations * self.data_size * self.workload
    }

    pub fn demand(&self) -> ErrorDemand {
        ErrorDemand {
            delta: self.delta,
            tolerance: self.error_demand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("iterations", self.iterations),
            ("data_size", self.data_size),
            ("workload", self.workload),
            ("f_min", self.f_min),
            ("f_max", self.f_max),
            ("p_min", self.p_min),
            ("p_max", self.p_max),
            ("delta", self.delta),
            ("error_demand", self.error_demand),
            ("t_max", self.t_max),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.f_min > self.f_max {
            return Err(Error::Config("f_min > f_max".into()));
        }
        if self.p_min > self.p_max {
            return Err(Error::Config("p_min > p_max".into()));
        }
        if self.model_size == 0 {
            return Err(Error::Config("model_size must be positive".into()));
        }
        Ok(())
    }
}

/// Uplink channel of one device (its own FDMA band).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Hz.
    pub bandwidth: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Fading power gain `|h|^2`.
    pub gain: f64,
    /// Metres.
    pub distance: f64,
    pub pathloss_exp: f64,
}

impl ChannelParams {
    /// Large-scale gain `|h|^2 d^-eta`.
    pub fn path_gain(&self) -> f64 {
        self.gain * self.distance.powf(-self.pathloss_exp)
    }

    /// Power needed per unit of `2^x - 1`: `B N0 / g`.
    pub fn noise_over_gain(&self) -> f64 {
        self.bandwidth * self.noise_psd / self.path_gain()
    }

    pub fn snr(&self, power: f64) -> f64 {
        self.path_gain() * power / (self.bandwidth * self.noise_psd)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("bandwidth", self.bandwidth),
            ("noise_psd", self.noise_psd),
            ("gain", self.gain),
            ("distance", self.distance),
            ("pathloss_exp", self.pathloss_exp),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Convert a noise density in dBm/MHz to W/Hz.
pub fn dbm_per_mhz_to_w_per_hz(dbm_per_mhz: f64) -> f64 {
    10f64.powf((dbm_per_mhz - 30.0) / 10.0) / 1e6
}

fn check_frequency(profile: &DeviceProfile, f: f64) -> Result<()> {
    if f >= profile.f_min && f <= profile.f_max {
        Ok(())
    } else {
        Err(Error::FrequencyOutOfRange {
            f,
            f_min: profile.f_min,
            f_max: profile.f_max,
        })
    }
}

pub fn comp_time(profile: &DeviceProfile, f: f64) -> Result<f64> {
    check_frequency(profile, f)?;
    Ok(profile.cycles() / f)
}

pub fn comp_energy(profile: &DeviceProfile, f: f64) -> Result<f64> {
    check_frequency(profile, f)?;
    Ok(profile.tau * f * f * profile.cycles())
}

/// Shannon uplink rate in bits/s. Zero power gives zero rate.
pub fn rate(ch: &ChannelParams, power: f64) -> f64 {
    ch.bandwidth * (1.0 + ch.snr(power)).log2()
}

pub fn comm_time(bits: u64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(Error::ZeroRate(rate));
    }
    Ok(bits as f64 / rate)
}

pub fn comm_energy(power: f64, seconds: f64) -> f64 {
    power * seconds
}

/// Transmit power that delivers `bits` in exactly `seconds`.
pub fn power_for(ch: &ChannelParams, bits: u64, seconds: f64) -> f64 {
    if bits == 0 {
        return 0.0;
    }
    let x = bits as f64 / (ch.bandwidth * seconds);
    ch.noise_over_gain() * exp2_m1(x)
}

/// `2^x - 1`, accurate for small `x`.
pub(crate) fn exp2_m1(x: f64) -> f64 {
    (x * std::f64::consts::LN_2).exp_m1()
}

/// Which energy objective the split model evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyObjective {
    /// `E_com = P * pi * T_max`, the product of recovered power and airtime.
    #[default]
    Physical,
    /// `E_com = T_max (B N0 / g) (2^{bits/(pi B T_max)} - 1)`, without the
    /// airtime fraction. Kept for comparison runs.
    PrintedNoAirtime,
}

/// Energies and recovered operating point for a time split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEnergy {
    pub e_cmp: f64,
    pub e_com: f64,
    /// CPU frequency that finishes the workload in `theta * T_max`.
    pub f: f64,
    /// Transmit power that delivers the payload in `pi * T_max`.
    pub p: f64,
}

impl SplitEnergy {
    pub fn total(&self) -> f64 {
        self.e_cmp + self.e_com
    }
}

/// Energy of spending `theta * T_max` computing and `pi * T_max` transmitting.
pub fn total_energy_split(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
    theta: f64,
    pi: f64,
) -> Result<SplitEnergy> {
    total_energy_split_with(profile, ch, bits, theta, pi, EnergyObjective::Physical)
}

pub fn total_energy_split_with(
    profile: &DeviceProfile,
    ch: &ChannelParams,
    bits: u64,
    theta: f64,
    pi: f64,
    objective: EnergyObjective,
) -> Result<SplitEnergy> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InfeasibleSplit(format!(
            "theta={theta} outside (0, 1]"
        )));
    }
    let t_max = profile.t_max;
    let cycles = profile.cycles();
    let f = cycles / (theta * t_max);
    // Relative slack absorbs rounding when theta sits exactly on a bound.
    let slack = 1e-12;
    if f > profile.f_max * (1.0 + slack) || f < profile.f_min * (1.0 - slack) {
        return Err(Error::InfeasibleSplit(format!(
            "theta={theta} needs f={f} Hz outside [{}, {}]",
            profile.f_min, profile.f_max
        )));
    }
    let f = f.clamp(profile.f_min, profile.f_max);
    let e_cmp = profile.tau * cycles.powi(3) / (theta * theta * t_max * t_max);

    if bits == 0 {
        // Nothing to send: no airtime, no radio energy.
        return Ok(SplitEnergy {
            e_cmp,
            e_com: 0.0,
            f,
            p: profile.p_min,
        });
    }
    if !(pi > 0.0 && pi <= 1.0) {
        return Err(Error::InfeasibleSplit(format!("pi={pi} outside (0, 1]")));
    }
    let x = bits as f64 / (pi * ch.bandwidth * t_max);
    let growth = exp2_m1(x);
    let p = ch.noise_over_gain() * growth;
    if !p.is_finite() || p > profile.p_max * (1.0 + slack) || p < profile.p_min * (1.0 - slack) {
        return Err(Error::InfeasibleSplit(format!(
            "pi={pi} needs P={p} W outside [{}, {}]",
            profile.p_min, profile.p_max
        )));
    }
    let p = p.clamp(profile.p_min, profile.p_max);
    let e_com = match objective {
        EnergyObjective::Physical => pi * t_max * ch.noise_over_gain() * growth,
        EnergyObjective::PrintedNoAirtime => t_max * ch.noise_over_gain() * growth,
    };
    Ok(SplitEnergy { e_cmp, e_com, f, p })
}
