//! Run configuration and the experiment commands.
//!
//! A run is described by one TOML file. `[device]` holds values shared by
//! every device, `[[devices]]` entries override them per device (in order),
//! and `[fleet]`, `[diffusion]` and `[allocator]` configure training and the
//! solver. Every key is optional; unknown keys are rejected.
//!
//! Device keys: `I`, `D`, `C` (cycles/sample), `f_min`, `f_max` (Hz), `tau`,
//! `P_min`, `P_max` (W), `delta`, `Delta`, `T_max_s`, `M`, `B_hz`,
//! `N0_dBm_per_MHz` or `N0_W_per_Hz` (one of the two), `h2`, `d_m`, `eta`.
//! When no `Delta` is given anywhere, devices cycle through demands that
//! give 6, 7 and 8 bits at `delta = 1`.
//!
//! Output CSVs all start with a header row and print floats at full
//! precision:
//!
//! - `allocate.csv`: `device_id,status,L,bits,theta,pi,f,P,E_cmp,E_com,E_total,clamped_theta,clamped_pi[,E_oracle,oracle_gap]`
//! - `sweep_<param>.csv`: `<param>,status,E_device_0..,fleet_total`
//! - `nu_trace.csv`: `iteration,nu_lo,nu_hi,theta,pi,E_total`
//! - `quantbench.csv`: `distribution,L,bits,M,trials,empirical_mse,bound,ratio,max_abs_z`
//! - `rounds_<mode>.csv`: `round,total_energy_J,total_bits,mean_loss,frechet`
//! - `devices_<mode>.csv`: `round,device_id,E_cmp,E_com,T_cmp,T_com,bits_sent,local_loss,quant_mse`
//! - `summary.csv`: `mode,final_frechet,total_energy_J,total_bits,even_split_energy_J`

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::allocator::{self, SolveOptions};
use crate::diffusion::{Architecture, Mixture};
use crate::error::{Error, Result};
use crate::federation::{
    self, AllocationPolicy, Device, DiffusionSettings, FleetConfig, PartitionMode, QuantMode,
};
use crate::linkmodel::{dbm_per_mhz_to_w_per_hz, ChannelParams, DeviceProfile, EnergyObjective};
use crate::quant::{self, level_for_demand, WeightVector};
use crate::rng::{self, purpose};

/// Error demands that give 6, 7 and 8 bits at `delta = 1`.
pub const DEFAULT_DEMANDS: [f64; 3] = [2.17e-4, 5e-5, 1.25e-5];

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Per-device keys; unset values fall back to `[device]`, then to defaults.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceKeys {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub I: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub D: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub C: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub P_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub P_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub Delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub T_max_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub M: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub B_hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub N0_dBm_per_MHz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub N0_W_per_Hz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl DeviceKeys {
    /// `self` with unset fields taken from `base`.
    fn over(&self, base: &DeviceKeys) -> Result<DeviceKeys> {
        macro_rules! pick {
            ($f:ident) => {
                self.$f.or(base.$f)
            };
        }
        // A noise unit given here replaces the other unit from the base.
        let (n0_dbm, n0_w) = match (self.N0_dBm_per_MHz, self.N0_W_per_Hz) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give noise as either N0_dBm_per_MHz or N0_W_per_Hz, not both".into(),
                ))
            }
            (Some(d), None) => (Some(d), None),
            (None, Some(w)) => (None, Some(w)),
            (None, None) => (base.N0_dBm_per_MHz, base.N0_W_per_Hz),
        };
        Ok(DeviceKeys {
            I: pick!(I),
            D: pick!(D),
            C: pick!(C),
            f_min: pick!(f_min),
            f_max: pick!(f_max),
            tau: pick!(tau),
            P_min: pick!(P_min),
            P_max: pick!(P_max),
            delta: pick!(delta),
            Delta: pick!(Delta),
            T_max_s: pick!(T_max_s),
            M: pick!(M),
            B_hz: pick!(B_hz),
            N0_dBm_per_MHz: n0_dbm,
            N0_W_per_Hz: n0_w,
            h2: pick!(h2),
            d_m: pick!(d_m),
            eta: pick!(eta),
        })
    }

    fn noise_psd(&self) -> Result<f64> {
        match (self.N0_dBm_per_MHz, self.N0_W_per_Hz) {
            (Some(_), Some(_)) => Err(Error::Config(
                "give noise as either N0_dBm_per_MHz or N0_W_per_Hz, not both".into(),
            )),
            (Some(dbm), None) => Ok(dbm_per_mhz_to_w_per_hz(dbm)),
            (None, Some(w)) => Ok(w),
            (None, None) => Ok(dbm_per_mhz_to_w_per_hz(-95.0)),
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetKeys {
    pub K: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub quant_mode: String,
    /// `optimal` or `even`.
    pub allocation: String,
    pub partition: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participation: Option<usize>,
    pub quality_every: usize,
    pub quality_samples: usize,
}

impl Default for FleetKeys {
    fn default() -> Self {
        Self {
            K: 10,
            rounds: 200,
            local_iters: 5,
            quant_mode: "on_demand".into(),
            allocation: "optimal".into(),
            partition: "iid_uniform".into(),
            participation: None,
            quality_every: 10,
            quality_samples: 2000,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionKeys {
    pub T: usize,
    pub beta_1: f64,
    pub beta_T: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub time_embed: usize,
    pub modes: usize,
    pub radius: f64,
    pub variance: f64,
}

impl Default for DiffusionKeys {
    fn default() -> Self {
        let d = DiffusionSettings::default();
        let m = Mixture::default();
        Self {
            T: d.steps,
            beta_1: d.beta_1,
            beta_T: d.beta_t,
            batch_size: d.batch_size,
            lr: d.lr,
            hidden: d.arch.hidden,
            time_embed: d.arch.time_embed,
            modes: m.modes,
            radius: m.radius,
            variance: m.variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocatorKeys {
    pub tolerance: f64,
    /// `physical` or `printed_no_airtime`.
    pub objective: String,
    /// Grid resolution of `allocate --oracle`.
    pub oracle_resolution: f64,
}

impl Default for AllocatorKeys {
    fn default() -> Self {
        Self {
            tolerance: allocator::DEFAULT_TOLERANCE,
            objective: "physical".into(),
            oracle_resolution: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub device: DeviceKeys,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<DeviceKeys>,
    #[serde(default)]
    pub fleet: FleetKeys,
    #[serde(default)]
    pub diffusion: DiffusionKeys,
    #[serde(default)]
    pub allocator: AllocatorKeys,
}

fn default_seed() -> u64 {
    7
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            out: None,
            device: DeviceKeys::default(),
            devices: Vec::new(),
            fleet: FleetKeys::default(),
            diffusion: DiffusionKeys::default(),
            allocator: AllocatorKeys::default(),
        }
    }
}

fn builtin_device(index: usize) -> DeviceKeys {
    DeviceKeys {
        I: Some(1.0),
        D: Some(512.0),
        C: Some(3.25e6),
        f_min: Some(1e7),
        f_max: Some(1e9),
        tau: Some(1e-26),
        P_min: Some(1e-3),
        P_max: Some(0.2),
        delta: Some(1.0),
        Delta: Some(DEFAULT_DEMANDS[index % DEFAULT_DEMANDS.len()]),
        T_max_s: Some(15.0),
        M: Some(37_000_000),
        B_hz: Some(50e6),
        N0_dBm_per_MHz: Some(-95.0),
        N0_W_per_Hz: None,
        h2: Some(1e-3),
        d_m: Some(45.0),
        eta: Some(3.76),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that do not need resolved devices.
    fn check(&self) -> Result<()> {
        if self.fleet.K == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.devices.len() > self.fleet.K {
            return Err(Error::Config(format!(
                "{} [[devices]] entries for K = {}",
                self.devices.len(),
                self.fleet.K
            )));
        }
        self.quant_mode()?;
        self.allocation()?;
        self.partition()?;
        self.objective()?;
        Ok(())
    }

    pub fn quant_mode(&self) -> Result<QuantMode> {
        self.fleet.quant_mode.parse()
    }

    pub fn allocation(&self) -> Result<AllocationPolicy> {
        match self.fleet.allocation.as_str() {
            "optimal" => Ok(AllocationPolicy::Optimal),
            "even" => Ok(AllocationPolicy::EVEN),
            other => Err(Error::Config(format!(
                "unknown allocation policy {other:?}"
            ))),
        }
    }

    pub fn partition(&self) -> Result<PartitionMode> {
        self.fleet.partition.parse()
    }

    pub fn objective(&self) -> Result<EnergyObjective> {
        match self.allocator.objective.as_str() {
            "physical" => Ok(EnergyObjective::Physical),
            "printed_no_airtime" => Ok(EnergyObjective::PrintedNoAirtime),
            other => Err(Error::Config(format!("unknown energy objective {other:?}"))),
        }
    }

    pub fn solve_options(&self) -> Result<SolveOptions> {
        Ok(SolveOptions {
            tolerance: self.allocator.tolerance,
            objective: self.objective()?,
        })
    }

    /// Fully resolved devices, validated.
    pub fn devices(&self) -> Result<Vec<Device>> {
        (0..self.fleet.K)
            .map(|k| {
                let base = self.device.over(&builtin_device(k))?;
                let keys = match self.devices.get(k) {
                    Some(o) => o.over(&base)?,
                    None => base,
                };
                resolve(&keys).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("device {k}: {msg}")),
                    other => Error::Config(format!("device {k}: {other}")),
                })
            })
            .collect()
    }

    pub fn fleet_config(&self) -> Result<FleetConfig> {
        let d = &self.diffusion;
        let settings = DiffusionSettings {
            steps: d.T,
            beta_1: d.beta_1,
            beta_t: d.beta_T,
            arch: Architecture {
                time_embed: d.time_embed,
                hidden: d.hidden,
            },
            batch_size: d.batch_size,
            lr: d.lr,
        };
        if settings.arch.time_embed == 0
            || !settings.arch.time_embed.is_multiple_of(2)
            || settings.arch.hidden == 0
        {
            return Err(Error::Config(
                "time_embed must be even and positive, hidden positive".into(),
            ));
        }
        if !(d.lr > 0.0) || d.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if d.modes == 0 || !(d.radius >= 0.0) || !(d.variance >= 0.0) {
            return Err(Error::Config("invalid mixture".into()));
        }
        crate::diffusion::linear_schedule(d.T, d.beta_1, d.beta_T)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(FleetConfig {
            devices: self.devices()?,
            rounds: self.fleet.rounds,
            local_iters: self.fleet.local_iters,
            seed: self.seed,
            quant_mode: self.quant_mode()?,
            allocation: self.allocation()?,
            partition: self.partition()?,
            participation: self.fleet.participation,
            diffusion: settings,
            mixture: Mixture {
                modes: d.modes,
                radius: d.radius,
                variance: d.variance,
            },
            quality_every: self.fleet.quality_every,
            quality_samples: self.fleet.quality_samples,
            tolerance: self.allocator.tolerance,
        })
    }
}

fn resolve(k: &DeviceKeys) -> Result<Device> {
    let get =
        |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Config(format!("missing {name}")));
    let profile = DeviceProfile {
        iterations: get(k.I, "I")?,
        data_size: get(k.D, "D")?,
        workload: get(k.C, "C")?,
        f_min: get(k.f_min, "f_min")?,
        f_max: get(k.f_max, "f_max")?,
        tau: get(k.tau, "tau")?,
        p_min: get(k.P_min, "P_min")?,
        p_max: get(k.P_max, "P_max")?,
        delta: get(k.delta, "delta")?,
        error_demand: get(k.Delta, "Delta")?,
        t_max: get(k.T_max_s, "T_max_s")?,
        model_size: k.M.ok_or_else(|| Error::Config("missing M".into()))?,
    };
    let channel = ChannelParams {
        bandwidth: get(k.B_hz, "B_hz")?,
        noise_psd: k.noise_psd()?,
        gain: get(k.h2, "h2")?,
        distance: get(k.d_m, "d_m")?,
        pathloss_exp: get(k.eta, "eta")?,
    };
    profile.validate()?;
    channel.validate()?;
    Ok(Device { profile, channel })
}

#[derive(Debug, Parser)]
#[command(
    name = "fedquant",
    version,
    about = "Quantized federated diffusion on simulated edge devices"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "t_max")]
    TMax,
    #[value(name = "distance")]
    Distance,
}

impl SweepParam {
    fn column(self) -> &'static str {
        match self {
            SweepParam::TMax => "t_max",
            SweepParam::Distance => "distance",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-device energy-minimal allocation.
    Allocate {
        /// Add a brute-force grid-search column.
        #[arg(long)]
        oracle: bool,
    },
    /// Fleet energy over a range of T_max or distance.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
    },
    /// Multiplier bisection trace for one device.
    NuTrace {
        #[arg(long, default_value_t = 0)]
        device: usize,
    },
    /// Quantizer error and bias statistics.
    Quantbench {
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        size: usize,
    },
    /// Federated training, optionally comparing quantization modes.
    Train {
        /// Comma-separated modes, e.g. none,fixed8,on_demand.
        #[arg(long, value_delimiter = ',')]
        compare: Option<Vec<String>>,
    },
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_infeasible() {
        return EXIT_INFEASIBLE;
    }
    match e {
        Error::Config(_)
        | Error::InvalidDemand { .. }
        | Error::InvalidSchedule(_)
        | Error::FrequencyOutOfRange { .. } => EXIT_CONFIG,
        Error::Device { source, .. } => exit_code(source),
        _ => EXIT_FAILURE,
    }
}

/// Run a parsed command; returns the exit code for non-error outcomes.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Allocate { oracle } => cmd_allocate(&cfg, *oracle, &out.join("allocate.csv")),
        Command::Sweep {
            param,
            from,
            to,
            steps,
        } => {
            let (lo, hi) = match param {
                SweepParam::TMax => (from.unwrap_or(13.0), to.unwrap_or(18.0)),
                SweepParam::Distance => (from.unwrap_or(45.0), to.unwrap_or(90.0)),
            };
            let path = out.join(format!("sweep_{}.csv", param.column()));
            cmd_sweep(&cfg, *param, &sweep_points(lo, hi, *steps)?, &path)
        }
        Command::NuTrace { device } => cmd_nu_trace(&cfg, *device, &out.join("nu_trace.csv")),
        Command::Quantbench { trials, size } => {
            cmd_quantbench(&cfg, *trials, *size, &out.join("quantbench.csv"))
        }
        Command::Train { compare } => {
            let modes = match compare {
                Some(list) => list
                    .iter()
                    .map(|m| m.trim().parse())
                    .collect::<Result<Vec<QuantMode>>>()?,
                None => vec![cfg.quant_mode()?],
            };
            cmd_train(&cfg, &modes, &out)
        }
    }
}

/// `steps` evenly spaced points from `lo` to `hi` inclusive.
pub fn sweep_points(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(
            "sweep needs finite bounds and at least one step".into(),
        ));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps)
        .map(|i| {
            if i + 1 == steps {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect())
}

fn fmt_f(x: f64) -> String {
    x.to_string()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

/// One allocation row per device; returns [`EXIT_INFEASIBLE`] if any device
/// is infeasible.
pub fn cmd_allocate(cfg: &RunConfig, oracle: bool, path: &Path) -> Result<i32> {
    let devices = cfg.devices()?;
    let opts = cfg.solve_options()?;
    let mut w = csv_writer(path)?;
    let mut header = vec![
        "device_id",
        "status",
        "L",
        "bits",
        "theta",
        "pi",
        "f",
        "P",
        "E_cmp",
        "E_com",
        "E_total",
        "clamped_theta",
        "clamped_pi",
    ];
    if oracle {
        header.extend(["E_oracle", "oracle_gap"]);
    }
    w.write_record(&header)?;
    let mut code = EXIT_OK;
    for (id, dev) in devices.iter().enumerate() {
        let level = level_for_demand(dev.profile.demand())?;
        match allocator::solve_for_level(&dev.profile, &dev.channel, level, opts) {
            Ok((d, _)) => {
                let mut row = vec![
                    id.to_string(),
                    "OK".into(),
                    d.levels.to_string(),
                    d.bits_per_param.to_string(),
                    fmt_f(d.theta),
                    fmt_f(d.pi),
                    fmt_f(d.f),
                    fmt_f(d.p),
                    fmt_f(d.e_cmp),
                    fmt_f(d.e_com),
                    fmt_f(d.e_total),
                    d.clamped_theta.to_string(),
                    d.clamped_pi.to_string(),
                ];
                if oracle {
                    let o = allocator::oracle_grid_search_with(
                        &dev.profile,
                        &dev.channel,
                        d.payload_bits,
                        cfg.allocator.oracle_resolution,
                        opts.objective,
                    )?;
                    row.push(fmt_f(o.e_total));
                    row.push(fmt_f((d.e_total - o.e_total) / o.e_total));
                }
                w.write_record(&row)?;
            }
            Err(e) if e.is_infeasible() => {
                code = EXIT_INFEASIBLE;
                let mut row = vec![
                    id.to_string(),
                    "INFEASIBLE".into(),
                    level.levels.to_string(),
                    level.bits.to_string(),
                ];
                row.resize(header.len(), String::new());
                w.write_record(&row)?;
            }
            Err(e) => return Err(e.on_device(id)),
        }
    }
    w.flush()?;
    Ok(code)
}

/// Fleet energy at each parameter value.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], path: &Path) -> Result<i32> {
    let devices = cfg.devices()?;
    let opts = cfg.solve_options()?;
    let mut w = csv_writer(path)?;
    let mut header = vec![param.column().to_string(), "status".into()];
    header.extend((0..devices.len()).map(|k| format!("E_device_{k}")));
    header.push("fleet_total".into());
    w.write_record(&header)?;
    let mut code = EXIT_OK;
    for &v in values {
        let mut energies = Vec::with_capacity(devices.len());
        let mut feasible = true;
        for (id, dev) in devices.iter().enumerate() {
            let mut dev = *dev;
            match param {
                SweepParam::TMax => dev.profile.t_max = v,
                SweepParam::Distance => dev.channel.distance = v,
            }
            dev.profile.validate().map_err(|e| e.on_device(id))?;
            dev.channel.validate().map_err(|e| e.on_device(id))?;
            let level = level_for_demand(dev.profile.demand())?;
            match allocator::solve_for_level(&dev.profile, &dev.channel, level, opts) {
                Ok((d, _)) => energies.push(fmt_f(d.e_total)),
                Err(e) if e.is_infeasible() => {
                    feasible = false;
                    energies.push(String::new());
                }
                Err(e) => return Err(e.on_device(id)),
            }
        }
        let mut row = vec![fmt_f(v)];
        if feasible {
            let total: f64 = energies.iter().map(|s| s.parse::<f64>().unwrap()).sum();
            row.push("OK".into());
            row.extend(energies);
            row.push(fmt_f(total));
        } else {
            code = EXIT_INFEASIBLE;
            row.push("INFEASIBLE".into());
            row.extend(energies);
            row.push(String::new());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(code)
}

pub fn cmd_nu_trace(cfg: &RunConfig, device: usize, path: &Path) -> Result<i32> {
    let devices = cfg.devices()?;
    let dev = devices.get(device).ok_or_else(|| {
        Error::Config(format!(
            "device {device} out of range (K = {})",
            devices.len()
        ))
    })?;
    let level = level_for_demand(dev.profile.demand())?;
    let (_, trace) =
        allocator::solve_for_level(&dev.profile, &dev.channel, level, cfg.solve_options()?)
            .map_err(|e| e.on_device(device))?;
    trace.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(EXIT_OK)
}

/// Weight vectors used by the quantizer benchmark.
pub fn bench_vectors(size: usize, seed: u64) -> Vec<(&'static str, WeightVector)> {
    let mut rng = rng::stream(seed, &[purpose::DATA, 99]);
    let gaussian: Vec<f64> = (0..size).map(|_| rng.sample(StandardNormal)).collect();
    let uniform: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..=1.0)).collect();
    vec![
        ("gaussian", WeightVector::from_raw(gaussian)),
        ("uniform", WeightVector::from_raw(uniform)),
    ]
}

pub fn cmd_quantbench(cfg: &RunConfig, trials: usize, size: usize, path: &Path) -> Result<i32> {
    if size == 0 || trials < 2 {
        return Err(Error::Config(
            "quantbench needs size >= 1 and trials >= 2".into(),
        ));
    }
    let mut w = csv_writer(path)?;
    w.write_record([
        "distribution",
        "L",
        "bits",
        "M",
        "trials",
        "empirical_mse",
        "bound",
        "ratio",
        "max_abs_z",
    ])?;
    for levels in [64u32, 128, 256] {
        let mut rows = bench_vectors(size, cfg.seed);
        // Values already on the grid: no rounding error at all.
        let unit = quant::QuantSpec::new(levels, 1.0, -1.0, 1.0)?;
        let on_grid: Vec<f64> = (0..size)
            .map(|i| unit.point((i % levels as usize) as u32))
            .collect();
        rows.push(("grid", WeightVector::from_raw(on_grid)));
        for (name, wv) in rows {
            let spec = quant::build_spec(&wv, levels)?;
            let seed = rng::stream(cfg.seed, &[purpose::QUANTIZE, u64::from(levels)]).random();
            let report = quant::empirical_error_report(&wv, &spec, trials, seed);
            let bias = quant::bias_report(&wv, &spec, trials, seed ^ 1);
            w.write_record([
                name.to_string(),
                levels.to_string(),
                spec.bits().to_string(),
                size.to_string(),
                trials.to_string(),
                fmt_f(report.mse),
                fmt_f(report.bound),
                fmt_f(report.ratio),
                fmt_f(bias.aggregate_z.abs()),
            ])?;
        }
    }
    w.flush()?;
    Ok(EXIT_OK)
}

/// Summary line of one training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: QuantMode,
    pub final_frechet: Option<f64>,
    pub total_energy: f64,
    pub total_bits: u64,
    /// Same run charged at a 50/50 computation/communication split.
    pub even_split_energy: f64,
}

/// Train once per mode with the same seed and write per-mode CSVs.
pub fn train_modes(cfg: &RunConfig, modes: &[QuantMode], out: &Path) -> Result<Vec<ModeSummary>> {
    let base = cfg.fleet_config()?;
    let mut summaries = Vec::with_capacity(modes.len());
    for &mode in modes {
        let fleet = FleetConfig {
            quant_mode: mode,
            ..base.clone()
        };
        let ledger = federation::run_training(fleet.clone())?;
        ledger.write_round_csv(BufWriter::new(File::create(
            out.join(format!("rounds_{mode}.csv")),
        )?))?;
        ledger.write_device_csv(BufWriter::new(File::create(
            out.join(format!("devices_{mode}.csv")),
        )?))?;
        summaries.push(ModeSummary {
            mode,
            final_frechet: ledger.final_frechet(),
            total_energy: ledger.total_energy(),
            total_bits: ledger.total_bits(),
            even_split_energy: federation::energy_under_policy(
                &fleet,
                &ledger,
                AllocationPolicy::EVEN,
            )?,
        });
    }
    let mut w = csv_writer(&out.join("summary.csv"))?;
    w.write_record([
        "mode",
        "final_frechet",
        "total_energy_J",
        "total_bits",
        "even_split_energy_J",
    ])?;
    for s in &summaries {
        w.write_record([
            s.mode.to_string(),
            s.final_frechet.map(fmt_f).unwrap_or_default(),
            fmt_f(s.total_energy),
            s.total_bits.to_string(),
            fmt_f(s.even_split_energy),
        ])?;
    }
    w.flush()?;
    Ok(summaries)
}

pub fn cmd_train(cfg: &RunConfig, modes: &[QuantMode], out: &Path) -> Result<i32> {
    for s in train_modes(cfg, modes, out)? {
        println!(
            "{}: final_frechet={} total_energy_J={} total_bits={}",
            s.mode,
            s.final_frechet.map(fmt_f).unwrap_or_else(|| "-".into()),
            s.total_energy,
            s.total_bits
        );
    }
    Ok(EXIT_OK)
}
