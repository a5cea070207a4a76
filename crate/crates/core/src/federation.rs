//! Federated diffusion training with per-device quantized uploads.
//!
//! Each round every participating device copies the global model, runs a few
//! SGD steps on its own shard, quantizes the result and uploads it. The server
//! decodes the payloads, averages them weighted by shard size, and charges
//! every device the energy of its allocated time split for the bits it sent.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::allocator::{self, AllocationDecision, SolveOptions};
use crate::diffusion::{
    self, linear_schedule, Architecture, Batch, Mixture, NoiseModel, Point, Schedule,
};
use crate::error::{Error, Result};
use crate::linkmodel::{self, ChannelParams, DeviceProfile};
use crate::metrics::{self, GaussianFit};
use crate::quant::{
    self, level_for_demand, ErrorDemand, QuantLevel, QuantizedPayload, WeightVector,
};
use crate::rng::{self, purpose};

/// Bits per parameter charged for unquantized uploads.
pub const FULL_PRECISION_BITS: u32 = 32;

/// How uploads are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// Level from each device's own error demand.
    OnDemand,
    /// Same bit-width for every device.
    Fixed(u32),
    /// 32-bit floats, no quantization.
    None,
}

impl QuantMode {
    /// Level used by a device with the given demand.
    pub fn level(&self, demand: ErrorDemand) -> Result<QuantLevel> {
        match *self {
            QuantMode::OnDemand => level_for_demand(demand),
            QuantMode::Fixed(bits) => {
                if !(1..=31).contains(&bits) {
                    return Err(Error::Config(format!(
                        "fixed bit-width {bits} outside 1..=31"
                    )));
                }
                Ok(QuantLevel {
                    raw: f64::from(1u32 << bits),
                    levels: 1 << bits,
                    bits,
                })
            }
            QuantMode::None => Ok(full_precision()),
        }
    }
}

/// Unquantized 32-bit upload; `levels = 0` marks "no grid".
pub fn full_precision() -> QuantLevel {
    QuantLevel {
        raw: f64::INFINITY,
        levels: 0,
        bits: FULL_PRECISION_BITS,
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMode::OnDemand => write!(f, "on_demand"),
            QuantMode::Fixed(b) => write!(f, "fixed{b}"),
            QuantMode::None => write!(f, "none"),
        }
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_demand" => Ok(QuantMode::OnDemand),
            "none" => Ok(QuantMode::None),
            _ => s
                .strip_prefix("fixed")
                .and_then(|b| b.parse::<u32>().ok())
                .filter(|b| (1..=31).contains(b))
                .map(QuantMode::Fixed)
                .ok_or_else(|| Error::Config(format!("unknown quantization mode {s:?}"))),
        }
    }
}

/// How each device's time budget is split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocationPolicy {
    /// Energy-minimal split from the solver.
    Optimal,
    /// Fixed computation share, the rest for communication.
    Fixed(f64),
}

impl AllocationPolicy {
    pub const EVEN: AllocationPolicy = AllocationPolicy::Fixed(0.5);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    IidUniform,
    /// Each device over-samples two neighbouring mixture modes.
    ModeSkew,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid_uniform" => Ok(PartitionMode::IidUniform),
            "mode_skew" => Ok(PartitionMode::ModeSkew),
            _ => Err(Error::Config(format!("unknown partition mode {s:?}"))),
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::IidUniform => "iid_uniform",
            PartitionMode::ModeSkew => "mode_skew",
        })
    }
}

/// Split labelled points into `k` disjoint shards covering the input.
pub fn partition_dataset(
    points: &[(Point, usize)],
    k: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<Vec<Point>>> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewSamples {
            needed: k.max(1),
            got: points.len(),
        });
    }
    let mut rng = rng::stream(seed, &[purpose::PARTITION]);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    let mut shards: Vec<Vec<Point>> = vec![Vec::new(); k];
    match mode {
        PartitionMode::IidUniform => {
            let base = points.len() / k;
            let extra = points.len() % k;
            let mut it = order.into_iter();
            for (d, shard) in shards.iter_mut().enumerate() {
                let n = base + usize::from(d < extra);
                shard.extend(it.by_ref().take(n).map(|i| points[i].0));
            }
        }
        PartitionMode::ModeSkew => {
            let modes = points.iter().map(|p| p.1).max().unwrap_or(0) + 1;
            // Device d weights its two home modes 4x higher than the others.
            let weight = |d: usize, m: usize| {
                let home = (d % modes == m) || ((d + 1) % modes == m);
                if home {
                    4.0
                } else {
                    1.0
                }
            };
            for i in order {
                let m = points[i].1;
                let total: f64 = (0..k).map(|d| weight(d, m)).sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = k - 1;
                for d in 0..k {
                    u -= weight(d, m);
                    if u < 0.0 {
                        pick = d;
                        break;
                    }
                }
                shards[pick].push(points[i].0);
            }
            // Every device needs at least one point.
            for d in 0..k {
                if shards[d].is_empty() {
                    let donor = (0..k).max_by_key(|&j| shards[j].len()).unwrap();
                    let p = shards[donor].pop().unwrap();
                    shards[d].push(p);
                }
            }
        }
    }
    Ok(shards)
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// What a device sends, plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpload {
    /// Locally trained weights before quantization.
    pub local: WeightVector,
    /// Weights as the server reconstructs them.
    pub received: WeightVector,
    pub payload: Option<QuantizedPayload>,
    pub bits_sent: u64,
    pub local_loss: f64,
    /// Mean squared per-parameter quantization error.
    pub quant_mse: f64,
}

/// One device's round: copy the global model, train, quantize.
pub fn local_update(
    global: &NoiseModel,
    data: &[Point],
    demand: ErrorDemand,
    schedule: &Schedule,
    training: &LocalTraining,
    mode: QuantMode,
    seed: u64,
) -> Result<LocalUpload> {
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut model = global.clone();
    let mut batch_rng = rng::stream(seed, &[purpose::BATCH]);
    let batch_size = training.batch_size.max(1);
    let local_loss = if training.local_iters == 0 {
        let batch = Batch::sample(data, batch_size, schedule, &mut batch_rng);
        diffusion::loss(&model, &batch, schedule)?
    } else {
        let mut sum = 0.0;
        for _ in 0..training.local_iters {
            let batch = Batch::sample(data, batch_size, schedule, &mut batch_rng);
            let (l, g) = diffusion::loss_and_grad(&model, &batch, schedule)?;
            diffusion::sgd_step(&mut model, &g, training.lr)?;
            sum += l;
        }
        sum / training.local_iters as f64
    };
    let local = model.into_params();
    if local.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    let level = mode.level(demand)?;
    match mode {
        QuantMode::None => Ok(LocalUpload {
            received: local.clone(),
            bits_sent: quant::payload_bits(local.len() as u64, FULL_PRECISION_BITS),
            local,
            payload: None,
            local_loss,
            quant_mse: 0.0,
        }),
        QuantMode::OnDemand | QuantMode::Fixed(_) => {
            let spec = quant::build_spec(&local, level.levels)?;
            let mut qrng = rng::stream(seed, &[purpose::QUANTIZE]);
            let payload = quant::quantize_with(&local, &spec, &mut qrng);
            // Through the wire format, as the server would see it.
            let wire = QuantizedPayload::from_bytes(&payload.to_bytes())?;
            let received = quant::dequantize(&wire)?;
            let quant_mse = local.squared_distance(&received) / local.len() as f64;
            Ok(LocalUpload {
                bits_sent: wire.payload_bits(),
                local,
                received,
                payload: Some(wire),
                local_loss,
                quant_mse,
            })
        }
    }
}

/// Weighted average `sum_k (D_k / sum D) w_k`, accumulated in index order.
pub fn aggregate_fedavg(uploads: &[&WeightVector], sizes: &[f64]) -> Result<WeightVector> {
    if uploads.is_empty() || uploads.len() != sizes.len() {
        return Err(Error::ShapeError {
            expected: uploads.len().max(1),
            got: sizes.len(),
        });
    }
    if sizes.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    let dim = uploads[0].len();
    if let Some(bad) = uploads.iter().find(|u| u.len() != dim) {
        return Err(Error::ShapeError {
            expected: dim,
            got: bad.len(),
        });
    }
    let total: f64 = sizes.iter().sum();
    let mut out = vec![0.0; dim];
    for (w, &s) in uploads.iter().zip(sizes) {
        let k = s / total;
        for (o, v) in out.iter_mut().zip(w.as_slice()) {
            *o += k * v;
        }
    }
    Ok(WeightVector::from_raw(out))
}

/// One edge device in the fleet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Device {
    pub profile: DeviceProfile,
    pub channel: ChannelParams,
}

/// Diffusion model and local-training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSettings {
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub arch: Architecture,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_1: 1e-3,
            beta_t: 0.5,
            arch: Architecture::default(),
            batch_size: 128,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetConfig {
    pub devices: Vec<Device>,
    pub rounds: usize,
    pub local_iters: usize,
    pub seed: u64,
    pub quant_mode: QuantMode,
    pub allocation: AllocationPolicy,
    pub partition: PartitionMode,
    /// Devices sampled per round; `None` means all.
    pub participation: Option<usize>,
    pub diffusion: DiffusionSettings,
    pub mixture: Mixture,
    /// Evaluate sample quality every this many rounds (and after the last).
    pub quality_every: usize,
    pub quality_samples: usize,
    pub tolerance: f64,
}

/// Per-device line of a round report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviceRound {
    pub device_id: usize,
    #[serde(rename = "E_cmp")]
    pub e_cmp: f64,
    #[serde(rename = "E_com")]
    pub e_com: f64,
    #[serde(rename = "T_cmp")]
    pub t_cmp: f64,
    #[serde(rename = "T_com")]
    pub t_com: f64,
    pub bits_sent: u64,
    pub local_loss: f64,
    pub quant_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub devices: Vec<DeviceRound>,
    pub total_energy: f64,
    pub total_bits: u64,
    pub mean_loss: f64,
    /// Fréchet distance of global-model samples, on evaluation rounds.
    pub frechet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub reports: Vec<RoundReport>,
    pub final_weights: WeightVector,
    pub decisions: Vec<AllocationDecision>,
    pub config: FleetConfig,
    pub seed: u64,
}

impl RunLedger {
    pub fn total_energy(&self) -> f64 {
        self.reports.iter().map(|r| r.total_energy).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.reports.iter().map(|r| r.total_bits).sum()
    }

    pub fn final_frechet(&self) -> Option<f64> {
        self.reports.iter().rev().find_map(|r| r.frechet)
    }

    /// One row per device per round.
    pub fn write_device_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        w.write_record([
            "round",
            "device_id",
            "E_cmp",
            "E_com",
            "T_cmp",
            "T_com",
            "bits_sent",
            "local_loss",
            "quant_mse",
        ])?;
        for r in &self.reports {
            for d in &r.devices {
                w.write_record([
                    r.round.to_string(),
                    d.device_id.to_string(),
                    d.e_cmp.to_string(),
                    d.e_com.to_string(),
                    d.t_cmp.to_string(),
                    d.t_com.to_string(),
                    d.bits_sent.to_string(),
                    d.local_loss.to_string(),
                    d.quant_mse.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per round with the aggregate fields.
    pub fn write_round_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "round",
            "total_energy_J",
            "total_bits",
            "mean_loss",
            "frechet",
        ])?;
        for r in &self.reports {
            w.write_record([
                r.round.to_string(),
                r.total_energy.to_string(),
                r.total_bits.to_string(),
                r.mean_loss.to_string(),
                r.frechet.map(|f| f.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Order in which device updates execute inside a round. Results do not
/// depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
    Reversed,
}

/// A fleet ready to train.
pub struct Federation {
    config: FleetConfig,
    schedule: Schedule,
    shards: Vec<Vec<Point>>,
    reference: GaussianFit,
    /// Profiles with the model size set to the trained network.
    profiles: Vec<DeviceProfile>,
    decisions: Vec<AllocationDecision>,
    global: NoiseModel,
    next_round: usize,
    execution: Execution,
}

impl Federation {
    /// Build data shards, the reference set, the initial model and every
    /// device's allocation. Fails on the first infeasible device.
    pub fn new(config: FleetConfig) -> Result<Self> {
        let k = config.devices.len();
        if k == 0 {
            return Err(Error::Config("fleet has no devices".into()));
        }
        if let Some(m) = config.participation {
            if m == 0 || m > k {
                return Err(Error::Config(format!("participation {m} outside 1..={k}")));
            }
        }
        let d = &config.diffusion;
        let schedule = linear_schedule(d.steps, d.beta_1, d.beta_t)?;
        let param_count = d.arch.param_count() as u64;

        let total: usize = config
            .devices
            .iter()
            .map(|dev| dev.profile.data_size.round().max(1.0) as usize)
            .sum();
        let mut data_rng = rng::stream(config.seed, &[purpose::DATA]);
        let points = config.mixture.sample_labelled(total, &mut data_rng);
        let shards = partition_dataset(&points, k, config.partition, config.seed)?;

        let mut ref_rng = rng::stream(config.seed, &[purpose::REFERENCE]);
        let reference = metrics::fit_gaussian(
            &config
                .mixture
                .sample(config.quality_samples.max(2), &mut ref_rng),
        )?;

        let mut profiles = Vec::with_capacity(k);
        let mut decisions = Vec::with_capacity(k);
        for (id, dev) in config.devices.iter().enumerate() {
            let profile = DeviceProfile {
                model_size: param_count,
                ..dev.profile
            };
            let decision = decide(
                &profile,
                &dev.channel,
                config.quant_mode,
                config.allocation,
                config.tolerance,
            )
            .map_err(|e| e.on_device(id))?;
            profiles.push(profile);
            decisions.push(decision);
        }

        let global = NoiseModel::init(d.arch, config.seed);
        Ok(Self {
            config,
            schedule,
            shards,
            reference,
            profiles,
            decisions,
            global,
            next_round: 0,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn decisions(&self) -> &[AllocationDecision] {
        &self.decisions
    }

    pub fn shards(&self) -> &[Vec<Point>] {
        &self.shards
    }

    pub fn global(&self) -> &NoiseModel {
        &self.global
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let k = self.config.devices.len();
        match self.config.participation {
            None => (0..k).collect(),
            Some(m) => {
                let mut rng = rng::stream(self.config.seed, &[purpose::SELECT, round as u64]);
                let mut chosen = rand::seq::index::sample(&mut rng, k, m).into_vec();
                chosen.sort_unstable();
                chosen
            }
        }
    }

    /// Sample quality of the current global model.
    pub fn evaluate(&self, round: usize) -> Result<f64> {
        let samples = diffusion::sample(
            &self.global,
            &self.schedule,
            self.config.quality_samples.max(2),
            rng::stream(self.config.seed, &[purpose::SAMPLE, round as u64]).random(),
        );
        metrics::frechet_2d(&metrics::fit_gaussian(&samples)?, &self.reference)
    }

    /// Execute the next round.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.next_round;
        let ids = self.participants(round);
        let training = LocalTraining {
            local_iters: self.config.local_iters,
            batch_size: self.config.diffusion.batch_size,
            lr: self.config.diffusion.lr,
        };
        let work = |id: usize| -> Result<LocalUpload> {
            let seed = rng::stream(self.config.seed, &[round as u64, id as u64]).random();
            local_update(
                &self.global,
                &self.shards[id],
                self.profiles[id].demand(),
                &self.schedule,
                &training,
                self.config.quant_mode,
                seed,
            )
            .map_err(|e| e.on_device(id))
        };
        let uploads: Vec<LocalUpload> = match self.execution {
            Execution::Parallel => ids.par_iter().map(|&id| work(id)).collect::<Result<_>>()?,
            Execution::Sequential => ids.iter().map(|&id| work(id)).collect::<Result<_>>()?,
            Execution::Reversed => {
                let mut v = ids
                    .iter()
                    .rev()
                    .map(|&id| work(id))
                    .collect::<Result<Vec<_>>>()?;
                v.reverse();
                v
            }
        };

        let received: Vec<&WeightVector> = uploads.iter().map(|u| &u.received).collect();
        let sizes: Vec<f64> = ids.iter().map(|&id| self.shards[id].len() as f64).collect();
        let aggregated = aggregate_fedavg(&received, &sizes)?;
        self.global = NoiseModel::from_params(self.config.diffusion.arch, aggregated)?;

        let mut devices = Vec::with_capacity(ids.len());
        for (&id, up) in ids.iter().zip(&uploads) {
            let d = &self.decisions[id];
            let profile = &self.profiles[id];
            let e = linkmodel::total_energy_split(
                profile,
                &self.config.devices[id].channel,
                up.bits_sent,
                d.theta,
                d.pi,
            )
            .map_err(|e| e.on_device(id))?;
            devices.push(DeviceRound {
                device_id: id,
                e_cmp: e.e_cmp,
                e_com: e.e_com,
                t_cmp: d.theta * profile.t_max,
                t_com: if up.bits_sent == 0 {
                    0.0
                } else {
                    d.pi * profile.t_max
                },
                bits_sent: up.bits_sent,
                local_loss: up.local_loss,
                quant_mse: up.quant_mse,
            });
        }
        let total_energy = devices.iter().map(|d| d.e_cmp + d.e_com).sum();
        let total_bits = devices.iter().map(|d| d.bits_sent).sum();
        let mean_loss = devices.iter().map(|d| d.local_loss).sum::<f64>() / devices.len() as f64;

        let every = self.config.quality_every;
        let last = round + 1 == self.config.rounds;
        let frechet = if last || (every > 0 && (round + 1).is_multiple_of(every)) {
            Some(self.evaluate(round)?)
        } else {
            None
        };
        self.next_round += 1;
        Ok(RoundReport {
            round,
            devices,
            total_energy,
            total_bits,
            mean_loss,
            frechet,
        })
    }

    /// Run every configured round.
    pub fn run(mut self) -> Result<RunLedger> {
        let mut reports = Vec::with_capacity(self.config.rounds);
        while self.next_round < self.config.rounds {
            reports.push(self.run_round()?);
        }
        Ok(RunLedger {
            reports,
            final_weights: self.global.into_params(),
            decisions: self.decisions,
            seed: self.config.seed,
            config: self.config,
        })
    }
}

/// Allocation for one device under a quantization mode and split policy.
pub fn decide(
    profile: &DeviceProfile,
    channel: &ChannelParams,
    mode: QuantMode,
    policy: AllocationPolicy,
    tolerance: f64,
) -> Result<AllocationDecision> {
    let level = mode.level(profile.demand())?;
    match policy {
        AllocationPolicy::Optimal => allocator::solve_for_level(
            profile,
            channel,
            level,
            SolveOptions {
                tolerance,
                ..Default::default()
            },
        )
        .map(|(d, _)| d),
        AllocationPolicy::Fixed(theta) => allocator::fixed_split(profile, channel, level, theta),
    }
}

/// Fleet energy of a finished run re-charged under another split policy.
///
/// Training does not depend on the split, so this equals the energy the same
/// run would have reported had it been configured with `policy`.
pub fn energy_under_policy(
    config: &FleetConfig,
    ledger: &RunLedger,
    policy: AllocationPolicy,
) -> Result<f64> {
    let param_count = config.diffusion.arch.param_count() as u64;
    let mut decisions = Vec::with_capacity(config.devices.len());
    for (id, dev) in config.devices.iter().enumerate() {
        let profile = DeviceProfile {
            model_size: param_count,
            ..dev.profile
        };
        let d = decide(
            &profile,
            &dev.channel,
            config.quant_mode,
            policy,
            config.tolerance,
        )
        .map_err(|e| e.on_device(id))?;
        decisions.push((profile, d));
    }
    let mut total = 0.0;
    for r in &ledger.reports {
        for dr in &r.devices {
            let (profile, d) = &decisions[dr.device_id];
            let ch = &config.devices[dr.device_id].channel;
            total +=
                linkmodel::total_energy_split(profile, ch, dr.bits_sent, d.theta, d.pi)?.total();
        }
    }
    Ok(total)
}

/// Set up and run a full training job.
pub fn run_training(config: FleetConfig) -> Result<RunLedger> {
    Federation::new(config)?.run()
}
