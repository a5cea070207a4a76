//! Stochastic weight quantization with demand-driven level counts.
//!
//! Weights are rounded onto a symmetric uniform grid of `L` points spanning
//! `[-max|w|, +max|w|]`. Each coordinate picks one of its two neighbouring grid
//! points at random, with probabilities chosen so the expectation equals the
//! input. Level indices are bit-packed at `log2(L)` bits each.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Flat vector of finite model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWeights(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn squared_distance(&self, other: &WeightVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// A device's quantization error demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDemand {
    /// Bound on the expected squared weight norm.
    pub delta: f64,
    /// Tolerated expected squared quantization error.
    pub tolerance: f64,
}

impl ErrorDemand {
    pub fn new(delta: f64, tolerance: f64) -> Result<Self> {
        let d = Self { delta, tolerance };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.delta) && ok(self.tolerance) {
            Ok(())
        } else {
            Err(Error::InvalidDemand {
                delta: self.delta,
                tolerance: self.tolerance,
            })
        }
    }
}

/// Quantization level picked for a demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantLevel {
    /// Unrounded optimum `sqrt(delta / (2 Delta))`.
    pub raw: f64,
    /// `raw` rounded up to a power of two, at least 2.
    pub levels: u32,
    pub bits: u32,
}

/// Largest supported level count. The header stores `L` as `u32`.
pub const MAX_LEVELS: u32 = 1 << 31;

/// Smallest power-of-two level count meeting the error demand.
pub fn level_for_demand(demand: ErrorDemand) -> Result<QuantLevel> {
    demand.validate()?;
    let raw = (demand.delta / (2.0 * demand.tolerance)).sqrt();
    let ceil = raw.ceil();
    if !(ceil <= f64::from(MAX_LEVELS)) {
        return Err(Error::InvalidDemand {
            delta: demand.delta,
            tolerance: demand.tolerance,
        });
    }
    let levels = (ceil as u32).max(2).next_power_of_two();
    Ok(QuantLevel {
        raw,
        levels,
        bits: levels.trailing_zeros(),
    })
}

/// Grid description: `levels` uniformly spaced points on `[grid_lo, grid_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    levels: u32,
    bits: u32,
    scale: f64,
    grid_lo: f64,
    grid_hi: f64,
}

impl QuantSpec {
    pub fn new(levels: u32, scale: f64, grid_lo: f64, grid_hi: f64) -> Result<Self> {
        if levels < 2 || !levels.is_power_of_two() || levels > MAX_LEVELS {
            return Err(Error::InvalidWeights(format!(
                "level count {levels} is not a power of two >= 2"
            )));
        }
        if !(grid_lo.is_finite() && grid_hi.is_finite() && grid_lo < grid_hi) {
            return Err(Error::InvalidWeights(format!(
                "bad grid bounds [{grid_lo}, {grid_hi}]"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidWeights(format!("bad scale {scale}")));
        }
        Ok(Self {
            levels,
            bits: levels.trailing_zeros(),
            scale,
            grid_lo,
            grid_hi,
        })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn grid_lo(&self) -> f64 {
        self.grid_lo
    }

    pub fn grid_hi(&self) -> f64 {
        self.grid_hi
    }

    /// Distance between adjacent grid points.
    pub fn step(&self) -> f64 {
        (self.grid_hi - self.grid_lo) / f64::from(self.levels - 1)
    }

    /// Value of grid point `index`. Both ends are returned exactly.
    pub fn point(&self, index: u32) -> f64 {
        let top = self.levels - 1;
        if index == 0 {
            self.grid_lo
        } else if index >= top {
            self.grid_hi
        } else {
            self.grid_lo + (self.grid_hi - self.grid_lo) * (f64::from(index) / f64::from(top))
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.levels).map(|l| self.point(l)).collect()
    }

    /// Lower neighbour index `l` with `point(l) <= x <= point(l + 1)`, for
    /// `x` strictly inside the grid.
    fn bracket(&self, x: f64) -> u32 {
        let top = self.levels - 1;
        let pos = (x - self.grid_lo) / self.step();
        let mut l = (pos.floor().max(0.0) as u32).min(top - 1);
        while l > 0 && x < self.point(l) {
            l -= 1;
        }
        while l + 1 < top && x > self.point(l + 1) {
            l += 1;
        }
        l
    }

    /// Stochastic rounding of one value given a uniform draw `u` in `[0, 1)`.
    fn round_with(&self, x: f64, u: f64) -> u32 {
        if x <= self.grid_lo {
            return 0;
        }
        if x >= self.grid_hi {
            return self.levels - 1;
        }
        let l = self.bracket(x);
        let (lo, hi) = (self.point(l), self.point(l + 1));
        if x <= lo {
            return l;
        }
        if x >= hi {
            return l + 1;
        }
        let p_up = (x - lo) / (hi - lo);
        if u < p_up {
            l + 1
        } else {
            l
        }
    }
}

/// Symmetric grid over `[-max|w|, max|w|]`; an all-zero vector gets `[-1, 1]`.
pub fn build_spec(w: &WeightVector, levels: u32) -> Result<QuantSpec> {
    if w.is_empty() || w.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWeights("empty or non-finite weights".into()));
    }
    let mut hi = w.max_abs();
    if hi == 0.0 {
        hi = 1.0;
    }
    QuantSpec::new(levels, hi, -hi, hi)
}

/// Bit-packed level indices plus the grid that decodes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPayload {
    spec: SpecBits,
    len: usize,
    packed: Vec<u8>,
}

// Bitwise copy of the spec so payloads compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SpecBits {
    levels: u32,
    scale: u64,
    grid_lo: u64,
    grid_hi: u64,
}

impl From<QuantSpec> for SpecBits {
    fn from(s: QuantSpec) -> Self {
        Self {
            levels: s.levels,
            scale: s.scale.to_bits(),
            grid_lo: s.grid_lo.to_bits(),
            grid_hi: s.grid_hi.to_bits(),
        }
    }
}

impl SpecBits {
    fn to_spec(self) -> Result<QuantSpec> {
        QuantSpec::new(
            self.levels,
            f64::from_bits(self.scale),
            f64::from_bits(self.grid_lo),
            f64::from_bits(self.grid_hi),
        )
    }
}

/// Header size in bytes: `[M:u64][L:u32][a:f64][grid_lo:f64][grid_hi:f64]`.
pub const HEADER_BYTES: usize = 8 + 4 + 8 + 8 + 8;

fn packed_len(len: usize, bits: u32) -> usize {
    (len * bits as usize).div_ceil(8)
}

impl QuantizedPayload {
    /// Pack explicit level indices. Fails if any index is `>= L`.
    pub fn from_indices(spec: QuantSpec, indices: &[u32]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::CorruptPayload("no indices".into()));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= spec.levels) {
            return Err(Error::CorruptPayload(format!(
                "index {bad} >= level count {}",
                spec.levels
            )));
        }
        let bits = spec.bits;
        let mut packed = vec![0u8; packed_len(indices.len(), bits)];
        let mut bitpos = 0usize;
        for &idx in indices {
            let mut v = u64::from(idx);
            let mut remaining = bits as usize;
            while remaining > 0 {
                let byte = bitpos / 8;
                let off = bitpos % 8;
                let take = (8 - off).min(remaining);
                packed[byte] |= ((v & ((1 << take) - 1)) as u8) << off;
                v >>= take;
                bitpos += take;
                remaining -= take;
            }
        }
        Ok(Self {
            spec: spec.into(),
            len: indices.len(),
            packed,
        })
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
            .to_spec()
            .expect("payload spec validated at construction")
    }

    /// Number of quantized parameters `M`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits_per_param(&self) -> u32 {
        self.spec.levels.trailing_zeros()
    }

    /// Index payload size `M * log2(L)` in bits; the header is not included.
    pub fn payload_bits(&self) -> u64 {
        payload_bits(self.len as u64, self.bits_per_param())
    }

    pub fn header_bits(&self) -> u64 {
        (HEADER_BYTES * 8) as u64
    }

    pub fn index(&self, i: usize) -> u32 {
        assert!(i < self.len, "index {i} out of range");
        let bits = self.bits_per_param() as usize;
        let mut bitpos = i * bits;
        let mut out = 0u64;
        let mut got = 0usize;
        while got < bits {
            let byte = self.packed[bitpos / 8];
            let off = bitpos % 8;
            let take = (8 - off).min(bits - got);
            let chunk = (u64::from(byte) >> off) & ((1 << take) - 1);
            out |= chunk << got;
            got += take;
            bitpos += take;
        }
        out as u32
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len).map(move |i| self.index(i))
    }

    /// Little-endian wire form: header then the packed indices.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.packed.len());
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        out.extend_from_slice(&self.spec.levels.to_le_bytes());
        out.extend_from_slice(&self.spec.scale.to_le_bytes());
        out.extend_from_slice(&self.spec.grid_lo.to_le_bytes());
        out.extend_from_slice(&self.spec.grid_hi.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::CorruptPayload(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let len = u64_at(0);
        let levels = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let spec = SpecBits {
            levels,
            scale: u64_at(12),
            grid_lo: u64_at(20),
            grid_hi: u64_at(28),
        };
        let checked = spec
            .to_spec()
            .map_err(|e| Error::CorruptPayload(format!("bad header: {e}")))?;
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l > 0)
            .ok_or_else(|| Error::CorruptPayload(format!("bad length {len}")))?;
        let body = &bytes[HEADER_BYTES..];
        let want = len
            .checked_mul(checked.bits as usize)
            .map(|b| b.div_ceil(8))
            .ok_or_else(|| Error::CorruptPayload("length overflow".into()))?;
        if body.len() != want {
            return Err(Error::CorruptPayload(format!(
                "body is {} bytes, expected {want}",
                body.len()
            )));
        }
        let used = (len * checked.bits as usize) % 8;
        if used != 0 && body[want - 1] >> used != 0 {
            return Err(Error::CorruptPayload("non-zero padding bits".into()));
        }
        Ok(Self {
            spec,
            len,
            packed: body.to_vec(),
        })
    }
}

/// Stochastically round `w` onto `spec`'s grid.
///
/// Entries outside the grid saturate to the nearest end. The result depends
/// only on `(w, spec, seed)`.
pub fn quantize(w: &WeightVector, spec: &QuantSpec, seed: u64) -> QuantizedPayload {
    let mut rng = rng::stream(seed, &[rng::purpose::QUANTIZE]);
    quantize_with(w, spec, &mut rng)
}

pub fn quantize_with<R: Rng + ?Sized>(
    w: &WeightVector,
    spec: &QuantSpec,
    rng: &mut R,
) -> QuantizedPayload {
    let indices: Vec<u32> = w
        .as_slice()
        .iter()
        .map(|&x| spec.round_with(x, rng.random::<f64>()))
        .collect();
    QuantizedPayload::from_indices(*spec, &indices).expect("rounded indices are always < L")
}

/// Grid values for the stored indices.
pub fn dequantize(p: &QuantizedPayload) -> Result<WeightVector> {
    let spec = p.spec.to_spec()?;
    let values = p
        .indices()
        .map(|i| {
            if i >= spec.levels {
                Err(Error::CorruptPayload(format!(
                    "index {i} >= {}",
                    spec.levels
                )))
            } else {
                Ok(spec.point(i))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightVector::from_raw(values))
}

/// Transmitted payload size `M * bits`, header excluded.
pub fn payload_bits(params: u64, bits: u32) -> u64 {
    params * u64::from(bits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// Monte Carlo mean of `||w - Q(w)||^2`.
    pub mse: f64,
    /// `||w||^2 / (2 L^2)`.
    pub bound: f64,
    /// `mse / bound`; zero when both are zero.
    pub ratio: f64,
}

/// Compare the empirical squared quantization error with `||w||^2 / (2L^2)`.
/// Purely diagnostic: the uniform grid does not guarantee the bound.
pub fn empirical_error_report(
    w: &WeightVector,
    spec: &QuantSpec,
    trials: usize,
    seed: u64,
) -> ErrorReport {
    let trials = trials.max(1);
    let total: f64 = (0..trials)
        .map(|t| {
            let mut rng = rng::stream(seed, &[rng::purpose::QUANTIZE, t as u64]);
            let p = quantize_with(w, spec, &mut rng);
            let q = dequantize(&p).expect("freshly quantized payload");
            w.squared_distance(&q)
        })
        .sum();
    let mse = total / trials as f64;
    let l = f64::from(spec.levels());
    let bound = w.norm_sq() / (2.0 * l * l);
    let ratio = if mse == 0.0 { 0.0 } else { mse / bound };
    ErrorReport { mse, bound, ratio }
}

/// Monte Carlo check that `E[Q(w)] = w`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// z-score of the mean rounding offset, per coordinate.
    pub coord_z: Vec<f64>,
    /// z-score of the mean summed offset across coordinates.
    pub aggregate_z: f64,
}

impl BiasReport {
    pub fn max_abs_z(&self) -> f64 {
        self.coord_z
            .iter()
            .fold(self.aggregate_z.abs(), |m, z| m.max(z.abs()))
    }
}

fn z_score(sum: f64, sum_sq: f64, n: f64) -> f64 {
    let mean = sum / n;
    let var = ((sum_sq - sum * mean) / (n - 1.0).max(1.0)).max(0.0);
    if var == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        mean / (var / n).sqrt()
    }
}

pub fn bias_report(w: &WeightVector, spec: &QuantSpec, trials: usize, seed: u64) -> BiasReport {
    let trials = trials.max(2);
    let m = w.len();
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let (mut agg, mut agg_sq) = (0.0, 0.0);
    let mut rng = rng::stream(seed, &[rng::purpose::QUANTIZE]);
    for _ in 0..trials {
        let mut total = 0.0;
        for (i, &x) in w.as_slice().iter().enumerate() {
            let d = spec.point(spec.round_with(x, rng.random::<f64>())) - x;
            sum[i] += d;
            sum_sq[i] += d * d;
            total += d;
        }
        agg += total;
        agg_sq += total * total;
    }
    let n = trials as f64;
    BiasReport {
        coord_z: sum
            .iter()
            .zip(&sum_sq)
            .map(|(&s, &q)| z_score(s, q, n))
            .collect(),
        aggregate_z: z_score(agg, agg_sq, n),
    }
}
