//! Deterministic model of the microarchitectural state a remote Spectre
//! attack exploits: a per-site branch predictor, the cache state of the
//! transmit variable (plus the ASLR probe target), and the power state of
//! the upper half of the 256-bit vector unit. Time only moves when the
//! owner advances the [`VirtualClock`].
//!
//! Every gadget reports its cost in CPU cycles. Conversion to nanoseconds
//! happens once, at the wire boundary, through [`UarchParams::cycles_to_ns`].

use rand::Rng;
use thiserror::Error;

pub type Cycles = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UarchError {
    #[error("clock cannot move backwards (delta {0} ns)")]
    NegativeAdvance(i64),
    #[error("clock cannot move backwards (now {now} ns, requested {requested} ns)")]
    BackwardsTo { now: u64, requested: u64 },
    #[error("idle time must be non-negative, got {0} ns")]
    NegativeIdle(i64),
    #[error("bitstream length {length} exceeds the {available} bits backing it")]
    BitstreamTooLong { length: u64, available: u64 },
    #[error("invalid microarchitecture parameter: {0}")]
    InvalidParam(&'static str),
}

/// Nanoseconds since simulation start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, delta_ns: i64) -> Result<(), UarchError> {
        if delta_ns < 0 {
            return Err(UarchError::NegativeAdvance(delta_ns));
        }
        self.tick(delta_ns as u64);
        Ok(())
    }

    /// Infallible forward step; saturates instead of wrapping.
    pub fn tick(&mut self, delta_ns: u64) {
        self.now = self.now.saturating_add(delta_ns);
    }

    /// Moves the clock to an absolute timestamp (used by the wall-clock mode).
    pub fn advance_to(&mut self, t_ns: u64) -> Result<(), UarchError> {
        if t_ns < self.now {
            return Err(UarchError::BackwardsTo {
                now: self.now,
                requested: t_ns,
            });
        }
        self.now = t_ns;
        Ok(())
    }
}

/// Conditional branches of the victim that the attacker can mistrain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchSite {
    LeakCache,
    LeakAvx,
    Aslr,
    ValueCompare,
}

impl BranchSite {
    pub const ALL: [BranchSite; 4] = [
        BranchSite::LeakCache,
        BranchSite::LeakAvx,
        BranchSite::Aslr,
        BranchSite::ValueCompare,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Taken,
    NotTaken,
}

impl From<bool> for Outcome {
    fn from(taken: bool) -> Self {
        if taken {
            Outcome::Taken
        } else {
            Outcome::NotTaken
        }
    }
}

/// One 2-bit saturating counter per branch site, initialized strongly
/// not-taken (0). A counter of 2 or 3 predicts taken.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchPredictor {
    counters: [u8; BranchSite::ALL.len()],
}

impl BranchPredictor {
    pub const MAX: u8 = 3;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn counter(&self, site: BranchSite) -> u8 {
        self.counters[site.slot()]
    }

    pub fn predict(&self, site: BranchSite) -> bool {
        self.counter(site) >= 2
    }

    pub fn train(&mut self, site: BranchSite, outcome: Outcome) {
        let c = &mut self.counters[site.slot()];
        *c = match outcome {
            Outcome::Taken => (*c + 1).min(Self::MAX),
            Outcome::NotTaken => c.saturating_sub(1),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheModel {
    pub flag_cached: bool,
    pub aslr_cached_offset: Option<u64>,
    pub hit_cycles: Cycles,
    pub miss_cycles: Cycles,
}

impl CacheModel {
    fn new(hit_cycles: Cycles, miss_cycles: Cycles) -> Self {
        Self {
            flag_cached: false,
            aslr_cached_offset: None,
            hit_cycles,
            miss_cycles,
        }
    }

    pub fn delta(&self) -> Cycles {
        self.miss_cycles - self.hit_cycles
    }

    fn access_cost(&self, cached: bool) -> Cycles {
        if cached {
            self.hit_cycles
        } else {
            self.miss_cycles
        }
    }
}

/// Upper half of the 256-bit vector unit. A `last_use` of `None` means the
/// unit has never run a 256-bit instruction and is fully powered down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvxUnit {
    pub last_use: Option<u64>,
    pub warm_cycles: Cycles,
    pub max_penalty_cycles: Cycles,
    pub decay_start_ns: u64,
    pub decay_end_ns: u64,
}

impl AvxUnit {
    /// Power-up penalty after `idle_ns` without a 256-bit instruction:
    /// zero before `decay_start`, the full penalty from `decay_end` on, and a
    /// linear ramp rounded half-up in between.
    pub fn penalty(&self, idle_ns: u64) -> Cycles {
        if idle_ns < self.decay_start_ns {
            return 0;
        }
        if idle_ns >= self.decay_end_ns {
            return self.max_penalty_cycles;
        }
        let span = u128::from(self.decay_end_ns - self.decay_start_ns);
        let into = u128::from(idle_ns - self.decay_start_ns);
        let scaled = u128::from(self.max_penalty_cycles) * into * 2 + span;
        (scaled / (2 * span)) as Cycles
    }

    pub fn avx_penalty(&self, idle_ns: i64) -> Result<Cycles, UarchError> {
        if idle_ns < 0 {
            return Err(UarchError::NegativeIdle(idle_ns));
        }
        Ok(self.penalty(idle_ns as u64))
    }

    pub fn idle_at(&self, now: u64) -> Option<u64> {
        self.last_use.map(|t| now.saturating_sub(t))
    }

    /// Cost of a 256-bit instruction issued at `now`.
    pub fn cost_at(&self, now: u64) -> Cycles {
        let penalty = match self.idle_at(now) {
            Some(idle) => self.penalty(idle),
            None => self.max_penalty_cycles,
        };
        self.warm_cycles + penalty
    }

    /// Runs a 256-bit instruction: pays the current cost and powers the unit up.
    pub fn execute(&mut self, now: u64) -> Cycles {
        let cost = self.cost_at(now);
        self.last_use = Some(now);
        cost
    }
}

/// Tunable constants of the simulated core.
#[derive(Debug, Clone, PartialEq)]
pub struct UarchParams {
    /// Nanoseconds per CPU cycle (0.5 ns = 2 GHz).
    pub cycle_time_ns: f64,
    pub hit_cycles: Cycles,
    pub miss_cycles: Cycles,
    pub avx_warm_cycles: Cycles,
    pub avx_max_penalty_cycles: Cycles,
    pub avx_decay_start_ns: u64,
    pub avx_decay_end_ns: u64,
    /// Mean bytes of transferred data per eviction event of the thrash model.
    pub thrash_lambda_bytes: f64,
}

/// File size that evicts the flag with 99 % probability.
pub const THRASH_CALIBRATION_BYTES: u64 = 590_000;
pub const THRASH_CALIBRATION_PROBABILITY: f64 = 0.99;

/// λ such that `1 - exp(-590000 / λ) = 0.99`, i.e. `590000 / ln(100)`.
pub fn calibrated_thrash_lambda() -> f64 {
    THRASH_CALIBRATION_BYTES as f64 / (1.0 / (1.0 - THRASH_CALIBRATION_PROBABILITY)).ln()
}

impl Default for UarchParams {
    fn default() -> Self {
        Self {
            cycle_time_ns: 0.5,
            hit_cycles: 40,
            miss_cycles: 200,
            avx_warm_cycles: 210,
            avx_max_penalty_cycles: 366,
            avx_decay_start_ns: 500_000,
            avx_decay_end_ns: 1_000_000,
            thrash_lambda_bytes: calibrated_thrash_lambda(),
        }
    }
}

impl UarchParams {
    pub fn validate(&self) -> Result<(), UarchError> {
        if !(self.cycle_time_ns.is_finite() && self.cycle_time_ns > 0.0) {
            return Err(UarchError::InvalidParam("cycle_time_ns must be positive"));
        }
        if self.miss_cycles <= self.hit_cycles {
            return Err(UarchError::InvalidParam(
                "miss_cycles must exceed hit_cycles",
            ));
        }
        if self.avx_decay_end_ns <= self.avx_decay_start_ns {
            return Err(UarchError::InvalidParam(
                "avx_decay_end_ns must exceed avx_decay_start_ns",
            ));
        }
        if !(self.thrash_lambda_bytes.is_finite() && self.thrash_lambda_bytes > 0.0) {
            return Err(UarchError::InvalidParam(
                "thrash_lambda_bytes must be positive",
            ));
        }
        Ok(())
    }

    pub fn cycles_to_ns(&self, cycles: Cycles) -> f64 {
        cycles as f64 * self.cycle_time_ns
    }

    /// Probability that downloading `bytes` evicts the whole last-level cache.
    pub fn eviction_probability(&self, bytes: u64) -> f64 {
        -(-(bytes as f64) / self.thrash_lambda_bytes).exp_m1()
    }
}

/// The victim's bit-addressable memory. Bits `[0, bitstream_length)` are the
/// architecturally reachable bitstream; anything past it (the planted
/// secret) is only reachable speculatively. Bits are MSB-first per byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretStore {
    bytes: Vec<u8>,
    bitstream_length: u64,
}

impl SecretStore {
    pub fn new(bytes: Vec<u8>, bitstream_length: u64) -> Result<Self, UarchError> {
        let available = bytes.len() as u64 * 8;
        if bitstream_length > available {
            return Err(UarchError::BitstreamTooLong {
                length: bitstream_length,
                available,
            });
        }
        Ok(Self {
            bytes,
            bitstream_length,
        })
    }

    /// A public bitstream of `public_bytes` bytes followed by `secret`.
    pub fn with_secret(public_bytes: usize, secret: &[u8]) -> Self {
        let mut bytes = vec![0x5a; public_bytes];
        bytes.extend_from_slice(secret);
        Self {
            bytes,
            bitstream_length: public_bytes as u64 * 8,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bitstream_length(&self) -> u64 {
        self.bitstream_length
    }

    pub fn region_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }

    /// Out-of-bounds index of the first bit after the bitstream.
    pub fn secret_start(&self) -> u64 {
        self.bitstream_length
    }

    pub fn in_bounds(&self, x: u64) -> bool {
        x < self.bitstream_length
    }

    /// Reads bit `x`, wrapping around the whole simulated region.
    pub fn bit(&self, x: u64) -> bool {
        let region = self.region_bits();
        if region == 0 {
            return false;
        }
        let x = x % region;
        let byte = self.bytes[(x / 8) as usize];
        (byte >> (7 - (x % 8))) & 1 == 1
    }
}

/// How an ASLR probe request addresses the simulated address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AslrProbe {
    /// A single array index; in-bounds indices only train the predictor.
    Index(u64),
    /// Speculatively touch every offset in `[lo, mid)`.
    Range { lo: u64, mid: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroarchState {
    pub clock: VirtualClock,
    pub predictor: BranchPredictor,
    pub cache: CacheModel,
    pub avx: AvxUnit,
    /// Architectural value of `flag`; only in-bounds leaks may set it.
    pub flag: bool,
    speculation_barrier: bool,
    params: UarchParams,
}

impl MicroarchState {
    pub fn new(params: UarchParams) -> Self {
        Self {
            clock: VirtualClock::new(),
            predictor: BranchPredictor::new(),
            cache: CacheModel::new(params.hit_cycles, params.miss_cycles),
            avx: AvxUnit {
                last_use: None,
                warm_cycles: params.avx_warm_cycles,
                max_penalty_cycles: params.avx_max_penalty_cycles,
                decay_start_ns: params.avx_decay_start_ns,
                decay_end_ns: params.avx_decay_end_ns,
            },
            flag: false,
            speculation_barrier: false,
            params,
        }
    }

    pub fn params(&self) -> &UarchParams {
        &self.params
    }

    pub fn cycle_time_ns(&self) -> f64 {
        self.params.cycle_time_ns
    }

    pub fn speculation_barrier(&self) -> bool {
        self.speculation_barrier
    }

    /// Models an `lfence` after every bounds check: mispredicted paths
    /// leave no microarchitectural trace.
    pub fn set_speculation_barrier(&mut self, on: bool) {
        self.speculation_barrier = on;
    }

    /// Back to power-on state. The clock keeps running.
    pub fn reset(&mut self) {
        let clock = self.clock;
        let barrier = self.speculation_barrier;
        *self = Self::new(self.params.clone());
        self.clock = clock;
        self.speculation_barrier = barrier;
    }

    fn speculates(&self, site: BranchSite) -> bool {
        !self.speculation_barrier && self.predictor.predict(site)
    }

    /// `if (x < bitstream_length) if (bitstream[x]) flag = true;`
    ///
    /// Returns the cycles spent in the gadget body (zero when it does not
    /// touch `flag`).
    pub fn leak_gadget_cache(&mut self, secrets: &SecretStore, x: u64) -> Cycles {
        let in_bounds = secrets.in_bounds(x);
        let cost = if in_bounds {
            if secrets.bit(x) {
                let cost = self.cache.access_cost(self.cache.flag_cached);
                self.flag = true;
                self.cache.flag_cached = true;
                cost
            } else {
                0
            }
        } else if self.speculates(BranchSite::LeakCache) && secrets.bit(x) {
            let cost = self.cache.access_cost(self.cache.flag_cached);
            self.cache.flag_cached = true;
            cost
        } else {
            0
        };
        self.predictor.train(BranchSite::LeakCache, in_bounds.into());
        cost
    }

    /// `if (x < bitstream_length) if (bitstream[x]) _mm256_instruction();`
    pub fn leak_gadget_avx(&mut self, secrets: &SecretStore, x: u64) -> Cycles {
        let in_bounds = secrets.in_bounds(x);
        let runs = if in_bounds {
            secrets.bit(x)
        } else {
            self.speculates(BranchSite::LeakAvx) && secrets.bit(x)
        };
        let cost = if runs {
            self.avx.execute(self.clock.now())
        } else {
            0
        };
        self.predictor.train(BranchSite::LeakAvx, in_bounds.into());
        cost
    }

    /// Reads `flag`; the read itself caches it.
    pub fn transmit_gadget_cache(&mut self) -> Cycles {
        let cost = self.cache.access_cost(self.cache.flag_cached);
        self.cache.flag_cached = true;
        cost
    }

    /// Runs one 256-bit instruction; its latency exposes the unit's power state.
    pub fn transmit_gadget_avx(&mut self) -> Cycles {
        self.avx.execute(self.clock.now())
    }

    /// Bulk transfer that evicts the whole last-level cache with probability
    /// `1 - exp(-bytes / λ)`. Returns whether an eviction happened.
    pub fn thrash<R: Rng + ?Sized>(&mut self, bytes: u64, rng: &mut R) -> bool {
        let p = self.params.eviction_probability(bytes);
        if p <= 0.0 {
            return false;
        }
        let evicted = rng.random::<f64>() < p;
        if evicted {
            self.cache.flag_cached = false;
            self.cache.aslr_cached_offset = None;
        }
        evicted
    }

    /// `if (x < array_length) access(array[x]);` over a flat address space
    /// with exactly one valid, cacheable offset.
    pub fn aslr_gadget(&mut self, probe: AslrProbe, array_length: u64, valid_offset: u64) {
        let in_bounds = matches!(probe, AslrProbe::Index(x) if x < array_length);
        if !in_bounds && self.speculates(BranchSite::Aslr) {
            let covered = match probe {
                AslrProbe::Index(x) => x == valid_offset,
                AslrProbe::Range { lo, mid } => (lo..mid).contains(&valid_offset),
            };
            if covered {
                self.cache.aslr_cached_offset = Some(valid_offset);
            }
        }
        self.predictor.train(BranchSite::Aslr, in_bounds.into());
    }

    /// A function touching the known page. The probe target is read once:
    /// the read result is consumed and the line counts as evicted afterwards.
    pub fn timing_function(&mut self, valid_offset: u64) -> Cycles {
        let hit = self.cache.aslr_cached_offset == Some(valid_offset);
        self.cache.aslr_cached_offset = None;
        self.cache.access_cost(hit)
    }

    /// `if (slot < value_slots) if (guess < values[slot]) access(flag);`
    ///
    /// Public slots hold 0, so in-bounds calls never touch `flag`; the slot
    /// right after them holds `secret_value`.
    pub fn value_threshold_gadget(
        &mut self,
        slot: u64,
        value_slots: u64,
        guess: u64,
        secret_value: u64,
    ) {
        let in_bounds = slot < value_slots;
        if !in_bounds && self.speculates(BranchSite::ValueCompare) && guess < secret_value {
            self.cache.flag_cached = true;
        }
        self.predictor.train(BranchSite::ValueCompare, in_bounds.into());
    }
}
