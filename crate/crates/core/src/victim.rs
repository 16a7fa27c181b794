//! The attackable service. Every request frame is dispatched to one gadget
//! of a single shared [`MicroarchState`], the way one physical core would
//! serve a network-facing handler.

use std::fmt;
use std::io::{self, Write};
use std::net::UdpSocket;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::uarch::{Cycles, MicroarchState, SecretStore, UarchError, UarchParams};
use crate::wire::{
    decode_aslr_arg, decode_value_cmp_arg, DecodeError, LatencyModel, LoopbackTransport, Opcode,
    Preset, RequestPacket, ResponsePacket, Service, ServiceTime, Status, FRAME_LEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Virtual,
    Wall,
}

impl ClockMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "virtual" => Some(ClockMode::Virtual),
            "wall" => Some(ClockMode::Wall),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClockMode::Virtual => "virtual",
            ClockMode::Wall => "wall",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("valid_aslr_offset {offset} does not fit in a 2^{bits} space")]
    AslrOffset { offset: u64, bits: u32 },
    #[error("aslr_space_bits must be in 1..=31, got {0}")]
    AslrBits(u32),
    #[error("mitigation_noise_sigma_ns must be >= 0, got {0}")]
    NoiseSigma(f64),
    #[error("latency model: {0}")]
    Latency(String),
    #[error(transparent)]
    Uarch(#[from] UarchError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimConfig {
    pub secrets: SecretStore,
    /// Length of the array behind the ASLR gadget.
    pub array_length: u64,
    pub valid_aslr_offset: u64,
    pub aslr_space_bits: u32,
    /// Secret integer behind the value-compare gadget.
    pub secret_value: u64,
    /// Public slots of the value-compare gadget; the secret sits right after.
    pub value_slots: u64,
    pub mitigation_barrier: bool,
    pub mitigation_noise_sigma_ns: f64,
    pub latency: LatencyModel,
    pub uarch: UarchParams,
    pub clock_mode: ClockMode,
    /// Fixed work around every gadget.
    pub handler_cycles: Cycles,
    /// Virtual time charged to each request.
    pub request_tick_ns: u64,
    pub disabled_opcodes: Vec<Opcode>,
}

pub const DEFAULT_SECRET: &[u8] = b"NetSpctr";
pub const DEFAULT_PUBLIC_BYTES: usize = 16;

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            secrets: SecretStore::with_secret(DEFAULT_PUBLIC_BYTES, DEFAULT_SECRET),
            array_length: 1,
            valid_aslr_offset: 0x5_1d3c,
            aslr_space_bits: 20,
            secret_value: 42,
            value_slots: 1,
            mitigation_barrier: false,
            mitigation_noise_sigma_ns: 0.0,
            latency: LatencyModel::preset(Preset::Local),
            uarch: UarchParams::default(),
            clock_mode: ClockMode::Virtual,
            handler_cycles: 1000,
            request_tick_ns: 1000,
            disabled_opcodes: Vec::new(),
        }
    }
}

impl VictimConfig {
    pub fn with_secret(mut self, secret: &[u8]) -> Self {
        self.secrets = SecretStore::with_secret(DEFAULT_PUBLIC_BYTES, secret);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=31).contains(&self.aslr_space_bits) {
            return Err(ConfigError::AslrBits(self.aslr_space_bits));
        }
        if self.valid_aslr_offset >= 1u64 << self.aslr_space_bits {
            return Err(ConfigError::AslrOffset {
                offset: self.valid_aslr_offset,
                bits: self.aslr_space_bits,
            });
        }
        if !(self.mitigation_noise_sigma_ns.is_finite() && self.mitigation_noise_sigma_ns >= 0.0) {
            return Err(ConfigError::NoiseSigma(self.mitigation_noise_sigma_ns));
        }
        if self.value_slots == 0 || self.value_slots >= u64::from(u32::MAX) {
            return Err(ConfigError::Invalid(
                "value_slots must be in 1..2^32-1".into(),
            ));
        }
        if self.array_length > u64::from(u32::MAX) {
            return Err(ConfigError::Invalid(
                "array_length must fit in 32 bits".into(),
            ));
        }
        self.latency.validate().map_err(ConfigError::Latency)?;
        self.uarch.validate()?;
        Ok(())
    }

    pub fn new_state(&self) -> MicroarchState {
        let mut state = MicroarchState::new(self.uarch.clone());
        state.set_speculation_barrier(self.mitigation_barrier);
        state
    }

    pub fn opcode_enabled(&self, op: Opcode) -> bool {
        !self.disabled_opcodes.contains(&op)
    }
}

/// Dispatches one decoded request. Virtual mode charges `request_tick_ns`
/// before the gadget runs; wall mode expects the caller to have synced the
/// clock already.
pub fn handle_request<R: Rng + ?Sized>(
    state: &mut MicroarchState,
    config: &VictimConfig,
    packet: &RequestPacket,
    rng: &mut R,
) -> (ResponsePacket, ServiceTime) {
    let nonce = packet.nonce;
    let reject = |status| {
        (
            ResponsePacket::error(status, nonce),
            ServiceTime {
                cycles: config.handler_cycles,
                delay_ns: 0.0,
            },
        )
    };
    if !config.opcode_enabled(packet.opcode) {
        return reject(Status::BadOpcode);
    }
    if config.clock_mode == ClockMode::Virtual {
        state.clock.tick(config.request_tick_ns);
    }

    let arg = packet.arg;
    let mut payload = 0;
    let gadget_cycles = match packet.opcode {
        // The body's cost stays inside the constant handler work, so leak
        // responses are the same whatever the secret.
        Opcode::LeakCache => {
            state.leak_gadget_cache(&config.secrets, arg);
            0
        }
        Opcode::LeakAvx => {
            state.leak_gadget_avx(&config.secrets, arg);
            0
        }
        Opcode::TransmitCache => {
            let c = state.transmit_gadget_cache();
            payload = u64::from(state.flag);
            c
        }
        Opcode::TransmitAvx => state.transmit_gadget_avx(),
        Opcode::Download => {
            state.thrash(arg, rng);
            payload = arg;
            0
        }
        Opcode::AslrProbe => {
            let Some(probe) = decode_aslr_arg(arg) else {
                return reject(Status::BadArg);
            };
            state.aslr_gadget(probe, config.array_length, config.valid_aslr_offset);
            0
        }
        Opcode::TimingFn => state.timing_function(config.valid_aslr_offset),
        Opcode::ValueCmp => {
            let (slot, guess) = decode_value_cmp_arg(arg);
            let value = if slot == config.value_slots {
                config.secret_value
            } else {
                0
            };
            state.value_threshold_gadget(slot, config.value_slots, guess, value);
            0
        }
        Opcode::AdvanceClock => {
            if config.clock_mode == ClockMode::Wall {
                return reject(Status::BadArg);
            }
            state.clock.tick(arg);
            payload = state.clock.now();
            0
        }
        Opcode::Reset => {
            state.reset();
            0
        }
    };

    let delay_ns = if config.mitigation_noise_sigma_ns > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        let s = config.mitigation_noise_sigma_ns;
        (3.0 * s + s * z).max(0.0)
    } else {
        0.0
    };
    (
        ResponsePacket::ok(nonce, payload),
        ServiceTime {
            cycles: config.handler_cycles + gadget_cycles,
            delay_ns,
        },
    )
}

/// Per-opcode request counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestCounters {
    per_opcode: [u64; 10],
    pub malformed: u64,
}

impl RequestCounters {
    pub fn record(&mut self, op: Opcode) {
        self.per_opcode[op.index()] += 1;
    }

    pub fn get(&self, op: Opcode) -> u64 {
        self.per_opcode[op.index()]
    }

    pub fn total(&self) -> u64 {
        self.per_opcode.iter().sum::<u64>() + self.malformed
    }
}

impl fmt::Display for RequestCounters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in Opcode::ALL {
            write!(f, "{}={} ", op.name(), self.get(op))?;
        }
        write!(f, "MALFORMED={}", self.malformed)
    }
}

/// One line of the victim's request trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub opcode: Opcode,
    pub arg: u64,
    pub status: u8,
    pub server_cycles: Cycles,
}

impl TraceRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let mut seq = None;
        let mut opcode = None;
        let mut arg = None;
        let mut status = None;
        let mut cycles = None;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "seq" => seq = v.parse().ok(),
                "op" => opcode = Opcode::from_name(v),
                "arg" => arg = v.parse().ok(),
                "status" => status = v.parse().ok(),
                "cycles" => cycles = v.parse().ok(),
                _ => {}
            }
        }
        Some(Self {
            seq: seq?,
            opcode: opcode?,
            arg: arg?,
            status: status?,
            server_cycles: cycles?,
        })
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seq={} op={} arg={} status={} cycles={}",
            self.seq,
            self.opcode.name(),
            self.arg,
            self.status,
            self.server_cycles
        )
    }
}

/// A victim service instance: configuration, microarchitectural state,
/// its own RNG (eviction draws, artificial noise) and bookkeeping.
pub struct Victim {
    config: VictimConfig,
    state: MicroarchState,
    rng: ChaCha8Rng,
    counters: RequestCounters,
    trace: Option<Box<dyn Write + Send>>,
    seq: u64,
    epoch: Instant,
}

impl Victim {
    pub fn new(config: VictimConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let state = config.new_state();
        Ok(Self {
            config,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: RequestCounters::default(),
            trace: None,
            seq: 0,
            epoch: Instant::now(),
        })
    }

    /// Appends one line per handled request to `sink`.
    pub fn with_trace(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.trace = Some(sink);
        self
    }

    /// Wraps the victim in an in-process transport using its configured
    /// latency model. Network noise draws come from a separate stream of
    /// the same seed.
    pub fn loopback(
        config: VictimConfig,
        seed: u64,
    ) -> Result<LoopbackTransport<Victim, ChaCha8Rng>, ConfigError> {
        let latency = config.latency.clone();
        let victim = Victim::new(config, seed)?;
        let mut net_rng = ChaCha8Rng::seed_from_u64(seed);
        net_rng.set_stream(1);
        Ok(LoopbackTransport::new(victim, latency, net_rng))
    }

    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    pub fn state(&self) -> &MicroarchState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut MicroarchState {
        &mut self.state
    }

    pub fn counters(&self) -> &RequestCounters {
        &self.counters
    }

    pub fn flush_trace(&mut self) -> io::Result<()> {
        match self.trace.as_mut() {
            Some(t) => t.flush(),
            None => Ok(()),
        }
    }

    pub fn handle(&mut self, packet: &RequestPacket) -> (ResponsePacket, ServiceTime) {
        if self.config.clock_mode == ClockMode::Wall {
            let now = self.epoch.elapsed().as_nanos() as u64;
            // Wall time never runs backwards past the virtual clock.
            let _ = self.state.clock.advance_to(now.max(self.state.clock.now()));
        }
        let (response, time) = handle_request(&mut self.state, &self.config, packet, &mut self.rng);
        self.counters.record(packet.opcode);
        self.seq += 1;
        if let Some(trace) = self.trace.as_mut() {
            let record = TraceRecord {
                seq: self.seq,
                opcode: packet.opcode,
                arg: packet.arg,
                status: response.status as u8,
                server_cycles: time.cycles,
            };
            // A broken trace sink must not take the service down.
            if let Err(e) = writeln!(trace, "{record}") {
                debug!("trace write failed: {e}");
            }
        }
        (response, time)
    }

    /// Handles a raw datagram. Frames with at least one byte that fail to
    /// decode are answered BAD_OPCODE; empty datagrams are dropped.
    pub fn handle_frame(&mut self, frame: &[u8]) -> Option<([u8; FRAME_LEN], ServiceTime)> {
        match RequestPacket::decode(frame) {
            Ok(packet) => {
                let (response, time) = self.handle(&packet);
                Some((response.encode(), time))
            }
            Err(_) if frame.is_empty() => None,
            Err(e) => {
                self.counters.malformed += 1;
                let nonce = match e {
                    DecodeError::UnknownOpcode { nonce, .. } => nonce,
                    _ if frame.len() >= 9 => u64::from_le_bytes(frame[1..9].try_into().unwrap()),
                    _ => 0,
                };
                let time = ServiceTime {
                    cycles: self.config.handler_cycles,
                    delay_ns: 0.0,
                };
                Some((ResponsePacket::error(Status::BadOpcode, nonce).encode(), time))
            }
        }
    }
}

impl Service for Victim {
    fn serve_frame(&mut self, frame: &[u8]) -> Option<([u8; FRAME_LEN], ServiceTime)> {
        self.handle_frame(frame)
    }

    fn cycle_time_ns(&self) -> f64 {
        self.config.uarch.cycle_time_ns
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServeReport {
    pub counters: RequestCounters,
}

fn spin_for(d: Duration) {
    let until = Instant::now() + d;
    while Instant::now() < until {
        std::hint::spin_loop();
    }
}

/// Serves UDP requests sequentially until `shutdown` is set. The reply to
/// each request is held back for the simulated service time.
pub fn serve(
    socket: &UdpSocket,
    victim: &mut Victim,
    shutdown: &AtomicBool,
) -> io::Result<ServeReport> {
    socket.set_read_timeout(Some(Duration::from_millis(20)))?;
    let cycle_time = victim.config.uarch.cycle_time_ns;
    let mut buf = [0u8; 1500];
    while !shutdown.load(Ordering::Relaxed) {
        let (n, peer) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock
                        | io::ErrorKind::TimedOut
                        | io::ErrorKind::Interrupted
                        | io::ErrorKind::ConnectionRefused
                        | io::ErrorKind::ConnectionReset
                ) =>
            {
                continue
            }
            Err(e) => return Err(e),
        };
        let started = Instant::now();
        let Some((reply, time)) = victim.handle_frame(&buf[..n]) else {
            continue;
        };
        let service_ns = time.cycles as f64 * cycle_time + time.delay_ns;
        spin_for(Duration::from_nanos(service_ns as u64).saturating_sub(started.elapsed()));
        if let Err(e) = socket.send_to(&reply, peer) {
            // A vanished client must not take the victim down.
            warn!("reply to {peer} failed: {e}");
        }
    }
    victim.flush_trace()?;
    info!("victim shutting down: {}", victim.counters());
    Ok(ServeReport {
        counters: victim.counters().clone(),
    })
}
