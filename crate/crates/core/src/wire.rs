//! Fixed 17-byte request/response frames, the round-trip latency model and
//! the transports that carry frames between attacker and victim.
//!
//! Request layout: `opcode (1) | arg (8, LE) | nonce (8, LE)`.
//! Response layout: `status (1) | nonce (8, LE) | payload (8, LE)`.

use std::fmt;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::uarch::{AslrProbe, Cycles};

pub const FRAME_LEN: usize = 17;
pub const DEFAULT_PORT: u16 = 43210;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    LeakCache = 0x01,
    LeakAvx = 0x02,
    TransmitCache = 0x03,
    TransmitAvx = 0x04,
    Download = 0x05,
    AslrProbe = 0x06,
    TimingFn = 0x07,
    ValueCmp = 0x08,
    AdvanceClock = 0x09,
    Reset = 0x0a,
}

impl Opcode {
    pub const ALL: [Opcode; 10] = [
        Opcode::LeakCache,
        Opcode::LeakAvx,
        Opcode::TransmitCache,
        Opcode::TransmitAvx,
        Opcode::Download,
        Opcode::AslrProbe,
        Opcode::TimingFn,
        Opcode::ValueCmp,
        Opcode::AdvanceClock,
        Opcode::Reset,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(usize::from(b).wrapping_sub(1)).copied()
    }

    /// Dense index in `0..10`, for per-opcode counters.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::LeakCache => "LEAK_CACHE",
            Opcode::LeakAvx => "LEAK_AVX",
            Opcode::TransmitCache => "TRANSMIT_CACHE",
            Opcode::TransmitAvx => "TRANSMIT_AVX",
            Opcode::Download => "DOWNLOAD",
            Opcode::AslrProbe => "ASLR_PROBE",
            Opcode::TimingFn => "TIMING_FN",
            Opcode::ValueCmp => "VALUE_CMP",
            Opcode::AdvanceClock => "ADVANCE_CLOCK",
            Opcode::Reset => "RESET",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0x00,
    BadOpcode = 0x01,
    BadArg = 0x02,
}

impl Status {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x00 => Some(Status::Ok),
            0x01 => Some(Status::BadOpcode),
            0x02 => Some(Status::BadArg),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("frame must be {FRAME_LEN} bytes, got {0}")]
    Length(usize),
    #[error("unknown opcode {opcode:#04x} (nonce {nonce})")]
    UnknownOpcode { opcode: u8, nonce: u64 },
    #[error("unknown status {status:#04x} (nonce {nonce})")]
    UnknownStatus { status: u8, nonce: u64 },
}

fn frame(bytes: &[u8]) -> Result<&[u8; FRAME_LEN], DecodeError> {
    bytes
        .try_into()
        .map_err(|_| DecodeError::Length(bytes.len()))
}

fn le_u64(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes.try_into().expect("8-byte field"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestPacket {
    pub opcode: Opcode,
    pub arg: u64,
    pub nonce: u64,
}

impl RequestPacket {
    pub fn new(opcode: Opcode, arg: u64, nonce: u64) -> Self {
        Self { opcode, arg, nonce }
    }

    pub fn encode(&self) -> [u8; FRAME_LEN] {
        let mut out = [0u8; FRAME_LEN];
        out[0] = self.opcode as u8;
        out[1..9].copy_from_slice(&self.arg.to_le_bytes());
        out[9..17].copy_from_slice(&self.nonce.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let f = frame(bytes)?;
        let nonce = le_u64(&f[9..17]);
        let opcode = Opcode::from_byte(f[0]).ok_or(DecodeError::UnknownOpcode {
            opcode: f[0],
            nonce,
        })?;
        Ok(Self {
            opcode,
            arg: le_u64(&f[1..9]),
            nonce,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponsePacket {
    pub status: Status,
    pub nonce: u64,
    pub payload: u64,
}

impl ResponsePacket {
    pub fn ok(nonce: u64, payload: u64) -> Self {
        Self {
            status: Status::Ok,
            nonce,
            payload,
        }
    }

    pub fn error(status: Status, nonce: u64) -> Self {
        Self {
            status,
            nonce,
            payload: 0,
        }
    }

    pub fn encode(&self) -> [u8; FRAME_LEN] {
        let mut out = [0u8; FRAME_LEN];
        out[0] = self.status as u8;
        out[1..9].copy_from_slice(&self.nonce.to_le_bytes());
        out[9..17].copy_from_slice(&self.payload.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let f = frame(bytes)?;
        let nonce = le_u64(&f[1..9]);
        let status = Status::from_byte(f[0]).ok_or(DecodeError::UnknownStatus {
            status: f[0],
            nonce,
        })?;
        Ok(Self {
            status,
            nonce,
            payload: le_u64(&f[9..17]),
        })
    }
}

/// ASLR_PROBE argument for a plain array index (lower half zero).
pub fn aslr_index_arg(x: u32) -> u64 {
    u64::from(x) << 32
}

/// ASLR_PROBE argument covering offsets `[lo, mid)`; requires `mid > lo`.
pub fn aslr_range_arg(lo: u32, mid: u32) -> u64 {
    (u64::from(lo) << 32) | u64::from(mid)
}

pub fn decode_aslr_arg(arg: u64) -> Option<AslrProbe> {
    let lo = arg >> 32;
    let mid = arg & 0xffff_ffff;
    if mid == 0 {
        Some(AslrProbe::Index(lo))
    } else if mid > lo {
        Some(AslrProbe::Range { lo, mid })
    } else {
        None
    }
}

/// VALUE_CMP argument: `slot` in the upper half, `guess` in the lower.
pub fn value_cmp_arg(slot: u32, guess: u32) -> u64 {
    (u64::from(slot) << 32) | u64::from(guess)
}

pub fn decode_value_cmp_arg(arg: u64) -> (u64, u64) {
    (arg >> 32, arg & 0xffff_ffff)
}

/// Deployment scenarios with the measured latency spread of each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Local,
    Cloud,
    Arm,
    Noiseless,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Local => "local",
            Preset::Cloud => "cloud",
            Preset::Arm => "arm",
            Preset::Noiseless => "noiseless",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "local" => Some(Preset::Local),
            "cloud" => Some(Preset::Cloud),
            "arm" => Some(Preset::Arm),
            "noiseless" => Some(Preset::Noiseless),
            _ => None,
        }
    }

    pub fn sigma_ns(self) -> f64 {
        match self {
            Preset::Local => 15_600.0,
            Preset::Cloud => 52_300.0,
            Preset::Arm => 128_500.0,
            Preset::Noiseless => 0.0,
        }
    }

    /// One-way latency. Not reported in the measurements these presets come
    /// from; picked as plausible magnitudes for each setting.
    pub fn base_ns(self) -> f64 {
        match self {
            Preset::Local => 10_000.0,
            Preset::Cloud => 100_000.0,
            Preset::Arm => 15_000.0,
            Preset::Noiseless => 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseShape {
    Gaussian,
    /// Zero-mean shifted lognormal with the same standard deviation; `shape`
    /// is the σ of the underlying normal and controls the right tail.
    LogNormal { shape: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub base_ns: f64,
    pub sigma_ns: f64,
    pub shape: NoiseShape,
    pub preset: Option<Preset>,
}

impl LatencyModel {
    pub fn new(base_ns: f64, sigma_ns: f64) -> Self {
        Self {
            base_ns,
            sigma_ns,
            shape: NoiseShape::Gaussian,
            preset: None,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        Self {
            base_ns: preset.base_ns(),
            sigma_ns: preset.sigma_ns(),
            shape: NoiseShape::Gaussian,
            preset: Some(preset),
        }
    }

    pub fn noiseless(base_ns: f64) -> Self {
        Self::new(base_ns, 0.0)
    }

    pub fn name(&self) -> &str {
        self.preset.map_or("custom", Preset::name)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma_ns.is_finite() && self.sigma_ns >= 0.0) {
            return Err(format!("sigma must be >= 0, got {}", self.sigma_ns));
        }
        if !(self.base_ns.is_finite() && self.base_ns >= 0.0) {
            return Err(format!("base latency must be >= 0, got {}", self.base_ns));
        }
        if let NoiseShape::LogNormal { shape } = self.shape {
            if !(shape.is_finite() && shape > 0.0) {
                return Err(format!("lognormal shape must be > 0, got {shape}"));
            }
        }
        Ok(())
    }

    /// Zero-mean noise draw with standard deviation `sigma_ns`.
    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma_ns == 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        match self.shape {
            NoiseShape::Gaussian => self.sigma_ns * z,
            NoiseShape::LogNormal { shape } => {
                let s2 = shape * shape;
                // exp(mu) chosen so the lognormal's std equals sigma.
                let scale = self.sigma_ns / ((s2.exp() - 1.0) * s2.exp()).sqrt();
                let mean = scale * (s2 / 2.0).exp();
                scale * (shape * z).exp() - mean
            }
        }
    }

    /// `2 * base + server time + noise`, clamped at zero.
    pub fn round_trip_ns<R: Rng + ?Sized>(&self, server_ns: f64, rng: &mut R) -> f64 {
        (2.0 * self.base_ns + server_ns + self.noise(rng)).max(0.0)
    }
}

/// One timed round trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub sequence: u64,
    pub rtt_ns: f64,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("timed out after {0:?} waiting for a response")]
    Timeout(Duration),
    #[error("malformed frame: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl WireError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, WireError::Timeout(_))
    }
}

/// Carries frames to a victim. `send` is for requests whose timing the
/// attacker ignores; `send_timed` also returns the round-trip time.
pub trait Transport {
    fn send(&mut self, request: &RequestPacket) -> Result<ResponsePacket, WireError>;

    fn send_timed(&mut self, request: &RequestPacket)
        -> Result<(ResponsePacket, f64), WireError>;

    /// Lets wall-clock time pass (AVX reset in wall mode).
    fn sleep(&mut self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Server-side work for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceTime {
    pub cycles: Cycles,
    /// Extra delay in nanoseconds (artificial-noise mitigation).
    pub delay_ns: f64,
}

/// Anything that answers frames in-process: the victim service.
pub trait Service {
    /// Handles one datagram. `None` means the datagram is dropped.
    fn serve_frame(&mut self, frame: &[u8]) -> Option<([u8; FRAME_LEN], ServiceTime)>;

    fn cycle_time_ns(&self) -> f64;
}

/// Composes a round-trip sample from the server's cycle count.
pub fn send_request<R: Rng + ?Sized>(
    latency: &LatencyModel,
    server_cycles: Cycles,
    cycle_time_ns: f64,
    extra_server_ns: f64,
    rng: &mut R,
) -> f64 {
    latency.round_trip_ns(server_cycles as f64 * cycle_time_ns + extra_server_ns, rng)
}

/// In-process transport: frames go through the codec straight into the
/// service, and round-trip times come from the latency model.
pub struct LoopbackTransport<S, R> {
    service: S,
    latency: LatencyModel,
    rng: R,
}

impl<S: Service, R: Rng> LoopbackTransport<S, R> {
    pub fn new(service: S, latency: LatencyModel, rng: R) -> Self {
        Self {
            service,
            latency,
            rng,
        }
    }

    pub fn service(&self) -> &S {
        &self.service
    }

    pub fn service_mut(&mut self) -> &mut S {
        &mut self.service
    }

    pub fn into_service(self) -> S {
        self.service
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    fn exchange(
        &mut self,
        request: &RequestPacket,
    ) -> Result<(ResponsePacket, ServiceTime), WireError> {
        let (reply, time) = self
            .service
            .serve_frame(&request.encode())
            .ok_or(WireError::Timeout(Duration::ZERO))?;
        Ok((ResponsePacket::decode(&reply)?, time))
    }
}

impl<S: Service, R: Rng> Transport for LoopbackTransport<S, R> {
    fn send(&mut self, request: &RequestPacket) -> Result<ResponsePacket, WireError> {
        self.exchange(request).map(|(r, _)| r)
    }

    fn send_timed(
        &mut self,
        request: &RequestPacket,
    ) -> Result<(ResponsePacket, f64), WireError> {
        let (response, time) = self.exchange(request)?;
        let rtt = send_request(
            &self.latency,
            time.cycles,
            self.service.cycle_time_ns(),
            time.delay_ns,
            &mut self.rng,
        );
        Ok((response, rtt))
    }
}

/// UDP client. Responses with a stale nonce are discarded, so reordered or
/// duplicated datagrams never pair with the wrong request.
pub struct UdpTransport {
    socket: UdpSocket,
    peer: SocketAddr,
    timeout: Duration,
}

impl UdpTransport {
    pub fn connect<A: ToSocketAddrs>(peer: A, timeout: Duration) -> io::Result<Self> {
        let peer = peer
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let bind: SocketAddr = if peer.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        socket.connect(peer)?;
        Ok(Self {
            socket,
            peer,
            timeout,
        })
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    fn round_trip(
        &mut self,
        request: &RequestPacket,
    ) -> Result<(ResponsePacket, f64), WireError> {
        let started = Instant::now();
        self.socket.send(&request.encode())?;
        let mut buf = [0u8; 64];
        loop {
            let left = self
                .timeout
                .checked_sub(started.elapsed())
                .filter(|d| !d.is_zero())
                .ok_or(WireError::Timeout(self.timeout))?;
            self.socket.set_read_timeout(Some(left))?;
            let n = match self.socket.recv(&mut buf) {
                Ok(n) => n,
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Err(WireError::Timeout(self.timeout))
                }
                Err(e) => return Err(e.into()),
            };
            let rtt = started.elapsed().as_nanos() as f64;
            match ResponsePacket::decode(&buf[..n]) {
                Ok(r) if r.nonce == request.nonce => return Ok((r, rtt)),
                // Late or foreign datagram; keep waiting for ours.
                _ => continue,
            }
        }
    }
}

impl Transport for UdpTransport {
    fn send(&mut self, request: &RequestPacket) -> Result<ResponsePacket, WireError> {
        self.round_trip(request).map(|(r, _)| r)
    }

    fn send_timed(
        &mut self,
        request: &RequestPacket,
    ) -> Result<(ResponsePacket, f64), WireError> {
        self.round_trip(request)
    }
}
