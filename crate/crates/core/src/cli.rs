//! `nslab` command line: run a victim, attack one (over UDP or in-process
//! loopback), and regenerate figure datasets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 target unreachable,
//! 4 extraction low-confidence.

use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Map, Value};

use crate::attacker::{
    break_aslr, calibrate_samples, leak_range, value_threshold_search, AttackError,
    Channel, DecisionRule, ExtractionPlan, RateEstimate, Session, WaitMode,
    PAPER_AVX_BYTE_MINUTES, PAPER_CACHE_BYTE_MINUTES,
};
use crate::config::{ConfigFileError, LabConfig};
use crate::experiments::{
    num, run_figure, write_bit_histogram, write_file, write_json, write_sample_dump,
    ExperimentError, FigureId, FigureOptions,
};
use crate::stats::{bits_string, bits_to_bytes, bytes_to_bits, error_rate};
use crate::victim::{serve, ClockMode, Victim, VictimConfig};
use crate::wire::{LatencyModel, Opcode, Preset, Status, Transport, UdpTransport};

pub const SEED_ENV: &str = "NETSPECTRE_LAB_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;
pub const EXIT_LOW_CONFIDENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "nslab", version, about = "Desk-scale NetSpectre lab")]
pub struct Cli {
    /// Seed for every random draw (victim, network noise).
    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,

    /// Lab configuration file (key = value with [sections]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the victim over UDP until interrupted.
    Victim(VictimArgs),
    /// Calibrate and leak a bit range.
    Leak(LeakArgs),
    /// Recover the valid offset of the ASLR gadget by binary search.
    Aslr(AslrArgs),
    /// Recover the value behind the comparison gadget.
    Value(ValueArgs),
    /// Write the dataset behind one figure (or `all`).
    Figures(FiguresArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct VictimArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long, value_parser = parse_clock)]
    pub clock: Option<ClockMode>,
    /// Simulated network latency added to every reply.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Plant this text as the secret.
    #[arg(long)]
    pub secret: Option<String>,
    /// Append one line per request to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    /// `loopback` (in-process victim) or `host:port`.
    #[arg(long, default_value = "loopback")]
    pub target: String,
    /// Latency preset: noise model on loopback, per-packet cost for
    /// projections either way.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LeakArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long, value_parser = parse_channel)]
    pub channel: Option<Channel>,
    /// Number of bits to leak.
    #[arg(long)]
    pub bits: Option<u64>,
    /// First out-of-bounds bit index; defaults to the start of the secret.
    #[arg(long)]
    pub offset: Option<u64>,
    /// Measurements per bit.
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    /// Corner-case samples per class for calibration.
    #[arg(long, value_parser = parse_count)]
    pub calibration_n: Option<usize>,
    #[arg(long, value_parser = parse_decision)]
    pub decision: Option<DecisionRule>,
    /// Secret planted in the loopback victim.
    #[arg(long)]
    pub secret: Option<String>,
    /// Known plaintext for the error rate.
    #[arg(long)]
    pub known: Option<String>,
    /// Projected cost of one request, ns.
    #[arg(long)]
    pub per_packet_ns: Option<f64>,
    /// Raw samples written per bit and per calibration class.
    #[arg(long, default_value_t = 1000)]
    pub dump_limit: usize,
}

#[derive(Debug, Args)]
pub struct AslrArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    #[arg(long)]
    pub space_bits: Option<u32>,
    /// Timing measurements per half-range check.
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    /// Valid offset planted in the loopback victim.
    #[arg(long, value_parser = parse_count_u64)]
    pub valid_offset: Option<u64>,
    /// Timing samples per class for calibration.
    #[arg(long, value_parser = parse_count)]
    pub calibration_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValueArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    /// Width of the secret in bits.
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    #[arg(long, value_parser = parse_count)]
    pub calibration_n: Option<usize>,
    /// Value planted in the loopback victim.
    #[arg(long, value_parser = parse_count_u64)]
    pub secret_value: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FiguresArgs {
    /// fig3 fig4 fig5 fig6 fig7 fig8 fig10, or all.
    pub figure: String,
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_count_u64(s: &str) -> Result<u64, String> {
    crate::config::parse_u64(s)
}

fn parse_count(s: &str) -> Result<usize, String> {
    parse_count_u64(s).map(|v| v as usize)
}

fn parse_clock(s: &str) -> Result<ClockMode, String> {
    ClockMode::parse(s).ok_or_else(|| "expected virtual or wall".into())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| "expected local, cloud, arm or noiseless".into())
}

fn parse_channel(s: &str) -> Result<Channel, String> {
    Channel::parse(s).ok_or_else(|| "expected cache or avx".into())
}

fn parse_decision(s: &str) -> Result<DecisionRule, String> {
    DecisionRule::parse(s).ok_or_else(|| "expected bayes or mode".into())
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("low confidence: {0}")]
    LowConfidence(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Unreachable(_) => EXIT_UNREACHABLE,
            CliError::LowConfidence(_) => EXIT_LOW_CONFIDENCE,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<ConfigFileError> for CliError {
    fn from(e: ConfigFileError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Unreachable(_) => CliError::Unreachable(e.to_string()),
            AttackError::InvalidPlan(_) => CliError::Config(e.to_string()),
            AttackError::Calibration { .. } | AttackError::Inconsistent { .. } => {
                CliError::LowConfidence(e.to_string())
            }
            AttackError::Rejected { .. } | AttackError::Stats(_) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Attack(a) => a.into(),
            ExperimentError::Config(c) => CliError::Config(c.to_string()),
            ExperimentError::UnknownFigure(_) => CliError::Config(e.to_string()),
            ExperimentError::Io { .. } => CliError::Failed(e.to_string()),
        }
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("nslab: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    match cli.command {
        Command::Victim(a) => cmd_victim(config, cli.seed, a),
        Command::Leak(a) => cmd_leak(config, cli.seed, a),
        Command::Aslr(a) => cmd_aslr(config, cli.seed, a),
        Command::Value(a) => cmd_value(config, cli.seed, a),
        Command::Figures(a) => cmd_figures(config, cli.seed, a),
        Command::Config => {
            print!("{}", config.render());
            Ok(())
        }
    }
}

fn cmd_victim(mut config: LabConfig, seed: u64, a: VictimArgs) -> Result<(), CliError> {
    if let Some(p) = a.port {
        config.network.port = p;
    }
    if let Some(h) = a.bind {
        config.network.host = h;
    }
    if let Some(c) = a.clock {
        config.victim.clock_mode = c;
    }
    if let Some(p) = a.preset {
        config.victim.latency = LatencyModel::preset(p);
    }
    if let Some(s) = &a.secret {
        config.victim = config.victim.with_secret(s.as_bytes());
    }
    config.validate()?;
    print!("{}", config.render());
    let addr = format!("{}:{}", config.network.host, config.network.port);
    let socket = UdpSocket::bind(&addr)
        .map_err(|e| CliError::Config(format!("cannot bind {addr}: {e}")))?;
    let mut victim =
        Victim::new(config.victim.clone(), seed).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = &a.trace {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::Config(format!("cannot open trace {}: {e}", path.display())))?;
        victim = victim.with_trace(Box::new(std::io::BufWriter::new(file)));
    }
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed))
        .map_err(|e| CliError::Failed(format!("cannot install signal handler: {e}")))?;
    println!("listening on {}", socket.local_addr().map_err(|e| CliError::Failed(e.to_string()))?);
    let report = serve(&socket, &mut victim, &shutdown).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("served: {}", report.counters);
    Ok(())
}

enum Target {
    Loopback,
    Udp(SocketAddr),
}

fn parse_target(s: &str) -> Result<Target, CliError> {
    if s == "loopback" {
        return Ok(Target::Loopback);
    }
    let s = s.strip_prefix("udp://").unwrap_or(s);
    s.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .map(Target::Udp)
        .ok_or_else(|| CliError::Config(format!("bad target {s:?}; expected loopback or host:port")))
}

fn per_packet_ns(preset: Preset, victim: &VictimConfig) -> f64 {
    2.0 * preset.base_ns() + victim.handler_cycles as f64 * victim.uarch.cycle_time_ns
}

/// Connects to a UDP victim and detects its clock mode: ADVANCE_CLOCK is
/// refused by wall-clock victims.
fn connect_udp(addr: SocketAddr, timeout_ms: u64) -> Result<(Session<UdpTransport>, WaitMode), CliError> {
    let t = UdpTransport::connect(addr, Duration::from_millis(timeout_ms))
        .map_err(|e| CliError::Unreachable(format!("{addr}: {e}")))?;
    let mut s = Session::new(t);
    match s.request(Opcode::AdvanceClock, 0) {
        Ok(_) => Ok((s, WaitMode::AdvanceClock)),
        Err(AttackError::Rejected {
            status: Status::BadArg,
            ..
        }) => Ok((s, WaitMode::Sleep)),
        Err(e) => Err(e.into()),
    }
}

fn loopback(victim: VictimConfig, seed: u64) -> Result<Session<impl Transport>, CliError> {
    Ok(Session::new(
        Victim::loopback(victim, seed).map_err(|e| CliError::Config(e.to_string()))?,
    ))
}

fn request_counts<T: Transport>(s: &Session<T>) -> Value {
    let mut m = Map::new();
    for op in Opcode::ALL {
        m.insert(op.name().to_string(), json!(s.count(op)));
    }
    m.insert("total".into(), json!(s.total_requests()));
    m.insert("attack".into(), json!(s.attack_requests()));
    Value::Object(m)
}

fn rate_json(rate: &RateEstimate, plan: &ExtractionPlan) -> Value {
    let paper = match plan.channel {
        Channel::Cache => PAPER_CACHE_BYTE_MINUTES,
        Channel::Avx => PAPER_AVX_BYTE_MINUTES,
    };
    json!({
        "per_packet_ns": plan.per_packet_ns,
        "requests_per_bit": rate.requests_per_bit,
        "request_seconds_per_bit": rate.request_seconds_per_bit,
        "wait_seconds_per_bit": rate.wait_seconds_per_bit,
        "seconds_per_bit": rate.seconds_per_bit(),
        "bits_per_hour": num(rate.bits_per_hour()),
        "byte_minutes": rate.byte_minutes(),
        "request_byte_minutes": rate.request_byte_minutes(),
        "paper_byte_minutes": paper,
    })
}

struct LeakSetup {
    plan: ExtractionPlan,
    truth: Option<Vec<u8>>,
    dump_limit: usize,
    out: PathBuf,
}

fn leak_with<T: Transport>(mut s: Session<T>, setup: LeakSetup, mut summary: Map<String, Value>) -> Result<(), CliError> {
    let LeakSetup {
        plan,
        truth,
        dump_limit,
        out,
    } = setup;
    let run = calibrate_samples(&mut s, &plan)?;
    let c = run.calibration;
    info!(
        "calibrated: hit {:.1} ns, miss {:.1} ns, threshold {:.1} ns, sigma {:.1} ns",
        c.mean_hit, c.mean_miss, c.threshold, c.sigma_est
    );
    if dump_limit > 0 {
        write_sample_dump(&out.join("calibration_samples.csv"), &[&run.hit, &run.miss], dump_limit)?;
    }
    let mut io_error = None;
    let report = leak_range(&mut s, &plan, &c, |r, rate| {
        info!(
            "bit {}: {} (|z| = {:.2}{}) running {:.2} bits/h projected",
            r.index,
            r.bit,
            r.confidence,
            if r.low_confidence { ", LOW" } else { "" },
            rate.bits_per_hour()
        );
        let k = r.index - plan.target_bit_range.start;
        let mut res = write_bit_histogram(&out.join(format!("bit_{k:03}_hist.csv")), r);
        if let (Ok(()), Some(samples)) = (&res, &r.samples) {
            res = write_sample_dump(&out.join(format!("bit_{k:03}_samples.csv")), &[samples], dump_limit);
        }
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    write_file(&out.join("bits.csv"), |w| {
        use std::io::Write;
        writeln!(w, "index,bit,confidence,mean_ns,mode_ns,llr,low_confidence")?;
        for r in &report.results {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.index, r.bit, r.confidence, r.mean_ns, r.mode.refined_ns, r.llr, r.low_confidence
            )?;
        }
        Ok(())
    })?;
    let bits = bits_string(&report.bits);
    summary.insert("calibration".into(), json!({
        "mean_hit_ns": c.mean_hit,
        "mean_miss_ns": c.mean_miss,
        "threshold_ns": c.threshold,
        "sigma_est_ns": c.sigma_est,
        "samples_per_class": plan.calibration_count(),
    }));
    summary.insert("bits".into(), json!(bits));
    summary.insert(
        "bytes_hex".into(),
        json!(bits_to_bytes(&report.bits).iter().map(|b| format!("{b:02x}")).collect::<String>()),
    );
    summary.insert(
        "confidences".into(),
        Value::Array(report.results.iter().map(|r| num(r.confidence)).collect()),
    );
    summary.insert("low_confidence_bits".into(), json!(report.low_confidence_bits));
    if let Some(t) = &truth {
        let t: Vec<u8> = t.iter().copied().take(report.bits.len()).collect();
        if t.len() == report.bits.len() && !t.is_empty() {
            summary.insert("known_bits".into(), json!(bits_string(&t)));
            summary.insert("error_rate".into(), json!(error_rate(&report.bits, &t).unwrap_or(f64::NAN)));
        }
    }
    summary.insert("requests".into(), request_counts(&s));
    summary.insert("projected".into(), rate_json(&report.rate, &plan));
    let summary = Value::Object(summary);
    write_json(&out.join("summary.json"), &summary)?;
    println!("bits {bits}");
    if let Some(e) = summary.get("error_rate") {
        println!("error rate {e}");
    }
    println!(
        "projected {:.1} min/byte ({:.2} bits/h) at {} ns/packet",
        report.rate.byte_minutes(),
        report.rate.bits_per_hour(),
        plan.per_packet_ns
    );
    if report.low_confidence_bits > 0 {
        return Err(CliError::LowConfidence(format!(
            "{} of {} bits below the confidence threshold",
            report.low_confidence_bits,
            report.bits.len()
        )));
    }
    Ok(())
}

fn cmd_leak(mut config: LabConfig, seed: u64, a: LeakArgs) -> Result<(), CliError> {
    let target = parse_target(&a.target.target)?;
    if let Some(p) = a.target.preset {
        config.victim.latency = LatencyModel::preset(p);
    }
    if let Some(s) = &a.secret {
        config.victim = config.victim.with_secret(s.as_bytes());
    }
    let mut plan = config.attacker.plan.clone();
    if let Some(c) = a.channel {
        plan.channel = c;
    }
    if let Some(n) = a.n {
        plan.measurements_per_bit = n;
    }
    if a.calibration_n.is_some() {
        plan.calibration_samples = a.calibration_n;
    }
    if let Some(d) = a.decision {
        plan.decision = d;
    }
    let preset = a.target.preset.or(config.victim.latency.preset).unwrap_or(Preset::Local);
    plan.per_packet_ns = a
        .per_packet_ns
        .unwrap_or_else(|| per_packet_ns(preset, &config.victim));
    plan.sample_limit = a.dump_limit;
    let secrets = &config.victim.secrets;
    let start = a.offset.unwrap_or(secrets.secret_start());
    let default_bits = secrets.region_bits().saturating_sub(start);
    let bits = a.bits.unwrap_or(default_bits);
    plan.target_bit_range = start..start + bits;
    plan.validate()?;
    config.validate()?;

    let known = a.known.as_ref().map(|k| bytes_to_bits(k.as_bytes()));
    let mut summary = Map::new();
    summary.insert("command".into(), json!("leak"));
    summary.insert("seed".into(), json!(seed));
    summary.insert("target".into(), json!(a.target.target));
    summary.insert("channel".into(), json!(plan.channel.name()));
    summary.insert("decision".into(), json!(plan.decision.name()));
    summary.insert("preset".into(), json!(preset.name()));
    summary.insert("n".into(), json!(plan.measurements_per_bit));
    summary.insert("mistrain".into(), json!(plan.mistrain_count));
    summary.insert("bit_range".into(), json!([plan.target_bit_range.start, plan.target_bit_range.end]));
    let out = a.target.out.clone();
    match target {
        Target::Loopback => {
            let truth = known.or_else(|| {
                Some(plan.target_bit_range.clone().map(|x| u8::from(secrets.bit(x))).collect())
            });
            plan.wait_mode = match config.victim.clock_mode {
                ClockMode::Virtual => WaitMode::AdvanceClock,
                ClockMode::Wall => WaitMode::Sleep,
            };
            let s = loopback(config.victim.clone(), seed)?;
            leak_with(s, LeakSetup { plan, truth, dump_limit: a.dump_limit, out }, summary)
        }
        Target::Udp(addr) => {
            let (s, wait) = connect_udp(addr, config.network.timeout_ms)?;
            plan.wait_mode = wait;
            leak_with(s, LeakSetup { plan, truth: known, dump_limit: a.dump_limit, out }, summary)
        }
    }
}

fn aslr_with<T: Transport>(mut s: Session<T>, plan: &crate::attacker::AslrPlan, expected: Option<u64>, out: &Path, mut summary: Map<String, Value>) -> Result<(), CliError> {
    let r = break_aslr(&mut s, plan)?;
    write_file(&out.join("aslr_rounds.csv"), |w| {
        use std::io::Write;
        writeln!(w, "round,lo,mid,hi,attempts,lower_mean_ns,upper_mean_ns,chose_upper")?;
        for x in &r.rounds {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                x.round, x.lo, x.mid, x.hi, x.attempts, x.lower_mean_ns, x.upper_mean_ns, x.chose_upper
            )?;
        }
        Ok(())
    })?;
    summary.insert("offset".into(), json!(r.offset));
    summary.insert("offset_hex".into(), json!(format!("{:#x}", r.offset)));
    summary.insert("rounds".into(), json!(r.rounds.len()));
    summary.insert("threshold_ns".into(), json!(r.calibration.threshold));
    if let Some(e) = expected {
        summary.insert("expected_offset".into(), json!(e));
        summary.insert("success".into(), json!(e == r.offset));
    }
    summary.insert("requests".into(), request_counts(&s));
    write_json(&out.join("summary.json"), &Value::Object(summary))?;
    println!("offset {:#x} in {} rounds", r.offset, r.rounds.len());
    Ok(())
}

fn cmd_aslr(mut config: LabConfig, seed: u64, a: AslrArgs) -> Result<(), CliError> {
    let target = parse_target(&a.target.target)?;
    if let Some(p) = a.target.preset {
        config.victim.latency = LatencyModel::preset(p);
    }
    if let Some(m) = a.space_bits {
        config.victim.aslr_space_bits = m;
        config.attacker.aslr.space_bits = m;
    }
    if let Some(v) = a.valid_offset {
        config.victim.valid_aslr_offset = v;
    }
    if let Some(n) = a.n {
        config.attacker.aslr.probes_per_check = n;
    }
    if a.calibration_n.is_some() {
        config.attacker.aslr.calibration_probes = a.calibration_n;
    }
    config.validate()?;
    let plan = config.attacker.aslr.clone();
    let mut summary = Map::new();
    summary.insert("command".into(), json!("aslr"));
    summary.insert("seed".into(), json!(seed));
    summary.insert("target".into(), json!(a.target.target));
    summary.insert("space_bits".into(), json!(plan.space_bits));
    summary.insert("n".into(), json!(plan.probes_per_check));
    match target {
        Target::Loopback => {
            let expected = Some(config.victim.valid_aslr_offset);
            aslr_with(loopback(config.victim, seed)?, &plan, expected, &a.target.out, summary)
        }
        Target::Udp(addr) => {
            let (s, _) = connect_udp(addr, config.network.timeout_ms)?;
            aslr_with(s, &plan, None, &a.target.out, summary)
        }
    }
}

fn value_with<T: Transport>(mut s: Session<T>, config: &LabConfig, calib_n: usize, expected: Option<u64>, out: &Path, mut summary: Map<String, Value>) -> Result<(), CliError> {
    let plan = ExtractionPlan {
        channel: Channel::Cache,
        measurements_per_bit: config.attacker.value.measurements_per_round,
        calibration_samples: Some(calib_n),
        ..config.attacker.plan.clone()
    };
    let c = calibrate_samples(&mut s, &plan)?.calibration;
    let r = value_threshold_search(&mut s, &config.attacker.value, &c)?;
    write_file(&out.join("value_rounds.csv"), |w| {
        use std::io::Write;
        writeln!(w, "lo,hi,guess,above,mean_ns")?;
        for x in &r.rounds {
            writeln!(w, "{},{},{},{},{}", x.lo, x.hi, x.guess, x.above, x.mean_ns)?;
        }
        Ok(())
    })?;
    summary.insert("value".into(), json!(r.value));
    summary.insert("rounds".into(), json!(r.rounds.len()));
    if let Some(e) = expected {
        summary.insert("expected_value".into(), json!(e));
        summary.insert("success".into(), json!(e == r.value));
    }
    summary.insert("requests".into(), request_counts(&s));
    write_json(&out.join("summary.json"), &Value::Object(summary))?;
    println!("value {} in {} rounds", r.value, r.rounds.len());
    Ok(())
}

fn cmd_value(mut config: LabConfig, seed: u64, a: ValueArgs) -> Result<(), CliError> {
    let target = parse_target(&a.target.target)?;
    if let Some(p) = a.target.preset {
        config.victim.latency = LatencyModel::preset(p);
    }
    if let Some(k) = a.bits {
        config.attacker.value.value_bits = k;
    }
    if let Some(n) = a.n {
        config.attacker.value.measurements_per_round = n;
    }
    if let Some(v) = a.secret_value {
        config.victim.secret_value = v;
    }
    config.validate()?;
    let calib_n = a
        .calibration_n
        .unwrap_or(config.attacker.value.measurements_per_round);
    let mut summary = Map::new();
    summary.insert("command".into(), json!("value"));
    summary.insert("seed".into(), json!(seed));
    summary.insert("target".into(), json!(a.target.target));
    summary.insert("value_bits".into(), json!(config.attacker.value.value_bits));
    summary.insert("n".into(), json!(config.attacker.value.measurements_per_round));
    let out = a.target.out.clone();
    match target {
        Target::Loopback => {
            let expected = Some(config.victim.secret_value);
            let s = loopback(config.victim.clone(), seed)?;
            value_with(s, &config, calib_n, expected, &out, summary)
        }
        Target::Udp(addr) => {
            let (s, _) = connect_udp(addr, config.network.timeout_ms)?;
            value_with(s, &config, calib_n, None, &out, summary)
        }
    }
}

fn cmd_figures(config: LabConfig, seed: u64, a: FiguresArgs) -> Result<(), CliError> {
    let ids = if a.figure == "all" {
        FigureId::ALL.to_vec()
    } else {
        vec![FigureId::parse(&a.figure)?]
    };
    let opts = FigureOptions {
        seed,
        n: a.n,
        out_dir: a.out.clone(),
        victim: config.victim,
    };
    for id in ids {
        info!("generating {}", id.name());
        run_figure(id, &opts)?;
        println!("{} written to {}", id.name(), a.out.display());
    }
    Ok(())
}
