//! Lab configuration: flat `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Unknown sections or keys are errors, so a
//! typo never silently falls back to a default.
//!
//! ```text
//! [victim]
//! secret = NetSpctr
//! clock = virtual
//! [latency]
//! preset = local
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::attacker::{AslrPlan, Channel, DecisionRule, ExtractionPlan, ValuePlan, WaitMode};
use crate::uarch::SecretStore;
use crate::victim::{ClockMode, ConfigError, VictimConfig};
use crate::wire::{LatencyModel, NoiseShape, Opcode, Preset, DEFAULT_PORT, DEFAULT_TIMEOUT};

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key {key:?} in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: {section}.{key}: {msg}")]
    Value {
        line: usize,
        section: String,
        key: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(#[from] ConfigError),
    #[error("invalid attacker plan: {0}")]
    Plan(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "victim",
        &[
            "secret",
            "secret_hex",
            "public_bytes",
            "array_length",
            "valid_aslr_offset",
            "aslr_space_bits",
            "secret_value",
            "value_slots",
            "mitigation_barrier",
            "mitigation_noise_sigma_ns",
            "clock",
            "handler_cycles",
            "request_tick_ns",
            "disabled_opcodes",
        ],
    ),
    (
        "uarch",
        &[
            "cycle_time_ns",
            "hit_cycles",
            "miss_cycles",
            "avx_warm_cycles",
            "avx_max_penalty_cycles",
            "avx_decay_start_ns",
            "avx_decay_end_ns",
            "thrash_lambda_bytes",
        ],
    ),
    (
        "latency",
        &["preset", "base_ns", "sigma_ns", "shape", "lognormal_shape"],
    ),
    ("network", &["host", "port", "timeout_ms"]),
    (
        "attacker",
        &[
            "channel",
            "n",
            "calibration_n",
            "mistrain",
            "reset_bytes",
            "avx_wait_ns",
            "decision",
            "min_confidence",
            "per_packet_ns",
            "bin_width_ns",
            "smoothing_window",
            "aslr_n",
            "aslr_mistrain",
            "aslr_warmup",
            "aslr_attempts",
            "aslr_calibration_n",
            "value_bits",
            "value_n",
        ],
    ),
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but uninterpreted file: section -> key -> value.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(ConfigFileError::Syntax {
                    line: line_no,
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigFileError::UnknownSection {
                        line: line_no,
                        section: name.into(),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigFileError::Syntax {
                line: line_no,
                msg: "expected `key = value`".into(),
            })?;
            let Some(sec) = section.as_ref() else {
                return Err(ConfigFileError::Syntax {
                    line: line_no,
                    msg: "key outside of any [section]".into(),
                });
            };
            let key = key.trim();
            let known = SECTIONS
                .iter()
                .find(|(s, _)| s == sec)
                .is_some_and(|(_, keys)| keys.contains(&key));
            if !known {
                return Err(ConfigFileError::UnknownKey {
                    line: line_no,
                    section: sec.clone(),
                    key: key.into(),
                });
            }
            raw.sections.entry(sec.clone()).or_default().insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line: line_no,
                },
            );
        }
        Ok(raw)
    }

    fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section)?.get(key)
    }

    fn value<T>(
        &self,
        section: &str,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigFileError> {
        let Some(e) = self.get(section, key) else {
            return Ok(None);
        };
        parse(&e.value)
            .map(Some)
            .map_err(|msg| ConfigFileError::Value {
                line: e.line,
                section: section.into(),
                key: key.into(),
                msg,
            })
    }
}

/// Unsigned count: decimal, `0x` hex, `_` separators or whole-valued
/// scientific shorthand such as `1e6` or `2.5e5`.
pub(crate) fn parse_u64(s: &str) -> Result<u64, String> {
    let t = s.replace('_', "");
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return u64::from_str_radix(hex, 16)
            .map_err(|e| format!("expected an unsigned integer, got {s:?} ({e})"));
    }
    if let Ok(v) = t.parse::<u64>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(f) if f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 => Ok(f as u64),
        _ => Err(format!("expected an unsigned integer, got {s:?}")),
    }
}

fn parse_u32(s: &str) -> Result<u32, String> {
    parse_u64(s)?
        .try_into()
        .map_err(|_| format!("{s} does not fit in 32 bits"))
}

fn parse_usize(s: &str) -> Result<usize, String> {
    parse_u64(s)?
        .try_into()
        .map_err(|_| format!("{s} is too large"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.replace('_', "")
        .parse()
        .map_err(|e| format!("expected a number, got {s:?} ({e})"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {s:?}")),
    }
}

fn parse_hex_bytes(s: &str) -> Result<Vec<u8>, String> {
    let s = s.trim_start_matches("0x");
    if !s.len().is_multiple_of(2) {
        return Err("hex string has odd length".into());
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| e.to_string()))
        .collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_opcodes(s: &str) -> Result<Vec<Opcode>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| Opcode::from_name(t).ok_or_else(|| format!("unknown opcode {t:?}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub host: String,
    pub port: u16,
    pub timeout_ms: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackerConfig {
    pub plan: ExtractionPlan,
    pub aslr: AslrPlan,
    pub value: ValuePlan,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabConfig {
    pub victim: VictimConfig,
    pub network: NetworkConfig,
    pub attacker: AttackerConfig,
}

/// Public bytes and secret bytes of a store laid out by
/// [`SecretStore::with_secret`].
fn split_store(store: &SecretStore) -> (usize, &[u8]) {
    let public = (store.bitstream_length() / 8) as usize;
    (public, &store.bytes()[public..])
}

impl LabConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses a config over the defaults, then validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        let raw = RawConfig::parse(text)?;
        let mut c = LabConfig::default();
        c.apply(&raw)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigFileError> {
        self.victim.validate()?;
        self.attacker
            .plan
            .validate()
            .map_err(|e| ConfigFileError::Plan(e.to_string()))?;
        self.attacker
            .aslr
            .validate()
            .map_err(|e| ConfigFileError::Plan(e.to_string()))?;
        Ok(())
    }

    fn apply(&mut self, raw: &RawConfig) -> Result<(), ConfigFileError> {
        let v = &mut self.victim;
        let (mut public, secret) = split_store(&v.secrets);
        let mut secret = secret.to_vec();
        if let Some(p) = raw.value("victim", "public_bytes", parse_usize)? {
            public = p;
        }
        if let Some(s) = raw.value("victim", "secret", |s| Ok(s.as_bytes().to_vec()))? {
            secret = s;
        }
        if let Some(s) = raw.value("victim", "secret_hex", parse_hex_bytes)? {
            secret = s;
        }
        v.secrets = SecretStore::with_secret(public, &secret);
        macro_rules! set {
            ($sec:literal, $key:literal, $parse:expr, $field:expr) => {
                if let Some(x) = raw.value($sec, $key, $parse)? {
                    $field = x;
                }
            };
        }
        set!("victim", "array_length", parse_u64, v.array_length);
        set!("victim", "valid_aslr_offset", parse_u64, v.valid_aslr_offset);
        set!("victim", "aslr_space_bits", parse_u32, v.aslr_space_bits);
        set!("victim", "secret_value", parse_u64, v.secret_value);
        set!("victim", "value_slots", parse_u64, v.value_slots);
        set!("victim", "mitigation_barrier", parse_bool, v.mitigation_barrier);
        set!(
            "victim",
            "mitigation_noise_sigma_ns",
            parse_f64,
            v.mitigation_noise_sigma_ns
        );
        set!(
            "victim",
            "clock",
            |s| ClockMode::parse(s).ok_or_else(|| format!("expected virtual|wall, got {s:?}")),
            v.clock_mode
        );
        set!("victim", "handler_cycles", parse_u64, v.handler_cycles);
        set!("victim", "request_tick_ns", parse_u64, v.request_tick_ns);
        set!("victim", "disabled_opcodes", parse_opcodes, v.disabled_opcodes);

        let u = &mut v.uarch;
        set!("uarch", "cycle_time_ns", parse_f64, u.cycle_time_ns);
        set!("uarch", "hit_cycles", parse_u64, u.hit_cycles);
        set!("uarch", "miss_cycles", parse_u64, u.miss_cycles);
        set!("uarch", "avx_warm_cycles", parse_u64, u.avx_warm_cycles);
        set!(
            "uarch",
            "avx_max_penalty_cycles",
            parse_u64,
            u.avx_max_penalty_cycles
        );
        set!("uarch", "avx_decay_start_ns", parse_u64, u.avx_decay_start_ns);
        set!("uarch", "avx_decay_end_ns", parse_u64, u.avx_decay_end_ns);
        set!("uarch", "thrash_lambda_bytes", parse_f64, u.thrash_lambda_bytes);

        if let Some(p) = raw.value("latency", "preset", |s| {
            Preset::parse(s).ok_or_else(|| format!("unknown preset {s:?}"))
        })? {
            v.latency = LatencyModel::preset(p);
        }
        let l = &mut v.latency;
        if let Some(x) = raw.value("latency", "base_ns", parse_f64)? {
            l.base_ns = x;
            l.preset = None;
        }
        if let Some(x) = raw.value("latency", "sigma_ns", parse_f64)? {
            l.sigma_ns = x;
            l.preset = None;
        }
        let shape_param = raw.value("latency", "lognormal_shape", parse_f64)?;
        if let Some(shape) = raw.value("latency", "shape", |s| match s {
            "gaussian" => Ok(NoiseShape::Gaussian),
            "lognormal" => Ok(NoiseShape::LogNormal {
                shape: shape_param.unwrap_or(0.5),
            }),
            _ => Err(format!("expected gaussian|lognormal, got {s:?}")),
        })? {
            l.shape = shape;
        }

        let n = &mut self.network;
        set!("network", "host", |s| Ok(s.to_string()), n.host);
        set!(
            "network",
            "port",
            |s| parse_u64(s)?.try_into().map_err(|_| format!("bad port {s}")),
            n.port
        );
        set!("network", "timeout_ms", parse_u64, n.timeout_ms);

        let a = &mut self.attacker;
        set!(
            "attacker",
            "channel",
            |s| Channel::parse(s).ok_or_else(|| format!("expected cache|avx, got {s:?}")),
            a.plan.channel
        );
        set!("attacker", "n", parse_usize, a.plan.measurements_per_bit);
        if let Some(x) = raw.value("attacker", "calibration_n", parse_usize)? {
            a.plan.calibration_samples = Some(x);
        }
        set!("attacker", "mistrain", parse_u32, a.plan.mistrain_count);
        set!("attacker", "reset_bytes", parse_u64, a.plan.reset_bytes);
        set!("attacker", "avx_wait_ns", parse_u64, a.plan.avx_wait_ns);
        set!(
            "attacker",
            "decision",
            |s| DecisionRule::parse(s).ok_or_else(|| format!("expected bayes|mode, got {s:?}")),
            a.plan.decision
        );
        set!("attacker", "min_confidence", parse_f64, a.plan.min_confidence);
        set!("attacker", "per_packet_ns", parse_f64, a.plan.per_packet_ns);
        set!(
            "attacker",
            "bin_width_ns",
            parse_f64,
            a.plan.histogram.bin_width_ns
        );
        set!(
            "attacker",
            "smoothing_window",
            parse_usize,
            a.plan.histogram.smoothing_window
        );
        set!("attacker", "aslr_n", parse_usize, a.aslr.probes_per_check);
        set!("attacker", "aslr_mistrain", parse_u32, a.aslr.mistrain_count);
        set!("attacker", "aslr_warmup", parse_u32, a.aslr.warmup);
        set!("attacker", "aslr_attempts", parse_u32, a.aslr.max_attempts);
        if let Some(x) = raw.value("attacker", "aslr_calibration_n", parse_usize)? {
            a.aslr.calibration_probes = Some(x);
        }
        set!("attacker", "value_bits", parse_u32, a.value.value_bits);
        set!(
            "attacker",
            "value_n",
            parse_usize,
            a.value.measurements_per_round
        );

        // The attacker's view of the victim layout follows the victim.
        self.attacker.aslr.space_bits = self.victim.aslr_space_bits;
        self.attacker.value.secret_slot = self.victim.value_slots as u32;
        self.attacker.plan.wait_mode = match self.victim.clock_mode {
            ClockMode::Virtual => WaitMode::AdvanceClock,
            ClockMode::Wall => WaitMode::Sleep,
        };
        Ok(())
    }

    /// The effective configuration in the file format; parsing it back
    /// yields the same configuration.
    pub fn render(&self) -> String {
        let v = &self.victim;
        let u = &v.uarch;
        let l = &v.latency;
        let a = &self.attacker;
        let (public, secret) = split_store(&v.secrets);
        let mut s = String::new();
        let _ = writeln!(s, "[victim]");
        let _ = writeln!(s, "secret_hex = {}", hex(secret));
        let _ = writeln!(s, "public_bytes = {public}");
        let _ = writeln!(s, "array_length = {}", v.array_length);
        let _ = writeln!(s, "valid_aslr_offset = {:#x}", v.valid_aslr_offset);
        let _ = writeln!(s, "aslr_space_bits = {}", v.aslr_space_bits);
        let _ = writeln!(s, "secret_value = {}", v.secret_value);
        let _ = writeln!(s, "value_slots = {}", v.value_slots);
        let _ = writeln!(s, "mitigation_barrier = {}", v.mitigation_barrier);
        let _ = writeln!(
            s,
            "mitigation_noise_sigma_ns = {:?}",
            v.mitigation_noise_sigma_ns
        );
        let _ = writeln!(s, "clock = {}", v.clock_mode.name());
        let _ = writeln!(s, "handler_cycles = {}", v.handler_cycles);
        let _ = writeln!(s, "request_tick_ns = {}", v.request_tick_ns);
        let disabled: Vec<_> = v.disabled_opcodes.iter().map(|o| o.name()).collect();
        let _ = writeln!(s, "disabled_opcodes = {}", disabled.join(","));
        let _ = writeln!(s, "\n[uarch]");
        let _ = writeln!(s, "cycle_time_ns = {:?}", u.cycle_time_ns);
        let _ = writeln!(s, "hit_cycles = {}", u.hit_cycles);
        let _ = writeln!(s, "miss_cycles = {}", u.miss_cycles);
        let _ = writeln!(s, "avx_warm_cycles = {}", u.avx_warm_cycles);
        let _ = writeln!(s, "avx_max_penalty_cycles = {}", u.avx_max_penalty_cycles);
        let _ = writeln!(s, "avx_decay_start_ns = {}", u.avx_decay_start_ns);
        let _ = writeln!(s, "avx_decay_end_ns = {}", u.avx_decay_end_ns);
        let _ = writeln!(s, "thrash_lambda_bytes = {:?}", u.thrash_lambda_bytes);
        let _ = writeln!(s, "\n[latency]");
        match l.preset {
            Some(p) => {
                let _ = writeln!(s, "preset = {}", p.name());
            }
            None => {
                let _ = writeln!(s, "base_ns = {:?}", l.base_ns);
                let _ = writeln!(s, "sigma_ns = {:?}", l.sigma_ns);
            }
        }
        match l.shape {
            NoiseShape::Gaussian => {
                let _ = writeln!(s, "shape = gaussian");
            }
            NoiseShape::LogNormal { shape } => {
                let _ = writeln!(s, "shape = lognormal");
                let _ = writeln!(s, "lognormal_shape = {shape:?}");
            }
        }
        let _ = writeln!(s, "\n[network]");
        let _ = writeln!(s, "host = {}", self.network.host);
        let _ = writeln!(s, "port = {}", self.network.port);
        let _ = writeln!(s, "timeout_ms = {}", self.network.timeout_ms);
        let _ = writeln!(s, "\n[attacker]");
        let _ = writeln!(s, "channel = {}", a.plan.channel.name());
        let _ = writeln!(s, "n = {}", a.plan.measurements_per_bit);
        if let Some(c) = a.plan.calibration_samples {
            let _ = writeln!(s, "calibration_n = {c}");
        }
        let _ = writeln!(s, "mistrain = {}", a.plan.mistrain_count);
        let _ = writeln!(s, "reset_bytes = {}", a.plan.reset_bytes);
        let _ = writeln!(s, "avx_wait_ns = {}", a.plan.avx_wait_ns);
        let _ = writeln!(s, "decision = {}", a.plan.decision.name());
        let _ = writeln!(s, "min_confidence = {:?}", a.plan.min_confidence);
        let _ = writeln!(s, "per_packet_ns = {:?}", a.plan.per_packet_ns);
        let _ = writeln!(s, "bin_width_ns = {:?}", a.plan.histogram.bin_width_ns);
        let _ = writeln!(s, "smoothing_window = {}", a.plan.histogram.smoothing_window);
        let _ = writeln!(s, "aslr_n = {}", a.aslr.probes_per_check);
        let _ = writeln!(s, "aslr_mistrain = {}", a.aslr.mistrain_count);
        let _ = writeln!(s, "aslr_warmup = {}", a.aslr.warmup);
        let _ = writeln!(s, "aslr_attempts = {}", a.aslr.max_attempts);
        if let Some(c) = a.aslr.calibration_probes {
            let _ = writeln!(s, "aslr_calibration_n = {c}");
        }
        let _ = writeln!(s, "value_bits = {}", a.value.value_bits);
        let _ = writeln!(s, "value_n = {}", a.value.measurements_per_round);
        s
    }
}
