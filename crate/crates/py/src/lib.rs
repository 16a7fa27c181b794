//! Python bindings: an in-process lab (victim behind a simulated network
//! plus an attacker session), the microarchitectural models and the figure
//! generators.

use std::path::PathBuf;

use pyo3::exceptions::{PyConnectionError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use nslab_core::attacker::{
    break_aslr, calibrate_samples, leak_range, value_threshold_search, AslrPlan, AttackError,
    Calibration as CoreCalibration, Channel, DecisionRule, ExtractionPlan, Session, ValuePlan,
    WaitMode,
};
use nslab_core::experiments::{run_figure, FigureId, FigureOptions};
use nslab_core::stats::{self, HistogramSpec};
use nslab_core::uarch::{MicroarchState, UarchParams};
use nslab_core::victim::{ClockMode, Victim, VictimConfig};
use nslab_core::wire::{LatencyModel, LoopbackTransport, Opcode, Preset};
use rand_chacha::ChaCha8Rng;

fn attack_err(e: AttackError) -> PyErr {
    match e {
        AttackError::Unreachable(_) => PyConnectionError::new_err(e.to_string()),
        AttackError::InvalidPlan(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Bits as a list of ints; `Vec<u8>` would convert to `bytes`.
fn bit_list(bits: &[u8]) -> Vec<u32> {
    bits.iter().map(|&b| u32::from(b)).collect()
}

fn parse<T>(what: &str, s: &str, f: impl Fn(&str) -> Option<T>) -> PyResult<T> {
    f(s).ok_or_else(|| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

/// Hit/miss calibration of a timing channel.
#[pyclass(name = "Calibration", frozen, get_all, from_py_object)]
#[derive(Clone)]
struct PyCalibration {
    mean_hit: f64,
    mean_miss: f64,
    threshold: f64,
    sigma_est: f64,
}

impl From<CoreCalibration> for PyCalibration {
    fn from(c: CoreCalibration) -> Self {
        Self {
            mean_hit: c.mean_hit,
            mean_miss: c.mean_miss,
            threshold: c.threshold,
            sigma_est: c.sigma_est,
        }
    }
}

impl PyCalibration {
    fn core(&self) -> CoreCalibration {
        CoreCalibration {
            mean_hit: self.mean_hit,
            mean_miss: self.mean_miss,
            threshold: self.threshold,
            sigma_est: self.sigma_est,
        }
    }
}

#[pymethods]
impl PyCalibration {
    #[new]
    fn new(mean_hit: f64, mean_miss: f64, sigma_est: f64) -> Self {
        CoreCalibration::from_means(mean_hit, mean_miss, sigma_est).into()
    }

    #[getter]
    fn gap(&self) -> f64 {
        self.mean_miss - self.mean_hit
    }

    fn __repr__(&self) -> String {
        format!(
            "Calibration(mean_hit={:.1}, mean_miss={:.1}, threshold={:.1}, sigma_est={:.1})",
            self.mean_hit, self.mean_miss, self.threshold, self.sigma_est
        )
    }
}

/// A victim and an attacker session joined by a simulated network.
#[pyclass(unsendable)]
struct Lab {
    session: Session<LoopbackTransport<Victim, ChaCha8Rng>>,
    config: VictimConfig,
}

#[pymethods]
impl Lab {
    #[new]
    #[pyo3(signature = (
        secret = None,
        preset = "local",
        seed = 0,
        clock = "virtual",
        barrier = false,
        noise_sigma_ns = 0.0,
        aslr_space_bits = 20,
        valid_aslr_offset = None,
        secret_value = 42,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        secret: Option<&[u8]>,
        preset: &str,
        seed: u64,
        clock: &str,
        barrier: bool,
        noise_sigma_ns: f64,
        aslr_space_bits: u32,
        valid_aslr_offset: Option<u64>,
        secret_value: u64,
    ) -> PyResult<Self> {
        let mut config = VictimConfig::default();
        if let Some(s) = secret {
            config = config.with_secret(s);
        }
        config.latency = LatencyModel::preset(parse("preset", preset, Preset::parse)?);
        config.clock_mode = parse("clock mode", clock, ClockMode::parse)?;
        config.mitigation_barrier = barrier;
        config.mitigation_noise_sigma_ns = noise_sigma_ns;
        config.aslr_space_bits = aslr_space_bits;
        if let Some(o) = valid_aslr_offset {
            config.valid_aslr_offset = o;
        }
        config.secret_value = secret_value;
        config.validate().map_err(value_err)?;
        let transport = Victim::loopback(config.clone(), seed).map_err(value_err)?;
        Ok(Self {
            session: Session::new(transport),
            config,
        })
    }

    /// First bit index of the planted secret.
    #[getter]
    fn secret_start(&self) -> u64 {
        self.config.secrets.secret_start()
    }

    /// Total bits in the leakable region.
    #[getter]
    fn region_bits(&self) -> u64 {
        self.config.secrets.region_bits()
    }

    /// Ground truth bit at index `x`.
    fn bit(&self, x: u64) -> u8 {
        u8::from(self.config.secrets.bit(x))
    }

    /// Sends one request and returns its payload.
    fn send(&mut self, opcode: &str, arg: u64) -> PyResult<u64> {
        let op = parse("opcode", opcode, Opcode::from_name)?;
        Ok(self.session.request(op, arg).map_err(attack_err)?.payload)
    }

    /// Sends one request and returns its round-trip time in ns.
    fn timed(&mut self, opcode: &str, arg: u64) -> PyResult<f64> {
        let op = parse("opcode", opcode, Opcode::from_name)?;
        self.session.timed(op, arg).map_err(attack_err)
    }

    /// Requests sent so far, by opcode name plus `total`.
    fn request_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for op in Opcode::ALL {
            d.set_item(op.name(), self.session.count(op))?;
        }
        d.set_item("total", self.session.total_requests())?;
        Ok(d)
    }

    /// Measures both corner cases and returns the gated calibration.
    #[pyo3(signature = (channel = "cache", n = 100_000))]
    fn calibrate(&mut self, channel: &str, n: usize) -> PyResult<PyCalibration> {
        let plan = self.plan(channel, n, None, "bayes")?;
        let run = calibrate_samples(&mut self.session, &plan).map_err(attack_err)?;
        Ok(run.calibration.into())
    }

    /// Leaks `bits` bits from `start` (default: the secret). Calibrates
    /// first unless a calibration is given.
    #[pyo3(signature = (
        bits = 8,
        start = None,
        channel = "cache",
        n = 100_000,
        calibration = None,
        calibration_n = None,
        decision = "bayes",
    ))]
    #[allow(clippy::too_many_arguments)]
    fn leak<'py>(
        &mut self,
        py: Python<'py>,
        bits: u64,
        start: Option<u64>,
        channel: &str,
        n: usize,
        calibration: Option<PyCalibration>,
        calibration_n: Option<usize>,
        decision: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut plan = self.plan(channel, n, calibration_n, decision)?;
        let start = start.unwrap_or(self.config.secrets.secret_start());
        plan.target_bit_range = start..start + bits;
        plan.validate().map_err(attack_err)?;
        let calib = match calibration {
            Some(c) => c.core(),
            None => {
                calibrate_samples(&mut self.session, &plan)
                    .map_err(attack_err)?
                    .calibration
            }
        };
        let report = leak_range(&mut self.session, &plan, &calib, |_, _| {}).map_err(attack_err)?;
        let truth: Vec<u8> = plan.target_bit_range.clone().map(|x| self.bit(x)).collect();
        let d = PyDict::new(py);
        d.set_item("bits", bit_list(&report.bits))?;
        d.set_item("bytes", PyBytes::new(py, &report.bytes()))?;
        d.set_item("truth", bit_list(&truth))?;
        d.set_item("error_rate", stats::error_rate(&report.bits, &truth).unwrap_or(f64::NAN))?;
        d.set_item(
            "confidences",
            report.results.iter().map(|r| r.confidence).collect::<Vec<_>>(),
        )?;
        d.set_item("means_ns", report.results.iter().map(|r| r.mean_ns).collect::<Vec<_>>())?;
        d.set_item("low_confidence_bits", report.low_confidence_bits)?;
        d.set_item("calibration", Py::new(py, PyCalibration::from(calib))?)?;
        d.set_item("requests_per_bit", report.rate.requests_per_bit)?;
        d.set_item("byte_minutes", report.rate.byte_minutes())?;
        Ok(d)
    }

    /// Binary-searches the valid offset of the ASLR gadget.
    #[pyo3(signature = (n = 1_000_000))]
    fn break_aslr<'py>(&mut self, py: Python<'py>, n: usize) -> PyResult<Bound<'py, PyDict>> {
        let plan = AslrPlan {
            space_bits: self.config.aslr_space_bits,
            probes_per_check: n,
            ..AslrPlan::default()
        };
        let r = break_aslr(&mut self.session, &plan).map_err(attack_err)?;
        let d = PyDict::new(py);
        d.set_item("offset", r.offset)?;
        d.set_item("expected", self.config.valid_aslr_offset)?;
        d.set_item("rounds", r.rounds.len())?;
        d.set_item("requests", r.requests)?;
        Ok(d)
    }

    /// Recovers the value behind the comparison gadget.
    #[pyo3(signature = (n = 100_000, value_bits = 16, calibration = None))]
    fn value_search<'py>(
        &mut self,
        py: Python<'py>,
        n: usize,
        value_bits: u32,
        calibration: Option<PyCalibration>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let calib = match calibration {
            Some(c) => c.core(),
            None => self.calibrate("cache", n)?.core(),
        };
        let plan = ValuePlan {
            value_bits,
            measurements_per_round: n,
            secret_slot: self.config.value_slots as u32,
            ..ValuePlan::default()
        };
        let r = value_threshold_search(&mut self.session, &plan, &calib).map_err(attack_err)?;
        let d = PyDict::new(py);
        d.set_item("value", r.value)?;
        d.set_item("expected", self.config.secret_value)?;
        d.set_item("rounds", r.rounds.len())?;
        Ok(d)
    }
}

impl Lab {
    fn plan(
        &self,
        channel: &str,
        n: usize,
        calibration_n: Option<usize>,
        decision: &str,
    ) -> PyResult<ExtractionPlan> {
        let wait_mode = match self.config.clock_mode {
            ClockMode::Virtual => WaitMode::AdvanceClock,
            ClockMode::Wall => WaitMode::Sleep,
        };
        let plan = ExtractionPlan {
            channel: parse("channel", channel, Channel::parse)?,
            measurements_per_bit: n,
            calibration_samples: calibration_n,
            decision: parse("decision rule", decision, DecisionRule::parse)?,
            wait_mode,
            ..ExtractionPlan::default()
        };
        plan.validate().map_err(attack_err)?;
        Ok(plan)
    }
}

/// Probability that a download of `bytes` evicts the flag.
#[pyfunction]
fn eviction_probability(bytes: u64) -> f64 {
    UarchParams::default().eviction_probability(bytes)
}

/// Extra cycles an AVX2 instruction pays after `idle_ns` of inactivity.
#[pyfunction]
fn avx_penalty_cycles(idle_ns: u64) -> u64 {
    MicroarchState::new(UarchParams::default()).avx.penalty(idle_ns)
}

/// Mode of `samples` after binning and moving-average smoothing; returns
/// the refined estimate in ns.
#[pyfunction]
#[pyo3(signature = (samples, bin_width_ns = 1000.0, window = 11))]
fn smoothed_mode(samples: Vec<f64>, bin_width_ns: f64, window: usize) -> PyResult<f64> {
    let spec = HistogramSpec {
        bin_width_ns,
        smoothing_window: window,
        range: None,
    };
    let h = stats::histogram(&samples, &spec).map_err(value_err)?;
    Ok(stats::smoothed_mode(&h, window).map_err(value_err)?.refined_ns)
}

#[pyfunction]
fn bytes_to_bits(data: &[u8]) -> Vec<u32> {
    bit_list(&stats::bytes_to_bits(data))
}

#[pyfunction]
fn bits_to_bytes<'py>(py: Python<'py>, bits: Vec<u8>) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &stats::bits_to_bytes(&bits))
}

/// Writes the dataset behind a figure into `out_dir` and returns its
/// summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (figure, out_dir, seed = 0, n = None))]
fn generate_figure(figure: &str, out_dir: PathBuf, seed: u64, n: Option<usize>) -> PyResult<String> {
    let id = FigureId::parse(figure).map_err(value_err)?;
    let opts = FigureOptions {
        seed,
        n,
        out_dir,
        victim: VictimConfig::default(),
    };
    let summary = run_figure(id, &opts).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(summary.to_string())
}

#[pymodule]
fn nslab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lab>()?;
    m.add_class::<PyCalibration>()?;
    m.add_function(wrap_pyfunction!(eviction_probability, m)?)?;
    m.add_function(wrap_pyfunction!(avx_penalty_cycles, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_mode, m)?)?;
    m.add_function(wrap_pyfunction!(bytes_to_bits, m)?)?;
    m.add_function(wrap_pyfunction!(bits_to_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(generate_figure, m)?)?;
    m.add(
        "FIGURES",
        FigureId::ALL.iter().map(|f| f.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
