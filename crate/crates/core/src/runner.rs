//! Run configuration documents and the commands behind the `locksim` binary.
//!
//! Every command validates its whole configuration before computing, writes
//! its outputs only after the computation succeeded, and stamps each output
//! with the SHA-256 of the canonical configuration and the seed used.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    decay_grid, extract_echo, quality_of, EchoComponent, EchoMethod, EchoProbe, FitReport,
};
use crate::bath::{self, BathModel, BathParams, CalibrationOptions};
use crate::bloch::IonParams;
use crate::ensemble::{self, Distribution, EnsembleSpec, RecordMode, SweepAxis, SweepOptions};
use crate::error::{Error, FieldError, Result};
use crate::sequence::{ReadoutComponent, ReadoutDoc, SegmentDoc, Sequence, SequenceDoc, SequenceFamily, DEFAULT_TAU_READ};
use crate::shf::{self, ClusterDoc, PathwayReport, RobustnessReport};
use crate::units::{deg_to_rad, khz_to_rad_per_s, rad_per_s_to_khz, s_to_us, us_to_s};

/// Environment variable consulted when neither flag nor config sets a seed.
pub const ENV_SEED: &str = "SIM_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        e if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SequenceConfig {
    TwoPulseEcho {
        chi_khz: f64,
        #[serde(default)]
        tau_us: Option<f64>,
    },
    RotaryEcho {
        chi_khz: f64,
        #[serde(default)]
        drive_us: Option<f64>,
    },
    RadiationLocking {
        chi_khz: f64,
        #[serde(default)]
        theta_deg: f64,
        #[serde(default)]
        lock_us: Option<f64>,
        #[serde(default = "default_tau_read_us")]
        tau_read_us: f64,
    },
    RlArtifact {
        chi_khz: f64,
        #[serde(default)]
        theta_deg: f64,
        #[serde(default)]
        lock_us: Option<f64>,
        #[serde(default = "default_tau_read_us")]
        tau_read_us: f64,
    },
    RlQuadratureProbe {
        chi_khz: f64,
        #[serde(default)]
        lock_us: Option<f64>,
        #[serde(default = "default_tau_read_us")]
        tau_read_us: f64,
    },
    Fid {
        chi_khz: f64,
        drive_us: f64,
        #[serde(default)]
        observe_us: Option<f64>,
    },
    Custom {
        segments: Vec<SegmentDoc>,
        #[serde(default)]
        readouts: Vec<ReadoutDoc>,
        #[serde(default)]
        demod_phase_deg: f64,
    },
}

fn default_tau_read_us() -> f64 {
    s_to_us(DEFAULT_TAU_READ)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionConfig {
    Gaussian,
    Lorentzian,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordConfig {
    Uniform,
    Windows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_ions: usize,
    pub inhomogeneous_fwhm_khz: f64,
    pub distribution: DistributionConfig,
    /// Truncation of the Lorentzian, in FWHM units.
    pub lorentzian_cutoff_fwhm: f64,
    pub bath_realizations_per_ion: usize,
    pub dt_us: f64,
    pub record_dt_us: f64,
    pub record: RecordConfig,
    pub detector_noise: f64,
    pub max_steps: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let d = EnsembleSpec::default();
        Self {
            n_ions: d.n_ions,
            inhomogeneous_fwhm_khz: rad_per_s_to_khz(d.inhomogeneous_width),
            distribution: DistributionConfig::Gaussian,
            lorentzian_cutoff_fwhm: 5.0,
            bath_realizations_per_ion: d.n_bath_realizations_per_ion,
            dt_us: s_to_us(d.dt),
            record_dt_us: s_to_us(d.record_dt),
            record: RecordConfig::Uniform,
            detector_noise: d.detector_noise,
            max_steps: d.step_limit,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IonConfig {
    pub detuning_khz: f64,
    /// Omitted or null for no population decay.
    pub t1_us: Option<f64>,
    /// Omitted or null for no Markovian dephasing.
    pub t2_us: Option<f64>,
    pub w_eq: f64,
}

impl Default for IonConfig {
    fn default() -> Self {
        Self {
            detuning_khz: 0.0,
            t1_us: None,
            t2_us: None,
            w_eq: -1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathConfig {
    #[serde(default)]
    pub model: BathModel,
    pub delta_rms_khz: f64,
    pub tau_c_us: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Defaults to the component carrying the family's signal.
    pub component: Option<EchoComponent>,
    pub method: EchoMethod,
    /// Family-parameter grid for decay fits.
    pub durations_us: Option<Vec<f64>>,
    /// Used to build a grid when `durations_us` is absent.
    pub expected_decay_us: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisConfig {
    #[serde(rename = "chi_khz")]
    ChiKhz,
    #[serde(rename = "theta_deg")]
    ThetaDeg,
    #[serde(rename = "duration_us")]
    DurationUs,
}

impl AxisConfig {
    fn axis(self) -> SweepAxis {
        match self {
            AxisConfig::ChiKhz => SweepAxis::Chi,
            AxisConfig::ThetaDeg => SweepAxis::Theta,
            AxisConfig::DurationUs => SweepAxis::Duration,
        }
    }

    fn to_internal(self, x: f64) -> f64 {
        match self {
            AxisConfig::ChiKhz => khz_to_rad_per_s(x),
            AxisConfig::ThetaDeg => deg_to_rad(x),
            AxisConfig::DurationUs => us_to_s(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            AxisConfig::ChiKhz => "chi_khz",
            AxisConfig::ThetaDeg => "theta_deg",
            AxisConfig::DurationUs => "duration_us",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: AxisConfig,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// One run: what to simulate, on which ensemble, and how to analyse it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub ion: IonConfig,
    #[serde(default)]
    pub bath: Option<BathConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Settings for `calibrate`; every field may also come from a flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub target_t2_us: Option<f64>,
    pub delta_khz: Option<f64>,
    pub model: BathModel,
    pub probe_chi_khz: f64,
    pub realizations: usize,
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub output: OutputConfig,
    pub seed: Option<u64>,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        let p = EchoProbe::default();
        let o = CalibrationOptions::default();
        Self {
            target_t2_us: None,
            delta_khz: None,
            model: BathModel::GaussMarkov,
            probe_chi_khz: rad_per_s_to_khz(p.chi),
            realizations: p.realizations,
            rel_tol: o.rel_tol,
            max_iterations: o.max_iterations,
            output: OutputConfig::default(),
            seed: None,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the machine default. Never changes results.
    pub workers: usize,
}

/// Flag, then config, then `SIM_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| {
            Error::Config(vec![FieldError::new(ENV_SEED, format!("not an unsigned integer: {v:?}"))])
        }),
        None => Ok(0),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(ENV_SEED).ok()
}

/// Parses a JSON document, reporting the path of the offending field.
pub fn parse_document<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let path = if path == "." { "<root>".to_string() } else { path };
        Error::Config(vec![FieldError::new(path, inner.to_string())])
    })
}

pub fn load_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    parse_document(&text)
}

/// SHA-256 of the compact, key-sorted JSON form of `doc`.
pub fn config_hash<T: Serialize>(doc: &T) -> Result<String> {
    let value = serde_json::to_value(doc)?;
    let bytes = serde_json::to_vec(&value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Default)]
struct Checks(Vec<FieldError>);

impl Checks {
    fn fail(&mut self, path: &str, msg: impl Into<String>) {
        self.0.push(FieldError::new(path, msg));
    }

    fn finite(&mut self, path: &str, x: f64) -> bool {
        if x.is_finite() {
            true
        } else {
            self.fail(path, format!("must be finite, got {x}"));
            false
        }
    }

    fn positive(&mut self, path: &str, x: f64) {
        if self.finite(path, x) && x <= 0.0 {
            self.fail(path, format!("must be > 0, got {x}"));
        }
    }

    fn non_negative(&mut self, path: &str, x: f64) {
        if self.finite(path, x) && x < 0.0 {
            self.fail(path, format!("must be >= 0, got {x}"));
        }
    }

    fn opt_positive(&mut self, path: &str, x: Option<f64>) {
        if let Some(x) = x {
            self.positive(path, x);
        }
    }

    fn finish(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.0))
        }
    }
}

/// A validated sequence: either a family with its (optional) parameter or a
/// fixed custom sequence.
#[derive(Debug, Clone)]
pub enum Protocol {
    Family {
        family: SequenceFamily,
        param: Option<f64>,
    },
    Custom(Sequence),
}

impl Protocol {
    pub fn from_config(c: &SequenceConfig) -> Result<Self> {
        let mut ch = Checks::default();
        let (family, param) = match *c {
            SequenceConfig::Custom {
                ref segments,
                ref readouts,
                demod_phase_deg,
            } => {
                let doc = SequenceDoc {
                    segments: segments.clone(),
                    readouts: readouts.clone(),
                    demod_phase_deg,
                };
                for (k, s) in segments.iter().enumerate() {
                    ch.non_negative(&format!("sequence.segments[{k}].duration_us"), s.duration_us);
                    ch.non_negative(&format!("sequence.segments[{k}].chi_khz"), s.chi_khz);
                    ch.finite(&format!("sequence.segments[{k}].phase_deg"), s.phase_deg);
                }
                ch.finish()?;
                return Sequence::try_from(&doc)
                    .map(Protocol::Custom)
                    .map_err(|e| Error::Config(vec![FieldError::new("sequence", e.to_string())]));
            }
            SequenceConfig::TwoPulseEcho { chi_khz, tau_us } => {
                ch.positive("sequence.chi_khz", chi_khz);
                ch.opt_positive("sequence.tau_us", tau_us);
                (SequenceFamily::TwoPulseEcho { chi: khz_to_rad_per_s(chi_khz) }, tau_us.map(|t| 2.0 * us_to_s(t)))
            }
            SequenceConfig::RotaryEcho { chi_khz, drive_us } => {
                ch.positive("sequence.chi_khz", chi_khz);
                ch.opt_positive("sequence.drive_us", drive_us);
                (SequenceFamily::RotaryEcho { chi: khz_to_rad_per_s(chi_khz) }, drive_us.map(us_to_s))
            }
            SequenceConfig::RadiationLocking {
                chi_khz,
                theta_deg,
                lock_us,
                tau_read_us,
            }
            | SequenceConfig::RlArtifact {
                chi_khz,
                theta_deg,
                lock_us,
                tau_read_us,
            } => {
                ch.positive("sequence.chi_khz", chi_khz);
                ch.finite("sequence.theta_deg", theta_deg);
                ch.opt_positive("sequence.lock_us", lock_us);
                ch.positive("sequence.tau_read_us", tau_read_us);
                let (chi, theta, tau_read) = (khz_to_rad_per_s(chi_khz), deg_to_rad(theta_deg), us_to_s(tau_read_us));
                let fam = if matches!(c, SequenceConfig::RadiationLocking { .. }) {
                    SequenceFamily::RadiationLocking { chi, theta, tau_read }
                } else {
                    SequenceFamily::RlArtifact { chi, theta, tau_read }
                };
                (fam, lock_us.map(us_to_s))
            }
            SequenceConfig::RlQuadratureProbe {
                chi_khz,
                lock_us,
                tau_read_us,
            } => {
                ch.positive("sequence.chi_khz", chi_khz);
                ch.opt_positive("sequence.lock_us", lock_us);
                ch.positive("sequence.tau_read_us", tau_read_us);
                (
                    SequenceFamily::RlQuadratureProbe {
                        chi: khz_to_rad_per_s(chi_khz),
                        tau_read: us_to_s(tau_read_us),
                    },
                    lock_us.map(us_to_s),
                )
            }
            SequenceConfig::Fid {
                chi_khz,
                drive_us,
                observe_us,
            } => {
                ch.positive("sequence.chi_khz", chi_khz);
                ch.non_negative("sequence.drive_us", drive_us);
                ch.opt_positive("sequence.observe_us", observe_us);
                (
                    SequenceFamily::Fid {
                        chi: khz_to_rad_per_s(chi_khz),
                        t_drive: us_to_s(drive_us),
                    },
                    observe_us.map(us_to_s),
                )
            }
        };
        ch.finish()?;
        Ok(Protocol::Family { family, param })
    }

    /// The concrete sequence to simulate.
    pub fn sequence(&self) -> Result<Sequence> {
        match self {
            Protocol::Custom(s) => Ok(s.clone()),
            Protocol::Family { family, param } => {
                let p = param.ok_or_else(|| {
                    Error::Config(vec![FieldError::new(
                        "sequence",
                        format!("{} needs its duration ({}) to simulate", family.name(), param_key(family)),
                    )])
                })?;
                family
                    .build(p)
                    .map_err(|e| Error::Config(vec![FieldError::new("sequence", e.to_string())]))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Custom(_) => "custom",
            Protocol::Family { family, .. } => family.name(),
        }
    }
}

fn param_key(f: &SequenceFamily) -> &'static str {
    match f {
        SequenceFamily::TwoPulseEcho { .. } => "tau_us",
        SequenceFamily::RotaryEcho { .. } => "drive_us",
        SequenceFamily::Fid { .. } => "observe_us",
        _ => "lock_us",
    }
}

impl EnsembleConfig {
    pub fn to_spec(&self, seed: u64) -> Result<EnsembleSpec> {
        let mut ch = Checks::default();
        if self.n_ions == 0 {
            ch.fail("ensemble.n_ions", "must be >= 1");
        }
        if self.bath_realizations_per_ion == 0 {
            ch.fail("ensemble.bath_realizations_per_ion", "must be >= 1");
        }
        ch.non_negative("ensemble.inhomogeneous_fwhm_khz", self.inhomogeneous_fwhm_khz);
        ch.positive("ensemble.dt_us", self.dt_us);
        ch.positive("ensemble.record_dt_us", self.record_dt_us);
        if self.record_dt_us.is_finite() && self.dt_us.is_finite() && self.record_dt_us < self.dt_us {
            ch.fail("ensemble.record_dt_us", format!("must be >= dt_us = {}", self.dt_us));
        }
        ch.non_negative("ensemble.detector_noise", self.detector_noise);
        ch.positive("ensemble.max_steps", self.max_steps);
        if self.distribution == DistributionConfig::Lorentzian {
            ch.positive("ensemble.lorentzian_cutoff_fwhm", self.lorentzian_cutoff_fwhm);
        }
        ch.finish()?;
        Ok(EnsembleSpec {
            n_ions: self.n_ions,
            inhomogeneous_width: khz_to_rad_per_s(self.inhomogeneous_fwhm_khz),
            distribution: match self.distribution {
                DistributionConfig::Gaussian => Distribution::Gaussian,
                DistributionConfig::Lorentzian => Distribution::LorentzianTruncated {
                    cutoff: self.lorentzian_cutoff_fwhm,
                },
                DistributionConfig::Delta => Distribution::Delta,
            },
            n_bath_realizations_per_ion: self.bath_realizations_per_ion,
            seed,
            dt: us_to_s(self.dt_us),
            record_dt: us_to_s(self.record_dt_us),
            record: match self.record {
                RecordConfig::Uniform => RecordMode::Uniform,
                RecordConfig::Windows => RecordMode::Windows,
            },
            detector_noise: self.detector_noise,
            step_limit: self.max_steps,
        })
    }
}

impl IonConfig {
    pub fn to_params(&self) -> Result<IonParams> {
        let mut ch = Checks::default();
        ch.finite("ion.detuning_khz", self.detuning_khz);
        ch.opt_positive("ion.t1_us", self.t1_us);
        ch.opt_positive("ion.t2_us", self.t2_us);
        ch.finite("ion.w_eq", self.w_eq);
        ch.finish()?;
        let p = IonParams {
            delta0: khz_to_rad_per_s(self.detuning_khz),
            t1: self.t1_us.map_or(f64::INFINITY, us_to_s),
            t2_markov: self.t2_us.map_or(f64::INFINITY, us_to_s),
            w_eq: self.w_eq,
        };
        p.validate()
            .map_err(|e| Error::Config(vec![FieldError::new("ion", e.to_string())]))?;
        Ok(p)
    }
}

impl BathConfig {
    pub fn to_params(&self) -> Result<BathParams> {
        let mut ch = Checks::default();
        ch.non_negative("bath.delta_rms_khz", self.delta_rms_khz);
        ch.positive("bath.tau_c_us", self.tau_c_us);
        ch.finish()?;
        Ok(BathParams {
            delta_rms: khz_to_rad_per_s(self.delta_rms_khz),
            tau_c: us_to_s(self.tau_c_us),
            model: self.model,
        })
    }

    pub fn from_params(p: &BathParams) -> Self {
        Self {
            model: p.model,
            delta_rms_khz: rad_per_s_to_khz(p.delta_rms),
            tau_c_us: s_to_us(p.tau_c),
        }
    }
}

/// Everything a simulate or sweep run needs, checked and in internal units.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub protocol: Protocol,
    pub spec: EnsembleSpec,
    pub ion: IonParams,
    pub bath: BathParams,
    pub seed: u64,
    pub config_sha256: String,
}

impl RunConfig {
    /// Validates every section, collecting all field errors.
    pub fn resolve(&self, seed: u64) -> Result<Resolved> {
        let mut ch = Checks::default();
        let protocol = Protocol::from_config(&self.sequence);
        let spec = self.ensemble.to_spec(seed);
        let ion = self.ion.to_params();
        let bath = self.bath.as_ref().map_or(Ok(BathParams::off()), BathConfig::to_params);
        if let Some(d) = &self.analysis.durations_us {
            for (k, &x) in d.iter().enumerate() {
                ch.positive(&format!("analysis.durations_us[{k}]"), x);
            }
        }
        ch.opt_positive("analysis.expected_decay_us", self.analysis.expected_decay_us);
        let mut out = Vec::new();
        for r in [protocol.as_ref().err(), spec.as_ref().err(), ion.as_ref().err(), bath.as_ref().err()]
            .into_iter()
            .flatten()
        {
            match r {
                Error::Config(e) => out.extend(e.iter().cloned()),
                e => out.push(FieldError::new("<root>", e.to_string())),
            }
        }
        ch.0.extend(out);
        ch.finish()?;
        Ok(Resolved {
            protocol: protocol?,
            spec: spec?,
            ion: ion?,
            bath: bath?,
            seed,
            config_sha256: config_hash(self)?,
        })
    }
}

fn out_dir(args: &CommonArgs, cfg: &OutputConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.dir.clone())
        .unwrap_or_else(|| PathBuf::from("locksim-out"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn stamp(hash: &str, seed: u64) -> Vec<String> {
    vec![format!("config_sha256={hash}"), format!("seed={seed}")]
}

fn load_run_config(args: &CommonArgs) -> Result<RunConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config(vec![FieldError::new("--config", "a run configuration is required")]))?;
    load_document(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoSummary {
    pub amplitude: f64,
    pub peak_time_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSummary {
    pub index: usize,
    pub component: ReadoutComponent,
    pub start_us: f64,
    pub end_us: f64,
    pub echo_time_us: f64,
    pub in_phase: Option<EchoSummary>,
    pub quadrature: Option<EchoSummary>,
    /// Set when the window could not be read.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub config_sha256: String,
    pub seed: u64,
    pub sequence: String,
    pub total_duration_us: f64,
    pub n_samples: usize,
    pub readouts: Vec<ReadoutSummary>,
}

/// Runs one sequence and writes `trace.csv` and `summary.json`.
pub fn cmd_simulate(args: &CommonArgs) -> Result<SimulateSummary> {
    let cfg = load_run_config(args)?;
    let seed = resolve_seed(args.seed, cfg.seed, env_seed().as_deref())?;
    let r = cfg.resolve(seed)?;
    let seq = r.protocol.sequence()?;
    let method = cfg.analysis.method;
    let trace = ensemble::with_workers(args.workers, || ensemble::run_ensemble(&r.spec, &seq, &r.ion, &r.bath))??;

    let mut readouts = Vec::new();
    for (index, ro) in seq.readouts().iter().enumerate() {
        let window = (ro.start, ro.end);
        let read = |c: EchoComponent| {
            extract_echo(&trace, window, c, method).map(|m| EchoSummary {
                amplitude: m.amplitude,
                peak_time_us: s_to_us(m.peak_time),
            })
        };
        let mut s = ReadoutSummary {
            index,
            component: ro.component,
            start_us: s_to_us(ro.start),
            end_us: s_to_us(ro.end),
            echo_time_us: s_to_us(ro.echo_time),
            in_phase: None,
            quadrature: None,
            error: None,
        };
        let mut outcome = Ok(());
        if ro.component.includes_in_phase() {
            match read(EchoComponent::InPhase) {
                Ok(e) => s.in_phase = Some(e),
                Err(e) => outcome = Err(e),
            }
        }
        if ro.component.includes_quadrature() {
            match read(EchoComponent::Quadrature) {
                Ok(e) => s.quadrature = Some(e),
                Err(e) => outcome = Err(e),
            }
        }
        s.error = outcome.err().map(|e| e.to_string());
        readouts.push(s);
    }
    let summary = SimulateSummary {
        config_sha256: r.config_sha256.clone(),
        seed,
        sequence: r.protocol.name().to_string(),
        total_duration_us: s_to_us(seq.total_duration()),
        n_samples: trace.len(),
        readouts,
    };

    let dir = out_dir(args, &cfg.output);
    fs::create_dir_all(&dir)?;
    let mut comments = stamp(&r.config_sha256, seed);
    comments.push(format!("sequence={}", r.protocol.name()));
    trace.write_csv(create_file(&dir.join("trace.csv"))?, &comments)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPointReport {
    pub config_sha256: String,
    pub seed: u64,
    pub axis: String,
    pub swept_value: f64,
    pub durations_us: Vec<f64>,
    pub fit: Option<FitReport>,
    pub error: Option<String>,
}

fn echo_component(c: ReadoutComponent) -> EchoComponent {
    match c {
        ReadoutComponent::Quadrature => EchoComponent::Quadrature,
        ReadoutComponent::InPhase | ReadoutComponent::Both => EchoComponent::InPhase,
    }
}

/// Fits a decay time at every sweep value; writes `sweep.csv` and one
/// `fits/point_NNN.json` per value.
pub fn cmd_sweep(args: &CommonArgs) -> Result<Vec<SweepPointReport>> {
    let cfg = load_run_config(args)?;
    let seed = resolve_seed(args.seed, cfg.seed, env_seed().as_deref())?;
    let r = cfg.resolve(seed)?;
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config(vec![FieldError::new("sweep", "a sweep section is required")]))?;
    let family = match r.protocol {
        Protocol::Family { family, .. } => family,
        Protocol::Custom(_) => {
            return Err(Error::Config(vec![FieldError::new(
                "sequence.family",
                "custom sequences cannot be swept",
            )]))
        }
    };
    if sw.values.is_empty() {
        return Err(Error::Config(vec![FieldError::new("sweep.values", "grid is empty")]));
    }
    let grid: Vec<f64> = sw.values.iter().map(|&x| sw.axis.to_internal(x)).collect();
    let fixed = cfg.analysis.durations_us.as_ref().map(|d| d.iter().map(|&x| us_to_s(x)).collect::<Vec<_>>());
    let expected = cfg.analysis.expected_decay_us.map(us_to_s);
    if fixed.is_none() && expected.is_none() {
        return Err(Error::Config(vec![FieldError::new(
            "analysis.durations_us",
            "give durations_us or expected_decay_us for a sweep",
        )]));
    }
    let durations_for = |f: &SequenceFamily| -> Vec<f64> {
        fixed
            .clone()
            .unwrap_or_else(|| decay_grid(expected.unwrap_or(0.0), f.min_param()))
    };
    let component = cfg
        .analysis
        .component
        .unwrap_or_else(|| echo_component(family.default_component()));

    // Build every sequence up front so that configuration problems surface
    // before any simulation starts.
    let mut ch = Checks::default();
    let mut families = Vec::with_capacity(grid.len());
    for (k, &v) in grid.iter().enumerate() {
        match sw.axis.axis().apply(family, v) {
            Ok(f) => {
                let durations = durations_for(&f);
                if durations.len() < 3 {
                    ch.fail("analysis.durations_us", "need at least 3 durations");
                }
                if let Some(bad) = durations.iter().find_map(|&d| f.build(d).err()) {
                    ch.fail(&format!("sweep.values[{k}]"), bad.to_string());
                }
                families.push((f, durations));
            }
            Err(e) => ch.fail(&format!("sweep.values[{k}]"), e.to_string()),
        }
    }
    ch.finish()?;

    let opts = SweepOptions {
        component,
        method: cfg.analysis.method,
        durations: fixed.clone(),
    };
    let rows = ensemble::with_workers(args.workers, || {
        ensemble::sweep(sw.axis.axis(), &grid, family, &r.spec, &r.ion, &r.bath, &opts, durations_for)
    })?
    .map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(vec![FieldError::new("sweep.values", m)]),
        e => e,
    })?;

    let reports: Vec<SweepPointReport> = rows
        .iter()
        .zip(&families)
        .zip(&sw.values)
        .map(|((row, (fam, durations)), &external)| {
            let (fit, error) = match &row.fit {
                Ok(f) => (Some(FitReport::new(fam, component, f, quality_of(f, durations))), None),
                Err(e) => (None, Some(e.clone())),
            };
            SweepPointReport {
                config_sha256: r.config_sha256.clone(),
                seed,
                axis: sw.axis.name().to_string(),
                swept_value: external,
                durations_us: durations.iter().map(|&d| s_to_us(d)).collect(),
                fit,
                error,
            }
        })
        .collect();

    let dir = out_dir(args, &cfg.output);
    let fits = dir.join("fits");
    fs::create_dir_all(&fits)?;
    let mut comments = stamp(&r.config_sha256, seed);
    comments.push(format!("sequence={} axis={}", family.name(), sw.axis.name()));
    let values = sw.values.clone();
    let lookup = |internal: f64| {
        grid.iter()
            .position(|&g| g == internal)
            .map_or(f64::NAN, |k| values[k])
    };
    ensemble::write_sweep_csv(create_file(&dir.join("sweep.csv"))?, &rows, lookup, &comments)?;
    for (k, rep) in reports.iter().enumerate() {
        write_json(&fits.join(format!("point_{k:03}.json")), rep)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStepDoc {
    pub tau_c_us: f64,
    pub t2_sim_us: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationDoc {
    pub config_sha256: String,
    pub seed: u64,
    /// Ready to paste as the `bath` section of a run configuration.
    pub bath: BathConfig,
    pub target_t2_us: f64,
    pub t2_sim_us: f64,
    pub narrowing_seed_tau_c_us: f64,
    pub probe_chi_khz: f64,
    pub probe_realizations: usize,
    pub log: Vec<CalibrationStepDoc>,
}

/// Finds the bath correlation time that reproduces a target echo T₂ and
/// writes `bath.json`.
pub fn cmd_calibrate(args: &CommonArgs, target_t2_us: Option<f64>, delta_khz: Option<f64>) -> Result<CalibrationDoc> {
    let mut cfg: CalibrateConfig = match &args.config {
        Some(p) => load_document(p)?,
        None => CalibrateConfig::default(),
    };
    cfg.target_t2_us = target_t2_us.or(cfg.target_t2_us);
    cfg.delta_khz = delta_khz.or(cfg.delta_khz);
    let seed = resolve_seed(args.seed, cfg.seed, env_seed().as_deref())?;

    let mut ch = Checks::default();
    match cfg.target_t2_us {
        Some(t) => ch.positive("target_t2_us", t),
        None => ch.fail("target_t2_us", "required (flag --target-t2-us or config)"),
    }
    match cfg.delta_khz {
        Some(d) => ch.positive("delta_khz", d),
        None => ch.fail("delta_khz", "required (flag --delta-khz or config)"),
    }
    ch.positive("probe_chi_khz", cfg.probe_chi_khz);
    ch.positive("rel_tol", cfg.rel_tol);
    if cfg.realizations == 0 {
        ch.fail("realizations", "must be >= 1");
    }
    ch.finish()?;
    let target = us_to_s(cfg.target_t2_us.unwrap_or_default());
    let delta = khz_to_rad_per_s(cfg.delta_khz.unwrap_or_default());
    // The flags are folded in, so the hash covers the whole request.
    let hashed = CalibrateConfig {
        seed: Some(seed),
        output: OutputConfig::default(),
        ..cfg.clone()
    };
    let config_sha256 = config_hash(&hashed)?;

    let probe = EchoProbe {
        chi: khz_to_rad_per_s(cfg.probe_chi_khz),
        realizations: cfg.realizations,
        seed,
        ..EchoProbe::default()
    };
    let opts = CalibrationOptions {
        rel_tol: cfg.rel_tol,
        max_iterations: cfg.max_iterations,
        ..CalibrationOptions::default()
    };
    let cal = ensemble::with_workers(args.workers, || {
        bath::calibrate(target, delta, cfg.model, opts, |p| probe.measure(p, target).map(|m| m.fit.t_dec))
    })??;

    let doc = CalibrationDoc {
        config_sha256,
        seed,
        bath: BathConfig::from_params(&cal.params),
        target_t2_us: s_to_us(cal.target_t2),
        t2_sim_us: s_to_us(cal.t2_sim),
        narrowing_seed_tau_c_us: s_to_us(cal.seed_tau_c),
        probe_chi_khz: cfg.probe_chi_khz,
        probe_realizations: cfg.realizations,
        log: cal
            .log
            .iter()
            .map(|s| CalibrationStepDoc {
                tau_c_us: s_to_us(s.tau_c),
                t2_sim_us: s_to_us(s.t2_sim),
            })
            .collect(),
    };
    let dir = out_dir(args, &cfg.output);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("bath.json"), &doc)?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShfDoc {
    pub config_sha256: String,
    pub seed: u64,
    pub cluster: ClusterDoc,
    pub report: PathwayReport,
    pub variants: Option<RobustnessReport>,
}

/// Pathway analysis of a spin cluster (the built-in five-fluorine preset
/// when no config is given); writes `pathways.json` and `side_holes.csv`.
pub fn cmd_shf(args: &CommonArgs, threshold: f64, variants: usize) -> Result<ShfDoc> {
    let cluster_doc: ClusterDoc = match &args.config {
        Some(p) => load_document(p)?,
        None => ClusterDoc::from_cluster(&shf::laf3_like_preset()),
    };
    let seed = resolve_seed(args.seed, None, env_seed().as_deref())?;
    let mut ch = Checks::default();
    if !(threshold.is_finite() && (0.0..=1.0).contains(&threshold)) {
        ch.fail("--threshold", format!("must lie in [0, 1], got {threshold}"));
    }
    ch.finish()?;
    let cluster = cluster_doc.to_cluster()?;
    let config_sha256 = config_hash(&(&cluster_doc, threshold, variants))?;

    let (report, robustness) = ensemble::with_workers(args.workers, || -> Result<_> {
        let report = shf::analyze(&cluster, threshold)?;
        let robustness = if variants > 0 {
            Some(shf::neighbor_robustness(&shf::resample_variants(&cluster, variants, seed), threshold)?)
        } else {
            None
        };
        Ok((report, robustness))
    })??;
    let doc = ShfDoc {
        config_sha256,
        seed,
        cluster: ClusterDoc::from_cluster(&cluster),
        report,
        variants: robustness,
    };
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("locksim-out"));
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("pathways.json"), &doc)?;
    let mut comments = stamp(&doc.config_sha256, seed);
    comments.push(format!("threshold={threshold}"));
    shf::write_side_hole_csv(create_file(&dir.join("side_holes.csv"))?, &doc.report.side_hole, &comments)?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_run(text: &str) -> Result<RunConfig> {
        parse_document(text)
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some(" 3 ")).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(matches!(resolve_seed(None, None, Some("x")), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_field_is_reported_with_its_path() {
        let e = parse_run(r#"{"sequence": {"family": "rotary-echo", "chi_khz": 100}, "ensemble": {"n_ion": 3}}"#)
            .unwrap_err();
        match e {
            Error::Config(errs) => {
                assert_eq!(errs[0].path, "ensemble.n_ion");
                assert!(errs[0].message.contains("n_ion"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn range_errors_are_collected() {
        let c = parse_run(
            r#"{"sequence": {"family": "two-pulse-echo", "chi_khz": -1, "tau_us": -20},
                "ensemble": {"n_ions": 0, "dt_us": 0.05, "record_dt_us": 0.01},
                "ion": {"t2_us": -5}}"#,
        )
        .unwrap();
        let Error::Config(errs) = c.resolve(0).unwrap_err() else {
            panic!()
        };
        let paths: Vec<&str> = errs.iter().map(|e| e.path.as_str()).collect();
        for p in ["sequence.chi_khz", "sequence.tau_us", "ensemble.n_ions", "ensemble.record_dt_us", "ion.t2_us"] {
            assert!(paths.contains(&p), "{p} missing from {paths:?}");
        }
    }

    #[test]
    fn hash_ignores_key_order_and_whitespace() {
        let a = parse_run(r#"{"seed": 4, "sequence": {"family": "rotary-echo", "chi_khz": 100, "drive_us": 50}}"#).unwrap();
        let b = parse_run(r#"{"sequence": {"drive_us": 50, "chi_khz": 100, "family": "rotary-echo"},   "seed": 4}"#).unwrap();
        let c = parse_run(r#"{"sequence": {"drive_us": 51, "chi_khz": 100, "family": "rotary-echo"}, "seed": 4}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn protocol_builds_family_sequences() {
        let c = parse_run(r#"{"sequence": {"family": "two-pulse-echo", "chi_khz": 500, "tau_us": 20}}"#).unwrap();
        let r = c.resolve(0).unwrap();
        let seq = r.protocol.sequence().unwrap();
        assert_eq!(seq.readouts().len(), 1);
        assert!((seq.readouts()[0].echo_time - 41.75e-6).abs() < 1e-12);
        let c = parse_run(r#"{"sequence": {"family": "rotary-echo", "chi_khz": 100}}"#).unwrap();
        assert!(matches!(c.resolve(0).unwrap().protocol.sequence(), Err(Error::Config(_))));
    }

    #[test]
    fn custom_sequence_round_trip() {
        let c = parse_run(
            r#"{"sequence": {"family": "custom", "segments": [{"duration_us": 1.0, "chi_khz": 250}, {"duration_us": 4.0}],
                "readouts": [{"start_us": 1.0, "end_us": 5.0, "echo_time_us": 1.0, "component": "both"}]}}"#,
        )
        .unwrap();
        let seq = c.resolve(0).unwrap().protocol.sequence().unwrap();
        assert_eq!(seq.segments().len(), 2);
        assert!((seq.total_duration() - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn exit_codes_are_distinct() {
        assert_eq!(exit_code(&Error::Config(vec![])), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::NoConvergence("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
    }
}
