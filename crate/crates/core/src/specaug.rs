//! Audio front end and SpecAugment-style oversampling operators.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::domain::{Class, Field, SubjectRecord};
use crate::error::{Error, Result};
use crate::par::{self, derive_seed, Exec};

pub const MAX_DURATION_SECS: f64 = 30.0;
pub const FFT_WINDOW: usize = 2048;
pub const HOP: usize = 512;
pub const MEL_CHANNELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-10;
pub const FIR_ORDER: usize = 127;
pub const MAX_FREQ_MASK: usize = 60;
pub const MAX_TIME_MASK: usize = 60;

/// The value masked spectrogram entries are set to: the log of the floor,
/// i.e. what silence maps to.
pub fn mask_value() -> f64 {
    LOG_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub subject_id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioClip {
    /// Builds a clip, truncating anything past 30 seconds.
    pub fn new(subject_id: impl Into<String>, sample_rate: u32, mut samples: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if samples.is_empty() {
            return Err(Error::invalid(format!("clip {subject_id} is empty")));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("clip {subject_id} has non-finite samples")));
        }
        let max = (MAX_DURATION_SECS * sample_rate as f64) as usize;
        if samples.len() > max {
            warn!(
                "clip {subject_id} is {:.1} s; truncating to {MAX_DURATION_SECS} s",
                samples.len() as f64 / sample_rate as f64
            );
            samples.truncate(max);
        }
        Ok(AudioClip {
            subject_id,
            sample_rate,
            samples,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    fn with_samples(&self, samples: Vec<f64>) -> AudioClip {
        AudioClip {
            subject_id: self.subject_id.clone(),
            sample_rate: self.sample_rate,
            samples,
        }
    }
}

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: &Path, subject_id: &str) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::invalid(format!("{}: expected 16-bit PCM", path.display())));
    }
    if spec.sample_rate != 16_000 && spec.sample_rate != 44_100 {
        warn!("{}: unusual sample rate {}", path.display(), spec.sample_rate);
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::new(subject_id, spec.sample_rate, samples)
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn default_cutoff(sample_rate: u32) -> f64 {
    8000f64.min(0.45 * sample_rate as f64)
}

/// Hamming-windowed sinc low-pass taps, normalized to unit DC gain.
pub fn lowpass_taps(cutoff_hz: f64, sample_rate: u32) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate as f64;
    let m = FIR_ORDER as f64;
    let mut taps: Vec<f64> = (0..=FIR_ORDER)
        .map(|n| {
            let x = n as f64 - m / 2.0;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            sinc * (0.54 - 0.46 * (2.0 * PI * n as f64 / m).cos())
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Causal FIR filter where samples before the start repeat `x[0]`.
fn fir(exec: Exec, x: &[f64], taps: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let x0 = x[0];
    par::for_each_chunk_mut(exec, &mut y, 8192, |ci, chunk| {
        let base = ci * 8192;
        for (j, out) in chunk.iter_mut().enumerate() {
            let n = base + j;
            let mut acc = 0.0;
            for (k, &h) in taps.iter().enumerate() {
                acc += h * if n >= k { x[n - k] } else { x0 };
            }
            *out = acc;
        }
    });
    y
}

/// Zero-phase low-pass: the FIR is run forward then backward over the
/// signal with odd-symmetric extension at both ends.
pub fn low_pass(clip: &AudioClip, cutoff_hz: f64) -> Result<AudioClip> {
    low_pass_with(Exec::default(), clip, cutoff_hz)
}

pub fn low_pass_with(exec: Exec, clip: &AudioClip, cutoff_hz: f64) -> Result<AudioClip> {
    let nyquist = clip.sample_rate as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::invalid(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let taps = lowpass_taps(cutoff_hz, clip.sample_rate);
    let x = &clip.samples;
    let n = x.len();
    let pad = (3 * taps.len()).min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let mut fwd = fir(exec, &ext, &taps);
    fwd.reverse();
    let mut back = fir(exec, &fwd, &taps);
    back.reverse();
    Ok(clip.with_samples(back[pad..pad + n].to_vec()))
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 128 triangular filters spanning 0 Hz to
/// Nyquist, plus the two outer edges: 130 points in total.
pub fn mel_points(sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..MEL_CHANNELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_CHANNELS + 1) as f64))
        .collect()
}

/// Triangular filterbank, `[channel][fft bin]` with `FFT_WINDOW / 2 + 1` bins.
pub fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let pts = mel_points(sample_rate);
    let bins = FFT_WINDOW / 2 + 1;
    (0..MEL_CHANNELS)
        .map(|m| {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / FFT_WINDOW as f64;
                    let rise = (f - lo) / (mid - lo);
                    let fall = (hi - f) / (hi - mid);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramMeta {
    pub channels: usize,
    pub frames: usize,
    pub fft_window: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

/// Log-mel energies stored channel-major: `values[ch * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub meta: SpectrogramMeta,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn channels(&self) -> usize {
        self.meta.channels
    }

    pub fn frames(&self) -> usize {
        self.meta.frames
    }

    pub fn get(&self, ch: usize, t: usize) -> f64 {
        self.values[ch * self.meta.frames + t]
    }

    pub fn row(&self, ch: usize) -> &[f64] {
        let f = self.meta.frames;
        &self.values[ch * f..(ch + 1) * f]
    }

    /// Writes little-endian f32 values plus a JSON sidecar at `<path>.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
            Some(ext) => format!("{ext}.json"),
            None => "json".to_string(),
        });
        let json = serde_json::to_vec_pretty(&self.meta)?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }
}

/// Number of STFT frames for `n` samples without padding.
pub fn frame_count(n: usize) -> usize {
    1 + (n - FFT_WINDOW) / HOP
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StftOptions {
    /// Reflect-pad by half a window on each side so frames are centered.
    pub center: bool,
}

pub fn log_mel(clip: &AudioClip) -> Result<Spectrogram> {
    log_mel_with(Exec::default(), clip, StftOptions::default())
}

pub fn log_mel_with(exec: Exec, clip: &AudioClip, opts: StftOptions) -> Result<Spectrogram> {
    let padded;
    let signal: &[f64] = if opts.center {
        let half = FFT_WINDOW / 2;
        let x = &clip.samples;
        if x.len() <= half {
            return Err(Error::invalid("clip too short for centered frames"));
        }
        let mut v = Vec::with_capacity(x.len() + FFT_WINDOW);
        v.extend((1..=half).rev().map(|i| x[i]));
        v.extend_from_slice(x);
        v.extend((1..=half).map(|i| x[x.len() - 1 - i]));
        padded = v;
        &padded
    } else {
        &clip.samples
    };
    if signal.len() < FFT_WINDOW {
        return Err(Error::invalid(format!(
            "clip {} has {} samples; at least {FFT_WINDOW} needed",
            clip.subject_id,
            signal.len()
        )));
    }
    let frames = frame_count(signal.len());
    let window: Vec<f64> = (0..FFT_WINDOW)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / FFT_WINDOW as f64).cos())
        .collect();
    let bank = mel_filterbank(clip.sample_rate);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(FFT_WINDOW);

    let columns: Vec<Vec<f64>> = par::map_range(exec, frames, |t| {
        let start = t * HOP;
        let mut buf: Vec<Complex<f64>> = signal[start..start + FFT_WINDOW]
            .iter()
            .zip(&window)
            .map(|(s, w)| Complex::new(s * w, 0.0))
            .collect();
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..FFT_WINDOW / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        bank.iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                (e + LOG_FLOOR).ln()
            })
            .collect()
    });

    let mut values = vec![0.0; MEL_CHANNELS * frames];
    for (t, col) in columns.iter().enumerate() {
        for (ch, v) in col.iter().enumerate() {
            values[ch * frames + t] = *v;
        }
    }
    Ok(Spectrogram {
        meta: SpectrogramMeta {
            channels: MEL_CHANNELS,
            frames,
            fft_window: FFT_WINDOW,
            hop: HOP,
            sample_rate: clip.sample_rate,
        },
        values,
    })
}

/// Circular rotation; positive offsets move samples later in time.
pub fn rotate(clip: &AudioClip, offset: i64) -> AudioClip {
    let n = clip.samples.len() as i64;
    let k = offset.rem_euclid(n) as usize;
    let mut s = clip.samples.clone();
    s.rotate_right(k);
    clip.with_samples(s)
}

/// Circularly shifts the clip by a random offset whose magnitude is uniform
/// between one second and half the clip's duration, in either direction.
///
/// Returns the shifted clip and the applied offset in samples. Clips shorter
/// than two seconds come back unshifted.
pub fn time_shift<R: Rng + ?Sized>(clip: &AudioClip, rng: &mut R) -> (AudioClip, i64) {
    let lo = clip.sample_rate as usize;
    let hi = clip.samples.len() / 2;
    if hi < lo {
        warn!(
            "clip {} is shorter than 2 s; time shift skipped",
            clip.subject_id
        );
        return (clip.clone(), 0);
    }
    let magnitude = rng.gen_range(lo..=hi) as i64;
    let offset = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
    (rotate(clip, offset), offset)
}

/// A masked band: `start..start + width` rows or columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub start: usize,
    pub width: usize,
}

pub fn apply_freq_mask(spec: &Spectrogram, band: Band) -> Result<Spectrogram> {
    if band.width == 0 || band.start + band.width > spec.channels() {
        return Err(Error::invalid(format!("frequency band {band:?} out of range")));
    }
    let mut out = spec.clone();
    let f = spec.frames();
    out.values[band.start * f..(band.start + band.width) * f].fill(mask_value());
    Ok(out)
}

pub fn apply_time_mask(spec: &Spectrogram, band: Band) -> Result<Spectrogram> {
    if band.width == 0 || band.start + band.width > spec.frames() {
        return Err(Error::invalid(format!("time band {band:?} out of range")));
    }
    let mut out = spec.clone();
    let f = spec.frames();
    for ch in 0..spec.channels() {
        out.values[ch * f + band.start..ch * f + band.start + band.width].fill(mask_value());
    }
    Ok(out)
}

/// Masks `f ~ U{1..60}` consecutive mel channels starting at `f0 ~ U[0, 128 - f)`.
pub fn freq_mask<R: Rng + ?Sized>(spec: &Spectrogram, rng: &mut R) -> Result<(Spectrogram, Band)> {
    if spec.channels() != MEL_CHANNELS {
        return Err(Error::invalid(format!(
            "frequency masking expects {MEL_CHANNELS} channels, found {}",
            spec.channels()
        )));
    }
    let width = rng.gen_range(1..=MAX_FREQ_MASK);
    let start = rng.gen_range(0..MEL_CHANNELS - width);
    let band = Band { start, width };
    Ok((apply_freq_mask(spec, band)?, band))
}

/// Masks `t ~ U{1..60}` consecutive frames starting at `t0 ~ U[0, tau - t)`.
/// When the spectrogram has 60 frames or fewer, `t` is capped at `tau - 1`.
pub fn time_mask<R: Rng + ?Sized>(spec: &Spectrogram, rng: &mut R) -> Result<(Spectrogram, Band)> {
    let tau = spec.frames();
    if tau < 2 {
        return Err(Error::invalid(format!("time masking needs at least 2 frames, found {tau}")));
    }
    let max = if tau > MAX_TIME_MASK { MAX_TIME_MASK } else { tau - 1 };
    let width = rng.gen_range(1..=max);
    let start = rng.gen_range(0..tau - width);
    let band = Band { start, width };
    Ok((apply_time_mask(spec, band)?, band))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    TimeShift,
    FreqMask,
    TimeMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversampleTarget {
    /// Conjunction of protected attribute = value conditions.
    pub predicate: BTreeMap<Field, String>,
    #[serde(default)]
    pub label: Option<Class>,
    pub copies: usize,
    pub operators: Vec<Operator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversamplePlan {
    pub seed: u64,
    pub targets: Vec<OversampleTarget>,
}

/// One synthetic instance with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedInstance {
    pub index: usize,
    pub target: usize,
    pub source: String,
    pub operator: Operator,
    pub seed: u64,
}

fn describe(t: &OversampleTarget) -> String {
    let mut parts: Vec<String> = t.predicate.iter().map(|(f, v)| format!("{f}={v}")).collect();
    if let Some(l) = t.label {
        parts.push(format!("label={l}"));
    }
    parts.join(" & ")
}

impl OversampleTarget {
    fn validate(&self) -> Result<()> {
        if self.copies == 0 {
            return Err(Error::invalid("oversampling copies must be at least 1"));
        }
        if self.operators.is_empty() {
            return Err(Error::invalid("oversampling target needs at least one operator"));
        }
        for (field, value) in &self.predicate {
            if !field.is_protected() {
                return Err(Error::NotProtected(field.to_string()));
            }
            if !field.values().contains(&value.as_str()) {
                return Err(Error::invalid(format!("`{value}` is not a value of `{field}`")));
            }
        }
        Ok(())
    }

    pub fn matches(&self, r: &SubjectRecord) -> bool {
        self.label.map_or(true, |l| r.label == l)
            && self
                .predicate
                .iter()
                .all(|(f, v)| r.value_of(*f) == Some(v.as_str()))
    }
}

/// Expands a plan into instances: for each target, `copies` rounds over the
/// matching sources in input order, cycling through the target's operators.
/// Instance seeds derive from the plan seed and the global instance index.
pub fn compile_plan(records: &[SubjectRecord], plan: &OversamplePlan) -> Result<Vec<PlannedInstance>> {
    let mut out = Vec::new();
    for (ti, target) in plan.targets.iter().enumerate() {
        target.validate()?;
        let sources: Vec<&SubjectRecord> = records.iter().filter(|r| target.matches(r)).collect();
        if sources.is_empty() {
            return Err(Error::invalid(format!(
                "no subjects match oversampling target `{}`",
                describe(target)
            )));
        }
        let mut local = 0;
        for _ in 0..target.copies {
            for src in &sources {
                let index = out.len();
                out.push(PlannedInstance {
                    index,
                    target: ti,
                    source: src.subject_id.clone(),
                    operator: target.operators[local % target.operators.len()],
                    seed: derive_seed(plan.seed, index as u64),
                });
                local += 1;
            }
        }
    }
    Ok(out)
}

/// Result of running one planned instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmented {
    Audio { clip: AudioClip, offset: i64 },
    Spectrogram { spec: Spectrogram, band: Band },
}

/// Applies an instance's operator to its source clip with the instance's own
/// random stream. Masking operators work on the clip's log-mel spectrogram.
pub fn apply_instance(clip: &AudioClip, inst: &PlannedInstance) -> Result<Augmented> {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
    Ok(match inst.operator {
        Operator::TimeShift => {
            let (clip, offset) = time_shift(clip, &mut rng);
            Augmented::Audio { clip, offset }
        }
        Operator::FreqMask => {
            let (spec, band) = freq_mask(&log_mel(clip)?, &mut rng)?;
            Augmented::Spectrogram { spec, band }
        }
        Operator::TimeMask => {
            let (spec, band) = time_mask(&log_mel(clip)?, &mut rng)?;
            Augmented::Spectrogram { spec, band }
        }
    })
}
