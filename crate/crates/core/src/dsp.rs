//! Log filter-bank energy (LFBE) front end.
//!
//! Converts mono waveforms into T x F feature matrices: 25 ms frames with a
//! 10 ms shift by default, Hann-windowed power spectra, triangular HTK-mel
//! filters, natural log with an energy floor. All math is f64.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub mod wav;

/// Front-end configuration. Defaults follow the common AEC convention:
/// 25 ms frames, 10 ms hop, 64 mel bands, energy floor 1e-10.
#[derive(Debug, Clone)]
pub struct DspConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub energy_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            energy_floor: 1e-10,
        }
    }
}

/// Mono sample sequence with its sample rate.
///
/// Samples are nominally in [-1, 1]; values outside that range are accepted
/// (mixture synthesis can legitimately exceed unit amplitude) but logged.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        if let Some(idx) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {idx}")));
        }
        let clipped = samples.iter().filter(|s| s.abs() > 1.0).count();
        if clipped > 0 {
            log::warn!("waveform has {clipped} samples outside [-1, 1]; passing through unclipped");
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root mean square over all samples.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

/// Root mean square of a sample slice (0.0 for an empty slice).
pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Number of samples in `ms` milliseconds at `sample_rate`, rounded down.
pub fn samples_for_ms(sample_rate: u32, ms: f64) -> usize {
    (ms * sample_rate as f64 / 1000.0).floor() as usize
}

/// Slice a waveform into overlapping frames. Frame `i` starts at sample
/// `i * hop_samples`; a trailing partial frame is dropped, never padded.
pub fn frame_signal(wave: &Waveform, frame_ms: f64, hop_ms: f64) -> Result<Vec<&[f64]>> {
    if !(hop_ms > 0.0) || frame_ms < hop_ms {
        return Err(Error::Config(format!(
            "need frame_ms >= hop_ms > 0, got frame_ms={frame_ms}, hop_ms={hop_ms}"
        )));
    }
    let frame = samples_for_ms(wave.sample_rate, frame_ms);
    let hop = samples_for_ms(wave.sample_rate, hop_ms);
    if frame == 0 || hop == 0 {
        return Err(Error::Config(format!(
            "frame/hop round to zero samples at {} Hz (frame_ms={frame_ms}, hop_ms={hop_ms})",
            wave.sample_rate
        )));
    }
    let n = wave.samples.len();
    if n < frame {
        return Err(Error::TooShort { needed: frame, got: n });
    }
    let count = (n - frame) / hop + 1;
    Ok((0..count).map(|i| &wave.samples[i * hop..i * hop + frame]).collect())
}

/// Periodic Hann window of length `len`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Reusable FFT plan + window for frames of a fixed length.
pub(crate) struct SpectrumPipeline {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    fft_size: usize,
}

impl SpectrumPipeline {
    pub fn new(frame_len: usize) -> Result<Self> {
        if frame_len == 0 {
            return Err(Error::InvalidInput("cannot analyze an empty frame".into()));
        }
        let fft_size = frame_len.next_power_of_two();
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            window: hann_window(frame_len),
            fft_size,
        })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn compute(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.window.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame length {} does not match pipeline length {}",
                frame.len(),
                self.window.len()
            )));
        }
        if let Some(idx) = frame.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {idx} of frame")));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            slot.re = s * w;
        }
        self.fft.process(&mut buf);
        Ok(buf[..self.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect())
    }
}

/// One-sided power spectrum of a frame: Hann-windowed, zero-padded to the
/// next power of two, squared DFT magnitudes for bins 0..=fft_size/2.
pub fn power_spectrum(frame: &[f64]) -> Result<Vec<f64>> {
    SpectrumPipeline::new(frame.len())?.compute(frame)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filter bank mapping K spectral bins to B mel bands.
#[derive(Debug, Clone)]
pub struct MelBank {
    weights: Array2<f64>,
    band_edges: Vec<f64>,
}

impl MelBank {
    /// B x K nonnegative weight matrix.
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    /// The B + 2 band edge frequencies in Hz (equally spaced in mel).
    pub fn band_edges(&self) -> &[f64] {
        &self.band_edges
    }

    /// Center frequency of each band (the triangle peaks).
    pub fn center_frequencies(&self) -> &[f64] {
        &self.band_edges[1..self.band_edges.len() - 1]
    }

    pub fn n_bands(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }
}

/// Build a triangular HTK-mel filter bank with band edges equally spaced in
/// mel between 0 Hz and `sample_rate / 2`.
pub fn mel_bank(n_mels: usize, sample_rate: u32, fft_size: usize) -> Result<MelBank> {
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be at least 1".into()));
    }
    if sample_rate == 0 {
        return Err(Error::Config("sample_rate must be positive".into()));
    }
    if fft_size < 2 || !fft_size.is_power_of_two() {
        return Err(Error::Config(format!("fft_size {fft_size} is not a power of two >= 2")));
    }
    let n_bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let band_edges: Vec<f64> = (0..=n_mels + 1)
        .map(|j| mel_to_hz(mel_max * j as f64 / (n_mels + 1) as f64))
        .collect();

    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut weights = Array2::zeros((n_mels, n_bins));
    for b in 0..n_mels {
        let (left, center, right) = (band_edges[b], band_edges[b + 1], band_edges[b + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                weights[(b, k)] = w;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config(format!(
                "mel band {b} covers no FFT bin; use fewer bands or a larger fft_size"
            )));
        }
    }
    Ok(MelBank { weights, band_edges })
}

/// T x F matrix of log filter-bank energies plus the framing that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    frame_length_ms: f64,
    hop_ms: f64,
}

impl FeatureMatrix {
    pub fn from_values(values: Array2<f64>, frame_length_ms: f64, hop_ms: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptySequence("feature matrix must be at least 1 x 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        Ok(Self { values, frame_length_ms, hop_ms })
    }

    /// Row t is the feature vector of frame t.
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_bands(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_length_ms(&self) -> f64 {
        self.frame_length_ms
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop_ms
    }

    /// Flat binary export: magic "LFBE", version u16, T u32, F u32, then
    /// row-major little-endian f32 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"LFBE")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(self.num_frames() as u32).to_le_bytes())?;
        w.write_all(&(self.num_bands() as u32).to_le_bytes())?;
        for v in self.values.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Read the flat binary format. The framing metadata is not part of the
    /// format and must be supplied by the caller.
    pub fn read_binary<R: Read>(mut r: R, frame_length_ms: f64, hop_ms: f64) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"LFBE" {
            return Err(Error::Format("bad magic: not an LFBE feature file".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != 1 {
            return Err(Error::Format(format!("unsupported LFBE version {version}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let t = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let f = u32::from_le_bytes(b4) as usize;
        let mut values = Array2::zeros((t, f));
        for v in values.iter_mut() {
            r.read_exact(&mut b4)?;
            *v = f32::from_le_bytes(b4) as f64;
        }
        Self::from_values(values, frame_length_ms, hop_ms)
    }
}

/// Full LFBE front end: frame, window, power spectrum, mel weighting,
/// `ln(max(energy, floor))`. Deterministic for fixed input.
pub fn compute_lfbe(wave: &Waveform, config: &DspConfig) -> Result<FeatureMatrix> {
    if !(config.energy_floor > 0.0) {
        return Err(Error::Config(format!(
            "energy_floor must be positive, got {}",
            config.energy_floor
        )));
    }
    let frames = frame_signal(wave, config.frame_ms, config.hop_ms)?;
    let pipeline = SpectrumPipeline::new(frames[0].len())?;
    let bank = mel_bank(config.n_mels, wave.sample_rate(), pipeline.fft_size())?;

    let mut values = Array2::zeros((frames.len(), config.n_mels));
    for (t, frame) in frames.iter().enumerate() {
        let power = pipeline.compute(frame).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("frame {t}: {what}")),
            other => other,
        })?;
        let power = Array1::from(power);
        let energies = bank.weights().dot(&power);
        for (slot, &e) in values.row_mut(t).iter_mut().zip(energies.iter()) {
            *slot = e.max(config.energy_floor).ln();
        }
    }
    FeatureMatrix::from_values(values, config.frame_ms, config.hop_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|k| amp * (2.0 * PI * freq * k as f64 / sr as f64).sin())
            .collect()
    }

    /// O(N^2) reference DFT used as the independent oracle for the FFT path.
    fn dft_power_oracle(windowed: &[f64], fft_size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(fft_size / 2 + 1);
        for k in 0..=fft_size / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in windowed.iter().enumerate() {
                let phase = -2.0 * PI * (k * n) as f64 / fft_size as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            out.push(re * re + im * im);
        }
        out
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![0.0, f64::NAN], 8000).is_err());
        assert!(Waveform::new(vec![1.5, -2.0], 8000).is_ok()); // beyond [-1,1]: warn only
    }

    #[test]
    fn frame_count_30s_at_44100() {
        // floor((1_323_000 - 1102) / 441) + 1 = 2998, independently:
        // 1102 = floor(25 ms * 44100), 441 = floor(10 ms * 44100).
        let wave = Waveform::new(vec![0.0; 44_100 * 30], 44_100).unwrap();
        let frames = frame_signal(&wave, 25.0, 10.0).unwrap();
        assert_eq!(frames.len(), 2998);
        assert_eq!(frames[0].len(), 1102);
    }

    #[test]
    fn single_frame_is_whole_signal() {
        let samples: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let wave = Waveform::new(samples.clone(), 8000).unwrap();
        let frames = frame_signal(&wave, 25.0, 10.0).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0], &samples[..]);
    }

    #[test]
    fn too_short_is_an_error() {
        let wave = Waveform::new(vec![0.0; 199], 8000).unwrap();
        match frame_signal(&wave, 25.0, 10.0) {
            Err(Error::TooShort { needed: 200, got: 199 }) => {}
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn frame_starts_at_hop_multiples() {
        let samples: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let wave = Waveform::new(samples, 8000).unwrap();
        let frames = frame_signal(&wave, 25.0, 10.0).unwrap();
        for (i, frame) in frames.iter().enumerate() {
            assert_eq!(frame[0], (i * 80) as f64);
        }
    }

    proptest! {
        // Frame count formula over randomized (length, frame, hop) triples.
        #[test]
        fn frame_count_formula(len in 1usize..50_000, frame in 1usize..2000, hop in 1usize..2000) {
            prop_assume!(hop <= frame);
            let sr = 1000; // 1 kHz makes ms == samples
            let wave = Waveform::new(vec![0.0; len], sr).unwrap();
            let result = frame_signal(&wave, frame as f64, hop as f64);
            if len < frame {
                prop_assert!(result.is_err());
            } else {
                let frames = result.unwrap();
                prop_assert_eq!(frames.len(), (len - frame) / hop + 1);
            }
        }
    }

    #[test]
    fn zero_frame_zero_spectrum() {
        let spec = power_spectrum(&[0.0; 128]).unwrap();
        assert_eq!(spec.len(), 65);
        assert!(spec.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_concentrates() {
        // Frame length 256 (a power of two, so no zero-padding): a Hann-windowed
        // sinusoid at bin 16 has all its energy in bins 15..=17.
        let sr = 8000;
        let n = 256;
        let freq = 16.0 * sr as f64 / n as f64;
        let frame = sine(freq, sr, n, 0.9);
        let spec = power_spectrum(&frame).unwrap();
        let total: f64 = spec.iter().sum();
        let local: f64 = spec[15..=17].iter().sum();
        assert!(local / total >= 0.99, "concentration {}", local / total);
        let peak = spec.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, 16);
    }

    #[test]
    fn power_spectrum_matches_direct_dft() {
        let mut state = 0x12345678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let frame: Vec<f64> = (0..200).map(|_| next()).collect();
        let spec = power_spectrum(&frame).unwrap();

        let window = hann_window(200);
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(s, w)| s * w).collect();
        let oracle = dft_power_oracle(&windowed, 256);
        assert_eq!(spec.len(), oracle.len());
        for (a, b) in spec.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn parseval_identity() {
        let frame = sine(431.7, 8000, 200, 0.7);
        let window = hann_window(200);
        let energy: f64 = frame.iter().zip(&window).map(|(s, w)| (s * w) * (s * w)).sum();

        let spec = power_spectrum(&frame).unwrap();
        let fft_size = 256.0;
        // One-sided spectrum: double every bin except DC and Nyquist.
        let mut total = spec[0] + spec[spec.len() - 1];
        total += 2.0 * spec[1..spec.len() - 1].iter().sum::<f64>();
        total /= fft_size;
        assert!(
            (total - energy).abs() <= 1e-9 * energy,
            "parseval: {total} vs {energy}"
        );
    }

    #[test]
    fn non_finite_frame_sample_named() {
        let mut frame = vec![0.0; 64];
        frame[13] = f64::INFINITY;
        match power_spectrum(&frame) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("13"), "{msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn single_band_spans_full_range() {
        let bank = mel_bank(1, 8000, 256).unwrap();
        assert_eq!(bank.n_bands(), 1);
        let edges = bank.band_edges();
        assert!(edges[0].abs() < 1e-9);
        assert!((edges[2] - 4000.0).abs() < 1e-6);
        // Peak sits at the mel midpoint.
        let expected_center = mel_to_hz(hz_to_mel(4000.0) / 2.0);
        assert!((bank.center_frequencies()[0] - expected_center).abs() < 1e-9);
    }

    #[test]
    fn band_centers_match_mel_formula_oracle() {
        // Independent oracle: recompute centers straight from the mel formula.
        let (n_mels, sr, fft) = (64, 44_100, 2048);
        let bank = mel_bank(n_mels, sr, fft).unwrap();
        let mel_max = 2595.0 * (1.0 + (sr as f64 / 2.0) / 700.0).log10();
        for (b, &center) in bank.center_frequencies().iter().enumerate() {
            let mel = mel_max * (b + 1) as f64 / (n_mels + 1) as f64;
            let hz = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
            assert!(
                (center - hz).abs() <= 1e-6 * hz.max(1.0),
                "band {b}: {center} vs {hz}"
            );
        }
    }

    #[test]
    fn bins_inside_band_range_are_covered() {
        let bank = mel_bank(64, 44_100, 2048).unwrap();
        let bin_hz = 44_100.0 / 2048.0;
        let edges = bank.band_edges();
        let coverage = bank.weights().sum_axis(ndarray::Axis(0));
        for k in 0..bank.n_bins() {
            let f = k as f64 * bin_hz;
            if f > edges[0] && f < edges[edges.len() - 1] {
                assert!(coverage[k] > 0.0, "bin {k} at {f} Hz uncovered");
            }
        }
    }

    #[test]
    fn too_many_bands_is_config_error() {
        match mel_bank(200, 8000, 256) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn zero_waveform_hits_floor_everywhere() {
        let wave = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        let config = DspConfig::default();
        let feats = compute_lfbe(&wave, &config).unwrap();
        let floor_log = config.energy_floor.ln();
        assert!(feats.view().iter().all(|&v| v == floor_log));
    }

    #[test]
    fn amplitude_doubling_shifts_by_2_ln_2() {
        let sr = 8000;
        let samples = sine(500.0, sr, 8000, 0.4);
        let wave1 = Waveform::new(samples.clone(), sr).unwrap();
        let wave2 = Waveform::new(samples.iter().map(|s| 2.0 * s).collect(), sr).unwrap();
        let config = DspConfig::default();
        let f1 = compute_lfbe(&wave1, &config).unwrap();
        let f2 = compute_lfbe(&wave2, &config).unwrap();
        let floor_log = config.energy_floor.ln();
        let shift = 2.0 * 2f64.ln();
        for (a, b) in f1.view().iter().zip(f2.view().iter()) {
            if *a > floor_log + shift {
                assert!((b - a - shift).abs() < 1e-9, "{a} -> {b}");
            }
        }
    }

    #[test]
    fn lfbe_matches_two_step_oracle() {
        // Independent composition: power spectrum oracle + explicit matrix multiply.
        let sr = 8000;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let samples: Vec<f64> = (0..2400).map(|_| next()).collect();
        let wave = Waveform::new(samples, sr).unwrap();
        let config = DspConfig { n_mels: 24, ..DspConfig::default() };
        let feats = compute_lfbe(&wave, &config).unwrap();

        let frames = frame_signal(&wave, config.frame_ms, config.hop_ms).unwrap();
        let bank = mel_bank(config.n_mels, sr, 256).unwrap();
        let window = hann_window(200);
        for (t, frame) in frames.iter().enumerate() {
            let windowed: Vec<f64> = frame.iter().zip(&window).map(|(s, w)| s * w).collect();
            let power = dft_power_oracle(&windowed, 256);
            for b in 0..config.n_mels {
                let mut e = 0.0;
                for (k, &p) in power.iter().enumerate() {
                    e += bank.weights()[(b, k)] * p;
                }
                let expected = e.max(config.energy_floor).ln();
                let got = feats.view()[(t, b)];
                assert!(
                    (got - expected).abs() <= 1e-6 * expected.abs().max(1.0),
                    "({t},{b}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn hop_shift_moves_feature_rows() {
        // Shifting the waveform by exactly one hop shifts feature rows by one.
        let sr = 8000;
        let samples = sine(700.0, sr, 4000, 0.5);
        let wave = Waveform::new(samples.clone(), sr).unwrap();
        let shifted = Waveform::new(samples[80..].to_vec(), sr).unwrap();
        let config = DspConfig::default();
        let f1 = compute_lfbe(&wave, &config).unwrap();
        let f2 = compute_lfbe(&shifted, &config).unwrap();
        for t in 0..f2.num_frames() {
            for b in 0..f1.num_bands() {
                let a = f1.view()[(t + 1, b)];
                let c = f2.view()[(t, b)];
                assert!((a - c).abs() < 1e-9, "row {t}: {a} vs {c}");
            }
        }
    }

    #[test]
    fn binary_round_trip() {
        let values = Array2::from_shape_fn((7, 5), |(t, b)| (t as f64) - 0.25 * b as f64);
        let feats = FeatureMatrix::from_values(values, 25.0, 10.0).unwrap();
        let mut buf = Vec::new();
        feats.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LFBE");
        let back = FeatureMatrix::read_binary(&buf[..], 25.0, 10.0).unwrap();
        assert_eq!(back.num_frames(), 7);
        assert_eq!(back.num_bands(), 5);
        for (a, b) in feats.view().iter().zip(back.view().iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn binary_rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(matches!(
            FeatureMatrix::read_binary(&buf[..], 25.0, 10.0),
            Err(Error::Format(_))
        ));
    }
}
