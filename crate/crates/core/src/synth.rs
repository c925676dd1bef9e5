//! Mixture synthesis: overlay event clips onto background clips at a
//! requested event-to-background ratio (EBR) and onset, generate seeded
//! training corpora and position-sensitivity grids, and produce desk-scale
//! toy assets when no real recordings are available.
//!
//! EBR is measured as the rms ratio between the scaled event and the
//! background segment it overlays, in dB. Mixing never clips or
//! renormalizes, so the requested ratio is preserved exactly and samples may
//! leave [-1, 1].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{rms, wav, Waveform};
use crate::error::{Error, Result};

/// A named waveform in an asset pool.
#[derive(Debug, Clone)]
pub struct Asset {
    pub id: String,
    pub wave: Waveform,
}

/// Event class encoded in an asset id: the prefix before the first '-'.
pub fn event_type_of(id: &str) -> &str {
    id.split('-').next().unwrap_or(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
    Sensitivity,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Sensitivity => "sensitivity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "sensitivity" => Ok(Split::Sensitivity),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declarative recipe for one mixture. `event_id` is `None` for negatives
/// (raw backgrounds); the label is 1 exactly when an event is present.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub id: String,
    pub event_id: Option<String>,
    pub background_id: String,
    pub ebr_db: f64,
    pub onset_s: f64,
    pub label: u8,
    pub seed: u64,
}

impl MixtureSpec {
    fn validate(&self) -> Result<()> {
        if (self.label == 1) != self.event_id.is_some() {
            return Err(Error::Format(format!(
                "mixture {}: label {} inconsistent with event {:?}",
                self.id, self.label, self.event_id
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidLabel(self.label));
        }
        if !(self.onset_s >= 0.0) {
            return Err(Error::Format(format!(
                "mixture {}: onset {} must be >= 0",
                self.id, self.onset_s
            )));
        }
        Ok(())
    }
}

/// A full corpus recipe: many mixture specs plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub split: Split,
    pub global_seed: u64,
    pub event_dir: String,
    pub background_dir: String,
    pub specs: Vec<MixtureSpec>,
}

const MANIFEST_MAGIC: &str = "#raec-manifest v1";

impl CorpusManifest {
    /// Line-delimited text format with a header carrying the format version
    /// and global seed. Identical manifests serialize to identical bytes.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MANIFEST_MAGIC}")?;
        writeln!(w, "#split {}", self.split)?;
        writeln!(w, "#seed {}", self.global_seed)?;
        writeln!(w, "#event_dir {}", self.event_dir)?;
        writeln!(w, "#background_dir {}", self.background_dir)?;
        writeln!(w, "#fields id split event background ebr_db onset_s label seed")?;
        for spec in &self.specs {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                spec.id,
                self.split,
                spec.event_id.as_deref().unwrap_or("-"),
                spec.background_id,
                spec.ebr_db,
                spec.onset_s,
                spec.label,
                spec.seed
            )?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty manifest".into()))??;
        if first.trim_end() != MANIFEST_MAGIC {
            return Err(Error::Format(format!("not a raec manifest: {first:?}")));
        }
        let mut split = None;
        let mut seed = 0u64;
        let mut event_dir = String::new();
        let mut background_dir = String::new();
        let mut specs = Vec::new();
        for line in lines {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.splitn(2, ' ');
                match (parts.next(), parts.next()) {
                    (Some("split"), Some(v)) => split = Some(Split::parse(v)?),
                    (Some("seed"), Some(v)) => {
                        seed = v.parse().map_err(|_| Error::Format(format!("bad seed {v:?}")))?
                    }
                    (Some("event_dir"), Some(v)) => event_dir = v.to_string(),
                    (Some("background_dir"), Some(v)) => background_dir = v.to_string(),
                    _ => {} // unknown header lines are ignored
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(Error::Format(format!(
                    "manifest record needs 8 fields, got {}: {line:?}",
                    fields.len()
                )));
            }
            let parse_f64 = |s: &str, what: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad {what} {s:?}")))
            };
            let spec = MixtureSpec {
                id: fields[0].to_string(),
                event_id: (fields[2] != "-").then(|| fields[2].to_string()),
                background_id: fields[3].to_string(),
                ebr_db: parse_f64(fields[4], "ebr_db")?,
                onset_s: parse_f64(fields[5], "onset_s")?,
                label: fields[6]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad label {:?}", fields[6])))?,
                seed: fields[7]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed {:?}", fields[7])))?,
            };
            spec.validate()?;
            specs.push(spec);
        }
        Ok(Self {
            split: split.ok_or_else(|| Error::Format("manifest missing #split header".into()))?,
            global_seed: seed,
            event_dir,
            background_dir,
            specs,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::NotFound(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Scale factor that brings `event` to `ebr_db` decibels relative to the
/// background segment it will overlay: `10^(ebr/20) * rms(segment) / rms(event)`.
pub fn ebr_gain(event: &Waveform, background_segment: &Waveform, ebr_db: f64) -> Result<f64> {
    let event_rms = event.rms();
    if event_rms == 0.0 {
        return Err(Error::UnusableAsset("event has zero rms".into()));
    }
    let background_rms = background_segment.rms();
    if background_rms == 0.0 {
        return Err(Error::UnusableAsset(
            "background segment has zero rms; EBR is undefined".into(),
        ));
    }
    Ok(10f64.powf(ebr_db / 20.0) * background_rms / event_rms)
}

fn onset_sample(onset_s: f64, sample_rate: u32) -> usize {
    (onset_s * sample_rate as f64).round() as usize
}

/// True when the event fits entirely inside the background at this onset.
pub fn placement_fits(event: &Waveform, background: &Waveform, onset_s: f64) -> bool {
    onset_s >= 0.0 && onset_sample(onset_s, background.sample_rate()) + event.len() <= background.len()
}

/// Overlay `gain * event` onto the background starting at `onset_s`.
/// Samples outside the event window are bit-identical to the background.
pub fn mix(event: &Waveform, background: &Waveform, ebr_db: f64, onset_s: f64) -> Result<Waveform> {
    if event.sample_rate() != background.sample_rate() {
        return Err(Error::SampleRateMismatch {
            a: event.sample_rate(),
            b: background.sample_rate(),
        });
    }
    if !placement_fits(event, background, onset_s) {
        return Err(Error::PlacementOutOfRange(format!(
            "event of {} samples at onset {onset_s} s does not fit a background of {} samples",
            event.len(),
            background.len()
        )));
    }
    let start = onset_sample(onset_s, background.sample_rate());
    let segment = Waveform::new(
        background.samples()[start..start + event.len()].to_vec(),
        background.sample_rate(),
    )?;
    let gain = ebr_gain(event, &segment, ebr_db)?;
    let mut samples = background.samples().to_vec();
    for (slot, &e) in samples[start..start + event.len()].iter_mut().zip(event.samples()) {
        *slot += gain * e;
    }
    Waveform::new(samples, background.sample_rate())
}

/// EBR of a produced mixture, recovered by subtracting the background over
/// the event window: `20 log10(rms(mixture - background) / rms(background))`.
pub fn measured_ebr_db(
    mixture: &Waveform,
    background: &Waveform,
    onset_s: f64,
    event_len: usize,
) -> Result<f64> {
    if mixture.len() != background.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixture has {} samples, background {}",
            mixture.len(),
            background.len()
        )));
    }
    let start = onset_sample(onset_s, background.sample_rate());
    if start + event_len > background.len() {
        return Err(Error::PlacementOutOfRange(format!(
            "window [{start}, {}) outside background of {} samples",
            start + event_len,
            background.len()
        )));
    }
    let window = start..start + event_len;
    let diff: Vec<f64> = mixture.samples()[window.clone()]
        .iter()
        .zip(&background.samples()[window.clone()])
        .map(|(m, b)| m - b)
        .collect();
    let event_rms = rms(&diff);
    let background_rms = rms(&background.samples()[window]);
    if event_rms == 0.0 || background_rms == 0.0 {
        return Err(Error::UnusableAsset("zero rms inside the event window".into()));
    }
    Ok(20.0 * (event_rms / background_rms).log10())
}

/// In-memory asset pools keyed by id, used to render manifests.
#[derive(Debug, Clone, Default)]
pub struct AssetPools {
    pub events: BTreeMap<String, Waveform>,
    pub backgrounds: BTreeMap<String, Waveform>,
}

impl AssetPools {
    pub fn from_assets(events: &[Asset], backgrounds: &[Asset]) -> Self {
        Self {
            events: events.iter().map(|a| (a.id.clone(), a.wave.clone())).collect(),
            backgrounds: backgrounds.iter().map(|a| (a.id.clone(), a.wave.clone())).collect(),
        }
    }

    /// Load every `.wav` under the two directories (sorted by file name).
    pub fn from_dirs(event_dir: &Path, background_dir: &Path) -> Result<Self> {
        Ok(Self {
            events: load_wav_dir(event_dir)?,
            backgrounds: load_wav_dir(background_dir)?,
        })
    }

    /// Render one spec: negatives return the raw background.
    pub fn render(&self, spec: &MixtureSpec) -> Result<Waveform> {
        let background = self.backgrounds.get(&spec.background_id).ok_or_else(|| {
            Error::NotFound(format!("background asset {}", spec.background_id))
        })?;
        match &spec.event_id {
            None => Ok(background.clone()),
            Some(event_id) => {
                let event = self
                    .events
                    .get(event_id)
                    .ok_or_else(|| Error::NotFound(format!("event asset {event_id}")))?;
                mix(event, background, spec.ebr_db, spec.onset_s)
            }
        }
    }
}

fn load_wav_dir(dir: &Path) -> Result<BTreeMap<String, Waveform>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("asset directory {}", dir.display())));
    }
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".wav") {
            names.push(name);
        }
    }
    names.sort();
    let mut pool = BTreeMap::new();
    for name in names {
        pool.insert(name.clone(), wav::read_wav(&dir.join(&name))?);
    }
    Ok(pool)
}

/// Write assets as 32-bit float WAVs named by their ids.
pub fn write_assets(dir: &Path, assets: &[Asset]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for asset in assets {
        wav::write_wav_f32(&dir.join(&asset.id), &asset.wave)?;
    }
    Ok(())
}

/// Generate a seeded training corpus: `positive_ratio` of the mixtures carry
/// an event at a uniform feasible onset and an EBR drawn uniformly from
/// `ebr_set`; the rest are raw backgrounds. Infeasible event/background
/// draws are skipped with a warning and redrawn.
pub fn gen_training_corpus(
    events: &[Asset],
    backgrounds: &[Asset],
    n_mixtures: usize,
    ebr_set: &[f64],
    positive_ratio: f64,
    split: Split,
    seed: u64,
) -> Result<CorpusManifest> {
    if events.is_empty() || backgrounds.is_empty() {
        return Err(Error::InvalidInput("empty asset pool".into()));
    }
    if ebr_set.is_empty() {
        return Err(Error::Config("ebr_set must not be empty".into()));
    }
    if !(0.0..=1.0).contains(&positive_ratio) {
        return Err(Error::Config(format!(
            "positive_ratio must be in [0, 1], got {positive_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_positive = (n_mixtures as f64 * positive_ratio).round() as usize;
    let prefix = split.as_str();
    let mut specs = Vec::with_capacity(n_mixtures);

    for i in 0..n_mixtures {
        let id = format!("{prefix}-{i:05}");
        let spec_seed = rng.random::<u64>();
        if i < n_positive {
            let mut attempts = 0;
            let spec = loop {
                let event = &events[rng.random_range(0..events.len())];
                let background = &backgrounds[rng.random_range(0..backgrounds.len())];
                let ebr_db = ebr_set[rng.random_range(0..ebr_set.len())];
                let max_onset =
                    background.wave.duration_s() - event.wave.duration_s();
                if max_onset < 0.0 || !placement_fits(&event.wave, &background.wave, 0.0) {
                    attempts += 1;
                    log::warn!(
                        "event {} does not fit background {}; redrawing",
                        event.id,
                        background.id
                    );
                    if attempts > 1000 {
                        return Err(Error::Config(
                            "no feasible event/background placement after 1000 draws".into(),
                        ));
                    }
                    continue;
                }
                let onset_s = rng.random_range(0.0..=max_onset.max(0.0));
                if !placement_fits(&event.wave, &background.wave, onset_s) {
                    // Rounding pushed the window one sample too far; clamp to 0.
                    attempts += 1;
                    continue;
                }
                break MixtureSpec {
                    id: id.clone(),
                    event_id: Some(event.id.clone()),
                    background_id: background.id.clone(),
                    ebr_db,
                    onset_s,
                    label: 1,
                    seed: spec_seed,
                };
            };
            specs.push(spec);
        } else {
            let background = &backgrounds[rng.random_range(0..backgrounds.len())];
            specs.push(MixtureSpec {
                id,
                event_id: None,
                background_id: background.id.clone(),
                ebr_db: 0.0,
                onset_s: 0.0,
                label: 0,
                seed: spec_seed,
            });
        }
    }

    Ok(CorpusManifest {
        split,
        global_seed: seed,
        event_dir: String::new(),
        background_dir: String::new(),
        specs,
    })
}

/// Sensitivity grid: one positive spec per (event, background, position, ebr)
/// combination where the event fits; infeasible placements are skipped.
pub fn gen_position_grid(
    events: &[Asset],
    backgrounds: &[Asset],
    positions_s: &[f64],
    ebr_set: &[f64],
) -> Result<CorpusManifest> {
    if events.is_empty() || backgrounds.is_empty() {
        return Err(Error::InvalidInput("empty asset pool".into()));
    }
    let mut specs = Vec::new();
    let mut idx = 0usize;
    for event in events {
        for background in backgrounds {
            for &position in positions_s {
                if !placement_fits(&event.wave, &background.wave, position) {
                    continue;
                }
                for &ebr_db in ebr_set {
                    specs.push(MixtureSpec {
                        id: format!("grid-{idx:06}"),
                        event_id: Some(event.id.clone()),
                        background_id: background.id.clone(),
                        ebr_db,
                        onset_s: position,
                        label: 1,
                        seed: 0,
                    });
                    idx += 1;
                }
            }
        }
    }
    Ok(CorpusManifest {
        split: Split::Sensitivity,
        global_seed: 0,
        event_dir: String::new(),
        background_dir: String::new(),
        specs,
    })
}

/// Evenly spaced onset grid mirroring whole-second positions, scaled to the
/// clip length: `n_positions` onsets from 0 covering the clip.
pub fn position_grid_for_clip(clip_s: f64, n_positions: usize) -> Vec<f64> {
    let step = clip_s / n_positions as f64;
    (0..n_positions).map(|i| i as f64 * step).collect()
}

/// Toy asset generation settings. Defaults are desk scale: 8 kHz, 3-second
/// backgrounds, events of 0.1 to 0.5 seconds.
#[derive(Debug, Clone)]
pub struct ToyAssetConfig {
    pub sample_rate: u32,
    pub n_events_per_class: usize,
    pub n_backgrounds: usize,
    pub event_duration_range: (f64, f64),
    pub background_duration_s: f64,
}

impl Default for ToyAssetConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            n_events_per_class: 5,
            n_backgrounds: 10,
            event_duration_range: (0.1, 0.5),
            background_duration_s: 3.0,
        }
    }
}

/// The three distinguishable toy event classes.
pub const TOY_EVENT_CLASSES: [&str; 3] = ["tone", "chirp", "noiseburst"];

/// Deterministic toy pools: amplitude-modulated tone bursts, upward chirps,
/// and high-passed noise bursts over low-passed colored-noise backgrounds.
pub fn gen_toy_assets(seed: u64, config: &ToyAssetConfig) -> Result<(Vec<Asset>, Vec<Asset>)> {
    if config.sample_rate == 0 {
        return Err(Error::Config("sample_rate must be positive".into()));
    }
    let (lo, hi) = config.event_duration_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("bad event duration range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = config.sample_rate;

    let mut events = Vec::new();
    for class in TOY_EVENT_CLASSES {
        for idx in 0..config.n_events_per_class {
            let duration = rng.random_range(lo..=hi);
            let n = (duration * sr as f64).round() as usize;
            let envelope: Vec<f64> = (0..n)
                .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
                .collect();
            let samples: Vec<f64> = match class {
                "tone" => {
                    let f0 = rng.random_range(400.0..800.0);
                    let am = rng.random_range(4.0..10.0);
                    (0..n)
                        .map(|k| {
                            let t = k as f64 / sr as f64;
                            let carrier = (2.0 * PI * f0 * t).sin();
                            let tremolo = 0.7 + 0.3 * (2.0 * PI * am * t).sin();
                            0.6 * envelope[k] * tremolo * carrier
                        })
                        .collect()
                }
                "chirp" => {
                    let f_lo = rng.random_range(900.0..1100.0);
                    let f_hi = rng.random_range(1800.0..2200.0);
                    (0..n)
                        .map(|k| {
                            let t = k as f64 / sr as f64;
                            let phase =
                                2.0 * PI * (f_lo * t + (f_hi - f_lo) * t * t / (2.0 * duration));
                            0.5 * envelope[k] * phase.sin()
                        })
                        .collect()
                }
                "noiseburst" => {
                    let white: Vec<f64> = (0..n + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (0..n)
                        .map(|k| 0.35 * envelope[k] * (white[k + 1] - white[k]))
                        .collect()
                }
                _ => unreachable!(),
            };
            events.push(Asset {
                id: format!("{class}-{idx:03}.wav"),
                wave: Waveform::new(samples, sr)?,
            });
        }
    }

    let mut backgrounds = Vec::new();
    let n = (config.background_duration_s * sr as f64).round() as usize;
    for idx in 0..config.n_backgrounds {
        let alpha = rng.random_range(0.90..0.97);
        let mut state = 0.0;
        let mut samples: Vec<f64> = (0..n)
            .map(|_| {
                state = alpha * state + (1.0 - alpha) * rng.random_range(-1.0..1.0);
                state
            })
            .collect();
        let scale = 0.1 / rms(&samples).max(1e-12);
        for s in &mut samples {
            *s *= scale;
        }
        backgrounds.push(Asset {
            id: format!("bg-{idx:03}.wav"),
            wave: Waveform::new(samples, sr)?,
        });
    }

    Ok((events, backgrounds))
}
