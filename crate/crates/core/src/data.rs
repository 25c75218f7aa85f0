//! Synthetic two-modality utterances.
//!
//! Each symbol emits two audio frames drawn around a per-symbol prototype
//! (precise but easily masked by interference) and one video frame drawn
//! around a per-viseme prototype. Several symbols share a viseme, so clean
//! video only identifies a symbol up to its viseme class.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::normal_tensor;
use crate::seed::{rng, sub_seed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "VSR")]
    Vsr,
    #[serde(rename = "AVSR")]
    Avsr,
}

impl Task {
    pub fn uses_audio(self) -> bool {
        matches!(self, Task::Asr | Task::Avsr)
    }

    pub fn uses_video(self) -> bool {
        matches!(self, Task::Vsr | Task::Avsr)
    }

    fn code(self) -> f64 {
        match self {
            Task::Asr => 0.0,
            Task::Vsr => 1.0,
            Task::Avsr => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Task::Asr),
            1 => Ok(Task::Vsr),
            2 => Ok(Task::Avsr),
            _ => Err(Error::Format(format!("unknown task code {c}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Asr => "ASR",
            Task::Vsr => "VSR",
            Task::Avsr => "AVSR",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_symbols: usize,
    pub audio_frames_per_symbol: usize,
    pub video_frames_per_symbol: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub sigma_audio: f64,
    pub sigma_video: f64,
    pub n_visemes: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the emission tables (the frozen "encoders").
    pub emission_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_symbols: 16,
            audio_frames_per_symbol: 2,
            video_frames_per_symbol: 1,
            d_audio: 8,
            d_video: 12,
            sigma_audio: 0.1,
            sigma_video: 0.4,
            n_visemes: 8,
            min_len: 4,
            max_len: 12,
            emission_seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_visemes == 0 || self.n_visemes >= self.n_symbols {
            return Err(Error::Config(format!(
                "viseme map must be many-to-one: {} visemes for {} symbols",
                self.n_visemes, self.n_symbols
            )));
        }
        if self.audio_frames_per_symbol == 0 || self.video_frames_per_symbol == 0 {
            return Err(Error::Config("frames per symbol must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(self.sigma_audio >= 0.0 && self.sigma_video >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed symbol→frame prototype tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Emissions {
    /// Per symbol, `[audio_frames_per_symbol × d_audio]`.
    pub audio: Vec<Tensor>,
    /// Per viseme, `[video_frames_per_symbol × d_video]`.
    pub video: Vec<Tensor>,
    pub viseme_of: Vec<usize>,
}

impl Emissions {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = rng(spec.emission_seed);
        let audio = (0..spec.n_symbols)
            .map(|_| normal_tensor(&[spec.audio_frames_per_symbol, spec.d_audio], 1.0, &mut r))
            .collect();
        let video = (0..spec.n_visemes)
            .map(|_| normal_tensor(&[spec.video_frames_per_symbol, spec.d_video], 1.0, &mut r))
            .collect();
        let mut order: Vec<usize> = (0..spec.n_symbols).collect();
        order.shuffle(&mut r);
        let mut viseme_of = vec![0; spec.n_symbols];
        for (slot, &sym) in order.iter().enumerate() {
            viseme_of[sym] = slot % spec.n_visemes;
        }
        Ok(Self {
            audio,
            video,
            viseme_of,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub y: Vec<usize>,
    /// `[frames_a·|y| × d_audio]`
    pub audio: Tensor,
    /// `[frames_v·|y| × d_video]`
    pub video: Tensor,
    pub task: Task,
}

pub fn generate_sample(
    spec: &SynthSpec,
    emissions: &Emissions,
    seed: u64,
    length: usize,
    task: Task,
) -> Result<Sample> {
    if length < spec.min_len || length > spec.max_len {
        return Err(Error::Contract(format!(
            "sample length {length} outside {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let mut r = rng(seed);
    let y: Vec<usize> = (0..length).map(|_| r.random_range(0..spec.n_symbols)).collect();
    let audio = emit(&y, |s| &emissions.audio[s], spec.sigma_audio, &mut r);
    let video = emit(&y, |s| &emissions.video[emissions.viseme_of[s]], spec.sigma_video, &mut r);
    Ok(Sample {
        y,
        audio,
        video,
        task,
    })
}

fn emit<'a>(y: &[usize], proto: impl Fn(usize) -> &'a Tensor, sigma: f64, r: &mut impl Rng) -> Tensor {
    let (f, d) = (proto(y[0]).rows(), proto(y[0]).cols());
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut data = Vec::with_capacity(y.len() * f * d);
    for &s in y {
        for &v in proto(s).data() {
            data.push(if sigma > 0.0 { v + noise.sample(r) } else { v });
        }
    }
    Tensor::new(vec![y.len() * f, d], data).expect("frame count matches")
}

/// A sample of random length seeded by `seed`.
pub fn generate_random_sample(spec: &SynthSpec, emissions: &Emissions, seed: u64, task: Task) -> Result<Sample> {
    let length = rng(sub_seed(seed, 0x1e)).random_range(spec.min_len..=spec.max_len);
    generate_sample(spec, emissions, seed, length, task)
}

pub fn mean_power(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64
}

/// Adds the mean of the interferers' audio streams (looped or cropped to
/// the target length) to the audio frames, scaled so that
/// `10·log10(P_signal / P_babble) = snr_db`. Video is left untouched.
/// An infinite SNR returns the sample unchanged.
pub fn inject_babble(
    sample: &Sample,
    spec: &SynthSpec,
    emissions: &Emissions,
    snr_db: f64,
    interferer_seeds: &[u64],
) -> Result<Sample> {
    if interferer_seeds.is_empty() {
        return Err(Error::Empty("babble interferers"));
    }
    if snr_db == f64::INFINITY {
        return Ok(sample.clone());
    }
    let (t, d) = (sample.audio.rows(), sample.audio.cols());
    let mut babble = vec![0.0; t * d];
    for &s in interferer_seeds {
        let other = generate_random_sample(spec, emissions, s, sample.task)?;
        let n = other.audio.rows();
        for row in 0..t {
            let src = other.audio.row(row % n);
            for (b, v) in babble[row * d..(row + 1) * d].iter_mut().zip(src) {
                *b += v;
            }
        }
    }
    let k = interferer_seeds.len() as f64;
    babble.iter_mut().for_each(|b| *b /= k);
    let p_signal = mean_power(&sample.audio);
    let p_babble = babble.iter().map(|v| v * v).sum::<f64>() / babble.len() as f64;
    if p_babble == 0.0 {
        return Ok(sample.clone());
    }
    let gain = (p_signal / (p_babble * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out = sample.clone();
    for (a, b) in out.audio.data_mut().iter_mut().zip(&babble) {
        *a += gain * b;
    }
    Ok(out)
}

/// Levenshtein distance divided by the reference length.
pub fn token_error_rate(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference sequence"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Train/validation/test splits, all derived from `(spec, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    sub_seed(sub_seed(seed, split.stream()), index as u64)
}

impl Dataset {
    pub fn generate(spec: &SynthSpec, seed: u64, sizes: [usize; 3], task: Task) -> Result<Self> {
        let em = Emissions::new(spec)?;
        let split = |s: Split, n: usize| -> Result<Vec<Sample>> {
            (0..n)
                .map(|i| generate_random_sample(spec, &em, sample_seed(seed, s, i), task))
                .collect()
        };
        Ok(Self {
            spec: spec.clone(),
            seed,
            train: split(Split::Train, sizes[0])?,
            val: split(Split::Val, sizes[1])?,
            test: split(Split::Test, sizes[2])?,
        })
    }

    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Plain-text header, then every sample as little-endian f64 values:
    /// `len, task, y[len], audio, video`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let spec = toml::to_string(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "SMOPDATA 1")?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "counts {} {} {}", self.train.len(), self.val.len(), self.test.len())?;
        writeln!(w, "dims {} {}", self.spec.d_audio, self.spec.d_video)?;
        for line in spec.lines() {
            writeln!(w, "spec {line}")?;
        }
        writeln!(w, "end")?;
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            let head = [s.y.len() as f64, s.task.code()];
            let ys = s.y.iter().map(|&v| v as f64);
            for v in head.into_iter().chain(ys).chain(s.audio.data().iter().copied()).chain(s.video.data().iter().copied()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated dataset header".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != "SMOPDATA 1" {
            return Err(Error::Format("not a dataset file".into()));
        }
        let (mut seed, mut counts, mut spec_text) = (None, None, String::new());
        loop {
            let l = next_line(&mut r)?;
            match l.split_once(' ') {
                _ if l == "end" => break,
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                Some(("counts", v)) => {
                    let c: Vec<usize> = v.split(' ').filter_map(|x| x.parse().ok()).collect();
                    counts = (c.len() == 3).then(|| [c[0], c[1], c[2]]);
                }
                Some(("spec", v)) => {
                    spec_text.push_str(v);
                    spec_text.push('\n');
                }
                _ => {}
            }
        }
        let seed = seed.ok_or_else(|| Error::Format("missing seed".into()))?;
        let counts = counts.ok_or_else(|| Error::Format("missing counts".into()))?;
        let spec: SynthSpec = toml::from_str(&spec_text).map_err(|e| Error::Format(e.to_string()))?;
        let mut read_f64 = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated dataset body".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let mut read_split = |n: usize| -> Result<Vec<Sample>> {
            (0..n)
                .map(|_| {
                    let len = read_f64()? as usize;
                    let task = Task::from_code(read_f64()?)?;
                    let y = (0..len).map(|_| read_f64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                    let (ta, tv) = (len * spec.audio_frames_per_symbol, len * spec.video_frames_per_symbol);
                    let audio = (0..ta * spec.d_audio).map(|_| read_f64()).collect::<Result<Vec<_>>>()?;
                    let video = (0..tv * spec.d_video).map(|_| read_f64()).collect::<Result<Vec<_>>>()?;
                    Ok(Sample {
                        y,
                        audio: Tensor::new(vec![ta, spec.d_audio], audio)?,
                        video: Tensor::new(vec![tv, spec.d_video], video)?,
                        task,
                    })
                })
                .collect()
        };
        let train = read_split(counts[0])?;
        let val = read_split(counts[1])?;
        let test = read_split(counts[2])?;
        Ok(Self {
            spec,
            seed,
            train,
            val,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
