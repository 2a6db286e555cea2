//! Synthetic audio/text token world.
//!
//! Text symbols map to fixed acoustic token pairs; a noisy channel adds
//! substitutions, insertions and deletions; every acoustic token has a
//! pitch value and an embedding vector (the frozen "audio encoder").
//! Also builds the RL data subsets D0-D3 and reads/writes them as JSON lines.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rewards::{find_repetition, HallucinationParams};
use crate::seed::{derive_named, derive_seed, rng, Rng};

pub const TEXT_PAD: usize = 0;
pub const TEXT_BOS: usize = 1;
pub const TEXT_EOS: usize = 2;
/// First real text symbol.
pub const TEXT_FIRST: usize = 3;
pub const ACOUSTIC_EOS: usize = 0;

pub const DATASET_FORMAT: &str = "rlforge-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("unknown {kind} symbol {symbol}")]
    UnknownSymbol { kind: &'static str, symbol: usize },
    #[error("strategy {strategy} produced {found} of {wanted} samples within {attempts} attempts")]
    Unsatisfiable {
        strategy: Subset,
        wanted: usize,
        found: usize,
        attempts: usize,
    },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    /// Includes PAD, BOS and EOS.
    pub text_vocab_size: usize,
    /// Includes EOS.
    pub acoustic_vocab_size: usize,
    pub tokens_per_text_symbol: usize,
    pub p_sub: f64,
    pub p_ins: f64,
    pub p_del: f64,
    /// Keyword symbols; empty means four are drawn from the seed.
    pub keyword_set: Vec<usize>,
    pub embedding_dim: usize,
    pub seed: u64,
    /// Text length range (real symbols, EOS excluded) for generated samples.
    pub min_text_len: usize,
    pub max_text_len: usize,
    /// Acoustic length above which an utterance counts as long.
    pub long_threshold: usize,
    /// Acoustic length below which an utterance counts as short.
    pub short_threshold: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            text_vocab_size: 32,
            acoustic_vocab_size: 64,
            tokens_per_text_symbol: 2,
            p_sub: 0.05,
            p_ins: 0.03,
            p_del: 0.03,
            keyword_set: Vec::new(),
            embedding_dim: 16,
            seed: 7,
            min_text_len: 3,
            max_text_len: 24,
            long_threshold: 40,
            short_threshold: 20,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidSpec(m));
        if self.text_vocab_size < 4 || self.acoustic_vocab_size < 4 {
            return bad("vocabulary sizes must be at least 4".into());
        }
        for (name, p) in [("p_sub", self.p_sub), ("p_ins", self.p_ins), ("p_del", self.p_del)] {
            if !(0.0..0.5).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 0.5)"));
            }
        }
        if self.tokens_per_text_symbol == 0 || self.embedding_dim == 0 {
            return bad("tokens_per_text_symbol and embedding_dim must be positive".into());
        }
        let symbols = self.text_vocab_size - TEXT_FIRST;
        let slots = (self.acoustic_vocab_size - 1) / self.tokens_per_text_symbol;
        if slots < symbols {
            return bad(format!(
                "{symbols} text symbols need {} distinct acoustic tokens, only {} available",
                symbols * self.tokens_per_text_symbol,
                self.acoustic_vocab_size - 1
            ));
        }
        for &k in &self.keyword_set {
            if !(TEXT_FIRST..self.text_vocab_size).contains(&k) {
                return bad(format!("keyword {k} is not a real text symbol"));
            }
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return bad("text length range must satisfy 1 <= min <= max".into());
        }
        Ok(())
    }

    /// Same spec with every channel noise rate set to zero.
    pub fn noiseless(&self) -> Self {
        Self {
            p_sub: 0.0,
            p_ins: 0.0,
            p_del: 0.0,
            ..self.clone()
        }
    }
}

/// Normalized per-token pitch values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack(Vec<f64>);

impl PitchTrack {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Population standard deviation; 0 for an empty track.
    pub fn std(&self) -> f64 {
        population_std(&self.0)
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// A built world: immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `text_to_acoustic[s]` for every text symbol; empty for PAD/BOS/EOS.
    pub text_to_acoustic: Vec<Vec<usize>>,
    /// Pitch in `[0, 1]` per acoustic token (EOS has 0).
    pub pitch_map: Vec<f64>,
    pub pitch_mean: f64,
    pub pitch_std: f64,
    /// `[acoustic_vocab_size, embedding_dim]`, row-major.
    pub embedding_table: Vec<f64>,
    pub keywords: Vec<usize>,
}

/// Generates a world deterministically from its spec.
pub fn build_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut r = rng(derive_named(spec.seed, "world"));
    let k = spec.tokens_per_text_symbol;

    // Token position p of every symbol draws from its own disjoint pool,
    // so codes are distinct per position and uniquely decodable.
    let mut pool: Vec<usize> = (1..spec.acoustic_vocab_size).collect();
    pool.shuffle(&mut r);
    let symbols = spec.text_vocab_size - TEXT_FIRST;
    let mut text_to_acoustic = vec![Vec::new(); spec.text_vocab_size];
    for (i, code) in text_to_acoustic.iter_mut().skip(TEXT_FIRST).enumerate() {
        *code = (0..k).map(|p| pool[p * symbols + i]).collect();
    }

    let mut pitch_map = vec![0.0; spec.acoustic_vocab_size];
    for p in pitch_map.iter_mut().skip(1) {
        *p = r.gen::<f64>();
    }
    let voiced = &pitch_map[1..];
    let pitch_mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
    let pitch_std = population_std(voiced);

    let embedding_table = (0..spec.acoustic_vocab_size * spec.embedding_dim)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();

    let keywords = if spec.keyword_set.is_empty() {
        let mut all: Vec<usize> = (TEXT_FIRST..spec.text_vocab_size).collect();
        all.shuffle(&mut r);
        let mut kw: Vec<usize> = all.into_iter().take(4.min(symbols)).collect();
        kw.sort_unstable();
        kw
    } else {
        let mut kw = spec.keyword_set.clone();
        kw.sort_unstable();
        kw.dedup();
        kw
    };

    Ok(World {
        spec: spec.clone(),
        text_to_acoustic,
        pitch_map,
        pitch_mean,
        pitch_std,
        embedding_table,
        keywords,
    })
}

impl World {
    pub fn text_vocab(&self) -> usize {
        self.spec.text_vocab_size
    }

    pub fn acoustic_vocab(&self) -> usize {
        self.spec.acoustic_vocab_size
    }

    pub fn is_text_symbol(&self, s: usize) -> bool {
        (TEXT_FIRST..self.spec.text_vocab_size).contains(&s)
    }

    pub fn is_keyword(&self, s: usize) -> bool {
        self.keywords.contains(&s)
    }

    /// Embedding row of an acoustic token.
    pub fn embedding(&self, token: usize) -> &[f64] {
        let d = self.spec.embedding_dim;
        &self.embedding_table[token * d..(token + 1) * d]
    }

    /// Clean acoustic rendering of `text` (EOS-terminated).
    pub fn render(&self, text: &[usize]) -> Result<Vec<usize>, WorldError> {
        let mut out = Vec::with_capacity(text.len() * self.spec.tokens_per_text_symbol + 1);
        for &s in text {
            if s == TEXT_EOS {
                break;
            }
            if !self.is_text_symbol(s) {
                return Err(WorldError::UnknownSymbol { kind: "text", symbol: s });
            }
            out.extend_from_slice(&self.text_to_acoustic[s]);
        }
        out.push(ACOUSTIC_EOS);
        Ok(out)
    }

    /// Acoustic utterance for `text`; with `noisy` the channel perturbs each token.
    pub fn synthesize_utterance(
        &self,
        text: &[usize],
        noisy: bool,
        seed: u64,
    ) -> Result<Vec<usize>, WorldError> {
        let clean = self.render(text)?;
        if !noisy {
            return Ok(clean);
        }
        Ok(self.apply_channel(&clean, seed))
    }

    /// Per position: delete with `p_del`, else substitute with `p_sub`; then
    /// insert a random token with `p_ins`. EOS is kept.
    pub fn apply_channel(&self, acoustic: &[usize], seed: u64) -> Vec<usize> {
        let mut r = rng(seed);
        let v = self.spec.acoustic_vocab_size;
        let mut out = Vec::with_capacity(acoustic.len() + 4);
        for &t in acoustic.iter().take_while(|&&t| t != ACOUSTIC_EOS) {
            if r.gen::<f64>() < self.spec.p_del {
                continue;
            }
            if r.gen::<f64>() < self.spec.p_sub {
                // uniform over the other non-EOS tokens
                let mut x = r.gen_range(1..v - 1);
                if x >= t {
                    x += 1;
                }
                out.push(x);
            } else {
                out.push(t);
            }
            if r.gen::<f64>() < self.spec.p_ins {
                out.push(r.gen_range(1..v));
            }
        }
        out.push(ACOUSTIC_EOS);
        out
    }

    /// Greedy inversion of the symbol code: consume a full code when one
    /// matches at the current position, otherwise skip a token.
    pub fn invert(&self, acoustic: &[usize]) -> Vec<usize> {
        let k = self.spec.tokens_per_text_symbol;
        let body: Vec<usize> = acoustic.iter().copied().take_while(|&t| t != ACOUSTIC_EOS).collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < body.len() {
            let hit = (pos + k <= body.len())
                .then(|| {
                    (TEXT_FIRST..self.spec.text_vocab_size)
                        .find(|&s| self.text_to_acoustic[s] == body[pos..pos + k])
                })
                .flatten();
            match hit {
                Some(s) => {
                    out.push(s);
                    pos += k;
                }
                None => pos += 1,
            }
        }
        out
    }

    /// Pitch track of an acoustic sequence, normalized by corpus mean/std.
    pub fn f0_of(&self, acoustic: &[usize]) -> Result<PitchTrack, WorldError> {
        let mut values = Vec::with_capacity(acoustic.len());
        for &t in acoustic.iter().take_while(|&&t| t != ACOUSTIC_EOS) {
            if t >= self.spec.acoustic_vocab_size {
                return Err(WorldError::UnknownSymbol { kind: "acoustic", symbol: t });
            }
            values.push((self.pitch_map[t] - self.pitch_mean) / self.pitch_std);
        }
        Ok(PitchTrack(values))
    }

    /// Random EOS-terminated text. `keyword_weight` scales how often
    /// keyword symbols are drawn relative to other symbols.
    pub fn random_text(&self, r: &mut Rng, keyword_weight: f64) -> Vec<usize> {
        let len = r.gen_range(self.spec.min_text_len..=self.spec.max_text_len);
        let symbols: Vec<usize> = (TEXT_FIRST..self.spec.text_vocab_size).collect();
        let weights: Vec<f64> = symbols
            .iter()
            .map(|&s| if self.is_keyword(s) { keyword_weight } else { 1.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut text = Vec::with_capacity(len + 1);
        for _ in 0..len {
            let mut u = r.gen::<f64>() * total;
            let mut pick = symbols[symbols.len() - 1];
            for (&s, &w) in symbols.iter().zip(&weights) {
                if u < w {
                    pick = s;
                    break;
                }
                u -= w;
            }
            text.push(pick);
        }
        text.push(TEXT_EOS);
        text
    }
}

/// Data subset / construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    /// Random control set.
    D0,
    /// Hard / hallucination-prone: reference decoders disagree or repeat.
    D1,
    /// Long utterances.
    D2,
    /// Keyword-bearing utterances.
    D3,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::D0, Subset::D1, Subset::D2, Subset::D3];
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subset::D0 => "D0",
            Subset::D1 => "D1",
            Subset::D2 => "D2",
            Subset::D3 => "D3",
        };
        f.write_str(s)
    }
}

impl FromStr for Subset {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D0" | "0" => Ok(Subset::D0),
            "D1" | "1" => Ok(Subset::D1),
            "D2" | "2" => Ok(Subset::D2),
            "D3" | "3" => Ok(Subset::D3),
            other => Err(WorldError::Format(format!("unknown subset {other:?}"))),
        }
    }
}

/// Which side of the audio/text mapping a sample conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Condition: noisy acoustic utterance; target: text.
    Asr,
    /// Condition: text; target: acoustic tokens.
    Tts,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Asr => "asr",
            Task::Tts => "tts",
        })
    }
}

impl FromStr for Task {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "asr" => Ok(Task::Asr),
            "tts" => Ok(Task::Tts),
            other => Err(WorldError::Format(format!("unknown task {other:?}"))),
        }
    }
}

/// One training or test item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub subset: Subset,
    /// Acoustic tokens for ASR, text for TTS; EOS-terminated.
    pub condition: Vec<usize>,
    /// Reference transcript, EOS-terminated.
    pub text: Vec<usize>,
    /// Keyword occurrences of `text`, in text order.
    pub keywords: Vec<usize>,
}

/// A transcription procedure used to mine hard samples.
pub trait ReferenceDecoder {
    fn decode(&self, world: &World, acoustic: &[usize], seed: u64) -> Vec<usize>;
}

/// Code inversion of the utterance as given.
pub struct CleanInversion;

impl ReferenceDecoder for CleanInversion {
    fn decode(&self, world: &World, acoustic: &[usize], _seed: u64) -> Vec<usize> {
        world.invert(acoustic)
    }
}

/// Code inversion after passing the utterance through the channel again.
pub struct RenoisedInversion;

impl ReferenceDecoder for RenoisedInversion {
    fn decode(&self, world: &World, acoustic: &[usize], seed: u64) -> Vec<usize> {
        world.invert(&world.apply_channel(acoustic, seed))
    }
}

/// Parameters of one dataset generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRequest {
    pub strategy: Subset,
    pub n: usize,
    pub seed: u64,
    pub task: Task,
    /// Relative draw weight of keyword symbols in candidate texts.
    pub keyword_weight: f64,
    /// Candidates tried per requested sample before giving up.
    pub attempts_per_sample: usize,
    /// Prefix for sample ids.
    pub id_prefix: String,
}

impl DatasetRequest {
    pub fn new(strategy: Subset, n: usize, seed: u64) -> Self {
        Self {
            strategy,
            n,
            seed,
            task: Task::Asr,
            keyword_weight: 1.0,
            attempts_per_sample: 200,
            id_prefix: String::new(),
        }
    }

    pub fn task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    pub fn keyword_weight(mut self, w: f64) -> Self {
        self.keyword_weight = w;
        self
    }

    pub fn id_prefix(mut self, p: impl Into<String>) -> Self {
        self.id_prefix = p.into();
        self
    }
}

/// Builds a dataset for one strategy.
///
/// Candidates are random texts with noisy utterances; D1/D2/D3 keep only
/// candidates that pass their filter. D1 compares the two decoders.
pub fn generate_dataset(
    world: &World,
    req: &DatasetRequest,
    decoders: (&dyn ReferenceDecoder, &dyn ReferenceDecoder),
) -> Result<Vec<Sample>, WorldError> {
    if req.n == 0 {
        return Err(WorldError::InvalidSpec("dataset size must be positive".into()));
    }
    let base = derive_named(req.seed, &format!("dataset-{}-{}", req.strategy, req.task));
    let budget = req.n.saturating_mul(req.attempts_per_sample.max(1));
    let hall = HallucinationParams::default();
    let mut out = Vec::with_capacity(req.n);
    for attempt in 0..budget {
        if out.len() == req.n {
            break;
        }
        let cand_seed = derive_seed(base, attempt as u64);
        let mut r = rng(cand_seed);
        let text = world.random_text(&mut r, req.keyword_weight);
        let acoustic = world.synthesize_utterance(&text, true, derive_seed(cand_seed, 1))?;
        let keep = match req.strategy {
            Subset::D0 => true,
            Subset::D1 => {
                let a = decoders.0.decode(world, &acoustic, derive_seed(cand_seed, 2));
                let b = decoders.1.decode(world, &acoustic, derive_seed(cand_seed, 3));
                let rep = |s: &[usize]| find_repetition(s, hall.n_max, hall.rep_threshold).is_some();
                a != b || rep(&a) || rep(&b)
            }
            Subset::D2 => acoustic.len() - 1 > world.spec.long_threshold,
            Subset::D3 => text.iter().any(|&s| world.is_keyword(s)),
        };
        if !keep {
            continue;
        }
        let keywords = text.iter().copied().filter(|&s| world.is_keyword(s)).collect();
        let condition = match req.task {
            Task::Asr => acoustic,
            Task::Tts => text.clone(),
        };
        out.push(Sample {
            id: format!("{}{}-{}-{:05}", req.id_prefix, req.strategy, req.seed, out.len()),
            subset: req.strategy,
            condition,
            text,
            keywords,
        });
    }
    if out.len() < req.n {
        return Err(WorldError::Unsatisfiable {
            strategy: req.strategy,
            wanted: req.n,
            found: out.len(),
            attempts: budget,
        });
    }
    Ok(out)
}

/// D1 with the default pair of reference decoders.
pub fn generate_default(world: &World, req: &DatasetRequest) -> Result<Vec<Sample>, WorldError> {
    generate_dataset(world, req, (&CleanInversion, &RenoisedInversion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    world: WorldSpec,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: String,
    subset: Subset,
    condition: Vec<usize>,
    text: Vec<usize>,
    keywords: Vec<usize>,
}

/// Writes the header line and one JSON object per sample.
pub fn write_jsonl(out: &mut impl Write, spec: &WorldSpec, samples: &[Sample]) -> Result<(), WorldError> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        world: spec.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        let line = SampleLine {
            id: s.id.clone(),
            subset: s.subset,
            condition: s.condition.clone(),
            text: s.text.clone(),
            keywords: s.keywords.clone(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_jsonl`].
pub fn read_jsonl(input: impl BufRead) -> Result<(WorldSpec, Vec<Sample>), WorldError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| WorldError::Format("missing header line".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(WorldError::Format(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine = serde_json::from_str(&line)?;
        samples.push(Sample {
            id: s.id,
            subset: s.subset,
            condition: s.condition,
            text: s.text,
            keywords: s.keywords,
        });
    }
    Ok((header.world, samples))
}
