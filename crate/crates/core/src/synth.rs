//! Synthetic marked-span corpora with cipher languages.
//!
//! Every passage holds one answer of a few words wrapped in an open/close
//! marker pair. Translations are letter-substitution ciphers, so each
//! language is a word-level bijection of the pivot with exact alignment.
//! The zero-shot target is a cipher never seen in training; it reaches the
//! model only through translations back into the training ciphers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_parallel_corpus, ChainProvider, CipherProvider, CorpusBuild, ParallelText,
    ProviderMap, QAInstance, TranslationProvider, Vocabulary,
};
use crate::error::{Error, Result};

pub const PIVOT: &str = "src";
pub const MARKER_PAIRS: usize = 2;
pub const QUESTION_POOLS: usize = 2;
const QUESTION_POOL_SIZE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub lexicon_size: usize,
    pub passage_words: (usize, usize),
    pub answer_words: (usize, usize),
    pub question_words: (usize, usize),
    /// Auxiliary languages and their cipher seeds.
    pub auxiliaries: Vec<(String, u64)>,
    /// Unseen target language and its cipher seed.
    pub target: (String, u64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            lexicon_size: 200,
            passage_words: (10, 16),
            answer_words: (1, 3),
            question_words: (3, 5),
            auxiliaries: vec![("xa".into(), 11), ("xb".into(), 22)],
            target: ("xt".into(), 33),
        }
    }
}

/// What a generated dataset looks like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    pub count: usize,
    /// Marker pairs the answers may be wrapped in.
    pub marker_pairs: Vec<usize>,
    /// Question-word pools the questions draw from.
    pub question_pools: Vec<usize>,
}

impl DatasetSpec {
    pub fn new(id: &str, count: usize, marker_pairs: &[usize], question_pools: &[usize]) -> Self {
        DatasetSpec {
            id: id.into(),
            count,
            marker_pairs: marker_pairs.to_vec(),
            question_pools: question_pools.to_vec(),
        }
    }
}

/// Lexicon plus language setup shared by every generated dataset.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub lexicon: Vec<String>,
}

/// `n` distinct random five-letter words.
pub fn lexicon<R: Rng>(n: usize, rng: &mut R) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..5).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        let reserved = 2 * MARKER_PAIRS + QUESTION_POOLS * QUESTION_POOL_SIZE;
        let (lo, hi) = config.passage_words;
        if config.lexicon_size < reserved + hi + config.answer_words.1 || lo > hi {
            return Err(Error::Config(format!(
                "lexicon of {} words too small for passages of up to {hi} words",
                config.lexicon_size
            )));
        }
        if config.answer_words.0 == 0 || config.answer_words.0 > config.answer_words.1 {
            return Err(Error::Config("answer length range must be 1 or more".into()));
        }
        if config.question_words.0 == 0 || config.question_words.0 > config.question_words.1 {
            return Err(Error::Config("question length range must be 1 or more".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let lexicon = lexicon(config.lexicon_size, &mut rng);
        Ok(SynthWorld { config, lexicon })
    }

    fn marker(&self, pair: usize, close: bool) -> &str {
        &self.lexicon[2 * pair + close as usize]
    }

    fn question_pool(&self, pool: usize) -> &[String] {
        let start = 2 * MARKER_PAIRS + pool * QUESTION_POOL_SIZE;
        &self.lexicon[start..start + QUESTION_POOL_SIZE]
    }

    fn content(&self) -> &[String] {
        &self.lexicon[2 * MARKER_PAIRS + QUESTION_POOLS * QUESTION_POOL_SIZE..]
    }

    /// Pivot-language instances for `spec`, deterministic in `seed`.
    pub fn generate(&self, spec: &DatasetSpec, seed: u64) -> Result<Vec<QAInstance>> {
        if spec.marker_pairs.iter().any(|&p| p >= MARKER_PAIRS)
            || spec.question_pools.iter().any(|&p| p >= QUESTION_POOLS)
            || spec.marker_pairs.is_empty()
            || spec.question_pools.is_empty()
        {
            return Err(Error::Config(format!("bad marker or pool ids in {}", spec.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        let mut out = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let pair = *spec.marker_pairs.choose(&mut rng).expect("nonempty");
            let pool = self.question_pool(*spec.question_pools.choose(&mut rng).expect("nonempty"));
            let qn = rng.gen_range(c.question_words.0..=c.question_words.1);
            let question: Vec<&str> = (0..qn)
                .map(|_| pool.choose(&mut rng).expect("pool").as_str())
                .collect();
            let pn = rng.gen_range(c.passage_words.0..=c.passage_words.1);
            let an = rng.gen_range(c.answer_words.0..=c.answer_words.1);
            let words: Vec<&str> = self
                .content()
                .choose_multiple(&mut rng, pn + an)
                .map(String::as_str)
                .collect();
            let (answer, filler) = words.split_at(an);
            let at = rng.gen_range(0..=filler.len());
            let mut passage: Vec<&str> = filler[..at].to_vec();
            passage.push(self.marker(pair, false));
            let answer_word_index = passage.len();
            passage.extend_from_slice(answer);
            passage.push(self.marker(pair, true));
            passage.extend_from_slice(&filler[at..]);
            let answer_char_start: usize = passage[..answer_word_index]
                .iter()
                .map(|w| w.chars().count() + 1)
                .sum();
            out.push(QAInstance {
                id: format!("{}-{i}", spec.id),
                question: question.join(" "),
                context: passage.join(" "),
                answer_text: answer.join(" "),
                answer_char_start,
                language: PIVOT.into(),
                source_dataset: spec.id.clone(),
            });
        }
        Ok(out)
    }

    pub fn cipher(&self, seed: u64) -> CipherProvider {
        CipherProvider::new(seed, false)
    }

    pub fn languages(&self) -> Vec<String> {
        std::iter::once(PIVOT.to_string())
            .chain(self.config.auxiliaries.iter().map(|(l, _)| l.clone()))
            .collect()
    }

    /// Pivot → auxiliary providers used to build training corpora.
    pub fn providers(&self) -> ProviderMap {
        self.config
            .auxiliaries
            .iter()
            .map(|(l, s)| (l.clone(), Box::new(self.cipher(*s)) as Box<dyn TranslationProvider>))
            .collect()
    }

    /// Target → auxiliary providers (undo the target cipher, apply the
    /// auxiliary one).
    pub fn target_providers(&self) -> ProviderMap {
        let undo = self.cipher(self.config.target.1).inverse();
        self.config
            .auxiliaries
            .iter()
            .map(|(l, s)| {
                let chain = ChainProvider(vec![Box::new(undo.clone()), Box::new(self.cipher(*s))]);
                (l.clone(), Box::new(chain) as Box<dyn TranslationProvider>)
            })
            .collect()
    }

    pub fn target_languages(&self) -> Vec<String> {
        std::iter::once(self.config.target.0.clone())
            .chain(self.config.auxiliaries.iter().map(|(l, _)| l.clone()))
            .collect()
    }

    /// The instance rendered in the unseen target language.
    pub fn to_target(&self, inst: &QAInstance) -> QAInstance {
        let c = self.cipher(self.config.target.1);
        QAInstance {
            question: c.apply(&inst.question),
            context: c.apply(&inst.context),
            answer_text: c.apply(&inst.answer_text),
            language: self.config.target.0.clone(),
            ..inst.clone()
        }
    }
}

/// Vocabulary over every member text of the training corpora.
pub fn training_vocabulary<'a>(texts: impl IntoIterator<Item = &'a ParallelText>) -> Vocabulary {
    Vocabulary::build(texts.into_iter().flat_map(|t| t.texts()))
}

/// A complete synthetic experiment: training corpora, an in-language
/// held-out set and a zero-shot target, all tokenized with one vocabulary.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub vocab: Vocabulary,
    pub train: Vec<(String, CorpusBuild)>,
    /// Pivot-language training instances per dataset, for similarity.
    pub train_raw: Vec<(String, Vec<QAInstance>)>,
    pub heldout: CorpusBuild,
    pub target: CorpusBuild,
    /// Target instances in the pivot language (before the target cipher).
    pub target_pivot: Vec<QAInstance>,
}

pub fn build_experiment(
    world: &SynthWorld,
    train_specs: &[DatasetSpec],
    heldout: &DatasetSpec,
    target: &DatasetSpec,
    max_len: usize,
) -> Result<Experiment> {
    let langs = world.languages();
    let providers = world.providers();
    let mut texts = Vec::new();
    let mut train_raw = Vec::new();
    for (i, spec) in train_specs.iter().enumerate() {
        let raw = world.generate(spec, world.config.seed.wrapping_add(1000 + i as u64))?;
        let (t, _) = crate::corpus::translate_corpus(&raw, &providers, &langs)?;
        texts.push((spec.id.clone(), t));
        train_raw.push((spec.id.clone(), raw));
    }
    let vocab = training_vocabulary(texts.iter().flat_map(|(_, t)| t));
    let mut train = Vec::new();
    for (id, t) in texts {
        let (instances, kept, drops) = crate::corpus::tokenize_corpus(t, &vocab, max_len)?;
        train.push((
            id,
            CorpusBuild {
                instances,
                texts: kept,
                drops,
            },
        ));
    }
    let held_raw = world.generate(heldout, world.config.seed.wrapping_add(2000))?;
    let heldout = build_parallel_corpus(&held_raw, &providers, &langs, &vocab, max_len)?;
    let target_pivot = world.generate(target, world.config.seed.wrapping_add(3000))?;
    let target_raw: Vec<QAInstance> = target_pivot.iter().map(|q| world.to_target(q)).collect();
    let target = build_parallel_corpus(
        &target_raw,
        &world.target_providers(),
        &world.target_languages(),
        &vocab,
        max_len,
    )?;
    Ok(Experiment {
        vocab,
        train,
        train_raw,
        heldout,
        target,
        target_pivot,
    })
}
