//! Deterministic synthetic corpora drawn from a latent topic model.
//!
//! Every topic owns a lexicon of made-up words whose hashed token ids all
//! fall in the same residue class modulo `latent_classes`, the same
//! grouping [`make_synthetic_teacher`](crate::encoder::make_synthetic_teacher)
//! builds its embedding table around. A sentence's latent is a mixture of
//! a primary and a secondary topic; its words are drawn from the two
//! lexicons in that proportion. STS gold scores are `5 x` the histogram
//! intersection of the two sentences' topic mixtures.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{StsPairSet, Triplet, TripletSet, UnlabeledCorpus};
use crate::encoder::DEFAULT_LATENT_CLASSES;
use crate::error::{Error, Result};
use crate::eval::StsPair;
use crate::vocab::{Sentence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSizes {
    pub corpus: usize,
    pub triplets: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub topics: usize,
    /// Must match the teacher's latent class count.
    pub latent_classes: usize,
    pub words_per_topic: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            corpus: 2000,
            triplets: 500,
            dev_pairs: 200,
            test_pairs: 200,
            topics: DEFAULT_LATENT_CLASSES,
            latent_classes: DEFAULT_LATENT_CLASSES,
            words_per_topic: 48,
            min_len: 6,
            max_len: 10,
        }
    }
}

impl SynthSizes {
    fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let positive = [
            self.corpus,
            self.triplets,
            self.dev_pairs,
            self.test_pairs,
            self.words_per_topic,
            self.min_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Invalid("synthetic sizes must be positive".into()));
        }
        if self.dev_pairs < 2 || self.test_pairs < 2 {
            return Err(Error::Invalid("STS sets need at least two pairs".into()));
        }
        if self.topics < 3 || self.topics > self.latent_classes {
            return Err(Error::Invalid(format!(
                "need 3 <= topics <= latent_classes, got {} topics and {} classes",
                self.topics, self.latent_classes
            )));
        }
        if self.max_len < self.min_len {
            return Err(Error::Invalid("max_len must be >= min_len".into()));
        }
        if vocab.size / self.latent_classes < self.words_per_topic * 3 / 2 {
            return Err(Error::Invalid(format!(
                "vocabulary of {} is too small for {} words in each of {} classes",
                vocab.size, self.words_per_topic, self.latent_classes
            )));
        }
        Ok(())
    }
}

/// Topic mixture behind one sentence: `weight` quarters from `primary`,
/// the rest from `secondary`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latent {
    pub primary: usize,
    pub secondary: usize,
    pub weight: u8,
}

impl Latent {
    fn mixture(&self) -> BTreeMap<usize, f64> {
        let w = f64::from(self.weight) / 4.0;
        let mut m = BTreeMap::new();
        *m.entry(self.primary).or_insert(0.0) += w;
        *m.entry(self.secondary).or_insert(0.0) += 1.0 - w;
        m.retain(|_, v| *v > 0.0);
        m
    }

    pub fn topics(&self) -> [usize; 2] {
        [self.primary, self.secondary]
    }
}

/// Gold similarity on a 0 to 5 scale: 5 x histogram intersection.
pub fn gold_score(a: &Latent, b: &Latent) -> f64 {
    let (ma, mb) = (a.mixture(), b.mixture());
    5.0 * ma
        .iter()
        .map(|(k, va)| mb.get(k).map_or(0.0, |vb| va.min(*vb)))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: UnlabeledCorpus,
    pub triplets: TripletSet,
    pub dev: StsPairSet,
    pub test: StsPairSet,
    /// Primary topic of (anchor, positive, negative) per triplet.
    pub triplet_topics: Vec<[usize; 3]>,
    pub lexicon: Vec<Vec<String>>,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn made_up_word(mut n: usize) -> String {
    let per = ONSETS.len() * VOWELS.len();
    let mut w = String::new();
    loop {
        let s = n % per;
        w.push_str(ONSETS[s / VOWELS.len()]);
        w.push_str(VOWELS[s % VOWELS.len()]);
        n /= per;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    // at least two syllables so words never collide with English stopwords
    if w.len() <= 3 {
        w.push_str("ra");
    }
    w
}

/// Lexicon per topic: distinct words with distinct token ids in the
/// topic's residue class.
fn build_lexicon(vocab: &Vocabulary, sizes: &SynthSizes) -> Result<Vec<Vec<String>>> {
    let mut lexicon = vec![Vec::new(); sizes.topics];
    let mut used_ids = HashSet::new();
    let mut seen_words = HashSet::new();
    let mut remaining = sizes.topics;
    let limit = 64 * vocab.size.max(1024);
    for n in 0..limit {
        let word = made_up_word(n);
        if !seen_words.insert(word.clone()) {
            continue;
        }
        let id = vocab.token_id(&word);
        let topic = id % sizes.latent_classes;
        if topic >= sizes.topics || lexicon[topic].len() == sizes.words_per_topic || !used_ids.insert(id) {
            continue;
        }
        lexicon[topic].push(word);
        if lexicon[topic].len() == sizes.words_per_topic {
            remaining -= 1;
            if remaining == 0 {
                return Ok(lexicon);
            }
        }
    }
    Err(Error::Invalid("could not fill topic lexicons; enlarge the vocabulary".into()))
}

struct Generator<'a> {
    rng: ChaCha8Rng,
    lexicon: &'a [Vec<String>],
    sizes: &'a SynthSizes,
}

impl Generator<'_> {
    fn latent(&mut self) -> Latent {
        let t = self.sizes.topics;
        let primary = self.rng.random_range(0..t);
        let mut secondary = self.rng.random_range(0..t - 1);
        if secondary >= primary {
            secondary += 1;
        }
        Latent {
            primary,
            secondary,
            weight: self.rng.random_range(2..=4),
        }
    }

    /// A latent sharing no topic with `avoid`.
    fn disjoint_latent(&mut self, avoid: &Latent) -> Latent {
        loop {
            let l = self.latent();
            let clash = l.topics().iter().any(|t| avoid.topics().contains(t));
            if !clash {
                return l;
            }
        }
    }

    /// A latent that keeps exactly one of `base`'s topics.
    fn overlapping_latent(&mut self, base: &Latent) -> Latent {
        loop {
            let mut l = self.latent();
            let keep = if self.rng.random_bool(0.5) { base.primary } else { base.secondary };
            if self.rng.random_bool(0.5) {
                l.primary = keep;
            } else {
                l.secondary = keep;
            }
            if l.primary != l.secondary {
                return l;
            }
        }
    }

    fn word(&mut self, topic: usize) -> (usize, String) {
        let lex = &self.lexicon[topic];
        (topic, lex[self.rng.random_range(0..lex.len())].clone())
    }

    fn words(&mut self, latent: &Latent) -> Vec<(usize, String)> {
        let len = self.rng.random_range(self.sizes.min_len..=self.sizes.max_len);
        let from_primary = ((len as f64) * f64::from(latent.weight) / 4.0).round() as usize;
        let mut words: Vec<_> = (0..len)
            .map(|i| self.word(if i < from_primary { latent.primary } else { latent.secondary }))
            .collect();
        words.shuffle(&mut self.rng);
        words
    }

    fn sentence(words: &[(usize, String)]) -> Sentence {
        let text = words.iter().map(|(_, w)| w.as_str()).collect::<Vec<_>>().join(" ");
        Sentence::new(text).expect("generated sentences are non-empty")
    }

    /// Resamples about a quarter of the words from the same topic.
    fn perturb(&mut self, words: &[(usize, String)]) -> Vec<(usize, String)> {
        let mut out = words.to_vec();
        let mut changed = false;
        for slot in out.iter_mut() {
            if self.rng.random_bool(0.25) {
                *slot = self.word(slot.0);
                changed = true;
            }
        }
        if !changed {
            let i = self.rng.random_range(0..out.len());
            out[i] = self.word(out[i].0);
        }
        out
    }

    fn sts_pairs(&mut self, count: usize, avoid: &HashSet<String>) -> Vec<StsPair> {
        let mut pairs = Vec::with_capacity(count);
        while pairs.len() < count {
            let la = self.latent();
            let wa = self.words(&la);
            let a = Self::sentence(&wa);
            if avoid.contains(a.as_str()) {
                continue;
            }
            let roll: f64 = self.rng.random();
            let (lb, b) = if roll < 0.1 {
                (la, a.clone())
            } else if roll < 0.3 {
                (la, Self::sentence(&self.words(&la)))
            } else if roll < 0.7 {
                let lb = self.overlapping_latent(&la);
                (lb, Self::sentence(&self.words(&lb)))
            } else {
                let lb = self.disjoint_latent(&la);
                (lb, Self::sentence(&self.words(&lb)))
            };
            pairs.push(StsPair {
                a,
                b,
                gold: gold_score(&la, &lb),
            });
        }
        pairs
    }
}

/// Generates a corpus, triplets and dev/test STS sets. Same seed, sizes
/// and vocabulary give identical data.
pub fn synth_generate(seed: u64, sizes: &SynthSizes, vocab: &Vocabulary) -> Result<SyntheticData> {
    sizes.validate(vocab)?;
    let lexicon = build_lexicon(vocab, sizes)?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let gen = |k| Generator {
        rng: stream(k),
        lexicon: &lexicon,
        sizes,
    };

    let mut g = gen(1);
    let sentences = (0..sizes.corpus)
        .map(|_| {
            let l = g.latent();
            Generator::sentence(&g.words(&l))
        })
        .collect();

    let mut g = gen(2);
    let mut triplets = Vec::with_capacity(sizes.triplets);
    let mut triplet_topics = Vec::with_capacity(sizes.triplets);
    for _ in 0..sizes.triplets {
        let la = g.latent();
        let wa = g.words(&la);
        let wp = g.perturb(&wa);
        let ln = g.disjoint_latent(&la);
        let wn = g.words(&ln);
        triplets.push(Triplet {
            anchor: Generator::sentence(&wa),
            positive: Generator::sentence(&wp),
            negative: Generator::sentence(&wn),
        });
        triplet_topics.push([la.primary, la.primary, ln.primary]);
    }

    let dev_pairs = gen(3).sts_pairs(sizes.dev_pairs, &HashSet::new());
    let dev_anchors: HashSet<String> = dev_pairs.iter().map(|p| p.a.as_str().to_string()).collect();
    let test_pairs = gen(4).sts_pairs(sizes.test_pairs, &dev_anchors);

    Ok(SyntheticData {
        corpus: UnlabeledCorpus {
            sentences,
            source: format!("synthetic:seed={seed}"),
        },
        triplets: TripletSet { triplets },
        dev: StsPairSet {
            name: "synthetic-dev".into(),
            pairs: dev_pairs,
        },
        test: StsPairSet {
            name: "synthetic-test".into(),
            pairs: test_pairs,
        },
        triplet_topics,
        lexicon,
    })
}
