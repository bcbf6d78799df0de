//! Synthetic sentence-pair corpus with planted equivalent propositions.
//!
//! Each sentence joins two or three short facts ("Alma admired the golden
//! clock in Paris"). Paired sentences share zero to two identical facts; the
//! remaining facts are distinct, and facts only on the second side reuse the
//! subject of a first-side fact so that they act as near-miss negatives.
//! Every fact is unique in the corpus up to word order, so the planted
//! positives are exactly what the lexical oracle recovers.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{proposition_to_mask, AlignConfig, BinaryMask};
use crate::corpus::{PairRecord, PropRecord};
use crate::error::{Error, Result};
use crate::tokenizer::{normalize_token, tokenize};

pub const NAMES: &[&str] = &[
    "Alma", "Boris", "Carla", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Irene", "Jonah",
    "Keiko", "Liam", "Mira", "Nadia", "Oscar", "Priya", "Quinn", "Rosa", "Stefan", "Tara", "Umar",
    "Vera", "Wendel", "Ximena", "Yuri", "Zora", "Anton", "Bianca", "Cyril", "Dalia", "Emil",
    "Fiona", "Gideon", "Hana", "Ivo", "Jade", "Kofi", "Lena", "Marco", "Nina", "Otto", "Pavel",
    "Rhea", "Sami", "Tilda", "Ulla", "Viktor", "Wanda", "Yasmin", "Zane",
];

pub const VERBS: &[&str] = &[
    "admired", "bought", "built", "carried", "chose", "cleaned", "cooked", "copied", "delivered",
    "designed", "dropped", "found", "fixed", "guarded", "hid", "inspected", "kept", "lent",
    "lifted", "lost", "measured", "moved", "noticed", "opened", "packed", "painted",
    "photographed", "praised", "repaired", "returned", "sold", "sketched", "stole", "studied",
    "tested", "traded", "wrapped", "weighed", "wanted", "visited", "borrowed", "ordered",
    "hunted", "sorted", "stacked", "rented", "signed", "printed", "shared", "polished",
];

pub const ADJECTIVES: &[&str] = &[
    "ancient", "blue", "broken", "bright", "cheap", "clever", "curious", "dusty", "elegant",
    "empty", "famous", "fragile", "golden", "green", "heavy", "hollow", "huge", "tiny", "lovely",
    "modern", "narrow", "noisy", "old", "orange", "pale", "purple", "quiet", "rare", "red",
    "rusty", "shiny", "silver", "small", "smooth", "soft", "strange", "sturdy", "tall", "tidy",
    "ugly", "velvet", "warm", "wet", "wooden", "yellow", "young", "crisp", "gentle", "plain",
    "round",
];

pub const OBJECTS: &[&str] = &[
    "apple", "anchor", "banner", "basket", "bell", "bicycle", "blanket", "bottle", "bucket",
    "cabinet", "camera", "candle", "canoe", "carpet", "chair", "clock", "coat", "compass", "crown",
    "cup", "desk", "drum", "engine", "fan", "fence", "flag", "flute", "guitar", "hammer", "helmet",
    "jacket", "jar", "kettle", "key", "ladder", "lamp", "lantern", "letter", "map", "mirror",
    "notebook", "oven", "paddle", "pencil", "piano", "pillow", "plate", "quilt", "radio",
    "ribbon", "rope", "saddle", "scarf", "sculpture", "shovel", "statue", "stool", "suitcase",
    "sweater", "table", "teapot", "telescope", "tent", "ticket", "tractor", "trumpet", "umbrella",
    "vase", "violin", "wagon", "wallet", "whistle", "window", "wheel", "yacht", "zipper",
    "barrel", "bracelet", "button", "cushion",
];

pub const PLACES: &[&str] = &[
    "Paris", "Lisbon", "Oslo", "Cairo", "Lima", "Dublin", "Vienna", "Prague", "Madrid", "Berlin",
    "Tokyo", "Seoul", "Delhi", "Quito", "Nairobi", "Dakar", "Havana", "Boston", "Denver",
    "Austin", "Chicago", "Toronto", "Montreal", "Sydney", "Perth", "Auckland", "Helsinki",
    "Warsaw", "Rome", "Venice", "Geneva", "Zurich", "Munich", "Hamburg", "Porto", "Seville",
    "Krakow", "Riga", "Bergen", "Tunis",
];

pub const CONNECTORS: &[&str] = &["and", "while", "but", "after", "before", "because", "whereas"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub pairs: usize,
    pub seed: u64,
    /// Probability that a pair shares no fact at all.
    pub p_no_shared: f64,
    /// Probability that a fact carries a location.
    pub p_place: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            seed: 7,
            p_no_shared: 0.05,
            p_place: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Fact {
    subject: &'static str,
    verb: &'static str,
    adjective: &'static str,
    object: &'static str,
    place: Option<&'static str>,
}

impl Fact {
    fn text(&self) -> String {
        let mut s = format!("{} {} the {} {}", self.subject, self.verb, self.adjective, self.object);
        if let Some(p) = self.place {
            s.push_str(" in ");
            s.push_str(p);
        }
        s
    }

    fn content_words(&self) -> impl Iterator<Item = &'static str> {
        [self.subject, self.verb, self.adjective, self.object]
            .into_iter()
            .chain(self.place)
    }

    /// Order-free identity: the normalized token multiset.
    fn bag(&self) -> Vec<String> {
        let mut b: Vec<String> = tokenize(&self.text()).tokens.iter().map(|t| normalize_token(t)).collect();
        b.sort();
        b
    }
}

struct Generator {
    rng: ChaCha8Rng,
    config: SynthConfig,
    seen: HashSet<Vec<String>>,
}

impl Generator {
    /// A new corpus-unique fact avoiding `used` content words.
    fn fact(&mut self, used: &BTreeSet<&'static str>, subject: Option<&'static str>) -> Fact {
        loop {
            let f = Fact {
                subject: subject.unwrap_or_else(|| NAMES.choose(&mut self.rng).unwrap()),
                verb: VERBS.choose(&mut self.rng).unwrap(),
                adjective: ADJECTIVES.choose(&mut self.rng).unwrap(),
                object: OBJECTS.choose(&mut self.rng).unwrap(),
                place: self
                    .rng
                    .random_bool(self.config.p_place)
                    .then(|| *PLACES.choose(&mut self.rng).unwrap()),
            };
            let clash = f.content_words().any(|w| used.contains(w));
            if clash || !self.seen.insert(f.bag()) {
                continue;
            }
            return f;
        }
    }

    fn sentence(&mut self, facts: &[Fact]) -> String {
        let mut s = String::new();
        for (i, f) in facts.iter().enumerate() {
            if i > 0 {
                s.push_str(" , ");
                s.push_str(CONNECTORS.choose(&mut self.rng).unwrap());
                s.push(' ');
            }
            s.push_str(&f.text());
        }
        s.push_str(" .");
        s
    }

    fn pair(&mut self, id: u64) -> PairRecord {
        let shared_n = if self.rng.random_bool(self.config.p_no_shared) {
            0
        } else {
            self.rng.random_range(1..=2)
        };
        let n_a = self.rng.random_range(shared_n.max(2)..=3);
        let n_b = self.rng.random_range(shared_n.max(2)..=3);

        let mut used_a = BTreeSet::new();
        let mut used_b = BTreeSet::new();
        let mut shared = Vec::new();
        for _ in 0..shared_n {
            let both: BTreeSet<_> = used_a.union(&used_b).copied().collect();
            let f = self.fact(&both, None);
            used_a.extend(f.content_words());
            used_b.extend(f.content_words());
            shared.push(f);
        }
        let mut only_a = Vec::new();
        for _ in shared_n..n_a {
            let f = self.fact(&used_a, None);
            used_a.extend(f.content_words());
            only_a.push(f);
        }
        let mut only_b = Vec::new();
        for i in shared_n..n_b {
            // Reuse an a-only subject when B does not already mention it.
            let subject = only_a
                .get(i - shared_n)
                .map(|f| f.subject)
                .filter(|s| !used_b.contains(s));
            let mut guard = used_b.clone();
            if let Some(s) = subject {
                guard.remove(s);
            }
            let f = self.fact(&guard, subject);
            used_b.extend(f.content_words());
            only_b.push(f);
        }

        let mut side_a: Vec<(Fact, Option<usize>)> = shared
            .iter()
            .cloned()
            .enumerate()
            .map(|(k, f)| (f, Some(k)))
            .chain(only_a.into_iter().map(|f| (f, None)))
            .collect();
        let mut side_b: Vec<(Fact, Option<usize>)> = shared
            .into_iter()
            .enumerate()
            .map(|(k, f)| (f, Some(k)))
            .chain(only_b.into_iter().map(|f| (f, None)))
            .collect();
        side_a.shuffle(&mut self.rng);
        side_b.shuffle(&mut self.rng);

        let mut planted = Vec::new();
        for (i, (_, ka)) in side_a.iter().enumerate() {
            for (j, (_, kb)) in side_b.iter().enumerate() {
                if ka.is_some() && ka == kb {
                    planted.push((i, j));
                }
            }
        }
        let facts_a: Vec<Fact> = side_a.into_iter().map(|p| p.0).collect();
        let facts_b: Vec<Fact> = side_b.into_iter().map(|p| p.0).collect();
        PairRecord {
            id,
            sent_a: self.sentence(&facts_a),
            sent_b: self.sentence(&facts_b),
            props_a: facts_a.iter().map(|f| PropRecord::text(f.text())).collect(),
            props_b: facts_b.iter().map(|f| PropRecord::text(f.text())).collect(),
            positives: None,
            planted: Some(planted),
        }
    }
}

/// Raw (unaligned) pair records with planted positives.
pub fn generate(config: &SynthConfig) -> Result<Vec<PairRecord>> {
    if config.pairs == 0 {
        return Err(Error::InvalidArgument("pairs must be >= 1".into()));
    }
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        config: *config,
        seen: HashSet::new(),
    };
    let records: Vec<PairRecord> = (0..config.pairs as u64).map(|id| g.pair(id)).collect();
    for r in &records {
        check_contiguous_alignment(r)?;
    }
    Ok(records)
}

/// Each fact sits verbatim in its sentence; the aligner must find exactly
/// that span.
fn check_contiguous_alignment(r: &PairRecord) -> Result<()> {
    let cfg = AlignConfig::default();
    for (sent, props) in [(&r.sent_a, &r.props_a), (&r.sent_b, &r.props_b)] {
        let toks = tokenize(sent);
        for p in props {
            let ptoks = tokenize(&p.text).tokens;
            let start = toks
                .tokens
                .windows(ptoks.len())
                .position(|w| w == ptoks.as_slice())
                .ok_or_else(|| Error::InvalidArgument(format!("fact {:?} not in {sent:?}", p.text)))?;
            let want = BinaryMask::from_bools(
                &(0..toks.len())
                    .map(|i| (start..start + ptoks.len()).contains(&i))
                    .collect::<Vec<_>>(),
            );
            let got = proposition_to_mask(&p.text, &toks, &cfg)?;
            if got != want {
                return Err(Error::InvalidArgument(format!(
                    "record {}: fact {:?} aligned to {:?}",
                    r.id,
                    p.text,
                    got.bits()
                )));
            }
        }
    }
    Ok(())
}
