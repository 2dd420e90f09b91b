//! Synthetic rewriting corpora with three recipe families:
//! pronoun-to-entity substitution (easy), prepositional-phrase insertion
//! from the history (medium) and clause appending built from several
//! history turns (hard).

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use qrw_core::corpus::{difficulty_score, write_corpus, Scheme, UtteranceRecord};
use qrw_core::metrics::{tokenize, BleuConfig};

use crate::{HarnessError, Result};

pub const RECIPES: [&str; 3] = ["easy", "medium", "hard"];
const MIN_PER_CLASS: usize = 30;
const MAX_ATTEMPTS: usize = 200;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const ORGS: [&str; 8] = ["ravens", "pilots", "comets", "foxes", "tigers", "owls", "sparks", "wolves"];
const OBJECTS: [&str; 8] = ["awards", "albums", "games", "songs", "titles", "medals", "shows", "books"];
const ROLES: [&str; 6] = ["singer", "drummer", "player", "coach", "writer", "actor"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Distinct person names.
    pub entities: usize,
    /// Distinct place names.
    pub fillers: usize,
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entities: 120,
            fillers: 24,
            train_per_class: 600,
            valid_per_class: 100,
            test_per_class: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("train_per_class", self.train_per_class),
            ("valid_per_class", self.valid_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if n < MIN_PER_CLASS {
                return Err(HarnessError::Config(format!("{name} must be at least {MIN_PER_CLASS}, got {n}")));
            }
        }
        if !(2..=4900).contains(&self.entities) || !(2..=4900).contains(&self.fillers) {
            return Err(HarnessError::Config("entities and fillers must be in 2..=4900".into()));
        }
        Ok(())
    }
}

/// Two consonant-vowel syllables, distinct for every index below 4900.
fn syllables(i: usize) -> String {
    let a = i % 70;
    let b = (i / 70 + 13 * a + 5) % 70;
    let syl = |k: usize| format!("{}{}", CONSONANTS[k % 14] as char, VOWELS[k / 14] as char);
    syl(a) + &syl(b)
}

fn entity_name(i: usize) -> String {
    syllables(i) + "n"
}

fn place_name(i: usize) -> String {
    syllables(i) + "ra"
}

/// Slot values of one dialogue.
struct Slots {
    entity: String,
    pronoun: &'static str,
    role: &'static str,
    org: &'static str,
    object: &'static str,
    home: String,
    tour: String,
    joined: u32,
    left: u32,
}

impl Slots {
    fn sample(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Self {
        let e = rng.random_range(0..spec.entities);
        let home = rng.random_range(0..spec.fillers);
        let mut tour = rng.random_range(0..spec.fillers - 1);
        if tour >= home {
            tour += 1;
        }
        let joined = rng.random_range(1980..1995);
        Self {
            entity: entity_name(e),
            pronoun: if e % 2 == 0 { "he" } else { "she" },
            role: ROLES.choose(rng).expect("non-empty"),
            org: ORGS.choose(rng).expect("non-empty"),
            object: OBJECTS.choose(rng).expect("non-empty"),
            home: place_name(home),
            tour: place_name(tour),
            joined,
            left: rng.random_range(joined + 1..=2000),
        }
    }

    fn history(&self) -> [String; 3] {
        [
            format!("{} is a {} from {}", self.entity, self.role, self.home),
            format!("{} joined the {} in {}", self.entity, self.org, self.joined),
            format!("{} left the {} in {} after the {} tour", self.entity, self.org, self.left, self.tour),
        ]
    }

    /// `(question, rewrite)` of template `t` in `recipe`.
    fn render(&self, recipe: usize, t: usize) -> (String, String) {
        let (e, pr, org, obj) = (&self.entity, self.pronoun, self.org, self.object);
        let (y1, y2, home, tour) = (self.joined, self.left, &self.home, &self.tour);
        match (recipe, t % 5) {
            (0, 0) => (format!("did {pr} win any {obj} ?"), format!("did {e} win any {obj} ?")),
            (0, 1) => (format!("where was {pr} born ?"), format!("where was {e} born ?")),
            (0, 2) => (
                format!("when did {pr} join the {org} ?"),
                format!("when did {e} join the {org} ?"),
            ),
            (0, 3) => (format!("what did {pr} do in {y1} ?"), format!("what did {e} do in {y1} ?")),
            (0, _) => (
                format!("is {pr} still with the {org} ?"),
                format!("is {e} still with the {org} ?"),
            ),
            (1, 0) => (
                format!("did {e} win any {obj} ?"),
                format!("did {e} win any {obj} with the {org} ?"),
            ),
            (1, 1) => (format!("when did {e} leave ?"), format!("when did {e} leave the {org} ?")),
            (1, 2) => (format!("where did {e} tour ?"), format!("where did {e} tour after {y1} ?")),
            (1, 3) => (
                format!("what did {e} play ?"),
                format!("what did {e} play with the {org} in {y1} ?"),
            ),
            (1, _) => (
                format!("did {e} record any {obj} ?"),
                format!("did {e} record any {obj} in {home} after {y1} ?"),
            ),
            (_, 0) => (
                "what happened next ?".into(),
                format!("what happened after {e} left the {org} in {y2} ?"),
            ),
            (_, 1) => (
                "why did that happen ?".into(),
                format!("why did {e} leave the {org} after the {tour} tour ?"),
            ),
            (_, 2) => (
                format!("what else did {pr} do ?"),
                format!("what else did {e} do with the {org} after {y1} ?"),
            ),
            (_, 3) => (
                "was it a big success ?".into(),
                format!("was the {tour} tour of the {org} a success ?"),
            ),
            (_, _) => (
                "how did fans take it ?".into(),
                format!("how did the fans react when {e} left the {org} ?"),
            ),
        }
    }
}

fn build_record(id: String, slots: &Slots, recipe: usize, template: usize) -> UtteranceRecord {
    let tok = |s: &str| tokenize(s).expect("templates are non-empty");
    let (q, rw) = slots.render(recipe, template);
    let history = slots.history().iter().map(|h| tok(h)).collect();
    UtteranceRecord::new(id, 3, tok(&q), history, tok(&rw), Some(RECIPES[recipe].to_owned()))
        .expect("templates give valid records")
}

/// Generated splits, each holding the same number of records per recipe.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<UtteranceRecord>,
    pub valid: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    /// Candidates rejected because their scored class missed their recipe.
    pub resampled: usize,
}

impl SyntheticCorpus {
    pub fn splits(&self) -> [(&'static str, &[UtteranceRecord]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    /// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, records) in self.splits() {
            write_corpus(&dir.join(format!("{name}.jsonl")), records)?;
        }
        Ok(())
    }
}

/// Generates the three splits. Every record's difficulty class under the
/// default scheme (pronoun rule on) matches its recipe; candidates that
/// miss are resampled.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let scheme = Scheme::table3();
    let bleu = BleuConfig::default();
    let mut resampled = 0;
    let mut split = |name: &str, per_class: usize, stream: u64| -> Result<Vec<UtteranceRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut plan: Vec<usize> = (0..RECIPES.len()).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        plan.shuffle(&mut rng);
        let mut out = Vec::with_capacity(plan.len());
        for (i, &recipe) in plan.iter().enumerate() {
            let id = format!("syn{}-{name}-{i:05}", spec.seed);
            let mut attempts = 0;
            let rec = loop {
                let slots = Slots::sample(&mut rng, spec);
                let rec = build_record(id.clone(), &slots, recipe, rng.random_range(0..5));
                let z = difficulty_score(&rec, true, &bleu)?;
                if scheme.classify(z).map(|c| scheme.labels()[c].clone()).as_deref() == Some(RECIPES[recipe]) {
                    break rec;
                }
                resampled += 1;
                attempts += 1;
                if attempts == MAX_ATTEMPTS {
                    return Err(HarnessError::Config(format!(
                        "recipe {} never produced a matching record",
                        RECIPES[recipe]
                    )));
                }
            };
            out.push(rec);
        }
        Ok(out)
    };
    let train = split("train", spec.train_per_class, 1)?;
    let valid = split("valid", spec.valid_per_class, 2)?;
    let test = split("test", spec.test_per_class, 3)?;
    Ok(SyntheticCorpus {
        train,
        valid,
        test,
        resampled,
    })
}
