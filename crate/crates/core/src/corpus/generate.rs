//! Templated dialogue generator.
//!
//! Every dialogue is one episode from one of four families. Each family
//! introduces entities, refers back to one of them with third-person pronouns
//! and has a summary naming that entity explicitly. In the `purchase` and
//! `visit` families the pronoun could refer to either of two candidates and
//! only the gold cluster tells which one was meant.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize_dialogue, CharSpan, Corpus, DialogueSample, Split, Turn};
use crate::error::{ensure, Error, Result};

/// Third-person pronouns emitted by the generator. Each occurrence belongs to
/// exactly one cluster.
pub const PRONOUNS: [&str; 3] = ["he", "she", "it"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            validation: 200,
            test: 200,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lexicon {
    pub female_names: Vec<String>,
    pub male_names: Vec<String>,
    pub objects: Vec<String>,
    pub places: Vec<String>,
    pub adjectives: Vec<String>,
    pub days: Vec<String>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            female_names: words("amy emma lucy sara kate nina olivia julia mia zoe"),
            male_names: words("bob tom jack mark paul leo sam adam ben dan"),
            objects: words(
                "lamp chair book bike phone laptop camera guitar table clock \
                 mirror sofa kettle radio jacket watch bag printer plant rug",
            ),
            places: words(
                "kitchen garage office garden attic basement bedroom hallway studio cellar",
            ),
            adjectives: words("new old heavy cheap broken small red blue expensive fragile"),
            days: words("monday tuesday wednesday thursday friday saturday sunday"),
        }
    }
}

impl Lexicon {
    fn validate(&self) -> Result<()> {
        let lists = [
            ("female_names", &self.female_names, 4),
            ("male_names", &self.male_names, 4),
            ("objects", &self.objects, 2),
            ("places", &self.places, 1),
            ("adjectives", &self.adjectives, 1),
            ("days", &self.days, 1),
        ];
        for (name, list, min) in lists {
            ensure!(
                list.len() >= min,
                Contract,
                "lexicon list {name} has {} entries, need at least {min}",
                list.len()
            );
            for w in list.iter() {
                ensure!(
                    !w.is_empty() && w.chars().all(|c| c.is_alphanumeric()),
                    Contract,
                    "lexicon entry {w:?} in {name} must be a single alphanumeric word"
                );
            }
        }
        let mut distinct = std::collections::HashSet::new();
        for (name, list, _) in lists {
            for w in list.iter() {
                ensure!(
                    distinct.insert(w.to_lowercase()),
                    Contract,
                    "lexicon entry {w:?} in {name} appears twice"
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub sizes: SplitSizes,
    pub lexicon: Lexicon,
    /// Upper bound on dialogue length in tokens.
    pub max_dialogue_tokens: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: SplitSizes::default(),
            lexicon: Lexicon::default(),
            max_dialogue_tokens: 64,
        }
    }
}

enum Piece {
    Word(String),
    Mention(usize, String),
}

fn w(s: &str) -> Piece {
    Piece::Word(s.to_string())
}

fn m(cluster: usize, s: &str) -> Piece {
    Piece::Mention(cluster, s.to_string())
}

fn is_punct(s: &str) -> bool {
    matches!(s, "." | "," | "?" | "!")
}

#[derive(Default)]
struct Draft {
    turns: Vec<(String, Vec<Piece>)>,
    summary: Vec<String>,
}

impl Draft {
    fn say(&mut self, speaker: &str, pieces: Vec<Piece>) {
        self.turns.push((speaker.to_string(), pieces));
    }

    fn summarize(&mut self, text: String) {
        self.summary.push(text);
    }

    fn finish(self, id: String, split: Split) -> DialogueSample {
        let mut turns = Vec::new();
        let mut clusters: BTreeMap<usize, Vec<CharSpan>> = BTreeMap::new();
        let mut offset = 0;
        for (speaker, pieces) in self.turns {
            let mut text = String::new();
            let line_start = offset + speaker.chars().count() + 2;
            for piece in pieces {
                let (word, cluster) = match piece {
                    Piece::Word(s) => (s, None),
                    Piece::Mention(c, s) => (s, Some(c)),
                };
                if !text.is_empty() && !is_punct(&word) {
                    text.push(' ');
                }
                let start = line_start + text.chars().count();
                text.push_str(&word);
                if let Some(c) = cluster {
                    clusters.entry(c).or_default().push(CharSpan {
                        start_char: start,
                        end_char: start + word.chars().count(),
                    });
                }
            }
            offset = line_start + text.chars().count() + 1;
            turns.push(Turn { speaker, text });
        }
        DialogueSample {
            id,
            turns,
            summary: self.summary.join(" "),
            clusters: clusters.into_values().filter(|c| c.len() >= 2).collect(),
            split,
        }
    }
}

struct Picker<'a> {
    rng: ChaCha8Rng,
    lex: &'a Lexicon,
}

impl Picker<'_> {
    fn one(&mut self, list: &[String]) -> String {
        list.choose(&mut self.rng)
            .expect("validated non-empty")
            .clone()
    }

    fn distinct(&mut self, list: &[String], n: usize, exclude: &[String]) -> Vec<String> {
        let pool: Vec<&String> = list.iter().filter(|x| !exclude.contains(x)).collect();
        pool.choose_multiple(&mut self.rng, n)
            .map(|s| (*s).clone())
            .collect()
    }

    fn coin(&mut self) -> bool {
        self.rng.gen_bool(0.5)
    }

    fn names(&self) -> Vec<String> {
        let mut all = self.lex.female_names.clone();
        all.extend(self.lex.male_names.iter().cloned());
        all
    }

    fn gender(&self, name: &str) -> &'static str {
        if self.lex.female_names.iter().any(|n| n == name) {
            "she"
        } else {
            "he"
        }
    }

    fn dialogue(&mut self) -> Draft {
        let speakers = self.distinct(&self.names(), 2, &[]);
        let (x, y) = (speakers[0].clone(), speakers[1].clone());
        let mut d = Draft::default();
        if self.coin() {
            d.say(&y, vec![w("hi"), w(&x), w("!")]);
            d.say(&x, vec![w("hey"), w(&y), w(".")]);
        }
        match self.rng.gen_range(0..4) {
            0 => self.purchase(&mut d, &x, &y),
            1 => self.visit(&mut d, &x, &y, &speakers),
            2 => self.call(&mut d, &x, &y, &speakers),
            _ => self.meeting(&mut d, &x, &y, &speakers),
        }
        let y_silent = d.turns.iter().all(|(s, _)| *s != y);
        if self.coin() || y_silent {
            let closing = match self.rng.gen_range(0..3) {
                0 => vec![w("ok"), w(","), w("see"), w("you"), w("later"), w(".")],
                1 => vec![w("great"), w(","), w("thanks"), w("!")],
                _ => vec![w("cool"), w(".")],
            };
            d.say(&y, closing);
        }
        d
    }

    fn purchase(&mut self, d: &mut Draft, x: &str, y: &str) {
        let objs = self.distinct(&self.lex.objects, 2, &[]);
        let k = self.rng.gen_range(0..2);
        let place = self.one(&self.lex.places);
        let c = 0;
        let obj = |i: usize| if i == k { m(c, &objs[i]) } else { w(&objs[i]) };
        d.say(
            x,
            vec![
                w("i"),
                w("bought"),
                w("a"),
                obj(0),
                w("and"),
                w("a"),
                obj(1),
                w("today"),
                w("."),
            ],
        );
        if self.coin() {
            d.say(
                y,
                vec![w("where"), w("did"), w("you"), w("put"), m(c, "it"), w("?")],
            );
        }
        d.say(
            x,
            vec![
                w("i"),
                w("put"),
                m(c, "it"),
                w("in"),
                w("the"),
                w(&place),
                w("."),
            ],
        );
        d.summarize(format!(
            "{x} bought a {} and a {} and put the {} in the {place}.",
            objs[0], objs[1], objs[k]
        ));
        if self.coin() {
            let adj = self.one(&self.lex.adjectives);
            d.say(y, vec![w("is"), m(c, "it"), w(&adj), w("?")]);
            d.say(
                x,
                vec![w("yes"), w(","), m(c, "it"), w("is"), w(&adj), w(".")],
            );
            d.summarize(format!("the {} is {adj}.", objs[k]));
        }
    }

    fn visit(&mut self, d: &mut Draft, x: &str, y: &str, speakers: &[String]) {
        let pool = if self.coin() {
            self.lex.female_names.clone()
        } else {
            self.lex.male_names.clone()
        };
        let people = self.distinct(&pool, 2, speakers);
        let k = self.rng.gen_range(0..2);
        let pron = self.gender(&people[k]);
        let obj = self.one(&self.lex.objects);
        let c = 0;
        let person = |i: usize| {
            if i == k {
                m(c, &people[i])
            } else {
                w(&people[i])
            }
        };
        d.say(
            x,
            vec![
                person(0),
                w("and"),
                person(1),
                w("visited"),
                w("me"),
                w("yesterday"),
                w("."),
            ],
        );
        if self.coin() {
            d.say(y, vec![w("what"), w("did"), m(c, pron), w("bring"), w("?")]);
        }
        d.say(x, vec![m(c, pron), w("brought"), w("a"), w(&obj), w(".")]);
        d.summarize(format!(
            "{} and {} visited {x}. {} brought a {obj}.",
            people[0], people[1], people[k]
        ));
        if self.coin() {
            d.say(y, vec![w("did"), m(c, pron), w("stay"), w("long"), w("?")]);
            d.say(
                x,
                vec![w("no"), w(","), m(c, pron), w("left"), w("early"), w(".")],
            );
            d.summarize(format!("{} left early.", people[k]));
        }
    }

    fn call(&mut self, d: &mut Draft, x: &str, y: &str, speakers: &[String]) {
        let p = self.distinct(&self.names(), 1, speakers).remove(0);
        let pron = self.gender(&p);
        let obj = self.one(&self.lex.objects);
        let c = 0;
        d.say(
            x,
            vec![
                m(c, &p),
                w("called"),
                w("me"),
                w("this"),
                w("morning"),
                w("."),
            ],
        );
        if self.coin() {
            d.say(y, vec![w("what"), w("did"), m(c, pron), w("want"), w("?")]);
        }
        d.say(
            x,
            vec![
                m(c, pron),
                w("wants"),
                w("to"),
                w("borrow"),
                w("your"),
                w(&obj),
                w("."),
            ],
        );
        d.summarize(format!(
            "{p} called {x}. {p} wants to borrow a {obj} from {y}."
        ));
        if self.coin() {
            let day = self.one(&self.lex.days);
            d.say(y, vec![w("is"), m(c, pron), w("coming"), w("over"), w("?")]);
            d.say(
                x,
                vec![
                    w("yes"),
                    w(","),
                    m(c, pron),
                    w("will"),
                    w("come"),
                    w("on"),
                    w(&day),
                    w("."),
                ],
            );
            d.summarize(format!("{p} will come on {day}."));
        }
    }

    fn meeting(&mut self, d: &mut Draft, x: &str, y: &str, speakers: &[String]) {
        let mut people = [
            self.distinct(&self.lex.female_names, 1, speakers).remove(0),
            self.distinct(&self.lex.male_names, 1, speakers).remove(0),
        ];
        people.shuffle(&mut self.rng);
        let k = self.rng.gen_range(0..2);
        let pron = self.gender(&people[k]);
        let place = self.one(&self.lex.places);
        let obj = self.one(&self.lex.objects);
        let c = 0;
        let person = |i: usize| {
            if i == k {
                m(c, &people[i])
            } else {
                w(&people[i])
            }
        };
        d.say(
            x,
            vec![
                w("i"),
                w("met"),
                person(0),
                w("and"),
                person(1),
                w("at"),
                w("the"),
                w(&place),
                w("."),
            ],
        );
        if self.coin() {
            d.say(y, vec![w("how"), w("is"), m(c, pron), w("?")]);
        }
        d.say(
            x,
            vec![
                m(c, pron),
                w("is"),
                w("looking"),
                w("for"),
                w("a"),
                w(&obj),
                w("."),
            ],
        );
        d.summarize(format!(
            "{x} met {} and {} at the {place}. {} is looking for a {obj}.",
            people[0], people[1], people[k]
        ));
        if self.coin() {
            let day = self.one(&self.lex.days);
            d.say(y, vec![w("does"), m(c, pron), w("need"), w("help"), w("?")]);
            d.say(
                x,
                vec![
                    w("yes"),
                    w(","),
                    m(c, pron),
                    w("needs"),
                    w("help"),
                    w("on"),
                    w(&day),
                    w("."),
                ],
            );
            d.summarize(format!("{} needs help on {day}.", people[k]));
        }
    }
}

/// Generates train, validation and test splits, in that order, from one
/// seeded stream. Ids are `<split>-<index>`.
pub fn generate(config: &GeneratorConfig) -> Result<Corpus> {
    config.lexicon.validate()?;
    for split in Split::ALL {
        ensure!(
            config.sizes.get(split) >= 1,
            Contract,
            "split {split} must have at least one sample"
        );
    }
    let mut picker = Picker {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        lex: &config.lexicon,
    };
    let mut samples = Vec::new();
    for split in Split::ALL {
        for i in 0..config.sizes.get(split) {
            let id = format!("{split}-{i:05}");
            let sample = (0..100)
                .map(|_| picker.dialogue().finish(id.clone(), split))
                .find(|s| tokenize_dialogue(&s.render()).len() <= config.max_dialogue_tokens)
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "no dialogue fits in {} tokens",
                        config.max_dialogue_tokens
                    ))
                })?;
            samples.push(sample);
        }
    }
    Corpus::new(samples)
}
