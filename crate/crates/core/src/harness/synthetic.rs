//! Seeded generator of small multistep QA examples with gold
//! decompositions, supporting-fact labels and answer-span tags.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::{ExampleRecord, QdmrSource};
use super::HarnessError;
use crate::text::clean_word;

const TEAMS: &[&str] = &[
    "Bears", "Hawks", "Lions", "Tigers", "Eagles", "Sharks", "Wolves", "Falcons", "Panthers", "Ravens",
    "Bulls", "Rams", "Colts", "Jets", "Owls", "Foxes", "Otters", "Bison", "Cobras", "Vipers",
];
const FIRST_NAMES: &[&str] = &[
    "Ada", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas", "Kira",
    "Liam", "Mira", "Nils", "Olga", "Pavel", "Rosa", "Stefan", "Tara", "Viktor",
];
const LAST_NAMES: &[&str] = &[
    "Brook", "Castell", "Dorn", "Ekberg", "Falk", "Grant", "Holm", "Ivers", "Janssen", "Kovac", "Lind",
    "Moreau", "Novak", "Ortiz", "Petrov", "Quist", "Rask", "Sorel", "Thorn", "Vance",
];
const CITIES: &[&str] = &[
    "Lyon", "Porto", "Bergen", "Graz", "Ghent", "Split", "Malmo", "Turku", "Krakow", "Brno", "Aarhus",
    "Seville", "Bologna", "Leipzig", "Utrecht", "Tartu", "Kaunas", "Cork", "Basel", "Zadar",
];
const COUNTRIES: &[&str] = &[
    "France", "Portugal", "Norway", "Austria", "Belgium", "Croatia", "Sweden", "Finland", "Poland",
    "Czechia", "Denmark", "Spain", "Italy", "Germany", "Netherlands", "Estonia", "Lithuania", "Ireland",
    "Switzerland", "Slovenia",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    NumericDiff,
    NumericSum,
    NumericMax,
    TwoHop,
    Lookup,
    /// Diff, sum, max and two-hop examples drawn uniformly.
    Mixed,
    /// As `Mixed`, with facts phrased differently from the other recipes.
    Heldout,
}

impl Recipe {
    pub const ALL: [Recipe; 7] = [
        Recipe::NumericDiff,
        Recipe::NumericSum,
        Recipe::NumericMax,
        Recipe::TwoHop,
        Recipe::Lookup,
        Recipe::Mixed,
        Recipe::Heldout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::NumericDiff => "numeric-diff",
            Recipe::NumericSum => "numeric-sum",
            Recipe::NumericMax => "numeric-max",
            Recipe::TwoHop => "2hop",
            Recipe::Lookup => "lookup",
            Recipe::Mixed => "mixed",
            Recipe::Heldout => "heldout",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| HarnessError::UnknownRecipe(s.to_string()))
    }
}

/// Fact phrasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Standard,
    Shifted,
}

fn score_fact(style: Style, team: &str, points: u32) -> String {
    match style {
        Style::Standard => format!("The {team} scored {points} points."),
        Style::Shifted => format!("The {team} finished the game with {points} points."),
    }
}

fn birth_fact(style: Style, person: &str, city: &str) -> String {
    match style {
        Style::Standard => format!("{person} was born in {city}."),
        Style::Shifted => format!("{person} is a native of {city}."),
    }
}

fn location_fact(style: Style, city: &str, country: &str) -> String {
    match style {
        Style::Standard => format!("{city} is located in {country}."),
        Style::Shifted => format!("{city} lies in {country}."),
    }
}

struct Draft {
    question: String,
    qdmr: String,
    answer: String,
    /// (sentence, supports the answer)
    facts: Vec<(String, bool)>,
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str], n: usize) -> Vec<&'a str> {
    pool.choose_multiple(rng, n).copied().collect()
}

/// `n` distinct point totals.
fn points<R: Rng>(rng: &mut R, n: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (3..=60).collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

#[derive(Clone, Copy)]
enum NumericKind {
    Diff,
    Sum,
    Max,
    Lookup,
}

fn numeric<R: Rng>(rng: &mut R, kind: NumericKind, style: Style) -> Draft {
    let teams = pick(rng, TEAMS, 4);
    let mut pts = points(rng, 4);
    if matches!(kind, NumericKind::Diff) && pts[1] < pts[0] {
        pts.swap(0, 1);
    }
    let (a, b) = (teams[0], teams[1]);
    let (pa, pb) = (pts[0], pts[1]);
    let lookup = |t: &str| format!("return points scored by the {t}");
    let (question, qdmr, answer) = match kind {
        NumericKind::Diff => (
            format!("How many more points did the {b} score than the {a}?"),
            format!("{}; {}; return difference of #2 and #1", lookup(a), lookup(b)),
            (pb - pa).to_string(),
        ),
        NumericKind::Sum => (
            format!("How many points did the {a} and the {b} score in total?"),
            format!("{}; {}; return sum of #1 and #2", lookup(a), lookup(b)),
            (pa + pb).to_string(),
        ),
        NumericKind::Max => (
            format!("What was the highest score between the {a} and the {b}?"),
            format!("{}; {}; return the highest of #1 and #2", lookup(a), lookup(b)),
            pa.max(pb).to_string(),
        ),
        NumericKind::Lookup => (
            format!("How many points did the {a} score?"),
            lookup(a),
            pa.to_string(),
        ),
    };
    let used = if matches!(kind, NumericKind::Lookup) { 1 } else { 2 };
    let facts = teams
        .iter()
        .zip(&pts)
        .enumerate()
        .map(|(i, (t, p))| (score_fact(style, t, *p), i < used))
        .collect();
    Draft {
        question,
        qdmr,
        answer,
        facts,
    }
}

fn two_hop<R: Rng>(rng: &mut R, style: Style) -> Draft {
    let first = pick(rng, FIRST_NAMES, 2);
    let last = pick(rng, LAST_NAMES, 2);
    let cities = pick(rng, CITIES, 3);
    let countries = pick(rng, COUNTRIES, 3);
    let person = format!("{} {}", first[0], last[0]);
    let other = format!("{} {}", first[1], last[1]);
    let facts = vec![
        (birth_fact(style, &person, cities[0]), true),
        (location_fact(style, cities[0], countries[0]), true),
        (birth_fact(style, &other, cities[1]), false),
        (location_fact(style, cities[1], countries[1]), false),
        (location_fact(style, cities[2], countries[2]), false),
    ];
    Draft {
        question: format!("In which country was {person} born?"),
        qdmr: format!("return the city where {person} was born; return the country where #1 is located"),
        answer: countries[0].to_string(),
        facts,
    }
}

/// BIO tags over whitespace tokens for the first occurrence of `answer`
/// inside a supporting sentence.
fn span_tags(facts: &[(String, bool)], answer: &str) -> Vec<u8> {
    let want: Vec<String> = answer.split_whitespace().map(clean_word).collect();
    let mut tags = Vec::new();
    let mut found = false;
    for (sentence, supporting) in facts {
        let words: Vec<String> = sentence.split_whitespace().map(clean_word).collect();
        let start = tags.len();
        tags.extend(std::iter::repeat_n(0u8, words.len()));
        if found || !supporting || want.is_empty() {
            continue;
        }
        if let Some(pos) = words.windows(want.len()).position(|w| w == want.as_slice()) {
            tags[start + pos] = 1;
            for t in &mut tags[start + pos + 1..start + pos + want.len()] {
                *t = 2;
            }
            found = true;
        }
    }
    tags
}

/// Deterministic for a given `(seed, count, recipe)`.
pub fn generate_synthetic(seed: u64, count: usize, recipe: Recipe) -> Result<Vec<ExampleRecord>, HarnessError> {
    if count == 0 {
        return Err(HarnessError::EmptyDataset("requested zero examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = if recipe == Recipe::Heldout {
        Style::Shifted
    } else {
        Style::Standard
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut draft = match recipe {
            Recipe::NumericDiff => numeric(&mut rng, NumericKind::Diff, style),
            Recipe::NumericSum => numeric(&mut rng, NumericKind::Sum, style),
            Recipe::NumericMax => numeric(&mut rng, NumericKind::Max, style),
            Recipe::Lookup => numeric(&mut rng, NumericKind::Lookup, style),
            Recipe::TwoHop => two_hop(&mut rng, style),
            Recipe::Mixed | Recipe::Heldout => match rng.gen_range(0..4) {
                0 => numeric(&mut rng, NumericKind::Diff, style),
                1 => numeric(&mut rng, NumericKind::Sum, style),
                2 => numeric(&mut rng, NumericKind::Max, style),
                _ => two_hop(&mut rng, style),
            },
        };
        draft.facts.shuffle(&mut rng);
        let context = draft.facts.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join(" ");
        out.push(ExampleRecord {
            id: format!("{}-{seed}-{i}", recipe.name()),
            question: draft.question,
            context,
            span_labels: Some(span_tags(&draft.facts, &draft.answer)),
            sf_labels: Some(draft.facts.iter().map(|(_, s)| *s).collect()),
            answer: draft.answer,
            qdmr: Some(draft.qdmr),
            qdmr_source: QdmrSource::Gold,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_recipe_shape() {
        let recs = generate_synthetic(7, 20, Recipe::NumericDiff).unwrap();
        for r in &recs {
            let d = r.decomposition().unwrap();
            assert_eq!(d.len(), 3);
            assert!(r.qdmr.as_ref().unwrap().ends_with("return difference of #2 and #1"));
            assert!(r.answer.parse::<u32>().unwrap() > 0);
            assert_eq!(r.sf_labels.as_ref().unwrap().iter().filter(|&&b| b).count(), 2);
            assert_eq!(
                r.span_labels.as_ref().unwrap().len(),
                r.context.split_whitespace().count()
            );
        }
    }

    #[test]
    fn deterministic_and_recipe_names() {
        assert_eq!(
            generate_synthetic(1, 30, Recipe::Mixed).unwrap(),
            generate_synthetic(1, 30, Recipe::Mixed).unwrap()
        );
        assert_ne!(
            generate_synthetic(1, 30, Recipe::Mixed).unwrap(),
            generate_synthetic(2, 30, Recipe::Mixed).unwrap()
        );
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        assert!(matches!("3hop".parse::<Recipe>(), Err(HarnessError::UnknownRecipe(_))));
    }

    #[test]
    fn span_tags_mark_supporting_occurrence() {
        let facts = vec![
            ("Lyon lies in France.".to_string(), false),
            ("Porto lies in New France.".to_string(), true),
        ];
        assert_eq!(span_tags(&facts, "France"), vec![0, 0, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(span_tags(&facts, "New France"), vec![0, 0, 0, 0, 0, 0, 0, 1, 2]);
    }
}
