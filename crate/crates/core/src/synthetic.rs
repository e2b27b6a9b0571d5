//! Seeded template generator for small financial-NER corpora.
//!
//! Sentences are assembled from fixed templates whose slots are filled from
//! per-type surface lists; the gold map lists every filled slot under its type
//! in order of appearance. Text uses the space-separated punctuation style of
//! tokenized newswire ("January 11 , 2012 , Regions ...").

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotatedSentence, EntityMap, EntityType};

const COMPANIES: &[&str] = &[
    "Regions",
    "Morgan Keegan",
    "Northwind Capital",
    "Blue Ridge Bancorp",
    "Apex Energy",
    "Summit Financial Group",
    "Harbor Trust",
    "Granite Partners",
    "Vista Insurance",
    "Lakeside Holdings , Inc.",
    "Orion Semiconductor",
    "Crescent Bank",
];
const DATES: &[&str] = &[
    "January 11 , 2012",
    "March 3 , 2015",
    "June 30 , 2018",
    "September 14 , 2020",
    "December 31 , 2019",
    "April 2 , 2016",
    "fiscal 2021",
    "the second quarter of 2017",
];
const LOCATIONS: &[&str] = &[
    "New York",
    "Chicago",
    "London",
    "Texas",
    "Hong Kong",
    "Ohio",
    "Frankfurt",
    "Singapore",
];
const MONEY: &[&str] = &[
    "$ 2.5 million",
    "$ 40 billion",
    "$ 120 million",
    "$ 3.75 per share",
    "$ 18 million",
    "$ 950,000",
    "$ 1.1 billion",
];
const PEOPLE: &[&str] = &[
    "John Smith",
    "Mary Chen",
    "David Alvarez",
    "Susan Park",
    "Robert King",
    "Linda Osei",
    "James Carter",
];
const PRODUCTS: &[&str] = &[
    "CloudSuite",
    "PrimeCard",
    "Falcon X2",
    "SmartLedger",
    "EcoDrive",
    "Titan Router",
];
const QUANTITIES: &[&str] = &[
    "10 %",
    "25 percent",
    "3,000 shares",
    "1.2 million units",
    "7 %",
    "500 employees",
    "40 percent",
];

fn pool(ty: EntityType) -> &'static [&'static str] {
    match ty {
        EntityType::Company => COMPANIES,
        EntityType::Date => DATES,
        EntityType::Location => LOCATIONS,
        EntityType::Money => MONEY,
        EntityType::Person => PEOPLE,
        EntityType::Product => PRODUCTS,
        EntityType::Quantity => QUANTITIES,
    }
}

/// `{C}` Company, `{D}` Date, `{L}` Location, `{M}` Money, `{P}` Person,
/// `{R}` Product, `{Q}` Quantity.
const TEMPLATES: &[&str] = &[
    "On {D} , {C} entered into a stock purchase agreement to sell {C} to {C} .",
    "{P} , chief executive of {C} , said revenue rose {Q} in {D} .",
    "{C} reported net income of {M} for {D} .",
    "{C} opened a new regional office in {L} .",
    "{C} launched {R} in {L} on {D} .",
    "The board approved a quarterly dividend of {M} .",
    "Shares of {C} fell {Q} after {P} resigned .",
    "{C} acquired {Q} of {C} for {M} .",
    "{P} will join {C} as chief financial officer on {D} .",
    "Sales of {R} grew {Q} , according to {C} .",
    "{C} agreed to pay {M} to settle claims in {L} .",
    "The company cut {Q} of its workforce in {L} .",
    "Management reviewed the results of operations with the audit committee .",
    "No material changes were made to the disclosure controls during the period .",
];

fn fill(template: &str, rng: &mut ChaCha8Rng) -> (String, EntityMap) {
    let mut text = String::with_capacity(template.len() + 32);
    let mut entities = EntityMap::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("templates are well formed");
        let ty = match &rest[open + 1..close] {
            "C" => EntityType::Company,
            "D" => EntityType::Date,
            "L" => EntityType::Location,
            "M" => EntityType::Money,
            "P" => EntityType::Person,
            "R" => EntityType::Product,
            "Q" => EntityType::Quantity,
            other => unreachable!("unknown slot {other}"),
        };
        // distinct mentions of the same type within a sentence
        let used = entities.get(ty).to_vec();
        let choices: Vec<&str> = pool(ty).iter().copied().filter(|c| !used.iter().any(|u| u == c)).collect();
        let pick = *choices.choose(rng).expect("pools are larger than any template's slot count");
        text.push_str(pick);
        entities.push(ty, pick);
        rest = &rest[close + 1..];
    }
    text.push_str(rest);
    (text, entities)
}

/// `n` sentences with ids `syn-0000`, `syn-0001`, ...
pub fn generate(n: usize, seed: u64) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            let (text, entities) = fill(template, &mut rng);
            AnnotatedSentence {
                id: format!("syn-{i:04}"),
                text,
                entities,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = generate(40, 5);
        assert_eq!(a, generate(40, 5));
        assert_ne!(a, generate(40, 6));
        for s in &a {
            s.validate().unwrap();
            for (_, mentions) in s.entities.iter() {
                for m in mentions {
                    assert!(s.text.contains(m.as_str()), "{m} not in {}", s.text);
                }
            }
        }
    }

    #[test]
    fn covers_every_type_and_empty_sentences() {
        let corpus = generate(200, 1);
        for ty in EntityType::ALL {
            assert!(corpus.iter().any(|s| !s.entities.get(ty).is_empty()), "{ty}");
        }
        assert!(corpus.iter().any(|s| s.entities.is_empty()));
    }

    #[test]
    fn slot_mentions_are_distinct_within_a_sentence() {
        for s in generate(100, 2) {
            let companies = s.entities.get(EntityType::Company);
            let mut dedup = companies.to_vec();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), companies.len());
        }
    }
}
