//! Entity-level scoring of predicted dictionaries.
//!
//! Matching is exact on whitespace-normalized surface strings, case-sensitive,
//! with multiset semantics per type: a mention predicted twice only earns two
//! true positives if the gold list also contains it twice. This is stricter
//! than overlap-based schemes, so scores are only comparable with other
//! numbers computed under the same rule.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_output, AnnotatedSentence, EntityMap, EntityType, INSTRUCTION};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tensor::Scalar;
use crate::tokenizer::{decode, encode_prompt};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn gold(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Per-type true/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub per_type: [Counts; 7],
}

impl MatchCounts {
    pub fn get(&self, ty: EntityType) -> Counts {
        self.per_type[ty.index()]
    }

    pub fn total(&self) -> Counts {
        let mut t = Counts::default();
        for c in &self.per_type {
            t.add(c);
        }
        t
    }

    pub fn add(&mut self, other: &MatchCounts) {
        for (a, b) in self.per_type.iter_mut().zip(&other.per_type) {
            a.add(b);
        }
    }
}

impl Serialize for MatchCounts {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(8))?;
        for ty in EntityType::ALL {
            map.serialize_entry(ty.as_str(), &self.get(ty))?;
        }
        map.serialize_entry("total", &self.total())?;
        map.end()
    }
}

/// Collapses internal whitespace runs to one space and trims.
pub fn normalize_mention(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn match_example(gold: &EntityMap, pred: &EntityMap) -> MatchCounts {
    let mut out = MatchCounts::default();
    for ty in EntityType::ALL {
        let mut remaining: HashMap<String, usize> = HashMap::new();
        for g in gold.get(ty) {
            *remaining.entry(normalize_mention(g)).or_default() += 1;
        }
        let mut tp = 0;
        for p in pred.get(ty) {
            if let Some(n) = remaining.get_mut(&normalize_mention(p)) {
                if *n > 0 {
                    *n -= 1;
                    tp += 1;
                }
            }
        }
        out.per_type[ty.index()] = Counts {
            tp,
            fp: pred.get(ty).len() - tp,
            fn_: gold.get(ty).len() - tp,
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeReport {
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub metrics: Prf,
    /// Whether the type had any gold or predicted mention and so entered the
    /// macro average.
    pub in_macro: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub counts: MatchCounts,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub per_type: PerType,
    /// Types excluded from the macro mean because they never occurred.
    pub macro_excluded: Vec<EntityType>,
}

/// Per-type metrics keyed by type name in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct PerType(pub [TypeReport; 7]);

impl Serialize for PerType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(7))?;
        for ty in EntityType::ALL {
            map.serialize_entry(ty.as_str(), &self.0[ty.index()])?;
        }
        map.end()
    }
}

impl EvalReport {
    pub fn type_metrics(&self, ty: EntityType) -> Prf {
        self.per_type.0[ty.index()].metrics
    }
}

pub fn aggregate(all: &[MatchCounts]) -> EvalReport {
    let mut counts = MatchCounts::default();
    for c in all {
        counts.add(c);
    }
    let total = counts.total();
    let micro = total.prf();
    let per_type = EntityType::ALL.map(|ty| {
        let c = counts.get(ty);
        TypeReport {
            counts: c,
            metrics: c.prf(),
            in_macro: c.gold() + c.predicted() > 0,
        }
    });
    let active: Vec<&TypeReport> = per_type.iter().filter(|t| t.in_macro).collect();
    let macro_avg = if active.is_empty() {
        Prf::default()
    } else {
        let n = active.len() as f64;
        Prf {
            precision: active.iter().map(|t| t.metrics.precision).sum::<f64>() / n,
            recall: active.iter().map(|t| t.metrics.recall).sum::<f64>() / n,
            f1: active.iter().map(|t| t.metrics.f1).sum::<f64>() / n,
        }
    };
    let macro_excluded = EntityType::ALL
        .into_iter()
        .filter(|ty| !per_type[ty.index()].in_macro)
        .collect();
    EvalReport {
        counts,
        micro,
        macro_avg,
        per_type: PerType(per_type),
        macro_excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub id: String,
    pub generation: String,
    pub parsed: Option<EntityMap>,
    pub parse_ok: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Generation stopped at the token budget instead of EOS.
    pub budget_exhausted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Prompt plus generation never exceeds this many tokens.
    pub cutoff: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { cutoff: 400 }
    }
}

/// Greedy-generates a dictionary for every sentence and scores it. Parse
/// failures and budget exhaustion count as empty predictions.
pub fn evaluate_model<T: Scalar>(
    model: &Transformer<T>,
    test: &[AnnotatedSentence],
    opts: EvalOptions,
) -> Result<(EvalReport, Vec<ExampleRecord>)> {
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let limit = opts.cutoff.min(model.config.max_seq_len);
    let mut all = Vec::with_capacity(test.len());
    let mut records = Vec::with_capacity(test.len());
    for sentence in test {
        let prompt = encode_prompt(INSTRUCTION, &sentence.text);
        let (generation, budget_exhausted, error) = if prompt.len() >= limit {
            (String::new(), true, Some(format!("prompt of {} tokens leaves no generation budget", prompt.len())))
        } else {
            let g = model.generate_detailed(&prompt, limit - prompt.len())?;
            (decode(g.continuation()), !g.hit_eos, None)
        };
        let parsed = if budget_exhausted {
            None
        } else {
            parse_output(&generation).ok().map(|p| p.entities)
        };
        let empty = EntityMap::new();
        let counts = match_example(&sentence.entities, parsed.as_ref().unwrap_or(&empty));
        let total = counts.total();
        records.push(ExampleRecord {
            id: sentence.id.clone(),
            generation,
            parse_ok: parsed.is_some(),
            parsed,
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            budget_exhausted,
            error,
        });
        all.push(counts);
    }
    Ok((aggregate(&all), records))
}

/// Writes `metrics.csv` (micro P/R/F1 and macro-F1 per model) and
/// `per_type_f1.csv` (one F1 column per entity type) into `dir`.
pub fn emit_metric_figures(reports: &[(String, EvalReport)], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no reports to emit".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metrics = String::from("model,precision,recall,micro_f1,macro_f1\n");
    let mut per_type = String::from("model");
    for ty in EntityType::ALL {
        per_type.push(',');
        per_type.push_str(ty.as_str());
    }
    per_type.push('\n');
    for (name, r) in reports {
        metrics.push_str(&format!(
            "{name},{},{},{},{}\n",
            r.micro.precision, r.micro.recall, r.micro.f1, r.macro_avg.f1
        ));
        per_type.push_str(name);
        for ty in EntityType::ALL {
            per_type.push_str(&format!(",{}", r.type_metrics(ty).f1));
        }
        per_type.push('\n');
    }
    let p1 = dir.join("metrics.csv");
    fs::write(&p1, metrics).map_err(|e| Error::io(&p1, e))?;
    let p2 = dir.join("per_type_f1.csv");
    fs::write(&p2, per_type).map_err(|e| Error::io(&p2, e))
}
