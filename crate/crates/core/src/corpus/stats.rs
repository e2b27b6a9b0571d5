use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{AnnotatedSentence, EntityType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub total_samples: usize,
    pub samples_with_entities: usize,
    pub samples_without_entities: usize,
    /// Mean length of `text` in Unicode scalar values.
    pub avg_text_length_chars: f64,
    /// Mean number of mentions (duplicates included) per sample.
    pub avg_entities_per_sample: f64,
    /// Number of samples with at least one mention of each type, canonical order.
    pub per_type_sample_counts: [usize; 7],
}

impl DatasetStats {
    pub fn per_type(&self, ty: EntityType) -> usize {
        self.per_type_sample_counts[ty.index()]
    }

    /// Plain-text table in the layout printed by `finlora stats`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<32}{}\n", "Total samples", self.total_samples));
        out.push_str(&format!("{:<32}{}\n", "Samples with entities", self.samples_with_entities));
        out.push_str(&format!("{:<32}{}\n", "Samples without entities", self.samples_without_entities));
        out.push_str(&format!("{:<32}{:.2} characters\n", "Average text length", self.avg_text_length_chars));
        out.push_str(&format!("{:<32}{:.2}\n", "Average entities per sample", self.avg_entities_per_sample));
        out.push_str("Samples per entity type\n");
        for ty in EntityType::ALL {
            out.push_str(&format!("  {:<30}{}\n", ty.as_str(), self.per_type(ty)));
        }
        out
    }
}

pub fn compute_stats(corpus: &[AnnotatedSentence]) -> DatasetStats {
    let total = corpus.len();
    let mut with_entities = 0;
    let mut chars = 0usize;
    let mut mentions = 0usize;
    let mut per_type = [0usize; 7];
    for s in corpus {
        chars += s.text.chars().count();
        let n = s.entities.total_mentions();
        mentions += n;
        if n > 0 {
            with_entities += 1;
        }
        for (ty, list) in s.entities.iter() {
            if !list.is_empty() {
                per_type[ty.index()] += 1;
            }
        }
    }
    let mean = |sum: usize| if total == 0 { 0.0 } else { sum as f64 / total as f64 };
    DatasetStats {
        total_samples: total,
        samples_with_entities: with_entities,
        samples_without_entities: total - with_entities,
        avg_text_length_chars: mean(chars),
        avg_entities_per_sample: mean(mentions),
        per_type_sample_counts: per_type,
    }
}

/// Writes `type,count` rows in canonical order.
pub fn emit_distribution(stats: &DatasetStats, path: &Path) -> Result<()> {
    let mut csv = String::from("type,count\n");
    for ty in EntityType::ALL {
        csv.push_str(&format!("{},{}\n", ty.as_str(), stats.per_type(ty)));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityMap;

    fn sentence(text: &str, entities: EntityMap) -> AnnotatedSentence {
        AnnotatedSentence {
            id: text.to_string(),
            text: text.to_string(),
            entities,
        }
    }

    #[test]
    fn empty_corpus_is_all_zero() {
        let s = compute_stats(&[]);
        assert_eq!(s.total_samples, 0);
        assert_eq!(s.avg_text_length_chars, 0.0);
        assert_eq!(s.avg_entities_per_sample, 0.0);
        assert_eq!(s.per_type_sample_counts, [0; 7]);
    }

    #[test]
    fn two_sentence_hand_case() {
        let corpus = [
            sentence("0123456789", EntityMap::new()),
            sentence(
                "0123456789abcdefghij",
                EntityMap::new().with(EntityType::Company, &["A", "A"]),
            ),
        ];
        let s = compute_stats(&corpus);
        assert_eq!(s.total_samples, 2);
        assert_eq!(s.samples_with_entities, 1);
        assert_eq!(s.samples_without_entities, 1);
        assert_eq!(s.avg_text_length_chars, 15.0);
        assert_eq!(s.avg_entities_per_sample, 1.0);
        // two mentions, one sample
        assert_eq!(s.per_type(EntityType::Company), 1);
    }

    #[test]
    fn length_counts_characters_not_bytes() {
        let s = compute_stats(&[sentence("€€", EntityMap::new())]);
        assert_eq!(s.avg_text_length_chars, 2.0);
    }

    #[test]
    fn distribution_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dist.csv");
        let stats = DatasetStats {
            total_samples: 1693,
            samples_with_entities: 1654,
            samples_without_entities: 39,
            avg_text_length_chars: 166.95,
            avg_entities_per_sample: 3.13,
            per_type_sample_counts: [1033, 888, 256, 421, 257, 226, 329],
        };
        emit_distribution(&stats, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "type,count");
        assert_eq!(lines[1], "Company,1033");
        assert_eq!(lines[7], "Quantity,329");

        emit_distribution(&compute_stats(&[]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().skip(1).filter(|l| l.ends_with(",0")).count(), 7);
    }

    #[test]
    fn unwritable_path_errors() {
        let err = emit_distribution(&compute_stats(&[]), Path::new("/nonexistent-dir/x.csv"));
        assert!(err.is_err());
    }
}
