//! Hallucination and coverage metrics.
//!
//! Every metric is a ratio of integer counts. The count structs expose the
//! exact rational value as well as the `f64` one; a zero denominator yields
//! zero.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::entities::{EntitySet, EntityVocabulary};
use crate::error::{Error, Result};

/// Entity sets behind one generated caption.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub generated: EntitySet,
    pub ground_truth: EntitySet,
    #[serde(default)]
    pub retrieved: EntitySet,
}

impl EvalInstance {
    /// Extracts all three sets from raw captions; ground truth is the union
    /// over the references.
    pub fn from_captions<'a>(
        vocab: &EntityVocabulary,
        generated: &str,
        references: impl IntoIterator<Item = &'a str>,
        retrieved: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        EvalInstance {
            generated: vocab.extract(generated),
            ground_truth: vocab.extract_all(references),
            retrieved: vocab.extract_all(retrieved),
        }
    }

    /// Generated entities missing from the ground truth.
    pub fn hallucinated(&self) -> impl Iterator<Item = &String> {
        self.generated.difference(&self.ground_truth)
    }
}

fn frac(num: u64, den: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(num, den)
    }
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn non_empty<T>(items: &[T]) -> Result<()> {
    if items.is_empty() {
        Err(Error::EmptyInput)
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairCounts {
    pub hallucinated_captions: u64,
    pub captions: u64,
    pub hallucinated_objects: u64,
    pub generated_objects: u64,
}

impl ChairCounts {
    pub fn chair_s(&self) -> Ratio<u64> {
        frac(self.hallucinated_captions, self.captions)
    }

    pub fn chair_i(&self) -> Ratio<u64> {
        frac(self.hallucinated_objects, self.generated_objects)
    }
}

pub fn chair_counts(instances: &[EvalInstance]) -> Result<ChairCounts> {
    non_empty(instances)?;
    let mut c = ChairCounts::default();
    for inst in instances {
        let h = inst.hallucinated().count() as u64;
        c.captions += 1;
        c.hallucinated_captions += u64::from(h > 0);
        c.hallucinated_objects += h;
        c.generated_objects += inst.generated.len() as u64;
    }
    Ok(c)
}

/// `(CHAIR-S, CHAIR-I)`.
pub fn chair_scores(instances: &[EvalInstance]) -> Result<(f64, f64)> {
    let c = chair_counts(instances)?;
    Ok((to_f64(c.chair_s()), to_f64(c.chair_i())))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallCounts {
    pub matched: u64,
    pub ground_truth: u64,
}

impl RecallCounts {
    pub fn recall(&self) -> Ratio<u64> {
        frac(self.matched, self.ground_truth)
    }
}

pub fn recall_counts(instances: &[EvalInstance]) -> Result<RecallCounts> {
    non_empty(instances)?;
    let mut c = RecallCounts::default();
    for inst in instances {
        c.matched += inst.generated.intersection(&inst.ground_truth).count() as u64;
        c.ground_truth += inst.ground_truth.len() as u64;
    }
    if c.ground_truth == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(c)
}

/// Micro-averaged share of ground-truth entities that were generated.
pub fn entity_recall(instances: &[EvalInstance]) -> Result<f64> {
    recall_counts(instances).map(|c| to_f64(c.recall()))
}

/// Hallucinated entities split by whether the instance's retrieved
/// captions mentioned them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub total: u64,
    pub retrieval_sourced: u64,
    pub model_sourced: u64,
}

impl Attribution {
    pub fn ratio(&self) -> Ratio<u64> {
        frac(self.retrieval_sourced, self.total)
    }
}

pub fn attribute_hallucinations(instances: &[EvalInstance]) -> Result<Attribution> {
    non_empty(instances)?;
    let mut a = Attribution::default();
    for inst in instances {
        for e in inst.hallucinated() {
            a.total += 1;
            if inst.retrieved.contains(e) {
                a.retrieval_sourced += 1;
            } else {
                a.model_sourced += 1;
            }
        }
    }
    Ok(a)
}

/// Counts behind ACC, RC, AHC and DHC for retrieved entity sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalCounts {
    pub instances: u64,
    pub correct: u64,
    pub retrieved: u64,
    pub ground_truth: u64,
    pub hallucinated: u64,
    pub distinct_hallucinated: BTreeSet<String>,
}

impl RetrievalCounts {
    pub fn acc(&self) -> Ratio<u64> {
        frac(self.correct, self.retrieved)
    }

    pub fn rc(&self) -> Ratio<u64> {
        frac(self.correct, self.ground_truth)
    }

    pub fn ahc(&self) -> Ratio<u64> {
        frac(self.hallucinated, self.instances)
    }

    pub fn dhc(&self) -> u64 {
        self.distinct_hallucinated.len() as u64
    }

    pub fn diagnostics(&self) -> RetrievalDiagnostics {
        RetrievalDiagnostics {
            acc: to_f64(self.acc()),
            rc: to_f64(self.rc()),
            ahc: to_f64(self.ahc()),
            dhc: self.dhc(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDiagnostics {
    pub acc: f64,
    pub rc: f64,
    pub ahc: f64,
    pub dhc: u64,
}

/// Counts over `(retrieved, ground_truth)` pairs.
pub fn retrieval_counts(instances: &[(EntitySet, EntitySet)]) -> Result<RetrievalCounts> {
    non_empty(instances)?;
    let mut c = RetrievalCounts::default();
    for (retrieved, gt) in instances {
        c.instances += 1;
        c.correct += retrieved.intersection(gt).count() as u64;
        c.retrieved += retrieved.len() as u64;
        c.ground_truth += gt.len() as u64;
        for e in retrieved.difference(gt) {
            c.hallucinated += 1;
            c.distinct_hallucinated.insert(e.clone());
        }
    }
    Ok(c)
}

pub fn retrieval_diagnostics(instances: &[(EntitySet, EntitySet)]) -> Result<RetrievalDiagnostics> {
    retrieval_counts(instances).map(|c| c.diagnostics())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub total_hallucinations: u64,
    pub retrieval_sourced: u64,
    pub model_sourced: u64,
    pub ratio_retrieval_sourced: f64,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        if self.retrieval_sourced + self.model_sourced != self.total_hallucinations {
            return Err(Error::Invariant("attribution counts do not sum to total".into()));
        }
        for (name, v) in [
            ("chair_s", self.chair_s),
            ("chair_i", self.chair_i),
            ("recall", self.recall),
            ("ratio_retrieval_sourced", self.ratio_retrieval_sourced),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// CHAIR, recall and attribution in one report.
pub fn evaluate(instances: &[EvalInstance]) -> Result<EvalReport> {
    let chair = chair_counts(instances)?;
    let recall = recall_counts(instances)?;
    let attribution = attribute_hallucinations(instances)?;
    Ok(EvalReport {
        chair_s: to_f64(chair.chair_s()),
        chair_i: to_f64(chair.chair_i()),
        recall: to_f64(recall.recall()),
        total_hallucinations: attribution.total,
        retrieval_sourced: attribution.retrieval_sourced,
        model_sourced: attribution.model_sourced,
        ratio_retrieval_sourced: to_f64(attribution.ratio()),
    })
}
