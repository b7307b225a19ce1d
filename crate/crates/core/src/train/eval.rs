//! Greedy-decoding evaluation: exact-match word accuracy, per-length
//! accuracy, and character error rate.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::event::SamplePair;
use crate::model::{EvalMode, Model};
use crate::nn::ParamSet;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    /// Exact-match accuracy in [0,1].
    pub word_acc: f64,
    /// Total edit distance over total label characters.
    pub cer: f64,
    /// label length → (correct, total).
    pub per_length: BTreeMap<usize, (usize, usize)>,
    pub wall_secs: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples={}", self.n)?;
        writeln!(f, "word_acc={:.4}", self.word_acc)?;
        writeln!(f, "cer={:.4}", self.cer)?;
        for (len, (correct, total)) in &self.per_length {
            writeln!(f, "len_{len}_acc={:.4} ({correct}/{total})", *correct as f64 / *total as f64)?;
        }
        write!(f, "wall_secs={:.1}", self.wall_secs)
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let subst = prev[j] + usize::from(ca != cb);
            cur[j + 1] = subst.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Greedy-decodes every sample (in parallel, merged in sample order) and
/// aggregates the metrics. Ablation modes zero the absent input plane.
pub fn run_eval(
    model: &Model,
    params: &ParamSet,
    samples: &[SamplePair],
    mode: EvalMode,
) -> Result<EvalReport, TensorError> {
    if samples.is_empty() {
        return Err(TensorError::Config("evaluation set is empty".into()));
    }
    let start = Instant::now();
    let preds: Vec<String> = samples
        .par_iter()
        .map(|s| model.predict(params, &s.rgb, &s.event_gray, mode))
        .collect::<Result<_, _>>()?;

    let mut correct = 0usize;
    let mut edits = 0usize;
    let mut chars = 0usize;
    let mut per_length: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (pred, sample) in preds.iter().zip(samples) {
        let hit = *pred == sample.label;
        correct += usize::from(hit);
        edits += levenshtein(pred, &sample.label);
        chars += sample.label.chars().count();
        let slot = per_length.entry(sample.label.chars().count()).or_insert((0, 0));
        slot.0 += usize::from(hit);
        slot.1 += 1;
    }
    Ok(EvalReport {
        n: samples.len(),
        word_acc: correct as f64 / samples.len() as f64,
        cer: edits as f64 / chars.max(1) as f64,
        per_length,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
