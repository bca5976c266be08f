//! Glue between corpus, models and metrics: splits, model inputs, guided
//! generation examples, evaluation and prediction dumps.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_examples, ActLabel, Dialogue, TrainingExample, Utterance, NUM_ACTS};
use crate::dualflow::{FlowInput, FlowModel, FlowOutput};
use crate::error::{DfmedError, Result};
use crate::generator::{GenModel, Guidance};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::metrics::{bleu, entity_prf, rouge, EvalReport};
use crate::numerics::Real;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Contiguous split in corpus order: the last `test_frac` of dialogues are
/// test, the `valid_frac` before them validation, the rest training.
pub fn split_corpus(corpus: &[Dialogue], valid_frac: f64, test_frac: f64) -> Result<Split> {
    if valid_frac < 0.0 || test_frac < 0.0 || valid_frac + test_frac >= 1.0 {
        return Err(DfmedError::Invalid(format!("bad split fractions {valid_frac} / {test_frac}")));
    }
    let n = corpus.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    let n_train = n - n_test - n_valid;
    Ok(Split {
        train: corpus[..n_train].to_vec(),
        valid: corpus[n_train..n_train + n_valid].to_vec(),
        test: corpus[n_train + n_valid..].to_vec(),
    })
}

/// One example list per dialogue with at least one doctor turn.
pub fn dialogue_examples(dialogues: &[Dialogue], kg: &KnowledgeGraph) -> Result<Vec<Vec<TrainingExample>>> {
    let mut out = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let ex = build_examples(d, kg)?;
        if !ex.is_empty() {
            out.push(ex);
        }
    }
    Ok(out)
}

/// One flow input per dialogue covering all of its doctor turns.
pub fn flow_inputs(dialogues: &[Dialogue], kg: &KnowledgeGraph, vocab: &Vocab) -> Result<Vec<FlowInput>> {
    dialogue_examples(dialogues, kg)?.iter().map(|ex| FlowInput::from_examples(ex, kg, vocab)).collect()
}

pub struct FlowEval {
    pub report: EvalReport,
    /// Act probabilities and gold indicators per example, for calibration.
    pub probs: Vec<[f64; NUM_ACTS]>,
    pub gold: Vec<[bool; NUM_ACTS]>,
}

/// Flow metrics for predictions aligned with `inputs` (one output list per input).
pub fn score_flow(inputs: &[FlowInput], outputs: &[Vec<FlowOutput>], k: usize) -> FlowEval {
    let mut rankings = Vec::new();
    let mut gold_ents = Vec::new();
    let mut pools = Vec::new();
    let mut pred_acts = Vec::new();
    let mut gold_acts = Vec::new();
    let mut probs = Vec::new();
    let mut gold = Vec::new();
    for (input, outs) in inputs.iter().zip(outputs) {
        for (tgt, out) in input.targets.iter().zip(outs) {
            rankings.push(out.top_k.clone());
            gold_ents.push(tgt.positives.iter().map(|&p| tgt.candidates[p]).collect::<BTreeSet<_>>());
            pools.push(tgt.candidates.len());
            pred_acts.push(out.acts.clone());
            gold_acts.push(ActLabel::ALL.into_iter().filter(|a| tgt.acts[a.index()]).collect::<Vec<_>>());
            probs.push(out.act_probs);
            gold.push(tgt.acts);
        }
    }
    let mut report = EvalReport::default();
    report.set_entities(&rankings, &gold_ents, &pools, k);
    report.set_acts(&pred_acts, &gold_acts);
    report.counts.dialogues = inputs.len();
    report.counts.examples = probs.len();
    FlowEval { report, probs, gold }
}

pub fn evaluate_flow<F: Real>(model: &FlowModel<F>, inputs: &[FlowInput]) -> Result<FlowEval> {
    let outputs = inputs.iter().map(|i| model.predict(i)).collect::<Result<Vec<_>>>()?;
    Ok(score_flow(inputs, &outputs, model.cfg.top_k))
}

/// A doctor turn to generate, with the plan fed to the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GenExample {
    pub id: String,
    pub t: usize,
    pub history: Vec<Utterance>,
    pub guidance: Guidance,
    pub target: Vec<String>,
    /// All annotated gold entities of the target turn.
    pub gold_entities: BTreeSet<EntityId>,
}

/// Which act sets go into the guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActSource {
    /// Gold acts of `D_t` (generator training).
    Gold,
    /// Acts predicted by the flow model (inference).
    Predicted,
}

/// Flow predictions for every doctor turn of `dialogues`.
pub struct Predicted {
    pub inputs: Vec<FlowInput>,
    pub examples: Vec<Vec<TrainingExample>>,
    pub outputs: Vec<Vec<FlowOutput>>,
}

pub fn predict_dialogues<F: Real>(flow: &FlowModel<F>, dialogues: &[Dialogue], kg: &KnowledgeGraph) -> Result<Predicted> {
    let examples = dialogue_examples(dialogues, kg)?;
    let inputs = examples.iter().map(|ex| FlowInput::from_examples(ex, kg, &flow.vocab)).collect::<Result<Vec<_>>>()?;
    let outputs = inputs.iter().map(|i| flow.predict(i)).collect::<Result<Vec<_>>>()?;
    Ok(Predicted { inputs, examples, outputs })
}

fn guidance_for(ex: &TrainingExample, out: &FlowOutput, acts: ActSource, kg: &KnowledgeGraph) -> Guidance {
    let act_set = match acts {
        ActSource::Gold => ex.target_acts.clone(),
        ActSource::Predicted => out.acts.clone(),
    };
    Guidance::new(&act_set, out.top_k.iter().map(|&e| kg.name_tokens(e).to_vec()).collect())
}

impl Predicted {
    /// Generation examples whose guidance is the top-k entities plus the
    /// act set chosen by `acts`. Turns with an empty target are skipped.
    pub fn gen_examples(&self, acts: ActSource, kg: &KnowledgeGraph) -> Vec<GenExample> {
        let mut out = Vec::new();
        for (exs, outs) in self.examples.iter().zip(&self.outputs) {
            for (ex, o) in exs.iter().zip(outs) {
                if ex.target_tokens.is_empty() {
                    continue;
                }
                out.push(GenExample {
                    id: ex.dialogue_id.clone(),
                    t: ex.t,
                    history: ex.history.clone(),
                    guidance: guidance_for(ex, o, acts, kg),
                    target: ex.target_tokens.clone(),
                    gold_entities: ex.target_entities.iter().chain(&ex.unreachable_entities).copied().collect(),
                });
            }
        }
        out
    }

    pub fn flow_eval(&self, k: usize) -> FlowEval {
        score_flow(&self.inputs, &self.outputs, k)
    }
}

pub struct GenEval {
    pub report: EvalReport,
    pub hypotheses: Vec<Vec<String>>,
}

/// Decodes every example; BLEU and ROUGE always, entity P/R/F1 when a KG
/// is given.
pub fn evaluate_generation<F: Real>(model: &GenModel<F>, examples: &[GenExample], kg: Option<&KnowledgeGraph>) -> Result<GenEval> {
    let hypotheses =
        examples.iter().map(|ex| Ok(model.decode(&ex.history, &ex.guidance)?.tokens)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Vec<String>> = examples.iter().map(|e| &e.target).collect();
    let refs: Vec<Vec<String>> = refs.into_iter().cloned().collect();
    let mut report = EvalReport {
        bleu1: Some(bleu(&hypotheses, &refs, 1)),
        bleu2: Some(bleu(&hypotheses, &refs, 2)),
        bleu4: Some(bleu(&hypotheses, &refs, 4)),
        ..EvalReport::default()
    };
    let r1 = rouge(&hypotheses, &refs, 1);
    let r2 = rouge(&hypotheses, &refs, 2);
    report.rouge1 = Some(r1.f1);
    report.rouge2 = Some(r2.f1);
    report.counts.rouge1_skipped = r1.skipped;
    report.counts.rouge2_skipped = r2.skipped;
    report.counts.examples = examples.len();
    if let Some(kg) = kg {
        let gold: Vec<BTreeSet<EntityId>> = examples.iter().map(|e| e.gold_entities.clone()).collect();
        let e = entity_prf(&hypotheses, &gold, kg);
        report.entity_p = Some(e.precision);
        report.entity_r = Some(e.recall);
        report.entity_f1 = Some(e.f1);
        report.counts.entity_predicted = e.predicted;
        report.counts.entity_gold = e.gold;
    }
    Ok(GenEval { report, hypotheses })
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub t: usize,
    pub acts: Vec<String>,
    pub entities: Vec<String>,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

/// Full test-set evaluation: flow metrics, and generation metrics when a
/// generator is given (guided by predicted acts and top-k entities).
pub fn evaluate<F: Real, G: Real>(
    flow: &FlowModel<F>,
    generator: Option<&GenModel<G>>,
    dialogues: &[Dialogue],
    kg: &KnowledgeGraph,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let pred = predict_dialogues(flow, dialogues, kg)?;
    let mut report = pred.flow_eval(flow.cfg.top_k).report;
    let examples = pred.gen_examples(ActSource::Predicted, kg);
    let hypotheses = match generator {
        Some(gen) => {
            let ge = evaluate_generation(gen, &examples, Some(kg))?;
            let r = ge.report;
            report.bleu1 = r.bleu1;
            report.bleu2 = r.bleu2;
            report.bleu4 = r.bleu4;
            report.rouge1 = r.rouge1;
            report.rouge2 = r.rouge2;
            report.entity_p = r.entity_p;
            report.entity_r = r.entity_r;
            report.entity_f1 = r.entity_f1;
            report.counts.rouge1_skipped = r.counts.rouge1_skipped;
            report.counts.rouge2_skipped = r.counts.rouge2_skipped;
            report.counts.entity_predicted = r.counts.entity_predicted;
            report.counts.entity_gold = r.counts.entity_gold;
            ge.hypotheses
        }
        None => vec![Vec::new(); examples.len()],
    };
    let records = examples
        .iter()
        .zip(hypotheses)
        .map(|(ex, h)| PredictionRecord {
            id: ex.id.clone(),
            t: ex.t,
            acts: ex.guidance.acts.iter().map(|a| a.name().to_string()).collect(),
            entities: ex.guidance.entities.iter().map(|e| e.join(" ")).collect(),
            hypothesis: h,
            reference: ex.target.clone(),
        })
        .collect();
    Ok((report, records))
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| DfmedError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| DfmedError::io(path, e))?;
    }
    w.flush().map_err(|e| DfmedError::io(path, e))
}
