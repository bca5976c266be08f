//! Automatic evaluation metrics, all on a percent scale.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{ActLabel, NUM_ACTS};
use crate::kg::{EntityId, KnowledgeGraph};

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
    }
    out
}

fn clipped_overlap(hyp: &HashMap<Vec<&str>, usize>, reference: &HashMap<Vec<&str>, usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

/// Corpus-level BLEU-`n`: uniform geometric mean of clipped k-gram
/// precisions, k = 1..=n. An order k >= 2 with zero matches is smoothed to
/// `1 / (total + 1)`; brevity penalty `exp(1 - r/c)` when `c < r`.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>], n: usize) -> f64 {
    assert_eq!(hypotheses.len(), references.len(), "bleu: unaligned inputs");
    if n == 0 {
        return 0.0;
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for k in 1..=n {
            let hg = ngrams(h, k);
            let rg = ngrams(rf, k);
            matched[k - 1] += clipped_overlap(&hg, &rg);
            total[k - 1] += hg.values().sum::<usize>();
        }
    }
    if c == 0 || matched[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 0..n {
        let p = if matched[k] == 0 {
            if k == 0 {
                return 0.0;
            }
            1.0 / (total[k] as f64 + 1.0)
        } else {
            matched[k] as f64 / total[k] as f64
        };
        log_p += p.ln() / n as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * log_p.exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub f1: f64,
    /// Pairs skipped because the reference has no n-gram of this order.
    pub skipped: usize,
}

/// Macro-averaged per-pair ROUGE-`n` F1.
pub fn rouge<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>], n: usize) -> RougeScore {
    assert_eq!(hypotheses.len(), references.len(), "rouge: unaligned inputs");
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let rg = ngrams(rf, n);
        let rt: usize = rg.values().sum();
        if rt == 0 {
            skipped += 1;
            continue;
        }
        used += 1;
        let hg = ngrams(h, n);
        let ht: usize = hg.values().sum();
        let ov = clipped_overlap(&hg, &rg) as f64;
        if ov > 0.0 {
            let (p, r) = (ov / ht as f64, ov / rt as f64);
            sum += 2.0 * p * r / (p + r);
        }
    }
    RougeScore { f1: if used == 0 { 0.0 } else { 100.0 * sum / used as f64 }, skipped }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { 100.0 * correct as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { 100.0 * correct as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1, predicted, gold, correct }
    }
}

/// Micro entity precision/recall/F1 of the entities mentioned in each
/// hypothesis against the annotated gold sets.
pub fn entity_prf<S: AsRef<str>>(hypotheses: &[Vec<S>], gold: &[BTreeSet<EntityId>], kg: &KnowledgeGraph) -> Prf {
    assert_eq!(hypotheses.len(), gold.len(), "entity_prf: unaligned inputs");
    let (mut correct, mut predicted, mut total) = (0, 0, 0);
    for (h, gs) in hypotheses.iter().zip(gold) {
        let pred: BTreeSet<EntityId> = kg.match_entities(h).into_iter().collect();
        correct += pred.intersection(gs).count();
        predicted += pred.len();
        total += gs.len();
    }
    Prf::from_counts(correct, predicted, total)
}

/// Micro recall of gold entities within each example's top `k`.
/// `rankings` are candidate lists already sorted by descending score.
/// Examples without gold are ignored; `None` when no example has any.
pub fn recall_at_k(rankings: &[Vec<EntityId>], gold: &[BTreeSet<EntityId>], k: usize) -> Option<f64> {
    assert_eq!(rankings.len(), gold.len(), "recall_at_k: unaligned inputs");
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, gs) in rankings.iter().zip(gold) {
        if gs.is_empty() {
            continue;
        }
        total += gs.len();
        hit += r.iter().take(k).filter(|e| gs.contains(e)).count();
    }
    (total > 0).then(|| 100.0 * hit as f64 / total as f64)
}

/// Expected R@k of a uniformly random ranking: each gold entity lands in the
/// top `k` of a pool of size `m` with probability `min(k, m) / m`.
pub fn random_recall_at_k(pool_sizes: &[usize], gold_counts: &[usize], k: usize) -> Option<f64> {
    assert_eq!(pool_sizes.len(), gold_counts.len(), "random_recall_at_k: unaligned inputs");
    let (mut hit, mut total) = (0.0, 0usize);
    for (&m, &gcount) in pool_sizes.iter().zip(gold_counts) {
        if gcount == 0 || m == 0 {
            continue;
        }
        total += gcount;
        hit += gcount as f64 * k.min(m) as f64 / m as f64;
    }
    (total > 0).then(|| 100.0 * hit / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActScore {
    pub act: ActLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedF1 {
    pub weighted_f1: f64,
    pub per_act: Vec<ActScore>,
}

/// Per-act binary F1 and their support-weighted mean; acts without gold
/// support are excluded from the mean.
pub fn weighted_f1(pred: &[Vec<ActLabel>], gold: &[Vec<ActLabel>]) -> WeightedF1 {
    assert_eq!(pred.len(), gold.len(), "weighted_f1: unaligned inputs");
    let mut tp = [0usize; NUM_ACTS];
    let mut np = [0usize; NUM_ACTS];
    let mut ng = [0usize; NUM_ACTS];
    for (p, g) in pred.iter().zip(gold) {
        let (pi, gi) = (ActLabel::indicator(p), ActLabel::indicator(g));
        for j in 0..NUM_ACTS {
            tp[j] += (pi[j] && gi[j]) as usize;
            np[j] += pi[j] as usize;
            ng[j] += gi[j] as usize;
        }
    }
    let mut per_act = Vec::with_capacity(NUM_ACTS);
    let (mut sum, mut support) = (0.0, 0usize);
    for a in ActLabel::ALL {
        let j = a.index();
        let s = Prf::from_counts(tp[j], np[j], ng[j]);
        if ng[j] > 0 {
            sum += s.f1 * ng[j] as f64;
            support += ng[j];
        }
        per_act.push(ActScore { act: a, precision: s.precision, recall: s.recall, f1: s.f1, support: ng[j] });
    }
    WeightedF1 { weighted_f1: if support == 0 { 0.0 } else { sum / support as f64 }, per_act }
}

/// Most frequent act in `gold`; ties go to the earlier act.
pub fn majority_act(gold: &[Vec<ActLabel>]) -> ActLabel {
    let mut counts = [0usize; NUM_ACTS];
    for g in gold {
        for (j, on) in ActLabel::indicator(g).iter().enumerate() {
            counts[j] += *on as usize;
        }
    }
    let best = (0..NUM_ACTS).fold(0, |b, j| if counts[j] > counts[b] { j } else { b });
    ActLabel::ALL[best]
}

/// Weighted-F1 of always predicting `{act}`.
pub fn majority_weighted_f1(gold: &[Vec<ActLabel>], act: ActLabel) -> f64 {
    let pred = vec![vec![act]; gold.len()];
    weighted_f1(&pred, gold).weighted_f1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub dialogues: usize,
    pub examples: usize,
    /// Examples with at least one reachable gold entity.
    pub recall_examples: usize,
    pub recall_gold: usize,
    pub rouge1_skipped: usize,
    pub rouge2_skipped: usize,
    pub entity_predicted: usize,
    pub entity_gold: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Expected R@k of random ranking over the same candidate pools.
    pub random_recall: Option<f64>,
    pub majority_act: Option<ActLabel>,
    pub majority_weighted_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "B-1")]
    pub bleu1: Option<f64>,
    #[serde(rename = "B-2")]
    pub bleu2: Option<f64>,
    #[serde(rename = "B-4")]
    pub bleu4: Option<f64>,
    #[serde(rename = "R-1")]
    pub rouge1: Option<f64>,
    #[serde(rename = "R-2")]
    pub rouge2: Option<f64>,
    #[serde(rename = "E-P")]
    pub entity_p: Option<f64>,
    #[serde(rename = "E-R")]
    pub entity_r: Option<f64>,
    #[serde(rename = "E-F1")]
    pub entity_f1: Option<f64>,
    #[serde(rename = "R@20")]
    pub recall_at_k: Option<f64>,
    #[serde(rename = "Weighted-F1")]
    pub weighted_f1: Option<f64>,
    pub top_k: usize,
    pub per_act: Vec<ActScore>,
    pub baselines: Baselines,
    pub counts: Counts,
}

impl EvalReport {
    /// Mean of Weighted-F1 and R@k, the flow selection criterion.
    pub fn flow_score(&self) -> Option<f64> {
        Some((self.weighted_f1? + self.recall_at_k?) / 2.0)
    }

    pub fn set_generation<S: AsRef<str>, T: AsRef<str>>(
        &mut self,
        hypotheses: &[Vec<S>],
        references: &[Vec<T>],
        gold_entities: &[BTreeSet<EntityId>],
        kg: &KnowledgeGraph,
    ) {
        self.bleu1 = Some(bleu(hypotheses, references, 1));
        self.bleu2 = Some(bleu(hypotheses, references, 2));
        self.bleu4 = Some(bleu(hypotheses, references, 4));
        let r1 = rouge(hypotheses, references, 1);
        let r2 = rouge(hypotheses, references, 2);
        self.rouge1 = Some(r1.f1);
        self.rouge2 = Some(r2.f1);
        self.counts.rouge1_skipped = r1.skipped;
        self.counts.rouge2_skipped = r2.skipped;
        let e = entity_prf(hypotheses, gold_entities, kg);
        self.entity_p = Some(e.precision);
        self.entity_r = Some(e.recall);
        self.entity_f1 = Some(e.f1);
        self.counts.entity_predicted = e.predicted;
        self.counts.entity_gold = e.gold;
    }

    pub fn set_acts(&mut self, pred: &[Vec<ActLabel>], gold: &[Vec<ActLabel>]) {
        let w = weighted_f1(pred, gold);
        self.weighted_f1 = Some(w.weighted_f1);
        self.per_act = w.per_act;
        let maj = majority_act(gold);
        self.baselines.majority_act = Some(maj);
        self.baselines.majority_weighted_f1 = Some(majority_weighted_f1(gold, maj));
    }

    /// `pool_sizes` are candidate-pool sizes for the same examples.
    pub fn set_entities(&mut self, rankings: &[Vec<EntityId>], gold: &[BTreeSet<EntityId>], pool_sizes: &[usize], k: usize) {
        self.top_k = k;
        self.recall_at_k = recall_at_k(rankings, gold, k);
        let counts: Vec<usize> = gold.iter().map(BTreeSet::len).collect();
        self.baselines.random_recall = random_recall_at_k(pool_sizes, &counts, k);
        self.counts.recall_examples = counts.iter().filter(|&&c| c > 0).count();
        self.counts.recall_gold = counts.iter().sum();
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = ["B-1", "B-2", "B-4", "R-1", "R-2", "E-P", "E-R", "E-F1"];
        let vals = [
            self.bleu1,
            self.bleu2,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.entity_p,
            self.entity_r,
            self.entity_f1,
        ];
        for h in head {
            write!(f, "{h:>8}")?;
        }
        writeln!(f)?;
        for v in vals {
            write!(f, "{:>8}", cell(v))?;
        }
        writeln!(f)?;
        writeln!(f, "{:>12}{:>12}", format!("R@{}", self.top_k), "Weighted-F1")?;
        writeln!(f, "{:>12}{:>12}", cell(self.recall_at_k), cell(self.weighted_f1))?;
        if let Some(r) = self.baselines.random_recall {
            writeln!(f, "random R@{} baseline: {r:.2}", self.top_k)?;
        }
        if let (Some(a), Some(w)) = (self.baselines.majority_act, self.baselines.majority_weighted_f1) {
            writeln!(f, "majority act baseline ({}): {w:.2}", a.name())?;
        }
        for a in &self.per_act {
            writeln!(
                f,
                "  {:<26} P {:>6.2}  R {:>6.2}  F1 {:>6.2}  n={}",
                a.act.name(),
                a.precision,
                a.recall,
                a.f1,
                a.support
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-2
    }

    #[test]
    fn bleu_fixtures() {
        assert!(close(bleu(&[t("a b c d")], &[t("a b c d")], 4), 100.0));
        assert_eq!(bleu(&[t("x y")], &[t("a b")], 1), 0.0);
        assert!(close(bleu(&[t("a b c")], &[t("a b d")], 1), 66.67));
        // B-2: p1 = 2/3, p2 = 1/2
        assert!(close(bleu(&[t("a b c")], &[t("a b d")], 2), 100.0 * (2.0f64 / 3.0 * 0.5).sqrt()));
        // brevity: c=2, r=4
        let bp = (1.0f64 - 2.0).exp();
        assert!(close(bleu(&[t("a b")], &[t("a b c d")], 1), 100.0 * bp));
        // smoothed zero order: p2 = 1/(2+1)
        let v = bleu(&[t("a c b")], &[t("a b c")], 2);
        assert!(close(v, 100.0 * (1.0f64 / 3.0).sqrt()));
        assert_eq!(bleu(&[Vec::<String>::new()], &[t("a")], 1), 0.0);
    }

    #[test]
    fn bleu_is_corpus_level() {
        // pooled counts: p1 = (1 + 2) / (2 + 2)
        let v = bleu(&[t("a x"), t("b c")], &[t("a b"), t("b c")], 1);
        assert!(close(v, 75.0));
    }

    #[test]
    fn rouge_fixtures() {
        assert!(close(rouge(&[t("a b c")], &[t("a b c")], 2).f1, 100.0));
        assert_eq!(rouge(&[t("x")], &[t("a")], 1).f1, 0.0);
        assert!(close(rouge(&[t("a b")], &[t("a c")], 1).f1, 50.0));
        // macro average of 100 and 0; the empty reference is skipped
        let r = rouge(&[t("a"), t("b"), t("c")], &[t("a"), t("z"), vec![]], 1);
        assert!(close(r.f1, 50.0));
        assert_eq!(r.skipped, 1);
        assert_eq!(rouge(&[t("a")], &[t("a")], 2).skipped, 1);
    }

    #[test]
    fn entity_fixtures() {
        let kg = KnowledgeGraph::parse("a\tb\nb\tc\n").unwrap();
        let id = |n: &str| kg.id(n).unwrap();
        let e = entity_prf(&[t("b and c")], &[[id("a"), id("b")].into()], &kg);
        assert!(close(e.precision, 50.0) && close(e.recall, 50.0) && close(e.f1, 50.0));
        let e = entity_prf(&[t("a b")], &[[id("a"), id("b")].into()], &kg);
        assert_eq!((e.precision, e.recall, e.f1), (100.0, 100.0, 100.0));
        let e = entity_prf(&[t("nothing")], &[BTreeSet::new()], &kg);
        assert_eq!((e.precision, e.recall, e.f1, e.predicted, e.gold), (0.0, 0.0, 0.0, 0, 0));
        let e = entity_prf(&[t("a b c")], &[[id("a")].into()], &kg);
        let h = 2.0 * e.precision * e.recall / (e.precision + e.recall);
        assert!((e.f1 - h).abs() < 1e-9);
    }

    #[test]
    fn recall_fixtures() {
        let ids: Vec<EntityId> = (0..30).map(EntityId).collect();
        let gold1: BTreeSet<_> = [EntityId(0)].into();
        assert_eq!(recall_at_k(&[ids.clone()], &[gold1], 20), Some(100.0));
        let gold21: BTreeSet<_> = [EntityId(20)].into();
        assert_eq!(recall_at_k(&[ids.clone()], &[gold21.clone()], 20), Some(0.0));
        let two: BTreeSet<_> = [EntityId(3), EntityId(25)].into();
        assert_eq!(recall_at_k(&[ids.clone()], &[two.clone()], 20), Some(50.0));
        assert_eq!(recall_at_k(&[ids.clone()], &[BTreeSet::new()], 20), None);
        let mut prev = 0.0;
        for k in 1..=30 {
            let r = recall_at_k(&[ids.clone(), ids.clone()], &[two.clone(), gold21.clone()], k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn random_recall_baseline() {
        // pool 40 with 2 gold: 2 * 20/40; pool 10 with 1 gold: 1
        let r = random_recall_at_k(&[40, 10, 5], &[2, 1, 0], 20).unwrap();
        assert!((r - 100.0 * 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(random_recall_at_k(&[3], &[0], 20), None);
    }

    #[test]
    fn weighted_f1_fixtures() {
        use ActLabel::*;
        let gold = vec![vec![Inquire], vec![Inquire, Inform], vec![Chitchat]];
        assert!(close(weighted_f1(&gold, &gold).weighted_f1, 100.0));
        let all = vec![ActLabel::ALL.to_vec(); 3];
        let w = weighted_f1(&all, &gold);
        // Inquire F1 0.8 (n=2), Inform 0.5 (n=1), Chitchat 0.5 (n=1)
        assert!(close(w.weighted_f1, 65.0));
        assert_eq!(w.per_act[MakeDiagnosis.index()].support, 0);
        assert_eq!(w.per_act[Inquire.index()].recall, 100.0);
        assert_eq!(majority_act(&gold), Inquire);
        // always {Inquire}: Inquire F1 0.8 (n=2), others 0
        assert!(close(majority_weighted_f1(&gold, Inquire), 40.0));
    }

    #[test]
    fn report_json_uses_table_names() {
        let mut r = EvalReport::default();
        r.set_acts(&[vec![ActLabel::Inform]], &[vec![ActLabel::Inform]]);
        r.set_entities(&[vec![EntityId(1)]], &[[EntityId(1)].into()], &[4], 20);
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["Weighted-F1"], 100.0);
        assert_eq!(j["R@20"], 100.0);
        assert_eq!(j["baselines"]["random_recall"], 100.0);
        assert!(j["B-4"].is_null());
        assert_eq!(r.flow_score(), Some(100.0));
        let back: EvalReport = serde_json::from_value(j).unwrap();
        assert_eq!(back, r);
        assert!(r.to_string().contains("Weighted-F1"));
    }
}
