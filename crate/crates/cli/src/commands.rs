use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dfmed_core::corpus::synth::generate_synthetic;
use dfmed_core::corpus::{build_query, load_corpus, save_corpus, ActLabel, Dialogue, Utterance};
use dfmed_core::dualflow::{FlowConfig, FlowInput, FlowModel};
use dfmed_core::generator::{GenModel, Guidance};
use dfmed_core::kg::KnowledgeGraph;
use dfmed_core::numerics::{grad_check_floor, Real};
use dfmed_core::pipeline::{
    dialogue_examples, evaluate, evaluate_flow, flow_inputs, predict_dialogues, split_corpus, write_predictions,
    ActSource, Split,
};
use dfmed_core::training::{
    calibrate_act_thresholds, default_threshold_grid, load_flow, load_generator, save_flow, save_generator,
    train_flow as fit_flow, train_generator as fit_generator, TrainSummary,
};
use dfmed_core::vocab::Vocab;

use crate::config::Configs;
use crate::{
    CalibrateArgs, ChatArgs, Common, EvalArgs, FlowAblations, GenCorpusArgs, InspectArgs, TrainFlowArgs, TrainGenArgs,
    TrainOverrides,
};

pub const KG_FILE: &str = "kg.tsv";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ORACLE_FILE: &str = "oracle.json";
pub const REPORT_VERSION: u32 = 1;
const VALID_FRAC: f64 = 0.1;
const TEST_FRAC: f64 = 0.1;

fn load_configs(common: &Common) -> Result<Configs> {
    let mut c = Configs::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        c.set_seed(s);
    }
    Ok(c)
}

fn apply_train(c: &mut Configs, o: &TrainOverrides) {
    if let Some(v) = o.lr {
        c.train.lr = v;
    }
    if let Some(v) = o.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = o.dim {
        c.flow.dim = v;
        c.gen.dim = v;
    }
    if o.valid_limit.is_some() {
        c.train.valid_limit = o.valid_limit;
    }
}

/// Applies the flow ablations; returns whether `no-guidance` was requested.
fn apply_ablations(cfg: &mut FlowConfig, a: &FlowAblations) -> Result<bool> {
    let flags = [
        (a.no_act_flow, "no-act-flow"),
        (a.no_entity_flow, "no-entity-flow"),
        (a.no_interweave, "no-interweave"),
        (a.no_e2a, "no-e2a"),
        (a.no_a2e, "no-a2e"),
    ];
    let mut no_guidance = false;
    let names = flags.iter().filter(|(on, _)| *on).map(|(_, n)| n.to_string()).chain(a.ablate.iter().cloned());
    for name in names {
        if name == "no-guidance" {
            no_guidance = true;
        } else {
            cfg.ablate(&name)?;
        }
    }
    Ok(no_guidance)
}

fn kg_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(KG_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_data(dir: &Path) -> Result<(KnowledgeGraph, Split)> {
    let kg = KnowledgeGraph::load(dir.join(KG_FILE))?;
    let corpus = load_corpus(dir.join(CORPUS_FILE))?;
    let split = split_corpus(&corpus, VALID_FRAC, TEST_FRAC)?;
    info!("{} dialogues: {} train / {} valid / {} test", corpus.len(), split.train.len(), split.valid.len(), split.test.len());
    Ok((kg, split))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn log_summary(s: &TrainSummary) {
    for e in &s.epochs {
        match e.valid_score {
            Some(v) => info!("epoch {:>3}  loss {:.4}  valid {:.2}  lr {:.2e}", e.epoch, e.train_loss, v, e.lr),
            None => info!("epoch {:>3}  loss {:.4}  lr {:.2e}", e.epoch, e.train_loss, e.lr),
        }
    }
    info!("best epoch {} after {} steps", s.best_epoch, s.steps);
}

// ── commands ────────────────────────────────────────────────────────

pub fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut c = load_configs(&a.common)?;
    let s = &mut c.synth;
    if let Some(v) = a.n_dialogues {
        s.n_dialogues = v;
    }
    if let Some(v) = a.n_entities {
        s.n_entities = v;
    }
    if let Some(v) = a.degree {
        s.kg_degree = v;
    }
    if let Some(v) = a.p_hop {
        s.p_hop = v;
    }
    if let Some(v) = a.min_rounds {
        s.min_rounds = v;
    }
    if let Some(v) = a.max_rounds {
        s.max_rounds = v;
    }
    let (kg, corpus, oracle) = generate_synthetic(&c.synth)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    kg.save(a.out.join(KG_FILE))?;
    save_corpus(&corpus, a.out.join(CORPUS_FILE))?;
    write_json(&a.out.join(ORACLE_FILE), &serde_json::json!({ "config": c.synth, "oracle": oracle }))?;
    println!("wrote {} entities, {} edges, {} dialogues to {}", kg.len(), kg.num_edges(), corpus.len(), a.out.display());
    Ok(())
}

pub fn train_flow<F: Real>(a: TrainFlowArgs, f64_mode: bool) -> Result<()> {
    let mut c = load_configs(&a.common)?;
    apply_train(&mut c, &a.train);
    if let Some(k) = a.topk {
        c.flow.top_k = k;
    }
    if apply_ablations(&mut c.flow, &a.ablations)? {
        bail!("no-guidance is a generator ablation; pass it to train-gen or eval");
    }
    let (kg, split) = load_data(&a.data)?;
    let vocab = Vocab::build(&split.train, &kg);
    let train = flow_inputs(&split.train, &kg, &vocab)?;
    let valid = flow_inputs(&split.valid, &kg, &vocab)?;
    let mut model = FlowModel::<F>::new(c.flow.clone(), vocab)?;
    info!("flow model: {} parameters, precision {}", model.params.num_scalars(), if f64_mode { "f64" } else { "f32" });
    if f64_mode {
        if let Some(inp) = train.first() {
            let m: FlowModel<f64> = model.cast();
            let mut p = m.params.clone();
            let seed = c.train.seed;
            let r = grad_check_floor(&mut p, 1e-5, Some(3), 1e-6, |g| {
                Ok(m.flow_loss(g, inp, &mut ChaCha8Rng::seed_from_u64(seed))?.total)
            })?;
            info!("gradient check: max rel err {:.3e} over {} entries ({})", r.max_rel_err, r.checked, r.worst_param);
        }
    }
    let summary = fit_flow(&mut model, &train, &valid, &c.train)?;
    log_summary(&summary);
    save_flow(&a.out, &model, summary.steps, summary.best_epoch, summary.best_report.clone())?;
    write_json(&a.out.join("train_log.json"), &serde_json::json!({ "train": c.train, "summary": summary }))?;
    if let Some(r) = &summary.best_report {
        println!("{r}");
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let grid = a.threshold_grid.unwrap_or_else(default_threshold_grid);
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("threshold grid must be non-empty values in [0, 1]");
    }
    let (mut model, meta): (FlowModel<f32>, _) = load_flow(&a.flow)?;
    let (kg, split) = load_data(&a.data)?;
    let valid = flow_inputs(&split.valid, &kg, &model.vocab)?;
    let before = evaluate_flow(&model, &valid)?;
    model.thresholds = calibrate_act_thresholds(&before.probs, &before.gold, &grid);
    let after = evaluate_flow(&model, &valid)?;
    for act in ActLabel::ALL {
        println!("{:<26} {:.2}", act.name(), model.thresholds[act.index()]);
    }
    let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!(
        "validation Weighted-F1: {} at 0.5 -> {} calibrated",
        cell(before.report.weighted_f1),
        cell(after.report.weighted_f1)
    );
    save_flow(&a.flow, &model, meta.step, meta.epoch, meta.metrics)?;
    Ok(())
}

pub fn train_gen<F: Real>(a: TrainGenArgs, f64_mode: bool) -> Result<()> {
    let mut c = load_configs(&a.common)?;
    apply_train(&mut c, &a.train);
    c.gen.use_guidance = !a.no_guidance;
    let (flow, _): (FlowModel<f32>, _) = load_flow(&a.flow)?;
    let (kg, split) = load_data(&a.data)?;
    // guidance entities come from the frozen flow; acts are gold for training
    let train = predict_dialogues(&flow, &split.train, &kg)?.gen_examples(ActSource::Gold, &kg);
    let valid = predict_dialogues(&flow, &split.valid, &kg)?.gen_examples(ActSource::Predicted, &kg);
    let mut model = GenModel::<F>::new(c.gen.clone(), flow.vocab.clone())?;
    info!("generator: {} parameters, {} training turns", model.params.num_scalars(), train.len());
    if f64_mode {
        if let Some(ex) = train.first() {
            let m: GenModel<f64> = model.cast();
            let mut p = m.params.clone();
            let r = grad_check_floor(&mut p, 1e-5, Some(3), 1e-6, |g| {
                m.generation_loss(g, &ex.history, &ex.guidance, &ex.target)
            })?;
            info!("gradient check: max rel err {:.3e} over {} entries ({})", r.max_rel_err, r.checked, r.worst_param);
        }
    }
    let summary = fit_generator(&mut model, &train, &valid, &c.train)?;
    log_summary(&summary);
    save_generator(&a.out, &model, summary.steps, summary.best_epoch, summary.best_report.clone())?;
    write_json(&a.out.join("train_log.json"), &serde_json::json!({ "train": c.train, "summary": summary }))?;
    if let Some(r) = &summary.best_report {
        println!("{r}");
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (mut flow, _): (FlowModel<f32>, _) = load_flow(&a.flow)?;
    let no_guidance = apply_ablations(&mut flow.cfg, &a.ablations)? || a.no_guidance;
    if let Some(k) = a.topk {
        flow.cfg.top_k = k;
    }
    flow.cfg.validate()?;
    let gen = match &a.gen {
        Some(p) => {
            let (mut g, _): (GenModel<f32>, _) = load_generator(p)?;
            if no_guidance {
                g.cfg.use_guidance = false;
            }
            Some(g)
        }
        None if no_guidance => bail!("--no-guidance needs a generator checkpoint (--gen)"),
        None => None,
    };
    let (kg, split) = load_data(&a.data)?;
    let (report, records) = evaluate(&flow, gen.as_ref(), &split.test, &kg)?;
    println!("{report}");
    if let Some(out) = &a.out {
        write_json(out, &serde_json::json!({ "version": REPORT_VERSION, "report": report }))?;
    }
    if let Some(p) = &a.predictions {
        write_predictions(p, &records)?;
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let (flow, _): (FlowModel<f32>, _) = load_flow(&a.flow)?;
    let gen = a.gen.as_ref().map(load_generator::<f32>).transpose()?.map(|(g, _)| g);
    let (kg, split) = load_data(&a.data)?;
    let dialogue: Dialogue = match &a.dialogue {
        Some(id) => split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .find(|d| &d.id == id)
            .cloned()
            .with_context(|| format!("no dialogue with id {id}"))?,
        None => split.test.first().or(split.train.first()).cloned().context("empty corpus")?,
    };
    let examples = dialogue_examples(std::slice::from_ref(&dialogue), &kg)?.remove(0);
    if examples.is_empty() {
        bail!("dialogue {} has no doctor turn", dialogue.id);
    }
    let input = FlowInput::from_examples(&examples, &kg, &flow.vocab)?;
    let outputs = flow.predict(&input)?;
    println!("dialogue {} ({} doctor turns)", dialogue.id, outputs.len());
    for (ex, out) in examples.iter().zip(&outputs) {
        println!("\nturn {}", out.t);
        println!("  patient: {}", ex.history[2 * out.t - 2].tokens.join(" "));
        println!("  gold acts: {}", names(&ex.target_acts));
        println!("  predicted acts: {}", names(&out.acts));
        let probs: Vec<String> =
            ActLabel::ALL.iter().map(|a| format!("{}={:.2}", a.name(), out.act_probs[a.index()])).collect();
        println!("  act probabilities: {}", probs.join(" "));
        println!("  candidates: {}, gold reachable: {}", out.candidates.len(), ex.target_entities.len());
        for e in out.top_k.iter().take(a.show) {
            let i = out.candidates.iter().position(|c| c == e).expect("top-k is drawn from candidates");
            let mark = if ex.target_entities.contains(e) { "*" } else { " " };
            println!("   {mark} {:>8.3}  {}", out.scores[i], kg.name(*e));
        }
        if let Some(g) = &gen {
            let guidance = Guidance::new(&out.acts, out.top_k.iter().map(|&e| kg.name_tokens(e).to_vec()).collect());
            let hyp = g.decode(&ex.history, &guidance)?;
            println!("  generated: {}", hyp.tokens.join(" "));
            println!("  reference: {}", ex.target_tokens.join(" "));
            let target = if ex.target_tokens.iter().all(|t| g.vocab.id(t).is_some()) { &ex.target_tokens } else { &hyp.tokens };
            let gates = g.gate_means(&ex.history, &guidance, target)?;
            let cells: Vec<String> = gates.iter().enumerate().map(|(l, v)| format!("layer{l}={v:.3}")).collect();
            println!("  mean gate: {}", cells.join(" "));
        }
    }
    Ok(())
}

fn names(acts: &[ActLabel]) -> String {
    acts.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
}

pub fn chat<R: BufRead, W: Write>(a: ChatArgs, input: R, mut out: W) -> Result<()> {
    let kg = KnowledgeGraph::load(kg_path(&a.kg))?;
    let (mut flow, _): (FlowModel<f32>, _) = load_flow(&a.flow)?;
    if let Some(k) = a.topk {
        flow.cfg.top_k = k;
        flow.cfg.validate()?;
    }
    let gen = a.gen.as_ref().map(load_generator::<f32>).transpose()?.map(|(g, _)| g);
    let mut dialogue = Dialogue { id: "chat".into(), utterances: Vec::new() };
    for line in input.lines() {
        let line = line?;
        let tokens: Vec<String> = line.split_whitespace().map(|t| t.to_lowercase()).collect();
        if tokens.is_empty() {
            continue;
        }
        let mentioned: Vec<String> = kg.match_entities(&tokens).into_iter().map(|e| kg.name(e)).collect();
        dialogue.utterances.push(Utterance::patient(tokens, mentioned));
        let ex = build_query(&dialogue, &kg)?.expect("dialogue ends with the patient");
        let input = FlowInput::from_examples(std::slice::from_ref(&ex), &kg, &flow.vocab)?;
        let pred = flow.predict(&input)?.pop().expect("one query turn");
        let top: Vec<String> = pred.top_k.iter().map(|&e| kg.name(e)).collect();
        writeln!(out, "acts: {}", names(&pred.acts))?;
        writeln!(out, "entities: {}", top.join(", "))?;
        let guidance = Guidance::new(&pred.acts, pred.top_k.iter().map(|&e| kg.name_tokens(e).to_vec()).collect());
        let reply = match &gen {
            Some(g) => {
                let r = g.decode(&dialogue.utterances, &guidance)?.tokens;
                writeln!(out, "doctor: {}", r.join(" "))?;
                r
            }
            // without a generator the plan itself stands in for the reply
            None => guidance.tokens(),
        };
        let reply = if reply.is_empty() { guidance.tokens() } else { reply };
        let mentioned: Vec<String> = kg.match_entities(&reply).into_iter().map(|e| kg.name(e)).collect();
        dialogue.utterances.push(Utterance::doctor(reply, mentioned, pred.acts.clone()));
        out.flush()?;
    }
    Ok(())
}
