//! Model-driven evaluation: run a trained model over the test split and
//! pool its outputs into the metrics module's rankings.

use crate::data::{labels, PreparedDataset};
use crate::error::{Error, Result};
use crate::features::{HOP, N_BANDS, SAMPLE_RATE};
use crate::layers::{Mode, ModelGraph};
use crate::metrics::{self, EvalReport};
use crate::tensor::{Element, Tape, Tensor, Var};

const EVAL_BATCH: usize = 8;

/// Feature block of the listed recordings as a `[B, T, 40, 1]` input leaf.
pub fn batch_input<E: Element>(
    tape: &mut Tape<E>,
    prep: &PreparedDataset,
    recs: &[labels::Recording],
    indices: &[usize],
) -> Result<Var> {
    let mb = prep.minibatch(recs, indices)?;
    let shape = mb.features.shape().to_vec();
    let data: Vec<E> = mb.features.data().iter().map(|&v| E::from_f32(v)).collect();
    let t = Tensor::new(vec![shape[0], shape[1], shape[2], 1], data)?;
    Ok(tape.constant(t))
}

/// Frame-level detector AUC over the test split, against the any-class
/// activity grid from the strong labels. Padded frames are excluded.
pub fn eval_when_model<E: Element>(
    tape: &mut Tape<E>,
    model: &ModelGraph<E>,
    prep: &PreparedDataset,
) -> Result<EvalReport> {
    let recs = &prep.split.test;
    if recs.is_empty() {
        return Err(Error::Eval("empty test split".into()));
    }
    for r in recs {
        if r.strong_labels.is_none() {
            return Err(Error::Eval(format!(
                "{}: no strong labels; frame-level evaluation needs them",
                r.id
            )));
        }
    }
    let mut pooled = Vec::with_capacity(recs.len());
    let mark = tape.mark();
    let indices: Vec<usize> = (0..recs.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = batch_input(tape, prep, recs, chunk)?;
        let out = model.forward(tape, x, Mode::Eval)?;
        check_finite(tape, out, "detector evaluation")?;
        let t = tape.value(out).shape()[1];
        let data = tape.value(out).data().to_vec();
        for (row, &idx) in chunk.iter().enumerate() {
            let rec = &recs[idx];
            let (_, valid) = prep
                .features_of(&rec.id)
                .ok_or_else(|| Error::Eval(format!("no features for {}", rec.id)))?;
            let scores: Vec<f32> = data[row * t..row * t + valid]
                .iter()
                .map(|&v| v.to_f32())
                .collect();
            let events: Vec<(f64, f64)> = rec
                .strong_labels
                .as_ref()
                .unwrap()
                .iter()
                .map(|e| (e.onset_s, e.offset_s))
                .collect();
            let truth = labels::rasterise(&events, *valid, HOP, SAMPLE_RATE);
            pooled.push((scores, truth));
        }
        tape.reset_to(mark);
    }
    metrics::eval_when_frames(&pooled)
}

/// Clip-level tagger AUC over the test split's weak labels.
pub fn eval_who_model<E: Element>(
    tape: &mut Tape<E>,
    model: &ModelGraph<E>,
    prep: &PreparedDataset,
) -> Result<EvalReport> {
    let recs = &prep.split.test;
    if recs.is_empty() {
        return Err(Error::Eval("empty test split".into()));
    }
    let n_labels = prep.split.vocab.len();
    if n_labels == 0 {
        return Err(Error::Eval("empty class vocabulary".into()));
    }
    let mut predictions = Vec::with_capacity(recs.len());
    let mut targets = Vec::with_capacity(recs.len());
    let mark = tape.mark();
    let indices: Vec<usize> = (0..recs.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = batch_input(tape, prep, recs, chunk)?;
        let out = model.forward(tape, x, Mode::Eval)?;
        check_finite(tape, out, "tagger evaluation")?;
        let data = tape.value(out).data().to_vec();
        for (row, &idx) in chunk.iter().enumerate() {
            let rec = &recs[idx];
            predictions.push(
                data[row * n_labels..(row + 1) * n_labels]
                    .iter()
                    .map(|&v| v.to_f32())
                    .collect::<Vec<f32>>(),
            );
            let mut t = vec![false; n_labels];
            for class in &rec.weak_labels {
                if let Some(c) = prep.split.class_index(class) {
                    t[c] = true;
                }
            }
            targets.push(t);
        }
        tape.reset_to(mark);
    }
    metrics::eval_who_cliplabels(&prep.split.vocab, &predictions, &targets)
}

/// Reject non-finite model outputs (e.g. from a corrupted checkpoint)
/// before they reach a ranking.
pub fn check_finite<E: Element>(tape: &Tape<E>, v: Var, what: &str) -> Result<()> {
    if !tape.value(v).all_finite() {
        return Err(Error::NonFinite(format!("{what} produced a non-finite value")));
    }
    Ok(())
}

/// Models rebuilt from a run directory, ready for evaluation.
pub struct RestoredModels<E: Element> {
    pub tape: Tape<E>,
    pub when: Option<ModelGraph<E>>,
    pub who: Option<ModelGraph<E>>,
}

/// Rebuild the models a run directory describes and load their checkpoint
/// state: `when.ckpt`/`who.ckpt` for the separate and tied regimes,
/// `joint.ckpt` (which holds the trunk and both heads) for joint runs.
pub fn restore_models<E: Element>(
    run_dir: &std::path::Path,
    plan: &crate::train::TrainPlan,
    prep: &PreparedDataset,
) -> Result<RestoredModels<E>> {
    use crate::layers::{build_when, build_who, checkpoint, Initializer};
    use crate::train::Regime;

    let mut tape = Tape::<E>::new();
    let mut init = Initializer::new(plan.seed);
    let n_labels = prep.split.vocab.len().max(1);
    let (when_src, who_src) = match plan.regime {
        Regime::Joint => (run_dir.join("joint.ckpt"), run_dir.join("joint.ckpt")),
        _ => (run_dir.join("when.ckpt"), run_dir.join("who.ckpt")),
    };
    let mut when = if when_src.exists() {
        Some(build_when(
            &mut tape,
            &mut init,
            prep.target_frames,
            N_BANDS,
            plan.feature_maps,
            plan.gru_units,
        )?)
    } else {
        None
    };
    let mut who = if who_src.exists() {
        Some(build_who(
            &mut tape,
            &mut init,
            prep.target_frames,
            N_BANDS,
            plan.feature_maps,
            n_labels,
        )?)
    } else {
        None
    };
    if when.is_none() && who.is_none() {
        return Err(Error::Checkpoint(format!(
            "no checkpoints found in {}",
            run_dir.display()
        )));
    }
    if let Some(m) = when.as_mut() {
        m.restore(&mut tape, &checkpoint::load(&when_src)?)?;
    }
    if let Some(m) = who.as_mut() {
        m.restore(&mut tape, &checkpoint::load(&who_src)?)?;
    }
    Ok(RestoredModels { tape, when, who })
}

/// Read back the `plan.json` of a run directory.
pub fn read_plan(run_dir: &std::path::Path) -> Result<crate::train::TrainPlan> {
    let path = run_dir.join("plan.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: bad plan: {e}", path.display())))
}
