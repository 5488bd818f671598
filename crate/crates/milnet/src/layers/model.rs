//! The detector (WHEN) and tagger (WHO) model graphs over a shared trunk
//! architecture.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::checkpoint::StateEntry;
use super::init::Initializer;
use super::{global_average_pool, BatchNorm, BiGru, Conv2d, Dense, Mode, ParamList};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// l2 kernel coefficients per layer family.
pub const CONV_L2: f64 = 0.001;
pub const GRU_L2: f64 = 0.01;
pub const WHEN_DENSE_L2: f64 = 0.01;
pub const WHO_DENSE_L2: f64 = 0.001;

/// Required mel band count at the input.
pub const INPUT_BANDS: usize = 40;

/// Frequency pool widths applied after blocks 2, 4 and 6: 40 → 8 → 2 → 1.
pub const POOL_WIDTHS: [usize; 3] = [5, 4, 2];

struct ConvBlock<E: Element> {
    conv: Conv2d,
    bn: BatchNorm<E>,
}

/// The shared convolutional trunk: six conv+bn+ReLU blocks with a frequency
/// max-pool after every second block.
pub struct Trunk<E: Element> {
    blocks: Vec<ConvBlock<E>>,
    pub feature_maps: usize,
}

impl<E: Element> Trunk<E> {
    pub fn build(tape: &mut Tape<E>, init: &mut Initializer, feature_maps: usize) -> Self {
        let mut blocks = Vec::with_capacity(6);
        for i in 0..6 {
            let in_maps = if i == 0 { 1 } else { feature_maps };
            blocks.push(ConvBlock {
                conv: Conv2d::build(tape, init, (3, 3), in_maps, feature_maps, CONV_L2),
                bn: BatchNorm::build(tape, feature_maps),
            });
        }
        Trunk {
            blocks,
            feature_maps,
        }
    }

    /// `[B, T, F, 1] -> [B, T, F/40, C]`; with 40 input bands the frequency
    /// axis collapses to 1.
    pub fn forward(&mut self, tape: &mut Tape<E>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, x, mode, &mut Vec::new())
    }

    /// Forward pass that also reports the shape after every layer stage.
    pub fn forward_traced(
        &mut self,
        tape: &mut Tape<E>,
        x: Var,
        mode: Mode,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Var> {
        let mut v = x;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            v = block.conv.forward(tape, v)?;
            trace.push((format!("conv{}", i + 1), tape.value(v).shape().to_vec()));
            v = block.bn.forward(tape, v, mode)?;
            v = tape.relu(v);
            trace.push((format!("relu{}", i + 1), tape.value(v).shape().to_vec()));
            if i % 2 == 1 {
                let width = POOL_WIDTHS[i / 2];
                v = tape.maxpool2d(v, (1, width))?;
                trace.push((
                    format!("pool1x{width}"),
                    tape.value(v).shape().to_vec(),
                ));
            }
        }
        Ok(v)
    }

    pub fn parameters(&self) -> ParamList {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("trunk.block{}", i + 1);
            out.push((format!("{p}.conv.kernel"), b.conv.kernel));
            out.push((format!("{p}.conv.bias"), b.conv.bias));
            out.push((format!("{p}.bn.gamma"), b.bn.gamma));
            out.push((format!("{p}.bn.beta"), b.bn.beta));
        }
        out
    }

    pub fn l2_terms(&self) -> Vec<(Var, f64)> {
        self.blocks
            .iter()
            .map(|b| (b.conv.kernel, b.conv.l2))
            .collect()
    }

    fn collect_state(&self, tape: &Tape<E>, out: &mut Vec<StateEntry>) {
        for (name, var) in self.parameters() {
            out.push(StateEntry::from_tensor(name, tape.value(var)));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("trunk.block{}", i + 1);
            out.push(StateEntry::from_slice(
                format!("{p}.bn.running_mean"),
                &b.bn.running_mean,
            ));
            out.push(StateEntry::from_slice(
                format!("{p}.bn.running_var"),
                &b.bn.running_var,
            ));
        }
    }

    fn restore_state(
        &mut self,
        tape: &mut Tape<E>,
        entries: &BTreeMap<String, &StateEntry>,
    ) -> Result<()> {
        for (name, var) in self.parameters() {
            restore_param(tape, entries, &name, var)?;
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("trunk.block{}", i + 1);
            b.bn.running_mean = lookup(entries, &format!("{p}.bn.running_mean"))?.to_elements();
            b.bn.running_var = lookup(entries, &format!("{p}.bn.running_var"))?.to_elements();
        }
        Ok(())
    }
}

/// Recurrent detector head: two bidirectional GRU layers followed by
/// time-distributed dense layers down to one sigmoid unit per frame.
pub struct WhenHead {
    gru1: BiGru,
    gru2: BiGru,
    dense1: Dense,
    dense2: Dense,
    pub gru_units: usize,
}

impl WhenHead {
    pub fn build<E: Element>(
        tape: &mut Tape<E>,
        init: &mut Initializer,
        in_maps: usize,
        gru_units: usize,
    ) -> Self {
        let gru1 = BiGru::build(tape, init, in_maps, gru_units, GRU_L2);
        let gru2 = BiGru::build(tape, init, 2 * gru_units, gru_units, GRU_L2);
        let dense1 = Dense::build(tape, init, 2 * gru_units, gru_units, WHEN_DENSE_L2);
        let dense2 = Dense::build(tape, init, gru_units, 1, WHEN_DENSE_L2);
        WhenHead {
            gru1,
            gru2,
            dense1,
            dense2,
            gru_units,
        }
    }

    /// `[B, T, 1, C] -> [B, T]`, every value in (0, 1).
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, trunk_out: Var) -> Result<Var> {
        let shape = tape.value(trunk_out).shape().to_vec();
        let (batch, time, fcols, maps) = (shape[0], shape[1], shape[2], shape[3]);
        if fcols != 1 {
            return Err(Error::Model(format!(
                "detector head expects a collapsed frequency axis, got {fcols} columns"
            )));
        }
        let seq = tape.reshape(trunk_out, vec![batch, time, maps])?;
        let seq = self.gru1.forward(tape, seq)?;
        let seq = self.gru2.forward(tape, seq)?;
        let flat = tape.reshape(seq, vec![batch * time, 2 * self.gru_units])?;
        let hidden = self.dense1.forward(tape, flat)?;
        let hidden = tape.relu(hidden);
        let logit = self.dense2.forward(tape, hidden)?;
        let prob = tape.sigmoid(logit);
        Ok(tape.reshape(prob, vec![batch, time])?)
    }

    pub fn parameters(&self) -> ParamList {
        let mut out = Vec::new();
        for (i, gru) in [(1, &self.gru1), (2, &self.gru2)] {
            for (dir, d) in [("fwd", &gru.fwd), ("bwd", &gru.bwd)] {
                let p = format!("when.gru{i}.{dir}");
                out.push((format!("{p}.w"), d.w));
                out.push((format!("{p}.u_zr"), d.u_zr));
                out.push((format!("{p}.u_c"), d.u_c));
                out.push((format!("{p}.b"), d.b));
            }
        }
        out.push(("when.dense1.kernel".into(), self.dense1.kernel));
        out.push(("when.dense1.bias".into(), self.dense1.bias));
        out.push(("when.dense2.kernel".into(), self.dense2.kernel));
        out.push(("when.dense2.bias".into(), self.dense2.bias));
        out
    }

    pub fn l2_terms(&self) -> Vec<(Var, f64)> {
        let mut out = Vec::new();
        for gru in [&self.gru1, &self.gru2] {
            for d in [&gru.fwd, &gru.bwd] {
                out.push((d.w, gru.l2));
                out.push((d.u_zr, gru.l2));
                out.push((d.u_c, gru.l2));
            }
        }
        out.push((self.dense1.kernel, self.dense1.l2));
        out.push((self.dense2.kernel, self.dense2.l2));
        out
    }
}

/// Tagger head: global average pooling over time and frequency, then one
/// dense sigmoid layer sized to the label vocabulary.
pub struct WhoHead {
    dense: Dense,
    pub num_labels: usize,
}

impl WhoHead {
    pub fn build<E: Element>(
        tape: &mut Tape<E>,
        init: &mut Initializer,
        in_maps: usize,
        num_labels: usize,
    ) -> Self {
        WhoHead {
            dense: Dense::build(tape, init, in_maps, num_labels, WHO_DENSE_L2),
            num_labels,
        }
    }

    /// `[B, T, F', C] -> [B, num_labels]`, every value in (0, 1).
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, trunk_out: Var) -> Result<Var> {
        let pooled = global_average_pool(tape, trunk_out)?;
        let logits = self.dense.forward(tape, pooled)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn parameters(&self) -> ParamList {
        vec![
            ("who.dense.kernel".into(), self.dense.kernel),
            ("who.dense.bias".into(), self.dense.bias),
        ]
    }

    pub fn l2_terms(&self) -> Vec<(Var, f64)> {
        vec![(self.dense.kernel, self.dense.l2)]
    }

}

/// Head of a built model.
pub enum Head {
    When(WhenHead),
    Who(WhoHead),
}

/// A parameterised model: a (possibly shared) trunk plus one task head.
///
/// Trunks are reference-counted so the joint and tied-weights training
/// regimes can physically share trunk parameters — and their batch-norm
/// running statistics — between two graphs.
pub struct ModelGraph<E: Element> {
    pub trunk: Rc<RefCell<Trunk<E>>>,
    pub head: Head,
    /// Expected input frame count (the models are time-polymorphic; this is
    /// informational and echoed in checkpoints' metadata).
    pub frames: usize,
}

impl<E: Element> ModelGraph<E> {
    /// Full forward pass from `[B, T, F, 1]` input features.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, mode: Mode) -> Result<Var> {
        let trunk_out = self.trunk.borrow_mut().forward(tape, x, mode)?;
        match &self.head {
            Head::When(h) => h.forward(tape, trunk_out),
            Head::Who(h) => h.forward(tape, trunk_out),
        }
    }

    /// Forward from an already-computed trunk output (shared-trunk regimes
    /// run the trunk once per batch).
    pub fn forward_head(&self, tape: &mut Tape<E>, trunk_out: Var) -> Result<Var> {
        match &self.head {
            Head::When(h) => h.forward(tape, trunk_out),
            Head::Who(h) => h.forward(tape, trunk_out),
        }
    }

    pub fn head_parameters(&self) -> ParamList {
        match &self.head {
            Head::When(h) => h.parameters(),
            Head::Who(h) => h.parameters(),
        }
    }

    /// Trunk followed by head parameters, in stable registration order.
    pub fn parameters(&self) -> ParamList {
        let mut out = self.trunk.borrow().parameters();
        out.extend(self.head_parameters());
        out
    }

    pub fn l2_terms(&self) -> Vec<(Var, f64)> {
        let mut out = self.trunk.borrow().l2_terms();
        out.extend(match &self.head {
            Head::When(h) => h.l2_terms(),
            Head::Who(h) => h.l2_terms(),
        });
        out
    }

    /// Everything needed to rebuild the model: parameters plus batch-norm
    /// running statistics, in stable order.
    pub fn state(&self, tape: &Tape<E>) -> Vec<StateEntry> {
        let mut out = Vec::new();
        self.trunk.borrow().collect_state(tape, &mut out);
        for (name, var) in self.head_parameters() {
            out.push(StateEntry::from_tensor(name, tape.value(var)));
        }
        out
    }

    pub fn restore(&mut self, tape: &mut Tape<E>, entries: &[StateEntry]) -> Result<()> {
        let by_name: BTreeMap<String, &StateEntry> = entries
            .iter()
            .map(|e| (e.name.clone(), e))
            .collect();
        self.trunk.borrow_mut().restore_state(tape, &by_name)?;
        for (name, var) in self.head_parameters() {
            restore_param(tape, &by_name, &name, var)?;
        }
        Ok(())
    }
}

fn lookup<'a>(
    entries: &BTreeMap<String, &'a StateEntry>,
    name: &str,
) -> Result<&'a StateEntry> {
    entries
        .get(name)
        .copied()
        .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
}

fn restore_param<E: Element>(
    tape: &mut Tape<E>,
    entries: &BTreeMap<String, &StateEntry>,
    name: &str,
    var: Var,
) -> Result<()> {
    let entry = lookup(entries, name)?;
    let value = tape.value_mut(var);
    if value.shape() != entry.shape.as_slice() {
        return Err(Error::Checkpoint(format!(
            "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
            entry.shape,
            value.shape()
        )));
    }
    for (dst, &src) in value.data_mut().iter_mut().zip(&entry.data) {
        *dst = E::from_f32(src);
    }
    Ok(())
}

/// Build the frame detector: shared-architecture trunk, two bidirectional
/// GRU layers, and time-distributed dense layers ending in one sigmoid unit
/// per frame.
pub fn build_when<E: Element>(
    tape: &mut Tape<E>,
    init: &mut Initializer,
    frames: usize,
    bands: usize,
    feature_maps: usize,
    gru_units: usize,
) -> Result<ModelGraph<E>> {
    check_bands(bands)?;
    let trunk = Rc::new(RefCell::new(Trunk::build(tape, init, feature_maps)));
    let head = WhenHead::build(tape, init, feature_maps, gru_units);
    Ok(ModelGraph {
        trunk,
        head: Head::When(head),
        frames,
    })
}

/// Build the clip tagger: the same trunk architecture, global average
/// pooling, and a dense sigmoid layer over the label vocabulary.
pub fn build_who<E: Element>(
    tape: &mut Tape<E>,
    init: &mut Initializer,
    frames: usize,
    bands: usize,
    feature_maps: usize,
    num_labels: usize,
) -> Result<ModelGraph<E>> {
    check_bands(bands)?;
    if num_labels < 1 {
        return Err(Error::Model("tagger needs at least one label".into()));
    }
    let trunk = Rc::new(RefCell::new(Trunk::build(tape, init, feature_maps)));
    let head = WhoHead::build(tape, init, feature_maps, num_labels);
    Ok(ModelGraph {
        trunk,
        head: Head::Who(head),
        frames,
    })
}

fn check_bands(bands: usize) -> Result<()> {
    if bands != INPUT_BANDS {
        return Err(Error::Model(format!(
            "models are built for {INPUT_BANDS} mel bands, got {bands}"
        )));
    }
    Ok(())
}

// ── Parameter vector utilities (optimisers, gradient checks) ───────────

/// All parameter values flattened to one `f64` vector, in list order.
pub fn flatten_params<E: Element>(tape: &Tape<E>, params: &[(String, Var)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, v) in params {
        out.extend(tape.value(*v).data().iter().map(|x| x.to_f64()));
    }
    out
}

/// Write a flat vector back into the parameters (inverse of
/// [`flatten_params`]).
pub fn assign_params<E: Element>(tape: &mut Tape<E>, params: &[(String, Var)], flat: &[f64]) {
    let mut i = 0;
    for (_, v) in params {
        let data = tape.value_mut(*v).data_mut();
        for d in data.iter_mut() {
            *d = E::from_f64(flat[i]);
            i += 1;
        }
    }
    assert_eq!(i, flat.len(), "flat vector length mismatch");
}

/// Accumulated gradients flattened to one `f64` vector, zeros where a
/// parameter received none.
pub fn flatten_grads<E: Element>(tape: &Tape<E>, params: &[(String, Var)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, v) in params {
        match tape.grad(*v) {
            Some(g) => out.extend(g.iter().map(|x| x.to_f64())),
            None => out.extend(std::iter::repeat_n(0.0, tape.value(*v).numel())),
        }
    }
    out
}
