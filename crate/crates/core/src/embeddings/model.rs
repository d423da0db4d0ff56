use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::normalizer::Normalizer;
use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::linalg::{AggregatePlan, DenseMatrix, Gradients, Tape, Var};

/// Checkpoint format tag.
pub const CHECKPOINT_FORMAT: &str = "ckpm-v1";

/// Sizes that fix the parameter shapes of a [`KoopmanModel`]. None of them
/// depend on the number of objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub state_dim: usize,
    pub num_object_types: usize,
    /// Width of the one-hot relation attribute (the catalog's `h`).
    pub num_relation_types: usize,
    pub m: usize,
    pub hidden: usize,
}

impl ModelShape {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn for_graph(graph: &SceneGraph, state_dim: usize, m: usize, hidden: usize) -> Self {
        Self {
            state_dim,
            num_object_types: graph.num_object_types(),
            num_relation_types: graph.h(),
            m,
            hidden,
        }
    }

    pub fn check_graph(&self, graph: &SceneGraph) -> Result<()> {
        if graph.num_object_types() != self.num_object_types || graph.h() != self.num_relation_types {
            return Err(Error::Config(format!(
                "graph has {} object types and {} relation types, model expects {} and {}",
                graph.num_object_types(),
                graph.h(),
                self.num_object_types,
                self.num_relation_types
            )));
        }
        Ok(())
    }
}

/// One round of interaction-network message passing:
/// `e_k = f_R(o_u, o_v, a_k)`, `out_i = f_O(o_i, Σ_{k→i} e_k)` with
/// `o_i = [features_i, object attributes_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNet {
    pub relation: Mlp,
    pub object: Mlp,
}

impl GraphNet {
    fn new(node_in: usize, out: usize, shape: &ModelShape, rng: &mut ChaCha8Rng) -> Self {
        let o = node_in + shape.num_object_types;
        let hdim = shape.hidden;
        Self {
            relation: Mlp::new(&[2 * o + shape.num_relation_types, hdim, hdim, hdim], rng),
            object: Mlp::new(&[o + hdim, hdim, hdim, out], rng),
        }
    }

    fn forward(&self, x: &DenseMatrix, batch: &GraphBatch) -> Result<DenseMatrix> {
        let o = DenseMatrix::hcat(&[x, &batch.object_attributes])?;
        let effects = if batch.senders.is_empty() {
            DenseMatrix::zeros(o.rows(), self.relation.output_dim())
        } else {
            let s = gather(&o, &batch.senders);
            let r = gather(&o, &batch.receivers);
            let e = self.relation.forward(&DenseMatrix::hcat(&[&s, &r, &batch.relation_attributes])?)?;
            batch.plan.apply(&e)?
        };
        self.object.forward(&DenseMatrix::hcat(&[&o, &effects])?)
    }

    fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var, batch: &GraphBatch) -> Result<Var> {
        let split = 2 * self.relation.num_layers();
        let attrs = tape.constant(batch.object_attributes.clone());
        let o = tape.concat_cols(&[x, attrs])?;
        let effects = if batch.senders.is_empty() {
            tape.constant(DenseMatrix::zeros(tape.shape(o).0, self.relation.output_dim()))
        } else {
            let s = tape.gather_rows(o, batch.senders.clone())?;
            let r = tape.gather_rows(o, batch.receivers.clone())?;
            let a = tape.constant(batch.relation_attributes.clone());
            let input = tape.concat_cols(&[s, r, a])?;
            let e = Mlp::forward_tape(tape, &params[..split], input)?;
            tape.aggregate(e, batch.plan.clone())?
        };
        let input = tape.concat_cols(&[o, effects])?;
        Mlp::forward_tape(tape, &params[split..], input)
    }

    fn params(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = Vec::new();
        for (name, mlp) in [("relation", &self.relation), ("object", &self.object)] {
            for (k, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
                out.push((format!("{name}.l{k}.weight"), w));
                out.push((format!("{name}.l{k}.bias"), b));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = Vec::new();
        for mlp in [&mut self.relation, &mut self.object] {
            for (w, b) in mlp.weights.iter_mut().zip(mlp.biases.iter_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        out
    }
}

fn gather(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), m.cols());
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).copy_from_slice(m.row(r));
    }
    out
}

/// Index bookkeeping for running a [`GraphNet`] over `steps` stacked copies of
/// one scene graph. Row `t·N + i` holds object `i` at step `t`.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_objects: usize,
    pub steps: usize,
    object_attributes: DenseMatrix,
    relation_attributes: DenseMatrix,
    senders: Rc<[usize]>,
    receivers: Rc<[usize]>,
    plan: Rc<AggregatePlan>,
}

impl GraphBatch {
    pub fn new(graph: &SceneGraph, steps: usize) -> Self {
        let n = graph.num_objects();
        let rels = graph.relations();
        let obj = graph.object_attributes();
        let rel = graph.relation_attributes();
        let mut object_attributes = DenseMatrix::zeros(n * steps, obj.cols());
        let mut relation_attributes = DenseMatrix::zeros(rels.len() * steps, rel.cols());
        let mut senders = Vec::with_capacity(rels.len() * steps);
        let mut receivers = Vec::with_capacity(rels.len() * steps);
        let mut plan = AggregatePlan::new(n * steps, 1);
        for t in 0..steps {
            object_attributes.set_block(t * n, 0, &obj);
            relation_attributes.set_block(t * rels.len(), 0, &rel);
            for (k, r) in rels.iter().enumerate() {
                senders.push(t * n + r.sender);
                receivers.push(t * n + r.receiver);
                plan.push(t * n + r.receiver, t * rels.len() + k, 0);
            }
        }
        Self {
            num_objects: n,
            steps,
            object_attributes,
            relation_attributes,
            senders: senders.into(),
            receivers: receivers.into(),
            plan: Rc::new(plan),
        }
    }

    pub fn rows(&self) -> usize {
        self.num_objects * self.steps
    }
}

/// Graph encoder `φ`, graph decoder `ψ` and the state standardization they
/// operate under.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub shape: ModelShape,
    pub encoder: GraphNet,
    pub decoder: GraphNet,
    pub normalizer: Normalizer,
    /// Free-form run metadata carried through checkpoints.
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Tape handles for every parameter of a model, in [`KoopmanModel::param_names`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    split: usize,
}

impl BoundModel {
    fn encoder(&self) -> &[Var] {
        &self.vars[..self.split]
    }

    fn decoder(&self) -> &[Var] {
        &self.vars[self.split..]
    }
}

impl KoopmanModel {
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = GraphNet::new(shape.state_dim, shape.m, &shape, &mut rng);
        let decoder = GraphNet::new(shape.m, shape.state_dim, &shape, &mut rng);
        Self {
            shape,
            encoder,
            decoder,
            normalizer: Normalizer::identity(shape.state_dim),
            meta: BTreeMap::new(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let enc = self.encoder.params().into_iter().map(|(n, _)| format!("encoder.{n}"));
        let dec = self.decoder.params().into_iter().map(|(n, _)| format!("decoder.{n}"));
        enc.chain(dec).collect()
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        let enc = self.encoder.params().into_iter().map(|(_, p)| p);
        let dec = self.decoder.params().into_iter().map(|(_, p)| p);
        enc.chain(dec).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_rows(&self, graph: &SceneGraph, x: &DenseMatrix, width: usize, op: &'static str) -> Result<()> {
        self.shape.check_graph(graph)?;
        let n = graph.num_objects();
        if x.cols() != width || n == 0 || x.rows() % n != 0 {
            return Err(Error::dim(op, x.shape(), (n, width)));
        }
        Ok(())
    }

    /// Encodes standardized states stacked as `(steps·N) × d`.
    pub fn encode_normalized(&self, graph: &SceneGraph, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(graph, x, self.shape.state_dim, "encode")?;
        let batch = GraphBatch::new(graph, x.rows() / graph.num_objects());
        self.encoder.forward(x, &batch)
    }

    /// Decodes stacked embeddings to standardized states.
    pub fn decode_normalized(&self, graph: &SceneGraph, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(graph, g, self.shape.m, "decode")?;
        let batch = GraphBatch::new(graph, g.rows() / graph.num_objects());
        self.decoder.forward(g, &batch)
    }

    /// `φ(x)` for raw `N × d` (or stacked `(steps·N) × d`) states.
    pub fn encode(&self, graph: &SceneGraph, states: &DenseMatrix) -> Result<DenseMatrix> {
        self.encode_normalized(graph, &self.normalizer.apply(states)?)
    }

    /// `ψ(g)` back to raw state units.
    pub fn decode(&self, graph: &SceneGraph, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.normalizer.invert(&self.decode_normalized(graph, g)?)
    }

    /// Registers every parameter on `tape`, as trainable variables or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let vars = self
            .params()
            .into_iter()
            .map(|p| if trainable { tape.var(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        BoundModel {
            vars,
            split: self.encoder.params().len(),
        }
    }

    /// Uses existing tape variables, in [`Self::param_names`] order, as the parameters.
    pub fn bind_vars(&self, tape: &Tape, vars: Vec<Var>) -> Result<BoundModel> {
        let params = self.params();
        if vars.len() != params.len() {
            return Err(Error::dim("bind", (vars.len(), 1), (params.len(), 1)));
        }
        for (v, p) in vars.iter().zip(&params) {
            if tape.shape(*v) != p.shape() {
                return Err(Error::dim("bind", tape.shape(*v), p.shape()));
            }
        }
        Ok(BoundModel {
            vars,
            split: self.encoder.params().len(),
        })
    }

    pub fn encode_tape(&self, tape: &mut Tape, bound: &BoundModel, batch: &GraphBatch, x: Var) -> Result<Var> {
        if tape.shape(x) != (batch.rows(), self.shape.state_dim) {
            return Err(Error::dim("encode", tape.shape(x), (batch.rows(), self.shape.state_dim)));
        }
        self.encoder.forward_tape(tape, bound.encoder(), x, batch)
    }

    pub fn decode_tape(&self, tape: &mut Tape, bound: &BoundModel, batch: &GraphBatch, g: Var) -> Result<Var> {
        if tape.shape(g) != (batch.rows(), self.shape.m) {
            return Err(Error::dim("decode", tape.shape(g), (batch.rows(), self.shape.m)));
        }
        self.decoder.forward_tape(tape, bound.decoder(), g, batch)
    }

    /// Parameter adjoints in [`KoopmanModel::params`] order.
    pub fn collect_grads(&self, bound: &BoundModel, grads: &Gradients) -> Vec<DenseMatrix> {
        bound.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, p)| {
                let layer = Layer {
                    shape: [p.rows(), p.cols()],
                    data: p.data().to_vec(),
                };
                (name, layer)
            })
            .collect();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            shape: self.shape,
            normalizer: self.normalizer.clone(),
            meta: self.meta.clone(),
            layers,
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        if ckpt.normalizer.dim() != ckpt.shape.state_dim {
            return Err(Error::Config("normalizer width differs from state width".into()));
        }
        let mut model = KoopmanModel::new(ckpt.shape, 0);
        let names = model.param_names();
        for (name, param) in names.iter().zip(model.params_mut()) {
            let layer = ckpt
                .layers
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks layer {name}")))?;
            if layer.shape != [param.rows(), param.cols()] {
                return Err(Error::Config(format!(
                    "layer {name} has shape {:?}, expected {:?}",
                    layer.shape,
                    param.shape()
                )));
            }
            *param = DenseMatrix::new(layer.shape[0], layer.shape[1], layer.data)?;
        }
        if let Some(extra) = ckpt.layers.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown layer {extra}")));
        }
        model.normalizer = ckpt.normalizer;
        model.meta = ckpt.meta;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Layer {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    shape: ModelShape,
    normalizer: Normalizer,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    layers: BTreeMap<String, Layer>,
}
