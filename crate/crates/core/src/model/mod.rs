//! The pulse estimation network: stacked blocks of multi-kernel temporal
//! mixing followed by graph convolution over the face-region graph, with
//! spatial pooling at fixed depths and a linear readout head. Parameters
//! live in a named store so optimizers, checkpoints and tests can address
//! every tensor individually.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Shape, SparseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::mesh::Vec3;
use crate::pool;

/// How features travel between nodes inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Normalized-adjacency propagation over the region graph, with
    /// geometry-driven cluster pooling. Permutation equivariant.
    MeshGraph,
    /// Learned depthwise convolution along the node index axis, with
    /// contiguous-block pooling. Depends on node ordering.
    NodeMix,
}

impl ModelVariant {
    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::MeshGraph => "mesh_graph",
            ModelVariant::NodeMix => "node_mix",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "mesh_graph" => Ok(ModelVariant::MeshGraph),
            "node_mix" => Ok(ModelVariant::NodeMix),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

/// Static description of the network: enough to rebuild the parameter
/// store and the forward graph for any compatible input.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub in_channels: usize,
    /// Output channels of each block, in order.
    pub channels: Vec<usize>,
    /// 0-based block indices after which the node set is pooled …4:1.
    pub pool_after: Vec<usize>,
    /// Kernel lengths of the three temporal branches.
    pub temporal_kernels: [usize; 3],
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub variant: ModelVariant,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 32, 64, 128, 128],
            pool_after: vec![1, 2, 3],
            temporal_kernels: [3, 5, 9],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            variant: ModelVariant::MeshGraph,
        }
    }
}

impl ArchitectureSpec {
    /// Smaller network for fast experiments: same block structure with
    /// custom widths and pooling depths.
    pub fn with_channels(channels: &[usize], pool_after: &[usize]) -> Self {
        Self {
            channels: channels.to_vec(),
            pool_after: pool_after.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        if self.in_channels == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let l = self.channels.len();
        let mut prev = None;
        for &p in &self.pool_after {
            if p + 1 >= l {
                return Err(Error::Config(format!(
                    "cannot pool after block {p}: only {l} blocks"
                )));
            }
            if prev.is_some_and(|q| p <= q) {
                return Err(Error::Config("pool_after must be strictly increasing".into()));
            }
            prev = Some(p);
        }
        for &k in &self.temporal_kernels {
            if k % 2 == 0 || k == 0 {
                return Err(Error::Config("temporal kernels must be odd".into()));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bad batchnorm settings".into()));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.channels.len()
    }

    /// Pooling steps completed before block `l` runs.
    pub fn level_of_block(&self, l: usize) -> usize {
        self.pool_after.iter().filter(|&&p| p < l).count()
    }

    pub fn level_count(&self) -> usize {
        self.pool_after.len() + 1
    }
}

/// The node-set chain the network runs over: adjacency at every level and
/// the cluster assignment of each pooling step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHierarchy {
    /// Adjacency per level; `adjacency[0]` is the input graph.
    pub adjacency: Vec<SparseAdjacency>,
    /// `assignments[s][i]` maps level-`s` node `i` to its level-`s+1` cluster.
    pub assignments: Vec<Vec<u32>>,
}

impl ModelHierarchy {
    /// Coarsens `adjacency` through `steps` 4:1 reductions. With node
    /// positions the clusters come from farthest-point geometry seeding;
    /// without them nodes are grouped into contiguous index blocks.
    pub fn build(
        adjacency: &SparseAdjacency,
        positions: Option<&[Vec3]>,
        steps: usize,
    ) -> Result<Self> {
        match positions {
            Some(pos) => {
                if pos.len() != adjacency.node_count() {
                    return Err(Error::Shape(format!(
                        "{} positions for {} nodes",
                        pos.len(),
                        adjacency.node_count()
                    )));
                }
                let h = pool::build_hierarchy(pos, adjacency, 4, steps, 0)?;
                let mut adjacency = vec![adjacency.clone()];
                let mut assignments = Vec::with_capacity(steps);
                for level in h.levels {
                    adjacency.push(level.pooled_adjacency);
                    assignments.push(level.assignment);
                }
                Ok(Self {
                    adjacency,
                    assignments,
                })
            }
            None => {
                let mut adj_chain = vec![adjacency.clone()];
                let mut assignments = Vec::with_capacity(steps);
                let mut n = adjacency.node_count();
                for _ in 0..steps {
                    let k = (n / 4).max(1);
                    let assignment = contiguous_blocks(n, k);
                    let pooled = pool::pool_adjacency(adj_chain.last().unwrap(), &assignment, k)?;
                    adj_chain.push(pooled);
                    assignments.push(assignment);
                    n = k;
                }
                Ok(Self {
                    adjacency: adj_chain,
                    assignments,
                })
            }
        }
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.adjacency.iter().map(|a| a.node_count()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.adjacency.is_empty() {
            return Err(Error::Shape("hierarchy has no levels".into()));
        }
        if self.assignments.len() + 1 != self.adjacency.len() {
            return Err(Error::Shape("one assignment needed per pooling step".into()));
        }
        for (s, assignment) in self.assignments.iter().enumerate() {
            if assignment.len() != self.adjacency[s].node_count() {
                return Err(Error::Shape(format!(
                    "assignment {s} length mismatches level node count"
                )));
            }
            pool::cluster_sizes(assignment, self.adjacency[s + 1].node_count())?;
        }
        for adj in &self.adjacency {
            if !adj.is_symmetric() || !adj.has_unit_diagonal() {
                return Err(Error::Shape(
                    "hierarchy adjacency must be symmetric with self loops".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Evenly sized index blocks; any remainder joins the last block.
fn contiguous_blocks(n: usize, k: usize) -> Vec<u32> {
    let block = n / k;
    (0..n).map(|i| ((i / block).min(k - 1)) as u32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<F: Real> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<F>,
    pub trainable: bool,
}

/// Ordered, name-addressable parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F: Real> {
    tensors: Vec<ParamTensor<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Shape,
        data: Vec<F>,
        trainable: bool,
    ) -> Result<()> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "tensor '{name}' data length {} != shape {shape:?}",
                data.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate tensor name '{name}'")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape,
            data,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Config(format!("unknown tensor '{name}'"))),
        }
    }

    pub fn tensors(&self) -> &[ParamTensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<F>] {
        &mut self.tensors
    }

    /// Total scalar count over trainable tensors.
    pub fn trainable_scalars(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum()
    }
}

/// Tape leaves for one forward build: maps tensor names to variable ids.
pub struct TapeBinding {
    vars: BTreeMap<String, VarId>,
}

impl TapeBinding {
    pub fn var(&self, name: &str) -> Result<VarId> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("tensor '{name}' not bound")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// Batch statistics observed by one training forward pass, keyed by the
/// normalization tensor prefix.
pub struct BnUpdate<F: Real> {
    pub prefix: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub struct ForwardOutput<F: Real> {
    /// Estimated pulse waveform, shape `(batch, 1, time, 1)`.
    pub prediction: VarId,
    /// Features after the temporal mixer of the last block, used by the
    /// spatial smoothness term.
    pub smooth_tap: VarId,
    /// Hierarchy level the tap lives on.
    pub tap_level: usize,
    /// Batch statistics to fold into running estimates (training only).
    pub bn_updates: Vec<BnUpdate<F>>,
}

/// The full network: architecture, node hierarchy and parameters, plus
/// cached operator forms of the per-level graphs.
pub struct MeshPhys<F: Real> {
    pub arch: ArchitectureSpec,
    pub hierarchy: ModelHierarchy,
    pub params: ParamStore<F>,
    /// Builder configuration tag of the graphs this model expects.
    pub region_tag: String,
    norm_adj: Vec<Arc<SparseMatrix<F>>>,
    assignments: Vec<Arc<Vec<u32>>>,
}

impl<F: Real> MeshPhys<F> {
    pub fn new(
        arch: ArchitectureSpec,
        hierarchy: ModelHierarchy,
        region_tag: &str,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        hierarchy.validate()?;
        if hierarchy.adjacency.len() != arch.level_count() {
            return Err(Error::Config(format!(
                "architecture needs {} hierarchy levels, got {}",
                arch.level_count(),
                hierarchy.adjacency.len()
            )));
        }
        let params = init_params(&arch, seed)?;
        Self::assemble(arch, hierarchy, params, region_tag.to_string())
    }

    /// Rebuilds the cached graph operators; used by `new` and by loading.
    pub(crate) fn assemble(
        arch: ArchitectureSpec,
        hierarchy: ModelHierarchy,
        params: ParamStore<F>,
        region_tag: String,
    ) -> Result<Self> {
        arch.validate()?;
        hierarchy.validate()?;
        let norm_adj = hierarchy
            .adjacency
            .iter()
            .map(|a| SparseMatrix::normalized_adjacency(a).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let assignments = hierarchy
            .assignments
            .iter()
            .map(|a| Arc::new(a.clone()))
            .collect();
        Ok(Self {
            arch,
            hierarchy,
            params,
            region_tag,
            norm_adj,
            assignments,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_scalars()
    }

    pub fn input_nodes(&self) -> usize {
        self.hierarchy.adjacency[0].node_count()
    }

    /// Graph Laplacian (degree minus adjacency, self loops dropped) at a
    /// hierarchy level, for smoothness penalties.
    pub fn laplacian_at(&self, level: usize) -> Result<SparseMatrix<F>> {
        let adj = self
            .hierarchy
            .adjacency
            .get(level)
            .ok_or_else(|| Error::Shape(format!("no hierarchy level {level}")))?;
        SparseMatrix::laplacian(adj)
    }

    /// Creates tape leaves for every trainable tensor.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<TapeBinding> {
        let mut vars = BTreeMap::new();
        for t in self.params.tensors() {
            if t.trainable {
                let id = tape.param(t.shape, t.data.clone())?;
                vars.insert(t.name.clone(), id);
            }
        }
        Ok(TapeBinding { vars })
    }

    /// Runs the network. `x` must be `(batch, in_channels, time, n0)` where
    /// `n0` is the input node count. In training mode normalization uses
    /// batch statistics and reports them; in inference mode it uses the
    /// stored running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        x: VarId,
        training: bool,
    ) -> Result<ForwardOutput<F>> {
        let sx = tape.shape(x);
        if sx.c != self.arch.in_channels || sx.n != self.input_nodes() {
            return Err(Error::Shape(format!(
                "input {sx:?} does not match {} channels and {} nodes",
                self.arch.in_channels,
                self.input_nodes()
            )));
        }
        let mut bn_updates = Vec::new();
        let mut h = x;
        let mut tap = None;
        let blocks = self.arch.block_count();
        for l in 0..blocks {
            let level = self.arch.level_of_block(l);
            let p = |rest: &str| format!("block{l}.{rest}");

            // Temporal mixer.
            let x0 = self.linear(tape, binding, h, &p("mix.in"))?;
            let mut gated = Vec::with_capacity(3);
            let mut logits = Vec::with_capacity(3);
            let mut branches = Vec::with_capacity(3);
            for br in 0..3 {
                let bp = |rest: &str| p(&format!("mix.branch{br}.{rest}"));
                let a = self.linear(tape, binding, x0, &bp("a"))?;
                let w = binding.var(&bp("dw.w"))?;
                let conv = tape.depthwise_conv_t(a, w)?;
                let b = self.linear(tape, binding, conv, &bp("b"))?;
                let normed = self.batchnorm(
                    tape,
                    binding,
                    b,
                    &bp("bn"),
                    training,
                    &mut bn_updates,
                )?;
                let y = tape.relu(normed);
                branches.push(y);
                let pooled = tape.gap(y);
                logits.push(self.linear(tape, binding, pooled, &bp("gate"))?);
            }
            let stacked = tape.concat_c(&logits)?;
            let weights = tape.softmax_c(stacked);
            for (br, &y) in branches.iter().enumerate() {
                let w = tape.select_c(weights, br, br + 1)?;
                gated.push(tape.mul(y, w)?);
            }
            let cat = tape.concat_c(&gated)?;
            let fused = self.linear(tape, binding, cat, &p("mix.fuse"))?;
            let mixed = tape.add(x0, fused)?;
            if l == blocks - 1 {
                tap = Some((mixed, level));
            }

            // Graph mixer with residual.
            let lin = self.linear(tape, binding, mixed, &p("gcn"))?;
            let propagated = match self.arch.variant {
                ModelVariant::MeshGraph => tape.sparse_propagate(lin, &self.norm_adj[level])?,
                ModelVariant::NodeMix => {
                    let w = binding.var(&p("gcn.nodeconv.w"))?;
                    tape.depthwise_conv_n(lin, w)?
                }
            };
            let normed = self.batchnorm(
                tape,
                binding,
                propagated,
                &p("gcn.bn"),
                training,
                &mut bn_updates,
            )?;
            let act = tape.relu(normed);
            h = tape.add(mixed, act)?;

            if let Some(step) = self.arch.pool_after.iter().position(|&q| q == l) {
                let k = self.hierarchy.adjacency[level + 1].node_count();
                h = tape.pool_nodes(h, &self.assignments[step], k)?;
            }
        }

        let node_mean = tape.reduce_mean(h, [false, false, false, true]);
        let prediction = self.linear(tape, binding, node_mean, &"head".to_string())?;
        let (smooth_tap, tap_level) = tap.expect("at least one block");
        Ok(ForwardOutput {
            prediction,
            smooth_tap,
            tap_level,
            bn_updates,
        })
    }

    fn linear(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        x: VarId,
        prefix: &str,
    ) -> Result<VarId> {
        let w = binding.var(&format!("{prefix}.w"))?;
        let b = binding.var(&format!("{prefix}.b"))?;
        let y = tape.pointwise_linear(x, w)?;
        tape.add(y, b)
    }

    fn batchnorm(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        x: VarId,
        prefix: &str,
        training: bool,
        updates: &mut Vec<BnUpdate<F>>,
    ) -> Result<VarId> {
        let gamma = binding.var(&format!("{prefix}.gamma"))?;
        let beta = binding.var(&format!("{prefix}.beta"))?;
        if training {
            let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.arch.bn_eps)?;
            updates.push(BnUpdate {
                prefix: prefix.to_string(),
                mean,
                var,
            });
            Ok(y)
        } else {
            let mean = &self.params.get(&format!("{prefix}.running_mean"))?.data;
            let var = &self.params.get(&format!("{prefix}.running_var"))?.data;
            let (mean, var) = (mean.clone(), var.clone());
            tape.batchnorm_eval(x, gamma, beta, &mean, &var, self.arch.bn_eps)
        }
    }

    /// Folds observed batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) -> Result<()> {
        let m = F::cast(self.arch.bn_momentum);
        let keep = F::one() - m;
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let t = self.params.get_mut(&format!("{}.{suffix}", u.prefix))?;
                if t.data.len() != batch.len() {
                    return Err(Error::Shape(format!(
                        "running stat '{}' length mismatch",
                        t.name
                    )));
                }
                for (r, &b) in t.data.iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn init_params<F: Real>(arch: &ArchitectureSpec, seed: u64) -> Result<ParamStore<F>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cast = |v: Vec<f64>| -> Vec<F> { v.into_iter().map(F::cast).collect() };
    let put = |store: &mut ParamStore<F>,
               name: String,
               shape: Shape,
               data: Vec<F>,
               trainable: bool|
     -> Result<()> { store.insert(&name, shape, data, trainable) };

    let add_linear = |store: &mut ParamStore<F>,
                          rng: &mut ChaCha8Rng,
                          prefix: String,
                          cin: usize,
                          cout: usize|
     -> Result<()> {
        let w = Shape::new(1, cout, cin, 1);
        store.insert(&format!("{prefix}.w"), w, cast(uniform(rng, w.len(), cin)), true)?;
        let b = Shape::new(1, cout, 1, 1);
        store.insert(&format!("{prefix}.b"), b, vec![F::zero(); cout], true)
    };
    let add_bn = |store: &mut ParamStore<F>, prefix: String, c: usize| -> Result<()> {
        let s = Shape::new(1, c, 1, 1);
        store.insert(&format!("{prefix}.gamma"), s, vec![F::one(); c], true)?;
        store.insert(&format!("{prefix}.beta"), s, vec![F::zero(); c], true)?;
        store.insert(&format!("{prefix}.running_mean"), s, vec![F::zero(); c], false)?;
        store.insert(&format!("{prefix}.running_var"), s, vec![F::one(); c], false)
    };

    let mut cin = arch.in_channels;
    for (l, &c) in arch.channels.iter().enumerate() {
        let p = |rest: &str| format!("block{l}.{rest}");
        add_linear(&mut store, &mut rng, p("mix.in"), cin, c)?;
        for br in 0..3 {
            let k = arch.temporal_kernels[br];
            let bp = |rest: &str| p(&format!("mix.branch{br}.{rest}"));
            add_linear(&mut store, &mut rng, bp("a"), c, c)?;
            let dw = Shape::new(1, c, k, 1);
            put(
                &mut store,
                bp("dw.w"),
                dw,
                cast(uniform(&mut rng, dw.len(), k)),
                true,
            )?;
            add_linear(&mut store, &mut rng, bp("b"), c, c)?;
            add_bn(&mut store, bp("bn"), c)?;
            add_linear(&mut store, &mut rng, bp("gate"), c, 1)?;
        }
        add_linear(&mut store, &mut rng, p("mix.fuse"), 3 * c, c)?;
        add_linear(&mut store, &mut rng, p("gcn"), c, c)?;
        if arch.variant == ModelVariant::NodeMix {
            let s = Shape::new(1, c, 3, 1);
            put(
                &mut store,
                p("gcn.nodeconv.w"),
                s,
                cast(uniform(&mut rng, s.len(), 3)),
                true,
            )?;
        }
        add_bn(&mut store, p("gcn.bn"), c)?;
        cin = c;
    }
    add_linear(&mut store, &mut rng, "head".to_string(), cin, 1)?;
    Ok(store)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::Rng;

    /// Ring-plus-chords graph with random positions; enough structure for
    /// pooling and propagation without synthesizing a face.
    pub fn tiny_hierarchy(n: usize, steps: usize, seed: u64) -> ModelHierarchy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<Vec3> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut pairs = Vec::new();
        for i in 0..n as u32 {
            pairs.push((i, (i + 1) % n as u32));
            pairs.push((i, (i + 2) % n as u32));
        }
        let adj = SparseAdjacency::from_pairs_symmetrized(n, &pairs).unwrap();
        ModelHierarchy::build(&adj, Some(&pos), steps).unwrap()
    }

    pub fn tiny_model_generic<F: Real>(seed: u64) -> MeshPhys<F> {
        let arch = ArchitectureSpec {
            in_channels: 3,
            channels: vec![4, 4],
            pool_after: vec![0],
            ..ArchitectureSpec::default()
        };
        let h = tiny_hierarchy(8, 1, 7);
        MeshPhys::new(arch, h, "test", seed).unwrap()
    }

    pub fn tiny_model_f32(seed: u64) -> MeshPhys<f32> {
        tiny_model_generic(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::{tiny_hierarchy, tiny_model_generic};
    use super::*;
    use crate::stgraph::{build_adjacency, EdgeScheme};
    use crate::synth::canonical_face_topology;

    fn tiny_model(seed: u64) -> MeshPhys<f64> {
        tiny_model_generic(seed)
    }

    #[test]
    fn default_architecture_parameter_count() {
        let topo = canonical_face_topology();
        let adj = build_adjacency(&topo, EdgeScheme::SharedVertex).unwrap();
        let pos: Vec<Vec3> = (0..topo.face_count())
            .map(|i| topo.canonical_face_centroid(i))
            .collect();
        let h = ModelHierarchy::build(&adj, Some(&pos), 3).unwrap();
        assert_eq!(h.node_counts(), vec![852, 213, 53, 13]);
        let model: MeshPhys<f32> =
            MeshPhys::new(ArchitectureSpec::default(), h, "t", 0).unwrap();
        assert_eq!(model.param_count(), 422_384);
        // Within 15% of the 0.47M budget.
        let target = 470_000.0;
        let count = model.param_count() as f64;
        assert!((count - target).abs() / target < 0.15);
    }

    #[test]
    fn node_mix_variant_adds_node_kernels_only() {
        let topo = canonical_face_topology();
        let adj = build_adjacency(&topo, EdgeScheme::SharedVertex).unwrap();
        let h = ModelHierarchy::build(&adj, None, 3).unwrap();
        let arch = ArchitectureSpec {
            variant: ModelVariant::NodeMix,
            ..ArchitectureSpec::default()
        };
        let model: MeshPhys<f32> = MeshPhys::new(arch.clone(), h, "t", 0).unwrap();
        let extra: usize = arch.channels.iter().map(|c| 3 * c).sum();
        assert_eq!(model.param_count(), 422_384 + extra);
        assert!(model.param_count() < 2 * 422_384);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = tiny_model(3);
        let make = || -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape).unwrap();
            let x_shape = Shape::new(2, 3, 12, 8);
            let data: Vec<f64> = (0..x_shape.len())
                .map(|i| ((i * 37 + 11) % 97) as f64 / 97.0 - 0.5)
                .collect();
            let x = tape.constant(x_shape, data).unwrap();
            let out = model.forward(&mut tape, &binding, x, true).unwrap();
            assert_eq!(tape.shape(out.prediction), Shape::new(2, 1, 12, 1));
            // Tap sits on the pooled level with the last block's width.
            assert_eq!(tape.shape(out.smooth_tap), Shape::new(2, 4, 12, 2));
            assert_eq!(out.tap_level, 1);
            tape.value(out.prediction).to_vec()
        };
        let a = make();
        let b = make();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn every_trainable_parameter_receives_gradient() {
        let model = tiny_model(5);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let x_shape = Shape::new(2, 3, 10, 8);
        let data: Vec<f64> = (0..x_shape.len())
            .map(|i| (((i * 29 + 5) % 83) as f64 / 83.0) - 0.4)
            .collect();
        let x = tape.constant(x_shape, data).unwrap();
        let out = model.forward(&mut tape, &binding, x, true).unwrap();
        let sq = tape.mul(out.prediction, out.prediction).unwrap();
        let loss = tape.reduce_mean(sq, [true, true, true, true]);
        let grads = tape.backward(loss).unwrap();
        for (name, id) in binding.entries() {
            let g = grads.wrt(id);
            assert!(g.is_some(), "no gradient for {name}");
            assert!(
                g.unwrap().iter().all(|v| v.is_finite()),
                "nonfinite gradient for {name}"
            );
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut model = tiny_model(11);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape).unwrap();
        let x_shape = Shape::new(2, 3, 10, 8);
        let data: Vec<f64> = (0..x_shape.len())
            .map(|i| ((i % 13) as f64) * 0.7 - 3.0)
            .collect();
        let x = tape.constant(x_shape, data).unwrap();
        let out = model.forward(&mut tape, &binding, x, true).unwrap();
        assert!(!out.bn_updates.is_empty());
        let before = model
            .params
            .get("block0.mix.branch0.bn.running_mean")
            .unwrap()
            .data
            .clone();
        model.apply_bn_updates(&out.bn_updates).unwrap();
        let after = model
            .params
            .get("block0.mix.branch0.bn.running_mean")
            .unwrap()
            .data
            .clone();
        assert_ne!(before, after);

        // Inference uses the stored statistics: changing them changes output.
        let eval = |model: &MeshPhys<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape).unwrap();
            let data: Vec<f64> = (0..x_shape.len())
                .map(|i| ((i % 13) as f64) * 0.7 - 3.0)
                .collect();
            let x = tape.constant(x_shape, data).unwrap();
            let out = model.forward(&mut tape, &binding, x, false).unwrap();
            tape.value(out.prediction).to_vec()
        };
        let y_after = eval(&model);
        model
            .params
            .get_mut("block0.mix.branch0.bn.running_mean")
            .unwrap()
            .data = before;
        let y_before = eval(&model);
        assert_ne!(y_after, y_before);
    }

    #[test]
    fn contiguous_blocks_cover_all_nodes() {
        let a = contiguous_blocks(10, 2);
        assert_eq!(a, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let b = contiguous_blocks(11, 2);
        assert_eq!(b, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let c = contiguous_blocks(5, 5);
        assert_eq!(c, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_mismatched_hierarchy_depth() {
        let arch = ArchitectureSpec::with_channels(&[4, 4], &[0]);
        let h = tiny_hierarchy(8, 2, 1);
        assert!(MeshPhys::<f32>::new(arch, h, "t", 0).is_err());
    }
}
