//! Scenario-sequence model with teacher-action, trajectory and skill heads.
//!
//! Each scenario's past window is embedded per step and run through
//! self-attention blocks; its local map is encoded polyline by polyline
//! (node MLP, max-pool, role embedding) and mixed by one order-free
//! attention block, then fused into the trajectory tokens by cross-attention.
//! The scenario token sets of a sequence are stacked together with learned
//! anchor tokens and mixed by one more block. The latent is a linear map of
//! the last scenario's time-pooled features concatenated with the features
//! pooled over the whole sequence.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{SequenceSample, TaskKind};
use crate::error::{Error, Result};
use crate::geom::{resample_polyline, LocalMap, Point2, Role, Scenario};
use crate::losses::{total_loss, HeadOutputs, LossCoefficients, LossReport, Targets};
use crate::nn::layers::{
    max_pool_backward, max_pool_rows, BlockCache, CrossAttention, CrossCache, Embedding, Linear, Mlp, MlpCache,
    TransformerBlock,
};
use crate::nn::{Grads, Mat, ParamSpec, ParamStore, Scalar, SpecBuilder};

/// Per-step trajectory features.
pub const TRAJ_FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub p_max: usize,
    pub n_steps: usize,
    pub m_steps: usize,
    pub q_modes: usize,
    pub n_map_tokens: usize,
    pub map_pts_per_polyline: usize,
    pub action_dim: usize,
    pub skill_dim: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Default sizes for a dataset kind.
    pub fn for_task(task: TaskKind) -> Self {
        let (m_steps, action_dim) = match task {
            TaskKind::Urban => (30, 3),
            TaskKind::Track => (40, 5),
        };
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            p_max: 5,
            n_steps: 40,
            m_steps,
            q_modes: 5,
            n_map_tokens: 16,
            map_pts_per_polyline: 10,
            action_dim,
            skill_dim: 2,
            head_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_heads,
            self.p_max,
            self.n_steps,
            self.m_steps,
            self.q_modes,
            self.n_map_tokens,
            self.action_dim,
            self.skill_dim,
            self.head_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.map_pts_per_polyline < 2 {
            return Err(Error::config("map_pts_per_polyline must be at least 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Closed-form parameter count.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let h = self.head_hidden;
        let block = TransformerBlock::n_params(d);
        Mlp::n_params(TRAJ_FEATURES, d, d)
            + self.n_steps * d
            + self.enc_layers * block
            + Mlp::n_params(2, d, d)
            + Role::ALL.len() * d
            + block
            + CrossAttention::n_params(d)
            + self.p_max * d
            + self.q_modes * d
            + block
            + Linear::n_params(2 * d, d)
            + Mlp::n_params(d, h, self.action_dim)
            + Mlp::n_params(d, h, self.skill_dim)
            + Mlp::n_params(2 * d, h, 2 * self.m_steps)
    }
}

/// Model-ready tensors of one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioInput<T> {
    pub traj: Mat<T>,
    /// One `[K, 2]` node matrix per kept polyline.
    pub polylines: Vec<Mat<T>>,
    pub roles: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput<T> {
    pub scenarios: Vec<ScenarioInput<T>>,
}

struct MapCache<T> {
    nodes: Vec<(MlpCache<T>, Vec<usize>, usize)>,
    roles: Vec<usize>,
    block: BlockCache<T>,
}

pub struct ScenarioCache<T> {
    mlp: MlpCache<T>,
    blocks: Vec<BlockCache<T>>,
    map: Option<(MapCache<T>, CrossCache<T>)>,
}

pub struct SampleCache<T> {
    scenarios: Vec<ScenarioCache<T>>,
    seq: BlockCache<T>,
    /// Per-scenario time-pool argmax and the sequence-pool argmax.
    time_arg: Vec<Vec<usize>>,
    seq_arg: Vec<usize>,
    z_in: Mat<T>,
    z: Mat<T>,
    teacher: MlpCache<T>,
    skill: MlpCache<T>,
    traj: MlpCache<T>,
    p: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    traj_embed: Mlp,
    time_pos: Embedding,
    traj_blocks: Vec<TransformerBlock>,
    map_node: Mlp,
    role_emb: Embedding,
    map_block: TransformerBlock,
    fuse: CrossAttention,
    slot_emb: Embedding,
    anchors: Embedding,
    seq_block: TransformerBlock,
    latent: Linear,
    teacher_head: Mlp,
    skill_head: Mlp,
    traj_head: Mlp,
}

fn add_row_broadcast<T: Scalar>(m: &mut Mat<T>, row: &[T]) {
    for r in 0..m.rows {
        for (a, b) in m.row_mut(r).iter_mut().zip(row) {
            *a = *a + *b;
        }
    }
}

fn sum_rows<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, m.cols);
    add_row_broadcast(&mut out, &vec![T::zero(); m.cols]);
    for r in 0..m.rows {
        for (a, b) in out.data.iter_mut().zip(m.row(r)) {
            *a = *a + *b;
        }
    }
    out
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.head_hidden;
        let mut sb = SpecBuilder::new();
        let traj_embed = Mlp::new(&mut sb, "traj.embed", TRAJ_FEATURES, d, d);
        let time_pos = Embedding::new(&mut sb, "traj.pos", cfg.n_steps, d);
        let traj_blocks = (0..cfg.enc_layers)
            .map(|i| TransformerBlock::new(&mut sb, &format!("traj.block{i}"), d, cfg.n_heads))
            .collect();
        let map_node = Mlp::new(&mut sb, "map.node", 2, d, d);
        let role_emb = Embedding::new(&mut sb, "map.role", Role::ALL.len(), d);
        let map_block = TransformerBlock::new(&mut sb, "map.block", d, cfg.n_heads);
        let fuse = CrossAttention::new(&mut sb, "fuse", d, cfg.n_heads);
        let slot_emb = Embedding::new(&mut sb, "seq.slot", cfg.p_max, d);
        let anchors = Embedding::new(&mut sb, "seq.anchor", cfg.q_modes, d);
        let seq_block = TransformerBlock::new(&mut sb, "seq.block", d, cfg.n_heads);
        let latent = Linear::new(&mut sb, "latent", 2 * d, d);
        let teacher_head = Mlp::new(&mut sb, "head.teacher", d, h, cfg.action_dim);
        let skill_head = Mlp::new(&mut sb, "head.skill", d, h, cfg.skill_dim);
        let traj_head = Mlp::new(&mut sb, "head.traj", 2 * d, h, 2 * cfg.m_steps);
        Ok(Model {
            specs: sb.specs().to_vec(),
            cfg,
            traj_embed,
            time_pos,
            traj_blocks,
            map_node,
            role_emb,
            map_block,
            fuse,
            slot_emb,
            anchors,
            seq_block,
            latent,
            teacher_head,
            skill_head,
            traj_head,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        ParamStore::init(&self.specs, seed)
    }

    /// Checks that `ps` has exactly this model's parameter manifest.
    pub fn check_params<T: Scalar>(&self, ps: &ParamStore<T>) -> Result<()> {
        if ps.len() != self.specs.len() {
            return Err(Error::data(format!(
                "parameter store has {} tensors, model expects {}",
                ps.len(),
                self.specs.len()
            )));
        }
        for (s, (n, v)) in self.specs.iter().zip(ps.names().iter().zip(ps.values())) {
            if &s.name != n || v.shape() != [s.rows, s.cols] {
                return Err(Error::data(format!(
                    "parameter {n:?} {:?} does not match expected {:?} {:?}",
                    v.shape(),
                    s.name,
                    [s.rows, s.cols]
                )));
            }
        }
        Ok(())
    }

    /// Builds model tensors for one scenario.
    pub fn prepare_scenario<T: Scalar>(&self, sc: &Scenario) -> Result<ScenarioInput<T>> {
        if sc.past.len() != self.cfg.n_steps {
            return Err(Error::contract(format!(
                "scenario past has {} steps, model expects {}",
                sc.past.len(),
                self.cfg.n_steps
            )));
        }
        let mut traj = Mat::zeros(self.cfg.n_steps, TRAJ_FEATURES);
        for (i, s) in sc.past.iter().enumerate() {
            let (dx, dy) = if i == 0 {
                (0.0, 0.0)
            } else {
                (s.x - sc.past[i - 1].x, s.y - sc.past[i - 1].y)
            };
            let f = [dx, dy, s.yaw.sin(), s.yaw.cos(), s.v / 30.0, s.steer, s.accel];
            for (k, v) in f.iter().enumerate() {
                traj.data[i * TRAJ_FEATURES + k] = T::of(*v);
            }
        }
        let (polylines, roles) = self.prepare_map(&sc.local_map)?;
        Ok(ScenarioInput { traj, polylines, roles })
    }

    fn prepare_map<T: Scalar>(&self, map: &LocalMap) -> Result<(Vec<Mat<T>>, Vec<usize>)> {
        let k = self.cfg.map_pts_per_polyline;
        let mut items: Vec<(f64, Vec<Point2>, usize)> = Vec::new();
        for pl in &map.polylines {
            if pl.pts.len() < 2 || crate::geom::polyline_length(&pl.pts) <= 1e-9 {
                continue;
            }
            let pts = resample_polyline(&pl.pts, k)?;
            let near = pts.iter().map(|p| p[0].hypot(p[1])).fold(f64::INFINITY, f64::min);
            items.push((near, pts, pl.role.index()));
        }
        if items.len() > self.cfg.n_map_tokens {
            // keep the nearest polylines; the full key makes the choice order-free
            items.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.2.cmp(&b.2))
                    .then_with(|| {
                        a.1.iter()
                            .flatten()
                            .zip(b.1.iter().flatten())
                            .map(|(x, y)| x.total_cmp(y))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
            });
            items.truncate(self.cfg.n_map_tokens);
        }
        let mut mats = Vec::with_capacity(items.len());
        let mut roles = Vec::with_capacity(items.len());
        for (_, pts, role) in items {
            let data = pts.iter().flat_map(|p| [T::of(p[0]), T::of(p[1])]).collect();
            mats.push(Mat::from_vec(k, 2, data)?);
            roles.push(role);
        }
        Ok((mats, roles))
    }

    pub fn prepare<T: Scalar>(&self, sample: &SequenceSample) -> Result<SampleInput<T>> {
        if sample.scenarios.is_empty() || sample.scenarios.len() > self.cfg.p_max {
            return Err(Error::contract(format!(
                "sequence has {} scenarios, model accepts 1..={}",
                sample.scenarios.len(),
                self.cfg.p_max
            )));
        }
        Ok(SampleInput {
            scenarios: sample
                .scenarios
                .iter()
                .map(|s| self.prepare_scenario(s))
                .collect::<Result<_>>()?,
        })
    }

    /// Encodes one scenario into `n_steps` fused tokens.
    pub fn encode_scenario<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        inp: &ScenarioInput<T>,
    ) -> Result<(Mat<T>, ScenarioCache<T>)> {
        let (mut x, mlp) = self.traj_embed.forward(ps, &inp.traj)?;
        x.add_assign(ps.get(self.time_pos.table));
        let mut blocks = Vec::with_capacity(self.traj_blocks.len());
        for b in &self.traj_blocks {
            let (y, c) = b.forward(ps, &x, None)?;
            blocks.push(c);
            x = y;
        }
        if inp.polylines.is_empty() {
            return Ok((x, ScenarioCache { mlp, blocks, map: None }));
        }
        let d = self.cfg.d_model;
        let mut tokens = Mat::zeros(inp.polylines.len(), d);
        let mut nodes = Vec::with_capacity(inp.polylines.len());
        for (i, pl) in inp.polylines.iter().enumerate() {
            let (h, c) = self.map_node.forward(ps, pl)?;
            let (pooled, arg) = max_pool_rows(&h);
            tokens.row_mut(i).copy_from_slice(&pooled.data);
            nodes.push((c, arg, h.rows));
        }
        tokens.add_assign(&self.role_emb.lookup(ps, &inp.roles)?);
        let (m, block) = self.map_block.forward(ps, &tokens, None)?;
        let (y, cross) = self.fuse.forward(ps, &x, &m)?;
        Ok((
            y,
            ScenarioCache {
                mlp,
                blocks,
                map: Some((
                    MapCache {
                        nodes,
                        roles: inp.roles.clone(),
                        block,
                    },
                    cross,
                )),
            },
        ))
    }

    fn encode_scenario_backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Grads<T>,
        c: &ScenarioCache<T>,
        dy: &Mat<T>,
    ) {
        let mut dx = dy.clone();
        if let Some((mc, cross)) = &c.map {
            let (dxx, dm) = self.fuse.backward(ps, g, cross, dy);
            dx = dxx;
            let dtok = self.map_block.backward(ps, g, &mc.block, &dm);
            self.role_emb.backward(g, &mc.roles, &dtok);
            for (i, (nc, arg, rows)) in mc.nodes.iter().enumerate() {
                let dh = max_pool_backward(*rows, arg, dtok.row(i));
                self.map_node.backward_params(ps, g, nc, &dh);
            }
        }
        for (b, bc) in self.traj_blocks.iter().zip(&c.blocks).rev() {
            dx = b.backward(ps, g, bc, &dx);
        }
        g.get_mut(self.time_pos.table).add_assign(&dx);
        self.traj_embed.backward_params(ps, g, &c.mlp, &dx);
    }

    /// Forward pass of one sequence.
    pub fn forward_sample<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        inp: &SampleInput<T>,
    ) -> Result<(HeadOutputs, SampleCache<T>)> {
        let p = inp.scenarios.len();
        let n = self.cfg.n_steps;
        let d = self.cfg.d_model;
        let q = self.cfg.q_modes;
        if p == 0 || p > self.cfg.p_max {
            return Err(Error::contract(format!("sequence has {p} scenarios, model accepts 1..={}", self.cfg.p_max)));
        }
        let mut scen_caches = Vec::with_capacity(p);
        let mut stacked = Mat::zeros(p * n + q, d);
        let slots = ps.get(self.slot_emb.table);
        for (i, si) in inp.scenarios.iter().enumerate() {
            let (mut e, c) = self.encode_scenario(ps, si)?;
            add_row_broadcast(&mut e, slots.row(i));
            stacked.data[i * n * d..(i + 1) * n * d].copy_from_slice(&e.data);
            scen_caches.push(c);
        }
        stacked.data[p * n * d..].copy_from_slice(&ps.get(self.anchors.table).data);
        let (y, seq) = self.seq_block.forward(ps, &stacked, None)?;

        let mut time_pool = Vec::with_capacity(p);
        let mut time_arg = Vec::with_capacity(p);
        for i in 0..p {
            let (pooled, arg) = max_pool_rows(&y.slice_rows(i * n, n));
            time_pool.push(pooled);
            time_arg.push(arg);
        }
        let mut seq_pool = time_pool[0].clone();
        let mut seq_arg = vec![0usize; d];
        for (i, tp) in time_pool.iter().enumerate().skip(1) {
            for c in 0..d {
                if tp.data[c] > seq_pool.data[c] {
                    seq_pool.data[c] = tp.data[c];
                    seq_arg[c] = i;
                }
            }
        }
        let z_in = Mat::hstack(&[&time_pool[p - 1], &seq_pool]);
        let z = self.latent.forward(ps, &z_in)?;
        let (logits, teacher) = self.teacher_head.forward(ps, &z)?;
        let (skill_out, skill) = self.skill_head.forward(ps, &z)?;
        let mut zq = Mat::zeros(q, d);
        for r in 0..q {
            zq.row_mut(r).copy_from_slice(&z.data);
        }
        let traj_in = Mat::hstack(&[&zq, &y.slice_rows(p * n, q)]);
        let (traj_out, traj) = self.traj_head.forward(ps, &traj_in)?;

        let out = HeadOutputs {
            teacher_logits: logits.data.iter().map(|v| v.f64()).collect(),
            traj: (0..q)
                .map(|r| traj_out.row(r).chunks(2).map(|c| [c[0].f64(), c[1].f64()]).collect())
                .collect(),
            skill: skill_out.data.iter().map(|v| v.f64()).collect(),
        };
        Ok((
            out,
            SampleCache {
                scenarios: scen_caches,
                seq,
                time_arg,
                seq_arg,
                z_in,
                z,
                teacher,
                skill,
                traj,
                p,
            },
        ))
    }

    /// Backward pass of one sequence given the loss gradient with respect to
    /// its head outputs; accumulates into `g`.
    pub fn backward_sample<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        g: &mut Grads<T>,
        c: &SampleCache<T>,
        dout: &HeadOutputs,
    ) -> Result<()> {
        let d = self.cfg.d_model;
        let n = self.cfg.n_steps;
        let q = self.cfg.q_modes;
        let p = c.p;
        let to_mat = |v: &[f64]| Mat::from_vec(1, v.len(), v.iter().map(|x| T::of(*x)).collect());
        let mut dz = self.teacher_head.backward(ps, g, &c.teacher, &to_mat(&dout.teacher_logits)?);
        dz.add_assign(&self.skill_head.backward(ps, g, &c.skill, &to_mat(&dout.skill)?));
        let dtraj = Mat::from_vec(
            q,
            2 * self.cfg.m_steps,
            dout.traj.iter().flatten().flat_map(|p| [T::of(p[0]), T::of(p[1])]).collect(),
        )?;
        let dtraj_in = self.traj_head.backward(ps, g, &c.traj, &dtraj);
        let parts = dtraj_in.hsplit(&[d, d]);
        dz.add_assign(&sum_rows(&parts[0]));
        let dz_in = self.latent.backward(ps, g, &c.z_in, &dz);
        debug_assert_eq!(c.z.cols, d);
        let halves = dz_in.hsplit(&[d, d]);
        let mut dtime: Vec<Vec<T>> = vec![vec![T::zero(); d]; p];
        for k in 0..d {
            dtime[p - 1][k] = dtime[p - 1][k] + halves[0].data[k];
            dtime[c.seq_arg[k]][k] = dtime[c.seq_arg[k]][k] + halves[1].data[k];
        }
        let mut dy = Mat::zeros(p * n + q, d);
        for i in 0..p {
            let block = max_pool_backward(n, &c.time_arg[i], &dtime[i]);
            dy.data[i * n * d..(i + 1) * n * d].copy_from_slice(&block.data);
        }
        dy.data[p * n * d..].copy_from_slice(&parts[1].data);
        let dx = self.seq_block.backward(ps, g, &c.seq, &dy);
        g.get_mut(self.anchors.table).add_assign(&dx.slice_rows(p * n, q));
        for (i, sc) in c.scenarios.iter().enumerate() {
            let de = dx.slice_rows(i * n, n);
            let ds = sum_rows(&de);
            for (a, b) in g.get_mut(self.slot_emb.table).row_mut(i).iter_mut().zip(&ds.data) {
                *a = *a + *b;
            }
            self.encode_scenario_backward(ps, g, sc, &de);
        }
        Ok(())
    }

    /// Forward pass over a batch; every sample must have the same `P`.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, batch: &[SampleInput<T>]) -> Result<Vec<HeadOutputs>> {
        check_uniform_p(batch)?;
        batch.iter().map(|s| self.forward_sample(ps, s).map(|o| o.0)).collect()
    }

    /// Total loss of a batch and its parameter gradients. Samples are
    /// processed in order, so the result is deterministic.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        batch: &[SampleInput<T>],
        targets: &[Targets],
        coeffs: &LossCoefficients,
        class_weights: &[f64],
    ) -> Result<(LossReport, Grads<T>)> {
        check_uniform_p(batch)?;
        let mut outs = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for s in batch {
            let (o, c) = self.forward_sample(ps, s)?;
            outs.push(o);
            caches.push(c);
        }
        let (rep, douts) = total_loss(&outs, targets, coeffs, class_weights)?;
        let mut g = ps.zero_grads();
        for (c, dout) in caches.iter().zip(&douts) {
            self.backward_sample(ps, &mut g, c, dout)?;
        }
        Ok((rep, g))
    }
}

fn check_uniform_p<T>(batch: &[SampleInput<T>]) -> Result<()> {
    if let Some(first) = batch.first() {
        let p = first.scenarios.len();
        if let Some(bad) = batch.iter().find(|s| s.scenarios.len() != p) {
            return Err(Error::contract(format!(
                "batch mixes sequence lengths {p} and {}",
                bad.scenarios.len()
            )));
        }
    }
    Ok(())
}
